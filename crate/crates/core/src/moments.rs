//! Gaussian moment propagation through dropout-masked affine maps and
//! through elementwise transfer functions.
//!
//! A layer input `x` is described by per-unit means and variances (diagonal
//! covariance). Each incoming unit is kept with probability `p`; the mask is
//! marginalized analytically, giving for output unit `j`
//!
//! ```text
//! E[a_j] = p * sum_i E[x_i] W_ij + b_j
//! V[a_j] = sum_i (p (1 - p) E[x_i]^2 + p V[x_i]) W_ij^2
//! ```
//!
//! Biases are deterministic and never dropped.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Negative variances down to this magnitude are treated as roundoff and
/// clamped to zero; anything below is rejected.
pub const VARIANCE_TOLERANCE: f64 = 1e-12;

/// Probability that a unit is kept (the complement of the dropout rate).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct KeepProb(f64);

impl KeepProb {
    pub const ONE: KeepProb = KeepProb(1.0);

    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(KeepProb(p))
        } else {
            Err(Error::InvalidProbability(p))
        }
    }

    pub fn from_drop_rate(rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidProbability(rate));
        }
        Ok(KeepProb(1.0 - rate))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// Per-unit variance contribution factor `p (1 - p)` of the Bernoulli mask.
    #[inline]
    pub fn mask_variance(self) -> f64 {
        self.0 * (1.0 - self.0)
    }
}

impl TryFrom<f64> for KeepProb {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        KeepProb::new(p)
    }
}

impl From<KeepProb> for f64 {
    fn from(p: KeepProb) -> f64 {
        p.0
    }
}

pub(crate) fn check_variance(index: usize, value: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -VARIANCE_TOLERANCE {
        Ok(0.0)
    } else if value.is_nan() {
        Err(Error::NonFinite {
            what: "variance",
            step: None,
        })
    } else {
        Err(Error::NegativeVariance { index, value })
    }
}

/// Paired means and variances of a layer of stochastic units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVec<T = f64> {
    mean: Array1<T>,
    var: Array1<T>,
}

impl<T: Real> GaussianVec<T> {
    pub fn new(mean: Array1<T>, mut var: Array1<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian vector variance",
                expected: mean.len(),
                found: var.len(),
            });
        }
        for (i, v) in var.iter_mut().enumerate() {
            *v = T::of(check_variance(i, v.as_f64())?);
        }
        Ok(GaussianVec { mean, var })
    }

    /// A point mass: zero variance everywhere.
    pub fn deterministic(mean: Array1<T>) -> Self {
        let var = Array1::zeros(mean.len());
        GaussianVec { mean, var }
    }

    pub fn from_slices(mean: &[T], var: &[T]) -> Result<Self> {
        Self::new(Array1::from(mean.to_vec()), Array1::from(var.to_vec()))
    }

    pub fn mean(&self) -> &Array1<T> {
        &self.mean
    }

    pub fn var(&self) -> &Array1<T> {
        &self.var
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn into_parts(self) -> (Array1<T>, Array1<T>) {
        (self.mean, self.var)
    }
}

/// Elementwise transfer function of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferKind {
    Tanh,
    Sigmoid,
    Rectifier,
    Identity,
}

impl TransferKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            TransferKind::Tanh => x.tanh(),
            TransferKind::Sigmoid => sigmoid(x),
            TransferKind::Rectifier => x.max(0.0),
            TransferKind::Identity => x,
        }
    }

    /// `f'(x)` given `x` and `f(x)`.
    #[inline]
    pub fn derivative(self, x: f64, fx: f64) -> f64 {
        match self {
            TransferKind::Tanh => 1.0 - fx * fx,
            TransferKind::Sigmoid => fx * (1.0 - fx),
            TransferKind::Rectifier => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TransferKind::Identity => 1.0,
        }
    }

    /// Mean and variance of `f(a)` for `a ~ N(mean, var)` together with their
    /// partial derivatives. Exact at `var == 0`.
    pub fn moments(self, mean: f64, var: f64) -> MomentJacobian {
        match self {
            TransferKind::Tanh => tanh_moments(mean, var),
            TransferKind::Sigmoid => sigmoid_moments(mean, var),
            TransferKind::Rectifier => rectifier_moments(mean, var),
            TransferKind::Identity => MomentJacobian {
                mean,
                var,
                dmean_dmean: 1.0,
                dmean_dvar: 0.0,
                dvar_dmean: 0.0,
                dvar_dvar: 1.0,
            },
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(TransferKind::Tanh),
            "sigmoid" => Some(TransferKind::Sigmoid),
            "rectifier" | "relu" => Some(TransferKind::Rectifier),
            "identity" => Some(TransferKind::Identity),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output moments of a transfer map and their partials with respect to the
/// input mean and variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentJacobian {
    pub mean: f64,
    pub var: f64,
    pub dmean_dmean: f64,
    pub dmean_dvar: f64,
    pub dvar_dmean: f64,
    pub dvar_dvar: f64,
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

// tanh(x) ~ erf(ERF_SCALE x), slope matched at the origin. The Gaussian
// expectation of the surrogate is closed form; the surrogate's residual
// tanh - erf is added back with a weight decaying in the variance so the
// map is exact at zero variance.
const ERF_SCALE: f64 = 0.886_226_925_452_758; // sqrt(pi) / 2
const RESIDUAL_DECAY: f64 = 2.0 * ERF_SCALE * ERF_SCALE; // pi / 2

// Variance uses the probit-type surrogate 2 Phi(VAR_SCALE x) - 1, whose
// variance is 4 (Phi2(h, h; rho) - Phi(h)^2). Writing the bivariate normal
// difference as an integral over the correlation and substituting r = sin t
// gives (2 / pi) int_0^asin(rho) exp(-h^2 / (1 + sin t)) dt, which is
// nonnegative, bounded by 1, and zero at zero variance. The scale is fitted
// against quadrature over mean in [-6, 6], variance in [0, 16].
const VAR_SCALE: f64 = 1.18;

// 8-point Gauss-Legendre rule mapped to [0, 1].
const GL_NODES: [f64; 8] = [
    0.019_855_071_751_231_856,
    0.101_666_761_293_186_63,
    0.237_233_795_041_835_5,
    0.408_282_678_752_175_1,
    0.591_717_321_247_825,
    0.762_766_204_958_164_5,
    0.898_333_238_706_813_4,
    0.980_144_928_248_768_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.050_614_268_145_188_13,
    0.111_190_517_226_687_24,
    0.156_853_322_938_943_64,
    0.181_341_891_689_180_97,
    0.181_341_891_689_180_97,
    0.156_853_322_938_943_64,
    0.111_190_517_226_687_24,
    0.050_614_268_145_188_13,
];

fn tanh_moments(mu: f64, v: f64) -> MomentJacobian {
    // mean
    let lam = ERF_SCALE;
    let q = 1.0 + RESIDUAL_DECAY * v;
    let sq = q.sqrt();
    let dinv_sq_dv = -0.5 * RESIDUAL_DECAY / (q * sq);
    let u = lam * mu / sq;
    let erf_u = libm::erf(u);
    let derf_u = FRAC_2_SQRT_PI * (-u * u).exp();
    let t = mu.tanh();
    let residual = t - libm::erf(lam * mu);
    let dresidual = 1.0 - t * t - FRAC_2_SQRT_PI * (-(lam * mu) * (lam * mu)).exp() * lam;
    let mean = if v == 0.0 { t } else { erf_u + residual / sq };
    let dmean_dmean = derf_u * lam / sq + dresidual / sq;
    let dmean_dvar = derf_u * lam * mu * dinv_sq_dv + residual * dinv_sq_dv;

    // variance
    let k = VAR_SCALE;
    let k2 = k * k;
    let p = 1.0 + k2 * v;
    let sp = p.sqrt();
    let h = k * mu / sp;
    let rho = k2 * v / p;
    let theta = rho.asin();
    let (mut sum_e, mut sum_h, mut sum_t) = (0.0, 0.0, 0.0);
    for (&node, &w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
        let (s, c) = (theta * node).sin_cos();
        let denom = 1.0 + s;
        let e = (-h * h / denom).exp();
        sum_e += w * e;
        sum_h += w * e * (-2.0 * h / denom);
        sum_t += w * e * h * h * node * c / (denom * denom);
    }
    let scale = std::f64::consts::FRAC_2_PI;
    let var = (scale * theta * sum_e).min(1.0);
    let dvar_dh = scale * theta * sum_h;
    let dvar_dtheta = scale * (sum_e + theta * sum_t);
    let dh_dmu = k / sp;
    let dh_dv = -0.5 * k2 * k * mu / (p * sp);
    let dtheta_dv = k2 / (p * sp * (1.0 + rho).sqrt());

    MomentJacobian {
        mean,
        var,
        dmean_dmean,
        dmean_dvar,
        dvar_dmean: dvar_dh * dh_dmu,
        dvar_dvar: dvar_dh * dh_dv + dvar_dtheta * dtheta_dv,
    }
}

// sigmoid(x) = (1 + tanh(x / 2)) / 2
fn sigmoid_moments(mu: f64, v: f64) -> MomentJacobian {
    let t = tanh_moments(0.5 * mu, 0.25 * v);
    MomentJacobian {
        mean: if v == 0.0 {
            sigmoid(mu)
        } else {
            0.5 * (1.0 + t.mean)
        },
        var: 0.25 * t.var,
        dmean_dmean: 0.25 * t.dmean_dmean,
        dmean_dvar: 0.125 * t.dmean_dvar,
        dvar_dmean: 0.125 * t.dvar_dmean,
        dvar_dvar: 0.0625 * t.dvar_dvar,
    }
}

#[inline]
fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[inline]
fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn rectifier_moments(mu: f64, v: f64) -> MomentJacobian {
    if v == 0.0 {
        let on = if mu > 0.0 { 1.0 } else { 0.0 };
        return MomentJacobian {
            mean: mu.max(0.0),
            var: 0.0,
            dmean_dmean: on,
            dmean_dvar: 0.0,
            dvar_dmean: 0.0,
            dvar_dvar: on,
        };
    }
    let s = v.sqrt();
    let z = mu / s;
    let cdf = normal_cdf(z);
    let pdf = normal_pdf(z);
    let mean = mu * cdf + s * pdf;
    // V / v written to avoid cancelling O(z^2) terms for large |z|
    let ratio = if z <= 0.0 {
        (z * z + 1.0) * cdf + z * pdf - (z * cdf + pdf).powi(2)
    } else {
        // with Q = 1 - Phi(z): 1 + (z^2 - 1) Q - z phi - (z Q - phi)^2
        let tail = normal_cdf(-z);
        let lead = z * tail - pdf;
        1.0 + (z * z - 1.0) * tail - z * pdf - lead * lead
    };
    let var = (v * ratio).max(0.0);
    MomentJacobian {
        mean,
        var,
        dmean_dmean: cdf,
        dmean_dvar: pdf / (2.0 * s),
        dvar_dmean: 2.0 * mean * (1.0 - cdf),
        dvar_dvar: cdf - mean * pdf / s,
    }
}

/// Post-synaptic moments `(E[f(a)], V[f(a)])` for `a ~ N(a.mean, a.var)`.
pub fn transfer_moments<T: Real>(a: &GaussianVec<T>, kind: TransferKind) -> Result<GaussianVec<T>> {
    let n = a.len();
    let mut mean = Array1::zeros(n);
    let mut var = Array1::zeros(n);
    for i in 0..n {
        let m = kind.moments(a.mean[i].as_f64(), a.var[i].as_f64());
        mean[i] = T::of(m.mean);
        var[i] = T::of(check_variance(i, m.var)?);
    }
    Ok(GaussianVec { mean, var })
}

/// Gaussian weight distribution of adaptive weight noise (elementwise).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDist<T = f64> {
    mean: Array2<T>,
    var: Array2<T>,
}

impl<T: Real> WeightDist<T> {
    pub fn new(mean: Array2<T>, var: Array2<T>) -> Result<Self> {
        if mean.dim() != var.dim() {
            return Err(Error::DimensionMismatch {
                context: "weight distribution variance",
                expected: mean.len(),
                found: var.len(),
            });
        }
        if let Some((i, v)) = var.iter().enumerate().find(|(_, v)| v.as_f64() < 0.0) {
            return Err(Error::NegativeVariance {
                index: i,
                value: v.as_f64(),
            });
        }
        Ok(WeightDist { mean, var })
    }

    pub fn mean(&self) -> &Array2<T> {
        &self.mean
    }

    pub fn var(&self) -> &Array2<T> {
        &self.var
    }
}

fn check_layer<T: Real>(x: &GaussianVec<T>, w: &Array2<T>, bias: &Array1<T>) -> Result<()> {
    if w.nrows() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "weight rows vs input units",
            expected: x.len(),
            found: w.nrows(),
        });
    }
    if bias.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            context: "bias vs weight columns",
            expected: w.ncols(),
            found: bias.len(),
        });
    }
    Ok(())
}

/// Pre-synaptic moments of `a = (d o x)^T W + b` with `d_i ~ Bernoulli(p)`.
pub fn presynaptic_moments<T: Real>(
    x: &GaussianVec<T>,
    w: &Array2<T>,
    bias: &Array1<T>,
    p: KeepProb,
) -> Result<GaussianVec<T>> {
    check_layer(x, w, bias)?;
    let w_sq = w.mapv(|v| v * v);
    let mean2 = x.mean.view().insert_axis(ndarray::Axis(0));
    let var2 = x.var.view().insert_axis(ndarray::Axis(0));
    let block = Block {
        mean: mean2,
        var: Some(var2),
        weights: w.view(),
        weights_sq: w_sq.view(),
        keep: p,
    };
    let (m, v) = presynaptic_blocks(&[block], bias.view());
    let n = m.ncols();
    let mean = m.into_shape_with_order(n).expect("single row");
    let var = v.into_shape_with_order(n).expect("single row");
    GaussianVec::new(mean, var)
}

/// Adaptive-weight-noise pre-synaptic moments of `a = x^T w` with
/// independent Gaussian inputs and weights.
pub fn awn_presynaptic_moments<T: Real>(
    x: &GaussianVec<T>,
    w: &WeightDist<T>,
) -> Result<GaussianVec<T>> {
    if w.mean.nrows() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "weight rows vs input units",
            expected: x.len(),
            found: w.mean.nrows(),
        });
    }
    let mean = x.mean.dot(&w.mean);
    let mu_w_sq = w.mean.mapv(|v| v * v);
    let mu_x_sq = x.mean.mapv(|v| v * v);
    let var = x.var.dot(&mu_w_sq) + x.var.dot(&w.var) + mu_x_sq.dot(&w.var);
    GaussianVec::new(mean, var)
}

/// One Gaussian draw `E[a] + s sqrt(V[a])` per output unit.
pub fn sample_presynaptic<T: Real, R: Rng + ?Sized>(
    x: &GaussianVec<T>,
    w: &Array2<T>,
    bias: &Array1<T>,
    p: KeepProb,
    rng: &mut R,
) -> Result<Array1<T>> {
    let a = presynaptic_moments(x, w, bias, p)?;
    Ok(draw_gaussian(a.mean.view(), a.var.view(), rng))
}

pub(crate) fn draw_gaussian<T: Real, R: Rng + ?Sized, D: ndarray::Dimension>(
    mean: ndarray::ArrayView<T, D>,
    var: ndarray::ArrayView<T, D>,
    rng: &mut R,
) -> ndarray::Array<T, D> {
    let mut out = mean.to_owned();
    Zip::from(&mut out).and(&var).for_each(|o, &v| {
        let s: f64 = rng.sample(StandardNormal);
        *o += T::of(s) * v.sqrt();
    });
    out
}

/// One group of incoming units of a layer with its own keep probability.
/// Summing several blocks is the same as concatenating their inputs and
/// stacking their weight matrices row-wise.
pub struct Block<'a, T> {
    /// Batch of input means, `N x rows(W)`.
    pub mean: ArrayView2<'a, T>,
    /// Input variances; `None` for deterministic inputs.
    pub var: Option<ArrayView2<'a, T>>,
    pub weights: ArrayView2<'a, T>,
    pub weights_sq: ArrayView2<'a, T>,
    pub keep: KeepProb,
}

impl<T: Real> Block<'_, T> {
    /// `p (1 - p) E[x]^2 + p V[x]`, the factor multiplying `W^2` in `V[a]`.
    pub fn variance_coef(&self) -> Array2<T> {
        let p = T::of(self.keep.get());
        let pq = T::of(self.keep.mask_variance());
        let mut coef = self.mean.mapv(|m| pq * m * m);
        if let Some(var) = &self.var {
            Zip::from(&mut coef).and(var).for_each(|c, &v| *c += p * v);
        }
        coef
    }
}

/// Batched pre-synaptic moments over a concatenation of input blocks.
pub fn presynaptic_blocks<T: Real>(
    blocks: &[Block<'_, T>],
    bias: ArrayView1<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let n = blocks.first().map_or(0, |b| b.mean.nrows());
    let units = bias.len();
    let mut mean = Array2::<T>::zeros((n, units));
    let mut var = Array2::<T>::zeros((n, units));
    for b in blocks {
        let p = T::of(b.keep.get());
        ndarray::linalg::general_mat_mul(p, &b.mean, &b.weights, T::one(), &mut mean);
        let coef = b.variance_coef();
        ndarray::linalg::general_mat_mul(T::one(), &coef, &b.weights_sq, T::one(), &mut var);
    }
    mean += &bias.insert_axis(ndarray::Axis(0));
    (mean, var)
}

/// Post-synaptic moments of a batch plus the partials needed for BPTT.
#[derive(Clone, Debug)]
pub struct TransferTrace<T> {
    pub mean: Array2<T>,
    pub var: Array2<T>,
    pub dmean_dmean: Array2<T>,
    pub dmean_dvar: Array2<T>,
    pub dvar_dmean: Array2<T>,
    pub dvar_dvar: Array2<T>,
}

pub fn transfer_batch<T: Real>(
    kind: TransferKind,
    a_mean: &Array2<T>,
    a_var: &Array2<T>,
) -> Result<TransferTrace<T>> {
    let dim = a_mean.dim();
    let mut tr = TransferTrace {
        mean: Array2::zeros(dim),
        var: Array2::zeros(dim),
        dmean_dmean: Array2::zeros(dim),
        dmean_dvar: Array2::zeros(dim),
        dvar_dmean: Array2::zeros(dim),
        dvar_dvar: Array2::zeros(dim),
    };
    for ((r, c), &m) in a_mean.indexed_iter() {
        let v = check_variance(c, a_var[(r, c)].as_f64())?;
        let j = kind.moments(m.as_f64(), v);
        let idx = (r, c);
        tr.mean[idx] = T::of(j.mean);
        tr.var[idx] = T::of(check_variance(c, j.var)?);
        tr.dmean_dmean[idx] = T::of(j.dmean_dmean);
        tr.dmean_dvar[idx] = T::of(j.dmean_dvar);
        tr.dvar_dmean[idx] = T::of(j.dvar_dmean);
        tr.dvar_dvar[idx] = T::of(j.dvar_dvar);
    }
    Ok(tr)
}
