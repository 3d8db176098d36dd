//! rmsprop with Nesterov momentum, gradient clipping, and the sparse
//! spectral-radius initialization of the recurrent weights.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ParamGrads, RnnParams};
use crate::real::Real;

/// Gradient norm threshold used unless configured otherwise.
pub const DEFAULT_CLIP: f64 = 225.0;

/// Rescale `g` to norm `threshold` when its global L2 norm exceeds it.
pub fn clip_gradient<T: Real>(g: ParamGrads<T>, threshold: f64) -> Result<ParamGrads<T>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    if !g.all_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            step: None,
        });
    }
    let norm = g.norm();
    if norm <= threshold {
        return Ok(g);
    }
    let scale = threshold / norm;
    Ok(g.map(|v| T::of(v.as_f64() * scale)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T = f64> {
    pub sq_avg: RnnParams<T>,
    pub velocity: RnnParams<T>,
    pub step_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
}

impl<T: Real> RmsPropState<T> {
    pub fn new(like: &RnnParams<T>, step_rate: f64, decay: f64, momentum: f64) -> Result<Self> {
        let state = RmsPropState {
            sq_avg: like.zeros_like(),
            velocity: like.zeros_like(),
            step_rate,
            decay,
            momentum,
            epsilon: 1e-8,
            clip_threshold: DEFAULT_CLIP,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} out of range: {v}")));
        if !(self.step_rate > 0.0) {
            return bad("step rate", self.step_rate);
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", self.decay);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.clip_threshold > 0.0) {
            return bad("clip threshold", self.clip_threshold);
        }
        Ok(())
    }
}

/// What one optimizer step saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Loss at the lookahead point.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One rmsprop step with Nesterov lookahead:
///
/// ```text
/// g = clip(grad(theta + momentum * v))
/// s = decay * s + (1 - decay) * g^2
/// v = momentum * v - step_rate * g / sqrt(s + eps)
/// theta = theta + v
/// ```
///
/// A non-finite gradient or update leaves `params` and `state` untouched.
pub fn rmsprop_nesterov_step<T: Real, F>(
    state: &mut RmsPropState<T>,
    params: &mut RnnParams<T>,
    mut grad_fn: F,
) -> Result<StepReport>
where
    F: FnMut(&RnnParams<T>) -> Result<(f64, ParamGrads<T>)>,
{
    state.validate()?;
    let mu = T::of(state.momentum);
    let mut lookahead = params.clone();
    lookahead.zip_mut_with(&state.velocity, |p, v| *p += mu * v);
    let (loss, grad) = grad_fn(&lookahead)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            step: None,
        });
    }
    let grad_norm = grad.norm();
    let g = clip_gradient(grad, state.clip_threshold)?;

    let decay = T::of(state.decay);
    let keep = T::of(1.0 - state.decay);
    let mut sq_avg = state.sq_avg.clone();
    sq_avg.zip_mut_with(&g, |s, gi| *s = decay * *s + keep * gi * gi);

    let eta = T::of(state.step_rate);
    let eps = T::of(state.epsilon);
    let mut velocity = state.velocity.clone();
    let mut scaled = g;
    scaled.zip_mut_with(&sq_avg, |gi, s| *gi = *gi / (s + eps).sqrt());
    velocity.zip_mut_with(&scaled, |v, gi| *v = mu * *v - eta * gi);

    let mut next = params.clone();
    next.zip_mut_with(&velocity, |p, v| *p += v);
    if !next.all_finite() || !velocity.all_finite() || !sq_avg.all_finite() {
        return Err(Error::NonFinite {
            what: "parameter update",
            step: None,
        });
    }
    *params = next;
    state.sq_avg = sq_avg;
    state.velocity = velocity;
    Ok(StepReport {
        loss,
        grad_norm,
        clipped: grad_norm > state.clip_threshold,
    })
}

/// Recipe for the recurrent weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub rho_target: f64,
    /// Maximum number of incoming connections per hidden unit.
    pub nu: Option<usize>,
    pub sigma2: f64,
    pub b_y_const: f64,
}

impl InitSpec {
    pub fn validate(&self, gamma: usize) -> Result<()> {
        if !(self.rho_target > 0.0) || !self.rho_target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "spectral radius must be positive, got {}",
                self.rho_target
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init variance must be positive, got {}",
                self.sigma2
            )));
        }
        match self.nu {
            Some(0) => Err(Error::InvalidArgument(
                "in-degree limit must be positive".into(),
            )),
            Some(nu) if nu > gamma => Err(Error::InvalidArgument(format!(
                "in-degree limit {nu} exceeds hidden size {gamma}"
            ))),
            _ => Ok(()),
        }
    }
}

const INIT_RETRIES: usize = 100;
const DEGENERATE_RADIUS: f64 = 1e-12;

/// Draw `N(0, sigma2)` entries, keep at most `nu` random nonzeros per column
/// (column `j` holds the connections into unit `j`), then rescale to the
/// target spectral radius.
pub fn init_recurrent<R: Rng + ?Sized>(
    spec: &InitSpec,
    gamma: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    spec.validate(gamma)?;
    if gamma == 0 {
        return Err(Error::InvalidArgument(
            "hidden size must be positive".into(),
        ));
    }
    let normal =
        Normal::new(0.0, spec.sigma2.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 0..INIT_RETRIES {
        let mut w = Array2::from_shape_simple_fn((gamma, gamma), || normal.sample(rng));
        if let Some(nu) = spec.nu.filter(|&nu| nu < gamma) {
            for j in 0..gamma {
                let mut keep = vec![false; gamma];
                for i in rand::seq::index::sample(rng, gamma, nu) {
                    keep[i] = true;
                }
                for (i, k) in keep.into_iter().enumerate() {
                    if !k {
                        w[[i, j]] = 0.0;
                    }
                }
            }
        }
        let rho = spectral_radius(&w);
        if rho > DEGENERATE_RADIUS && rho.is_finite() {
            w *= spec.rho_target / rho;
            return Ok(w);
        }
    }
    Err(Error::DegenerateSpectrum(INIT_RETRIES))
}

fn to_nalgebra<T: Real>(w: &Array2<T>) -> DMatrix<f64> {
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]].as_f64())
}

/// Largest eigenvalue modulus, from the real Schur form.
pub fn spectral_radius<T: Real>(w: &Array2<T>) -> f64 {
    assert_eq!(
        w.nrows(),
        w.ncols(),
        "spectral radius of a non-square matrix"
    );
    if w.is_empty() || w.iter().all(|v| *v == T::zero()) {
        return 0.0;
    }
    let m = to_nalgebra(w);
    match nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        None => power_iteration_radius(w, 1e-12, 1_000_000),
    }
}

/// Spectral radius by power iteration. Each pair of iterations fits
/// `x_{k+2} = a x_{k+1} + b x_k`, so a dominant complex-conjugate pair is
/// resolved as well as a dominant real eigenvalue. Slow when the dominant
/// moduli are close; meant as a cross-check.
pub fn power_iteration_radius<T: Real>(w: &Array2<T>, tol: f64, max_iter: usize) -> f64 {
    let m = to_nalgebra(w);
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // fixed, dense start vector
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 13) as f64));
    x /= x.norm();
    let mut prev = f64::NAN;
    let mut stable = 0;
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let y1 = &m * &x;
        let y2 = &m * &y1;
        let (g00, g01, g11) = (x.dot(&x), x.dot(&y1), y1.dot(&y1));
        let (r0, r1) = (x.dot(&y2), y1.dot(&y2));
        let det = g00 * g11 - g01 * g01;
        estimate = if det > 1e-20 * g00 * g11 {
            // least squares for y2 = b x + a y1
            let b = (g11 * r0 - g01 * r1) / det;
            let a = (g00 * r1 - g01 * r0) / det;
            let disc = a * a + 4.0 * b;
            if disc >= 0.0 {
                let s = disc.sqrt();
                ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
            } else {
                (-b).sqrt()
            }
        } else {
            g01.abs() / g00
        };
        let norm = y2.norm();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        x = y2 / norm;
        if (estimate - prev).abs() <= tol * estimate.max(f64::MIN_POSITIVE) {
            stable += 1;
            if stable >= 5 {
                break;
            }
        } else {
            stable = 0;
        }
        prev = estimate;
    }
    estimate
}
