//! Single-hidden-layer recurrent networks: the plain forward pass and the
//! fast-dropout forward pass carrying per-unit means and variances.
//!
//! Row-vector convention throughout: `h_t = f_h(x_t W_in + h_{t-1} W_rec + b_h)`
//! and `y_t = f_y(h_t W_out + b_y)`, so `W_in` is `kappa x gamma`, `W_rec` is
//! `gamma x gamma` and `W_out` is `gamma x omega`.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{
    draw_gaussian, presynaptic_blocks, transfer_batch, Block, KeepProb, TransferKind, TransferTrace,
};
use crate::real::Real;

/// Network parameters: weights, biases and the learned initial hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams<T = f64> {
    pub w_in: Array2<T>,
    pub w_rec: Array2<T>,
    pub w_out: Array2<T>,
    pub b_h: Array1<T>,
    pub b_y: Array1<T>,
    pub h0: Array1<T>,
}

/// Gradients share the parameter layout.
pub type ParamGrads<T = f64> = RnnParams<T>;

impl<T: Real> RnnParams<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        RnnParams {
            w_in: Array2::zeros((input_dim, hidden_dim)),
            w_rec: Array2::zeros((hidden_dim, hidden_dim)),
            w_out: Array2::zeros((hidden_dim, output_dim)),
            b_h: Array1::zeros(hidden_dim),
            b_y: Array1::zeros(output_dim),
            h0: Array1::zeros(hidden_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.hidden_dim();
        let checks: [(&'static str, usize, usize); 6] = [
            ("W_in columns", g, self.w_in.ncols()),
            ("W_rec columns", g, self.w_rec.ncols()),
            ("W_out rows", g, self.w_out.nrows()),
            ("b_h length", g, self.b_h.len()),
            ("h0 length", g, self.h0.len()),
            ("b_y length", self.output_dim(), self.b_y.len()),
        ];
        for (context, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    fn parts(&self) -> [&[T]; 6] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.w_rec.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.b_y.as_slice().expect("standard layout"),
            self.h0.as_slice().expect("standard layout"),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w_in.as_slice_mut().expect("standard layout"),
            self.w_rec.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
            self.b_y.as_slice_mut().expect("standard layout"),
            self.h0.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Parameters in a fixed order: `W_in, W_rec, W_out, b_h, b_y, h0`, each row-major.
    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.parts().into_iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.parts_mut().into_iter().flatten()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    /// Overwrite all entries from a flat vector in [`RnnParams::iter`] order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        for (dst, &src) in self.iter_mut().zip(flat) {
            *dst = src;
        }
        Ok(())
    }

    /// Apply `f` to each entry of `self` paired with the matching entry of `other`.
    pub fn zip_mut_with(&mut self, other: &Self, mut f: impl FnMut(&mut T, T)) {
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            f(a, b);
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        let mut out = self.clone();
        for v in out.iter_mut() {
            *v = f(*v);
        }
        out
    }

    /// Global L2 norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> RnnParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        RnnParams {
            w_in: c2(&self.w_in),
            w_rec: c2(&self.w_rec),
            w_out: c2(&self.w_out),
            b_h: c1(&self.b_h),
            b_y: c1(&self.b_y),
            h0: c1(&self.h0),
        }
    }
}

/// Keep probabilities per connection group. `p_hid` applies to the
/// hidden-to-hidden connections, `p_out` to hidden-to-output ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p_in: KeepProb,
    pub p_hid: KeepProb,
    pub p_out: KeepProb,
    /// Propagate moments through the output layer. When false the output
    /// layer is an ordinary forward pass on the hidden means.
    pub fd_final_layer: bool,
}

impl DropoutConfig {
    pub const NONE: DropoutConfig = DropoutConfig {
        p_in: KeepProb::ONE,
        p_hid: KeepProb::ONE,
        p_out: KeepProb::ONE,
        fd_final_layer: false,
    };

    pub fn new(p_in: f64, p_hid: f64, p_out: f64, fd_final_layer: bool) -> Result<Self> {
        Ok(DropoutConfig {
            p_in: KeepProb::new(p_in)?,
            p_hid: KeepProb::new(p_hid)?,
            p_out: KeepProb::new(p_out)?,
            fd_final_layer,
        })
    }
}

/// A batch of `N` sequences of `T` steps with `kappa` inputs each.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T = f64> {
    inputs: Array3<T>,
}

impl<T: Real> SequenceBatch<T> {
    pub fn new(inputs: Array3<T>) -> Result<Self> {
        if inputs.shape()[1] == 0 {
            return Err(Error::InvalidArgument(
                "sequence batch needs at least one time step".into(),
            ));
        }
        Ok(SequenceBatch { inputs })
    }

    pub fn inputs(&self) -> &Array3<T> {
        &self.inputs
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub(crate) fn step(&self, t: usize) -> ArrayView2<'_, T> {
        self.inputs.index_axis(Axis(1), t)
    }
}

pub(crate) fn check_batch<T: Real>(params: &RnnParams<T>, batch: &SequenceBatch<T>) -> Result<()> {
    params.validate()?;
    if batch.input_dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch input dimension vs W_in rows",
            expected: params.input_dim(),
            found: batch.input_dim(),
        });
    }
    Ok(())
}

pub(crate) fn broadcast_rows<T: Real>(v: &Array1<T>, n: usize) -> Array2<T> {
    v.broadcast((n, v.len())).expect("row broadcast").to_owned()
}

fn apply_transfer<T: Real>(kind: TransferKind, pre: &mut Array2<T>) {
    pre.mapv_inplace(|v| T::of(kind.apply(v.as_f64())));
}

fn ensure_finite<T: Real>(a: &Array2<T>, what: &'static str, step: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            step: Some(step),
        })
    }
}

/// Hidden states `h_0..h_T` (index 0 is the broadcast initial state) and outputs.
pub(crate) struct PlainTrace<T> {
    pub hidden: Vec<Array2<T>>,
    pub outputs: Array3<T>,
}

pub(crate) fn forward_plain_trace<T: Real>(
    params: &RnnParams<T>,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
) -> Result<PlainTrace<T>> {
    check_batch(params, batch)?;
    let n = batch.batch_size();
    let mut hidden = Vec::with_capacity(batch.steps() + 1);
    hidden.push(broadcast_rows(&params.h0, n));
    let mut outputs = Array3::zeros((n, batch.steps(), params.output_dim()));
    for t in 0..batch.steps() {
        let mut pre = batch.step(t).dot(&params.w_in) + hidden[t].dot(&params.w_rec) + &params.b_h;
        apply_transfer(f_h, &mut pre);
        let mut out = pre.dot(&params.w_out) + &params.b_y;
        apply_transfer(f_y, &mut out);
        ensure_finite(&out, "plain forward pass", t)?;
        outputs.index_axis_mut(Axis(1), t).assign(&out);
        hidden.push(pre);
    }
    Ok(PlainTrace { hidden, outputs })
}

/// Plain recurrent forward pass; returns `N x T x omega` outputs.
pub fn forward_plain<T: Real>(
    params: &RnnParams<T>,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
) -> Result<Array3<T>> {
    Ok(forward_plain_trace(params, f_h, f_y, batch)?.outputs)
}

/// Per-step quantities of the output layer needed for the backward pass.
#[derive(Clone, Debug)]
pub enum OutputTrace<T> {
    /// Fast-dropout output layer: partials of the output mean map.
    Moments {
        dmean_dmean: Array2<T>,
        dmean_dvar: Array2<T>,
    },
    /// Ordinary output layer on hidden means: `f_y'(o)`.
    Plain { slope: Array2<T> },
}

#[derive(Clone, Debug)]
pub struct StepTrace<T> {
    /// Hidden moments `h_t` with the partials of the transfer moment map.
    pub hidden: TransferTrace<T>,
    pub output: OutputTrace<T>,
}

/// Everything the fast-dropout forward pass computed, kept for BPTT.
#[derive(Clone, Debug)]
pub struct FdTrace<T> {
    pub h0: Array2<T>,
    pub steps: Vec<StepTrace<T>>,
}

impl<T: Real> FdTrace<T> {
    /// Hidden `(mean, var)` entering step `t`.
    pub fn previous_hidden(&self, t: usize) -> (ArrayView2<'_, T>, Option<ArrayView2<'_, T>>) {
        if t == 0 {
            (self.h0.view(), None)
        } else {
            let h = &self.steps[t - 1].hidden;
            (h.mean.view(), Some(h.var.view()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdOutput<T> {
    /// Output means, `N x T x omega`. Output variances are discarded.
    pub outputs: Array3<T>,
    pub trace: Option<FdTrace<T>>,
}

pub(crate) struct SquaredWeights<T> {
    pub w_in: Array2<T>,
    pub w_rec: Array2<T>,
    pub w_out: Array2<T>,
}

impl<T: Real> SquaredWeights<T> {
    pub fn of(params: &RnnParams<T>) -> Self {
        let sq = |a: &Array2<T>| a.mapv(|v| v * v);
        SquaredWeights {
            w_in: sq(&params.w_in),
            w_rec: sq(&params.w_rec),
            w_out: sq(&params.w_out),
        }
    }
}

/// Pre-synaptic hidden moments for one step. The layer input is the
/// concatenation `[h_{t-1}, x_t]` with weights `[W_rec; W_in]` and blockwise
/// keep probabilities.
pub(crate) fn hidden_presynaptic<T: Real>(
    params: &RnnParams<T>,
    sq: &SquaredWeights<T>,
    cfg: &DropoutConfig,
    prev_mean: ArrayView2<'_, T>,
    prev_var: Option<ArrayView2<'_, T>>,
    x: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let blocks = [
        Block {
            mean: prev_mean,
            var: prev_var,
            weights: params.w_rec.view(),
            weights_sq: sq.w_rec.view(),
            keep: cfg.p_hid,
        },
        Block {
            mean: x,
            var: None,
            weights: params.w_in.view(),
            weights_sq: sq.w_in.view(),
            keep: cfg.p_in,
        },
    ];
    presynaptic_blocks(&blocks, params.b_h.view())
}

/// Fast-dropout forward pass. With `retain_trace` the hidden moments and
/// moment-map partials of every step are kept for backpropagation.
pub fn forward_fd<T: Real>(
    params: &RnnParams<T>,
    cfg: &DropoutConfig,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    retain_trace: bool,
) -> Result<FdOutput<T>> {
    check_batch(params, batch)?;
    let n = batch.batch_size();
    let sq = SquaredWeights::of(params);
    let h0 = broadcast_rows(&params.h0, n);
    let mut outputs = Array3::zeros((n, batch.steps(), params.output_dim()));
    let mut steps: Vec<StepTrace<T>> =
        Vec::with_capacity(if retain_trace { batch.steps() } else { 0 });
    // only the latest hidden moments are needed when no trace is kept
    let mut last: Option<TransferTrace<T>> = None;

    for t in 0..batch.steps() {
        let (prev_mean, prev_var) = match (retain_trace, t) {
            (_, 0) => (h0.view(), None),
            (true, _) => (
                steps[t - 1].hidden.mean.view(),
                Some(steps[t - 1].hidden.var.view()),
            ),
            (false, _) => {
                let h = last.as_ref().expect("previous step");
                (h.mean.view(), Some(h.var.view()))
            }
        };
        let (a_mean, a_var) =
            hidden_presynaptic(params, &sq, cfg, prev_mean, prev_var, batch.step(t));
        let hidden = transfer_batch(f_h, &a_mean, &a_var).map_err(|e| at_step(e, t))?;
        ensure_finite(&hidden.mean, "hidden moments", t)?;

        let (y, output) = if cfg.fd_final_layer {
            let block = Block {
                mean: hidden.mean.view(),
                var: Some(hidden.var.view()),
                weights: params.w_out.view(),
                weights_sq: sq.w_out.view(),
                keep: cfg.p_out,
            };
            let (o_mean, o_var) = presynaptic_blocks(&[block], params.b_y.view());
            let out = transfer_batch(f_y, &o_mean, &o_var).map_err(|e| at_step(e, t))?;
            (
                out.mean,
                OutputTrace::Moments {
                    dmean_dmean: out.dmean_dmean,
                    dmean_dvar: out.dmean_dvar,
                },
            )
        } else {
            let pre = hidden.mean.dot(&params.w_out) + &params.b_y;
            let mut y = pre.clone();
            apply_transfer(f_y, &mut y);
            let mut slope = pre;
            Zip::from(&mut slope)
                .and(&y)
                .for_each(|s, &fy| *s = T::of(f_y.derivative(s.as_f64(), fy.as_f64())));
            (y, OutputTrace::Plain { slope })
        };
        ensure_finite(&y, "output", t)?;
        outputs.index_axis_mut(Axis(1), t).assign(&y);

        if retain_trace {
            steps.push(StepTrace { hidden, output });
        } else {
            last = Some(hidden);
        }
    }

    Ok(FdOutput {
        outputs,
        trace: retain_trace.then_some(FdTrace { h0, steps }),
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            step: Some(step),
        },
        other => other,
    }
}

/// Fast-dropout forward pass where every pre-synaptic activation is replaced
/// by a single draw from its Gaussian; downstream units see a point mass.
/// Draws are independent across steps.
pub fn forward_fd_sampled<T: Real, R: Rng + ?Sized>(
    params: &RnnParams<T>,
    cfg: &DropoutConfig,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    rng: &mut R,
) -> Result<Array3<T>> {
    check_batch(params, batch)?;
    let n = batch.batch_size();
    let sq = SquaredWeights::of(params);
    let mut h = broadcast_rows(&params.h0, n);
    let mut outputs = Array3::zeros((n, batch.steps(), params.output_dim()));
    for t in 0..batch.steps() {
        let (a_mean, a_var) = hidden_presynaptic(params, &sq, cfg, h.view(), None, batch.step(t));
        let mut drawn = draw_gaussian(a_mean.view(), a_var.view(), rng);
        apply_transfer(f_h, &mut drawn);
        h = drawn;

        let mut y = if cfg.fd_final_layer {
            let block = Block {
                mean: h.view(),
                var: None,
                weights: params.w_out.view(),
                weights_sq: sq.w_out.view(),
                keep: cfg.p_out,
            };
            let (o_mean, o_var) = presynaptic_blocks(&[block], params.b_y.view());
            draw_gaussian(o_mean.view(), o_var.view(), rng)
        } else {
            h.dot(&params.w_out) + &params.b_y
        };
        apply_transfer(f_y, &mut y);
        ensure_finite(&y, "sampled output", t)?;
        outputs.index_axis_mut(Axis(1), t).assign(&y);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{presynaptic_moments, transfer_moments, GaussianVec};
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_params(seed: u64, k: usize, g: usize, o: usize, scale: f64) -> RnnParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).unwrap();
        let mut p = RnnParams::zeros(k, g, o);
        for v in p.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        p
    }

    fn binary_batch(seed: u64, n: usize, t: usize, k: usize) -> SequenceBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceBatch::new(Array::from_shape_fn((n, t, k), |_| {
            if rng.random::<f64>() < 0.4 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn zero_recurrence_is_feedforward_per_step() {
        let mut p = random_params(1, 3, 4, 2, 0.7);
        p.w_rec.fill(0.0);
        let batch = binary_batch(2, 2, 5, 3);
        let out = forward_plain(&p, TransferKind::Tanh, TransferKind::Sigmoid, &batch).unwrap();
        for t in 0..5 {
            let h = (batch.step(t).dot(&p.w_in) + &p.b_h).mapv(f64::tanh);
            let y = (h.dot(&p.w_out) + &p.b_y).mapv(crate::moments::sigmoid);
            for (a, b) in out.index_axis(Axis(1), t).iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let p = RnnParams::<f64>::zeros(3, 4, 2);
        let out = forward_plain(
            &p,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &binary_batch(3, 2, 6, 3),
        )
        .unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_step_matches_two_layer_net() {
        let p = random_params(4, 2, 3, 1, 0.9);
        let batch = SequenceBatch::new(array![[[1.0, 0.0]]]).unwrap();
        let out = forward_plain(&p, TransferKind::Tanh, TransferKind::Identity, &batch).unwrap();
        let x = array![1.0, 0.0];
        let h = (x.dot(&p.w_in) + p.h0.dot(&p.w_rec) + &p.b_h).mapv(f64::tanh);
        let y = h.dot(&p.w_out) + &p.b_y;
        assert!((out[[0, 0, 0]] - y[0]).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = random_params(5, 3, 4, 2, 0.5);
        let batch = binary_batch(1, 1, 2, 4);
        assert!(matches!(
            forward_plain(&p, TransferKind::Tanh, TransferKind::Sigmoid, &batch),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut bad = p.clone();
        bad.b_h = Array1::zeros(3);
        assert!(bad.validate().is_err());
        assert!(SequenceBatch::new(Array3::<f64>::zeros((1, 0, 3))).is_err());
    }

    #[test]
    fn fd_without_dropout_reproduces_plain() {
        let p = random_params(6, 5, 7, 4, 0.6);
        let batch = binary_batch(7, 3, 9, 5);
        let plain = forward_plain(&p, TransferKind::Tanh, TransferKind::Sigmoid, &batch).unwrap();
        for fd_final in [false, true] {
            let cfg = DropoutConfig {
                fd_final_layer: fd_final,
                ..DropoutConfig::NONE
            };
            let fd = forward_fd(
                &p,
                &cfg,
                TransferKind::Tanh,
                TransferKind::Sigmoid,
                &batch,
                true,
            )
            .unwrap();
            for (a, b) in fd.outputs.iter().zip(plain.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
            let trace = fd.trace.unwrap();
            assert!(trace
                .steps
                .iter()
                .all(|s| s.hidden.var.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn single_unit_step_is_composition_of_moment_maps() {
        // gamma = 1, kappa = 2, one step
        let mut p = RnnParams::<f64>::zeros(2, 1, 1);
        p.w_in = array![[0.8], [-0.3]];
        p.w_rec = array![[0.5]];
        p.w_out = array![[1.5]];
        p.b_h = array![0.1];
        p.b_y = array![-0.2];
        p.h0 = array![0.4];
        let cfg = DropoutConfig::new(0.8, 0.6, 0.7, true).unwrap();
        let batch = SequenceBatch::new(array![[[1.0, 1.0]]]).unwrap();
        let out = forward_fd(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            true,
        )
        .unwrap();

        // hand composition: c = [h0, x] with keep probs [0.6, 0.8, 0.8]
        let a_mean = 0.6 * 0.4 * 0.5 + 0.8 * (0.8 - 0.3) + 0.1;
        let a_var = 0.6 * 0.4 * 0.4 * 0.4 * 0.25 + 0.8 * 0.2 * (0.64 + 0.09);
        let h = TransferKind::Tanh.moments(a_mean, a_var);
        let trace = out.trace.unwrap();
        assert!((trace.steps[0].hidden.mean[[0, 0]] - h.mean).abs() < 1e-14);
        assert!((trace.steps[0].hidden.var[[0, 0]] - h.var).abs() < 1e-14);

        let hv = GaussianVec::from_slices(&[h.mean], &[h.var]).unwrap();
        let o = presynaptic_moments(&hv, &p.w_out, &p.b_y, cfg.p_out).unwrap();
        let y = transfer_moments(&o, TransferKind::Sigmoid).unwrap();
        assert!((out.outputs[[0, 0, 0]] - y.mean()[0]).abs() < 1e-14);
    }

    #[test]
    fn plain_output_layer_ignores_hidden_variance() {
        let p = random_params(8, 3, 4, 2, 0.8);
        let batch = binary_batch(9, 2, 4, 3);
        let cfg = DropoutConfig::new(0.8, 0.7, 0.5, false).unwrap();
        let fd = forward_fd(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            true,
        )
        .unwrap();
        let trace = fd.trace.unwrap();
        for t in 0..4 {
            let hm = &trace.steps[t].hidden.mean;
            let y = (hm.dot(&p.w_out) + &p.b_y).mapv(crate::moments::sigmoid);
            for (a, b) in fd.outputs.index_axis(Axis(1), t).iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fd_is_deterministic_and_trace_optional() {
        let p = random_params(10, 4, 6, 3, 0.9);
        let batch = binary_batch(11, 2, 7, 4);
        let cfg = DropoutConfig::new(0.9, 0.6, 0.8, true).unwrap();
        let a = forward_fd(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            false,
        )
        .unwrap();
        let b = forward_fd(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            true,
        )
        .unwrap();
        assert!(a.trace.is_none());
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn hidden_moments_bounded_under_tanh() {
        let p = random_params(12, 4, 6, 2, 3.0);
        let batch = binary_batch(13, 3, 20, 4);
        let cfg = DropoutConfig::new(0.5, 0.3, 0.5, true).unwrap();
        let fd = forward_fd(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            true,
        )
        .unwrap();
        for s in fd.trace.unwrap().steps {
            assert!(s.hidden.mean.iter().all(|&m| m > -1.0 && m < 1.0));
            assert!(s.hidden.var.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sampled_pass_degenerates_and_is_seeded() {
        let p = random_params(14, 3, 5, 2, 0.7);
        let batch = binary_batch(15, 2, 6, 3);
        let plain = forward_plain(&p, TransferKind::Tanh, TransferKind::Sigmoid, &batch).unwrap();
        let cfg = DropoutConfig {
            fd_final_layer: true,
            ..DropoutConfig::NONE
        };
        let s = forward_fd_sampled(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for (a, b) in s.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let cfg = DropoutConfig::new(0.8, 0.5, 0.5, true).unwrap();
        let s1 = forward_fd_sampled(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let s2 = forward_fd_sampled(
            &p,
            &cfg,
            TransferKind::Tanh,
            TransferKind::Sigmoid,
            &batch,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn flat_round_trip_and_norm() {
        let p = random_params(16, 2, 3, 2, 1.0);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        let n2: f64 = flat.iter().map(|v| v * v).sum();
        assert!((p.norm() - n2.sqrt()).abs() < 1e-12);
    }
}
