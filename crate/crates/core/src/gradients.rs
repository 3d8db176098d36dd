//! Backpropagation through time for the plain and the fast-dropout networks,
//! a central-difference oracle, and the per-unit split of the fast-dropout
//! weight gradient into a loss part and a regularizer part.

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::error::{Error, Result};
use crate::losses::sequence_bce_nll_grad;
use crate::moments::{Block, GaussianVec, KeepProb, TransferKind};
use crate::network::{
    check_batch, forward_fd, forward_plain_trace, DropoutConfig, OutputTrace, ParamGrads,
    RnnParams, SequenceBatch, SquaredWeights,
};
use crate::real::Real;

/// Gradients flowing out of one input block of a fast-dropout layer.
#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub weights: Array2<T>,
    pub mean: Array2<T>,
    /// `None` when the block's inputs are deterministic.
    pub var: Option<Array2<T>>,
}

/// Reverse pass through `E[a] = p x W + b`, `V[a] = coef(x) W^2` for one block,
/// given upstream gradients with respect to `E[a]` and `V[a]`.
pub fn presynaptic_backward<T: Real>(
    block: &Block<'_, T>,
    g_mean: &Array2<T>,
    g_var: &Array2<T>,
) -> BlockGrads<T> {
    let p = T::of(block.keep.get());
    let pq = T::of(block.keep.mask_variance());
    let two = T::of(2.0);
    let coef = block.variance_coef();

    let mut weights = block.mean.t().dot(g_mean) * p;
    let through_var = coef.t().dot(g_var);
    Zip::from(&mut weights)
        .and(&through_var)
        .and(&block.weights)
        .for_each(|gw, &c, &w| *gw += two * w * c);

    // gradient w.r.t. the variance coefficient
    let g_coef = g_var.dot(&block.weights_sq.t());
    let mut mean = g_mean.dot(&block.weights.t()) * p;
    Zip::from(&mut mean)
        .and(&block.mean)
        .and(&g_coef)
        .for_each(|gm, &m, &gc| *gm += two * pq * m * gc);
    let var = block.var.as_ref().map(|_| g_coef.mapv(|v| v * p));
    BlockGrads { weights, mean, var }
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

fn check_loss_grad<T: Real>(g: &Array3<T>, outputs: &Array3<T>) -> Result<()> {
    if g.shape() != outputs.shape() {
        return Err(Error::DimensionMismatch {
            context: "loss gradient vs outputs",
            expected: outputs.len(),
            found: g.len(),
        });
    }
    Ok(())
}

/// Loss and gradient of the next-step cross-entropy through the
/// fast-dropout network.
pub fn backward_fd<T: Real>(
    params: &RnnParams<T>,
    cfg: &DropoutConfig,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    targets: &Array3<T>,
) -> Result<(f64, ParamGrads<T>)> {
    backward_fd_with(params, cfg, f_h, f_y, batch, |y| {
        sequence_bce_nll_grad(y, targets, None)
    })
}

/// Same as [`backward_fd`] with an arbitrary differentiable loss of the
/// output means; `loss` returns the value and its gradient.
pub fn backward_fd_with<T: Real, L>(
    params: &RnnParams<T>,
    cfg: &DropoutConfig,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    loss: L,
) -> Result<(f64, ParamGrads<T>)>
where
    L: FnOnce(&Array3<T>) -> Result<(f64, Array3<T>)>,
{
    let fwd = forward_fd(params, cfg, f_h, f_y, batch, true)?;
    let trace = fwd.trace.expect("trace retained");
    let (value, g_out) = loss(&fwd.outputs)?;
    check_loss_grad(&g_out, &fwd.outputs)?;

    let sq = SquaredWeights::of(params);
    let n = batch.batch_size();
    let hidden = params.hidden_dim();
    let mut grads = params.zeros_like();
    let mut carry_mean = Array2::<T>::zeros((n, hidden));
    let mut carry_var = Array2::<T>::zeros((n, hidden));

    for t in (0..batch.steps()).rev() {
        let step = &trace.steps[t];
        let h = &step.hidden;
        let dy = g_out.index_axis(Axis(1), t);

        let (mut g_hm, mut g_hv) = (carry_mean, carry_var);
        match &step.output {
            OutputTrace::Moments {
                dmean_dmean,
                dmean_dvar,
            } => {
                let g_om = &dy * dmean_dmean;
                let g_ov = &dy * dmean_dvar;
                let block = Block {
                    mean: h.mean.view(),
                    var: Some(h.var.view()),
                    weights: params.w_out.view(),
                    weights_sq: sq.w_out.view(),
                    keep: cfg.p_out,
                };
                let bg = presynaptic_backward(&block, &g_om, &g_ov);
                grads.w_out += &bg.weights;
                grads.b_y += &g_om.sum_axis(Axis(0));
                g_hm += &bg.mean;
                g_hv += bg.var.as_ref().expect("hidden block has variances");
            }
            OutputTrace::Plain { slope } => {
                let g_o = &dy * slope;
                grads.w_out += &h.mean.t().dot(&g_o);
                grads.b_y += &g_o.sum_axis(Axis(0));
                g_hm += &g_o.dot(&params.w_out.t());
            }
        }

        let g_am = &g_hm * &h.dmean_dmean + &g_hv * &h.dvar_dmean;
        let g_av = &g_hm * &h.dmean_dvar + &g_hv * &h.dvar_dvar;
        ensure_finite(&g_am, "mean gradient", t)?;
        ensure_finite(&g_av, "variance gradient", t)?;
        grads.b_h += &g_am.sum_axis(Axis(0));

        let x = batch.step(t);
        let input = Block {
            mean: x,
            var: None,
            weights: params.w_in.view(),
            weights_sq: sq.w_in.view(),
            keep: cfg.p_in,
        };
        grads.w_in += &presynaptic_backward(&input, &g_am, &g_av).weights;

        let (prev_mean, prev_var) = trace.previous_hidden(t);
        let rec = Block {
            mean: prev_mean,
            var: prev_var,
            weights: params.w_rec.view(),
            weights_sq: sq.w_rec.view(),
            keep: cfg.p_hid,
        };
        let bg = presynaptic_backward(&rec, &g_am, &g_av);
        grads.w_rec += &bg.weights;
        carry_var = bg.var.unwrap_or_else(|| Array2::zeros((n, hidden)));
        carry_mean = bg.mean;
    }
    // h0 is shared by every sequence and has no variance
    grads.h0 += &carry_mean.sum_axis(Axis(0));
    Ok((value, grads))
}

/// Loss and gradient of the next-step cross-entropy through the plain network.
pub fn backward_plain<T: Real>(
    params: &RnnParams<T>,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    targets: &Array3<T>,
) -> Result<(f64, ParamGrads<T>)> {
    backward_plain_with(params, f_h, f_y, batch, |y| {
        sequence_bce_nll_grad(y, targets, None)
    })
}

pub fn backward_plain_with<T: Real, L>(
    params: &RnnParams<T>,
    f_h: TransferKind,
    f_y: TransferKind,
    batch: &SequenceBatch<T>,
    loss: L,
) -> Result<(f64, ParamGrads<T>)>
where
    L: FnOnce(&Array3<T>) -> Result<(f64, Array3<T>)>,
{
    check_batch(params, batch)?;
    let trace = forward_plain_trace(params, f_h, f_y, batch)?;
    let (value, g_out) = loss(&trace.outputs)?;
    check_loss_grad(&g_out, &trace.outputs)?;

    let slope = |kind: TransferKind, pre: &Array2<T>, post: &Array2<T>| {
        let mut s = pre.clone();
        Zip::from(&mut s)
            .and(post)
            .for_each(|s, &f| *s = T::of(kind.derivative(s.as_f64(), f.as_f64())));
        s
    };

    let mut grads = params.zeros_like();
    let mut carry = Array2::<T>::zeros((batch.batch_size(), params.hidden_dim()));
    for t in (0..batch.steps()).rev() {
        let h_prev = &trace.hidden[t];
        let h = &trace.hidden[t + 1];
        let o = h.dot(&params.w_out) + &params.b_y;
        let y = trace.outputs.index_axis(Axis(1), t).to_owned();
        let g_o = &g_out.index_axis(Axis(1), t) * &slope(f_y, &o, &y);
        grads.w_out += &h.t().dot(&g_o);
        grads.b_y += &g_o.sum_axis(Axis(0));

        let g_h = carry + g_o.dot(&params.w_out.t());
        let pre = batch.step(t).dot(&params.w_in) + h_prev.dot(&params.w_rec) + &params.b_h;
        let g_pre = g_h * slope(f_h, &pre, h);
        ensure_finite(&g_pre, "hidden gradient", t)?;
        grads.b_h += &g_pre.sum_axis(Axis(0));
        grads.w_in += &batch.step(t).t().dot(&g_pre);
        grads.w_rec += &h_prev.t().dot(&g_pre);
        carry = g_pre.dot(&params.w_rec.t());
    }
    grads.h0 += &carry.sum_axis(Axis(0));
    Ok((value, grads))
}

/// Central differences `(f(x + eps) - f(x - eps)) / (2 eps)` for every parameter.
pub fn finite_difference_grad<F>(
    mut loss: F,
    params: &RnnParams<f64>,
    epsilon: f64,
) -> Result<ParamGrads<f64>>
where
    F: FnMut(&RnnParams<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut flat = base.clone();
        flat[i] = base[i] + epsilon;
        probe.assign_flat(&flat)?;
        let up = loss(&probe)?;
        flat[i] = base[i] - epsilon;
        probe.assign_flat(&flat)?;
        let down = loss(&probe)?;
        grad.push((up - down) / (2.0 * epsilon));
    }
    let mut out = params.zeros_like();
    out.assign_flat(&grad)?;
    Ok(out)
}

/// One unit's incoming connections: its input moments, weight vector and
/// keep probability.
#[derive(Clone, Debug)]
pub struct UnitContext {
    pub input: GaussianVec<f64>,
    pub weights: Array1<f64>,
    pub keep: KeepProb,
}

impl UnitContext {
    pub fn new(input: GaussianVec<f64>, weights: Array1<f64>, keep: KeepProb) -> Result<Self> {
        if input.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                context: "unit weights vs inputs",
                expected: input.len(),
                found: weights.len(),
            });
        }
        Ok(UnitContext {
            input,
            weights,
            keep,
        })
    }

    /// `p (1 - p) E[x_i]^2 + p V[x_i]` per incoming connection.
    pub fn variance_coef(&self) -> Array1<f64> {
        let p = self.keep.get();
        let pq = self.keep.mask_variance();
        Zip::from(self.input.mean())
            .and(self.input.var())
            .map_collect(|&m, &v| pq * m * m + p * v)
    }

    /// Pre-synaptic moments `(E[a], V[a])` with zero bias.
    pub fn presynaptic(&self) -> (f64, f64) {
        let mean = self.keep.get() * self.input.mean().dot(&self.weights);
        let var = self.variance_coef().dot(&self.weights.mapv(|w| w * w));
        (mean, var)
    }

    fn as_block<'a>(&'a self, w: &'a Array2<f64>, w_sq: &'a Array2<f64>) -> Block<'a, f64> {
        Block {
            mean: self.input.mean().view().insert_axis(Axis(0)),
            var: Some(self.input.var().view().insert_axis(Axis(0))),
            weights: w.view(),
            weights_sq: w_sq.view(),
            keep: self.keep,
        }
    }

    /// Weight gradient obtained from the layer backward pass, given the loss
    /// partials with respect to the unit's pre-synaptic mean and variance.
    pub fn weight_gradient(&self, dloss_dmean: f64, dloss_dvar: f64) -> Array1<f64> {
        let w = self.weights.clone().insert_axis(Axis(1));
        let w_sq = w.mapv(|v| v * v);
        let block = self.as_block(&w, &w_sq);
        let g = presynaptic_backward(
            &block,
            &Array2::from_elem((1, 1), dloss_dmean),
            &Array2::from_elem((1, 1), dloss_dvar),
        );
        g.weights.column(0).to_owned()
    }
}

/// Split of one unit's weight gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitDecomposition {
    /// Loss partial with respect to the pre-synaptic variance.
    pub delta: f64,
    /// Per-weight regularization strength, `|delta| coef_i`.
    pub eta: Array1<f64>,
    /// Gradient through the mean channel.
    pub loss_part: Array1<f64>,
    /// Weight-decay-like gradient through the variance channel.
    pub reg_part: Array1<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn decompose_unit_gradient(
    ctx: &UnitContext,
    dloss_dmean: f64,
    dloss_dvar: f64,
) -> UnitDecomposition {
    let p = ctx.keep.get();
    let delta = dloss_dvar;
    let eta = ctx.variance_coef().mapv(|c| delta.abs() * c);
    let loss_part = ctx.input.mean().mapv(|m| dloss_dmean * m * p);
    let s = sign(delta);
    let reg_part = Zip::from(&eta)
        .and(&ctx.weights)
        .map_collect(|&e, &w| 2.0 * s * e * w);
    UnitDecomposition {
        delta,
        eta,
        loss_part,
        reg_part,
    }
}

/// Noise term of the sampled-activation gradient:
/// `error_signal * sqrt(coef_i) * s` per incoming weight.
pub fn sampled_reg_term(ctx: &UnitContext, s: f64, error_signal: f64) -> Array1<f64> {
    ctx.variance_coef().mapv(|c| error_signal * c.sqrt() * s)
}
