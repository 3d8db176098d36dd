//! Training/evaluation objectives.
//!
//! The sequence loss is next-step Bernoulli cross-entropy: the prediction at
//! step `t` is scored against the observation at step `t + 1`.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::TransferKind;
use crate::real::Real;

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

fn check_shapes<T: Real>(outputs: &Array3<T>, targets: &Array3<T>) -> Result<()> {
    if outputs.shape() != targets.shape() {
        return Err(Error::DimensionMismatch {
            context: "outputs vs targets",
            expected: outputs.len(),
            found: targets.len(),
        });
    }
    if outputs.shape()[1] < 2 {
        return Err(Error::InvalidArgument(
            "next-step loss needs sequences of at least two steps".into(),
        ));
    }
    Ok(())
}

/// Average next-step negative log-likelihood, summed over output units and
/// averaged over the `T - 1` scored steps and the `N` sequences.
pub fn sequence_bce_nll<T: Real>(outputs: &Array3<T>, targets: &Array3<T>) -> Result<f64> {
    sequence_bce(outputs, targets, None, false).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to `outputs`.
///
/// `leading_pad` optionally gives, per sequence, the number of zero-prepended
/// steps; pairs whose prediction step lies in the padding are then skipped
/// and the normalization counts only scored pairs.
pub fn sequence_bce_nll_grad<T: Real>(
    outputs: &Array3<T>,
    targets: &Array3<T>,
    leading_pad: Option<&[usize]>,
) -> Result<(f64, Array3<T>)> {
    let (loss, grad) = sequence_bce(outputs, targets, leading_pad, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn sequence_bce<T: Real>(
    outputs: &Array3<T>,
    targets: &Array3<T>,
    leading_pad: Option<&[usize]>,
    with_grad: bool,
) -> Result<(f64, Option<Array3<T>>)> {
    check_shapes(outputs, targets)?;
    let (n, steps, units) = outputs.dim();
    if let Some(pad) = leading_pad {
        if pad.len() != n {
            return Err(Error::DimensionMismatch {
                context: "padding mask vs batch size",
                expected: n,
                found: pad.len(),
            });
        }
    }
    let first_scored = |k: usize| leading_pad.map_or(0, |p| p[k]);
    let pairs: usize = (0..n)
        .map(|k| (steps - 1).saturating_sub(first_scored(k)))
        .sum();
    if pairs == 0 {
        return Err(Error::InvalidArgument(
            "no scored time steps in batch".into(),
        ));
    }
    // the unmasked normalization is 1 / ((T - 1) N)
    let scale = 1.0 / pairs as f64;

    let mut grad = with_grad.then(|| Array3::<T>::zeros(outputs.dim()));
    let mut total = 0.0;
    for k in 0..n {
        for t in first_scored(k)..steps - 1 {
            for i in 0..units {
                let y = outputs[[k, t, i]].as_f64();
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::InvalidPrediction {
                        index: (k * steps + t) * units + i,
                        value: y,
                    });
                }
                let z = targets[[k, t + 1, i]].as_f64();
                let yc = y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                total -= z * yc.ln() + (1.0 - z) * (1.0 - yc).ln();
                if let Some(g) = grad.as_mut() {
                    if yc == y {
                        g[[k, t, i]] = T::of(-scale * (z / y - (1.0 - z) / (1.0 - y)));
                    }
                }
            }
        }
    }
    Ok((total * scale, grad))
}

/// Per-step NLL of each sequence, then averaged over sequences. Sequences
/// shorter than two steps have nothing to score and are skipped.
pub fn mean_sequence_nll<T: Real>(
    per_sequence: impl IntoIterator<Item = (Array3<T>, Array3<T>)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (outputs, targets) in per_sequence {
        if outputs.len_of(Axis(1)) < 2 {
            continue;
        }
        sum += sequence_bce_nll(&outputs, &targets)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "no sequence with at least two steps".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Single-unit loss families used to study how the pre-synaptic variance
/// enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// `(E[y] - t)^2` with `y = a`; ignores the variance.
    #[serde(rename = "squared")]
    SquaredOnMean,
    /// `(E[y] - t)^2 / (2 V[y]) + log sqrt(2 pi V[y])` with `y = a`.
    #[serde(rename = "gaussian")]
    GaussianNllOnMoments,
    /// `-(t log E[y] + (1 - t) log(1 - E[y]))` with `y = sigmoid(a)`.
    #[serde(rename = "bernoulli")]
    BernoulliOnMean,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::SquaredOnMean,
        LossKind::GaussianNllOnMoments,
        LossKind::BernoulliOnMean,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "squared" => Some(LossKind::SquaredOnMean),
            "gaussian" => Some(LossKind::GaussianNllOnMoments),
            "bernoulli" => Some(LossKind::BernoulliOnMean),
            _ => None,
        }
    }
}

/// Loss value with partials with respect to the pre-synaptic mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnitLoss {
    pub loss: f64,
    pub dloss_dmean: f64,
    pub dloss_dvar: f64,
}

/// Loss of a single unit whose pre-synaptic activation has the given moments.
pub fn unit_loss(mean: f64, var: f64, target: f64, kind: LossKind) -> Result<UnitLoss> {
    if var < 0.0 || var.is_nan() {
        return Err(Error::NegativeVariance {
            index: 0,
            value: var,
        });
    }
    Ok(match kind {
        LossKind::SquaredOnMean => {
            let d = mean - target;
            UnitLoss {
                loss: d * d,
                dloss_dmean: 2.0 * d,
                dloss_dvar: 0.0,
            }
        }
        LossKind::GaussianNllOnMoments => {
            if var == 0.0 {
                return Err(Error::SingularVariance(var));
            }
            let d = mean - target;
            UnitLoss {
                loss: d * d / (2.0 * var) + 0.5 * (2.0 * std::f64::consts::PI * var).ln(),
                dloss_dmean: d / var,
                dloss_dvar: -d * d / (2.0 * var * var) + 0.5 / var,
            }
        }
        LossKind::BernoulliOnMean => {
            let m = TransferKind::Sigmoid.moments(mean, var);
            let y = m.mean;
            let dl_dy = -target / y + (1.0 - target) / (1.0 - y);
            UnitLoss {
                loss: -(target * y.ln() + (1.0 - target) * (1.0 - y).ln()),
                dloss_dmean: dl_dy * m.dmean_dmean,
                dloss_dvar: dl_dy * m.dmean_dvar,
            }
        }
    })
}

/// [`unit_loss`] on a one-unit Gaussian vector.
pub fn unit_loss_vec(
    y: &crate::moments::GaussianVec<f64>,
    target: f64,
    kind: LossKind,
) -> Result<UnitLoss> {
    if y.len() != 1 {
        return Err(Error::DimensionMismatch {
            context: "unit loss input",
            expected: 1,
            found: y.len(),
        });
    }
    unit_loss(y.mean()[0], y.var()[0], target, kind)
}

/// Evenly spaced grid `min..=max` with `steps` points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Grid {
    pub fn new(min: f64, max: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(min <= max) || (steps == 1 && min != max) {
            return Err(Error::InvalidArgument(format!(
                "bad grid {min}..={max} with {steps} points"
            )));
        }
        Ok(Grid { min, max, steps })
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let step = if self.steps > 1 {
            (self.max - self.min) / (self.steps - 1) as f64
        } else {
            0.0
        };
        (0..self.steps).map(move |i| {
            if i + 1 == self.steps {
                self.max
            } else {
                self.min + step * i as f64
            }
        })
    }

    pub fn spacing(&self) -> f64 {
        if self.steps > 1 {
            (self.max - self.min) / (self.steps - 1) as f64
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub mean: f64,
    pub var: f64,
    pub loss: f64,
    pub dloss_dmean: f64,
    pub dloss_dvar: f64,
}

/// Dense evaluation of a unit loss over a (mean, variance) grid; rows are
/// ordered mean-major.
pub fn loss_field(
    kind: LossKind,
    target: f64,
    mean_grid: &Grid,
    var_grid: &Grid,
) -> Result<Vec<FieldRow>> {
    if var_grid.min < 0.0 || (kind == LossKind::GaussianNllOnMoments && var_grid.min <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance grid must start above zero for {kind:?}, got {}",
            var_grid.min
        )));
    }
    let mut rows = Vec::with_capacity(mean_grid.steps * var_grid.steps);
    for mean in mean_grid.points() {
        for var in var_grid.points() {
            let l = unit_loss(mean, var, target, kind)?;
            rows.push(FieldRow {
                mean,
                var,
                loss: l.loss,
                dloss_dmean: l.dloss_dmean,
                dloss_dvar: l.dloss_dvar,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn single_term() {
        let mut y = Array3::<f64>::zeros((1, 2, 1));
        y[[0, 0, 0]] = 0.8;
        y[[0, 1, 0]] = 0.3;
        let mut z = Array3::<f64>::zeros((1, 2, 1));
        z[[0, 1, 0]] = 1.0;
        let l = sequence_bce_nll(&y, &z).unwrap();
        assert!((l - (-(0.8f64).ln())).abs() < 1e-15);
        assert!((l - 0.22314).abs() < 1e-5);
    }

    #[test]
    fn uniform_predictor_costs_ln2_per_note() {
        let y = Array3::<f64>::from_elem((3, 7, 88), 0.5);
        let z = Array3::<f64>::from_shape_fn((3, 7, 88), |(a, b, c)| {
            ((a + b * c) % 3 == 0) as u8 as f64
        });
        let l = sequence_bce_nll(&y, &z).unwrap();
        assert!((l - 88.0 * std::f64::consts::LN_2).abs() < 1e-10);
        assert!((l - 60.997).abs() < 1e-3);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let z = Array3::<f64>::from_shape_fn((2, 5, 4), |(a, b, c)| ((a + b + c) % 2) as f64);
        // shift so predictions at t equal targets at t + 1
        let mut y = Array3::<f64>::zeros((2, 5, 4));
        for k in 0..2 {
            for t in 0..4 {
                for i in 0..4 {
                    y[[k, t, i]] = z[[k, t + 1, i]];
                }
            }
        }
        let l = sequence_bce_nll(&y, &z).unwrap();
        assert!((0.0..4.0 * 2e-6).contains(&l));
    }

    #[test]
    fn rejects_bad_inputs() {
        let y = Array3::<f64>::from_elem((1, 1, 2), 0.5);
        assert!(sequence_bce_nll(&y, &y).is_err());
        let y = Array3::<f64>::from_elem((1, 3, 2), 1.5);
        let z = Array3::<f64>::zeros((1, 3, 2));
        assert!(matches!(
            sequence_bce_nll(&y, &z),
            Err(Error::InvalidPrediction { .. })
        ));
        let z = Array3::<f64>::zeros((1, 3, 3));
        assert!(sequence_bce_nll(&Array3::from_elem((1, 3, 2), 0.5), &z).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let y = Array3::<f64>::from_shape_fn((2, 4, 3), |(a, b, c)| {
            0.1 + 0.8 * (((a * 7 + b * 3 + c) % 5) as f64) / 4.0
        });
        let z = Array3::<f64>::from_shape_fn((2, 4, 3), |(a, b, c)| ((a + b + 2 * c) % 2) as f64);
        let (_, g) = sequence_bce_nll_grad(&y, &z, None).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 1], [0, 3, 2], [1, 1, 2]] {
            let mut p = y.clone();
            p[idx] += h;
            let mut m = y.clone();
            m[idx] -= h;
            let fd =
                (sequence_bce_nll(&p, &z).unwrap() - sequence_bce_nll(&m, &z).unwrap()) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn padding_mask_skips_leading_pairs() {
        let y = Array3::<f64>::from_elem((2, 4, 1), 0.5);
        let z = Array3::<f64>::zeros((2, 4, 1));
        let (l, g) = sequence_bce_nll_grad(&y, &z, Some(&[2, 0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g[[0, 0, 0]], 0.0);
        assert_eq!(g[[0, 1, 0]], 0.0);
        assert!(g[[0, 2, 0]] != 0.0);
    }

    #[test]
    fn unit_loss_examples() {
        let l = unit_loss(0.2, 0.7, 0.2, LossKind::SquaredOnMean).unwrap();
        assert_eq!((l.loss, l.dloss_dmean, l.dloss_dvar), (0.0, 0.0, 0.0));

        let l = unit_loss(0.0, 1.0, 0.0, LossKind::GaussianNllOnMoments).unwrap();
        assert!((l.loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((l.loss - 0.91894).abs() < 1e-5);

        // stationary in the variance at V = (E - t)^2
        let l = unit_loss(1.3, 1.21, 0.2, LossKind::GaussianNllOnMoments).unwrap();
        assert!(l.dloss_dvar.abs() < 1e-15);

        assert!(matches!(
            unit_loss(0.0, 0.0, 0.0, LossKind::GaussianNllOnMoments),
            Err(Error::SingularVariance(_))
        ));
    }

    #[test]
    fn field_shape_and_squared_variance_column() {
        let g = Grid::new(-2.0, 2.0, 50).unwrap();
        let v = Grid::new(0.01, 3.0, 50).unwrap();
        let rows = loss_field(LossKind::SquaredOnMean, 0.2, &g, &v).unwrap();
        assert_eq!(rows.len(), 2500);
        assert!(rows.iter().all(|r| r.dloss_dvar == 0.0));
        assert!(loss_field(
            LossKind::GaussianNllOnMoments,
            0.2,
            &g,
            &Grid::new(0.0, 1.0, 5).unwrap()
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn nll_is_nonnegative(vals in proptest::collection::vec(0.0f64..=1.0, 24), bits in proptest::collection::vec(any::<bool>(), 24)) {
            let y = Array3::from_shape_vec((2, 4, 3), vals).unwrap();
            let z = Array3::from_shape_vec((2, 4, 3), bits.into_iter().map(|b| b as u8 as f64).collect()).unwrap();
            prop_assert!(sequence_bce_nll(&y, &z).unwrap() >= 0.0);
        }

        #[test]
        fn unit_partials_match_differences(mean in -3.0f64..3.0, var in 0.05f64..5.0, target in 0.0f64..1.0) {
            let h = 1e-6;
            for kind in LossKind::ALL {
                let l = unit_loss(mean, var, target, kind).unwrap();
                let dm = (unit_loss(mean + h, var, target, kind).unwrap().loss - unit_loss(mean - h, var, target, kind).unwrap().loss) / (2.0 * h);
                let dv = (unit_loss(mean, var + h, target, kind).unwrap().loss - unit_loss(mean, var - h, target, kind).unwrap().loss) / (2.0 * h);
                prop_assert!((l.dloss_dmean - dm).abs() <= 1e-5 * (1.0 + dm.abs()));
                prop_assert!((l.dloss_dvar - dv).abs() <= 1e-5 * (1.0 + dv.abs()));
            }
        }
    }
}
