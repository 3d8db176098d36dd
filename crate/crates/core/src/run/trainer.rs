use std::fs::File;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{chunk_split, epoch_batches, ChunkedBatch, PianoRollDataset, Split};
use crate::error::{Error, Result};
use crate::gradients::{backward_fd_with, backward_plain_with};
use crate::losses::{mean_sequence_nll, sequence_bce_nll, sequence_bce_nll_grad};
use crate::moments::TransferKind;
use crate::network::{forward_fd, forward_plain, DropoutConfig, RnnParams, SequenceBatch};
use crate::optim::{
    init_recurrent, rmsprop_nesterov_step, spectral_radius, RmsPropState, StepReport,
};
use crate::real::Real;

use super::checkpoint::Checkpoint;
use super::config::{Objective, Precision, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RECORD_FILE: &str = "record.json";

/// How evaluation NLLs are averaged.
pub const NLL_AVERAGING: &str = "per-step mean within each sequence, then mean over sequences";

/// The run's random stream: ChaCha8 seeded from `seed`, on stream `stream`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh parameters: `W_rec` from the sparse spectral-radius recipe, then
/// Gaussian `W_in` and `W_out`, zero `b_h` and `h0`, constant `b_y`.
pub fn init_params<R: rand::Rng + ?Sized>(
    cfg: &RunConfig,
    dims: usize,
    rng: &mut R,
) -> Result<RnnParams<f64>> {
    let g = cfg.hidden_units;
    let mut p = RnnParams::zeros(dims, g, dims);
    p.w_rec = init_recurrent(&cfg.init_spec(), g, rng)?;
    let normal = |s2: f64| Normal::new(0.0, s2.sqrt()).map_err(|e| Error::Config(e.to_string()));
    let w_in = normal(cfg.init_sigma2_in)?;
    p.w_in.mapv_inplace(|_| w_in.sample(rng));
    let w_out = normal(cfg.init_sigma2_rec_out)?;
    p.w_out.mapv_inplace(|_| w_out.sample(rng));
    p.b_y.fill(cfg.b_y_const);
    Ok(p)
}

/// Parameters plus optimizer state for one objective.
pub struct Trainer<T: Real> {
    pub params: RnnParams<T>,
    pub state: RmsPropState<T>,
    pub objective: Objective,
    pub dropout: DropoutConfig,
    pub transfer: TransferKind,
    pub mask_padding: bool,
    pub steps: u64,
}

fn scored_pairs(steps: usize, pads: &[usize], masked: bool) -> usize {
    if masked {
        pads.iter().map(|&p| (steps - 1).saturating_sub(p)).sum()
    } else {
        (steps - 1) * pads.len()
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(params: RnnParams<T>, cfg: &RunConfig) -> Result<Self> {
        let mut state = RmsPropState::new(&params, cfg.step_rate, cfg.decay, cfg.momentum)?;
        state.epsilon = cfg.rms_epsilon;
        state.clip_threshold = cfg.clip_threshold;
        Ok(Trainer {
            params,
            state,
            objective: cfg.objective,
            dropout: cfg.dropout(),
            transfer: cfg.transfer,
            mask_padding: cfg.mask_padding,
            steps: 0,
        })
    }

    /// One optimizer step on a batch of chunks predicting their own next steps.
    pub fn step(&mut self, chunks: &Array3<T>, pads: &[usize]) -> Result<StepReport> {
        let batch = SequenceBatch::new(chunks.clone())?;
        let mask = self.mask_padding.then_some(pads);
        let (objective, dropout, f_h) = (self.objective, self.dropout, self.transfer);
        let report = rmsprop_nesterov_step(&mut self.state, &mut self.params, |q| {
            let loss = |y: &Array3<T>| sequence_bce_nll_grad(y, chunks, mask);
            match objective {
                Objective::FastDropout => {
                    backward_fd_with(q, &dropout, f_h, TransferKind::Sigmoid, &batch, loss)
                }
                Objective::Plain => {
                    backward_plain_with(q, f_h, TransferKind::Sigmoid, &batch, loss)
                }
            }
        })
        .map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                step: Some(self.steps as usize),
            },
            other => other,
        })?;
        self.steps += 1;
        Ok(report)
    }

    /// Output means for a batch of input sequences.
    pub fn predict(&self, inputs: Array3<T>) -> Result<Array3<T>> {
        let batch = SequenceBatch::new(inputs)?;
        match self.objective {
            Objective::FastDropout => Ok(forward_fd(
                &self.params,
                &self.dropout,
                self.transfer,
                TransferKind::Sigmoid,
                &batch,
                false,
            )?
            .outputs),
            Objective::Plain => {
                forward_plain(&self.params, self.transfer, TransferKind::Sigmoid, &batch)
            }
        }
    }

    /// Training-style NLL over all chunks, in batches of `batch_size`.
    pub fn chunked_nll(&self, chunks: &ChunkedBatch, batch_size: usize) -> Result<f64> {
        let mut weighted = 0.0;
        let mut total = 0usize;
        let order: Vec<usize> = (0..chunks.len()).collect();
        for idx in order.chunks(batch_size.max(1)) {
            let (x, pads) = chunks.gather::<T>(idx);
            let pairs = scored_pairs(chunks.chunk_len(), &pads, self.mask_padding);
            if pairs == 0 {
                continue;
            }
            let y = self.predict(x.clone())?;
            let loss = if self.mask_padding {
                sequence_bce_nll_grad(&y, &x, Some(&pads))?.0
            } else {
                sequence_bce_nll(&y, &x)?
            };
            weighted += loss * pairs as f64;
            total += pairs;
        }
        if total == 0 {
            return Err(Error::InvalidArgument(
                "no scored time steps in chunks".into(),
            ));
        }
        Ok(weighted / total as f64)
    }

    /// NLL on unsplit sequences, averaged per sequence then across sequences.
    pub fn sequence_nll(&self, sequences: &[Array2<u8>]) -> Result<f64> {
        let mut pairs = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let x = seq.mapv(|v| T::of(v as f64)).insert_axis(Axis(0));
            if x.len_of(Axis(1)) < 2 {
                continue;
            }
            let y = self.predict(x.clone())?;
            pairs.push((y, x));
        }
        mean_sequence_nll(pairs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    #[serde(deserialize_with = "null_as_nan")]
    pub train_nll: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub valid_nll: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub spectral_radius: f64,
    pub wallclock_s: f64,
}

// JSON has no NaN; serde_json writes it as null
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
    },
    /// Aborted by an error other than numerical divergence.
    Failed {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    #[serde(flatten)]
    pub status: RunStatus,
    pub metrics: Vec<MetricsRow>,
    pub best_epoch: Option<usize>,
    pub best_valid_nll: Option<f64>,
    /// Only filled for a run selected by the search, or on request.
    pub test_nll: Option<f64>,
    pub nll_averaging: String,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

struct MetricsSink {
    writer: Option<csv::Writer<File>>,
}

impl MetricsSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let writer = match dir {
            Some(d) => Some(csv::Writer::from_path(d.join(METRICS_FILE))?),
            None => None,
        };
        Ok(MetricsSink { writer })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.serialize(row)?;
            w.flush()?;
        }
        Ok(())
    }
}

fn nan_if_non_finite(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NonFinite { .. }) => Ok(f64::NAN),
        other => other,
    }
}

/// Train one configuration. With `out_dir` the metrics CSV, the
/// best-validation checkpoint and the run record are written there.
pub fn train(
    cfg: &RunConfig,
    dataset: &PianoRollDataset,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    Ok(train_with_checkpoint(cfg, dataset, out_dir)?.0)
}

/// [`train`], also returning the best-validation checkpoint in memory.
pub fn train_with_checkpoint(
    cfg: &RunConfig,
    dataset: &PianoRollDataset,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, Option<Checkpoint>)> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, dataset, out_dir),
        Precision::F64 => train_typed::<f64>(cfg, dataset, out_dir),
    }
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    dataset: &PianoRollDataset,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, Option<Checkpoint>)> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let clock = Instant::now();
    let wallclock = || {
        if cfg.record_wallclock {
            clock.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let mut rng = run_rng(cfg.seed, cfg.stream);
    let params = init_params(cfg, dataset.dims, &mut rng)?;
    let mut trainer = Trainer::<T>::new(params.cast(), cfg)?;
    let train_chunks = chunk_split(dataset.split(Split::Train), cfg.chunk_len)?;
    let valid_chunks = chunk_split(dataset.split(Split::Valid), cfg.chunk_len)?;

    let mut sink = MetricsSink::open(out_dir)?;
    let mut record = RunRecord {
        config: cfg.clone(),
        status: RunStatus::Completed,
        metrics: Vec::new(),
        best_epoch: None,
        best_valid_nll: None,
        test_nll: None,
        nll_averaging: NLL_AVERAGING.into(),
    };

    let mut best: Option<Checkpoint> = None;
    let mut log = |epoch: usize,
                   trainer: &Trainer<T>,
                   rng: &ChaCha8Rng,
                   record: &mut RunRecord|
     -> Result<bool> {
        let row = MetricsRow {
            epoch,
            step: trainer.steps,
            train_nll: nan_if_non_finite(trainer.chunked_nll(&train_chunks, cfg.batch_size))?,
            valid_nll: nan_if_non_finite(trainer.chunked_nll(&valid_chunks, cfg.batch_size))?,
            spectral_radius: spectral_radius(&trainer.params.w_rec),
            wallclock_s: wallclock(),
        };
        sink.push(&row)?;
        record.metrics.push(row);
        if !(row.train_nll.is_finite() && row.valid_nll.is_finite()) {
            return Ok(false);
        }
        if record.best_valid_nll.is_none_or(|b| row.valid_nll < b) {
            record.best_valid_nll = Some(row.valid_nll);
            record.best_epoch = Some(epoch);
            let ckpt = Checkpoint::new(
                cfg,
                epoch,
                trainer.steps,
                row.valid_nll,
                &trainer.params,
                rng,
            );
            if let Some(d) = out_dir {
                ckpt.save(&d.join(CHECKPOINT_FILE))?;
            }
            best = Some(ckpt);
        }
        Ok(true)
    };

    if !log(0, &trainer, &rng, &mut record)? {
        record.status = RunStatus::Diverged {
            epoch: 0,
            step: 0,
            reason: "non-finite loss at initialization".into(),
        };
    }
    'epochs: for epoch in 1..=cfg.epochs {
        if record.status != RunStatus::Completed {
            break;
        }
        for idx in epoch_batches(train_chunks.len(), cfg.batch_size, &mut rng) {
            let (x, pads) = train_chunks.gather::<T>(&idx);
            if scored_pairs(cfg.chunk_len, &pads, cfg.mask_padding) == 0 {
                continue;
            }
            match trainer.step(&x, &pads) {
                Ok(_) => {}
                Err(e @ Error::NonFinite { .. }) => {
                    record.status = RunStatus::Diverged {
                        epoch,
                        step: trainer.steps,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if (epoch % cfg.log_every == 0 || epoch == cfg.epochs)
            && !log(epoch, &trainer, &rng, &mut record)?
        {
            record.status = RunStatus::Diverged {
                epoch,
                step: trainer.steps,
                reason: "non-finite evaluation loss".into(),
            };
        }
    }

    if let Some(d) = out_dir {
        record.save(&d.join(RECORD_FILE))?;
    }
    Ok((record, best))
}

/// NLL of a saved model on the unsplit sequences of `split`, computed in the
/// precision it was trained in.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &PianoRollDataset, split: Split) -> Result<f64> {
    fn typed<T: Real>(c: &Checkpoint, dataset: &PianoRollDataset, split: Split) -> Result<f64> {
        let params = c.params.to_params::<T>()?;
        if params.input_dim() != dataset.dims {
            return Err(Error::DimensionMismatch {
                context: "checkpoint input dimension vs dataset",
                expected: params.input_dim(),
                found: dataset.dims,
            });
        }
        Trainer::new(params, &c.config)?.sequence_nll(dataset.split(split))
    }
    match checkpoint.config.precision {
        Precision::F32 => typed::<f32>(checkpoint, dataset, split),
        Precision::F64 => typed::<f64>(checkpoint, dataset, split),
    }
}
