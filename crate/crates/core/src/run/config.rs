use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_BATCH_SIZE, DEFAULT_CHUNK_LEN};
use crate::error::{Error, Result};
use crate::moments::{KeepProb, TransferKind};
use crate::network::DropoutConfig;
use crate::optim::{InitSpec, DEFAULT_CLIP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which forward/backward pass the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    FastDropout,
    /// Ordinary network, no dropout of any kind.
    Plain,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hidden_units: usize,
    /// Hidden transfer function; the output layer is always a sigmoid.
    pub transfer: TransferKind,
    pub p_in: KeepProb,
    pub p_hid: KeepProb,
    pub p_out: KeepProb,
    pub fd_final_layer: bool,
    pub objective: Objective,
    pub step_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub rms_epsilon: f64,
    pub clip_threshold: f64,
    pub init_sigma2_rec_out: f64,
    pub init_sigma2_in: f64,
    pub rho_target: f64,
    pub nu: Option<usize>,
    pub b_y_const: f64,
    pub chunk_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Metrics and checkpoint interval, in epochs.
    pub log_every: usize,
    /// Exclude zero-prepended steps from the training loss.
    pub mask_padding: bool,
    pub seed: u64,
    /// RNG stream; search runs use their index here.
    pub stream: u64,
    pub precision: Precision,
    /// Fill the wallclock column; off by default so metrics files are
    /// reproducible byte for byte.
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden_units: 100,
            transfer: TransferKind::Tanh,
            p_in: KeepProb::ONE,
            p_hid: KeepProb::ONE,
            p_out: KeepProb::ONE,
            fd_final_layer: false,
            objective: Objective::FastDropout,
            step_rate: 0.001,
            momentum: 0.9,
            decay: 0.9,
            rms_epsilon: 1e-8,
            clip_threshold: DEFAULT_CLIP,
            init_sigma2_rec_out: 0.01,
            init_sigma2_in: 0.01,
            rho_target: 1.1,
            nu: None,
            b_y_const: -0.8,
            chunk_len: DEFAULT_CHUNK_LEN,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 100,
            log_every: 1,
            mask_padding: false,
            seed: 0,
            stream: 0,
            precision: Precision::F32,
            record_wallclock: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_units == 0 {
            return bad("hidden_units must be positive".into());
        }
        if self.chunk_len < 2 {
            return bad(format!(
                "chunk_len must be at least 2, got {}",
                self.chunk_len
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 {
            return bad("batch_size, epochs and log_every must be positive".into());
        }
        if !(self.step_rate > 0.0) {
            return bad(format!(
                "step_rate must be positive, got {}",
                self.step_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if !(self.rms_epsilon > 0.0) || !(self.clip_threshold > 0.0) {
            return bad("rms_epsilon and clip_threshold must be positive".into());
        }
        if !self.b_y_const.is_finite() {
            return bad("b_y_const must be finite".into());
        }
        self.init_spec()
            .validate(self.hidden_units)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.init_sigma2_in > 0.0) {
            return bad(format!(
                "init_sigma2_in must be positive, got {}",
                self.init_sigma2_in
            ));
        }
        Ok(())
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig {
            p_in: self.p_in,
            p_hid: self.p_hid,
            p_out: self.p_out,
            fd_final_layer: self.fd_final_layer,
        }
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            rho_target: self.rho_target,
            nu: self.nu,
            sigma2: self.init_sigma2_rec_out,
            b_y_const: self.b_y_const,
        }
    }
}

/// Candidate values per hyperparameter; dropout entries are drop rates.
/// Fields not searched over are taken from `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub hidden_units: Vec<usize>,
    pub transfer: Vec<TransferKind>,
    pub input_dropout: Vec<f64>,
    pub hidden_dropout: Vec<f64>,
    pub output_dropout: Vec<f64>,
    pub fd_final_layer: Vec<bool>,
    pub step_rate: Vec<f64>,
    pub momentum: Vec<f64>,
    pub decay: Vec<f64>,
    pub init_sigma2_rec_out: Vec<f64>,
    pub init_sigma2_in: Vec<f64>,
    pub rho_target: Vec<f64>,
    pub nu: Vec<Option<usize>>,
    pub b_y_const: Vec<f64>,
    pub base: RunConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let sigma2 = vec![0.1, 0.01, 0.001, 0.0001];
        SearchSpace {
            hidden_units: vec![200, 400, 600],
            transfer: vec![TransferKind::Tanh],
            input_dropout: vec![0.0, 0.1, 0.2],
            hidden_dropout: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            output_dropout: vec![0.0, 0.2, 0.5],
            fd_final_layer: vec![true, false],
            step_rate: vec![0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00001],
            momentum: vec![0.0, 0.9, 0.95, 0.99, 0.995],
            decay: vec![0.8, 0.9],
            init_sigma2_rec_out: sigma2.clone(),
            init_sigma2_in: sigma2,
            rho_target: vec![1.0, 1.05, 1.1, 1.2],
            nu: vec![Some(15), Some(25), Some(35), Some(50), None],
            b_y_const: vec![-0.8],
            base: RunConfig::default(),
        }
    }
}

fn pick<'a, T, R: Rng + ?Sized>(name: &str, choices: &'a [T], rng: &mut R) -> Result<&'a T> {
    if choices.is_empty() {
        return Err(Error::Config(format!(
            "search space has no candidates for {name}"
        )));
    }
    Ok(&choices[rng.random_range(0..choices.len())])
}

impl SearchSpace {
    /// Draw one configuration, each hyperparameter uniformly and
    /// independently. The draw order is fixed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RunConfig> {
        let keep =
            |rate: f64| KeepProb::from_drop_rate(rate).map_err(|e| Error::Config(e.to_string()));
        let mut cfg = self.base.clone();
        cfg.hidden_units = *pick("hidden_units", &self.hidden_units, rng)?;
        cfg.transfer = *pick("transfer", &self.transfer, rng)?;
        cfg.p_in = keep(*pick("input_dropout", &self.input_dropout, rng)?)?;
        cfg.p_hid = keep(*pick("hidden_dropout", &self.hidden_dropout, rng)?)?;
        cfg.p_out = keep(*pick("output_dropout", &self.output_dropout, rng)?)?;
        cfg.fd_final_layer = *pick("fd_final_layer", &self.fd_final_layer, rng)?;
        cfg.step_rate = *pick("step_rate", &self.step_rate, rng)?;
        cfg.momentum = *pick("momentum", &self.momentum, rng)?;
        cfg.decay = *pick("decay", &self.decay, rng)?;
        cfg.init_sigma2_rec_out = *pick("init_sigma2_rec_out", &self.init_sigma2_rec_out, rng)?;
        cfg.init_sigma2_in = *pick("init_sigma2_in", &self.init_sigma2_in, rng)?;
        cfg.rho_target = *pick("rho_target", &self.rho_target, rng)?;
        cfg.nu = *pick("nu", &self.nu, rng)?;
        cfg.b_y_const = *pick("b_y_const", &self.b_y_const, rng)?;
        // a degree cap above the layer width means "no cap"
        cfg.nu = cfg.nu.filter(|&nu| nu <= cfg.hidden_units);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_sizes() {
        let s = SearchSpace::default();
        assert_eq!(s.hidden_units, vec![200, 400, 600]);
        assert_eq!(s.hidden_dropout.len(), 6);
        assert_eq!(s.step_rate.len(), 6);
        assert_eq!(s.momentum.len(), 5);
        assert_eq!(s.nu.len(), 5);
        assert_eq!(s.b_y_const, vec![-0.8]);
    }

    #[test]
    fn samples_are_seeded_and_in_grid() {
        let s = SearchSpace::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32)
                .map(|_| s.sample(&mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        assert_ne!(a, draw(8));
        for c in &a {
            assert!(s.hidden_units.contains(&c.hidden_units));
            assert!(s
                .input_dropout
                .iter()
                .any(|&r| (1.0 - r - c.p_in.get()).abs() < 1e-15));
            assert!(s.momentum.contains(&c.momentum));
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c = RunConfig {
            p_hid: KeepProb::new(0.8).unwrap(),
            nu: Some(15),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig =
            serde_json::from_str(r#"{"hidden_units": 30, "precision": "f64"}"#).unwrap();
        assert_eq!(partial.hidden_units, 30);
        assert_eq!(partial.precision, Precision::F64);
        assert!(serde_json::from_str::<RunConfig>(r#"{"hiden_units": 30}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"p_in": 1.5}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            nu: Some(101),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            chunk_len: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
