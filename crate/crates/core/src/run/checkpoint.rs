use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RnnParams;
use crate::real::Real;

use super::config::RunConfig;

pub const MAGIC: &str = "FDRNN1";

/// Flat parameter storage in [`RnnParams::iter`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub values: Vec<f64>,
}

impl ParamsFile {
    pub fn of<T: Real>(params: &RnnParams<T>) -> Self {
        ParamsFile {
            input_dim: params.input_dim(),
            hidden_dim: params.hidden_dim(),
            output_dim: params.output_dim(),
            values: params.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_params<T: Real>(&self) -> Result<RnnParams<T>> {
        let mut p = RnnParams::zeros(self.input_dim, self.hidden_dim, self.output_dim);
        let values: Vec<T> = self.values.iter().map(|&v| T::of(v)).collect();
        p.assign_flat(&values)?;
        Ok(p)
    }
}

/// ChaCha stream position; `word_pos` is a decimal string since it is 128-bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub step: u64,
    pub valid_nll: f64,
    pub params: ParamsFile,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new<T: Real>(
        config: &RunConfig,
        epoch: usize,
        step: u64,
        valid_nll: f64,
        params: &RnnParams<T>,
        rng: &ChaCha8Rng,
    ) -> Self {
        Checkpoint {
            magic: MAGIC.into(),
            config: config.clone(),
            epoch,
            step,
            valid_nll,
            params: ParamsFile::of(params),
            rng: RngState::capture(rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        // write then rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        match value.get("magic").and_then(|m| m.as_str()) {
            Some(MAGIC) => {}
            Some(other) => {
                return Err(err(format!(
                    "unsupported format {other:?}, expected {MAGIC}"
                )))
            }
            None => return Err(err("missing magic string".into())),
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        ckpt.params
            .to_params::<f64>()
            .map_err(|e| err(e.to_string()))?
            .validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(5);
        let _: u64 = rng.random();
        let mut p = RnnParams::<f32>::zeros(2, 3, 2);
        for (i, v) in p.iter_mut().enumerate() {
            *v = i as f32 * 0.1;
        }
        let c = Checkpoint::new(&RunConfig::default(), 4, 17, 1.5, &p, &rng);
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.to_params::<f32>().unwrap(), p);
        let mut r2 = back.rng.restore().unwrap();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        std::fs::write(&path, r#"{"magic": "OTHER"}"#).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint { .. })
        ));
        std::fs::write(&path, "not json").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
