//! Piano-roll datasets: JSON loading, binarization, chunking into
//! fixed-length zero-prepended segments, and minibatch assembly.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::mean_sequence_nll;
use crate::real::Real;

pub const DEFAULT_CHUNK_LEN: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Active pitches per time step.
pub type NoteSequence = Vec<Vec<i64>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<NoteSequence>,
    pub valid: Vec<NoteSequence>,
    pub test: Vec<NoteSequence>,
}

/// On-disk layout of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub name: String,
    pub dims: usize,
    pub pitch_offset: i64,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A validated dataset with every sequence converted to a `T x dims` binary roll.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRollDataset {
    pub name: String,
    pub dims: usize,
    pub pitch_offset: i64,
    train: Vec<Array2<u8>>,
    valid: Vec<Array2<u8>>,
    test: Vec<Array2<u8>>,
}

impl PianoRollDataset {
    pub fn from_file(file: &DatasetFile, location: &str) -> Result<Self> {
        let err = |where_: String, message: String| Error::Dataset {
            location: format!("{location}: {where_}"),
            message,
        };
        if file.dims == 0 {
            return Err(err("dims".into(), "must be positive".into()));
        }
        let convert = |split: Split, seqs: &[NoteSequence]| -> Result<Vec<Array2<u8>>> {
            if seqs.is_empty() {
                return Err(err(format!("splits.{split}"), "empty split".into()));
            }
            seqs.iter()
                .enumerate()
                .map(|(i, seq)| {
                    if seq.is_empty() {
                        return Err(err(format!("splits.{split}[{i}]"), "empty sequence".into()));
                    }
                    to_binary(seq, file.dims, file.pitch_offset).map_err(|e| match e {
                        Error::Dataset { location, message } => {
                            err(format!("splits.{split}[{i}]{location}"), message)
                        }
                        other => other,
                    })
                })
                .collect()
        };
        Ok(PianoRollDataset {
            name: file.name.clone(),
            dims: file.dims,
            pitch_offset: file.pitch_offset,
            train: convert(Split::Train, &file.splits.train)?,
            valid: convert(Split::Valid, &file.splits.valid)?,
            test: convert(Split::Test, &file.splits.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[Array2<u8>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// `(sequences, time steps)` per split.
    pub fn summary(&self) -> [(Split, usize, usize); 3] {
        Split::ALL.map(|s| {
            let seqs = self.split(s);
            (s, seqs.len(), seqs.iter().map(|r| r.nrows()).sum())
        })
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PianoRollDataset> {
    let path = path.as_ref();
    let location = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset {
        location: location.clone(),
        message: e.to_string(),
    })?;
    parse_dataset(&text, &location)
}

pub fn parse_dataset(text: &str, location: &str) -> Result<PianoRollDataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Dataset {
        location: format!("{location}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    PianoRollDataset::from_file(&file, location)
}

/// Multi-hot rows: pitch `q` sets column `q - offset`.
pub fn to_binary(seq: &[Vec<i64>], dims: usize, offset: i64) -> Result<Array2<u8>> {
    let mut roll = Array2::zeros((seq.len(), dims));
    for (t, notes) in seq.iter().enumerate() {
        for &q in notes {
            let idx = q - offset;
            if idx < 0 || idx >= dims as i64 {
                return Err(Error::Dataset {
                    location: format!("[{t}]"),
                    message: format!("pitch {q} outside [{offset}, {})", offset + dims as i64),
                });
            }
            roll[[t, idx as usize]] = 1;
        }
    }
    Ok(roll)
}

/// Where a chunk came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkOrigin {
    pub sequence: usize,
    /// Index in the sequence of the chunk's first real row.
    pub offset: usize,
    /// Number of real rows; the remaining leading rows are padding.
    pub valid_len: usize,
}

/// Fixed-length segments of a set of sequences, `chunks x chunk_len x dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedBatch {
    pub data: Array3<u8>,
    pub origins: Vec<ChunkOrigin>,
}

impl ChunkedBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn chunk_len(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn padding(&self, chunk: usize) -> usize {
        self.chunk_len() - self.origins[chunk].valid_len
    }

    /// Gather chunks into a real-valued tensor plus their leading padding counts.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> (Array3<T>, Vec<usize>) {
        let (_, len, dims) = self.data.dim();
        let mut out = Array3::<T>::zeros((indices.len(), len, dims));
        for (k, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), k)
                .assign(&self.data.index_axis(Axis(0), i).mapv(|v| T::of(v as f64)));
        }
        (out, indices.iter().map(|&i| self.padding(i)).collect())
    }

    pub fn all<T: Real>(&self) -> (Array3<T>, Vec<usize>) {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Cut every sequence into consecutive `chunk_len` segments; a short final
/// segment gets zero rows prepended.
pub fn chunk_split(sequences: &[Array2<u8>], chunk_len: usize) -> Result<ChunkedBatch> {
    if chunk_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "chunk length must be at least 2, got {chunk_len}"
        )));
    }
    let dims = sequences.first().map_or(0, |s| s.ncols());
    let mut origins = Vec::new();
    for (id, seq) in sequences.iter().enumerate() {
        if seq.ncols() != dims {
            return Err(Error::DimensionMismatch {
                context: "sequence width",
                expected: dims,
                found: seq.ncols(),
            });
        }
        let mut offset = 0;
        while offset < seq.nrows() {
            let valid_len = chunk_len.min(seq.nrows() - offset);
            origins.push(ChunkOrigin {
                sequence: id,
                offset,
                valid_len,
            });
            offset += valid_len;
        }
    }
    let mut data = Array3::zeros((origins.len(), chunk_len, dims));
    for (c, o) in origins.iter().enumerate() {
        let rows = sequences[o.sequence].slice(s![o.offset..o.offset + o.valid_len, ..]);
        data.slice_mut(s![c, chunk_len - o.valid_len.., ..])
            .assign(&rows);
    }
    Ok(ChunkedBatch { data, origins })
}

/// Chunk indices shuffled with `rng` and grouped into batches of `batch_size`;
/// the last batch may be smaller.
pub fn epoch_batches<R: Rng + ?Sized>(
    chunks: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..chunks).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Per-note frequency over all time steps of `sequences`.
pub fn note_frequencies(sequences: &[Array2<u8>]) -> Array1<f64> {
    let dims = sequences.first().map_or(0, |s| s.ncols());
    let mut counts = Array1::<f64>::zeros(dims);
    let mut steps = 0usize;
    for s in sequences {
        counts += &s.map(|&v| v as f64).sum_axis(Axis(0));
        steps += s.nrows();
    }
    counts / steps.max(1) as f64
}

/// NLL of the predictor that always outputs the train-split note frequencies,
/// scored on unsplit sequences of `split`.
pub fn marginal_baseline_nll(dataset: &PianoRollDataset, split: Split) -> Result<f64> {
    let rates = note_frequencies(dataset.split(Split::Train));
    mean_sequence_nll(dataset.split(split).iter().map(|seq| {
        let steps = seq.nrows();
        let y = rates
            .broadcast((1, steps, rates.len()))
            .expect("broadcast")
            .to_owned();
        let z = seq.mapv(|v| v as f64).insert_axis(Axis(0));
        (y, z)
    }))
}

/// Sizes of a generated surrogate corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec {
            train: 60,
            valid: 20,
            test: 20,
            min_len: 40,
            max_len: 160,
        }
    }
}

const MAJOR_SCALE: [i64; 7] = [0, 2, 4, 5, 7, 9, 11];
// voice ranges: bass, tenor, alto, soprano
const VOICE_RANGES: [(i64, i64); 4] = [(40, 60), (48, 67), (55, 74), (60, 81)];

/// Next scale degree of the chord progression.
fn next_degree<R: Rng + ?Sized>(degree: usize, rng: &mut R) -> usize {
    let choices: &[usize] = match degree {
        0 => &[3, 4, 5, 1],
        1 => &[4, 6],
        2 => &[5, 3],
        3 => &[4, 0, 1],
        4 => &[0, 5, 0],
        5 => &[1, 3],
        _ => &[0],
    };
    choices[rng.random_range(0..choices.len())]
}

fn chord_pitch_classes(tonic: i64, degree: usize) -> [i64; 3] {
    [0, 2, 4].map(|step| (tonic + MAJOR_SCALE[(degree + step) % 7]) % 12)
}

/// Closest chord tone to `previous` inside `range`.
fn voice_lead(previous: i64, classes: &[i64; 3], range: (i64, i64)) -> i64 {
    (range.0..=range.1)
        .filter(|p| classes.contains(&(p % 12)))
        .min_by_key(|p| ((p - previous).abs(), *p))
        .expect("every range spans an octave")
}

/// Four-voice chorale-like sequences: a random major key, a Markov chord
/// progression with chords held for two or four steps, and nearest-tone
/// voice leading. Pitches use the usual 21..=108 piano range.
pub fn surrogate_chorales<R: Rng + ?Sized>(
    spec: &SurrogateSpec,
    rng: &mut R,
) -> Result<DatasetFile> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "bad surrogate length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let sequence = |rng: &mut R| -> NoteSequence {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let tonic = rng.random_range(0..12);
        let mut degree = 0;
        let mut voices = VOICE_RANGES.map(|(lo, hi)| (lo + hi) / 2);
        let mut steps = Vec::with_capacity(len);
        while steps.len() < len {
            let classes = chord_pitch_classes(tonic, degree);
            for (v, range) in voices.iter_mut().zip(VOICE_RANGES) {
                *v = voice_lead(*v, &classes, range);
            }
            let hold = if rng.random_bool(0.7) { 2 } else { 4 };
            for _ in 0..hold.min(len - steps.len()) {
                let mut notes: Vec<i64> = voices.to_vec();
                notes.sort_unstable();
                notes.dedup();
                steps.push(notes);
            }
            degree = next_degree(degree, rng);
        }
        steps
    };
    let split = |n: usize, rng: &mut R| (0..n).map(|_| sequence(rng)).collect::<Vec<_>>();
    let splits = Splits {
        train: split(spec.train, rng),
        valid: split(spec.valid, rng),
        test: split(spec.test, rng),
    };
    Ok(DatasetFile {
        name: "surrogate-chorales".into(),
        dims: 88,
        pitch_offset: 21,
        splits,
    })
}
