//! Synthetic classification tasks with a controllable difficulty mixture,
//! JSONL dataset files, and hashed bag-of-words ingestion for CSV text.
//!
//! Class means sit on a scaled simplex, so every pair of classes is
//! separated by exactly the chosen margin. Each sample draws its class,
//! an easy/hard coin, isotropic Gaussian features around the mean at the
//! corresponding margin, and optionally a flipped label. Every sample has
//! its own generator derived from (seed, split, index), which makes the
//! splits disjoint streams and keeps any one sample's features stable
//! under changes to unrelated knobs.

use crate::training::LabeledSet;
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("spec: {0}")]
    BadSpec(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("line {line}: sample has {got} features, expected {want}")]
    DimMismatch { line: usize, got: usize, want: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("text ingestion: {0}")]
    BadText(String),
}

/// Recipe for one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub d_in: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Fraction of samples drawn at the wide margin.
    pub easy_fraction: f64,
    pub easy_margin: f64,
    pub hard_margin: f64,
    /// Probability of replacing a label with a uniformly chosen other one.
    pub label_noise: f64,
    /// Translation applied to the test split only.
    pub shift: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::default_benchmark()
    }
}

impl DatasetSpec {
    /// The standard benchmark the experiments run on.
    pub fn default_benchmark() -> Self {
        Self {
            classes: 2,
            d_in: 8,
            n_train: 10_000,
            n_dev: 1_000,
            n_test: 2_000,
            easy_fraction: 0.55,
            easy_margin: 6.0,
            hard_margin: 1.2,
            label_noise: 0.0,
            shift: None,
            seed: 42,
        }
    }

    /// A trivially separable task every classifier should ace.
    pub fn easy() -> Self {
        Self {
            classes: 2,
            d_in: 2,
            n_train: 400,
            n_dev: 100,
            n_test: 200,
            easy_fraction: 1.0,
            easy_margin: 10.0,
            hard_margin: 1.0,
            label_noise: 0.0,
            shift: None,
            seed: 7,
        }
    }

    /// The benchmark with the test split translated orthogonally to the
    /// class-separation axis.
    pub fn shifted() -> Self {
        let base = Self::default_benchmark();
        let mut shift = vec![0.0; base.d_in];
        shift[0] = 2.0;
        shift[1] = 2.0;
        Self { shift: Some(shift), ..base }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::BadSpec("need at least two classes"));
        }
        if self.d_in < self.classes {
            return Err(DataError::BadSpec("d_in must be at least the class count"));
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(DataError::BadSpec("all split sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) || !self.easy_fraction.is_finite() {
            return Err(DataError::BadSpec("easy_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !self.label_noise.is_finite() {
            return Err(DataError::BadSpec("label_noise must lie in [0, 1]"));
        }
        for margin in [self.easy_margin, self.hard_margin] {
            if !margin.is_finite() || margin <= 0.0 {
                return Err(DataError::BadSpec("margins must be positive"));
            }
        }
        if let Some(shift) = &self.shift {
            if shift.len() != self.d_in {
                return Err(DataError::BadSpec("shift length must equal d_in"));
            }
            if shift.iter().any(|v| !v.is_finite()) {
                return Err(DataError::BadSpec("shift entries must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet {
            xs: self.samples.iter().map(|s| s.x.clone()).collect(),
            ys: self.samples.iter().map(|s| s.y).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for s in &self.samples {
            if s.y < classes {
                counts[s.y] += 1;
            }
        }
        counts
    }
}

/// The three generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ split) ^ index)
}

/// Class means on a centered simplex scaled so that every pair of means
/// is exactly `margin` apart.
pub(crate) fn class_means(classes: usize, d_in: usize, margin: f64) -> Vec<Vec<f64>> {
    let scale = margin / (2.0f64).sqrt();
    let center = 1.0 / classes as f64;
    (0..classes)
        .map(|k| {
            (0..d_in)
                .map(|j| {
                    let corner = if j == k { 1.0 } else { 0.0 };
                    let centered = if j < classes { corner - center } else { 0.0 };
                    centered * scale
                })
                .collect()
        })
        .collect()
}

fn draw_sample(spec: &DatasetSpec, split: u64, index: u64, shifted: bool) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index));
    let y_true = rng.gen_range(0..spec.classes);
    let easy = rng.gen::<f64>() < spec.easy_fraction;
    let margin = if easy { spec.easy_margin } else { spec.hard_margin };
    let means = class_means(spec.classes, spec.d_in, margin);
    let mut x: Vec<f64> = (0..spec.d_in)
        .map(|j| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            means[y_true][j] + noise
        })
        .collect();
    let mut y = y_true;
    if rng.gen::<f64>() < spec.label_noise {
        let other = rng.gen_range(0..spec.classes - 1);
        y = if other >= y_true { other + 1 } else { other };
    }
    if shifted {
        if let Some(shift) = &spec.shift {
            for (v, s) in x.iter_mut().zip(shift) {
                *v += s;
            }
        }
    }
    Sample { x, y }
}

/// Generate the three splits. The split sizes match `spec` exactly and
/// the test split, alone, receives the optional translation.
pub fn generate(spec: &DatasetSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    let make = |split: u64, n: usize, shifted: bool| Dataset {
        samples: (0..n).map(|i| draw_sample(spec, split, i as u64, shifted)).collect(),
    };
    Ok(Splits {
        train: make(0, spec.n_train, false),
        dev: make(1, spec.n_dev, false),
        test: make(2, spec.n_test, true),
    })
}

/// One JSON object per line: `{"x":[...],"y":k}`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &dataset.samples {
        let line = serde_json::to_string(s)
            .map_err(|e| DataError::BadText(format!("serialize: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL dataset. An empty file is a valid empty dataset; any
/// malformed line is reported with its 1-based line number, and all
/// samples must share one feature dimension.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let r = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| DataError::BadLine { line: lineno, msg: e.to_string() })?;
        match dim {
            None => dim = Some(sample.x.len()),
            Some(want) if sample.x.len() != want => {
                return Err(DataError::DimMismatch { line: lineno, got: sample.x.len(), want });
            }
            _ => {}
        }
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Embed one text as L2-normalized hashed token counts.
pub fn hash_text(text: &str, d_in: usize) -> Vec<f64> {
    let mut x = vec![0.0; d_in];
    for token in text.split_whitespace() {
        x[(fnv1a(token.as_bytes()) % d_in as u64) as usize] += 1.0;
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut x {
            *v /= norm;
        }
    }
    x
}

/// Ingest a two-column CSV (`text,label`, header required) as a dataset
/// of hashed bag-of-words vectors. Labels are assigned class indices in
/// lexicographic order; the mapping is returned alongside the data.
pub fn load_text_csv(path: &Path, d_in: usize) -> Result<(Dataset, Vec<String>), DataError> {
    if d_in == 0 {
        return Err(DataError::BadSpec("d_in must be positive"));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "text" || &headers[1] != "label" {
        return Err(DataError::BadText(format!(
            "expected header \"text,label\", found \"{}\"",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<(String, String)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(DataError::BadLine {
                line: i + 2,
                msg: format!("expected 2 columns, found {}", record.len()),
            });
        }
        rows.push((record[0].to_string(), record[1].to_string()));
    }
    let mut labels: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(DataError::BadText(format!(
            "need at least two distinct labels, found {}",
            labels.len()
        )));
    }
    let samples = rows
        .into_iter()
        .map(|(text, label)| Sample {
            x: hash_text(&text, d_in),
            y: labels.binary_search(&label).expect("label collected above"),
        })
        .collect();
    Ok((Dataset { samples }, labels))
}
