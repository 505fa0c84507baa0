//! Synthetic patterned report task.
//!
//! Each sample has 14 binary findings. Its report walks the categories in a
//! fixed order and emits, per category, either the finding's positive
//! sentence or a normal sentence. Normal sentences come in two phrasings
//! ("styles"); one style is drawn per report and is not visible in the
//! features, so a decoder has to carry it across the whole report.
//!
//! Features are `patches × feature_dim`. Every category owns a unit
//! signature (the signatures are orthonormal) and a home patch
//! `category % patches`; a present finding adds its signature with weight 1
//! on the home patch and `spread` on the other patches. Isotropic Gaussian
//! noise is added everywhere.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{tokenize, Vocab};

pub const CATEGORIES: usize = 14;

#[derive(Clone, Copy, Debug)]
pub struct FindingCategory {
    pub id: usize,
    pub name: &'static str,
    /// Normal sentence in each of the two styles.
    pub normal: [&'static str; 2],
    pub positive: &'static str,
}

const fn cat(id: usize, name: &'static str, a: &'static str, b: &'static str, positive: &'static str) -> FindingCategory {
    FindingCategory {
        id,
        name,
        normal: [a, b],
        positive,
    }
}

pub const CATALOG: [FindingCategory; CATEGORIES] = [
    cat(
        0,
        "enlarged cardiomediastinum",
        "the mediastinal contours are normal",
        "mediastinal silhouette is within normal limits",
        "the mediastinum is widened",
    ),
    cat(
        1,
        "cardiomegaly",
        "heart size is normal",
        "the cardiac silhouette is not enlarged",
        "the heart is moderately enlarged",
    ),
    cat(
        2,
        "lung lesion",
        "no focal lung nodules",
        "there is no suspicious pulmonary mass",
        "a spiculated nodule is noted",
    ),
    cat(
        3,
        "lung opacity",
        "the lungs are clear bilaterally",
        "no focal airspace opacity is present",
        "patchy opacity in the left base",
    ),
    cat(
        4,
        "edema",
        "no pulmonary edema",
        "there is no evidence of vascular congestion",
        "mild interstitial edema is present",
    ),
    cat(
        5,
        "consolidation",
        "no focal consolidation",
        "there is no evidence of consolidation",
        "dense consolidation in the right lower lobe",
    ),
    cat(
        6,
        "pneumonia",
        "no signs of pneumonia",
        "findings do not suggest infection",
        "findings concerning for pneumonia",
    ),
    cat(
        7,
        "atelectasis",
        "no atelectasis",
        "lung volumes are well preserved",
        "bibasilar atelectasis is noted",
    ),
    cat(
        8,
        "pneumothorax",
        "no pneumothorax",
        "there is no evidence of pneumothorax",
        "a small apical pneumothorax",
    ),
    cat(
        9,
        "pleural effusion",
        "no pleural effusion",
        "the costophrenic angles are sharp",
        "moderate bilateral pleural effusions",
    ),
    cat(
        10,
        "pleural other",
        "no pleural thickening",
        "pleural surfaces appear smooth",
        "pleural thickening is seen on the left",
    ),
    cat(
        11,
        "fracture",
        "no acute fracture",
        "the osseous structures are intact",
        "an old healed rib fracture",
    ),
    cat(
        12,
        "support devices",
        "no lines or tubes",
        "no support devices are seen",
        "a central venous catheter is in place",
    ),
    cat(
        13,
        "hernia",
        "no hiatal hernia",
        "the upper abdomen is unremarkable",
        "a small hiatal hernia is seen",
    ),
];

/// Default per-category positive rates, deliberately imbalanced.
pub const DEFAULT_MARGINALS: [f64; CATEGORIES] = [0.10, 0.25, 0.08, 0.30, 0.15, 0.039, 0.12, 0.20, 0.06, 0.22, 0.05, 0.07, 0.18, 0.04];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub spread: f64,
    pub marginals: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 2000,
            n_val: 200,
            n_test: 300,
            patches: 8,
            feature_dim: 128,
            noise: 0.2,
            spread: 0.25,
            marginals: DEFAULT_MARGINALS.to_vec(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 {
            return Err(Error::Config("at least one patch is required".into()));
        }
        if self.feature_dim < CATEGORIES {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold {CATEGORIES} orthogonal signatures",
                self.feature_dim
            )));
        }
        if self.marginals.len() != CATEGORIES || self.marginals.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("marginals must be {CATEGORIES} probabilities")));
        }
        if self.noise.is_nan() || self.noise < 0.0 || !self.spread.is_finite() {
            return Err(Error::Config("noise must be non-negative and spread finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: u64,
    pub features: Tensor,
    pub report: String,
    pub labels: Vec<usize>,
}

/// The report for `labels` in `style` (0 or 1).
pub fn render(labels: &[usize], style: usize) -> String {
    CATALOG
        .iter()
        .map(|c| if labels.contains(&c.id) { c.positive } else { c.normal[style % 2] })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Categories whose positive sentence occurs as a contiguous word sequence.
pub fn parse_labels(report: &str) -> Vec<usize> {
    let words = tokenize(report);
    CATALOG
        .iter()
        .filter(|c| {
            let pat: Vec<&str> = c.positive.split(' ').collect();
            words.windows(pat.len()).any(|w| w.iter().zip(&pat).all(|(a, b)| a == b))
        })
        .map(|c| c.id)
        .collect()
}

/// Every word used by any template.
pub fn template_words() -> Vec<&'static str> {
    let mut words: Vec<&str> = CATALOG
        .iter()
        .flat_map(|c| c.normal.iter().chain(std::iter::once(&c.positive)))
        .flat_map(|s| s.split(' '))
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

pub fn vocabulary() -> Vocab {
    Vocab::build(template_words())
}

/// Deterministic sample generator. Sample `id` depends only on the seed,
/// the config and `id`.
#[derive(Clone, Debug)]
pub struct Generator {
    config: DataConfig,
    signatures: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(config: DataConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let signatures = orthonormal(&mut rng, CATEGORIES, config.feature_dim);
        Ok(Self { config, signatures })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn signature(&self, category: usize) -> &[f64] {
        &self.signatures[category]
    }

    fn rng(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(id);
        rng
    }

    fn draw_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.config
            .marginals
            .iter()
            .enumerate()
            .filter_map(|(c, &p)| (rng.random::<f64>() < p).then_some(c))
            .collect()
    }

    /// The label set of sample `id`, without building its features.
    pub fn labels(&self, id: u64) -> Vec<usize> {
        self.draw_labels(&mut self.rng(id))
    }

    /// Noise-free features for a label set.
    pub fn clean_features(&self, labels: &[usize]) -> Tensor {
        let (s, f) = (self.config.patches, self.config.feature_dim);
        let mut x = Tensor::zeros(&[s, f]);
        for &c in labels {
            let home = c % s;
            for p in 0..s {
                let w = if p == home { 1.0 } else { self.config.spread };
                let row = &mut x.data_mut()[p * f..(p + 1) * f];
                for (v, sig) in row.iter_mut().zip(&self.signatures[c]) {
                    *v += w * sig;
                }
            }
        }
        x
    }

    pub fn sample(&self, id: u64) -> SyntheticSample {
        let mut rng = self.rng(id);
        let labels = self.draw_labels(&mut rng);
        let style = usize::from(rng.random::<bool>());
        let mut features = self.clean_features(&labels);
        if self.config.noise > 0.0 {
            for v in features.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.config.noise * z;
            }
        }
        SyntheticSample {
            id,
            features,
            report: render(&labels, style),
            labels,
        }
    }

    /// Train, validation and test splits with consecutive, disjoint ids.
    pub fn splits(&self) -> [Vec<SyntheticSample>; 3] {
        let c = &self.config;
        let range = |start: usize, n: usize| (start..start + n).map(|i| self.sample(i as u64)).collect();
        [range(0, c.n_train), range(c.n_train, c.n_val), range(c.n_train + c.n_val, c.n_test)]
    }
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    features: Vec<Vec<f64>>,
    report: String,
    labels: Vec<usize>,
}

/// Writes one JSON object per line.
pub fn write_samples(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = Record {
            id: s.id,
            features: (0..s.features.rows()).map(|r| s.features.row(r).to_vec()).collect(),
            report: s.report.clone(),
            labels: s.labels.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file, checking that every sample has `feature_dim`
/// columns (when given) and a consistent patch count.
pub fn load_samples(path: &Path, feature_dim: Option<usize>) -> Result<Vec<SyntheticSample>> {
    let file = File::open(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut out: Vec<SyntheticSample> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        let rows = rec.features.len();
        let cols = rec.features.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || rec.features.iter().any(|r| r.len() != cols) {
            return Err(parse_err(n, "features must be a non-empty rectangular matrix".into()));
        }
        if let Some(want) = feature_dim {
            if cols != want {
                return Err(parse_err(n, format!("feature dimension {cols}, expected {want}")));
            }
        }
        if let Some(first) = out.first() {
            if first.features.rows() != rows {
                return Err(parse_err(n, format!("{rows} patches, earlier samples have {}", first.features.rows())));
            }
        }
        if let Some(bad) = rec.labels.iter().find(|&&c| c >= CATEGORIES) {
            return Err(parse_err(n, format!("label {bad} outside 0..{CATEGORIES}")));
        }
        let data: Vec<f64> = rec.features.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(n, "non-finite feature value".into()));
        }
        out.push(SyntheticSample {
            id: rec.id,
            features: Tensor::new(&[rows, cols], data)?,
            report: rec.report,
            labels: rec.labels,
        });
    }
    Ok(out)
}
