//! Run configuration, dataset loading, the training loop and evaluation.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::generation::{generate, DecodeConfig};
use crate::metrics::{bleu, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::syndata::{self, load_samples, DataConfig, SyntheticSample, CATEGORIES};
use crate::tensor::{AdamConfig, AdamState, Gradients, Tape};
use crate::vocab::{Vocab, UNK};

/// Parameters whose names start with this prefix form the feature-side
/// learning-rate group.
pub const VISUAL_PREFIX: &str = "encoder.proj";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_visual: f64,
    pub lr_other: f64,
    /// Multiplicative decay applied before every epoch after the first.
    pub decay: f64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_visual: 5e-5,
            lr_other: 1e-4,
            decay: 0.8,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimConfig {
    /// `(visual, other)` learning rates for 0-based `epoch`.
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        let f = self.decay.powi(epoch as i32);
        (self.lr_visual * f, self.lr_other * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Beam width for the per-epoch validation decode.
    pub val_beam: usize,
    /// Decode at most this many validation samples per epoch.
    pub val_limit: Option<usize>,
    /// Train on at most this many samples.
    pub train_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            seed: 1,
            val_beam: 1,
            val_limit: None,
            train_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything except the vocabulary size, which is filled in
    /// from the dataset.
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        for (name, v) in [("lr_visual", o.lr_visual), ("lr_other", o.lr_other), ("decay", o.decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.train.val_beam == 0 || self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("beam widths and max_len must be positive".into()));
        }
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(4);
        model.validate()
    }
}

/// A sample with its report encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sample: SyntheticSample,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn encode_samples(vocab: &Vocab, samples: Vec<SyntheticSample>) -> Result<Vec<Example>> {
    samples
        .into_iter()
        .map(|sample| {
            let tokens = vocab.encode(&sample.report);
            if tokens.contains(&UNK) {
                return Err(Error::Vocab(format!("sample {} has words outside the vocabulary", sample.id)));
            }
            Ok(Example { sample, tokens })
        })
        .collect()
}

impl Dataset {
    /// Generates all splits and writes them with `vocab.txt` and `data.toml`
    /// into `dir`.
    pub fn generate(config: &DataConfig, dir: &Path) -> Result<Self> {
        let generator = syndata::Generator::new(config.clone())?;
        std::fs::create_dir_all(dir)?;
        let vocab = syndata::vocabulary();
        vocab.save(&dir.join("vocab.txt"))?;
        let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("data.toml"), text)?;
        let [train, val, test] = generator.splits();
        for (name, split) in SPLITS.iter().zip([&train, &val, &test]) {
            syndata::write_samples(&split_path(dir, name), split)?;
        }
        Ok(Self {
            train: encode_samples(&vocab, train)?,
            val: encode_samples(&vocab, val)?,
            test: encode_samples(&vocab, test)?,
            vocab,
        })
    }

    pub fn load(dir: &Path, feature_dim: Option<usize>) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut splits = Vec::with_capacity(3);
        for name in SPLITS {
            let samples = load_samples(&split_path(dir, name), feature_dim)?;
            splits.push(encode_samples(&vocab, samples)?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self { vocab, train, val, test })
    }
}

fn lr_groups(store: &ParamStore) -> Vec<bool> {
    store.iter().map(|(_, name, _)| name.starts_with(VISUAL_PREFIX)).collect()
}

/// Loss and gradients of one sample. A non-finite loss comes back with
/// empty gradients so the caller can report the batch.
pub fn sample_gradients(model: &Model, store: &ParamStore, example: &Example) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let x = tape.constant_ref(&example.sample.features);
    let loss = model.nll(&mut tape, store, x, &example.tokens)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Gradients::default()));
    }
    Ok((value, tape.backward(loss)?))
}

/// Mean per-sample loss without gradients.
pub fn mean_loss(model: &Model, store: &ParamStore, examples: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let x = tape.constant_ref(&ex.sample.features);
            let loss = model.nll(&mut tape, store, x, &ex.tokens)?;
            Ok(tape.value(loss).data()[0])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_bleu4: f64,
    pub lr_visual: f64,
    pub lr_other: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub best_checkpoint: PathBuf,
    pub num_params: usize,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    batch: usize,
    sample_ids: Vec<u64>,
    losses: Vec<f64>,
    reports: Vec<&'a str>,
}

fn write_loss_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch\tsteps\ttrain_loss\tval_bleu4\tlr_visual\tlr_other\n");
    for r in history {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.9}\t{:.6}\t{:.6e}\t{:.6e}",
            r.epoch, r.steps, r.train_loss, r.val_bleu4, r.lr_visual, r.lr_other
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// The model config with the vocabulary size taken from `vocab`.
pub fn resolve_model_config(config: &ModelConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut m = config.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    } else if m.vocab_size != vocab.len() {
        return Err(Error::Vocab(format!(
            "config vocab_size {} differs from dataset vocabulary size {}",
            m.vocab_size,
            vocab.len()
        )));
    }
    m.validate()?;
    Ok(m)
}

/// Trains from scratch, or continues from `resume`, writing
/// `epoch_{n}.ckpt`, `best.ckpt`, `loss.tsv` and `config.toml` into the
/// output directory.
pub fn train(config: &RunConfig, data: &Dataset, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = resolve_model_config(&config.model, &data.vocab)?;
    let out = &config.paths.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;

    let train_set = &data.train[..config.train.train_limit.map_or(data.train.len(), |n| n.min(data.train.len()))];
    let val_set = &data.val[..config.train.val_limit.map_or(data.val.len(), |n| n.min(data.val.len()))];
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let (model, mut store, mut adam, mut header) = match resume {
        None => {
            let (model, store) = Model::init(&model_cfg, config.train.seed)?;
            let adam = AdamState::new(&store, config.optim.adam);
            let header = CheckpointHeader {
                model: model_cfg.clone(),
                vocab: data.vocab.words().to_vec(),
                epoch: 0,
                seed: config.train.seed,
                best_score: None,
                best_epoch: None,
                optimizer: None,
                history: Vec::new(),
            };
            (model, store, adam, header)
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.model != model_cfg {
                return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
            }
            if ck.header.vocab != data.vocab.words() {
                return Err(Error::Vocab("checkpoint vocabulary differs from the dataset".into()));
            }
            let model = Model::bind(&model_cfg, &ck.params)?;
            let adam = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            (model, ck.params, adam, ck.header)
        }
    };

    let visual = lr_groups(&store);
    let decode = DecodeConfig {
        beam: config.train.val_beam,
        ..config.decode.clone()
    };
    let val_refs: Vec<&str> = val_set.iter().map(|e| e.sample.report.as_str()).collect();

    for epoch in header.epoch..config.train.epochs {
        let (lr_visual, lr_other) = config.optim.rates(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (b, batch) in order.chunks(config.train.batch_size).enumerate() {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, &store, &train_set[i]))
                .collect::<Result<_>>()?;
            let losses: Vec<f64> = results.iter().map(|r| r.0).collect();
            let mut grads = Gradients::default();
            for (_, g) in &results {
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if losses.iter().any(|l| !l.is_finite()) || !grads.is_finite() {
                let dump = NanDump {
                    epoch,
                    batch: b,
                    sample_ids: batch.iter().map(|&i| train_set[i].sample.id).collect(),
                    losses: losses.clone(),
                    reports: batch.iter().map(|&i| train_set[i].sample.report.as_str()).collect(),
                };
                let path = out.join("nan_dump.json");
                std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
                return Err(Error::NonFinite(format!(
                    "loss diverged in epoch {} batch {b}; batch written to {}",
                    epoch + 1,
                    path.display()
                )));
            }
            loss_sum += losses.iter().sum::<f64>();
            adam.step(&mut store, &grads, |id: ParamId| if visual[id.index()] { lr_visual } else { lr_other })?;
            steps += 1;
        }

        let hyps: Vec<String> = val_set
            .par_iter()
            .map(|ex| {
                let h = generate(&model, &store, &ex.sample.features, &decode)?;
                Ok(data.vocab.decode(&h.tokens))
            })
            .collect::<Result<_>>()?;
        let val_bleu4 = if val_set.is_empty() {
            0.0
        } else {
            {
                let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
                bleu(&hyp_refs, &val_refs)?[3]
            }
        };

        header.epoch = epoch + 1;
        header.history.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            train_loss: loss_sum / train_set.len() as f64,
            val_bleu4,
            lr_visual,
            lr_other,
        });
        log::info!("epoch {} loss {:.4} val_bleu4 {:.4}", epoch + 1, loss_sum / train_set.len() as f64, val_bleu4);
        let improved = header.best_score.is_none_or(|b| val_bleu4 > b);
        if improved {
            header.best_score = Some(val_bleu4);
            header.best_epoch = Some(epoch + 1);
        }
        let ck = Checkpoint {
            header: header.clone(),
            params: store.clone(),
            optimizer: Some(adam.clone()),
        };
        ck.save(&out.join(format!("epoch_{}.ckpt", epoch + 1)))?;
        if improved {
            ck.save(&out.join("best.ckpt"))?;
        }
        write_loss_log(&out.join("loss.tsv"), &header.history)?;
    }

    Ok(TrainOutcome {
        history: header.history.clone(),
        best_epoch: header.best_epoch.unwrap_or(0),
        best_score: header.best_score.unwrap_or(0.0),
        best_checkpoint: out.join("best.ckpt"),
        num_params: store.num_scalars(),
    })
}

/// A trained model restored from a checkpoint.
pub struct Loaded {
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub header: CheckpointHeader,
}

impl Loaded {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let vocab = Vocab::from_words(ck.header.vocab.clone())?;
        let model = Model::bind(&ck.header.model, &ck.params)?;
        Ok(Self {
            model,
            store: ck.params,
            vocab,
            header: ck.header,
        })
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab != *vocab {
            return Err(Error::Vocab(format!(
                "checkpoint vocabulary ({} words) differs from the dataset vocabulary ({} words)",
                self.vocab.len(),
                vocab.len()
            )));
        }
        Ok(())
    }
}

/// One decoded sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub id: u64,
    pub reference: String,
    pub hypothesis: String,
    pub score: f64,
}

pub fn generate_all(loaded: &Loaded, examples: &[Example], decode: &DecodeConfig) -> Result<Vec<Generation>> {
    examples
        .par_iter()
        .map(|ex| {
            let h = generate(&loaded.model, &loaded.store, &ex.sample.features, decode)?;
            Ok(Generation {
                id: ex.sample.id,
                reference: ex.sample.report.clone(),
                hypothesis: loaded.vocab.decode(&h.tokens),
                score: h.score,
            })
        })
        .collect()
}

/// Scores generations; gold labels are parsed from the references.
pub fn score_generations(generations: &[Generation]) -> Result<MetricsReport> {
    let hyps: Vec<&str> = generations.iter().map(|g| g.hypothesis.as_str()).collect();
    let refs: Vec<&str> = generations.iter().map(|g| g.reference.as_str()).collect();
    let gold: Vec<Vec<usize>> = refs.iter().map(|r| syndata::parse_labels(r)).collect();
    MetricsReport::compute(&hyps, &refs, &gold, CATEGORIES, syndata::parse_labels)
}

pub fn write_generations(path: &Path, generations: &[Generation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in generations {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    let file = File::open(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `metrics.txt` (key = value) and `metrics.json` into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.txt"), report.to_key_values())?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Decodes `examples`, scores them and writes `generations.jsonl`,
/// `metrics.txt` and `metrics.json` into `dir`.
pub fn evaluate(loaded: &Loaded, examples: &[Example], decode: &DecodeConfig, baseline: Option<(&str, &MetricsReport)>, dir: &Path) -> Result<MetricsReport> {
    let generations = generate_all(loaded, examples, decode)?;
    std::fs::create_dir_all(dir)?;
    write_generations(&dir.join("generations.jsonl"), &generations)?;
    let mut report = score_generations(&generations)?;
    if let Some((name, base)) = baseline {
        report = report.with_baseline(name, &base.nlg);
    }
    write_report(dir, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let o = OptimConfig::default();
        let (v, r) = o.rates(2);
        assert!((r - 6.4e-5).abs() < 1e-18);
        assert!((v - 3.2e-5).abs() < 1e-18);
        assert_eq!(o.rates(0), (5e-5, 1e-4));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml("[model]\nmode = \"base+rm\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model.mode, crate::model::AblationMode::BaseRm);
        assert!(matches!(RunConfig::from_toml("[model]\nmode = \"other\"\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nunknown = 1\n"), Err(Error::Config(_))));
        let bad = RunConfig {
            optim: OptimConfig {
                lr_other: 0.0,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn reference_against_itself_scores_one() {
        let g = syndata::Generator::new(DataConfig::default()).unwrap();
        let gens: Vec<Generation> = (0..20)
            .map(|i| {
                let s = g.sample(i);
                Generation {
                    id: i,
                    reference: s.report.clone(),
                    hypothesis: s.report,
                    score: 0.0,
                }
            })
            .collect();
        let r = score_generations(&gens).unwrap();
        assert!((r.nlg.values()[3] - 1.0).abs() < 1e-12);
        assert!((r.labels.macro_avg.f1 - 1.0).abs() < 1e-12);
        let kv = r.to_key_values();
        for key in ["bleu_1", "bleu_4", "meteor", "rouge_l", "label_precision", "label_recall", "label_f1"] {
            assert!(kv.contains(&format!("{key} = ")), "{key}");
        }
    }
}
