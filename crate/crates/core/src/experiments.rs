//! Memory-slot sweep, ablation runs and data exports for plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate, DecodeConfig};
use crate::metrics::{length_histogram, LengthHistogram, MetricsReport, NlgScores};
use crate::model::{AblationMode, Model};
use crate::tensor::Tensor;
use crate::train::{evaluate, read_generations, resolve_model_config, train, Dataset, Example, Loaded, RunConfig};
use crate::vocab::{BOS, EOS};

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub mode: AblationMode,
    pub memory_slots: usize,
    pub seed: u64,
    pub num_params: usize,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

/// Trains with `config` and evaluates the best checkpoint on the test split.
pub fn run_and_evaluate(config: &RunConfig, data: &Dataset, label: &str) -> Result<RunResult> {
    let outcome = train(config, data, None)?;
    let loaded = Loaded::from_checkpoint(&outcome.best_checkpoint)?;
    let report = evaluate(&loaded, &data.test, &config.decode, None, &config.paths.out_dir.join("test"))?;
    Ok(RunResult {
        label: label.to_string(),
        mode: config.model.mode,
        memory_slots: config.model.memory_slots,
        seed: config.train.seed,
        num_params: outcome.num_params,
        best_epoch: outcome.best_epoch,
        report,
    })
}

fn table(results: &[RunResult], first: &str, key: impl Fn(&RunResult) -> String) -> String {
    let mut s = format!("{first}\tparams");
    for name in NlgScores::NAMES {
        let _ = write!(s, "\t{name}");
    }
    s.push_str("\tlabel_p\tlabel_r\tlabel_f1\n");
    for r in results {
        let _ = write!(s, "{}\t{}", key(r), r.num_params);
        for v in r.report.nlg.values() {
            let _ = write!(s, "\t{v:.6}");
        }
        let m = &r.report.labels.macro_avg;
        let _ = writeln!(s, "\t{:.6}\t{:.6}\t{:.6}", m.precision, m.recall, m.f1);
    }
    s
}

/// Trains and evaluates one model per slot count, with everything else
/// fixed. Writes `sweep.tsv` and `sweep.json` into the run's output
/// directory; each run lives in `slots_{n}/`.
pub fn sweep_memory(config: &RunConfig, data: &Dataset, slots: &[usize]) -> Result<Vec<RunResult>> {
    if slots.is_empty() {
        return Err(Error::Config("no slot counts requested".into()));
    }
    if !config.model.mode.has_memory() {
        return Err(Error::Config("the slot sweep needs a memory mode".into()));
    }
    let root = config.paths.out_dir.clone();
    let mut results = Vec::with_capacity(slots.len());
    for &n in slots {
        let mut cfg = config.clone();
        cfg.model.memory_slots = n;
        cfg.paths.out_dir = root.join(format!("slots_{n}"));
        results.push(run_and_evaluate(&cfg, data, &format!("slots_{n}"))?);
    }
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("sweep.tsv"), table(&results, "slots", |r| r.memory_slots.to_string()))?;
    std::fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&results)?)?;
    Ok(results)
}

/// Parameter count of the model `config` describes, without training.
pub fn count_params(config: &RunConfig, data: &Dataset) -> Result<usize> {
    let m = resolve_model_config(&config.model, &data.vocab)?;
    Ok(Model::init(&m, config.train.seed)?.1.num_scalars())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub runs: Vec<RunResult>,
    /// Median over seeds of each NLG metric, per mode.
    pub medians: Vec<(AblationMode, NlgScores)>,
    /// Median over seeds of the macro label F1, per mode.
    pub median_label_f1: Vec<(AblationMode, f64)>,
    /// Average relative gain of the full model's medians over the base
    /// model's.
    pub avg_delta_full_vs_base: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every mode under every seed and summarizes medians. Writes
/// `ablation.tsv` and `ablation.json` into the output directory.
pub fn ablation(config: &RunConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationSummary> {
    let root = config.paths.out_dir.clone();
    let mut runs = Vec::new();
    for &seed in seeds {
        for mode in AblationMode::ALL {
            let mut cfg = config.clone();
            cfg.model.mode = mode;
            cfg.train.seed = seed;
            cfg.paths.out_dir = root.join(format!("{}_seed{seed}", mode.as_str().replace('+', "_")));
            runs.push(run_and_evaluate(&cfg, data, &format!("{mode}/seed{seed}"))?);
        }
    }
    let mut medians = Vec::new();
    let mut median_label_f1 = Vec::new();
    for mode in AblationMode::ALL {
        let of_mode: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
        let mut vals = [0.0; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = median(of_mode.iter().map(|r| r.report.nlg.values()[k]).collect());
        }
        medians.push((mode, NlgScores::from_values(vals)));
        median_label_f1.push((mode, median(of_mode.iter().map(|r| r.report.labels.macro_avg.f1).collect())));
    }
    let find = |m: AblationMode| medians.iter().find(|(k, _)| *k == m).map(|(_, s)| *s).expect("all modes present");
    let avg_delta_full_vs_base = crate::metrics::avg_delta(&find(AblationMode::Full), &find(AblationMode::Base));
    let summary = AblationSummary {
        runs,
        medians,
        median_label_f1,
        avg_delta_full_vs_base,
    };
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("ablation.tsv"), table(&summary.runs, "run", |r| r.label.clone()))?;
    std::fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Cross-attention of the first decoder layer while generating one report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample_id: u64,
    /// Emitted tokens, one per matrix row (the final one may be `<eos>`).
    pub tokens: Vec<String>,
    /// `[head][step][patch]`.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Head average, `[step][patch]`.
    pub mean: Vec<Vec<f64>>,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn attention_map(loaded: &Loaded, example: &Example, decode: &DecodeConfig) -> Result<AttentionExport> {
    let features = &example.sample.features;
    let hyp = generate(&loaded.model, &loaded.store, features, decode)?;
    if hyp.tokens.is_empty() {
        return Err(Error::contract("empty generation"));
    }
    let inputs: Vec<usize> = std::iter::once(BOS).chain(hyp.tokens[..hyp.tokens.len() - 1].iter().copied()).collect();
    let weights = loaded.model.attention_weights(&loaded.store, features, &inputs)?;
    let first = weights.into_iter().next().ok_or_else(|| Error::contract("model has no decoder layer"))?;
    let (t, s) = (first[0].rows(), first[0].cols());
    let mut mean = vec![vec![0.0; s]; t];
    for h in &first {
        for (i, row) in mean.iter_mut().enumerate() {
            row.iter_mut().zip(h.row(i)).for_each(|(m, w)| *m += w / first.len() as f64);
        }
    }
    let tokens = hyp
        .tokens
        .iter()
        .map(|&id| {
            if id == EOS {
                "<eos>".to_string()
            } else {
                loaded.vocab.word(id).unwrap_or("<unk>").to_string()
            }
        })
        .collect();
    Ok(AttentionExport {
        sample_id: example.sample.id,
        tokens,
        heads: first.iter().map(to_rows).collect(),
        mean,
    })
}

/// Writes `attention_{id}.json` and the head-averaged `attention_{id}.tsv`
/// (token, then one column per patch) into `dir`.
pub fn export_attention(loaded: &Loaded, examples: &[Example], sample_id: u64, decode: &DecodeConfig, dir: &Path) -> Result<(AttentionExport, PathBuf)> {
    let example = examples
        .iter()
        .find(|e| e.sample.id == sample_id)
        .ok_or_else(|| Error::NotFound(format!("sample {sample_id}")))?;
    let export = attention_map(loaded, example, decode)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("attention_{sample_id}.json")), serde_json::to_string(&export)?)?;
    let mut s = String::from("token");
    for p in 0..export.mean.first().map_or(0, Vec::len) {
        let _ = write!(s, "\tpatch_{p}");
    }
    s.push('\n');
    for (tok, row) in export.tokens.iter().zip(&export.mean) {
        s.push_str(tok);
        for v in row {
            let _ = write!(s, "\t{v:.17e}");
        }
        s.push('\n');
    }
    let tsv = dir.join(format!("attention_{sample_id}.tsv"));
    std::fs::write(&tsv, s)?;
    Ok((export, tsv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthExport {
    pub hypotheses: LengthHistogram,
    pub references: LengthHistogram,
}

/// Histograms of hypothesis and reference lengths from a generations file,
/// written as a three-column table to `out`.
pub fn export_lengths(generations: &Path, out: &Path) -> Result<LengthExport> {
    let gens = read_generations(generations)?;
    let hyps: Vec<&str> = gens.iter().map(|g| g.hypothesis.as_str()).collect();
    let refs: Vec<&str> = gens.iter().map(|g| g.reference.as_str()).collect();
    let export = LengthExport {
        hypotheses: length_histogram(&hyps),
        references: length_histogram(&refs),
    };
    let mut s = String::from("bin\thypotheses\treferences\n");
    let counts = |h: &LengthHistogram| h.bins.iter().copied().chain([h.overflow]).collect::<Vec<_>>();
    for ((label, a), b) in LengthHistogram::labels().iter().zip(counts(&export.hypotheses)).zip(counts(&export.references)) {
        let _ = writeln!(s, "{label}\t{a}\t{b}");
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, s)?;
    Ok(export)
}
