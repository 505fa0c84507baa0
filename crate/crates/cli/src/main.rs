//! `mdt`: data generation, training, evaluation and exports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdt_core::experiments::{ablation, export_attention, export_lengths, sweep_memory};
use mdt_core::model::AblationMode;
use mdt_core::train::{evaluate, generate_all, read_report, train, write_generations, Dataset, Example, Loaded, RunConfig};
use mdt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mdt", version, about = "Memory-driven Transformer for patterned report generation")]
struct Cli {
    /// TOML run configuration; flags below override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// base, base+rm or base+rm+mcln
    #[arg(long, global = true)]
    mode: Option<AblationMode>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Sets both encoder and decoder depth.
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    memory_slots: Option<usize>,
    #[arg(long, global = true)]
    lr_visual: Option<f64>,
    #[arg(long, global = true)]
    lr_other: Option<f64>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data directory.
    Datagen {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        feature_dim: Option<usize>,
        /// Seed of the generator (defaults to the data config's seed).
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Train a model; checkpoints and the loss log go to the output directory.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a split and write generations plus metric reports.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// metrics.json of a baseline run, for the relative-gain column.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output directory (defaults to <out-dir>/eval_<split>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a split and write generations only.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Restrict to these sample ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        /// Output file (defaults to <out-dir>/generations_<split>.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per memory slot count.
    SweepMemory {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        slots: Vec<usize>,
    },
    /// Train and evaluate every ablation mode for each seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Write first-layer cross-attention for one generated report.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample_id: u64,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory (defaults to the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the length histogram of a generations file.
    ExportLengths {
        #[arg(long)]
        generations: PathBuf,
        /// Output file (defaults to lengths.tsv next to the generations).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(o.data_dir => cfg.paths.data_dir);
    set!(o.out_dir => cfg.paths.out_dir);
    set!(o.seed => cfg.train.seed);
    set!(o.mode => cfg.model.mode);
    set!(o.epochs => cfg.train.epochs);
    set!(o.batch_size => cfg.train.batch_size);
    set!(o.d_model => cfg.model.d_model);
    set!(o.heads => cfg.model.heads);
    set!(o.layers => cfg.model.encoder_layers);
    set!(o.layers => cfg.model.decoder_layers);
    set!(o.memory_slots => cfg.model.memory_slots);
    set!(o.lr_visual => cfg.optim.lr_visual);
    set!(o.lr_other => cfg.optim.lr_other);
    set!(o.beam => cfg.decode.beam);
    set!(o.max_len => cfg.decode.max_len);
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.paths.data_dir, Some(cfg.model.feature_dim))
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [Example]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

/// Loads a checkpoint and the dataset its model expects.
fn restore(cfg: &RunConfig, checkpoint: &Path) -> Result<(Loaded, Dataset)> {
    let loaded = Loaded::from_checkpoint(checkpoint)?;
    let data = Dataset::load(&cfg.paths.data_dir, Some(loaded.header.model.feature_dim))?;
    loaded.check_vocab(&data.vocab)?;
    Ok((loaded, data))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, &cli.overrides);
    cfg.validate()?;
    let out_dir = cfg.paths.out_dir.clone();

    match cli.command {
        Command::Datagen {
            n_train,
            n_val,
            n_test,
            noise,
            feature_dim,
            data_seed,
        } => {
            let d = &mut cfg.data;
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_val = n_val.unwrap_or(d.n_val);
            d.n_test = n_test.unwrap_or(d.n_test);
            d.noise = noise.unwrap_or(d.noise);
            d.feature_dim = feature_dim.unwrap_or(d.feature_dim);
            d.seed = data_seed.unwrap_or(d.seed);
            let data = Dataset::generate(&cfg.data, &cfg.paths.data_dir)?;
            println!(
                "wrote {} train, {} val, {} test samples and a {}-word vocabulary to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.vocab.len(),
                cfg.paths.data_dir.display()
            );
        }
        Command::Train { resume } => {
            let data = load_data(&cfg)?;
            let outcome = train(&cfg, &data, resume.as_deref())?;
            for r in &outcome.history {
                println!("epoch {:>3}  loss {:.4}  val_bleu4 {:.4}", r.epoch, r.train_loss, r.val_bleu4);
            }
            println!(
                "best epoch {} (val BLEU-4 {:.4}), {} parameters; checkpoint {}",
                outcome.best_epoch,
                outcome.best_score,
                outcome.num_params,
                outcome.best_checkpoint.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            split: name,
            baseline,
            out,
        } => {
            let (loaded, data) = restore(&cfg, &checkpoint)?;
            let base = baseline.as_deref().map(read_report).transpose()?;
            let base_name = baseline.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let dir = out.unwrap_or_else(|| out_dir.join(format!("eval_{name}")));
            let report = evaluate(&loaded, split(&data, &name)?, &cfg.decode, base.as_ref().map(|b| (base_name.as_str(), b)), &dir)?;
            print!("{}", report.to_key_values());
            println!("wrote {}", dir.display());
        }
        Command::Generate {
            checkpoint,
            split: name,
            ids,
            out,
        } => {
            let (loaded, data) = restore(&cfg, &checkpoint)?;
            let examples: Vec<Example> = split(&data, &name)?
                .iter()
                .filter(|e| ids.is_empty() || ids.contains(&e.sample.id))
                .cloned()
                .collect();
            if let Some(missing) = ids.iter().find(|id| !examples.iter().any(|e| e.sample.id == **id)) {
                return Err(Error::NotFound(format!("sample {missing} in split {name}")));
            }
            let gens = generate_all(&loaded, &examples, &cfg.decode)?;
            let path = out.unwrap_or_else(|| out_dir.join(format!("generations_{name}.jsonl")));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_generations(&path, &gens)?;
            println!("wrote {} generations to {}", gens.len(), path.display());
        }
        Command::SweepMemory { slots } => {
            let data = load_data(&cfg)?;
            let results = sweep_memory(&cfg, &data, &slots)?;
            print!("{}", std::fs::read_to_string(out_dir.join("sweep.tsv"))?);
            println!("wrote {} runs under {}", results.len(), out_dir.display());
        }
        Command::Ablate { seeds } => {
            let data = load_data(&cfg)?;
            let summary = ablation(&cfg, &data, &seeds)?;
            for (mode, s) in &summary.medians {
                println!("{mode:<14} median BLEU-4 {:.4}", s.values()[3]);
            }
            println!("avg_delta(full, base) {:+.2}%", 100.0 * summary.avg_delta_full_vs_base);
        }
        Command::ExportAttention {
            checkpoint,
            sample_id,
            split: name,
            out,
        } => {
            let (loaded, data) = restore(&cfg, &checkpoint)?;
            let dir = out.unwrap_or(out_dir);
            let (export, tsv) = export_attention(&loaded, split(&data, &name)?, sample_id, &cfg.decode, &dir)?;
            println!(
                "wrote {} x {} attention map to {}",
                export.mean.len(),
                export.mean.first().map_or(0, Vec::len),
                tsv.display()
            );
        }
        Command::ExportLengths { generations, out } => {
            let path = out.unwrap_or_else(|| generations.with_file_name("lengths.tsv"));
            let e = export_lengths(&generations, &path)?;
            println!("wrote histogram of {} reports to {}", e.hypotheses.total(), path.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::Json(_) => 3,
        Error::NotFound(_) | Error::Io(_) => 4,
        Error::Vocab(_) | Error::Checkpoint(_) => 5,
        Error::NonFinite(_) => 6,
        Error::Shape { .. } | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
