use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmsl::config::ExperimentConfig;
use mmsl::eval::{self, SweepParam};
use mmsl::model::TrackerModel;
use mmsl::objective::VARIANTS;
use mmsl::synth::Dataset;
use mmsl::train::prepare_frames;

#[derive(Parser)]
#[command(name = "mmsl", about = "Structured metric learning for RGB-T tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Named variant (full, no_cross, no_rgbt_terms, baseline_triplet, no_attention_fusion).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Accepted configurations per suite.
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Generate a synthetic dataset as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a tracker and write the model and loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset JSONL; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Track the held-out frames with a trained model.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Embedding-structure report for a trained model.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Snapshot to mine against on training frames; the model itself when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Comma-separated variants; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Sweep one loss hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// m, beta or delta
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        exp = exp.with_seed(seed);
    }
    if let Some(v) = &c.variant {
        exp = eval::with_variant(&exp, v)?;
    }
    Ok(exp)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn dataset(exp: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Dataset::read_jsonl(BufReader::new(f), exp.data.holdout_frames)?)
        }
        None => Ok(eval::dataset_for(exp)?),
    }
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { common, configs } => {
            let results = mmsl::gradcheck::run_all(configs, common.seed.unwrap_or(0))?;
            let mut ok = true;
            for r in &results {
                let pass = r.passed(configs);
                ok &= pass;
                println!(
                    "{:<16} {} checked={} rejected={} max_rel_error={:.3e}",
                    r.name,
                    if pass { "ok  " } else { "FAIL" },
                    r.checked,
                    r.rejected,
                    r.max_rel_error
                );
                for f in &r.failures {
                    println!("    {f}");
                }
            }
            let dir = out_dir(&common)?;
            serde_json::to_writer_pretty(create(dir.join("gradcheck.json"))?, &results)?;
            Ok(ok)
        }
        Command::Gen { common } => {
            let exp = experiment(&common)?;
            let data = eval::dataset_for(&exp)?;
            let dir = out_dir(&common)?;
            data.write_jsonl(create(dir.join("dataset.jsonl"))?)?;
            println!("{} frames written to {}", data.frames.len(), dir.join("dataset.jsonl").display());
            Ok(true)
        }
        Command::Train { common, dataset: path } => {
            let exp = experiment(&common)?;
            let data = dataset(&exp, path.as_deref())?;
            let outcome = mmsl::train::train(&exp.train, &data)?;
            let dir = out_dir(&common)?;
            outcome.model.save(&dir.join("model.json"))?;
            outcome.reference.save(&dir.join("reference.json"))?;
            outcome.history.write_csv(create(dir.join("history.csv"))?)?;
            let last = outcome.history.steps.last();
            println!(
                "{} steps, final total loss {:.6}",
                outcome.history.steps.len(),
                last.map_or(f64::NAN, |s| s.total)
            );
            Ok(true)
        }
        Command::Track { common, model, dataset: path } => {
            let exp = experiment(&common)?;
            let data = dataset(&exp, path.as_deref())?;
            let model = TrackerModel::load(&model)?;
            let report = eval::track_dataset(&model, &data, &exp.eval, exp.train.seed)?;
            let dir = out_dir(&common)?;
            report.write_csv(create(dir.join("track.csv"))?)?;
            println!("precision_rate={:.4} success_rate={:.4}", report.precision_rate, report.success_rate);
            Ok(true)
        }
        Command::Report {
            common,
            model,
            reference,
            dataset: path,
        } => {
            let exp = experiment(&common)?;
            let data = dataset(&exp, path.as_deref())?;
            let model = TrackerModel::load(&model)?;
            let reference = match reference {
                Some(p) => TrackerModel::load(&p)?,
                None => model.clone(),
            };
            let params = exp.train.margin()?;
            let metric = exp.train.distance;
            let train = prepare_frames(&data.train_frames(), &exp.train)?;
            let holdout = prepare_frames(&data.holdout(), &exp.train)?;
            let report = eval::SplitStructure {
                train: eval::structure_report(&model, &reference, &train, &params, metric, exp.eval.epsilon)?,
                holdout: eval::structure_report(&model, &model, &holdout, &params, metric, exp.eval.epsilon)?,
            };
            let dir = out_dir(&common)?;
            serde_json::to_writer_pretty(create(dir.join("structure.json"))?, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Ablate { common, seeds, variants } => {
            if common.variant.is_some() {
                bail!("ablate takes --variants, not --variant");
            }
            let exp = experiment(&common)?;
            let variants: Vec<&str> = if variants.is_empty() {
                VARIANTS.to_vec()
            } else {
                variants.iter().map(String::as_str).collect()
            };
            let table = eval::run_ablation(&exp, &variants, &seeds)?;
            let dir = out_dir(&common)?;
            table.write_csv(create(dir.join("ablation.csv"))?)?;
            print_table(&table);
            Ok(true)
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let exp = experiment(&common)?;
            let values = if values.is_empty() { param.default_grid() } else { values };
            let table = eval::run_sweep(&exp, param, &values, &seeds)?;
            let dir = out_dir(&common)?;
            table.write_csv(create(dir.join(format!("sweep_{}.csv", param.name())))?)?;
            print_table(&table);
            Ok(true)
        }
    }
}

fn print_table(t: &eval::ComparisonTable) {
    println!("{:<22} {:>5} {:>7} {:>7} {:>7} {:>7}", "variant", "seed", "PR", "SR", "margin", "cross");
    for r in &t.rows {
        let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
        println!(
            "{:<22} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.variant, seed, r.precision_rate, r.success_rate, r.margin_satisfaction, r.cross_modal_satisfaction
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
