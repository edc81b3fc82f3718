//! `jrf`: command-line runner for energy-model experiments.
//!
//! Every subcommand resolves one experiment config (recipe or `--config`
//! file, then `--set key=value` overrides, then `--seed`/`--threads`), writes
//! it with the version tag into the output directory, and reports failures as
//! one JSON line on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jrf::config::{DataConfig, ExperimentConfig, Stream};
use jrf::data::{make_split, read_csv, write_csv, LabeledSplit};
use jrf::eval::{classify_error, conditional_generate, energy_grid, interpolate, mode_coverage};
use jrf::experiment::{self, Dataset};
use jrf::nets::NormMode;
use jrf::train::{sample_joint, TrainMode};
use jrf::{Error, Result};
use rand::Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "jrf", version, about = "Energy models trained jointly with a generator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sample revision.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "jrf-out")]
    out: PathBuf,
    /// JSON experiment config; overrides the recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `revision.gamma=0.02`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the training and test data of a recipe as CSV.
    GenData {
        /// Recipe or dataset name (toy32, toy2circ, or a recipe).
        #[arg(long, default_value = "toy32")]
        recipe: String,
    },
    /// Train without labels.
    TrainUnsup(TrainArgs),
    /// Train with a small labeled subset.
    TrainSsl(TrainArgs),
    /// Draw generated and revised samples from a trained model.
    Sample {
        #[command(flatten)]
        model: ModelArg,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
    },
    /// Mode coverage and realistic ratio of generated and revised samples.
    EvalModes {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Potential on a 2-D grid as CSV and PGM.
    EnergyGrid {
        #[command(flatten)]
        model: ModelArg,
        /// Class-conditional potential instead of the marginal.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Classification error on labeled data.
    Classify {
        #[command(flatten)]
        model: ModelArg,
        /// CSV with a `y` column; defaults to the experiment's test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decode a straight latent path between two random endpoints.
    Interpolate {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Class-conditional generation.
    CondGen {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        class: usize,
        #[arg(short, long, default_value_t = 100)]
        n: usize,
        /// Maximum number of proposals.
        #[arg(long, default_value_t = 100_000)]
        cap: usize,
    },
    /// Run a recipe end to end: data, training, evaluation.
    Repro { recipe: String },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    recipe: Option<String>,
    /// Training CSV (`x0, x1, ...` and optionally `y`) instead of the recipe's data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Directory written by a training command.
    #[arg(long)]
    model: PathBuf,
}

fn recipe_for(name: &str) -> &str {
    match name {
        "toy32" => "toy32-unsup",
        "toy2circ" => "toy2circ-ssl",
        "mnist" => "mnist-smoke",
        other => other,
    }
}

fn resolve(g: &Global, base: Option<ExperimentConfig>, recipe: &str) -> Result<ExperimentConfig> {
    let mut cfg = match (&g.config, base) {
        (Some(path), _) => ExperimentConfig::from_json_file(path)?,
        (None, Some(c)) => c,
        (None, None) => ExperimentConfig::recipe(recipe_for(recipe))?,
    };
    cfg = cfg.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    experiment::write_provenance(cfg, out)
}

fn model_config(g: &Global, m: &ModelArg) -> Result<ExperimentConfig> {
    let saved = ExperimentConfig::from_json_file(&m.model.join(experiment::CONFIG_FILE))?;
    resolve(g, Some(saved), "")
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn csv_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    let (x, y) = read_csv(path)?;
    let train = match (cfg.mode, y) {
        (TrainMode::Ssl, Some(y)) => {
            make_split(x, y, cfg.data.labels_per_class(), &mut cfg.streams().rng(Stream::Data))?
        }
        (TrainMode::Ssl, None) => return Err(Error::Data(format!("{} has no y column", path.display()))),
        (TrainMode::Unsup, y) => LabeledSplit {
            x,
            labels: y,
            labeled_idx: Vec::new(),
        },
    };
    let centers = match &cfg.data {
        DataConfig::Rings { spec, .. } => Some(spec.centers()),
        DataConfig::Idx { .. } => None,
    };
    Ok(Dataset {
        train,
        test: None,
        centers,
    })
}

fn train_cmd(g: &Global, args: &TrainArgs, mode: TrainMode) -> Result<serde_json::Value> {
    let default = if mode == TrainMode::Unsup { "toy32-unsup" } else { "toy2circ-ssl" };
    let mut cfg = resolve(g, None, args.recipe.as_deref().unwrap_or(default))?;
    if cfg.mode != mode {
        cfg = cfg.with_overrides(&[format!("mode={}", json!(mode))])?;
    }
    prepare_out(&cfg, &g.out)?;
    let data = match &args.data {
        Some(p) => csv_dataset(&cfg, p)?,
        None => experiment::load_data(&cfg)?,
    };
    let t = experiment::train_models(&cfg, &data, Some(&g.out))?;
    let last = t.log.last();
    Ok(json!({
        "iterations": t.log.len(),
        "final": last,
        "out": g.out,
    }))
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::GenData { recipe } => {
            let cfg = resolve(g, None, recipe)?;
            prepare_out(&cfg, &g.out)?;
            let data = experiment::load_data(&cfg)?;
            experiment::export_data(&data, &g.out)?;
            Ok(json!({"rows": data.train.len(), "out": g.out}))
        }
        Cmd::TrainUnsup(a) => train_cmd(g, a, TrainMode::Unsup),
        Cmd::TrainSsl(a) => train_cmd(g, a, TrainMode::Ssl),
        Cmd::Sample { model, n } => {
            let cfg = model_config(g, model)?;
            prepare_out(&cfg, &g.out)?;
            let (e, gen) = experiment::load_models(&model.model)?;
            let mut rng = cfg.streams().rng(Stream::Eval);
            let joint = sample_joint(&e, &gen, *n, &cfg.eval_revision(), &mut rng, cfg.eval.generate_with_noise)?;
            write_csv(&g.out.join("samples_generated.csv"), &joint.x_prop, None)?;
            write_csv(&g.out.join("samples_revised.csv"), &joint.x_rev, None)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Ok(json!({
                "n": n,
                "energy_before_mean": mean(&joint.energy_before),
                "energy_after_mean": mean(&joint.energy_after),
            }))
        }
        Cmd::EvalModes { model } => {
            let cfg = model_config(g, model)?;
            prepare_out(&cfg, &g.out)?;
            let (centers, _) = match &cfg.data {
                DataConfig::Rings { spec, .. } => spec.centers(),
                DataConfig::Idx { .. } => {
                    return Err(Error::Config("eval-modes needs ring-mixture data (data.source = rings)".into()))
                }
            };
            let (e, gen) = experiment::load_models(&model.model)?;
            let ev = &cfg.eval;
            let rev = cfg.eval_revision();
            let mut rng = cfg.streams().rng(Stream::Eval);
            let noise = ev.generate_with_noise;
            let generated = mode_coverage(
                |n, r| Ok(gen.clone().generate(n, r, noise, NormMode::Inference)?.1),
                &centers,
                ev.coverage_threshold,
                ev.repetitions,
                ev.samples_per_rep,
                &mut rng,
            )?;
            let revised = mode_coverage(
                |n, r| Ok(sample_joint(&e, &gen, n, &rev, r, noise)?.x_rev),
                &centers,
                ev.coverage_threshold,
                ev.repetitions,
                ev.samples_per_rep,
                &mut rng,
            )?;
            let report = json!({"generated": generated, "revised": revised});
            write_json(&g.out.join("mode_report.json"), &report)?;
            Ok(report)
        }
        Cmd::EnergyGrid { model, class } => {
            let cfg = model_config(g, model)?;
            let grid = cfg
                .eval
                .grid
                .clone()
                .ok_or_else(|| Error::Config("eval.grid is not set for this experiment".into()))?;
            prepare_out(&cfg, &g.out)?;
            let (e, _) = experiment::load_models(&model.model)?;
            let eg = energy_grid(&e, grid.x_range, grid.y_range, grid.resolution, *class)?;
            let stem = match class {
                Some(c) => format!("energy_grid_class{c}"),
                None => "energy_grid".into(),
            };
            eg.write_csv(&g.out.join(format!("{stem}.csv")))?;
            eg.write_pgm(&g.out.join(format!("{stem}.pgm")))?;
            Ok(json!({"nodes": eg.values.len(), "class": class}))
        }
        Cmd::Classify { model, data } => {
            let cfg = model_config(g, model)?;
            prepare_out(&cfg, &g.out)?;
            let (e, _) = experiment::load_models(&model.model)?;
            let (x, y) = match data {
                Some(p) => {
                    let (x, y) = read_csv(p)?;
                    (x, y.ok_or_else(|| Error::Data(format!("{} has no y column", p.display())))?)
                }
                None => experiment::load_data(&cfg)?
                    .test
                    .ok_or_else(|| Error::Config("experiment has no test set; pass --data".into()))?,
            };
            let report = classify_error(&e, &x, &y)?;
            let v = serde_json::to_value(&report)?;
            write_json(&g.out.join("classify.json"), &v)?;
            Ok(v)
        }
        Cmd::Interpolate { model, steps } => {
            let cfg = model_config(g, model)?;
            prepare_out(&cfg, &g.out)?;
            let (_, gen) = experiment::load_models(&model.model)?;
            let mut rng = cfg.streams().rng(Stream::Eval);
            let l = gen.latent_dim();
            let ends: Vec<f64> = (0..2 * l).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let path = interpolate(&gen, &ends[..l], &ends[l..], *steps)?;
            write_csv(&g.out.join("interpolation.csv"), &path, None)?;
            Ok(json!({"steps": steps}))
        }
        Cmd::CondGen { model, class, n, cap } => {
            let cfg = model_config(g, model)?;
            prepare_out(&cfg, &g.out)?;
            let (e, gen) = experiment::load_models(&model.model)?;
            let mut rng = cfg.streams().rng(Stream::Eval);
            let c = conditional_generate(&e, &gen, *class, *n, *cap, &cfg.eval_revision(), &mut rng)?;
            write_csv(&g.out.join("conditional.csv"), &c.joint.x_rev, None)?;
            let v = json!({
                "class": class,
                "returned": c.joint.len(),
                "proposed": c.proposed,
                "yield_rate": c.yield_rate,
            });
            write_json(&g.out.join("conditional.json"), &v)?;
            Ok(v)
        }
        Cmd::Repro { recipe } => {
            let cfg = resolve(g, None, recipe)?;
            let s = experiment::run(&cfg, &g.out)?;
            Ok(serde_json::to_value(s)?)
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
