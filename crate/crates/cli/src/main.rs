use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gmm_adapt::ablation::{component_arms, component_count_arms, format_table, run_arms, weighting_arms};
use gmm_adapt::config::ExperimentConfig;
use gmm_adapt::container::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, read_file, write_file, Checkpoint,
};
use gmm_adapt::eval::{confusion, label_quality, EvalResult};
use gmm_adapt::gmm::ClassGmmSnapshot;
use gmm_adapt::synth::{generate, Dataset};
use gmm_adapt::trainer::{write_metrics_csv, PriorSnapshot, Trainer};
use gmm_adapt::{Error, Result};

/// Gaussian-mixture guided domain adaptation on synthetic scenes.
#[derive(Parser)]
#[command(name = "gmm-adapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat TOML file of `key = value` pairs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file is read, e.g. `--set noise_rate=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write it as a scene container.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, metrics CSV, priors log and a JSON summary.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene container; the scenario is generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint. Stored settings win except `iterations`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's student against the hidden labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep and print a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        sweep: SweepKind,
        /// Component counts for `--sweep M`.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
        values: Vec<usize>,
        /// Seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the mixture bank of a checkpoint as JSON.
    DumpGmm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print class priors as JSON: the per-interval log of a run directory,
    /// or the current values of a checkpoint.
    DumpPriors {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Source,
    Target,
    Heldout,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Lb, Lb+UL, Lb+UL+GMM-Cl.
    Components,
    /// Confidence against proximity weighting of weak-target self-training.
    Weight,
    /// Number of mixture components per class.
    #[value(name = "M", alias = "m")]
    M,
}

const CHECKPOINT_FILE: &str = "checkpoint.ggmk";
const METRICS_FILE: &str = "metrics.csv";
const PRIORS_FILE: &str = "priors.json";
const SUMMARY_FILE: &str = "summary.json";
const CONFIG_FILE: &str = "config.toml";

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Spec(_) => 2,
        Error::Diverged { .. } | Error::NumericalInstability(_) => 3,
        _ => 1,
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &ExperimentConfig) -> Result<Value> {
    Ok(serde_json::to_value(cfg.to_table())?)
}

/// Config of a checkpoint: stored run and training keys, flat.
fn checkpoint_json(ck: &Checkpoint) -> Result<Value> {
    let mut map = serde_json::Map::new();
    for part in [serde_json::to_value(&ck.run)?, serde_json::to_value(&ck.train)?] {
        if let Value::Object(m) = part {
            map.extend(m);
        }
    }
    Ok(Value::Object(map))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => write_file(path, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Loads `data`, or generates the configured scenario, and checks that it
/// has `num_classes` classes.
fn dataset_for(data: Option<&Path>, cfg: &ExperimentConfig, num_classes: usize) -> Result<Dataset> {
    let (dataset, classes, source) = match data {
        Some(path) => {
            let (dataset, classes) = decode_dataset(&read_file(path)?)?;
            (dataset, classes, path.display().to_string())
        }
        None => (generate(&cfg.scenario)?, cfg.scenario.num_classes, "the scenario".to_string()),
    };
    if classes != num_classes {
        return Err(Error::InvalidConfig(format!(
            "{source} has {classes} classes but the model expects {num_classes}"
        )));
    }
    Ok(dataset)
}

fn cmd_generate(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(cfg)?;
    let data = generate(&cfg.scenario)?;
    write_file(out, &encode_dataset(&data, cfg.scenario.num_classes)?)?;
    let sidecar = json!({ "config": config_json(&cfg)?, "seed": cfg.scenario.seed });
    emit(&sidecar, Some(&sidecar_path(out)))?;
    eprintln!(
        "wrote {} ({} source, {} target, {} held-out scenes)",
        out.display(),
        data.source.len(),
        data.target.len(),
        data.heldout.len()
    );
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn cmd_train(cfg: &ConfigArgs, data: Option<&Path>, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(cfg)?;
    let checkpoint = resume.map(|path| decode_checkpoint(&read_file(path)?)).transpose()?;
    let classes = checkpoint.as_ref().map_or(cfg.run.num_classes, |ck| ck.run.num_classes);
    let dataset = dataset_for(data, &cfg, classes)?;
    let mut trainer = match checkpoint {
        Some(mut ck) => {
            ck.train.iterations = cfg.train.iterations;
            cfg.run = ck.run.clone();
            cfg.train = ck.train.clone();
            Trainer::resume(ck, &dataset)?
        }
        None => Trainer::new(cfg.run.clone(), cfg.train.clone(), &dataset)?,
    };
    let log_interval = cfg.train.log_interval;
    let metrics = trainer.run(|r| {
        if (r.iteration + 1) % log_interval == 0 {
            eprintln!(
                "iter {:>6}  ce_l {:.4}  ce_u {:.4}  cl {:.4}",
                r.iteration + 1,
                r.loss.l_ce_labeled,
                r.loss.l_ce_unlabeled,
                r.loss.l_contrastive
            );
        }
    })?;
    let eval = trainer.evaluate();

    std::fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join(CHECKPOINT_FILE), &encode_checkpoint(&trainer.checkpoint())?)?;
    let mut csv = Vec::new();
    write_metrics_csv(&metrics, &mut csv)?;
    write_file(&out_dir.join(METRICS_FILE), &csv)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let config = config_json(&cfg)?;
    let seed = cfg.run.seed;
    emit(
        &json!({ "config": config, "seed": seed, "priors": trainer.prior_log }),
        Some(&out_dir.join(PRIORS_FILE)),
    )?;
    let summary = json!({
        "config": config,
        "seed": seed,
        "dataset": data.map_or_else(|| "generated from config".to_string(), |p| p.display().to_string()),
        "iterations": trainer.iteration,
        "heldout": eval,
        "metrics": metrics,
    });
    emit(&summary, Some(&out_dir.join(SUMMARY_FILE)))?;
    eprintln!("held-out mIoU {:.2}; outputs in {}", 100.0 * eval.miou, out_dir.display());
    Ok(())
}

fn cmd_eval(cfg: &ConfigArgs, checkpoint: &Path, data: Option<&Path>, split: Split, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(cfg)?;
    let ck = decode_checkpoint(&read_file(checkpoint)?)?;
    let dataset = dataset_for(data, &cfg, ck.run.num_classes)?;
    let (name, scenes) = match split {
        Split::Source => ("source", &dataset.source),
        Split::Target => ("target", &dataset.target),
        Split::Heldout => ("heldout", &dataset.heldout),
    };
    if scenes.first().is_some_and(|s| s.raw_dim() != ck.pair.student.shape().raw_dim) {
        return Err(Error::InvalidConfig("dataset raw_dim does not match the checkpoint".into()));
    }
    let mut result = EvalResult::from_confusion(&confusion(&ck.pair.student, scenes));
    result.pseudo_labels = Some(label_quality(&confusion(&ck.pair.teacher, scenes)));
    let report = json!({
        "config": checkpoint_json(&ck)?,
        "scenario": config_json(&cfg)?,
        "seed": ck.run.seed,
        "split": name,
        "result": result,
    });
    emit(&report, out)
}

fn cmd_ablate(cfg: &ConfigArgs, sweep: SweepKind, values: &[usize], seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(cfg)?;
    let (name, arms) = match sweep {
        SweepKind::Components => ("components", component_arms()),
        SweepKind::Weight => ("weight", weighting_arms()),
        SweepKind::M => ("M", component_count_arms(values)),
    };
    let seeds = if seeds.is_empty() { vec![cfg.run.seed] } else { seeds.to_vec() };
    let results = run_arms(&cfg, &arms, &seeds)?;
    print!("{}", format_table(&results));
    if let Some(path) = out {
        let report = json!({
            "config": config_json(&cfg)?,
            "seed": cfg.run.seed,
            "seeds": seeds,
            "sweep": name,
            "results": results,
        });
        emit(&report, Some(path))?;
    }
    Ok(())
}

fn cmd_dump_gmm(checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let ck = decode_checkpoint(&read_file(checkpoint)?)?;
    let classes: Vec<Value> = ck
        .bank
        .snapshot()
        .into_iter()
        .enumerate()
        .map(|(c, g): (usize, Option<ClassGmmSnapshot>)| {
            json!({ "class": c, "queue_len": ck.bank.queue(c).len(), "mixture": g })
        })
        .collect();
    let report = json!({
        "config": checkpoint_json(&ck)?,
        "seed": ck.run.seed,
        "iteration": ck.iteration,
        "classes": classes,
    });
    emit(&report, out)
}

fn cmd_dump_priors(run_dir: Option<&Path>, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let report = match (run_dir, checkpoint) {
        (Some(dir), _) => {
            let text = read_file(&dir.join(PRIORS_FILE))?;
            serde_json::from_slice::<Value>(&text)?
        }
        (None, Some(path)) => {
            let ck = decode_checkpoint(&read_file(path)?)?;
            let now = PriorSnapshot {
                iter: ck.iteration,
                source: ck.target.source_prior().to_vec(),
                target: ck.target.target_prior().to_vec(),
            };
            json!({ "config": checkpoint_json(&ck)?, "seed": ck.run.seed, "priors": [now] })
        }
        (None, None) => return Err(Error::InvalidConfig("give --run-dir or --checkpoint".into())),
    };
    emit(&report, out)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out } => cmd_generate(&cfg, &out),
        Command::Train {
            cfg,
            data,
            out_dir,
            resume,
        } => cmd_train(&cfg, data.as_deref(), &out_dir, resume.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&cfg, &checkpoint, data.as_deref(), split, out.as_deref()),
        Command::Ablate {
            cfg,
            sweep,
            values,
            seeds,
            out,
        } => cmd_ablate(&cfg, sweep, &values, &seeds, out.as_deref()),
        Command::DumpGmm { checkpoint, out } => cmd_dump_gmm(&checkpoint, out.as_deref()),
        Command::DumpPriors {
            run_dir,
            checkpoint,
            out,
        } => cmd_dump_priors(run_dir.as_deref(), checkpoint.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are malformed invocations; help and version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
