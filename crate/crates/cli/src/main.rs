use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use perser::baselines::{pretrain_base, ALL_TRAINABLE};
use perser::checkpoint::Checkpoint;
use perser::config::ExperimentConfig;
use perser::corpus::{generate_synthetic, write_manifest, SynthPreset};
use perser::experiment::{
    ablate, class_weights, evaluate_rotation, head_dims, initial_params, load_tasks, meta_learn, rotations, split_for,
    train_rotation, Method, Preloaded,
};
use perser::metrics::summarize;
use perser::report;
use perser::PerserError;

#[derive(Parser)]
#[command(name = "perser", version, about = "Few-shot personalization of emotion classifiers by meta-learning")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest and embedding store.
    Synth,
    /// Train the base model on pooled annotations, one checkpoint per rotation.
    Pretrain,
    /// Meta-train, one checkpoint per rotation.
    MetaTrain {
        /// Directory holding base checkpoints (defaults to the output directory).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run few-shot evaluation over seeds and shot counts.
    Evaluate {
        /// Directory holding checkpoints; missing ones are trained in-process.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Comma-separated methods to evaluate (overrides `methods`).
        #[arg(long, visible_alias = "baseline", value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Meta-learning over the INI/CSMT/DA/LSLR toggle grid.
    Ablate,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Evaluate { methods, .. } = &cli.command {
        if !methods.is_empty() {
            cfg.methods = methods.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

fn rotation_dir(root: &Path, test: &str) -> PathBuf {
    root.join("rotations").join(test)
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let preset = SynthPreset::by_name(&cfg.preset)
        .ok_or_else(|| PerserError::config("preset", format!("unknown preset `{}`", cfg.preset)))?;
    let corpus = generate_synthetic(&preset, cfg.annotators, cfg.samples_per_annotator, cfg.corpus_seed)?;
    let manifest = cfg.out_dir.join("manifest.jsonl");
    let embeddings = cfg.out_dir.join("embeddings");
    fs::create_dir_all(&embeddings).with_context(|| format!("creating {}", embeddings.display()))?;
    write_manifest(&manifest, &corpus.records)?;
    corpus.store.save(&embeddings)?;
    println!(
        "wrote {} annotations over {} utterances to {}",
        corpus.records.len(),
        corpus.store.len(),
        cfg.out_dir.display()
    );
    println!("use with: --set manifest={} --set embeddings={}", manifest.display(), embeddings.display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let tasks = load_tasks(cfg)?;
    for (test, val) in rotations(&tasks, cfg)? {
        info!("pretraining for test annotator {test}");
        let split = split_for(cfg, &tasks, &test, &val)?;
        let weights = class_weights(cfg, &split)?;
        let init = initial_params(cfg, head_dims(&split.train, cfg.hidden)?);
        let out = pretrain_base(&split.train, Some(&split.val), &init, &ALL_TRAINABLE, &weights, &cfg.pretrain_config())?;
        let mut ckpt = Checkpoint::new(cfg.digest(), cfg.seed, out.best_epoch as u64, out.params);
        ckpt.class_weights = Some(weights);
        let dir = rotation_dir(&cfg.out_dir, &test);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        ckpt.save(&dir.join("base.mpck"))?;
        write(&dir.join("pretrain_log.jsonl"), jsonl(&out.log))?;
        println!("{test}: base checkpoint from epoch {}", out.best_epoch);
    }
    Ok(())
}

fn cmd_meta_train(cfg: &ExperimentConfig, init_dir: &Path) -> Result<()> {
    let tasks = load_tasks(cfg)?;
    for (test, val) in rotations(&tasks, cfg)? {
        info!("meta-training for test annotator {test}");
        let split = split_for(cfg, &tasks, &test, &val)?;
        let weights = class_weights(cfg, &split)?;
        let init = initial_params(cfg, head_dims(&split.train, cfg.hidden)?);
        let base = if cfg.ini {
            let path = rotation_dir(init_dir, &test).join("base.mpck");
            let ckpt = Checkpoint::load(&path).context("INI is on and needs a base checkpoint (run `perser pretrain` first)")?;
            Some(ckpt.params)
        } else {
            None
        };
        let out = meta_learn(cfg, &split, &init, base.as_ref(), &weights)?;
        let mut ckpt = Checkpoint::new(cfg.digest(), cfg.seed, out.best_step as u64, out.params);
        ckpt.lslr = Some(out.lslr);
        ckpt.class_weights = Some(weights);
        let dir = rotation_dir(&cfg.out_dir, &test);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        ckpt.save(&dir.join("meta.mpck"))?;
        write(&dir.join("meta_log.jsonl"), jsonl(&out.log))?;
        println!("{test}: meta checkpoint from outer step {}", out.best_step);
    }
    Ok(())
}

fn load_optional(path: &Path) -> Result<Option<Checkpoint>> {
    if path.exists() {
        info!("loading {}", path.display());
        Ok(Some(Checkpoint::load(path)?))
    } else {
        Ok(None)
    }
}

fn cmd_evaluate(cfg: &ExperimentConfig, ckpt_dir: &Path) -> Result<()> {
    let tasks = load_tasks(cfg)?;
    let mut reports = Vec::new();
    for (test, val) in rotations(&tasks, cfg)? {
        let split = split_for(cfg, &tasks, &test, &val)?;
        let dir = rotation_dir(ckpt_dir, &test);
        let base = load_optional(&dir.join("base.mpck"))?.map(|c| c.params);
        let meta = match load_optional(&dir.join("meta.mpck"))? {
            Some(c) => {
                let lslr = c.lslr.ok_or_else(|| PerserError::Checkpoint("meta checkpoint has no rate table".into()))?;
                Some((c.params, lslr))
            }
            None => None,
        };
        info!("evaluating test annotator {test}");
        let models = train_rotation(cfg, &split, Preloaded { base, meta })?;
        reports.extend(evaluate_rotation(cfg, &models, &split.test, &cfg.methods, &cfg.shots)?);
    }
    let summary = summarize(&reports)?;
    let digest = cfg.digest();
    let table = report::summary_table(&summary, &digest);
    write(&cfg.out_dir.join("report.txt"), &table)?;
    write(&cfg.out_dir.join("episodes.jsonl"), report::episodes_jsonl(&reports))?;
    write(&cfg.out_dir.join("shot_sweep.csv"), report::shot_sweep_csv(&summary))?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let rows = ablate(cfg)?;
    let digest = cfg.digest();
    let table = report::ablation_table(&rows, &digest);
    let reports: Vec<_> = rows.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    write(&cfg.out_dir.join("ablation.txt"), &table)?;
    write(&cfg.out_dir.join("ablation.csv"), report::ablation_csv(&rows))?;
    write(&cfg.out_dir.join("ablation_episodes.jsonl"), report::episodes_jsonl(&reports))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write(&cfg.out_dir.join("config.txt"), cfg.to_text())?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::MetaTrain { init } => cmd_meta_train(&cfg, init.as_deref().unwrap_or(&cfg.out_dir)),
        Command::Evaluate { checkpoints, .. } => cmd_evaluate(&cfg, checkpoints.as_deref().unwrap_or(&cfg.out_dir)),
        Command::Ablate => cmd_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|e| e.downcast_ref::<PerserError>())
                .map_or("error", PerserError::category);
            eprintln!("error [{category}]: {err:#}");
            ExitCode::FAILURE
        }
    }
}
