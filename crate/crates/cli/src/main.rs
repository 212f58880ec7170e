use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synernet_core::adapter::AdapterParams;
use synernet_core::agents::{AblationFlags, DifficultyMode};
use synernet_core::config::RunConfig;
use synernet_core::datagen::{generate_benchmark, load_benchmark, make_split, save_dataset, save_split, ALLOWED_SHOTS};
use synernet_core::pipeline::artifacts::{
    dump_embeddings, read_report, write_outcome, write_report, write_text, ABLATION_CSV, REPORT_JSON, SHOTS_CSV,
};
use synernet_core::pipeline::{
    ablation_csv, evaluate, grad_check, jitter, run_ablation, run_experiment, shots_csv, shots_curve, Model,
    TrainBatch, VocabularyMode,
};
use synernet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "synernet", version, about = "Multi-agent adaptation of a frozen dual encoder to unseen concepts")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Shots per OOD class (1, 2, 4, 8 or 16).
    #[arg(long = "K", visible_alias = "k")]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Comma-separated ablation flags, e.g. NO_NOM,SIMPLE_CONCAT.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long, value_parser = ["literal", "per-sample"])]
    difficulty_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and its few-shot splits.
    Synth {
        #[arg(long, env = "SYNERNET_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adapter and evaluate it against the frozen baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training seed; defaults to the configured seed list.
        #[arg(long, env = "SYNERNET_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate the frozen model, a saved adapter, or a shot sweep.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "SYNERNET_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the frozen encoders with plain prompts.
        #[arg(long, conflicts_with_all = ["adapter", "shots"])]
        untrained: bool,
        /// Directory holding adapter.json: a single-seed run or a seed<N>/ subdirectory.
        #[arg(long, conflicts_with = "shots")]
        adapter: Option<PathBuf>,
        /// Comma-separated shot counts for a train-and-evaluate sweep.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every ablation variant over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds, starting at 0.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "SYNERNET_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print CSV summaries of existing run directories without modifying them.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(k) = o.k {
        cfg.train.k = k;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(wd) = o.weight_decay {
        cfg.train.weight_decay = wd;
    }
    if let Some(f) = &o.flags {
        cfg.train.ablation_flags = AblationFlags::parse_list(f)?;
    }
    if let Some(m) = &o.difficulty_mode {
        cfg.train.difficulty_mode = match m.as_str() {
            "per-sample" => DifficultyMode::PerSample,
            _ => DifficultyMode::Literal,
        };
    }
    if !ALLOWED_SHOTS.contains(&cfg.train.k) {
        return Err(Error::InvalidShotCount(cfg.train.k));
    }
    cfg.validate()
}

/// Data settings come from the dataset itself, so the echoed config
/// describes what was actually used.
fn with_dataset(cfg: &mut RunConfig, data: &Path) -> Result<synernet_core::datagen::Benchmark> {
    let bench = load_benchmark(data)?;
    cfg.data_seed = bench.seed;
    cfg.benchmark = bench.config.clone();
    Ok(bench)
}

fn synth(cfg: &mut RunConfig, seed: u64, out: &Path) -> Result<()> {
    cfg.data_seed = seed;
    cfg.validate()?;
    let bench = generate_benchmark(&cfg.benchmark, seed)?;
    let mut split_seeds: Vec<u64> = cfg.train.seeds.iter().chain(&cfg.ablation_seeds).copied().collect();
    split_seeds.sort_unstable();
    split_seeds.dedup();
    let first = make_split(&bench, cfg.train.k, split_seeds[0])?;
    save_dataset(&bench, &first, out)?;
    for &s in &split_seeds {
        for k in ALLOWED_SHOTS {
            save_split(out, &make_split(&bench, k, s)?)?;
        }
    }
    println!(
        "wrote benchmark seed={seed} classes={} samples={} backbone={} to {}",
        bench.classes.len(),
        bench.n_samples(),
        bench.encoders.content_hash(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &mut RunConfig, data: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    if let Some(s) = seed {
        cfg.train.seeds = vec![s];
    }
    let bench = with_dataset(cfg, data)?;
    let (report, outcomes) = run_experiment(&bench, cfg)?;
    let single = outcomes.len() == 1;
    for (o, r) in outcomes.iter().zip(&report.seeds) {
        let dir = if single { out.to_path_buf() } else { out.join(format!("seed{}", r.seed)) };
        write_outcome(&dir, o)?;
    }
    let split = make_split(&bench, cfg.train.k, report.seeds[0].seed)?;
    let model = Model::Adapted {
        params: &outcomes[0].params,
        flags: &cfg.train.ablation_flags,
        difficulty_mode: cfg.train.difficulty_mode,
    };
    dump_embeddings(out, &bench, &split, model)?;
    write_report(out, &report)?;
    let s = &report.summary;
    println!(
        "K={} seeds={} ood_top1={:.4}±{:.4} composite_top1={:.4}±{:.4} sc_top1={:.4} untrained_ood_top1={:.4} untrained_sc_top1={:.4}",
        report.k,
        report.seeds.len(),
        s.ood_top1.mean,
        s.ood_top1.std,
        s.composite_top1.mean,
        s.composite_top1.std,
        s.sc_top1.mean,
        s.untrained_ood_top1.mean,
        s.untrained_sc_top1.mean
    );
    Ok(())
}

fn eval(
    cfg: &mut RunConfig,
    data: &Path,
    seed: Option<u64>,
    out: &Path,
    untrained: bool,
    adapter: Option<&Path>,
    shots: Option<&[usize]>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.train.seeds = vec![s];
    }
    let bench = with_dataset(cfg, data)?;
    if let Some(shots) = shots {
        if let Some(bad) = shots.iter().find(|k| !ALLOWED_SHOTS.contains(k)) {
            return Err(Error::InvalidShotCount(*bad));
        }
        let rows = shots_curve(&bench, cfg, shots)?;
        let csv = shots_csv(&rows);
        write_text(out, SHOTS_CSV, &csv)?;
        print!("{csv}");
        return Ok(());
    }
    let mut results = Vec::new();
    let saved;
    let model = match adapter {
        Some(dir) => {
            let (params, backbone) = AdapterParams::load(dir)?;
            let current = bench.encoders.content_hash();
            if backbone != current {
                return Err(Error::BackboneChanged { before: backbone, after: current });
            }
            // Ablation flags and difficulty mode travel with the run.
            // Multi-seed runs keep report.json one level above seed<N>/.
            let report = read_report(dir).or_else(|e| dir.parent().map_or(Err(e), read_report));
            if let Ok(r) = report {
                cfg.train.ablation_flags = r.config.train.ablation_flags;
                cfg.train.difficulty_mode = r.config.train.difficulty_mode;
                cfg.train.k = r.config.train.k;
            }
            saved = params;
            Model::Adapted {
                params: &saved,
                flags: &cfg.train.ablation_flags,
                difficulty_mode: cfg.train.difficulty_mode,
            }
        }
        None if untrained => Model::Frozen,
        None => {
            return Err(Error::InvalidConfig(
                "eval needs one of --untrained, --adapter DIR or --shots LIST".into(),
            ))
        }
    };
    for &s in &cfg.train.seeds {
        let split = make_split(&bench, cfg.train.k, s)?;
        for mode in [VocabularyMode::OodOnly, VocabularyMode::Composite] {
            let r = evaluate(&bench, &split, model, mode)?;
            println!(
                "seed={s} mode={mode:?} top1={:.4} ood_top1={:.4} sc_top1={}",
                r.top1,
                r.ood_top1,
                r.sc_top1.map_or("-".into(), |v| format!("{v:.4}"))
            );
            results.push(serde_json::json!({ "seed": s, "result": r }));
        }
    }
    let doc = serde_json::json!({
        "config": cfg,
        "backbone_hash": bench.encoders.content_hash(),
        "results": results,
    });
    write_text(out, "eval.json", &serde_json::to_string_pretty(&doc)?)
}

fn ablate(cfg: &mut RunConfig, data: &Path, seeds: Option<u64>, out: &Path) -> Result<()> {
    if let Some(n) = seeds {
        if n == 0 {
            return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
        }
        cfg.ablation_seeds = (0..n).collect();
    }
    let bench = with_dataset(cfg, data)?;
    let rows = run_ablation(&bench, &cfg.train, &cfg.adapter, &cfg.ablation_seeds)?;
    let csv = ablation_csv(&rows);
    write_text(out, ABLATION_CSV, &csv)?;
    let doc = serde_json::json!({
        "config": cfg,
        "backbone_hash": bench.encoders.content_hash(),
        "rows": rows,
    });
    write_text(out, "ablation.json", &serde_json::to_string_pretty(&doc)?)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(cfg: &mut RunConfig, data: &Path, seed: u64, tolerance: Option<f64>) -> Result<()> {
    if let Some(t) = tolerance {
        cfg.gradcheck_tolerance = t;
    }
    let bench = with_dataset(cfg, data)?;
    let split = make_split(&bench, cfg.train.k, seed)?;
    let batch = TrainBatch::new(&bench, &split)?;
    let init = AdapterParams::init(&bench.encoders, &batch.ood_names, &cfg.adapter, &cfg.train.ablation_flags, seed)?;
    let params = jitter(&init, seed)?;
    let report = grad_check(
        &bench,
        &batch,
        &params,
        &cfg.train.ablation_flags,
        cfg.train.difficulty_mode,
        cfg.gradcheck_tolerance,
    )?;
    println!("group,n,max_rel_err,max_abs_grad");
    for g in &report.groups {
        println!("{},{},{:.3e},{:.3e}", g.group, g.n, g.max_rel_err, g.max_abs_grad);
    }
    println!(
        "max_rel_err={:.3e} tolerance={:.1e} residual_fd_grad={:.3e}",
        report.max_rel_err, report.tolerance, report.residual_fd_grad
    );
    report.into_result().map(|_| ())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    println!("run,k,seeds,ood_mean,ood_std,composite_mean,composite_std,sc_mean,untrained_ood_mean,untrained_sc_mean");
    for dir in runs {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a run directory"),
            });
        }
        if dir.join(REPORT_JSON).exists() {
            let r = read_report(dir)?;
            let s = &r.summary;
            println!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                dir.display(),
                r.k,
                r.seeds.len(),
                s.ood_top1.mean,
                s.ood_top1.std,
                s.composite_top1.mean,
                s.composite_top1.std,
                s.sc_top1.mean,
                s.untrained_ood_top1.mean,
                s.untrained_sc_top1.mean
            );
        }
        for name in [ABLATION_CSV, SHOTS_CSV] {
            let path = dir.join(name);
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                println!("# {}", path.display());
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { seed, out } => synth(&mut cfg, seed, &out),
        Command::Train { data, seed, out, overrides } => {
            apply(&mut cfg, &overrides)?;
            train(&mut cfg, &data, seed, &out)
        }
        Command::Eval { data, seed, out, untrained, adapter, shots, overrides } => {
            apply(&mut cfg, &overrides)?;
            eval(&mut cfg, &data, seed, &out, untrained, adapter.as_deref(), shots.as_deref())
        }
        Command::Ablate { data, seeds, out, overrides } => {
            apply(&mut cfg, &overrides)?;
            ablate(&mut cfg, &data, seeds, &out)
        }
        Command::Gradcheck { data, seed, tolerance, overrides } => {
            apply(&mut cfg, &overrides)?;
            gradcheck(&mut cfg, &data, seed, tolerance)
        }
        Command::Report { runs } => report(&runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message:?}", e.kind());
            ExitCode::from(match &e {
                Error::UnknownFlag(_) | Error::InvalidShotCount(_) => 2,
                e if e.is_invariant_violation() => 3,
                _ => 1,
            })
        }
    }
}
