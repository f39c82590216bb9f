use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use neil_core::corpus::{generate_corpus, split_corpus, Corpus, GenConfig};
use neil_core::learning::{parse_systems, run_seed, write_seed_outputs, ExperimentConfig, IterationReport, RunContext, SystemKind};
use neil_core::metrics::{average_reports, build_series, check_trends, emit, final_table, theory_series, Format, ReportSet, TrendSpec};
use neil_core::policy::Policy;
use neil_core::theory::{parse_range, run_tabular, sweep, sweep_csv, TabularEnv, TabularRunConfig};
use neil_service::{AppState, RetrainBase, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything except paths, seeds and system selection.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    /// Seed of the generated corpus when no `--corpus` is given.
    corpus_seed: u64,
    generator: GenConfig,
    experiment: ExperimentConfig,
    theory: TheoryConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TheoryConfig {
    horizon: usize,
    questions: usize,
    actions: usize,
    observations: u32,
    run: TabularRunConfig,
    sweep: String,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { horizon: 3, questions: 5, actions: 3, observations: 2, run: TabularRunConfig::default(), sweep: "0.5:0.05:1.0".into() }
    }
}

#[derive(Parser)]
#[command(name = "neil", version, about = "Interactive imitation learning workbench for a sketch text-to-SQL parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (tables.jsonl, items.jsonl).
    GenCorpus(Common),
    /// Train the initial parser on the initialization split.
    InitTrain(Common),
    /// Run the simulated comparison of the selected systems.
    RunSim(Common),
    /// Tabular checks of the imitation analysis and a confidence sweep.
    TheoryLab(Common),
    /// Average run-sim outputs and write plot series and trend checks.
    Report(Common),
    /// Serve live clarification sessions over HTTP.
    Serve(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus generation, splits and the tabular environment.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Corpus directory written by gen-corpus; generated from the config when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Policy checkpoint to serve instead of the freshly trained initial policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated systems, e.g. neil,full-expert.
    #[arg(long, value_parser = |s: &str| parse_systems(s).map(Systems))]
    systems: Option<Systems>,
    #[arg(long)]
    init_fraction: Option<f64>,
    /// Confidence threshold.
    #[arg(long)]
    mu: Option<f64>,
    /// Options shown per clarification question.
    #[arg(long)]
    k_options: Option<usize>,
    /// Questions per iteration.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Threshold sweep as mu=start:step:end.
    #[arg(long, value_parser = parse_sweep)]
    sweep: Option<Sweep>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

#[derive(Clone)]
struct Systems(Vec<SystemKind>);

#[derive(Clone)]
struct Sweep(Vec<f64>);

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let range = s.strip_prefix("mu=").ok_or_else(|| format!("expected mu=start:step:end, got {s:?}"))?;
    parse_range(range).map(Sweep)
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => Config::default(),
        };
        let exp = &mut cfg.experiment;
        if let Some(s) = &self.systems {
            exp.systems = s.0.clone();
        }
        if let Some(f) = self.init_fraction {
            exp.split.init_fraction = f;
        }
        if let Some(mu) = self.mu {
            exp.interaction.mu = mu;
            cfg.theory.run.mu = mu;
        }
        if let Some(k) = self.k_options {
            exp.interaction.k = k;
        }
        if let Some(m) = self.m {
            exp.m = m;
        }
        if let Some(n) = self.iterations {
            exp.iterations = n;
            cfg.theory.run.iterations = n;
        }
        if let Some(seed) = self.seed {
            exp.seeds = vec![seed];
        }
        Ok(cfg)
    }

    fn corpus(&self, cfg: &Config) -> Result<Corpus> {
        match &self.corpus {
            Some(dir) => Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display())),
            None => {
                info!("generating corpus with seed {}", cfg.corpus_seed);
                Ok(generate_corpus(&cfg.generator, cfg.corpus_seed)?)
            }
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let seed = args.seed.unwrap_or(cfg.corpus_seed);
    let corpus = generate_corpus(&cfg.generator, seed)?;
    corpus.save(&args.out)?;
    info!("wrote {} tables and {} items to {}", corpus.tables.len(), corpus.items.len(), args.out.display());
    Ok(())
}

fn first_seed(cfg: &Config) -> u64 {
    cfg.experiment.seeds.first().copied().unwrap_or(0)
}

fn init_train(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let corpus = args.corpus(&cfg)?;
    let seed = first_seed(&cfg);
    let exp = &cfg.experiment;
    let splits = split_corpus(&corpus.items, &exp.split, seed)?;
    let ctx = RunContext::new(&corpus, &splits, exp.interaction, exp.train.clone())?;
    fs::create_dir_all(&args.out)?;
    ctx.init_policy.save(&args.out.join("init-policy.json"))?;
    let summary = serde_json::json!({
        "seed": seed,
        "init_questions": splits.init_train.len(),
        "init_examples": ctx.d0.len(),
        "val_acc": ctx.validation.accuracy(&ctx.init_policy),
        "test_acc": ctx.test.accuracy(&ctx.init_policy),
    });
    write_json(&args.out.join("init-summary.json"), &summary)?;
    info!("initial policy: {summary}");
    Ok(())
}

fn run_sim(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let corpus = args.corpus(&cfg)?;
    let exp = &cfg.experiment;
    if exp.seeds.is_empty() {
        bail!("no seeds configured");
    }
    let exp_dir = args.out.join(&exp.experiment_id);
    fs::create_dir_all(&exp_dir)?;
    write_json(&exp_dir.join("config.json"), &cfg)?;
    for &seed in &exp.seeds {
        info!("{}: seed {seed}, systems {:?}", exp.experiment_id, exp.systems);
        let runs = run_seed(&corpus, exp, seed)?;
        let dir = exp_dir.join(format!("seed-{seed}"));
        write_seed_outputs(&dir, &runs)?;
        let reports: Vec<IterationReport> = runs.iter().flat_map(|r| r.reports.iter().cloned()).collect();
        write_json(&dir.join("reports.json"), &reports)?;
        for r in &runs {
            if let Some(e) = &r.error {
                warn!("{} stopped early on seed {seed}: {e}", r.system);
            }
        }
    }
    Ok(())
}

fn seed_dirs(exp_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(exp_dir)
        .with_context(|| format!("reading {}", exp_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn report(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let exp_id = &cfg.experiment.experiment_id;
    let exp_dir = args.out.join(exp_id);
    let mut per_seed = Vec::new();
    for dir in seed_dirs(&exp_dir)? {
        let path = dir.join("reports.json");
        let reports: Vec<IterationReport> = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
        per_seed.push(reports);
    }
    if per_seed.is_empty() {
        bail!("no seed-* runs under {}", exp_dir.display());
    }
    let averaged = average_reports(&per_seed)?;
    let series = build_series(&[ReportSet { experiment_id: exp_id.clone(), reports: averaged.clone() }])?;
    let series_dir = exp_dir.join("series");
    emit(&series_dir, exp_id, &series, Format::Csv)?;
    fs::write(exp_dir.join("final.csv"), final_table(&averaged))?;
    let present: Vec<SystemKind> = SystemKind::ALL.into_iter().filter(|s| averaged.iter().any(|r| r.system == *s)).collect();
    if present.len() == SystemKind::ALL.len() {
        let trends = check_trends(&series, &TrendSpec::default_orderings())?;
        for c in &trends.checks {
            info!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.description, c.detail);
        }
        write_json(&exp_dir.join("trends.json"), &trends)?;
    } else {
        info!("trend checks need all systems; skipping");
    }
    info!("averaged {} seeds into {}", per_seed.len(), series_dir.display());
    Ok(())
}

fn theory_lab(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let th = &cfg.theory;
    let seed = args.seed.unwrap_or(0);
    let env = TabularEnv::random(&mut ChaCha8Rng::seed_from_u64(seed), th.horizon, th.questions, th.actions, th.observations);
    let (iterates, report) = run_tabular(&env, &th.run)?;
    let mus = match &args.sweep {
        Some(m) => m.0.clone(),
        None => parse_range(&th.sweep).map_err(anyhow::Error::msg)?,
    };
    // The sweep probes the policy fitted on the initial questions.
    let probe = iterates.first().context("tabular run produced no policy")?;
    let rows = sweep(&env, probe, &mus)?;
    let dir = args.out.join("theory");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("env.json"), &env)?;
    write_json(&dir.join("report.json"), &report)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    emit(&dir.join("series"), "theory", &theory_series(&report, "TABULAR"), Format::Csv)?;
    info!("J_best {:.6}, bound before the constant term {:.6}, {} sweep rows", report.j_best, report.bound, rows.len());
    Ok(())
}

fn serve(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let corpus = args.corpus(&cfg)?;
    let exp = &cfg.experiment;
    let splits = split_corpus(&corpus.items, &exp.split, first_seed(&cfg))?;
    let ctx = RunContext::new(&corpus, &splits, exp.interaction, exp.train.clone())?;
    let policy = match &args.checkpoint {
        Some(p) => Policy::load(p)?,
        None => (*ctx.init_policy).clone(),
    };
    let base = RetrainBase { init: Policy::zeros(), base: ctx.d0.clone(), validation: Some(ctx.validation.clone()) };
    let service_cfg = ServiceConfig {
        interaction: exp.interaction,
        train: exp.train.clone(),
        feedback_path: args.out.join("feedback.jsonl"),
        snapshot_path: Some(args.out.join("sessions.json")),
    };
    let state = AppState::new(corpus.tables.clone(), policy, base, service_cfg)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], args.port));
    tokio::runtime::Runtime::new()?.block_on(neil_service::serve(state, addr))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NEIL_LOG_LEVEL", "info")).init();
    let result = match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::InitTrain(a) => init_train(a),
        Command::RunSim(a) => run_sim(a),
        Command::TheoryLab(a) => theory_lab(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
