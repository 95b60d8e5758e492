//! Command-line entry point: probe, run, plot-ledger, oracle-check,
//! validate-task.
//!
//! Every file-producing run writes a manifest first (input digests, resolved
//! flags, seeds) and rewrites it with the final status, so failed runs leave
//! a "failed" marker behind. `NEUROPROBE_THREADS` caps evaluation
//! parallelism; all outputs are deterministic functions of inputs and seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::archive;
use crate::attribution::{
    accumulate_effects, contribution_proportion, top_k, DirectEffectLedger, LnMode, SelectionSpec,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::model::{load_weights_remapped, ModelConfig, PositionScope};
use crate::oracle;
use crate::pipeline::{
    run_experiment, BaselineSpec, ExperimentPlan, ExperimentReport, PoolingRule, SplitRule,
};
use crate::svg;
use crate::tasks::{load_task, split_probe_test};
use crate::tokenizer::load_vocab;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "neuroprobe",
    version,
    about = "GPT-2-family CPU inference lab: neuron attribution, ablation and scaling experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build the per-neuron direct-effect ledger over the probe half and
    /// write top-k selections.
    Probe(ProbeArgs),
    /// Full pipeline: probe, select, intervene, evaluate, report.
    Run(RunArgs),
    /// Render the contribution-proportion scatter from a ledger CSV.
    PlotLedger(PlotLedgerArgs),
    /// Check the engine forward pass against the straight-line oracle on
    /// random tiny models.
    OracleCheck(OracleCheckArgs),
    /// Validate a task file against a vocabulary.
    ValidateTask(ValidateTaskArgs),
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Weight archive (F32 named-tensor file).
    #[arg(long)]
    pub weights: PathBuf,
    /// Model config JSON; overrides the archive's embedded metadata.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tensor-name remapping JSON for third-party checkpoints.
    #[arg(long)]
    pub remap: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct VocabArgs {
    /// vocab.json (token string -> id).
    #[arg(long)]
    pub vocab: PathBuf,
    /// merges.txt (version comment, then "left right" per line).
    #[arg(long)]
    pub merges: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LnModeArg {
    Frozen,
    Exact,
}

impl From<LnModeArg> for LnMode {
    fn from(v: LnModeArg) -> Self {
        match v {
            LnModeArg::Frozen => LnMode::Frozen,
            LnModeArg::Exact => LnMode::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PositionsArg {
    All,
    Final,
}

impl From<PositionsArg> for PositionScope {
    fn from(v: PositionsArg) -> Self {
        match v {
            PositionsArg::All => PositionScope::All,
            PositionsArg::Final => PositionScope::Final,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    /// Mean of the two counterbalance variants per pair.
    Pooled,
    /// Variant A only.
    VariantA,
}

impl From<PoolingArg> for PoolingRule {
    fn from(v: PoolingArg) -> Self {
        match v {
            PoolingArg::Pooled => PoolingRule::PooledMean,
            PoolingArg::VariantA => PoolingRule::VariantA,
        }
    }
}

#[derive(Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Task file (JSON).
    #[arg(long)]
    pub task: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Selection sizes; repeatable.
    #[arg(long = "k", default_values_t = [5usize, 50])]
    pub k: Vec<usize>,
    /// Final-LayerNorm treatment for the direction gradient.
    #[arg(long = "ln-mode", value_enum, default_value_t = LnModeArg::Frozen)]
    pub ln_mode: LnModeArg,
    /// Shuffle pairs with this seed before splitting (default: parity).
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
}

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Seed for random-neuron baselines.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random-baseline repetitions.
    #[arg(long = "baseline-reps", default_value_t = 20)]
    pub baseline_reps: usize,
    /// Activation scaling factor for the enhancement condition.
    #[arg(long = "scale-factor", default_value_t = 2.0)]
    pub scale_factor: f32,
    /// Token positions interventions apply to.
    #[arg(long, value_enum, default_value_t = PositionsArg::All)]
    pub positions: PositionsArg,
    /// How counterbalance variants pool into per-pair values.
    #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
    pub pooling: PoolingArg,
    /// Evaluate only the original conditions.
    #[arg(long = "no-interventions")]
    pub no_interventions: bool,
    /// Write the manifest and exit without computing.
    #[arg(long = "dry-run")]
    pub dry_run: bool,
}

#[derive(Args)]
pub struct PlotLedgerArgs {
    /// Ledger CSV produced by probe/run.
    #[arg(long)]
    pub ledger: PathBuf,
    /// Ledger JSON sidecar (default: ledger path with .json extension).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of top neurons to plot.
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Number of leading points to outline.
    #[arg(long, default_value_t = 5)]
    pub outline: usize,
}

#[derive(Args)]
pub struct OracleCheckArgs {
    /// Number of random tiny configurations to compare.
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Seed for configuration generation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the check report.
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum tolerated |engine − oracle| logit error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Args)]
pub struct ValidateTaskArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Task file (JSON).
    #[arg(long)]
    pub task: PathBuf,
}

// --- manifest ---------------------------------------------------------------

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Manifest {
    path: PathBuf,
    body: serde_json::Value,
}

impl Manifest {
    /// Digest inputs and write the manifest with "running" status before
    /// any compute happens.
    fn start(
        out_dir: &Path,
        subcommand: &str,
        config: serde_json::Value,
        inputs: &[(&str, &Path)],
        seeds: serde_json::Value,
    ) -> Result<Manifest> {
        std::fs::create_dir_all(out_dir)?;
        let mut digests = BTreeMap::new();
        for (name, path) in inputs {
            // An unreadable input still gets a manifest entry; the load
            // stage reports the real error and the manifest ends "failed".
            let digest = match sha256_file(path) {
                Ok(d) => serde_json::json!({
                    "path": path.display().to_string(),
                    "sha256": d,
                }),
                Err(e) => serde_json::json!({
                    "path": path.display().to_string(),
                    "sha256": serde_json::Value::Null,
                    "error": e.to_string(),
                }),
            };
            digests.insert(name.to_string(), digest);
        }
        let body = serde_json::json!({
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "config": config,
            "inputs": digests,
            "seeds": seeds,
            "out_dir": out_dir.display().to_string(),
            "status": "running",
            "error": serde_json::Value::Null,
            "outputs": [],
        });
        let manifest = Manifest {
            path: out_dir.join("manifest.json"),
            body,
        };
        manifest.write()?;
        Ok(manifest)
    }

    fn write(&self) -> Result<()> {
        std::fs::write(&self.path, serde_json::to_string_pretty(&self.body)? + "\n")?;
        Ok(())
    }

    fn finish(mut self, result: &Result<Vec<PathBuf>>) -> Result<PathBuf> {
        match result {
            Ok(files) => {
                self.body["status"] = "ok".into();
                self.body["outputs"] = files
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .into();
            }
            Err(e) => {
                self.body["status"] = "failed".into();
                self.body["error"] = format!("{e:#}").into();
            }
        }
        self.write()?;
        Ok(self.path)
    }
}

// --- shared loading ---------------------------------------------------------

fn resolve_config(model: &ModelArgs) -> Result<ModelConfig> {
    let cfg = if let Some(path) = &model.config {
        serde_json::from_str(&std::fs::read_to_string(path)?)?
    } else {
        let meta = archive::read_metadata(&model.weights)?;
        ModelConfig::from_metadata(&meta).ok_or_else(|| {
            Error::Param(format!(
                "archive {} carries no config metadata; pass --config",
                model.weights.display()
            ))
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(model: &ModelArgs, cfg: &ModelConfig) -> Result<crate::model::ModelWeights> {
    let remap = match &model.remap {
        Some(path) => Some(archive::load_remap(path)?),
        None => None,
    };
    load_weights_remapped(&model.weights, cfg, remap.as_ref())
}

// --- subcommands ------------------------------------------------------------

pub fn cmd_probe(args: &ProbeArgs) -> Result<Vec<PathBuf>> {
    let config = serde_json::json!({
        "k": args.k,
        "ln_mode": format!("{}", LnMode::from(args.ln_mode)),
    });
    let inputs: Vec<(&str, &Path)> = vec![
        ("weights", &args.model.weights),
        ("vocab", &args.vocab.vocab),
        ("merges", &args.vocab.merges),
        ("task", &args.task),
    ];
    let seeds = serde_json::json!({ "split_seed": args.split_seed });
    let manifest = Manifest::start(&args.out, "probe", config, &inputs, seeds)?;

    let result = (|| -> Result<Vec<PathBuf>> {
        let cfg = resolve_config(&args.model).map_err(|e| e.in_stage("config"))?;
        let vocab =
            load_vocab(&args.vocab.vocab, &args.vocab.merges).map_err(|e| e.in_stage("vocab"))?;
        let weights = load_model(&args.model, &cfg).map_err(|e| e.in_stage("weights"))?;
        let task = load_task(&args.task, &vocab).map_err(|e| e.in_stage("task-load"))?;
        let split = split_probe_test(&task, args.split_seed).map_err(|e| e.in_stage("split"))?;
        let ledger = accumulate_effects(
            &weights,
            &cfg,
            &vocab,
            &task.name,
            &split.probe,
            args.ln_mode.into(),
        )
        .map_err(|e| e.in_stage("ledger"))?;

        let mut files = Vec::new();
        let csv = args.out.join("ledger.csv");
        ledger.write_csv(&csv)?;
        files.push(csv);
        let sidecar = args.out.join("ledger.json");
        ledger.write_sidecar(&sidecar)?;
        files.push(sidecar);
        for &k in &args.k {
            let neurons =
                top_k(&ledger, SelectionSpec { k }).map_err(|e| e.in_stage("selection"))?;
            let path = args.out.join(format!("selection_k{k}.json"));
            let body = serde_json::json!({ "k": k, "neurons": neurons });
            std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
            files.push(path);
        }
        Ok(files)
    })();

    let manifest_path = manifest.finish(&result)?;
    let mut files = result?;
    files.push(manifest_path);
    Ok(files)
}

fn write_items_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "condition,pair_id,variant,logit_diff")?;
    for c in &report.conditions {
        for item in &c.per_item {
            writeln!(
                f,
                "{}/{},{},{},{}",
                c.name,
                c.subset,
                item.pair_id,
                item.variant.as_char(),
                item.logit_diff
            )?;
        }
    }
    for rb in &report.random_baselines {
        for rep in &rb.reps {
            for item in &rep.per_item {
                writeln!(
                    f,
                    "random-{}-k{}-rep{}/{},{},{},{}",
                    rb.mode,
                    rb.k,
                    rep.rep,
                    rb.subset,
                    item.pair_id,
                    item.variant.as_char(),
                    item.logit_diff
                )?;
            }
        }
    }
    Ok(())
}

fn report_bar_chart(report: &ExperimentReport) -> String {
    let mut bars = Vec::new();
    for c in &report.conditions {
        bars.push(svg::BarDatum {
            label: format!("{}/{}", c.name, c.subset),
            mean: c.stats.mean,
            sd: c.stats.sd,
        });
    }
    for rb in &report.random_baselines {
        let means: Vec<f64> = rb.reps.iter().map(|r| r.stats.mean).collect();
        let sd = if means.len() >= 2 {
            crate::stats::summarize(&means)
                .map(|(_, sd)| sd)
                .unwrap_or(0.0)
        } else {
            0.0
        };
        bars.push(svg::BarDatum {
            label: format!("random-{}-k{}", rb.mode, rb.k),
            mean: rb.mean_across_reps,
            sd,
        });
    }
    svg::bar_chart(
        &format!("{} (condition means, SD whiskers)", report.task),
        "mean logit difference",
        &bars,
    )
}

pub fn cmd_run(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let plan_for = |task_path: &Path| ExperimentPlan {
        task_path: task_path.to_path_buf(),
        split: match args.probe.split_seed {
            None => SplitRule::Parity,
            Some(s) => SplitRule::Seeded(s),
        },
        ln_mode: args.probe.ln_mode.into(),
        k_values: args.probe.k.clone(),
        run_interventions: !args.no_interventions,
        scale_factor: args.scale_factor,
        baseline: BaselineSpec {
            reps: args.baseline_reps,
            seed: args.seed,
        },
        positions: args.positions.into(),
        pooling: args.pooling.into(),
    };
    let plan = plan_for(&args.probe.task);
    let config = serde_json::json!({
        "plan": plan,
        "dry_run": args.dry_run,
    });
    let inputs: Vec<(&str, &Path)> = vec![
        ("weights", &args.probe.model.weights),
        ("vocab", &args.probe.vocab.vocab),
        ("merges", &args.probe.vocab.merges),
        ("task", &args.probe.task),
    ];
    let seeds = serde_json::json!({
        "split_seed": args.probe.split_seed,
        "baseline_seed": args.seed,
    });
    let manifest = Manifest::start(&args.probe.out, "run", config, &inputs, seeds)?;

    let result = (|| -> Result<Vec<PathBuf>> {
        if args.dry_run {
            return Ok(Vec::new());
        }
        let cfg = resolve_config(&args.probe.model).map_err(|e| e.in_stage("config"))?;
        let vocab = load_vocab(&args.probe.vocab.vocab, &args.probe.vocab.merges)
            .map_err(|e| e.in_stage("vocab"))?;
        let weights = load_model(&args.probe.model, &cfg).map_err(|e| e.in_stage("weights"))?;

        let report = run_experiment(&weights, &cfg, &vocab, &plan, Some(&args.probe.out))?;

        let mut files = vec![
            args.probe.out.join("ledger.csv"),
            args.probe.out.join("ledger.json"),
        ];
        for sel in &report.selections {
            files.push(args.probe.out.join(format!("selection_k{}.json", sel.k)));
        }
        let report_path = args.probe.out.join("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
        files.push(report_path);
        let items_path = args.probe.out.join("items.csv");
        write_items_csv(&items_path, &report)?;
        files.push(items_path);
        let chart_path = args.probe.out.join("chart.svg");
        std::fs::write(&chart_path, report_bar_chart(&report))?;
        files.push(chart_path);
        Ok(files)
    })();

    let manifest_path = manifest.finish(&result)?;
    let mut files = result?;
    files.push(manifest_path);
    Ok(files)
}

pub fn cmd_plot_ledger(args: &PlotLedgerArgs) -> Result<Vec<PathBuf>> {
    let sidecar = args
        .sidecar
        .clone()
        .unwrap_or_else(|| args.ledger.with_extension("json"));
    let config = serde_json::json!({ "top": args.top, "outline": args.outline });
    let inputs: Vec<(&str, &Path)> = vec![("ledger", &args.ledger), ("sidecar", &sidecar)];
    let manifest = Manifest::start(
        &args.out,
        "plot-ledger",
        config,
        &inputs,
        serde_json::json!({}),
    )?;

    let result = (|| -> Result<Vec<PathBuf>> {
        let ledger = DirectEffectLedger::read_files(&args.ledger, &sidecar)?;
        let selected = top_k(
            &ledger,
            SelectionSpec {
                k: args.top.min(ledger.len()),
            },
        )?;
        let proportions = contribution_proportion(&ledger, &selected)?;
        let points: Vec<(crate::model::NeuronRef, f64)> =
            selected.iter().map(|&n| (n, proportions[&n])).collect();
        let svg_text = svg::ledger_scatter(
            &format!(
                "{}: top-{} contribution proportions",
                ledger.task,
                points.len()
            ),
            &points,
            args.outline,
        );
        let path = args.out.join("ledger_scatter.svg");
        std::fs::write(&path, svg_text)?;
        Ok(vec![path])
    })();

    let manifest_path = manifest.finish(&result)?;
    let mut files = result?;
    files.push(manifest_path);
    Ok(files)
}

pub fn cmd_oracle_check(args: &OracleCheckArgs) -> Result<Vec<PathBuf>> {
    let config = serde_json::json!({ "count": args.count, "tolerance": args.tolerance });
    let seeds = serde_json::json!({ "seed": args.seed });
    let manifest = Manifest::start(&args.out, "oracle-check", config, &[], seeds)?;

    let result = (|| -> Result<Vec<PathBuf>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut max_err = 0.0f64;
        let mut worst = 0usize;
        for i in 0..args.count {
            let cfg = fixtures::random_config(&mut rng);
            let w = fixtures::random_weights(&cfg, &mut rng);
            let len = rng.random_range(1..=8usize);
            let tokens: Vec<crate::tokenizer::TokenId> = (0..len)
                .map(|_| crate::tokenizer::TokenId(rng.random_range(0..cfg.n_vocab as u32)))
                .collect();
            let engine =
                crate::model::forward(&w, &cfg, &tokens, &crate::model::InterventionSpec::none())?;
            let reference = oracle::oracle_forward(&w, &cfg, &tokens)?;
            for (e, o) in engine.logits.0.iter().zip(reference.iter()) {
                let err = (f64::from(*e) - o).abs();
                if err > max_err {
                    max_err = err;
                    worst = i;
                }
            }
        }
        let pass = max_err <= args.tolerance;
        let body = serde_json::json!({
            "count": args.count,
            "seed": args.seed,
            "max_abs_logit_err": max_err,
            "worst_config_index": worst,
            "tolerance": args.tolerance,
            "pass": pass,
        });
        let path = args.out.join("oracle_check.json");
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        println!(
            "oracle-check: {} configs, max |engine - oracle| = {max_err:.3e} ({})",
            args.count,
            if pass { "pass" } else { "FAIL" }
        );
        if !pass {
            return Err(Error::Param(format!(
                "engine/oracle divergence {max_err:.3e} exceeds {:.1e}",
                args.tolerance
            )));
        }
        Ok(vec![path])
    })();

    let manifest_path = manifest.finish(&result)?;
    let mut files = result?;
    files.push(manifest_path);
    Ok(files)
}

pub fn cmd_validate_task(args: &ValidateTaskArgs) -> Result<Vec<PathBuf>> {
    let vocab = load_vocab(&args.vocab.vocab, &args.vocab.merges)?;
    let task = load_task(&args.task, &vocab)?;
    println!(
        "task \"{}\": {} pairs, {} items, counterbalanced: {}",
        task.name,
        task.n_pairs(),
        task.items.len(),
        task.counterbalanced
    );
    for item in &task.items {
        println!(
            "  pair {} variant {}: {} prompt tokens, target {:?}, distractor {:?} [{}]",
            item.pair_id,
            item.variant.as_char(),
            vocab.encode(&item.prompt).len(),
            item.target,
            item.distractor,
            item.condition
        );
    }
    Ok(Vec::new())
}

/// Configure the global thread pool from `NEUROPROBE_THREADS` (default:
/// machine cores). Safe to call more than once.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("NEUROPROBE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn dispatch(command: &Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::Probe(args) => cmd_probe(args),
        Command::Run(args) => cmd_run(args),
        Command::PlotLedger(args) => cmd_plot_ledger(args),
        Command::OracleCheck(args) => cmd_oracle_check(args),
        Command::ValidateTask(args) => cmd_validate_task(args),
    }
}

/// Parse argv, run, report. Exit code 0 iff all requested outputs were
/// written.
pub fn run() -> i32 {
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(files) => {
            for f in &files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}
