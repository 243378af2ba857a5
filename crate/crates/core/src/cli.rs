//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code.
//!
//! Exit codes: 0 success, 1 any other failure, 2 missing input file (or a
//! usage error), 3 missing checkpoint, 4 unknown scenario, 5 a verification
//! command whose checks did not pass.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::baseline::GcnConfig;
use crate::checkpoint::Checkpoint;
use crate::cmi::{check_upper_bound, BoundReport};
use crate::config::{parse_seed_list, TrainConfig, Variant};
use crate::data::synth::{generate, SynthSpec};
use crate::data::{self, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::{
    run_ablation, run_scenarios, save_report, AttackBank, GcnTrainer, IdeaTrainer, ModelTrainer, Pretrained,
    Scenario, ScenarioReport,
};
use crate::manifest::RunRecorder;
use crate::synthetic::{run_suite, SuiteConfig, SuiteReport};
use crate::train::{fit_with, metrics_csv, TrainState};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING_FILE: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;
pub const EXIT_UNKNOWN_SCENARIO: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "idea", version, about = "Invariant causal defense for graph node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reduce a raw dataset to its largest connected component and draw a split.
    PrepareData {
        raw: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic citation-like surrogate dataset.
    SynthData {
        /// `cora` or `citeseer`.
        preset: String,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train IDEA on a prepared dataset.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, conflicts_with = "seeds_file")]
        seed: Option<u64>,
        /// One seed per line; each seed trains into `<out>/seed_<s>`.
        #[arg(long)]
        seeds_file: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Craft one attacked graph and save it with its target list.
    Attack {
        dataset: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        target_fraction: f64,
    },
    /// Evaluate a model over a scenario suite and print the report table.
    Evaluate {
        dataset: PathBuf,
        /// Checkpoint directory; evasion scenarios use this model as is.
        #[arg(long, conflicts_with = "model")]
        checkpoint: Option<PathBuf>,
        /// `idea` or `gcn` when no checkpoint is given.
        #[arg(long, default_value = "idea")]
        model: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Comma-separated scenario names.
        #[arg(long, default_value = "clean,feature_pgd,edge_flip,node_inject")]
        scenarios: String,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        target_fraction: f64,
    },
    /// Run ablation variants over a scenario suite.
    Ablate {
        dataset: PathBuf,
        /// A variant name or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "clean,feature_pgd,edge_flip,node_inject")]
        scenarios: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        target_fraction: f64,
    },
    /// Numerical checks of the variational bound and the invariant defender.
    SyntheticCheck {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        joints: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Render one PNG scatter per embeddings CSV.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: u32,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::MissingFile(_) => EXIT_MISSING_FILE,
            Error::UnknownScenario { .. } => EXIT_UNKNOWN_SCENARIO,
            _ => EXIT_FAILURE,
        };
        CliError { code, error }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Resolves a relative output path under `IDEA_OUTPUT_ROOT` when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match data::output_root() {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn seeds_arg(text: &str) -> Result<Vec<u64>> {
    let seeds = parse_seed_list(text)?;
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    Ok(seeds)
}

/// Parses arguments (including the program name) and runs the command.
/// Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_MISSING_FILE } else { 0 };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}

pub fn execute(command: Command, args: Vec<String>) -> CliResult<()> {
    match command {
        Command::PrepareData { raw, out, seed } => prepare_data(&raw, &resolve_out(&out), seed, args),
        Command::SynthData { preset, out, seed } => synth_data(&preset, &resolve_out(&out), seed, args),
        Command::Train {
            dataset,
            config,
            out,
            epochs,
            seed,
            seeds_file,
            variant,
        } => train(
            &dataset,
            config.as_deref(),
            &resolve_out(&out),
            epochs,
            seed,
            seeds_file.as_deref(),
            variant,
            args,
        ),
        Command::Attack {
            dataset,
            scenario,
            out,
            seed,
            target_fraction,
        } => attack(&dataset, &scenario, &resolve_out(&out), seed, target_fraction, args),
        Command::Evaluate {
            dataset,
            checkpoint,
            model,
            config,
            variant,
            scenarios,
            seeds,
            out,
            target_fraction,
        } => evaluate(
            &dataset,
            checkpoint.as_deref(),
            &model,
            config.as_deref(),
            variant,
            &scenarios,
            &seeds,
            &resolve_out(&out),
            target_fraction,
            args,
        ),
        Command::Ablate {
            dataset,
            variant,
            config,
            scenarios,
            seeds,
            out,
            target_fraction,
        } => ablate(
            &dataset,
            &variant,
            config.as_deref(),
            &scenarios,
            &seeds,
            &resolve_out(&out),
            target_fraction,
            args,
        ),
        Command::SyntheticCheck {
            out,
            seed,
            joints,
            samples,
        } => synthetic_check(&resolve_out(&out), seed, joints, samples, args),
        Command::Plot { csv, out, size } => plot(&csv, &resolve_out(&out), size, args),
    }
}

fn prepare_data(raw: &Path, out: &Path, seed: u64, args: Vec<String>) -> CliResult<()> {
    let mut rec = RunRecorder::start("prepare-data", args, "", Some(seed));
    let dataset = data::raw::read_raw(raw)?;
    let (bundle, ids) = data::raw::prepare(&dataset, seed)?;
    bundle.save(out)?;
    let map = out.join(data::NODE_MAP_FILE);
    write_text(&map, &(ids.join("\n") + "\n"))?;
    for f in [data::META_FILE, data::EDGES_FILE, data::FEATURES_FILE, data::LABELS_FILE, data::SPLITS_FILE] {
        rec.output(out.join(f));
    }
    rec.output(map);
    rec.finish(out)?;
    let g = &bundle.graph;
    println!(
        "{}: {} nodes, {} edges, {} features, {} classes",
        bundle.name,
        g.num_nodes(),
        g.num_edges(),
        g.num_features(),
        g.num_classes()
    );
    Ok(())
}

fn synth_data(preset: &str, out: &Path, seed: u64, args: Vec<String>) -> CliResult<()> {
    let mut rec = RunRecorder::start("synth-data", args, preset, Some(seed));
    let spec = SynthSpec::preset(preset)?;
    let graph = generate(&spec, seed)?;
    let mut bundle = DatasetBundle::from_graph(graph, &format!("{preset}-surrogate"), seed)?;
    bundle.provenance.insert("generator_seed".into(), seed.into());
    bundle.save(out)?;
    for f in [data::META_FILE, data::EDGES_FILE, data::FEATURES_FILE, data::LABELS_FILE, data::SPLITS_FILE] {
        rec.output(out.join(f));
    }
    rec.finish(out)?;
    Ok(())
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn labels_of(graph: &crate::graph::Graph) -> Vec<i64> {
    (0..graph.num_nodes())
        .map(|v| graph.label(v).map_or(-1, |l| l as i64))
        .collect()
}

/// One training run into `dir`. Returns the written paths.
fn train_one(data: &DatasetBundle, config: &TrainConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    mkdir(dir)?;
    let ck_dir = dir.join(CHECKPOINT_DIR);
    let metrics = dir.join(METRICS_FILE);
    let mut on_improve = |state: &TrainState| -> Result<()> {
        Checkpoint::from_state(state, config).save(&ck_dir)?;
        write_text(&metrics, &metrics_csv(&state.history))
    };
    let state = fit_with(data, config, &mut on_improve)?;
    Checkpoint::from_state(&state, config).save(&ck_dir)?;
    let mut written = vec![ck_dir];
    if config.epochs == 0 {
        return Ok(written);
    }
    write_text(&metrics, &metrics_csv(&state.history))?;
    let emb = dir.join(EMBEDDINGS_FILE);
    let z = state.best_model.embed(&data.graph);
    data::export_embeddings(z.view(), &labels_of(&data.graph), &emb)?;
    for m in &state.history {
        eprintln!(
            "epoch {:4}  L_P {:.4}  L_I {:.4}  L_E {:.4}  L_D {:.4}  val {:.4}",
            m.epoch, m.predictive, m.node_invariance, m.structure_invariance, m.domain, m.val_acc
        );
    }
    let test = data.splits.labeled_test(&data.graph);
    if !test.is_empty() {
        let acc = crate::train::model_accuracy(&state.best_model, &data.graph, &test)?;
        println!(
            "seed {}: best epoch {}, val {:.4}, test {:.4}",
            config.seed, state.best_epoch, state.best_val, acc
        );
    }
    written.push(metrics);
    written.push(emb);
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &Path,
    config_path: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    seeds_file: Option<&Path>,
    variant: Option<Variant>,
    args: Vec<String>,
) -> CliResult<()> {
    let mut config = load_config(config_path)?;
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(v) = variant {
        v.apply(&mut config);
    }
    let sweep = match seeds_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(seeds_arg(&text)?)
        }
        None => None,
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let mut rec = RunRecorder::start("train", args, &config.to_text(), Some(config.seed));
    match sweep {
        None => {
            let data = DatasetBundle::load(dataset, config.seed)?;
            for p in train_one(&data, &config, out)? {
                rec.output(p);
            }
        }
        Some(seeds) => {
            for s in seeds {
                let c = TrainConfig { seed: s, ..config.clone() };
                let data = DatasetBundle::load(dataset, s)?;
                for p in train_one(&data, &c, &out.join(format!("seed_{s}")))? {
                    rec.output(p);
                }
            }
        }
    }
    rec.finish(out)?;
    Ok(())
}

pub const TARGETS_FILE: &str = "targets.txt";

fn attack(dataset: &Path, scenario: &str, out: &Path, seed: u64, target_fraction: f64, args: Vec<String>) -> CliResult<()> {
    let s = Scenario::parse(scenario)?;
    if s == Scenario::Clean {
        return Err(Error::InvalidArgument("the clean scenario has no attack to craft".into()).into());
    }
    let mut rec = RunRecorder::start("attack", args, &s.name(), Some(seed));
    let data = DatasetBundle::load(dataset, seed)?;
    let mut bank = AttackBank::new(target_fraction);
    let p = bank.attacked(&data, &s, seed)?;
    p.save(&format!("{}+{}", data.name, s.name()), out)?;
    for f in [data::META_FILE, data::EDGES_FILE, data::FEATURES_FILE, data::LABELS_FILE] {
        rec.output(out.join(f));
    }
    let targets = out.join(TARGETS_FILE);
    let target_list = if s.is_poisoning() {
        data.splits.labeled_test(&data.graph)
    } else {
        bank.targets(&data, seed)?
    };
    data::write_node_list(&target_list, &targets)?;
    rec.output(targets);
    rec.finish(out)?;
    println!(
        "{}: {} edge edits, {} feature rows, {} injected nodes",
        s.name(),
        p.provenance.edits.len(),
        p.provenance.feature_rows.len(),
        p.provenance.injected
    );
    Ok(())
}

pub const REPORT_STEM: &str = "report";

#[allow(clippy::too_many_arguments)]
fn evaluate(
    dataset: &Path,
    checkpoint: Option<&Path>,
    model: &str,
    config_path: Option<&Path>,
    variant: Option<Variant>,
    scenarios: &str,
    seeds: &str,
    out: &Path,
    target_fraction: f64,
    args: Vec<String>,
) -> CliResult<()> {
    let scenarios = Scenario::parse_list(scenarios)?;
    let seeds = seeds_arg(seeds)?;
    let trainer: Box<dyn ModelTrainer> = match checkpoint {
        Some(dir) => {
            let ck = Checkpoint::load(dir).map_err(|e| match e {
                Error::MissingFile(_) => CliError {
                    code: EXIT_MISSING_CHECKPOINT,
                    error: e,
                },
                e => e.into(),
            })?;
            Box::new(Pretrained {
                model: ck.model,
                config: ck.config,
            })
        }
        None => match model {
            "idea" => {
                let mut c = load_config(config_path)?;
                if let Some(v) = variant {
                    v.apply(&mut c);
                }
                c.validate()?;
                Box::new(IdeaTrainer(c))
            }
            "gcn" => Box::new(GcnTrainer(GcnConfig::default())),
            other => {
                return Err(Error::InvalidArgument(format!("unknown model `{other}` (expected idea or gcn)")).into());
            }
        },
    };
    let config_text = match trainer_config_text(trainer.as_ref(), checkpoint, config_path) {
        Some(t) => t,
        None => String::new(),
    };
    let mut rec = RunRecorder::start("evaluate", args, &config_text, seeds.first().copied());
    let data = DatasetBundle::load(dataset, seeds[0])?;
    let mut bank = AttackBank::new(target_fraction);
    let start = Instant::now();
    let report = run_scenarios(trainer.as_ref(), &data, &scenarios, &seeds, &mut bank)?;
    write_report(&report, out, REPORT_STEM, &mut rec)?;
    eprintln!("wall time {:.1}s", start.elapsed().as_secs_f64());
    print!("{}", report.to_table());
    rec.finish(out)?;
    Ok(())
}

fn trainer_config_text(trainer: &dyn ModelTrainer, checkpoint: Option<&Path>, config: Option<&Path>) -> Option<String> {
    if let Some(dir) = checkpoint {
        return std::fs::read_to_string(dir.join(crate::checkpoint::CONFIG_FILE)).ok();
    }
    if trainer.name() == "gcn" {
        return Some(format!("{:?}", GcnConfig::default()));
    }
    load_config(config).ok().map(|c| c.to_text())
}

fn write_report(report: &ScenarioReport, out: &Path, stem: &str, rec: &mut RunRecorder) -> Result<()> {
    save_report(report, out, stem)?;
    rec.output(out.join(format!("{stem}.json")));
    rec.output(out.join(format!("{stem}.txt")));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    dataset: &Path,
    variant: &str,
    config_path: Option<&Path>,
    scenarios: &str,
    seeds: &str,
    out: &Path,
    target_fraction: f64,
    args: Vec<String>,
) -> CliResult<()> {
    let scenarios = Scenario::parse_list(scenarios)?;
    let seeds = seeds_arg(seeds)?;
    let variants: Vec<Variant> = if variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![variant.parse()?]
    };
    let config = load_config(config_path)?;
    config.validate()?;
    let mut rec = RunRecorder::start("ablate", args, &config.to_text(), seeds.first().copied());
    let data = DatasetBundle::load(dataset, seeds[0])?;
    let mut bank = AttackBank::new(target_fraction);
    let mut summary = String::from("variant     avg(%)  std(%)\n");
    for v in variants {
        let report = run_ablation(&data, &config, v, &scenarios, &seeds, &mut bank)?;
        write_report(&report, out, &format!("ablation_{}", v.name()), &mut rec)?;
        summary.push_str(&format!(
            "{:<10}  {:>6.2}  {:>6.2}\n",
            v.name(),
            100.0 * report.avg,
            100.0 * report.std_across_scenarios
        ));
    }
    let path = out.join("ablation_summary.txt");
    write_text(&path, &summary)?;
    rec.output(path);
    print!("{summary}");
    rec.finish(out)?;
    Ok(())
}

pub const SYNTHETIC_REPORT_FILE: &str = "synthetic_check.json";

#[derive(Debug, Serialize)]
pub struct SyntheticCheckReport {
    pub upper_bound: BoundReport,
    pub upper_bound_passed: bool,
    pub invariant_defender: SuiteReport,
    pub invariant_defender_passed: bool,
    pub passed: bool,
}

pub fn synthetic_report(seed: u64, joints: usize, samples: usize) -> Result<SyntheticCheckReport> {
    let upper_bound = check_upper_bound(joints, seed, 0.01, 0.02);
    let suite = run_suite(&SuiteConfig {
        seed,
        samples_per_domain: samples,
        ..SuiteConfig::default()
    })?;
    let ub = upper_bound.passed();
    let inv = suite.passed;
    Ok(SyntheticCheckReport {
        upper_bound,
        upper_bound_passed: ub,
        invariant_defender: suite,
        invariant_defender_passed: inv,
        passed: ub && inv,
    })
}

fn synthetic_check(out: &Path, seed: u64, joints: usize, samples: usize, args: Vec<String>) -> CliResult<()> {
    let mut rec = RunRecorder::start("synthetic-check", args, &format!("joints={joints} samples={samples}"), Some(seed));
    let report = synthetic_report(seed, joints, samples)?;
    mkdir(out)?;
    let path = out.join(SYNTHETIC_REPORT_FILE);
    data::write_json(&path, &report)?;
    rec.output(path);
    rec.finish(out)?;
    println!(
        "upper bound: {}/{} qualifying cases hold ({})",
        report.upper_bound.qualifying_passed,
        report.upper_bound.qualifying,
        if report.upper_bound_passed { "pass" } else { "FAIL" }
    );
    let s = &report.invariant_defender;
    println!(
        "invariant defender: distance {:.4}, spread ratio {:.4} ({})",
        s.invariant.distance,
        s.spread_ratio,
        if report.invariant_defender_passed { "pass" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_CHECK_FAILED,
            error: Error::InvalidArgument("synthetic checks did not pass".into()),
        })
    }
}

fn plot(csvs: &[PathBuf], out: &Path, size: u32, args: Vec<String>) -> CliResult<()> {
    let mut rec = RunRecorder::start("plot", args, &format!("size={size}"), None);
    mkdir(out)?;
    for csv in csvs {
        let stem = csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "embeddings".into());
        let png = out.join(format!("{stem}.png"));
        crate::plot::plot_embeddings(csv, &png, size)?;
        rec.output(png);
    }
    rec.finish(out)?;
    Ok(())
}
