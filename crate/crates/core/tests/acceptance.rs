//! Acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Uses real Cora when `IDEA_CORA_DIR` is set (LINQS or portable layout),
//! otherwise the Cora surrogate. Unmet criteria are reported, not panicked
//! on; set `IDEA_ACCEPTANCE_STRICT=1` to turn them into a failing exit code.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use idea::attack::Victim;
use idea::baseline::GcnConfig;
use idea::cmi;
use idea::config::{TrainConfig, Variant};
use idea::data::synth::{self, SynthSpec};
use idea::data::{self, DatasetBundle};
use idea::eval::{evaluate, mean, run_scenarios, scenario_accuracy, AttackBank, GcnTrainer, ModelTrainer, Scenario, ScenarioReport};
use idea::nn::IdeaModel;
use idea::synthetic::{run_suite, SuiteConfig};
use idea::train::{fit, loss_gradient_check};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_SEED: u64 = 0;

struct Fitted {
    model: IdeaModel,
    secs: f64,
    epochs: usize,
}

/// IDEA trainer that keeps every model fitted on the clean dataset, so the
/// criteria can share them.
struct Cached {
    config: TrainConfig,
    clean_name: String,
    fitted: RefCell<BTreeMap<u64, Fitted>>,
}

impl Cached {
    fn new(config: TrainConfig, clean_name: &str) -> Cached {
        Cached {
            config,
            clean_name: clean_name.to_string(),
            fitted: RefCell::new(BTreeMap::new()),
        }
    }

    fn fit_clean(&self, data: &DatasetBundle, seed: u64) -> Res<IdeaModel> {
        if let Some(f) = self.fitted.borrow().get(&seed) {
            return Ok(f.model.clone());
        }
        let start = Instant::now();
        let state = fit(data, &TrainConfig { seed, ..self.config.clone() })?;
        let f = Fitted {
            model: state.best_model,
            secs: start.elapsed().as_secs_f64(),
            epochs: state.epoch,
        };
        let model = f.model.clone();
        self.fitted.borrow_mut().insert(seed, f);
        Ok(model)
    }
}

impl ModelTrainer for Cached {
    fn name(&self) -> String {
        format!("idea/{}", self.config.variant())
    }

    fn train(&self, data: &DatasetBundle, seed: u64) -> idea::Result<Box<dyn Victim>> {
        if data.name == self.clean_name {
            let m = self.fit_clean(data, seed).map_err(|e| idea::Error::InvalidArgument(e.to_string()))?;
            return Ok(Box::new(m));
        }
        let state = fit(data, &TrainConfig { seed, ..self.config.clone() })?;
        Ok(Box::new(state.best_model))
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn line(n: usize, name: &str, o: &Res<Outcome>, secs: f64) -> bool {
    match o {
        Ok(o) => {
            let verdict = if o.passed { "PASS" } else { "FAIL" };
            println!("criterion {n} {name}: {verdict} ({secs:.0}s) {}", o.detail);
            o.passed
        }
        Err(e) => {
            println!("criterion {n} {name}: FAIL ({secs:.0}s) error: {e}");
            false
        }
    }
}

fn load_data() -> Res<(DatasetBundle, String)> {
    if let Some(dir) = std::env::var_os("IDEA_CORA_DIR") {
        let dir = PathBuf::from(dir);
        let bundle = match DatasetBundle::load(&dir, DATA_SEED) {
            Ok(b) => b,
            Err(_) => data::raw::prepare(&data::raw::read_raw(&dir)?, DATA_SEED)?.0,
        };
        return Ok((bundle, format!("real Cora from {}", dir.display())));
    }
    let g = synth::generate(&SynthSpec::cora(), DATA_SEED)?;
    let bundle = DatasetBundle::from_graph(g, "cora-surrogate", DATA_SEED)?;
    Ok((bundle, "Cora surrogate (IDEA_CORA_DIR not set)".into()))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| pct(*x)).collect::<Vec<_>>().join("/")
}

fn clean_accuracy(full: &Cached, data: &DatasetBundle) -> Res<Outcome> {
    let test = data.splits.labeled_test(&data.graph);
    let mut accs = Vec::new();
    for &s in &SEEDS {
        accs.push(evaluate(&full.fit_clean(data, s)?, &data.graph, &test)?);
    }
    let fitted = full.fitted.borrow();
    let worst_secs = fitted.values().map(|f| f.secs).fold(0.0, f64::max);
    let max_epochs = fitted.values().map(|f| f.epochs).max().unwrap_or(0);
    let m = mean(&accs);
    Ok(Outcome {
        passed: m >= 0.84 && max_epochs <= 300 && worst_secs <= 7200.0,
        detail: format!(
            "test acc {}% (seeds {}), epochs {max_epochs}, slowest fit {worst_secs:.0}s; need >= 84.00, <= 300 epochs, <= 2h",
            pct(m),
            list(&accs)
        ),
    })
}

fn evasion_gap(full: &Cached, data: &DatasetBundle, bank: &mut AttackBank) -> Res<Outcome> {
    let s = [Scenario::FeaturePgd];
    let idea = run_scenarios(full, data, &s, &SEEDS, bank)?;
    let gcn = run_scenarios(&GcnTrainer(GcnConfig::default()), data, &s, &SEEDS, bank)?;
    let gap = idea.avg - gcn.avg;
    Ok(Outcome {
        passed: gap >= 0.20,
        detail: format!(
            "feature_pgd IDEA {}% vs GCN {}%, gap {} points; need >= 20",
            pct(idea.avg),
            pct(gcn.avg),
            pct(gap)
        ),
    })
}

fn poison_drop(full: &Cached, data: &DatasetBundle, bank: &mut AttackBank) -> Res<Outcome> {
    let test = data.splits.labeled_test(&data.graph);
    let poison = Scenario::RandomPoison(0.2);
    let gcn = GcnTrainer(GcnConfig::default());
    let (mut di, mut dg) = (Vec::new(), Vec::new());
    for &s in &SEEDS {
        let clean = full.fit_clean(data, s)?;
        let before = evaluate(&clean, &data.graph, &test)?;
        di.push(before - scenario_accuracy(full, &clean, data, &poison, s, bank)?);
        let g = gcn.train(data, s)?;
        let before = evaluate(g.as_ref(), &data.graph, &test)?;
        dg.push(before - scenario_accuracy(&gcn, g.as_ref(), data, &poison, s, bank)?);
    }
    let (mi, mg) = (mean(&di), mean(&dg));
    Ok(Outcome {
        passed: mg > 0.0 && mi <= 0.5 * mg,
        detail: format!(
            "random_poison:0.2 drop IDEA {} points ({}) vs GCN {} points ({}); need IDEA <= 50% of GCN",
            pct(mi),
            list(&di),
            pct(mg),
            list(&dg)
        ),
    })
}

fn cmi_bound() -> Res<Outcome> {
    let r = cmi::check_upper_bound(50, 0, 0.01, 0.02);
    Ok(Outcome {
        passed: r.passed(),
        detail: format!(
            "{}/{} qualifying joints satisfy the bound ({} of 50 qualify)",
            r.qualifying_passed, r.qualifying, r.qualifying
        ),
    })
}

fn scm_suite() -> Res<Outcome> {
    let r = run_suite(&SuiteConfig::default())?;
    Ok(Outcome {
        passed: r.passed,
        detail: format!(
            "weight distance {:.4} (<= 0.05), risk spread ratio {:.4} (<= 0.2)",
            r.invariant.distance, r.spread_ratio
        ),
    })
}

fn gradients() -> Res<Outcome> {
    let g = synth::generate(&SynthSpec::toy(12, 3), 5)?;
    let batch: Vec<usize> = (0..g.num_nodes()).filter(|&v| g.label(v).is_some()).take(6).collect();
    let base = TrainConfig {
        alpha: 3.0,
        hidden: 5,
        latent: 3,
        domain_hidden: 4,
        num_domains: 3,
        ..TrainConfig::default()
    };
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for hinge in [false, true] {
        let c = TrainConfig { invariance_hinge: hinge, ..base.clone() };
        let r = loss_gradient_check(&g, &batch, &c, 1, 1e-5)?;
        worst = worst.max(r.max());
        parts.push(format!(
            "hinge={hinge}: L_P {:.1e} L_I {:.1e} L_E {:.1e} L_D {:.1e}",
            r.predictive, r.node_invariance, r.structure_invariance, r.domain
        ));
    }
    Ok(Outcome {
        passed: worst <= 1e-4,
        detail: format!("max rel err {worst:.1e} on 12 nodes; {}", parts.join("; ")),
    })
}

fn ablation(full: &Cached, data: &DatasetBundle, bank: &mut AttackBank) -> Res<Outcome> {
    let suite = Scenario::evasion_suite();
    let mut reports: BTreeMap<&str, ScenarioReport> = BTreeMap::new();
    reports.insert("full", run_scenarios(full, data, &suite, &SEEDS, bank)?);
    for v in [Variant::NoLI, Variant::NoLE, Variant::NoLILE, Variant::NoLD] {
        let r = idea::eval::run_ablation(data, &full.config, v, &suite, &SEEDS, bank)?;
        reports.insert(v.name(), r);
    }
    let f = &reports["full"];
    let beats = ["no_LI", "no_LE", "no_LI_LE"].iter().all(|v| f.avg >= reports[v].avg);
    let steadier = reports["no_LD"].std_across_scenarios >= f.std_across_scenarios;
    let summary = reports
        .iter()
        .map(|(v, r)| format!("{v} {}±{}", pct(r.avg), pct(r.std_across_scenarios)))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome {
        passed: beats && steadier,
        detail: format!("AVG±std {summary}; full >= no_LI/no_LE/no_LI_LE: {beats}, no_LD std >= full std: {steadier}"),
    })
}

fn same_files(a: &Path, b: &Path) -> Res<Vec<String>> {
    let mut diffs = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names.sort();
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if name == "run_manifest.json" {
            continue;
        }
        if pa.is_dir() {
            diffs.extend(same_files(&pa, &pb)?);
        } else if std::fs::read(&pa)? != std::fs::read(&pb).unwrap_or_default() {
            diffs.push(pa.display().to_string());
        }
    }
    Ok(diffs)
}

fn run_cli(args: &[&str], cwd: &Path) -> Res<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_idea")).args(args).current_dir(cwd).output()?;
    if !out.status.success() {
        return Err(format!("idea {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn determinism(full: &Cached, data: &DatasetBundle) -> Res<Outcome> {
    let first = full.fit_clean(data, 0)?;
    let again = fit(data, &TrainConfig { seed: 0, ..full.config.clone() })?.best_model;
    let model_same = first == again;

    let mut b1 = AttackBank::default();
    let mut b2 = AttackBank::default();
    let s = [Scenario::FeaturePgd, Scenario::EdgeFlip];
    let trainer = idea::eval::Pretrained {
        model: first,
        config: full.config.clone(),
    };
    let r1 = run_scenarios(&trainer, data, &s, &[0], &mut b1)?;
    let r2 = run_scenarios(&trainer, data, &s, &[0], &mut b2)?;
    let eval_same = r1 == r2;

    let tmp = tempfile::tempdir()?;
    let toy = DatasetBundle::from_graph(synth::generate(&SynthSpec::toy(60, 3), 3)?, "toy", 3)?;
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        toy.save(&dir.join("data"))?;
        run_cli(&["train", "data", "--out", "train", "--epochs", "5", "--seed", "1"], &dir)?;
        run_cli(&["attack", "data", "--scenario", "edge_flip", "--out", "attacked", "--seed", "1"], &dir)?;
        run_cli(
            &["evaluate", "data", "--checkpoint", "train/checkpoint", "--scenarios", "clean,feature_pgd,random_poison:0.1", "--out", "eval"],
            &dir,
        )?;
        run_cli(&["synthetic-check", "--out", "synthetic", "--joints", "10", "--samples", "2000"], &dir)?;
        run_cli(&["plot", "train/embeddings.csv", "--out", "plots"], &dir)?;
    }
    let diffs = same_files(&tmp.path().join("a"), &tmp.path().join("b"))?;
    Ok(Outcome {
        passed: model_same && eval_same && diffs.is_empty(),
        detail: format!(
            "refit identical: {model_same}, attack suite identical: {eval_same}, CLI outputs differing: {}",
            if diffs.is_empty() { "none".to_string() } else { diffs.join(", ") }
        ),
    })
}

fn main() -> Res<()> {
    let (data, source) = load_data()?;
    println!("acceptance on {source}: {} nodes, seeds {:?}", data.graph.num_nodes(), SEEDS);
    let full = Cached::new(TrainConfig::default(), &data.name);
    let mut bank = AttackBank::default();
    let mut results = Vec::new();

    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Res<Outcome>| {
        let start = Instant::now();
        let o = f();
        results.push(line(n, name, &o, start.elapsed().as_secs_f64()));
    };
    check(1, "clean accuracy", &mut || clean_accuracy(&full, &data));
    check(2, "feature attack gap", &mut || evasion_gap(&full, &data, &mut bank));
    check(3, "poisoning drop", &mut || poison_drop(&full, &data, &mut bank));
    check(4, "CMI upper bound", &mut || {
        let start = Instant::now();
        let mut o = cmi_bound()?;
        let secs = start.elapsed().as_secs_f64();
        o.passed &= secs < 60.0;
        o.detail.push_str(&format!(", {secs:.1}s (< 60s)"));
        Ok(o)
    });
    check(5, "linear SCM invariance", &mut || {
        let start = Instant::now();
        let mut o = scm_suite()?;
        let secs = start.elapsed().as_secs_f64();
        o.passed &= secs < 120.0;
        o.detail.push_str(&format!(", {secs:.1}s (< 120s)"));
        Ok(o)
    });
    check(6, "loss gradients", &mut gradients);
    check(7, "ablation ordering", &mut || ablation(&full, &data, &mut bank));
    check(8, "determinism", &mut || determinism(&full, &data));

    let met = results.iter().filter(|&&p| p).count();
    println!("acceptance: {met}/{} criteria met", results.len());
    let strict = std::env::var("IDEA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && met < results.len() {
        std::process::exit(1);
    }
    Ok(())
}
