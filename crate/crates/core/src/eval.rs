//! Scenario evaluation: clean and attacked accuracy per seed, aggregated
//! into a report with an AVG row.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attack::{
    evasion_edge_flip_greedy, evasion_feature_pgd, node_injection_attack, random_poison, AttackBudget, Objective,
    PerturbedGraph, Victim,
};
use crate::baseline::{accuracy, train_gcn_on, Gcn, GcnConfig};
use crate::config::{TrainConfig, Variant};
use crate::data::{load_perturbed_graph, DatasetBundle, SplitMasks};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::IdeaModel;
use crate::rng;
use crate::train::fit;

/// `⌊fraction·|test|⌋` test nodes drawn uniformly without replacement.
pub fn select_targets(split: &SplitMasks, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("target fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * split.test.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Empty("target set"));
    }
    let mut r = rng::stream(seed, "targets");
    let mut t: Vec<usize> = sample(&mut r, split.test.len(), k).into_iter().map(|i| split.test[i]).collect();
    t.sort_unstable();
    Ok(t)
}

/// Deterministic-mode accuracy on `nodes`.
pub fn evaluate(model: &dyn Victim, graph: &Graph, nodes: &[usize]) -> Result<f64> {
    accuracy(&model.predict(graph), graph, nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    Clean,
    FeaturePgd,
    EdgeFlip,
    NodeInject,
    Poisoned(PathBuf),
    RandomPoison(f64),
}

pub const SCENARIO_NAMES: &str = "clean, feature_pgd, edge_flip, node_inject, poisoned:<path>, random_poison:<rate>";

impl Scenario {
    pub fn parse(s: &str) -> Result<Scenario> {
        let unknown = || Error::UnknownScenario {
            name: s.to_string(),
            valid: SCENARIO_NAMES.to_string(),
        };
        Ok(match s {
            "clean" => Scenario::Clean,
            "feature_pgd" => Scenario::FeaturePgd,
            "edge_flip" => Scenario::EdgeFlip,
            "node_inject" => Scenario::NodeInject,
            _ => {
                if let Some(p) = s.strip_prefix("poisoned:") {
                    Scenario::Poisoned(PathBuf::from(p))
                } else if let Some(r) = s.strip_prefix("random_poison:") {
                    let rate: f64 = r.parse().map_err(|_| unknown())?;
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(unknown());
                    }
                    Scenario::RandomPoison(rate)
                } else {
                    return Err(unknown());
                }
            }
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Scenario>> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(Scenario::parse).collect()
    }

    pub fn name(&self) -> String {
        match self {
            Scenario::Clean => "clean".into(),
            Scenario::FeaturePgd => "feature_pgd".into(),
            Scenario::EdgeFlip => "edge_flip".into(),
            Scenario::NodeInject => "node_inject".into(),
            Scenario::Poisoned(p) => format!("poisoned:{}", p.display()),
            Scenario::RandomPoison(r) => format!("random_poison:{r}"),
        }
    }

    pub fn is_poisoning(&self) -> bool {
        matches!(self, Scenario::Poisoned(_) | Scenario::RandomPoison(_))
    }

    /// Clean plus the three evasion attacks.
    pub fn evasion_suite() -> Vec<Scenario> {
        vec![Scenario::Clean, Scenario::FeaturePgd, Scenario::EdgeFlip, Scenario::NodeInject]
    }
}

/// Trains the evaluated model for a seed.
pub trait ModelTrainer {
    fn name(&self) -> String;

    fn train(&self, data: &DatasetBundle, seed: u64) -> Result<Box<dyn Victim>>;

    /// Model used for evasion scenarios; defaults to training on the clean data.
    fn clean_model(&self, data: &DatasetBundle, seed: u64) -> Result<Box<dyn Victim>> {
        self.train(data, seed)
    }
}

pub struct IdeaTrainer(pub TrainConfig);

impl ModelTrainer for IdeaTrainer {
    fn name(&self) -> String {
        format!("idea/{}", self.0.variant())
    }

    fn train(&self, data: &DatasetBundle, seed: u64) -> Result<Box<dyn Victim>> {
        let config = TrainConfig { seed, ..self.0.clone() };
        Ok(Box::new(fit(data, &config)?.best_model))
    }
}

pub struct GcnTrainer(pub GcnConfig);

impl ModelTrainer for GcnTrainer {
    fn name(&self) -> String {
        "gcn".into()
    }

    fn train(&self, data: &DatasetBundle, seed: u64) -> Result<Box<dyn Victim>> {
        Ok(Box::new(train_gcn_on(&data.graph, &data.splits.train, &data.splits.val, &self.0, seed)?))
    }
}

/// A fixed trained model for evasion; poisoning scenarios retrain with `config`.
pub struct Pretrained {
    pub model: IdeaModel,
    pub config: TrainConfig,
}

impl ModelTrainer for Pretrained {
    fn name(&self) -> String {
        format!("idea/{} (checkpoint)", self.config.variant())
    }

    fn train(&self, data: &DatasetBundle, seed: u64) -> Result<Box<dyn Victim>> {
        IdeaTrainer(self.config.clone()).train(data, seed)
    }

    fn clean_model(&self, _data: &DatasetBundle, _seed: u64) -> Result<Box<dyn Victim>> {
        Ok(Box::new(self.model.clone()))
    }
}

/// Attacked graphs shared by every model evaluated on the same dataset:
/// evasion attacks are crafted once per seed against a surrogate GCN.
pub struct AttackBank {
    pub target_fraction: f64,
    /// Evaluation feature radius as a fraction of the feature range.
    pub feature_frac: f64,
    pub surrogate: GcnConfig,
    targets: HashMap<u64, Vec<usize>>,
    graphs: HashMap<(u64, String), PerturbedGraph>,
    surrogates: HashMap<u64, Gcn>,
}

impl Default for AttackBank {
    fn default() -> Self {
        AttackBank::new(0.2)
    }
}

impl AttackBank {
    pub fn new(target_fraction: f64) -> AttackBank {
        AttackBank {
            target_fraction,
            feature_frac: 0.01,
            surrogate: GcnConfig::default(),
            targets: HashMap::new(),
            graphs: HashMap::new(),
            surrogates: HashMap::new(),
        }
    }

    pub fn targets(&mut self, data: &DatasetBundle, seed: u64) -> Result<Vec<usize>> {
        if let Some(t) = self.targets.get(&seed) {
            return Ok(t.clone());
        }
        let t = select_targets(&data.splits, self.target_fraction, seed)?;
        self.targets.insert(seed, t.clone());
        Ok(t)
    }

    pub fn surrogate(&mut self, data: &DatasetBundle, seed: u64) -> Result<&Gcn> {
        if !self.surrogates.contains_key(&seed) {
            let s = train_gcn_on(
                &data.graph,
                &data.splits.train,
                &data.splits.val,
                &self.surrogate,
                rng::sub_seed(seed, rng::ATTACK),
            )?;
            self.surrogates.insert(seed, s);
        }
        Ok(&self.surrogates[&seed])
    }

    /// The attacked graph of `scenario` for `seed`, crafted on first use.
    pub fn attacked(&mut self, data: &DatasetBundle, scenario: &Scenario, seed: u64) -> Result<PerturbedGraph> {
        let key = (seed, scenario.name());
        if let Some(p) = self.graphs.get(&key) {
            return Ok(p.clone());
        }
        let g = &data.graph;
        let p = match scenario {
            Scenario::Clean => unreachable!("clean graph needs no attack"),
            Scenario::RandomPoison(rate) => random_poison(g, *rate, &mut rng::stream(seed, "poison"))?,
            Scenario::Poisoned(path) => {
                let graph = load_perturbed_graph(path)?;
                if graph.num_nodes() < g.num_nodes() || graph.num_features() != g.num_features() {
                    return Err(Error::InvalidArgument(format!(
                        "{}: poisoned graph does not extend the dataset",
                        path.display()
                    )));
                }
                PerturbedGraph {
                    graph,
                    provenance: crate::attack::Provenance {
                        attack: "external".into(),
                        budget: AttackBudget::none(),
                        seed: None,
                        targets: Vec::new(),
                        edits: Vec::new(),
                        feature_rows: Vec::new(),
                        injected: 0,
                        losses: Vec::new(),
                        monotone_violations: 0,
                    },
                }
            }
            _ => {
                let targets = self.targets(data, seed)?;
                let mut budget = AttackBudget::evaluation(g, targets.len());
                let (lo, hi) = crate::attack::feature_range(g);
                budget.feature_eps = self.feature_frac * (hi - lo);
                budget.feature_step_size = crate::attack::pgd_step_size(budget.feature_eps, budget.feature_steps);
                let surrogate = self.surrogate(data, seed)?.clone();
                let obj = Objective::pseudo(&surrogate, g, &targets, &data.splits.train);
                match scenario {
                    Scenario::FeaturePgd => evasion_feature_pgd(&surrogate, g, &budget, &obj)?,
                    Scenario::EdgeFlip => evasion_edge_flip_greedy(&surrogate, g, &budget, &obj)?,
                    Scenario::NodeInject => {
                        node_injection_attack(&surrogate, g, &budget, &obj, &mut rng::stream(seed, rng::ATTACK))?
                    }
                    _ => unreachable!(),
                }
            }
        };
        let p = p.with_seed(seed);
        self.graphs.insert(key, p.clone());
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub accuracy: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rows: Vec<ScenarioRow>,
    pub avg: f64,
    /// Population standard deviation of the row accuracies.
    pub std_across_scenarios: f64,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl ScenarioReport {
    pub fn from_rows(rows: Vec<ScenarioRow>, provenance: BTreeMap<String, serde_json::Value>) -> Result<ScenarioReport> {
        if rows.is_empty() {
            return Err(Error::Empty("scenario list"));
        }
        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        Ok(ScenarioReport {
            avg: mean(&accs),
            std_across_scenarios: population_std(&accs),
            rows,
            provenance,
        })
    }

    pub fn row(&self, scenario: &str) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    /// `avg` and `std_across_scenarios` agree with the rows.
    pub fn is_consistent(&self) -> bool {
        let accs: Vec<f64> = self.rows.iter().map(|r| r.accuracy).collect();
        !accs.is_empty()
            && (mean(&accs) - self.avg).abs() < 1e-12
            && (population_std(&accs) - self.std_across_scenarios).abs() < 1e-12
    }

    /// Aligned text table in percent.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.scenario.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>6}", "scenario", "acc(%)", "std");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>6.2}", r.scenario, 100.0 * r.accuracy, 100.0 * r.std);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2}  {:>6.2}",
            "AVG",
            100.0 * self.avg,
            100.0 * self.std_across_scenarios
        );
        s
    }
}

/// Accuracy of one scenario for one seed. Evasion scenarios use `clean`
/// on the targets; poisoning scenarios retrain and use the test split.
pub fn scenario_accuracy(
    trainer: &dyn ModelTrainer,
    clean: &dyn Victim,
    data: &DatasetBundle,
    scenario: &Scenario,
    seed: u64,
    bank: &mut AttackBank,
) -> Result<f64> {
    match scenario {
        Scenario::Clean => {
            let targets = bank.targets(data, seed)?;
            evaluate(clean, &data.graph, &targets)
        }
        s if s.is_poisoning() => {
            let p = bank.attacked(data, s, seed)?;
            let poisoned = DatasetBundle {
                graph: p.graph,
                splits: data.splits.clone(),
                name: format!("{}+{}", data.name, s.name()),
                provenance: BTreeMap::new(),
            };
            let model = trainer.train(&poisoned, seed)?;
            evaluate(model.as_ref(), &poisoned.graph, &data.splits.labeled_test(&data.graph))
        }
        s => {
            let targets = bank.targets(data, seed)?;
            let p = bank.attacked(data, s, seed)?;
            evaluate(clean, &p.graph, &targets)
        }
    }
}

pub fn run_scenarios(
    trainer: &dyn ModelTrainer,
    data: &DatasetBundle,
    scenarios: &[Scenario],
    seeds: &[u64],
    bank: &mut AttackBank,
) -> Result<ScenarioReport> {
    if scenarios.is_empty() {
        return Err(Error::Empty("scenario list"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); scenarios.len()];
    for &seed in seeds {
        let needs_clean = scenarios.iter().any(|s| !s.is_poisoning());
        let clean = if needs_clean {
            Some(trainer.clean_model(data, seed)?)
        } else {
            None
        };
        for (i, s) in scenarios.iter().enumerate() {
            let model: &dyn Victim = match &clean {
                Some(m) => m.as_ref(),
                None => &NoModel,
            };
            per[i].push(scenario_accuracy(trainer, model, data, s, seed, bank)?);
        }
    }
    let rows = scenarios
        .iter()
        .zip(per)
        .map(|(s, accs)| ScenarioRow {
            scenario: s.name(),
            accuracy: mean(&accs),
            std: sample_std(&accs),
            per_seed: accs,
        })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("model".into(), serde_json::Value::String(trainer.name()));
    prov.insert("dataset".into(), serde_json::Value::String(data.name.clone()));
    prov.insert("seeds".into(), serde_json::json!(seeds));
    prov.insert("target_fraction".into(), serde_json::json!(bank.target_fraction));
    ScenarioReport::from_rows(rows, prov)
}

/// Placeholder victim for runs without evasion scenarios.
struct NoModel;

impl Victim for NoModel {
    fn logits(
        &self,
        _: &mut crate::tape::Tape,
        _: &crate::nn::GraphInput,
        _: &crate::nn::PropContext,
        _: Option<crate::tape::Var>,
        _: bool,
    ) -> crate::tape::Var {
        unreachable!("no evasion scenario requested")
    }
}

/// Trains `variant` of IDEA and runs the scenario suite.
pub fn run_ablation(
    data: &DatasetBundle,
    config: &TrainConfig,
    variant: Variant,
    scenarios: &[Scenario],
    seeds: &[u64],
    bank: &mut AttackBank,
) -> Result<ScenarioReport> {
    let mut c = config.clone();
    variant.apply(&mut c);
    let mut report = run_scenarios(&IdeaTrainer(c), data, scenarios, seeds, bank)?;
    report
        .provenance
        .insert("variant".into(), serde_json::Value::String(variant.name().into()));
    Ok(report)
}

pub fn save_report(report: &ScenarioReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::data::write_json(&dir.join(format!("{stem}.json")), report)?;
    let p = dir.join(format!("{stem}.txt"));
    std::fs::write(&p, report.to_table()).map_err(|e| Error::io(&p, e))
}
