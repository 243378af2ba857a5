//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a typo is an error rather than a silently ignored setting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{feature_range, pgd_step_size, AttackBudget};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Arch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub num_domains: usize,
    pub epochs: usize,
    /// 0 means the whole training split.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_domain: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: usize,
    pub hidden: usize,
    pub latent: usize,
    pub domain_hidden: usize,
    pub dropout: f64,
    /// Training feature radius as a fraction of the feature range.
    pub attack_feature_frac: f64,
    pub attack_feature_steps: usize,
    /// Structure edits per view as a fraction of |E|.
    pub attack_edge_rate: f64,
    pub attack_views: usize,
    pub use_li: bool,
    pub use_le: bool,
    /// `false` replaces the domain learner with a fixed random partition.
    pub learn_domains: bool,
    /// Clip the per-sample gap `ce_g − ce_gd` at zero in the training objective.
    pub invariance_hinge: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 100.0,
            num_domains: 10,
            epochs: 300,
            batch_size: 0,
            lr: 0.01,
            lr_domain: 0.001,
            weight_decay: 5e-4,
            seed: 0,
            patience: 50,
            hidden: 64,
            latent: 32,
            domain_hidden: 32,
            dropout: 0.5,
            attack_feature_frac: 0.01,
            attack_feature_steps: 3,
            attack_edge_rate: 0.05,
            attack_views: 4,
            use_li: true,
            use_le: true,
            learn_domains: true,
            invariance_hinge: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::ConfigValue {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "alpha",
        "num_domains",
        "epochs",
        "batch_size",
        "lr",
        "lr_domain",
        "weight_decay",
        "seed",
        "patience",
        "hidden",
        "latent",
        "domain_hidden",
        "dropout",
        "attack_feature_frac",
        "attack_feature_steps",
        "attack_edge_rate",
        "attack_views",
        "use_li",
        "use_le",
        "learn_domains",
        "invariance_hinge",
        "variant",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "num_domains" => self.num_domains = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_domain" => self.lr_domain = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "latent" => self.latent = parse(key, v)?,
            "domain_hidden" => self.domain_hidden = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "attack_feature_frac" => self.attack_feature_frac = parse(key, v)?,
            "attack_feature_steps" => self.attack_feature_steps = parse(key, v)?,
            "attack_edge_rate" => self.attack_edge_rate = parse(key, v)?,
            "attack_views" => self.attack_views = parse(key, v)?,
            "use_li" => self.use_li = parse(key, v)?,
            "use_le" => self.use_le = parse(key, v)?,
            "learn_domains" => self.learn_domains = parse(key, v)?,
            "invariance_hinge" => self.invariance_hinge = parse(key, v)?,
            "variant" => parse::<Variant>(key, v)?.apply(self),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigValue {
                    key: line.to_string(),
                    msg: format!("line {} is not `key = value`", i + 1),
                });
            };
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse_str(&text)
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        format!(
            "alpha = {}\nnum_domains = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nlr_domain = {}\n\
             weight_decay = {}\nseed = {}\npatience = {}\nhidden = {}\nlatent = {}\ndomain_hidden = {}\n\
             dropout = {}\nattack_feature_frac = {}\nattack_feature_steps = {}\nattack_edge_rate = {}\n\
             attack_views = {}\nuse_li = {}\nuse_le = {}\nlearn_domains = {}\ninvariance_hinge = {}\n",
            self.alpha,
            self.num_domains,
            self.epochs,
            self.batch_size,
            self.lr,
            self.lr_domain,
            self.weight_decay,
            self.seed,
            self.patience,
            self.hidden,
            self.latent,
            self.domain_hidden,
            self.dropout,
            self.attack_feature_frac,
            self.attack_feature_steps,
            self.attack_edge_rate,
            self.attack_views,
            self.use_li,
            self.use_le,
            self.learn_domains,
            self.invariance_hinge,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::ConfigValue {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha", "must be a finite nonnegative number");
        }
        if self.num_domains < 2 {
            return bad("num_domains", "need at least 2 attack domains");
        }
        if !(self.lr > 0.0) || !(self.lr_domain > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if self.hidden == 0 || self.latent == 0 || self.domain_hidden == 0 {
            return bad("hidden", "layer widths must be positive");
        }
        if !(self.attack_feature_frac >= 0.0) {
            return bad("attack_feature_frac", "must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.attack_edge_rate) {
            return bad("attack_edge_rate", "must be in [0, 1]");
        }
        Ok(())
    }

    pub fn arch(&self, graph: &Graph) -> Arch {
        Arch {
            num_features: graph.num_features(),
            hidden: self.hidden,
            latent: self.latent,
            num_classes: graph.num_classes(),
            num_domains: self.num_domains,
            domain_hidden: self.domain_hidden,
        }
    }

    /// Training-time attack budget resolved against `graph`.
    pub fn budget(&self, graph: &Graph) -> AttackBudget {
        let (lo, hi) = feature_range(graph);
        let eps = self.attack_feature_frac * (hi - lo);
        AttackBudget {
            feature_eps: eps,
            feature_steps: self.attack_feature_steps,
            feature_step_size: pgd_step_size(eps, self.attack_feature_steps),
            edge_budget: (self.attack_edge_rate * graph.num_edges() as f64).floor() as usize,
            inject_nodes: 0,
            inject_edges_per_node: 0,
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.use_li, self.use_le, self.learn_domains) {
            (true, true, true) => Variant::Full,
            (false, true, true) => Variant::NoLI,
            (true, false, true) => Variant::NoLE,
            (false, false, _) => Variant::NoLILE,
            _ => Variant::NoLD,
        }
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_LI")]
    NoLI,
    #[serde(rename = "no_LE")]
    NoLE,
    #[serde(rename = "no_LI_LE")]
    NoLILE,
    #[serde(rename = "no_LD")]
    NoLD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoLI, Variant::NoLE, Variant::NoLILE, Variant::NoLD];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLI => "no_LI",
            Variant::NoLE => "no_LE",
            Variant::NoLILE => "no_LI_LE",
            Variant::NoLD => "no_LD",
        }
    }

    pub fn apply(self, c: &mut TrainConfig) {
        let (li, le, ld) = match self {
            Variant::Full => (true, true, true),
            Variant::NoLI => (false, true, true),
            Variant::NoLE => (true, false, true),
            Variant::NoLILE => (false, false, true),
            Variant::NoLD => (true, true, false),
        };
        c.use_li = li;
        c.use_le = le;
        c.learn_domains = ld;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Seeds of a sweep file: one integer per line, `#` comments allowed.
/// Repeated seeds are an error.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let s: u64 = tok.parse().map_err(|_| Error::ConfigValue {
                key: "seed".into(),
                msg: format!("line {}: `{tok}` is not a seed", i + 1),
            })?;
            if seeds.contains(&s) {
                return Err(Error::ConfigValue {
                    key: "seed".into(),
                    msg: format!("duplicate seed {s}"),
                });
            }
            seeds.push(s);
        }
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::default();
        c.alpha = 25.5;
        c.seed = 7;
        c.use_le = false;
        assert_eq!(TrainConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = TrainConfig::parse_str("# hi\n\nalpha = 3\n  epochs=5 \n").unwrap();
        assert_eq!((c.alpha, c.epochs), (3.0, 5));
        match TrainConfig::parse_str("alpah = 3") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "alpah"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::parse_str("alpha = fast").is_err());
        assert!(TrainConfig::parse_str("num_domains = 1").is_err());
        assert!(TrainConfig::parse_str("just words").is_err());
    }

    #[test]
    fn variants() {
        for v in Variant::ALL {
            let c = TrainConfig::parse_str(&format!("variant = {v}")).unwrap();
            assert_eq!(c.variant(), v);
        }
        assert!(matches!("no_XY".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1\n2, 3 # x\n").unwrap(), vec![1, 2, 3]);
        assert!(parse_seed_list("1\n1\n").is_err());
        assert!(parse_seed_list("# none\n").is_err());
    }
}
