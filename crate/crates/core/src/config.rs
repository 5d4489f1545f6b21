//! Run configuration: TOML sections [scenes], [search], [growth], [router],
//! [regime], with every scalar field overridable by a dotted-path flag.

use crate::arch::{build_base_topology, NetworkTopology};
use crate::error::{Error, Result};
use crate::growth::{GrowthConfig, ScoreForm};
use crate::scene::{SceneSpec, SceneStyle};
use crate::seeds::fnv1a;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SearchSection {
    pub trials: usize,
    pub epochs_per_trial: usize,
    /// Fraction of the training pairs held out to score trials.
    pub val_fraction: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { trials: 40, epochs_per_trial: 1, val_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GrowthSection {
    pub trials: usize,
    pub c0: u64,
    pub gamma: f64,
    pub score: String,
    pub phi_fraction: f64,
    pub mu: f64,
}

impl Default for GrowthSection {
    fn default() -> Self {
        GrowthSection { trials: 60, c0: 10, gamma: 2.0, score: "adaptive".into(), phi_fraction: 0.5, mu: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RouterSection {
    pub lambda: f64,
}

impl Default for RouterSection {
    fn default() -> Self {
        RouterSection { lambda: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegimeSection {
    /// "supervised" or "self_supervised".
    pub kind: String,
    pub train_epochs: usize,
    /// Self-supervised adaptation epochs on the real scene.
    pub adapt_epochs: usize,
    pub max_disparity: usize,
    /// Synthetic labeled source for proxy supervision (self-supervised runs).
    pub synthetic_seed: u64,
    pub synthetic_pairs: usize,
}

impl Default for RegimeSection {
    fn default() -> Self {
        RegimeSection {
            kind: "supervised".into(),
            train_epochs: 30,
            adapt_epochs: 10,
            max_disparity: 24,
            synthetic_seed: 7_777,
            synthetic_pairs: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Supervised,
    SelfSupervised,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub growth: GrowthSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub regime: RegimeSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn regime_kind(&self) -> Result<Regime> {
        match self.regime.kind.as_str() {
            "supervised" => Ok(Regime::Supervised),
            "self_supervised" => Ok(Regime::SelfSupervised),
            other => Err(Error::InvalidConfig(format!("unknown regime '{other}'"))),
        }
    }

    pub fn score_form(&self) -> Result<ScoreForm> {
        match self.growth.score.as_str() {
            "error_rate" => Ok(ScoreForm::ErrorRate),
            "linear" => Ok(ScoreForm::Linear),
            "adaptive" => Ok(ScoreForm::Adaptive),
            other => Err(Error::InvalidConfig(format!("unknown growth score '{other}'"))),
        }
    }

    pub fn growth_config(&self) -> Result<GrowthConfig> {
        Ok(GrowthConfig {
            trials: self.growth.trials,
            c0: self.growth.c0,
            gamma: self.growth.gamma,
            score: self.score_form()?,
            phi_fraction: self.growth.phi_fraction,
            mu: self.growth.mu,
        })
    }

    pub fn topology(&self) -> NetworkTopology {
        let mut topo = build_base_topology();
        topo.max_disparity = self.regime.max_disparity;
        topo
    }

    /// The synthetic labeled source used for proxy supervision.
    pub fn synthetic_spec(&self) -> SceneSpec {
        SceneSpec {
            name: "synthetic-source".into(),
            style: SceneStyle::default(),
            disparity_min: 2.0,
            disparity_max: (self.regime.max_disparity as f64 * 0.75).floor(),
            disparity_layers: 3,
            height: self.scenes.first().map_or(48, |s| s.height),
            width: self.scenes.first().map_or(48, |s| s.width),
            train_pairs: self.regime.synthetic_pairs,
            test_pairs: 1,
            seed: self.regime.synthetic_seed,
        }
    }

    pub fn validate_for_run(&self) -> Result<()> {
        if self.scenes.len() < 2 {
            return Err(Error::InvalidConfig("a continual run needs at least two scenes".into()));
        }
        self.validate_common()
    }

    pub fn validate_common(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::InvalidConfig("no scenes configured".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.scenes {
            s.validate(self.regime.max_disparity)?;
            if !names.insert(s.name.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate scene name '{}'", s.name)));
            }
        }
        if self.regime.max_disparity % 3 != 0 {
            return Err(Error::InvalidConfig("max_disparity must be divisible by 3".into()));
        }
        if !(0.0..1.0).contains(&self.search.val_fraction) || self.search.val_fraction <= 0.0 {
            return Err(Error::InvalidConfig("search.val_fraction must lie in (0, 1)".into()));
        }
        self.regime_kind()?;
        self.score_form()?;
        if self.search.trials == 0 || self.growth.trials == 0 || self.regime.train_epochs == 0 {
            return Err(Error::InvalidConfig("trials and epochs must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical serialized config.
    pub fn content_hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    /// Apply a `section.field = value` override onto the TOML representation.
    /// Scene fields address by index: `scenes.0.seed = 9`.
    pub fn with_override(&self, dotted: &str, value: &str) -> Result<RunConfig> {
        let mut root: toml::Value =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Parse(e.to_string()))?;
        let path: Vec<&str> = dotted.split('.').collect();
        if path.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "override '{dotted}' must name section.field"
            )));
        }
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            node = match node {
                toml::Value::Table(t) => t
                    .get_mut(*part)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown config section '{part}'")))?,
                toml::Value::Array(a) => {
                    let idx: usize = part.parse().map_err(|_| {
                        Error::InvalidConfig(format!("expected array index, got '{part}'"))
                    })?;
                    a.get_mut(idx)
                        .ok_or_else(|| Error::InvalidConfig(format!("index {idx} out of range")))?
                }
                _ => return Err(Error::InvalidConfig(format!("cannot descend into '{part}'"))),
            };
        }
        let leaf = *path.last().unwrap();
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("'{dotted}' does not name a field")))?;
        let existing = table
            .get(leaf)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config field '{dotted}'")))?;
        let new_value = match existing {
            toml::Value::Integer(_) => toml::Value::Integer(
                value.parse().map_err(|_| Error::InvalidConfig(format!("'{value}' is not an integer")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                value.parse().map_err(|_| Error::InvalidConfig(format!("'{value}' is not a number")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                value.parse().map_err(|_| Error::InvalidConfig(format!("'{value}' is not a bool")))?,
            ),
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => return Err(Error::InvalidConfig(format!("field '{dotted}' is not scalar"))),
        };
        table.insert(leaf.to_string(), new_value);
        let text = toml::to_string(&root).map_err(|e| Error::Parse(e.to_string()))?;
        RunConfig::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> &'static str {
        r#"
[[scenes]]
name = "red"
disparity_min = 2.0
disparity_max = 10.0
disparity_layers = 3
height = 48
width = 48
train_pairs = 8
test_pairs = 4
seed = 1
[scenes.style]
tint = [1.0, 0.2, 0.2]
brightness = 0.0
noise_sigma = 0.02
texture_density = 0.6

[[scenes]]
name = "blue"
disparity_min = 2.0
disparity_max = 10.0
disparity_layers = 3
height = 48
width = 48
train_pairs = 8
test_pairs = 4
seed = 2
[scenes.style]
tint = [0.2, 0.2, 1.0]
brightness = 0.1
noise_sigma = 0.05
texture_density = 0.5

[search]
trials = 6

[growth]
trials = 8
gamma = 2.0

[regime]
kind = "supervised"
train_epochs = 5
max_disparity = 12
"#
    }

    #[test]
    fn parse_validate_and_hash() {
        let cfg = RunConfig::from_toml(sample_toml()).unwrap();
        cfg.validate_for_run().unwrap();
        assert_eq!(cfg.scenes.len(), 2);
        assert_eq!(cfg.search.trials, 6);
        assert_eq!(cfg.search.epochs_per_trial, 1); // default fills in
        let h1 = cfg.content_hash();
        let mut cfg2 = cfg.clone();
        cfg2.regime.train_epochs = 6;
        assert_ne!(h1, cfg2.content_hash());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::from_toml(sample_toml()).unwrap();
        let cfg = cfg.with_override("search.trials", "11").unwrap();
        assert_eq!(cfg.search.trials, 11);
        let cfg = cfg.with_override("regime.kind", "self_supervised").unwrap();
        assert_eq!(cfg.regime.kind, "self_supervised");
        let cfg = cfg.with_override("scenes.1.seed", "99").unwrap();
        assert_eq!(cfg.scenes[1].seed, 99);
        assert!(cfg.with_override("search.nope", "1").is_err());
        assert!(cfg.with_override("growth.gamma", "abc").is_err());
    }

    #[test]
    fn invalid_configs_are_named() {
        let mut cfg = RunConfig::from_toml(sample_toml()).unwrap();
        cfg.scenes[1].name = "red".into();
        assert!(cfg.validate_for_run().is_err());
        let mut cfg = RunConfig::from_toml(sample_toml()).unwrap();
        cfg.regime.kind = "mystery".into();
        assert!(cfg.validate_for_run().is_err());
        let mut cfg = RunConfig::from_toml(sample_toml()).unwrap();
        cfg.scenes.truncate(1);
        assert!(cfg.validate_for_run().is_err());
        assert!(cfg.validate_common().is_ok());
    }
}
