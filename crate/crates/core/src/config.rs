//! Flat `section.key = value` run configuration with a canonical digest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::conditioning::{BlendConfig, ControlConfig};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::evaluation::SplitKind;
use crate::flow::{ModelConfig, TrainConfig};
use crate::priors::{FixedZinbConfig, PriorConfig, PriorKind, SpatialEmpiricalConfig};
use crate::synth_data::SynthConfig;

/// Model regimes from the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "prior")]
    Prior,
    #[serde(rename = "prior+control")]
    PriorControl,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Vanilla, Ablation::Prior, Ablation::PriorControl, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Vanilla => "vanilla",
            Ablation::Prior => "prior",
            Ablation::PriorControl => "prior+control",
            Ablation::Full => "full",
        }
    }

    pub fn default_prior(self) -> PriorKind {
        match self {
            Ablation::Vanilla => PriorKind::FixedZinb,
            _ => PriorKind::LearnedZinb,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown ablation '{s}' (vanilla|prior|prior+control|full)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjSection {
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacentSection {
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Variance-ranked gene panel size; 0 scores every gene.
    pub hvg: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// `None` takes the ablation's default start distribution.
    pub prior: Option<PriorKind>,
    pub split: SplitKind,
    pub ablation: Ablation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub prior: PriorConfig,
    pub fixed: FixedZinbConfig,
    pub spatial: SpatialEmpiricalConfig,
    pub denoiser: DenoiserConfig,
    pub control: ControlConfig,
    pub blend: BlendConfig,
    pub proj: ProjSection,
    pub adjacent: AdjacentSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            synth: SynthConfig::default(),
            prior: PriorConfig::default(),
            fixed: FixedZinbConfig::default(),
            spatial: SpatialEmpiricalConfig::default(),
            denoiser: model.denoiser,
            control: model.control.unwrap_or_default(),
            blend: model.blend.clone(),
            proj: ProjSection { rank: model.proj_rank },
            adjacent: AdjacentSection { k: model.k_adjacent },
            train: TrainConfig::default(),
            infer: InferSection { steps: 5 },
            eval: EvalSection { hvg: 0 },
            run: RunSection {
                prior: None,
                split: SplitKind::EvenSlice,
                ablation: Ablation::Full,
            },
        }
    }
}

fn section<T: Serialize>(out: &mut BTreeMap<String, Value>, name: &str, v: &T) {
    let Value::Object(fields) = serde_json::to_value(v).expect("config sections serialize") else {
        unreachable!("config sections are structs")
    };
    for (k, v) in fields {
        out.insert(format!("{name}.{k}"), v);
    }
}

fn take<T: DeserializeOwned>(flat: &BTreeMap<String, Value>, name: &str) -> Result<T> {
    let prefix = format!("{name}.");
    let obj: serde_json::Map<String, Value> = flat
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|f| (f.to_string(), v.clone())))
        .collect();
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Validation(format!("config section '{name}': {e}")))
}

/// Parses a value the way it is written on a command line or in a file:
/// JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Every key with its current value, sorted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        section(&mut out, "synth", &self.synth);
        section(&mut out, "prior", &self.prior);
        section(&mut out, "fixed", &self.fixed);
        section(&mut out, "spatial", &self.spatial);
        section(&mut out, "denoiser", &self.denoiser);
        section(&mut out, "control", &self.control);
        section(&mut out, "blend", &self.blend);
        section(&mut out, "proj", &self.proj);
        section(&mut out, "adjacent", &self.adjacent);
        section(&mut out, "train", &self.train);
        section(&mut out, "infer", &self.infer);
        section(&mut out, "eval", &self.eval);
        section(&mut out, "run", &self.run);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let cfg = Self {
            synth: take(flat, "synth")?,
            prior: take(flat, "prior")?,
            fixed: take(flat, "fixed")?,
            spatial: take(flat, "spatial")?,
            denoiser: take(flat, "denoiser")?,
            control: take(flat, "control")?,
            blend: take(flat, "blend")?,
            proj: take(flat, "proj")?,
            adjacent: take(flat, "adjacent")?,
            train: take(flat, "train")?,
            infer: take(flat, "infer")?,
            eval: take(flat, "eval")?,
            run: take(flat, "run")?,
        };
        let known = cfg.to_flat();
        if let Some(k) = flat.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Validation(format!("unknown config key '{k}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides; unknown keys are rejected.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (k, v) in pairs {
            match flat.get_mut(k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Validation(format!("unknown config key '{k}'"))),
            }
        }
        Self::from_flat(&flat)
    }

    /// Parses `key=value` (as given to `--set`).
    pub fn parse_assignment(s: &str) -> Result<(&str, Value)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("expected key=value, got '{s}'")))?;
        Ok((k.trim(), parse_value(v)))
    }

    /// Text document of `key = value` lines (`#` starts a comment), or a
    /// flat JSON object. Keys not mentioned keep their defaults.
    pub fn parse_document(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let obj: BTreeMap<String, Value> =
                serde_json::from_str(trimmed).map_err(|e| Error::Validation(format!("config: {e}")))?;
            return Self::default().with_overrides(obj.iter().map(|(k, v)| (k.as_str(), v.clone())));
        }
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = Self::parse_assignment(line).map_err(|_| Error::Validation(format!("config line {}: expected key = value", no + 1)))?;
            pairs.push((k, v));
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_document(&std::fs::read_to_string(path)?)
    }

    /// Canonical document: one `key = value` line per key, sorted.
    pub fn to_document(&self) -> String {
        self.to_flat()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 over the sorted flat form, so key order in the source
    /// document does not matter.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&self.to_flat()).expect("flat config serializes");
        Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.denoiser.validate()?;
        self.control.validate()?;
        self.blend.validate()?;
        if self.proj.rank == 0 || self.adjacent.k == 0 || self.infer.steps == 0 {
            return Err(Error::Validation("proj.rank, adjacent.k and infer.steps must be >= 1".into()));
        }
        if self.train.batch == 0 || !(self.train.learning_rate > 0.0) {
            return Err(Error::Validation("train.batch must be >= 1 and train.learning_rate > 0".into()));
        }
        Ok(())
    }

    pub fn prior_kind(&self) -> PriorKind {
        self.run.prior.unwrap_or(self.run.ablation.default_prior())
    }

    /// Backbone and conditioning settings for the configured regime.
    pub fn model_config(&self) -> ModelConfig {
        let mut denoiser = self.denoiser.clone();
        let (control, adjacent) = match self.run.ablation {
            Ablation::Vanilla | Ablation::Prior => {
                denoiser.inducing = 0;
                (None, false)
            }
            Ablation::PriorControl => (Some(self.control.clone()), false),
            Ablation::Full => (Some(self.control.clone()), true),
        };
        ModelConfig {
            denoiser,
            control,
            adjacent,
            blend: self.blend.clone(),
            proj_rank: self.proj.rank,
            k_adjacent: self.adjacent.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_form() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_flat(&c.to_flat()).unwrap(), c);
        assert_eq!(RunConfig::parse_document(&c.to_document()).unwrap(), c);
        for key in ["control.grid", "control.channels", "control.scale", "control.t_warm", "control.blocks", "blend.tau", "blend.beta", "proj.rank"] {
            assert!(c.to_flat().contains_key(key), "{key}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c = RunConfig::default();
        assert!(c.with_overrides([("control.gird", Value::from(8))]).unwrap_err().is_validation());
        assert!(RunConfig::parse_document("bogus = 1").unwrap_err().is_validation());
        let mut flat = c.to_flat();
        flat.insert("train.momentum".into(), Value::from(0.9));
        assert!(RunConfig::from_flat(&flat).is_err());
    }

    #[test]
    fn overrides_and_types() {
        let c = RunConfig::parse_document(
            "# comment\ncontrol.grid = 32\ncontrol.blocks = [0, 2]\nrun.ablation = prior+control\nrun.prior = \"spatial-empirical\"\n",
        )
        .unwrap();
        assert_eq!(c.control.grid, 32);
        assert_eq!(c.control.blocks, Some(vec![0, 2]));
        assert_eq!(c.run.ablation, Ablation::PriorControl);
        assert_eq!(c.prior_kind(), PriorKind::SpatialEmpirical);
        assert!(RunConfig::parse_document("control.grid = big").unwrap_err().is_validation());
        assert!(RunConfig::parse_document("blend.tau = 0").is_err());
    }

    #[test]
    fn hash_ignores_key_order_but_not_values() {
        let a = RunConfig::parse_document("blend.tau = 0.5\ncontrol.grid = 16\n").unwrap();
        let b = RunConfig::parse_document("control.grid = 16\nblend.tau = 0.5\n").unwrap();
        let j = RunConfig::parse_document("{\"control.grid\": 16, \"blend.tau\": 0.5}").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), j.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::parse_document("blend.tau = 0.6\ncontrol.grid = 16\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ablation_ladder() {
        let mut c = RunConfig::default();
        let get = |c: &RunConfig, a: Ablation| {
            let mut c = c.clone();
            c.run.ablation = a;
            (c.model_config(), c.prior_kind())
        };
        let (m, p) = get(&c, Ablation::Vanilla);
        assert_eq!((m.denoiser.inducing, m.control.is_none(), p), (0, true, PriorKind::FixedZinb));
        let (m, p) = get(&c, Ablation::Prior);
        assert_eq!((m.denoiser.inducing, m.control.is_none(), p), (0, true, PriorKind::LearnedZinb));
        let (m, _) = get(&c, Ablation::PriorControl);
        assert!(m.control.is_some() && !m.adjacent && m.denoiser.inducing > 0);
        let (m, _) = get(&c, Ablation::Full);
        assert!(m.control.is_some() && m.adjacent);
        c.run.prior = Some(PriorKind::SpatialEmpirical);
        assert_eq!(get(&c, Ablation::Vanilla).1, PriorKind::SpatialEmpirical);
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }
}
