//! Run configuration: flat `dotted.key = value` text with `include` lines,
//! mapped onto typed settings, plus content-hashed run identifiers.
//!
//! ```text
//! # comments start with a hash
//! include base.conf
//! seed = 3
//! synthetic.kappa = 2.0
//! pipeline.train.ablation.no_iptw = true
//! adaptation.fractions = [0.1, 0.3, 0.5]
//! ```
//!
//! Values are read as JSON when they parse as JSON and as bare strings
//! otherwise. Later assignments override earlier ones, including those
//! pulled in by an `include`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{DacError, Result};
use crate::experiment::AdaptationSettings;
use crate::io::sha256_hex;
use crate::pipeline::PipelineConfig;
use crate::synthetic::SyntheticConfig;

/// Workspace-relative output directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: String,
    pub runs: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            runs: "runs".into(),
        }
    }
}

/// Calibration settings of the mortality estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub calibration_width: f64,
    pub calibration_min_count: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            calibration_width: 0.02,
            calibration_min_count: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub synthetic: SyntheticConfig,
    pub pipeline: PipelineConfig,
    pub adaptation: AdaptationSettings,
    pub evaluation: EvaluationSettings,
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl RunConfig {
    /// Read a config file, following includes relative to each file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_assignments(&read_assignments(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_assignments(&parse_assignments(text, "<inline>", None, &mut BTreeSet::new())?)
    }

    /// Apply assignments in order on top of the defaults.
    pub fn from_assignments(assignments: &[Assignment]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for a in assignments {
            let fail = |m: String| DacError::validation(format!("{}: {}: {m}", a.origin, a.key));
            set_dotted(&mut tree, &a.key, parse_value(&a.value)).map_err(fail)?;
            // type-check after each assignment so an error names its key
            Self::deserialize(&tree).map_err(|e| fail(e.to_string()))?;
        }
        let config = Self::deserialize(&tree)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.pipeline.validate()?;
        let a = &self.adaptation;
        if a.fractions.is_empty() || a.fractions.iter().any(|f| !(*f >= 0.0 && *f <= 0.7)) {
            return Err(DacError::validation(
                "adaptation.fractions: each fraction must lie in [0, 0.7], the training share of the target cohort",
            ));
        }
        if !(a.perturbation.is_finite() && a.perturbation >= 0.0) {
            return Err(DacError::validation("adaptation.perturbation must be finite and >= 0"));
        }
        if a.dynamics.action_dim == 0 {
            return Err(DacError::validation("adaptation.dynamics.action_dim must be positive"));
        }
        a.dynamics.fit.validate().map_err(|e| e.within("adaptation.dynamics.fit"))?;
        a.dynamics.fine_tune.validate().map_err(|e| e.within("adaptation.dynamics.fine_tune"))?;
        let e = &self.evaluation;
        if !(e.calibration_width > 0.0 && e.calibration_width <= 1.0) || e.calibration_min_count == 0 {
            return Err(DacError::validation(
                "evaluation.calibration_width must lie in (0, 1] and calibration_min_count be positive",
            ));
        }
        Ok(())
    }

    /// Copy with every component seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synthetic.seed = self.seed;
        c.pipeline = self.pipeline.reseeded(self.seed);
        c.adaptation.dynamics.fit.seed = self.seed.wrapping_add(3);
        c.adaptation.dynamics.fine_tune.seed = self.seed.wrapping_add(4);
        c
    }

    /// Hash of everything the generated cohort depends on.
    pub fn data_hash(&self) -> String {
        full_hash(&self.resolved().synthetic)
    }

    /// Hash of everything a trained policy depends on.
    pub fn run_hash(&self) -> String {
        let r = self.resolved();
        full_hash(&(&r.synthetic, &r.pipeline))
    }

    /// Hash of an adaptation study on top of a run.
    pub fn adaptation_hash(&self) -> String {
        let r = self.resolved();
        full_hash(&(self.run_hash(), &r.adaptation))
    }

    pub fn data_id(&self) -> String {
        self.data_hash()[..ID_LEN].to_string()
    }

    pub fn run_id(&self) -> String {
        self.run_hash()[..ID_LEN].to_string()
    }

    pub fn adaptation_id(&self) -> String {
        self.adaptation_hash()[..ID_LEN].to_string()
    }

    /// Full-length hash of the resolved configuration.
    pub fn config_hash(&self) -> String {
        full_hash(&self.resolved())
    }

    /// The resolved configuration as flat assignments, one per leaf.
    pub fn to_flat_text(&self) -> String {
        let tree = serde_json::to_value(self.resolved()).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.join("\n") + "\n"
    }
}

/// Length of the hash prefix used as a directory name.
pub const ID_LEN: usize = 16;

fn full_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `tree.a.b.c = value`; every prefix must already be an object and the
/// leaf must already exist, so misspelled keys are reported.
fn set_dotted(tree: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        let child = map.get_mut(*part).ok_or_else(|| "unknown key".to_string())?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err("is a section, not a value".into());
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

pub fn read_assignments(path: &Path) -> Result<Vec<Assignment>> {
    read_file(path, &mut BTreeSet::new())
}

fn read_file(path: &Path, stack: &mut BTreeSet<PathBuf>) -> Result<Vec<Assignment>> {
    let canonical = path
        .canonicalize()
        .map_err(|e| DacError::validation(format!("cannot open config {}: {e}", path.display())))?;
    if !stack.insert(canonical.clone()) {
        return Err(DacError::validation(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(&canonical)?;
    let out = parse_assignments(&text, &path.display().to_string(), canonical.parent(), stack);
    stack.remove(&canonical);
    out
}

fn parse_assignments(
    text: &str,
    origin: &str,
    dir: Option<&Path>,
    stack: &mut BTreeSet<PathBuf>,
) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let here = format!("{origin}:{}", n + 1);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("include ") {
            let dir = dir.ok_or_else(|| DacError::validation(format!("{here}: include needs a file context")))?;
            out.extend(read_file(&dir.join(rest.trim()), stack)?);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DacError::validation(format!("{here}: expected `key = value` or `include FILE`")))?;
        let key = key.trim();
        let valid = !key.is_empty()
            && key.split('.').all(|p| {
                !p.is_empty() && p.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            });
        if !valid {
            return Err(DacError::validation(format!("{here}: malformed key `{key}`")));
        }
        out.push(Assignment {
            key: key.to_string(),
            value: value.trim().to_string(),
            origin: here,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let c = RunConfig::default();
        let again = RunConfig::parse(&c.to_flat_text()).unwrap();
        assert_eq!(again.resolved(), c.resolved());
    }

    #[test]
    fn dotted_keys_and_types() {
        let c = RunConfig::parse(
            "seed = 4\nsynthetic.kappa = 0\npipeline.train.ablation.no_iptw = true\nadaptation.fractions = [0.2]\npaths.data = my data",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.synthetic.kappa, 0.0);
        assert!(c.pipeline.train.ablation.no_iptw);
        assert_eq!(c.adaptation.fractions, vec![0.2]);
        assert_eq!(c.paths.data, "my data");
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("synthetic.kapa = 1").unwrap_err().to_string();
        assert!(e.contains("synthetic.kapa"), "{e}");
        let e = RunConfig::parse("pipeline.train.alpha = lots").unwrap_err().to_string();
        assert!(e.contains("pipeline.train.alpha"), "{e}");
        let e = RunConfig::parse("synthetic = 3").unwrap_err().to_string();
        assert!(e.contains("section"), "{e}");
        assert!(RunConfig::parse("synthetic.kappa = -1").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn includes_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.conf"), "seed = 1\nsynthetic.kappa = 3\n").unwrap();
        std::fs::write(dir.path().join("run.conf"), "include base.conf\nseed = 2\n").unwrap();
        let c = RunConfig::load(&dir.path().join("run.conf")).unwrap();
        assert_eq!((c.seed, c.synthetic.kappa), (2, 3.0));
        std::fs::write(dir.path().join("a.conf"), "include b.conf\n").unwrap();
        std::fs::write(dir.path().join("b.conf"), "include a.conf\n").unwrap();
        let e = RunConfig::load(&dir.path().join("a.conf")).unwrap_err().to_string();
        assert!(e.contains("cycle"), "{e}");
    }

    #[test]
    fn identifiers_follow_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.run_id(), b.run_id());
        b.pipeline.train.alpha = 0.2;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.data_id(), b.data_id());
        b.seed = 1;
        assert_ne!(a.data_id(), b.data_id());
        assert_eq!(a.run_id().len(), 16);
    }
}
