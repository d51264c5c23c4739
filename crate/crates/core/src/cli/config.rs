//! Run configuration: parsing of option values and layering of flags over a
//! JSON config file over defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::correction::VarianceMode;
use crate::error::{PanelError, Result};
use crate::family::{FamilyKind, PartialEffectSpec, Transform};
use crate::hessian::Normalization;
use crate::panel::CsvSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    None,
    #[default]
    Analytical,
    Jackknife,
    Both,
}

impl Correction {
    pub fn analytical(self) -> bool {
        matches!(self, Correction::Analytical | Correction::Both)
    }

    pub fn jackknife(self) -> bool {
        matches!(self, Correction::Jackknife | Correction::Both)
    }
}

impl FromStr for Correction {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Correction::None),
            "analytical" => Ok(Correction::Analytical),
            "jackknife" => Ok(Correction::Jackknife),
            "both" => Ok(Correction::Both),
            other => Err(PanelError::Config(format!(
                "unknown correction `{other}` (expected none|analytical|jackknife|both)"
            ))),
        }
    }
}

/// `drop-first-gamma`, `drop-first-alpha`, `penalty` or `penalty:<b>`.
pub fn parse_normalization(s: &str) -> Result<Normalization> {
    match s {
        "drop-first-gamma" => Ok(Normalization::DropFirstGamma),
        "drop-first-alpha" => Ok(Normalization::DropFirstAlpha),
        "penalty" => Ok(Normalization::penalty()),
        _ => {
            let b = s
                .strip_prefix("penalty:")
                .and_then(|b| b.parse::<f64>().ok())
                .filter(|b| b.is_finite() && *b > 0.0)
                .ok_or_else(|| {
                    PanelError::Config(format!(
                        "unknown normalization `{s}` (expected drop-first-gamma|drop-first-alpha|penalty[:b] with b > 0)"
                    ))
                })?;
            Ok(Normalization::Penalty { b })
        }
    }
}

fn regressor_index(token: &str, names: &[String]) -> Result<usize> {
    if let Some(k) = names.iter().position(|n| n == token) {
        return Ok(k);
    }
    token
        .parse::<usize>()
        .ok()
        .filter(|&k| k < names.len())
        .ok_or_else(|| PanelError::InvalidSpec(format!("`{token}` is neither a regressor name nor an index below {}", names.len())))
}

/// `k:kind[:j]` where `k` and `j` are regressor names or 0-based indices and
/// `kind` is `binary`, `continuous`, `poisson`, `poisson-square` or
/// `poisson-log1p`. The transform kinds take the index `j` of the coefficient
/// on the transformed regressor.
pub fn parse_effect(s: &str, names: &[String]) -> Result<PartialEffectSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || PanelError::InvalidSpec(format!("cannot parse effect `{s}` (expected k:kind or k:poisson-square:j)"));
    let (k, kind) = match parts.as_slice() {
        [k, kind] | [k, kind, _] => (regressor_index(k, names)?, *kind),
        _ => return Err(bad()),
    };
    let transformed = |t: Transform| -> Result<PartialEffectSpec> {
        let j = parts.get(2).ok_or_else(bad)?;
        Ok(PartialEffectSpec::poisson(k, Some((regressor_index(j, names)?, t))))
    };
    let spec = match (kind, parts.len()) {
        ("binary", 2) => PartialEffectSpec::binary(k),
        ("continuous", 2) => PartialEffectSpec::continuous(k),
        ("poisson", 2) => PartialEffectSpec::poisson(k, None),
        ("poisson-square", 3) => transformed(Transform::Square)?,
        ("poisson-log1p", 3) => transformed(Transform::Log1p)?,
        _ => return Err(bad()),
    };
    spec.check(names.len())?;
    Ok(spec)
}

pub fn read_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PanelError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| PanelError::Config(format!("config file {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(PanelError::Config(format!("config file {} must hold a JSON object", path.display())));
    }
    Ok(v)
}

/// Copies every key of `flags` over `base`, descending into nested objects.
pub fn overlay(base: &mut Value, flags: Map<String, Value>) {
    let Value::Object(target) = base else {
        *base = Value::Object(flags);
        return;
    };
    for (k, v) in flags {
        match (target.get_mut(&k), v) {
            (Some(existing @ Value::Object(_)), Value::Object(inner)) => overlay(existing, inner),
            (_, v) => {
                target.insert(k, v);
            }
        }
    }
}

pub fn from_layers<T: for<'de> Deserialize<'de>>(config: Option<&Path>, flags: Map<String, Value>) -> Result<T> {
    let mut v = match config {
        Some(p) => read_config(p)?,
        None => Value::Object(Map::new()),
    };
    overlay(&mut v, flags);
    serde_json::from_value(v).map_err(|e| PanelError::Config(e.to_string()))
}

fn default_trim() -> usize {
    1
}

fn default_normalization() -> String {
    "drop-first-gamma".into()
}

/// Settings of the `estimate` and `test` commands after layering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub schema: SchemaConfig,
    pub family: Option<FamilyKind>,
    #[serde(default)]
    pub correction: Correction,
    #[serde(default = "default_trim")]
    pub trim: usize,
    /// Effect specs in `k:kind` form.
    #[serde(default)]
    pub effects: Vec<String>,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    #[serde(default = "default_normalization")]
    pub normalization: String,
    #[serde(default)]
    pub no_bartlett: bool,
    /// Random unit half-splits for the jackknife; observation order when absent.
    pub jackknife_draws: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Drop units and periods whose effects diverge before fitting.
    #[serde(default)]
    pub drop_separated: bool,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// CSV column names; every field optional in the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaConfig {
    pub id: String,
    pub time: String,
    pub y: String,
    pub x: Option<Vec<String>>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let s = CsvSchema::default();
        Self { id: s.id, time: s.time, y: s.y, x: s.x }
    }
}

impl From<&SchemaConfig> for CsvSchema {
    fn from(s: &SchemaConfig) -> Self {
        CsvSchema { id: s.id.clone(), time: s.time.clone(), y: s.y.clone(), x: s.x.clone() }
    }
}

impl EstimateConfig {
    pub fn family(&self) -> Result<FamilyKind> {
        self.family.ok_or_else(|| PanelError::Config("a family is required (--family probit|logit|poisson|gaussian)".into()))
    }

    pub fn input(&self) -> Result<&Path> {
        self.input.as_deref().ok_or_else(|| PanelError::Config("an input CSV is required".into()))
    }

    pub fn normalization(&self) -> Result<Normalization> {
        parse_normalization(&self.normalization)
    }
}

/// Worker threads: flag or config value, else `TWOFE_THREADS`, else all cores.
pub fn thread_count(configured: Option<usize>) -> Result<Option<usize>> {
    resolve_threads(configured, std::env::var("TWOFE_THREADS").ok().as_deref())
}

fn resolve_threads(configured: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let n = match (configured, env) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => Some(v.trim().parse::<usize>().map_err(|_| PanelError::Config(format!("TWOFE_THREADS=`{v}` is not a thread count")))?),
        (None, None) => None,
    };
    if n == Some(0) {
        return Err(PanelError::Config("thread count must be positive".into()));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::EffectKind;
    use serde_json::json;

    fn names() -> Vec<String> {
        vec!["z".into(), "z_sq".into()]
    }

    #[test]
    fn effects_by_name_and_index() {
        assert_eq!(parse_effect("z:continuous", &names()).unwrap(), PartialEffectSpec::continuous(0));
        assert_eq!(parse_effect("1:binary", &names()).unwrap(), PartialEffectSpec::binary(1));
        assert_eq!(
            parse_effect("z:poisson-square:z_sq", &names()).unwrap(),
            PartialEffectSpec::poisson(0, Some((1, Transform::Square)))
        );
        assert!(matches!(parse_effect("z:poisson", &names()).unwrap().kind, EffectKind::PoissonTransform { transform: None }));
    }

    #[test]
    fn bad_effects_rejected() {
        for s in ["w:binary", "z", "z:probit", "z:poisson-square", "z:poisson-log1p:z", "5:binary"] {
            assert!(parse_effect(s, &names()).is_err(), "{s}");
        }
    }

    #[test]
    fn normalizations() {
        assert_eq!(parse_normalization("penalty:2").unwrap(), Normalization::Penalty { b: 2.0 });
        assert_eq!(parse_normalization("drop-first-alpha").unwrap(), Normalization::DropFirstAlpha);
        for s in ["penalty:0", "penalty:-1", "penalty:x", "none"] {
            assert!(parse_normalization(s).is_err(), "{s}");
        }
    }

    #[test]
    fn flags_override_config_override_defaults() {
        let mut base = json!({"family": "logit", "trim": 3, "schema": {"y": "outcome", "id": "firm"}});
        let mut flags = Map::new();
        flags.insert("trim".into(), json!(2));
        flags.insert("schema".into(), json!({"id": "unit"}));
        overlay(&mut base, flags);
        let c: EstimateConfig = serde_json::from_value(base).unwrap();
        assert_eq!(c.family, Some(FamilyKind::Logit));
        assert_eq!(c.trim, 2);
        assert_eq!((c.schema.id.as_str(), c.schema.y.as_str(), c.schema.time.as_str()), ("unit", "outcome", "time"));
        assert_eq!(c.correction, Correction::Analytical);
        assert_eq!(c.normalization, "drop-first-gamma");
    }

    #[test]
    fn thread_flag_beats_environment() {
        assert_eq!(resolve_threads(Some(3), Some("8")).unwrap(), Some(3));
        assert_eq!(resolve_threads(None, Some(" 8 ")).unwrap(), Some(8));
        assert_eq!(resolve_threads(None, None).unwrap(), None);
        assert!(resolve_threads(None, Some("many")).is_err());
        assert!(resolve_threads(None, Some("0")).is_err());
        assert!(resolve_threads(Some(0), None).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_value::<EstimateConfig>(json!({"famly": "probit"})).is_err());
    }
}
