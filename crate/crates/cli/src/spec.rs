use std::path::{Path, PathBuf};

use mcd_core::{ProtocolId, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    Syntax(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("unknown preset `{0}` (expected fig2, fig3, fig4 or fig5)")]
    UnknownPreset(String),
}

fn bad(key: &str, reason: impl ToString) -> SpecError {
    SpecError::BadValue {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<Value>,
}

/// A parsed experiment: base configuration plus the axes to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: SimConfig,
    pub sweep: Option<Sweep>,
    pub protocols: Vec<ProtocolId>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Config keys the user set explicitly, as given.
    #[serde(skip)]
    pub explicit: Map<String, Value>,
}

/// One simulation to run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub experiment: String,
    pub sweep_param: String,
    pub sweep_value: String,
    pub protocol: ProtocolId,
    pub seed: u64,
    pub config: SimConfig,
}

const SPEC_KEYS: [&str; 6] = ["name", "sweep", "protocols", "seeds", "out_dir", "preset"];

fn config_fields() -> Map<String, Value> {
    match serde_json::to_value(SimConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("SimConfig serializes to an object"),
    }
}

/// Sets one field of `cfg`, naming the key on failure.
pub fn set_param(cfg: &SimConfig, key: &str, value: &Value) -> Result<SimConfig, SpecError> {
    let Value::Object(mut fields) = serde_json::to_value(cfg).expect("config serializes") else {
        unreachable!("SimConfig serializes to an object")
    };
    if !fields.contains_key(key) {
        return Err(SpecError::UnknownKey(key.to_string()));
    }
    fields.insert(key.to_string(), value.clone());
    serde_json::from_value(Value::Object(fields)).map_err(|e| bad(key, e))
}

fn overlay(mut cfg: SimConfig, keys: &Map<String, Value>) -> Result<SimConfig, SpecError> {
    for (k, v) in keys {
        cfg = set_param(&cfg, k, v)?;
    }
    Ok(cfg)
}

/// Flat config keys plus the experiment keys, without completeness checks.
pub fn parse_document(text: &str) -> Result<ExperimentSpec, SpecError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| SpecError::Syntax(e.to_string()))?;
    let Value::Object(mut doc) = doc else {
        return Err(SpecError::Syntax("top level must be an object".into()));
    };
    let fields = config_fields();
    if let Some(k) = doc
        .keys()
        .find(|k| !fields.contains_key(*k) && !SPEC_KEYS.contains(&k.as_str()))
    {
        return Err(SpecError::UnknownKey(k.clone()));
    }

    let preset = doc
        .remove("preset")
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| bad("preset", "expected a string")))
        .transpose()?;
    let name = doc
        .remove("name")
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| bad("name", "expected a string")))
        .transpose()?;
    let sweep = doc
        .remove("sweep")
        .map(|v| serde_json::from_value::<Sweep>(v).map_err(|e| bad("sweep", e)))
        .transpose()?;
    let protocols = doc
        .remove("protocols")
        .map(|v| serde_json::from_value::<Vec<ProtocolId>>(v).map_err(|e| bad("protocols", e)))
        .transpose()?;
    let seeds = doc
        .remove("seeds")
        .map(|v| serde_json::from_value::<Vec<u64>>(v).map_err(|e| bad("seeds", e)))
        .transpose()?;
    let out_dir = doc
        .remove("out_dir")
        .map(|v| serde_json::from_value::<PathBuf>(v).map_err(|e| bad("out_dir", e)))
        .transpose()?;

    let spec = ExperimentSpec {
        name: name.unwrap_or_else(|| "run".into()),
        base: overlay(SimConfig::default(), &doc)?,
        sweep,
        protocols: protocols.unwrap_or_default(),
        seeds: seeds.unwrap_or_default(),
        out_dir,
        explicit: doc,
    };
    match preset {
        Some(p) => apply_preset(&spec, &p),
        None => Ok(spec),
    }
}

/// Parses a JSON experiment document. A protocol (or protocol list) is
/// required unless the document names a preset.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec, SpecError> {
    let mut spec = parse_document(text)?;
    if spec.protocols.is_empty() {
        if !spec.explicit.contains_key("protocol") {
            return Err(SpecError::Missing("protocol"));
        }
        spec.protocols = vec![spec.base.protocol];
    }
    if spec.seeds.is_empty() {
        spec.seeds = vec![spec.base.seed];
    }
    check(&spec)?;
    Ok(spec)
}

fn read(path: &Path) -> Result<String, SpecError> {
    std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec, SpecError> {
    parse_config_str(&read(path)?)
}

/// Parses a document that will be completed by a preset.
pub fn parse_for_preset(path: &Path, preset: &str) -> Result<ExperimentSpec, SpecError> {
    apply_preset(&parse_document(&read(path)?)?, preset)
}

/// Every planned configuration must validate.
pub fn check(spec: &ExperimentSpec) -> Result<(), SpecError> {
    if spec.protocols.is_empty() {
        return Err(bad("protocols", "empty list"));
    }
    if spec.seeds.is_empty() {
        return Err(bad("seeds", "empty list"));
    }
    if let Some(s) = &spec.sweep {
        if s.param == "protocol" || s.param == "seed" {
            return Err(bad("sweep", "use `protocols` or `seeds` for that axis"));
        }
        if !config_fields().contains_key(&s.param) {
            return Err(bad("sweep", format!("`{}` is not a config field", s.param)));
        }
        if s.values.is_empty() {
            return Err(bad("sweep", "no values"));
        }
    }
    for run in plan_runs(spec)? {
        run.config.validate().map_err(|e| SpecError::BadValue {
            key: e.field.to_string(),
            reason: format!("{} ({} run)", e.reason, run.protocol),
        })?;
    }
    Ok(())
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Sweep values × protocols × seeds, in that nesting order.
pub fn plan_runs(spec: &ExperimentSpec) -> Result<Vec<RunPlan>, SpecError> {
    let points: Vec<(String, String, SimConfig)> = match &spec.sweep {
        None => vec![(String::new(), String::new(), spec.base.clone())],
        Some(s) => s
            .values
            .iter()
            .map(|v| Ok((s.param.clone(), value_label(v), set_param(&spec.base, &s.param, v)?)))
            .collect::<Result<_, SpecError>>()?,
    };
    let mut plan = Vec::with_capacity(points.len() * spec.protocols.len() * spec.seeds.len());
    for (param, label, cfg) in &points {
        for p in &spec.protocols {
            for seed in &spec.seeds {
                plan.push(RunPlan {
                    experiment: spec.name.clone(),
                    sweep_param: param.clone(),
                    sweep_value: label.clone(),
                    protocol: *p,
                    seed: *seed,
                    config: SimConfig {
                        protocol: *p,
                        seed: *seed,
                        ..cfg.clone()
                    },
                });
            }
        }
    }
    Ok(plan)
}

pub const PRESETS: [&str; 4] = ["fig2", "fig3", "fig4", "fig5"];

/// Base configuration and sweep of a built-in experiment.
pub fn preset(name: &str) -> Result<(SimConfig, Sweep), SpecError> {
    let base = SimConfig {
        n_items: 100,
        item_size: 16,
        n_channels: 1,
        n_clients: 10,
        mts_per_client: 3,
        rs_min: 1,
        rs_max: 5,
        write_prob: 0.0,
        horizon_cycles: Some(20),
        ..Default::default()
    };
    let nums = |xs: &[f64]| xs.iter().map(|x| serde_json::json!(x)).collect::<Vec<_>>();
    let ints = |xs: &[u64]| xs.iter().map(|x| serde_json::json!(x)).collect::<Vec<_>>();
    Ok(match name {
        "fig2" => (
            SimConfig {
                update_rate: 0.1,
                ..base
            },
            Sweep {
                param: "p_check".into(),
                values: nums(&[0.0, 0.5, 1.0, 2.0, 4.0]),
            },
        ),
        "fig3" | "fig4" => (
            SimConfig {
                update_rate: 0.2,
                ..base
            },
            Sweep {
                param: "item_size".into(),
                values: ints(&[16, 64, 256, 1024]),
            },
        ),
        "fig5" => (
            SimConfig {
                update_rate: 0.0,
                fixed_position: Some(1),
                // every transaction starts with the cycle, so position alone sets the cost
                mts_per_client: 1,
                ..base
            },
            Sweep {
                param: "fixed_position".into(),
                values: ints(&[1, 10, 25, 50, 100]),
            },
        ),
        other => return Err(SpecError::UnknownPreset(other.to_string())),
    })
}

/// The preset experiment with the user's explicit keys layered on top.
pub fn apply_preset(user: &ExperimentSpec, name: &str) -> Result<ExperimentSpec, SpecError> {
    let (base, sweep) = preset(name)?;
    let mut explicit = user.explicit.clone();
    explicit.remove(&sweep.param);
    let base = overlay(base, &explicit)?;
    let spec = ExperimentSpec {
        name: name.to_string(),
        base,
        sweep: Some(sweep),
        protocols: if user.protocols.is_empty() {
            ProtocolId::ALL.to_vec()
        } else {
            user.protocols.clone()
        },
        seeds: if user.seeds.is_empty() {
            vec![1, 2, 3]
        } else {
            user.seeds.clone()
        },
        out_dir: user.out_dir.clone(),
        explicit: user.explicit.clone(),
    };
    check(&spec)?;
    Ok(spec)
}

/// Replaces the sweep with `param` over `values` (given as text).
pub fn with_sweep(spec: &ExperimentSpec, param: &str, values: &[String]) -> Result<ExperimentSpec, SpecError> {
    let values = values
        .iter()
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())))
        .collect();
    let spec = ExperimentSpec {
        sweep: Some(Sweep {
            param: param.to_string(),
            values,
        }),
        ..spec.clone()
    };
    check(&spec)?;
    Ok(spec)
}
