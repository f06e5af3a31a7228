//! TOML configuration with `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tutor_core::bc::TrainConfig;
use tutor_core::eval::DeploymentGate;
use tutor_core::expert::ExpertGains;
use tutor_core::flightdyn::SimParams;
use tutor_core::session::SessionConfig;
use tutor_core::tutor::TutorThresholds;

use crate::error::{CliError, CliResult, Exit};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimParams,
    pub expert: ExpertGains,
    pub train: TrainConfig,
    pub tutor: TutorThresholds,
    pub session: SessionConfig,
    pub eval: DeploymentGate,
}

impl Config {
    /// Reads `path` (if any), applies `overrides` in order and validates
    /// everything except the session section, which only `serve` needs.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    let exit = if e.kind() == std::io::ErrorKind::NotFound {
                        Exit::MissingFile
                    } else {
                        Exit::Failure
                    };
                    CliError::new(exit, format!("{}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let thresholds_in_session = table
            .get("session")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("thresholds"));
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if thresholds_in_session || overrides.iter().any(|o| o.starts_with("session.thresholds")) {
            return Err(CliError::usage("tutor thresholds belong in the [tutor] section"));
        }
        let mut config: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
        config.session.thresholds = config.tutor;
        config.sim.validate().map_err(CliError::usage)?;
        config.expert.validate(&config.sim)?;
        config.train.validate()?;
        config.tutor.validate()?;
        if config.eval.trials == 0 {
            return Err(CliError::usage("eval.trials must be >= 1"));
        }
        Ok(config)
    }

    /// The configuration as TOML, with thresholds shown only under `[tutor]`.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        if let Some(toml::Value::Table(s)) = table.get_mut("session") {
            s.remove("thresholds");
        }
        toml::to_string(&table).expect("config serializes")
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value,
/// or as a bare string when it does not parse as one.
fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override '{spec}' must look like section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!(
            "override key '{key}' must look like section.key"
        )));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("at least two components");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
