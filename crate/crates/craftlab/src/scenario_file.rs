//! Versioned scenario documents. A file holds `schema_version` and a
//! `scenario` table; `.toml` files are read as TOML, everything else as JSON.

use std::path::Path;

use craftlab_core::world::templates::TemplateKind;
use craftlab_core::world::Scenario;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub scenario: Scenario,
}

pub fn read(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |message: String| CliError::Parse { path: path.to_path_buf(), message };
    let file: ScenarioFile = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    };
    if file.schema_version != SCHEMA_VERSION {
        return Err(CliError::SchemaVersion { path: path.to_path_buf(), found: file.schema_version, expected: SCHEMA_VERSION });
    }
    file.scenario.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(file.scenario)
}

pub fn to_json(scenario: &Scenario) -> String {
    let file = ScenarioFile { schema_version: SCHEMA_VERSION, scenario: scenario.clone() };
    serde_json::to_string_pretty(&file).expect("scenarios serialize")
}

/// A built-in template name, or a path relative to `base_dir`.
pub fn resolve(name: &str, base_dir: &Path) -> Result<Scenario> {
    if let Some(kind) = TemplateKind::from_name(name) {
        return Ok(kind.scenario());
    }
    let path = base_dir.join(name);
    if path.is_file() {
        read(&path)
    } else {
        Err(CliError::UnknownScenario(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use craftlab_core::world::templates;

    #[test]
    fn templates_round_trip_through_json() {
        for sc in templates::all() {
            let file: ScenarioFile = serde_json::from_str(&to_json(&sc)).unwrap();
            assert_eq!(file.scenario, sc);
        }
    }

    #[test]
    fn templates_round_trip_through_toml() {
        let sc = templates::left_turn();
        let text = toml::to_string(&ScenarioFile { schema_version: SCHEMA_VERSION, scenario: sc.clone() }).unwrap();
        let file: ScenarioFile = toml::from_str(&text).unwrap();
        assert_eq!(file.scenario, sc);
    }

    #[test]
    fn unknown_names_are_reported() {
        assert!(matches!(resolve("roundabout", Path::new(".")), Err(CliError::UnknownScenario(_))));
    }
}
