//! One scenario run per parameter value, aggregated into `sweep.csv`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::artifacts::{write_root_json, SCHEMA_VERSION};
use crate::config::{self, Overrides};
use crate::run::{combine_exit, run_scenario, Manifest};
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub dir: String,
    pub exit_code: u8,
    pub error: Option<String>,
    #[serde(skip)]
    pub manifest: Option<Manifest>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub param: String,
    pub exit_code: u8,
    pub rows: Vec<SweepRow>,
}

/// Splits a comma-separated list; each entry is read as a TOML scalar, else as a string.
pub fn parse_values(list: &str) -> Result<Vec<toml::Value>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let doc = format!("v = {s}");
            match doc.parse::<toml::Table>() {
                Ok(mut t) => Ok(t.remove("v").unwrap_or_else(|| toml::Value::String(s.into()))),
                Err(_) => Ok(toml::Value::String(s.into())),
            }
        })
        .collect()
}

fn label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(i: usize, param: &str, value: &str) -> String {
    let clean: String = format!("{param}={value}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=.-_".contains(c) { c } else { '_' })
        .collect();
    format!("{i:02}_{clean}")
}

pub fn run_sweep(
    text: &str,
    origin: &str,
    param: &str,
    values: &[toml::Value],
    out: &Path,
    ov: &Overrides,
) -> Result<SweepSummary, CliError> {
    let base = config::parse_table(text, origin)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let value = label(v);
        let dir = dir_name(i, param, &value);
        let mut table = base.clone();
        let prepared = config::set_param(&mut table, param, v.clone()).and_then(|()| {
            let body = toml::to_string(&table).map_err(|e| CliError::Other(e.to_string()))?;
            let cfg = config::from_text(&body, &format!("{origin} [{param} = {value}]"), ov)?;
            Ok((cfg, body))
        });
        let row = match prepared.and_then(|(cfg, body)| run_scenario(&cfg, &body, &out.join(&dir), ov)) {
            Ok(m) => SweepRow {
                value,
                dir,
                exit_code: m.exit_code,
                error: None,
                manifest: Some(m),
            },
            Err(e @ CliError::Validation(_)) => SweepRow {
                value,
                dir,
                exit_code: 2,
                error: Some(e.message()),
                manifest: None,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let summary = SweepSummary {
        schema_version: SCHEMA_VERSION,
        param: param.to_string(),
        exit_code: combine_exit(rows.iter().map(|r| r.exit_code)),
        rows,
    };
    write_csv(out, &summary)?;
    write_root_json(out, "sweep.json", &summary)?;
    Ok(summary)
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

/// One line per (value, task) with the union of scalar task metrics as columns.
fn write_csv(out: &Path, summary: &SweepSummary) -> Result<(), CliError> {
    let mut keys = BTreeSet::new();
    for r in &summary.rows {
        for t in r.manifest.iter().flat_map(|m| &m.tasks) {
            if let Value::Object(map) = &t.metrics {
                keys.extend(map.iter().filter(|(_, v)| scalar(v).is_some()).map(|(k, _)| k.clone()));
            }
        }
    }
    let mut s = String::from("value,dir,exit_code,task,kind,status");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    for r in &summary.rows {
        let Some(m) = &r.manifest else {
            s.push_str(&format!("{},{},{},,,invalid{}\n", r.value, r.dir, r.exit_code, ",".repeat(keys.len())));
            continue;
        };
        for t in &m.tasks {
            s.push_str(&format!("{},{},{},{},{},{}", r.value, r.dir, r.exit_code, t.index, t.kind, t.status.label()));
            for k in &keys {
                s.push(',');
                if let Some(v) = t.metrics.get(k).and_then(scalar) {
                    s.push_str(&v);
                }
            }
            s.push('\n');
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let path = out.join("sweep.csv");
    std::fs::write(&path, s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
