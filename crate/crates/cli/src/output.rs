//! CSV and manifest writers. Every float is written with 17 significant
//! digits so that values round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fimsel::estimate::{MixRow, SweepReport};
use fimsel::fim::FimState;
use fimsel::{JointSelection, ScenarioPools, SensorType};
use serde::Serialize;

use crate::CliError;

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    let csv_err = |e: csv::Error| CliError::io(path, io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row of `selection.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub step: usize,
    pub atom_id: usize,
    pub agent_id: String,
    pub sensor_type: SensorType,
    pub time_s: f64,
    pub marginal_gain: f64,
    /// Criterion value of rows `1..=step` together, relative to the prior.
    pub cumulative_f: f64,
}

pub fn selection_rows(selection: &JointSelection, pools: &ScenarioPools) -> Result<Vec<SelectionRow>, CliError> {
    let mut state = FimState::new(&pools.q0)?;
    let mut rows = Vec::new();
    for (res, pool) in selection.per_agent.iter().zip(&pools.pools) {
        for (id, gain) in res.chosen.iter().zip(&res.gains) {
            let atom = pool.get(*id).expect("selection refers to its own pool");
            state.push(atom)?;
            let spec = pools.spec(*id);
            rows.push(SelectionRow {
                step: rows.len() + 1,
                atom_id: id.0,
                agent_id: res.agent_id.clone(),
                sensor_type: spec.sensor_type(),
                time_s: spec.time,
                marginal_gain: *gain,
                cumulative_f: state.value(),
            });
        }
    }
    Ok(rows)
}

pub fn write_selection(path: &Path, rows: &[SelectionRow]) -> Result<(), CliError> {
    write_rows(
        path,
        &["step", "atom_id", "agent_id", "sensor_type", "time_s", "marginal_gain", "cumulative_f"],
        rows.iter().map(|r| {
            [
                r.step.to_string(),
                r.atom_id.to_string(),
                r.agent_id.clone(),
                r.sensor_type.to_string(),
                float(r.time_s),
                float(r.marginal_gain),
                float(r.cumulative_f),
            ]
        }),
    )
}

pub fn write_error_curve(path: &Path, report: &SweepReport) -> Result<(), CliError> {
    let rows = report.curves.iter().flat_map(|c| {
        c.budgets.iter().enumerate().map(move |(i, b)| {
            [
                c.selector.to_string(),
                b.to_string(),
                c.trials.to_string(),
                float(c.rmse_pos[i]),
                float(c.weighted_err[i]),
                c.nonconverged[i].to_string(),
            ]
        })
    });
    write_rows(path, &["selector", "budget", "trials", "rmse_pos_m", "weighted_err", "nonconverged"], rows)
}

/// Writes mix rows, restricted to sensor types that occur in the pools.
pub fn write_mix(path: &Path, mix: &[MixRow], pools: &ScenarioPools) -> Result<(), CliError> {
    let present: Vec<SensorType> = SensorType::ALL
        .into_iter()
        .filter(|st| pools.pools.iter().any(|p| p.atoms().iter().any(|a| a.source() == Some(*st))))
        .collect();
    let rows = mix
        .iter()
        .filter(|m| present.contains(&m.sensor_type))
        .map(|m| [m.selector.to_string(), m.budget.to_string(), m.sensor_type.to_string(), m.count.to_string()]);
    write_rows(path, &["selector", "budget", "sensor_type", "count"], rows)
}

/// Every candidate measurement with the agent position and which selections
/// picked it. `selections` maps a column suffix to a selection.
pub fn write_path(path: &Path, pools: &ScenarioPools, selections: &[(&str, &JointSelection)]) -> Result<(), CliError> {
    let mut header = vec!["t".to_owned(), "agent_id".into(), "agent_x".into(), "agent_y".into(), "agent_z".into()];
    header.push("sensor_type".into());
    header.extend(selections.iter().map(|(name, _)| format!("selected_{name}")));
    let chosen: Vec<Vec<usize>> = selections
        .iter()
        .map(|(_, s)| {
            let mut ids: Vec<usize> = s.chosen().map(|id| id.0).collect();
            ids.sort_unstable();
            ids
        })
        .collect();

    let mut rows = Vec::new();
    for pool in &pools.pools {
        let mut atoms: Vec<_> = pool.atoms().iter().map(|a| a.id()).collect();
        atoms.sort_unstable();
        for id in atoms {
            let spec = pools.spec(id);
            let pos = spec.sensor.path.position(spec.time);
            let mut row = vec![
                float(spec.time),
                pool.agent_id.clone(),
                float(pos.x),
                float(pos.y),
                float(pos.z),
                spec.sensor_type().to_string(),
            ];
            row.extend(chosen.iter().map(|c| u8::from(c.binary_search(&id.0).is_ok()).to_string()));
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(path, &header, rows)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: &'static str,
    pub wall_clock_s: f64,
    pub timings_s: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.0, -0.0, 1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.1 + 0.2] {
            let s = float(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(float(1.5), "1.5000000000000000e0");
    }

    #[test]
    fn csv_uses_lf_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.csv");
        write_rows(&path, &["a", "b"], [["1".to_owned(), "x,y".to_owned()]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,\"x,y\"\n");
    }
}
