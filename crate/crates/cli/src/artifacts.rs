//! CSV and JSON writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rdcontrol::evolution::TrajectoryRecord;
use rdcontrol::spectral::SampleGrid;
use rdcontrol::ControlSchedule;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Writes files into one task directory and remembers their names.
pub struct ArtifactDir {
    pub dir: PathBuf,
    pub files: Vec<String>,
    prefix: String,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl ArtifactDir {
    pub fn create(root: &Path, name: &str) -> Result<Self, CliError> {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Self {
            dir,
            files: Vec::new(),
            prefix: name.to_string(),
        })
    }

    pub fn write_text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| io(&path, e))?;
        self.files.push(format!("{}/{name}", self.prefix));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        self.write_text(name, &body)
    }

    /// `time, min_0.., l2_0..` per stored state.
    pub fn trajectory(&mut self, rec: &TrajectoryRecord, grid_points: usize) -> Result<(), CliError> {
        let Some(first) = rec.states.first() else {
            return self.write_text("trajectory.csv", "time\n");
        };
        let n = first.components();
        let grid = SampleGrid::new(grid_points.max(4 * first.modes()), first.modes());
        let mins = rec.minima(&grid);
        let mut s = String::from("time");
        for i in 0..n {
            write!(s, ",min_{i}").unwrap();
        }
        for i in 0..n {
            write!(s, ",l2_{i}").unwrap();
        }
        s.push('\n');
        for ((t, st), m) in rec.times.iter().zip(&rec.states).zip(&mins) {
            write!(s, "{t:.10e}").unwrap();
            for v in m {
                write!(s, ",{v:.10e}").unwrap();
            }
            for v in st.component_l2_norms() {
                write!(s, ",{v:.10e}").unwrap();
            }
            s.push('\n');
        }
        self.write_text("trajectory.csv", &s)
    }

    /// `time, channel, mode, value` at every control knot.
    pub fn control(&mut self, schedule: &ControlSchedule) -> Result<(), CliError> {
        let mut s = String::from("time,channel,mode,value\n");
        for phase in &schedule.phases {
            for (t, c, q, v) in phase.csv_rows() {
                writeln!(s, "{t:.10e},{c},{q},{v:.10e}").unwrap();
            }
        }
        self.write_text("control.csv", &s)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write_text(name, &s)
    }
}

pub fn write_root_json<T: Serialize>(root: &Path, name: &str, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    let path = root.join(name);
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&path, body).map_err(|e| io(&path, e))
}

pub fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}
