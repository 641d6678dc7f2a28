//! Patient trajectories and the line-delimited trajectory file.
//!
//! A trajectory file starts with one header object naming the format and
//! version (plus optional provenance), followed by one JSON object per
//! patient:
//!
//! ```text
//! {"format":"dac-trajectories","version":1,"run_id":"...","config_hash":"..."}
//! {"patient_id":7,"outcome":1,"steps":[{"events":[{"var":0,"value":0.31}],"action":[3,3,4]}]}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::ActionTriple;
use crate::error::{DacError, Result};
use crate::io::atomic_write;

pub const TRAJECTORY_FORMAT: &str = "dac-trajectories";
pub const TRAJECTORY_VERSION: u32 = 1;

/// A single observed measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    #[serde(rename = "var")]
    pub variable: u32,
    pub value: f64,
}

/// One decision step: the events observed in the step and the action taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub events: Vec<ObservationEvent>,
    pub action: ActionTriple,
}

/// An ICU stay: ordered steps and the binary outcome (1 = mortality).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub patient_id: u64,
    pub outcome: u8,
    pub steps: Vec<Step>,
}

impl PatientTrajectory {
    pub fn new(patient_id: u64, outcome: u8, steps: Vec<Step>) -> Result<Self> {
        let traj = Self {
            patient_id,
            outcome,
            steps,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.patient_id;
        if self.outcome > 1 {
            return Err(DacError::validation(format!(
                "patient {id}: outcome must be 0 or 1, got {}",
                self.outcome
            )));
        }
        if self.steps.is_empty() {
            return Err(DacError::validation(format!("patient {id}: trajectory has no steps")));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.events.is_empty() {
                return Err(DacError::validation(format!(
                    "patient {id}: step {} has no observation events",
                    t + 1
                )));
            }
            if let Some(e) = step.events.iter().find(|e| !e.value.is_finite()) {
                return Err(DacError::validation(format!(
                    "patient {id}: step {} variable {} has non-finite value",
                    t + 1,
                    e.variable
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn died(&self) -> bool {
        self.outcome == 1
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionTriple> + '_ {
        self.steps.iter().map(|s| s.action)
    }
}

/// Provenance carried in the header line of every data file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl FileHeader {
    pub fn trajectories(run_id: Option<String>, config_hash: Option<String>) -> Self {
        Self {
            format: TRAJECTORY_FORMAT.to_string(),
            version: TRAJECTORY_VERSION,
            run_id,
            config_hash,
        }
    }
}

pub fn encode_trajectories(header: &FileHeader, trajs: &[PatientTrajectory]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, header)?;
    buf.push(b'\n');
    for traj in trajs {
        serde_json::to_writer(&mut buf, traj)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_trajectories(
    path: &Path,
    header: &FileHeader,
    trajs: &[PatientTrajectory],
) -> Result<()> {
    atomic_write(path, &encode_trajectories(header, trajs)?)
}

pub fn read_trajectories(path: &Path) -> Result<(FileHeader, Vec<PatientTrajectory>)> {
    let file = std::fs::File::open(path)?;
    parse_trajectories(BufReader::new(file), &path.display().to_string())
}

pub fn parse_trajectories(
    reader: impl BufRead,
    source: &str,
) -> Result<(FileHeader, Vec<PatientTrajectory>)> {
    let bad = |reason: String| DacError::Format {
        path: source.to_string(),
        reason,
    };
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let header: FileHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != TRAJECTORY_FORMAT {
        return Err(bad(format!("unexpected format {:?}", header.format)));
    }
    if header.version != TRAJECTORY_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut trajs = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: PatientTrajectory =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        traj.validate()?;
        trajs.push(traj);
    }
    Ok((header, trajs))
}

/// Write a header line followed by one JSON record per item.
pub fn write_json_lines<T: Serialize>(
    path: &Path,
    header: &impl Serialize,
    records: &[T],
) -> Result<()> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, header)?;
    buf.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        writeln!(buf)?;
    }
    atomic_write(path, &buf)
}
