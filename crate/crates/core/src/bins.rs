//! Equal-frequency value sub-ranges per variable.
//!
//! Edges are fitted on training trajectories only and then frozen; values
//! outside the training range clamp to the first or last sub-range.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::io::atomic_write;
use crate::trajectory::{ObservationEvent, PatientTrajectory};

pub const DEFAULT_SUBRANGES: usize = 20;

/// A discretised observation: variable id and its 1-based sub-range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteEvent {
    pub variable: u32,
    pub subrange: u16,
}

/// Per-variable quantile edges with the sub-range count `V` they were fitted for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBins {
    pub subranges: usize,
    pub edges: BTreeMap<u32, Vec<f64>>,
}

impl ValueBins {
    /// Fit equal-frequency edges with `subranges` bins per variable.
    ///
    /// The edge between ranks `r-1` and `r` (with `r = i*n/V`) is the midpoint
    /// of the two sorted values. Edges that would split identical values are
    /// dropped, so variables with fewer than `V` distinct values get fewer bins.
    pub fn fit<'a>(
        trajectories: impl IntoIterator<Item = &'a PatientTrajectory>,
        subranges: usize,
    ) -> Result<Self> {
        if subranges == 0 {
            return Err(DacError::validation("number of sub-ranges must be at least 1"));
        }
        let mut values: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for traj in trajectories {
            for step in &traj.steps {
                for e in &step.events {
                    values.entry(e.variable).or_default().push(e.value);
                }
            }
        }
        let edges = values
            .into_iter()
            .map(|(var, mut vals)| {
                vals.sort_by(f64::total_cmp);
                (var, quantile_edges(&vals, subranges))
            })
            .collect();
        Ok(Self { subranges, edges })
    }

    pub fn num_variables(&self) -> usize {
        self.edges.keys().next_back().map_or(0, |&v| v as usize + 1)
    }

    pub fn discretize_value(&self, variable: u32, value: f64) -> Result<u16> {
        let edges = self
            .edges
            .get(&variable)
            .ok_or(DacError::UnknownVariable(variable))?;
        let above = edges.partition_point(|&edge| edge <= value);
        Ok(1 + above as u16)
    }

    pub fn discretize_event(&self, event: &ObservationEvent) -> Result<DiscreteEvent> {
        Ok(DiscreteEvent {
            variable: event.variable,
            subrange: self.discretize_value(event.variable, event.value)?,
        })
    }

    /// Discretise every step of a trajectory.
    pub fn discretize(&self, traj: &PatientTrajectory) -> Result<Vec<Vec<DiscreteEvent>>> {
        traj.steps
            .iter()
            .map(|s| s.events.iter().map(|e| self.discretize_event(e)).collect())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn quantile_edges(sorted: &[f64], subranges: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(subranges.saturating_sub(1));
    for i in 1..subranges {
        let r = i * n / subranges;
        if r == 0 || r >= n {
            continue;
        }
        let (lo, hi) = (sorted[r - 1], sorted[r]);
        if lo == hi {
            continue;
        }
        let edge = 0.5 * (lo + hi);
        if edges.last().map_or(true, |&last| edge > last) {
            edges.push(edge);
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionTriple;
    use crate::trajectory::Step;
    use proptest::prelude::*;

    fn cohort(var: u32, values: &[f64]) -> Vec<PatientTrajectory> {
        values
            .iter()
            .enumerate()
            .map(|(i, &value)| PatientTrajectory {
                patient_id: i as u64,
                outcome: 0,
                steps: vec![Step {
                    events: vec![ObservationEvent { variable: var, value }],
                    action: ActionTriple::new(1, 1, 1).unwrap(),
                }],
            })
            .collect()
    }

    #[test]
    fn quartiles_of_one_to_hundred() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let bins = ValueBins::fit(&cohort(0, &values), 4).unwrap();
        assert_eq!(bins.edges[&0], vec![25.5, 50.5, 75.5]);
        assert_eq!(bins.discretize_value(0, 60.0).unwrap(), 3);
        assert_eq!(bins.discretize_value(0, -10.0).unwrap(), 1);
        assert_eq!(bins.discretize_value(0, 1e9).unwrap(), 4);
        assert_eq!(bins.discretize_value(0, 25.5).unwrap(), 2);
    }

    #[test]
    fn constant_variable_has_one_bin() {
        let bins = ValueBins::fit(&cohort(3, &[2.0; 50]), 20).unwrap();
        assert!(bins.edges[&3].is_empty());
        for v in [-5.0, 2.0, 9.0] {
            assert_eq!(bins.discretize_value(3, v).unwrap(), 1);
        }
    }

    #[test]
    fn unknown_variable_is_rejected() {
        let bins = ValueBins::fit(&cohort(0, &[1.0, 2.0]), 2).unwrap();
        assert!(matches!(
            bins.discretize_value(7, 1.0),
            Err(DacError::UnknownVariable(7))
        ));
    }

    proptest! {
        #[test]
        fn equal_frequency_when_divisible(
            v in 1usize..8,
            per_bin in 1usize..30,
            scale in 0.1f64..100.0,
            offset in -50.0f64..50.0,
        ) {
            let vals: Vec<f64> = (0..v * per_bin)
                .map(|i| offset + scale * ((i * 7919) % (v * per_bin)) as f64)
                .collect();
            let bins = ValueBins::fit(&cohort(0, &vals), v).unwrap();
            let mut counts = vec![0usize; v];
            for &x in &vals {
                let s = bins.discretize_value(0, x).unwrap() as usize;
                prop_assert!((1..=v).contains(&s));
                counts[s - 1] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "counts {:?}", counts);
        }
    }
}
