//! Evaluation reports: sliced scores serialized as JSON plus a flat CSV for
//! plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::util::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceScore {
    pub slice: String,
    pub score: f32,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub total: usize,
    pub overall: f32,
    /// Disjoint, exhaustive slices; counts sum to `total`.
    pub partition: Vec<SliceScore>,
    /// Non-partition views (overlapping subsets, cumulative curves).
    pub overlays: Vec<SliceScore>,
}

impl EvalReport {
    pub fn partition_counts_sum(&self) -> bool {
        self.partition.iter().map(|s| s.count).sum::<usize>() == self.total
    }

    pub fn slice(&self, name: &str) -> Option<&SliceScore> {
        self.partition
            .iter()
            .chain(self.overlays.iter())
            .find(|s| s.slice == name)
    }

    /// Flat CSV: `series,slice,score,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,slice,score,count\n");
        out.push_str(&format!("overall,all,{},{}\n", self.overall, self.total));
        for s in &self.partition {
            out.push_str(&format!("partition,{},{},{}\n", s.slice, s.score, s.count));
        }
        for s in &self.overlays {
            out.push_str(&format!("overlay,{},{},{}\n", s.slice, s.score, s.count));
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(path, report.to_csv().as_bytes())
}
