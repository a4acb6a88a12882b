//! Per-iteration run metrics, written as one JSON object per line.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agent::PassRecord;
use crate::daemon::DaemonReport;
use crate::error::Result;

/// One node's share of one iteration. Times are simulated cost units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeIterStats {
    pub node: usize,
    pub data_units: u64,
    pub items: u64,
    pub blocks: u64,
    pub t_download: f64,
    pub t_compute: f64,
    pub t_upload: f64,
    pub t_pipeline: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub uploads: u64,
    pub uploads_avoided: u64,
    pub downloads: u64,
    pub writebacks: u64,
    pub messages_sent: u64,
    pub stale_snapshots: u64,
    pub passes: Vec<PassRecord>,
}

/// Measured wall time. Kept apart from the simulated figures, which are
/// deterministic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WallClock {
    pub elapsed_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub model: String,
    pub t_download: f64,
    pub t_compute: f64,
    pub t_upload: f64,
    /// Slowest node's overlapped pipeline time.
    pub t_pipeline: f64,
    pub skipped: bool,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub uploads: u64,
    pub uploads_avoided: u64,
    pub converged: bool,
    pub downloads: u64,
    pub writebacks: u64,
    pub messages: u64,
    pub stale_snapshots: u64,
    /// Bits exchanged for the skip and convergence votes. Paid every
    /// iteration, skipped or not.
    pub vote_bits: u64,
    pub nodes: Vec<NodeIterStats>,
    pub wall: WallClock,
}

impl IterationRecord {
    pub(crate) fn from_nodes(
        iter: usize,
        model: &str,
        nodes: Vec<NodeIterStats>,
        skipped: bool,
        converged: bool,
        wall: WallClock,
    ) -> Self {
        let mut r = IterationRecord {
            iter,
            model: model.to_string(),
            skipped,
            converged,
            vote_bits: 2 * nodes.len() as u64,
            wall,
            ..IterationRecord::default()
        };
        for n in &nodes {
            r.t_download += n.t_download;
            r.t_compute += n.t_compute;
            r.t_upload += n.t_upload;
            r.t_pipeline = r.t_pipeline.max(n.t_pipeline);
            r.cache_hits += n.cache_hits;
            r.cache_misses += n.cache_misses;
            r.uploads += n.uploads;
            r.uploads_avoided += n.uploads_avoided;
            r.downloads += n.downloads;
            r.writebacks += n.writebacks;
            r.messages += n.messages_sent;
            r.stale_snapshots += n.stale_snapshots;
        }
        r.nodes = nodes;
        r
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: String,
    pub model: String,
    pub nodes: usize,
    pub partition_sizes: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub iterations_skipped: usize,
    pub sync_rounds: usize,
    /// Sum over iterations of the slowest node's pipeline time.
    pub t_total: f64,
    pub final_flush_uploads: u64,
    pub daemons: Vec<DaemonReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a RunSummary,
}

impl RunMetrics {
    /// One line per iteration, then a summary line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &SummaryLine { summary: &self.summary })
            .map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// The same metrics with wall-clock fields zeroed.
    pub fn without_wall_clock(&self) -> RunMetrics {
        let mut m = self.clone();
        for r in &mut m.records {
            r.wall = WallClock::default();
        }
        m
    }
}
