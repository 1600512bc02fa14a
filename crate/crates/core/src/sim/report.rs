//! CSV and JSON writers for simulation outputs.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::model::Family;
use crate::sim::scenario::{MetricsTable, Mode, SequentialTable, TrajectoryPoint};

/// One CSV row per family and estimator mode, across all tables.
pub fn write_metrics_csv<W: Write>(tables: &[MetricsTable], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for table in tables {
        for row in &table.rows {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format estimate trajectories (replication, family, mode, batch, ...).
pub fn write_trajectory_csv<W: Write>(
    points: &[(usize, &[TrajectoryPoint])],
    out: W,
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Row {
        scenario: usize,
        family: Family,
        mode: Mode,
        batch: u64,
        n_total: u64,
        estimate: f64,
        se: f64,
    }
    let mut w = csv::Writer::from_writer(out);
    for (scenario, pts) in points {
        for p in pts.iter() {
            w.serialize(Row {
                scenario: *scenario,
                family: p.family,
                mode: p.mode,
                batch: p.batch,
                n_total: p.n_total,
                estimate: p.estimate,
                se: p.se,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejection_csv<W: Write>(table: &SequentialTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}
