use std::fmt::Write as _;

use clap::ValueEnum;
use serde::Serialize;
use streamcausal::persist::StateFile;
use streamcausal::{Decision, OfflineFit, Result, Spending};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

pub fn decision_name(d: Decision) -> &'static str {
    match d {
        Decision::Continue => "CONTINUE",
        Decision::Reject => "REJECT",
        Decision::CompleteAccept => "COMPLETE_ACCEPT",
    }
}

fn spending_name(s: Spending) -> &'static str {
    match s {
        Spending::Pocock => "pocock",
        Spending::ObrienFleming => "obrien_fleming",
    }
}

#[derive(Debug, Serialize)]
pub struct MonitorSummary {
    pub total_analyses: usize,
    pub alpha: f64,
    pub spending: &'static str,
    pub null_delta: f64,
    pub analyses_done: usize,
    pub z_history: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub decision: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub family: String,
    pub outcome: String,
    pub p: usize,
    pub delta: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    pub n_total: u64,
    pub batch_count: u64,
    /// Condition number of the cumulative sensitivity; absent for offline fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorSummary>,
}

impl Report {
    pub fn online(file: &StateFile) -> Result<Report> {
        let s = &file.state;
        let est = s.ate_estimate()?;
        let (lo, hi) = est.ci95();
        let spec = s.spec();
        Ok(Report {
            family: spec.family.to_string(),
            outcome: spec.outcome.to_string(),
            p: spec.p,
            delta: est.delta,
            se: est.se,
            ci95: [lo, hi],
            n_total: s.n_total(),
            batch_count: s.batch_count(),
            condition_number: Some(s.condition_number()),
            monitor: file.monitor.as_ref().map(|m| MonitorSummary {
                total_analyses: m.config.total_analyses,
                alpha: m.config.alpha,
                spending: spending_name(m.config.spending),
                null_delta: m.config.null_delta,
                analyses_done: m.analyses_done,
                z_history: m.z_history.clone(),
                boundaries: m.boundaries.clone(),
                decision: decision_name(m.decision),
            }),
        })
    }

    pub fn offline(fit: &OfflineFit, batch_count: u64) -> Result<Report> {
        let est = fit.ate_estimate()?;
        let (lo, hi) = est.ci95();
        let spec = fit.theta.spec();
        Ok(Report {
            family: spec.family.to_string(),
            outcome: spec.outcome.to_string(),
            p: spec.p,
            delta: est.delta,
            se: est.se,
            ci95: [lo, hi],
            n_total: fit.n_total,
            batch_count,
            condition_number: None,
            monitor: None,
        })
    }

    pub fn render(&self, format: Format) -> Result<String> {
        Ok(match format {
            Format::Json => serde_json::to_string_pretty(self)? + "\n",
            Format::Csv => self.csv()?,
            Format::Text => self.text(),
        })
    }

    fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "family",
            "outcome",
            "p",
            "delta",
            "se",
            "ci95_lower",
            "ci95_upper",
            "n_total",
            "batch_count",
            "condition_number",
            "decision",
        ])?;
        w.write_record([
            self.family.clone(),
            self.outcome.clone(),
            self.p.to_string(),
            self.delta.to_string(),
            self.se.to_string(),
            self.ci95[0].to_string(),
            self.ci95[1].to_string(),
            self.n_total.to_string(),
            self.batch_count.to_string(),
            self.condition_number
                .map(|c| c.to_string())
                .unwrap_or_default(),
            self.monitor
                .as_ref()
                .map(|m| m.decision.to_string())
                .unwrap_or_default(),
        ])?;
        let bytes = w
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "family      {}", self.family);
        let _ = writeln!(out, "outcome     {}", self.outcome);
        let _ = writeln!(out, "covariates  {}", self.p - 1);
        let _ = writeln!(out, "delta       {:.6}", self.delta);
        let _ = writeln!(out, "se          {:.6}", self.se);
        let _ = writeln!(
            out,
            "95% CI      [{:.6}, {:.6}]",
            self.ci95[0], self.ci95[1]
        );
        let _ = writeln!(out, "N           {}", self.n_total);
        let _ = writeln!(out, "batches     {}", self.batch_count);
        if let Some(c) = self.condition_number {
            let _ = writeln!(out, "condition   {c:.3e}");
        }
        if let Some(m) = &self.monitor {
            let _ = writeln!(
                out,
                "monitor     {} of {} analyses, {} spending at alpha {}, null {}",
                m.analyses_done, m.total_analyses, m.spending, m.alpha, m.null_delta
            );
            if let (Some(z), Some(b)) = (
                m.z_history.last(),
                m.boundaries.get(m.analyses_done.wrapping_sub(1)),
            ) {
                let _ = writeln!(out, "last Z      {z:.6} (boundary {b:.6})");
            }
            let _ = writeln!(out, "decision    {}", m.decision);
        }
        out
    }
}
