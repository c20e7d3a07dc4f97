//! Ablation drivers: each axis trains a fixed list of variants on the same
//! data with the same seed and tabulates their test metrics.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{apply_variant, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalTable;
use crate::parallel::Exec;
use crate::train::{train, TaskData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Summation, concatenation, MLP and QSM synthesis.
    Synthesis,
    /// The V-to-S / S-to-V grid.
    Gdma,
    /// Bidirectional alignment without and with the gate.
    Gate,
    /// Soft, hard and average aggregation for the regional and fused
    /// branches.
    Aggregator,
    /// Global, regional, both.
    Branch,
    /// Baseline, +SSP, +GDMA.
    Ssp,
    /// KAP / CAP / LLM / DSF toggles of the split stage.
    Split,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::Synthesis,
        Axis::Gdma,
        Axis::Gate,
        Axis::Aggregator,
        Axis::Branch,
        Axis::Ssp,
        Axis::Split,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Synthesis => "synthesis",
            Axis::Gdma => "gdma",
            Axis::Gate => "gate",
            Axis::Aggregator => "aggregator",
            Axis::Branch => "branch",
            Axis::Ssp => "ssp",
            Axis::Split => "split",
        }
    }

    /// Variant names in table order.
    pub fn rows(self) -> &'static [&'static str] {
        match self {
            Axis::Synthesis => &["sum", "concat", "MLP", "QSM"],
            Axis::Gdma => &["none", "V-to-S", "S-to-V", "both"],
            Axis::Gate => &["w/o Gate", "w/ Gate"],
            Axis::Aggregator => &["R/soft", "R/hard", "R/average", "G+R/soft", "G+R/hard", "G+R/average"],
            Axis::Branch => &["G", "R", "G+R"],
            Axis::Ssp => &["baseline", "+SSP", "+GDMA"],
            Axis::Split => &["KAP", "CAP", "w/o LLM", "w/o DSF", "KAP+CAP"],
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation axis {s:?}")))
    }
}

/// Row configurations of `axis` applied to `base`.
pub fn axis_configs(base: &ModelConfig, axis: Axis) -> Result<Vec<(String, ModelConfig)>> {
    let base = match axis {
        // The gate ablation compares bidirectional alignment.
        Axis::Gate => apply_variant(base, "both")?,
        _ => base.clone(),
    };
    axis.rows()
        .iter()
        .map(|r| apply_variant(&base, r).map(|c| (r.to_string(), c)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: ModelConfig,
    pub metrics: EvalTable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mAP,CP,CR,CF1,OP,OR,OF1,top3_CF1,top3_OF1\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.variant, m.map, m.all.cp, m.all.cr, m.all.cf1, m.all.op, m.all.or, m.all.of1, m.top3.cf1, m.top3.of1
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ablation: {}\n", self.axis.name());
        let _ = writeln!(s, "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6}", "variant", "mAP", "CF1", "OF1", "CF1@3", "OF1@3");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<12} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
                r.variant,
                100.0 * m.map,
                100.0 * m.all.cf1,
                100.0 * m.all.of1,
                100.0 * m.top3.cf1,
                100.0 * m.top3.of1
            );
        }
        s
    }
}

/// Trains every row of `axis` with the base seed and data.
pub fn run_ablation(
    base: &ModelConfig,
    tc: &TrainConfig,
    data: &TaskData,
    axis: Axis,
    exec: Exec,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (variant, config) in axis_configs(base, axis)? {
        log::info!("ablation {}: {variant}", axis.name());
        let out = train(&config, tc, data, exec)?;
        rows.push(AblationRow {
            variant,
            config,
            metrics: out.final_metrics,
        });
    }
    Ok(AblationTable { axis, rows })
}
