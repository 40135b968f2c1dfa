//! CSV/JSON reports laid out like a method-comparison table: one block of
//! per-organ rows plus a mean row per mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{attach_p_values, Evaluation};

pub const CSV_HEADER: &str = "mode,organ,n,mean_dsc,std_dsc,p_vs_baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub evaluation: Evaluation,
}

fn fmt_p(p: Option<f64>) -> String {
    p.map(|p| p.to_string()).unwrap_or_default()
}

/// CSV rows; `mean` is the mean of the per-organ means.
pub fn to_csv(reports: &[ModeReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in &r.evaluation.organs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.mode,
                row.organ,
                row.n,
                row.mean,
                row.std,
                fmt_p(row.p_value)
            ));
        }
        let o = &r.evaluation.overall;
        out.push_str(&format!(
            "{},mean,{},{},{},{}\n",
            r.mode,
            o.n,
            o.mean,
            o.std,
            fmt_p(o.p_value)
        ));
    }
    out
}

pub fn to_json(reports: &[ModeReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)? + "\n")
}

/// Attach p-values of every report against the one named `baseline`.
pub fn compare(mut reports: Vec<ModeReport>, baseline: &str) -> Result<Vec<ModeReport>> {
    let base = reports
        .iter()
        .find(|r| r.mode == baseline)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("baseline run {baseline:?} not among reports")))?;
    for r in &mut reports {
        if r.mode != baseline {
            attach_p_values(&mut r.evaluation, &base.evaluation)?;
        }
    }
    Ok(reports)
}
