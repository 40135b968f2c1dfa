//! Dice overlap, per-organ aggregation and paired significance testing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Segmenter;
use crate::cotrain::{LabeledCase, PlaneModelBundle};
use crate::error::{Error, Result};
use crate::fusion::predict_volume;
use crate::volume::{LabelMask, WindowSpec};

/// Dice of the organ-`organ` voxel sets: `2|Z∩Y| / (|Z|+|Y|)`, 1.0 when
/// both sets are empty.
pub fn dsc(prediction: &LabelMask, truth: &LabelMask, organ: u8) -> Result<f64> {
    if prediction.dims() != truth.dims() {
        return Err(Error::DimsMismatch(format!(
            "prediction {} vs truth {}",
            prediction.dims(),
            truth.dims()
        )));
    }
    let (mut z, mut y, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in prediction.labels().iter().zip(truth.labels()) {
        let (pz, ty) = (p == organ, t == organ);
        z += pz as usize;
        y += ty as usize;
        both += (pz && ty) as usize;
    }
    Ok(if z + y == 0 {
        1.0
    } else {
        2.0 * both as f64 / (z + y) as f64
    })
}

/// Per-organ Dice for one case (index `k - 1` holds organ `k`).
pub fn case_dsc(prediction: &LabelMask, truth: &LabelMask) -> Result<Vec<f64>> {
    (1..=truth.num_classes())
        .map(|k| dsc(prediction, truth, k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub dsc: Vec<f64>,
}

impl CaseScores {
    pub fn mean(&self) -> f64 {
        mean(&self.dsc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganReport {
    pub organ: u8,
    pub n: usize,
    pub per_case: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub p_value: Option<f64>,
}

/// Per-organ rows plus the summary row. The summary mean is the mean of the
/// per-organ means; its std and p-value are over per-case organ averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cases: Vec<CaseScores>,
    pub organs: Vec<OrganReport>,
    pub overall: OrganReport,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn row(organ: u8, per_case: Vec<f64>) -> OrganReport {
    OrganReport {
        organ,
        n: per_case.len(),
        mean: mean(&per_case),
        std: sample_std(&per_case),
        per_case,
        p_value: None,
    }
}

/// Aggregate per-case scores (fixed case order) into report rows.
pub fn aggregate(cases: &[CaseScores]) -> Result<Evaluation> {
    let k = cases.first().map_or(0, |c| c.dsc.len());
    if cases.iter().any(|c| c.dsc.len() != k) {
        return Err(Error::ClassMismatch("cases report different organ counts".into()));
    }
    let organs: Vec<OrganReport> = (0..k)
        .map(|i| row(i as u8 + 1, cases.iter().map(|c| c.dsc[i]).collect()))
        .collect();
    let mut overall = row(0, cases.iter().map(CaseScores::mean).collect());
    overall.mean = mean(&organs.iter().map(|o| o.mean).collect::<Vec<_>>());
    Ok(Evaluation {
        cases: cases.to_vec(),
        organs,
        overall,
    })
}

/// Fused inference on every test case, scored per organ.
pub fn evaluate<M: Segmenter>(
    bundle: &PlaneModelBundle<M>,
    test: &[LabeledCase],
    windows: &[WindowSpec],
) -> Result<Evaluation> {
    let cases = test
        .par_iter()
        .map(|case| {
            if case.mask.num_classes() != bundle.num_classes() {
                return Err(Error::ClassMismatch(format!(
                    "case {} has K={}, model K={}",
                    case.id,
                    case.mask.num_classes(),
                    bundle.num_classes()
                )));
            }
            let (fused, _) = predict_volume(bundle, &case.volume, windows, false)?;
            Ok(CaseScores {
                case_id: case.id.clone(),
                dsc: case_dsc(&fused.labels, &case.mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&cases)
}

/// Fill in p-values of `eval` against `baseline` (paired by case order).
/// Rows with fewer than five pairs keep `None`.
pub fn attach_p_values(eval: &mut Evaluation, baseline: &Evaluation) -> Result<()> {
    if eval.cases.len() != baseline.cases.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pair {} cases with {} baseline cases",
            eval.cases.len(),
            baseline.cases.len()
        )));
    }
    for (a, b) in eval.cases.iter().zip(&baseline.cases) {
        if a.case_id != b.case_id {
            return Err(Error::InvalidArgument(format!(
                "case order differs: {} vs {}",
                a.case_id, b.case_id
            )));
        }
    }
    let enough = eval.cases.len() >= MIN_PAIRS;
    for (row, base) in eval.organs.iter_mut().zip(&baseline.organs) {
        row.p_value = if enough {
            Some(paired_significance(&base.per_case, &row.per_case)?)
        } else {
            None
        };
    }
    eval.overall.p_value = if enough {
        Some(paired_significance(&baseline.overall.per_case, &eval.overall.per_case)?)
    } else {
        None
    };
    Ok(())
}

pub const MIN_PAIRS: usize = 5;
/// Below this many non-zero differences the null distribution is enumerated.
pub const EXACT_BELOW: usize = 10;
/// Absolute differences equal to this relative precision count as ties.
const TIE_RELATIVE: f64 = 1e-9;

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
///
/// Zero differences are dropped. Tied |differences| get midranks. With
/// fewer than ten remaining pairs the null distribution of the positive rank
/// sum is enumerated exactly; otherwise the tie-corrected normal
/// approximation without continuity correction is used.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_PAIRS} pairs, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in paired lists".into()));
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = scale * TIE_RELATIVE;
    let mut diffs: Vec<f64> = b
        .iter()
        .zip(a)
        .map(|(x, y)| x - y)
        .filter(|d| d.abs() > tol)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = diffs.len();

    // midranks over runs of |d| equal within tol
    let mut ranks = vec![0.0f64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && diffs[j].abs() - diffs[i].abs() <= tol {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        ranks[i..j].fill(midrank);
        tie_sizes.push(j - i);
        i = j;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    if n < EXACT_BELOW {
        return Ok(exact_p(&ranks, w_plus));
    }
    let nf = n as f64;
    let expected = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus - expected) / var.sqrt();
    let p = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(p.min(1.0))
}

/// Exact two-sided p: enumerate all sign assignments of the (mid)ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // doubled ranks are integers even with midranks
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}
