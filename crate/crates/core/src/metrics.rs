//! Aggregation of simulation statistics: per-page latency profiles, the
//! threshold distinguisher, analytic aliasing odds and storage arithmetic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mob::SimStats;
use crate::trace::TraceMeta;

pub use crate::oracle::expected_violations_oracle;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trace carries no probe labels")]
    NoProbeLabels,
    #[error("no probe loads in statistics")]
    NoProbes,
    #[error("probe load on page {0:#x} is not a labelled measurement page")]
    UnknownPage(u64),
    #[error("empty latency profile")]
    EmptyProfile,
    #[error("no loads executed")]
    NoLoads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageLatency {
    pub page: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub aliased: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub per_page: Vec<PageLatency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Pages with mean latency above this are classified as aliased.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
    /// Standardized mean difference between classes; `None` when undefined
    /// (a class is empty or the pooled deviation is zero).
    pub separation: Option<f64>,
    pub n_aliased: usize,
    pub n_clean: usize,
}

/// Groups probe latencies by measured page (population mean and deviation).
pub fn per_page_latency(stats: &SimStats, meta: &TraceMeta) -> Result<LatencyProfile, MetricsError> {
    let labels = meta.labels.as_ref().ok_or(MetricsError::NoProbeLabels)?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for rec in stats.per_load_latency.iter().filter(|r| r.is_probe) {
        let page = labels.page_index(rec.page).ok_or(MetricsError::UnknownPage(rec.page))?;
        groups.entry(page).or_default().push(rec.latency_cycles as f64);
    }
    if groups.is_empty() {
        return Err(MetricsError::NoProbes);
    }
    let per_page = groups
        .into_iter()
        .map(|(page, xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            PageLatency { page, mean, std: var.sqrt(), n, aliased: labels.is_aliased(page) }
        })
        .collect();
    Ok(LatencyProfile { per_page })
}

fn mean_and_ss(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum())
}

/// Best single-threshold classifier of aliased pages from their mean probe
/// latency. Candidate thresholds are every midpoint between adjacent distinct
/// means plus the two trivial classifiers; the most accurate wins, ties going
/// to the lowest threshold.
pub fn classify_aliased(profile: &LatencyProfile) -> Result<DetectionReport, MetricsError> {
    let pages = &profile.per_page;
    if pages.is_empty() {
        return Err(MetricsError::EmptyProfile);
    }
    let aliased: Vec<f64> = pages.iter().filter(|p| p.aliased).map(|p| p.mean).collect();
    let clean: Vec<f64> = pages.iter().filter(|p| !p.aliased).map(|p| p.mean).collect();

    let mut means: Vec<f64> = pages.iter().map(|p| p.mean).collect();
    means.sort_by(f64::total_cmp);
    means.dedup();
    let lo = means[0] - 1.0;
    let hi = means[means.len() - 1] + 1.0;
    let mut thresholds = vec![lo];
    thresholds.extend(means.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(hi);

    let score = |th: f64| {
        let tp = aliased.iter().filter(|&&m| m > th).count();
        let fp = clean.iter().filter(|&&m| m > th).count();
        let correct = tp + (clean.len() - fp);
        (correct, tp, fp)
    };
    let (threshold, (correct, tp, fp)) = thresholds
        .iter()
        .map(|&th| (th, score(th)))
        .fold(None::<(f64, (usize, usize, usize))>, |best, cur| match best {
            Some(b) if b.1 .0 >= cur.1 .0 => Some(b),
            _ => Some(cur),
        })
        .expect("at least two candidate thresholds");

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (ma, ssa) = mean_and_ss(&aliased);
    let (mc, ssc) = mean_and_ss(&clean);
    let dof = (aliased.len() + clean.len()).saturating_sub(2);
    let separation = if aliased.is_empty() || clean.is_empty() || dof == 0 {
        None
    } else {
        let pooled = ((ssa + ssc) / dof as f64).sqrt();
        (pooled > 0.0).then(|| (ma - mc) / pooled)
    };

    Ok(DetectionReport {
        threshold,
        tpr: ratio(tp, aliased.len()),
        fpr: ratio(fp, clean.len()),
        accuracy: ratio(correct, pages.len()),
        separation,
        n_aliased: aliased.len(),
        n_clean: clean.len(),
    })
}

/// Probability that two independent uniform PAs agree on `mask_width` bits.
pub fn analytic_alias_prob(mask_width: u32) -> f64 {
    0.5f64.powi(mask_width as i32)
}

pub fn misspec_rate(stats: &SimStats) -> Result<f64, MetricsError> {
    if stats.total_loads == 0 {
        return Err(MetricsError::NoLoads);
    }
    Ok(stats.misspeculations as f64 / stats.total_loads as f64)
}

pub const PC_TAG_BITS: u64 = 48;
pub const VULN_FLAG_BITS: u64 = 1;
/// Partial-PA field widened from 8 to 12 bits.
pub const PARTIAL_PA_WIDENING_BITS: u64 = 12 - 8;
pub const SAB_ENTRY_OVERHEAD_BITS: u64 = PC_TAG_BITS + VULN_FLAG_BITS + PARTIAL_PA_WIDENING_BITS;

/// Extra SAB storage for tagging, flagging and the wider partial field.
pub fn sab_overhead_bits(entries: u64) -> u64 {
    entries * SAB_ENTRY_OVERHEAD_BITS
}
