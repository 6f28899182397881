//! Command implementations behind the `mobsim` binary: trace generation,
//! model runs with CSV/JSON output, and cross-model comparison.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::address::AddressSpace;
use crate::harness::{gen_benign_trace, gen_spoiler_trace, gen_stress_trace, BenignKind, HarnessError, SpoilerParams};
use crate::metrics::{classify_aliased, misspec_rate, per_page_latency, DetectionReport, LatencyProfile, MetricsError};
use crate::mob::{run_trace, Latencies, MobError, Model, SimConfig, SimStats};
use crate::trace::{read_trace, write_trace, Trace, TraceError};

/// Accuracy margin above M1 within which M3 counts as indistinguishable.
pub const INDISTINGUISHABLE_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: malformed summary: {source}")]
    Summary { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Sim(#[from] MobError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Trace { .. } | CliError::Summary { .. } => 3,
            CliError::Harness(_) | CliError::Sim(_) | CliError::Metrics(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub enum GenRequest {
    Spoiler { params: SpoilerParams },
    Stress { params: SpoilerParams, benign_per_round: usize },
    Benign { kind: BenignKind, ops: usize, seed: u64 },
}

pub fn cmd_gen(request: &GenRequest, out: &Path) -> Result<Trace, CliError> {
    let trace = match request {
        GenRequest::Spoiler { params } => gen_spoiler_trace(params, &mut AddressSpace::new(params.seed))?,
        GenRequest::Stress { params, benign_per_round } => {
            gen_stress_trace(params, *benign_per_round, &mut AddressSpace::new(params.seed))?
        }
        GenRequest::Benign { kind, ops, seed } => gen_benign_trace(*kind, *ops, *seed)?,
    };
    save_trace(&trace, out)?;
    Ok(trace)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_trace(trace, BufWriter::new(file)).map_err(|source| CliError::Trace { path: path.to_path_buf(), source })
}

pub fn load_trace(path: &Path) -> Result<(Trace, String), CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let digest = hex_digest(&bytes);
    let trace = read_trace(BufReader::new(bytes.as_slice()))
        .map_err(|source| CliError::Trace { path: path.to_path_buf(), source })?;
    Ok((trace, digest))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Optional overrides applied on top of [`SimConfig::new`].
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub sab_capacity: Option<usize>,
    pub mask_width: Option<usize>,
    pub base_load: Option<u64>,
    pub forward: Option<u64>,
    pub alias4k_stall: Option<u64>,
    pub squash_penalty: Option<u64>,
    pub store_resolve_delay: Option<u64>,
    pub drain_delay: Option<u64>,
    pub max_reissues: Option<u32>,
}

impl ConfigOverrides {
    pub fn apply(&self, model: Model, seed: u64) -> SimConfig {
        let mut c = SimConfig::new(model, seed);
        let d = Latencies::default();
        c.sab_capacity = self.sab_capacity.unwrap_or(c.sab_capacity);
        c.mask_width = self.mask_width.unwrap_or(c.mask_width);
        c.latencies = Latencies {
            base_load: self.base_load.unwrap_or(d.base_load),
            forward: self.forward.unwrap_or(d.forward),
            alias4k_stall: self.alias4k_stall.unwrap_or(d.alias4k_stall),
            squash_penalty: self.squash_penalty.unwrap_or(d.squash_penalty),
        };
        c.store_resolve_delay = self.store_resolve_delay.unwrap_or(c.store_resolve_delay);
        c.drain_delay = self.drain_delay.unwrap_or(c.drain_delay);
        c.max_reissues = self.max_reissues.unwrap_or(c.max_reissues);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: Model,
    pub trace_digest: String,
    pub trace_generator: String,
    pub config: SimConfig,
    pub total_cycles: u64,
    pub total_loads: u64,
    pub total_stores: u64,
    pub spoiler_violations: u64,
    pub attacker_stalls: u64,
    pub misspeculations: u64,
    pub remask_events: u64,
    pub reissue_cap_hits: u64,
    pub sab_full_stalls: u64,
    pub sab_stall_cycles: u64,
    pub misspec_rate: Option<f64>,
    pub detection: Option<DetectionReport>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub stats: SimStats,
    pub profile: Option<LatencyProfile>,
    pub files: Vec<PathBuf>,
}

/// Simulates one model on a trace file and writes
/// `<model>_loads.csv`, `<model>_pages.csv` (labelled traces only) and
/// `<model>_summary.json` into `out_dir`.
pub fn cmd_run(trace_path: &Path, config: &SimConfig, out_dir: &Path) -> Result<RunOutput, CliError> {
    let (trace, digest) = load_trace(trace_path)?;
    let stats = run_trace(&trace, config)?;
    let profile = match trace.meta.labels {
        Some(_) => Some(per_page_latency(&stats, &trace.meta)?),
        None => None,
    };
    let detection = profile.as_ref().map(classify_aliased).transpose()?;
    let summary = RunSummary {
        model: config.model,
        trace_digest: digest,
        trace_generator: trace.meta.generator.clone(),
        config: config.clone(),
        total_cycles: stats.total_cycles,
        total_loads: stats.total_loads,
        total_stores: stats.total_stores,
        spoiler_violations: stats.spoiler_violations,
        attacker_stalls: stats.attacker_stalls,
        misspeculations: stats.misspeculations,
        remask_events: stats.remask_events,
        reissue_cap_hits: stats.reissue_cap_hits,
        sab_full_stalls: stats.sab_full_stalls,
        sab_stall_cycles: stats.sab_stall_cycles,
        misspec_rate: misspec_rate(&stats).ok(),
        detection,
    };

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let name = config.model.name();
    let mut files = Vec::new();

    let loads_path = out_dir.join(format!("{name}_loads.csv"));
    write_file(&loads_path, |w| {
        writeln!(w, "seq,page,pc,reissues,latency_cycles")?;
        for r in &stats.per_load_latency {
            writeln!(w, "{},{:#x},{:#x},{},{}", r.seq, r.page, r.pc, r.reissues, r.latency_cycles)?;
        }
        Ok(())
    })?;
    files.push(loads_path);

    if let Some(profile) = &profile {
        let pages_path = out_dir.join(format!("{name}_pages.csv"));
        write_file(&pages_path, |w| {
            writeln!(w, "page,aliased,mean,std,n")?;
            for p in &profile.per_page {
                writeln!(w, "{},{},{},{},{}", p.page, u8::from(p.aliased), p.mean, p.std, p.n)?;
            }
            Ok(())
        })?;
        files.push(pages_path);
    }

    let summary_path = out_dir.join(format!("{name}_summary.json"));
    write_file(&summary_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    files.push(summary_path);

    Ok(RunOutput { summary, stats, profile, files })
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: Model,
    pub total_cycles: u64,
    pub misspeculations: u64,
    pub spoiler_violations: u64,
    pub attacker_stalls: u64,
    pub remask_events: u64,
    pub misspec_rate: Option<f64>,
    pub detection_accuracy: Option<f64>,
    /// Differences against the first summary.
    pub delta_cycles: i64,
    pub delta_misspeculations: i64,
    pub delta_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub trace_digest: String,
    pub rows: Vec<ComparisonRow>,
    /// Whether M3's detection accuracy stays within the margin of M1's;
    /// `None` unless both models with detection reports are present.
    pub m3_indistinguishable_from_m1: Option<bool>,
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let fmt_opt = |v: Option<f64>, scale: f64, prec: usize| match v {
            Some(x) => format!("{:.*}", prec, x * scale),
            None => "-".to_string(),
        };
        let mut out = format!(
            "{:<6} {:>12} {:>10} {:>10} {:>10} {:>8} {:>12} {:>9} {:>11} {:>9}\n",
            "model", "cycles", "misspec", "violation", "att_stall", "remask", "misspec_%", "accuracy", "d_cycles", "d_acc"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:>12} {:>10} {:>10} {:>10} {:>8} {:>12} {:>9} {:>11} {:>9}\n",
                r.model.name(),
                r.total_cycles,
                r.misspeculations,
                r.spoiler_violations,
                r.attacker_stalls,
                r.remask_events,
                fmt_opt(r.misspec_rate, 100.0, 6),
                fmt_opt(r.detection_accuracy, 1.0, 4),
                r.delta_cycles,
                fmt_opt(r.delta_accuracy, 1.0, 4),
            ));
        }
        match self.m3_indistinguishable_from_m1 {
            Some(true) => out.push_str("verdict: m3 latency profile indistinguishable from m1\n"),
            Some(false) => out.push_str("verdict: m3 latency profile DISTINGUISHABLE from m1\n"),
            None => {}
        }
        out
    }
}

pub fn compare_summaries(summaries: &[RunSummary]) -> Result<Comparison, CliError> {
    if summaries.len() < 2 {
        return Err(CliError::Usage("compare needs at least two summaries".into()));
    }
    let digest = &summaries[0].trace_digest;
    if let Some(other) = summaries.iter().find(|s| &s.trace_digest != digest) {
        return Err(CliError::Usage(format!(
            "summaries come from different traces ({} vs {})",
            &digest[..12.min(digest.len())],
            &other.trace_digest[..12.min(other.trace_digest.len())]
        )));
    }
    let base = &summaries[0];
    let acc = |s: &RunSummary| s.detection.as_ref().map(|d| d.accuracy);
    let rows = summaries
        .iter()
        .map(|s| ComparisonRow {
            model: s.model,
            total_cycles: s.total_cycles,
            misspeculations: s.misspeculations,
            spoiler_violations: s.spoiler_violations,
            attacker_stalls: s.attacker_stalls,
            remask_events: s.remask_events,
            misspec_rate: s.misspec_rate,
            detection_accuracy: acc(s),
            delta_cycles: s.total_cycles as i64 - base.total_cycles as i64,
            delta_misspeculations: s.misspeculations as i64 - base.misspeculations as i64,
            delta_accuracy: acc(s).zip(acc(base)).map(|(a, b)| a - b),
        })
        .collect();
    let find = |m: Model| summaries.iter().find(|s| s.model == m).and_then(acc);
    let verdict = find(Model::M1)
        .zip(find(Model::M3))
        .map(|(m1, m3)| m3 <= m1 + INDISTINGUISHABLE_MARGIN);
    Ok(Comparison { trace_digest: digest.clone(), rows, m3_indistinguishable_from_m1: verdict })
}

pub fn cmd_compare(paths: &[PathBuf], out: Option<&Path>) -> Result<Comparison, CliError> {
    if paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two summaries".into()));
    }
    let summaries = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<RunSummary>(&text).map_err(|source| CliError::Summary { path: p.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_summaries(&summaries)?;
    if let Some(out) = out {
        write_file(out, |w| {
            serde_json::to_writer_pretty(&mut *w, &cmp).map_err(std::io::Error::other)?;
            writeln!(w)
        })?;
    }
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(model: Model, digest: &str, cycles: u64, acc: Option<f64>) -> RunSummary {
        RunSummary {
            model,
            trace_digest: digest.into(),
            trace_generator: "spoiler".into(),
            config: SimConfig::new(model, 1),
            total_cycles: cycles,
            total_loads: 10,
            total_stores: 10,
            spoiler_violations: 0,
            attacker_stalls: 0,
            misspeculations: 0,
            remask_events: 0,
            reissue_cap_hits: 0,
            sab_full_stalls: 0,
            sab_stall_cycles: 0,
            misspec_rate: Some(0.0),
            detection: acc.map(|accuracy| DetectionReport {
                threshold: 0.0,
                tpr: 0.0,
                fpr: 0.0,
                accuracy,
                separation: None,
                n_aliased: 1,
                n_clean: 1,
            }),
        }
    }

    #[test]
    fn compare_needs_two() {
        let e = compare_summaries(&[summary(Model::M1, "aa", 1, None)]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn compare_rejects_mixed_traces() {
        assert!(compare_summaries(&[summary(Model::M1, "aa", 1, None), summary(Model::M2, "bb", 1, None)]).is_err());
    }

    #[test]
    fn self_compare_has_zero_deltas() {
        let s = summary(Model::M1, "aa", 100, Some(0.5));
        let c = compare_summaries(&[s.clone(), s]).unwrap();
        for r in &c.rows {
            assert_eq!(r.delta_cycles, 0);
            assert_eq!(r.delta_misspeculations, 0);
            assert_eq!(r.delta_accuracy, Some(0.0));
        }
    }

    #[test]
    fn verdict_uses_margin() {
        let c = compare_summaries(&[
            summary(Model::M1, "aa", 100, Some(0.5)),
            summary(Model::M2, "aa", 150, Some(1.0)),
            summary(Model::M3, "aa", 100, Some(0.53)),
        ])
        .unwrap();
        assert_eq!(c.m3_indistinguishable_from_m1, Some(true));
        assert!(c.render_table().contains("indistinguishable"));
        let c = compare_summaries(&[summary(Model::M1, "aa", 1, Some(0.5)), summary(Model::M3, "aa", 1, Some(0.7))]).unwrap();
        assert_eq!(c.m3_indistinguishable_from_m1, Some(false));
    }

    #[test]
    fn overrides_apply() {
        let o = ConfigOverrides { squash_penalty: Some(20), mask_width: Some(10), ..Default::default() };
        let c = o.apply(Model::M3, 5);
        assert_eq!(c.latencies.squash_penalty, 20);
        assert_eq!(c.latencies.base_load, 4);
        assert_eq!(c.mask_width, 10);
        assert_eq!(c.seed, 5);
    }
}
