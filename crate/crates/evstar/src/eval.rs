//! Evaluation metrics and report emission: per-frame angular error series,
//! RMSE / SD, absolute-rotation error buckets and relative-rotation quality.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::frames::FrameId;
use crate::geometry::{angular_error_deg, AttitudeRecord, Rotation};
use crate::registration::RelativeRotation;
use crate::star_id::IdentificationRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimate frames missing from ground truth: {0:?}")]
    MissingFrames(Vec<FrameId>),
    #[error("no frames to evaluate")]
    Empty,
}

/// RMSE and population standard deviation of an error series (degrees).
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SeriesStats {
    pub count: usize,
    pub rmse_deg: f64,
    pub sd_deg: f64,
}

pub fn series_stats(errors: &[f64]) -> SeriesStats {
    let n = errors.len();
    if n == 0 {
        return SeriesStats { count: 0, rmse_deg: 0.0, sd_deg: 0.0 };
    }
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / n as f64;
    let mean = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
    SeriesStats {
        count: n,
        rmse_deg: mean_sq.sqrt(),
        sd_deg: var.sqrt(),
    }
}

/// Absolute-rotation error histogram in the three customary buckets.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ErrorBuckets {
    pub below_1_deg: usize,
    pub from_1_to_10_deg: usize,
    pub above_10_deg: usize,
}

pub fn bucket_errors(errors: &[f64]) -> ErrorBuckets {
    let mut b = ErrorBuckets {
        below_1_deg: 0,
        from_1_to_10_deg: 0,
        above_10_deg: 0,
    };
    for &e in errors {
        if e < 1.0 {
            b.below_1_deg += 1;
        } else if e < 10.0 {
            b.from_1_to_10_deg += 1;
        } else {
            b.above_10_deg += 1;
        }
    }
    b
}

/// Angular error of each estimate against ground truth, by frame.
///
/// Every estimated frame must exist in the truth; the error lists the
/// missing ones otherwise.
pub fn compare_attitudes(
    estimates: &[AttitudeRecord],
    truth: &BTreeMap<FrameId, Rotation>,
) -> Result<Vec<(FrameId, f64)>, EvalError> {
    let missing: Vec<FrameId> = estimates
        .iter()
        .map(|r| r.frame)
        .filter(|f| !truth.contains_key(f))
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingFrames(missing));
    }
    Ok(estimates
        .iter()
        .map(|r| (r.frame, angular_error_deg(&r.rotation, &truth[&r.frame])))
        .collect())
}

/// Errors of relative measurements against the ground-truth relative
/// rotation `R*_to · (R*_from)ᵀ`.
pub fn relative_errors(
    relatives: &[RelativeRotation],
    truth: &BTreeMap<FrameId, Rotation>,
) -> Result<Vec<f64>, EvalError> {
    let mut missing = Vec::new();
    let mut errors = Vec::with_capacity(relatives.len());
    for r in relatives {
        match (truth.get(&r.to), truth.get(&r.from)) {
            (Some(rt), Some(rf)) => {
                let gt = rt.compose(&rf.transpose());
                errors.push(angular_error_deg(&r.rotation, &gt));
            }
            _ => {
                missing.push(if truth.contains_key(&r.to) { r.from } else { r.to });
            }
        }
    }
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(EvalError::MissingFrames(missing));
    }
    Ok(errors)
}

/// One attitude series' evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct MethodEvaluation {
    pub per_frame: Vec<(FrameId, f64)>,
    pub stats: SeriesStats,
}

/// Full evaluation report. Wall-clock runtimes are reported separately by
/// the pipeline and omitted here when absent, keeping the serialized report
/// reproducible run to run.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chained: Option<MethodEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averaged: Option<MethodEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundled: Option<MethodEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absolute_buckets: Option<ErrorBuckets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absolute_stats: Option<SeriesStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_stats: Option<SeriesStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtimes_s: Option<BTreeMap<String, f64>>,
}

pub struct EvaluationInputs<'a> {
    pub truth: &'a BTreeMap<FrameId, Rotation>,
    pub chained: Option<&'a [AttitudeRecord]>,
    pub averaged: Option<&'a [AttitudeRecord]>,
    pub bundled: Option<&'a [AttitudeRecord]>,
    pub identification: Option<&'a [IdentificationRecord]>,
    pub relatives: Option<&'a [RelativeRotation]>,
    pub runtimes_s: Option<BTreeMap<String, f64>>,
}

pub fn evaluate(inputs: &EvaluationInputs<'_>) -> Result<EvaluationReport, EvalError> {
    let method = |records: Option<&[AttitudeRecord]>| -> Result<Option<MethodEvaluation>, EvalError> {
        records
            .map(|recs| {
                let per_frame = compare_attitudes(recs, inputs.truth)?;
                let errors: Vec<f64> = per_frame.iter().map(|&(_, e)| e).collect();
                Ok(MethodEvaluation {
                    stats: series_stats(&errors),
                    per_frame,
                })
            })
            .transpose()
    };
    let (absolute_buckets, absolute_stats) = match inputs.identification {
        Some(records) => {
            let recs: Vec<AttitudeRecord> = records
                .iter()
                .filter_map(|r| {
                    r.rotation.map(|rotation| AttitudeRecord { frame: r.frame, rotation })
                })
                .collect();
            let per_frame = compare_attitudes(&recs, inputs.truth)?;
            let errors: Vec<f64> = per_frame.iter().map(|&(_, e)| e).collect();
            (Some(bucket_errors(&errors)), Some(series_stats(&errors)))
        }
        None => (None, None),
    };
    let relative_stats = inputs
        .relatives
        .map(|rels| relative_errors(rels, inputs.truth).map(|e| series_stats(&e)))
        .transpose()?;

    Ok(EvaluationReport {
        chained: method(inputs.chained)?,
        averaged: method(inputs.averaged)?,
        bundled: method(inputs.bundled)?,
        absolute_buckets,
        absolute_stats,
        relative_stats,
        runtimes_s: inputs.runtimes_s.clone(),
    })
}

/// Per-frame error CSV (one column per attitude series), for plotting.
pub fn write_per_frame_csv<W: Write>(
    mut w: W,
    report: &EvaluationReport,
) -> std::io::Result<()> {
    writeln!(w, "frame,chained_deg,averaged_deg,bundled_deg")?;
    let mut frames: std::collections::BTreeSet<FrameId> = std::collections::BTreeSet::new();
    let as_map = |m: &Option<MethodEvaluation>| -> BTreeMap<FrameId, f64> {
        m.as_ref()
            .map(|m| m.per_frame.iter().copied().collect())
            .unwrap_or_default()
    };
    let (c, a, b) = (
        as_map(&report.chained),
        as_map(&report.averaged),
        as_map(&report.bundled),
    );
    frames.extend(c.keys());
    frames.extend(a.keys());
    frames.extend(b.keys());
    let cell = |m: &BTreeMap<FrameId, f64>, f: &FrameId| {
        m.get(f).map(|e| e.to_string()).unwrap_or_default()
    };
    for f in frames {
        writeln!(w, "{},{},{},{}", f, cell(&c, &f), cell(&a, &f), cell(&b, &f))?;
    }
    Ok(())
}
