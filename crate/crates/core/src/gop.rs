//! Goodness of pronunciation and the phone-competition analysis.
//!
//! GOP is the mean over aligned phones of the log segment posterior of the
//! canonical phone. The conditional score adds back the frame marginal and
//! removes the phone prior, so that `ln p(o|q) = ln p(q|o) + ln p(o) - ln p(q)`
//! is evaluated per segment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{PhoneAlignment, PhonePrior, PosteriorGram, Segment};
use crate::error::{Error, Result};

/// Posteriors are floored here before taking logs.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// How frame posteriors are pooled into a segment log-posterior.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPooling {
    /// `ln(mean_t p_t)`.
    #[default]
    MeanThenLog,
    /// `mean_t ln p_t`.
    MeanOfLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GopResult {
    pub utterance_id: String,
    /// `(phone_id, segment log-posterior)` in alignment order.
    pub per_phone: Vec<(usize, f64)>,
    pub gop: f64,
}

fn check_segment(pg: &PosteriorGram, seg: &Segment) -> Result<()> {
    if seg.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty segment {}..{}", pg.utterance_id, seg.start, seg.end)));
    }
    if seg.end > pg.frames() || seg.phone >= pg.num_phones() {
        return Err(Error::Dimension(format!(
            "{}: segment {}..{} (phone {}) outside a {}x{} posteriorgram",
            pg.utterance_id,
            seg.start,
            seg.end,
            seg.phone,
            pg.frames(),
            pg.num_phones()
        )));
    }
    Ok(())
}

/// Arithmetic mean over the segment's frames of the posterior of its phone.
pub fn segment_posterior(pg: &PosteriorGram, seg: &Segment) -> Result<f64> {
    check_segment(pg, seg)?;
    let sum: f64 = (seg.start..seg.end).map(|t| pg.post[(t, seg.phone)]).sum();
    Ok(sum / seg.len() as f64)
}

pub fn segment_log_posterior(pg: &PosteriorGram, seg: &Segment, pooling: SegmentPooling) -> Result<f64> {
    match pooling {
        SegmentPooling::MeanThenLog => Ok(segment_posterior(pg, seg)?.max(POSTERIOR_FLOOR).ln()),
        SegmentPooling::MeanOfLog => {
            check_segment(pg, seg)?;
            let sum: f64 = (seg.start..seg.end).map(|t| pg.post[(t, seg.phone)].max(POSTERIOR_FLOOR).ln()).sum();
            Ok(sum / seg.len() as f64)
        }
    }
}

fn check_pair(pg: &PosteriorGram, al: &PhoneAlignment) -> Result<()> {
    if pg.utterance_id != al.utterance_id {
        return Err(Error::Data(format!(
            "posteriorgram {} paired with alignment {}",
            pg.utterance_id, al.utterance_id
        )));
    }
    if let Some(last) = al.segments.last() {
        if last.end > pg.frames() {
            return Err(Error::Dimension(format!(
                "{}: alignment ends at frame {} but posteriorgram has {} frames",
                pg.utterance_id,
                last.end,
                pg.frames()
            )));
        }
    }
    Ok(())
}

pub fn gop_score(pg: &PosteriorGram, al: &PhoneAlignment) -> Result<GopResult> {
    gop_score_with(pg, al, SegmentPooling::MeanThenLog)
}

pub fn gop_score_with(pg: &PosteriorGram, al: &PhoneAlignment, pooling: SegmentPooling) -> Result<GopResult> {
    check_pair(pg, al)?;
    let per_phone = al
        .segments
        .iter()
        .map(|s| Ok((s.phone, segment_log_posterior(pg, s, pooling)?)))
        .collect::<Result<Vec<_>>>()?;
    let gop = per_phone.iter().map(|(_, v)| v).sum::<f64>() / per_phone.len() as f64;
    Ok(GopResult { utterance_id: pg.utterance_id.clone(), per_phone, gop })
}

/// Per-segment `ln p(q|o) + ln p(o) - ln p(q)`, averaged over segments.
///
/// `ln p(o)` of a segment is the mean of `frame_marginal_loglik` over its
/// frames.
pub fn conditional_score(
    pg: &PosteriorGram,
    frame_marginal_loglik: &[f64],
    prior: &PhonePrior,
    al: &PhoneAlignment,
) -> Result<f64> {
    check_pair(pg, al)?;
    if frame_marginal_loglik.len() != pg.frames() {
        return Err(Error::Dimension(format!(
            "{}: {} marginal log-likelihoods for {} frames",
            pg.utterance_id,
            frame_marginal_loglik.len(),
            pg.frames()
        )));
    }
    if prior.len() != pg.num_phones() {
        return Err(Error::Dimension(format!("prior has {} phones, posteriorgram {}", prior.len(), pg.num_phones())));
    }
    let mut total = 0.0;
    for seg in &al.segments {
        let log_post = segment_log_posterior(pg, seg, SegmentPooling::MeanThenLog)?;
        let marginal = frame_marginal_loglik[seg.start..seg.end].iter().sum::<f64>() / seg.len() as f64;
        total += log_post + marginal - prior.as_slice()[seg.phone].ln();
    }
    Ok(total / al.segments.len() as f64)
}

/// Posterior of the target phone for two unit-distance-scaled Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompetitionPoint {
    pub a: f64,
    pub delta: f64,
    pub posterior: f64,
}

/// Two 1-D Gaussians with variance 0.5: the competitor `q1` at `-a`, the
/// target `q2` at 0, and an observation at `delta`. Positive `delta` moves
/// away from `q1`.
pub fn simulate_competition(a: f64, delta: f64) -> Result<CompetitionPoint> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!("mean distance a must be positive, got {a}")));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("delta must be finite, got {delta}")));
    }
    let logit = a * a + 2.0 * a * delta;
    let posterior = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    Ok(CompetitionPoint { a, delta, posterior })
}

pub fn competition_sweep(a: f64, deltas: &[f64]) -> Result<Vec<CompetitionPoint>> {
    deltas.iter().map(|&d| simulate_competition(a, d)).collect()
}

pub const SWEEP_HEADER: &str = "a\tdelta\tposterior";

pub fn sweep_tsv(points: &[CompetitionPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}", p.a, p.delta, p.posterior);
    }
    out
}
