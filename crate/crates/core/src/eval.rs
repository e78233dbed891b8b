//! Verification scoring, equal error rate, and the per-dimension sweep.

use std::collections::HashMap;
use std::io::Write;

use crate::data::TrialList;
use crate::error::{MvecError, Result};
use crate::math::{cosine, prefix};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

/// Cosine score of every trial on the first `m` embedding coordinates.
///
/// Cosine normalizes each truncated prefix, so stored embeddings need not
/// be unit length.
pub fn score_trials<E: AsRef<[f64]>>(
    embeddings: &HashMap<u64, E>,
    trials: &TrialList,
    m: usize,
) -> Result<ScoreSet> {
    let mut scores = ScoreSet::default();
    for t in &trials.trials {
        let enroll = embeddings
            .get(&t.enroll)
            .ok_or(MvecError::Lookup(t.enroll))?;
        let test = embeddings.get(&t.test).ok_or(MvecError::Lookup(t.test))?;
        let s = cosine(prefix(enroll.as_ref(), m)?, prefix(test.as_ref(), m)?)?;
        if t.target {
            scores.target_scores.push(s);
        } else {
            scores.nontarget_scores.push(s);
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by threshold sweep with linear interpolation.
///
/// Thresholds are every distinct score plus one point just above the
/// largest. At threshold `t`, targets below `t` are rejected and
/// nontargets at or above `t` are accepted. The EER is read where
/// `FAR − FRR` first reaches zero, interpolating linearly between the two
/// sweep points that bracket the sign change.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let (n_t, n_n) = (scores.target_scores.len(), scores.nontarget_scores.len());
    if n_t == 0 || n_n == 0 {
        return Err(MvecError::EmptyInput(format!(
            "EER needs both target ({n_t}) and nontarget ({n_n}) scores"
        )));
    }
    if scores
        .target_scores
        .iter()
        .chain(&scores.nontarget_scores)
        .any(|s| !s.is_finite())
    {
        return Err(MvecError::DegenerateInput("non-finite score".into()));
    }

    // (score, is_target), ascending
    let mut all: Vec<(f64, bool)> = scores
        .target_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontarget_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep points: (threshold, far, frr)
    let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(all.len() + 1);
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push((
            t,
            (n_n - nontargets_below) as f64 / n_n as f64,
            targets_below as f64 / n_t as f64,
        ));
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    let top = all.last().expect("non-empty").0;
    points.push((top.next_up(), 0.0, 1.0));

    let mut prev = points[0];
    for &p in &points {
        let diff = p.1 - p.2;
        if diff == 0.0 {
            return Ok(EerResult {
                eer: p.1,
                threshold: p.0,
            });
        }
        if diff < 0.0 {
            let d0 = prev.1 - prev.2;
            let alpha = d0 / (d0 - diff);
            let eer = prev.1 + alpha * (p.1 - prev.1);
            let threshold = prev.0 + alpha * (p.0 - prev.0);
            return Ok(EerResult { eer, threshold });
        }
        prev = p;
    }
    unreachable!("last sweep point has FAR - FRR = -1")
}

/// One row of the dimension sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub system: String,
    pub dim: usize,
    pub eer_percent: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DimensionSweepReport {
    pub rows: Vec<SweepRow>,
}

impl DimensionSweepReport {
    pub fn eer_percent(&self, system: &str, dim: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.system == system && r.dim == dim)
            .map(|r| r.eer_percent)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "system,dim,eer_percent,threshold")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.6},{:.6}",
                r.system, r.dim, r.eer_percent, r.threshold
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// EER of every system at every prefix dimension.
///
/// Rows are ordered by system (in the given order), then ascending dim.
pub fn dimension_sweep<E: AsRef<[f64]>>(
    systems: &[(String, HashMap<u64, E>)],
    trials: &TrialList,
    dims: &[usize],
) -> Result<DimensionSweepReport> {
    let mut sorted = dims.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::with_capacity(systems.len() * sorted.len());
    for (name, embeddings) in systems {
        for &m in &sorted {
            let eer = compute_eer(&score_trials(embeddings, trials, m)?)?;
            rows.push(SweepRow {
                system: name.clone(),
                dim: m,
                eer_percent: 100.0 * eer.eer,
                threshold: eer.threshold,
            });
        }
    }
    Ok(DimensionSweepReport { rows })
}
