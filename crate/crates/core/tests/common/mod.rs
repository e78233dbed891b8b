#![allow(dead_code)]

use mvec::data::CorpusSpec;
use mvec::eval::ScoreSet;
use mvec::losses::{mrl_combined_loss, MarginConfig, MarginSign, PrefixSchedule};
use mvec::math::{Mat64, Prng};
use mvec::model::ClassifierHeads;
use mvec::store::VectorStore;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative gradient error. Entries smaller than this
/// are compared on absolute error scaled by the floor.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// One random MRL loss problem.
#[derive(Clone)]
pub struct LossInstance {
    pub heads: Vec<Mat64>,
    pub embeddings: Mat64,
    pub labels: Vec<usize>,
    pub schedule: PrefixSchedule,
    pub cfg: MarginConfig,
}

fn random_mat(rng: &mut Prng, rows: usize, cols: usize) -> Mat64 {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Mat64::from_vec(rows, cols, data).unwrap()
}

impl LossInstance {
    /// C ≤ 5 classes, d ≤ 8, N ≤ 4 rows, |M| ≤ 3 prefixes.
    pub fn random(seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let classes = 2 + rng.below(4);
        let d = 2 + rng.below(7);
        let n = 1 + rng.below(4);
        let mut dims = vec![d];
        let extra = rng.below(3).min(d - 1);
        while dims.len() < extra + 1 {
            let m = 1 + rng.below(d - 1);
            if !dims.contains(&m) {
                dims.push(m);
            }
        }
        dims.sort_unstable();
        let weights = dims.iter().map(|_| rng.uniform(0.25, 2.0)).collect();
        let schedule = PrefixSchedule::new(dims.clone(), weights).unwrap();
        let sign = if rng.below(2) == 0 {
            MarginSign::SubtractFromTarget
        } else {
            MarginSign::AddToTarget
        };
        let cfg = MarginConfig::new(rng.uniform(1.0, 16.0), rng.uniform(0.0, 0.4), sign).unwrap();
        let heads = dims
            .iter()
            .map(|&m| random_mat(&mut rng, classes, m))
            .collect();
        let embeddings = random_mat(&mut rng, n, d);
        let labels = (0..n).map(|_| rng.below(classes)).collect();
        LossInstance {
            heads,
            embeddings,
            labels,
            schedule,
            cfg,
        }
    }

    pub fn heads(&self) -> ClassifierHeads {
        ClassifierHeads::from_matrices(self.heads.clone()).unwrap()
    }

    pub fn value(&self) -> f64 {
        mrl_combined_loss(
            &self.heads(),
            &self.embeddings,
            &self.labels,
            &self.schedule,
            &self.cfg,
        )
        .unwrap()
        .value
    }
}

/// Max relative error of analytic against central-difference gradients over
/// every embedding entry and every head entry.
pub fn max_gradient_error(inst: &LossInstance) -> f64 {
    let out = mrl_combined_loss(
        &inst.heads(),
        &inst.embeddings,
        &inst.labels,
        &inst.schedule,
        &inst.cfg,
    )
    .unwrap();
    let mut worst: f64 = 0.0;

    let mut probe = inst.clone();
    for idx in 0..inst.embeddings.as_slice().len() {
        let x = inst.embeddings.as_slice()[idx];
        probe.embeddings.as_mut_slice()[idx] = x + FD_STEP;
        let up = probe.value();
        probe.embeddings.as_mut_slice()[idx] = x - FD_STEP;
        let down = probe.value();
        probe.embeddings.as_mut_slice()[idx] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(out.grad_embeddings.as_slice()[idx], numeric));
    }
    for h in 0..inst.heads.len() {
        for idx in 0..inst.heads[h].as_slice().len() {
            let x = inst.heads[h].as_slice()[idx];
            probe.heads[h].as_mut_slice()[idx] = x + FD_STEP;
            let up = probe.value();
            probe.heads[h].as_mut_slice()[idx] = x - FD_STEP;
            let down = probe.value();
            probe.heads[h].as_mut_slice()[idx] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(out.grad_heads[h].as_slice()[idx], numeric));
        }
    }
    worst
}

/// EER by brute force: FAR and FRR counted directly at every candidate
/// threshold, then bisection on the piecewise-linear curve through them.
pub fn eer_oracle(scores: &ScoreSet) -> f64 {
    let t = &scores.target_scores;
    let n = &scores.nontarget_scores;
    let mut thresholds: Vec<f64> = t.iter().chain(n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().unwrap();
    thresholds.push(top + 1.0);

    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let far = n.iter().filter(|&&s| s >= th).count() as f64 / n.len() as f64;
            let frr = t.iter().filter(|&&s| s < th).count() as f64 / t.len() as f64;
            (far, frr)
        })
        .collect();
    let at = |u: f64| -> (f64, f64) {
        let i = (u.floor() as usize).min(curve.len() - 2);
        let f = u - i as f64;
        let (a, b) = (curve[i], curve[i + 1]);
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    };
    let (mut lo, mut hi) = (0.0, (curve.len() - 1) as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (far, frr) = at(mid);
        if far - frr > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi).0
}

/// Random score lists of at most 20 entries each, sometimes drawn from a
/// coarse grid so that ties appear.
pub fn random_score_set(rng: &mut Prng) -> ScoreSet {
    let nt = 1 + rng.below(20);
    let nn = 1 + rng.below(20);
    let coarse = rng.below(2) == 0;
    let shift = rng.uniform(-1.0, 1.0);
    let mut draw = |offset: f64| {
        if coarse {
            (rng.below(7) as f64) / 6.0 + offset
        } else {
            rng.normal() + offset
        }
    };
    let target_scores = (0..nt).map(|_| draw(shift)).collect();
    let nontarget_scores = (0..nn).map(|_| draw(0.0)).collect();
    ScoreSet {
        target_scores,
        nontarget_scores,
    }
}

/// Full scan in f64 over the stored rows, sorted by (distance, id).
pub fn naive_search(store: &VectorStore, query: &[f64], m: usize, k: usize) -> Vec<(u64, f64)> {
    let qn = query[..m].iter().map(|x| x * x).sum::<f64>().sqrt();
    let q: Vec<f64> = query[..m].iter().map(|x| x / qn).collect();
    let mut all: Vec<(u64, f64)> = (0..store.len())
        .map(|i| {
            let row: Vec<f64> = store.row(i)[..m].iter().map(|&x| x as f64).collect();
            let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dist = if rn == 0.0 {
                1.0
            } else {
                row.iter().zip(&q).map(|(r, q)| (r / rn - q).powi(2)).sum()
            };
            (store.ids()[i], dist)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Two speakers far apart, small within-speaker spread.
pub fn two_speaker_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        num_speakers: 2,
        utts_per_speaker: 12,
        eval_utts_per_speaker: 4,
        frames_per_utt: 10,
        feat_dim: 8,
        intra_spread: 0.1,
        channel_spread: 0.1,
        seed,
    }
}
