//! Additive-margin softmax over cosine logits, and its Matryoshka form that
//! sums the loss over nested embedding prefixes, each with its own head.
//!
//! Both losses return the value together with exact analytic gradients for
//! the embeddings and every head, including the derivative of the
//! normalization inside the cosine.
//!
//! For one sample with embedding `e`, label `y`, and head rows `W_j`:
//!
//! ```text
//! cos_j = W_j·e / (‖W_j‖‖e‖)
//! z_j   = s·cos_j              (j ≠ y)
//! z_y   = s·(cos_y ∓ k)
//! loss  = logsumexp(z) − z_y
//! ```
//!
//! and with `g_j = s·(softmax(z)_j − [j = y])`:
//!
//! ```text
//! ∂loss/∂e   = Σ_j g_j (Ŵ_j − cos_j ê) / ‖e‖
//! ∂loss/∂W_j = g_j (ê − cos_j Ŵ_j) / ‖W_j‖
//! ```

use crate::error::{MvecError, Result};
use crate::math::{dot, norm, Mat64};
use crate::model::ClassifierHeads;

/// Which way the margin moves the target logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginSign {
    /// `s·(cos − k)`: the usual penalty margin.
    #[default]
    SubtractFromTarget,
    /// `s·(cos + k)`: the formula exactly as sometimes printed; makes the
    /// target easier rather than harder.
    AddToTarget,
}

impl MarginSign {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginSign::SubtractFromTarget => "subtract",
            MarginSign::AddToTarget => "add",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "subtract" | "subtract_from_target" => Ok(MarginSign::SubtractFromTarget),
            "add" | "add_to_target" => Ok(MarginSign::AddToTarget),
            other => Err(MvecError::Config(format!("unknown margin sign '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
    pub sign: MarginSign,
}

impl MarginConfig {
    pub fn new(scale: f64, margin: f64, sign: MarginSign) -> Result<Self> {
        let cfg = Self {
            scale,
            margin,
            sign,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Conventional values for the small synthetic setup.
    pub fn desk_default() -> Self {
        Self {
            scale: 8.0,
            margin: 0.1,
            sign: MarginSign::SubtractFromTarget,
        }
    }

    /// Conventional values for full-size embeddings.
    pub fn full_scale_default() -> Self {
        Self {
            scale: 32.0,
            margin: 0.2,
            sign: MarginSign::SubtractFromTarget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(MvecError::Config(format!(
                "scale must be > 0, got {}",
                self.scale
            )));
        }
        if self.margin.is_nan() || self.margin.abs() >= 1.0 {
            return Err(MvecError::Config(format!(
                "|margin| must be < 1, got {}",
                self.margin
            )));
        }
        Ok(())
    }

    fn signed_margin(&self) -> f64 {
        match self.sign {
            MarginSign::SubtractFromTarget => -self.margin,
            MarginSign::AddToTarget => self.margin,
        }
    }
}

/// Nested prefix dimensions with their loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSchedule {
    dims: Vec<usize>,
    weights: Vec<f64>,
}

impl PrefixSchedule {
    pub fn new(dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(MvecError::Config("prefix schedule has no dims".into()));
        }
        if dims.len() != weights.len() {
            return Err(MvecError::Config(format!(
                "{} prefix dims but {} weights",
                dims.len(),
                weights.len()
            )));
        }
        if dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MvecError::Config(format!(
                "prefix dims must be positive and strictly increasing: {dims:?}"
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(MvecError::Config(format!(
                "prefix weights must be > 0: {weights:?}"
            )));
        }
        Ok(Self { dims, weights })
    }

    /// All weights equal to one.
    pub fn uniform(dims: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; dims.len()];
        Self::new(dims, weights)
    }

    /// The single-prefix schedule `{d}` used for full-dimension training.
    pub fn full_only(d: usize) -> Result<Self> {
        Self::uniform(vec![d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn full_dim(&self) -> usize {
        *self.dims.last().expect("non-empty by construction")
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.dims.iter().copied().zip(self.weights.iter().copied())
    }

    /// Same dims with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.dims.clone(),
            self.weights.iter().map(|w| w * factor).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// `N × d`, one row per batch sample.
    pub grad_embeddings: Mat64,
    /// One gradient per head, shaped like that head.
    pub grad_heads: Vec<Mat64>,
}

fn row_norms(w: &Mat64) -> Result<Vec<f64>> {
    (0..w.rows())
        .map(|j| {
            let n = norm(w.row(j));
            if n == 0.0 {
                Err(MvecError::DegenerateInput(format!(
                    "classifier row {j} is zero"
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn check_embedding(w: &Mat64, e: &[f64]) -> Result<f64> {
    if e.len() != w.cols() {
        return Err(MvecError::Dimension {
            expected: w.cols(),
            got: e.len(),
        });
    }
    let n = norm(e);
    if n == 0.0 {
        return Err(MvecError::DegenerateInput("zero embedding".into()));
    }
    Ok(n)
}

fn cosines(w: &Mat64, w_norms: &[f64], e: &[f64], e_norm: f64) -> Vec<f64> {
    (0..w.rows())
        .map(|j| dot(w.row(j), e) / (w_norms[j] * e_norm))
        .collect()
}

fn logits_from_cosines(cos: &[f64], target: usize, cfg: &MarginConfig) -> Vec<f64> {
    let mut z: Vec<f64> = cos.iter().map(|c| cfg.scale * c).collect();
    z[target] = cfg.scale * (cos[target] + cfg.signed_margin());
    z
}

/// Margin-adjusted class logits for one embedding.
pub fn aam_logits(w: &Mat64, e: &[f64], target: usize, cfg: &MarginConfig) -> Result<Vec<f64>> {
    if target >= w.rows() {
        return Err(MvecError::Label {
            label: target,
            classes: w.rows(),
        });
    }
    let e_norm = check_embedding(w, e)?;
    let w_norms = row_norms(w)?;
    let cos = cosines(w, &w_norms, e, e_norm);
    Ok(logits_from_cosines(&cos, target, cfg))
}

/// Mean additive-margin softmax cross-entropy over the batch.
///
/// `embeddings` is `N × m` with `m == w.cols()`; `labels[i]` is the class of
/// row `i`. `grad_heads` has exactly one entry.
pub fn aam_softmax_loss(
    w: &Mat64,
    embeddings: &Mat64,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = embeddings.rows();
    if n == 0 {
        return Err(MvecError::EmptyInput("loss over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(MvecError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if embeddings.cols() != w.cols() {
        return Err(MvecError::Dimension {
            expected: w.cols(),
            got: embeddings.cols(),
        });
    }
    let classes = w.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MvecError::Label {
            label: bad,
            classes,
        });
    }
    let w_norms = row_norms(w)?;
    let inv_n = 1.0 / n as f64;

    let mut value = 0.0;
    let mut grad_e = Mat64::zeros(n, w.cols());
    let mut grad_w = Mat64::zeros(classes, w.cols());
    let mut coef = vec![0.0; classes];

    for (i, &y) in labels.iter().enumerate() {
        let e = embeddings.row(i);
        let e_norm = check_embedding(w, e)?;
        let cos = cosines(w, &w_norms, e, e_norm);
        let z = logits_from_cosines(&cos, y, cfg);

        let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|zj| (zj - z_max).exp()).sum();
        let log_sum = z_max + sum_exp.ln();
        value += (log_sum - z[y]) * inv_n;

        // g_j = s (p_j - [j == y]) / N
        let mut weighted_cos = 0.0;
        for j in 0..classes {
            let p = (z[j] - log_sum).exp();
            let g = cfg.scale * (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            coef[j] = g;
            weighted_cos += g * cos[j];
        }

        let ge = grad_e.row_mut(i);
        for j in 0..classes {
            let g = coef[j];
            let a = g / (w_norms[j] * e_norm);
            for (o, wv) in ge.iter_mut().zip(w.row(j)) {
                *o += a * wv;
            }
        }
        let b = weighted_cos / (e_norm * e_norm);
        for (o, ev) in ge.iter_mut().zip(e) {
            *o -= b * ev;
        }

        for j in 0..classes {
            let g = coef[j];
            let a = g / (e_norm * w_norms[j]);
            let c = g * cos[j] / (w_norms[j] * w_norms[j]);
            for ((o, ev), wv) in grad_w.row_mut(j).iter_mut().zip(e).zip(w.row(j)) {
                *o += a * ev - c * wv;
            }
        }
    }

    Ok(LossOutput {
        value,
        grad_embeddings: grad_e,
        grad_heads: vec![grad_w],
    })
}

/// Copies the first `m` columns of every row.
pub fn truncate_columns(embeddings: &Mat64, m: usize) -> Result<Mat64> {
    if m == 0 || m > embeddings.cols() {
        return Err(MvecError::PrefixRange {
            m,
            len: embeddings.cols(),
        });
    }
    let mut data = Vec::with_capacity(embeddings.rows() * m);
    for i in 0..embeddings.rows() {
        data.extend_from_slice(&embeddings.row(i)[..m]);
    }
    Mat64::from_vec(embeddings.rows(), m, data)
}

/// Weighted sum of [`aam_softmax_loss`] over every prefix in `schedule`,
/// head `W(m)` scoring the first `m` embedding coordinates.
///
/// Coordinate `t` of an embedding only receives gradient from prefixes
/// with `m > t`.
pub fn mrl_combined_loss(
    heads: &ClassifierHeads,
    embeddings: &Mat64,
    labels: &[usize],
    schedule: &PrefixSchedule,
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    if heads.len() != schedule.len() {
        return Err(MvecError::Config(format!(
            "{} heads for {} prefix dims",
            heads.len(),
            schedule.len()
        )));
    }
    for (head, &m) in heads.iter().zip(schedule.dims()) {
        if head.cols() != m {
            return Err(MvecError::Config(format!(
                "head for prefix {m} has {} columns",
                head.cols()
            )));
        }
    }
    let d = schedule.full_dim();
    if embeddings.cols() != d {
        return Err(MvecError::Dimension {
            expected: d,
            got: embeddings.cols(),
        });
    }

    let mut value = 0.0;
    let mut grad_e = Mat64::zeros(embeddings.rows(), d);
    let mut grad_heads = Vec::with_capacity(schedule.len());
    for (head, (m, weight)) in heads.iter().zip(schedule.iter()) {
        let part = if m == d {
            aam_softmax_loss(head, embeddings, labels, cfg)?
        } else {
            aam_softmax_loss(head, &truncate_columns(embeddings, m)?, labels, cfg)?
        };
        value += weight * part.value;
        for i in 0..embeddings.rows() {
            for (o, g) in grad_e.row_mut(i)[..m]
                .iter_mut()
                .zip(part.grad_embeddings.row(i))
            {
                *o += weight * g;
            }
        }
        let mut gw = part
            .grad_heads
            .into_iter()
            .next()
            .expect("one head gradient");
        gw.scale(weight);
        grad_heads.push(gw);
    }

    Ok(LossOutput {
        value,
        grad_embeddings: grad_e,
        grad_heads,
    })
}
