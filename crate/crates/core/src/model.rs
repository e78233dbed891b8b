//! Tiny embedding extractor and its trainer.
//!
//! Topology: per-frame affine + tanh (`F → H`), mean pooling over frames,
//! affine projection (`H → d`). The classifier heads `W(m)` sit on top of
//! the embedding prefixes during training only.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::debug;
use rayon::prelude::*;

use crate::data::{FeatureSequence, Split, SyntheticCorpus};
use crate::error::{MvecError, Result};
use crate::losses::{mrl_combined_loss, MarginConfig, PrefixSchedule};
use crate::math::{Mat64, Prng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `H × F`; row `h` produces hidden unit `h`.
    pub frame_weights: Mat64,
    pub frame_bias: Vec<f64>,
    /// `d × H`.
    pub proj_weights: Mat64,
    pub proj_bias: Vec<f64>,
}

impl EncoderParams {
    pub fn feat_dim(&self) -> usize {
        self.frame_weights.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.frame_weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_weights.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frame_weights: Mat64::zeros(self.hidden_dim(), self.feat_dim()),
            frame_bias: vec![0.0; self.hidden_dim()],
            proj_weights: Mat64::zeros(self.embed_dim(), self.hidden_dim()),
            proj_bias: vec![0.0; self.embed_dim()],
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim(), self.embed_dim());
        if self.frame_bias.len() != h {
            return Err(MvecError::Dimension {
                expected: h,
                got: self.frame_bias.len(),
            });
        }
        if self.proj_weights.cols() != h {
            return Err(MvecError::Dimension {
                expected: h,
                got: self.proj_weights.cols(),
            });
        }
        if self.proj_bias.len() != d {
            return Err(MvecError::Dimension {
                expected: d,
                got: self.proj_bias.len(),
            });
        }
        Ok(())
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.frame_weights.as_mut_slice(),
            &mut self.frame_bias,
            self.proj_weights.as_mut_slice(),
            &mut self.proj_bias,
        ]
    }

    fn slices(&self) -> [&[f64]; 4] {
        [
            self.frame_weights.as_slice(),
            &self.frame_bias,
            self.proj_weights.as_slice(),
            &self.proj_bias,
        ]
    }
}

/// One classifier matrix `W(m)` (`speakers × m`) per prefix dimension,
/// in ascending `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHeads {
    heads: Vec<Mat64>,
}

impl ClassifierHeads {
    pub fn from_matrices(heads: Vec<Mat64>) -> Result<Self> {
        let rows = heads.first().map(Mat64::rows).unwrap_or(0);
        if let Some(h) = heads.iter().find(|h| h.rows() != rows) {
            return Err(MvecError::Config(format!(
                "heads disagree on speaker count: {} vs {rows}",
                h.rows()
            )));
        }
        if heads.windows(2).any(|w| w[0].cols() >= w[1].cols()) {
            return Err(MvecError::Config(
                "head widths must be strictly increasing".into(),
            ));
        }
        Ok(Self { heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mat64> {
        self.heads.iter()
    }

    pub fn get(&self, i: usize) -> &Mat64 {
        &self.heads[i]
    }

    pub fn dims(&self) -> Vec<usize> {
        self.heads.iter().map(Mat64::cols).collect()
    }

    pub fn num_speakers(&self) -> usize {
        self.heads.first().map_or(0, Mat64::rows)
    }

    pub fn as_slice(&self) -> &[Mat64] {
        &self.heads
    }

    fn as_mut_slice(&mut self) -> &mut [Mat64] {
        &mut self.heads
    }
}

/// Shapes for [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_speakers: usize,
}

fn xavier(rows: usize, cols: usize, rng: &mut Prng) -> Mat64 {
    // fan_in = cols, fan_out = rows
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-a, a)).collect();
    Mat64::from_vec(rows, cols, data).expect("shape matches")
}

/// Xavier-uniform weights, zero biases. Every matrix has its own stream,
/// so the encoder initialization does not depend on which heads exist.
pub fn init_params(
    seed: u64,
    dims: ModelDims,
    head_dims: &[usize],
) -> (EncoderParams, ClassifierHeads) {
    let ModelDims {
        feat_dim,
        hidden_dim,
        embed_dim,
        num_speakers,
    } = dims;
    let encoder = EncoderParams {
        frame_weights: xavier(
            hidden_dim,
            feat_dim,
            &mut Prng::for_purpose(seed, "init/frame"),
        ),
        frame_bias: vec![0.0; hidden_dim],
        proj_weights: xavier(
            embed_dim,
            hidden_dim,
            &mut Prng::for_purpose(seed, "init/proj"),
        ),
        proj_bias: vec![0.0; embed_dim],
    };
    let heads = head_dims
        .iter()
        .map(|&m| {
            xavier(
                num_speakers,
                m,
                &mut Prng::for_purpose(seed, &format!("init/head/{m}")),
            )
        })
        .collect();
    (encoder, ClassifierHeads { heads })
}

struct ForwardCache {
    hidden: Mat64,
    pooled: Vec<f64>,
}

fn check_utterance(params: &EncoderParams, utt: &FeatureSequence) -> Result<()> {
    if utt.num_frames() == 0 {
        return Err(MvecError::EmptyInput("utterance has no frames".into()));
    }
    if utt.feat_dim() != params.feat_dim() {
        return Err(MvecError::Dimension {
            expected: params.feat_dim(),
            got: utt.feat_dim(),
        });
    }
    Ok(())
}

fn forward(params: &EncoderParams, utt: &FeatureSequence) -> (Vec<f64>, ForwardCache) {
    let t_count = utt.num_frames();
    let h_dim = params.hidden_dim();
    let mut hidden = Mat64::zeros(t_count, h_dim);
    let mut pooled = vec![0.0; h_dim];
    for t in 0..t_count {
        let a = params.frame_weights.matvec(utt.frame(t));
        for ((hv, (av, b)), p) in hidden
            .row_mut(t)
            .iter_mut()
            .zip(a.iter().zip(&params.frame_bias))
            .zip(pooled.iter_mut())
        {
            *hv = (av + b).tanh();
            *p += *hv;
        }
    }
    let inv_t = 1.0 / t_count as f64;
    pooled.iter_mut().for_each(|p| *p *= inv_t);
    let mut e = params.proj_weights.matvec(&pooled);
    for (x, b) in e.iter_mut().zip(&params.proj_bias) {
        *x += b;
    }
    (e, ForwardCache { hidden, pooled })
}

/// Embedding for one utterance.
pub fn encode(params: &EncoderParams, utt: &FeatureSequence) -> Result<Vec<f64>> {
    check_utterance(params, utt)?;
    Ok(forward(params, utt).0)
}

/// Embeddings for every utterance of the corpus, in corpus order.
pub fn extract_embeddings(
    params: &EncoderParams,
    corpus: &SyntheticCorpus,
) -> Result<Vec<Vec<f64>>> {
    corpus
        .utterances
        .par_iter()
        .map(|u| encode(params, &u.features))
        .collect()
}

/// Accumulates parameter gradients for one utterance given `∂L/∂e`.
fn backward(
    params: &EncoderParams,
    utt: &FeatureSequence,
    cache: &ForwardCache,
    grad_e: &[f64],
    grads: &mut EncoderParams,
) {
    for (i, &g) in grad_e.iter().enumerate() {
        grads.proj_bias[i] += g;
        for (o, p) in grads.proj_weights.row_mut(i).iter_mut().zip(&cache.pooled) {
            *o += g * p;
        }
    }
    let grad_pooled = params.proj_weights.matvec_t(grad_e);
    let inv_t = 1.0 / utt.num_frames() as f64;
    let mut grad_pre = vec![0.0; params.hidden_dim()];
    for t in 0..utt.num_frames() {
        for ((gp, gpool), hv) in grad_pre
            .iter_mut()
            .zip(&grad_pooled)
            .zip(cache.hidden.row(t))
        {
            *gp = gpool * inv_t * (1.0 - hv * hv);
        }
        let x = utt.frame(t);
        for (h, &gp) in grad_pre.iter().enumerate() {
            grads.frame_bias[h] += gp;
            for (o, xv) in grads.frame_weights.row_mut(h).iter_mut().zip(x) {
                *o += gp * xv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Single head on the full embedding.
    BaselineFullDim,
    /// One head per prefix of the schedule.
    Mrl,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::BaselineFullDim => "baseline",
            TrainMode::Mrl => "mrl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" | "baseline_full_dim" => Ok(TrainMode::BaselineFullDim),
            "mrl" => Ok(TrainMode::Mrl),
            other => Err(MvecError::Config(format!(
                "unknown training mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub schedule: PrefixSchedule,
    pub margin: MarginConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 64,
            epochs: 20,
            batch_size: 64,
            learn_rate: 0.02,
            momentum: 0.9,
            seed: 1234,
            schedule: PrefixSchedule::uniform(vec![4, 8, 16, 32, 64]).expect("valid"),
            margin: MarginConfig::desk_default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(MvecError::Config(format!(
                "learn_rate must be >= 0, got {}",
                self.learn_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MvecError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(MvecError::Config(
                "batch_size, hidden_dim and embed_dim must be >= 1".into(),
            ));
        }
        if self.schedule.full_dim() != self.embed_dim {
            return Err(MvecError::Config(format!(
                "largest prefix {} must equal embed_dim {}",
                self.schedule.full_dim(),
                self.embed_dim
            )));
        }
        self.margin.validate()
    }

    /// The schedule actually optimized in `mode`.
    pub fn effective_schedule(&self, mode: TrainMode) -> Result<PrefixSchedule> {
        match mode {
            TrainMode::Mrl => Ok(self.schedule.clone()),
            TrainMode::BaselineFullDim => PrefixSchedule::full_only(self.embed_dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: EncoderParams,
    pub heads: ClassifierHeads,
    /// Mean minibatch loss per epoch.
    pub history: Vec<f64>,
}

/// Loss and gradients over one minibatch of utterances.
pub fn batch_gradients(
    encoder: &EncoderParams,
    heads: &ClassifierHeads,
    batch: &[(&FeatureSequence, usize)],
    schedule: &PrefixSchedule,
    margin: &MarginConfig,
) -> Result<(f64, EncoderParams, Vec<Mat64>)> {
    let mut caches = Vec::with_capacity(batch.len());
    let mut emb = Mat64::zeros(batch.len(), encoder.embed_dim());
    for (i, (utt, _)) in batch.iter().enumerate() {
        check_utterance(encoder, utt)?;
        let (e, cache) = forward(encoder, utt);
        emb.row_mut(i).copy_from_slice(&e);
        caches.push(cache);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let loss = mrl_combined_loss(heads, &emb, &labels, schedule, margin)?;
    let mut grads = encoder.zeros_like();
    for (i, ((utt, _), cache)) in batch.iter().zip(&caches).enumerate() {
        backward(encoder, utt, cache, loss.grad_embeddings.row(i), &mut grads);
    }
    Ok((loss.value, grads, loss.grad_heads))
}

fn momentum_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

/// Minibatch SGD with momentum on the training split.
///
/// Deterministic: the result depends only on the corpus and `cfg`.
pub fn train(corpus: &SyntheticCorpus, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainedModel> {
    cfg.validate()?;
    let schedule = cfg.effective_schedule(mode)?;
    let items: Vec<(&FeatureSequence, usize)> = corpus
        .split(Split::Train)
        .map(|u| (&u.features, u.speaker as usize))
        .collect();
    if items.is_empty() {
        return Err(MvecError::EmptyInput("no training utterances".into()));
    }
    if let Some(&(_, y)) = items.iter().find(|(_, y)| *y >= corpus.num_speakers) {
        return Err(MvecError::Label {
            label: y,
            classes: corpus.num_speakers,
        });
    }
    let feat_dim = items[0].0.feat_dim();
    let dims = ModelDims {
        feat_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        num_speakers: corpus.num_speakers,
    };
    let (mut encoder, mut heads) = init_params(cfg.seed, dims, schedule.dims());
    let mut enc_vel = encoder.zeros_like();
    let mut head_vel: Vec<Mat64> = heads
        .iter()
        .map(|h| Mat64::zeros(h.rows(), h.cols()))
        .collect();

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle = Prng::for_purpose(cfg.seed, "train/shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&FeatureSequence, usize)> = chunk.iter().map(|&i| items[i]).collect();
            let (value, enc_grad, head_grads) =
                batch_gradients(&encoder, &heads, &batch, &schedule, &cfg.margin)?;
            if !value.is_finite() {
                return Err(MvecError::TrainingDiverged { epoch });
            }
            total += value;
            batches += 1;

            for ((p, v), g) in encoder
                .slices_mut()
                .into_iter()
                .zip(enc_vel.slices_mut())
                .zip(enc_grad.slices())
            {
                momentum_step(p, v, g, cfg.learn_rate, cfg.momentum);
            }
            for ((w, v), g) in heads
                .as_mut_slice()
                .iter_mut()
                .zip(&mut head_vel)
                .zip(&head_grads)
            {
                momentum_step(
                    w.as_mut_slice(),
                    v.as_mut_slice(),
                    g.as_slice(),
                    cfg.learn_rate,
                    cfg.momentum,
                );
            }
        }
        let mean = total / batches as f64;
        if !mean.is_finite()
            || !encoder
                .slices()
                .iter()
                .all(|s| s.iter().all(|x| x.is_finite()))
        {
            return Err(MvecError::TrainingDiverged { epoch });
        }
        debug!("{} epoch {epoch}: loss {mean:.6}", mode.as_str());
        history.push(mean);
    }
    Ok(TrainedModel {
        encoder,
        heads,
        history,
    })
}

fn write_matrix<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let to_u32 =
        |n: usize| u32::try_from(n).map_err(|_| MvecError::Format(format!("{n} exceeds u32")));
    w.write_u32::<LittleEndian>(to_u32(rows)?)?;
    w.write_u32::<LittleEndian>(to_u32(cols)?)?;
    for &x in data {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Returns `None` on a clean end of file before the next matrix.
fn read_matrix<R: Read>(r: &mut R) -> Result<Option<Mat64>> {
    let mut first = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut first[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    match got {
        0 => return Ok(None),
        4 => {}
        _ => return Err(MvecError::Format("truncated matrix header".into())),
    }
    let rows = u32::from_le_bytes(first) as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|_| MvecError::Format("truncated matrix payload".into()))?;
    Ok(Some(Mat64::from_vec(rows, cols, data)?))
}

/// Checkpoint layout after the magic and version: frame weights `H×F`,
/// frame bias `1×H`, projection weights `d×H`, projection bias `1×d`, then
/// one head per prefix in ascending width, until end of file.
pub fn write_checkpoint<W: Write>(
    encoder: &EncoderParams,
    heads: &ClassifierHeads,
    mut w: W,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let fw = &encoder.frame_weights;
    write_matrix(&mut w, fw.rows(), fw.cols(), fw.as_slice())?;
    write_matrix(&mut w, 1, encoder.frame_bias.len(), &encoder.frame_bias)?;
    let pw = &encoder.proj_weights;
    write_matrix(&mut w, pw.rows(), pw.cols(), pw.as_slice())?;
    write_matrix(&mut w, 1, encoder.proj_bias.len(), &encoder.proj_bias)?;
    for h in heads.iter() {
        write_matrix(&mut w, h.rows(), h.cols(), h.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderParams, ClassifierHeads)> {
    crate::data::read_magic(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut mats = Vec::new();
    while let Some(m) = read_matrix(&mut r)? {
        mats.push(m);
    }
    if mats.len() < 4 {
        return Err(MvecError::Format(format!(
            "checkpoint holds {} matrices, need >= 4",
            mats.len()
        )));
    }
    let heads = mats.split_off(4);
    let mut it = mats.into_iter();
    let frame_weights = it.next().expect("len checked");
    let frame_bias = it.next().expect("len checked").as_slice().to_vec();
    let proj_weights = it.next().expect("len checked");
    let proj_bias = it.next().expect("len checked").as_slice().to_vec();
    let encoder = EncoderParams {
        frame_weights,
        frame_bias,
        proj_weights,
        proj_bias,
    };
    encoder
        .validate()
        .map_err(|e| MvecError::Format(format!("inconsistent encoder shapes: {e}")))?;
    let heads = ClassifierHeads::from_matrices(heads)
        .map_err(|e| MvecError::Format(format!("inconsistent heads: {e}")))?;
    Ok((encoder, heads))
}
