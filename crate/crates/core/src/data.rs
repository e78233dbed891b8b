//! Synthetic speaker corpus and verification trial lists.
//!
//! Each speaker `s` has a mean `μ_s ~ N(0, I_F)`. Utterance `u` of that
//! speaker draws a channel offset `c_u ~ N(0, σ_c² I)` and every frame is
//! `μ_s + c_u + N(0, σ_w² I)`. Frame values are rounded through `f32` at
//! generation time so the feature file round-trips losslessly.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{MvecError, Result};
use crate::math::{Mat64, Prng};

pub const FEATURE_MAGIC: &[u8; 4] = b"MVFT";
pub const FEATURE_VERSION: u32 = 1;

/// `T × F` frame matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Mat64,
}

impl FeatureSequence {
    pub fn new(frames: Mat64) -> Self {
        Self { frames }
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::new(Mat64::from_rows(frames)?))
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn frames(&self) -> &Mat64 {
        &self.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Eval),
            other => Err(MvecError::Format(format!("bad split tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Position in the corpus; used as the utterance id everywhere.
    pub id: u64,
    pub speaker: u32,
    pub split: Split,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub num_speakers: usize,
    pub utterances: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.feat_dim())
    }

    pub fn get(&self, id: u64) -> Option<&Utterance> {
        self.utterances
            .get(usize::try_from(id).ok()?)
            .filter(|u| u.id == id)
    }

    /// Checks the split invariants: every speaker in both splits, ids equal
    /// to positions, labels in range.
    pub fn validate(&self) -> Result<()> {
        let mut train = vec![false; self.num_speakers];
        let mut eval = vec![false; self.num_speakers];
        for (i, u) in self.utterances.iter().enumerate() {
            if u.id != i as u64 {
                return Err(MvecError::Format(format!(
                    "utterance {i} carries id {}",
                    u.id
                )));
            }
            let s = u.speaker as usize;
            if s >= self.num_speakers {
                return Err(MvecError::Label {
                    label: s,
                    classes: self.num_speakers,
                });
            }
            match u.split {
                Split::Train => train[s] = true,
                Split::Eval => eval[s] = true,
            }
        }
        if let Some(s) = (0..self.num_speakers).find(|&s| !train[s] || !eval[s]) {
            return Err(MvecError::Generation(format!(
                "speaker {s} missing from a split"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    /// Trailing utterances of each speaker that go to the eval split.
    pub eval_utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub feat_dim: usize,
    pub intra_spread: f64,
    pub channel_spread: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 200,
            utts_per_speaker: 14,
            eval_utts_per_speaker: 6,
            frames_per_utt: 20,
            feat_dim: 20,
            intra_spread: 0.3,
            channel_spread: 0.5,
            seed: 1234,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.frames_per_utt == 0 || self.feat_dim == 0 {
            return Err(MvecError::Config("corpus counts must be >= 1".into()));
        }
        if self.eval_utts_per_speaker == 0 || self.eval_utts_per_speaker >= self.utts_per_speaker {
            return Err(MvecError::Config(format!(
                "eval_utts_per_speaker must be in 1..{}, got {}",
                self.utts_per_speaker, self.eval_utts_per_speaker
            )));
        }
        if !(self.intra_spread >= 0.0 && self.channel_spread >= 0.0) {
            return Err(MvecError::Config("spreads must be >= 0".into()));
        }
        Ok(())
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let f = spec.feat_dim;
    let mut means_rng = Prng::for_purpose(spec.seed, "data/means");
    let means: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| (0..f).map(|_| means_rng.normal()).collect())
        .collect();

    let mut rng = Prng::for_purpose(spec.seed, "data/utterances");
    let train_count = spec.utts_per_speaker - spec.eval_utts_per_speaker;
    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utts_per_speaker);
    for (s, mu) in means.iter().enumerate() {
        for u in 0..spec.utts_per_speaker {
            let channel: Vec<f64> = (0..f).map(|_| spec.channel_spread * rng.normal()).collect();
            let mut data = Vec::with_capacity(spec.frames_per_utt * f);
            for _ in 0..spec.frames_per_utt {
                for j in 0..f {
                    data.push(round_f32(
                        mu[j] + channel[j] + spec.intra_spread * rng.normal(),
                    ));
                }
            }
            utterances.push(Utterance {
                id: utterances.len() as u64,
                speaker: s as u32,
                split: if u < train_count {
                    Split::Train
                } else {
                    Split::Eval
                },
                features: FeatureSequence::new(Mat64::from_vec(spec.frames_per_utt, f, data)?),
            });
        }
    }
    Ok(SyntheticCorpus {
        num_speakers: spec.num_speakers,
        utterances,
    })
}

pub fn write_features<W: Write>(corpus: &SyntheticCorpus, mut w: W) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(u32_count(corpus.utterances.len())?)?;
    for u in &corpus.utterances {
        w.write_u32::<LittleEndian>(u.speaker)?;
        w.write_u8(u.split.to_byte())?;
        w.write_u32::<LittleEndian>(u32_count(u.features.num_frames())?)?;
        w.write_u32::<LittleEndian>(u32_count(u.features.feat_dim())?)?;
        for &x in u.features.frames().as_slice() {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MvecError::Format(format!("count {n} exceeds u32")))
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| MvecError::Format("file too short for header".into()))?;
    if &buf != magic {
        return Err(MvecError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != version {
        return Err(MvecError::Format(format!(
            "unsupported version {v}, expected {version}"
        )));
    }
    Ok(())
}

/// Reads a feature file. The speaker count is one past the largest id.
pub fn read_features<R: Read>(mut r: R) -> Result<SyntheticCorpus> {
    read_magic(&mut r, FEATURE_MAGIC, FEATURE_VERSION)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut utterances = Vec::with_capacity(n.min(1 << 20));
    let mut num_speakers = 0usize;
    for i in 0..n {
        let speaker = r.read_u32::<LittleEndian>()?;
        let split = Split::from_byte(r.read_u8()?)?;
        let t = r.read_u32::<LittleEndian>()? as usize;
        let f = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0f32; t * f];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        num_speakers = num_speakers.max(speaker as usize + 1);
        utterances.push(Utterance {
            id: i as u64,
            speaker,
            split,
            features: FeatureSequence::new(Mat64::from_vec(
                t,
                f,
                data.into_iter().map(f64::from).collect(),
            )?),
        });
    }
    Ok(SyntheticCorpus {
        num_speakers,
        utterances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: u64,
    pub test: u64,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn num_nontargets(&self) -> usize {
        self.len() - self.num_targets()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trials {
            writeln!(w, "{}\t{}\t{}", t.enroll, t.test, u8::from(t.target))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut trials = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || MvecError::Format(format!("trial line {}: '{line}'", lineno + 1));
            let mut parts = line.split('\t');
            let enroll = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let test = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let target = match parts.next() {
                Some("1") => true,
                Some("0") => false,
                _ => return Err(bad()),
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            trials.push(Trial {
                enroll,
                test,
                target,
            });
        }
        Ok(Self { trials })
    }
}

fn unordered(a: u64, b: u64) -> (u64, u64) {
    (a.min(b), a.max(b))
}

/// Samples target and nontarget trials from the eval split.
///
/// Per speaker, up to `targets_per_speaker` same-speaker pairs and up to
/// `nontargets_per_speaker` cross-speaker pairs (the speaker's utterance as
/// enrollment) are drawn without replacement; an unordered pair is never
/// used twice.
pub fn build_trials(
    corpus: &SyntheticCorpus,
    targets_per_speaker: usize,
    nontargets_per_speaker: usize,
    seed: u64,
) -> Result<TrialList> {
    let mut by_speaker: Vec<Vec<u64>> = vec![Vec::new(); corpus.num_speakers];
    for u in corpus.split(Split::Eval) {
        by_speaker[u.speaker as usize].push(u.id);
    }
    if let Some(s) = by_speaker.iter().position(|ids| ids.len() < 2) {
        return Err(MvecError::Generation(format!(
            "speaker {s} has {} eval utterances, need at least 2",
            by_speaker[s].len()
        )));
    }

    let mut rng = Prng::for_purpose(seed, "trials");
    let mut used: HashSet<(u64, u64)> = HashSet::new();
    let mut trials = Vec::new();

    for (s, own) in by_speaker.iter().enumerate() {
        let mut pairs: Vec<(u64, u64)> = Vec::new();
        for (i, &a) in own.iter().enumerate() {
            for &b in &own[i + 1..] {
                pairs.push((a, b));
            }
        }
        rng.shuffle(&mut pairs);
        for (a, b) in pairs.into_iter().take(targets_per_speaker) {
            used.insert(unordered(a, b));
            trials.push(Trial {
                enroll: a,
                test: b,
                target: true,
            });
        }

        if nontargets_per_speaker == 0 {
            continue;
        }
        let mut cross: Vec<(u64, u64)> = Vec::new();
        for &a in own {
            for (t, others) in by_speaker.iter().enumerate() {
                if t != s {
                    cross.extend(others.iter().map(|&b| (a, b)));
                }
            }
        }
        rng.shuffle(&mut cross);
        let mut taken = 0;
        for (a, b) in cross {
            if taken == nontargets_per_speaker {
                break;
            }
            if used.insert(unordered(a, b)) {
                trials.push(Trial {
                    enroll: a,
                    test: b,
                    target: false,
                });
                taken += 1;
            }
        }
    }
    Ok(TrialList { trials })
}
