//! End-to-end dimension experiment: generate a corpus, train a full-dim
//! baseline and a Matryoshka model, and sweep EER over prefix dims.

use std::collections::HashMap;

use log::info;

use crate::config::ExperimentConfig;
use crate::data::{build_trials, generate, Split, SyntheticCorpus, TrialList};
use crate::error::Result;
use crate::eval::{dimension_sweep, DimensionSweepReport};
use crate::model::{extract_embeddings, train, TrainMode, TrainedModel};

pub const BASELINE: &str = "baseline";
pub const MRL: &str = "mrl";

pub struct ExperimentOutcome {
    pub corpus: SyntheticCorpus,
    pub trials: TrialList,
    pub baseline: TrainedModel,
    pub mrl: TrainedModel,
    pub report: DimensionSweepReport,
}

/// Embeddings of the eval split keyed by utterance id.
pub fn eval_embeddings(
    model: &TrainedModel,
    corpus: &SyntheticCorpus,
) -> Result<HashMap<u64, Vec<f64>>> {
    let all = extract_embeddings(&model.encoder, corpus)?;
    Ok(corpus
        .utterances
        .iter()
        .zip(all)
        .filter(|(u, _)| u.split == Split::Eval)
        .map(|(u, e)| (u.id, e))
        .collect())
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let corpus = generate(&cfg.data)?;
    let trials = build_trials(
        &corpus,
        cfg.eval.targets_per_speaker,
        cfg.eval.nontargets_per_speaker,
        cfg.seed,
    )?;
    info!(
        "corpus: {} utterances, {} trials ({} target)",
        corpus.utterances.len(),
        trials.len(),
        trials.num_targets()
    );
    let baseline = train(&corpus, &cfg.train, TrainMode::BaselineFullDim)?;
    info!(
        "baseline final loss {:.4}",
        baseline.history.last().copied().unwrap_or(f64::NAN)
    );
    let mrl = train(&corpus, &cfg.train, TrainMode::Mrl)?;
    info!(
        "mrl final loss {:.4}",
        mrl.history.last().copied().unwrap_or(f64::NAN)
    );
    let systems = vec![
        (BASELINE.to_string(), eval_embeddings(&baseline, &corpus)?),
        (MRL.to_string(), eval_embeddings(&mrl, &corpus)?),
    ];
    let report = dimension_sweep(&systems, &trials, &cfg.eval_dims())?;
    Ok(ExperimentOutcome {
        corpus,
        trials,
        baseline,
        mrl,
        report,
    })
}
