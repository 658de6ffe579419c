//! The desk-scale reference task: 50 synthetic speakers, 40 for training
//! and 10 held out for enrolment and test trials.

use crate::corpus::{generate_corpus, make_trials, split_corpus, CorpusSpec, CorpusSplit, TrialList, Utterance};
use crate::embedder::EmbedderConfig;
use crate::error::Result;
use crate::model::Model;
use crate::trainer::TrainConfig;

pub const TRAIN_CLASS_FRACTION: f64 = 0.8;
pub const TARGET_TRIALS: usize = 400;
pub const NONTARGET_TRIALS: usize = 400;

/// Generated corpus, split and trials for one seed.
#[derive(Clone, Debug)]
pub struct ReferenceTask {
    pub spec: CorpusSpec,
    pub split: CorpusSplit,
    pub trials: TrialList,
}

impl ReferenceTask {
    pub fn corpus_spec(seed: u64, skew_factor: f64) -> CorpusSpec {
        CorpusSpec {
            n_speakers: 50,
            utts_per_speaker: 20,
            frames_per_utt: 50,
            feat_dim: 20,
            speaker_spread: 1.0,
            frame_noise: 0.5,
            skew_factor,
            seed,
        }
    }

    pub fn new(seed: u64, skew_factor: f64) -> Result<Self> {
        Self::from_spec(Self::corpus_spec(seed, skew_factor))
    }

    pub fn from_spec(spec: CorpusSpec) -> Result<Self> {
        let corpus = generate_corpus(&spec)?;
        let split = split_corpus(&corpus, TRAIN_CLASS_FRACTION, spec.seed)?;
        let trials = make_trials(&split.test, TARGET_TRIALS, NONTARGET_TRIALS, spec.seed)?;
        Ok(ReferenceTask { spec, split, trials })
    }

    pub fn n_train_classes(&self) -> usize {
        self.split.train.class_ids().len()
    }

    pub fn enrol(&self) -> Vec<&Utterance> {
        self.split.enrol.utterances.iter().collect()
    }

    pub fn init_model(&self, seed: u64) -> Result<Model> {
        let config = EmbedderConfig {
            feat_dim: self.spec.feat_dim,
            ..EmbedderConfig::default()
        };
        Model::init(config, self.n_train_classes(), 0.2, seed)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..TrainConfig::reference(self.n_train_classes())
        }
    }
}
