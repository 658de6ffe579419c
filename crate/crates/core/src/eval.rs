//! Embedding extraction, cosine trial scoring, equal error rate, KL-to-uniform
//! and the bootstrap ranked-probability curve.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, TrialList, Utterance};
use crate::embedder::EmbedderParams;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, stream_rng};
use crate::schedule::{class_probabilities, ProbabilityLogits};

/// Embeddings keyed by utterance id.
pub type Embeddings = BTreeMap<String, Array1<f64>>;

/// Full-utterance embeddings, extracted in parallel.
pub fn extract_all<T: Real>(embedder: &EmbedderParams<T>, utterances: &[&Utterance]) -> Result<Embeddings> {
    let out: Vec<(String, Array1<f64>)> = utterances
        .par_iter()
        .map(|u| Ok((u.utt_id.clone(), embedder.embed(&u.features)?.mapv(T::as_f64))))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().collect())
}

pub fn cosine_score(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::DegenerateEmbedding("cannot score a zero embedding".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub is_target: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        let s = ScoredTrials { scores, is_target };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.is_target.len() {
            return Err(Error::Shape("scores and labels differ in length".into()));
        }
        if let Some(bad) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score {bad} is {}", self.scores[bad])));
        }
        if self.n_target() == 0 || self.n_nontarget() == 0 {
            return Err(Error::Trial(format!(
                "need at least one target and one nontarget trial, got {} and {}",
                self.n_target(),
                self.n_nontarget()
            )));
        }
        Ok(())
    }

    pub fn n_target(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.is_target.len() - self.n_target()
    }
}

/// Cosine scores for every trial; both sides must have embeddings.
pub fn score_trials(embeddings: &Embeddings, trials: &TrialList) -> Result<ScoredTrials> {
    let lookup = |id: &str| embeddings.get(id).ok_or_else(|| Error::Lookup(id.to_string()));
    let scores = trials
        .trials
        .iter()
        .map(|t| cosine_score(lookup(&t.utt_a)?.view(), lookup(&t.utt_b)?.view()))
        .collect::<Result<Vec<_>>>()?;
    ScoredTrials::new(scores, trials.trials.iter().map(|t| t.is_target).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    /// All scores were equal, so the crossing carries no information.
    #[serde(skip)]
    pub degenerate: bool,
}

/// Equal error rate. Thresholds sweep the distinct scores plus one point
/// above the maximum (where everything is rejected); `FAR(t)` is the share of
/// nontargets scoring `>= t`, `FRR(t)` the share of targets `< t`. The rate is
/// linearly interpolated between the two adjacent operating points where
/// `FAR - FRR` changes sign (exactly at a point where it is zero).
pub fn eer(scored: &ScoredTrials) -> Result<EerResult> {
    scored.validate()?;
    let n_tar = scored.n_target() as f64;
    let n_non = scored.n_nontarget() as f64;
    let mut pairs: Vec<(f64, bool)> = scored
        .scores
        .iter()
        .copied()
        .zip(scored.is_target.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Operating points (threshold, FAR, FRR) in increasing threshold order.
    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        points.push((t, (n_non - non_below as f64) / n_non, tar_below as f64 / n_tar));
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    let max = pairs[pairs.len() - 1].0;
    points.push((max, 0.0, 1.0));
    let degenerate = points.len() == 2;
    if degenerate {
        log::warn!("all {} scores are equal; the EER is uninformative", pairs.len());
    }
    Ok(crossing(&points, degenerate))
}

fn crossing(points: &[(f64, f64, f64)], degenerate: bool) -> EerResult {
    let diff = |p: &(f64, f64, f64)| p.1 - p.2;
    let k = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .expect("the last operating point has FAR - FRR = -1");
    let (t1, far1, frr1) = points[k];
    if diff(&points[k]) == 0.0 || k == 0 {
        return EerResult {
            eer: far1,
            threshold: t1,
            degenerate,
        };
    }
    let (t0, far0, frr0) = points[k - 1];
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let a = d0 / (d0 - d1);
    EerResult {
        eer: far0 + a * (far1 - far0),
        threshold: t0 + a * (t1 - t0),
        degenerate,
    }
}

/// `sum_i p_i ln(p_i M)` in nats, with `0 ln 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    let kl: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * m).ln()).sum();
    // Rounding can leave a near-uniform sum a few ulps below zero.
    kl.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub p_median: f64,
    pub p_low: f64,
    pub p_high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedProbabilityReport {
    pub rows: Vec<RankRow>,
    /// The average probability on the data as given, sorted descending.
    pub point: Vec<f64>,
    pub n_bootstrap: usize,
}

impl RankedProbabilityReport {
    /// CSV `rank,p_median,p_low,p_high`, ranks from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,p_median,p_low,p_high\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.rank, r.p_median, r.p_low, r.p_high));
        }
        out
    }
}

/// Quantile with linear interpolation between order statistics (the
/// `(n - 1) q` rule). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const BAND_LOW: f64 = 0.025;
pub const BAND_HIGH: f64 = 0.975;

/// Ranked average class probabilities with bootstrap bands. Each replica
/// draws classes with replacement, then, for each drawn class, as many
/// utterances as it has, with replacement; its average probability vector is
/// sorted descending. Bands are per-rank quantiles over replicas.
pub fn bootstrap_ranked_probabilities<T: Real>(
    embedder: &EmbedderParams<T>,
    weight: ArrayView2<'_, T>,
    data: &LabeledCorpus,
    n_bootstrap: usize,
    seed: u64,
    logits: ProbabilityLogits,
) -> Result<RankedProbabilityReport> {
    if n_bootstrap == 0 {
        return Err(Error::validation("eval.n_bootstrap", "must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyData("bootstrap needs at least one utterance".into()));
    }
    let probs: Vec<Array1<f64>> = data
        .utterances
        .par_iter()
        .map(|u| class_probabilities(embedder.embed(&u.features)?.view(), weight, logits))
        .collect::<Result<_>>()?;
    let groups: Vec<Vec<usize>> = data.by_class().into_values().collect();
    let m = weight.nrows();

    let sorted_desc = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let mean_of = |idx: &[usize]| {
        let mut sum = Array1::<f64>::zeros(m);
        for &i in idx {
            sum += &probs[i];
        }
        (sum / idx.len() as f64).to_vec()
    };
    let all: Vec<usize> = (0..probs.len()).collect();
    let point = sorted_desc(mean_of(&all));

    let curves: Vec<Vec<f64>> = (0..n_bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, rng::BOOTSTRAP_BASE + r as u64);
            let mut picked = Vec::with_capacity(probs.len());
            for _ in 0..groups.len() {
                let g = &groups[rng.random_range(0..groups.len())];
                for _ in 0..g.len() {
                    picked.push(g[rng.random_range(0..g.len())]);
                }
            }
            sorted_desc(mean_of(&picked))
        })
        .collect();

    let rows = (0..m)
        .map(|k| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[k]).collect();
            col.sort_by(f64::total_cmp);
            RankRow {
                rank: k + 1,
                p_median: quantile(&col, 0.5),
                p_low: quantile(&col, BAND_LOW),
                p_high: quantile(&col, BAND_HIGH),
            }
        })
        .collect();
    Ok(RankedProbabilityReport {
        rows,
        point,
        n_bootstrap,
    })
}

/// Scores file: `utt_a<TAB>utt_b<TAB>score<TAB>{1|0}` per trial.
pub fn format_scores(trials: &TrialList, scored: &ScoredTrials) -> String {
    let mut out = String::new();
    for (t, s) in trials.trials.iter().zip(&scored.scores) {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", t.utt_a, t.utt_b, s, u8::from(t.is_target)));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoredTrials> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::Trial(format!("scores line {}: {why}", n + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        scores.push(fields[2].parse::<f64>().map_err(|_| bad("score is not a number"))?);
        labels.push(match fields[3] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 1 or 0")),
        });
    }
    ScoredTrials::new(scores, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl EerReport {
    pub fn new(result: &EerResult, scored: &ScoredTrials) -> Self {
        EerReport {
            eer: result.eer,
            threshold: result.threshold,
            n_target: scored.n_target(),
            n_nontarget: scored.n_nontarget(),
        }
    }
}
