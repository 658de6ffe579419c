//! The optimisation loop: batch composition, SGD with classical momentum,
//! learning-rate halving, and the schedule refreshes of both training from
//! scratch and fine-tuning.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, TrialList, Utterance};
use crate::embedder::{EmbedderGrads, EmbedderParams};
use crate::error::{Error, Result};
use crate::eval::{eer, extract_all, kl_to_uniform, score_trials};
use crate::head::{loss_and_grads, LossKind, LossSpec};
use crate::model::Model;
use crate::rng::{self, stream_rng, Rng};
use crate::schedule::{
    p_average, ClassHead, DataView, DropConfig, DropMode, DropState, HeadRow, ProbabilityLogits, RefreshEvent,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Length of the random crop taken from each utterance.
    pub frames_per_example: usize,
    /// Initial learning rate. Fine-tuning ignores it and continues from the
    /// checkpoint's rate.
    pub lr: f64,
    pub momentum: f64,
    /// Iterations at whose start the learning rate halves.
    pub lr_halving: Vec<usize>,
    pub loss: LossSpec,
    pub drop: DropConfig,
    pub probability_logits: ProbabilityLogits,
    pub seed: u64,
}

/// Halving points at 60, 80, 90 and 110 of every 120 iterations.
pub fn default_halvings(iterations: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = [60, 80, 90, 110]
        .iter()
        .map(|&k| iterations * k / 120)
        .filter(|&s| s > 0 && s < iterations)
        .collect();
    steps.dedup();
    steps
}

impl TrainConfig {
    /// The desk-scale training recipe for `n_classes` head rows.
    pub fn reference(n_classes: usize) -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 16,
            frames_per_example: 40,
            lr: 0.2,
            momentum: 0.5,
            lr_halving: default_halvings(2000),
            loss: LossSpec::default_for(LossKind::CosFace, n_classes),
            drop: DropConfig::default(),
            probability_logits: ProbabilityLogits::Raw,
            seed: 0,
        }
    }

    /// The fine-tuning recipe: 500 iterations, no halving.
    pub fn reference_adapt(n_classes: usize) -> Self {
        TrainConfig {
            iterations: 500,
            lr_halving: Vec::new(),
            ..Self::reference(n_classes)
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation("train.batch_size", "must be >= 2"));
        }
        if self.frames_per_example == 0 {
            return Err(Error::validation("train.frames_per_example", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation(
                "train.lr",
                format!("must be finite and > 0, got {}", self.lr),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(
                "train.momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if self.lr_halving.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "train.lr_halving",
                "steps must be strictly increasing",
            ));
        }
        if let Some(&last) = self.lr_halving.last() {
            if last >= self.iterations {
                return Err(Error::validation(
                    "train.lr_halving",
                    format!("step {last} is not below the {} iterations", self.iterations),
                ));
            }
        }
        self.loss.validate()?;
        self.drop.validate(n_classes)?;
        Ok(())
    }
}

/// One training example: a crop and the head row it is labelled with.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Array2<f32>,
    pub label: usize,
}

/// `batch_size` examples from distinct labels chosen uniformly without
/// replacement, one uniformly chosen utterance each, cropped to a random
/// contiguous window of `frames` frames (whole utterance if shorter). With
/// fewer labels than `batch_size`, every label is used once.
pub fn compose_batch(view: &DataView<'_>, batch_size: usize, frames: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    if view.is_empty() {
        return Err(Error::EmptyData("no training utterances in view".into()));
    }
    let groups: Vec<Vec<usize>> = view.by_label().into_iter().filter(|g| !g.is_empty()).collect();
    let b = if groups.len() < batch_size {
        log::warn!(
            "only {} labels hold data, batch reduced from {batch_size}",
            groups.len()
        );
        groups.len()
    } else {
        batch_size
    };
    let picked = index::sample(rng, groups.len(), b);
    let mut batch = Vec::with_capacity(b);
    for g in picked {
        let group = &groups[g];
        let (utt, label) = view.utterance(group[rng.random_range(0..group.len())]);
        let t = utt.n_frames();
        let features = if t <= frames {
            utt.features.clone()
        } else {
            let start = rng.random_range(0..=t - frames);
            utt.features.slice(ndarray::s![start..start + frames, ..]).to_owned()
        };
        batch.push(Example { features, label });
    }
    Ok(batch)
}

/// Momentum buffers, shaped like the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    pub embedder: EmbedderGrads<f32>,
    pub head: ClassHead<f32>,
}

impl Velocity {
    pub fn zeros(embedder: &EmbedderParams<f32>, head: &ClassHead<f32>) -> Self {
        Velocity {
            embedder: EmbedderGrads::zeros_like(embedder.config()),
            head: ClassHead::zeros_like(head),
        }
    }
}

/// Batch-mean gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub embedder: EmbedderGrads<f32>,
    /// One row per entry of the head rows passed in.
    pub head: Array2<f32>,
    /// Per-example cosines and labels, for the AdaCos scale update.
    pub cosines: Vec<(Array1<f64>, usize)>,
}

/// Mean loss and gradients over `batch` for the head rows `rows`.
/// Examples run in parallel; their gradients are summed in batch order.
pub fn batch_gradients(
    embedder: &EmbedderParams<f32>,
    head: &ClassHead<f32>,
    rows: &[HeadRow],
    batch: &[Example],
    spec: &LossSpec,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty batch".into()));
    }
    let weight = head.gather(rows)?;
    let parts: Vec<_> = batch
        .par_iter()
        .map(|ex| {
            let (h, cache) = embedder.forward(ex.features.view())?;
            let out = loss_and_grads(h.view(), weight.view(), ex.label, spec)?;
            let mut grads = EmbedderGrads::zeros_like(embedder.config());
            embedder.backward_into(&cache, out.grad_h.view(), &mut grads)?;
            Ok((out.loss, grads, out.grad_w, out.cosines))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = EmbedderGrads::zeros_like(embedder.config());
    let mut grad_w = Array2::zeros(weight.dim());
    let mut cosines = Vec::new();
    for ((l, g, gw, cos), ex) in parts.into_iter().zip(batch) {
        loss += f64::from(l);
        grads.add_assign(&g);
        grad_w += &gw;
        if let Some(c) = cos {
            cosines.push((c.mapv(f64::from), ex.label));
        }
    }
    let n = batch.len() as f32;
    grads.scale(1.0 / n);
    grad_w.mapv_inplace(|g| g / n);
    Ok(BatchGradients {
        loss: loss / batch.len() as f64,
        embedder: grads,
        head: grad_w,
        cosines,
    })
}

/// Classical momentum on one parameter tensor: `v <- mu v - lr g; p <- p + v`.
pub fn momentum_update(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// One optimiser step on the rows `rows`; the other head rows and their
/// velocity are not touched. Returns the batch-mean loss. A non-finite loss
/// or gradient fails before anything is updated.
#[allow(clippy::too_many_arguments)]
pub fn step(
    embedder: &mut EmbedderParams<f32>,
    head: &mut ClassHead<f32>,
    rows: &[HeadRow],
    batch: &[Example],
    spec: &mut LossSpec,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<f64> {
    let g = batch_gradients(embedder, head, rows, batch, spec)?;
    let grads_finite =
        g.embedder.slices().iter().all(|s| s.iter().all(|v| v.is_finite())) && g.head.iter().all(|v| v.is_finite());
    if !g.loss.is_finite() || !grads_finite {
        return Err(Error::Numeric(format!("non-finite loss ({}) or gradient", g.loss)));
    }
    let (lr, mu) = (lr as f32, momentum as f32);

    embedder.grads = g.embedder;
    for ((p, grad), v) in embedder
        .params_and_grads_mut()
        .into_iter()
        .zip(velocity.embedder.slices_mut())
    {
        momentum_update(p, grad, v, lr, mu);
    }

    if head.merged.is_some() && velocity.head.merged.is_none() {
        velocity.head.merged = Some(Array1::zeros(head.embed_dim()));
    }
    for (k, &row) in rows.iter().enumerate() {
        let grad = g.head.row(k);
        let mut v = velocity.head.row_mut(row)?;
        let mut p = head.row_mut(row)?;
        momentum_update(
            p.as_slice_mut().expect("contiguous row"),
            grad.as_slice().expect("contiguous row"),
            v.as_slice_mut().expect("contiguous row"),
            lr,
            mu,
        );
    }
    spec.adacos_update(&g.cosines);
    Ok(g.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Head rows taking part in the step.
    pub active_classes: usize,
    /// KL-to-uniform of the enrolment average probability under all class
    /// rows, on rows where a refresh measured it.
    pub kl_to_uniform: Option<f64>,
    pub eer: Option<f64>,
    /// Wall-clock time since the run started; kept out of the CSV so that
    /// logs stay reproducible.
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub refreshes: Vec<RefreshEvent>,
}

pub const METRICS_HEADER: &str = "iter,loss,lr,active_classes,kl_to_uniform,eer";

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::Parameter(format!(
                    "metrics rows must have increasing iterations, got {} after {}",
                    row.iteration, last.iteration
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                r.loss,
                r.lr,
                r.active_classes,
                opt(r.kl_to_uniform),
                opt(r.eer)
            ));
        }
        out
    }

    /// Refresh records, one `iter<TAB>mode<TAB>|R|<TAB>dropped` line each.
    pub fn refresh_records(&self) -> String {
        self.refreshes.iter().map(|e| e.record() + "\n").collect()
    }

    /// Average probabilities measured at refreshes, one CSV row each.
    pub fn probability_records(&self) -> String {
        self.refreshes
            .iter()
            .filter_map(|e| {
                e.p_full
                    .as_ref()
                    .map(|p| crate::schedule::probability_record(e.iteration, p.as_slice().expect("contiguous")) + "\n")
            })
            .collect()
    }
}

/// Exponential moving average with smoothing `2 / (window + 1)`.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => a + alpha * (v - a),
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Held-out trials scored during a run.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub test: &'a LabeledCorpus,
    pub trials: &'a TrialList,
    /// Scores after every `every` steps and after the last one.
    pub every: usize,
}

impl Validation<'_> {
    pub fn eer(&self, embedder: &EmbedderParams<f32>) -> Result<f64> {
        let index = self.test.index_by_id();
        let mut ids: Vec<&str> = self
            .trials
            .trials
            .iter()
            .flat_map(|t| [t.utt_a.as_str(), t.utt_b.as_str()])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let utts = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| &self.test.utterances[i])
                    .ok_or_else(|| Error::Lookup(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = extract_all(embedder, &utts)?;
        Ok(eer(&score_trials(&embeddings, self.trials)?)?.eer)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    /// The final model, or the last one before a numeric failure.
    pub model: Model,
    pub log: MetricsLog,
    /// KL-to-uniform of the enrolment average probability after the last
    /// step, under all `M` class rows and under the active head.
    pub final_kl_full: Option<f64>,
    pub final_kl_active: Option<f64>,
    /// Set when the run stopped early on a numeric failure.
    pub aborted: Option<Error>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Train,
    Adapt,
}

/// Trains a fresh model on `train` (class ids are head rows). Modes `none`
/// and `dropclass` only.
pub fn train(
    config: &TrainConfig,
    model: Model,
    train: &LabeledCorpus,
    enrol: &[&Utterance],
    validation: Option<Validation<'_>>,
) -> Result<RunOutcome> {
    if !matches!(config.drop.mode, DropMode::None | DropMode::DropClass) {
        return Err(Error::validation(
            "drop.mode",
            format!("{} is an adaptation mode; use adapt", config.drop.mode),
        ));
    }
    run(Phase::Train, config, model, train, enrol, validation)
}

/// Fine-tunes a trained model, starting from its final learning rate.
/// Every mode except `dropclass`.
pub fn adapt(
    config: &TrainConfig,
    model: Model,
    train: &LabeledCorpus,
    enrol: &[&Utterance],
    validation: Option<Validation<'_>>,
) -> Result<RunOutcome> {
    if config.drop.mode == DropMode::DropClass {
        return Err(Error::validation(
            "drop.mode",
            "dropclass is a training mode; use train",
        ));
    }
    run(Phase::Adapt, config, model, train, enrol, validation)
}

/// Class probabilities averaged over `enrol`, under all class rows and
/// under `rows`.
pub fn enrolment_kl(
    model: &Model,
    rows: &[HeadRow],
    enrol: &[&Utterance],
    logits: ProbabilityLogits,
) -> Result<(f64, f64)> {
    let full = p_average(&model.embedder, model.head.weight.view(), enrol, logits)?;
    let active = p_average(&model.embedder, model.head.gather(rows)?.view(), enrol, logits)?;
    Ok((
        kl_to_uniform(full.as_slice().expect("contiguous")),
        kl_to_uniform(active.as_slice().expect("contiguous")),
    ))
}

fn check_inputs(
    phase: Phase,
    config: &TrainConfig,
    model: &Model,
    train: &LabeledCorpus,
    enrol: &[&Utterance],
) -> Result<()> {
    let m = model.n_classes();
    model.validate()?;
    config.validate(m)?;
    if let Some(u) = train.utterances.iter().find(|u| u.class_id >= m) {
        return Err(Error::Label {
            label: u.class_id,
            classes: m,
        });
    }
    let feat_dim = model.embedder.config().feat_dim;
    if let Some(f) = train.feat_dim().filter(|&f| f != feat_dim) {
        return Err(Error::Shape(format!(
            "corpus has {f} features per frame, model expects {feat_dim}"
        )));
    }
    let mode = config.drop.mode;
    if mode.needs_enrolment() && enrol.is_empty() {
        return Err(Error::EmptyData(format!("{mode} needs enrolment data")));
    }
    let reduced = model.active.len() < m || model.head.merged.is_some();
    if reduced {
        let ok = match mode {
            DropMode::DropAdapt | DropMode::DropRandom => model.head.merged.is_none(),
            DropMode::DropAdaptCombine => true,
            _ => false,
        };
        if !ok {
            return Err(Error::validation(
                "drop.mode",
                format!("the model already dropped classes; {mode} cannot continue from it"),
            ));
        }
    }
    if mode.is_permanent() {
        let drops = config.drop.refreshes_in(config.iterations) * config.drop.count;
        if drops >= model.active.len() {
            return Err(Error::validation(
                "drop.D",
                format!(
                    "{} refreshes x D = {drops} would drop all {} active classes",
                    config.drop.refreshes_in(config.iterations),
                    model.active.len()
                ),
            ));
        }
    }
    if phase == Phase::Train && reduced {
        return Err(Error::validation("model", "training needs a model with all class rows"));
    }
    Ok(())
}

fn run(
    phase: Phase,
    config: &TrainConfig,
    mut model: Model,
    train: &LabeledCorpus,
    enrol: &[&Utterance],
    validation: Option<Validation<'_>>,
) -> Result<RunOutcome> {
    check_inputs(phase, config, &model, train, enrol)?;
    let started = Instant::now();
    let (batch_stream, schedule_stream) = match phase {
        Phase::Train => (rng::BATCHES, rng::SCHEDULE),
        Phase::Adapt => (rng::ADAPT_BATCHES, rng::ADAPT_SCHEDULE),
    };
    let mut batch_rng = stream_rng(config.seed, batch_stream);
    let mut drop = DropState::new(
        config.drop,
        model.n_classes(),
        config.probability_logits,
        stream_rng(config.seed, schedule_stream),
    )?;
    if model.active.len() < model.n_classes() {
        drop = drop.with_active(model.active.clone())?;
    }
    let mut lr = match phase {
        Phase::Train => config.lr,
        Phase::Adapt => model.lr,
    };
    let mut spec = config.loss.clone();
    let mut velocity = Velocity::zeros(&model.embedder, &model.head);
    let mut log = MetricsLog::default();
    let mut rows = drop.head_rows();
    let mut view = drop.data_view(train)?;
    let mut halvings = config.lr_halving.iter().peekable();

    for it in 0..config.iterations {
        if halvings.next_if(|&&h| h == it).is_some() {
            lr *= 0.5;
        }
        let mut kl = None;
        if drop.refresh_due() {
            let before = rows.clone();
            let event = drop.refresh(it, &model.embedder, &mut model.head, enrol)?;
            rows = drop.head_rows();
            view = drop.data_view(train)?;
            if rows != before {
                spec.on_active_classes_changed(rows.len());
            }
            kl = event.kl_full;
            log::debug!("{}", event.record());
            log.refreshes.push(event);
        }
        let batch = compose_batch(&view, config.batch_size, config.frames_per_example, &mut batch_rng)?;
        let last_good = (model.embedder.clone(), model.head.clone());
        let loss = match step(
            &mut model.embedder,
            &mut model.head,
            &rows,
            &batch,
            &mut spec,
            lr,
            config.momentum,
            &mut velocity,
        ) {
            Ok(loss) if model.embedder.is_finite() && model.head.is_finite() => loss,
            result => {
                let error = result
                    .err()
                    .unwrap_or_else(|| Error::Numeric(format!("parameters became non-finite at iteration {it}")));
                if !matches!(error, Error::Numeric(_)) {
                    return Err(error);
                }
                (model.embedder, model.head) = last_good;
                finish(&mut model, &drop, lr, it);
                log::error!("aborting at iteration {it}: {error}");
                return Ok(RunOutcome {
                    model,
                    log,
                    final_kl_full: None,
                    final_kl_active: None,
                    aborted: Some(error),
                });
            }
        };
        let scored = validation.filter(|v| v.every > 0 && ((it + 1) % v.every == 0 || it + 1 == config.iterations));
        let eer = scored.map(|v| v.eer(&model.embedder)).transpose()?;
        log.push(MetricsRow {
            iteration: it,
            loss,
            lr,
            active_classes: rows.len(),
            kl_to_uniform: kl,
            eer,
            elapsed: started.elapsed(),
        })?;
        drop.tick();
    }
    finish(&mut model, &drop, lr, config.iterations);
    let (final_kl_full, final_kl_active) = if enrol.is_empty() {
        (None, None)
    } else {
        let (full, active) = enrolment_kl(&model, &model.head_rows(), enrol, config.probability_logits)?;
        (Some(full), Some(active))
    };
    Ok(RunOutcome {
        model,
        log,
        final_kl_full,
        final_kl_active,
        aborted: None,
    })
}

/// Records the class set, rate and step count a run leaves behind.
fn finish(model: &mut Model, drop: &DropState, lr: f64, steps: usize) {
    if drop.mode().is_permanent() && drop.mode().masks_head() {
        model.active = drop.active().to_vec();
    }
    model.lr = lr;
    model.iterations += steps as u64;
}

/// A sample of `fraction` of `utterances` (at least one), drawn without
/// replacement and kept in input order.
pub fn sample_enrolment<'a>(utterances: &[&'a Utterance], fraction: f64, seed: u64) -> Result<Vec<&'a Utterance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(
            "train.enrol_fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    if utterances.is_empty() {
        return Err(Error::EmptyData("no enrolment utterances".into()));
    }
    let n = ((utterances.len() as f64 * fraction).round() as usize).clamp(1, utterances.len());
    let mut rng = stream_rng(seed, rng::ENROL_SAMPLE);
    let mut picked = index::sample(&mut rng, utterances.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| utterances[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_corpus, CorpusSpec};
    use crate::embedder::EmbedderConfig;

    fn corpus(n_speakers: usize, utts: usize) -> LabeledCorpus {
        generate_corpus(&CorpusSpec {
            n_speakers,
            utts_per_speaker: utts,
            frames_per_utt: 12,
            feat_dim: 4,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn small_model(n_classes: usize, seed: u64) -> Model {
        let config = EmbedderConfig {
            feat_dim: 4,
            hidden: vec![8, 8],
            embed_dim: 6,
            ..EmbedderConfig::default()
        };
        Model::init(config, n_classes, 0.2, seed).unwrap()
    }

    fn small_config(n_classes: usize, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            frames_per_example: 8,
            lr_halving: Vec::new(),
            ..TrainConfig::reference(n_classes)
        }
    }

    #[test]
    fn default_halvings_scale_the_reference_shape() {
        assert_eq!(default_halvings(120_000), vec![60_000, 80_000, 90_000, 110_000]);
        assert_eq!(default_halvings(2000), vec![1000, 1333, 1500, 1833]);
        assert_eq!(default_halvings(1), Vec::<usize>::new());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::reference(40);
        ok.validate(40).unwrap();
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::reference(40);
            f(&mut c);
            c.validate(40).unwrap_err()
        };
        bad(|c| c.batch_size = 1);
        bad(|c| c.lr = 0.0);
        bad(|c| c.momentum = 1.0);
        bad(|c| c.lr_halving = vec![5, 5]);
        bad(|c| c.lr_halving = vec![2000]);
        bad(|c| c.frames_per_example = 0);
    }

    #[test]
    fn batch_covers_every_class_when_b_equals_m() {
        let c = corpus(10, 3);
        let view = DataView::new(&c, 10, Some).unwrap();
        let mut rng = stream_rng(1, 0);
        let batch = compose_batch(&view, 10, 5, &mut rng).unwrap();
        let mut labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        assert!(batch.iter().all(|e| e.features.dim() == (5, 4)));
    }

    #[test]
    fn batch_is_deterministic_and_reduces_b() {
        let c = corpus(3, 2);
        let view = DataView::new(&c, 3, Some).unwrap();
        let a = compose_batch(&view, 2, 5, &mut stream_rng(9, 0)).unwrap();
        let b = compose_batch(&view, 2, 5, &mut stream_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        let reduced = compose_batch(&view, 8, 5, &mut stream_rng(9, 0)).unwrap();
        assert_eq!(reduced.len(), 3);
    }

    #[test]
    fn crop_longer_than_utterance_is_whole_utterance() {
        let c = corpus(2, 1);
        let view = DataView::new(&c, 2, Some).unwrap();
        let batch = compose_batch(&view, 2, 12, &mut stream_rng(0, 0)).unwrap();
        for ex in &batch {
            let utt = c.utterances.iter().find(|u| u.class_id == ex.label).unwrap();
            assert_eq!(ex.features, utt.features);
        }
    }

    #[test]
    fn crop_is_contiguous_window() {
        let c = corpus(2, 1);
        let view = DataView::new(&c, 2, Some).unwrap();
        let batch = compose_batch(&view, 2, 5, &mut stream_rng(3, 0)).unwrap();
        for ex in &batch {
            let utt = c.utterances.iter().find(|u| u.class_id == ex.label).unwrap();
            let found = (0..=utt.n_frames() - 5).any(|s| utt.features.slice(ndarray::s![s..s + 5, ..]) == ex.features);
            assert!(found);
        }
    }

    #[test]
    fn plain_sgd_step_is_exact() {
        let c = corpus(5, 2);
        let model = small_model(5, 0);
        let view = DataView::new(&c, 5, Some).unwrap();
        let batch = compose_batch(&view, 3, 8, &mut stream_rng(0, 0)).unwrap();
        let rows: Vec<HeadRow> = (0..5).map(HeadRow::Class).collect();
        let spec = LossSpec::default_for(LossKind::CosFace, 5);
        let g = batch_gradients(&model.embedder, &model.head, &rows, &batch, &spec).unwrap();

        let mut after = model.clone();
        let mut v = Velocity::zeros(&after.embedder, &after.head);
        step(
            &mut after.embedder,
            &mut after.head,
            &rows,
            &batch,
            &mut spec.clone(),
            0.1,
            0.0,
            &mut v,
        )
        .unwrap();
        for ((p0, p1), gs) in model
            .embedder
            .param_slices()
            .iter()
            .zip(after.embedder.param_slices())
            .zip(g.embedder.slices())
        {
            for ((&a, &b), &gv) in p0.iter().zip(p1).zip(gs) {
                assert_eq!(b, a + (0.0 * 0.0 - 0.1f32 * gv));
            }
        }
        for r in 0..5 {
            for k in 0..6 {
                let expect = model.head.weight[[r, k]] + (-0.1f32 * g.head[[r, k]]);
                assert_eq!(after.head.weight[[r, k]], expect);
            }
        }
    }

    #[test]
    fn zero_gradient_only_decays_velocity() {
        let mut p = vec![1.0f32, -2.0];
        let mut v = vec![0.5f32, 0.25];
        momentum_update(&mut p, &[0.0, 0.0], &mut v, 0.2, 0.5);
        assert_eq!(v, vec![0.25, 0.125]);
        assert_eq!(p, vec![1.25, -1.875]);
        let mut q = vec![3.0f32];
        let mut w = vec![0.0f32];
        momentum_update(&mut q, &[0.0], &mut w, 0.2, 0.5);
        assert_eq!(q, vec![3.0]);
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        // Two steps with the same gradient against the closed form
        // p2 = p0 - lr g (2 + mu).
        let (lr, mu, g, p0) = (0.2f64, 0.5f64, 0.37f64, 1.3f64);
        let mut p = vec![p0 as f32];
        let mut v = vec![0.0f32];
        for _ in 0..2 {
            momentum_update(&mut p, &[g as f32], &mut v, lr as f32, mu as f32);
        }
        let expect = p0 - lr * g * (2.0 + mu);
        assert!((f64::from(p[0]) - expect).abs() < 1e-7);
        assert!((f64::from(v[0]) - (-lr * g * (1.0 + mu))).abs() < 1e-7);
    }

    #[test]
    fn masked_rows_and_velocity_are_untouched() {
        let c = corpus(6, 3);
        let mut model = small_model(6, 1);
        let before = model.head.clone();
        let rows = vec![HeadRow::Class(1), HeadRow::Class(4)];
        let view = DataView::new(&c, 2, |k| match k {
            1 => Some(0),
            4 => Some(1),
            _ => None,
        })
        .unwrap();
        let mut v = Velocity::zeros(&model.embedder, &model.head);
        let mut spec = LossSpec::default_for(LossKind::CosFace, 2);
        let mut rng = stream_rng(0, 0);
        for _ in 0..5 {
            let batch = compose_batch(&view, 2, 8, &mut rng).unwrap();
            step(
                &mut model.embedder,
                &mut model.head,
                &rows,
                &batch,
                &mut spec,
                0.2,
                0.5,
                &mut v,
            )
            .unwrap();
        }
        for r in [0, 2, 3, 5] {
            assert_eq!(model.head.weight.row(r), before.weight.row(r));
            assert!(v.head.weight.row(r).iter().all(|&x| x == 0.0));
        }
        assert_ne!(model.head.weight.row(1), before.weight.row(1));
    }

    #[test]
    fn none_mode_logs_every_iteration_with_constant_lr() {
        let c = corpus(5, 3);
        let out = train(&small_config(5, 10), small_model(5, 0), &c, &[], None).unwrap();
        assert_eq!(out.log.rows.len(), 10);
        assert!(out.log.rows.iter().all(|r| r.lr == 0.2 && r.active_classes == 5));
        assert!(out.log.refreshes.is_empty());
        assert_eq!(out.model.iterations, 10);
        let csv = out.log.to_csv();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn dropclass_refreshes_every_p() {
        let c = corpus(8, 3);
        let mut cfg = small_config(8, 20);
        cfg.drop = DropConfig {
            mode: DropMode::DropClass,
            period: 5,
            count: 3,
        };
        let out = train(&cfg, small_model(8, 0), &c, &[], None).unwrap();
        let at: Vec<usize> = out.log.refreshes.iter().map(|e| e.iteration).collect();
        assert_eq!(at, vec![0, 5, 10, 15]);
        assert!(out.log.rows.iter().all(|r| r.active_classes == 5));
        assert_eq!(out.model.active, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn halving_is_exact_powers_of_two() {
        let c = corpus(4, 2);
        let mut cfg = small_config(4, 12);
        cfg.lr = 0.3;
        cfg.lr_halving = vec![2, 5, 9];
        let out = train(&cfg, small_model(4, 0), &c, &[], None).unwrap();
        for r in &out.log.rows {
            let k = cfg.lr_halving.iter().filter(|&&h| h <= r.iteration).count();
            assert_eq!(r.lr, 0.3 * 2f64.powi(-(k as i32)));
        }
        assert_eq!(out.model.lr, 0.3 / 8.0);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let c = corpus(6, 3);
        let mut cfg = small_config(6, 15);
        cfg.drop = DropConfig {
            mode: DropMode::DropClass,
            period: 4,
            count: 2,
        };
        let a = train(&cfg, small_model(6, 2), &c, &[], None).unwrap();
        let b = train(&cfg, small_model(6, 2), &c, &[], None).unwrap();
        assert_eq!(a.model.encode().unwrap(), b.model.encode().unwrap());
        assert_eq!(a.log.to_csv(), b.log.to_csv());
    }

    #[test]
    fn adapt_modes_keep_their_head_shape() {
        let full = corpus(10, 4);
        let split = split_corpus(&full, 0.6, 0).unwrap();
        let trained = train(&small_config(6, 10), small_model(6, 0), &split.train, &[], None)
            .unwrap()
            .model;
        let enrol: Vec<&Utterance> = split.enrol.utterances.iter().collect();
        let mut cfg = TrainConfig {
            lr_halving: Vec::new(),
            ..small_config(6, 9)
        };
        for (mode, rows_after) in [
            (DropMode::None, 6),
            (DropMode::DropOnlyData, 6),
            (DropMode::DropRandom, 3),
            (DropMode::DropAdapt, 3),
            (DropMode::DropAdaptCombine, 4),
        ] {
            cfg.drop = DropConfig {
                mode,
                period: 3,
                count: 1,
            };
            let out = adapt(&cfg, trained.clone(), &split.train, &enrol, None).unwrap();
            assert_eq!(out.log.rows.last().unwrap().active_classes, rows_after, "{mode}");
            assert_eq!(out.model.head_rows().len(), rows_after, "{mode}");
            assert_eq!(out.model.head.n_classes(), 6);
            assert_eq!(out.model.lr, trained.lr);
            assert!(out.final_kl_full.is_some());
        }
    }

    #[test]
    fn mode_and_enrolment_preconditions() {
        let c = corpus(5, 2);
        let mut cfg = small_config(5, 4);
        cfg.drop = DropConfig {
            mode: DropMode::DropAdapt,
            period: 2,
            count: 1,
        };
        assert!(matches!(
            train(&cfg, small_model(5, 0), &c, &[], None),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            adapt(&cfg, small_model(5, 0), &c, &[], None),
            Err(Error::EmptyData(_))
        ));
        cfg.drop.mode = DropMode::DropClass;
        assert!(matches!(
            adapt(&cfg, small_model(5, 0), &c, &[], None),
            Err(Error::Validation { .. })
        ));
        cfg.drop = DropConfig {
            mode: DropMode::DropRandom,
            period: 1,
            count: 2,
        };
        assert!(matches!(
            adapt(&cfg, small_model(5, 0), &c, &[], None),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn numeric_failure_returns_last_good_model() {
        let c = corpus(4, 2);
        let mut model = small_model(4, 0);
        let mut cfg = small_config(4, 5);
        cfg.loss = LossSpec::default_for(LossKind::Softmax, 4);
        model.head.weight.fill(3e38);
        let out = train(&cfg, model.clone(), &c, &[], None).unwrap();
        assert!(matches!(out.aborted, Some(Error::Numeric(_))));
        assert_eq!(out.log.rows.len(), 0);
        assert_eq!(out.model.head, model.head);
    }

    #[test]
    fn enrolment_sample_is_sorted_subset() {
        let c = corpus(4, 5);
        let all: Vec<&Utterance> = c.utterances.iter().collect();
        let s = sample_enrolment(&all, 0.5, 3).unwrap();
        assert_eq!(s.len(), 10);
        let pos: Vec<usize> = s
            .iter()
            .map(|u| all.iter().position(|a| a.utt_id == u.utt_id).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_enrolment(&all, 0.0, 3).is_err());
    }

    #[test]
    fn ema_of_constant_is_constant() {
        assert_eq!(ema(&[2.0; 5], 100), vec![2.0; 5]);
        let e = ema(&[0.0, 1.0], 3);
        assert_eq!(e, vec![0.0, 0.5]);
    }
}
