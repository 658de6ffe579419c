//! Class dropping: DropClass subset resampling, DropAdapt ranking with
//! permanent drops (optionally combining dropped classes into one), the two
//! control modes, and the average class probability they rank by.
//!
//! Class ids here are global training ids `0..M`. The head always keeps all
//! `M` rows ([`ClassHead`]); a mode decides which of them form the active head
//! `W*` for a step ([`DropState::head_rows`]) and which utterances are trained
//! on, under which label ([`DropState::data_view`]). Updates computed on `W*`
//! are scattered back into the same rows, so excluded rows never move.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, Utterance};
use crate::embedder::EmbedderParams;
use crate::error::{Error, Result};
use crate::eval::kl_to_uniform;
use crate::head::{softmax, validate_subset};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    None,
    #[serde(rename = "dropclass")]
    DropClass,
    #[serde(rename = "dropadapt")]
    DropAdapt,
    #[serde(rename = "dropadapt_combine")]
    DropAdaptCombine,
    DropRandom,
    DropOnlyData,
}

impl DropMode {
    pub const ALL: [DropMode; 6] = [
        DropMode::None,
        DropMode::DropClass,
        DropMode::DropAdapt,
        DropMode::DropAdaptCombine,
        DropMode::DropRandom,
        DropMode::DropOnlyData,
    ];

    /// Modes that rank classes by average probability on enrolment data.
    pub fn ranks_by_probability(self) -> bool {
        matches!(
            self,
            DropMode::DropAdapt | DropMode::DropAdaptCombine | DropMode::DropOnlyData
        )
    }

    /// Modes whose drops are permanent.
    pub fn is_permanent(self) -> bool {
        matches!(
            self,
            DropMode::DropAdapt | DropMode::DropAdaptCombine | DropMode::DropRandom | DropMode::DropOnlyData
        )
    }

    /// Modes that restrict the head to the active rows.
    pub fn masks_head(self) -> bool {
        matches!(
            self,
            DropMode::DropClass | DropMode::DropAdapt | DropMode::DropAdaptCombine | DropMode::DropRandom
        )
    }

    pub fn needs_enrolment(self) -> bool {
        self.ranks_by_probability()
    }
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            DropMode::None => "none",
            DropMode::DropClass => "dropclass",
            DropMode::DropAdapt => "dropadapt",
            DropMode::DropAdaptCombine => "dropadapt_combine",
            DropMode::DropRandom => "drop_random",
            DropMode::DropOnlyData => "drop_only_data",
        })
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DropMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::validation("drop.mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    pub mode: DropMode,
    /// Refresh period `P` in iterations.
    pub period: usize,
    /// Classes dropped per refresh, `D`.
    pub count: usize,
}

impl Default for DropConfig {
    fn default() -> Self {
        DropConfig {
            mode: DropMode::None,
            period: 25,
            count: 20,
        }
    }
}

impl DropConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.mode == DropMode::None {
            return Ok(());
        }
        if self.period == 0 {
            return Err(Error::validation("drop.P", "refresh period must be >= 1"));
        }
        if self.count == 0 || self.count >= n_classes {
            return Err(Error::validation(
                "drop.D",
                format!(
                    "must lie in [1, {}) for {n_classes} classes, got {}",
                    n_classes, self.count
                ),
            ));
        }
        Ok(())
    }

    /// Number of refreshes in a run of `iterations` steps (one at step 0,
    /// then every `P`).
    pub fn refreshes_in(&self, iterations: usize) -> usize {
        if self.mode == DropMode::None || iterations == 0 {
            0
        } else {
            iterations.div_ceil(self.period)
        }
    }
}

/// Logits that the average class probability is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbabilityLogits {
    /// `h W^T`, no margin and no scale.
    #[default]
    Raw,
    /// `s cos(h, w_j)`, the margin-free logits of the angular losses.
    ScaledCosine { scale: f64 },
}

/// Uniformly random size-`(m - d)` subset of `0..m`, ascending.
pub fn sample_subset(m: usize, d: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if d < 1 || d >= m {
        return Err(Error::Parameter(format!("drop count must lie in [1, {m}), got {d}")));
    }
    let mut subset = index::sample(rng, m, m - d).into_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// Rows `subset` of `weight`, ascending.
pub fn mask_weights<T: Real>(weight: ArrayView2<'_, T>, subset: &[usize]) -> Result<Array2<T>> {
    crate::head::select_rows(weight, subset)
}

/// Writes `rows` back into rows `subset` of `weight`.
pub fn write_back<T: Real>(weight: &mut Array2<T>, subset: &[usize], rows: ArrayView2<'_, T>) -> Result<()> {
    validate_subset(subset, weight.nrows())?;
    if rows.dim() != (subset.len(), weight.ncols()) {
        return Err(Error::Shape(format!(
            "masked rows have shape {:?}, expected ({}, {})",
            rows.dim(),
            subset.len(),
            weight.ncols()
        )));
    }
    for (row, &g) in rows.outer_iter().zip(subset) {
        weight.row_mut(g).assign(&row);
    }
    Ok(())
}

/// Utterances of a corpus selected by class, each with a training label.
#[derive(Clone, Debug)]
pub struct DataView<'a> {
    corpus: &'a LabeledCorpus,
    entries: Vec<(usize, usize)>,
    n_labels: usize,
}

impl<'a> DataView<'a> {
    /// `label_of(class_id)` gives the label of each class, or `None` to
    /// leave its utterances out.
    pub fn new(corpus: &'a LabeledCorpus, n_labels: usize, label_of: impl Fn(usize) -> Option<usize>) -> Result<Self> {
        let entries: Vec<(usize, usize)> = corpus
            .utterances
            .iter()
            .enumerate()
            .filter_map(|(i, u)| label_of(u.class_id).map(|l| (i, l)))
            .collect();
        if entries.is_empty() {
            return Err(Error::EmptyData("no utterance belongs to the selected classes".into()));
        }
        if let Some(&(_, bad)) = entries.iter().find(|&&(_, l)| l >= n_labels) {
            return Err(Error::Label {
                label: bad,
                classes: n_labels,
            });
        }
        Ok(DataView {
            corpus,
            entries,
            n_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a Utterance, usize)> + '_ {
        self.entries.iter().map(|&(i, l)| (&self.corpus.utterances[i], l))
    }

    pub fn utterance(&self, entry: usize) -> (&'a Utterance, usize) {
        let (i, l) = self.entries[entry];
        (&self.corpus.utterances[i], l)
    }

    /// Entry indices grouped by label; labels without data get an empty list.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_labels];
        for (k, &(_, l)) in self.entries.iter().enumerate() {
            groups[l].push(k);
        }
        groups
    }
}

/// Utterances whose class is in `subset`, labelled by their position in it.
pub fn filter_data<'a>(corpus: &'a LabeledCorpus, subset: &[usize]) -> Result<DataView<'a>> {
    validate_subset(subset, corpus.n_classes)?;
    let remap = local_index(subset, corpus.n_classes);
    DataView::new(corpus, subset.len(), |c| remap.get(c).copied().flatten())
}

fn local_index(subset: &[usize], n_classes: usize) -> Vec<Option<usize>> {
    let mut remap = vec![None; n_classes];
    for (local, &g) in subset.iter().enumerate() {
        remap[g] = Some(local);
    }
    remap
}

/// Class probabilities of one embedding under `weight`, in `f64`.
pub fn class_probabilities<T: Real>(
    h: ArrayView1<'_, T>,
    weight: ArrayView2<'_, T>,
    logits: ProbabilityLogits,
) -> Result<Array1<f64>> {
    let h = h.mapv(T::as_f64);
    let w = weight.mapv(T::as_f64);
    let z = match logits {
        ProbabilityLogits::Raw => w.dot(&h),
        ProbabilityLogits::ScaledCosine { scale } => {
            let hn = h.dot(&h).sqrt();
            if !(hn > 0.0) {
                return Err(Error::DegenerateEmbedding("zero embedding".into()));
            }
            let mut z = w.dot(&h);
            for (zj, row) in z.iter_mut().zip(w.outer_iter()) {
                let wn = row.dot(&row).sqrt();
                *zj = if wn > 0.0 { scale * *zj / (wn * hn) } else { 0.0 };
            }
            z
        }
    };
    let p = softmax(z.view());
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("class probabilities are not finite".into()));
    }
    Ok(p)
}

/// Mean over `utterances` of the softmax class probabilities under `weight`.
/// Per-utterance terms run in parallel; the sum is taken in input order.
pub fn p_average<T: Real>(
    embedder: &EmbedderParams<T>,
    weight: ArrayView2<'_, T>,
    utterances: &[&Utterance],
    logits: ProbabilityLogits,
) -> Result<Array1<f64>> {
    if utterances.is_empty() {
        return Err(Error::EmptyData("p_average needs at least one utterance".into()));
    }
    let terms: Vec<Array1<f64>> = utterances
        .par_iter()
        .map(|u| {
            let h = embedder.embed(&u.features)?;
            class_probabilities(h.view(), weight, logits)
        })
        .collect::<Result<_>>()?;
    let mut sum = Array1::zeros(weight.nrows());
    for t in &terms {
        sum += t;
    }
    Ok(sum / utterances.len() as f64)
}

/// Drops the `d` classes of `active` with the smallest `p[class]` (`p` is
/// indexed by class id). Ties drop the lower id first. Returns
/// `(kept, dropped)`, both ascending.
pub fn rank_and_drop(p: &[f64], active: &[usize], d: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if d >= active.len() {
        return Err(Error::Parameter(format!(
            "cannot drop {d} of {} active classes",
            active.len()
        )));
    }
    if let Some(&bad) = active.iter().find(|&&c| c >= p.len()) {
        return Err(Error::Mask(format!("class id {bad} has no probability entry")));
    }
    let mut order = active.to_vec();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut dropped = order[..d].to_vec();
    let mut kept = order[d..].to_vec();
    dropped.sort_unstable();
    kept.sort_unstable();
    Ok((kept, dropped))
}

/// The combine step on its own: utterances of `dropped` classes get the
/// label `|active|`, and the head gains one row, the mean of the dropped rows.
pub fn apply_combine<'a, T: Real>(
    corpus: &'a LabeledCorpus,
    dropped: &[usize],
    weight: ArrayView2<'_, T>,
    active: &[usize],
) -> Result<(DataView<'a>, Array2<T>)> {
    if dropped.is_empty() {
        return Err(Error::Parameter("combine needs at least one dropped class".into()));
    }
    validate_subset(active, weight.nrows())?;
    validate_subset(dropped, weight.nrows())?;
    let mut remap = local_index(active, weight.nrows());
    for &g in dropped {
        if remap[g].is_some() {
            return Err(Error::Mask(format!("class {g} is both active and dropped")));
        }
        remap[g] = Some(active.len());
    }
    let view = DataView::new(corpus, active.len() + 1, |c| remap.get(c).copied().flatten())?;
    let merged = merged_row(weight, dropped);
    let mut plus = Array2::zeros((active.len() + 1, weight.ncols()));
    plus.slice_mut(ndarray::s![..active.len(), ..])
        .assign(&mask_weights(weight, active)?);
    plus.row_mut(active.len()).assign(&merged);
    Ok((view, plus))
}

fn merged_row<T: Real>(weight: ArrayView2<'_, T>, dropped: &[usize]) -> Array1<T> {
    let rows = weight.select(Axis(0), dropped);
    rows.sum_axis(Axis(0)) / T::lit(dropped.len() as f64)
}

/// One head row: a class row of `W` or the combined-class row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadRow {
    Class(usize),
    Merged,
}

/// All `M` class rows plus the combined-class row once one exists. Also used
/// for per-row optimizer state of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead<T> {
    pub weight: Array2<T>,
    pub merged: Option<Array1<T>>,
}

impl<T: Real> ClassHead<T> {
    pub fn new(weight: Array2<T>) -> Self {
        ClassHead { weight, merged: None }
    }

    pub fn zeros_like(other: &ClassHead<T>) -> Self {
        ClassHead {
            weight: Array2::zeros(other.weight.dim()),
            merged: other.merged.as_ref().map(|m| Array1::zeros(m.len())),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn row(&self, row: HeadRow) -> Result<ArrayView1<'_, T>> {
        match row {
            HeadRow::Class(g) if g < self.n_classes() => Ok(self.weight.row(g)),
            HeadRow::Merged => self
                .merged
                .as_ref()
                .map(|m| m.view())
                .ok_or_else(|| Error::Mask("head has no combined-class row".into())),
            HeadRow::Class(g) => Err(Error::Mask(format!(
                "class id {g} out of range for {} classes",
                self.n_classes()
            ))),
        }
    }

    pub fn row_mut(&mut self, row: HeadRow) -> Result<ArrayViewMut1<'_, T>> {
        let n = self.n_classes();
        match row {
            HeadRow::Class(g) if g < n => Ok(self.weight.row_mut(g)),
            HeadRow::Merged => self
                .merged
                .as_mut()
                .map(|m| m.view_mut())
                .ok_or_else(|| Error::Mask("head has no combined-class row".into())),
            HeadRow::Class(g) => Err(Error::Mask(format!("class id {g} out of range for {n} classes"))),
        }
    }

    /// The active head `W*`: the listed rows, in order.
    pub fn gather(&self, rows: &[HeadRow]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((rows.len(), self.embed_dim()));
        for (mut dst, &r) in out.outer_iter_mut().zip(rows) {
            dst.assign(&self.row(r)?);
        }
        Ok(out)
    }

    /// Writes `values` back into the listed rows.
    pub fn scatter(&mut self, rows: &[HeadRow], values: ArrayView2<'_, T>) -> Result<()> {
        if values.dim() != (rows.len(), self.embed_dim()) {
            return Err(Error::Shape(format!(
                "head rows have shape {:?}, expected ({}, {})",
                values.dim(),
                rows.len(),
                self.embed_dim()
            )));
        }
        for (src, &r) in values.outer_iter().zip(rows) {
            self.row_mut(r)?.assign(&src);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().all(|v| v.is_finite()) && self.merged.iter().flatten().all(|v| v.is_finite())
    }
}

/// What happened at one refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshEvent {
    pub iteration: usize,
    pub mode: DropMode,
    /// `|R|` after the refresh.
    pub active: usize,
    /// Classes excluded by this refresh: the complement of `R` for
    /// DropClass, the newly dropped classes for permanent modes.
    pub dropped: Vec<usize>,
    /// KL-to-uniform of the average probability under all `M` class rows,
    /// measured before dropping.
    pub kl_full: Option<f64>,
    /// The same under the active head (including a combined row).
    pub kl_active: Option<f64>,
    /// Average probability under all `M` rows.
    pub p_full: Option<Array1<f64>>,
}

impl RefreshEvent {
    /// `iter<TAB>mode<TAB>|R|<TAB>dropped_ids_csv`.
    pub fn record(&self) -> String {
        let ids: Vec<String> = self.dropped.iter().map(|c| c.to_string()).collect();
        format!("{}\t{}\t{}\t{}", self.iteration, self.mode, self.active, ids.join(","))
    }
}

/// Refresh bookkeeping for one run.
#[derive(Clone, Debug)]
pub struct DropState {
    config: DropConfig,
    n_classes: usize,
    active: Vec<usize>,
    global_to_local: Vec<Option<usize>>,
    dropped: Vec<usize>,
    iterations_since_refresh: usize,
    pending: bool,
    refreshes: usize,
    logits: ProbabilityLogits,
    rng: Rng,
}

impl DropState {
    pub fn new(config: DropConfig, n_classes: usize, logits: ProbabilityLogits, rng: Rng) -> Result<Self> {
        config.validate(n_classes)?;
        let active: Vec<usize> = (0..n_classes).collect();
        Ok(DropState {
            global_to_local: local_index(&active, n_classes),
            active,
            config,
            n_classes,
            dropped: Vec::new(),
            iterations_since_refresh: 0,
            pending: config.mode != DropMode::None,
            refreshes: 0,
            logits,
            rng,
        })
    }

    /// Resumes from a model whose class set was already reduced (an adapted
    /// checkpoint): `active` classes stay, the rest count as dropped.
    pub fn with_active(mut self, active: Vec<usize>) -> Result<Self> {
        validate_subset(&active, self.n_classes)?;
        self.dropped = (0..self.n_classes)
            .filter(|c| active.binary_search(c).is_err())
            .collect();
        self.global_to_local = local_index(&active, self.n_classes);
        self.active = active;
        Ok(self)
    }

    pub fn config(&self) -> &DropConfig {
        &self.config
    }

    pub fn mode(&self) -> DropMode {
        self.config.mode
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// The active class set `R`, ascending.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Classes dropped so far by permanent modes, ascending.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn global_to_local(&self, class: usize) -> Option<usize> {
        self.global_to_local.get(class).copied().flatten()
    }

    pub fn iterations_since_refresh(&self) -> usize {
        self.iterations_since_refresh
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn refresh_due(&self) -> bool {
        self.pending
    }

    /// Counts one training step.
    pub fn tick(&mut self) {
        if self.config.mode == DropMode::None {
            return;
        }
        self.iterations_since_refresh += 1;
        if self.iterations_since_refresh == self.config.period {
            self.iterations_since_refresh = 0;
            self.pending = true;
        }
    }

    fn has_merged_class(&self) -> bool {
        self.config.mode == DropMode::DropAdaptCombine && !self.dropped.is_empty()
    }

    /// Rows of the head that take part in the current step.
    pub fn head_rows(&self) -> Vec<HeadRow> {
        if !self.config.mode.masks_head() {
            return (0..self.n_classes).map(HeadRow::Class).collect();
        }
        let mut rows: Vec<HeadRow> = self.active.iter().map(|&g| HeadRow::Class(g)).collect();
        if self.has_merged_class() {
            rows.push(HeadRow::Merged);
        }
        rows
    }

    /// Training label of a class under the current state, `None` if its
    /// utterances are excluded.
    pub fn data_label(&self, class: usize) -> Option<usize> {
        if class >= self.n_classes {
            return None;
        }
        match self.config.mode {
            DropMode::None => Some(class),
            DropMode::DropOnlyData => self.global_to_local(class).map(|_| class),
            DropMode::DropAdaptCombine if self.global_to_local(class).is_none() => Some(self.active.len()),
            _ => self.global_to_local(class),
        }
    }

    /// Training utterances under the current state, labelled by head row.
    pub fn data_view<'a>(&self, corpus: &'a LabeledCorpus) -> Result<DataView<'a>> {
        DataView::new(corpus, self.head_rows().len(), |c| self.data_label(c))
    }

    fn set_active(&mut self, active: Vec<usize>) {
        self.global_to_local = local_index(&active, self.n_classes);
        self.active = active;
    }

    /// Performs the pending refresh. `enrol` drives ranking modes and the
    /// KL diagnostics; it may be empty for the other modes.
    pub fn refresh<T: Real>(
        &mut self,
        iteration: usize,
        embedder: &EmbedderParams<T>,
        head: &mut ClassHead<T>,
        enrol: &[&Utterance],
    ) -> Result<RefreshEvent> {
        if head.n_classes() != self.n_classes {
            return Err(Error::Shape(format!(
                "head has {} class rows, schedule expects {}",
                head.n_classes(),
                self.n_classes
            )));
        }
        let mode = self.config.mode;
        let d = self.config.count;

        let (kl_full, p_full, p_active, kl_active) = if enrol.is_empty() {
            if mode.ranks_by_probability() {
                return Err(Error::EmptyData(format!("{mode} needs enrolment data")));
            }
            (None, None, None, None)
        } else {
            let p_full = p_average(embedder, head.weight.view(), enrol, self.logits)?;
            let rows = self.head_rows();
            let active_head = head.gather(&rows)?;
            let p_active = p_average(embedder, active_head.view(), enrol, self.logits)?;
            let kl_active = kl_to_uniform(p_active.as_slice().expect("contiguous"));
            (
                Some(kl_to_uniform(p_full.as_slice().expect("contiguous"))),
                Some(p_full),
                Some((rows, p_active)),
                Some(kl_active),
            )
        };

        let dropped = match mode {
            DropMode::None => Vec::new(),
            DropMode::DropClass => {
                let subset = sample_subset(self.n_classes, d, &mut self.rng)?;
                let excluded = (0..self.n_classes)
                    .filter(|c| subset.binary_search(c).is_err())
                    .collect();
                self.set_active(subset);
                excluded
            }
            DropMode::DropRandom => {
                if d >= self.active.len() {
                    return Err(Error::Parameter(format!(
                        "cannot drop {d} of {} active classes",
                        self.active.len()
                    )));
                }
                let mut picked: Vec<usize> = index::sample(&mut self.rng, self.active.len(), d)
                    .into_iter()
                    .map(|i| self.active[i])
                    .collect();
                picked.sort_unstable();
                let kept = self
                    .active
                    .iter()
                    .copied()
                    .filter(|c| picked.binary_search(c).is_err())
                    .collect();
                self.set_active(kept);
                picked
            }
            DropMode::DropAdapt | DropMode::DropAdaptCombine | DropMode::DropOnlyData => {
                let (rows, p_active) = p_active.expect("ranking modes have enrolment data");
                // Scatter the active-head probabilities to class ids.
                let mut p = vec![0.0; self.n_classes];
                for (r, &v) in rows.iter().zip(p_active.iter()) {
                    if let HeadRow::Class(g) = *r {
                        p[g] = v;
                    }
                }
                let (kept, newly) = rank_and_drop(&p, &self.active, d)?;
                if mode == DropMode::DropAdaptCombine && head.merged.is_none() {
                    head.merged = Some(merged_row(head.weight.view(), &newly));
                }
                self.set_active(kept);
                newly
            }
        };
        if mode.is_permanent() {
            self.dropped.extend_from_slice(&dropped);
            self.dropped.sort_unstable();
        }
        self.pending = false;
        self.iterations_since_refresh = 0;
        self.refreshes += 1;
        Ok(RefreshEvent {
            iteration,
            mode,
            active: self.active.len(),
            dropped,
            kl_full,
            kl_active,
            p_full,
        })
    }
}

/// One CSV row of probabilities: `iter,p_0,...,p_{M-1}`.
pub fn probability_record(iteration: usize, p: &[f64]) -> String {
    let mut line = iteration.to_string();
    for v in p {
        line.push(',');
        line.push_str(&format!("{v:.9e}"));
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::embedder::EmbedderConfig;
    use crate::rng::{stream_rng, SCHEDULE};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng as _;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rng(seed: u64) -> crate::rng::Rng {
        stream_rng(seed, SCHEDULE)
    }

    fn tiny_corpus(classes: &[usize]) -> LabeledCorpus {
        let utterances = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Utterance {
                utt_id: format!("u{i}"),
                class_id: c,
                features: Array2::from_elem((3, 2), i as f32),
            })
            .collect();
        LabeledCorpus {
            utterances,
            n_classes: classes.iter().max().map_or(0, |m| m + 1),
            split: None,
        }
    }

    fn small_model(feat_dim: usize, classes: usize, seed: u64) -> (EmbedderParams<f64>, Array2<f64>) {
        let config = EmbedderConfig {
            feat_dim,
            hidden: vec![6],
            embed_dim: 4,
            ..EmbedderConfig::default()
        };
        let embedder = EmbedderParams::<f64>::init(config, seed).unwrap();
        let mut r = rng(seed + 1000);
        let w = Array2::from_shape_fn((classes, 4), |_| r.random_range(-1.0..1.0));
        (embedder, w)
    }

    #[test]
    fn subset_errors_and_cardinality() {
        let mut r = rng(0);
        assert!(matches!(sample_subset(5, 0, &mut r), Err(Error::Parameter(_))));
        assert!(matches!(sample_subset(5, 5, &mut r), Err(Error::Parameter(_))));
        let s = sample_subset(5, 2, &mut r).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&c| c < 5));
        assert_eq!(
            sample_subset(5, 2, &mut rng(9)).unwrap(),
            sample_subset(5, 2, &mut rng(9)).unwrap()
        );
    }

    #[test]
    fn subset_inclusion_is_uniform() {
        let (m, d, n) = (10usize, 5usize, 10_000usize);
        let mut r = rng(1);
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            for c in sample_subset(m, d, &mut r).unwrap() {
                counts[c] += 1;
            }
        }
        let q = (m - d) as f64 / m as f64;
        for &c in &counts {
            assert!((c as f64 / n as f64 - 0.5).abs() <= 0.02, "{counts:?}");
        }
        // Counts of a fixed-size uniform subset have covariance
        // n q (1-q) M/(M-1) (I - 11^T/M), so this is chi-square with M-1 dof.
        let stat: f64 = counts.iter().map(|&c| (c as f64 - n as f64 * q).powi(2)).sum::<f64>() * (m as f64 - 1.0)
            / (n as f64 * q * (1.0 - q) * m as f64);
        let p_value = 1.0 - ChiSquared::new(m as f64 - 1.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi-square {stat}, p {p_value}");
    }

    #[test]
    fn mask_and_write_back() {
        let w = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(mask_weights(w.view(), &[0, 1, 2, 3]).unwrap(), w);
        let mut w2 = w.clone();
        let rows = Array2::from_elem((2, 3), -1.0);
        write_back(&mut w2, &[1, 3], rows.view()).unwrap();
        assert_eq!(w2.row(0), w.row(0));
        assert_eq!(w2.row(2), w.row(2));
        assert!(w2.row(1).iter().all(|&v| v == -1.0));
        assert!(matches!(write_back(&mut w2, &[3, 1], rows.view()), Err(Error::Mask(_))));
    }

    #[test]
    fn filter_data_remaps_labels() {
        let corpus = tiny_corpus(&[0, 1, 2, 1, 0, 2, 2]);
        let all = filter_data(&corpus, &[0, 1, 2]).unwrap();
        assert_eq!(all.len(), corpus.len());
        assert!(all.iter().all(|(u, l)| u.class_id == l));
        let one = filter_data(&corpus, &[1]).unwrap();
        assert_eq!(one.len(), 2);
        assert!(one.iter().all(|(u, l)| u.class_id == 1 && l == 0));
        let two = filter_data(&corpus, &[0, 2]).unwrap();
        assert_eq!(two.len(), 2 + 3);
        let sparse = tiny_corpus(&[0, 0, 2]);
        assert!(matches!(filter_data(&sparse, &[1]), Err(Error::EmptyData(_))));
    }

    #[test]
    fn p_average_basics() {
        let corpus = generate_corpus(&CorpusSpec {
            n_speakers: 3,
            utts_per_speaker: 4,
            frames_per_utt: 5,
            feat_dim: 3,
            ..CorpusSpec::default()
        })
        .unwrap();
        let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
        let (embedder, w) = small_model(3, 6, 2);

        let zero = Array2::<f64>::zeros((6, 4));
        let p = p_average(&embedder, zero.view(), &utts, ProbabilityLogits::Raw).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let single = p_average(&embedder, w.view(), &utts[..1], ProbabilityLogits::Raw).unwrap();
        let h = embedder.embed(&utts[0].features).unwrap();
        assert_eq!(single, softmax(w.dot(&h).view()));

        // Naive oracle: exponentiate and normalize each utterance directly.
        let p = p_average(&embedder, w.view(), &utts[..10], ProbabilityLogits::Raw).unwrap();
        let mut naive = [0.0; 6];
        for u in &utts[..10] {
            let h = embedder.embed(&u.features).unwrap();
            let e: Vec<f64> = (0..6).map(|j| w.row(j).dot(&h).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..6 {
                naive[j] += e[j] / s / 10.0;
            }
        }
        for j in 0..6 {
            assert!((p[j] - naive[j]).abs() < 1e-9);
        }
        assert!((p.sum() - 1.0).abs() < 1e-9);

        let mut reversed = utts.clone();
        reversed.reverse();
        let doubled: Vec<&Utterance> = utts.iter().chain(utts.iter()).copied().collect();
        let base = p_average(&embedder, w.view(), &utts, ProbabilityLogits::Raw).unwrap();
        for other in [&reversed, &doubled] {
            let q = p_average(&embedder, w.view(), other, ProbabilityLogits::Raw).unwrap();
            assert!(base.iter().zip(q.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert!(matches!(
            p_average(&embedder, w.view(), &[], ProbabilityLogits::Raw),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn scaled_cosine_logits() {
        let w = array![[1.0, 0.0], [0.0, 2.0]];
        let h = array![3.0, 0.0];
        let p = class_probabilities(h.view(), w.view(), ProbabilityLogits::ScaledCosine { scale: 2.0 }).unwrap();
        let e = 2f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rank_and_drop_examples() {
        let (kept, dropped) = rank_and_drop(&[0.1, 0.4, 0.2, 0.3], &[0, 1, 2, 3], 2).unwrap();
        assert_eq!((kept, dropped), (vec![1, 3], vec![0, 2]));
        let (kept, dropped) = rank_and_drop(&[0.25; 4], &[0, 1, 2, 3], 1).unwrap();
        assert_eq!((kept, dropped), (vec![1, 2, 3], vec![0]));
        assert!(matches!(
            rank_and_drop(&[0.5, 0.5], &[0, 1], 2),
            Err(Error::Parameter(_))
        ));
    }

    proptest! {
        #[test]
        fn rank_and_drop_matches_full_sort(seed in 0u64..1000) {
            let mut r = rng(seed);
            let p: Vec<f64> = (0..100).map(|_| r.random::<f64>()).collect();
            let active: Vec<usize> = (0..100).collect();
            let (kept, dropped) = rank_and_drop(&p, &active, 30).unwrap();
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = sorted[29];
            prop_assert_eq!(dropped.len(), 30);
            prop_assert!(dropped.iter().all(|&c| p[c] <= cut));
            prop_assert!(kept.iter().all(|&c| p[c] >= cut));
        }
    }

    #[test]
    fn combine_examples() {
        let corpus = tiny_corpus(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let w = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let (view, plus) = apply_combine(&corpus, &[1, 3], w.view(), &[0, 2, 4]).unwrap();
        assert_eq!(plus.nrows(), 4);
        assert_eq!(view.len(), corpus.len());
        assert_eq!(plus.row(3), ((&w.row(1) + &w.row(3)) / 2.0).view());
        let plain = filter_data(&corpus, &[0, 2, 4]).unwrap();
        let kept: Vec<(String, usize)> = view
            .iter()
            .filter(|(u, _)| [0, 2, 4].contains(&u.class_id))
            .map(|(u, l)| (u.utt_id.clone(), l))
            .collect();
        let plain: Vec<(String, usize)> = plain.iter().map(|(u, l)| (u.utt_id.clone(), l)).collect();
        assert_eq!(kept, plain);
        assert!(view
            .iter()
            .filter(|(u, _)| [1, 3].contains(&u.class_id))
            .all(|(_, l)| l == 3));
    }

    fn run_refreshes(
        mode: DropMode,
        m: usize,
        d: usize,
        times: usize,
    ) -> (DropState, ClassHead<f64>, Vec<RefreshEvent>) {
        let corpus = generate_corpus(&CorpusSpec {
            n_speakers: m,
            utts_per_speaker: 2,
            frames_per_utt: 4,
            feat_dim: 3,
            ..CorpusSpec::default()
        })
        .unwrap();
        let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
        let (embedder, w) = small_model(3, m, 5);
        let mut head = ClassHead::new(w);
        let config = DropConfig {
            mode,
            period: 3,
            count: d,
        };
        let mut state = DropState::new(config, m, ProbabilityLogits::Raw, rng(7)).unwrap();
        let mut events = Vec::new();
        for it in 0..times * 3 {
            if state.refresh_due() {
                events.push(state.refresh(it, &embedder, &mut head, &utts).unwrap());
            }
            state.tick();
            assert!(state.iterations_since_refresh() < 3);
        }
        (state, head, events)
    }

    #[test]
    fn none_never_refreshes() {
        let (state, _, events) = run_refreshes(DropMode::None, 6, 2, 4);
        assert!(events.is_empty());
        assert_eq!(state.active(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(state.head_rows().len(), 6);
    }

    #[test]
    fn dropclass_resamples_from_all_classes() {
        let (_, _, events) = run_refreshes(DropMode::DropClass, 12, 5, 20);
        assert_eq!(events.len(), 20);
        assert!(events.iter().all(|e| e.active == 7 && e.dropped.len() == 5));
        // Non-permanent: some class excluded once is active again later.
        let mut seen_back = false;
        for pair in events.windows(2) {
            seen_back |= pair[0].dropped.iter().any(|c| !pair[1].dropped.contains(c));
        }
        assert!(seen_back);
        assert_eq!(events[0].iteration, 0);
        assert_eq!(events[1].iteration, 3);
    }

    #[test]
    fn permanent_modes_shrink_monotonically() {
        for mode in [
            DropMode::DropAdapt,
            DropMode::DropAdaptCombine,
            DropMode::DropRandom,
            DropMode::DropOnlyData,
        ] {
            let (state, head, events) = run_refreshes(mode, 12, 2, 4);
            let sizes: Vec<usize> = events.iter().map(|e| e.active).collect();
            assert_eq!(sizes, vec![10, 8, 6, 4], "{mode}");
            assert_eq!(state.dropped().len(), 8);
            let rows = state.head_rows();
            match mode {
                DropMode::DropOnlyData => assert_eq!(rows.len(), 12),
                DropMode::DropAdaptCombine => {
                    assert_eq!(rows.len(), 12 - 8 + 1);
                    assert!(head.merged.is_some());
                }
                _ => assert_eq!(rows.len(), 4),
            }
            for pair in events.windows(2) {
                assert!(pair[0].dropped.iter().all(|c| !pair[1].dropped.contains(c)));
            }
        }
    }

    #[test]
    fn combine_row_starts_at_mean_of_first_drop() {
        let (_, head, events) = run_refreshes(DropMode::DropAdaptCombine, 8, 3, 1);
        let (_, w) = small_model(3, 8, 5);
        let expected = merged_row(w.view(), &events[0].dropped);
        assert_eq!(head.merged.unwrap(), expected);
    }

    #[test]
    fn data_labels_follow_mode() {
        let corpus = tiny_corpus(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let config = DropConfig {
            mode: DropMode::DropAdaptCombine,
            period: 1,
            count: 1,
        };
        let state = DropState::new(config, 4, ProbabilityLogits::Raw, rng(0))
            .unwrap()
            .with_active(vec![0, 2])
            .unwrap();
        let view = state.data_view(&corpus).unwrap();
        assert_eq!(view.n_labels(), 3);
        let labels: Vec<usize> = view.iter().map(|(_, l)| l).collect();
        assert_eq!(labels, vec![0, 2, 1, 2, 0, 2, 1, 2]);

        let only = DropState::new(
            DropConfig {
                mode: DropMode::DropOnlyData,
                ..config
            },
            4,
            ProbabilityLogits::Raw,
            rng(0),
        )
        .unwrap()
        .with_active(vec![1, 3])
        .unwrap();
        let view = only.data_view(&corpus).unwrap();
        assert_eq!(view.n_labels(), 4);
        assert!(view.iter().all(|(u, l)| l == u.class_id && (l == 1 || l == 3)));
    }

    #[test]
    fn ranking_modes_require_enrolment() {
        let (embedder, w) = small_model(3, 4, 1);
        let mut head = ClassHead::new(w);
        let config = DropConfig {
            mode: DropMode::DropAdapt,
            period: 1,
            count: 1,
        };
        let mut state = DropState::new(config, 4, ProbabilityLogits::Raw, rng(0)).unwrap();
        assert!(matches!(
            state.refresh(0, &embedder, &mut head, &[]),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn refresh_record_format() {
        let e = RefreshEvent {
            iteration: 250,
            mode: DropMode::DropClass,
            active: 3,
            dropped: vec![1, 4],
            kl_full: None,
            kl_active: None,
            p_full: None,
        };
        assert_eq!(e.record(), "250\tdropclass\t3\t1,4");
        assert_eq!(probability_record(3, &[0.5, 0.25]), "3,5.000000000e-1,2.500000000e-1");
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in DropMode::ALL {
            assert_eq!(mode.to_string().parse::<DropMode>().unwrap(), mode);
        }
        assert!("drop-class".parse::<DropMode>().is_err());
    }
}
