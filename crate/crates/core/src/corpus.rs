//! Synthetic multi-class frame-sequence corpora.
//!
//! Each class `i` owns a mean vector `mu_i ~ N(0, spread^2 I)`. Every
//! utterance of that class draws a session offset `~ N(0, (spread/4)^2 I)`
//! and each of its frames is `mu_i + offset + N(0, noise^2 I)`. With a
//! positive `skew_factor` the first `ceil(M/2)` classes are shifted along the
//! all-ones direction, which splits the speaker population into two latent
//! groups.
//!
//! On-disk layout of a corpus file (all integers little-endian `u32`):
//!
//! ```text
//! "DCK1" | M | n_utts | F | n_utts x ( id_len | id bytes | class_id | T | T*F f32 )
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream_rng};

/// `T x F` frame matrix, frames as rows.
pub type FeatureSequence = Array2<f32>;

pub const CORPUS_MAGIC: &[u8; 4] = b"DCK1";

/// Per-coordinate size of the skew shift, in units of `speaker_spread`.
pub const SKEW_SHIFT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub feat_dim: usize,
    pub speaker_spread: f64,
    pub frame_noise: f64,
    pub skew_factor: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_speakers: 50,
            utts_per_speaker: 20,
            frames_per_utt: 50,
            feat_dim: 20,
            speaker_spread: 1.0,
            frame_noise: 0.5,
            skew_factor: 0.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("frames_per_utt", self.frames_per_utt),
            ("feat_dim", self.feat_dim),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        for (field, value) in [
            ("speaker_spread", self.speaker_spread),
            ("frame_noise", self.frame_noise),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::validation(field, format!("must be > 0, got {value}")));
            }
        }
        if !(0.0..=1.0).contains(&self.skew_factor) {
            return Err(Error::validation(
                "skew_factor",
                format!("must lie in [0, 1], got {}", self.skew_factor),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Enrol,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SplitTag::Train => "train",
            SplitTag::Enrol => "enrol",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "enrol" => Ok(SplitTag::Enrol),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::validation("split_tag", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub class_id: usize,
    pub features: FeatureSequence,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }
}

/// An ordered set of labelled utterances. `split` is `None` for a corpus
/// that has not been split (or was read back from a corpus file, which does
/// not record splits; the manifest does).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub utterances: Vec<Utterance>,
    pub n_classes: usize,
    pub split: Option<SplitTag>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.ncols())
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.class_id).collect()
    }

    /// Utterance indices grouped by class id, in corpus order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            groups.entry(u.class_id).or_default().push(i);
        }
        groups
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.utt_id.as_str(), i))
            .collect()
    }

    pub fn get(&self, utt_id: &str) -> Result<&Utterance> {
        self.utterances
            .iter()
            .find(|u| u.utt_id == utt_id)
            .ok_or_else(|| Error::Lookup(utt_id.to_string()))
    }

    /// Checks the structural invariants: ids unique, labels in range, one
    /// feature dimension, no empty utterances.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let feat_dim = self.feat_dim();
        for u in &self.utterances {
            if !seen.insert(u.utt_id.as_str()) {
                return Err(Error::validation("utt_id", format!("duplicate id `{}`", u.utt_id)));
            }
            if u.class_id >= self.n_classes {
                return Err(Error::validation(
                    "class_id",
                    format!("{} >= n_classes {} for `{}`", u.class_id, self.n_classes, u.utt_id),
                ));
            }
            if u.features.nrows() == 0 {
                return Err(Error::validation("features", format!("`{}` has no frames", u.utt_id)));
            }
            if Some(u.features.ncols()) != feat_dim {
                return Err(Error::validation(
                    "features",
                    format!("`{}` has feature dimension {}", u.utt_id, u.features.ncols()),
                ));
            }
        }
        Ok(())
    }

    /// Concatenates corpora (e.g. the three splits) into one unsplit corpus.
    pub fn merged(parts: &[&LabeledCorpus]) -> LabeledCorpus {
        LabeledCorpus {
            utterances: parts.iter().flat_map(|c| c.utterances.iter().cloned()).collect(),
            n_classes: parts.iter().map(|c| c.n_classes).max().unwrap_or(0),
            split: None,
        }
    }
}

/// The latent quantities the generator drew. Only useful for checking the
/// generator against its own model.
#[derive(Clone, Debug)]
pub struct GenerativeTruth {
    pub class_means: Array2<f64>,
    pub utterance_offsets: Array2<f64>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<LabeledCorpus> {
    generate_corpus_with_truth(spec).map(|(corpus, _)| corpus)
}

pub fn generate_corpus_with_truth(spec: &CorpusSpec) -> Result<(LabeledCorpus, GenerativeTruth)> {
    spec.validate()?;
    let m = spec.n_speakers;
    let f = spec.feat_dim;
    let n_utts = m * spec.utts_per_speaker;

    let mut mean_rng = stream_rng(spec.seed, rng::CLASS_MEANS);
    let mut class_means = Array2::<f64>::zeros((m, f));
    let shifted = m.div_ceil(2);
    for (i, mut row) in class_means.outer_iter_mut().enumerate() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut mean_rng);
            *v = spec.speaker_spread * z;
        }
        if spec.skew_factor > 0.0 && i < shifted {
            row += spec.skew_factor * SKEW_SHIFT * spec.speaker_spread;
        }
    }

    let offset_sd = spec.speaker_spread / 4.0;
    let mut offsets = Array2::<f64>::zeros((n_utts, f));
    let mut utterances = Vec::with_capacity(n_utts);
    for class in 0..m {
        for j in 0..spec.utts_per_speaker {
            let k = class * spec.utts_per_speaker + j;
            let mut utt_rng = stream_rng(spec.seed, rng::UTTERANCE_BASE + k as u64);
            for d in 0..f {
                let z: f64 = StandardNormal.sample(&mut utt_rng);
                offsets[[k, d]] = offset_sd * z;
            }
            let mut features = FeatureSequence::zeros((spec.frames_per_utt, f));
            for mut frame in features.outer_iter_mut() {
                for (d, v) in frame.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut utt_rng);
                    *v = (class_means[[class, d]] + offsets[[k, d]] + spec.frame_noise * z) as f32;
                }
            }
            utterances.push(Utterance {
                utt_id: format!("spk{class:05}-utt{j:04}"),
                class_id: class,
                features,
            });
        }
    }

    let corpus = LabeledCorpus {
        utterances,
        n_classes: m,
        split: None,
    };
    let truth = GenerativeTruth {
        class_means,
        utterance_offsets: offsets,
    };
    Ok((corpus, truth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: LabeledCorpus,
    pub enrol: LabeledCorpus,
    pub test: LabeledCorpus,
}

/// Partitions classes into a training set and a held-out set, then halves
/// each held-out class into enrolment and test utterances.
///
/// Class ids are relabelled so that training classes are the dense range
/// `0..n_train` (the head's rows) and held-out classes follow from
/// `n_train`. Both groups keep their original relative order.
pub fn split_corpus(corpus: &LabeledCorpus, train_class_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(train_class_fraction > 0.0 && train_class_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train_class_fraction must lie in (0, 1), got {train_class_fraction}"
        )));
    }
    let groups = corpus.by_class();
    let n = groups.len();
    let n_train = (n as f64 * train_class_fraction).round() as usize;
    if n_train < 2 || n - n_train.min(n) < 2 {
        return Err(Error::Split(format!(
            "fraction {train_class_fraction} of {n} classes leaves {n_train} train and {} held-out classes; need at least 2 of each",
            n.saturating_sub(n_train)
        )));
    }

    let mut rng = stream_rng(seed, rng::SPLIT);
    let mut classes: Vec<usize> = groups.keys().copied().collect();
    classes.shuffle(&mut rng);
    let mut train_classes = classes[..n_train].to_vec();
    let mut held_classes = classes[n_train..].to_vec();
    train_classes.sort_unstable();
    held_classes.sort_unstable();

    let relabel: HashMap<usize, usize> = train_classes
        .iter()
        .chain(held_classes.iter())
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let take = |idx: usize| {
        let u = &corpus.utterances[idx];
        Utterance {
            utt_id: u.utt_id.clone(),
            class_id: relabel[&u.class_id],
            features: u.features.clone(),
        }
    };

    let train = LabeledCorpus {
        utterances: train_classes
            .iter()
            .flat_map(|c| groups[c].iter().map(|&i| take(i)))
            .collect(),
        n_classes: n_train,
        split: Some(SplitTag::Train),
    };

    let mut enrol = Vec::new();
    let mut test = Vec::new();
    for c in &held_classes {
        let mut members = groups[c].clone();
        members.shuffle(&mut rng);
        let n_enrol = members.len() / 2;
        let (e, t) = members.split_at(n_enrol);
        let mut e = e.to_vec();
        let mut t = t.to_vec();
        e.sort_unstable();
        t.sort_unstable();
        enrol.extend(e.into_iter().map(take));
        test.extend(t.into_iter().map(take));
    }

    Ok(CorpusSplit {
        train,
        enrol: LabeledCorpus {
            utterances: enrol,
            n_classes: n,
            split: Some(SplitTag::Enrol),
        },
        test: LabeledCorpus {
            utterances: test,
            n_classes: n,
            split: Some(SplitTag::Test),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub utt_a: String,
    pub utt_b: String,
    pub is_target: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.trials.len() - self.n_target()
    }

    pub fn validate_against(&self, corpus: &LabeledCorpus) -> Result<()> {
        if self.n_target() == 0 || self.n_nontarget() == 0 {
            return Err(Error::Trial("need at least one target and one nontarget trial".into()));
        }
        let ids = corpus.index_by_id();
        for t in &self.trials {
            for id in [&t.utt_a, &t.utt_b] {
                if !ids.contains_key(id.as_str()) {
                    return Err(Error::Lookup(id.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Samples same-class (target) and cross-class (nontarget) utterance pairs.
/// Pairs are drawn without replacement while enough distinct pairs exist and
/// with replacement beyond that.
pub fn make_trials(test: &LabeledCorpus, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialList> {
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Trial(format!(
            "n_target ({n_target}) and n_nontarget ({n_nontarget}) must both be at least 1"
        )));
    }
    let groups = test.by_class();
    if groups.len() < 2 {
        return Err(Error::Trial("need at least two classes for nontarget trials".into()));
    }
    let same_pairs: Vec<(usize, usize)> = groups
        .values()
        .flat_map(|members| {
            members
                .iter()
                .enumerate()
                .flat_map(move |(k, &a)| members[k + 1..].iter().map(move |&b| (a, b)))
        })
        .collect();
    if same_pairs.is_empty() {
        return Err(Error::Trial(
            "no class has two utterances, so no target pair exists".into(),
        ));
    }

    let mut rng = stream_rng(seed, rng::TRIALS);
    let mut pairs: Vec<(usize, usize, bool)> = Vec::with_capacity(n_target + n_nontarget);

    if n_target <= same_pairs.len() {
        for i in index::sample(&mut rng, same_pairs.len(), n_target) {
            let (a, b) = same_pairs[i];
            pairs.push((a, b, true));
        }
    } else {
        for _ in 0..n_target {
            let (a, b) = same_pairs[rng.random_range(0..same_pairs.len())];
            pairs.push((a, b, true));
        }
    }

    let n = test.len();
    let labels: Vec<usize> = test.utterances.iter().map(|u| u.class_id).collect();
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let same_total: usize = sizes.iter().map(|s| s * s).sum();
    let cross_total = (n * n - same_total) / 2;
    let draw_cross = |rng: &mut rng::Rng| loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if labels[a] != labels[b] {
            return (a.min(b), a.max(b));
        }
    };
    if n_nontarget * 2 <= cross_total {
        let mut seen = HashSet::with_capacity(n_nontarget);
        while seen.len() < n_nontarget {
            let pair = draw_cross(&mut rng);
            if seen.insert(pair) {
                pairs.push((pair.0, pair.1, false));
            }
        }
    } else if n_nontarget <= cross_total {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .collect();
        for i in index::sample(&mut rng, all.len(), n_nontarget) {
            pairs.push((all[i].0, all[i].1, false));
        }
    } else {
        for _ in 0..n_nontarget {
            let (a, b) = draw_cross(&mut rng);
            pairs.push((a, b, false));
        }
    }

    pairs.shuffle(&mut rng);
    Ok(TrialList {
        trials: pairs
            .into_iter()
            .map(|(a, b, is_target)| Trial {
                utt_a: test.utterances[a].utt_id.clone(),
                utt_b: test.utterances[b].utt_id.clone(),
                is_target,
            })
            .collect(),
    })
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::validation(what, format!("{value} does not fit in u32")))
}

pub fn encode_corpus(corpus: &LabeledCorpus) -> Result<Vec<u8>> {
    corpus.validate()?;
    let feat_dim = corpus.feat_dim().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    for (v, what) in [
        (corpus.n_classes, "n_classes"),
        (corpus.len(), "n_utts"),
        (feat_dim, "feat_dim"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for u in &corpus.utterances {
        let id = u.utt_id.as_bytes();
        out.extend_from_slice(&to_u32(id.len(), "utt_id length")?.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&to_u32(u.class_id, "class_id")?.to_le_bytes());
        out.extend_from_slice(&to_u32(u.n_frames(), "frames")?.to_le_bytes());
        for v in u.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated: {what} needs {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<LabeledCorpus> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CORPUS_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"DCK1\"")));
    }
    let n_classes = cur.u32("M")? as usize;
    let n_utts = cur.u32("n_utts")? as usize;
    let feat_dim = cur.u32("F")? as usize;
    let mut utterances = Vec::with_capacity(n_utts.min(1 << 20));
    for _ in 0..n_utts {
        let id_len = cur.u32("id length")? as usize;
        let id_offset = cur.pos;
        let id = std::str::from_utf8(cur.take(id_len, "utterance id")?)
            .map_err(|e| Error::format(id_offset as u64, format!("utterance id is not UTF-8: {e}")))?
            .to_string();
        let class_offset = cur.pos;
        let class_id = cur.u32("class_id")? as usize;
        if class_id >= n_classes {
            return Err(Error::format(
                class_offset as u64,
                format!("class_id {class_id} >= M {n_classes}"),
            ));
        }
        let frames_offset = cur.pos;
        let frames = cur.u32("T")? as usize;
        if frames == 0 {
            return Err(Error::format(
                frames_offset as u64,
                format!("utterance `{id}` has T = 0"),
            ));
        }
        let n_values = frames
            .checked_mul(feat_dim)
            .ok_or_else(|| Error::format(frames_offset as u64, "T*F overflows"))?;
        let payload = cur.take(n_values * 4, "feature payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let features = FeatureSequence::from_shape_vec((frames, feat_dim), values)
            .map_err(|e| Error::format(frames_offset as u64, e.to_string()))?;
        utterances.push(Utterance {
            utt_id: id,
            class_id,
            features,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after last utterance", bytes.len() - cur.pos),
        ));
    }
    Ok(LabeledCorpus {
        utterances,
        n_classes,
        split: None,
    })
}

pub fn write_corpus(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_corpus(corpus)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

/// Writes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub class_id: usize,
    pub split: SplitTag,
}

pub fn format_manifest(corpora: &[&LabeledCorpus]) -> Result<String> {
    let mut out = String::new();
    for c in corpora {
        let tag = c
            .split
            .ok_or_else(|| Error::validation("split_tag", "manifest needs split corpora"))?;
        for u in &c.utterances {
            out.push_str(&format!("{}\t{}\t{}\n", u.utt_id, u.class_id, tag));
        }
    }
    Ok(out)
}

pub fn write_manifest(corpora: &[&LabeledCorpus], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_manifest(corpora)?.as_bytes())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::validation(
                    "manifest",
                    format!("line {}: expected 3 tab-separated fields", n + 1),
                ));
            }
            let class_id = fields[1]
                .parse()
                .map_err(|_| Error::validation("manifest", format!("line {}: bad class id `{}`", n + 1, fields[1])))?;
            Ok(ManifestEntry {
                utt_id: fields[0].to_string(),
                class_id,
                split: fields[2].parse()?,
            })
        })
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Materialises the utterances a manifest lists, in manifest order. The
/// result's `n_classes` is the smallest count covering its labels.
pub fn select_from_manifest(corpus: &LabeledCorpus, entries: &[ManifestEntry]) -> Result<LabeledCorpus> {
    let index = corpus.index_by_id();
    let mut utterances = Vec::with_capacity(entries.len());
    for e in entries {
        let &i = index
            .get(e.utt_id.as_str())
            .ok_or_else(|| Error::Lookup(e.utt_id.clone()))?;
        let u = &corpus.utterances[i];
        if u.class_id != e.class_id {
            return Err(Error::validation(
                "manifest",
                format!(
                    "`{}` has class {} in the corpus but {} in the manifest",
                    e.utt_id, u.class_id, e.class_id
                ),
            ));
        }
        utterances.push(u.clone());
    }
    let splits: BTreeSet<SplitTag> = entries.iter().map(|e| e.split).collect();
    let n_classes = utterances.iter().map(|u| u.class_id + 1).max().unwrap_or(0);
    Ok(LabeledCorpus {
        utterances,
        n_classes,
        split: if splits.len() == 1 {
            splits.into_iter().next()
        } else {
            None
        },
    })
}

pub fn format_trials(trials: &TrialList) -> String {
    trials
        .trials
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.utt_a, t.utt_b, u8::from(t.is_target)))
        .collect()
}

pub fn write_trials(trials: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_trials(trials).as_bytes())
}

pub fn parse_trials(text: &str) -> Result<TrialList> {
    let trials = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let is_target = match fields.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => {
                    return Err(Error::validation(
                        "trials",
                        format!("line {}: expected `utt_a<TAB>utt_b<TAB>1|0`", n + 1),
                    ))
                }
            };
            Ok(Trial {
                utt_a: fields[0].to_string(),
                utt_b: fields[1].to_string(),
                is_target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialList { trials })
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text)
}
