//! Corpus data model: per-utterance features, phone posteriorgrams, forced
//! alignments, rater labels and the train/dev/eval split.

mod context;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use context::stack_context;
pub use io::{
    load_corpus, read_alignments, read_features, read_labels, read_posteriorgram, read_splits, save_corpus,
    save_corpus_to, write_alignments, write_features, write_labels, write_posteriorgram, write_splits, Manifest,
    ALIGNMENTS_HEADER, FEATURE_MAGIC, LABELS_HEADER,
};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus, DEFAULT_LABEL_PCC_BAND};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on posteriorgram row sums.
pub const POSTERIOR_ROW_TOL: f64 = 1e-6;

/// Acoustic frames of one utterance, one row per 10 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frames: Matrix,
}

impl FeatureSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Matrix) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if frames.rows() == 0 {
            return Err(Error::Data(format!("{utterance_id}: feature sequence has no frames")));
        }
        if !frames.all_finite() {
            return Err(Error::Data(format!("{utterance_id}: non-finite feature value")));
        }
        Ok(FeatureSequence { utterance_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// One aligned phone: frames `start..end` (end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub phone: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneAlignment {
    pub utterance_id: String,
    pub segments: Vec<Segment>,
}

impl PhoneAlignment {
    /// Validates ordering: non-empty, non-overlapping, strictly increasing segments.
    pub fn new(utterance_id: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if segments.is_empty() {
            return Err(Error::Data(format!("{utterance_id}: alignment has no segments")));
        }
        let mut prev_end = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start >= s.end {
                return Err(Error::Data(format!("{utterance_id}: segment {i} is empty ({}..{})", s.start, s.end)));
            }
            if i > 0 && s.start < prev_end {
                return Err(Error::Data(format!("{utterance_id}: segment {i} overlaps its predecessor")));
            }
            prev_end = s.end;
        }
        Ok(PhoneAlignment { utterance_id, segments })
    }

    /// Checks the alignment fits an utterance of `frames` frames and `phones` phones.
    pub fn check_bounds(&self, frames: usize, phones: usize) -> Result<()> {
        for (i, s) in self.segments.iter().enumerate() {
            if s.end > frames {
                return Err(Error::Data(format!(
                    "{}: segment {i} ends at frame {} beyond T={frames}",
                    self.utterance_id, s.end
                )));
            }
            if s.phone >= phones {
                return Err(Error::Data(format!(
                    "{}: segment {i} references phone {} of {phones}",
                    self.utterance_id, s.phone
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame phone posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGram {
    pub utterance_id: String,
    pub post: Matrix,
    pub phone_table: Vec<String>,
}

impl PosteriorGram {
    pub fn new(utterance_id: impl Into<String>, post: Matrix, phone_table: Vec<String>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if post.cols() != phone_table.len() {
            return Err(Error::Dimension(format!(
                "{utterance_id}: posteriorgram has {} columns but {} phones",
                post.cols(),
                phone_table.len()
            )));
        }
        for (t, row) in post.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data(format!(
                    "{utterance_id}: posteriorgram row {t} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POSTERIOR_ROW_TOL {
                return Err(Error::Data(format!("{utterance_id}: posteriorgram row {t} sums to {sum}")));
            }
        }
        Ok(PosteriorGram { utterance_id, post, phone_table })
    }

    pub fn frames(&self) -> usize {
        self.post.rows()
    }

    pub fn num_phones(&self) -> usize {
        self.post.cols()
    }
}

/// Phone prior probabilities p(q).
#[derive(Debug, Clone, PartialEq)]
pub struct PhonePrior {
    prior: Vec<f64>,
}

impl PhonePrior {
    pub fn new(prior: Vec<f64>) -> Result<Self> {
        if prior.is_empty() || prior.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Data("phone prior entries must be positive".into()));
        }
        let sum: f64 = prior.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("phone prior sums to {sum}")));
        }
        Ok(PhonePrior { prior })
    }

    pub fn uniform(phones: usize) -> Self {
        PhonePrior { prior: vec![1.0 / phones as f64; phones] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }
}

/// Ratings of one utterance on the 1..=5 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RatedUtterance {
    pub utterance_id: String,
    pub rater_scores: Vec<u8>,
    pub mean_score: f64,
}

impl RatedUtterance {
    pub fn new(utterance_id: impl Into<String>, rater_scores: Vec<u8>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if rater_scores.is_empty() {
            return Err(Error::Data(format!("{utterance_id}: no rater scores")));
        }
        if let Some(bad) = rater_scores.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::Data(format!("{utterance_id}: rater score {bad} outside 1..=5")));
        }
        let mean_score = rater_scores.iter().map(|&s| f64::from(s)).sum::<f64>() / rater_scores.len() as f64;
        Ok(RatedUtterance { utterance_id, rater_scores, mean_score })
    }

    /// Proficiency class in `0..5`: the mean score rounded to the nearest level.
    pub fn class(&self) -> usize {
        (self.mean_score.round().clamp(1.0, 5.0) as usize) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub dev_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl SplitManifest {
    pub fn new(train_ids: Vec<String>, dev_ids: Vec<String>, eval_ids: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for id in train_ids.iter().chain(&dev_ids).chain(&eval_ids) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("utterance {id} appears in more than one split")));
            }
        }
        Ok(SplitManifest { train_ids, dev_ids, eval_ids })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Dev => &self.dev_ids,
            Split::Eval => &self.eval_ids,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        [Split::Train, Split::Dev, Split::Eval].into_iter().find(|&s| self.ids(s).iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.train_ids.len() + self.dev_ids.len() + self.eval_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids.iter().chain(&self.dev_ids).chain(&self.eval_ids)
    }
}

/// Everything known about one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub posteriors: PosteriorGram,
    pub alignment: PhoneAlignment,
    pub rating: RatedUtterance,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.features.utterance_id
    }
}

/// A validated corpus. Utterances are kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub phone_table: Vec<String>,
    pub prior: PhonePrior,
    pub utterances: Vec<Utterance>,
    pub splits: SplitManifest,
    index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(
        phone_table: Vec<String>,
        prior: PhonePrior,
        mut utterances: Vec<Utterance>,
        splits: SplitManifest,
    ) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        utterances.sort_by(|a, b| a.id().cmp(b.id()));
        let mut index = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if index.insert(u.id().to_string(), i).is_some() {
                return Err(Error::Data(format!("duplicate utterance {}", u.id())));
            }
        }
        let corpus = Corpus { phone_table, prior, utterances, splits, index };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let p = self.phone_table.len();
        if self.prior.len() != p {
            return Err(Error::Dimension(format!("phone prior has {} entries for {p} phones", self.prior.len())));
        }
        let dim = self.utterances[0].features.dim();
        for u in &self.utterances {
            let id = u.id();
            if u.features.dim() != dim {
                return Err(Error::Dimension(format!(
                    "{id}: feature dim {} differs from corpus dim {dim}",
                    u.features.dim()
                )));
            }
            if u.posteriors.phone_table != self.phone_table {
                return Err(Error::Data(format!("{id}: posteriorgram phone table differs")));
            }
            if u.posteriors.frames() != u.features.len() {
                return Err(Error::Dimension(format!(
                    "{id}: {} posterior frames vs {} feature frames",
                    u.posteriors.frames(),
                    u.features.len()
                )));
            }
            if u.alignment.utterance_id != id || u.posteriors.utterance_id != id || u.rating.utterance_id != id {
                return Err(Error::Data(format!("{id}: component utterance ids disagree")));
            }
            u.alignment.check_bounds(u.features.len(), p)?;
        }
        let known: BTreeSet<&str> = self.index.keys().map(String::as_str).collect();
        for id in self.splits.all_ids() {
            if !known.contains(id.as_str()) {
                return Err(Error::Data(format!("split references unknown utterance {id}")));
            }
        }
        if self.splits.len() != self.utterances.len() {
            return Err(Error::Data(format!(
                "splits cover {} of {} utterances",
                self.splits.len(),
                self.utterances.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.index.get(id).map(|&i| &self.utterances[i])
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances[0].features.dim()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        let mut v: Vec<&Utterance> = self.splits.ids(split).iter().filter_map(|id| self.get(id)).collect();
        v.sort_by(|a, b| a.id().cmp(b.id()));
        v
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}
