//! Seeded synthetic corpus with a known proficiency oracle.
//!
//! Every phone has a native prototype mean and a shifted (accented) mean.
//! The shift points partly toward a competing phone, so a lower proficiency
//! moves posterior mass onto that competitor, and partly along an accent
//! direction shared by all phones.
//! A speaker with proficiency ρ produces frames around the interpolation
//! `(1 - ρ) * shifted + ρ * native`, plus a per-speaker channel offset and a
//! per-speaker variance scale that are unrelated to proficiency. The
//! posteriorgram is computed from the native phone Gaussians by Bayes rule
//! with a uniform prior, playing the role of an acoustic model trained on
//! native speech.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Corpus, FeatureSequence, PhoneAlignment, PhonePrior, PosteriorGram, RatedUtterance, Segment, SplitManifest,
    Utterance,
};
use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};

/// Expected PCC between the oracle proficiency and mean rater labels under
/// the default configuration.
pub const DEFAULT_LABEL_PCC_BAND: (f64, f64) = (0.80, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_phones: usize,
    pub feature_dim: usize,
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Inclusive range of phones per utterance.
    pub phones_per_utterance: [usize; 2],
    /// Inclusive range of frames per phone.
    pub frames_per_phone: [usize; 2],
    /// Standard deviation of native prototype coordinates.
    pub prototype_scale: f64,
    /// Distance between a native prototype and its shifted counterpart.
    pub shift_scale: f64,
    /// Weight in [0,1] of the shared accent direction; the rest of the
    /// shift points at the phone's competitor.
    pub shift_coherence: f64,
    /// Frame standard deviation around the interpolated mean.
    pub frame_noise: f64,
    /// Standard deviation of the acoustic model's phone Gaussians.
    pub posterior_std: f64,
    /// Standard deviation of the per-speaker channel offset.
    pub speaker_offset: f64,
    /// Per-speaker frame variance is scaled by exp(u), u ~ U[-spread, spread].
    pub speaker_variance_spread: f64,
    /// Speaker proficiency is drawn uniformly from this range.
    pub proficiency_range: [f64; 2],
    /// Per-utterance perturbation of the speaker proficiency.
    pub proficiency_noise: f64,
    /// Per-rater noise on the 1..5 scale before rounding.
    pub label_noise: f64,
    pub raters: usize,
    pub eval_fraction: f64,
    /// Fraction of the training utterances held out as the dev split.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_phones: 12,
            feature_dim: 16,
            num_speakers: 60,
            utterances_per_speaker: 8,
            phones_per_utterance: [10, 16],
            frames_per_phone: [3, 8],
            prototype_scale: 0.8,
            shift_scale: 2.5,
            shift_coherence: 0.3,
            frame_noise: 1.0,
            posterior_std: 1.0,
            speaker_offset: 0.6,
            speaker_variance_spread: 1.0,
            proficiency_range: [0.0, 1.0],
            proficiency_noise: 0.05,
            label_noise: 0.6,
            raters: 5,
            eval_fraction: 0.2,
            dev_fraction: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("synth.{field}: {why}")));
        for (field, v) in [
            ("num_phones", self.num_phones),
            ("feature_dim", self.feature_dim),
            ("num_speakers", self.num_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("raters", self.raters),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1");
            }
        }
        for (field, [lo, hi]) in
            [("phones_per_utterance", self.phones_per_utterance), ("frames_per_phone", self.frames_per_phone)]
        {
            if lo == 0 || lo > hi {
                return bad(field, "needs 1 <= min <= max");
            }
        }
        for (field, v) in [
            ("prototype_scale", self.prototype_scale),
            ("shift_scale", self.shift_scale),
            ("frame_noise", self.frame_noise),
            ("speaker_offset", self.speaker_offset),
            ("speaker_variance_spread", self.speaker_variance_spread),
            ("proficiency_noise", self.proficiency_noise),
            ("label_noise", self.label_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, "must be a finite non-negative number");
            }
        }
        if !(self.posterior_std > 0.0) {
            return bad("posterior_std", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.shift_coherence) {
            return bad("shift_coherence", "must lie in [0, 1]");
        }
        let [lo, hi] = self.proficiency_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("proficiency_range", "needs 0 <= min <= max <= 1");
        }
        for (field, v) in [("eval_fraction", self.eval_fraction), ("dev_fraction", self.dev_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, "must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// A generated corpus plus the generating proficiency per utterance.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub oracle: BTreeMap<String, f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Phone posteriors of one frame under equal-variance isotropic Gaussians
/// with a uniform prior.
fn frame_posterior(frame: &[f64], native: &[Vec<f64>], std: f64, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * std * std);
    for (o, mu) in out.iter_mut().zip(native) {
        let d2: f64 = frame.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum();
        *o = -d2 * inv;
    }
    let lse = log_sum_exp(out);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - lse).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, d) = (cfg.num_phones, cfg.feature_dim);
    let phone_table: Vec<String> = (0..p).map(|i| format!("ph{i:02}")).collect();

    let native: Vec<Vec<f64>> = (0..p).map(|_| normal_vec(&mut rng, d, cfg.prototype_scale)).collect();
    let accent = unit(normal_vec(&mut rng, d, 1.0));
    let shifted: Vec<Vec<f64>> = native
        .iter()
        .enumerate()
        .map(|(ph, mu)| {
            let rival = if p == 1 {
                unit(normal_vec(&mut rng, d, 1.0))
            } else {
                let c = (ph + 1 + rng.random_range(0..p - 1)) % p;
                unit(native[c].iter().zip(mu).map(|(a, b)| a - b).collect())
            };
            let dir = unit(
                accent
                    .iter()
                    .zip(&rival)
                    .map(|(a, o)| cfg.shift_coherence * a + (1.0 - cfg.shift_coherence) * o)
                    .collect(),
            );
            mu.iter().zip(dir).map(|(m, u)| m + cfg.shift_scale * u).collect()
        })
        .collect();

    let mut utterances = Vec::new();
    let mut oracle = BTreeMap::new();
    let mut post_row = vec![0.0; p];
    for spk in 0..cfg.num_speakers {
        let [lo, hi] = cfg.proficiency_range;
        let rho_spk = lo + (hi - lo) * rng.random::<f64>();
        let offset = normal_vec(&mut rng, d, cfg.speaker_offset);
        let spread = cfg.speaker_variance_spread;
        let var_scale = (spread * (2.0 * rng.random::<f64>() - 1.0)).exp();
        let frame_std = cfg.frame_noise * var_scale.sqrt();

        for utt in 0..cfg.utterances_per_speaker {
            let id = format!("spk{spk:03}_utt{utt:02}");
            let noise: f64 = rng.sample(StandardNormal);
            let rho = (rho_spk + cfg.proficiency_noise * noise).clamp(0.0, 1.0);

            let [pmin, pmax] = cfg.phones_per_utterance;
            let m = rng.random_range(pmin..=pmax);
            let mut segments = Vec::with_capacity(m);
            let mut frames = Matrix::zeros(0, d);
            let mut post = Matrix::zeros(0, p);
            let mut frame = vec![0.0; d];
            for _ in 0..m {
                let phone = rng.random_range(0..p);
                let [fmin, fmax] = cfg.frames_per_phone;
                let len = rng.random_range(fmin..=fmax);
                let start = frames.rows();
                for _ in 0..len {
                    for k in 0..d {
                        let mean = (1.0 - rho) * shifted[phone][k] + rho * native[phone][k];
                        let z: f64 = rng.sample(StandardNormal);
                        frame[k] = mean + offset[k] + frame_std * z;
                    }
                    frame_posterior(&frame, &native, cfg.posterior_std, &mut post_row);
                    frames.push_row(&frame)?;
                    post.push_row(&post_row)?;
                }
                segments.push(Segment { phone, start, end: start + len });
            }

            let scores: Vec<u8> = (0..cfg.raters)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (1.0 + 4.0 * rho + cfg.label_noise * z).round().clamp(1.0, 5.0) as u8
                })
                .collect();

            utterances.push(Utterance {
                features: FeatureSequence::new(id.clone(), frames)?,
                posteriors: PosteriorGram::new(id.clone(), post, phone_table.clone())?,
                alignment: PhoneAlignment::new(id.clone(), segments)?,
                rating: RatedUtterance::new(id.clone(), scores)?,
            });
            oracle.insert(id, rho);
        }
    }

    let splits = random_splits(
        utterances.iter().map(|u| u.id().to_string()).collect(),
        cfg.eval_fraction,
        cfg.dev_fraction,
        &mut rng,
    )?;
    let corpus = Corpus::new(phone_table, PhonePrior::uniform(p), utterances, splits)?;
    Ok(SynthCorpus { corpus, oracle })
}

fn random_splits(
    mut ids: Vec<String>,
    eval_fraction: f64,
    dev_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SplitManifest> {
    ids.shuffle(rng);
    let n_eval = (ids.len() as f64 * eval_fraction).round() as usize;
    let mut train = ids.split_off(n_eval);
    let mut eval = ids;
    train.shuffle(rng);
    let n_dev = (train.len() as f64 * dev_fraction).round() as usize;
    let mut dev: Vec<String> = train.drain(..n_dev).collect();
    train.sort();
    dev.sort();
    eval.sort();
    SplitManifest::new(train, dev, eval)
}
