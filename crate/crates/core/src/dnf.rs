//! Discriminative normalizing flow: a shared coupling backbone with one
//! identity-covariance Gaussian prior per proficiency class.

use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, BinReader};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::flow::{self, AdamConfig, Direction, FlowModel, PriorMeans};
use crate::matrix::Matrix;
use crate::Embedding;

pub const DNF_MAGIC: &[u8; 4] = b"PDNF";

/// Offsets the class-mean stream from the shuffle stream so both are
/// reproducible from the one Adam seed.
const MEAN_SEED_OFFSET: u64 = 0x5eed_d0f0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanUpdate {
    Learn,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnfModel {
    pub backbone: FlowModel,
    /// Row `s` is the latent prior mean of class `s`.
    pub class_means: Matrix,
}

impl DnfModel {
    pub fn new(backbone: FlowModel, class_means: Matrix) -> Result<Self> {
        if class_means.rows() == 0 {
            return Err(Error::InvalidArgument("DNF needs at least one class".into()));
        }
        if class_means.cols() != backbone.dim() {
            return Err(Error::Dimension(format!(
                "class means have dimension {}, backbone {}",
                class_means.cols(),
                backbone.dim()
            )));
        }
        if !class_means.all_finite() {
            return Err(Error::Data("non-finite class mean".into()));
        }
        Ok(DnfModel { backbone, class_means })
    }

    /// Seeded unit-norm class means.
    pub fn with_random_means(backbone: FlowModel, classes: usize, seed: u64) -> Result<Self> {
        let d = backbone.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(MEAN_SEED_OFFSET));
        let mut means = Matrix::zeros(classes, d);
        for s in 0..classes {
            let row = means.row_mut(s);
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
        }
        DnfModel::new(backbone, means)
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::to_bytes(|w| {
            w.header(DNF_MAGIC)?;
            self.backbone.write_to(w)?;
            w.matrix(&self.class_means)
        })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DnfModel> {
        let mut r = BinReader::new(Cursor::new(bytes));
        r.header(DNF_MAGIC).map_err(|m| Error::format(path, m))?;
        let backbone = FlowModel::read_from(&mut r, path)?;
        let means = r.matrix().map_err(|e| Error::format(path, e.to_string()))?;
        r.expect_eof().map_err(|e| Error::format(path, e.to_string()))?;
        DnfModel::new(backbone, means).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<DnfModel> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

/// `ln N(f⁻¹(o); μ_s, I) + ln|det ∂f⁻¹/∂o|` per row.
pub fn dnf_logprob(m: &DnfModel, batch: &Matrix, class_id: usize) -> Result<Vec<f64>> {
    if class_id >= m.num_classes() {
        return Err(Error::InvalidArgument(format!("class {class_id} out of range for {} classes", m.num_classes())));
    }
    let mu = m.class_means.row(class_id);
    let (z, ld) = flow::flow_transform(&m.backbone, Direction::Inverse, batch)?;
    Ok(z.iter_rows()
        .zip(ld)
        .map(|(z, l)| {
            let centered: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
            flow::standard_normal_logpdf(&centered) + l
        })
        .collect())
}

/// Same averaging as the vanilla flow, on the backbone.
pub fn dnf_embed(m: &DnfModel, fs: &FeatureSequence) -> Result<Embedding> {
    flow::flow_embed(&m.backbone, fs)
}

fn check_labels(frames: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != frames.rows() {
        return Err(Error::Dimension(format!("{} labels for {} frames", labels.len(), frames.rows())));
    }
    let mut seen = vec![false; classes];
    for &c in labels {
        if c >= classes {
            return Err(Error::InvalidArgument(format!("label {c} out of range for {classes} classes")));
        }
        seen[c] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("class {missing} has no training frames")));
    }
    Ok(())
}

/// Continues training from `init`. With frozen zero means this reproduces
/// `flow_train` exactly.
pub fn dnf_train_from(
    init: &DnfModel,
    frames: &Matrix,
    labels: &[usize],
    cfg: &AdamConfig,
    update: MeanUpdate,
) -> Result<(DnfModel, Vec<f64>)> {
    check_labels(frames, labels, init.num_classes())?;
    let mut model = init.clone();
    let trace = flow::train_loop(
        &mut model.backbone,
        frames,
        Some((&mut model.class_means, labels)),
        update == MeanUpdate::Learn,
        cfg,
    )?;
    Ok((model, trace))
}

/// Joint training of backbone and class means from a fresh backbone.
pub fn dnf_train(
    backbone: &FlowModel,
    frames: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &AdamConfig,
) -> Result<(DnfModel, Vec<f64>)> {
    let init = DnfModel::with_random_means(backbone.clone(), classes, cfg.seed)?;
    dnf_train_from(&init, frames, labels, cfg, MeanUpdate::Learn)
}

/// Mean class-conditional negative log-likelihood and its gradient, backbone
/// parameters first and class means last.
pub fn dnf_nll_and_grad(m: &DnfModel, frames: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(frames, labels, m.num_classes())?;
    let mut grad = m.backbone.zeros_like();
    let mut grad_means = Matrix::zeros(m.class_means.rows(), m.class_means.cols());
    let mut ws = m.backbone.workspace();
    let idx: Vec<usize> = (0..frames.rows()).collect();
    let prior = PriorMeans { means: &m.class_means, class_of: labels };
    let loss =
        flow::batch_loss_grad(&m.backbone, frames, &idx, Some(&prior), &mut grad, Some(&mut grad_means), &mut ws);
    let mut flat = grad.params();
    flat.extend_from_slice(grad_means.as_slice());
    Ok((loss, flat))
}

/// Between-class latent mean distance over the mean within-class distance
/// to the class centroid, for two classes.
pub fn latent_separation_ratio(latents: &Matrix, labels: &[usize]) -> f64 {
    let d = latents.cols();
    let mut centroids = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for (z, &c) in latents.iter_rows().zip(labels) {
        counts[c] += 1;
        centroids[c].iter_mut().zip(z).for_each(|(a, b)| *a += b);
    }
    for c in 0..2 {
        centroids[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let within: f64 =
        latents.iter_rows().zip(labels).map(|(z, &c)| dist(z, &centroids[c])).sum::<f64>() / latents.rows() as f64;
    dist(&centroids[0], &centroids[1]) / within
}
