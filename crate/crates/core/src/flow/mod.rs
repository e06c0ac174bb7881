//! Affine-coupling normalizing flow.
//!
//! `f` maps the standard-normal latent space to data space. Densities are
//! evaluated through the inverse: `ln p(o) = ln N(f⁻¹(o); 0, I) + ln|det ∂f⁻¹/∂o|`.
//! An optional fixed per-dimension standardization is applied to data
//! before the coupling stack; it is the identity unless set explicitly.

pub mod adam;
mod coupling;
pub mod mlp;

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
use coupling::CouplingCache;
pub use coupling::{CouplingLayer, INITIAL_SCALE_CAP};
use mlp::{Dense, Mlp};

use crate::binio::{self, BinReader, BinWriter};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::Embedding;

pub const FLOW_MAGIC: &[u8; 4] = b"PNF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Latent to data, `f`.
    Forward,
    /// Data to latent, `f⁻¹`.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { layers: 10, hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    pub layers: Vec<CouplingLayer>,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Reusable per-sample buffers for training passes.
pub(crate) struct Workspace {
    caches: Vec<CouplingCache>,
    grad_z: Vec<f64>,
}

pub(crate) fn standard_normal_logpdf(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

impl FlowModel {
    /// Alternating-parity masks; the final net layers start at zero so the
    /// fresh model is the identity.
    pub fn new(dim: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("coupling flows need at least 2 dimensions, got {dim}")));
        }
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("flow needs layers >= 1 and hidden >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mask = (0..dim).map(|i| i % 2 == l % 2).collect();
                CouplingLayer::new(mask, cfg.hidden, &mut rng)
            })
            .collect();
        Ok(FlowModel { dim, layers, input_mean: vec![0.0; dim], input_scale: vec![1.0; dim] })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fixes the data standardization `(o - mean) / scale`.
    pub fn with_input_normalization(mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != self.dim || scale.len() != self.dim {
            return Err(Error::Dimension("normalization length must equal flow dim".into()));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("normalization scale must be positive".into()));
        }
        self.input_mean = mean;
        self.input_scale = scale;
        Ok(self)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }

    /// All trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_params(&mut self, src: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&src[off..off + s.len()]);
            off += s.len();
        });
        debug_assert_eq!(off, src.len());
    }

    pub(crate) fn zeros_like(&self) -> FlowModel {
        FlowModel {
            dim: self.dim,
            layers: self.layers.iter().map(CouplingLayer::zeros_like).collect(),
            input_mean: self.input_mean.clone(),
            input_scale: self.input_scale.clone(),
        }
    }

    pub(crate) fn workspace(&self) -> Workspace {
        Workspace { caches: self.layers.iter().map(CouplingLayer::cache).collect(), grad_z: vec![0.0; self.dim] }
    }

    fn normalization_log_det(&self) -> f64 {
        -self.input_scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim && batch.rows() > 0 {
            return Err(Error::Dimension(format!(
                "flow of dimension {} applied to {}-dim rows",
                self.dim,
                batch.cols()
            )));
        }
        if !batch.all_finite() {
            return Err(Error::Data("non-finite input to flow".into()));
        }
        Ok(())
    }

    /// Maps one data point to the latent space, recording activations.
    /// Returns the inverse log-determinant; the latent is in `ws.caches[0].output`.
    pub(crate) fn inverse_sample(&self, o: &[f64], ws: &mut Workspace) -> f64 {
        let last = self.layers.len() - 1;
        {
            let input = &mut ws.caches[last].input;
            for i in 0..self.dim {
                input[i] = (o[i] - self.input_mean[i]) / self.input_scale[i];
            }
        }
        let mut log_det = self.normalization_log_det();
        for l in (0..=last).rev() {
            log_det += self.layers[l].inverse_cached(&mut ws.caches[l]);
            if l > 0 {
                let (lo, hi) = ws.caches.split_at_mut(l);
                lo[l - 1].input.copy_from_slice(&hi[0].output);
            }
        }
        log_det
    }

    pub(crate) fn latent<'w>(&self, ws: &'w Workspace) -> &'w [f64] {
        &ws.caches[0].output
    }

    /// Backward pass for the sample last run through `inverse_sample`,
    /// given `∂L/∂z` in `ws.grad_z` and a loss containing `-log_det`.
    pub(crate) fn backward_sample(&self, ws: &mut Workspace, grad: &mut FlowModel) {
        let mut g = std::mem::take(&mut ws.grad_z);
        for l in 0..self.layers.len() {
            self.layers[l].inverse_backward(&mut ws.caches[l], &mut g, &mut grad.layers[l]);
        }
        ws.grad_z = g;
    }

    fn forward_sample(&self, z: &[f64], caches: &mut [CouplingCache]) -> (Vec<f64>, f64) {
        let mut x = z.to_vec();
        let mut y = vec![0.0; self.dim];
        let mut log_det = 0.0;
        for (layer, c) in self.layers.iter().zip(caches.iter_mut()) {
            log_det += layer.forward_into(&x, &mut y, c);
            std::mem::swap(&mut x, &mut y);
        }
        for i in 0..self.dim {
            x[i] = x[i] * self.input_scale[i] + self.input_mean[i];
        }
        (x, log_det - self.normalization_log_det())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::to_bytes(|w| self.write_to(w))
    }

    pub(crate) fn write_to(&self, w: &mut BinWriter<&mut Vec<u8>>) -> std::io::Result<()> {
        w.header(FLOW_MAGIC)?;
        w.usize(self.dim)?;
        w.usize(self.layers.len())?;
        for layer in &self.layers {
            let mask: Vec<u8> = layer.mask.iter().map(|&b| u8::from(b)).collect();
            w.bytes(&mask)?;
            write_mlp(w, &layer.scale_net)?;
            write_mlp(w, &layer.shift_net)?;
            w.f64s(&layer.scale_cap)?;
        }
        w.f64s(&self.input_mean)?;
        w.f64s(&self.input_scale)
    }

    pub(crate) fn read_from<R: std::io::Read>(r: &mut BinReader<R>, path: &Path) -> Result<FlowModel> {
        r.header(FLOW_MAGIC).map_err(|m| Error::format(path, m))?;
        let fmt = |e: std::io::Error| Error::format(path, e.to_string());
        let dim = r.usize().map_err(fmt)?;
        let n = r.usize().map_err(fmt)?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for l in 0..n {
            let mask: Vec<bool> = r.bytes(dim).map_err(fmt)?.into_iter().map(|b| b != 0).collect();
            let scale_net = read_mlp(r, path)?;
            let shift_net = read_mlp(r, path)?;
            let free = mask.iter().filter(|b| !**b).count();
            let cond = dim - free;
            for net in [&scale_net, &shift_net] {
                if net.inputs() != cond || net.outputs() != free {
                    return Err(Error::format(path, format!("layer {l}: net shape disagrees with mask")));
                }
            }
            let cap = r.f64s(free).map_err(fmt)?;
            layers.push(CouplingLayer::from_parts(mask, scale_net, shift_net, cap));
        }
        let input_mean = r.f64s(dim).map_err(fmt)?;
        let input_scale = r.f64s(dim).map_err(fmt)?;
        Ok(FlowModel { dim, layers, input_mean, input_scale })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<FlowModel> {
        let mut r = BinReader::new(Cursor::new(bytes));
        let m = Self::read_from(&mut r, path)?;
        r.expect_eof().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<FlowModel> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

fn write_mlp(w: &mut BinWriter<&mut Vec<u8>>, net: &Mlp) -> std::io::Result<()> {
    w.usize(net.layers.len())?;
    for l in &net.layers {
        w.usize(l.inputs)?;
        w.usize(l.outputs)?;
        w.f64s(&l.weights)?;
        w.f64s(&l.bias)?;
    }
    Ok(())
}

fn read_mlp<R: std::io::Read>(r: &mut BinReader<R>, path: &Path) -> Result<Mlp> {
    let fmt = |e: std::io::Error| Error::format(path, e.to_string());
    let n = r.usize().map_err(fmt)?;
    if n == 0 {
        return Err(Error::format(path, "coupling net without layers"));
    }
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let inputs = r.usize().map_err(fmt)?;
        let outputs = r.usize().map_err(fmt)?;
        let weights = r.f64s(inputs * outputs).map_err(fmt)?;
        let bias = r.f64s(outputs).map_err(fmt)?;
        layers.push(Dense { inputs, outputs, weights, bias });
    }
    Ok(Mlp { layers })
}

/// Applies `f` or `f⁻¹` row-wise. The returned log-determinants are those of
/// the applied map with respect to its input.
pub fn flow_transform(m: &FlowModel, direction: Direction, batch: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    m.check_batch(batch)?;
    let mut ws = m.workspace();
    let mut images = Matrix::zeros(batch.rows(), m.dim);
    let mut log_dets = Vec::with_capacity(batch.rows());
    for (n, row) in batch.iter_rows().enumerate() {
        let (image, ld) = match direction {
            Direction::Inverse => {
                let ld = m.inverse_sample(row, &mut ws);
                (m.latent(&ws).to_vec(), ld)
            }
            Direction::Forward => m.forward_sample(row, &mut ws.caches),
        };
        if !ld.is_finite() || image.iter().any(|v| !v.is_finite()) {
            return Err(non_finite_layer(m, direction, row));
        }
        images.row_mut(n).copy_from_slice(&image);
        log_dets.push(ld);
    }
    Ok((images, log_dets))
}

/// Locates the first layer producing a non-finite activation.
fn non_finite_layer(m: &FlowModel, direction: Direction, row: &[f64]) -> Error {
    let mut ws = m.workspace();
    let mut x = row.to_vec();
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..m.layers.len()).collect(),
        Direction::Inverse => {
            for i in 0..m.dim {
                x[i] = (x[i] - m.input_mean[i]) / m.input_scale[i];
            }
            (0..m.layers.len()).rev().collect()
        }
    };
    for l in order {
        let c = &mut ws.caches[l];
        let ld = match direction {
            Direction::Forward => {
                let mut y = vec![0.0; m.dim];
                let ld = m.layers[l].forward_into(&x, &mut y, c);
                x = y;
                ld
            }
            Direction::Inverse => {
                c.input.copy_from_slice(&x);
                let ld = m.layers[l].inverse_cached(c);
                x = c.output.clone();
                ld
            }
        };
        if !ld.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Error::Numerical(format!("non-finite activation in coupling layer {l}"));
        }
    }
    Error::Numerical("non-finite activation in flow output".into())
}

/// `ln p(o)` per row under the flow with a standard-normal base.
pub fn flow_logprob(m: &FlowModel, batch: &Matrix) -> Result<Vec<f64>> {
    let (z, ld) = flow_transform(m, Direction::Inverse, batch)?;
    Ok(z.iter_rows().zip(ld).map(|(z, l)| standard_normal_logpdf(z) + l).collect())
}

/// Utterance embedding: the mean latent image of the frames.
pub fn flow_embed(m: &FlowModel, fs: &FeatureSequence) -> Result<Embedding> {
    if fs.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty sequence", fs.utterance_id)));
    }
    let (z, _) = flow_transform(m, Direction::Inverse, &fs.frames)?;
    Ok(z.column_means())
}

/// Mean log-likelihood of an utterance's frames.
pub fn flow_utterance_loglik(m: &FlowModel, fs: &FeatureSequence) -> Result<f64> {
    let lp = flow_logprob(m, &fs.frames)?;
    Ok(lp.iter().sum::<f64>() / lp.len().max(1) as f64)
}

/// Class-conditional prior means for training: one row per class plus the
/// class of every frame.
pub(crate) struct PriorMeans<'a> {
    pub means: &'a Matrix,
    pub class_of: &'a [usize],
}

/// Mean negative log-likelihood of the rows in `idx` and its gradient.
/// `grad` and `grad_means` are overwritten with batch-mean gradients.
pub(crate) fn batch_loss_grad(
    m: &FlowModel,
    frames: &Matrix,
    idx: &[usize],
    prior: Option<&PriorMeans<'_>>,
    grad: &mut FlowModel,
    mut grad_means: Option<&mut Matrix>,
    ws: &mut Workspace,
) -> f64 {
    grad.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
    if let Some(gm) = grad_means.as_deref_mut() {
        gm.row_mut(0); // shape check only
        for v in 0..gm.rows() {
            gm.row_mut(v).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let half_log_2pi = 0.5 * m.dim as f64 * (2.0 * PI).ln();
    let mut total = 0.0;
    for &n in idx {
        let log_det = m.inverse_sample(frames.row(n), ws);
        let mut sq = 0.0;
        {
            let z = &ws.caches[0].output;
            let mu = prior.map(|p| p.means.row(p.class_of[n]));
            for i in 0..m.dim {
                let d = match mu {
                    Some(mu) => z[i] - mu[i],
                    None => z[i],
                };
                ws.grad_z[i] = d;
                sq += d * d;
            }
        }
        total += 0.5 * sq + half_log_2pi - log_det;
        if let (Some(p), Some(gm)) = (prior, grad_means.as_deref_mut()) {
            for (g, d) in gm.row_mut(p.class_of[n]).iter_mut().zip(&ws.grad_z) {
                *g -= d;
            }
        }
        m.backward_sample(ws, grad);
    }
    let inv = 1.0 / idx.len() as f64;
    grad.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= inv));
    if let Some(gm) = grad_means {
        for r in 0..gm.rows() {
            gm.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
    }
    total * inv
}

/// Shared Adam loop for flows and discriminative flows. When `prior` is set
/// and `learn_means` holds, the class means are optimized jointly.
pub(crate) fn train_loop(
    model: &mut FlowModel,
    frames: &Matrix,
    mut prior: Option<(&mut Matrix, &[usize])>,
    learn_means: bool,
    cfg: &AdamConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if frames.cols() != model.dim {
        return Err(Error::Dimension(format!(
            "flow of dimension {} trained on {}-dim frames",
            model.dim,
            frames.cols()
        )));
    }
    if frames.rows() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} frames is fewer than the batch size {}",
            frames.rows(),
            cfg.batch_size
        )));
    }
    if !frames.all_finite() {
        return Err(Error::Data("non-finite training frame".into()));
    }
    let n_backbone = model.num_params();
    let n_means = match (&prior, learn_means) {
        (Some((means, _)), true) => means.rows() * means.cols(),
        _ => 0,
    };
    let mut params = model.params();
    if let (Some((means, _)), true) = (&prior, learn_means) {
        params.extend_from_slice(means.as_slice());
    }
    let mut adam = Adam::new(params.len(), cfg);
    let mut grad = model.zeros_like();
    let mut grad_means = prior.as_ref().map(|(m, _)| Matrix::zeros(m.rows(), m.cols()));
    let mut flat_grad = vec![0.0; params.len()];
    let mut ws = model.workspace();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..frames.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = {
                let pm = prior.as_ref().map(|(means, class_of)| PriorMeans { means, class_of });
                batch_loss_grad(model, frames, batch, pm.as_ref(), &mut grad, grad_means.as_mut(), &mut ws)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            epoch_total += loss * batch.len() as f64;

            let mut off = 0;
            grad.visit(&mut |s| {
                flat_grad[off..off + s.len()].copy_from_slice(s);
                off += s.len();
            });
            if n_means > 0 {
                flat_grad[n_backbone..].copy_from_slice(grad_means.as_ref().unwrap().as_slice());
            }
            adam.step(&mut params, &flat_grad);
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite parameter in epoch {epoch}")));
            }
            model.set_params(&params[..n_backbone]);
            if n_means > 0 {
                let (means, _) = prior.as_mut().unwrap();
                let (r, c) = (means.rows(), means.cols());
                **means = Matrix::from_vec(r, c, params[n_backbone..].to_vec())?;
            }
        }
        trace.push(epoch_total / frames.rows() as f64);
    }
    Ok(trace)
}

/// Maximum-likelihood training with Adam; returns the per-epoch mean
/// negative log-likelihood.
pub fn flow_train(m: &FlowModel, frames: &Matrix, cfg: &AdamConfig) -> Result<(FlowModel, Vec<f64>)> {
    let mut model = m.clone();
    let trace = train_loop(&mut model, frames, None, false, cfg)?;
    Ok((model, trace))
}

/// Mean negative log-likelihood and flat gradient, for gradient checking.
pub fn flow_nll_and_grad(m: &FlowModel, frames: &Matrix) -> (f64, Vec<f64>) {
    let mut grad = m.zeros_like();
    let mut ws = m.workspace();
    let idx: Vec<usize> = (0..frames.rows()).collect();
    let loss = batch_loss_grad(m, frames, &idx, None, &mut grad, None, &mut ws);
    (loss, grad.params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    /// A model with every parameter randomized, final layers included.
    fn scrambled(dim: usize, layers: usize, hidden: usize, seed: u64) -> FlowModel {
        let mut m = FlowModel::new(dim, &FlowConfig { layers, hidden }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let p: Vec<f64> = m.params().iter().map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        m.set_params(&p);
        m
    }

    #[test]
    fn fresh_model_is_identity() {
        let m = FlowModel::new(4, &FlowConfig { layers: 4, hidden: 8 }, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, 10, 4, 2.0);
        for dir in [Direction::Forward, Direction::Inverse] {
            let (y, ld) = flow_transform(&m, dir, &x).unwrap();
            assert_eq!(y, x);
            assert!(ld.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_logprob_is_base_density() {
        let m = FlowModel::new(2, &FlowConfig { layers: 2, hidden: 4 }, 1).unwrap();
        let lp = flow_logprob(&m, &Matrix::from_rows(&[[0.0, 0.0], [1.0, -2.0]]).unwrap()).unwrap();
        assert!((lp[0] + 1.837877).abs() < 1e-6);
        assert!((lp[1] - standard_normal_logpdf(&[1.0, -2.0])).abs() < 1e-15);
    }

    #[test]
    fn inverse_then_forward_reconstructs() {
        let m = scrambled(5, 6, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(&mut rng, 50, 5, 1.5);
        let (z, ld_inv) = flow_transform(&m, Direction::Inverse, &x).unwrap();
        let (back, ld_fwd) = flow_transform(&m, Direction::Forward, &z).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in ld_inv.iter().zip(&ld_fwd) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_is_part_of_the_map() {
        let m = scrambled(3, 3, 6, 5).with_input_normalization(vec![1.0, -2.0, 0.5], vec![2.0, 0.5, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_batch(&mut rng, 20, 3, 2.0);
        let (z, ld_inv) = flow_transform(&m, Direction::Inverse, &x).unwrap();
        let (back, ld_fwd) = flow_transform(&m, Direction::Forward, &z).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in ld_inv.iter().zip(&ld_fwd) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = scrambled(4, 3, 8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_batch(&mut rng, 6, 4, 1.0);
        let (_, grad) = flow_nll_and_grad(&m, &x);
        let p0 = m.params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p0.len() {
            let mut mp = m.clone();
            let mut p = p0.clone();
            p[i] += h;
            mp.set_params(&p);
            let up = flow_nll_and_grad(&mp, &x).0;
            p[i] -= 2.0 * h;
            mp.set_params(&p);
            let down = flow_nll_and_grad(&mp, &x).0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn training_is_deterministic_and_improves_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = random_batch(&mut rng, 400, 2, 0.7);
        for r in 0..x.rows() {
            x.row_mut(r)[0] += 2.0;
            x.row_mut(r)[1] -= 1.0;
        }
        let m0 = FlowModel::new(2, &FlowConfig { layers: 4, hidden: 16 }, 1).unwrap();
        let cfg = AdamConfig { learning_rate: 5e-3, batch_size: 50, epochs: 15, seed: 3, ..AdamConfig::default() };
        let (a, trace_a) = flow_train(&m0, &x, &cfg).unwrap();
        let (b, trace_b) = flow_train(&m0, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_a, trace_b);
        let before: f64 = flow_logprob(&m0, &x).unwrap().iter().sum::<f64>() / 400.0;
        let after: f64 = flow_logprob(&a, &x).unwrap().iter().sum::<f64>() / 400.0;
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn standard_normal_data_stays_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 4;
        let x = random_batch(&mut rng, 2000, d, 1.0);
        let m0 = FlowModel::new(d, &FlowConfig { layers: 4, hidden: 16 }, 2).unwrap();
        let cfg = AdamConfig { batch_size: 100, epochs: 5, seed: 1, ..AdamConfig::default() };
        let (_, trace) = flow_train(&m0, &x, &cfg).unwrap();
        let entropy = 0.5 * d as f64 * (2.0 * PI * std::f64::consts::E).ln();
        for nll in trace {
            assert!((nll - entropy).abs() < 0.01 * entropy, "{nll} vs {entropy}");
        }
    }

    #[test]
    fn embedding_is_mean_latent() {
        let m = scrambled(3, 2, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_batch(&mut rng, 7, 3, 1.0);
        let fs = FeatureSequence::new("u", x.clone()).unwrap();
        let z = flow_embed(&m, &fs).unwrap();
        let (lat, _) = flow_transform(&m, Direction::Inverse, &x).unwrap();
        assert_eq!(z, lat.column_means());

        let single = FeatureSequence::new("u", x.select_rows(&[2])).unwrap();
        assert_eq!(flow_embed(&m, &single).unwrap(), lat.row(2).to_vec());

        let idx: Vec<usize> = (0..7).flat_map(|i| [i, i]).collect();
        let dup = FeatureSequence::new("u", x.select_rows(&idx)).unwrap();
        for (a, b) in flow_embed(&m, &dup).unwrap().iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }

        let ident = FlowModel::new(3, &FlowConfig { layers: 2, hidden: 4 }, 0).unwrap();
        assert_eq!(flow_embed(&ident, &fs).unwrap(), x.column_means());
    }

    #[test]
    fn divergence_and_shape_errors() {
        let m = FlowModel::new(2, &FlowConfig { layers: 2, hidden: 4 }, 0).unwrap();
        let bad = Matrix::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(flow_logprob(&m, &bad).is_err());
        let wrong = Matrix::zeros(3, 3);
        assert!(flow_logprob(&m, &wrong).is_err());
        let cfg = AdamConfig { batch_size: 10, ..AdamConfig::default() };
        assert!(flow_train(&m, &Matrix::zeros(5, 2), &cfg).is_err());
        let huge = AdamConfig { learning_rate: 1e300, batch_size: 4, epochs: 3, ..AdamConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch(&mut rng, 8, 2, 1.0);
        let err = flow_train(&m, &x, &huge).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }

    #[test]
    fn model_round_trips() {
        let m = scrambled(3, 3, 4, 13).with_input_normalization(vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = m.to_bytes();
        let back = FlowModel::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }
}
