//! Diagonal-covariance Gaussian mixture trained by EM.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, BinReader, BinWriter};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};

pub const GMM_MAGIC: &[u8; 4] = b"PGMM";

/// Variances are floored at this fraction of the global per-dimension variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-4;
const KMEANS_ITERS: usize = 10;
const MIN_OCCUPANCY: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
}

/// Per-component terms reused across frames.
struct Precomputed {
    log_const: Vec<f64>,
    inv_var: Matrix,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(Error::Dimension(format!(
                "GMM with {k} weights, {}x{} means, {}x{} variances",
                means.rows(),
                means.cols(),
                variances.rows(),
                variances.cols()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Data(format!("GMM weights sum to {sum}")));
        }
        if variances.as_slice().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Data("GMM variances must be positive".into()));
        }
        if !means.all_finite() {
            return Err(Error::Data("GMM means must be finite".into()));
        }
        Ok(GmmModel { weights, means, variances })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    fn precompute(&self) -> Precomputed {
        let (k, d) = (self.num_components(), self.dim());
        let mut inv_var = Matrix::zeros(k, d);
        let log_const = (0..k)
            .map(|c| {
                let mut log_det = 0.0;
                for j in 0..d {
                    let v = self.variances[(c, j)];
                    inv_var[(c, j)] = 1.0 / v;
                    log_det += (2.0 * PI * v).ln();
                }
                self.weights[c].ln() - 0.5 * log_det
            })
            .collect();
        Precomputed { log_const, inv_var }
    }

    /// `ln w_k + ln N(frame; μ_k, Σ_k)` for every component.
    fn joint_logs(&self, pre: &Precomputed, frame: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(c);
            let iv = pre.inv_var.row(c);
            let mut q = 0.0;
            for j in 0..frame.len() {
                let diff = frame[j] - mu[j];
                q += diff * diff * iv[j];
            }
            *o = pre.log_const[c] - 0.5 * q;
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Dimension(format!("GMM of dimension {} applied to {d}-dim frames", self.dim())));
        }
        Ok(())
    }

    /// Component posteriors for one frame.
    pub fn responsibilities(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(frame.len())?;
        let pre = self.precompute();
        let mut logs = vec![0.0; self.num_components()];
        self.joint_logs(&pre, frame, &mut logs);
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Responsibilities of every row, as an `N x K` matrix.
    pub fn responsibility_matrix(&self, frames: &Matrix) -> Result<Matrix> {
        self.check_dim(frames.cols())?;
        let pre = self.precompute();
        let k = self.num_components();
        let mut out = Matrix::zeros(frames.rows(), k);
        for (t, frame) in frames.iter_rows().enumerate() {
            let row = out.row_mut(t);
            self.joint_logs(&pre, frame, row);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|l| *l = (*l - lse).exp());
        }
        Ok(out)
    }

    pub fn frame_logliks(&self, frames: &Matrix) -> Result<Vec<f64>> {
        self.check_dim(frames.cols())?;
        let pre = self.precompute();
        let mut logs = vec![0.0; self.num_components()];
        Ok(frames
            .iter_rows()
            .map(|f| {
                self.joint_logs(&pre, f, &mut logs);
                log_sum_exp(&logs)
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::to_bytes(|w| self.write_to(w))
    }

    pub(crate) fn write_to(&self, w: &mut BinWriter<&mut Vec<u8>>) -> std::io::Result<()> {
        w.header(GMM_MAGIC)?;
        w.usize(self.num_components())?;
        w.usize(self.dim())?;
        w.f64s(&self.weights)?;
        w.f64s(self.means.as_slice())?;
        w.f64s(self.variances.as_slice())
    }

    pub(crate) fn read_from<R: std::io::Read>(r: &mut BinReader<R>, path: &Path) -> Result<GmmModel> {
        r.header(GMM_MAGIC).map_err(|m| Error::format(path, m))?;
        let fmt = |e: std::io::Error| Error::format(path, e.to_string());
        let k = r.usize().map_err(fmt)?;
        let d = r.usize().map_err(fmt)?;
        let weights = r.f64s(k).map_err(fmt)?;
        let means = Matrix::from_vec(k, d, r.f64s(k * d).map_err(fmt)?)?;
        let variances = Matrix::from_vec(k, d, r.f64s(k * d).map_err(fmt)?)?;
        GmmModel::new(weights, means, variances)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<GmmModel> {
        let mut r = BinReader::new(Cursor::new(bytes));
        let m = Self::read_from(&mut r, path)?;
        r.expect_eof().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<GmmModel> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

/// Per-frame `ln p(o_i)` and their arithmetic mean over the utterance.
pub fn gmm_loglik(m: &GmmModel, fs: &FeatureSequence) -> Result<(Vec<f64>, f64)> {
    let ll = m.frame_logliks(&fs.frames)?;
    let mean = ll.iter().sum::<f64>() / ll.len().max(1) as f64;
    Ok((ll, mean))
}

#[derive(Debug, Clone)]
pub struct GmmTrace {
    /// Mean per-frame log-likelihood after each EM iteration.
    pub loglik: Vec<f64>,
}

fn kmeans(frames: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let n = frames.rows();
    let mut picks = sample(rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centers = frames.select_rows(&picks);
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (t, f) in frames.iter_rows().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d2: f64 = f.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
            assign[t] = best.1;
        }
        let mut sums = Matrix::zeros(k, frames.cols());
        let mut counts = vec![0usize; k];
        for (t, f) in frames.iter_rows().enumerate() {
            counts[assign[t]] += 1;
            sums.row_mut(assign[t]).iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers.row_mut(c).iter_mut().zip(sums.row(c)).for_each(|(m, s)| *m = s * inv);
            }
        }
    }
    (centers, assign)
}

/// EM training from a seeded k-means start.
pub fn gmm_train(frames: &Matrix, k: usize, iters: usize, seed: u64) -> Result<(GmmModel, GmmTrace)> {
    let (n, d) = (frames.rows(), frames.cols());
    if k == 0 || iters == 0 {
        return Err(Error::InvalidArgument("GMM needs k >= 1 and iters >= 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("GMM with {k} components needs at least {k} frames, got {n}")));
    }
    if !frames.all_finite() {
        return Err(Error::Data("non-finite frame in GMM training data".into()));
    }
    let first = frames.row(0);
    if frames.iter_rows().all(|r| r == first) {
        return Err(Error::Data("GMM training frames are all identical".into()));
    }
    let global_var = frames.column_variances();
    let floor: Vec<f64> = global_var.iter().map(|v| (VARIANCE_FLOOR_RATIO * v).max(f64::MIN_POSITIVE)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centers, assign) = kmeans(frames, k, &mut rng);
    let mut counts = vec![0usize; k];
    let mut sq = Matrix::zeros(k, d);
    for (t, f) in frames.iter_rows().enumerate() {
        let c = assign[t];
        counts[c] += 1;
        for j in 0..d {
            let diff = f[j] - centers[(c, j)];
            sq[(c, j)] += diff * diff;
        }
    }
    let mut variances = Matrix::zeros(k, d);
    for c in 0..k {
        for j in 0..d {
            variances[(c, j)] =
                if counts[c] > 1 { (sq[(c, j)] / counts[c] as f64).max(floor[j]) } else { global_var[j].max(floor[j]) };
        }
    }
    let weights = counts.iter().map(|&c| (c as f64 + 1.0) / (n + k) as f64).collect();
    let mut model = GmmModel { weights, means: centers, variances };

    let mut trace = Vec::with_capacity(iters);
    let mut logs = vec![0.0; k];
    for it in 0..=iters {
        let pre = model.precompute();
        let mut occ = vec![0.0; k];
        let mut first = Matrix::zeros(k, d);
        let mut second = Matrix::zeros(k, d);
        let mut total = 0.0;
        for f in frames.iter_rows() {
            model.joint_logs(&pre, f, &mut logs);
            let lse = log_sum_exp(&logs);
            total += lse;
            for c in 0..k {
                let g = (logs[c] - lse).exp();
                if g == 0.0 {
                    continue;
                }
                occ[c] += g;
                let fr = first.row_mut(c);
                for j in 0..d {
                    fr[j] += g * f[j];
                }
                let sr = second.row_mut(c);
                for j in 0..d {
                    sr[j] += g * f[j] * f[j];
                }
            }
        }
        if it > 0 {
            trace.push(total / n as f64);
        }
        if it == iters {
            break;
        }
        for c in 0..k {
            model.weights[c] = occ[c] / n as f64;
            if occ[c] < MIN_OCCUPANCY {
                continue;
            }
            let inv = 1.0 / occ[c];
            for j in 0..d {
                let mu = first[(c, j)] * inv;
                model.means[(c, j)] = mu;
                model.variances[(c, j)] = (second[(c, j)] * inv - mu * mu).max(floor[j]);
            }
        }
        let wsum: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= wsum);
        if !model.means.all_finite() || !model.variances.all_finite() {
            return Err(Error::Divergence(format!("GMM EM iteration {it}")));
        }
    }
    Ok((model, GmmTrace { loglik: trace }))
}
