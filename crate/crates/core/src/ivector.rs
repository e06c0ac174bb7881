//! i-vector extraction: a mixture of linear Gaussians whose component means
//! are offset by `T_k z` with a standard-normal latent `z` per utterance.
//!
//! Alignments come from a fixed UBM, so each utterance is summarised by its
//! zeroth- and centered first-order Baum-Welch statistics.

use std::io::Cursor;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, BinReader};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::matrix::Matrix;

pub const IVECTOR_MAGIC: &[u8; 4] = b"PIVM";
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    pub utterance_id: String,
    /// `N_k = Σ_t γ_tk`.
    pub zeroth: Vec<f64>,
    /// Row `k` is `Σ_t γ_tk (o_t - m_k)`.
    pub first_centered: Matrix,
}

pub fn ubm_stats(m: &GmmModel, fs: &FeatureSequence) -> Result<BaumWelchStats> {
    let gamma = m.responsibility_matrix(&fs.frames)?;
    let (k, d) = (m.num_components(), m.dim());
    let mut zeroth = vec![0.0; k];
    let mut first = Matrix::zeros(k, d);
    for (t, frame) in fs.frames.iter_rows().enumerate() {
        for c in 0..k {
            let g = gamma[(t, c)];
            if g == 0.0 {
                continue;
            }
            zeroth[c] += g;
            let mu = m.means.row(c);
            for (j, f) in first.row_mut(c).iter_mut().enumerate() {
                *f += g * (frame[j] - mu[j]);
            }
        }
    }
    Ok(BaumWelchStats { utterance_id: fs.utterance_id.clone(), zeroth, first_centered: first })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorModel {
    pub ubm: GmmModel,
    /// One `D x R` loading matrix per component.
    pub loadings: Vec<DMatrix<f64>>,
    /// Diagonal covariances, `K x D`.
    pub covariances: Matrix,
}

/// Posterior of the latent for one utterance.
#[derive(Debug, Clone)]
pub struct IVectorPosterior {
    /// Posterior mean: the i-vector.
    pub mean: Vec<f64>,
    /// Posterior precision `L`.
    pub precision: DMatrix<f64>,
}

impl IVectorPosterior {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.precision
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))
    }
}

/// Per-model terms shared by every utterance.
struct Projections {
    /// `Σ_k^{-1} T_k`, `D x R`.
    scaled: Vec<DMatrix<f64>>,
    /// `T_kᵀ Σ_k^{-1} T_k`, `R x R`.
    gram: Vec<DMatrix<f64>>,
}

impl IVectorModel {
    pub fn new(ubm: GmmModel, loadings: Vec<DMatrix<f64>>) -> Result<Self> {
        let (k, d) = (ubm.num_components(), ubm.dim());
        if loadings.len() != k {
            return Err(Error::Dimension(format!("{} loading matrices for {k} components", loadings.len())));
        }
        let r = loadings[0].ncols();
        if loadings.iter().any(|t| t.nrows() != d || t.ncols() != r) {
            return Err(Error::Dimension("loading matrices must all be D x R".into()));
        }
        if r == 0 || r > k * d {
            return Err(Error::InvalidArgument(format!("i-vector dimension {r} must lie in 1..={}", k * d)));
        }
        if loadings.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("non-finite loading".into()));
        }
        let covariances = ubm.variances.clone();
        Ok(IVectorModel { ubm, loadings, covariances })
    }

    pub fn rank(&self) -> usize {
        self.loadings[0].ncols()
    }

    fn projections(&self) -> Projections {
        let mut scaled = Vec::with_capacity(self.loadings.len());
        let mut gram = Vec::with_capacity(self.loadings.len());
        for (c, t) in self.loadings.iter().enumerate() {
            let mut s = t.clone();
            for (j, mut row) in s.row_iter_mut().enumerate() {
                row /= self.covariances[(c, j)];
            }
            gram.push(t.transpose() * &s);
            scaled.push(s);
        }
        Projections { scaled, gram }
    }

    fn check_stats(&self, st: &BaumWelchStats) -> Result<()> {
        let (k, d) = (self.ubm.num_components(), self.ubm.dim());
        if st.zeroth.len() != k || st.first_centered.rows() != k || st.first_centered.cols() != d {
            return Err(Error::Dimension(format!(
                "{}: statistics shaped for K={} D={}, model has K={k} D={d}",
                st.utterance_id,
                st.zeroth.len(),
                st.first_centered.cols()
            )));
        }
        if st.zeroth.iter().any(|v| !v.is_finite()) || !st.first_centered.all_finite() {
            return Err(Error::Data(format!("{}: non-finite statistics", st.utterance_id)));
        }
        Ok(())
    }

    /// Returns the posterior and `b = Σ_k T_kᵀ Σ_k^{-1} F_k`.
    fn posterior(&self, proj: &Projections, st: &BaumWelchStats) -> Result<(IVectorPosterior, DVector<f64>)> {
        self.check_stats(st)?;
        let r = self.rank();
        let mut precision = DMatrix::<f64>::identity(r, r);
        let mut b = DVector::<f64>::zeros(r);
        for (c, n) in st.zeroth.iter().enumerate() {
            if *n != 0.0 {
                precision += &proj.gram[c] * *n;
            }
            let f = DVector::from_column_slice(st.first_centered.row(c));
            b += proj.scaled[c].transpose() * f;
        }
        let chol = precision.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!("{}: posterior precision not positive definite", st.utterance_id))
        })?;
        let mean = chol.solve(&b);
        Ok((IVectorPosterior { mean: mean.iter().copied().collect(), precision }, b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::to_bytes(|w| {
            w.header(IVECTOR_MAGIC)?;
            w.usize(self.ubm.num_components())?;
            w.usize(self.ubm.dim())?;
            w.usize(self.rank())?;
            self.ubm.write_to(w)?;
            for t in &self.loadings {
                // row-major D x R
                for row in t.row_iter() {
                    for v in row.iter() {
                        w.f64(*v)?;
                    }
                }
            }
            w.f64s(self.covariances.as_slice())
        })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<IVectorModel> {
        let mut r = BinReader::new(Cursor::new(bytes));
        r.header(IVECTOR_MAGIC).map_err(|m| Error::format(path, m))?;
        let fmt = |e: std::io::Error| Error::format(path, e.to_string());
        let k = r.usize().map_err(fmt)?;
        let d = r.usize().map_err(fmt)?;
        let rank = r.usize().map_err(fmt)?;
        let ubm = GmmModel::read_from(&mut r, path)?;
        if ubm.num_components() != k || ubm.dim() != d {
            return Err(Error::format(path, "embedded UBM disagrees with header"));
        }
        let mut loadings = Vec::with_capacity(k);
        for _ in 0..k {
            let vals = r.f64s(d * rank).map_err(fmt)?;
            loadings.push(DMatrix::from_row_slice(d, rank, &vals));
        }
        let covariances = Matrix::from_vec(k, d, r.f64s(k * d).map_err(fmt)?)?;
        r.expect_eof().map_err(fmt)?;
        let mut m = IVectorModel::new(ubm, loadings)?;
        m.covariances = covariances;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<IVectorModel> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

/// Posterior mean (the i-vector) and precision of the utterance latent.
pub fn ivector_infer(m: &IVectorModel, st: &BaumWelchStats) -> Result<IVectorPosterior> {
    let proj = m.projections();
    m.posterior(&proj, st).map(|(p, _)| p)
}

/// Infers i-vectors for many utterances, sharing the per-model precomputation.
pub fn ivector_infer_all(m: &IVectorModel, stats: &[BaumWelchStats]) -> Result<Vec<Vec<f64>>> {
    let proj = m.projections();
    stats.iter().map(|st| m.posterior(&proj, st).map(|(p, _)| p.mean)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmatrixTrace {
    /// Loading-dependent part of the marginal log-likelihood of the
    /// statistics, per frame, after each EM iteration.
    pub objective: Vec<f64>,
}

fn objective_term(post: &IVectorPosterior, b: &DVector<f64>) -> f64 {
    let z = DVector::from_column_slice(&post.mean);
    // ln|L| from the Cholesky diagonal
    let chol = post.precision.clone().cholesky().expect("checked positive definite");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    0.5 * b.dot(&z) - 0.5 * log_det
}

/// EM estimation of the loading matrices with the UBM held fixed.
pub fn tmatrix_train(
    ubm: &GmmModel,
    stats: &[BaumWelchStats],
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<(IVectorModel, TmatrixTrace)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("tmatrix_train needs iters >= 1".into()));
    }
    if stats.is_empty() {
        return Err(Error::InvalidArgument("tmatrix_train needs statistics".into()));
    }
    let (k, d) = (ubm.num_components(), ubm.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loadings =
        (0..k).map(|_| DMatrix::from_fn(d, rank, |_, _| INIT_SCALE * rng.sample::<f64, _>(StandardNormal))).collect();
    let mut model = IVectorModel::new(ubm.clone(), loadings)?;
    let frames: f64 = stats.iter().map(|s| s.zeroth.iter().sum::<f64>()).sum();
    let norm = frames.max(1.0);

    let mut trace = Vec::with_capacity(iters);
    for it in 0..=iters {
        let proj = model.projections();
        let mut cross: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, rank); k];
        let mut second: Vec<DMatrix<f64>> = vec![DMatrix::zeros(rank, rank); k];
        let mut objective = 0.0;
        for st in stats {
            let (post, b) = model.posterior(&proj, st)?;
            objective += objective_term(&post, &b);
            if it == iters {
                continue;
            }
            let z = DVector::from_column_slice(&post.mean);
            let ezz = post.covariance()? + &z * z.transpose();
            for c in 0..k {
                let f = DVector::from_column_slice(st.first_centered.row(c));
                cross[c] += &f * z.transpose();
                if st.zeroth[c] != 0.0 {
                    second[c] += &ezz * st.zeroth[c];
                }
            }
        }
        if it > 0 {
            trace.push(objective / norm);
        }
        if it == iters {
            break;
        }
        for c in 0..k {
            let chol = second[c]
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("singular accumulator for component {c}")))?;
            // T_k = C_k A_k^{-1}  <=>  A_k T_kᵀ = C_kᵀ (A_k symmetric)
            model.loadings[c] = chol.solve(&cross[c].transpose()).transpose();
        }
        if model.loadings.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!("T-matrix EM iteration {it}")));
        }
    }
    Ok((model, TmatrixTrace { objective: trace }))
}
