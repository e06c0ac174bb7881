//! ε-insensitive support vector regression trained on the dual by SMO.
//!
//! The dual is posed over `2N` variables `[α; α*]` with labels `±1`, as in
//! libsvm, and solved with second-order working-set selection.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, BinReader};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const SVR_MAGIC: &[u8; 4] = b"PSVR";
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf,
}

/// RBF width: a fixed value or `"scale"`, i.e. `1 / (d · Var(X))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum Gamma {
    Scale,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<GammaRepr> for Gamma {
    type Error = String;

    fn try_from(r: GammaRepr) -> std::result::Result<Self, String> {
        match r {
            GammaRepr::Name(s) if s == "scale" => Ok(Gamma::Scale),
            GammaRepr::Name(s) => Err(format!("unknown gamma `{s}`; use \"scale\" or a number")),
            GammaRepr::Value(v) => Ok(Gamma::Value(v)),
        }
    }
}

impl From<Gamma> for GammaRepr {
    fn from(g: Gamma) -> Self {
        match g {
            Gamma::Scale => GammaRepr::Name("scale".into()),
            Gamma::Value(v) => GammaRepr::Value(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    pub kernel: Kernel,
    pub gamma: Gamma,
    /// Stopping threshold on the maximal KKT violation.
    pub tolerance: f64,
    /// Iteration budget, in multiples of the number of dual variables.
    pub max_passes: usize,
    /// Standardize inputs with training-set statistics.
    pub standardize: bool,
}

impl Default for SvrParams {
    fn default() -> Self {
        SvrParams {
            c: 1.0,
            epsilon: 0.1,
            kernel: Kernel::Rbf,
            gamma: Gamma::Scale,
            tolerance: 1e-3,
            max_passes: 10_000,
            standardize: true,
        }
    }
}

impl SvrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config("svr.c must be positive".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config("svr.epsilon must be non-negative".into()));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Config("svr.gamma must be positive".into()));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("svr.tolerance must be positive".into()));
        }
        if self.max_passes == 0 {
            return Err(Error::Config("svr.max_passes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub c: f64,
    pub epsilon: f64,
    pub kernel: Kernel,
    /// Resolved RBF width; unused by the linear kernel.
    pub gamma: f64,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Standardized support vectors, one per row.
    pub support: Matrix,
    /// `β_i = α_i − α_i*` for each support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
}

/// Solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrInfo {
    pub iterations: usize,
    /// Dual objective `½αᵀQα + pᵀα` at return.
    pub objective: f64,
    /// Maximal KKT violation at return.
    pub kkt_gap: f64,
    pub converged: bool,
    /// Targets had zero variance; the model is the constant mean.
    pub constant_targets: bool,
}

fn kernel_eval(kernel: Kernel, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp(),
    }
}

impl SvrModel {
    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn num_support(&self) -> usize {
        self.coef.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::to_bytes(|w| {
            w.header(SVR_MAGIC)?;
            w.f64(self.c)?;
            w.f64(self.epsilon)?;
            w.u32(match self.kernel {
                Kernel::Linear => 0,
                Kernel::Rbf => 1,
            })?;
            w.f64(self.gamma)?;
            w.usize(self.dim())?;
            w.f64s(&self.input_mean)?;
            w.f64s(&self.input_scale)?;
            w.usize(self.num_support())?;
            w.f64s(self.support.as_slice())?;
            w.f64s(&self.coef)?;
            w.f64(self.bias)
        })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<SvrModel> {
        let mut r = BinReader::new(Cursor::new(bytes));
        r.header(SVR_MAGIC).map_err(|m| Error::format(path, m))?;
        let fmt = |e: std::io::Error| Error::format(path, e.to_string());
        let c = r.f64().map_err(fmt)?;
        let epsilon = r.f64().map_err(fmt)?;
        let kernel = match r.u32().map_err(fmt)? {
            0 => Kernel::Linear,
            1 => Kernel::Rbf,
            k => return Err(Error::format(path, format!("unknown kernel code {k}"))),
        };
        let gamma = r.f64().map_err(fmt)?;
        let d = r.usize().map_err(fmt)?;
        let input_mean = r.f64s(d).map_err(fmt)?;
        let input_scale = r.f64s(d).map_err(fmt)?;
        let n = r.usize().map_err(fmt)?;
        let support = Matrix::from_vec(n, d, r.f64s(n * d).map_err(fmt)?)?;
        let coef = r.f64s(n).map_err(fmt)?;
        let bias = r.f64().map_err(fmt)?;
        r.expect_eof().map_err(fmt)?;
        Ok(SvrModel { c, epsilon, kernel, gamma, input_mean, input_scale, support, coef, bias })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<SvrModel> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

/// The `ε`-SVR dual in libsvm form, kept separate from the model so tests
/// can evaluate objectives directly.
pub(crate) struct Dual {
    pub gram: Matrix,
    pub p: Vec<f64>,
    pub labels: Vec<f64>,
    pub c: f64,
}

impl Dual {
    pub(crate) fn new(gram: Matrix, y: &[f64], epsilon: f64, c: f64) -> Dual {
        let n = y.len();
        let mut p = Vec::with_capacity(2 * n);
        p.extend(y.iter().map(|v| epsilon - v));
        p.extend(y.iter().map(|v| epsilon + v));
        let labels = (0..2 * n).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        Dual { gram, p, labels, c }
    }

    fn n(&self) -> usize {
        self.gram.rows()
    }

    /// `Q_ij = y_i y_j K(i mod N, j mod N)`.
    pub(crate) fn q(&self, i: usize, j: usize) -> f64 {
        let n = self.n();
        self.labels[i] * self.labels[j] * self.gram[(i % n, j % n)]
    }

    #[cfg(test)]
    pub(crate) fn objective(&self, alpha: &[f64]) -> f64 {
        let l = alpha.len();
        let mut obj = 0.0;
        for i in 0..l {
            if alpha[i] == 0.0 {
                continue;
            }
            let qa: f64 = (0..l).map(|j| self.q(i, j) * alpha[j]).sum();
            obj += alpha[i] * (0.5 * qa + self.p[i]);
        }
        obj
    }
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    info: SvrInfo,
}

fn solve(dual: &Dual, tolerance: f64, max_iter: usize) -> Solution {
    let l = 2 * dual.n();
    let c = dual.c;
    let y = &dual.labels;
    let diag: Vec<f64> = (0..l).map(|i| dual.q(i, i)).collect();
    let mut alpha = vec![0.0; l];
    let mut grad = dual.p.clone();
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    let mut iterations = 0;
    let mut gap;
    loop {
        // second-order working set selection
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..l {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    i_sel = Some(t);
                }
            } else if !lower(alpha[t]) && grad[t] >= gmax {
                gmax = grad[t];
                i_sel = Some(t);
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..l {
                let (grad_diff, quad) = if y[t] > 0.0 {
                    if lower(alpha[t]) {
                        continue;
                    }
                    gmax2 = gmax2.max(grad[t]);
                    (gmax + grad[t], diag[i] + diag[t] - 2.0 * y[i] * dual.q(i, t))
                } else {
                    if upper(alpha[t]) {
                        continue;
                    }
                    gmax2 = gmax2.max(-grad[t]);
                    (gmax - grad[t], diag[i] + diag[t] + 2.0 * y[i] * dual.q(i, t))
                };
                if grad_diff > 0.0 {
                    let obj = -grad_diff * grad_diff / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        gap = gmax + gmax2;
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) if gap >= tolerance => (i, j),
            _ => break,
        };
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = dual.q(i, j);
        if y[i] != y[j] {
            let quad = (diag[i] + diag[j] + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..l {
            grad[t] += dual.q(i, t) * di + dual.q(j, t) * dj;
        }
    }

    // bias from free variables, else the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    let objective = (0..l).map(|t| alpha[t] * (grad[t] + dual.p[t])).sum::<f64>() / 2.0;
    let converged = gap < tolerance;
    Solution {
        alpha,
        rho,
        info: SvrInfo { iterations, objective, kkt_gap: gap.max(0.0), converged, constant_targets: false },
    }
}

fn resolve_gamma(p: &SvrParams, x: &Matrix) -> f64 {
    match p.gamma {
        Gamma::Value(g) => g,
        Gamma::Scale => {
            let n = x.as_slice().len() as f64;
            let mean = x.as_slice().iter().sum::<f64>() / n;
            let var = x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                1.0 / (x.cols() as f64 * var)
            } else {
                1.0
            }
        }
    }
}

pub(crate) fn gram_matrix(kernel: Kernel, gamma: f64, x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(kernel, gamma, x.row(i), x.row(j));
            k.row_mut(i)[j] = v;
            k.row_mut(j)[i] = v;
        }
    }
    k
}

/// Trains an `ε`-SVR and returns the model with solver diagnostics.
pub fn svr_train_with_info(x: &Matrix, y: &[f64], p: &SvrParams) -> Result<(SvrModel, SvrInfo)> {
    p.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("SVR needs at least 2 examples, got {n}")));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} inputs", y.len())));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite SVR training data".into()));
    }
    let d = x.cols();
    let (input_mean, input_scale) = if p.standardize {
        let scale = x.column_variances().iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        (x.column_means(), scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let mut xs = x.clone();
    for r in 0..n {
        for (c, v) in xs.row_mut(r).iter_mut().enumerate() {
            *v = (*v - input_mean[c]) / input_scale[c];
        }
    }
    let gamma = resolve_gamma(p, &xs);
    let mut model = SvrModel {
        c: p.c,
        epsilon: p.epsilon,
        kernel: p.kernel,
        gamma,
        input_mean,
        input_scale,
        support: Matrix::zeros(0, d),
        coef: Vec::new(),
        bias: 0.0,
    };

    let y_mean = y.iter().sum::<f64>() / n as f64;
    if y.iter().all(|v| *v == y[0]) {
        log::warn!("SVR targets are constant; returning the constant model {y_mean}");
        model.bias = y_mean;
        let info = SvrInfo { iterations: 0, objective: 0.0, kkt_gap: 0.0, converged: true, constant_targets: true };
        return Ok((model, info));
    }

    let dual = Dual::new(gram_matrix(p.kernel, gamma, &xs), y, p.epsilon, p.c);
    let sol = solve(&dual, p.tolerance, p.max_passes.saturating_mul(2 * n));
    if !sol.info.converged {
        log::warn!("SVR stopped after {} iterations with KKT gap {:.3e}", sol.info.iterations, sol.info.kkt_gap);
    }
    let mut support = Matrix::zeros(0, d);
    for i in 0..n {
        let beta = sol.alpha[i] - sol.alpha[i + n];
        if beta != 0.0 {
            support.push_row(xs.row(i))?;
            model.coef.push(beta);
        }
    }
    model.support = support;
    model.bias = -sol.rho;
    Ok((model, sol.info))
}

pub fn svr_train(x: &Matrix, y: &[f64], p: &SvrParams) -> Result<SvrModel> {
    svr_train_with_info(x, y, p).map(|(m, _)| m)
}

/// `Σ β_i K(x_i, x) + b` on the standardized input.
pub fn svr_predict(m: &SvrModel, x: &[f64]) -> Result<f64> {
    if x.len() != m.dim() {
        return Err(Error::Dimension(format!("SVR expects {}-dim input, got {}", m.dim(), x.len())));
    }
    let xs = m.standardize(x);
    let s: f64 = m.support.iter_rows().zip(&m.coef).map(|(sv, b)| b * kernel_eval(m.kernel, m.gamma, sv, &xs)).sum();
    Ok(s + m.bias)
}

pub fn svr_predict_all(m: &SvrModel, x: &Matrix) -> Result<Vec<f64>> {
    x.iter_rows().map(|r| svr_predict(m, r)).collect()
}
