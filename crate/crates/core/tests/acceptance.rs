//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use proscore::corpus::{read_features, synth_corpus, write_features, Split, SynthConfig};
use proscore::dnf::{dnf_nll_and_grad, DnfModel};
use proscore::flow::{
    flow_logprob, flow_nll_and_grad, flow_train, flow_transform, AdamConfig, Direction, FlowConfig, FlowModel,
};
use proscore::gmm::{gmm_train, GmmModel};
use proscore::gop::simulate_competition;
use proscore::ivector::{ivector_infer, tmatrix_train, ubm_stats, BaumWelchStats, IVectorModel};
use proscore::pipeline::{run_pipeline, PipelineConfig, PipelineOutput, RunOptions, REPORT_FILE};
use proscore::regress::{svr_train_with_info, Gamma, Kernel, SvrModel, SvrParams};
use proscore::Matrix;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// 1. Two-Gaussian phone competition.

fn competition_oracle(a: f64, delta: f64) -> f64 {
    // variance 1/2: log N(x; m, 1/2) = -(x - m)^2 + const
    let target = -(delta * delta);
    let rival = -((delta + a) * (delta + a));
    let hi = target.max(rival);
    let (et, er) = ((target - hi).exp(), (rival - hi).exp());
    et / (et + er)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a = 3.0 * (1.0 - rng.random::<f64>());
        let delta = rng.random_range(-3.0..3.0);
        let p = simulate_competition(a, delta).map_err(|e| e.to_string())?.posterior;
        worst = worst.max((p - competition_oracle(a, delta)).abs());
        let up = simulate_competition(a, delta + 1e-3).map_err(|e| e.to_string())?.posterior;
        ensure(up > p || (p == 1.0 && up == 1.0), || format!("not increasing at a={a}, delta={delta}"))?;
    }
    ensure(worst < 1e-10, || format!("oracle mismatch {worst:e}"))?;
    let mid = simulate_competition(1.0, 0.0).map_err(|e| e.to_string())?.posterior;
    ensure((mid - 0.731059).abs() < 1e-6, || format!("posterior(1, 0) = {mid}"))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("max |err| {worst:.1e}, posterior(1,0) = {mid:.6}"))
}

// 2. Change of variables on a trained two-dimensional flow.

fn banana(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(0, 2);
    for _ in 0..n {
        let x = normal(&mut rng);
        let y = 0.6 * (x * x - 1.0) + 0.5 * normal(&mut rng);
        m.push_row(&[x, y]).unwrap();
    }
    m
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let data = banana(400, 2);
    let init = FlowModel::new(2, &FlowConfig { layers: 6, hidden: 32 }, 3).map_err(|e| e.to_string())?;
    // 400 frames in batches of 40 for 20 epochs: 200 Adam steps
    let cfg = AdamConfig { learning_rate: 5e-3, batch_size: 40, epochs: 20, seed: 4, ..AdamConfig::default() };
    let (m, trace) = flow_train(&init, &data, &cfg).map_err(|e| e.to_string())?;
    let trained = start.elapsed();
    ensure(trace.last() < trace.first(), || format!("training did not reduce the loss: {trace:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = [rng.random_range(-3.0..3.0), rng.random_range(-2.5..4.0)];
        for dir in [Direction::Inverse, Direction::Forward] {
            let (_, ld) = flow_transform(&m, dir, &Matrix::from_rows(&[p]).unwrap()).map_err(|e| e.to_string())?;
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut up = p;
                let mut down = p;
                up[j] += h;
                down[j] -= h;
                let (zu, _) = flow_transform(&m, dir, &Matrix::from_rows(&[up]).unwrap()).map_err(|e| e.to_string())?;
                let (zd, _) =
                    flow_transform(&m, dir, &Matrix::from_rows(&[down]).unwrap()).map_err(|e| e.to_string())?;
                for i in 0..2 {
                    jac[i][j] = (zu[(0, i)] - zd[(0, i)]) / (2.0 * h);
                }
            }
            let det = (jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]).abs();
            worst = worst.max((ld[0].exp() - det).abs() / det);
        }
    }
    ensure(worst < 1e-5, || format!("log-det relative error {worst:e}"))?;

    // midpoint rule over [-10, 10]^2
    let (lo, hi, n) = (-10.0, 10.0, 600usize);
    let step = (hi - lo) / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * step;
        let mut row = Matrix::zeros(0, 2);
        for j in 0..n {
            row.push_row(&[x, lo + (j as f64 + 0.5) * step]).unwrap();
        }
        mass += flow_logprob(&m, &row).map_err(|e| e.to_string())?.iter().map(|l| l.exp()).sum::<f64>();
    }
    mass *= step * step;
    ensure((0.99..=1.01).contains(&mass), || format!("density integrates to {mass}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "log-det rel err {worst:.1e}, mass {mass:.5}, training {:.1} s of {:.1} s",
        trained.as_secs_f64(),
        start.elapsed().as_secs_f64()
    ))
}

// 3. Gradients of every trainable model against central differences.

fn relative_error(analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64, p0: &[f64]) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut p = p0.to_vec();
    for i in 0..p0.len() {
        p[i] = p0[i] + h;
        let up = loss(&p);
        p[i] = p0[i] - h;
        let down = loss(&p);
        p[i] = p0[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

/// A small flow with every parameter perturbed away from the identity start.
fn tiny_flow(seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = FlowModel::new(4, &FlowConfig { layers: 3, hidden: 8 }, seed)
        .unwrap()
        .with_input_normalization(vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.8, 1.0, 1.2])
        .unwrap();
    let p: Vec<f64> = (0..m.num_params()).map(|_| 0.3 * normal(&mut rng)).collect();
    m.set_params(&p);
    m
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_batch(&mut rng, 8, 4);

    let flow = tiny_flow(7);
    let (_, grad) = flow_nll_and_grad(&flow, &x);
    let flow_err = relative_error(
        &grad,
        |p| {
            let mut m = flow.clone();
            m.set_params(p);
            flow_nll_and_grad(&m, &x).0
        },
        &flow.params(),
    );

    let classes = 3;
    let means = random_batch(&mut rng, classes, 4);
    let dnf = DnfModel::new(tiny_flow(8), means).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = (0..x.rows()).map(|i| i % classes).collect();
    let (_, grad) = dnf_nll_and_grad(&dnf, &x, &labels).map_err(|e| e.to_string())?;
    let nb = dnf.backbone.num_params();
    let unpack = |p: &[f64]| {
        let mut m = dnf.clone();
        m.backbone.set_params(&p[..nb]);
        m.class_means = Matrix::from_vec(classes, 4, p[nb..].to_vec()).unwrap();
        m
    };
    let mut p0 = dnf.backbone.params();
    p0.extend_from_slice(dnf.class_means.as_slice());
    ensure(grad.len() == p0.len(), || format!("dnf gradient has {} entries for {} parameters", grad.len(), p0.len()))?;
    let dnf_err = relative_error(&grad, |p| dnf_nll_and_grad(&unpack(p), &x, &labels).unwrap().0, &p0);

    ensure(flow_err < 1e-4, || format!("flow max relative error {flow_err:e}"))?;
    ensure(dnf_err < 1e-4, || format!("dnf max relative error {dnf_err:e}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("flow {flow_err:.1e}, dnf incl. class means {dnf_err:.1e}"))
}

// 4. EM monotonicity.

fn monotone(trace: &[f64]) -> std::result::Result<(), String> {
    for (i, w) in trace.windows(2).enumerate() {
        if w[1] - w[0] < -1e-10 * w[0].abs() {
            return Err(format!("step {} decreased {} -> {}", i + 1, w[0], w[1]));
        }
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, d) = (64, 4);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 4.0 * normal(&mut rng)).collect()).collect();
    let mut frames = Matrix::zeros(0, d);
    for i in 0..6400 {
        let c = &centers[i % k];
        let row: Vec<f64> = c.iter().map(|m| m + 0.5 * normal(&mut rng)).collect();
        frames.push_row(&row).unwrap();
    }
    let (_, trace) = gmm_train(&frames, k, 50, 10).map_err(|e| e.to_string())?;
    ensure(trace.loglik.len() == 50, || format!("{} gmm iterations recorded", trace.loglik.len()))?;
    monotone(&trace.loglik).map_err(|e| format!("gmm: {e}"))?;

    let corpus =
        synth_corpus(&SynthConfig { num_speakers: 20, utterances_per_speaker: 4, seed: 11, ..SynthConfig::default() })
            .map_err(|e| e.to_string())?
            .corpus;
    let all = Matrix::vstack(corpus.utterances.iter().map(|u| &u.features.frames)).unwrap();
    let (ubm, _) = gmm_train(&all, 16, 20, 12).map_err(|e| e.to_string())?;
    let stats: Vec<BaumWelchStats> = corpus
        .utterances
        .iter()
        .map(|u| ubm_stats(&ubm, &u.features))
        .collect::<proscore::Result<_>>()
        .map_err(|e| e.to_string())?;
    let (_, ttrace) = tmatrix_train(&ubm, &stats, 8, 10, 13).map_err(|e| e.to_string())?;
    ensure(ttrace.objective.len() == 10, || format!("{} t-matrix iterations recorded", ttrace.objective.len()))?;
    monotone(&ttrace.objective).map_err(|e| format!("t-matrix: {e}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "gmm {:.4} -> {:.4} over 50 iterations, t-matrix {:.4} -> {:.4} over 10",
        trace.loglik[0], trace.loglik[49], ttrace.objective[0], ttrace.objective[9]
    ))
}

// 5. i-vector posterior and SVR dual against independent oracles.

/// Posterior of `z ~ N(0, I)` given the stacked frames `x = A z + e`.
fn conditioning_oracle(m: &IVectorModel, frames: &[(usize, Vec<f64>)]) -> (DVector<f64>, DMatrix<f64>) {
    let (d, r) = (m.ubm.dim(), m.rank());
    let n = frames.len() * d;
    let mut a = DMatrix::zeros(n, r);
    let mut x = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for (f, (k, o)) in frames.iter().enumerate() {
        for (i, v) in o.iter().enumerate() {
            let row = f * d + i;
            x[row] = v - m.ubm.means[(*k, i)];
            cov[(row, row)] = m.ubm.variances[(*k, i)];
            for j in 0..r {
                a[(row, j)] = m.loadings[*k][(i, j)];
            }
        }
    }
    cov += &a * a.transpose();
    let inv = cov.try_inverse().expect("joint covariance is positive definite");
    let mean = a.transpose() * &inv * &x;
    let post = DMatrix::identity(r, r) - a.transpose() * &inv * &a;
    (mean, post)
}

fn ivector_oracle_error(rng: &mut ChaCha8Rng, k: usize, d: usize, r: usize) -> f64 {
    let ubm = GmmModel::new(
        vec![1.0 / k as f64; k],
        Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap(),
    )
    .unwrap();
    let loadings = (0..k).map(|_| DMatrix::from_fn(d, r, |_, _| rng.random_range(-1.5..1.5))).collect();
    let m = IVectorModel::new(ubm, loadings).unwrap();
    let frames: Vec<(usize, Vec<f64>)> =
        (0..6).map(|t| (t % k, (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
    // hard alignments, so the statistics are exact
    let mut zeroth = vec![0.0; k];
    let mut first = Matrix::zeros(k, d);
    for (c, o) in &frames {
        zeroth[*c] += 1.0;
        for (i, v) in o.iter().enumerate() {
            first[(*c, i)] += v - m.ubm.means[(*c, i)];
        }
    }
    let st = BaumWelchStats { utterance_id: "u".into(), zeroth, first_centered: first };
    let post = ivector_infer(&m, &st).unwrap();
    let (mean, cov) = conditioning_oracle(&m, &frames);
    let mean_err = (0..r).map(|j| (post.mean[j] - mean[j]).abs()).fold(0.0, f64::max);
    mean_err.max((post.covariance().unwrap() - cov).amax())
}

fn kernel_matrix(x: &Matrix, kernel: Kernel, gamma: f64) -> DMatrix<f64> {
    let n = x.rows();
    DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (x.row(i), x.row(j));
        match kernel {
            Kernel::Linear => a.iter().zip(b).map(|(u, v)| u * v).sum(),
            Kernel::Rbf => (-gamma * a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()).exp(),
        }
    })
}

/// Projects onto `{0 <= u <= c, Σ s_i u_i = 0}` by bisection on the multiplier.
fn project(v: &[f64], s: &[f64], c: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> { v.iter().zip(s).map(|(x, si)| (x - mu * si).clamp(0.0, c)).collect() };
    let balance = |u: &[f64]| u.iter().zip(s).map(|(x, si)| x * si).sum::<f64>();
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Accelerated projected gradient on the 2N-variable ε-SVR dual.
fn dual_oracle(kmat: &DMatrix<f64>, y: &[f64], c: f64, eps: f64) -> f64 {
    let n = y.len();
    let s: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
    let p: Vec<f64> = (0..2 * n).map(|i| if i < n { eps - y[i] } else { eps + y[i - n] }).collect();
    let objective = |u: &[f64]| {
        let beta = DVector::from_fn(n, |i, _| u[i] - u[i + n]);
        0.5 * (beta.transpose() * kmat * &beta)[(0, 0)] + u.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
    };
    let grad = |u: &[f64]| -> Vec<f64> {
        let beta = DVector::from_fn(n, |i, _| u[i] - u[i + n]);
        let kb = kmat * beta;
        (0..2 * n).map(|i| if i < n { kb[i] + p[i] } else { -kb[i - n] + p[i] }).collect()
    };
    let lip = 2.0 * kmat.symmetric_eigenvalues().max().max(1e-12);
    let mut u = vec![0.0; 2 * n];
    let mut w = u.clone();
    let mut t = 1.0f64;
    for _ in 0..50_000 {
        let g = grad(&w);
        let next = project(&w.iter().zip(&g).map(|(a, b)| a - b / lip).collect::<Vec<_>>(), &s, c);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        w = next.iter().zip(&u).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect();
        u = next;
        t = t_next;
    }
    objective(&u)
}

/// Dual objective of a trained model, recovered from its support set.
fn model_objective(m: &SvrModel, x: &Matrix, y: &[f64], kmat: &DMatrix<f64>) -> f64 {
    let mut beta = vec![0.0; y.len()];
    for (s, c) in m.support.iter_rows().zip(&m.coef) {
        let i = (0..x.rows()).find(|&i| x.row(i) == s).expect("support vector is a training row");
        beta[i] += c;
    }
    let b = DVector::from_column_slice(&beta);
    0.5 * (b.transpose() * kmat * &b)[(0, 0)] + m.epsilon * beta.iter().map(|v| v.abs()).sum::<f64>()
        - y.iter().zip(&beta).map(|(a, v)| a * v).sum::<f64>()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut iv_worst: f64 = 0.0;
    for k in 1..=2 {
        for d in 1..=2 {
            for r in 1..=2usize.min(k * d) {
                for _ in 0..3 {
                    iv_worst = iv_worst.max(ivector_oracle_error(&mut rng, k, d, r));
                }
            }
        }
    }
    ensure(iv_worst < 1e-9, || format!("i-vector oracle mismatch {iv_worst:e}"))?;

    let mut svr_worst: f64 = 0.0;
    for trial in 0..12 {
        let n = 4 + trial % 7;
        let dim = 1 + trial % 3;
        let x = random_batch(&mut rng, n, dim);
        let y: Vec<f64> = (0..n).map(|i| x.row(i).iter().sum::<f64>().sin() + 0.3 * normal(&mut rng)).collect();
        let kernel = if trial % 2 == 0 { Kernel::Rbf } else { Kernel::Linear };
        let params = SvrParams {
            c: [0.5, 1.0, 4.0][trial % 3],
            epsilon: 0.1,
            kernel,
            gamma: Gamma::Value(0.7),
            tolerance: 1e-6,
            standardize: false,
            ..SvrParams::default()
        };
        let (m, info) = svr_train_with_info(&x, &y, &params).map_err(|e| e.to_string())?;
        let kmat = kernel_matrix(&x, kernel, 0.7);
        let oracle = dual_oracle(&kmat, &y, params.c, params.epsilon);
        let from_model = model_objective(&m, &x, &y, &kmat);
        let scale = oracle.abs().max(1e-12);
        svr_worst = svr_worst.max((info.objective - oracle).abs() / scale).max((from_model - oracle).abs() / scale);
    }
    ensure(svr_worst < 1e-3, || format!("svr dual objective relative error {svr_worst:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("i-vector max err {iv_worst:.1e}, svr objective rel err {svr_worst:.1e}"))
}

// 6-8. The shipped synthetic preset.

fn preset_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

struct PresetRun {
    _dir: tempfile::TempDir,
    model_dir: PathBuf,
    report_dir: PathBuf,
    manifest: PathBuf,
    output: PipelineOutput,
    elapsed: Duration,
}

fn run_preset() -> std::result::Result<PresetRun, String> {
    let mut cfg = PipelineConfig::load(&preset_path()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cfg.paths.manifest = Some(dir.path().join("corpus/manifest.toml"));
    cfg.paths.model_dir = dir.path().join("models");
    cfg.paths.report_dir = dir.path().join("report");
    let start = Instant::now();
    let output = run_pipeline(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    Ok(PresetRun {
        model_dir: cfg.paths.model_dir.clone(),
        report_dir: cfg.paths.report_dir.clone(),
        manifest: cfg.paths.manifest.clone().unwrap(),
        _dir: dir,
        output,
        elapsed: start.elapsed(),
    })
}

fn criterion_6(run: &PresetRun) -> Outcome {
    let cfg = PipelineConfig::load(&preset_path()).map_err(|e| e.to_string())?;
    let synth = cfg.synth.clone().ok_or("preset has no [synth] section")?;
    ensure(cfg.seed == 7 && synth.feature_dim == 16 && synth.num_phones == 12 && synth.num_speakers == 60, || {
        "preset is not seed 7, D=16, P=12, 60 speakers".into()
    })?;
    let report = &run.output.report;
    let pcc = |s: &str| report.get(s).map(|r| r.pcc).ok_or_else(|| format!("report lacks {s}"));
    let mut notes = Vec::new();

    for s in ["gmm_loglik", "nf_loglik"] {
        let v = pcc(s)?;
        ensure(v.abs() < 0.2, || format!("(a) |pcc({s})| = {:.4}", v.abs()))?;
    }
    let (iv, nf, dnf) = (pcc("ivector_svr")?, pcc("nf_svr")?, pcc("dnf_svr")?);
    for (s, v) in [("ivector_svr", iv), ("nf_svr", nf), ("dnf_svr", dnf)] {
        ensure(v >= 0.3, || format!("(b) {s} = {v:.4}"))?;
    }
    ensure(dnf >= nf - 0.02 && nf >= iv - 0.02, || format!("(c) dnf {dnf:.4}, nf {nf:.4}, ivector {iv:.4}"))?;
    if dnf >= nf && nf >= iv {
        notes.push("strict ordering holds".to_string());
    }
    let gop = pcc("gop")?;
    for sys in ["ivector", "nf", "dnf"] {
        for mode in ["score_fusion", "feature_fusion"] {
            let name = format!("{sys}_{mode}");
            let v = pcc(&name)?;
            ensure(v >= gop, || format!("(d) {name} {v:.4} < gop {gop:.4}"))?;
        }
        let name = format!("{sys}_score_fusion");
        let lambda = *run.output.lambdas.get(&name).ok_or_else(|| format!("no lambda for {name}"))?;
        ensure(lambda > 0.0 && lambda < 1.0, || format!("(e) {name} lambda {lambda}"))?;
    }
    within(run.elapsed, 600.0)?;
    Ok(format!(
        "gop {gop:.3}, ivector/nf/dnf svr {iv:.3}/{nf:.3}/{dnf:.3}, {}, {:.0} s",
        notes.join(", "),
        run.elapsed.as_secs_f64()
    ))
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> =
        std::fs::read_dir(dir).map(|it| it.filter_map(|e| e.ok().map(|e| e.path())).collect()).unwrap_or_default();
    files.sort();
    files
}

fn criterion_7(a: &PresetRun, b: &PresetRun) -> Outcome {
    let report_a = std::fs::read(a.report_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    let report_b = std::fs::read(b.report_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    ensure(report_a == report_b, || "reports differ".into())?;
    let (fa, fb) = (sorted_files(&a.model_dir), sorted_files(&b.model_dir));
    ensure(fa.iter().map(|p| p.file_name()).eq(fb.iter().map(|p| p.file_name())), || {
        "model directories hold different files".into()
    })?;
    ensure(!fa.is_empty(), || "no model files written".into())?;
    for (x, y) in fa.iter().zip(&fb) {
        let same = std::fs::read(x).map_err(|e| e.to_string())? == std::fs::read(y).map_err(|e| e.to_string())?;
        ensure(same, || format!("{} differs between runs", x.file_name().unwrap().to_string_lossy()))?;
    }
    Ok(format!("report and {} model files byte-identical", fa.len()))
}

fn criterion_8(run: &PresetRun) -> Outcome {
    fn check(name: &str, original: &[u8], again: Vec<u8>) -> std::result::Result<(), String> {
        ensure(original == again.as_slice(), || format!("{name} round trip changed the bytes"))
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = proscore::corpus::load_corpus(&run.manifest).map_err(|e| e.to_string())?;
    let utt = corpus.split(Split::Eval)[0];
    let first = dir.path().join("a.prf");
    let second = dir.path().join("b.prf");
    write_features(&first, &utt.features).map_err(|e| e.to_string())?;
    let back = read_features(&first, utt.id()).map_err(|e| e.to_string())?;
    write_features(&second, &back).map_err(|e| e.to_string())?;
    check(
        "PRF1",
        &std::fs::read(&first).map_err(|e| e.to_string())?,
        std::fs::read(&second).map_err(|e| e.to_string())?,
    )?;

    let read = |f: &str| std::fs::read(run.model_dir.join(f)).map_err(|e| format!("{f}: {e}"));
    let p = Path::new("mem");
    let gmm = read("ubm.pgmm")?;
    check("PGMM", &gmm, GmmModel::from_bytes(&gmm, p).map_err(|e| e.to_string())?.to_bytes())?;
    let ivm = read("ivector.pivm")?;
    check("PIVM", &ivm, IVectorModel::from_bytes(&ivm, p).map_err(|e| e.to_string())?.to_bytes())?;
    let nf = read("flow.pnf1")?;
    check("PNF1", &nf, FlowModel::from_bytes(&nf, p).map_err(|e| e.to_string())?.to_bytes())?;
    let dnf = read("dnf.pdnf")?;
    check("PDNF", &dnf, DnfModel::from_bytes(&dnf, p).map_err(|e| e.to_string())?.to_bytes())?;
    let svr = read("dnf_svr.psvr")?;
    check("PSVR", &svr, SvrModel::from_bytes(&svr, p).map_err(|e| e.to_string())?.to_bytes())?;
    Ok("PRF1 PGMM PIVM PNF1 PDNF PSVR identical after write-read-write".into())
}

fn report(n: usize, outcome: std::thread::Result<Outcome>) -> bool {
    let outcome = outcome.unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .map(|s| format!("panicked: {s}"))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(msg) => {
            println!("criterion {n}: PASS  {msg}");
            true
        }
        Err(msg) => {
            println!("criterion {n}: FAIL  {msg}");
            false
        }
    }
}

/// Criterion numbers given on the command line; all when none are given.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=8).collect()
    } else {
        picked
    }
}

fn main() {
    let want = selected();
    let mut ok = true;
    let simple: [(usize, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (n, f) in simple {
        if want.contains(&n) {
            ok &= report(n, catch_unwind(f));
        }
    }
    if !want.iter().any(|n| (6..=8).contains(n)) {
        if !ok {
            std::process::exit(1);
        }
        return;
    }

    let first = catch_unwind(run_preset);
    let second = catch_unwind(run_preset);
    match (first, second) {
        (Ok(Ok(a)), Ok(Ok(b))) => {
            if want.contains(&6) {
                ok &= report(6, catch_unwind(AssertUnwindSafe(|| criterion_6(&a))));
            }
            if want.contains(&7) {
                ok &= report(7, catch_unwind(AssertUnwindSafe(|| criterion_7(&a, &b))));
            }
            if want.contains(&8) {
                ok &= report(8, catch_unwind(AssertUnwindSafe(|| criterion_8(&a))));
            }
        }
        (a, b) => {
            let why = [a, b]
                .into_iter()
                .find_map(|r| match r {
                    Ok(Err(e)) => Some(e),
                    Err(_) => Some("pipeline panicked".to_string()),
                    Ok(Ok(_)) => None,
                })
                .unwrap_or_default();
            for n in want.iter().filter(|n| (6..=8).contains(*n)) {
                ok &= report(*n, Ok(Err(format!("pipeline run failed: {why}"))));
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
