//! Affine coupling layer.
//!
//! The dimensions are split into a conditioning half `A` and a transformed
//! half `B`. In the latent-to-data direction
//! `y_A = x_A`, `y_B = x_B * exp(s(x_A)) + t(x_A)` with
//! `s = cap * tanh(S(x_A))`, so `log|det| = Σ s`.

use rand_chacha::ChaCha8Rng;

use super::mlp::{Mlp, MlpCache};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` marks a conditioning dimension.
    pub mask: Vec<bool>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    /// Bound on `|s|` per transformed dimension.
    pub scale_cap: Vec<f64>,
    cond: Vec<usize>,
    free: Vec<usize>,
}

pub const INITIAL_SCALE_CAP: f64 = 2.0;

/// Per-sample activations of one inverse pass.
#[derive(Debug, Clone)]
pub(crate) struct CouplingCache {
    pub(crate) input: Vec<f64>,
    pub(crate) output: Vec<f64>,
    cond_in: Vec<f64>,
    tanh: Vec<f64>,
    s: Vec<f64>,
    scale_cache: MlpCache,
    shift_cache: MlpCache,
    g_s: Vec<f64>,
    g_t: Vec<f64>,
    g_cond: Vec<f64>,
}

fn split(mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let cond = (0..mask.len()).filter(|&i| mask[i]).collect();
    let free = (0..mask.len()).filter(|&i| !mask[i]).collect();
    (cond, free)
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let (cond, free) = split(&mask);
        let sizes = [cond.len(), hidden, hidden, free.len()];
        let scale_net = Mlp::new(&sizes, rng, true);
        let shift_net = Mlp::new(&sizes, rng, true);
        CouplingLayer { scale_cap: vec![INITIAL_SCALE_CAP; free.len()], mask, scale_net, shift_net, cond, free }
    }

    pub fn from_parts(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp, scale_cap: Vec<f64>) -> Self {
        let (cond, free) = split(&mask);
        CouplingLayer { mask, scale_net, shift_net, scale_cap, cond, free }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn cond_dims(&self) -> &[usize] {
        &self.cond
    }

    pub fn free_dims(&self) -> &[usize] {
        &self.free
    }

    pub(crate) fn zeros_like(&self) -> CouplingLayer {
        CouplingLayer {
            mask: self.mask.clone(),
            scale_net: self.scale_net.zeros_like(),
            shift_net: self.shift_net.zeros_like(),
            scale_cap: vec![0.0; self.scale_cap.len()],
            cond: self.cond.clone(),
            free: self.free.clone(),
        }
    }

    pub(crate) fn cache(&self) -> CouplingCache {
        let (a, b) = (self.cond.len(), self.free.len());
        CouplingCache {
            input: vec![0.0; self.dim()],
            output: vec![0.0; self.dim()],
            cond_in: vec![0.0; a],
            tanh: vec![0.0; b],
            s: vec![0.0; b],
            scale_cache: self.scale_net.cache(),
            shift_cache: self.shift_net.cache(),
            g_s: vec![0.0; b],
            g_t: vec![0.0; b],
            g_cond: vec![0.0; a],
        }
    }

    /// Runs both nets on the conditioning half of `x`; fills `tanh`, `s`
    /// and returns the shift.
    fn scale_shift<'c>(&self, x: &[f64], c: &'c mut CouplingCache) -> &'c [f64] {
        for (dst, &i) in c.cond_in.iter_mut().zip(&self.cond) {
            *dst = x[i];
        }
        let raw = self.scale_net.forward(&c.cond_in, &mut c.scale_cache);
        for j in 0..self.free.len() {
            c.tanh[j] = raw[j].tanh();
            c.s[j] = self.scale_cap[j] * c.tanh[j];
        }
        self.shift_net.forward(&c.cond_in, &mut c.shift_cache)
    }

    /// Latent-to-data direction; returns `Σ s`.
    pub(crate) fn forward_into(&self, x: &[f64], y: &mut [f64], c: &mut CouplingCache) -> f64 {
        y.copy_from_slice(x);
        let t = self.scale_shift(x, c).to_vec();
        let mut log_det = 0.0;
        for (j, &i) in self.free.iter().enumerate() {
            y[i] = x[i] * c.s[j].exp() + t[j];
            log_det += c.s[j];
        }
        log_det
    }

    /// Data-to-latent direction on `c.input`, writing `c.output`; returns
    /// the inverse log-determinant `-Σ s`.
    pub(crate) fn inverse_cached(&self, c: &mut CouplingCache) -> f64 {
        let input = std::mem::take(&mut c.input);
        let t = self.scale_shift(&input, c);
        let t: Vec<f64> = t.to_vec();
        c.output.copy_from_slice(&input);
        let mut log_det = 0.0;
        for (j, &i) in self.free.iter().enumerate() {
            c.output[i] = (input[i] - t[j]) * (-c.s[j]).exp();
            log_det -= c.s[j];
        }
        c.input = input;
        log_det
    }

    /// Backward through `inverse_cached` for the loss
    /// `L = ℓ(output) - (inverse log-det)`. `g` holds `∂L/∂output` on entry
    /// and `∂L/∂input` on exit.
    pub(crate) fn inverse_backward(&self, c: &mut CouplingCache, g: &mut [f64], grad: &mut CouplingLayer) {
        for (j, &i) in self.free.iter().enumerate() {
            let e = (-c.s[j]).exp();
            let gx = g[i];
            // the -(-Σ s) term contributes +1 to ∂L/∂s
            c.g_s[j] = 1.0 - gx * c.output[i];
            c.g_t[j] = -gx * e;
            g[i] = gx * e;
        }
        for j in 0..self.free.len() {
            grad.scale_cap[j] += c.g_s[j] * c.tanh[j];
            // ∂s/∂raw = cap (1 - tanh^2)
            c.g_s[j] *= self.scale_cap[j] * (1.0 - c.tanh[j] * c.tanh[j]);
        }
        c.g_cond.iter_mut().for_each(|v| *v = 0.0);
        self.scale_net.backward(&mut c.scale_cache, &c.g_s, &mut grad.scale_net, &mut c.g_cond);
        self.shift_net.backward(&mut c.shift_cache, &c.g_t, &mut grad.shift_net, &mut c.g_cond);
        for (v, &i) in c.g_cond.iter().zip(&self.cond) {
            g[i] += v;
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        self.scale_net.visit(f);
        self.shift_net.visit(f);
        f(&self.scale_cap);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        self.scale_net.visit_mut(f);
        self.shift_net.visit_mut(f);
        f(&mut self.scale_cap);
    }
}
