//! Small tanh perceptrons with hand-written backpropagation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Weights drawn from `N(0, 1/inputs)`, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (inputs.max(1) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs.max(1)).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        if self.inputs == 0 {
            out.copy_from_slice(&self.bias);
        }
    }

    /// Accumulates parameter gradients into `grad` and writes `∂L/∂x` to `g_in`.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut Dense, g_in: &mut [f64]) {
        g_in.iter_mut().for_each(|g| *g = 0.0);
        for (o, &g) in g_out.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                g_in[i] += row[i] * g;
            }
        }
    }
}

/// Dense layers with tanh between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`; the last layer starts at zero when
    /// `zero_last` is set.
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng, zero_last: bool) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if zero_last && i == n - 1 {
                    Dense::zeros(sizes[i], sizes[i + 1])
                } else {
                    Dense::random(sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn cache(&self) -> MlpCache {
        let mut acts = vec![vec![0.0; self.inputs()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.outputs]));
        let scratch = acts.clone();
        MlpCache { acts, scratch }
    }

    pub fn forward<'c>(&self, x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        cache.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.forward(&done[i], out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        &cache.acts[last + 1]
    }

    /// Backpropagates `g_out` through the pass recorded in `cache`,
    /// accumulating into `grad` and adding `∂L/∂x` into `g_in`.
    pub fn backward(&self, cache: &mut MlpCache, g_out: &[f64], grad: &mut Mlp, g_in: &mut [f64]) {
        let last = self.layers.len() - 1;
        cache.scratch[last + 1].copy_from_slice(g_out);
        for i in (0..=last).rev() {
            let (lo, hi) = cache.scratch.split_at_mut(i + 1);
            let g = &mut hi[0];
            if i < last {
                // through tanh: d tanh = 1 - tanh^2
                for (gv, a) in g.iter_mut().zip(&cache.acts[i + 1]) {
                    *gv *= 1.0 - a * a;
                }
            }
            self.layers[i].backward(&cache.acts[i], g, &mut grad.layers[i], &mut lo[i]);
        }
        for (acc, v) in g_in.iter_mut().zip(&cache.scratch[0]) {
            *acc += v;
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for l in &self.layers {
            f(&l.weights);
            f(&l.bias);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(&mut l.weights);
            f(&mut l.bias);
        }
    }
}
