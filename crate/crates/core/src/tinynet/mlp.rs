use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer layout of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub depth: usize,
    pub width: usize,
}

impl MlpShape {
    /// Depth 8, width 256.
    pub const FULL: Self = Self {
        depth: 8,
        width: 256,
    };
    /// Depth 4, width 64; used for desk-scale scenes.
    pub const DESK: Self = Self { depth: 4, width: 64 };
}

/// Fully connected ReLU network with an identity output layer.
///
/// Parameters are kept in one flat buffer, layer by layer, each layer being a
/// row-major `out × in` weight matrix followed by its bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    /// Bumped on every parameter access through `params_mut`; caches from an
    /// older generation are rejected.
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.params == other.params
    }
}

/// Activations retained by a batched forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    generation: u64,
    batch: usize,
    /// Input of every layer (post-activation of the previous one), `batch × width`.
    layer_inputs: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    /// Hidden layers use uniform fan-in initialization; the output layer starts at zero.
    pub fn new(input: usize, shape: MlpShape, output: usize, seed: u64) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(shape.width, shape.depth));
        widths.push(output);
        let mut net = Self::zeros(&widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = widths.len() - 1;
        for layer in 0..n_layers - 1 {
            let bound = 1.0 / (widths[layer] as f64).sqrt();
            let (w, b) = net.layer_ranges(layer);
            for v in &mut net.params[w] {
                *v = rng.random_range(-bound..bound);
            }
            for v in &mut net.params[b] {
                *v = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            widths: widths.to_vec(),
            params: vec![0.0; n],
            generation: 0,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_len(&self) -> usize {
        self.widths[0]
    }

    pub fn output_len(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// Index ranges of the weights and the bias of `layer`.
    pub fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for l in 0..layer {
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Forward pass for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.forward_batch(x, 1)
    }

    /// Forward pass for `batch` inputs stored contiguously.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache)> {
        if inputs.len() != batch * self.input_len() {
            return Err(Error::Contract(format!(
                "mlp input has {} values, expected {} × {}",
                inputs.len(),
                batch,
                self.input_len()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut cur = inputs.to_vec();
        for layer in 0..self.num_layers() {
            let (i, o) = (self.widths[layer], self.widths[layer + 1]);
            let (wr, br) = self.layer_ranges(layer);
            let w = &self.params[wr];
            let b = &self.params[br];
            let last = layer + 1 == self.num_layers();
            let mut next = vec![0.0; batch * o];
            for s in 0..batch {
                let x = &cur[s * i..(s + 1) * i];
                let y = &mut next[s * o..(s + 1) * o];
                for (r, out) in y.iter_mut().enumerate() {
                    let row = &w[r * i..(r + 1) * i];
                    let mut acc = b[r];
                    for (a, v) in row.iter().zip(x) {
                        acc += a * v;
                    }
                    *out = if last { acc } else { acc.max(0.0) };
                }
            }
            layer_inputs.push(std::mem::replace(&mut cur, next));
        }
        Ok((
            cur,
            MlpCache {
                generation: self.generation,
                batch,
                layer_inputs,
            },
        ))
    }

    /// Reverse-mode pass. Returns `dL/dinput` (batch × input) and accumulates
    /// `dL/dparams` into `d_params`.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        d_out: &[f64],
        d_params: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.layer_inputs.len() != self.num_layers() {
            return Err(Error::Contract(
                "mlp cache is stale (parameters changed since the forward pass)".into(),
            ));
        }
        let batch = cache.batch;
        if d_out.len() != batch * self.output_len() || d_params.len() != self.params.len() {
            return Err(Error::Contract("mlp backward buffer size mismatch".into()));
        }
        let mut grad = d_out.to_vec();
        for layer in (0..self.num_layers()).rev() {
            let (i, o) = (self.widths[layer], self.widths[layer + 1]);
            let (wr, br) = self.layer_ranges(layer);
            let w = &self.params[wr.clone()];
            let x = &cache.layer_inputs[layer];
            let mut d_in = vec![0.0; batch * i];
            let (dw_all, db_all) = d_params.split_at_mut(br.start);
            let dw = &mut dw_all[wr];
            let db = &mut db_all[..o];
            for s in 0..batch {
                let g = &grad[s * o..(s + 1) * o];
                let xs = &x[s * i..(s + 1) * i];
                let di = &mut d_in[s * i..(s + 1) * i];
                for r in 0..o {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    db[r] += gr;
                    let row = &w[r * i..(r + 1) * i];
                    let drow = &mut dw[r * i..(r + 1) * i];
                    for c in 0..i {
                        drow[c] += gr * xs[c];
                        di[c] += gr * row[c];
                    }
                }
            }
            if layer > 0 {
                // ReLU of the previous layer: its output is this layer's input
                for (d, &v) in d_in.iter_mut().zip(x) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grad = d_in;
        }
        Ok(grad)
    }

    /// Single-sample backward.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut d_params = vec![0.0; self.params.len()];
        let d_x = self.backward_batch(cache, d_out, &mut d_params)?;
        Ok((d_x, d_params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[5, 7, 3]);
        let (y, _) = net.forward(&[1.0, -2.0, 3.0, 0.5, 0.1]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer() {
        let mut net = Mlp::zeros(&[3, 2]);
        net.params_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.25, 0.1, -0.2]);
        let x = [0.5, 1.0, 2.0];
        let (y, _) = net.forward(&x).unwrap();
        // W x + b by hand
        assert!((y[0] - (0.5 + 2.0 + 6.0 + 0.1)).abs() < 1e-15);
        assert!((y[1] - (-0.5 + 0.5 + 0.5 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn new_zeroes_the_output_layer() {
        let net = Mlp::new(6, MlpShape { depth: 2, width: 8 }, 4, 1);
        let (w, b) = net.layer_ranges(net.num_layers() - 1);
        assert!(net.params()[w].iter().all(|v| *v == 0.0));
        assert!(net.params()[b].iter().all(|v| *v == 0.0));
        let (w0, _) = net.layer_ranges(0);
        assert!(net.params()[w0].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn shape_mismatch_and_stale_cache() {
        let mut net = Mlp::new(3, MlpShape { depth: 1, width: 4 }, 2, 0);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Contract(_))));
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let net = Mlp::new(3, MlpShape { depth: 2, width: 5 }, 2, 3);
        let (_, cache) = net.forward(&[0.3, -0.2, 0.9]).unwrap();
        let (dx, dp) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(dx.iter().chain(&dp).all(|v| *v == 0.0));
    }
}
