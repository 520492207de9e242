//! Multilayer perceptron with exact backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::checkpoint::{self, Tensor};
use crate::error::{CoreError, Result};

/// Fully connected network: ReLU on hidden layers, identity on the output.
///
/// Parameters live in one flat buffer laid out `[W0, b0, W1, b1, ...]` with
/// row-major weight matrices of shape `(fan_out, fan_in)`, so optimizers and
/// checkpoints can treat the whole network as a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// Seed the parameters were initialized from (metadata for manifests).
    pub seed: u64,
}

/// Cached activations from [`Mlp::forward_cached`], consumed by backprop.
/// `acts[0]` is the input; `acts[l + 1]` is layer `l`'s post-activation output.
pub struct Forward {
    acts: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("forward cache always holds the input")
    }
}

impl Mlp {
    /// Build a network with the given layer sizes (`[input, hidden..., output]`)
    /// and scaled-uniform fan-in initialization drawn from `seed`.
    pub fn new(sizes: &[usize], seed: u64) -> Mlp {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::count_params(sizes));
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * fan_in + fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
        }
        Mlp { sizes: sizes.to_vec(), params, seed }
    }

    fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Allocate a zeroed gradient buffer matching this network's layout.
    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Offset of layer `l`'s weight block; biases follow the weights.
    fn layer_offset(&self, layer: usize) -> usize {
        let mut off = 0;
        for l in 0..layer {
            off += self.sizes[l + 1] * self.sizes[l] + self.sizes[l + 1];
        }
        off
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Forward {
        assert_eq!(x.len(), self.sizes[0], "input dimension mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_out * fan_in];
            let b = &self.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out];
            let prev = &acts[l];
            let mut out = vec![0.0; fan_out];
            for (o, out_o) in out.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(prev.iter()) {
                    z += wi * xi;
                }
                *out_o = if l + 1 < n_layers { z.max(0.0) } else { z };
            }
            acts.push(out);
            off += fan_out * fan_in + fan_out;
        }
        Forward { acts }
    }

    /// Backpropagate `d_out` (∂loss/∂output) through the cached forward pass.
    ///
    /// Gradients are *accumulated* into `grads` (same layout as `params`), so a
    /// batch can sum per-sample calls. Returns ∂loss/∂input.
    pub fn backward(&self, fwd: &Forward, d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(d_out.len(), self.output_dim(), "output gradient dimension mismatch");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            // ReLU derivative for hidden layers: the cached post-activation is
            // positive exactly where the pre-activation was.
            if l + 1 < n_layers {
                for (d, &a) in delta.iter_mut().zip(fwd.acts[l + 1].iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let prev = &fwd.acts[l];
            let (gw, gb) = grads[off..off + fan_out * fan_in + fan_out]
                .split_at_mut(fan_out * fan_in);
            let mut d_prev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                let row_w = &self.params[off + o * fan_in..off + (o + 1) * fan_in];
                let row_g = &mut gw[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    row_g[i] += d * prev[i];
                    d_prev[i] += d * row_w[i];
                }
            }
            delta = d_prev;
        }
        delta
    }

    /// Soft-update toward `online`: `self ← (1 − tau)·self + tau·online`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        assert_eq!(self.sizes, online.sizes, "soft update requires matching architecture");
        for (t, o) in self.params.iter_mut().zip(online.params.iter()) {
            *t += tau * (o - *t);
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut tensors = Vec::new();
        for l in 0..self.sizes.len() - 1 {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            tensors.push(Tensor {
                name: format!("{prefix}w{l}"),
                dims: vec![fan_out as u64, fan_in as u64],
                data: self.params[off..off + fan_out * fan_in].to_vec(),
            });
            tensors.push(Tensor {
                name: format!("{prefix}b{l}"),
                dims: vec![fan_out as u64],
                data: self.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out]
                    .to_vec(),
            });
        }
        // Stash the seed bit-exactly by reinterpreting the u64 as an f64.
        tensors.push(Tensor {
            name: format!("{prefix}seed"),
            dims: vec![1],
            data: vec![f64::from_bits(self.seed)],
        });
        tensors
    }

    pub fn from_tensors(tensors: &[Tensor], prefix: &str) -> Result<Mlp> {
        let get = |name: String| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor '{name}'")))
        };
        let seed = f64::to_bits(get(format!("{prefix}seed"))?.data[0]);
        let mut sizes = Vec::new();
        let mut params = Vec::new();
        for l in 0.. {
            let Ok(w) = get(format!("{prefix}w{l}")) else { break };
            let b = get(format!("{prefix}b{l}"))?;
            if w.dims.len() != 2 || b.dims.len() != 1 || w.dims[0] != b.dims[0] {
                return Err(CoreError::Checkpoint(format!(
                    "layer {l} tensor shapes inconsistent under prefix '{prefix}'"
                )));
            }
            if l == 0 {
                sizes.push(w.dims[1] as usize);
            } else if sizes[l] != w.dims[1] as usize {
                return Err(CoreError::Checkpoint(format!(
                    "layer {l} fan-in does not chain with previous fan-out"
                )));
            }
            sizes.push(w.dims[0] as usize);
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        if sizes.len() < 2 {
            return Err(CoreError::Checkpoint(format!("no layers found under prefix '{prefix}'")));
        }
        Ok(Mlp { sizes, params, seed })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors(""))
    }

    pub fn load(path: &std::path::Path) -> Result<Mlp> {
        Mlp::from_tensors(&checkpoint::load(path)?, "")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_computation() {
        // 2 -> 2 -> 1 with hand-set weights.
        let mut net = Mlp::new(&[2, 2, 1], 0);
        // W0 = [[1, 2], [3, 4]], b0 = [0.5, -10], W1 = [[1, 1]], b1 = [0.25]
        net.params_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.5, -10.0, 1.0, 1.0, 0.25]);
        let y = net.forward(&[1.0, 1.0]);
        // Hidden: relu(1+2+0.5)=3.5, relu(3+4-10)=0 -> output 3.5 + 0 + 0.25.
        assert_eq!(y, vec![3.75]);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Mlp::new(&[4, 8, 3], 42);
        let b = Mlp::new(&[4, 8, 3], 42);
        assert_eq!(a.params(), b.params());
        let c = Mlp::new(&[4, 8, 3], 43);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn soft_update_converges_geometrically() {
        let online = Mlp::new(&[3, 4, 2], 1);
        let mut target = Mlp::new(&[3, 4, 2], 2);
        let dist = |a: &Mlp, b: &Mlp| {
            a.params()
                .iter()
                .zip(b.params())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0_f64, f64::max)
        };
        let d0 = dist(&target, &online);
        for _ in 0..10 {
            target.soft_update_from(&online, 0.005);
        }
        let d10 = dist(&target, &online);
        let expected = d0 * (1.0 - 0.005f64).powi(10);
        assert!((d10 - expected).abs() < 1e-12 * d0.max(1.0), "d10={d10} expected={expected}");
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let net = Mlp::new(&[5, 16, 4], 7);
        let back = Mlp::from_tensors(&net.to_tensors("q."), "q.").unwrap();
        assert_eq!(net, back);
    }
}
