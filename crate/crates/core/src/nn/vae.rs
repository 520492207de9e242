//! Gaussian-output variational autoencoder on top of [`Mlp`].

use super::checkpoint::{self, Tensor};
use super::mlp::Mlp;
use crate::error::{CoreError, Result};

/// Log-variance outputs are clamped here to keep the Gaussian NLL finite.
/// Gradients are zero where the clamp is active.
const LOG_VAR_RANGE: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Encoder maps an input to `(μ, logσ²)` of the latent Gaussian; the decoder
/// maps a reparameterized latent sample to `(μ_d, logσ_d²)` of the output
/// Gaussian. Both halves are plain MLPs whose output layers are split in two.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent: usize,
}

/// Loss decomposition: `total = nll + kld`.
#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub total: f64,
    pub nll: f64,
    pub kld: f64,
}

impl Vae {
    /// `input_dim → hidden → 2·latent` encoder and `latent → hidden → 2·input_dim`
    /// decoder, seeded deterministically (decoder from `seed + 1`).
    pub fn new(input_dim: usize, hidden: usize, latent: usize, seed: u64) -> Vae {
        Vae {
            encoder: Mlp::new(&[input_dim, hidden, 2 * latent], seed),
            decoder: Mlp::new(&[latent, hidden, 2 * input_dim], seed.wrapping_add(1)),
            latent,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Evidence lower-bound loss for one input with an externally supplied
    /// standard-normal draw (`noise.len() == latent`):
    /// `nll = Σ_d ½(y−μ_d)²/σ_d² + ½logσ_d² + ½ln2π` and
    /// `kld = Σ_k ½(σ² + μ² − 1 − logσ²)`, with `z = μ + σ·noise`.
    pub fn loss(&self, y: &[f64], noise: &[f64]) -> Result<VaeLoss> {
        let (loss, _, _, _) = self.loss_inner(y, noise)?;
        Ok(loss)
    }

    /// [`Vae::loss`] plus exact gradients, accumulated into the two buffers
    /// (layouts from `encoder.zero_grads()` / `decoder.zero_grads()`).
    pub fn loss_backward(
        &self,
        y: &[f64],
        noise: &[f64],
        enc_grads: &mut [f64],
        dec_grads: &mut [f64],
    ) -> Result<VaeLoss> {
        let (loss, enc_fwd, dec_fwd, z_path) = self.loss_inner(y, noise)?;
        let k = self.latent;
        let d = y.len();
        let ZPath { mu, log_var, sigma, mu_d, log_var_d, enc_raw, dec_raw } = z_path;

        // Decoder output gradients: NLL through (μ_d, logσ_d²).
        let mut d_dec = vec![0.0; 2 * d];
        for i in 0..d {
            let inv_var = (-log_var_d[i]).exp();
            d_dec[i] = (mu_d[i] - y[i]) * inv_var;
            let g = -0.5 * (y[i] - mu_d[i]).powi(2) * inv_var + 0.5;
            d_dec[d + i] = if dec_raw[d + i].abs() < LOG_VAR_RANGE { g } else { 0.0 };
        }
        let d_z = self.decoder.backward(&dec_fwd, &d_dec, dec_grads);

        // Encoder output gradients: KLD plus the reparameterization path.
        let mut d_enc = vec![0.0; 2 * k];
        for j in 0..k {
            d_enc[j] = mu[j] + d_z[j];
            let g = 0.5 * (log_var[j].exp() - 1.0) + d_z[j] * noise[j] * 0.5 * sigma[j];
            d_enc[k + j] = if enc_raw[k + j].abs() < LOG_VAR_RANGE { g } else { 0.0 };
        }
        self.encoder.backward(&enc_fwd, &d_enc, enc_grads);
        Ok(loss)
    }

    fn loss_inner(
        &self,
        y: &[f64],
        noise: &[f64],
    ) -> Result<(VaeLoss, super::mlp::Forward, super::mlp::Forward, ZPath)> {
        assert_eq!(y.len(), self.input_dim(), "input dimension mismatch");
        assert_eq!(noise.len(), self.latent, "noise must have one draw per latent dim");
        let k = self.latent;
        let d = y.len();

        let enc_fwd = self.encoder.forward_cached(y);
        let enc_raw = enc_fwd.output().to_vec();
        let mu = enc_raw[..k].to_vec();
        let log_var: Vec<f64> =
            enc_raw[k..].iter().map(|&v| v.clamp(-LOG_VAR_RANGE, LOG_VAR_RANGE)).collect();
        let sigma: Vec<f64> = log_var.iter().map(|&lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> =
            (0..k).map(|j| mu[j] + sigma[j] * noise[j]).collect();

        let dec_fwd = self.decoder.forward_cached(&z);
        let dec_raw = dec_fwd.output().to_vec();
        let mu_d = dec_raw[..d].to_vec();
        let log_var_d: Vec<f64> =
            dec_raw[d..].iter().map(|&v| v.clamp(-LOG_VAR_RANGE, LOG_VAR_RANGE)).collect();

        let mut nll = 0.0;
        for i in 0..d {
            nll += 0.5 * (y[i] - mu_d[i]).powi(2) * (-log_var_d[i]).exp()
                + 0.5 * log_var_d[i]
                + HALF_LN_2PI;
        }
        let mut kld = 0.0;
        for j in 0..k {
            kld += 0.5 * (log_var[j].exp() + mu[j] * mu[j] - 1.0 - log_var[j]);
        }
        let total = nll + kld;
        if !total.is_finite() {
            return Err(CoreError::NonFinite(format!("vae loss is {total}")));
        }
        let path = ZPath { mu, log_var, sigma, mu_d, log_var_d, enc_raw, dec_raw };
        Ok((VaeLoss { total, nll, kld }, enc_fwd, dec_fwd, path))
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut tensors = self.encoder.to_tensors("enc.");
        tensors.extend(self.decoder.to_tensors("dec."));
        tensors.push(Tensor::scalar("latent", self.latent as f64));
        tensors
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Vae> {
        let latent = tensors
            .iter()
            .find(|t| t.name == "latent")
            .ok_or_else(|| CoreError::Checkpoint("missing 'latent' tensor".into()))?
            .data[0] as usize;
        Ok(Vae {
            encoder: Mlp::from_tensors(tensors, "enc.")?,
            decoder: Mlp::from_tensors(tensors, "dec.")?,
            latent,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &std::path::Path) -> Result<Vae> {
        Vae::from_tensors(&checkpoint::load(path)?)
    }
}

struct ZPath {
    mu: Vec<f64>,
    log_var: Vec<f64>,
    sigma: Vec<f64>,
    mu_d: Vec<f64>,
    log_var_d: Vec<f64>,
    enc_raw: Vec<f64>,
    dec_raw: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All-zero parameters make the decoder emit `μ_d = 0, σ_d = 1` and the
    /// encoder emit `μ = 0, σ² = 1`, so for `y = 0` the loss reduces to the
    /// closed forms: per-dim NLL `½·ln 2π` and zero KLD.
    #[test]
    fn plug_in_values_match_closed_forms() {
        let mut vae = Vae::new(3, 4, 2, 0);
        vae.encoder.params_mut().fill(0.0);
        vae.decoder.params_mut().fill(0.0);
        let loss = vae.loss(&[0.0; 3], &[0.7, -0.2]).unwrap();
        assert!((loss.nll - 3.0 * HALF_LN_2PI).abs() < 1e-12);
        assert_eq!(loss.kld, 0.0);

        // Force μ = (1, 1) via the encoder's output bias: KLD becomes ½ per dim.
        let n = vae.encoder.param_count();
        vae.encoder.params_mut()[n - 4] = 1.0;
        vae.encoder.params_mut()[n - 3] = 1.0;
        let loss = vae.loss(&[0.0; 3], &[0.0, 0.0]).unwrap();
        assert!((loss.kld - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_deterministic_and_finite() {
        let vae = Vae::new(4, 8, 2, 9);
        let y = [0.3, -0.7, 1.2, 0.0];
        let noise = [0.5, -1.0];
        let a = vae.loss(&y, &noise).unwrap();
        let b = vae.loss(&y, &noise).unwrap();
        assert_eq!(a.total, b.total);
        assert!((a.total - (a.nll + a.kld)).abs() < 1e-12);
        assert!(a.kld >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        let vae = Vae::new(6, 16, 3, 11);
        vae.save(&path).unwrap();
        let back = Vae::load(&path).unwrap();
        assert_eq!(vae, back);
    }
}
