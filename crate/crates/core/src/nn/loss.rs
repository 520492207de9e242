//! Loss building blocks: Huber, softmax, and KL divergence over action values.

/// Huber loss: `x²/2` for `|x| ≤ delta`, else `delta·(|x| − delta/2)`.
/// Continuous and once-differentiable everywhere.
pub fn huber(x: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0, "huber delta must be positive");
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]: `x` clipped to `±delta`.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// Temperature softmax with the usual max-shift for numerical stability.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0, "softmax temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// `KL(p ‖ q) = Σ p·ln(p/q)` for two distributions on the same support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
        .sum()
}

/// Gradient of `KL(softmax(logits/T) ‖ q)` with respect to `logits`.
///
/// With `p = softmax(logits/T)` and `d_k = ln p_k − ln q_k`:
/// `∂KL/∂logit_k = p_k·(d_k − Σ_j p_j d_j) / T`.
pub fn kl_grad_logits(logits: &[f64], q: &[f64], temperature: f64) -> Vec<f64> {
    let p = softmax(logits, temperature);
    let d: Vec<f64> = p.iter().zip(q.iter()).map(|(&pi, &qi)| pi.ln() - qi.ln()).collect();
    let mean: f64 = p.iter().zip(d.iter()).map(|(&pi, &di)| pi * di).sum();
    p.iter().zip(d.iter()).map(|(&pi, &di)| pi * (di - mean) / temperature).collect()
}
