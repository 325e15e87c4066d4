//! Scalar reference forms of the rendering maths. The batched graph in
//! `net.rs` computes the same quantities on the tape.

use crate::error::{Error, Result};

/// `w_m = (1 - exp(-rho_m)) * exp(-sum_{j<m} rho_j)`.
pub fn density_to_weights(rho: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = rho.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::invalid(format!("densities must be finite and non-negative, got {bad}")));
    }
    let mut acc = 0.0f64;
    Ok(rho
        .iter()
        .map(|&r| {
            let w = -(-r).exp_m1() * (-acc).exp();
            acc += r;
            w
        })
        .collect())
}

/// `sum_m w_m c_m`, with no background term.
pub fn composite(weights: &[f64], colors: &[[f64; 3]]) -> Result<[f64; 3]> {
    if weights.len() != colors.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} colours",
            weights.len(),
            colors.len()
        )));
    }
    let mut out = [0.0; 3];
    for (w, c) in weights.iter().zip(colors) {
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
    }
    Ok(out)
}

/// Weight-averaged sample depth; `None` when the weights sum to zero.
pub fn expected_depth(depths: &[f64], weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    (total > 0.0).then(|| depths.iter().zip(weights).map(|(d, w)| d * w).sum::<f64>() / total)
}

/// Per-channel softmax over all `(view, tap)` entries of `logits`, laid out
/// `[view][tap][channel]`. Views with `valid = false` get exactly zero.
pub fn kernel_weights(logits: &[f64], valid: &[bool], taps: usize) -> Result<Vec<f64>> {
    let n = valid.len();
    if logits.len() != n * taps * 3 {
        return Err(Error::invalid(format!(
            "{} logits for {n} views x {taps} taps x 3 channels",
            logits.len()
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Unrenderable);
    }
    let idx = |v: usize, t: usize, c: usize| (v * taps + t) * 3 + c;
    let mut out = vec![0.0; logits.len()];
    for c in 0..3 {
        let mut mx = f64::NEG_INFINITY;
        for v in (0..n).filter(|&v| valid[v]) {
            for t in 0..taps {
                mx = mx.max(logits[idx(v, t, c)]);
            }
        }
        let mut sum = 0.0;
        for v in (0..n).filter(|&v| valid[v]) {
            for t in 0..taps {
                let e = (logits[idx(v, t, c)] - mx).exp();
                out[idx(v, t, c)] = e;
                sum += e;
            }
        }
        for v in 0..n {
            for t in 0..taps {
                out[idx(v, t, c)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Per channel, the weighted sum of source patch intensities. Both slices
/// use the `[view][tap][channel]` layout.
pub fn blend_color(weights: &[f64], patches: &[f64]) -> Result<[f64; 3]> {
    if weights.len() != patches.len() || weights.len() % 3 != 0 {
        return Err(Error::invalid("kernel weights and patches differ in size"));
    }
    let mut out = [0.0; 3];
    for (i, (w, p)) in weights.iter().zip(patches).enumerate() {
        out[i % 3] += w * p;
    }
    Ok(out)
}
