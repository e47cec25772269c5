use ndarray::Array2;

use super::NoiseSchedule;
use crate::moldata::{Element, FeatureScaler, NUM_ATOM_TYPES};

/// Floor applied to log-probabilities of discretized features.
pub const LOG_FLOOR: f64 = -700.0;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Φ(hi) − Φ(lo) for hi ≥ lo, evaluated on whichever tail avoids cancellation.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    let r = std::f64::consts::SQRT_2;
    if lo > 0.0 {
        0.5 * (libm::erfc(lo / r) - libm::erfc(hi / r))
    } else if hi < 0.0 {
        0.5 * (libm::erfc(-hi / r) - libm::erfc(-lo / r))
    } else {
        1.0 - normal_cdf(lo) - 0.5 * libm::erfc(hi / r)
    }
}

/// log p(h | z) for an integer feature `h` discretized into `[h − ½, h + ½]`
/// under N(z, σ²), all on the unscaled integer grid. Floored at −700.
pub fn integer_log_prob(h: f64, z: f64, sigma: f64) -> f64 {
    let p = normal_interval((h - 0.5 - z) / sigma, (h + 0.5 - z) / sigma);
    p.ln().max(LOG_FLOOR)
}

/// Normalized categorical probabilities from per-category latents `z` on
/// the unscaled one-hot grid; category k gets weight ∫_{½}^{3/2} N(u | z_k, σ²) du.
/// Returns `(probabilities, all_weights_underflowed)`; in the underflow case
/// the distribution is uniform.
pub fn categorical_probs(z: &[f64], sigma: f64) -> (Vec<f64>, bool) {
    let logs: Vec<f64> = z
        .iter()
        .map(|&zk| normal_interval((0.5 - zk) / sigma, (1.5 - zk) / sigma).ln())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (vec![1.0 / z.len() as f64; z.len()], true);
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    (weights.iter().map(|w| w / total).collect(), false)
}

/// Per-atom log p(charge | z_0) from the scaled integer column of `z0_h`.
pub fn zeroth_likelihood_integer(charges: &[i64], z0_h: &Array2<f64>, schedule: &NoiseSchedule, scaler: &FeatureScaler) -> Vec<f64> {
    let sigma = schedule.sigma(0) / scaler.integer_scale;
    charges
        .iter()
        .enumerate()
        .map(|(i, &c)| integer_log_prob(c as f64, z0_h[[i, NUM_ATOM_TYPES]] / scaler.integer_scale, sigma))
        .collect()
}

/// Per-atom log p(type | z_0) from the scaled one-hot block of `z0_h`.
pub fn zeroth_likelihood_categorical(
    elements: &[Element],
    z0_h: &Array2<f64>,
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
) -> Vec<f64> {
    let sigma = schedule.sigma(0) / scaler.categorical_scale;
    elements
        .iter()
        .enumerate()
        .map(|(i, el)| {
            let z: Vec<f64> = (0..NUM_ATOM_TYPES).map(|k| z0_h[[i, k]] / scaler.categorical_scale).collect();
            let (p, _) = categorical_probs(&z, sigma);
            p[el.index()].ln().max(LOG_FLOOR)
        })
        .collect()
}

/// log Z = `(N − 1)·d · log(√(2π)·ratio)` where `ratio` is σ_0/α_0.
pub fn log_normalizer(num_atoms: usize, dims: usize, ratio: f64) -> f64 {
    let dof = (num_atoms.saturating_sub(1) * dims) as f64;
    dof * (0.5 * (2.0 * std::f64::consts::PI).ln() + ratio.ln())
}

/// log Z for the position term of `schedule`.
pub fn position_log_normalizer(num_atoms: usize, dims: usize, schedule: &NoiseSchedule) -> f64 {
    log_normalizer(num_atoms, dims, schedule.sigma(0) / schedule.alpha(0))
}

/// L_0^(x) = log Z⁻¹ − ½‖ε − ε̂_0‖² with ε = (z_0 − α_0·x)/σ_0. All inputs
/// live in the zero-CoG subspace; any column count is accepted.
pub fn zeroth_position_loss(x: &Array2<f64>, z0_x: &Array2<f64>, eps0_hat: &Array2<f64>, schedule: &NoiseSchedule) -> f64 {
    let (a0, s0) = (schedule.alpha(0), schedule.sigma(0));
    let residual: f64 = x
        .iter()
        .zip(z0_x)
        .zip(eps0_hat)
        .map(|((&x, &z), &e)| ((z - a0 * x) / s0 - e).powi(2))
        .sum();
    -position_log_normalizer(x.nrows(), x.ncols(), schedule) - 0.5 * residual
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};

    #[test]
    fn centered_integer_interval() {
        let p = integer_log_prob(6.0, 6.0, 0.1).exp();
        assert!((p - (normal_cdf(5.0) - normal_cdf(-5.0))).abs() < 1e-15);
        assert!(p > 0.999_999);
    }

    #[test]
    fn far_tail_is_floored() {
        let lp = integer_log_prob(0.0, 50.0, 0.1);
        assert_eq!(lp, LOG_FLOOR);
        let lp = integer_log_prob(0.0, 1.0, 0.1);
        assert!(lp.is_finite() && lp < -10.0);
    }

    #[test]
    fn uniform_latent_is_uniform() {
        let (p, underflow) = categorical_probs(&[0.3; 5], 0.1);
        assert!(!underflow);
        for v in p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn underflow_falls_back_to_uniform() {
        let (p, underflow) = categorical_probs(&[1e6; 5], 0.01);
        assert!(underflow);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_atom_normalizer() {
        let unit = log_normalizer(2, 3, 1.0);
        assert!((unit - 3.0 * (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-15);
        let s = build_schedule(100, ScheduleKind::Polynomial, 1e-5).unwrap();
        let expected = 3.0 * (0.5 * (2.0 * std::f64::consts::PI).ln() + (s.sigma(0) / s.alpha(0)).ln());
        assert!((position_log_normalizer(2, 3, &s) - expected).abs() < 1e-12);
    }
}
