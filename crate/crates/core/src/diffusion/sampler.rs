use ndarray::s;
use rand::Rng;

use super::{draw_noise, posterior_coefficients, recover_clean, Denoiser, NoiseSchedule, NoiseSource};
use crate::error::{Error, Result};
use crate::geometry::centralize_segments;
use crate::moldata::{FeatureScaler, MoleculeGraph, SizeDistribution};
use crate::tape::Mat;

/// Batching for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    /// Molecules denoised together in one network call.
    pub chunk: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { chunk: 50 }
    }
}

/// Draws N from the size distribution.
pub fn sample_num_atoms<R: Rng>(dist: &SizeDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = dist.max_size();
    for (&n, &p) in dist.probs() {
        acc += p;
        last = n;
        if u < acc {
            return n;
        }
    }
    last
}

fn check_finite(m: &Mat, t: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteSample { t })
    }
}

/// Ancestral sampling of one molecule per entry of `sizes`.
///
/// Starts from z_T ~ N(0, I) (positions projected to zero CoG), steps
/// t = T … 1 through the posterior with clean estimates recovered from ε̂,
/// then draws positions from p(x | z_0) and decodes features from the clean
/// estimate at t = 0. `observer(t, sizes, z_x)` sees every position latent
/// from z_T down to z_0. Molecules are ids `{prefix}{index}`.
pub fn sample(
    sizes: &[usize],
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    denoiser: &dyn Denoiser,
    noise: &mut impl NoiseSource,
    options: SampleOptions,
    prefix: &str,
    observer: &mut dyn FnMut(usize, &[usize], &Mat),
) -> Result<Vec<MoleculeGraph>> {
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("molecules need at least one atom".into()));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for chunk in sizes.chunks(options.chunk.max(1)) {
        let start = out.len();
        let mols = sample_chunk(chunk, schedule, denoiser, noise, observer)?;
        for (k, (coords, features)) in mols.into_iter().enumerate() {
            let decoded = scaler.decode(&features)?;
            out.push(MoleculeGraph::new(
                format!("{prefix}{}", start + k),
                coords,
                decoded.elements,
                decoded.charges,
            )?);
        }
    }
    Ok(out)
}

fn sample_chunk(
    sizes: &[usize],
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    noise: &mut impl NoiseSource,
    observer: &mut dyn FnMut(usize, &[usize], &Mat),
) -> Result<Vec<(Mat, Mat)>> {
    let t_max = schedule.steps();
    let (mut z_x, mut z_h) = draw_noise(noise, sizes);
    observer(t_max, sizes, &z_x);
    for t in (1..=t_max).rev() {
        let s = t - 1;
        let t_frac = vec![t as f64 / t_max as f64; sizes.len()];
        let (ex, eh) = denoiser.predict(sizes, &z_x, &z_h, &t_frac)?;
        let x_hat = recover_clean(&z_x, &ex, t, schedule);
        let h_hat = recover_clean(&z_h, &eh, t, schedule);
        let (c_z, c_x, sigma) = posterior_coefficients(t, s, schedule)?;
        let mut mu_x = &z_x * c_z + &x_hat * c_x;
        centralize_segments(&mut mu_x, sizes);
        let mu_h = &z_h * c_z + &h_hat * c_x;
        let (nx, nh) = draw_noise(noise, sizes);
        z_x = mu_x + &nx * sigma;
        z_h = mu_h + &nh * sigma;
        centralize_segments(&mut z_x, sizes);
        check_finite(&z_x, s)?;
        check_finite(&z_h, s)?;
        observer(s, sizes, &z_x);
    }
    let t_frac = vec![0.0; sizes.len()];
    let (ex, eh) = denoiser.predict(sizes, &z_x, &z_h, &t_frac)?;
    let x_hat = recover_clean(&z_x, &ex, 0, schedule);
    let h_hat = recover_clean(&z_h, &eh, 0, schedule);
    let (nx, _) = draw_noise(noise, sizes);
    let mut x = x_hat + &nx * (schedule.sigma(0) / schedule.alpha(0));
    centralize_segments(&mut x, sizes);
    check_finite(&x, 0)?;
    check_finite(&h_hat, 0)?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        let rows = s![start..start + n, ..];
        out.push((x.slice(rows).to_owned(), h_hat.slice(rows).to_owned()));
        start += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind, ZeroDenoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn point_mass_size() {
        let dist = SizeDistribution::from_counts(BTreeMap::from([(5, 3)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_num_atoms(&dist, &mut rng) == 5));
    }

    #[test]
    fn single_atom_lands_at_origin() {
        let s = build_schedule(100, ScheduleKind::Polynomial, 1e-5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mols = sample(&[1], &s, &FeatureScaler::default(), &ZeroDenoiser, &mut rng, SampleOptions::default(), "s", &mut |_, _, _| {}).unwrap();
        assert_eq!(mols[0].num_atoms(), 1);
        assert!(mols[0].coords().iter().all(|v| *v == 0.0));
    }
}
