//! Forward noising, posteriors, losses, likelihood bound and sampling.
//!
//! Positions live in the zero center-of-gravity subspace: every Gaussian
//! draw for `x` and every posterior mean is re-projected per molecule, so the
//! constraint holds at every step rather than accumulating drift. Features
//! are diffused in their scaled form (see [`FeatureScaler`]).
//!
//! The network predicts the noise `ε̂`; the clean estimate is recovered as
//! `x̂ = z_t/α_t − ε̂·σ_t/α_t`.

mod likelihood;
mod sampler;
mod schedule;

use ndarray::{s, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::centralize_segments;
use crate::moldata::{Element, FeatureScaler, MoleculeGraph, FEATURE_DIM};
use crate::tape::Mat;

pub use likelihood::{
    categorical_probs, integer_log_prob, log_normalizer, normal_cdf, normal_interval, position_log_normalizer,
    zeroth_likelihood_categorical, zeroth_likelihood_integer, zeroth_position_loss, LOG_FLOOR,
};
pub use sampler::{sample, sample_num_atoms, SampleOptions};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind, COSINE_OFFSET};

/// A noise predictor over a stacked batch of molecules.
///
/// `sizes[g]` atoms of graph `g` occupy consecutive rows of `z_x` (N×3,
/// zero-CoG per graph) and `z_h` (N×6). `t_frac[g]` is t/T.
pub trait Denoiser: Sync {
    fn predict(&self, sizes: &[usize], z_x: &Mat, z_h: &Mat, t_frac: &[f64]) -> Result<(Mat, Mat)>;
}

/// Predicts ε̂ = 0 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, _sizes: &[usize], z_x: &Mat, z_h: &Mat, _t_frac: &[f64]) -> Result<(Mat, Mat)> {
        Ok((Mat::zeros(z_x.dim()), Mat::zeros(z_h.dim())))
    }
}

/// Source of standard normal matrices.
pub trait NoiseSource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat;
}

impl<R: rand::RngCore> NoiseSource for R {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_simple_fn((rows, cols), || self.sample(StandardNormal))
    }
}

/// Draws `(ε_x, ε_h)` for a stacked batch, with `ε_x` projected to zero CoG
/// per graph.
pub fn draw_noise(noise: &mut impl NoiseSource, sizes: &[usize]) -> (Mat, Mat) {
    let n: usize = sizes.iter().sum();
    let mut eps_x = noise.standard_normal(n, 3);
    centralize_segments(&mut eps_x, sizes);
    let eps_h = noise.standard_normal(n, FEATURE_DIM);
    (eps_x, eps_h)
}

/// Joint latent `z_t = [z_x, z_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z_x: Mat,
    pub z_h: Mat,
    pub t: usize,
}

fn check_zero_cog(m: &Mat, what: &str) -> Result<()> {
    let offset = m.sum_axis(Axis(0)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if offset > 1e-9 * m.nrows() as f64 {
        return Err(Error::InvalidArgument(format!(
            "{what} is not centered (|Σ rows| = {offset:e})"
        )));
    }
    Ok(())
}

/// `z_x = α_t·x + σ_t·ε_x`, `z_h = α_t·h + σ_t·ε_h`.
pub fn forward_noise(x: &Mat, h: &Mat, t: usize, schedule: &NoiseSchedule, eps_x: &Mat, eps_h: &Mat) -> Result<LatentState> {
    if t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("t = {t} exceeds T = {}", schedule.steps())));
    }
    check_zero_cog(x, "x")?;
    check_zero_cog(eps_x, "position noise")?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(LatentState {
        z_x: x * a + eps_x * s,
        z_h: h * a + eps_h * s,
        t,
    })
}

/// Clean-data estimate `z/α_t − ε̂·σ_t/α_t`.
pub fn recover_clean(z: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule) -> Mat {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    (z - &(eps_hat * s)) / a
}

/// Mean and standard deviation of q(z_s | x, z_t).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu_x: Mat,
    pub mu_h: Mat,
    pub sigma: f64,
}

/// Coefficients `(c_z, c_x, σ)` with μ = c_z·z_t + c_x·x and
/// σ = σ_{t|s}·σ_s/σ_t.
pub fn posterior_coefficients(t: usize, s: usize, schedule: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    if s >= t || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("posterior needs s < t ≤ T, got s={s}, t={t}")));
    }
    let a_ts = schedule.alpha_ts(t, s);
    let s2_ts = schedule.sigma2_ts(t, s);
    let (s2_s, s2_t) = (schedule.sigma2(s), schedule.sigma2(t));
    let c_z = a_ts * s2_s / s2_t;
    let c_x = schedule.alpha(s) * s2_ts / s2_t;
    let sigma = s2_ts.sqrt() * schedule.sigma(s) / schedule.sigma(t);
    Ok((c_z, c_x, sigma))
}

/// Posterior parameters; `mu_x` is re-projected to zero CoG.
pub fn posterior_params(x_hat: &Mat, h_hat: &Mat, z: &LatentState, s: usize, schedule: &NoiseSchedule) -> Result<PosteriorParams> {
    let (c_z, c_x, sigma) = posterior_coefficients(z.t, s, schedule)?;
    let mut mu_x = &z.z_x * c_z + x_hat * c_x;
    let n = mu_x.nrows();
    centralize_segments(&mut mu_x, &[n]);
    Ok(PosteriorParams {
        mu_x,
        mu_h: &z.z_h * c_z + h_hat * c_x,
        sigma,
    })
}

/// KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²)) for scalars.
pub fn gaussian_kl(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln() + (sigma_q.powi(2) + (mu_q - mu_p).powi(2)) / (2.0 * sigma_p.powi(2)) - 0.5
}

/// KL(q(z_T | x) ‖ N(0, I)) for a molecule with `num_atoms` atoms, centered
/// coordinates `x` and scaled features `h`.
pub fn prior_kl(x: &Mat, h: &Mat, schedule: &NoiseSchedule) -> f64 {
    let t = schedule.steps();
    let a2 = schedule.alpha2(t);
    let per_dof = -a2 - (-a2).ln_1p();
    let dof_x = (x.nrows().saturating_sub(1) * x.ncols()) as f64;
    let dof_h = h.len() as f64;
    let sq = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>();
    0.5 * ((dof_x + dof_h) * per_dof + a2 * (sq(x) + sq(h)))
}

/// Per-step weight switch shared by training and likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// w(t) = 1.
    Unit,
    /// w(t) = SNR(t−1)/SNR(t) − 1 for t ≥ 1 and 1 at t = 0.
    Vlb,
}

pub fn loss_weight(t: usize, schedule: &NoiseSchedule, weighting: LossWeighting) -> f64 {
    match weighting {
        LossWeighting::Unit => 1.0,
        LossWeighting::Vlb if t == 0 => 1.0,
        LossWeighting::Vlb => schedule.vlb_weight(t),
    }
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_0_x: f64,
    pub l_0_h: f64,
    pub l_base: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.l_t + self.l_0_x + self.l_0_h + self.l_base
    }

    pub fn is_finite(&self) -> bool {
        [self.l_t, self.l_0_x, self.l_0_h, self.l_base].iter().all(|v| v.is_finite())
    }
}

/// A batch with its drawn steps, noise and latents.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub ids: Vec<String>,
    pub sizes: Vec<usize>,
    pub elements: Vec<Element>,
    pub charges: Vec<i64>,
    pub x: Mat,
    pub h: Mat,
    pub t: Vec<usize>,
    pub eps_x: Mat,
    pub eps_h: Mat,
    pub z_x: Mat,
    pub z_h: Mat,
}

impl NoisedBatch {
    pub fn t_frac(&self, steps: usize) -> Vec<f64> {
        self.t.iter().map(|&t| t as f64 / steps as f64).collect()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect()
    }
}

/// Stacks molecules, draws t uniformly from {0, …, T} per molecule (or uses
/// `fixed_t`), draws noise and forms the latents. Coordinates are centered
/// per molecule first.
pub fn noise_batch<R: Rng>(
    batch: &[MoleculeGraph],
    scaler: &FeatureScaler,
    schedule: &NoiseSchedule,
    rng: &mut R,
    fixed_t: Option<usize>,
) -> Result<NoisedBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sizes: Vec<usize> = batch.iter().map(MoleculeGraph::num_atoms).collect();
    let n: usize = sizes.iter().sum();
    let mut x = Mat::zeros((n, 3));
    let mut h = Mat::zeros((n, FEATURE_DIM));
    let mut elements = Vec::with_capacity(n);
    let mut charges = Vec::with_capacity(n);
    let mut start = 0;
    for mol in batch {
        let k = mol.num_atoms();
        x.slice_mut(s![start..start + k, ..]).assign(mol.coords());
        h.slice_mut(s![start..start + k, ..]).assign(&scaler.encode(mol));
        elements.extend_from_slice(mol.elements());
        charges.extend_from_slice(mol.charges());
        start += k;
    }
    centralize_segments(&mut x, &sizes);
    let t: Vec<usize> = match fixed_t {
        Some(t) if t > schedule.steps() => {
            return Err(Error::InvalidArgument(format!("t = {t} exceeds T = {}", schedule.steps())))
        }
        Some(t) => vec![t; batch.len()],
        None => (0..batch.len()).map(|_| rng.random_range(0..=schedule.steps())).collect(),
    };
    let (eps_x, eps_h) = draw_noise(rng, &sizes);
    let mut z_x = Mat::zeros((n, 3));
    let mut z_h = Mat::zeros((n, FEATURE_DIM));
    let mut start = 0;
    for (g, &k) in sizes.iter().enumerate() {
        let (a, sg) = (schedule.alpha(t[g]), schedule.sigma(t[g]));
        let rows = s![start..start + k, ..];
        z_x.slice_mut(rows).assign(&(&x.slice(rows) * a + &eps_x.slice(rows) * sg));
        z_h.slice_mut(rows).assign(&(&h.slice(rows) * a + &eps_h.slice(rows) * sg));
        start += k;
    }
    Ok(NoisedBatch {
        ids: batch.iter().map(|m| m.id().to_string()).collect(),
        sizes,
        elements,
        charges,
        x,
        h,
        t,
        eps_x,
        eps_h,
        z_x,
        z_h,
    })
}

/// Per-molecule ½‖ε − ε̂‖² over positions and features.
pub fn per_molecule_error(noised: &NoisedBatch, eps_hat_x: &Mat, eps_hat_h: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(noised.sizes.len());
    let mut start = 0;
    for &k in &noised.sizes {
        let rows = s![start..start + k, ..];
        let sq = |a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>| {
            a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
        };
        let e = sq(noised.eps_x.slice(rows), eps_hat_x.slice(rows)) + sq(noised.eps_h.slice(rows), eps_hat_h.slice(rows));
        out.push(0.5 * e);
        start += k;
    }
    out
}

/// Assembles the loss terms for a noised batch and the predicted noise.
/// `l_t` is the weighted batch mean of ½‖ε − ε̂‖²; the zeroth and prior
/// terms are reported as negative log-likelihood contributions, with the
/// zeroth terms counted only for molecules that drew t = 0.
pub fn loss_breakdown(
    noised: &NoisedBatch,
    eps_hat_x: &Mat,
    eps_hat_h: &Mat,
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    weighting: LossWeighting,
) -> Result<LossBreakdown> {
    let errors = per_molecule_error(noised, eps_hat_x, eps_hat_h);
    let b = errors.len() as f64;
    let mut out = LossBreakdown::default();
    for (g, (&start, &k)) in noised.offsets().iter().zip(&noised.sizes).enumerate() {
        let t = noised.t[g];
        let rows = s![start..start + k, ..];
        let l_t = loss_weight(t, schedule, weighting) * errors[g];
        let x = noised.x.slice(rows).to_owned();
        let h = noised.h.slice(rows).to_owned();
        let l_base = prior_kl(&x, &h, schedule);
        let (mut l0x, mut l0h) = (0.0, 0.0);
        if t == 0 {
            l0x = position_log_normalizer(k, 3, schedule);
            let z0 = noised.z_h.slice(rows).to_owned();
            let cat = zeroth_likelihood_categorical(&noised.elements[start..start + k], &z0, schedule, scaler);
            let int = zeroth_likelihood_integer(&noised.charges[start..start + k], &z0, schedule, scaler);
            l0h = -(cat.iter().sum::<f64>() + int.iter().sum::<f64>());
        }
        if ![l_t, l0x, l0h, l_base].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                id: noised.ids[g].clone(),
            });
        }
        out.l_t += l_t / b;
        out.l_0_x += l0x / b;
        out.l_0_h += l0h / b;
        out.l_base += l_base / b;
    }
    Ok(out)
}

/// One stochastic evaluation of the training objective with w(t) = 1.
pub fn training_loss<R: Rng>(
    batch: &[MoleculeGraph],
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    denoiser: &dyn Denoiser,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noised = noise_batch(batch, scaler, schedule, rng, None)?;
    let (ex, eh) = denoiser.predict(&noised.sizes, &noised.z_x, &noised.z_h, &noised.t_frac(schedule.steps()))?;
    loss_breakdown(&noised, &ex, &eh, schedule, scaler, LossWeighting::Unit)
}

/// Components of a likelihood-bound estimate for one molecule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllEstimate {
    pub total: f64,
    pub l_base: f64,
    /// T × mean over sampled t ∈ {1, …, T} of the weighted step loss.
    pub diffusion: f64,
    /// −log p(x, h | z_0).
    pub l_0: f64,
}

/// Stochastic estimate of −(L_0 + L_base + Σ_t L_t) for one molecule using
/// `num_t_samples` uniformly drawn steps with the T-times multiplier and the
/// true step weights.
pub fn nll_bound<R: Rng>(
    mol: &MoleculeGraph,
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    denoiser: &dyn Denoiser,
    num_t_samples: usize,
    rng: &mut R,
) -> Result<NllEstimate> {
    if num_t_samples == 0 {
        return Err(Error::InvalidArgument("num_t_samples must be positive".into()));
    }
    let t_max = schedule.steps();
    let n = mol.num_atoms();
    let steps: Vec<usize> = (0..num_t_samples).map(|_| rng.random_range(1..=t_max)).collect();
    let copies = vec![mol.clone(); num_t_samples + 1];
    let mut noised = noise_batch(&copies, scaler, schedule, rng, Some(0))?;
    // Re-form the latents with the drawn steps; the last copy stays at t = 0.
    for (g, &t) in steps.iter().enumerate() {
        let rows = s![g * n..(g + 1) * n, ..];
        let (a, sg) = (schedule.alpha(t), schedule.sigma(t));
        let zx = &noised.x.slice(rows) * a + &noised.eps_x.slice(rows) * sg;
        let zh = &noised.h.slice(rows) * a + &noised.eps_h.slice(rows) * sg;
        noised.z_x.slice_mut(rows).assign(&zx);
        noised.z_h.slice_mut(rows).assign(&zh);
        noised.t[g] = t;
    }
    let (ex, eh) = denoiser.predict(&noised.sizes, &noised.z_x, &noised.z_h, &noised.t_frac(t_max))?;
    let errors = per_molecule_error(&noised, &ex, &eh);
    let diffusion = t_max as f64
        * steps
            .iter()
            .zip(&errors)
            .map(|(&t, e)| loss_weight(t, schedule, LossWeighting::Vlb) * e)
            .sum::<f64>()
        / num_t_samples as f64;
    let last = num_t_samples;
    let rows = s![last * n..(last + 1) * n, ..];
    let x = noised.x.slice(rows).to_owned();
    let h = noised.h.slice(rows).to_owned();
    let z0x = noised.z_x.slice(rows).to_owned();
    let z0h = noised.z_h.slice(rows).to_owned();
    let l0x = -zeroth_position_loss(&x, &z0x, &ex.slice(rows).to_owned(), schedule);
    let cat = zeroth_likelihood_categorical(mol.elements(), &z0h, schedule, scaler);
    let int = zeroth_likelihood_integer(mol.charges(), &z0h, schedule, scaler);
    let l_0 = l0x - cat.iter().sum::<f64>() - int.iter().sum::<f64>();
    let l_base = prior_kl(&x, &h, schedule);
    let total = l_base + diffusion + l_0;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { id: mol.id().to_string() });
    }
    Ok(NllEstimate {
        total,
        l_base,
        diffusion,
        l_0,
    })
}
