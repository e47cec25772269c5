use rand::SeedableRng;

use super::{loss_and_gradients, TrainRng};
use crate::diffusion::{noise_batch, NoiseSchedule, NoisedBatch};
use crate::error::{Error, Result};
use crate::gcpnet::GcpNet;
use crate::moldata::{FeatureScaler, MoleculeGraph};

/// Step of the five-point central difference.
pub const FD_STEP: f64 = 1e-4;

/// A fixed noised batch on which the training loss is a deterministic
/// function of the parameters.
#[derive(Debug, Clone)]
pub struct GradientInstance {
    pub noised: NoisedBatch,
    pub steps: usize,
}

impl GradientInstance {
    /// Noises `molecules` once with a generator seeded by `seed`.
    pub fn new(
        molecules: &[MoleculeGraph],
        schedule: &NoiseSchedule,
        scaler: &FeatureScaler,
        seed: u64,
        fixed_t: Option<usize>,
    ) -> Result<Self> {
        let mut rng = TrainRng::seed_from_u64(seed);
        Ok(GradientInstance {
            noised: noise_batch(molecules, scaler, schedule, &mut rng, fixed_t)?,
            steps: schedule.steps(),
        })
    }

    fn loss(&self, net: &GcpNet) -> Result<f64> {
        let n = self.noised.sizes.len();
        Ok(loss_and_gradients(net, &self.noised, self.steps, n as f64, n)?.value)
    }
}

/// Worst entry of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterError {
    pub path: String,
    pub max_rel_error: f64,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-parameter comparison of analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub entries: Vec<ParameterError>,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl GradientCheck {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParameterError> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares every parameter entry's analytic gradient with a five-point
/// central difference of step [`FD_STEP`]. The relative error of an entry is
/// `|a − f| / max(|a|, |f|, floor)`.
pub fn check_gradients(net: &GcpNet, instance: &GradientInstance, tolerance: f64, floor: f64) -> Result<GradientCheck> {
    let n = instance.noised.sizes.len();
    let analytic = loss_and_gradients(net, &instance.noised, instance.steps, n as f64, n)?.grads;
    for (name, g) in net.params().names().iter().zip(&analytic) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { path: name.clone() });
        }
    }
    let mut probe = net.clone();
    let mut entries = Vec::with_capacity(analytic.len());
    for (p, grad) in analytic.iter().enumerate() {
        let path = net.params().names()[p].clone();
        let mut worst = ParameterError {
            path,
            max_rel_error: 0.0,
            index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for ((r, c), &a) in grad.indexed_iter() {
            let original = net.params().values()[p][[r, c]];
            let mut eval = |delta: f64| -> Result<f64> {
                probe.params_mut().values_mut()[p][[r, c]] = original + delta;
                instance.loss(&probe)
            };
            let (up, down) = (eval(FD_STEP)?, eval(-FD_STEP)?);
            let (up2, down2) = (eval(2.0 * FD_STEP)?, eval(-2.0 * FD_STEP)?);
            probe.params_mut().values_mut()[p][[r, c]] = original;
            let f = (8.0 * (up - down) - (up2 - down2)) / (12.0 * FD_STEP);
            let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.index = (r, c);
                worst.analytic = a;
                worst.numeric = f;
            }
        }
        entries.push(worst);
    }
    Ok(GradientCheck {
        entries,
        tolerance,
        floor,
    })
}
