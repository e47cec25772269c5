//! Equivariant diffusion for 3D molecule generation.
//!
//! - [`moldata`]: molecules, file formats, feature scaling and splits.
//! - [`geometry`]: centering, local frames and rigid transforms.
//! - [`gcpnet`]: the denoising network and its ablation variants.
//! - [`diffusion`]: noise schedules, losses, the likelihood bound and sampling.
//! - [`training`]: AdamW, the training loop, gradient checks and checkpoints.
//! - [`evaluate`]: bond inference, stability, validity and uniqueness.
//! - [`tape`]: the reverse-mode autodiff tape used for gradients.
//!
//! ```
//! use gcdm::diffusion::{sample, NoiseSchedule, SampleOptions, ScheduleConfig};
//! use gcdm::gcpnet::{GcpNet, GcpNetConfig};
//! use gcdm::moldata::FeatureScaler;
//! use gcdm::training::TrainRng;
//! use rand::SeedableRng;
//!
//! let net = GcpNet::new(GcpNetConfig { num_layers: 1, node_scalar_dim: 8, node_vector_dim: 2,
//!     edge_scalar_dim: 4, edge_vector_dim: 2, ..Default::default() }, 0)?;
//! let schedule = NoiseSchedule::new(&ScheduleConfig { steps: 20, step_clip: 1e-5, ..Default::default() })?;
//! let mut rng = TrainRng::seed_from_u64(0);
//! let mols = sample(&[4], &schedule, &FeatureScaler::default(), &net, &mut rng,
//!     SampleOptions::default(), "m", &mut |_, _, _| {})?;
//! assert_eq!(mols[0].num_atoms(), 4);
//! # Ok::<(), gcdm::Error>(())
//! ```

pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod gcpnet;
pub mod geometry;
pub mod moldata;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
