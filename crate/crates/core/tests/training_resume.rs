use std::path::PathBuf;

use gcdm::diffusion::{NoiseSchedule, ScheduleConfig};
use gcdm::gcpnet::{GcpNet, GcpNetConfig};
use gcdm::moldata::{compute_size_distribution, parse_internal, FeatureScaler, MoleculeGraph};
use gcdm::training::{
    decode_checkpoint, encode_checkpoint, fit, Checkpoint, FitConfig, FitEvent, OptimizerConfig, OptimizerState,
    RngState, TrainRng,
};
use gcdm::Error;
use rand::SeedableRng;

fn molecules() -> Vec<MoleculeGraph> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_excerpt_1k.mol");
    let mut mols = parse_internal(&std::fs::read_to_string(&path).unwrap(), &path).unwrap();
    mols.truncate(24);
    mols
}

struct Setup {
    net: GcpNet,
    opt: OptimizerState,
    rng: TrainRng,
    schedule: NoiseSchedule,
    schedule_config: ScheduleConfig,
}

fn setup() -> Setup {
    let config = GcpNetConfig {
        num_layers: 1,
        node_scalar_dim: 8,
        node_vector_dim: 2,
        edge_scalar_dim: 4,
        edge_vector_dim: 2,
        ..Default::default()
    };
    let net = GcpNet::new(config, 3).unwrap();
    let opt = OptimizerState::new(
        OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            ..Default::default()
        },
        net.params(),
    )
    .unwrap();
    let schedule_config = ScheduleConfig {
        steps: 20,
        step_clip: 1e-5,
        ..Default::default()
    };
    Setup {
        net,
        opt,
        rng: TrainRng::seed_from_u64(5),
        schedule: NoiseSchedule::new(&schedule_config).unwrap(),
        schedule_config,
    }
}

fn fit_config(steps: u64) -> FitConfig {
    FitConfig {
        steps,
        eval_every: 2,
        eval_molecules: 4,
        ..Default::default()
    }
}

#[test]
fn resuming_through_a_checkpoint_is_exact() {
    let mols = molecules();
    let (train, val) = mols.split_at(20);
    let scaler = FeatureScaler::default();
    let sizes = compute_size_distribution(train).unwrap();

    let mut straight = setup();
    let mut straight_log = Vec::new();
    fit(
        &mut straight.net,
        &mut straight.opt,
        train,
        val,
        &straight.schedule,
        &scaler,
        &mut straight.rng,
        &fit_config(7),
        &mut |p| {
            straight_log.push(p.event);
            Ok(())
        },
    )
    .unwrap();

    let mut first = setup();
    let mut log = Vec::new();
    fit(&mut first.net, &mut first.opt, train, val, &first.schedule, &scaler, &mut first.rng, &fit_config(3), &mut |p| {
        log.push(p.event);
        Ok(())
    })
    .unwrap();
    let bytes = encode_checkpoint(&Checkpoint {
        model: first.net.config().clone(),
        params: first.net.params().clone(),
        optimizer: first.opt.clone(),
        schedule: first.schedule_config.clone(),
        scaler,
        sizes,
        rng: RngState::capture(&first.rng),
    })
    .unwrap();
    let ckpt = decode_checkpoint(&bytes).unwrap();
    let mut net = ckpt.network().unwrap();
    let mut opt = ckpt.optimizer.clone();
    let mut rng = ckpt.rng.restore();
    let schedule = NoiseSchedule::new(&ckpt.schedule).unwrap();
    fit(&mut net, &mut opt, train, val, &schedule, &ckpt.scaler, &mut rng, &fit_config(7), &mut |p| {
        log.push(p.event);
        Ok(())
    })
    .unwrap();

    assert_eq!(log, straight_log);
    assert_eq!(net.params(), straight.net.params());
    assert_eq!(opt, straight.opt);
}

#[test]
fn observer_errors_abort_training() {
    let mols = molecules();
    let mut s = setup();
    let mut steps = 0;
    let err = fit(
        &mut s.net,
        &mut s.opt,
        &mols,
        &[],
        &s.schedule,
        &FeatureScaler::default(),
        &mut s.rng,
        &fit_config(10),
        &mut |p| {
            if let FitEvent::Step(_) = p.event {
                steps += 1;
            }
            if steps == 2 {
                return Err(Error::InvalidArgument("stop".into()));
            }
            Ok(())
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("stop"));
    assert_eq!(s.opt.step, 2);
}

#[test]
fn patience_stops_a_stalled_run() {
    let mols = molecules();
    let (train, val) = mols.split_at(20);
    let mut s = setup();
    s.opt.config.learning_rate = 0.0;
    let config = FitConfig {
        patience: 2,
        ..fit_config(100)
    };
    let summary =
        fit(&mut s.net, &mut s.opt, train, val, &s.schedule, &FeatureScaler::default(), &mut s.rng, &config, &mut |_| {
            Ok(())
        })
        .unwrap();
    assert!(summary.stopped_early);
    assert_eq!(summary.final_step, 6);
}
