use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use redirtrans::cli::Config;
use redirtrans::eval;
use redirtrans::geometry::Condition;
use redirtrans::redirector::{Mode, RedirectTarget, Redirector, RedirectorConfig};
use redirtrans::rng::derive_seed;
use redirtrans::tensor::{write_checkpoint, AdamState};
use redirtrans::trainer::{
    self, batch_layer_errors, evaluate_batch, evaluate_batch_at, train_step, LabelSource, Prepared, TrainConfig, TrainError,
};
use redirtrans::world::{pretrain_estimator, Estimator, EstimatorArch, PretrainConfig, Sample, WorldConfig, WorldSpec};

const DESK: &str = include_str!("../../../configs/desk.cfg");

struct Small {
    world: WorldSpec,
    data: Vec<Sample>,
    est: Estimator,
}

fn small() -> Small {
    let world = WorldSpec::generate(WorldConfig::default()).unwrap();
    let data = world.sample_dataset(60, 4, 0.4, 3).unwrap();
    let pre = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let est = pretrain_estimator(&data, EstimatorArch::Train, 4, &pre).unwrap();
    Small { world, data, est }
}

fn short_cfg(iterations: usize) -> TrainConfig {
    TrainConfig {
        max_iterations: Some(iterations),
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn checkpoint_and_log(run: &trainer::TrainRun) -> (Vec<u8>, Vec<u8>) {
    let mut log = Vec::new();
    trainer::write_log_csv(&mut log, &run.log).unwrap();
    (write_checkpoint(&run.redirector.params).unwrap(), log)
}

#[test]
fn frozen_parts_survive_training_and_the_log_is_complete() {
    let s = small();
    let world_before = write_checkpoint(&s.world.frozen_tensors()).unwrap();
    let est_before = s.est.clone();
    let run = trainer::train(&short_cfg(40), &s.world, &s.est, &s.data, |_| Ok(Vec::new())).unwrap();
    assert_eq!(write_checkpoint(&s.world.frozen_tensors()).unwrap(), world_before);
    assert_eq!(s.est, est_before);

    assert_eq!(run.log.len(), 40);
    for (i, row) in run.log.iter().enumerate() {
        assert_eq!(row.iteration, i);
        let l = row.loss;
        for v in [l.rec, l.perc, l.att, l.id, l.lab, l.emb, l.prob, l.total] {
            assert!(v.is_finite(), "row {i}: {l:?}");
        }
    }
    assert_eq!(run.evals.len(), 2);
    assert_eq!(run.evals[1].iteration, 40);
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let s = small();
    let a = trainer::train(&short_cfg(25), &s.world, &s.est, &s.data, |_| Ok(Vec::new())).unwrap();
    let b = trainer::train(&short_cfg(25), &s.world, &s.est, &s.data, |_| Ok(Vec::new())).unwrap();
    assert_eq!(checkpoint_and_log(&a), checkpoint_and_log(&b));
    let other = TrainConfig { seed: 8, ..short_cfg(25) };
    let c = trainer::train(&other, &s.world, &s.est, &s.data, |_| Ok(Vec::new())).unwrap();
    assert_ne!(checkpoint_and_log(&a).0, checkpoint_and_log(&c).0);
}

// The layer errors inside L_prob are constants of a step, like the
// estimator's readings, so "after" holds them at their pre-step values.
#[test]
fn tiny_steps_descend() {
    let s = small();
    let prepared = Prepared::new(&s.world, &s.est, &s.data).unwrap();
    let start = trainer::train(&short_cfg(200), &s.world, &s.est, &s.data, |_| Ok(Vec::new()))
        .unwrap()
        .redirector;
    let cfg = TrainConfig {
        lr: 1e-6,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut violations = 0;
    for _ in 0..20 {
        let mut idx: Vec<usize> = (0..s.data.len()).collect();
        idx.shuffle(&mut rng);
        // Samples come in runs of 4 per identity.
        let pairs: Vec<(usize, usize)> = idx[..2].iter().map(|&i| (i, i / 4 * 4 + (i + 1) % 4)).collect();
        let errors = batch_layer_errors(&start, &s.world, &s.est, &prepared, &pairs, &cfg).unwrap();
        let before = evaluate_batch(&start, &s.world, &s.est, &prepared, &pairs, &cfg).unwrap().total;
        let mut red = start.clone();
        let mut state = AdamState::default();
        let reported = train_step(&mut red, &mut state, &s.world, &s.est, &prepared, &pairs, &cfg, 0)
            .unwrap()
            .total;
        assert_eq!(reported, before);
        let after = evaluate_batch_at(&red, &s.world, &s.est, &prepared, &pairs, &cfg, &errors)
            .unwrap()
            .total;
        if after > before {
            violations += 1;
        }
    }
    assert!(violations <= 2, "{violations} of 20 steps went uphill");
}

#[test]
fn identity_edit_at_init_costs_nothing() {
    let s = small();
    let zero = Condition::new(0.0, 0.0);
    let samples: Vec<Sample> = (0..2u32)
        .map(|id| {
            let base = s.world.sample_identity(100 + id as u64);
            let latent = s.world.compose_latent(&base, zero, zero).unwrap();
            let image = s.world.render(&latent).unwrap();
            Sample {
                identity: id,
                latent,
                gaze: zero,
                head: zero,
                image,
            }
        })
        .collect();
    let prepared = Prepared::new(&s.world, &s.est, &samples).unwrap();
    let red = Redirector::new(&RedirectorConfig::new(Mode::Layerwise, 6, 64, 1));
    let cfg = TrainConfig {
        label_source: LabelSource::Truth,
        ..TrainConfig::default()
    };
    let l = evaluate_batch(&red, &s.world, &s.est, &prepared, &[(0, 0), (1, 1)], &cfg).unwrap();
    for (name, v) in [("rec", l.rec), ("perc", l.perc), ("att", l.att), ("id", l.id), ("lab", l.lab)] {
        assert!(v <= 1e-4, "{name} = {v}");
    }
}

#[test]
fn mixed_identity_pairs_are_rejected() {
    let s = small();
    let prepared = Prepared::new(&s.world, &s.est, &s.data).unwrap();
    let red = Redirector::new(&RedirectorConfig::new(Mode::Layerwise, 6, 64, 1));
    let err = evaluate_batch(&red, &s.world, &s.est, &prepared, &[(0, 1), (0, 4)], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::MixedIdentity { .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bitwise_on_forward_outputs() {
    let s = small();
    let red = trainer::train(&short_cfg(30), &s.world, &s.est, &s.data, |_| Ok(Vec::new()))
        .unwrap()
        .redirector;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.rdtc");
    red.save(&path).unwrap();
    let back = Redirector::load(&path).unwrap();
    assert_eq!(back, red);
    let targets = [
        Some(RedirectTarget::Absolute(Condition::new(0.2, -0.1))),
        Some(RedirectTarget::Relative(Condition::new(-0.05, 0.1))),
    ];
    for sample in &s.data[..8] {
        let a = red.edit_latent(&sample.latent, &targets).unwrap();
        let b = back.edit_latent(&sample.latent, &targets).unwrap();
        let bits = |l: &redirtrans::world::Latent| l.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

// The shipped desk configuration end to end: about a minute and a half on
// one core in an optimized build.
#[test]
fn desk_run_converges() {
    let cfg = Config::resolve(Some(DESK), None, &[]).unwrap();
    let world = WorldSpec::generate(cfg.world_config().unwrap()).unwrap();
    let data_seed = cfg.seed("data.seed").unwrap();
    let per = cfg.get("data.per_identity").unwrap();
    let range = cfg.get("data.range").unwrap();
    let train = world
        .sample_dataset(
            cfg.get("data.train_identities").unwrap(),
            per,
            range,
            derive_seed(data_seed, "train"),
        )
        .unwrap();
    let test = world
        .sample_dataset(cfg.get("data.test_identities").unwrap(), per, range, derive_seed(data_seed, "test"))
        .unwrap();
    let pre = cfg.pretrain_config().unwrap();
    let est = pretrain_estimator(&train, EstimatorArch::Train, cfg.seed("estimator.seed").unwrap(), &pre).unwrap();
    let eval_data = world
        .sample_dataset(
            cfg.get("eval_estimator.identities").unwrap(),
            per,
            range,
            derive_seed(data_seed, "eval_estimator"),
        )
        .unwrap();
    let eval_est = pretrain_estimator(&eval_data, EstimatorArch::Eval, cfg.seed("eval_estimator.seed").unwrap(), &pre).unwrap();

    let tcfg = cfg.train_config().unwrap();
    let run = trainer::train(&tcfg, &world, &est, &train, |red| {
        let r = eval::eval_redirection(red, &world, &test, &eval_est).map_err(|e| TrainError::Eval(e.to_string()))?;
        Ok(vec![("gaze_redir_err".into(), r.gaze_redir_err.unwrap())])
    })
    .unwrap();
    assert_eq!(run.log.len(), 12000);

    // Single batch-of-two totals are noisy, so both ends are 50-iteration means.
    let mean = |rows: &[trainer::LogRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
    let early = mean(&run.log[50..100]);
    let late = mean(&run.log[run.log.len() - 50..]);
    eprintln!("loss near iteration 50: {early:.3}, at the end: {late:.3}");
    assert!(late < 0.25 * early, "{late} vs {early}");

    let gaze: Vec<f64> = run.evals.iter().map(|e| e.metrics[0].1).collect();
    eprintln!("eval gaze error: {gaze:?}");
    assert_eq!(run.evals.len(), 7);
    assert!(gaze.last().unwrap() < gaze.first().unwrap());
}
