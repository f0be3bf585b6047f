//! Acceptance criteria, run one after another so that the runtime limits
//! are measured without other tests competing for the CPU.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use redirtrans::cli::{self, Config};
use redirtrans::eval::{self, AugmentConfig};
use redirtrans::geometry::{rotation_from_condition, Condition, Rotation3};
use redirtrans::losses;
use redirtrans::redirector::{normalize_embedding, redirect_embedding, Mode, RedirectTarget, Redirector, RedirectorConfig};
use redirtrans::rng::derive_seed;
use redirtrans::tensor::{read_checkpoint, write_checkpoint};
use redirtrans::trainer::{self, TrainConfig};
use redirtrans::world::{self, estimator_error, pretrain_estimator, Estimator, EstimatorArch, Latent, Sample, WorldSpec};

const DESK: &str = include_str!("../../../configs/desk.cfg");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(limit: Duration, t: Duration) -> bool {
    t < limit
}

fn secs(t: Duration) -> String {
    format!("{:.1}s", t.as_secs_f64())
}

struct Desk {
    cfg: Config,
    world: WorldSpec,
    train: Vec<Sample>,
    test: Vec<Sample>,
    heldout: Vec<Sample>,
    estimator: Option<Estimator>,
    eval_estimator: Option<Estimator>,
    redirector: Option<Redirector>,
    train_time: Duration,
}

impl Desk {
    fn new() -> Self {
        let cfg = Config::resolve(Some(DESK), None, &[]).expect("shipped config");
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
        let heldout = world.sample_dataset(500, per, range, derive_seed(data_seed, "heldout")).unwrap();
        Self {
            cfg,
            world,
            train,
            test,
            heldout,
            estimator: None,
            eval_estimator: None,
            redirector: None,
            train_time: Duration::ZERO,
        }
    }
}

fn random_latent(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Latent {
    Latent::new(k, d, (0..k * d).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap()
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for i in 0..100u64 {
        let mode = if i % 2 == 0 { Mode::Layerwise } else { Mode::Flat };
        let mut red = Redirector::new(&RedirectorConfig::new(mode, 6, 64, i));
        red.randomize(derive_seed(i, "acceptance/noop"));
        let f = random_latent(&mut rng, 6, 64);
        let dev = match mode {
            Mode::Flat => {
                let c = red.pseudo_conditions(&f).unwrap()[0];
                let out = red
                    .edit_latent(&f, &[Some(RedirectTarget::Absolute(c[0])), Some(RedirectTarget::Absolute(c[1]))])
                    .unwrap();
                out.max_abs_diff(&f)
            }
            Mode::Layerwise => {
                let mut d = 0.0f32;
                for k in 0..6 {
                    let c = red.project(k, f.layer(k)).unwrap().c_hat;
                    let (out, _, _) = red
                        .edit_layer(
                            k,
                            f.layer(k),
                            &[Some(RedirectTarget::Absolute(c[0])), Some(RedirectTarget::Absolute(c[1]))],
                        )
                        .unwrap();
                    d = out.iter().zip(f.layer(k)).map(|(a, b)| (a - b).abs()).fold(d, f32::max);
                }
                d
            }
        };
        worst = worst.max(dev);
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-5 && within(Duration::from_secs(5), el),
        format!("max |Δf| {worst:.2e} over 100 cases, {}", secs(el)),
    )
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let half_pi = std::f32::consts::FRAC_PI_2;
    let (mut orth, mut det, mut consistency) = (0.0f32, 0.0f32, 0.0f32);
    for _ in 0..1000 {
        let c = Condition::new(rng.random_range(-half_pi..half_pi), rng.random_range(-half_pi..half_pi));
        let r = rotation_from_condition(c);
        orth = orth.max(r.orthonormality_error());
        det = det.max((r.det() - 1.0).abs());
        let mut z = [[0.0f32; 16]; 3];
        for row in z.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let z = redirtrans::geometry::Embedding(z);
        let c2 = Condition::new(rng.random_range(-half_pi..half_pi), rng.random_range(-half_pi..half_pi));
        let direct = redirect_embedding(&z, c2);
        let via = redirect_embedding(&normalize_embedding(&redirect_embedding(&z, c), c), c2);
        let d = direct
            .flatten()
            .iter()
            .zip(via.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        consistency = consistency.max(d);
    }
    let zero_exact = rotation_from_condition(Condition::ZERO) == Rotation3::IDENTITY;
    let el = t.elapsed();
    verdict(
        orth <= 1e-6 && det <= 1e-6 && consistency <= 1e-5 && zero_exact && within(Duration::from_secs(5), el),
        format!(
            "‖RᵀR−I‖ {orth:.1e}, |det−1| {det:.1e}, re-redirection {consistency:.1e}, R(0)=I {zero_exact}, {}",
            secs(el)
        ),
    )
}

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let results = losses::gradcheck_suite(100, 3).unwrap();
    let el = t.elapsed();
    let (name, worst) = results
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        worst < 1e-4 && within(Duration::from_secs(60), el),
        format!("{} checks, worst {name} {worst:.2e}, {}", results.len(), secs(el)),
    )
}

fn criterion_4(d: &mut Desk) -> Verdict {
    let t = Instant::now();
    let pre = d.cfg.pretrain_config().unwrap();
    let est = pretrain_estimator(&d.train, EstimatorArch::Train, d.cfg.seed("estimator.seed").unwrap(), &pre).unwrap();
    let el = t.elapsed();
    let (g, h) = estimator_error(&est, &d.heldout).unwrap();
    d.estimator = Some(est);

    let data_seed = d.cfg.seed("data.seed").unwrap();
    let eval_data = d
        .world
        .sample_dataset(
            d.cfg.get("eval_estimator.identities").unwrap(),
            d.cfg.get("data.per_identity").unwrap(),
            d.cfg.get("data.range").unwrap(),
            derive_seed(data_seed, "eval_estimator"),
        )
        .unwrap();
    d.eval_estimator = Some(pretrain_estimator(&eval_data, EstimatorArch::Eval, d.cfg.seed("eval_estimator.seed").unwrap(), &pre).unwrap());

    verdict(
        g < 0.05 && h < 0.05 && within(Duration::from_secs(300), el),
        format!(
            "held-out error gaze {g:.4} head {h:.4} rad on {} samples, {}",
            d.heldout.len(),
            secs(el)
        ),
    )
}

fn criterion_5(d: &mut Desk) -> Verdict {
    let (Some(est), Some(eval_est)) = (d.estimator.as_ref(), d.eval_estimator.as_ref()) else {
        return verdict(false, "estimators unavailable".into());
    };
    let cfg: TrainConfig = d.cfg.train_config().unwrap();
    let untrained = Redirector::new(&RedirectorConfig::new(cfg.mode, d.world.layers(), d.world.dim(), cfg.seed));
    let base = eval::eval_redirection(&untrained, &d.world, &d.test, eval_est).unwrap();
    let t = Instant::now();
    let run = trainer::train(&cfg, &d.world, est, &d.train, |_| Ok(Vec::new())).unwrap();
    let report = eval::eval_redirection(&run.redirector, &d.world, &d.test, eval_est).unwrap();
    d.train_time = t.elapsed();
    let (g, h, g0) = (
        report.gaze_redir_err.unwrap(),
        report.head_redir_err.unwrap(),
        base.gaze_redir_err.unwrap(),
    );
    d.redirector = Some(run.redirector);
    verdict(
        g < 0.15 && g < g0 / 3.0 && h < 0.15 && within(Duration::from_secs(600), d.train_time),
        format!(
            "gaze {g:.4} rad (untrained {g0:.4}), head {h:.4} rad, {} iterations, {}",
            run.log.len(),
            secs(d.train_time)
        ),
    )
}

fn criterion_6(d: &Desk) -> Verdict {
    let (Some(red), Some(eval_est)) = (d.redirector.as_ref(), d.eval_estimator.as_ref()) else {
        return verdict(false, "no trained model".into());
    };
    let r = eval::eval_disentanglement(red, &d.world, &d.test, eval_est, d.cfg.seed("eval.seed").unwrap()).unwrap();
    let (g, h) = (r.gaze_induce_err.unwrap(), r.head_induce_err.unwrap());
    verdict(
        g < 0.08 && h < 0.08,
        format!("induced gaze {g:.4} head {h:.4} rad over {} samples", r.n),
    )
}

fn criterion_7(d: &Desk) -> Verdict {
    let Some(red) = d.redirector.as_ref() else {
        return verdict(false, "no trained model".into());
    };
    let f = eval::eval_layer_weights(red, &d.world).unwrap();
    verdict(
        f[0] >= 0.7 && f[1] >= 0.7,
        format!("planted share gaze {:.3} head {:.3}", f[0], f[1]),
    )
}

fn criterion_8(d: &Desk) -> Verdict {
    let cfg: AugmentConfig = d.cfg.augment_config().unwrap();
    let t = Instant::now();
    let rows = eval::run_augmentation_experiment(&d.world, &cfg, |_| {}).unwrap();
    let el = t.elapsed();
    let aug_ok = rows.iter().all(|r| r.aug_err <= r.raw_err);
    let mono = rows.windows(2).all(|w| w[1].raw_err < w[0].raw_err);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("Q{} raw {:.4} aug {:.4}", r.percent, r.raw_err, r.aug_err))
        .collect();
    verdict(
        aug_ok && mono && within(Duration::from_secs(900), el),
        format!("{}, {}", table.join("; "), secs(el)),
    )
}

fn criterion_9(d: &Desk) -> Verdict {
    let (Some(red), Some(eval_est)) = (d.redirector.as_ref(), d.eval_estimator.as_ref()) else {
        return verdict(false, "no trained model".into());
    };
    let trials: usize = d.cfg.get("eval.correction_trials").unwrap();
    let t = Instant::now();
    let res = eval::perturb_and_correct(red, &d.world, &d.test, eval_est, trials, d.cfg.seed("eval.seed").unwrap()).unwrap();
    let el = t.elapsed();
    let improved = res.iter().filter(|r| r.post_err < r.pre_err).count();
    verdict(
        trials == 200 && improved * 10 >= trials * 9 && within(Duration::from_secs(60), el),
        format!("improved {improved}/{trials}, {}", secs(el)),
    )
}

fn short_run(d: &Desk, est: &Estimator) -> (Vec<u8>, Vec<u8>) {
    let cfg = TrainConfig {
        max_iterations: Some(60),
        ..d.cfg.train_config().unwrap()
    };
    let run = trainer::train(&cfg, &d.world, est, &d.train[..400], |_| Ok(Vec::new())).unwrap();
    let mut log = Vec::new();
    trainer::write_log_csv(&mut log, &run.log).unwrap();
    (write_checkpoint(&run.redirector.params).unwrap(), log)
}

fn criterion_10(d: &Desk) -> Verdict {
    let Some(est) = d.estimator.as_ref() else {
        return verdict(false, "no estimator".into());
    };
    let (ckpt_a, log_a) = short_run(d, est);
    let (ckpt_b, log_b) = short_run(d, est);
    let runs_equal = ckpt_a == ckpt_b && log_a == log_b;

    let dir = tempfile::tempdir().unwrap();
    let latent = &d.test[0].latent;
    let lpath = dir.path().join("f.rdtl");
    cli::write_latent(&lpath, latent).unwrap();
    let latent_ok = cli::read_latent(&lpath).unwrap() == *latent
        && cli::encode_latent(&cli::read_latent(&lpath).unwrap()) == std::fs::read(&lpath).unwrap();

    let ckpt_ok = write_checkpoint(&read_checkpoint(&ckpt_a).unwrap()).unwrap() == ckpt_a;
    let epath = dir.path().join("e.rdtc");
    est.save(&epath).unwrap();
    let est_ok = Estimator::load(&epath).unwrap() == *est;

    let dpath = dir.path().join("d.rdtd");
    world::save_dataset(&dpath, &d.test[..40]).unwrap();
    let back = world::load_dataset(&dpath, &d.world).unwrap();
    let data_ok = back == d.test[..40] && world::write_dataset(&back).unwrap() == std::fs::read(&dpath).unwrap();

    verdict(
        runs_equal && latent_ok && ckpt_ok && est_ok && data_ok,
        format!("same-seed runs identical {runs_equal}, latent {latent_ok}, checkpoint {ckpt_ok}, estimator {est_ok}, dataset {data_ok}"),
    )
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |i: usize, v: Verdict| {
        println!("criterion {i:>2}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((i, v));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    let mut desk = Desk::new();
    report(4, criterion_4(&mut desk));
    report(5, criterion_5(&mut desk));
    report(6, criterion_6(&desk));
    report(7, criterion_7(&desk));
    report(9, criterion_9(&desk));
    report(10, criterion_10(&desk));
    report(8, criterion_8(&desk));
    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(i, _)| *i).collect();
    println!("acceptance finished in {}", secs(total.elapsed()));
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", results.len());
    } else {
        println!("acceptance: FAIL {failed:?}");
        std::process::exit(1);
    }
}
