//! Redirection, disentanglement and layer-weight metrics, the correction
//! use-case and the augmentation experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{condition_angular_error, Condition};
use crate::losses::LossWeights;
use crate::redirector::{Mode, RedirectTarget, Redirector, RedirectorError, Targets};
use crate::rng::{derive_seed, stream};
use crate::trainer::{self, LabelSource, TrainConfig, TrainError};
use crate::world::{estimator_error, pretrain_estimator, Estimator, EstimatorArch, Latent, PretrainConfig, Sample, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs at least one sample pair")]
    EmptyTestset,
    #[error("layer weights need a layerwise redirector")]
    FlatMode,
    #[error("invalid experiment setting: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Redirector(#[from] RedirectorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean errors in radians. Fields a run did not measure stay `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub gaze_redir_err: Option<f64>,
    pub head_redir_err: Option<f64>,
    pub gaze_induce_err: Option<f64>,
    pub head_induce_err: Option<f64>,
    pub perceptual_dist: Option<f64>,
    pub n: usize,
    pub seed: Option<u64>,
    /// Per-sample values, keyed by metric name, for audit.
    pub per_sample: BTreeMap<&'static str, Vec<f64>>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl EvalReport {
    /// `(metric, radians)` for every measured angular metric.
    pub fn angles(&self) -> Vec<(&'static str, f64)> {
        [
            ("gaze_redir_err", self.gaze_redir_err),
            ("head_redir_err", self.head_redir_err),
            ("gaze_induce_err", self.gaze_induce_err),
            ("head_induce_err", self.head_induce_err),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Merges the measured fields of `other` into `self`.
    pub fn merge(&mut self, other: EvalReport) {
        self.gaze_redir_err = other.gaze_redir_err.or(self.gaze_redir_err);
        self.head_redir_err = other.head_redir_err.or(self.head_redir_err);
        self.gaze_induce_err = other.gaze_induce_err.or(self.gaze_induce_err);
        self.head_induce_err = other.head_induce_err.or(self.head_induce_err);
        self.perceptual_dist = other.perceptual_dist.or(self.perceptual_dist);
        self.n = self.n.max(other.n);
        self.seed = other.seed.or(self.seed);
        self.per_sample.extend(other.per_sample);
    }

    /// CSV with one row per metric: `metric,radians,degrees`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,radians,degrees\n");
        for (k, v) in self.angles() {
            let _ = writeln!(out, "{k},{v},{}", v.to_degrees());
        }
        if let Some(p) = self.perceptual_dist {
            let _ = writeln!(out, "perceptual_dist,{p},");
        }
        let _ = writeln!(out, "n,{},", self.n);
        if let Some(s) = self.seed {
            let _ = writeln!(out, "seed,{s},");
        }
        out
    }

    pub fn to_text(&self, degrees: bool) -> String {
        let mut out = String::new();
        for (k, v) in self.angles() {
            if degrees {
                let _ = writeln!(out, "{k:<16} {:>9.4} deg  ({v:.5} rad)", v.to_degrees());
            } else {
                let _ = writeln!(out, "{k:<16} {v:>9.5} rad  ({:.4} deg)", v.to_degrees());
            }
        }
        if let Some(p) = self.perceptual_dist {
            let _ = writeln!(out, "{:<16} {p:>9.5}", "perceptual_dist");
        }
        let _ = writeln!(out, "{:<16} {:>9}", "n", self.n);
        if let Some(s) = self.seed {
            let _ = writeln!(out, "{:<16} {s:>9}", "seed");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in self.angles() {
            m.insert(k.into(), serde_json::json!({ "radians": v, "degrees": v.to_degrees() }));
        }
        if let Some(p) = self.perceptual_dist {
            m.insert("perceptual_dist".into(), p.into());
        }
        m.insert("n".into(), self.n.into());
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.into());
        }
        serde_json::Value::Object(m)
    }
}

/// Same-identity `(source, target)` pairs: each sample is paired with the
/// next sample of its identity, cyclically.
pub fn test_pairs(samples: &[Sample]) -> Vec<(usize, usize)> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.identity).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for g in groups.values().filter(|g| g.len() > 1) {
        for (j, &s) in g.iter().enumerate() {
            pairs.push((s, g[(j + 1) % g.len()]));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn readings(est: &Estimator, images: &[&[f32]]) -> Result<Vec<[Condition; 2]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        out.extend(est.estimate_batch(chunk)?.into_iter().map(|(g, h)| [g, h]));
    }
    Ok(out)
}

fn absolute(c: [Condition; 2]) -> Targets {
    [Some(RedirectTarget::Absolute(c[0])), Some(RedirectTarget::Absolute(c[1]))]
}

/// Redirects each source to the conditions `eval_est` reads off its target
/// image and scores the render with the same estimator.
pub fn eval_redirection(red: &Redirector, world: &WorldSpec, testset: &[Sample], eval_est: &Estimator) -> Result<EvalReport> {
    let pairs = test_pairs(testset);
    if pairs.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let target_imgs: Vec<&[f32]> = pairs.iter().map(|&(_, t)| testset[t].image.as_slice()).collect();
    let targets = readings(eval_est, &target_imgs)?;
    let mut rendered = Vec::with_capacity(pairs.len());
    for (&(s, _), ct) in pairs.iter().zip(&targets) {
        let edited = red.edit_latent(&testset[s].latent, &absolute(*ct))?;
        rendered.push(world.render(&edited)?);
    }
    let refs: Vec<&[f32]> = rendered.iter().map(Vec::as_slice).collect();
    let got = readings(eval_est, &refs)?;
    let mut gaze = Vec::with_capacity(pairs.len());
    let mut head = Vec::with_capacity(pairs.len());
    let mut perc = Vec::with_capacity(pairs.len());
    for (i, &(_, t)) in pairs.iter().enumerate() {
        gaze.push(condition_angular_error(got[i][0], targets[i][0]) as f64);
        head.push(condition_angular_error(got[i][1], targets[i][1]) as f64);
        perc.push(world.perceptual_distance(&rendered[i], &testset[t].image)? as f64);
    }
    Ok(EvalReport {
        gaze_redir_err: Some(mean(&gaze)),
        head_redir_err: Some(mean(&head)),
        perceptual_dist: Some(mean(&perc)),
        n: pairs.len(),
        per_sample: BTreeMap::from([("gaze_redir_err", gaze), ("head_redir_err", head), ("perceptual_dist", perc)]),
        ..EvalReport::default()
    })
}

/// Largest redirection angle of the disentanglement protocol.
pub const INDUCE_RANGE: f32 = 0.1 * std::f32::consts::PI;

/// Perturbation of one attribute for sample `i`: pitch and yaw drawn
/// independently from `U(-0.1π, 0.1π)`.
pub fn induce_offset(seed: u64, i: usize, attr: usize) -> Condition {
    let mut rng = stream(derive_seed(seed, &format!("induce/{i}")), if attr == 0 { "gaze" } else { "head" });
    Condition::new(
        rng.random_range(-INDUCE_RANGE..INDUCE_RANGE),
        rng.random_range(-INDUCE_RANGE..INDUCE_RANGE),
    )
}

/// Redirects one attribute by a random offset and measures how far the
/// estimate of the other attribute moves. `gaze_induce_err` is the gaze
/// drift while the head is redirected, and vice versa.
pub fn eval_disentanglement(
    red: &Redirector,
    world: &WorldSpec,
    testset: &[Sample],
    eval_est: &Estimator,
    seed: u64,
) -> Result<EvalReport> {
    eval_disentanglement_with(red, world, testset, eval_est, |i, attr| induce_offset(seed, i, attr)).map(|mut r| {
        r.seed = Some(seed);
        r
    })
}

/// [`eval_disentanglement`] with caller-chosen offsets.
pub fn eval_disentanglement_with<F>(
    red: &Redirector,
    world: &WorldSpec,
    testset: &[Sample],
    eval_est: &Estimator,
    offset: F,
) -> Result<EvalReport>
where
    F: Fn(usize, usize) -> Condition,
{
    if testset.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let base_imgs: Vec<&[f32]> = testset.iter().map(|s| s.image.as_slice()).collect();
    let base = readings(eval_est, &base_imgs)?;
    let mut drift = [Vec::with_capacity(testset.len()), Vec::with_capacity(testset.len())];
    for moved in 0..2 {
        let other = 1 - moved;
        let mut rendered = Vec::with_capacity(testset.len());
        for (i, s) in testset.iter().enumerate() {
            let mut targets: Targets = [None, None];
            targets[moved] = Some(RedirectTarget::Relative(offset(i, moved)));
            rendered.push(world.render(&red.edit_latent(&s.latent, &targets)?)?);
        }
        let refs: Vec<&[f32]> = rendered.iter().map(Vec::as_slice).collect();
        for (b, a) in base.iter().zip(readings(eval_est, &refs)?) {
            drift[other].push(condition_angular_error(a[other], b[other]) as f64);
        }
    }
    let [gaze, head] = drift;
    Ok(EvalReport {
        gaze_induce_err: Some(mean(&gaze)),
        head_induce_err: Some(mean(&head)),
        n: testset.len(),
        per_sample: BTreeMap::from([("gaze_induce_err", gaze), ("head_induce_err", head)]),
        ..EvalReport::default()
    })
}

/// Share of each attribute's absolute layer-weight mass on its planted
/// layers.
pub fn eval_layer_weights(red: &Redirector, world: &WorldSpec) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for (attr, frac) in out.iter_mut().enumerate() {
        let w = red.layer_weights(attr).ok_or(EvalError::FlatMode)?;
        let total: f64 = w.iter().map(|x| x.abs() as f64).sum();
        let planted: f64 = world.planted(attr).iter().map(|&k| w[k].abs() as f64).sum();
        *frac = if total > 0.0 { planted / total } else { 0.0 };
    }
    Ok(out)
}

/// Redirects `latent` to reference conditions; `None` leaves an attribute
/// alone.
pub fn correct(red: &Redirector, latent: &Latent, reference: [Option<Condition>; 2]) -> Result<Latent> {
    let targets = reference.map(|c| c.map(RedirectTarget::Absolute));
    Ok(red.edit_latent(latent, &targets)?)
}

/// One perturb-and-correct trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionTrial {
    pub sample: usize,
    pub pre_err: f64,
    pub post_err: f64,
}

/// Moves the gaze planting of each sample to a random nearby condition,
/// then corrects gaze back to the sample's label. Errors are the evaluation
/// estimator's gaze reading against the label.
pub fn perturb_and_correct(
    red: &Redirector,
    world: &WorldSpec,
    testset: &[Sample],
    eval_est: &Estimator,
    trials: usize,
    seed: u64,
) -> Result<Vec<CorrectionTrial>> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let mut rng = stream(seed, "correction/samples");
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let i = rng.random_range(0..testset.len());
        let s = &testset[i];
        let d = induce_offset(derive_seed(seed, "correction/drift"), t, 0);
        let drifted = s.gaze.offset(d);
        let mut perturbed = s.latent.clone();
        for (j, &k) in world.planted(0).iter().enumerate() {
            let old = world.planted_offset(0, j, s.gaze);
            let new = world.planted_offset(0, j, drifted);
            for ((x, o), n) in perturbed.layer_mut(k).iter_mut().zip(old).zip(new) {
                *x += n - o;
            }
        }
        let fixed = correct(red, &perturbed, [Some(s.gaze), None])?;
        let (pre, _) = eval_est.estimate(&world.render(&perturbed)?)?;
        let (post, _) = eval_est.estimate(&world.render(&fixed)?)?;
        out.push(CorrectionTrial {
            sample: i,
            pre_err: condition_angular_error(pre, s.gaze) as f64,
            post_err: condition_angular_error(post, s.gaze) as f64,
        });
    }
    Ok(out)
}

/// Settings of the augmentation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub percents: Vec<u32>,
    /// Identities in the pool; the first Q% of its samples are labeled.
    pub identities: usize,
    pub per_identity: usize,
    pub test_identities: usize,
    pub range: f32,
    /// Redirector iterations per Q.
    pub redirector_iterations: usize,
    /// Labels of the labeled part of the pool while training the
    /// redirector. The unlabeled part always gets the retrained
    /// estimator's readings.
    pub label_source: LabelSource,
    pub estimator: PretrainConfig,
    pub seed: u64,
    /// Downstream estimators fitted per Q and arm; errors are averaged.
    pub downstream_seeds: usize,
    pub downstream_arch: EstimatorArch,
    /// Optimizer steps of every downstream fit, so that raw and augmented
    /// sets of any size get the same training budget.
    pub downstream_steps: usize,
    /// Normalize redirected labeled samples by their ground-truth
    /// conditions rather than the projector's estimate.
    pub known_source: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            percents: vec![25, 50, 75],
            identities: 40,
            per_identity: 4,
            test_identities: 250,
            range: 0.4,
            redirector_iterations: 3000,
            label_source: LabelSource::Pseudo,
            estimator: PretrainConfig::default(),
            seed: 11,
            downstream_seeds: 10,
            downstream_arch: EstimatorArch::Train,
            downstream_steps: 1500,
            known_source: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRow {
    pub percent: u32,
    pub n_raw: usize,
    pub n_aug: usize,
    pub raw_err: f64,
    pub aug_err: f64,
}

/// For each Q: retrain the estimator on the labeled first Q% of the pool,
/// train a redirector on the whole pool with ground truth only where
/// labeled, redirect every labeled sample to freshly drawn conditions, then
/// fit a downstream gaze estimator on the real labeled samples ("raw") and
/// on those plus the redirected ones ("aug"). Errors are held-out gaze
/// errors.
pub fn run_augmentation_experiment(world: &WorldSpec, cfg: &AugmentConfig, mut progress: impl FnMut(&str)) -> Result<Vec<AugmentRow>> {
    if cfg.identities == 0 || cfg.per_identity < 2 || cfg.test_identities == 0 || cfg.downstream_seeds == 0 {
        return Err(EvalError::Config("need identities, two samples per identity and a test set".into()));
    }
    for &q in &cfg.percents {
        if q == 0 || q > 100 {
            return Err(EvalError::Config(format!("percent {q} outside (0, 100]")));
        }
        if ![25, 50, 75].contains(&q) {
            progress(&format!("warning: percent {q} is outside the standard set 25/50/75"));
        }
    }
    let pool = world.sample_dataset(cfg.identities, cfg.per_identity, cfg.range, derive_seed(cfg.seed, "augment/pool"))?;
    let test = world.sample_dataset(
        cfg.test_identities,
        cfg.per_identity,
        cfg.range,
        derive_seed(cfg.seed, "augment/test"),
    )?;
    let mut rows = Vec::with_capacity(cfg.percents.len());
    for &q in &cfg.percents {
        let n = pool.len() * q as usize / 100;
        let n = n - n % cfg.per_identity;
        if n < 2 * cfg.per_identity {
            return Err(EvalError::Config(format!("{q}% of the pool is too small to train on")));
        }
        let labeled = &pool[..n];
        let qseed = derive_seed(cfg.seed, &format!("augment/q{q}"));
        let est = pretrain_estimator(labeled, EstimatorArch::Train, derive_seed(qseed, "estimator"), &cfg.estimator)?;
        let readings = est.estimate_batch(&pool.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>())?;
        let relabeled: Vec<Sample> = pool
            .iter()
            .zip(readings)
            .enumerate()
            .map(|(i, (s, (gaze, head)))| {
                if i < n && cfg.label_source == LabelSource::Truth {
                    s.clone()
                } else {
                    Sample { gaze, head, ..s.clone() }
                }
            })
            .collect();
        let per_epoch = pool.len() / 2;
        let tcfg = TrainConfig {
            mode: Mode::Layerwise,
            label_source: LabelSource::Truth,
            epochs: cfg.redirector_iterations.div_ceil(per_epoch),
            max_iterations: Some(cfg.redirector_iterations),
            weights: LossWeights::default(),
            seed: derive_seed(qseed, "redirector"),
            eval_every: 0,
            ..TrainConfig::default()
        };
        let red = trainer::train(&tcfg, world, &est, &relabeled, |_| Ok(Vec::new()))?.redirector;
        let mut rng = stream(qseed, "augment/conditions");
        let mut augmented = labeled.to_vec();
        for s in labeled {
            let gaze = Condition::new(rng.random_range(-cfg.range..=cfg.range), rng.random_range(-cfg.range..=cfg.range));
            let head = Condition::new(rng.random_range(-cfg.range..=cfg.range), rng.random_range(-cfg.range..=cfg.range));
            let latent = if cfg.known_source {
                red.edit_latent_from(&s.latent, [s.gaze, s.head], &absolute([gaze, head]))?
            } else {
                red.edit_latent(&s.latent, &absolute([gaze, head]))?
            };
            let image = world.render(&latent)?;
            augmented.push(Sample {
                identity: s.identity,
                latent,
                gaze,
                head,
                image,
            });
        }
        let fixed_steps = |n: usize| PretrainConfig {
            epochs: (cfg.downstream_steps * cfg.estimator.batch_size).div_ceil(n),
            ..cfg.estimator.clone()
        };
        let (mut raw_err, mut aug_err) = (0.0, 0.0);
        for r in 0..cfg.downstream_seeds {
            let dseed = derive_seed(qseed, &format!("downstream/{r}"));
            let raw = pretrain_estimator(labeled, cfg.downstream_arch, dseed, &fixed_steps(labeled.len()))?;
            let aug = pretrain_estimator(&augmented, cfg.downstream_arch, dseed, &fixed_steps(augmented.len()))?;
            raw_err += estimator_error(&raw, &test)?.0 / cfg.downstream_seeds as f64;
            aug_err += estimator_error(&aug, &test)?.0 / cfg.downstream_seeds as f64;
        }
        let row = AugmentRow {
            percent: q,
            n_raw: labeled.len(),
            n_aug: augmented.len(),
            raw_err,
            aug_err,
        };
        progress(&format!("Q={q}% raw={:.5} aug={:.5} rad", row.raw_err, row.aug_err));
        rows.push(row);
    }
    Ok(rows)
}

pub fn augment_csv(rows: &[AugmentRow]) -> String {
    let mut out = String::from("percent,n_raw,n_aug,raw_err_rad,aug_err_rad,raw_err_deg,aug_err_deg\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.percent,
            r.n_raw,
            r.n_aug,
            r.raw_err,
            r.aug_err,
            r.raw_err.to_degrees(),
            r.aug_err.to_degrees()
        );
    }
    out
}
