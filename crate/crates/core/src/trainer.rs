//! Training loop for the redirector.
//!
//! One iteration takes a batch of same-identity (source, target) pairs,
//! redirects each source latent to the target's conditions, renders, and
//! takes one Adam step on the weighted loss.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{condition_angular_error, Condition};
use crate::losses::{self, LossBreakdown, LossError, LossTerms, LossWeights, TermVars};
use crate::redirector::{Mode, RedirectTarget, Redirector, RedirectorConfig, RedirectorError};
use crate::rng::stream;
use crate::tensor::{adam_step, clip_global_norm, AdamState, Graph, Tensor, TensorError, Var};
use crate::world::{Estimator, Sample, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("pair mixes identities {from} and {to}")]
    MixedIdentity { from: u32, to: u32 },
    #[error("iteration {iteration}: {source}")]
    NonFinite { iteration: usize, source: TensorError },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Redirector(#[from] RedirectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where the conditions used for supervision come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    /// Ground-truth labels of the samples.
    Truth,
    /// Readings of the frozen estimator on the rendered images.
    Pseudo,
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "truth" => Ok(LabelSource::Truth),
            "pseudo" => Ok(LabelSource::Pseudo),
            _ => Err(format!("unknown label source {s:?} (expected truth or pseudo)")),
        }
    }
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Truth => "truth",
            LabelSource::Pseudo => "pseudo",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub label_source: LabelSource,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop early after this many iterations, if set.
    pub max_iterations: Option<usize>,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Run the evaluation hook every this many iterations (0: only at the
    /// start and the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Layerwise,
            label_source: LabelSource::Pseudo,
            batch_size: 2,
            epochs: 3,
            max_iterations: None,
            lr: 1e-4,
            decay: 0.8,
            decay_every: 3000,
            clip_norm: 10.0,
            weights: LossWeights::default(),
            seed: 7,
            eval_every: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 {
            return Err(TrainError::Config("decay_every must be positive".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(TrainError::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// `lr₀ · decay^⌊iteration / decay_every⌋`.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay.powi((iteration / cfg.decay_every.max(1)) as i32)
}

/// Frozen-network readings of every training image, computed once.
pub struct Prepared<'a> {
    pub samples: &'a [Sample],
    /// Estimator readings `(gaze pitch, gaze yaw, head pitch, head yaw)`.
    pub readings: Vec<[f32; 4]>,
    pub perceptual: Vec<Vec<f32>>,
    pub identity: Vec<Vec<f32>>,
}

impl<'a> Prepared<'a> {
    pub fn new(world: &WorldSpec, est: &Estimator, samples: &'a [Sample]) -> Result<Self> {
        let mut readings = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
            for (g, h) in est.estimate_batch(&imgs)? {
                readings.push([g.pitch, g.yaw, h.pitch, h.yaw]);
            }
        }
        let perceptual = samples
            .iter()
            .map(|s| world.perceptual_features(&s.image))
            .collect::<std::result::Result<_, _>>()?;
        let identity = samples
            .iter()
            .map(|s| world.identity_features(&s.image))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            samples,
            readings,
            perceptual,
            identity,
        })
    }

    pub fn reading(&self, i: usize) -> [Condition; 2] {
        let r = self.readings[i];
        [Condition::new(r[0], r[1]), Condition::new(r[2], r[3])]
    }

    fn truth(&self, i: usize) -> [Condition; 2] {
        [self.samples[i].gaze, self.samples[i].head]
    }
}

fn rows(g: &mut Graph<f32>, parts: &[&[f32]]) -> Result<Var> {
    let width = parts[0].len();
    let data: Vec<f32> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(g.constant(Tensor::new(&[parts.len(), width], data)?))
}

fn batch_mean(g: &mut Graph<f32>, per_row: Var) -> Result<Var> {
    Ok(g.mean(per_row)?)
}

/// Batch-mean per-layer label errors `[gaze, head]` that `L_prob` compares
/// the layer weights against. Empty in flat mode.
pub type LayerErrors = [Vec<f64>; 2];

/// Builds the loss graph for a batch of `(source, target)` index pairs.
/// Returns the graph, the term handles, the total node and the layer errors
/// used by `L_prob`: `fixed` if given, else measured on this forward pass.
fn build_step(
    red: &Redirector,
    world: &WorldSpec,
    est: &Estimator,
    data: &Prepared,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    fixed: Option<&LayerErrors>,
) -> Result<(Graph<f32>, TermVars, Var, LayerErrors)> {
    for &(s, t) in pairs {
        let (a, b) = (data.samples[s].identity, data.samples[t].identity);
        if a != b {
            return Err(TrainError::MixedIdentity { from: a, to: b });
        }
    }
    if pairs.len() < 2 {
        return Err(LossError::BatchTooSmall(pairs.len()).into());
    }
    let mut g = Graph::<f32>::new();
    let p = red.bind(&mut g, true);
    let labels = |i: usize| match cfg.label_source {
        LabelSource::Truth => data.truth(i),
        LabelSource::Pseudo => data.reading(i),
    };

    let mut edited = Vec::with_capacity(pairs.len());
    let mut edits = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        let ct = labels(t);
        let f = rows(&mut g, &[data.samples[s].latent.data()])?;
        let targets = [Some(RedirectTarget::Absolute(ct[0])), Some(RedirectTarget::Absolute(ct[1]))];
        let e = red.edit_var(&mut g, &p, f, &targets)?;
        edited.push(e.latent);
        edits.push(e);
    }
    let latents = g.concat(&edited, 0)?;
    let images = world.render_var(&mut g, latents)?;

    let target_imgs: Vec<&[f32]> = pairs.iter().map(|&(_, t)| data.samples[t].image.as_slice()).collect();
    let target_imgs = rows(&mut g, &target_imgs)?;
    let rec = losses::rec_var(&mut g, images, target_imgs)?;
    let rec = batch_mean(&mut g, rec)?;

    let perc = if cfg.mode == Mode::Layerwise {
        let feats: Vec<&[f32]> = pairs.iter().map(|&(_, t)| data.perceptual[t].as_slice()).collect();
        let feats = rows(&mut g, &feats)?;
        let v = losses::perc_var(&mut g, world, images, feats)?;
        batch_mean(&mut g, v)?
    } else {
        g.scalar(0.0)
    };

    let readings: Vec<&[f32]> = pairs.iter().map(|&(_, t)| data.readings[t].as_slice()).collect();
    let readings = rows(&mut g, &readings)?;
    let att = losses::att_var(&mut g, est, images, readings)?;
    let att = batch_mean(&mut g, att)?;

    let ident: Vec<&[f32]> = pairs.iter().map(|&(s, _)| data.identity[s].as_slice()).collect();
    let ident = rows(&mut g, &ident)?;
    let id = losses::id_var(&mut g, world, images, ident)?;
    let id = batch_mean(&mut g, id)?;

    let units = red.units;
    let mut lab = g.scalar(0.0);
    for (b, &(s, _)) in pairs.iter().enumerate() {
        let c_ref = labels(s);
        for u in &edits[b].units {
            let l = losses::label_var(&mut g, u.c_hat, c_ref)?;
            lab = g.add(lab, l)?;
        }
    }
    let lab = g.scale(lab, 1.0 / (units * pairs.len()) as f64)?;

    let mut emb = g.scalar(0.0);
    for k in 0..units {
        let zn: Vec<[Var; 2]> = edits.iter().map(|e| e.units[k].z_norm).collect();
        let e = losses::embed_var(&mut g, &zn)?;
        emb = g.add(emb, e)?;
    }
    let emb = g.scale(emb, 1.0 / units as f64)?;

    let mut used: LayerErrors = [Vec::new(), Vec::new()];
    let prob = if cfg.mode == Mode::Layerwise {
        let mut prob = g.scalar(0.0);
        for attr in 0..2 {
            // Per-layer label errors against the estimator's reading of the
            // source, averaged over the batch; constants for this term.
            let measured = || -> Vec<f64> {
                (0..units)
                    .map(|k| {
                        pairs
                            .iter()
                            .enumerate()
                            .map(|(b, &(s, _))| {
                                let c = Condition::from_slice(g.value(edits[b].units[k].c_hat[attr]).data());
                                condition_angular_error(c, data.reading(s)[attr]) as f64
                            })
                            .sum::<f64>()
                            / pairs.len() as f64
                    })
                    .collect()
            };
            let errors = match fixed {
                Some(e) if e[attr].len() == units => e[attr].clone(),
                Some(e) => {
                    return Err(TrainError::Config(format!(
                        "{} fixed layer errors for {units} layers",
                        e[attr].len()
                    )))
                }
                None => measured(),
            };
            let w = p.weights(attr).expect("layerwise weights");
            let term = losses::layerweights_var(&mut g, w, &errors)?;
            prob = g.add(prob, term)?;
            used[attr] = errors;
        }
        prob
    } else {
        g.scalar(0.0)
    };

    let terms = TermVars {
        rec,
        perc,
        att,
        id,
        lab,
        emb,
        prob,
    };
    let total = losses::total_var(&mut g, &terms, &cfg.weights, cfg.mode)?;
    Ok((g, terms, total, used))
}

/// Loss of a batch without updating anything.
pub fn evaluate_batch(
    red: &Redirector,
    world: &WorldSpec,
    est: &Estimator,
    data: &Prepared,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (g, terms, _, _) = build_step(red, world, est, data, pairs, cfg, None)?;
    Ok(losses::loss_total(terms.values(&g), &cfg.weights, cfg.mode)?)
}

/// The layer errors `L_prob` uses for this batch and these parameters.
pub fn batch_layer_errors(
    red: &Redirector,
    world: &WorldSpec,
    est: &Estimator,
    data: &Prepared,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<LayerErrors> {
    Ok(build_step(red, world, est, data, pairs, cfg, None)?.3)
}

/// Loss of a batch with the `L_prob` layer errors held at `errors`. A step
/// treats those errors as constants, so this is the objective it descends.
pub fn evaluate_batch_at(
    red: &Redirector,
    world: &WorldSpec,
    est: &Estimator,
    data: &Prepared,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    errors: &LayerErrors,
) -> Result<LossBreakdown> {
    let (g, terms, _, _) = build_step(red, world, est, data, pairs, cfg, Some(errors))?;
    Ok(losses::loss_total(terms.values(&g), &cfg.weights, cfg.mode)?)
}

/// One Adam step on a batch. Returns the losses before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    red: &mut Redirector,
    state: &mut AdamState,
    world: &WorldSpec,
    est: &Estimator,
    data: &Prepared,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    let nonfinite = |e: TensorError| TrainError::NonFinite { iteration, source: e };
    let (g, terms, total, _) = build_step(red, world, est, data, pairs, cfg, None).map_err(|e| match e {
        TrainError::Tensor(t @ TensorError::NonFinite { .. }) => nonfinite(t),
        other => other,
    })?;
    let values: LossTerms = terms.values(&g);
    let breakdown = losses::loss_total(values, &cfg.weights, cfg.mode)?;
    if !breakdown.total.is_finite() {
        return Err(nonfinite(TensorError::NonFinite {
            op: "total",
            node: total.index(),
        }));
    }
    let mut grads: BTreeMap<String, Tensor> = g.backward(total).map_err(nonfinite)?.params();
    clip_global_norm(&mut grads, cfg.clip_norm);
    adam_step(&mut red.params, &grads, state, lr_schedule(iteration, cfg))?;
    Ok(breakdown)
}

/// Per-identity sample indices and a same-identity partner sampler.
pub struct PairSampler {
    by_identity: BTreeMap<u32, Vec<usize>>,
    identity: Vec<u32>,
}

impl PairSampler {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_identity.entry(s.identity).or_default().push(i);
        }
        if let Some((id, _)) = by_identity.iter().find(|(_, v)| v.len() < 2) {
            return Err(TrainError::Config(format!("identity {id} has a single sample; pairs need two")));
        }
        Ok(Self {
            by_identity,
            identity: samples.iter().map(|s| s.identity).collect(),
        })
    }

    /// A uniformly chosen other sample of the same identity.
    pub fn partner<R: Rng>(&self, i: usize, rng: &mut R) -> usize {
        let group = &self.by_identity[&self.identity[i]];
        loop {
            let j = group[rng.random_range(0..group.len())];
            if j != i {
                return j;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub iteration: usize,
    pub metrics: Vec<(String, f64)>,
}

pub struct TrainRun {
    pub redirector: Redirector,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalPoint>,
}

/// Trains a fresh redirector. `evaluate` runs before the first step, every
/// `eval_every` iterations and after the last step.
pub fn train<F>(cfg: &TrainConfig, world: &WorldSpec, est: &Estimator, samples: &[Sample], mut evaluate: F) -> Result<TrainRun>
where
    F: FnMut(&Redirector) -> Result<Vec<(String, f64)>>,
{
    cfg.validate()?;
    let mut red = Redirector::new(&RedirectorConfig::new(cfg.mode, world.layers(), world.dim(), cfg.seed));
    let data = Prepared::new(world, est, samples)?;
    let sampler = PairSampler::new(samples)?;
    let mut state = AdamState::default();
    let mut order_rng = stream(cfg.seed, "trainer/order");
    let mut pair_rng = stream(cfg.seed, "trainer/pairs");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = samples.len() / cfg.batch_size;
    let total = cfg.max_iterations.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut log = Vec::with_capacity(total);
    let mut evals = vec![EvalPoint {
        iteration: 0,
        metrics: evaluate(&red)?,
    }];
    let mut it = 0;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            if it >= total {
                break 'outer;
            }
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|&s| (s, sampler.partner(s, &mut pair_rng))).collect();
            let loss = train_step(&mut red, &mut state, world, est, &data, &pairs, cfg, it)?;
            log.push(LogRow {
                iteration: it,
                lr: lr_schedule(it, cfg),
                loss,
            });
            it += 1;
            if cfg.eval_every > 0 && it % cfg.eval_every == 0 && it < total {
                evals.push(EvalPoint {
                    iteration: it,
                    metrics: evaluate(&red)?,
                });
            }
        }
    }
    evals.push(EvalPoint {
        iteration: it,
        metrics: evaluate(&red)?,
    });
    Ok(TrainRun {
        redirector: red,
        log,
        evals,
    })
}

pub const LOG_COLUMNS: [&str; 10] = ["iteration", "lr", "rec", "perc", "att", "id", "lab", "emb", "prob", "total"];

pub fn write_log_csv<W: Write>(out: W, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_COLUMNS)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string(), r.lr.to_string()];
        rec.extend(r.loss.fields().iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Eval rows as `iteration,<metric...>` with the metric names of the first
/// point as header.
pub fn write_eval_csv<W: Write>(out: W, points: &[EvalPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = points.first() {
        let mut header = vec!["iteration".to_string()];
        header.extend(first.metrics.iter().map(|(k, _)| k.clone()));
        w.write_record(&header)?;
    }
    for p in points {
        let mut rec = vec![p.iteration.to_string()];
        rec.extend(p.metrics.iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_3000() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(2999, &cfg), 1e-4);
        assert!((lr_schedule(3000, &cfg) - 8e-5).abs() < 1e-18);
        assert!((lr_schedule(6500, &cfg) - 6.4e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig {
            decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn log_has_the_documented_header() {
        let mut buf = Vec::new();
        let row = LogRow {
            iteration: 3,
            lr: 1e-4,
            loss: LossBreakdown::default(),
        };
        write_log_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,lr,rec,perc,att,id,lab,emb,prob,total");
        assert_eq!(lines.next().unwrap().split(',').count(), 10);
    }
}
