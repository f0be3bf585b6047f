//! Supervision terms and their weighted sum.
//!
//! The `*_var` functions build differentiable terms inside a [`Graph`];
//! targets enter as constants, so no gradient reaches them. The plain
//! functions evaluate the same graphs for single inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{self, Condition, Embedding};
use crate::redirector::{
    normalize_embedding_var, redirect_embedding_var, Mode, ProjectVars, RedirectTarget, Redirector, RedirectorConfig, VecGan,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::{self, gradcheck, gradcheck_op, GradcheckOp, Graph, Real, Tensor, TensorError, Var};
use crate::world::{Estimator, EstimatorArch, WorldConfig, WorldError, WorldSpec};

/// Floor applied to per-layer label errors before taking reciprocals.
pub const RECIPROCAL_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weight {name} is negative ({value})")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("embedding loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("{what}: length {lhs} vs {rhs}")]
    Shape { what: &'static str, lhs: usize, rhs: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub perc: f64,
    pub id: f64,
    pub att: f64,
    pub lab: f64,
    pub emb: f64,
    pub prob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 8.0,
            perc: 8.0,
            id: 5.0,
            att: 1.0,
            lab: 5.0,
            emb: 2.0,
            prob: 10.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        rec: 0.0,
        perc: 0.0,
        id: 0.0,
        att: 0.0,
        lab: 0.0,
        emb: 0.0,
        prob: 0.0,
    };

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("rec", self.rec),
            ("perc", self.perc),
            ("id", self.id),
            ("att", self.att),
            ("lab", self.lab),
            ("emb", self.emb),
            ("prob", self.prob),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.named() {
            if value.is_nan() || value < 0.0 {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    /// The perceptual and layer-weight terms only apply to the layerwise
    /// redirector.
    pub fn for_mode(&self, mode: Mode) -> LossWeights {
        match mode {
            Mode::Layerwise => *self,
            Mode::Flat => LossWeights {
                perc: 0.0,
                prob: 0.0,
                ..*self
            },
        }
    }
}

/// Unweighted term values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub rec: f64,
    pub perc: f64,
    pub att: f64,
    pub id: f64,
    pub lab: f64,
    pub emb: f64,
    pub prob: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub perc: f64,
    pub att: f64,
    pub id: f64,
    pub lab: f64,
    pub emb: f64,
    pub prob: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("rec", self.rec),
            ("perc", self.perc),
            ("att", self.att),
            ("id", self.id),
            ("lab", self.lab),
            ("emb", self.emb),
            ("prob", self.prob),
            ("total", self.total),
        ]
    }
}

/// Weighted combination. In flat mode the perceptual and layer-weight
/// terms are dropped and reported as 0.
pub fn loss_total(terms: LossTerms, weights: &LossWeights, mode: Mode) -> Result<LossBreakdown> {
    weights.validate()?;
    let w = weights.for_mode(mode);
    let (perc, prob) = match mode {
        Mode::Layerwise => (terms.perc, terms.prob),
        Mode::Flat => (0.0, 0.0),
    };
    let total =
        w.rec * terms.rec + w.perc * perc + w.id * terms.id + w.att * terms.att + w.lab * terms.lab + w.emb * terms.emb + w.prob * prob;
    Ok(LossBreakdown {
        rec: terms.rec,
        perc,
        att: terms.att,
        id: terms.id,
        lab: terms.lab,
        emb: terms.emb,
        prob,
        total,
    })
}

/// Scalar handles of every term inside one graph.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub rec: Var,
    pub perc: Var,
    pub att: Var,
    pub id: Var,
    pub lab: Var,
    pub emb: Var,
    pub prob: Var,
}

impl TermVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.value(x).item().f64();
        LossTerms {
            rec: v(self.rec),
            perc: v(self.perc),
            att: v(self.att),
            id: v(self.id),
            lab: v(self.lab),
            emb: v(self.emb),
            prob: v(self.prob),
        }
    }
}

/// Weighted sum node of the terms active in `mode`.
pub fn total_var<T: Real>(g: &mut Graph<T>, t: &TermVars, weights: &LossWeights, mode: Mode) -> Result<Var> {
    weights.validate()?;
    let w = weights.for_mode(mode);
    let mut total = g.scalar(0.0);
    for (x, lambda) in [
        (t.rec, w.rec),
        (t.perc, w.perc),
        (t.id, w.id),
        (t.att, w.att),
        (t.lab, w.lab),
        (t.emb, w.emb),
        (t.prob, w.prob),
    ] {
        if lambda != 0.0 {
            let s = g.scale(x, lambda)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// `‖Î − I‖` per row.
pub fn rec_var<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> tensor::Result<Var> {
    let d = g.sub(pred, target)?;
    g.norm(d)
}

/// `‖ψ(Î) − ψ(I)‖` per row, with `ψ(I)` given as constant rows.
pub fn perc_var<T: Real>(g: &mut Graph<T>, world: &WorldSpec, pred: Var, target_features: Var) -> tensor::Result<Var> {
    let f = world.perceptual_features_var(g, pred)?;
    let d = g.sub(f, target_features)?;
    g.norm(d)
}

/// Summed gaze and head angular error per row between the estimator's
/// reading of `pred` and constant `[B, 4]` target readings.
pub fn att_var<T: Real>(g: &mut Graph<T>, est: &Estimator, pred: Var, target_readings: Var) -> tensor::Result<Var> {
    let o = est.forward_var(g, pred, false)?;
    let mut total = None;
    for start in [0, 2] {
        let p = g.slice(o, 1, start, start + 2)?;
        let t = g.slice(target_readings, 1, start, start + 2)?;
        let e = geometry::condition_angular_error_var(g, p, t)?;
        total = Some(match total {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
    }
    Ok(total.expect("two attributes"))
}

/// `1 − cos(φ(Î), φ(I_s))` per row, with unit `φ(I_s)` given as constants.
pub fn id_var<T: Real>(g: &mut Graph<T>, world: &WorldSpec, pred: Var, source_features: Var) -> tensor::Result<Var> {
    let f = world.identity_features_var(g, pred)?;
    let p = g.mul(f, source_features)?;
    let cos = g.sum_last(p)?;
    let neg = g.neg(cos)?;
    let one = g.scalar(1.0);
    g.add(neg, one)
}

/// `Σᵢ angle(ĉⁱ, c_refⁱ)` for `[2]` condition nodes.
pub fn label_var<T: Real>(g: &mut Graph<T>, c_hat: [Var; 2], c_ref: [Condition; 2]) -> tensor::Result<Var> {
    let mut total = None;
    for i in 0..2 {
        let r = g.constant(c_ref[i].to_tensor());
        let e = geometry::condition_angular_error_var(g, c_hat[i], r)?;
        total = Some(match total {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
    }
    Ok(total.expect("two attributes"))
}

/// For each attribute, mean angle between the first sample's flattened
/// normalized embedding and every other sample's; summed over attributes.
pub fn embed_var<T: Real>(g: &mut Graph<T>, z_norm: &[[Var; 2]]) -> Result<Var> {
    let b = z_norm.len();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let mut total = g.scalar(0.0);
    for attr in 0..2 {
        let basis = g.reshape(z_norm[0][attr], &[48])?;
        let mut acc = g.scalar(0.0);
        for z in &z_norm[1..] {
            let v = g.reshape(z[attr], &[48])?;
            let a = geometry::angular_distance_var(g, basis, v)?;
            acc = g.add(acc, a)?;
        }
        let mean = g.scale(acc, 1.0 / (b - 1) as f64)?;
        total = g.add(total, mean)?;
    }
    Ok(total)
}

/// Reciprocals of per-layer errors, floored at [`RECIPROCAL_FLOOR`].
pub fn reciprocal_errors(errors: &[f64]) -> Vec<f64> {
    errors.iter().map(|&e| 1.0 / e.max(RECIPROCAL_FLOOR)).collect()
}

/// Angle between the `[K]` layer-weight node and the reciprocal errors.
pub fn layerweights_var<T: Real>(g: &mut Graph<T>, weights: Var, errors: &[f64]) -> Result<Var> {
    let k = g.value(weights).numel();
    if errors.len() != k {
        return Err(LossError::Shape {
            what: "layer weights vs per-layer errors",
            lhs: k,
            rhs: errors.len(),
        });
    }
    let recip = reciprocal_errors(errors);
    let r = g.constant(Tensor::new(&[k], recip.into_iter().map(T::of).collect())?);
    Ok(geometry::angular_distance_var(g, weights, r)?)
}

fn row<T: Real>(g: &mut Graph<T>, xs: &[f32]) -> tensor::Result<Var> {
    Ok(g.constant(Tensor::new(&[1, xs.len()], xs.iter().map(|&x| T::of(x as f64)).collect())?))
}

fn same_len(what: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LossError::Shape {
            what,
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    Ok(())
}

pub fn loss_rec(pred: &[f32], target: &[f32]) -> Result<f32> {
    same_len("images", pred, target)?;
    let mut g = Graph::<f32>::new();
    let (p, t) = (row(&mut g, pred)?, row(&mut g, target)?);
    let v = rec_var(&mut g, p, t)?;
    Ok(g.value(v).item())
}

pub fn loss_perc(world: &WorldSpec, pred: &[f32], target: &[f32]) -> Result<f32> {
    same_len("images", pred, target)?;
    let t = world.perceptual_features(target)?;
    let mut g = Graph::<f32>::new();
    let p = row(&mut g, pred)?;
    let tv = row(&mut g, &t)?;
    let v = perc_var(&mut g, world, p, tv)?;
    Ok(g.value(v).item())
}

pub fn loss_att(est: &Estimator, pred: &[f32], target: &[f32]) -> Result<f32> {
    same_len("images", pred, target)?;
    let (gz, hd) = est.estimate(target)?;
    let mut g = Graph::<f32>::new();
    let p = row(&mut g, pred)?;
    let t = row(&mut g, &[gz.pitch, gz.yaw, hd.pitch, hd.yaw])?;
    let v = att_var(&mut g, est, p, t)?;
    Ok(g.value(v).item())
}

pub fn loss_id(world: &WorldSpec, pred: &[f32], source: &[f32]) -> Result<f32> {
    same_len("images", pred, source)?;
    let s = world.identity_features(source)?;
    let mut g = Graph::<f32>::new();
    let p = row(&mut g, pred)?;
    let sv = row(&mut g, &s)?;
    let v = id_var(&mut g, world, p, sv)?;
    Ok(g.value(v).item())
}

pub fn loss_label(c_hat: [Condition; 2], c_ref: [Condition; 2]) -> f32 {
    (0..2).map(|i| geometry::condition_angular_error(c_hat[i], c_ref[i])).sum()
}

pub fn loss_embed(z_norm: &[[Embedding; 2]]) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<[Var; 2]> = z_norm
        .iter()
        .map(|pair| pair.map(|z| g.constant(Tensor::new(&[3, 16], z.flatten()).expect("3x16"))))
        .collect();
    let v = embed_var(&mut g, &vars)?;
    Ok(g.value(v).item())
}

pub fn loss_layerweights(weights: &[f32], errors: &[f64]) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let w = g.constant(Tensor::new(&[weights.len()], weights.to_vec())?);
    let v = layerweights_var(&mut g, w, errors)?;
    Ok(g.value(v).item())
}

/// Every differentiable op of the engine plus the geometry, world,
/// redirector and loss graphs, each checked by central differences at
/// `points` random points. Returns the worst relative error per entry.
///
/// Composite entries run on a scaled-down world so that each point stays
/// cheap; the ops involved are the same as at full size.
pub fn gradcheck_suite(points: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    const EPS: f64 = 1e-6;
    let mut rng = stream(seed, "gradcheck");
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match out.iter_mut().find(|(n, _)| n == name) {
        Some((_, worst)) => *worst = worst.max(err),
        None => out.push((name.to_string(), err)),
    };

    for op in GradcheckOp::ALL {
        for _ in 0..points {
            record(op.name(), gradcheck_op(op, &mut rng, EPS)?);
        }
    }

    let world = WorldSpec::generate(WorldConfig {
        layers: 4,
        dim: 8,
        image_side: 8,
        hidden: 16,
        seed: derive_seed(seed, "gradcheck/world"),
        ..WorldConfig::default()
    })?;
    let side2 = world.image_len();
    let kd = world.layers() * world.dim();
    let est = Estimator::init(EstimatorArch::Train, side2, derive_seed(seed, "gradcheck/estimator"));
    let mut flat = Redirector::new(&RedirectorConfig::new(Mode::Flat, world.layers(), world.dim(), 1));
    flat.randomize(derive_seed(seed, "gradcheck/flat"));
    let mut layered = Redirector::new(&RedirectorConfig::new(Mode::Layerwise, world.layers(), world.dim(), 2));
    layered.randomize(derive_seed(seed, "gradcheck/layerwise"));
    let vecgan = VecGan::new(kd, derive_seed(seed, "gradcheck/vecgan"));

    let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
    };
    let condition = |rng: &mut ChaCha8Rng| uniform(rng, &[2], -1.0, 1.0);
    let loss_err = |e: LossError| TensorError::Invalid(e.to_string());
    let cond_of = |t: &Tensor<f64>| Condition::new(t.data()[0] as f32, t.data()[1] as f32);
    let flatten_projection = |g: &mut Graph<f64>, v: ProjectVars| -> tensor::Result<Var> {
        let a = g.reshape(v.z[0], &[48])?;
        let b = g.reshape(v.z[1], &[48])?;
        g.concat(&[v.c_hat[0], v.c_hat[1], a, b], 0)
    };

    for _ in 0..points {
        let (u, v) = (uniform(&mut rng, &[3], -1.0, 1.0), uniform(&mut rng, &[3], -1.0, 1.0));
        record(
            "angular_distance",
            gradcheck(|g, x| geometry::angular_distance_var(g, x[0], x[1]), &[u, v], EPS)?,
        );
        let c = condition(&mut rng);
        record(
            "rotation_from_condition",
            gradcheck(|g, x| geometry::rotation_var(g, x[0]), &[c], EPS)?,
        );
        let (a, b) = (condition(&mut rng), condition(&mut rng));
        record(
            "condition_angular_error",
            gradcheck(|g, x| geometry::condition_angular_error_var(g, x[0], x[1]), &[a, b], EPS)?,
        );
        let (z, c) = (uniform(&mut rng, &[3, 16], -1.0, 1.0), condition(&mut rng));
        record(
            "normalize_embedding",
            gradcheck(|g, x| normalize_embedding_var(g, x[0], x[1]), &[z.clone(), c.clone()], EPS)?,
        );
        record(
            "redirect_embedding",
            gradcheck(|g, x| redirect_embedding_var(g, x[0], x[1]), &[z, c], EPS)?,
        );

        let latent = uniform(&mut rng, &[1, kd], -2.0, 2.0);
        record(
            "render",
            gradcheck(|g, x| world.render_var(g, x[0]), std::slice::from_ref(&latent), EPS)?,
        );
        let img = uniform(&mut rng, &[1, side2], -1.0, 1.0);
        record(
            "estimator",
            gradcheck(|g, x| est.forward_var(g, x[0], false), std::slice::from_ref(&img), EPS)?,
        );
        record(
            "identity_features",
            gradcheck(|g, x| world.identity_features_var(g, x[0]), std::slice::from_ref(&img), EPS)?,
        );
        record(
            "perceptual_features",
            gradcheck(|g, x| world.perceptual_features_var(g, x[0]), std::slice::from_ref(&img), EPS)?,
        );

        let unit = uniform(&mut rng, &[1, world.dim()], -2.0, 2.0);
        record(
            "project",
            gradcheck(
                |g, x| {
                    let p = layered.bind(g, false);
                    let v = layered.project_var(g, &p, 1, x[0])?;
                    flatten_projection(g, v)
                },
                &[unit],
                EPS,
            )?,
        );
        let (z1, z2) = (uniform(&mut rng, &[3, 16], -1.0, 1.0), uniform(&mut rng, &[3, 16], -1.0, 1.0));
        record(
            "deproject",
            gradcheck(
                |g, x| {
                    let p = layered.bind(g, false);
                    layered.deproject_var(g, &p, 2, x[0], x[1])
                },
                &[z1, z2],
                EPS,
            )?,
        );
        let (ta, tb) = (cond_of(&condition(&mut rng)), cond_of(&condition(&mut rng)));
        let targets = [Some(RedirectTarget::Absolute(ta)), Some(RedirectTarget::Relative(tb))];
        for (name, red) in [("edit_flat", &flat), ("edit_layerwise", &layered)] {
            record(
                name,
                gradcheck(
                    |g, x| {
                        let p = red.bind(g, false);
                        Ok(red.edit_var(g, &p, x[0], &targets)?.latent)
                    },
                    std::slice::from_ref(&latent),
                    EPS,
                )?,
            );
        }
        let deltas = uniform(&mut rng, &[1, 4], -0.5, 0.5);
        record(
            "vecgan_edit",
            gradcheck(
                |g, x| {
                    let s = vecgan.scales_var(g, x[0], false)?;
                    vecgan.offset_var(g, s)
                },
                &[deltas],
                EPS,
            )?,
        );

        let pred = uniform(&mut rng, &[2, side2], -1.0, 1.0);
        let target = uniform(&mut rng, &[2, side2], -1.0, 1.0);
        record(
            "loss_rec",
            gradcheck(|g, x| rec_var(g, x[0], x[1]), &[pred.clone(), target.clone()], EPS)?,
        );
        let feats: Vec<f32> = target
            .data()
            .chunks(side2)
            .flat_map(|r| {
                world
                    .perceptual_features(&r.iter().map(|&v| v as f32).collect::<Vec<_>>())
                    .expect("image")
            })
            .collect();
        let feats = Tensor::new(&[2, feats.len() / 2], feats.iter().map(|&v| v as f64).collect())?;
        record(
            "loss_perc",
            gradcheck(
                |g, x| {
                    let t = g.constant(feats.clone());
                    perc_var(g, &world, x[0], t)
                },
                std::slice::from_ref(&pred),
                EPS,
            )?,
        );
        let readings = uniform(&mut rng, &[2, 4], -0.5, 0.5);
        record(
            "loss_att",
            gradcheck(
                |g, x| {
                    let t = g.constant(readings.clone());
                    att_var(g, &est, x[0], t)
                },
                std::slice::from_ref(&pred),
                EPS,
            )?,
        );
        let ident: Vec<f64> = target
            .data()
            .chunks(side2)
            .flat_map(|r| {
                world
                    .identity_features(&r.iter().map(|&v| v as f32).collect::<Vec<_>>())
                    .expect("image")
            })
            .map(|v| v as f64)
            .collect();
        let ident = Tensor::new(&[2, ident.len() / 2], ident)?;
        record(
            "loss_id",
            gradcheck(
                |g, x| {
                    let t = g.constant(ident.clone());
                    id_var(g, &world, x[0], t)
                },
                &[pred],
                EPS,
            )?,
        );
        let c_ref = [cond_of(&condition(&mut rng)), cond_of(&condition(&mut rng))];
        record(
            "loss_label",
            gradcheck(
                |g, x| label_var(g, [x[0], x[1]], c_ref),
                &[condition(&mut rng), condition(&mut rng)],
                EPS,
            )?,
        );
        let zs: Vec<Tensor<f64>> = (0..6).map(|_| uniform(&mut rng, &[3, 16], -1.0, 1.0)).collect();
        record(
            "loss_embed",
            gradcheck(
                |g, x| embed_var(g, &[[x[0], x[1]], [x[2], x[3]], [x[4], x[5]]]).map_err(loss_err),
                &zs,
                EPS,
            )?,
        );
        let errors: Vec<f64> = (0..world.layers()).map(|_| rng.random_range(0.01..1.0)).collect();
        record(
            "loss_layerweights",
            gradcheck(
                |g, x| layerweights_var(g, x[0], &errors).map_err(loss_err),
                &[uniform(&mut rng, &[world.layers()], 0.05, 1.0)],
                EPS,
            )?,
        );
        let terms: Vec<Tensor<f64>> = (0..7).map(|_| Tensor::scalar(rng.random_range(0.0..2.0))).collect();
        record(
            "loss_total",
            gradcheck(
                |g, x| {
                    let t = TermVars {
                        rec: x[0],
                        perc: x[1],
                        att: x[2],
                        id: x[3],
                        lab: x[4],
                        emb: x[5],
                        prob: x[6],
                    };
                    total_var(g, &t, &LossWeights::default(), Mode::Layerwise).map_err(loss_err)
                },
                &terms,
                EPS,
            )?,
        );
    }
    Ok(out)
}
