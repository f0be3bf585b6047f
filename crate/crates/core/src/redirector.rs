//! Projector / deprojector redirection of latent layers.
//!
//! Per latent layer a projector reads pseudo conditions `ĉ` (gaze, head) and
//! two 3×16 embeddings `z¹, z²`. An embedding is normalized by `R(ĉ)ᵀ` and
//! redirected by `R(c_t)`. A deprojector shared between the source and target
//! paths maps an embedding pair back to a residual, and the edit is
//! `f̂ = f − DP(z¹, z²) + DP(target pair)`.
//!
//! In layerwise mode each attribute's residual difference is computed by
//! swapping in only that attribute's redirected embedding, scaled by the
//! per-layer weight `Pⁱₖ`, and summed.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::format::FormatError;
use crate::geometry::{self, rotation_from_condition, Condition, Embedding};
use crate::rng::stream;
use crate::tensor::{self, Graph, Real, Tensor, TensorError, Var};
use crate::world::Latent;

#[derive(Debug, Error)]
pub enum RedirectorError {
    #[error("operation needs a {expected} redirector, this one is {actual}")]
    Mode { expected: &'static str, actual: &'static str },
    #[error("latent has {actual} values per row, redirector expects {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, RedirectorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One redirector over the whole flattened latent, no layer weights.
    Flat,
    /// One redirector per latent layer plus per-attribute layer weights.
    Layerwise,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Flat => "flat",
            Mode::Layerwise => "layerwise",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "flat" => Ok(Mode::Flat),
            "layerwise" => Ok(Mode::Layerwise),
            _ => Err(format!("unknown mode {s:?} (expected flat or layerwise)")),
        }
    }
}

/// Where an attribute should be sent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RedirectTarget {
    Absolute(Condition),
    /// Offset from the projector's own per-layer estimate `ĉ`.
    Relative(Condition),
}

/// Per-attribute targets; `None` leaves that attribute untouched.
pub type Targets = [Option<RedirectTarget>; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct RedirectorConfig {
    pub mode: Mode,
    /// Latent layers `K` of the world.
    pub layers: usize,
    /// Per-layer dimension `D` of the world.
    pub dim: usize,
    pub seed: u64,
    /// Zero the embedding head as well as the label and deprojector heads.
    /// Both embedding and deprojector heads at zero is a saddle: neither
    /// receives gradient, so training leaves this off.
    pub zero_embedding_head: bool,
}

impl RedirectorConfig {
    pub fn new(mode: Mode, layers: usize, dim: usize, seed: u64) -> Self {
        Self {
            mode,
            layers,
            dim,
            seed,
            zero_embedding_head: false,
        }
    }
}

/// Trainable state. Parameter names follow `layer{k}/P/...`,
/// `layer{k}/DP/...` and `weights/attr{i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Redirector {
    pub mode: Mode,
    /// Independent projector/deprojector units (`K`, or 1 when flat).
    pub units: usize,
    /// Input width of one unit (`D`, or `K·D` when flat).
    pub width: usize,
    pub params: BTreeMap<String, Tensor>,
}

fn uniform_dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::new(&[fan_in, fan_out], w).expect("dims"),
        Tensor::new(&[fan_out], b).expect("dims"),
    )
}

fn zero_dense(fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    (Tensor::zeros(&[fan_in, fan_out]), Tensor::zeros(&[fan_out]))
}

fn gaussian_dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let std = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            (x * std) as f32
        })
        .collect();
    (Tensor::new(&[fan_in, fan_out], w).expect("dims"), Tensor::zeros(&[fan_out]))
}

/// Names of the six dense layers of unit `k`, in evaluation order.
fn dense_names(k: usize) -> [String; 6] {
    [
        format!("layer{k}/P/lab0"),
        format!("layer{k}/P/lab1"),
        format!("layer{k}/P/emb0"),
        format!("layer{k}/P/emb1"),
        format!("layer{k}/DP/fc0"),
        format!("layer{k}/DP/fc1"),
    ]
}

fn weight_name(attr: usize) -> String {
    format!("weights/attr{attr}")
}

/// Graph handles for every parameter of a [`Redirector`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    fn dense(&self, name: &str) -> (Var, Var) {
        (self.vars[&format!("{name}/w")], self.vars[&format!("{name}/b")])
    }

    pub fn weights(&self, attr: usize) -> Option<Var> {
        self.vars.get(&weight_name(attr)).copied()
    }
}

/// Source-path readings of one unit.
#[derive(Clone, Copy, Debug)]
pub struct ProjectVars {
    /// `[2]` pseudo conditions per attribute.
    pub c_hat: [Var; 2],
    /// `[3, 16]` embeddings per attribute.
    pub z: [Var; 2],
}

/// Everything one unit's edit exposes to the losses.
#[derive(Clone, Copy, Debug)]
pub struct UnitEdit {
    /// `[1, width]` edited unit input.
    pub edited: Var,
    pub c_hat: [Var; 2],
    /// `[3, 16]` normalized embeddings.
    pub z_norm: [Var; 2],
}

/// Graph result of editing one latent.
#[derive(Clone, Debug)]
pub struct LatentEdit {
    /// `[1, K·D]` edited latent.
    pub latent: Var,
    pub units: Vec<UnitEdit>,
}

pub fn normalize_embedding_var<T: Real>(g: &mut Graph<T>, z: Var, c: Var) -> tensor::Result<Var> {
    let r = geometry::rotation_var(g, c)?;
    let rt = g.transpose(r)?;
    g.matmul(rt, z)
}

pub fn redirect_embedding_var<T: Real>(g: &mut Graph<T>, z_norm: Var, c: Var) -> tensor::Result<Var> {
    let r = geometry::rotation_var(g, c)?;
    g.matmul(r, z_norm)
}

/// `R(ĉ)ᵀ · z`.
pub fn normalize_embedding(z: &Embedding, c_hat: Condition) -> Embedding {
    rotation_from_condition(c_hat).transpose().apply(z)
}

/// `R(c_t) · z_N`.
pub fn redirect_embedding(z_norm: &Embedding, c_t: Condition) -> Embedding {
    rotation_from_condition(c_t).apply(z_norm)
}

/// Plain-valued projector output for one unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub c_hat: [Condition; 2],
    pub z: [Embedding; 2],
}

impl Redirector {
    pub fn new(cfg: &RedirectorConfig) -> Self {
        let (units, width) = match cfg.mode {
            Mode::Flat => (1, cfg.layers * cfg.dim),
            Mode::Layerwise => (cfg.layers, cfg.dim),
        };
        let mut rng = stream(cfg.seed, "redirector/init");
        let (h_lab, h_emb, h_dp) = ((width / 2).max(1), width, 2 * width);
        let mut params = BTreeMap::new();
        for k in 0..units {
            let names = dense_names(k);
            let layers = [
                uniform_dense(&mut rng, width, h_lab),
                zero_dense(h_lab, 4),
                uniform_dense(&mut rng, width, h_emb),
                if cfg.zero_embedding_head {
                    zero_dense(h_emb, 96)
                } else {
                    gaussian_dense(&mut rng, h_emb, 96)
                },
                uniform_dense(&mut rng, 96, h_dp),
                zero_dense(h_dp, width),
            ];
            for (name, (w, b)) in names.iter().zip(layers) {
                params.insert(format!("{name}/w"), w);
                params.insert(format!("{name}/b"), b);
            }
        }
        if cfg.mode == Mode::Layerwise {
            for attr in 0..2 {
                params.insert(weight_name(attr), Tensor::full(&[units], 1.0 / units as f32));
            }
        }
        Self {
            mode: cfg.mode,
            units,
            width,
            params,
        }
    }

    /// Rebuilds from checkpoint tensors; the mode follows from the presence
    /// of layer weights.
    pub fn from_params(params: BTreeMap<String, Tensor>) -> Result<Self> {
        let mode = if params.contains_key(&weight_name(0)) {
            Mode::Layerwise
        } else {
            Mode::Flat
        };
        let width = params
            .get("layer0/P/lab0/w")
            .map(|t| t.shape()[0])
            .ok_or_else(|| RedirectorError::Checkpoint("missing layer0/P/lab0/w".into()))?;
        let mut units = 0;
        while params.contains_key(&format!("layer{units}/P/lab0/w")) {
            units += 1;
        }
        let expected = units * 12 + if mode == Mode::Layerwise { 2 } else { 0 };
        if params.len() != expected {
            return Err(RedirectorError::Checkpoint(format!(
                "{} tensors for {units} units, expected {expected}",
                params.len()
            )));
        }
        for k in 0..units {
            for name in dense_names(k) {
                for p in ["w", "b"] {
                    if !params.contains_key(&format!("{name}/{p}")) {
                        return Err(RedirectorError::Checkpoint(format!("missing {name}/{p}")));
                    }
                }
            }
        }
        if mode == Mode::Flat && units != 1 {
            return Err(RedirectorError::Checkpoint(format!("flat redirector with {units} units")));
        }
        Ok(Self {
            mode,
            units,
            width,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor::save_checkpoint(path, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(tensor::load_checkpoint(path)?)
    }

    /// Layer weights `Pⁱ`, layerwise mode only.
    pub fn layer_weights(&self, attr: usize) -> Option<&[f32]> {
        self.params.get(&weight_name(attr)).map(|t| t.data())
    }

    pub fn set_layer_weights(&mut self, attr: usize, values: &[f32]) -> Result<()> {
        let t = self.params.get_mut(&weight_name(attr)).ok_or(RedirectorError::Mode {
            expected: "layerwise",
            actual: "flat",
        })?;
        if values.len() != t.numel() {
            return Err(RedirectorError::Shape {
                expected: t.numel(),
                actual: values.len(),
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Redraws every parameter uniformly at its init scale, zero-initialised
    /// heads included; layer weights land in `[-1, 1)`.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = stream(seed, "redirector/randomize");
        for (name, t) in self.params.iter_mut() {
            let bound = if name.starts_with("weights/") {
                1.0
            } else if name.ends_with("/b") {
                0.1
            } else {
                1.0 / (t.shape()[0] as f32).sqrt()
            };
            for x in t.data_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
    }

    /// Registers every parameter in `g`, as trainable leaves or constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(name.clone(), t.cast())
                } else {
                    g.constant(t.cast())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Projector of unit `k` on a `[1, width]` row.
    pub fn project_var<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, k: usize, f: Var) -> tensor::Result<ProjectVars> {
        let names = dense_names(k);
        let (w, b) = p.dense(&names[0]);
        let h = g.dense(f, w, b)?;
        let h = g.leaky_relu(h)?;
        let (w, b) = p.dense(&names[1]);
        let c = g.dense(h, w, b)?;
        let c = g.tanh(c)?;
        let c = g.scale(c, FRAC_PI_2)?;
        let c = g.reshape(c, &[4])?;
        let c_hat = [g.slice(c, 0, 0, 2)?, g.slice(c, 0, 2, 4)?];

        let (w, b) = p.dense(&names[2]);
        let h = g.dense(f, w, b)?;
        let h = g.leaky_relu(h)?;
        let (w, b) = p.dense(&names[3]);
        let e = g.dense(h, w, b)?;
        let e = g.reshape(e, &[96])?;
        let z = [g.slice(e, 0, 0, 48)?, g.slice(e, 0, 48, 96)?];
        let z = [g.reshape(z[0], &[3, 16])?, g.reshape(z[1], &[3, 16])?];
        Ok(ProjectVars { c_hat, z })
    }

    /// Shared deprojector of unit `k`: two `[3, 16]` embeddings → `[1, width]`.
    pub fn deproject_var<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, k: usize, z1: Var, z2: Var) -> tensor::Result<Var> {
        let names = dense_names(k);
        let a = g.reshape(z1, &[1, 48])?;
        let b2 = g.reshape(z2, &[1, 48])?;
        let x = g.concat(&[a, b2], 1)?;
        let (w, b) = p.dense(&names[4]);
        let h = g.dense(x, w, b)?;
        let h = g.leaky_relu(h)?;
        let (w, b) = p.dense(&names[5]);
        g.dense(h, w, b)
    }

    fn target_var<T: Real>(g: &mut Graph<T>, target: RedirectTarget, c_hat: Var) -> tensor::Result<Var> {
        match target {
            RedirectTarget::Absolute(c) => Ok(g.constant(c.to_tensor())),
            RedirectTarget::Relative(d) => {
                let dv = g.constant(d.to_tensor());
                g.add(c_hat, dv)
            }
        }
    }

    /// Edits unit `k` of a `[1, width]` row. Flat combination:
    /// `f − DP(z¹, z²) + DP(t¹, t²)`; layerwise:
    /// `f + Σᵢ Pⁱₖ · (DP(tⁱ swapped in) − DP(z¹, z²))`.
    pub fn edit_unit_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        k: usize,
        f: Var,
        targets: &Targets,
    ) -> tensor::Result<UnitEdit> {
        self.edit_unit_from_var(g, p, k, f, None, targets)
    }

    /// [`Self::edit_unit_var`], normalizing by `source` instead of the
    /// projector's own estimate when the source condition is known.
    pub fn edit_unit_from_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        k: usize,
        f: Var,
        source: Option<[Condition; 2]>,
        targets: &Targets,
    ) -> tensor::Result<UnitEdit> {
        let proj = self.project_var(g, p, k, f)?;
        let mut z_norm = [proj.z[0]; 2];
        let mut redirected = [None; 2];
        for i in 0..2 {
            let base = match source {
                Some(c) => g.constant(c[i].to_tensor()),
                None => proj.c_hat[i],
            };
            z_norm[i] = normalize_embedding_var(g, proj.z[i], base)?;
            if let Some(t) = targets[i] {
                let ct = Self::target_var(g, t, base)?;
                redirected[i] = Some(redirect_embedding_var(g, z_norm[i], ct)?);
            }
        }
        let edited = if redirected.iter().all(Option::is_none) {
            f
        } else {
            let base = self.deproject_var(g, p, k, proj.z[0], proj.z[1])?;
            match self.mode {
                Mode::Flat => {
                    let t1 = redirected[0].unwrap_or(proj.z[0]);
                    let t2 = redirected[1].unwrap_or(proj.z[1]);
                    let target = self.deproject_var(g, p, k, t1, t2)?;
                    let delta = g.sub(target, base)?;
                    g.add(f, delta)?
                }
                Mode::Layerwise => {
                    let mut out = f;
                    for (i, r) in redirected.iter().enumerate() {
                        let Some(r) = *r else { continue };
                        let swapped = if i == 0 {
                            self.deproject_var(g, p, k, r, proj.z[1])?
                        } else {
                            self.deproject_var(g, p, k, proj.z[0], r)?
                        };
                        let delta = g.sub(swapped, base)?;
                        let w = p.weights(i).expect("layerwise weights");
                        let wk = g.slice(w, 0, k, k + 1)?;
                        let scaled = g.mul(delta, wk)?;
                        out = g.add(out, scaled)?;
                    }
                    out
                }
            }
        };
        Ok(UnitEdit {
            edited,
            c_hat: proj.c_hat,
            z_norm,
        })
    }

    /// Edits a `[1, K·D]` latent row.
    pub fn edit_var<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, latent: Var, targets: &Targets) -> tensor::Result<LatentEdit> {
        self.edit_from_var(g, p, latent, None, targets)
    }

    pub fn edit_from_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        latent: Var,
        source: Option<[Condition; 2]>,
        targets: &Targets,
    ) -> tensor::Result<LatentEdit> {
        let mut units = Vec::with_capacity(self.units);
        for k in 0..self.units {
            let f = g.slice(latent, 1, k * self.width, (k + 1) * self.width)?;
            units.push(self.edit_unit_from_var(g, p, k, f, source, targets)?);
        }
        let latent = if self.units == 1 {
            units[0].edited
        } else {
            let parts: Vec<Var> = units.iter().map(|u| u.edited).collect();
            g.concat(&parts, 1)?
        };
        Ok(LatentEdit { latent, units })
    }

    fn check_width(&self, n: usize) -> Result<()> {
        if n != self.width {
            return Err(RedirectorError::Shape {
                expected: self.width,
                actual: n,
            });
        }
        Ok(())
    }

    fn row(&self, g: &mut Graph<f32>, xs: &[f32]) -> Result<Var> {
        Ok(g.constant(Tensor::new(&[1, xs.len()], xs.to_vec())?))
    }

    /// Projector readings of unit `k` for a width-long input.
    pub fn project(&self, k: usize, input: &[f32]) -> Result<Projection> {
        self.check_width(input.len())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.row(&mut g, input)?;
        let v = self.project_var(&mut g, &p, k, f)?;
        Ok(Projection {
            c_hat: v.c_hat.map(|c| Condition::from_slice(g.value(c).data())),
            z: v.z.map(|z| Embedding::from_slice(g.value(z).data())),
        })
    }

    /// Shared deprojector of unit `k`.
    pub fn deproject(&self, k: usize, z1: &Embedding, z2: &Embedding) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let a = g.constant(Tensor::new(&[3, 16], z1.flatten())?);
        let b = g.constant(Tensor::new(&[3, 16], z2.flatten())?);
        let out = self.deproject_var(&mut g, &p, k, a, b)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Edits one unit input. Returns the edited input and the source-path
    /// readings `(ĉ, z_N)`.
    pub fn edit_layer(&self, k: usize, input: &[f32], targets: &Targets) -> Result<(Vec<f32>, [Condition; 2], [Embedding; 2])> {
        self.check_width(input.len())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.row(&mut g, input)?;
        let e = self.edit_unit_var(&mut g, &p, k, f, targets)?;
        Ok((
            g.value(e.edited).data().to_vec(),
            e.c_hat.map(|c| Condition::from_slice(g.value(c).data())),
            e.z_norm.map(|z| Embedding::from_slice(g.value(z).data())),
        ))
    }

    /// Edits a whole latent according to the mode.
    pub fn edit_latent(&self, latent: &Latent, targets: &Targets) -> Result<Latent> {
        self.edit_latent_inner(latent, None, targets)
    }

    /// Edits a latent whose source conditions are known, e.g. a labeled
    /// sample. Relative targets are offsets from `source`.
    pub fn edit_latent_from(&self, latent: &Latent, source: [Condition; 2], targets: &Targets) -> Result<Latent> {
        self.edit_latent_inner(latent, Some(source), targets)
    }

    fn edit_latent_inner(&self, latent: &Latent, source: Option<[Condition; 2]>, targets: &Targets) -> Result<Latent> {
        if latent.data().len() != self.units * self.width {
            return Err(RedirectorError::Shape {
                expected: self.units * self.width,
                actual: latent.data().len(),
            });
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.row(&mut g, latent.data())?;
        let e = self.edit_from_var(&mut g, &p, f, source, targets)?;
        let data = g.value(e.latent).data().to_vec();
        Ok(Latent::new(latent.layers(), latent.dim(), data).expect("same shape"))
    }

    /// Layerwise edit; errors in flat mode.
    pub fn edit_latent_layerwise(&self, latent: &Latent, targets: &Targets) -> Result<Latent> {
        if self.mode != Mode::Layerwise {
            return Err(RedirectorError::Mode {
                expected: "layerwise",
                actual: self.mode.name(),
            });
        }
        self.edit_latent(latent, targets)
    }

    /// Per-unit pseudo conditions `ĉₖ` of a latent.
    pub fn pseudo_conditions(&self, latent: &Latent) -> Result<Vec<[Condition; 2]>> {
        (0..self.units)
            .map(|k| Ok(self.project(k, &latent.data()[k * self.width..(k + 1) * self.width])?.c_hat))
            .collect()
    }
}

/// Global-direction baseline: four fixed orthonormal directions in the
/// flattened latent space, moved by amounts a small scale network predicts
/// from the four condition deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct VecGan {
    pub directions: Vec<Vec<f32>>,
    pub params: BTreeMap<String, Tensor>,
}

const VECGAN_WIDTHS: [usize; 5] = [4, 32, 64, 64, 4];

impl VecGan {
    pub fn new(latent_len: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "vecgan/directions");
        let mut directions: Vec<Vec<f64>> = Vec::new();
        while directions.len() < 4 {
            let mut v: Vec<f64> = (0..latent_len).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Two Gram-Schmidt passes keep the basis orthogonal to f64 rounding.
            for _ in 0..2 {
                for d in &directions {
                    let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                directions.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut rng = stream(seed, "vecgan/scale");
        let mut params = BTreeMap::new();
        for (l, pair) in VECGAN_WIDTHS.windows(2).enumerate() {
            let (w, b) = uniform_dense(&mut rng, pair[0], pair[1]);
            params.insert(format!("scale/fc{l}/w"), w);
            params.insert(format!("scale/fc{l}/b"), b);
        }
        Self {
            directions: directions.into_iter().map(|d| d.into_iter().map(|x| x as f32).collect()).collect(),
            params,
        }
    }

    /// `[B, 4]` condition deltas → `[B, 4]` direction scales.
    pub fn scales_var<T: Real>(&self, g: &mut Graph<T>, deltas: Var, trainable: bool) -> tensor::Result<Var> {
        let mut x = deltas;
        let n = VECGAN_WIDTHS.len() - 1;
        for l in 0..n {
            let (wn, bn) = (format!("scale/fc{l}/w"), format!("scale/fc{l}/b"));
            let (w, b) = if trainable {
                (
                    g.param(wn.clone(), self.params[&wn].cast()),
                    g.param(bn.clone(), self.params[&bn].cast()),
                )
            } else {
                (g.constant(self.params[&wn].cast()), g.constant(self.params[&bn].cast()))
            };
            x = g.dense(x, w, b)?;
            if l + 1 < n {
                x = g.leaky_relu(x)?;
            }
        }
        Ok(x)
    }

    /// `[B, 4]` scales → `[B, K·D]` latent offsets.
    pub fn offset_var<T: Real>(&self, g: &mut Graph<T>, scales: Var) -> tensor::Result<Var> {
        let flat: Vec<f32> = self.directions.iter().flatten().copied().collect();
        let dirs = g.constant(Tensor::new(&[4, self.directions[0].len()], flat)?.cast());
        g.matmul(scales, dirs)
    }

    /// `f + Σⱼ sⱼ · dirⱼ`.
    pub fn edit_with_scales(&self, latent: &Latent, scales: [f32; 4]) -> Latent {
        let mut out = latent.clone();
        let data: Vec<f32> = out
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + (0..4).map(|j| scales[j] * self.directions[j][i]).sum::<f32>())
            .collect();
        for k in 0..out.layers() {
            let d = out.dim();
            out.layer_mut(k).copy_from_slice(&data[k * d..(k + 1) * d]);
        }
        out
    }

    /// Edits with scales predicted from `(target − source)` condition deltas,
    /// ordered gaze pitch, gaze yaw, head pitch, head yaw.
    pub fn edit(&self, latent: &Latent, deltas: [f32; 4]) -> Result<Latent> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 4], deltas.to_vec())?);
        let s = self.scales_var(&mut g, x, false)?;
        let s = g.value(s).data();
        Ok(self.edit_with_scales(latent, [s[0], s[1], s[2], s[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{WorldConfig, WorldSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_embedding(seed: u64) -> Embedding {
        let mut rng = stream(seed, "test/embedding");
        Embedding(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
    }

    fn close(a: &Embedding, b: &Embedding, tol: f32) -> bool {
        a.flatten().iter().zip(b.flatten()).all(|(x, y)| (x - y).abs() < tol)
    }

    fn world_latent(seed: u64) -> Latent {
        let w = WorldSpec::generate(WorldConfig::default()).unwrap();
        w.compose_latent(&w.sample_identity(seed), Condition::new(0.2, -0.1), Condition::new(-0.3, 0.25))
            .unwrap()
    }

    /// Fresh redirector whose zero-initialized heads are re-drawn at the
    /// scale of the other layers, so every path is active.
    fn perturbed(mode: Mode, seed: u64) -> Redirector {
        let mut r = Redirector::new(&RedirectorConfig::new(mode, 6, 64, seed));
        r.randomize(seed);
        r
    }

    #[test]
    fn zero_angle_normalization_is_identity() {
        let z = random_embedding(1);
        assert_eq!(normalize_embedding(&z, Condition::ZERO), z);
        assert_eq!(redirect_embedding(&z, Condition::ZERO), z);
    }

    #[test]
    fn zero_input_with_zero_heads_gives_zero_readings() {
        let mut cfg = RedirectorConfig::new(Mode::Layerwise, 6, 64, 3);
        cfg.zero_embedding_head = true;
        let r = Redirector::new(&cfg);
        let p = r.project(2, &[0.0; 64]).unwrap();
        assert_eq!(p.c_hat, [Condition::ZERO; 2]);
        assert_eq!(p.z[0].flatten(), vec![0.0; 48]);
        assert_eq!(p.z[1].flatten(), vec![0.0; 48]);
    }

    #[test]
    fn projector_outputs_are_bounded() {
        let r = perturbed(Mode::Layerwise, 4);
        let big: Vec<f32> = (0..64).map(|i| 40.0 * ((i as f32) * 0.7).sin()).collect();
        let p = r.project(0, &big).unwrap();
        for c in p.c_hat {
            assert!(c.pitch.abs() < std::f32::consts::FRAC_PI_2 + 1e-6);
            assert!(c.yaw.abs() < std::f32::consts::FRAC_PI_2 + 1e-6);
        }
        assert_eq!(r.project(0, &big).unwrap(), p);
        assert!(matches!(r.project(0, &[0.0; 5]), Err(RedirectorError::Shape { .. })));
    }

    #[test]
    fn deprojector_is_shared_between_paths() {
        let r = perturbed(Mode::Layerwise, 5);
        let f = world_latent(1);
        let p = r.project(1, f.layer(1)).unwrap();
        let zt: [Embedding; 2] = std::array::from_fn(|i| redirect_embedding(&normalize_embedding(&p.z[i], p.c_hat[i]), p.c_hat[i]));
        let a = r.deproject(1, &p.z[0], &p.z[1]).unwrap();
        let b = r.deproject(1, &zt[0], &zt[1]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_eq!(a, r.deproject(1, &p.z[0], &p.z[1]).unwrap());
    }

    #[test]
    fn unmasked_edit_is_exact() {
        let r = perturbed(Mode::Layerwise, 6);
        let f = world_latent(2);
        let (out, _, _) = r.edit_layer(0, f.layer(0), &[None, None]).unwrap();
        assert_eq!(out, f.layer(0));
        assert_eq!(r.edit_latent(&f, &[None, None]).unwrap(), f);
    }

    #[test]
    fn self_targets_are_no_ops() {
        for mode in [Mode::Flat, Mode::Layerwise] {
            let r = perturbed(mode, 7);
            let f = world_latent(3);
            let rel = Some(RedirectTarget::Relative(Condition::ZERO));
            let out = r.edit_latent(&f, &[rel, rel]).unwrap();
            assert!(out.max_abs_diff(&f) < 1e-5, "{mode:?} {}", out.max_abs_diff(&f));
        }
    }

    #[test]
    fn known_source_matches_the_estimate_it_replaces() {
        for mode in [Mode::Flat, Mode::Layerwise] {
            let r = perturbed(mode, 12);
            let f = world_latent(6);
            let t = Some(RedirectTarget::Absolute(Condition::new(0.3, -0.2)));
            // Single unit: the projector's estimate is one pair of conditions.
            if mode == Mode::Flat {
                let c_hat = r.project(0, f.data()).unwrap().c_hat;
                let a = r.edit_latent(&f, &[t, t]).unwrap();
                let b = r.edit_latent_from(&f, c_hat, &[t, t]).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-6);
            }
            let source = [Condition::new(-0.1, 0.2), Condition::new(0.25, 0.05)];
            let rel = Some(RedirectTarget::Relative(Condition::ZERO));
            assert!(r.edit_latent_from(&f, source, &[rel, rel]).unwrap().max_abs_diff(&f) < 1e-5);
            let moved = r.edit_latent_from(&f, source, &[t, None]).unwrap();
            assert!(moved.max_abs_diff(&f) > 1e-3);
        }
    }

    #[test]
    fn zero_weights_freeze_the_latent() {
        let mut r = perturbed(Mode::Layerwise, 8);
        r.set_layer_weights(0, &[0.0; 6]).unwrap();
        r.set_layer_weights(1, &[0.0; 6]).unwrap();
        let f = world_latent(4);
        let t = Some(RedirectTarget::Absolute(Condition::new(0.4, -0.3)));
        assert_eq!(r.edit_latent_layerwise(&f, &[t, t]).unwrap(), f);
    }

    #[test]
    fn weights_outside_support_leave_layers_alone() {
        let mut r = perturbed(Mode::Layerwise, 9);
        r.set_layer_weights(0, &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        r.set_layer_weights(1, &[0.0, 0.0, 0.5, 0.5, 0.0, 0.0]).unwrap();
        let f = world_latent(5);
        let t = Some(RedirectTarget::Absolute(Condition::new(0.3, 0.2)));
        let out = r.edit_latent_layerwise(&f, &[t, t]).unwrap();
        for k in 4..6 {
            assert_eq!(out.layer(k), f.layer(k));
        }
        assert_ne!(out.layer(0), f.layer(0));
    }

    #[test]
    fn single_unit_with_unit_weight_matches_flat_edit() {
        // One attribute masked: the swapped pair and the full target pair coincide.
        let mut flat = Redirector::new(&RedirectorConfig::new(Mode::Flat, 1, 64, 10));
        flat.randomize(10);
        let mut lw = flat.clone();
        lw.mode = Mode::Layerwise;
        lw.params.insert(weight_name(0), Tensor::full(&[1], 1.0));
        lw.params.insert(weight_name(1), Tensor::full(&[1], 1.0));
        let f = Latent::new(1, 64, world_latent(6).layer(0).to_vec()).unwrap();
        for targets in [
            [Some(RedirectTarget::Absolute(Condition::new(0.2, 0.1))), None],
            [None, Some(RedirectTarget::Absolute(Condition::new(-0.1, 0.3)))],
        ] {
            let a = flat.edit_latent(&f, &targets).unwrap();
            let b = lw.edit_latent_layerwise(&f, &targets).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
        assert!(matches!(
            flat.edit_latent_layerwise(&f, &[None, None]),
            Err(RedirectorError::Mode { .. })
        ));
    }

    #[test]
    fn sequential_edits_compose_at_embedding_level() {
        // Fixed embeddings and a shared deprojector: moving gaze, then head
        // (with the gaze-moved embedding as the new source) telescopes to
        // moving both at once.
        let r = perturbed(Mode::Flat, 11);
        let (z1, z2) = (random_embedding(2), random_embedding(3));
        let (c1, c2) = (Condition::new(0.1, -0.2), Condition::new(0.3, 0.05));
        let (t1, t2) = (Condition::new(-0.25, 0.3), Condition::new(0.0, -0.35));
        let zt1 = redirect_embedding(&normalize_embedding(&z1, c1), t1);
        let zt2 = redirect_embedding(&normalize_embedding(&z2, c2), t2);
        let f: Vec<f32> = (0..384).map(|i| (i as f32 * 0.1).cos()).collect();
        let dp = |a: &Embedding, b: &Embedding| r.deproject(0, a, b).unwrap();
        let apply =
            |f: &[f32], from: Vec<f32>, to: Vec<f32>| -> Vec<f32> { f.iter().zip(from).zip(to).map(|((x, s), t)| x - s + t).collect() };
        let gaze_first = apply(&f, dp(&z1, &z2), dp(&zt1, &z2));
        let then_head = apply(&gaze_first, dp(&zt1, &z2), dp(&zt1, &zt2));
        let both = apply(&f, dp(&z1, &z2), dp(&zt1, &zt2));
        for (a, b) in then_head.iter().zip(&both) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_mode() {
        let r = perturbed(Mode::Layerwise, 12);
        let bytes = tensor::write_checkpoint(&r.params).unwrap();
        let back = Redirector::from_params(tensor::read_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back, r);
        let flat = Redirector::new(&RedirectorConfig::new(Mode::Flat, 6, 64, 1));
        assert_eq!(Redirector::from_params(flat.params.clone()).unwrap().mode, Mode::Flat);
    }

    #[test]
    fn vecgan_directions_are_orthonormal() {
        let v = VecGan::new(384, 3);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = v.directions[i]
                    .iter()
                    .zip(&v.directions[j])
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "{i}{j} {dot}");
            }
        }
    }

    #[test]
    fn vecgan_edit_is_linear_in_scales() {
        let v = VecGan::new(384, 4);
        let f = world_latent(7);
        assert_eq!(v.edit_with_scales(&f, [0.0; 4]), f);
        let s = [0.3, -0.2, 0.1, 0.5];
        let one = v.edit_with_scales(&f, s);
        let two = v.edit_with_scales(&f, s.map(|x| 2.0 * x));
        for i in 0..f.data().len() {
            let d1 = one.data()[i] - f.data()[i];
            let d2 = two.data()[i] - f.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-5);
        }
        assert_eq!(v.edit(&f, [0.1, 0.0, 0.0, 0.2]).unwrap().data().len(), 384);
    }

    proptest! {
        #[test]
        fn normalize_then_redirect_round_trips(p in -1.5f32..1.5, y in -1.5f32..1.5, seed in 0u64..1000) {
            let z = random_embedding(seed);
            let c = Condition::new(p, y);
            prop_assert!(close(&normalize_embedding(&redirect_embedding(&z, c), c), &z, 1e-6));
            prop_assert!(close(&redirect_embedding(&normalize_embedding(&z, c), c), &z, 1e-6));
            prop_assert!((normalize_embedding(&z, c).frobenius() - z.frobenius()).abs() < 1e-5);
        }

        #[test]
        fn re_redirection_is_consistent(
            a in -1.2f32..1.2, b in -1.2f32..1.2, c in -1.2f32..1.2, d in -1.2f32..1.2, seed in 0u64..1000
        ) {
            let zn = random_embedding(seed);
            let (c1, c2) = (Condition::new(a, b), Condition::new(c, d));
            let twice = redirect_embedding(&normalize_embedding(&redirect_embedding(&zn, c1), c1), c2);
            prop_assert!(close(&twice, &redirect_embedding(&zn, c2), 1e-5));
        }
    }
}
