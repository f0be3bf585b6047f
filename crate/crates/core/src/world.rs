//! Synthetic world with known ground truth.
//!
//! Each identity is a Gaussian latent of `K` layers × `D` dims. Gaze and
//! head pose are planted additively into fixed layer sets: layer `k ∈ Sᵢ`
//! receives `Wᵢₖ · vec(R(cᵢ) · Z₀ᵢ)`. A frozen two-layer perceptron renders
//! the latent to a small grey image. Frozen random feature maps stand in for
//! identity and perceptual networks, and small perceptrons trained on
//! rendered images play the role of the pretrained gaze/head estimators.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::format::{len_u32, put_f32s, put_u32, ByteReader, FormatError};
use crate::geometry::{self, condition_angular_error, rotation_from_condition, Condition, Embedding};
use crate::rng::{derive_seed, stream};
use crate::tensor::{self, adam_step, AdamState, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{what}: expected {expected} values, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("identity features of a blank image have zero norm")]
    ZeroNorm,
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Knobs that determine a [`WorldSpec`]. Everything random is drawn from
/// `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub layers: usize,
    pub dim: usize,
    pub image_side: usize,
    pub hidden: usize,
    pub planted: [Vec<usize>; 2],
    /// Scale of the injection maps relative to the unit-variance identity.
    pub planted_scale: f32,
    pub output_gain: f32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 64,
            image_side: 32,
            hidden: 256,
            planted: [vec![0, 1], vec![2, 3]],
            planted_scale: 8.0,
            output_gain: 0.6,
            seed: 0,
        }
    }
}

/// A `K × D` latent, row-major by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Latent {
    pub fn new(layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if layers == 0 || dim == 0 || data.len() != layers * dim {
            return Err(WorldError::Shape {
                what: "latent",
                expected: layers * dim,
                actual: data.len(),
            });
        }
        Ok(Self { layers, dim, data })
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self {
            layers,
            dim,
            data: vec![0.0; layers * dim],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn layer(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: u32,
    pub latent: Latent,
    pub gaze: Condition,
    pub head: Condition,
    pub image: Vec<f32>,
}

/// Frozen generator, planting maps and feature extractors.
#[derive(Clone, Debug)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub canonical: [Embedding; 2],
    /// `injection[i][j]` is the `D × 48` map into layer `planted[i][j]`.
    pub injection: [Vec<Tensor>; 2],
    gen_hidden_w: Tensor,
    gen_hidden_b: Tensor,
    gen_out_w: Tensor,
    id_map: Tensor,
    conv1: Tensor,
    conv2: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            (x * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("positive dims")
}

fn matmul(a: &[f32], b: &Tensor, m: usize) -> Vec<f32> {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    tensor::graph::matmul_into(a, b.data(), &mut out, m, k, n);
    out
}

fn leaky(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x * tensor::LEAKY_SLOPE as f32
    }
}

/// Plain 2-D convolution matching [`Graph::conv2d`], single image.
fn conv2d(x: &[f32], c: usize, h: usize, w: usize, kernel: &Tensor, stride: usize, pad: usize) -> (Vec<f32>, usize, usize) {
    let ks = kernel.shape();
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let kd = kernel.data();
    let mut out = vec![0.0f32; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0f32;
                for ic in 0..c {
                    for dy in 0..kh {
                        let iy = (y * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kd[((oc * c + ic) * kh + dy) * kw + dx] * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

impl WorldSpec {
    pub fn generate(config: WorldConfig) -> Result<Self> {
        let (k, d) = (config.layers, config.dim);
        if k == 0 || d == 0 || config.image_side < 4 || config.hidden == 0 {
            return Err(WorldError::Config("layer count, dims and image side must be positive".into()));
        }
        for (i, set) in config.planted.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&l| l >= k) {
                return Err(WorldError::Config(format!(
                    "planted layers of attribute {i} must be non-empty and < {k}"
                )));
            }
        }
        if config.planted[0].iter().any(|l| config.planted[1].contains(l)) {
            return Err(WorldError::Config("planted layer sets must be disjoint".into()));
        }
        let seed = config.seed;
        let mut rng = stream(seed, "world/canonical");
        let canonical = [0, 1].map(|_| Embedding::from_slice(gaussian(&mut rng, &[48], 1.0).data()));
        let mut rng = stream(seed, "world/injection");
        let scale = config.planted_scale as f64 / 48f64.sqrt();
        let injection = [0, 1].map(|i| config.planted[i].iter().map(|_| gaussian(&mut rng, &[d, 48], scale)).collect());

        // Hidden weights are scaled by the RMS latent spread, so the
        // pre-activations stay O(1) however strongly attributes are planted.
        let planted_layers = config.planted[0].len() + config.planted[1].len();
        let s2 = config.planted_scale as f64 * config.planted_scale as f64;
        let mean_var = (k as f64 + planted_layers as f64 * s2) / k as f64;
        let mut rng = stream(seed, "world/generator");
        let side2 = config.image_side * config.image_side;
        let gen_hidden_w = gaussian(&mut rng, &[k * d, config.hidden], 1.0 / ((k * d) as f64).sqrt() / mean_var.sqrt());
        let gen_hidden_b = gaussian(&mut rng, &[config.hidden], 0.1);
        let gen_out_w = gaussian(
            &mut rng,
            &[config.hidden, side2],
            config.output_gain as f64 / (config.hidden as f64).sqrt(),
        );
        let mut rng = stream(seed, "world/features");
        let id_map = gaussian(&mut rng, &[side2, 32], 1.0 / 32.0);
        let conv1 = gaussian(&mut rng, &[8, 1, 3, 3], 1.0 / 3.0);
        let conv2 = gaussian(&mut rng, &[8, 8, 3, 3], 1.0 / 72f64.sqrt());
        Ok(Self {
            config,
            canonical,
            injection,
            gen_hidden_w,
            gen_hidden_b,
            gen_out_w,
            id_map,
            conv1,
            conv2,
        })
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn image_len(&self) -> usize {
        self.config.image_side * self.config.image_side
    }

    pub fn planted(&self, attr: usize) -> &[usize] {
        &self.config.planted[attr]
    }

    /// Every frozen tensor, by name. Used to prove nothing trains them.
    pub fn frozen_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, maps) in self.injection.iter().enumerate() {
            for (j, w) in maps.iter().enumerate() {
                out.insert(format!("injection/attr{i}/{j}"), w.clone());
            }
        }
        for (i, z) in self.canonical.iter().enumerate() {
            out.insert(format!("canonical/attr{i}"), Tensor::new(&[3, 16], z.flatten()).expect("3x16"));
        }
        out.insert("generator/hidden/w".into(), self.gen_hidden_w.clone());
        out.insert("generator/hidden/b".into(), self.gen_hidden_b.clone());
        out.insert("generator/out/w".into(), self.gen_out_w.clone());
        out.insert("identity/map".into(), self.id_map.clone());
        out.insert("perceptual/conv1".into(), self.conv1.clone());
        out.insert("perceptual/conv2".into(), self.conv2.clone());
        out
    }

    /// I.i.d. standard normal identity latent.
    pub fn sample_identity(&self, seed: u64) -> Latent {
        let mut rng = stream(seed, "identity");
        let (k, d) = (self.layers(), self.dim());
        let data = gaussian(&mut rng, &[k * d], 1.0).into_data();
        Latent { layers: k, dim: d, data }
    }

    /// The latent offset that attribute `attr` at condition `c` adds to
    /// planted layer `planted[attr][j]`.
    pub fn planted_offset(&self, attr: usize, j: usize, c: Condition) -> Vec<f32> {
        let z = rotation_from_condition(c).apply(&self.canonical[attr]).flatten();
        let w = &self.injection[attr][j];
        let d = self.dim();
        (0..d)
            .map(|r| w.data()[r * 48..(r + 1) * 48].iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn compose_latent(&self, identity: &Latent, gaze: Condition, head: Condition) -> Result<Latent> {
        self.check_latent(identity)?;
        let mut out = identity.clone();
        for (attr, c) in [(0, gaze), (1, head)] {
            for (j, &k) in self.config.planted[attr].iter().enumerate() {
                let off = self.planted_offset(attr, j, c);
                for (x, o) in out.layer_mut(k).iter_mut().zip(off) {
                    *x += o;
                }
            }
        }
        Ok(out)
    }

    fn check_latent(&self, f: &Latent) -> Result<()> {
        if f.layers != self.layers() || f.dim != self.dim() {
            return Err(WorldError::Shape {
                what: "latent",
                expected: self.layers() * self.dim(),
                actual: f.layers * f.dim,
            });
        }
        Ok(())
    }

    fn check_image(&self, img: &[f32]) -> Result<()> {
        if img.len() != self.image_len() {
            return Err(WorldError::Shape {
                what: "image",
                expected: self.image_len(),
                actual: img.len(),
            });
        }
        Ok(())
    }

    pub fn render(&self, f: &Latent) -> Result<Vec<f32>> {
        self.check_latent(f)?;
        let mut h = matmul(&f.data, &self.gen_hidden_w, 1);
        for (x, b) in h.iter_mut().zip(self.gen_hidden_b.data()) {
            *x = (*x + b).tanh();
        }
        let mut out = matmul(&h, &self.gen_out_w, 1);
        for x in &mut out {
            *x = x.tanh();
        }
        Ok(out)
    }

    /// Differentiable render of `[B, K·D]` latent rows to `[B, side²]`.
    pub fn render_var<T: Real>(&self, g: &mut Graph<T>, latents: Var) -> tensor::Result<Var> {
        let w = g.constant(self.gen_hidden_w.cast());
        let b = g.constant(self.gen_hidden_b.cast());
        let h = g.dense(latents, w, b)?;
        let h = g.tanh(h)?;
        let w2 = g.constant(self.gen_out_w.cast());
        let o = g.matmul(h, w2)?;
        g.tanh(o)
    }

    pub fn identity_features(&self, img: &[f32]) -> Result<Vec<f32>> {
        self.check_image(img)?;
        let mut v = matmul(img, &self.id_map, 1);
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n <= 1e-12 {
            return Err(WorldError::ZeroNorm);
        }
        for x in &mut v {
            *x /= n;
        }
        Ok(v)
    }

    /// `[B, side²]` → unit `[B, 32]` rows.
    pub fn identity_features_var<T: Real>(&self, g: &mut Graph<T>, images: Var) -> tensor::Result<Var> {
        let m = g.constant(self.id_map.cast());
        let v = g.matmul(images, m)?;
        g.normalize(v)
    }

    pub fn perceptual_features(&self, img: &[f32]) -> Result<Vec<f32>> {
        self.check_image(img)?;
        let s = self.config.image_side;
        let (mut x, h, w) = conv2d(img, 1, s, s, &self.conv1, 2, 1);
        x.iter_mut().for_each(|v| *v = leaky(*v));
        let (mut x, _, _) = conv2d(&x, 8, h, w, &self.conv2, 2, 1);
        x.iter_mut().for_each(|v| *v = leaky(*v));
        Ok(x)
    }

    /// `[B, side²]` → `[B, F]` flattened conv features.
    pub fn perceptual_features_var<T: Real>(&self, g: &mut Graph<T>, images: Var) -> tensor::Result<Var> {
        let b = g.shape(images)[0];
        let s = self.config.image_side;
        let x = g.reshape(images, &[b, 1, s, s])?;
        let k1 = g.constant(self.conv1.cast());
        let x = g.conv2d(x, k1, 2, 1)?;
        let x = g.leaky_relu(x)?;
        let k2 = g.constant(self.conv2.cast());
        let x = g.conv2d(x, k2, 2, 1)?;
        let x = g.leaky_relu(x)?;
        let n = g.value(x).numel() / b;
        g.reshape(x, &[b, n])
    }

    pub fn perceptual_distance(&self, a: &[f32], b: &[f32]) -> Result<f32> {
        let (fa, fb) = (self.perceptual_features(a)?, self.perceptual_features(b)?);
        Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt())
    }

    /// `n_identities × per_identity` samples with conditions uniform in
    /// `[-range, range]` for each angle.
    pub fn sample_dataset(&self, n_identities: usize, per_identity: usize, range: f32, seed: u64) -> Result<Vec<Sample>> {
        if n_identities == 0 || per_identity == 0 {
            return Err(WorldError::EmptyDataset);
        }
        let mut rng = stream(seed, "dataset/conditions");
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| Condition::new(rng.random_range(-range..=range), rng.random_range(-range..=range));
        let mut out = Vec::with_capacity(n_identities * per_identity);
        for id in 0..n_identities {
            let identity = self.sample_identity(derive_seed(seed, &format!("dataset/identity/{id}")));
            for _ in 0..per_identity {
                let gaze = draw(&mut rng);
                let head = draw(&mut rng);
                let latent = self.compose_latent(&identity, gaze, head)?;
                let image = self.render(&latent)?;
                out.push(Sample {
                    identity: id as u32,
                    latent,
                    gaze,
                    head,
                    image,
                });
            }
        }
        Ok(out)
    }
}

// Dataset files: magic, version, count, then per sample the identity, four
// condition angles, the latent and the image. Dimensions come from the
// world, not the file.

pub const DATASET_MAGIC: &[u8; 4] = b"RDTD";
const DATASET_VERSION: u32 = 1;

pub fn write_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, len_u32(samples.len())?);
    for s in samples {
        put_u32(&mut out, s.identity);
        put_f32s(&mut out, &[s.gaze.pitch, s.gaze.yaw, s.head.pitch, s.head.yaw]);
        put_f32s(&mut out, s.latent.data());
        put_f32s(&mut out, &s.image);
    }
    Ok(out)
}

pub fn read_dataset(bytes: &[u8], world: &WorldSpec) -> Result<Vec<Sample>> {
    let mut r = ByteReader::new(bytes);
    r.header(DATASET_MAGIC, "RDTD", DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let (k, d, side2) = (world.layers(), world.dim(), world.image_len());
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let identity = r.u32()?;
        let c = r.f32s(4)?;
        let latent = Latent::new(k, d, r.f32s(k * d)?)?;
        let image = r.f32s(side2)?;
        out.push(Sample {
            identity,
            latent,
            gaze: Condition::new(c[0], c[1]),
            head: Condition::new(c[2], c[3]),
            image,
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes after {count} samples", r.remaining())).into());
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, write_dataset(samples)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_dataset(path: &Path, world: &WorldSpec) -> Result<Vec<Sample>> {
    read_dataset(&fs::read(path).map_err(FormatError::from)?, world)
}

/// Estimator shapes: `Train` mirrors the deeper supervision network,
/// `Eval` the single linear head of the held-out scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorArch {
    Train,
    Eval,
}

impl EstimatorArch {
    fn widths(self, input: usize) -> Vec<usize> {
        match self {
            EstimatorArch::Train => vec![input, 128, 64, 4],
            EstimatorArch::Eval => vec![input, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorArch::Train => "train",
            EstimatorArch::Eval => "eval",
        }
    }
}

impl std::str::FromStr for EstimatorArch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(EstimatorArch::Train),
            "eval" => Ok(EstimatorArch::Eval),
            _ => Err(format!("unknown estimator architecture {s:?} (expected train or eval)")),
        }
    }
}

/// Image → (gaze pitch, gaze yaw, head pitch, head yaw), each squashed by
/// `0.5π · tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimator {
    pub arch: EstimatorArch,
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

fn dense_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::new(&[fan_in, fan_out], w).expect("dims"),
        Tensor::new(&[fan_out], b).expect("dims"),
    )
}

impl Estimator {
    pub fn init(arch: EstimatorArch, input: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "estimator/init");
        let widths = arch.widths(input);
        let mut params = BTreeMap::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (w, b) = dense_init(&mut rng, pair[0], pair[1]);
            params.insert(format!("fc{l}/w"), w);
            params.insert(format!("fc{l}/b"), b);
        }
        Self { arch, params }
    }

    /// Rebuilds an estimator from checkpoint tensors, inferring the
    /// architecture from the layer count.
    pub fn from_params(params: BTreeMap<String, Tensor>) -> Result<Self> {
        let arch = match params.len() {
            6 => EstimatorArch::Train,
            2 => EstimatorArch::Eval,
            n => {
                return Err(WorldError::Config(format!(
                    "estimator checkpoint has {n} tensors (expected 2 or 6)"
                )))
            }
        };
        for l in 0..arch.widths(1).len() - 1 {
            for p in ["w", "b"] {
                if !params.contains_key(&format!("fc{l}/{p}")) {
                    return Err(WorldError::Config(format!("estimator checkpoint lacks fc{l}/{p}")));
                }
            }
        }
        Ok(Self { arch, params })
    }

    fn layer_count(&self) -> usize {
        self.params.len() / 2
    }

    /// `[B, side²]` → `[B, 4]`. Parameters enter as constants unless
    /// `trainable`.
    pub fn forward_var<T: Real>(&self, g: &mut Graph<T>, images: Var, trainable: bool) -> tensor::Result<Var> {
        let mut x = images;
        let n = self.layer_count();
        for l in 0..n {
            let (wn, bn) = (format!("fc{l}/w"), format!("fc{l}/b"));
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
        let x = g.tanh(x)?;
        g.scale(x, FRAC_PI_2)
    }

    pub fn estimate(&self, image: &[f32]) -> Result<(Condition, Condition)> {
        Ok(self.estimate_batch(&[image])?[0])
    }

    pub fn estimate_batch(&self, images: &[&[f32]]) -> Result<Vec<(Condition, Condition)>> {
        let side2 = self.params["fc0/w"].shape()[0];
        let mut flat = Vec::with_capacity(images.len() * side2);
        for img in images {
            if img.len() != side2 {
                return Err(WorldError::Shape {
                    what: "image",
                    expected: side2,
                    actual: img.len(),
                });
            }
            flat.extend_from_slice(img);
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[images.len(), side2], flat)?);
        let o = self.forward_var(&mut g, x, false)?;
        Ok(g.value(o)
            .data()
            .chunks(4)
            .map(|r| (Condition::new(r[0], r[1]), Condition::new(r[2], r[3])))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor::save_checkpoint(path, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(tensor::load_checkpoint(path)?)
    }
}

/// Mean over a batch of the summed gaze and head angular errors between
/// `[B, 4]` predictions and `[B, 4]` labels.
pub(crate) fn condition_pair_loss<T: Real>(g: &mut Graph<T>, pred: Var, labels: Var) -> tensor::Result<Var> {
    let mut total = None;
    for start in [0, 2] {
        let p = g.slice(pred, 1, start, start + 2)?;
        let l = g.slice(labels, 1, start, start + 2)?;
        let e = geometry::condition_angular_error_var(g, p, l)?;
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    g.mean(total.expect("two attributes"))
}

fn labels_of(s: &Sample) -> [f32; 4] {
    [s.gaze.pitch, s.gaze.yaw, s.head.pitch, s.head.yaw]
}

/// Fits an estimator to `(image, gaze, head)` triples with Adam.
pub fn pretrain_estimator(samples: &[Sample], arch: EstimatorArch, seed: u64, cfg: &PretrainConfig) -> Result<Estimator> {
    let first = samples.first().ok_or(WorldError::EmptyDataset)?;
    let side2 = first.image.len();
    let mut est = Estimator::init(arch, side2, seed);
    let mut state = AdamState::default();
    let mut rng = stream(seed, "estimator/shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut x = Vec::with_capacity(chunk.len() * side2);
            let mut y = Vec::with_capacity(chunk.len() * 4);
            for &i in chunk {
                x.extend_from_slice(&samples[i].image);
                y.extend_from_slice(&labels_of(&samples[i]));
            }
            let mut g = Graph::<f32>::new();
            let xv = g.constant(Tensor::new(&[chunk.len(), side2], x)?);
            let yv = g.constant(Tensor::new(&[chunk.len(), 4], y)?);
            let out = est.forward_var(&mut g, xv, true)?;
            let loss = condition_pair_loss(&mut g, out, yv)?;
            let grads = g.backward(loss)?.params();
            adam_step(&mut est.params, &grads, &mut state, cfg.lr)?;
        }
    }
    Ok(est)
}

/// Mean (gaze, head) angular error of `est` against the labels of `samples`.
pub fn estimator_error(est: &Estimator, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(WorldError::EmptyDataset);
    }
    let (mut eg, mut eh) = (0.0f64, 0.0f64);
    for chunk in samples.chunks(256) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        for (s, (g, h)) in chunk.iter().zip(est.estimate_batch(&imgs)?) {
            eg += condition_angular_error(g, s.gaze) as f64;
            eh += condition_angular_error(h, s.head) as f64;
        }
    }
    let n = samples.len() as f64;
    Ok((eg / n, eh / n))
}
