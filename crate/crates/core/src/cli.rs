//! Command-line front end: subcommands, config resolution, run directories
//! and latent/image files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::eval::{self, AugmentConfig, EvalReport};
use crate::format::{put_f32s, put_u32, ByteReader, FormatError};
use crate::geometry::Condition;
use crate::losses::{self, LossWeights};
use crate::redirector::{Mode, RedirectTarget, Redirector, Targets};
use crate::rng::derive_seed;
use crate::trainer::{self, LabelSource, TrainConfig};
use crate::world::{self, Estimator, EstimatorArch, Latent, PretrainConfig, Sample, WorldConfig, WorldSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Latent files

pub const LATENT_MAGIC: &[u8; 4] = b"RDTL";
const LATENT_VERSION: u32 = 1;

pub fn encode_latent(f: &Latent) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * f.data().len());
    out.extend_from_slice(LATENT_MAGIC);
    put_u32(&mut out, LATENT_VERSION);
    put_u32(&mut out, f.layers() as u32);
    put_u32(&mut out, f.dim() as u32);
    put_f32s(&mut out, f.data());
    out
}

pub fn decode_latent(bytes: &[u8]) -> Result<Latent, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.header(LATENT_MAGIC, "RDTL", LATENT_VERSION)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let n = k
        .checked_mul(d)
        .ok_or_else(|| FormatError::Malformed(format!("latent of {k} x {d} overflows")))?;
    let data = r.f32s(n)?;
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Latent::new(k, d, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_latent(path: &Path, f: &Latent) -> Result<(), FormatError> {
    fs::write(path, encode_latent(f))?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<Latent, FormatError> {
    decode_latent(&fs::read(path)?)
}

/// Binary 8-bit PGM of a square image with values in `[-1, 1]`.
pub fn encode_pgm(image: &[f32], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    out
}

// ---------------------------------------------------------------------------
// Config

/// `key = value` entries after defaults, file, environment and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

/// Every accepted key with its default. `auto` seeds are derived from the
/// master `seed` and the key name.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("world.seed", "auto"),
    ("world.layers", "6"),
    ("world.dim", "64"),
    ("world.image_side", "32"),
    ("world.hidden", "256"),
    ("world.gaze_layers", "0,1"),
    ("world.head_layers", "2,3"),
    ("world.planted_scale", "8"),
    ("world.output_gain", "0.6"),
    ("data.seed", "auto"),
    ("data.train_identities", "2000"),
    ("data.test_identities", "250"),
    ("data.per_identity", "4"),
    ("data.range", "0.4"),
    ("estimator.seed", "auto"),
    ("estimator.epochs", "30"),
    ("estimator.batch_size", "32"),
    ("estimator.lr", "0.001"),
    ("eval_estimator.seed", "auto"),
    ("eval_estimator.identities", "2000"),
    ("train.seed", "auto"),
    ("train.mode", "layerwise"),
    ("train.label_source", "pseudo"),
    ("train.batch_size", "2"),
    ("train.epochs", "3"),
    ("train.max_iterations", "0"),
    ("train.lr", "0.0001"),
    ("train.decay", "0.8"),
    ("train.decay_every", "3000"),
    ("train.clip_norm", "10"),
    ("train.eval_every", "2000"),
    ("train.estimator", ""),
    ("train.eval_estimator", ""),
    ("loss.rec", "8"),
    ("loss.perc", "8"),
    ("loss.id", "5"),
    ("loss.att", "1"),
    ("loss.lab", "5"),
    ("loss.emb", "2"),
    ("loss.prob", "10"),
    ("eval.seed", "auto"),
    ("eval.correction_trials", "200"),
    ("augment.seed", "auto"),
    ("augment.percents", "25,50,75"),
    ("augment.identities", "40"),
    ("augment.per_identity", "4"),
    ("augment.test_identities", "250"),
    ("augment.iterations", "3000"),
    ("augment.label_source", "truth"),
    ("augment.downstream_seeds", "10"),
    ("augment.downstream_steps", "1500"),
    ("augment.known_source", "true"),
];

pub const SEED_ENV: &str = "REDIRTRANS_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: CONFIG_KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<(), ConfigError> {
        entries.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Defaults, then the file, then the seed environment variable, then
    /// flag overrides.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        if let Some(text) = file {
            c.apply(&parse_config(text)?)?;
        }
        if let Some(s) = env_seed {
            c.set("seed", s.trim())?;
        }
        c.apply(overrides)?;
        c.validate()?;
        Ok(c)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} is not registered"))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: v.into(),
            reason: e.to_string(),
        })
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: std::num::ParseIntError| ConfigError::Value {
                    key: key.into(),
                    value: self.raw(key).into(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    /// Explicit seed, or one derived from the master seed and `key`.
    pub fn seed(&self, key: &str) -> Result<u64, ConfigError> {
        if self.raw(key) == "auto" {
            Ok(derive_seed(self.get("seed")?, key))
        } else {
            self.get(key)
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = self.clone();
        c.world_config()?;
        c.train_config()?;
        c.pretrain_config()?;
        c.augment_config()?;
        for k in [
            "data.train_identities",
            "data.test_identities",
            "data.per_identity",
            "eval.correction_trials",
        ] {
            c.get::<usize>(k)?;
        }
        c.get::<f32>("data.range")?;
        for (k, _) in CONFIG_KEYS.iter().filter(|(k, _)| k.ends_with(".seed")) {
            c.seed(k)?;
        }
        Ok(())
    }

    pub fn world_config(&self) -> Result<WorldConfig, ConfigError> {
        Ok(WorldConfig {
            layers: self.get("world.layers")?,
            dim: self.get("world.dim")?,
            image_side: self.get("world.image_side")?,
            hidden: self.get("world.hidden")?,
            planted: [self.list("world.gaze_layers")?, self.list("world.head_layers")?],
            planted_scale: self.get("world.planted_scale")?,
            output_gain: self.get("world.output_gain")?,
            seed: self.seed("world.seed")?,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights, ConfigError> {
        Ok(LossWeights {
            rec: self.get("loss.rec")?,
            perc: self.get("loss.perc")?,
            id: self.get("loss.id")?,
            att: self.get("loss.att")?,
            lab: self.get("loss.lab")?,
            emb: self.get("loss.emb")?,
            prob: self.get("loss.prob")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let max: usize = self.get("train.max_iterations")?;
        Ok(TrainConfig {
            mode: self.get::<Mode>("train.mode")?,
            label_source: self.get::<LabelSource>("train.label_source")?,
            batch_size: self.get("train.batch_size")?,
            epochs: self.get("train.epochs")?,
            max_iterations: (max > 0).then_some(max),
            lr: self.get("train.lr")?,
            decay: self.get("train.decay")?,
            decay_every: self.get("train.decay_every")?,
            clip_norm: self.get("train.clip_norm")?,
            weights: self.loss_weights()?,
            seed: self.seed("train.seed")?,
            eval_every: self.get("train.eval_every")?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, ConfigError> {
        Ok(PretrainConfig {
            epochs: self.get("estimator.epochs")?,
            batch_size: self.get("estimator.batch_size")?,
            lr: self.get("estimator.lr")?,
        })
    }

    pub fn augment_config(&self) -> Result<AugmentConfig, ConfigError> {
        Ok(AugmentConfig {
            percents: self.list("augment.percents")?.into_iter().map(|q| q as u32).collect(),
            identities: self.get("augment.identities")?,
            per_identity: self.get("augment.per_identity")?,
            test_identities: self.get("augment.test_identities")?,
            range: self.get("data.range")?,
            redirector_iterations: self.get("augment.iterations")?,
            label_source: self.get::<LabelSource>("augment.label_source")?,
            estimator: self.pretrain_config()?,
            seed: self.seed("augment.seed")?,
            downstream_seeds: self.get("augment.downstream_seeds")?,
            downstream_arch: EstimatorArch::Train,
            downstream_steps: self.get("augment.downstream_steps")?,
            known_source: self.get("augment.known_source")?,
        })
    }

    /// The resolved config in the same grammar it is read in, with `auto`
    /// seeds written out.
    pub fn render(&self) -> String {
        let mut out = format!("# redirtrans {VERSION} resolved config\n");
        for (k, v) in &self.values {
            let v = if k.ends_with(".seed") {
                self.seed(k).map(|s| s.to_string()).unwrap_or_else(|_| v.clone())
            } else {
                v.clone()
            };
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn seed_record(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.raw("seed"));
        for (k, _) in CONFIG_KEYS.iter().filter(|(k, _)| k.ends_with(".seed")) {
            if let Ok(s) = self.seed(k) {
                let _ = writeln!(out, "{k} = {s}");
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Parser, Debug)]
#[command(name = "redirtrans", version = VERSION, about = "Latent gaze and head redirection on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; every artifact is written here.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Master seed (overrides config and environment).
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Read and print angles in degrees.
    #[arg(long)]
    degrees: bool,
    /// Print reports as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct Angles {
    #[arg(long, allow_hyphen_values = true)]
    gaze_pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gaze_yaw: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    head_pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    head_yaw: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world and the train/test datasets.
    GenWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a frozen estimator (train: supervises training; eval: scores it).
    PretrainEstimator {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        arch: EstimatorArch,
        /// Dataset file to fit on instead of regenerating it.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a redirector.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        eval_estimator: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Redirection, disentanglement and layer-weight metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        eval_estimator: Option<PathBuf>,
        #[arg(long)]
        testset: Option<PathBuf>,
    },
    /// Disentanglement metrics only.
    Disentangle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        eval_estimator: Option<PathBuf>,
        #[arg(long)]
        testset: Option<PathBuf>,
    },
    /// Correct one latent to reference angles, or without --latent run the
    /// perturb-and-correct experiment.
    Correct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        latent: Option<PathBuf>,
        #[command(flatten)]
        angles: Angles,
        #[arg(long)]
        eval_estimator: Option<PathBuf>,
        #[arg(long)]
        testset: Option<PathBuf>,
    },
    /// Downstream-estimator augmentation experiment.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Central-difference check of every op and loss term.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Redirect one latent to given angles.
    Redirect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[command(flatten)]
        angles: Angles,
        /// Angles are offsets from the current estimate.
        #[arg(long)]
        relative: bool,
    },
}

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: ConfigError) -> Failure {
    Failure::Usage(e.to_string())
}

/// Entry point; returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            f.exit_code()
        }
    }
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    degrees: bool,
    json: bool,
}

impl Ctx {
    fn new(common: &Common, name: &str, extra: &[(String, String)]) -> Result<Self, Failure> {
        let text = match &common.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("cannot read config {}: {e}", p.display())))?),
            None => None,
        };
        let mut overrides = Vec::new();
        for s in &common.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {s:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        overrides.extend_from_slice(extra);
        if let Some(s) = common.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        let env = std::env::var(SEED_ENV).ok();
        let cfg = Config::resolve(text.as_deref(), env.as_deref(), &overrides).map_err(usage)?;
        fs::create_dir_all(&common.out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
        fs::write(common.out.join(format!("{name}.config")), cfg.render())?;
        fs::write(common.out.join(format!("{name}.seeds")), cfg.seed_record())?;
        fs::write(common.out.join("VERSION"), format!("redirtrans {VERSION}\n"))?;
        Ok(Self {
            cfg,
            out: common.out.clone(),
            degrees: common.degrees,
            json: common.json,
        })
    }

    fn world(&self) -> Result<WorldSpec, Failure> {
        Ok(WorldSpec::generate(self.cfg.world_config().map_err(usage)?)?)
    }

    fn data_seed(&self) -> Result<u64, Failure> {
        self.cfg.seed("data.seed").map_err(usage)
    }

    fn trainset(&self, world: &WorldSpec, file: Option<&Path>) -> Result<Vec<Sample>, Failure> {
        match file {
            Some(p) => Ok(world::load_dataset(p, world)?),
            None => Ok(world.sample_dataset(
                self.cfg.get("data.train_identities").map_err(usage)?,
                self.cfg.get("data.per_identity").map_err(usage)?,
                self.cfg.get("data.range").map_err(usage)?,
                derive_seed(self.data_seed()?, "train"),
            )?),
        }
    }

    fn testset(&self, world: &WorldSpec, file: Option<&Path>) -> Result<Vec<Sample>, Failure> {
        match file {
            Some(p) => Ok(world::load_dataset(p, world)?),
            None => Ok(world.sample_dataset(
                self.cfg.get("data.test_identities").map_err(usage)?,
                self.cfg.get("data.per_identity").map_err(usage)?,
                self.cfg.get("data.range").map_err(usage)?,
                derive_seed(self.data_seed()?, "test"),
            )?),
        }
    }

    fn angle(&self, x: f64) -> f32 {
        if self.degrees {
            x.to_radians() as f32
        } else {
            x as f32
        }
    }

    fn path_or(&self, p: Option<PathBuf>, default: &str) -> PathBuf {
        p.unwrap_or_else(|| self.out.join(default))
    }
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{what} not found: {}", path.display())))
    }
}

fn pair(p: Option<f64>, y: Option<f64>, what: &str) -> Result<Option<(f64, f64)>, Failure> {
    match (p, y) {
        (None, None) => Ok(None),
        (Some(p), Some(y)) => Ok(Some((p, y))),
        _ => Err(Failure::Usage(format!("{what} needs both --{what}-pitch and --{what}-yaw"))),
    }
}

fn targets(ctx: &Ctx, a: &Angles, relative: bool) -> Result<Targets, Failure> {
    let mut out: Targets = [None, None];
    for (i, (p, y, name)) in [(a.gaze_pitch, a.gaze_yaw, "gaze"), (a.head_pitch, a.head_yaw, "head")]
        .into_iter()
        .enumerate()
    {
        if let Some((p, y)) = pair(p, y, name)? {
            let c = Condition::new(ctx.angle(p), ctx.angle(y));
            out[i] = Some(if relative {
                RedirectTarget::Relative(c)
            } else {
                RedirectTarget::Absolute(c)
            });
        }
    }
    Ok(out)
}

fn emit_report(ctx: &Ctx, name: &str, report: &EvalReport) -> Outcome {
    fs::write(ctx.out.join(format!("{name}.csv")), report.to_csv())?;
    let mut per = String::from("metric,index,radians\n");
    for (k, vs) in &report.per_sample {
        for (i, v) in vs.iter().enumerate() {
            let _ = writeln!(per, "{k},{i},{v}");
        }
    }
    fs::write(ctx.out.join(format!("{name}_per_sample.csv")), per)?;
    let json = serde_json::to_string_pretty(&report.to_json())?;
    fs::write(ctx.out.join(format!("{name}.json")), &json)?;
    if ctx.json {
        println!("{json}");
    } else {
        print!("{}", report.to_text(ctx.degrees));
    }
    Ok(())
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenWorld { common } => {
            let ctx = Ctx::new(&common, "gen-world", &[])?;
            let world = ctx.world()?;
            crate::tensor::save_checkpoint(&ctx.out.join("world.rdtc"), &world.frozen_tensors())?;
            let train = ctx.trainset(&world, None)?;
            let test = ctx.testset(&world, None)?;
            world::save_dataset(&ctx.out.join("train.rdtd"), &train)?;
            world::save_dataset(&ctx.out.join("test.rdtd"), &test)?;
            println!("world written; {} train and {} test samples", train.len(), test.len());
            Ok(())
        }
        Command::PretrainEstimator { common, arch, dataset } => {
            let ctx = Ctx::new(&common, "pretrain-estimator", &[])?;
            let world = ctx.world()?;
            let (data, seed) = match arch {
                EstimatorArch::Train => (
                    ctx.trainset(&world, dataset.as_deref())?,
                    ctx.cfg.seed("estimator.seed").map_err(usage)?,
                ),
                EstimatorArch::Eval => {
                    let data = match dataset {
                        Some(p) => world::load_dataset(&p, &world)?,
                        None => world.sample_dataset(
                            ctx.cfg.get("eval_estimator.identities").map_err(usage)?,
                            ctx.cfg.get("data.per_identity").map_err(usage)?,
                            ctx.cfg.get("data.range").map_err(usage)?,
                            derive_seed(ctx.data_seed()?, "eval_estimator"),
                        )?,
                    };
                    (data, ctx.cfg.seed("eval_estimator.seed").map_err(usage)?)
                }
            };
            let test = ctx.testset(&world, None)?;
            let est = world::pretrain_estimator(&data, arch, seed, &ctx.cfg.pretrain_config().map_err(usage)?)?;
            let path = ctx.out.join(format!("estimator_{}.rdtc", arch.name()));
            est.save(&path)?;
            let (g, h) = world::estimator_error(&est, &test)?;
            let csv = format!(
                "attribute,radians,degrees\ngaze,{g},{}\nhead,{h},{}\n",
                g.to_degrees(),
                h.to_degrees()
            );
            fs::write(ctx.out.join(format!("estimator_{}_error.csv", arch.name())), &csv)?;
            if ctx.json {
                println!(
                    "{}",
                    serde_json::json!({ "gaze": g, "head": h, "n": test.len(), "checkpoint": path.display().to_string() })
                );
            } else if ctx.degrees {
                println!(
                    "held-out error: gaze {:.4} deg, head {:.4} deg ({} samples)",
                    g.to_degrees(),
                    h.to_degrees(),
                    test.len()
                );
            } else {
                println!("held-out error: gaze {g:.5} rad, head {h:.5} rad ({} samples)", test.len());
            }
            Ok(())
        }
        Command::Train {
            common,
            estimator,
            eval_estimator,
            mode,
            epochs,
            dataset,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(("train.mode".to_string(), m.name().to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("train.epochs".to_string(), e.to_string()));
            }
            if let Some(p) = &estimator {
                extra.push(("train.estimator".to_string(), p.display().to_string()));
            }
            if let Some(p) = &eval_estimator {
                extra.push(("train.eval_estimator".to_string(), p.display().to_string()));
            }
            let ctx = Ctx::new(&common, "train", &extra)?;
            let cfg = ctx.cfg.train_config().map_err(usage)?;
            let est_path = match ctx.cfg.raw("train.estimator") {
                "" => ctx.out.join("estimator_train.rdtc"),
                p => PathBuf::from(p),
            };
            require(&est_path, "estimator checkpoint")?;
            let eval_path = match ctx.cfg.raw("train.eval_estimator") {
                "" => ctx.out.join("estimator_eval.rdtc"),
                p => PathBuf::from(p),
            };
            let est = Estimator::load(&est_path)?;
            let eval_est = if eval_path.is_file() {
                Some(Estimator::load(&eval_path)?)
            } else {
                None
            };
            let world = ctx.world()?;
            let train = ctx.trainset(&world, dataset.as_deref())?;
            let test = ctx.testset(&world, None)?;
            let scorer = eval_est.as_ref().unwrap_or(&est);
            let started = std::time::Instant::now();
            let run = trainer::train(&cfg, &world, &est, &train, |red| {
                let r = eval::eval_redirection(red, &world, &test, scorer).map_err(|e| trainer::TrainError::Eval(e.to_string()))?;
                let metrics = vec![
                    ("gaze_redir_err".to_string(), r.gaze_redir_err.unwrap_or(f64::NAN)),
                    ("head_redir_err".to_string(), r.head_redir_err.unwrap_or(f64::NAN)),
                ];
                eprintln!(
                    "[{:>7.1}s] gaze {:.5} head {:.5}",
                    started.elapsed().as_secs_f64(),
                    metrics[0].1,
                    metrics[1].1
                );
                Ok(metrics)
            })?;
            run.redirector.save(&ctx.out.join("redirector.rdtc"))?;
            trainer::write_log_csv(fs::File::create(ctx.out.join("train_log.csv"))?, &run.log)?;
            trainer::write_eval_csv(fs::File::create(ctx.out.join("eval_log.csv"))?, &run.evals)?;
            let last = run.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            println!(
                "trained {} iterations in {:.1}s; final loss {last:.5}; scored with {}",
                run.log.len(),
                started.elapsed().as_secs_f64(),
                if eval_est.is_some() {
                    "the evaluation estimator"
                } else {
                    "the training estimator"
                }
            );
            Ok(())
        }
        Command::Eval {
            common,
            ckpt,
            eval_estimator,
            testset,
        } => {
            let ctx = Ctx::new(&common, "eval", &[])?;
            let (red, est) = load_pair(&ctx, ckpt, eval_estimator)?;
            let world = ctx.world()?;
            let test = ctx.testset(&world, testset.as_deref())?;
            let seed = ctx.cfg.seed("eval.seed").map_err(usage)?;
            let mut report = eval::eval_redirection(&red, &world, &test, &est)?;
            report.merge(eval::eval_disentanglement(&red, &world, &test, &est, seed)?);
            emit_report(&ctx, "eval_report", &report)?;
            if red.mode == Mode::Layerwise {
                let f = eval::eval_layer_weights(&red, &world)?;
                let csv = format!("attribute,planted_fraction\ngaze,{}\nhead,{}\n", f[0], f[1]);
                fs::write(ctx.out.join("layer_weights.csv"), csv)?;
                if !ctx.json {
                    println!("planted-layer weight share: gaze {:.4}, head {:.4}", f[0], f[1]);
                }
            }
            Ok(())
        }
        Command::Disentangle {
            common,
            ckpt,
            eval_estimator,
            testset,
        } => {
            let ctx = Ctx::new(&common, "disentangle", &[])?;
            let (red, est) = load_pair(&ctx, ckpt, eval_estimator)?;
            let world = ctx.world()?;
            let test = ctx.testset(&world, testset.as_deref())?;
            let seed = ctx.cfg.seed("eval.seed").map_err(usage)?;
            let report = eval::eval_disentanglement(&red, &world, &test, &est, seed)?;
            emit_report(&ctx, "disentangle_report", &report)
        }
        Command::Correct {
            common,
            ckpt,
            latent,
            angles,
            eval_estimator,
            testset,
        } => {
            let ctx = Ctx::new(&common, "correct", &[])?;
            let ckpt = ctx.path_or(ckpt, "redirector.rdtc");
            require(&ckpt, "redirector checkpoint")?;
            let red = Redirector::load(&ckpt)?;
            let world = ctx.world()?;
            if let Some(latent) = latent {
                let f = read_latent(&latent)?;
                let t = targets(&ctx, &angles, false)?;
                if t.iter().all(Option::is_none) {
                    return Err(Failure::Usage("correct needs reference angles".into()));
                }
                let reference = t.map(|t| match t {
                    Some(RedirectTarget::Absolute(c)) => Some(c),
                    _ => None,
                });
                let fixed = eval::correct(&red, &f, reference)?;
                write_latent(&ctx.out.join("corrected.rdtl"), &fixed)?;
                fs::write(
                    ctx.out.join("corrected.pgm"),
                    encode_pgm(&world.render(&fixed)?, world.config.image_side),
                )?;
                println!("corrected latent written to {}", ctx.out.join("corrected.rdtl").display());
                return Ok(());
            }
            let est_path = ctx.path_or(eval_estimator, "estimator_eval.rdtc");
            require(&est_path, "evaluation estimator checkpoint")?;
            let est = Estimator::load(&est_path)?;
            let test = ctx.testset(&world, testset.as_deref())?;
            let trials = ctx.cfg.get("eval.correction_trials").map_err(usage)?;
            let seed = ctx.cfg.seed("eval.seed").map_err(usage)?;
            let res = eval::perturb_and_correct(&red, &world, &test, &est, trials, seed)?;
            let mut csv = String::from("trial,sample,pre_err,post_err\n");
            for (i, t) in res.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{},{}", t.sample, t.pre_err, t.post_err);
            }
            fs::write(ctx.out.join("correction.csv"), csv)?;
            let improved = res.iter().filter(|t| t.post_err < t.pre_err).count();
            let scale = if ctx.degrees { 180.0 / std::f64::consts::PI } else { 1.0 };
            let unit = if ctx.degrees { "deg" } else { "rad" };
            let mean = |f: fn(&eval::CorrectionTrial) -> f64| res.iter().map(f).sum::<f64>() / res.len().max(1) as f64 * scale;
            println!(
                "correction improved {improved}/{} trials; mean gaze error {:.5} -> {:.5} {unit}",
                res.len(),
                mean(|t| t.pre_err),
                mean(|t| t.post_err)
            );
            Ok(())
        }
        Command::Augment { common } => {
            let ctx = Ctx::new(&common, "augment", &[])?;
            let world = ctx.world()?;
            let cfg = ctx.cfg.augment_config().map_err(usage)?;
            let rows = eval::run_augmentation_experiment(&world, &cfg, |m| eprintln!("{m}"))?;
            let csv = eval::augment_csv(&rows);
            fs::write(ctx.out.join("augment.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { common, points } => {
            let ctx = Ctx::new(&common, "gradcheck", &[])?;
            let seed: u64 = ctx.cfg.get("seed").map_err(usage)?;
            let results = losses::gradcheck_suite(points, seed)?;
            let mut csv = String::from("op,max_rel_err\n");
            for (name, err) in &results {
                println!("{name:<24} {err:.3e}");
                let _ = writeln!(csv, "{name},{err}");
            }
            fs::write(ctx.out.join("gradcheck.csv"), csv)?;
            let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
            if worst >= 1e-4 {
                return Err(Failure::Runtime(format!("gradcheck failed: worst relative error {worst:.3e}")));
            }
            println!("all {} checks below 1e-4 at {points} points each", results.len());
            Ok(())
        }
        Command::Redirect {
            common,
            ckpt,
            latent,
            angles,
            relative,
        } => {
            let ctx = Ctx::new(&common, "redirect", &[])?;
            require(&ckpt, "redirector checkpoint")?;
            let red = Redirector::load(&ckpt)?;
            let f = read_latent(&latent)?;
            let t = targets(&ctx, &angles, relative)?;
            if t.iter().all(Option::is_none) {
                return Err(Failure::Usage(
                    "redirect needs --gaze-pitch/--gaze-yaw and/or --head-pitch/--head-yaw".into(),
                ));
            }
            let edited = red.edit_latent(&f, &t)?;
            let world = ctx.world()?;
            let side = world.config.image_side;
            write_latent(&ctx.out.join("redirected.rdtl"), &edited)?;
            fs::write(ctx.out.join("source.pgm"), encode_pgm(&world.render(&f)?, side))?;
            fs::write(ctx.out.join("redirected.pgm"), encode_pgm(&world.render(&edited)?, side))?;
            println!("redirected latent and image written to {}", ctx.out.display());
            Ok(())
        }
    }
}

fn load_pair(ctx: &Ctx, ckpt: Option<PathBuf>, est: Option<PathBuf>) -> Result<(Redirector, Estimator), Failure> {
    let ckpt = ctx.path_or(ckpt, "redirector.rdtc");
    let est = ctx.path_or(est, "estimator_eval.rdtc");
    require(&ckpt, "redirector checkpoint")?;
    require(&est, "evaluation estimator checkpoint")?;
    Ok((Redirector::load(&ckpt)?, Estimator::load(&est)?))
}
