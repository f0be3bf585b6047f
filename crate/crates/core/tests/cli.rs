use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use redirtrans::cli::{decode_latent, encode_latent, read_latent, write_latent, LATENT_MAGIC};
use redirtrans::world::{Latent, WorldConfig, WorldSpec};

// Small enough that the whole pipeline runs in a few seconds.
const TINY: &str = "\
seed = 5
world.layers = 4
world.dim = 8
world.image_side = 8
world.hidden = 16
data.train_identities = 12
data.test_identities = 4
estimator.epochs = 2
eval_estimator.identities = 12
train.epochs = 1
train.eval_every = 0
eval.correction_trials = 4
augment.identities = 8
augment.test_identities = 4
augment.iterations = 10
augment.downstream_seeds = 1
augment.downstream_steps = 10
";

fn redirtrans(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redirtrans"))
        .args(args)
        .current_dir(dir)
        .env_remove("REDIRTRANS_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn tiny_world() -> WorldSpec {
    WorldSpec::generate(WorldConfig {
        layers: 4,
        dim: 8,
        image_side: 8,
        hidden: 16,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn gradcheck_subcommand_succeeds() {
    let dir = tiny_dir();
    let o = redirtrans(&["gradcheck", "--points", "2", "--out", "gc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("gc/gradcheck.csv")).unwrap();
    assert!(csv.starts_with("op,max_rel_err\n"));
    assert!(csv.lines().count() > 30);
    assert!(dir.path().join("gc/VERSION").is_file());
    assert!(dir.path().join("gc/gradcheck.seeds").is_file());
}

#[test]
fn missing_estimator_is_a_runtime_error_naming_the_path() {
    let dir = tiny_dir();
    let o = redirtrans(
        &["train", "--config", "tiny.cfg", "--out", "r", "--estimator", "nowhere/est.rdtc"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("estimator checkpoint not found"), "{msg}");
    assert!(msg.contains("nowhere/est.rdtc"), "{msg}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tiny_dir();
    for args in [
        vec!["frobnicate"],
        vec!["gradcheck", "--no-such-flag"],
        vec!["gradcheck", "--set", "train.batchsize=2"],
        vec!["gradcheck", "--set", "seed"],
        vec!["gradcheck", "--set", "train.lr=fast"],
    ] {
        let o = redirtrans(&args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    fs::write(dir.path().join("bad.cfg"), "seed 3\n").unwrap();
    let o = redirtrans(&["gen-world", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn seed_precedence_reaches_the_run_directory() {
    let dir = tiny_dir();
    let resolved = |out: &str| {
        let text = fs::read_to_string(dir.path().join(out).join("gradcheck.config")).unwrap();
        text.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_redirtrans"));
        c.args(args).current_dir(dir.path()).env_remove("REDIRTRANS_SEED");
        if let Some(s) = env {
            c.env("REDIRTRANS_SEED", s);
        }
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&["gradcheck", "--points", "1", "--config", "tiny.cfg", "--out", "a"], None);
    assert_eq!(resolved("a"), "seed = 5");
    run(&["gradcheck", "--points", "1", "--config", "tiny.cfg", "--out", "b"], Some("11"));
    assert_eq!(resolved("b"), "seed = 11");
    run(
        &["gradcheck", "--points", "1", "--config", "tiny.cfg", "--out", "c", "--seed", "13"],
        Some("11"),
    );
    assert_eq!(resolved("c"), "seed = 13");
}

#[test]
fn latent_files_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let f = tiny_world().sample_identity(3);
    let path = dir.path().join("f.rdtl");
    write_latent(&path, &f).unwrap();
    assert_eq!(read_latent(&path).unwrap(), f);

    let bytes = encode_latent(&f);
    assert_eq!(&bytes[..4], LATENT_MAGIC);
    for cut in [0, 3, 8, 15, bytes.len() - 1] {
        assert!(decode_latent(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_latent(&long).is_err());
    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"RDTC");
    assert_eq!(decode_latent(&wrong).unwrap_err().to_string(), "not a RDTL file");
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_latent(&version).unwrap_err().to_string().contains("version"));
}

#[test]
fn full_pipeline_on_a_tiny_world() {
    let dir = tiny_dir();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = redirtrans(args, p);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let base = ["--config", "tiny.cfg", "--out", "run"];
    let with = |cmd: &str, extra: &[&'static str]| -> Vec<String> {
        std::iter::once(cmd.to_string())
            .chain(base.iter().map(|s| s.to_string()))
            .chain(extra.iter().map(|s| s.to_string()))
            .collect()
    };
    let call = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    call(with("gen-world", &[]));
    for f in ["world.rdtc", "train.rdtd", "test.rdtd", "gen-world.config", "VERSION"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }
    call(with("pretrain-estimator", &["--arch", "train", "--dataset", "run/train.rdtd"]));
    call(with("pretrain-estimator", &["--arch", "eval"]));
    let out = call(with("train", &[]));
    assert!(out.contains("scored with the evaluation estimator"), "{out}");
    let log = fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,rec,perc,att,id,lab,emb,prob,total\n"));
    assert_eq!(log.lines().count(), 1 + 48 / 2);

    let json = call(with("eval", &["--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["gaze_redir_err"]["radians"].as_f64().unwrap().is_finite());
    assert!(p.join("run/layer_weights.csv").is_file());
    call(with("disentangle", &[]));
    let out = call(with("correct", &[]));
    assert!(out.contains("/4 trials"), "{out}");

    let f = tiny_world().sample_identity(1);
    write_latent(&p.join("f.rdtl"), &f).unwrap();
    call(with(
        "redirect",
        &[
            "--ckpt",
            "run/redirector.rdtc",
            "--latent",
            "f.rdtl",
            "--gaze-pitch",
            "0.1",
            "--gaze-yaw",
            "-0.2",
        ],
    ));
    let rad = read_latent(&p.join("run/redirected.rdtl")).unwrap();
    assert_eq!(rad.layers(), 4);
    let pgm = fs::read(p.join("run/redirected.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);

    let deg = [
        "--degrees",
        "--gaze-pitch",
        "5.729577951308232",
        "--gaze-yaw",
        "-11.459155902616464",
    ];
    let mut args = with("redirect", &["--ckpt", "run/redirector.rdtc", "--latent", "f.rdtl"]);
    args.extend(deg.iter().map(|s| s.to_string()));
    call(args);
    let by_degrees: Latent = read_latent(&p.join("run/redirected.rdtl")).unwrap();
    assert!(by_degrees.max_abs_diff(&rad) < 1e-6);

    call(with("correct", &["--latent", "f.rdtl", "--gaze-pitch", "0", "--gaze-yaw", "0"]));
    assert!(p.join("run/corrected.rdtl").is_file());

    let o = redirtrans(
        &[
            "redirect",
            "--out",
            "run",
            "--ckpt",
            "run/redirector.rdtc",
            "--latent",
            "f.rdtl",
            "--gaze-pitch",
            "0.1",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(1));

    let csv = call(with("augment", &["--set", "augment.percents=50,100"]));
    assert!(csv.starts_with("percent,"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
}
