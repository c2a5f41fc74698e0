use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pocketgroove::grid::segment_to_midi;
use pocketgroove::midi_io::write_smf;
use pocketgroove::synthdata::{generate_corpus, two_genre_specs};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pocketgroove"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

/// A synthetic corpus, two MIDI files and tiny trained checkpoints.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let spec = repo_file("configs/two_genre.toml");
        let conf = repo_file("configs/smoke.conf");
        ok(&dir, &["synth", "--spec", &spec, "--count", "10", "--seed", "3", "--out", "corpus"]);
        let segs = generate_corpus(&two_genre_specs(), 1, 50).unwrap();
        for (seg, name) in segs.iter().zip(["a.mid", "b.mid"]) {
            std::fs::write(dir.join(name), write_smf(&segment_to_midi(seg, 100.0)).unwrap()).unwrap();
        }
        let m = "corpus/manifest.tsv";
        for (kind, out) in [("pocketvae", "vae.ckpt"), ("genre-clf", "clf.ckpt"), ("onestep", "one.ckpt")] {
            ok(&dir, &["train", "--model", kind, "--manifest", m, "--config", &conf, "--out", out, "--log-every", "0"]);
        }
        ok(&dir, &["train", "--model", "prior", "--manifest", m, "--config", &conf, "--vae", "vae.ckpt", "--out", "prior.ckpt", "--log-every", "0"]);
        dir
    })
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn help_for_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    for sub in ["preprocess", "synth", "train", "transfer", "generate", "knn", "eval", "gradcheck"] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_two() {
    let out = bin().args(["train", "--model", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = workspace();
    let out = run(dir, &["knn", "--manifest", "missing.tsv", "--template", "a.mid", "--out", "x.mid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = workspace();
    std::fs::write(dir.join("bad.conf"), "stpes = 10\n").unwrap();
    let out = run(dir, &["train", "--model", "onestep", "--manifest", "corpus/manifest.tsv", "--config", "bad.conf", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpes"));
}

#[test]
fn prior_without_vae_is_a_usage_error() {
    let dir = workspace();
    let conf = repo_file("configs/smoke.conf");
    let out = run(dir, &["train", "--model", "prior", "--manifest", "corpus/manifest.tsv", "--config", &conf, "--out", "p.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn knn_k_larger_than_corpus_is_a_usage_error() {
    let dir = workspace();
    let out = run(dir, &["knn", "--manifest", "corpus/manifest.tsv", "--template", "a.mid", "--k", "20", "--split", "test", "--out", "k.mid"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    ok(dir, &["knn", "--manifest", "corpus/manifest.tsv", "--template", "a.mid", "--k", "5", "--out", "k.mid"]);
    assert!(!read(dir, "k.mid").is_empty());
}

#[test]
fn eval_oracle_identity_is_perfect() {
    let dir = workspace();
    let out = run(dir, &["eval", "--manifest", "corpus/manifest.tsv", "--oracle-identity", "--split", "all", "--report", "ident"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.join("ident/metrics.tsv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split('\t').take(5).map(|x| x.parse().unwrap()).collect();
    assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn eval_with_models_writes_all_reports() {
    let dir = workspace();
    ok(dir, &["eval", "--manifest", "corpus/manifest.tsv", "--ckpt", "vae.ckpt", "--genre-clf", "clf.ckpt", "--report", "rep"]);
    for f in ["metrics.tsv", "confusion.tsv", "codebook.tsv"] {
        assert!(dir.join("rep").join(f).exists(), "{f}");
    }
    ok(dir, &["eval", "--manifest", "corpus/manifest.tsv", "--ckpt", "one.ckpt", "--report", "rep1"]);
}

/// Every subcommand twice with identical flags; outputs must match byte for byte.
#[test]
fn subcommands_are_deterministic() {
    let dir = workspace();
    let conf = repo_file("configs/smoke.conf");
    let spec = repo_file("configs/two_genre.toml");
    for tag in ["run1", "run2"] {
        std::fs::create_dir_all(dir.join(tag)).unwrap();
        let o = |name: &str| format!("{tag}/{name}");
        ok(dir, &["synth", "--spec", &spec, "--count", "3", "--seed", "9", "--out", &o("syn")]);
        ok(dir, &["train", "--model", "pocketvae", "--manifest", "corpus/manifest.tsv", "--config", &conf, "--out", &o("det.ckpt"), "--log-every", "0"]);
        ok(dir, &["transfer", "--template", "a.mid", "--reference", "b.mid", "--ckpt", "vae.ckpt", "--genre", "funk", "--out", &o("t.mid")]);
        ok(dir, &["transfer", "--template", "a.mid", "--reference", "b.mid", "--ckpt", "one.ckpt", "--out", &o("t1.mid")]);
        ok(dir, &["generate", "--template", "a.mid", "--genre", "rock", "--ckpt", "vae.ckpt", "--prior", "prior.ckpt", "--seed", "4", "--out", &o("g.mid")]);
        ok(dir, &["knn", "--manifest", "corpus/manifest.tsv", "--template", "b.mid", "--k", "3", "--out", &o("k.mid")]);
        ok(dir, &["eval", "--manifest", "corpus/manifest.tsv", "--ckpt", "vae.ckpt", "--report", &o("ev")]);
    }
    for f in ["syn/manifest.tsv", "syn/funk_0_0001.pgseg", "det.ckpt", "det.loss.tsv", "t.mid", "t1.mid", "g.mid", "k.mid", "ev/metrics.tsv", "ev/codebook.tsv"] {
        assert_eq!(read(dir, &format!("run1/{f}")), read(dir, &format!("run2/{f}")), "{f}");
    }
}

#[test]
fn pattern_files_drive_generation() {
    let dir = workspace();
    let mt: String = (0..32).map(|t| if t % 2 == 0 { "1\n" } else { "-1\n" }).collect();
    std::fs::write(dir.join("mt.tsv"), mt).unwrap();
    std::fs::write(dir.join("short.tsv"), "1\n0\n").unwrap();
    ok(dir, &["generate", "--template", "a.mid", "--genre", "funk", "--ckpt", "vae.ckpt", "--prior", "prior.ckpt", "--mt-pattern", "mt.tsv", "--out", "gp.mid"]);
    let out = run(dir, &["generate", "--template", "a.mid", "--genre", "funk", "--ckpt", "vae.ckpt", "--prior", "prior.ckpt", "--mt-pattern", "short.tsv", "--out", "gp.mid"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preprocess_writes_segments_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("midi/funk");
    std::fs::create_dir_all(&midi).unwrap();
    let segs = generate_corpus(&two_genre_specs(), 3, 1).unwrap();
    for (k, seg) in segs.iter().enumerate() {
        std::fs::write(midi.join(format!("t{k}.mid")), write_smf(&segment_to_midi(seg, 100.0)).unwrap()).unwrap();
    }
    ok(dir.path(), &["preprocess", "--in", "midi", "--out", "segs", "--manifest", "m.tsv", "--seed", "2"]);
    let text = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
    assert!(text.lines().count() > 1, "{text}");
    ok(dir.path(), &["eval", "--manifest", "m.tsv", "--oracle-identity", "--split", "all", "--report", "r"]);
}
