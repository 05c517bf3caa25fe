//! End-to-end runs of the `snm` binary on the bundled 1k-sentence fixture.
//!
//! `SNM_BLESS=1 cargo test -p snm --test cli` rewrites the golden file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snm::formats::{parse_summary, read_model, read_vocab};
use snm_core::hash::KeyHasher;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/kjv-1k.txt");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden/kjv-1k.txt");

fn snm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snm"))
        .args(args)
        .env_remove("SNM_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = snm(args);
    assert!(
        out.status.success(),
        "snm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fingerprint(path: &Path) -> String {
    let mut h = KeyHasher::new(0);
    h.write(&fs::read(path).unwrap());
    format!("{:016x}", h.finish())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Split the fixture 9:1 and run build-vocab, count, train, eval.
    fn pipeline(extra_train: &[&str]) -> Run {
        let run = Run {
            dir: tempfile::tempdir().unwrap(),
        };
        let text = fs::read_to_string(FIXTURE).unwrap();
        let (mut train, mut test) = (String::new(), String::new());
        for (n, l) in text.lines().enumerate() {
            let out = if n % 10 == 9 { &mut test } else { &mut train };
            out.push_str(l);
            out.push('\n');
        }
        fs::write(run.path("train.txt"), train).unwrap();
        fs::write(run.path("test.txt"), test).unwrap();
        let (corpus, vocab, counts, model) = (
            run.path("train.txt"),
            run.path("vocab"),
            run.path("counts"),
            run.path("model"),
        );
        ok(&["build-vocab", "--corpus", s(&corpus), "--vocab", s(&vocab), "--min-count", "2"]);
        ok(&["count", "--corpus", s(&corpus), "--vocab", s(&vocab), "--counts", s(&counts), "--preset", "snm5"]);
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--vocab",
            s(&vocab),
            "--counts",
            s(&counts),
            "--model",
            s(&model),
            "--bits",
            "14",
            "--seed",
            "7",
            "--learning-rate",
            "0.01",
        ];
        args.extend_from_slice(extra_train);
        ok(&args);
        let report = ok(&["eval", "--model", s(&model), "--test", s(&run.path("test.txt")), "--deterministic"]);
        fs::write(run.path("report"), report).unwrap();
        run
    }

    fn golden(&self) -> String {
        let summary = fs::read_to_string(self.path("report")).unwrap();
        format!(
            "vocab {}\ncounts {}\nmodel {}\n{}",
            fingerprint(&self.path("vocab")),
            fingerprint(&self.path("counts")),
            fingerprint(&self.path("model")),
            summary.lines().last().unwrap()
        )
    }
}

#[test]
fn deterministic_pipeline_matches_golden_and_repeats() {
    let a = Run::pipeline(&["--deterministic"]);
    let b = Run::pipeline(&["--deterministic"]);
    for f in ["vocab", "counts", "model", "report"] {
        assert_eq!(fs::read(a.path(f)).unwrap(), fs::read(b.path(f)).unwrap(), "{f} differs");
    }
    let got = a.golden();
    if std::env::var_os("SNM_BLESS").is_some() {
        fs::create_dir_all(Path::new(GOLDEN).parent().unwrap()).unwrap();
        fs::write(GOLDEN, format!("{got}\n")).unwrap();
    }
    let want = fs::read_to_string(GOLDEN).expect("golden file present");
    assert_eq!(got.trim_end(), want.trim_end());
}

#[test]
fn trained_model_beats_unadjusted_model() {
    let run = Run::pipeline(&["--deterministic"]);
    let test = run.path("test.txt");
    let zero = run.path("zero");
    ok(&[
        "train", "--corpus", s(&run.path("train.txt")), "--vocab", s(&run.path("vocab")),
        "--counts", s(&run.path("counts")), "--model", s(&zero), "--bits", "14", "--seed", "7",
        "--learning-rate", "0", "--deterministic",
    ]);
    let trained = parse_summary(&fs::read_to_string(run.path("report")).unwrap()).unwrap();
    let base = parse_summary(&ok(&["eval", "--model", s(&zero), "--test", s(&test)])).unwrap();
    assert!(trained.perplexity < base.perplexity, "{trained:?} vs {base:?}");
    assert_eq!(trained.token_count, base.token_count);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let run = Run::pipeline(&["--deterministic"]);
    let (corpus, vocab, counts) = (run.path("train.txt"), run.path("vocab"), run.path("counts"));
    let common = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train", "--corpus", s(&corpus), "--vocab", s(&vocab), "--counts", s(&counts),
            "--model", s(out), "--bits", "14", "--seed", "7", "--learning-rate", "0",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        read_model(out).unwrap()
    };
    let fresh = common(&run.path("fresh"), &["--deterministic"]);
    assert!(fresh.table().as_slice().iter().all(|&w| w == 0.0));
    let trained = read_model(&run.path("model")).unwrap();
    let model = s(&run.path("model")).to_owned();
    let kept = common(&run.path("kept"), &["--init", &model, "--workers", "2"]);
    assert_eq!(kept.table(), trained.table());
}

#[test]
fn hogwild_training_runs_and_learns() {
    let run = Run::pipeline(&["--workers", "3"]);
    let trained = parse_summary(&fs::read_to_string(run.path("report")).unwrap()).unwrap();
    assert!(trained.perplexity.is_finite() && trained.perplexity > 1.0);
    let m = read_model(&run.path("model")).unwrap();
    assert!(m.table().as_slice().iter().any(|&w| w != 0.0));
}

#[test]
fn uniform_eval_reports_vocabulary_size() {
    let run = Run::pipeline(&["--deterministic"]);
    let out = ok(&["eval", "--uniform", "--vocab", s(&run.path("vocab")), "--test", s(&run.path("test.txt"))]);
    let r = parse_summary(&out).unwrap();
    let v = read_vocab(&run.path("vocab")).unwrap().len() as f64;
    assert!((r.perplexity - v).abs() < 1e-6, "{} vs {v}", r.perplexity);
}

#[test]
fn interpolation_with_unit_weight_is_identity() {
    let run = Run::pipeline(&["--deterministic"]);
    let (test, s1, s2) = (run.path("test.txt"), run.path("s1"), run.path("s2"));
    let r1 = ok(&["eval", "--model", s(&run.path("model")), "--test", s(&test), "--stream-out", s(&s1)]);
    ok(&["eval", "--uniform", "--vocab", s(&run.path("vocab")), "--test", s(&test), "--stream-out", s(&s2)]);
    let streams = format!("{},{}", s(&s1), s(&s2));
    let mix = ok(&["interpolate", "--streams", &streams, "--weights", "1,0"]);
    let a = parse_summary(&r1).unwrap().perplexity;
    let b = parse_summary(&mix).unwrap().perplexity;
    assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    let fitted = ok(&["interpolate", "--streams", &streams]);
    assert!(fitted.starts_with("weights: "));
    assert!(parse_summary(&fitted).unwrap().perplexity <= a * (1.0 + 1e-10));
}

#[test]
fn inspect_matches_library_values() {
    let run = Run::pipeline(&["--deterministic"]);
    let zero = run.path("zero");
    ok(&[
        "train", "--corpus", s(&run.path("train.txt")), "--vocab", s(&run.path("vocab")),
        "--counts", s(&run.path("counts")), "--model", s(&zero), "--learning-rate", "0", "--deterministic",
    ]);
    let out = ok(&["inspect", "--model", s(&zero), "[]"]);
    let row_sum: f64 = field(&out, "row_sum").parse().unwrap();
    assert!((row_sum - 1.0).abs() < 1e-12, "{out}");

    let path = run.path("model");
    let model = read_model(&path).unwrap();
    let vocab = model.vocab();
    let key = snm_core::features::FeatureKey::parse("[the]", vocab).unwrap();
    let i = model.counts().lookup(&key).unwrap();
    let lord = vocab.id("LORD").unwrap();
    let out = ok(&["inspect", "--model", s(&path), "[the]", "--target", "LORD"]);
    let entry: f64 = field(&out, "entry").parse().unwrap();
    assert_eq!(entry, model.entry(i, lord).unwrap());
    let count: u64 = field(&out, "count").parse().unwrap();
    assert_eq!(count, model.counts().count(i, lord));
    let total: u64 = field(&out, "total").parse().unwrap();
    assert_eq!(total, model.counts().total(i));
    let row_sum: f64 = field(&out, "row_sum").parse().unwrap();
    assert_eq!(row_sum, model.row_sums().unwrap()[i as usize]);
    let a: f64 = field(&out, "adjustment").parse().unwrap();
    let rf = model.counts().relative_frequency(i, lord).unwrap();
    assert!((a.exp() * rf - entry).abs() <= 1e-12 * entry);
    let conjunctions = out.lines().filter(|l| l.starts_with("mf|")).count();
    assert!(conjunctions >= 31);

    let mf_line = out.lines().find(|l| l.starts_with("mf|")).unwrap();
    let mf_key = mf_line.split('\t').next().unwrap();
    let shown = ok(&["inspect", "--model", s(&path), mf_key]);
    let w: f64 = field(&shown, "weight").parse().unwrap();
    assert_eq!(w, mf_line.split('\t').nth(3).unwrap().parse::<f64>().unwrap());
}

fn field<'a>(text: &'a str, name: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no {name} in {text}"))
}

#[test]
fn inspect_failures_leave_no_output() {
    let run = Run::pipeline(&["--deterministic"]);
    let out = snm(&["inspect", "--model", s(&run.path("model")), "[no-such-word]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let broken = run.path("broken");
    let mut bytes = fs::read(run.path("model")).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&broken, bytes).unwrap();
    let out = snm(&["inspect", "--model", s(&broken), "[]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(snm(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(snm(&["build-vocab"]).status.code(), Some(2));
    assert_eq!(snm(&["train", "--bits", "many"]).status.code(), Some(2));
    let missing = dir.path().join("missing.txt");
    let vocab = dir.path().join("v");
    let out = snm(&["build-vocab", "--corpus", s(&missing), "--vocab", s(&vocab)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));
    assert!(!vocab.exists());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "corpus = \"x\"\nno_such_setting = 1\n").unwrap();
    assert_eq!(snm(&["--config", s(&cfg), "build-vocab"]).status.code(), Some(2));
    assert_eq!(snm(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_environment_supply_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (vocab, other) = (dir.path().join("vocab"), dir.path().join("other"));
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!("corpus = {FIXTURE:?}\nvocab = {:?}\nmin_count = 3\n", s(&vocab)),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "build-vocab"]);
    assert_eq!(read_vocab(&vocab).unwrap().min_count(), 3);
    ok(&["--config", s(&cfg), "build-vocab", "--vocab", s(&other), "--min-count", "5"]);
    assert_eq!(read_vocab(&other).unwrap().min_count(), 5);

    let env_vocab = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_snm"))
        .args(["build-vocab"])
        .env("SNM_CORPUS", FIXTURE)
        .env("SNM_VOCAB", &env_vocab)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&env_vocab).unwrap(), {
        ok(&["build-vocab", "--corpus", FIXTURE, "--vocab", s(&other)]);
        fs::read(&other).unwrap()
    });
}

#[test]
fn checkpointing_does_not_change_the_result() {
    let run = Run::pipeline(&["--deterministic"]);
    let (out, ckpt) = (run.path("again"), run.path("ckpt"));
    ok(&[
        "train", "--corpus", s(&run.path("train.txt")), "--vocab", s(&run.path("vocab")),
        "--counts", s(&run.path("counts")), "--model", s(&out), "--bits", "14", "--seed", "7",
        "--learning-rate", "0.01", "--deterministic", "--checkpoint-every", "5000",
        "--checkpoint", s(&ckpt),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(run.path("model")).unwrap());
    let saved = read_model(&ckpt).unwrap();
    assert_eq!(saved.table(), read_model(&out).unwrap().table());
}
