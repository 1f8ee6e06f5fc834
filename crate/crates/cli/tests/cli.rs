use std::path::Path;
use std::process::{Command, Output};

fn dcim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcim"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dcim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn param_count_paper_preset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("paper.cfg"), "run.preset = paper\n").unwrap();
    let o = dcim(dir.path(), &["param-count", "--config", "paper.cfg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let totals: Vec<f64> = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("total"))
        .map(|n| n.trim().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 3);
    assert!((totals[2] / 53e6 - 1.0).abs() <= 0.3, "{text}");
    assert!(text.contains("dcim"), "{text}");
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcim(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tiny = ["--set", "run.preset=tiny", "--set", "asr.epochs=2", "--set", "vsr.epochs=2", "--set", "avsr.epochs=1"];

    let o = dcim(d, &["synth", "--out", "corpus", "--n", "3", "--set", "run.preset=tiny"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("corpus/manifest.csv").exists() && d.join("corpus/0002.dvc").exists());

    let mut args = vec!["train", "--stage", "asr", "--set", "run.out=a"];
    args.extend(tiny);
    let o = dcim(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.resolved", "asr.ckpt", "asr_metrics.csv"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    let resolved = std::fs::read_to_string(d.join("a/config.resolved")).unwrap();
    assert!(resolved.contains("run.preset = tiny") && resolved.contains("asr.epochs = 2"), "{resolved}");
    let metrics = std::fs::read_to_string(d.join("a/asr_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let mut args = vec!["train", "--stage", "vsr", "--set", "run.out=v"];
    args.extend(tiny);
    assert!(dcim(d, &args).status.success());
    let mut args = vec!["train", "--stage", "avsr", "--init-asr", "a/asr.ckpt", "--init-vsr", "v/vsr.ckpt", "--set", "run.out=av"];
    args.extend(tiny);
    let o = dcim(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = dcim(d, &["eval", "--ckpt", "a/asr.ckpt", "--corpus", "corpus", "--snr", "-5", "--hyps", "h.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("WER "));
    assert_eq!(std::fs::read_to_string(d.join("h.txt")).unwrap().lines().count(), 4);

    let o = dcim(d, &["noise-sweep", "--ckpt-av", "av/avsr.ckpt", "--ckpt-a", "a/asr.ckpt", "--corpus", "corpus", "--out", "s.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(csv.lines().next(), Some("snr,wer_audio_only,wer_av"));
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("-5,"));

    let mut args = vec!["ablate", "--modes", "dual,v2a", "--init-asr", "a/asr.ckpt", "--init-vsr", "v/vsr.ckpt", "--set", "run.out=ab"];
    args.extend(tiny);
    let o = dcim(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("mode,params,adapter_params,snr,eval_wer"));

    // the asr checkpoint is not an avsr one
    let o = dcim(d, &["noise-sweep", "--ckpt-av", "a/asr.ckpt", "--ckpt-a", "a/asr.ckpt", "--corpus", "corpus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn errors_are_named_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: [(&[&str], &str); 5] = [
        (&["eval", "--ckpt", "missing.ckpt", "--corpus", "."], "missing.ckpt"),
        (&["train", "--stage", "asr", "--set", "bogus.key=1"], "unknown key `bogus.key`"),
        (&["train", "--stage", "asr", "--config", "absent.cfg"], "absent.cfg"),
        (&["train", "--stage", "lip"], "unknown stage"),
        (&["frobnicate"], "unrecognized subcommand"),
    ];
    for (args, needle) in cases {
        let o = dcim(d, args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains(needle), "{args:?}: {}", stderr(&o));
    }
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    std::fs::create_dir(d.join("empty")).unwrap();
    let o = dcim(d, &["eval", "--ckpt", "junk.ckpt", "--corpus", "empty"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcim(
        dir.path(),
        &["train", "--stage", "asr", "--set", "run.preset=tiny", "--set", "asr.base_lr=1e30", "--set", "asr.epochs=3"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}
