mod common;

use std::fs;
use std::process::Command;

use cavit::attnviz::read_pgm;
use cavit::runconfig::{Preset, RunConfig};
use common::cli;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cavit"));
    c.env_remove("CAVIT_SEED");
    c
}

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes_from_the_binary() {
    let ok = bin().args(["count", "--csv"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("sublayer,params,flops\n"));
    assert!(String::from_utf8_lossy(&ok.stderr).contains("# resolved configuration"));

    let usage = bin().args(["count", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    assert!(usage.stdout.is_empty());

    let missing = bin()
        .args(["eval", "--checkpoint", "/nonexistent/x.cavt", "--data", "/nonexistent/d.cavd"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
}

#[test]
fn seed_env_var_overrides_file_but_not_flag() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "seed = 5  # from file\n").unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["count", "--config", p(&conf)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = env {
            c.env("CAVIT_SEED", e);
        }
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0));
        let err = String::from_utf8(o.stderr).unwrap();
        err.lines().find(|l| l.starts_with("seed ")).unwrap().to_string()
    };
    assert!(run(None, None).contains("= 5  # "));
    assert!(run(Some("9"), None).contains("= 9  # env"));
    assert!(run(Some("9"), Some("3")).contains("= 3  # flag"));
    let bad = bin().env("CAVIT_SEED", "abc").args(["count"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_lists_every_flag() {
    let (code, out, _) = cli(&["--help"], None);
    assert_eq!(code, 0);
    for sub in ["gen-data", "train", "eval", "count", "gradcheck", "attnmap", "ablate"] {
        assert!(out.contains(sub), "{sub}");
    }
    let (code, out, _) = cli(&["train", "--help"], None);
    assert_eq!(code, 0);
    for flag in ["--config", "--preset", "--variant", "--seed", "--set", "--data", "--epochs", "--out"] {
        assert!(out.contains(flag), "{flag}");
    }
    let (_, out, _) = cli(&["attnmap", "--help"], None);
    for flag in ["--checkpoint", "--image-index", "--block", "--cls-row-only"] {
        assert!(out.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&[], None).0, 2);
    assert_eq!(cli(&["count", "--set", "bogus=1"], None).0, 2);
    assert_eq!(cli(&["count", "--set", "depth=-1"], None).0, 2);
    assert_eq!(cli(&["count", "--variant", "nope"], None).0, 2);
    assert_eq!(cli(&["count", "--set", "embed_dim=15", "--set", "spatial_heads=2"], None).0, 2);
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, "depth = 2\nwidth = 3\n").unwrap();
    let (code, _, err) = cli(&["count", "--config", p(&conf)], None);
    assert_eq!(code, 2);
    assert!(err.contains(":2:"), "{err}");
}

#[test]
fn count_large_preset_baseline_is_near_5_7m() {
    let (code, out, _) = cli(&["count", "--preset", "paper", "--csv"], None);
    assert_eq!(code, 0);
    let total = out.lines().find(|l| l.starts_with("total,")).unwrap();
    let params: f64 = total.split(',').nth(1).unwrap().parse().unwrap();
    assert!((params / 5.7e6 - 1.0).abs() <= 0.05, "{params}");

    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = cli(&["count", "--preset", "paper", "--variant", "cavit", "--out", p(dir.path())], None);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert!(csv.starts_with("sublayer,params,flops\n"));
    assert!(csv.contains("blocks.11.channel_attn,"));
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let (code, out, _) = cli(&["gradcheck"], None);
    assert_eq!(code, 0, "{out}");
    let last = out.lines().last().unwrap();
    let err: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4);
    assert!(out.contains("blocks.0.channel_attn"));
    for v in ["baseline_vit", "channel_only", "cls_swapped"] {
        assert_eq!(cli(&["gradcheck", "--variant", v], None).0, 0, "{v}");
    }
    // An impossible threshold reports failure.
    assert_eq!(cli(&["gradcheck", "--threshold", "1e-300"], None).0, 1);
}

#[test]
fn gen_train_eval_attnmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bars.cavd");
    let run = dir.path().join("run");
    assert_eq!(cli(&["gen-data", "--count", "120", "--output", p(&data)], None).0, 0);
    let (code, out, _) = cli(
        &["train", "--data", p(&data), "--epochs", "3", "--out", p(&run)],
        None,
    );
    assert_eq!(code, 0);
    assert!(out.starts_with("epoch,loss,train_acc,val_acc\n"));
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4);
    assert_eq!(out, hist);
    let conf = fs::read_to_string(run.join("config.txt")).unwrap();
    let mut rc = RunConfig::preset(Preset::Desk);
    rc.apply_text(&conf, std::path::Path::new("config.txt")).unwrap();
    assert_eq!(rc.render().lines().count(), conf.lines().count());

    let ckpt = run.join("checkpoint.cavt");
    let (code, out, _) = cli(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)], None);
    assert_eq!(code, 0);
    assert!(out.starts_with("accuracy "));

    let prefix = dir.path().join("maps/cavit");
    let (code, _, _) = cli(
        &["attnmap", "--checkpoint", p(&ckpt), "--data", p(&data), "--image-index", "3", "--out", p(&prefix)],
        None,
    );
    assert_eq!(code, 0);
    let pgm = fs::read(dir.path().join("maps/cavit.pgm")).unwrap();
    assert_eq!(read_pgm(&pgm).map(|(w, h, _)| (w, h)), Some((4, 4)));
    let up = fs::read(dir.path().join("maps/cavit_up.pgm")).unwrap();
    assert_eq!(read_pgm(&up).map(|(w, h, _)| (w, h)), Some((32, 32)));
    assert_eq!(fs::read_to_string(dir.path().join("maps/cavit.csv")).unwrap().lines().count(), 4);
    assert_eq!(
        fs::read_to_string(dir.path().join("maps/cavit_channel.csv")).unwrap().lines().count(),
        17
    );

    // Out-of-range block and image indices are usage errors.
    let args = ["attnmap", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&prefix)];
    assert_eq!(cli(&[&args[..], &["--block", "2"]].concat(), None).0, 2);
    assert_eq!(cli(&[&args[..], &["--image-index", "120"]].concat(), None).0, 2);
    // Checkpoint does not fit a different architecture.
    assert_eq!(cli(&[&args[..], &["--variant", "baseline_vit"]].concat(), None).0, 1);
}

#[test]
fn train_is_deterministic_and_honours_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, env: Option<&str>| {
        let out = dir.path().join(name);
        let (code, _, _) = cli(
            &["train", "--epochs", "2", "--set", "data_count=80", "--out", p(&out)],
            env,
        );
        assert_eq!(code, 0);
        (
            fs::read(out.join("history.csv")).unwrap(),
            fs::read(out.join("checkpoint.cavt")).unwrap(),
        )
    };
    let a = go("a", None);
    let b = go("b", None);
    assert_eq!(a, b);
    let c = go("c", Some("7"));
    assert_ne!(a.0, c.0);
    assert_eq!(go("d", Some("7")), c);
}

#[test]
fn ablate_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    for parallel in [false, true] {
        let out = dir.path().join(format!("abl{parallel}"));
        let mut args = vec!["ablate", "--epochs", "2", "--set", "data_count=80", "--out", p(&out)];
        if parallel {
            args.push("--parallel");
        }
        let (code, stdout, _) = cli(&args, None);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
        assert_eq!(stdout, csv);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("variant,accuracy,params,flops"));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            let acc: f64 = r[1].parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
            assert!(r[2].parse::<u64>().unwrap() > 0);
            assert!(r[3].parse::<u64>().unwrap() > 0);
        }
    }
    let seq = fs::read(dir.path().join("ablfalse/ablation.csv")).unwrap();
    let par = fs::read(dir.path().join("abltrue/ablation.csv")).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn resolved_config_reports_provenance() {
    let (_, _, err) = cli(&["count", "--variant", "cls_swapped", "-s", "depth=3"], Some("11"));
    assert!(err.contains("variant        = cls_swapped  # flag"));
    assert!(err.contains("depth          = 3  # flag"));
    assert!(err.contains("seed           = 11  # env"));
    assert!(err.contains("embed_dim      = 16  # default"));
}
