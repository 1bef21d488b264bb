use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mulog_core::channelizer::condition_input;
use mulog_core::container::Container;
use mulog_core::hermitian::is_positive_definite;
use mulog_core::statistics::digamma;
use serde_json::Value;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mulog"))
        .args(args)
        .current_dir(dir)
        .env_remove("MULOG_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Container {
    Container::read(&dir.join(name)).unwrap()
}

fn report(dir: &Path, est: &str, reference: &str) -> Value {
    ok(
        dir,
        &[
            "evaluate",
            "--est",
            est,
            "--ref",
            reference,
            "--report",
            "report.json",
        ],
    );
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn simulated_mosaic_is_unbiased_per_region() {
    let t = TempDir::new().unwrap();
    ok(
        t.path(),
        &[
            "simulate", "--gt", "mosaic", "--looks", "1", "--seed", "5", "--out", "m.mulg",
        ],
    );
    let noisy = read(t.path(), "m.mulg");
    let truth = read(t.path(), "m.truth.mulg");
    assert_eq!(noisy.looks, 1.0);
    assert_eq!(truth.looks, 0.0);
    let (i, r) = (noisy.image.intensity(0), truth.image.intensity(0));
    let mut levels: Vec<f64> = r.data().to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for level in levels {
        let v: Vec<f64> = i
            .data()
            .iter()
            .zip(r.data())
            .filter(|(_, &t)| t == level)
            .map(|(v, _)| *v)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        // single look: the standard deviation equals the reflectivity
        let se = level / (v.len() as f64).sqrt();
        assert!(
            (mean - level).abs() <= 3.0 * se,
            "level {level}: mean {mean}, se {se}"
        );
    }
}

#[test]
fn two_channel_simulation() {
    let t = TempDir::new().unwrap();
    let args = [
        "simulate",
        "--gt",
        "coherence",
        "--dim",
        "2",
        "--looks",
        "2",
        "--width",
        "48",
        "--height",
        "40",
    ];
    ok(
        t.path(),
        &[&args[..], &["--seed", "1", "--out", "a.mulg"]].concat(),
    );
    ok(
        t.path(),
        &[
            &args[..],
            &["--seed", "1", "--out", "b.mulg", "--truth-out", "bt.mulg"],
        ]
        .concat(),
    );
    ok(
        t.path(),
        &[&args[..], &["--seed", "2", "--out", "c.mulg"]].concat(),
    );
    let c = read(t.path(), "a.mulg");
    assert_eq!(
        (c.image.width(), c.image.height(), c.image.dim()),
        (48, 40, 2)
    );
    assert_eq!(c.image.stack().planes().len(), 4);
    let conditioned = condition_input(&c.image, c.looks).unwrap();
    assert!((0..conditioned.len()).all(|k| is_positive_definite(&conditioned.pixel(k))));

    let bytes = |n: &str| fs::read(t.path().join(n)).unwrap();
    assert_eq!(bytes("a.mulg"), bytes("b.mulg"));
    assert_eq!(bytes("a.truth.mulg"), bytes("bt.mulg"));
    assert_ne!(bytes("a.mulg"), bytes("c.mulg"));
}

#[test]
fn despeckle_two_channels_with_defaults() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate",
            "--gt",
            "coherence",
            "--dim",
            "2",
            "--looks",
            "2",
            "--width",
            "64",
            "--height",
            "64",
            "--out",
            "s.mulg",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--out",
            "d.mulg",
            "--diag",
            "d.jsonl",
        ],
    );
    let diag = fs::read_to_string(p.join("d.jsonl")).unwrap();
    let records: Vec<Value> = diag
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 6);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["iter"], i + 1);
        assert!((r["beta"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    }
    let d = read(p, "d.mulg");
    assert!(d.basis.is_some());
    assert_eq!(d.looks, 2.0);
    assert!((0..d.image.len()).all(|k| is_positive_definite(&d.image.pixel(k))));

    let noisy = report(p, "s.mulg", "s.truth.mulg");
    let est = report(p, "d.mulg", "s.truth.mulg");
    assert!(est["psnr_db"].as_f64().unwrap() > noisy["psnr_db"].as_f64().unwrap());
}

#[test]
fn single_channel_methods_reject_multichannel_input() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate", "--gt", "constant", "--dim", "2", "--looks", "2", "--width", "16",
            "--height", "16", "--out", "s.mulg",
        ],
    );
    for method in ["homomorphic", "midal"] {
        let out = run(
            p,
            &[
                "despeckle",
                "--in",
                "s.mulg",
                "--method",
                method,
                "--out",
                "d.mulg",
            ],
        );
        assert_eq!(out.status.code(), Some(2), "{method}");
        assert!(!p.join("d.mulg").exists());
    }
}

#[test]
fn copy_denoiser_gives_the_identity_algebra() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate", "--gt", "gradient", "--looks", "3", "--width", "24", "--height", "16",
            "--out", "s.mulg",
        ],
    );
    let copy = "ext:cp {in} {out}";
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--method",
            "homomorphic",
            "--denoiser",
            copy,
            "--out",
            "h.mulg",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--method",
            "midal",
            "--denoiser",
            copy,
            "--out",
            "m.mulg",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--denoiser",
            copy,
            "--out",
            "u.mulg",
        ],
    );
    let i = read(p, "s.mulg").image.intensity(0);
    let factor = 3f64.ln() - digamma(3.0).unwrap();
    for (name, scale) in [("h.mulg", factor.exp()), ("m.mulg", 1.0), ("u.mulg", 1.0)] {
        let r = read(p, name).image.intensity(0);
        for (a, b) in r.data().iter().zip(i.data()) {
            assert!(
                (a / (b * scale) - 1.0).abs() < 1e-10,
                "{name}: {a} vs {}",
                b * scale
            );
        }
    }
}

#[test]
fn evaluate_identical_images() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate", "--gt", "points", "--looks", "1", "--width", "40", "--height", "40",
            "--out", "s.mulg",
        ],
    );
    let stdout = ok(
        p,
        &[
            "evaluate", "--est", "s.mulg", "--ref", "s.mulg", "--report", "r.json",
        ],
    );
    assert!(stdout.contains("+inf"));
    let r: Value = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 4);
    for k in ["psnr_db", "ssim", "peak_value", "residual_mad"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert_eq!(r["psnr_db"], "+inf");
    assert_eq!(r["ssim"], 1.0);
    assert_eq!(r["residual_mad"], 0.0);
}

#[test]
fn despeckling_improves_single_look_psnr() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate", "--gt", "mosaic", "--looks", "1", "--seed", "2", "--width", "128",
            "--height", "128", "--out", "s.mulg",
        ],
    );
    ok(p, &["despeckle", "--in", "s.mulg", "--out", "d.mulg"]);
    let noisy = report(p, "s.mulg", "s.truth.mulg");
    let est = report(p, "d.mulg", "s.truth.mulg");
    let (n, e) = (
        noisy["psnr_db"].as_f64().unwrap(),
        est["psnr_db"].as_f64().unwrap(),
    );
    assert!(e > n, "{e} vs {n}");
    assert!(est["ssim"].as_f64().unwrap() > noisy["ssim"].as_f64().unwrap());
}

#[test]
fn looks_flag_overrides_header() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate",
            "--gt",
            "rectangle",
            "--looks",
            "2",
            "--width",
            "32",
            "--height",
            "32",
            "--out",
            "s.mulg",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--out",
            "a.mulg",
            "--diag",
            "a.jsonl",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--looks",
            "2",
            "--out",
            "b.mulg",
        ],
    );
    ok(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--looks",
            "8",
            "--out",
            "c.mulg",
            "--diag",
            "c.jsonl",
        ],
    );
    let bytes = |n: &str| fs::read(p.join(n)).unwrap();
    assert_eq!(bytes("a.mulg"), bytes("b.mulg"));
    assert_ne!(bytes("a.mulg"), bytes("c.mulg"));
    assert_eq!(read(p, "c.mulg").looks, 8.0);
    let first_beta = |n: &str| {
        let line = fs::read_to_string(p.join(n)).unwrap();
        serde_json::from_str::<Value>(line.lines().next().unwrap()).unwrap()["beta"]
            .as_f64()
            .unwrap()
    };
    assert!((first_beta("a.jsonl") - 2.0).abs() < 1e-12);
    assert!((first_beta("c.jsonl") - 1.25).abs() < 1e-12);

    // the ground truth carries no number of looks
    let out = run(p, &["despeckle", "--in", "s.truth.mulg", "--out", "t.mulg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fig4_table_is_reproducible() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let args = ["fig4", "--dims", "2,4", "--qs", "0,1,16", "--trials", "5"];
    let a = ok(p, &[&args[..], &["--json", "a.jsonl"]].concat());
    let b = ok(
        p,
        &[&args[..], &["--json", "b.jsonl", "--out", "b.txt"]].concat(),
    );
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(p.join("b.txt")).unwrap(), b);
    let rows: Vec<Value> = fs::read_to_string(p.join("a.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 6);
    for d in [2, 4] {
        let r = |q: u64| {
            rows.iter().find(|r| r["dim"] == d && r["q"] == q).unwrap()["mean_residual"]
                .as_f64()
                .unwrap()
        };
        assert!(r(16) < r(1), "D={d}");
    }
    assert_eq!(run(p, &["fig4", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn audit_reports_finite_constants() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let stdout = ok(
        p,
        &[
            "audit",
            "--denoiser",
            "tv",
            "--denoiser",
            "ext:cp {in} {out}",
            "--size",
            "24",
            "--json",
            "a.jsonl",
        ],
    );
    assert_eq!(stdout.lines().count(), 3);
    let rows: Vec<Value> = fs::read_to_string(p.join("a.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(rows[0]["report"]["constant"].as_f64().unwrap().is_finite());
    assert_eq!(rows[1]["report"]["constant"].as_f64().unwrap(), 0.0);
}

#[test]
fn export_writes_a_pgm() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(
        p,
        &[
            "simulate", "--gt", "mosaic", "--looks", "4", "--width", "20", "--height", "12",
            "--out", "s.mulg",
        ],
    );
    ok(
        p,
        &["export", "--in", "s.mulg", "--out", "s.pgm", "--gamma", "2"],
    );
    let bytes = fs::read(p.join("s.pgm")).unwrap();
    let header = b"P5\n20 12\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 240);
    assert!(bytes[header.len()..].contains(&255));
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    assert_eq!(
        run(p, &["despeckle", "--in", "missing.mulg", "--out", "x.mulg"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(p, &["despeckle", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(
            p,
            &["simulate", "--gt", "nowhere", "--looks", "1", "--out", "x.mulg"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(
            p,
            &["simulate", "--gt", "mosaic", "--looks", "0", "--out", "x.mulg"]
        )
        .status
        .code(),
        Some(2)
    );
    ok(
        p,
        &[
            "simulate", "--gt", "constant", "--looks", "1", "--width", "16", "--height", "16",
            "--out", "s.mulg",
        ],
    );
    let out = run(
        p,
        &[
            "despeckle",
            "--in",
            "s.mulg",
            "--denoiser",
            "nlm",
            "--out",
            "x.mulg",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown denoiser"));
    fs::write(p.join("junk.mulg"), b"not a container").unwrap();
    assert_eq!(
        run(p, &["evaluate", "--est", "junk.mulg", "--ref", "s.mulg"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn thread_count_from_environment() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let args = [
        "simulate", "--gt", "mosaic", "--looks", "1", "--width", "80", "--height", "80",
    ];
    ok(p, &[&args[..], &["--out", "a.mulg"]].concat());
    let out = Command::new(env!("CARGO_BIN_EXE_mulog"))
        .args([&args[..], &["--out", "b.mulg"]].concat())
        .current_dir(p)
        .env("MULOG_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        fs::read(p.join("a.mulg")).unwrap(),
        fs::read(p.join("b.mulg")).unwrap()
    );
    let bad = Command::new(env!("CARGO_BIN_EXE_mulog"))
        .args([&args[..], &["--out", "c.mulg"]].concat())
        .current_dir(p)
        .env("MULOG_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
