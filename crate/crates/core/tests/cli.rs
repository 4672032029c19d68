use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use xct_core::codec::VqAutoencoder;
use xct_core::pipeline::{TrainPlan, CT_CODEC_FILE};

fn xct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xct")).args(args).output().expect("spawn xct")
}

fn ok(args: &[&str]) -> Output {
    let out = xct(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn dir_hash(dir: &Path) -> String {
    let mut h = Sha256::new();
    for p in files(dir) {
        h.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&p).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    p
}

struct Fixture {
    data: PathBuf,
    models: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = scratch("fixture");
        let data = root.join("data");
        let models = root.join("models");
        ok(&["gen-data", "--count", "12", "--test-count", "2", "--extent", "32", "--seed", "3", "--out", s(&data)]);
        for stage in ["codec-ct", "codec-bp", "mapper"] {
            ok(&["train", "--stage", stage, "--epochs", "1", "--data", s(&data), "--models", s(&models)]);
        }
        for nv in ["default", "none"] {
            ok(&[
                "train", "--stage", "denoiser", "--epochs", "1", "--timesteps", "10", "--new-views", nv, "--data",
                s(&data), "--models", s(&models),
            ]);
        }
        Fixture { data, models }
    })
}

#[test]
fn gen_data_is_byte_reproducible() {
    let out = scratch("gen");
    let args = ["gen-data", "--count", "6", "--extent", "16", "--views", "0,90", "--seed", "7", "--out", s(&out)];
    ok(&args);
    let first = dir_hash(&out);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("config.json").exists());
    assert!(out.join("sample_0005/view_090deg.xctp").exists());

    let again = xct(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
    let second = dir_hash(&out);
    ok(&forced);
    assert_eq!(dir_hash(&out), second);
    assert_ne!(first, second, "config echo records --force");
    assert!(!out.with_file_name("gen.partial").exists());
}

#[test]
fn single_view_datasets() {
    let out = scratch("single");
    ok(&["gen-data", "--count", "3", "--extent", "16", "--views", "0", "--out", s(&out)]);
    let names: Vec<String> = fs::read_dir(out.join("sample_0000"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"view_000deg.xctp".to_string()));
    assert!(!names.iter().any(|n| n.starts_with("view_090")));
}

#[test]
fn stages_must_run_in_order() {
    let data = scratch("order_data");
    let models = scratch("order_models");
    ok(&["gen-data", "--count", "4", "--extent", "32", "--out", s(&data)]);
    for stage in ["denoiser", "mapper"] {
        let o = xct(&["train", "--stage", stage, "--data", s(&data), "--models", s(&models)]);
        assert_eq!(o.status.code(), Some(3));
        let msg = stderr(&o);
        assert!(msg.contains("codec-ct"), "{msg}");
        assert_eq!(msg.trim().lines().count(), 1, "{msg}");
    }
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let data = scratch("zero_data");
    let models = scratch("zero_models");
    ok(&["gen-data", "--count", "4", "--extent", "32", "--out", s(&data)]);
    ok(&["train", "--stage", "codec-ct", "--epochs", "0", "--seed", "5", "--data", s(&data), "--models", s(&models)]);
    let saved = VqAutoencoder::load(&models.join(CT_CODEC_FILE)).unwrap();
    let plan = TrainPlan {
        seed: 5,
        ..TrainPlan::default()
    };
    let init = plan.new_ct_codec().unwrap();
    let a: Vec<_> = saved.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let b: Vec<_> = init.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(models.join("loss_codec-ct.csv")).unwrap(), "step,loss\n");
    assert!(models.join("config_codec-ct.json").exists());
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let f = fixture();
    let rows = |name: &str| fs::read_to_string(f.models.join(name)).unwrap().lines().count() - 1;
    assert_eq!(rows("loss_codec-ct.csv"), 5);
    assert_eq!(rows("loss_codec-bp.csv"), 5);
    assert_eq!(rows("loss_denoiser_vpge_in0.csv"), 5);
    assert_eq!(rows("loss_denoiser_dvg_in0_new90.csv"), 5);
    assert_eq!(rows("loss_mapper.csv"), 10);
}

#[test]
fn reconstruction_is_reproducible_and_complete() {
    let f = fixture();
    let out = scratch("recon");
    let input = f.data.join("sample_0011/view_000deg.xctp");
    let truth = f.data.join("sample_0011/volume.xctv");
    let args = [
        "reconstruct", "--models", s(&f.models), "--inputs", s(&input), "--new-views", "90", "--timesteps", "10",
        "--truth", s(&truth), "--seed", "2", "--out", s(&out), "--force",
    ];
    ok(&args);
    for name in ["volume.xctv", "metrics.csv", "config.json", "new_view_090deg.xctp"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(files(&out).iter().any(|p| p.extension().is_some_and(|e| e == "pgm")));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("config,sample_id,psnr_db,ssim,runtime_ms\ndvg_in0_new90,"));
    let first = dir_hash(&out);
    ok(&args);
    assert_eq!(dir_hash(&out), first);

    let none = scratch("recon_none");
    ok(&[
        "reconstruct", "--models", s(&f.models), "--inputs", s(&input), "--new-views", "none", "--timesteps", "10",
        "--out", s(&none),
    ]);
    assert!(!none.join("new_view_090deg.xctp").exists());

    let o = xct(&[
        "reconstruct", "--models", s(&f.models), "--inputs", s(&input), "--new-views", "45", "--timesteps", "10",
        "--out", s(&scratch("recon_missing")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("dvg_in0_new45"));
}

#[test]
fn corrupt_inputs_are_named() {
    let f = fixture();
    let dir = scratch("corrupt");
    fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("broken_view.xctp");
    fs::write(&bad, b"JUNKJUNKJUNK").unwrap();
    let o = xct(&["reconstruct", "--models", s(&f.models), "--inputs", s(&bad), "--out", s(&dir.join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("broken_view.xctp"), "{msg}");
    assert_eq!(msg.trim().lines().count(), 1);
}

#[test]
fn experiments_report_missing_configs_then_train_them() {
    let f = fixture();
    let models = scratch("exp_models");
    let out = scratch("exp_out");
    let base = [
        "experiment", "sweep", "--data", s(&f.data), "--models", s(&models), "--seeds", "1", "--counts", "1,2",
        "--ranges", "90", "--timesteps", "10", "--out", s(&out),
    ];
    let o = xct(&base);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("seed_0/denoiser_vpge_in0+90.xctw"), "{}", stderr(&o));

    let mut train = base.to_vec();
    train.extend([
        "--train", "--ct-epochs", "1", "--bp-epochs", "1", "--mapper-epochs", "1", "--denoiser-epochs", "1",
    ]);
    ok(&train);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "config,samples,mean_psnr_db,mean_ssim");
    assert!(lines[1].starts_with("r90_n1,2,"));
    assert!(lines[2].starts_with("r90_n2,2,"));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    let mut rerun = base.to_vec();
    rerun.push("--force");
    ok(&rerun);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), report);
    let first = dir_hash(&out);
    ok(&rerun);
    assert_eq!(dir_hash(&out), first);
}

#[test]
fn usage_errors_and_help() {
    let o = xct(&["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
    assert_eq!(xct(&["frobnicate"]).status.code(), Some(1));

    let top = ok(&["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for cmd in ["gen-data", "train", "reconstruct", "experiment"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let help = |cmd: &str| String::from_utf8_lossy(&ok(&[cmd, "--help"]).stdout).into_owned();
    let g = help("gen-data");
    for flag in ["--count", "--extent", "--views", "--noise-sigma", "--seed", "--out", "--force", "[default: 220]"] {
        assert!(g.contains(flag), "{flag}");
    }
    let t = help("train");
    for flag in ["--stage", "--epochs", "--lr", "--seed", "--batch-size", "codec-ct", "[default: 2]"] {
        assert!(t.contains(flag), "{flag}");
    }
    let r = help("reconstruct");
    for flag in ["--inputs", "--new-views", "--seed", "--out", "--truth"] {
        assert!(r.contains(flag), "{flag}");
    }
    let e = help("experiment");
    for flag in ["sweep", "ablation", "angles", "--seeds", "--counts", "--ranges", "--out"] {
        assert!(e.contains(flag), "{flag}");
    }
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_xct"))
        .args(["gen-data", "--count", "2", "--out", s(&scratch("threads"))])
        .env("XCT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
