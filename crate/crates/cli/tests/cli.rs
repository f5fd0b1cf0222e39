use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn l12refit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l12refit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn metrics_row(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task,penalty,lambda,iterations,psnr_input,psnr_biased,psnr_refit"
    );
    lines.next().unwrap().split(',').map(str::to_owned).collect()
}

fn psnrs(dir: &Path) -> [f64; 3] {
    let row = metrics_row(dir);
    [4, 5, 6].map(|k| row[k].parse().unwrap())
}

#[test]
fn missing_noise_std_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&["denoise", "--synthetic", "32x32", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--noise-std"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let cases: [&[&str]; 7] = [
        &["prox-check", "--penalty", "sd", "--b", "0"],
        &["prox-check", "--penalty", "sd", "--b", "7"],
        &["prox-check", "--penalty", "tv"],
        &["deblur", "--synthetic", "32x32", "--blur-angle", "north", "--out", dir],
        &["denoise", "--synthetic", "8x8", "--noise-std", "5", "--out", dir],
        &["denoise", "--noise-std", "5", "--out", dir],
        &["denoise", "--synthetic", "32x32", "--noise-std", "5", "--bogus", "--out", dir],
    ];
    for args in cases {
        assert_eq!(code(&l12refit(args)), 2, "{args:?}");
    }
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn input_and_synthetic_are_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&[
        "denoise", "--input", "a.png", "--synthetic", "32x32", "--noise-std", "5", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&[
        "denoise", "--input", "/nonexistent/clean.png", "--noise-std", "5", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn step_size_violation_is_a_solver_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&[
        "denoise", "--synthetic", "32x32", "--noise-std", "5", "--tau", "1", "--sigma", "1",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("nested/out");
    let d = dir.to_str().unwrap();
    let args = ["denoise", "--synthetic", "32x32", "--noise-std", "10", "--iters", "50", "--out", d];
    assert_eq!(code(&l12refit(&args)), 0);
    for name in ["noisy.png", "biased.png", "refit.png", "metrics.csv", "config.txt"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    fs::write(dir.join("metrics.csv"), "sentinel").unwrap();
    assert_eq!(code(&l12refit(&args)), 3);
    assert_eq!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), "sentinel");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&l12refit(&forced)), 0);
    assert_ne!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), "sentinel");
}

#[test]
fn prox_check_passes() {
    for args in [
        ["--penalty", "sd", "--trials", "1000", "--b", "2", "--seed", "7"],
        ["--penalty", "qo", "--trials", "200", "--b", "6", "--seed", "0"],
    ] {
        let mut full = vec!["prox-check"];
        full.extend(args);
        let out = l12refit(&full);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("max="));
    }
}

#[test]
fn synthetic_denoise_refit_beats_biased() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&[
        "denoise", "--synthetic", "64x64", "--noise-std", "20", "--penalty", "sd", "--seed", "1",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let [input, biased, refit] = psnrs(tmp.path());
    assert!(biased > input);
    assert!(refit > biased, "refit {refit} biased {biased}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("refit"));
}

#[test]
fn least_squares_refit_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l12refit(&[
        "denoise", "--synthetic", "32x32", "--noise-std", "20", "--penalty", "ls", "--iters", "300",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(psnrs(tmp.path()).iter().all(|v| v.is_finite()));
}

#[test]
fn identical_invocations_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = l12refit(&[
                "deblur", "--synthetic", "32x32", "--penalty", "qd", "--iters", "200", "--seed",
                "3", "--out", dir.to_str().unwrap(),
            ]);
            assert_eq!(code(&out), 0);
            fs::read_to_string(dir.join("metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let out = l12refit(&[
        "deblur", "--synthetic", "32x40", "--noise-std", "3", "--penalty", "qo", "--iters", "200",
        "--blur-len", "5", "--blur-angle", "30", "--seed", "11", "--mode", "posterior", "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let config = first.join("config.txt");
    assert!(fs::read_to_string(&config).unwrap().starts_with("# rng: "));
    let out = l12refit(&["deblur", "--config", config.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for name in ["metrics.csv", "config.txt", "refit.png"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_with_overrides_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.txt");
    fs::write(&config, "task = \"denoise\"\n").unwrap();
    let out = l12refit(&[
        "denoise", "--config", config.to_str().unwrap(), "--seed", "2", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let out = l12refit(&["denoise", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn delta_blur_matches_denoising() {
    let tmp = tempfile::tempdir().unwrap();
    let common = ["--synthetic", "32x32", "--noise-std", "10", "--iters", "200", "--seed", "4"];
    let deblur_dir = tmp.path().join("deblur");
    let mut args = vec!["deblur", "--blur-len", "1", "--out", deblur_dir.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&l12refit(&args)), 0);
    let denoise_dir = tmp.path().join("denoise");
    let mut args = vec!["denoise", "--out", denoise_dir.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&l12refit(&args)), 0);
    let (a, b) = (psnrs(&deblur_dir), psnrs(&denoise_dir));
    for k in 0..3 {
        assert!((a[k] - b[k]).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
    for name in ["noisy.png", "biased.png", "refit.png"] {
        assert_eq!(fs::read(deblur_dir.join(name)).unwrap(), fs::read(denoise_dir.join(name)).unwrap());
    }
}

#[test]
fn refit_on_observed_png() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let out = l12refit(&[
        "denoise", "--synthetic", "24x24", "--noise-std", "15", "--iters", "100", "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let second = tmp.path().join("second");
    let noisy = first.join("noisy.png");
    let out = l12refit(&[
        "refit", "--input", noisy.to_str().unwrap(), "--noise-std", "15", "--iters", "100",
        "--out", second.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(second.join("biased.png").is_file() && second.join("refit.png").is_file());
    let out = l12refit(&["refit", "--input", noisy.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn info_names_the_generator() {
    let out = l12refit(&["info"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ChaCha20"));
    assert!(text.contains("ls ho hd qo qd sd"));
}
