use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rppo::checkpoint;
use rppo::gmm_model::GmmParams;
use rppo::ot_distance::{gaussian, gmm_tv_bound, gmm_w2_sq};
use rppo::trainer::METRICS_FILE;

fn rppo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rppo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_RUN: &str = "env = pointmass\nk = 2\nouter_iters = 3\nepisodes_per_iter = 4\nhorizon = 30\n";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn one_d(mean: f64) -> GmmParams {
    let c = gaussian(&[mean], nalgebra::DMatrix::identity(1, 1), 1e-8).unwrap();
    GmmParams::from_gaussians(0, 1, &[1.0], &[c]).unwrap()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let o = rppo(&["--config", &cfg, "--out", "run", "train"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final mean reward"));
    let csv = fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let policy = checkpoint::read(&dir.path().join("run/policy.gmm")).unwrap();
    assert_eq!(policy.k(), 2);

    let e = rppo(&["--config", &cfg, "eval", "run/policy.gmm", "--episodes", "3"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).starts_with("episodes,mean_reward,std_reward\n3,"));
}

#[test]
fn unknown_key_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "betta = 2\n");
    let o = rppo(&["--config", &cfg, "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("betta"), "{}", stderr(&o));

    let o = rppo(&["train", "betta=2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("betta"));

    let o = rppo(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    for out in ["a", "b"] {
        let o = rppo(&["--config", &cfg, "--seed", "7", "--out", out, "train"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let o = rppo(&["--config", &cfg, "--seed", "8", "--out", "c", "train"], dir.path());
    assert!(o.status.success());
    assert_ne!(a, fs::read(dir.path().join("c").join(METRICS_FILE)).unwrap());
}

#[test]
fn distance_between_shifted_gaussians() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint::write(&dir.path().join("a.gmm"), &one_d(0.0)).unwrap();
    checkpoint::write(&dir.path().join("b.gmm"), &one_d(3.0)).unwrap();
    let o = rppo(&["distance", "a.gmm", "b.gmm"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("w2_sq,tv_bound"));
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((vals[0] - 9.0).abs() < 1e-12, "{text}");
    assert_eq!(lines.next(), Some("from,to_0"));
    assert_eq!(lines.next(), Some("0,1"));

    let o = rppo(&["distance", "a.gmm", "a.gmm"], dir.path());
    assert!(stdout(&o).contains("\n0,0\n"), "{}", stdout(&o));
}

#[test]
fn distance_matches_library() {
    use rand::SeedableRng;
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let a = rppo::oracle::random_gmm(&mut rng, 2, 1, 3);
    let b = rppo::oracle::random_gmm(&mut rng, 2, 1, 2);
    checkpoint::write(&dir.path().join("a.gmm"), &a).unwrap();
    checkpoint::write(&dir.path().join("b.gmm"), &b).unwrap();
    let o = rppo(&["distance", "a.gmm", "b.gmm"], dir.path());
    let text = stdout(&o);
    let vals: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals[0], gmm_w2_sq(&a, &b).unwrap());
    assert_eq!(vals[1], gmm_tv_bound(&a, &b).unwrap());
    assert_eq!(text.lines().count(), 3 + 3);
}

#[test]
fn distance_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    checkpoint::write(&dir.path().join("a.gmm"), &one_d(0.0)).unwrap();
    checkpoint::write(&dir.path().join("b.gmm"), &rppo::oracle::random_gmm(&mut rng, 1, 1, 2)).unwrap();
    let o = rppo(&["distance", "a.gmm", "b.gmm"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = rppo(&["distance", "a.gmm", "missing.gmm"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn optimize_emits_trace_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = rppo(&["optimize", "--count", "4", "--instance", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("k,f,step_dist,alpha\n"));
    let f: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(f.len() > 1);
    assert!(f.windows(2).all(|w| w[1] <= w[0]));

    let o = rppo(&["--out", "traces", "optimize", "--count", "4"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read_dir(dir.path().join("traces")).unwrap().count(), 4);
}

#[test]
fn selftest_passes_and_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = rppo(&["selftest", "--instances", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let rows = stdout(&o).lines().filter(|l| l.starts_with("PASS")).count();
    assert!(rows >= 4);

    let o = rppo(&["selftest", "--instances", "5", "--inject-gradient-fault"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failing = text.lines().find(|l| l.starts_with("FAIL")).expect("a failing row");
    assert!(failing.contains("surrogate-gradient") && failing.contains("seed"), "{failing}");
}
