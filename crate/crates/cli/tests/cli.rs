use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ripm_cli::format::{InstanceFile, Metadata, StandardFile};
use ripm_cli::run::{bench_suite, GenKind, GenSpec, RunConfig};
use ripm_core::generate::{l1_regression, random_box_lp};
use ripm_core::problem::validate;
use ripm_core::StandardProblem;
use tempfile::tempdir;

const TRIVIAL: &str = r#"{
  "kind": "standard",
  "A": [[1.0]],
  "b": [1.0],
  "c": [1.0],
  "blocks": [{"size": 1, "barrier": "log_positive", "params": {"reference": 2.0}}],
  "metadata": {"R": 2.0, "name": "trivial"}
}
"#;

fn ripm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ripm")).args(args).output().expect("binary runs")
}

fn same_problem(a: &StandardProblem, b: &StandardProblem) {
    assert_eq!(a.a, b.a);
    assert_eq!(a.b, b.b);
    assert_eq!(a.c, b.c);
    assert_eq!(a.structure.sizes(), b.structure.sizes());
    assert_eq!(a.r_diam, b.r_diam);
    assert_eq!(a.l_lip, b.l_lip);
    for (x, y) in a.barriers.iter().zip(&b.barriers) {
        assert_eq!(format!("{:?}", x.kind()), format!("{:?}", y.kind()));
        assert_eq!(x.reference_point(), y.reference_point());
    }
}

#[test]
fn trivial_instance_converges() {
    let dir = tempdir().unwrap();
    let inst = dir.path().join("trivial.json");
    let sol = dir.path().join("sol.json");
    let log = dir.path().join("log.csv");
    fs::write(&inst, TRIVIAL).unwrap();
    let out = ripm(&["solve", inst.to_str().unwrap(), "--delta", "0.01", "-o", sol.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sol).unwrap()).unwrap();
    assert_eq!(report["status"], "converged");
    let objective = report["objective"].as_f64().unwrap();
    let slack = report["excess_bound"].as_f64().unwrap() + report["infeasibility"].as_f64().unwrap();
    assert!((objective - 1.0).abs() <= slack);

    let text = fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,t,log_phi,max_gamma,h_norm,update_branch,r,rebuilds,wall_ms"));
    let rows = lines.count() as u64;
    assert_eq!(rows, report["iterations"].as_u64().unwrap());
}

#[test]
fn missing_file_exits_2() {
    let out = ripm(&["solve", "/nonexistent/instance.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn invalid_flags_exit_2() {
    let dir = tempdir().unwrap();
    let inst = dir.path().join("trivial.json");
    fs::write(&inst, TRIVIAL).unwrap();
    let out = ripm(&["solve", inst.to_str().unwrap(), "--delta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ripm(&["solve", inst.to_str().unwrap(), "--sketch", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_deficient_instance_exits_2() {
    let dir = tempdir().unwrap();
    let inst = dir.path().join("dup.json");
    let text = TRIVIAL.replace("[[1.0]]", "[[1.0], [1.0]]").replace("\"b\": [1.0]", "\"b\": [1.0, 1.0]");
    fs::write(&inst, text).unwrap();
    assert_eq!(ripm(&["solve", inst.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gen_is_byte_identical_and_feasible() {
    let one = tempdir().unwrap();
    let two = tempdir().unwrap();
    for dir in [one.path(), two.path()] {
        let out = ripm(&["gen", "random_lp", "-n", "10", "14", "--seed", "5", "-o", dir.to_str().unwrap()]);
        assert!(out.status.success());
        let out = ripm(&["gen", "quantile", "-n", "3", "--theta", "0.25", "--seed", "5", "-o", dir.to_str().unwrap()]);
        assert!(out.status.success());
    }
    let files: Vec<_> = fs::read_dir(one.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 3);
    for name in files {
        let a = fs::read(one.path().join(&name)).unwrap();
        let b = fs::read(two.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
        let file = InstanceFile::parse(std::str::from_utf8(&a).unwrap()).unwrap();
        let witness = file.metadata().witness.clone().unwrap();
        let inst = file.into_instance().unwrap();
        assert!(validate(&inst.problem).is_ok());
        let p = &inst.problem;
        for i in 0..p.d() {
            let row: f64 = (0..p.n()).map(|j| p.a[(i, j)] * witness[j]).sum();
            assert!((row - p.b[i]).abs() <= 1e-12 * (1.0 + p.b[i].abs()), "row {i}: {row} vs {}", p.b[i]);
        }
    }
}

#[test]
fn standard_files_round_trip() {
    let g = random_box_lp(9, 3, 2).unwrap();
    let file = InstanceFile::Standard(StandardFile::from_problem(&g.problem, Metadata::default()).unwrap());
    let back = InstanceFile::parse(&file.to_json()).unwrap();
    assert_eq!(back, file);
    same_problem(&back.into_instance().unwrap().problem, &g.problem);

    let spec = GenSpec { kind: GenKind::L1Regression, size: 2, secondary: Some(4), theta: 0.5, seed: 3 };
    let file = spec.build().unwrap();
    let back = InstanceFile::parse(&file.to_json()).unwrap();
    assert_eq!(back, file);
    let erm = l1_regression(2, 4, 3).erm;
    let inst = back.into_instance().unwrap();
    assert_eq!(inst.erm.as_ref(), Some(&erm));
    same_problem(&inst.problem, &ripm_core::erm_to_standard(&erm).unwrap());
}

#[test]
fn empty_bench_dir_prints_header_only() {
    let dir = tempdir().unwrap();
    let out = ripm(&["bench", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("instance,n,d,m,iterations,rebuilds,total_wall_ms"));
}

#[test]
fn bench_skips_broken_files_and_accounts_phases() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("a_trivial.json"), TRIVIAL).unwrap();
    fs::write(dir.path().join("b_broken.json"), "{not json").unwrap();
    let mut buf = Vec::new();
    let cfg = RunConfig { delta: 0.05, ..RunConfig::default() };
    assert_eq!(bench_suite(dir.path(), &cfg, &mut buf).unwrap(), 2);
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(&rows[0][0], "a_trivial");
    assert_eq!(&rows[0][11], "converged");
    let ms = |k: usize| rows[0][k].parse::<f64>().unwrap();
    assert!(ms(7) + ms(8) + ms(9) <= ms(6));
    assert_eq!(&rows[1][0], "b_broken");
    assert!(rows[1][11].starts_with("skipped"));
}

fn solve_with_log(inst: &Path, log: &Path, seed: &str) {
    let out = ripm(&[
        "solve",
        inst.to_str().unwrap(),
        "--delta",
        "0.05",
        "--sketch",
        "3",
        "--seed",
        seed,
        "--deterministic-log",
        "--log",
        log.to_str().unwrap(),
        "-o",
        "/dev/null",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seeded_logs_are_reproducible() {
    let dir = tempdir().unwrap();
    let spec = GenSpec { kind: GenKind::RandomLp, size: 6, secondary: Some(2), theta: 0.5, seed: 4 };
    let inst = dir.path().join(spec.file_name());
    fs::write(&inst, spec.build().unwrap().to_json()).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    solve_with_log(&inst, &a, "9");
    solve_with_log(&inst, &b, "9");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
