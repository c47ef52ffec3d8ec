use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grd")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn small_dataset(dir: &Path) {
    let o = grd(&[
        "gen", "--out", dir.to_str().unwrap(), "--seed", "3", "--size", "12", "--train", "4", "--test", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = grd(&["gen", "--out", d.to_str().unwrap(), "--seed", "7", "--train", "3", "--test", "2"]);
        assert!(o.status.success());
    }
    let files = dir_contents(&a);
    assert_eq!(files.len(), 2 * 5 + 1);
    assert_eq!(files, dir_contents(&b));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let d = data.to_str().unwrap();
    let o = grd(&["eval", "--data", d, "--pred", d]);
    assert!(o.status.success());
    let text = stdout(&o);
    for line in ["sbd: 1.000000", "voi_total: 0.000000", "arand: 0.000000"] {
        assert!(text.contains(line), "missing `{line}` in\n{text}");
    }
    let o = grd(&["eval", "--data", d, "--pred", d, "--report", "structured"]);
    assert!(stdout(&o).contains("\"voi_total\": 0.0"));
}

#[test]
fn gradcheck_passes_and_lists_every_term() {
    let o = grd(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    for term in ["node_intra", "edge_intra", "agd_intra", "aff", "edge_inter", "agd_inter", "total", "model"] {
        assert!(text.lines().any(|l| l.starts_with(term) && l.ends_with("ok")), "{term}\n{text}");
    }
}

#[test]
fn train_distill_eval_vis_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let d = data.to_str().unwrap();
    let teacher = tmp.path().join("teacher.ckpt");
    let student = tmp.path().join("student.ckpt");
    let t = teacher.to_str().unwrap();
    let s = student.to_str().unwrap();

    let o = grd(&["train-teacher", "--data", d, "--out", t, "--iters", "3", "--embed-dim", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(format!("{t}.config.txt")).unwrap().starts_with("role: teacher\n"));

    let o = grd(&[
        "distill", "--data", d, "--teacher", t, "--out", s, "--iters", "3", "--embed-dim", "4", "--bank-k", "4",
        "--bank-l", "2", "--lambda3", "5", "--report", "structured",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"agd_intra\""));
    let sidecar = fs::read_to_string(format!("{s}.config.txt")).unwrap();
    assert!(sidecar.contains("lambda3: 5\n") && sidecar.contains("bank_k: 4\n"));

    let o = grd(&["eval", "--data", d, "--student", s, "--threshold", "0.3"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 10);

    let ppm = tmp.path().join("view.ppm");
    let o = grd(&["vis", "--data", d, "--student", s, "--out", ppm.to_str().unwrap()]);
    assert!(o.status.success());
    let bytes = fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n12 12\n255\n"));
    assert_eq!(bytes.len(), b"P6\n12 12\n255\n".len() + 12 * 12 * 3);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(grd(&["gen", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(grd(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(grd(&["eval", "--data", "x", "--offsets", "0:0"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_nonzero_with_a_diagnostic() {
    let o = grd(&["eval", "--data", "/nonexistent/grd-data", "--student", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
