//! End-to-end checks of the command-line interface: formats, exit codes, and
//! determinism.

mod common;

use std::path::Path;
use std::process::Command;

use common::seven_link_binary;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loss-tomo"))
}

fn write_tree(dir: &Path) -> std::path::PathBuf {
    let rates = [0.9, 0.85, 0.8, 0.88, 0.92, 0.75, 0.83];
    let (tree, _) = seven_link_binary(&rates);
    let path = dir.join("tree.txt");
    std::fs::write(&path, tree.serialize()).unwrap();
    path
}

#[test]
fn simulate_writes_grid_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    let out = dir.path().join("sims");
    let status = bin()
        .args([
            "simulate",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "200,400",
            "--seed",
            "1,2,3",
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    // 2 n-values x 3 seeds + manifest
    assert_eq!(names.len(), 7);
    assert!(names.contains(&"manifest.txt".to_string()));
    assert!(names.contains(&"obs_n200_seed1.txt".to_string()));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.matches("output = ").count(), 6);

    // Rerun into another directory: identical bytes.
    let out2 = dir.path().join("sims2");
    let status = bin()
        .args([
            "simulate",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "200,400",
            "--seed",
            "1,2,3",
            "--out",
            out2.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    for name in names.iter().filter(|n| n.starts_with("obs_")) {
        let a = std::fs::read(out.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn missing_topology_is_a_format_error() {
    let output = bin()
        .args([
            "simulate",
            "--topology",
            "/nonexistent/tree.txt",
            "--n",
            "10",
            "--seed",
            "1",
            "--out",
            "/tmp/never-used",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("/nonexistent/tree.txt"), "stderr: {err}");
}

#[test]
fn usage_error_exits_2() {
    let output = bin().args(["simulate", "--badflag"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn classify_reports_all_internal_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    let obs = dir.path().join("obs.txt");
    let status = bin()
        .args([
            "simulate",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "5000",
            "--seed",
            "9",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::copy(dir.path().join("s/obs_n5000_seed9.txt"), &obs).unwrap();
    let output = bin()
        .args([
            "classify",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    // v1, v2, v3 are the internal nodes; at n=5000 and these rates all
    // classify perfect.
    for node in ["v1", "v2", "v3"] {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{node} ")))
            .unwrap_or_else(|| panic!("no line for {node} in {text}"));
        assert!(line.contains(" perfect "), "line: {line}");
        assert!(line.contains("components=[{"), "line: {line}");
        assert!(line.ends_with("m_e=[]"), "line: {line}");
    }

    // Stats dump on request.
    let output = bin()
        .args([
            "classify",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
            "--dump-stats",
        ])
        .output()
        .unwrap();
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("stats v1 n=5000 nk1="));
    assert!(text.contains("I {v2,v3} = "));
}

#[test]
fn estimate_emits_node_and_link_sections_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    bin()
        .args([
            "simulate",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "20000",
            "--seed",
            "4",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    let obs = dir.path().join("s/obs_n20000_seed4.txt");
    let output = bin()
        .args([
            "estimate",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "node,class,method,A_hat,residual,iterations,flags"
    );
    let node_rows: Vec<&str> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("link,"))
        .collect();
    assert_eq!(node_rows.len(), 3);
    assert!(text.contains("link,pass_rate_hat,loss_rate_hat,true_pass_rate,abs_error,flags"));
    let link_rows: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("link,"))
        .skip(1)
        .collect();
    assert_eq!(link_rows.len(), 7);
    for row in link_rows {
        let fields: Vec<&str> = row.split(',').collect();
        let est: f64 = fields[1].parse().unwrap();
        let truth: f64 = fields[3].parse().unwrap();
        let err: f64 = fields[4].parse().unwrap();
        assert!((est - truth).abs() < 0.05, "row {row}");
        assert!(((est - truth).abs() - err).abs() < 1e-12);
    }
}

#[test]
fn estimate_general_lists_joint_nodes_and_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let topo_path = dir.path().join("general.txt");
    std::fs::write(
        &topo_path,
        "source s1\nsource s2\nlink e1 s1 j 0.9\nlink e2 s2 j 0.85\nlink e3 j r1 0.8\nlink e4 j r2 0.9\n",
    )
    .unwrap();
    bin()
        .args([
            "simulate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--n",
            "20000",
            "--seed",
            "6",
            "--out",
            dir.path().join("s").to_str().unwrap(),
            "--general",
        ])
        .status()
        .unwrap();
    let obs = dir.path().join("s/obs_n20000_seed6.txt");
    let output = bin()
        .args([
            "estimate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
            "--general",
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.starts_with("node,obs_class,x_hat"));
    let joint_line = text.lines().find(|l| l.starts_with("j,")).unwrap();
    assert!(
        joint_line.contains("(perfect; perfect)"),
        "line: {joint_line}"
    );
    assert!(joint_line.contains("s1="), "line: {joint_line}");
    // Decomposition trees appear in the topology text format.
    assert!(text.contains("# decomposition"));
    assert!(text.contains("# source vsrc:j"));
    // Every input link got an estimate row.
    for link in ["e1", "e2", "e3", "e4"] {
        assert!(
            text.lines()
                .any(|l| l.starts_with(&format!("{link},")) && !l.ends_with(",blocked")),
            "missing row for {link}"
        );
    }
}

#[test]
fn zero_probe_observation_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    let obs = dir.path().join("empty.txt");
    std::fs::write(&obs, "obs 0 4\n").unwrap();
    let output = bin()
        .args([
            "classify",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("zero probes"), "stderr: {err}");
}

#[test]
fn dimension_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    let obs = dir.path().join("short.txt");
    std::fs::write(&obs, "obs 1 2\n0 root 11\n").unwrap();
    let output = bin()
        .args([
            "classify",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn total_estimation_failure_exits_4() {
    // A 3-node chain: the single internal node has one child, which is
    // complete exclusion by construction, so every node fails.
    let dir = tempfile::tempdir().unwrap();
    let topo_path = dir.path().join("chain.txt");
    std::fs::write(&topo_path, "link a root a 0.9\nlink leaf a leaf 0.9\n").unwrap();
    bin()
        .args([
            "simulate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--n",
            "100",
            "--seed",
            "1",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    let obs = dir.path().join("s/obs_n100_seed1.txt");
    let output = bin()
        .args([
            "estimate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn partial_estimation_failure_is_in_band_and_exits_0() {
    // Node d has a single child, so its observation is completely exclusive
    // and unestimable; b and c still estimate.
    let dir = tempfile::tempdir().unwrap();
    let topo_path = dir.path().join("mixed.txt");
    std::fs::write(
        &topo_path,
        "link b root b 0.9\nlink c b c 0.85\nlink d b d 0.8\nlink l1 c l1 0.9\nlink l2 c l2 0.9\nlink l3 d l3 0.9\n",
    )
    .unwrap();
    bin()
        .args([
            "simulate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--n",
            "5000",
            "--seed",
            "3",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    let obs = dir.path().join("s/obs_n5000_seed3.txt");
    let output = bin()
        .args([
            "estimate",
            "--topology",
            topo_path.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8(output.stdout).unwrap();
    let d_row = text.lines().find(|l| l.starts_with("d,")).unwrap();
    assert!(d_row.contains("complete"), "row: {d_row}");
    for node in ["b", "c"] {
        let row = text
            .lines()
            .find(|l| l.starts_with(&format!("{node},")))
            .unwrap();
        assert!(row.contains("perfect-poly"), "row: {row}");
    }
}

#[test]
fn oracle_profile_is_plottable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    bin()
        .args([
            "simulate",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "5000",
            "--seed",
            "2",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    let obs = dir.path().join("s/obs_n5000_seed2.txt");
    let output = bin()
        .args([
            "oracle",
            "--topology",
            topo.to_str().unwrap(),
            "--obs",
            obs.to_str().unwrap(),
            "--node",
            "v2",
            "--points",
            "500",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "A,loglik");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 500);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 2);
        fields[0].parse::<f64>().unwrap();
        fields[1].parse::<f64>().unwrap();
    }
}

#[test]
fn general_experiment_saves_decomposition_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let topo_path = dir.path().join("general.txt");
    std::fs::write(
        &topo_path,
        "source s1\nsource s2\nlink e1 s1 j 0.9\nlink e2 s2 j 0.85\nlink e3 j r1 0.8\nlink e4 j r2 0.9\n",
    )
    .unwrap();
    let out = dir.path().join("exp");
    let status = bin()
        .args([
            "experiment",
            "--topology",
            topo_path.to_str().unwrap(),
            "--n",
            "4000",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
            "--general",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let results = std::fs::read_to_string(out.join("results_n4000_seed1.csv")).unwrap();
    assert!(results.contains("# decomposition"));
    assert!(results.contains("# source vsrc:j"));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().count() == 2);
}

#[test]
fn experiment_summary_has_mae_columns() {
    let dir = tempfile::tempdir().unwrap();
    let topo = write_tree(dir.path());
    let out = dir.path().join("exp");
    let status = bin()
        .args([
            "experiment",
            "--topology",
            topo.to_str().unwrap(),
            "--n",
            "500,2000",
            "--seed",
            "1,2,3",
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("n,cells,mae,class:perfect"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    let mae_of = |row: &str| -> f64 { row.split(',').nth(2).unwrap().parse().unwrap() };
    // More probes, better estimates (wide margin at these sizes).
    assert!(mae_of(rows[1]) < mae_of(rows[0]) + 0.05);
    // Manifest records the estimator defaults for provenance.
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("tol = 0.0000000001") || manifest.contains("tol = 1e-10"));
    assert!(manifest.contains("grouping_threshold = 5"));
}
