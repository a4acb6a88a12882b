use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accelplug::{generate, load_edge_list, program_for, run_reference, AlgoKind, GraphKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_accelplug"))
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn accelplug")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_graph(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn value_of(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {out}"))
        .to_string()
}

#[test]
fn sssp_dump_matches_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_graph(dir.path(), "g.el", "# tiny\n0 1 2\n1 2\n0 2 5\n2 3 1.5\n");
    let dump = dir.path().join("out.txt");
    let o = exec(&[
        "run", "--algo", "sssp", "--graph", g.to_str().unwrap(), "--partitions", "2",
        "--enable-cache", "--dump", dump.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&dump).unwrap();
    // Four sources by default: the lowest ids.
    assert_eq!(text, "0 0 inf inf inf\n1 2 0 inf inf\n2 3 1 0 inf\n3 4.5 2.5 1.5 0\n");

    let graph = load_edge_list(&g).unwrap();
    let p = program_for(AlgoKind::Sssp, &graph, None).unwrap();
    let want = run_reference(p.as_ref(), &graph).unwrap();
    let expected: String = want.attributes.iter().map(|(id, a)| format!("{id} {}\n", a.render())).collect();
    assert_eq!(text, expected);
}

#[test]
fn dump_goes_to_stdout_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_graph(dir.path(), "g.el", "0 1\n1 2\n");
    let o = exec(&["run", "--algo", "sssp", "--graph", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "0 0 inf inf inf\n1 1 0 inf inf\n2 2 1 0 inf\n");
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_graph(dir.path(), "g.el", "0 1\n");
    let g = g.to_str().unwrap();
    for args in [
        vec!["run", "--algo", "sssp", "--graph", g, "--no-such-flag"],
        vec!["run", "--algo", "sssp", "--graph", g, "--partitions", "0"],
        vec!["run", "--algo", "sssp", "--graph", g, "--daemons-per-node", "0"],
        vec!["run", "--algo", "bfs", "--graph", g],
        vec!["run", "--algo", "sssp", "--graph", g, "--block-size", "0"],
        vec!["run", "--algo", "sssp", "--graph", "/nonexistent/g.el"],
        vec!["run", "--algo", "sssp", "--graph", g, "--daemon-profile", "custom:1,2"],
        vec!["plan-block", "--k1", "1", "--k2", "1", "--k3", "1", "--a", "-1", "--d", "10"],
        vec!["plan-balance", "data", "--costs", "1,0", "--total", "4"],
        vec!["frobnicate"],
    ] {
        let o = exec(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn help_and_version_exit_with_zero() {
    assert_eq!(exec(&["--help"]).status.code(), Some(0));
    assert_eq!(exec(&["--version"]).status.code(), Some(0));
    assert_eq!(exec(&["run", "--help"]).status.code(), Some(0));
}

#[test]
fn iteration_cap_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_graph(dir.path(), "g.el", "0 1\n1 0\n");
    let o = exec(&["run", "--algo", "lp", "--graph", g.to_str().unwrap(), "--partitions", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let path = write_graph(dir.path(), "path.el", "0 1\n1 2\n2 3\n");
    let o = exec(&[
        "run", "--algo", "pagerank", "--graph", path.to_str().unwrap(), "--max-iterations", "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plan_block_reports_closed_form_and_brute_force() {
    let o = exec(&["plan-block", "--k1", "0.02", "--k2", "1", "--k3", "0.1", "--a", "50", "--d", "100000"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("closed_form b_opt="), "{out}");
    assert!(out.contains("brute_force s="), "{out}");
    let gap: f64 = value_of(&out, "relative_gap").parse().unwrap();
    assert!(gap.abs() <= 0.02);

    let o = exec(&["plan-block", "--k1", "0.5", "--k2", "1", "--k3", "0.5", "--a", "0", "--d", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("closed_form none"), "{}", stdout(&o));
}

#[test]
fn plan_block_limit_cases() {
    for d in ["10000", "1000000"] {
        let o = exec(&["plan-block", "--k1", "0.03", "--k2", "0.51", "--k3", "0.09", "--a", "84671", "--d", d]);
        let gap: f64 = value_of(&stdout(&o), "relative_gap").parse().unwrap();
        assert!((0.0..=0.02).contains(&gap), "d={d}: {gap}");
    }
    let o = exec(&["plan-block", "--k1", "1", "--k2", "0.5", "--k3", "0.2", "--a", "0", "--d", "50"]);
    assert!(stdout(&o).starts_with("closed_form b_opt=0 s=50 b=1 "), "{}", stdout(&o));
    let o = exec(&["plan-block", "--k1", "1", "--k2", "0.5", "--k3", "0.2", "--a", "5", "--d", "1"]);
    assert!(stdout(&o).contains(" s=1 b=1 "), "{}", stdout(&o));
}

#[test]
fn plan_balance_examples() {
    let o = exec(&["plan-balance", "data", "--costs", "1,3", "--total", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(value_of(&out, "sizes"), "3,1");
    assert_eq!(value_of(&out, "balanced_makespan"), "3");
    assert_eq!(value_of(&out, "even_makespan"), "6");
    assert_eq!(value_of(&out, "optimum_makespan"), "3");

    let o = exec(&["plan-balance", "capacity", "--sizes", "10,5", "--f", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(value_of(&out, "factors"), "1,0.5");
    assert_eq!(value_of(&out, "balanced_makespan"), "10");
}

#[test]
fn gen_graph_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.el");
    let b = dir.path().join("b.el");
    for p in [&a, &b] {
        let o = exec(&["gen-graph", "--kind", "random", "--n", "300", "--p", "0.02", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let g = load_edge_list(&a).unwrap();
    assert_eq!(g, generate(GraphKind::Random { p: 0.02 }, 300, 7).unwrap());

    let path = dir.path().join("p.el");
    let o = exec(&["gen-graph", "--kind", "path", "--n", "3", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "0 1\n1 2\n");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_graph(dir.path(), "g.el", "0 1\n1 0\n");
    let metrics = dir.path().join("m.jsonl");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "algo = \"lp\"\ngraph = {:?}\npartitions = 2\nblock_size = 1\nmetrics_out = {:?}\nmax_iterations = 4\n",
            g.to_str().unwrap(),
            metrics.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = exec(&["run", "--config", cfg.to_str().unwrap(), "--max-iterations", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 4);

    std::fs::write(&cfg, "algo = \"lp\"\nfavourite_colour = 1\n").unwrap();
    let o = exec(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_file_has_one_record_per_iteration_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.el");
    let o = exec(&["gen-graph", "--kind", "components", "--n", "60", "--k", "2", "--p", "0.1", "--out", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let metrics = dir.path().join("m.jsonl");
    let o = exec(&[
        "run", "--algo", "sssp", "--graph", g.to_str().unwrap(), "--partitions", "2", "--model", "gas",
        "--enable-cache", "--enable-skip", "--metrics-out", metrics.to_str().unwrap(), "--dump",
        dir.path().join("d.txt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (summary, records) = lines.split_last().unwrap();
    let s = &summary["summary"];
    assert_eq!(s["iterations"].as_u64().unwrap() as usize, records.len());
    assert_eq!(s["model"], "gas");
    assert!(s["iterations_skipped"].as_u64().unwrap() > 0);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["iter"].as_u64().unwrap() as usize, i);
        for key in ["t_download", "t_compute", "t_upload", "t_pipeline", "skipped", "cache_hits", "cache_misses", "uploads"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn balance_modes_keep_results_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.el");
    exec(&["gen-graph", "--kind", "random", "--n", "120", "--p", "0.05", "--seed", "1", "--out", g.to_str().unwrap()]);
    let mut dumps = Vec::new();
    for balance in ["none", "data", "capacity"] {
        let o = exec(&["run", "--algo", "sssp", "--graph", g.to_str().unwrap(), "--partitions", "3", "--balance", balance]);
        assert_eq!(o.status.code(), Some(0), "{balance}: {}", String::from_utf8_lossy(&o.stderr));
        dumps.push(stdout(&o));
    }
    assert_eq!(dumps[0], dumps[1]);
    assert_eq!(dumps[0], dumps[2]);
}
