use std::path::Path;
use std::process::{Command, Output};

fn glider(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glider"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_prints_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    let out = glider(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage:"));
    for cmd in ["train-expert", "describe", "build-pool", "route", "eval", "sweep-alpha", "sweep-topk", "heatmap"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--frobnicate"][..],
        &["eval", "--pool"],
        &[],
        &["route", "--pool", "p.json", "--task", "t.json", "--k", "2", "--top-p", "0.5"],
    ] {
        let out = glider(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("Usage"), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = glider(dir.path(), &["--mock-llm", "eval", "--pool", "missing.json", "--tasks", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.json"));

    std::fs::write(dir.path().join("bad.json"), "{\"format_version\": \"glider-pool/1\"").unwrap();
    let out = glider(dir.path(), &["--mock-llm", "route", "--pool", "bad.json", "--task", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("train.conf"), "# small run\nlora-steps = 20\ngate-steps = 5\nd = 6\nm = 2\nrank = 2\n").unwrap();
    let out = glider(p, &["--config", "train.conf", "train-expert", "--name", "a", "--out", "a.json", "--log", "a.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = std::fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 20 + 5);

    // Command-line flags win over the file.
    let out = glider(
        p,
        &["--config", "train.conf", "train-expert", "--name", "b", "--lora-steps", "10", "--out", "b.json", "--log", "b.csv"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = std::fs::read_to_string(p.join("b.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 10 + 5);

    std::fs::write(p.join("broken.conf"), "lora-steps 20\n").unwrap();
    let out = glider(p, &["--config", "broken.conf", "train-expert", "--name", "c", "--out", "c.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn route_and_sweeps_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let small = ["--d", "6", "--m", "2", "--rank", "2", "--lora-steps", "60", "--gate-steps", "20"];
    for name in ["x", "y", "z"] {
        let out_file = format!("{name}.json");
        let mut args = vec!["train-expert", "--name", name, "--out", out_file.as_str()];
        args.extend(small);
        assert_eq!(glider(p, &args).status.code(), Some(0));
        assert_eq!(glider(p, &["--mock-llm", "describe", "--expert", out_file.as_str()]).status.code(), Some(0));
    }
    let out = glider(p, &["build-pool", "--out", "pool.json", "x.json", "y.json", "z.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("3 experts, checksum "));

    let out = glider(p, &["--mock-llm", "route", "--pool", "pool.json", "--task", "y.json", "--tokens", "4", "--out", "route.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let trace = std::fs::read_to_string(p.join("route.csv")).unwrap();
    assert!(trace.starts_with("query_id,token_id,module_id,expert_name,weight,s_glob_max,alpha\n"));
    // A held-in query retrieves its own expert first at every module.
    let firsts: Vec<&str> = trace.lines().skip(1).step_by(2).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(firsts.len(), 4 * 2);
    assert!(firsts.iter().all(|e| *e == "y"), "{trace}");

    let suite = ["--pool", "pool.json", "--held-out", "1", "--tokens", "16", "--tasks", "x.json", "y.json", "z.json"];
    let mut args = vec!["--mock-llm", "sweep-alpha", "--alphas", "1,100", "--out", "alpha.csv"];
    args.extend(suite);
    assert_eq!(glider(p, &args).status.code(), Some(0));
    let alpha = std::fs::read_to_string(p.join("alpha.csv")).unwrap();
    assert_eq!(alpha.lines().next().unwrap(), "alpha,held_in_loss,held_out_loss,held_in_retrieval");
    assert_eq!(alpha.lines().count(), 3);

    let mut args = vec!["--mock-llm", "sweep-topk", "--out", "topk.csv"];
    args.extend(suite);
    assert_eq!(glider(p, &args).status.code(), Some(0));
    let topk = std::fs::read_to_string(p.join("topk.csv")).unwrap();
    let labels: Vec<&str> = topk.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["Top-1", "Top-2", "Top-3", "Top-25%", "Top-50%", "Top-75%"]);

    let mut args = vec!["--mock-llm", "eval", "--modes", "glider,oracle", "--out", "eval.csv", "--mode", "glider"];
    args.extend(suite);
    assert_eq!(glider(p, &args).status.code(), Some(0));
    let eval = std::fs::read_to_string(p.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 4 * 2);
}
