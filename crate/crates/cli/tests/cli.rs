use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use farmem::experiment::{digest, ExperimentSpec, Report};
use farmem::graphbench::{run, MemGraph};

const BENCH: &str = env!("CARGO_BIN_EXE_bench");

const SMALL: &[&str] = &[
    "--set", "graph.kind=uniform",
    "--set", "graph.vertices=1500",
    "--set", "graph.edges=12000",
    "--set", "host.chunk_size=4096",
    "--set", "threads=2",
];

fn bench(args: &[&str]) -> Output {
    Command::new(BENCH).args(args).output().expect("spawn bench")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "bench failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Start a long-running subcommand and return it with the address it
/// announced.
fn daemon(args: &[&str]) -> (Daemon, String) {
    let mut child = Command::new(BENCH).args(args).stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(line.contains("listening on"), "{line:?}");
    (Daemon(child), addr)
}

fn oracle(overrides: &[&str]) -> String {
    let sets: Vec<String> = overrides.chunks(2).map(|p| p[1].to_string()).collect();
    let spec = ExperimentSpec::from_toml("", &sets).unwrap();
    let g = MemGraph::new(spec.graph.build().unwrap());
    digest(&run(spec.application, &g, &spec.params).unwrap().to_bytes())
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "name = \"base\"\napplication = \"pagerank\"\n[params]\niterations = 3\n").unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let cfg = config.to_str().unwrap();
    let mut args = vec!["run", "--config", cfg, "--out", a.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(bench(&args));
    args[4] = b.to_str().unwrap();
    args.extend_from_slice(&["--set", "name=static", "--set", "proxy.cache_mode=static", "--set", "proxy.static_vertices=true"]);
    ok(bench(&args));

    let ra = Report::from_json(&std::fs::read_to_string(&a).unwrap()).unwrap();
    let rb = Report::from_json(&std::fs::read_to_string(&b).unwrap()).unwrap();
    assert_eq!(ra.runs[0].output_sha256, rb.runs[0].output_sha256);
    let mut o = SMALL.to_vec();
    o.extend_from_slice(&["--set", "application=pagerank", "--set", "params.iterations=3"]);
    assert_eq!(ra.runs[0].output_sha256, oracle(&o));

    let csv = ok(bench(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--format", "csv"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,report,baseline,value,ratio,reduction,speedup"));
    let row = csv.lines().find(|l| l.starts_with("net_on_demand_bytes,static,")).unwrap();
    let reduction: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
    assert!(reduction > 0.0, "{row}");
    let text = ok(bench(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]));
    assert!(text.starts_with("baseline: base\n"));
}

#[test]
fn config_errors_exit_nonzero() {
    for args in [
        &["run", "--set", "repetitions=0"][..],
        &["run", "--set", "no_such_key=1"][..],
        &["run", "--config", "/nonexistent/exp.toml"][..],
        &["compare", "/nonexistent/a.json", "/nonexistent/b.json"][..],
    ] {
        let out = bench(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(out.stderr.starts_with(b"Error:"), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn host(addr: &str, client: &str, shared: &Path, extra: &[&str]) -> Child {
    let mut args = vec!["host", "--connect", addr, "--client", client, "--shared-dir", shared.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    Command::new(BENCH).args(&args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap()
}

fn outcome(child: Child) -> serde_json::Value {
    let out = child.wait_with_output().unwrap();
    serde_json::from_slice(ok(out).as_bytes()).unwrap()
}

#[test]
fn agents_as_separate_processes() {
    let data = tempfile::tempdir().unwrap();
    let (_mem, mem_addr) = daemon(&["memory-agent", "--data-dir", data.path().to_str().unwrap()]);
    let static_cache = ["--set", "proxy.cache_mode=static", "--set", "proxy.static_vertices=true"];
    let mut proxy_args = vec!["proxy", "--memory", mem_addr.as_str()];
    proxy_args.extend_from_slice(&static_cache);
    let (_proxy, proxy_addr) = daemon(&proxy_args);

    let pr = ["--set", "application=pagerank", "--set", "params.iterations=3", "--set", "proxy.static_vertices=true", "--set", "proxy.cache_mode=static"];
    let bfs = ["--set", "application=bfs"];
    let a = host(&proxy_addr, "1", data.path(), &pr);
    let b = host(&proxy_addr, "2", data.path(), &bfs);
    let (a, b) = (outcome(a), outcome(b));

    let mut want_a = SMALL.to_vec();
    want_a.extend_from_slice(&pr);
    let mut want_b = SMALL.to_vec();
    want_b.extend_from_slice(&bfs);
    assert_eq!(a["output_sha256"], oracle(&want_a));
    assert_eq!(b["output_sha256"], oracle(&want_b));
    assert_eq!(a["client"], 1);
    assert!(a["host"]["static_reads"].as_u64().unwrap() > 0);
    assert!(b["host"]["read_requests"].as_u64().unwrap() > 0);

    let direct = host(&mem_addr, "3", data.path(), &["--set", "mode=direct", "--set", "application=cc"]);
    let mut want_c = SMALL.to_vec();
    want_c.extend_from_slice(&["--set", "application=cc"]);
    assert_eq!(outcome(direct)["output_sha256"], oracle(&want_c));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let spec = ExperimentSpec::from_toml(&std::fs::read_to_string(&path).unwrap(), &[]).unwrap();
        names.push(spec.name);
    }
    names.sort();
    assert_eq!(names, ["direct", "offload", "offload-opt"]);
}
