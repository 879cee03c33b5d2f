use std::collections::BTreeSet;

use farmem::experiment::{compare, run_experiment, CorunSpec, ExperimentSpec, GraphKind, Report};
use farmem::graphbench::{run, uniform, AlgoParams, Algorithm, MemGraph};
use farmem::{AccessMode, CacheMode, ClientId, LinkKind};
use sha2::{Digest, Sha256};

fn small(name: &str, app: Algorithm, overrides: &[&str]) -> ExperimentSpec {
    let base = format!(
        "name = \"{name}\"\napplication = \"{app}\"\nthreads = 1\n\n[graph]\nkind = \"uniform\"\nvertices = 2000\nedges = 20000\nseed = 9\n\n\
         [host]\nchunk_size = 4096\n\n[params]\niterations = 4\n"
    );
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentSpec::from_toml(&base, &o).unwrap()
}

fn oracle_sha(spec: &ExperimentSpec, app: Algorithm, p: &AlgoParams) -> String {
    let g = MemGraph::new(uniform(spec.graph.vertices, spec.graph.edges, spec.graph.seed).unwrap());
    hex::encode(Sha256::digest(run(app, &g, p).unwrap().to_bytes()))
}

#[test]
fn same_spec_twice_gives_identical_counters() {
    for extra in [&[][..], &["proxy.cache_mode=\"static\"", "proxy.static_vertices=true"][..]] {
        let spec = ExperimentSpec { repetitions: 2, ..small("det", Algorithm::Pagerank, extra) };
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.runs[0].traffic, a.runs[1].traffic);
        assert_eq!(a.runs[0].traffic, b.runs[0].traffic);
        assert_eq!(a.runs[0].output_sha256, b.runs[1].output_sha256);
        assert_eq!(a.runs[0].host, b.runs[0].host);
    }
}

#[test]
fn direct_and_offload_agree_on_outputs_but_not_counters() {
    for app in Algorithm::ALL {
        let d = run_experiment(&small("direct", app, &["mode=\"direct\""])).unwrap();
        let o = run_experiment(&small("offload", app, &[])).unwrap();
        let want = oracle_sha(&d.spec, app, &d.spec.params);
        assert_eq!(d.runs[0].output_sha256, want, "{app}");
        assert_eq!(o.runs[0].output_sha256, want, "{app}");
        assert_eq!(d.runs[0].traffic.link(LinkKind::Intra).total_bytes(), 0);
        assert!(o.runs[0].traffic.link(LinkKind::Intra).total_bytes() > 0);
        assert_ne!(d.runs[0].traffic, o.runs[0].traffic);
        assert_eq!(d.runs[0].traffic.link(LinkKind::Net).bytes_background, 0);
    }
}

#[test]
fn static_vertex_caching_lowers_pagerank_on_demand_net_bytes() {
    let off = run_experiment(&small("off", Algorithm::Pagerank, &[])).unwrap();
    let stat = run_experiment(&small("static", Algorithm::Pagerank, &["proxy.cache_mode=\"static\"", "proxy.static_vertices=true"])).unwrap();
    let (a, b) = (&off.runs[0], &stat.runs[0]);
    assert_eq!(a.output_sha256, b.output_sha256);
    assert!(
        b.traffic.link(LinkKind::Net).bytes_on_demand < a.traffic.link(LinkKind::Net).bytes_on_demand,
        "{} vs {}",
        b.traffic.link(LinkKind::Net).bytes_on_demand,
        a.traffic.link(LinkKind::Net).bytes_on_demand
    );
    assert!(b.host.static_reads > 0);
    assert!(b.hit_rate.unwrap() > 0.0);
    assert!(a.hit_rate.is_none());
    let net = b.traffic.link(LinkKind::Net);
    assert_eq!(net.bytes_on_demand + net.bytes_background, net.total_bytes());
}

#[test]
fn identical_reports_compare_at_unity() {
    let r = run_experiment(&small("one", Algorithm::Bfs, &["proxy.cache_mode=\"dynamic\""])).unwrap();
    let cmp = compare(&[r.clone(), r]).unwrap();
    assert!(!cmp.rows.is_empty());
    for row in &cmp.rows {
        if let Some(q) = row.ratio {
            assert_eq!(q, 1.0, "{}", row.metric);
        }
        if let Some(x) = row.reduction {
            assert_eq!(x, 0.0, "{}", row.metric);
        }
        if let Some(s) = row.speedup {
            assert_eq!(s, 1.0, "{}", row.metric);
        }
    }
    assert!(cmp.rows.iter().any(|r| r.metric == "hit_rate" && r.ratio == Some(1.0)));
}

#[test]
fn reduction_and_speedup_arithmetic() {
    let base = run_experiment(&small("base", Algorithm::Bfs, &[])).unwrap();
    let mut other = base.clone();
    other.spec.name = "other".into();
    let set = |r: &mut Report, bytes: u64, secs: f64| {
        r.runs[0].traffic.links.get_mut(&LinkKind::Net).unwrap().bytes_on_demand = bytes;
        r.runs[0].modeled_secs = secs;
    };
    let mut base = base;
    set(&mut base, 1000, 2.0);
    set(&mut other, 580, 0.5);
    let cmp = compare(&[base, other]).unwrap();
    let row = |m: &str| cmp.rows.iter().find(|r| r.metric == m).unwrap().clone();
    let bytes = row("net_on_demand_bytes");
    assert_eq!(bytes.ratio, Some(0.58));
    assert!((bytes.reduction.unwrap() - 0.42).abs() < 1e-15);
    assert_eq!(bytes.speedup, None);
    let time = row("modeled_secs");
    assert_eq!(time.speedup, Some(4.0));
    assert_eq!(time.reduction, None);
    let csv = cmp.to_csv().unwrap();
    assert!(csv.starts_with("metric,report,baseline,value,ratio,reduction,speedup\n"));
    assert!(csv.contains("net_on_demand_bytes,other,1000.0,580.0,0.58,"));
    assert!(cmp.to_text().contains("42.0%"));
}

#[test]
fn compare_rejects_mismatched_reports() {
    let a = run_experiment(&small("a", Algorithm::Bfs, &[])).unwrap();
    let b = run_experiment(&small("b", Algorithm::Cc, &[])).unwrap();
    let c = run_experiment(&small("c", Algorithm::Bfs, &["graph.seed=10"])).unwrap();
    assert!(compare(std::slice::from_ref(&a)).is_err());
    assert!(compare(&[a.clone(), b]).is_err());
    assert!(compare(&[a, c]).is_err());
}

#[test]
fn corun_counters_sum_to_link_totals() {
    let mut spec = small("corun", Algorithm::Pagerank, &["proxy.cache_mode=\"static\"", "proxy.static_vertices=true"]);
    spec.corun = Some(CorunSpec { application: Algorithm::Bfs, params: AlgoParams { source: 3, ..AlgoParams::default() } });
    let r = run_experiment(&spec).unwrap();
    let run0 = &r.runs[0];
    let corun = run0.corun.as_ref().unwrap();
    assert_eq!(corun.client, 2);
    assert_eq!(run0.output_sha256, oracle_sha(&spec, Algorithm::Pagerank, &spec.params));
    assert_eq!(corun.output_sha256, oracle_sha(&spec, Algorithm::Bfs, &spec.corun.as_ref().unwrap().params));
    assert!(corun.host.read_requests + corun.host.static_reads > 0);
    for kind in LinkKind::ALL {
        let link = run0.traffic.link(kind);
        let clients: Vec<_> = run0.traffic.clients.keys().map(|&c| run0.traffic.client(c, kind)).collect();
        assert_eq!(clients.iter().map(|t| t.total_bytes()).sum::<u64>(), link.total_bytes(), "{kind}");
        assert_eq!(clients.iter().map(|t| t.bytes_on_demand).sum::<u64>(), link.bytes_on_demand, "{kind}");
        assert_eq!(clients.iter().map(|t| t.bytes_background).sum::<u64>(), link.bytes_background, "{kind}");
        assert_eq!(clients.iter().map(|t| t.messages).sum::<u64>(), link.messages, "{kind}");
        assert_eq!(run0.traffic.client_sum(kind).total_bytes(), link.total_bytes());
    }
    assert!(run0.traffic.client(ClientId(1), LinkKind::Intra).total_bytes() > 0);
    assert!(run0.traffic.client(ClientId(2), LinkKind::Intra).total_bytes() > 0);
}

/// Dotted key paths of a JSON value; map keys that are numbers become `*`.
fn key_paths(v: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let k = if k.parse::<u64>().is_ok() { "*" } else { k.as_str() };
                let p = if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
                out.insert(p.clone());
                key_paths(x, &p, out);
            }
        }
        serde_json::Value::Array(a) => {
            for x in a {
                key_paths(x, &format!("{prefix}[]"), out);
            }
        }
        _ => {}
    }
}

#[test]
fn report_schema_matches_golden() {
    let mut spec = small("schema", Algorithm::Bfs, &["proxy.cache_mode=\"dynamic\"", "graph.path=\"unused.el\""]);
    spec.corun = Some(CorunSpec::default());
    let r = run_experiment(&spec).unwrap();
    let json = r.to_json();
    assert_eq!(Report::from_json(&json).unwrap(), r);
    let mut paths = BTreeSet::new();
    key_paths(&serde_json::from_str(&json).unwrap(), "", &mut paths);
    let got: Vec<String> = paths.into_iter().collect();
    let golden: Vec<String> = include_str!("golden/report_schema.txt").lines().map(String::from).collect();
    assert_eq!(got, golden, "report schema changed; bump SCHEMA_VERSION and refresh the golden file");
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.spec.graph.kind, GraphKind::Uniform);
    assert_eq!(r.spec.mode, AccessMode::Offload);
    assert_eq!(r.spec.proxy.cache_mode, CacheMode::Dynamic);

    let mut old = serde_json::to_value(&r).unwrap();
    old["schema_version"] = 0.into();
    assert!(Report::from_json(&old.to_string()).is_err());
}
