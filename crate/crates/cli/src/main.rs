//! `bench`: run experiments, compare their reports, and host the agents as
//! separate processes bridged over TCP.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use farmem::experiment::{self, compare, digest, ExperimentSpec, Report};
use farmem::graphbench::{self, FamCsr};
use farmem::{AccessMode, ClientId, Fabric, FabricConfig, HostAgent, LinkKind, MemoryAgent, MemoryAgentConfig, ProxyService};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bench", version, about = "Far-memory runtime benchmark driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(clap::Args)]
struct SpecArgs {
    /// Experiment file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set proxy.cache_mode=dynamic`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(ExperimentSpec::from_toml(&text, &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment in this process and write its JSON report.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Serve a memory agent on a TCP address.
    MemoryAgent {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        #[arg(long)]
        capacity: Option<u64>,
        #[arg(long, default_value_t = 1)]
        node_id: u16,
    },
    /// Serve a proxy in front of a remote memory agent.
    Proxy {
        /// Address of the memory agent.
        #[arg(long)]
        memory: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, default_value_t = 2)]
        node_id: u16,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Run the configured application as one host against a remote proxy or
    /// memory agent.
    Host {
        #[arg(long)]
        connect: String,
        #[arg(long, default_value_t = 1)]
        client: u32,
        /// Directory the memory agent reads preloaded files from. Without
        /// it the graph is written through the host buffer.
        #[arg(long)]
        shared_dir: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
}

fn fabric_config(spec: &ExperimentSpec, node_id: u16) -> Result<FabricConfig> {
    Ok(FabricConfig { node_id, ..spec.fabric.build()? })
}

fn announce(what: &str, addr: std::net::SocketAddr) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{what} listening on {addr}")?;
    out.flush()?;
    Ok(())
}

fn serve_forever() -> ! {
    loop {
        std::thread::park();
    }
}

#[derive(Serialize)]
struct HostOutcome {
    application: graphbench::Algorithm,
    client: u32,
    output_sha256: String,
    wall_secs: f64,
    host: farmem::host_agent::HostStats,
    traffic: farmem::TrafficSnapshot,
}

fn run_host(addr: &str, client: u32, shared_dir: Option<&Path>, spec: &ExperimentSpec) -> Result<HostOutcome> {
    let csr = spec.graph.build()?;
    let summary = experiment::summarize(spec, &csr);
    let fabric = Fabric::new(fabric_config(spec, 16 + client as u16)?);
    let config = experiment::host_config(spec, ClientId(client), summary.buffer_chunks);
    let host = HostAgent::connect_tcp(&fabric, addr, config).with_context(|| format!("connecting to {addr}"))?;
    let graph = match shared_dir {
        Some(dir) => FamCsr::preload(&host, &csr, dir, &format!("client{client}"))?,
        None => FamCsr::write_through(&host, &csr)?,
    };
    let before = fabric.counters();
    if spec.proxy.static_vertices {
        for h in graph.vertex_objects() {
            host.static_load(&h, 0, h.chunks())?;
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.threads).build()?;
    let started = std::time::Instant::now();
    let out = pool.install(|| graphbench::run(spec.application, &graph, &spec.params))?;
    let wall_secs = started.elapsed().as_secs_f64();
    Ok(HostOutcome {
        application: spec.application,
        client,
        output_sha256: digest(&out.to_bytes()),
        wall_secs,
        host: host.stats(),
        traffic: fabric.counters().since(&before),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FARMEM_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Run { spec, out } => {
            let spec = spec.load()?;
            let report = experiment::run_experiment(&spec)?;
            let json = report.to_json();
            match out {
                Some(p) => std::fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            for (i, r) in report.runs.iter().enumerate() {
                let net = r.traffic.link(LinkKind::Net);
                eprintln!(
                    "{} run {i}: net on-demand {} B, background {} B, modeled {:.6} s, wall {:.3} s",
                    spec.name, net.bytes_on_demand, net.bytes_background, r.modeled_secs, r.wall_secs
                );
            }
        }
        Command::Compare { reports, format } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    Report::from_json(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&loaded)?;
            match format {
                Format::Text => print!("{}", cmp.to_text()),
                Format::Csv => print!("{}", cmp.to_csv()?),
            }
        }
        Command::MemoryAgent { listen, data_dir, capacity, node_id } => {
            let fabric = Fabric::new(FabricConfig { node_id, ..FabricConfig::default() });
            let defaults = MemoryAgentConfig::default();
            let agent = MemoryAgent::start(&fabric, MemoryAgentConfig { data_dir, capacity: capacity.unwrap_or(defaults.capacity) })?;
            let listener = fabric.listen(listen.as_str(), agent.endpoint(), LinkKind::Net)?;
            announce("memory agent", listener.local_addr())?;
            serve_forever();
        }
        Command::Proxy { memory, listen, node_id, spec } => {
            let spec = spec.load()?;
            if spec.mode != AccessMode::Offload {
                bail!("a proxy needs mode = \"offload\"");
            }
            let fabric = Fabric::new(fabric_config(&spec, node_id)?);
            let net_ep = fabric.create_endpoint(ClientId::SYSTEM);
            let remote = fabric.connect(memory.as_str(), net_ep, LinkKind::Net).with_context(|| format!("connecting to {memory}"))?;
            let config = farmem::ProxyConfig { net_endpoint: Some(net_ep), ..spec.proxy.build(remote, spec.host.chunk_size) };
            let proxy = ProxyService::start(&fabric, config)?;
            let listener = fabric.listen(listen.as_str(), proxy.endpoint(), LinkKind::Intra)?;
            announce("proxy", listener.local_addr())?;
            serve_forever();
        }
        Command::Host { connect, client, shared_dir, spec } => {
            let spec = spec.load()?;
            if client == 0 {
                bail!("client 0 is reserved for the agents");
            }
            let outcome = run_host(&connect, client, shared_dir.as_deref(), &spec)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
    }
    Ok(())
}
