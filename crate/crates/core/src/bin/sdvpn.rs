// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Command-line front end. Controller state lives in a JSON journal that is
//! replayed on every invocation, so each subcommand sees the effects of all
//! earlier ones.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sdvpn::dataplane::SimTime;
use sdvpn::harness;
use sdvpn::packet::Packet;
use sdvpn::policy::parse_policy;
use sdvpn::runtime::{Runtime, RuntimeConfig};
use sdvpn::services::{parse_service_spec, CustomerId, ServiceId};
use sdvpn::topology::{load_topology, PeId, PortKey, PortNo};

#[derive(Parser)]
#[command(name = "sdvpn", version, about = "Software-defined MPLS VPN and VPLS controller")]
struct Cli {
    /// Journal holding the controller state.
    #[arg(long, global = true, default_value = "sdvpn-state.json")]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new journal from a topology file.
    Init {
        #[arg(long)]
        topology: PathBuf,
        /// Idle timeout of learned MAC rules, in seconds.
        #[arg(long, default_value_t = 60)]
        idle_timeout: u64,
        /// Overwrite an existing journal.
        #[arg(long)]
        force: bool,
    },
    /// List port keys (provider view).
    Keys {
        #[arg(long)]
        pe: Option<u32>,
    },
    /// Hand a port key to a customer.
    Grant {
        #[arg(long)]
        customer: String,
        #[arg(long)]
        key: String,
    },
    /// Provision a service from a spec file.
    Provision {
        #[arg(long)]
        customer: String,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    /// Remove a service and all of its rules.
    Deprovision {
        #[arg(long)]
        service: u32,
    },
    /// Print the rules of one PE.
    DumpRules {
        #[arg(long)]
        pe: u32,
    },
    /// Inject a packet (JSON file) on a PE port.
    Inject {
        #[arg(long)]
        pe: u32,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        packet: PathBuf,
        /// Simulated time of the injection, in seconds; idle rules expire first.
        #[arg(long)]
        at: Option<f64>,
    },
    /// Print per-PE rule counts and controller counters.
    Stats,
    /// Run the scale matrix and write the CSV dataset.
    Bench {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "1..5")]
        scales: String,
        #[arg(long, default_value = "1..3")]
        scenarios: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rule_dump: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Grant {
        customer: String,
        key: String,
    },
    Provision {
        customer: String,
        spec: String,
        policies: Option<String>,
    },
    Deprovision {
        service: u32,
    },
    Inject {
        at_ms: u64,
        pe: u32,
        port: u16,
        packet: Packet,
    },
}

#[derive(Serialize, Deserialize)]
struct Journal {
    topology: String,
    idle_timeout_secs: u64,
    ops: Vec<Op>,
}

impl Journal {
    fn load(path: &Path) -> Result<Journal> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {} (run `sdvpn init` first)", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Rebuilds the runtime by replaying every recorded operation.
    fn replay(&self) -> Result<Runtime> {
        let topo = load_topology(&self.topology)?;
        let config = RuntimeConfig {
            idle_timeout: Duration::from_secs(self.idle_timeout_secs),
            ..RuntimeConfig::default()
        };
        let mut rt = Runtime::new(topo, config)?;
        for op in &self.ops {
            apply(&mut rt, op)?;
        }
        Ok(rt)
    }
}

fn apply(rt: &mut Runtime, op: &Op) -> Result<String> {
    Ok(match op {
        Op::Grant { customer, key } => {
            let port = rt.grant_key(&CustomerId::new(customer.as_str()), &PortKey(key.clone()))?;
            format!("granted {key} ({port}) to {customer}")
        }
        Op::Provision {
            customer,
            spec,
            policies,
        } => {
            let spec = parse_service_spec(spec)?;
            let policies = match policies {
                Some(p) => parse_policy(p)?,
                None => Vec::new(),
            };
            let id = rt.provision(&CustomerId::new(customer.as_str()), &spec, &policies)?;
            format!("provisioned service {id}")
        }
        Op::Deprovision { service } => {
            let n = rt.deprovision(ServiceId(*service))?;
            format!("removed {n} rules")
        }
        Op::Inject {
            at_ms,
            pe,
            port,
            packet,
        } => {
            rt.set_time(SimTime(*at_ms));
            rt.expire_idle();
            let r = rt.inject_at(PeId(*pe), PortNo(*port), packet.clone())?;
            let delivered: Vec<_> = r
                .delivered()
                .iter()
                .map(|(p, pkt)| serde_json::json!({ "port": p, "packet": pkt }))
                .collect();
            let outs: Vec<_> = r
                .packet_outs
                .iter()
                .map(|(p, pkt)| serde_json::json!({ "port": p, "packet": pkt }))
                .collect();
            let events: Vec<_> = r
                .transmission
                .controller_events
                .iter()
                .map(|(pe, ev)| serde_json::json!({ "pe": pe, "reason": ev.reason.name(), "ingress": ev.ingress }))
                .collect();
            serde_json::to_string_pretty(&serde_json::json!({
                "delivered": delivered,
                "controller_events": events,
                "packet_outs": outs,
                "runs_with_drops": r.transmission.runs_with_drops,
            }))?
        }
    })
}

/// Writes to stdout; a closed pipe surfaces as an `io::Error`.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Applies a new operation and appends it to the journal on success.
fn record(state: &Path, op: Op) -> Result<()> {
    let mut journal = Journal::load(state)?;
    let mut rt = journal.replay()?;
    let out = apply(&mut rt, &op)?;
    journal.ops.push(op);
    journal.save(state)?;
    emit(&format!("{out}\n"))
}

/// Parses `a..b` (inclusive) or a comma list.
fn parse_range(s: &str) -> Result<Vec<u8>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u8, u8) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty range {s}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u8>().map_err(Into::into))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let state = cli.state.as_path();
    match cli.command {
        Command::Init {
            topology,
            idle_timeout,
            force,
        } => {
            if state.exists() && !force {
                bail!("{} exists; pass --force to overwrite", state.display());
            }
            let text = fs::read_to_string(&topology)?;
            let topo = load_topology(&text)?;
            let journal = Journal {
                topology: text,
                idle_timeout_secs: idle_timeout,
                ops: Vec::new(),
            };
            journal.save(state)?;
            emit(&format!("initialized {} PEs into {}\n", topo.num_pes(), state.display()))?;
        }
        Command::Keys { pe } => {
            let journal = Journal::load(state)?;
            let topo = load_topology(&journal.topology)?;
            let mut keys: Vec<_> = topo
                .keys()
                .filter(|(_, p)| pe.is_none_or(|n| p.pe == PeId(n)))
                .collect();
            keys.sort_by_key(|(_, p)| *p);
            let text: String = keys
                .into_iter()
                .map(|(key, port)| format!("{}\t{}\t{}\n", port.pe, port.port_no, key.as_str()))
                .collect();
            emit(&text)?;
        }
        Command::Grant { customer, key } => record(state, Op::Grant { customer, key })?,
        Command::Provision {
            customer,
            spec,
            policies,
        } => {
            let spec = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let policies = policies
                .map(|p| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            record(
                state,
                Op::Provision {
                    customer,
                    spec,
                    policies,
                },
            )?;
        }
        Command::Deprovision { service } => record(state, Op::Deprovision { service })?,
        Command::DumpRules { pe } => {
            let rt = Journal::load(state)?.replay()?;
            emit(&rt.dump_rules(PeId(pe))?)?;
        }
        Command::Inject { pe, port, packet, at } => {
            let text = fs::read_to_string(&packet).with_context(|| format!("reading {}", packet.display()))?;
            let packet: Packet = serde_json::from_str(&text)?;
            let journal = Journal::load(state)?;
            let last = journal
                .ops
                .iter()
                .filter_map(|op| match op {
                    Op::Inject { at_ms, .. } => Some(*at_ms),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            let at_ms = match at {
                Some(s) if s >= 0.0 => ((s * 1000.0) as u64).max(last),
                Some(s) => bail!("negative time {s}"),
                None => last,
            };
            record(
                state,
                Op::Inject {
                    at_ms,
                    pe,
                    port,
                    packet,
                },
            )?;
        }
        Command::Stats => {
            let rt = Journal::load(state)?.replay()?;
            let stats = rt.stats();
            let per_pe: Vec<_> = stats
                .per_pe
                .iter()
                .map(|(pe, c)| serde_json::json!({ "pe": pe, "tables": c, "total": c.iter().sum::<usize>() }))
                .collect();
            let services: Vec<_> = rt
                .service_ids()
                .filter_map(|id| rt.service(id))
                .map(|s| {
                    serde_json::json!({
                        "id": s.id,
                        "name": s.name,
                        "kind": s.kind(),
                        "customer": s.customer,
                        "label": s.delimiter,
                        "ports": s.ports().len(),
                    })
                })
                .collect();
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "now_ms": stats.now.0,
                "per_pe": per_pe,
                "counters": stats.counters,
                "services": services,
            }))?;
            emit(&format!("{json}\n"))?;
        }
        Command::Bench {
            seed,
            scales,
            scenarios,
            out,
            rule_dump,
        } => {
            let scales = parse_range(&scales)?;
            let scenarios = parse_range(&scenarios)?;
            let results = harness::run_matrix(seed, &scales, &scenarios, rule_dump.as_deref())?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            harness::write_csv(&results, file)?;
            for r in &results {
                eprintln!(
                    "scale {} scenario {}: max_total {} on {} in {:.2?}",
                    r.scale, r.scenario, r.max_total, r.bottleneck_pe, r.wall
                );
            }
            emit(&format!("wrote {} rows to {}\n", results.len(), out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
