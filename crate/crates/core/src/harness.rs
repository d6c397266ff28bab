// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Scale harness: generates hypothetical providers, drives traffic until
//! half of every VPLS site's hosts are learned, and measures per-PE flow
//! table sizes.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataplane::TableId;
use crate::packet::{Ipv4Prefix, MacAddr, Packet};
use crate::policy::{Direction, Policy, PolicyField};
use crate::runtime::{Counters, Runtime, RuntimeConfig, RuntimeError};
use crate::services::{CustomerId, GatewayAddr, ServiceId, ServiceKind, ServiceSpec, VlanBinding, VportSpec};
use crate::topology::{PeId, PhysicalPort, PortNo, Topology, TopologyError};

/// Provider size: PEs, services and mean sites per service.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub struct ScaleSpec {
    pub scale: u8,
    pub num_pes: u32,
    pub num_services: u32,
    pub avg_sites_per_service: u32,
}

pub const SCALES: [ScaleSpec; 5] = [
    ScaleSpec { scale: 1, num_pes: 4, num_services: 40, avg_sites_per_service: 6 },
    ScaleSpec { scale: 2, num_pes: 8, num_services: 70, avg_sites_per_service: 10 },
    ScaleSpec { scale: 3, num_pes: 10, num_services: 100, avg_sites_per_service: 15 },
    ScaleSpec { scale: 4, num_pes: 12, num_services: 200, avg_sites_per_service: 20 },
    ScaleSpec { scale: 5, num_pes: 16, num_services: 300, avg_sites_per_service: 30 },
];

/// Per-site population of one trial.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub struct Scenario {
    pub scenario: u8,
    pub prefixes_per_site: u32,
    pub macs_per_site: u32,
    pub policies_per_site: u32,
    pub vlans_per_vpls: u16,
}

pub const SCENARIOS: [Scenario; 3] = [
    Scenario { scenario: 1, prefixes_per_site: 4, macs_per_site: 30, policies_per_site: 5, vlans_per_vpls: 30 },
    Scenario { scenario: 2, prefixes_per_site: 6, macs_per_site: 40, policies_per_site: 5, vlans_per_vpls: 30 },
    Scenario { scenario: 3, prefixes_per_site: 8, macs_per_site: 60, policies_per_site: 5, vlans_per_vpls: 30 },
];

impl Scenario {
    /// Hosts per VPLS site that are active at measurement time.
    pub fn active_macs(&self) -> u32 {
        self.macs_per_site / 2
    }
}

pub fn scale(n: u8) -> Option<ScaleSpec> {
    SCALES.iter().copied().find(|s| s.scale == n)
}

pub fn scenario(n: u8) -> Option<Scenario> {
    SCENARIOS.iter().copied().find(|s| s.scenario == n)
}

/// The PE that hosts a quarter of every service's sites.
pub const BOTTLENECK_PE: PeId = PeId(0);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown {what} {value}")]
    Unknown { what: &'static str, value: u8 },
}

/// One customer site: a port plus the hosts (VPLS) behind it.
#[derive(Clone, Debug)]
pub struct Site {
    pub port: PhysicalPort,
    pub binding: VlanBinding,
    /// (vlan, mac) of every host; the first `active_macs` are active.
    pub hosts: Vec<(u16, MacAddr)>,
}

#[derive(Clone, Debug)]
pub struct ServicePlan {
    pub id: ServiceId,
    pub kind: ServiceKind,
    pub customer: CustomerId,
    pub sites: Vec<Site>,
}

/// A provisioned provider ready for traffic.
pub struct World {
    pub scale: ScaleSpec,
    pub scenario: Scenario,
    pub seed: u64,
    pub runtime: Runtime,
    pub services: Vec<ServicePlan>,
}

/// Site counts per service: pairs at mean+d and mean-d, so the mean is
/// exact; d is drawn from the seed in [0, mean/2]. Even services are VPLS.
pub fn site_counts(scale: &ScaleSpec, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(scale.scale) << 32));
    let avg = scale.avg_sites_per_service;
    let mut out = Vec::with_capacity(scale.num_services as usize);
    for k in 0..scale.num_services / 2 {
        let d = rng.gen_range(0..=avg / 2);
        // Alternate the larger member so neither service kind is favored.
        if k % 2 == 0 {
            out.extend([avg + d, avg - d]);
        } else {
            out.extend([avg - d, avg + d]);
        }
    }
    if scale.num_services % 2 == 1 {
        out.push(avg);
    }
    out
}

/// PE of each site: ceil(n/4) on the bottleneck PE, the rest round-robin
/// over the other PEs starting at an offset that rotates per service.
pub fn site_placement(service: usize, sites: u32, num_pes: u32) -> Vec<PeId> {
    let on_bottleneck = sites.div_ceil(4);
    let others = num_pes - 1;
    (0..sites)
        .map(|s| {
            if s < on_bottleneck || others == 0 {
                BOTTLENECK_PE
            } else {
                let j = (s - on_bottleneck) as usize;
                PeId(1 + ((service + j) % others as usize) as u32)
            }
        })
        .collect()
}

/// VLANs carried by site `s` of `n`; site 0 is the trunk site.
pub fn site_vlans(s: u32, n: u32, vlans: u16) -> BTreeSet<u16> {
    let v = u32::from(vlans);
    if n <= v {
        (1..=vlans).filter(|x| (u32::from(*x) - 1) % n == s).collect()
    } else {
        [((s % v) + 1) as u16].into_iter().collect()
    }
}

/// Host MAC of site `s`, index `j`; identical across services.
pub fn host_mac(s: u32, j: u32) -> MacAddr {
    MacAddr::from_u64(0x0200_0000_0000 | (u64::from(s) << 16) | u64::from(j))
}

fn site_prefix(s: u32, p: u32) -> Ipv4Prefix {
    Ipv4Prefix::new(Ipv4Addr::new(10, s as u8, p as u8, 0), 24)
}

fn site_gateway(s: u32) -> GatewayAddr {
    GatewayAddr {
        ip: Ipv4Addr::new(172, 16, s as u8, 1),
        len: 24,
    }
}

/// The per-site policy set: drop a handful of well-known services.
pub fn site_policies(port: &str, count: u32) -> Vec<Policy> {
    const BLOCKED: [(u8, u16); 5] = [(6, 21), (6, 23), (17, 69), (6, 445), (17, 161)];
    (0..count as usize)
        .map(|i| {
            let (proto, l4) = BLOCKED[i % BLOCKED.len()];
            let l4 = l4 + (i / BLOCKED.len()) as u16;
            Policy::new(
                vec![PolicyField::IpProtocol(proto), PolicyField::DestinationPort(l4)],
                vec![(port, Direction::In)],
            )
        })
        .collect()
}

fn vport_name(s: u32) -> String {
    format!("site{s}")
}

/// Builds the topology and provisions every service of a trial.
pub fn generate_provider(scale: ScaleSpec, scen: Scenario, seed: u64) -> Result<World, HarnessError> {
    generate_provider_with(scale, scen, seed, RuntimeConfig::default())
}

pub fn generate_provider_with(
    scale: ScaleSpec,
    scen: Scenario,
    seed: u64,
    config: RuntimeConfig,
) -> Result<World, HarnessError> {
    let counts = site_counts(&scale, seed);
    let placements: Vec<Vec<PeId>> = counts
        .iter()
        .enumerate()
        .map(|(i, n)| site_placement(i, *n, scale.num_pes))
        .collect();
    let mut ports_per_pe = vec![0u16; scale.num_pes as usize];
    for p in placements.iter().flatten() {
        ports_per_pe[p.0 as usize] += 1;
    }
    let pes: Vec<(PeId, u16)> = ports_per_pe
        .iter()
        .enumerate()
        .map(|(i, n)| (PeId(i as u32), (*n).max(1)))
        .collect();
    let topo = Topology::build(seed, &pes)?;
    let mut runtime = Runtime::new(topo, config)?;
    let mut next_port = vec![1u16; scale.num_pes as usize];
    let mut services = Vec::with_capacity(counts.len());
    for (i, place) in placements.iter().enumerate() {
        let kind = if i % 2 == 0 { ServiceKind::Vpls } else { ServiceKind::MplsVpn };
        let customer = CustomerId::new(format!("cust{i}"));
        let n = place.len() as u32;
        let mut spec = ServiceSpec::new(kind, format!("svc{i}"));
        let mut sites = Vec::with_capacity(place.len());
        let mut policies = Vec::new();
        for (s, pe) in place.iter().enumerate() {
            let s = s as u32;
            let port_no = PortNo(next_port[pe.0 as usize]);
            next_port[pe.0 as usize] += 1;
            let topo = runtime.topology().clone();
            let port = topo.port(*pe, port_no).expect("planned port exists");
            let key = topo.port_key(*pe, port_no).expect("planned port has a key").clone();
            runtime.grant_key(&customer, &key)?;
            let name = vport_name(s);
            let (binding, hosts) = match kind {
                ServiceKind::Vpls => {
                    let own: Vec<u16> = site_vlans(s, n, scen.vlans_per_vpls).into_iter().collect();
                    let hosts = (0..scen.macs_per_site)
                        .map(|j| {
                            let vlan = if s == 0 {
                                (j % u32::from(scen.vlans_per_vpls)) as u16 + 1
                            } else {
                                own[j as usize % own.len()]
                            };
                            (vlan, host_mac(s, j))
                        })
                        .collect();
                    let binding = if s == 0 {
                        VlanBinding::Trunk
                    } else {
                        VlanBinding::Vlans(own.into_iter().collect())
                    };
                    spec.vlan_binds.push((name.clone(), binding.clone()));
                    (binding, hosts)
                }
                ServiceKind::MplsVpn => {
                    for p in 0..scen.prefixes_per_site {
                        spec.routes.push((site_prefix(s, p), name.clone()));
                    }
                    (VlanBinding::Trunk, Vec::new())
                }
            };
            spec.vports.push(VportSpec {
                name: name.clone(),
                key,
                ip: (kind == ServiceKind::MplsVpn).then(|| site_gateway(s)),
            });
            policies.extend(site_policies(&name, scen.policies_per_site));
            sites.push(Site { port, binding, hosts });
        }
        let id = runtime.provision(&customer, &spec, &policies)?;
        services.push(ServicePlan {
            id,
            kind,
            customer,
            sites,
        });
    }
    Ok(World {
        scale,
        scenario: scen,
        seed,
        runtime,
        services,
    })
}

/// Measurements of one trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub scale: u8,
    pub scenario: u8,
    pub seed: u64,
    pub per_pe: Vec<(PeId, [usize; 6])>,
    pub max_total: usize,
    pub bottleneck_pe: PeId,
    pub counters: Counters,
    /// Hosts expected to be learned at snapshot time.
    pub active_macs: usize,
    /// Hosts actually learned at snapshot time.
    pub learned_macs: usize,
    /// Controller events caused by post-snapshot unicast checks.
    pub verify_events: usize,
    /// Unicast checks that reached exactly their target port.
    pub verify_delivered: usize,
    pub verify_sent: usize,
    /// Installed rules equal installs minus removals minus expiries.
    pub conserved: bool,
    pub wall: Duration,
}

impl TrialResult {
    pub fn breakdown(&self, pe: PeId) -> [usize; 6] {
        self.per_pe
            .iter()
            .find(|(p, _)| *p == pe)
            .map_or([0; 6], |(_, c)| *c)
    }
}

fn broadcast(src: MacAddr, vlan: u16) -> Packet {
    Packet::ethernet(src, MacAddr::BROADCAST, Some(vlan))
}

/// Drives bursty traffic: at t=0 the passive half of every VPLS site
/// sends, those entries idle out, then the active half sends. The
/// snapshot is taken with exactly the active half learned.
pub fn run_trial(world: &mut World) -> Result<TrialResult, HarnessError> {
    let started = Instant::now();
    let active = world.scenario.active_macs() as usize;
    let idle = world.runtime.config().idle_timeout;
    let rt = &mut world.runtime;
    let t0 = rt.now();
    for plan in world.services.iter().filter(|p| p.kind == ServiceKind::Vpls) {
        for site in &plan.sites {
            for &(vlan, mac) in &site.hosts[active..] {
                rt.inject(site.port, broadcast(mac, vlan))?;
            }
        }
    }
    rt.set_time(t0.plus(idle + Duration::from_secs(1)));
    rt.expire_idle();
    for plan in world.services.iter().filter(|p| p.kind == ServiceKind::Vpls) {
        for site in &plan.sites {
            for &(vlan, mac) in &site.hosts[..active] {
                rt.inject(site.port, broadcast(mac, vlan))?;
            }
        }
    }
    let stats = rt.stats();
    let (bottleneck_pe, max_total) = stats.max_pe().expect("topology has PEs");
    let conserved = stats.counters.live_rules() == stats.total() as u64;
    let mut learned_macs = 0;
    let mut active_macs = 0;
    for plan in world.services.iter().filter(|p| p.kind == ServiceKind::Vpls) {
        learned_macs += rt.learned_macs(plan.id);
        active_macs += plan.sites.len() * active;
    }
    let (verify_sent, verify_delivered, verify_events) = verify_unicasts(rt, &world.services, active)?;
    let result = TrialResult {
        scale: world.scale.scale,
        scenario: world.scenario.scenario,
        seed: world.seed,
        per_pe: stats.per_pe,
        max_total,
        bottleneck_pe,
        counters: stats.counters,
        active_macs,
        learned_macs,
        verify_events,
        verify_delivered,
        verify_sent,
        conserved,
        wall: started.elapsed(),
    };
    Ok(result)
}

/// One unicast per service between learned hosts (VPLS) or sites (MPLS VPN).
fn verify_unicasts(rt: &mut Runtime, services: &[ServicePlan], active: usize) -> Result<(usize, usize, usize), HarnessError> {
    let (mut sent, mut ok, mut events) = (0, 0, 0);
    for plan in services {
        let probe = match plan.kind {
            ServiceKind::Vpls => {
                let trunk = &plan.sites[0];
                plan.sites[1..].iter().find_map(|site| {
                    site.hosts[..active].iter().find_map(|&(vlan, src)| {
                        trunk.hosts[..active]
                            .iter()
                            .find(|(v, _)| *v == vlan)
                            .map(|&(_, dst)| (site.port, Packet::ethernet(src, dst, Some(vlan)), trunk.port))
                    })
                })
            }
            ServiceKind::MplsVpn if plan.sites.len() > 1 => {
                let dst_ip = Ipv4Addr::new(10, 1, 0, 7);
                let src_ip = Ipv4Addr::new(10, 0, 0, 7);
                let gw = crate::services::VirtualRouter::synthetic_mac(plan.id);
                Some((
                    plan.sites[0].port,
                    Packet::ipv4(MacAddr::from_u64(0x0200_00ff_0000), gw, src_ip, dst_ip),
                    plan.sites[1].port,
                ))
            }
            ServiceKind::MplsVpn => None,
        };
        let Some((from, pkt, to)) = probe else { continue };
        sent += 1;
        let r = rt.inject(from, pkt)?;
        events += r.controller_events();
        if r.delivered().len() == 1 && r.delivered()[0].0 == to {
            ok += 1;
        }
    }
    Ok((sent, ok, events))
}

/// Generates and measures one (scale, scenario) cell.
pub fn trial(scale: ScaleSpec, scen: Scenario, seed: u64, dump_dir: Option<&Path>) -> Result<TrialResult, HarnessError> {
    let mut world = generate_provider(scale, scen, seed)?;
    let started = Instant::now();
    let mut result = run_trial(&mut world)?;
    result.wall += started.elapsed().saturating_sub(result.wall);
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!(
            "scale{}-scenario{}-pe{}.rules",
            scale.scale, scen.scenario, result.bottleneck_pe.0
        ));
        fs::write(path, world.runtime.dump_rules(result.bottleneck_pe)?)?;
    }
    log::info!(
        "scale {} scenario {}: max {} rules on {} ({:.1?})",
        scale.scale,
        scen.scenario,
        result.max_total,
        result.bottleneck_pe,
        result.wall
    );
    Ok(result)
}

/// Runs every requested cell in (scale, scenario) order.
pub fn run_matrix(seed: u64, scales: &[u8], scenarios: &[u8], dump_dir: Option<&Path>) -> Result<Vec<TrialResult>, HarnessError> {
    let mut out = Vec::with_capacity(scales.len() * scenarios.len());
    for &sc in scales {
        let spec = scale(sc).ok_or(HarnessError::Unknown { what: "scale", value: sc })?;
        for &sn in scenarios {
            let scen = scenario(sn).ok_or(HarnessError::Unknown { what: "scenario", value: sn })?;
            out.push(trial(spec, scen, seed, dump_dir)?);
        }
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 11] = [
    "scale",
    "scenario",
    "seed",
    "max_total",
    "bottleneck_pe",
    "ingress",
    "redirector",
    "mplsvpn",
    "vplsfwd",
    "maclearner",
    "nexthop",
];

/// Writes one row per trial with the bottleneck PE's per-table counts.
pub fn write_csv<W: Write>(results: &[TrialResult], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        let b = r.breakdown(r.bottleneck_pe);
        let mut row = vec![
            r.scale.to_string(),
            r.scenario.to_string(),
            r.seed.to_string(),
            r.max_total.to_string(),
            r.bottleneck_pe.0.to_string(),
        ];
        row.extend(TableId::ALL.iter().map(|t| b[t.index()].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
