// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Shared fixtures and the brute-force rule oracle used by the integration
//! and acceptance tests. The oracle derives rule dumps from a plain
//! description of the instance without calling any compiler in the crate.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use sdvpn::packet::{MacAddr, Packet, PacketKind};
use sdvpn::policy::parse_policy;
use sdvpn::runtime::{Runtime, RuntimeConfig};
use sdvpn::services::{parse_service_spec, CustomerId, ServiceId};
use sdvpn::topology::{load_topology, PeId, PhysicalPort, PortKey, PortNo, Topology};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Mpls,
    Vpls,
}

#[derive(Clone, Debug)]
pub struct Port {
    pub name: &'static str,
    pub pe: u32,
    pub port: u16,
    pub ip: Option<&'static str>,
    /// VLAN binding for VPLS ports; `None` is trunk.
    pub vlans: Option<Vec<u16>>,
    /// Owner when the device is shared.
    pub owner: Option<&'static str>,
}

impl Port {
    pub fn routed(name: &'static str, pe: u32, port: u16, ip: &'static str) -> Port {
        Port { name, pe, port, ip: Some(ip), vlans: None, owner: None }
    }

    pub fn switched(name: &'static str, pe: u32, port: u16, vlans: Option<&[u16]>) -> Port {
        Port { name, pe, port, ip: None, vlans: vlans.map(|v| v.to_vec()), owner: None }
    }

    pub fn owned_by(mut self, owner: &'static str) -> Port {
        self.owner = Some(owner);
        self
    }
}

#[derive(Clone, Debug)]
pub struct PolicyDesc {
    pub fields: Vec<(&'static str, &'static str)>,
    /// (port name, direction is "in")
    pub applies: Vec<(&'static str, bool)>,
}

#[derive(Clone, Debug)]
pub struct ServiceDesc {
    pub kind: Kind,
    pub customer: &'static str,
    pub name: &'static str,
    pub ports: Vec<Port>,
    pub routes: Vec<(&'static str, &'static str)>,
    pub policies: Vec<PolicyDesc>,
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    /// (pe id, customer ports)
    pub pes: Vec<(u32, u16)>,
    pub services: Vec<ServiceDesc>,
}

impl Instance {
    pub fn topology_xml(&self) -> String {
        let mut s = format!("<topology seed=\"{}\">", self.seed);
        for (id, ports) in &self.pes {
            s.push_str(&format!("<pe id=\"{id}\" customer-ports=\"{ports}\"/>"));
        }
        s.push_str("</topology>");
        s
    }

    pub fn topology(&self) -> Topology {
        load_topology(&self.topology_xml()).unwrap()
    }

    pub fn key(&self, topo: &Topology, pe: u32, port: u16) -> String {
        topo.port_key(PeId(pe), PortNo(port)).unwrap().as_str().to_string()
    }

    pub fn spec_xml(&self, topo: &Topology, svc: &ServiceDesc) -> String {
        let kind = match svc.kind {
            Kind::Mpls => "mpls-vpn",
            Kind::Vpls => "vpls",
        };
        let mut s = format!("<service kind=\"{kind}\" name=\"{}\">", svc.name);
        for p in &svc.ports {
            let key = self.key(topo, p.pe, p.port);
            match p.ip {
                Some(ip) => s.push_str(&format!("<vport name=\"{}\" key=\"{key}\" ip=\"{ip}\"/>", p.name)),
                None => s.push_str(&format!("<vport name=\"{}\" key=\"{key}\"/>", p.name)),
            }
        }
        for (prefix, port) in &svc.routes {
            s.push_str(&format!("<route prefix=\"{prefix}\" vport=\"{port}\"/>"));
        }
        if svc.kind == Kind::Vpls {
            for p in &svc.ports {
                let v = match &p.vlans {
                    None => "trunk".to_string(),
                    Some(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                };
                s.push_str(&format!("<vlanbind vport=\"{}\" vlans=\"{v}\"/>", p.name));
            }
        }
        if svc.ports.iter().any(|p| p.owner.is_some()) {
            let owners: Vec<String> = svc
                .ports
                .iter()
                .map(|p| format!("{}:{}", p.owner.unwrap_or(svc.customer), p.name))
                .collect();
            s.push_str(&format!("<shared owners=\"{}\"/>", owners.join(", ")));
        }
        s.push_str("</service>");
        s
    }

    pub fn policy_xml(svc: &ServiceDesc) -> String {
        let mut s = String::from("<policies>");
        for p in &svc.policies {
            s.push_str("<policy>");
            for (n, v) in &p.fields {
                s.push_str(&format!("<match name=\"{n}\" value=\"{v}\"/>"));
            }
            s.push_str("<apply>");
            for (port, inbound) in &p.applies {
                let d = if *inbound { "in" } else { "out" };
                s.push_str(&format!("<virtualport name=\"{port}\" direction=\"{d}\"/>"));
            }
            s.push_str("</apply></policy>");
        }
        s.push_str("</policies>");
        s
    }

    /// Builds a runtime, grants keys and provisions every service in order.
    pub fn provision(&self, config: RuntimeConfig) -> (Runtime, Vec<ServiceId>) {
        let topo = self.topology();
        let mut rt = Runtime::new(topo.clone(), config).unwrap();
        let mut ids = Vec::new();
        for svc in &self.services {
            for p in &svc.ports {
                let owner = CustomerId::new(p.owner.unwrap_or(svc.customer));
                rt.grant_key(&owner, &PortKey(self.key(&topo, p.pe, p.port))).unwrap();
            }
            let spec = parse_service_spec(&self.spec_xml(&topo, svc)).unwrap();
            let policies = parse_policy(&Self::policy_xml(svc)).unwrap_or_default();
            ids.push(rt.provision(&CustomerId::new(svc.customer), &spec, &policies).unwrap());
        }
        (rt, ids)
    }

    pub fn port(&self, svc: usize, name: &str) -> PhysicalPort {
        let p = self.services[svc].ports.iter().find(|p| p.name == name).unwrap();
        self.topology().port(PeId(p.pe), PortNo(p.port)).unwrap()
    }
}

// ----- oracle -----

const TABLES: [&str; 6] = ["ingress", "redirector", "mplsvpn", "vplsfwd", "maclearner", "nexthop"];
const MATCH_ORDER: [&str; 11] = [
    "in_port", "kind", "lsmd", "label", "vlan", "src_mac", "dst_mac", "src_ip", "dst_ip", "ip_proto", "l4_dst",
];

struct Line {
    table: usize,
    priority: u32,
    text: String,
}

fn render_match(fields: &[(&str, String)]) -> String {
    let mut parts = Vec::new();
    for key in MATCH_ORDER {
        for (k, v) in fields {
            if *k == key {
                parts.push(format!("{k}={v}"));
            }
        }
    }
    if parts.is_empty() {
        "*".into()
    } else {
        parts.join(",")
    }
}

fn line(table: usize, priority: u32, m: &[(&str, String)], actions: &str, cookie: &str) -> Line {
    Line {
        table,
        priority,
        text: format!("{}|{priority}|{}|{actions}|{cookie}|-", TABLES[table], render_match(m)),
    }
}

fn policy_field(name: &str, value: &str) -> (&'static str, String) {
    match name {
        "destinationIP" | "sourceIP" => {
            let v = if value.contains('/') { value.to_string() } else { format!("{value}/32") };
            (if name == "destinationIP" { "dst_ip" } else { "src_ip" }, v)
        }
        "destinationMAC" => ("dst_mac", value.to_lowercase()),
        "sourceMAC" => ("src_mac", value.to_lowercase()),
        "vlan" => ("vlan", value.to_string()),
        "ipProtocol" => (
            "ip_proto",
            match value {
                "tcp" => "6".into(),
                "udp" => "17".into(),
                "icmp" => "1".into(),
                n => n.to_string(),
            },
        ),
        "destinationPort" => ("l4_dst", value.to_string()),
        other => panic!("oracle does not know field {other}"),
    }
}

fn prefix_len(p: &str) -> u32 {
    p.split('/').nth(1).unwrap().parse().unwrap()
}

/// Expected rule dump of every PE after provisioning `inst` in order.
pub fn oracle_dumps(inst: &Instance) -> BTreeMap<u32, String> {
    let mut pes: Vec<(u32, u16)> = inst.pes.clone();
    pes.sort();
    let index: BTreeMap<u32, usize> = pes.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
    let nports: BTreeMap<u32, u16> = pes.iter().copied().collect();
    let outer = |pe: u32| 1000 + index[&pe] as u32;
    let core_port = |pe: u32, peer: u32| {
        let rank = pes.iter().filter(|(q, _)| *q != pe).position(|(q, _)| *q == peer).unwrap();
        nports[&pe] + 1 + rank as u16
    };
    let mut out: BTreeMap<u32, Vec<Line>> = BTreeMap::new();
    for &(pe, _) in &pes {
        let lines = out.entry(pe).or_default();
        let peers: Vec<u32> = pes.iter().map(|(q, _)| *q).filter(|q| *q != pe).collect();
        for &q in &peers {
            let c = core_port(pe, q).to_string();
            lines.push(line(0, 300, &[("in_port", c.clone()), ("kind", "ldp_msg".into())], "controller:ldp_msg", "infra"));
            lines.push(line(0, 300, &[("in_port", c.clone()), ("kind", "routing_msg".into())], "controller:routing_msg", "infra"));
            lines.push(line(0, 200, &[("in_port", c)], "pop_label,set_lsmd:1,goto:redirector", "infra"));
        }
        for &q in &peers {
            lines.push(line(
                5,
                100,
                &[("lsmd", "0".into()), ("label", outer(q).to_string())],
                &format!("output:{}", core_port(pe, q)),
                "infra",
            ));
        }
    }
    for (i, svc) in inst.services.iter().enumerate() {
        let label = (16 + i as u32).to_string();
        let cookie = format!("svc:{i}");
        let gw = format!("02:00:5e:{:02x}:{:02x}:{:02x}", (i >> 16) & 0xff, (i >> 8) & 0xff, i & 0xff);
        let hosting: BTreeSet<u32> = svc.ports.iter().map(|p| p.pe).collect();
        let carries = |p: &Port, v: u16| p.vlans.as_ref().is_none_or(|set| set.contains(&v));
        let union: BTreeSet<u16> = svc.ports.iter().filter_map(|p| p.vlans.clone()).flatten().collect();
        for &pe in &hosting {
            let lines = out.get_mut(&pe).unwrap();
            let mut local: Vec<&Port> = svc.ports.iter().filter(|p| p.pe == pe).collect();
            local.sort_by_key(|p| p.port);
            for p in &local {
                lines.push(line(
                    0,
                    100,
                    &[("in_port", p.port.to_string())],
                    &format!("push_label:{label},set_lsmd:0,goto:redirector"),
                    &cookie,
                ));
            }
            let lab = || ("label", label.clone());
            match svc.kind {
                Kind::Mpls => {
                    lines.push(line(1, 100, &[lab()], "goto:mplsvpn", &cookie));
                    lines.push(line(2, 60000, &[("kind", "routing_msg".into()), lab()], "controller:routing_msg", &cookie));
                    lines.push(line(2, 60000, &[("kind", "arp".into()), lab()], "controller:arp", &cookie));
                    for (prefix, target) in &svc.routes {
                        let t = svc.ports.iter().find(|p| p.name == *target).unwrap();
                        let actions = if t.pe == pe {
                            format!("pop_label,set_eth_src:{gw},output:{}", t.port)
                        } else {
                            format!("push_label:{},goto:nexthop", outer(t.pe))
                        };
                        lines.push(line(2, 1000 + prefix_len(prefix), &[lab(), ("dst_ip", prefix.to_string())], &actions, &cookie));
                    }
                }
                Kind::Vpls => {
                    lines.push(line(1, 100, &[lab()], "replicate[goto:maclearner;goto:vplsfwd]", &cookie));
                    let flood = |select: &dyn Fn(&Port) -> bool| {
                        let mut branches: Vec<String> = local
                            .iter()
                            .filter(|p| select(p))
                            .map(|p| format!("pop_label,output:{}", p.port))
                            .collect();
                        for &r in hosting.iter().filter(|r| **r != pe) {
                            if svc.ports.iter().any(|p| p.pe == r && select(p)) {
                                branches.push(format!("push_label:{},goto:nexthop", outer(r)));
                            }
                        }
                        if branches.is_empty() {
                            "drop".to_string()
                        } else {
                            format!("replicate[{}]", branches.join(";"))
                        }
                    };
                    for &v in &union {
                        let actions = flood(&|p: &Port| carries(p, v));
                        lines.push(line(3, 1000, &[lab(), ("vlan", v.to_string())], &actions, &cookie));
                    }
                    if svc.ports.iter().any(|p| p.vlans.is_none()) {
                        let actions = flood(&|p: &Port| p.vlans.is_none());
                        lines.push(line(3, 900, &[lab()], &actions, &cookie));
                    }
                    lines.push(line(4, 3000, &[("lsmd", "1".into()), lab()], "-", &cookie));
                    lines.push(line(4, 1, &[lab()], "controller:mac_learn", &cookie));
                }
            }
        }
        let table = match svc.kind {
            Kind::Mpls => 2,
            Kind::Vpls => 3,
        };
        for (j, pol) in svc.policies.iter().enumerate() {
            for (port, inbound) in &pol.applies {
                let p = svc.ports.iter().find(|p| p.name == *port).unwrap();
                let mut m: Vec<(&str, String)> = vec![("label", label.clone())];
                if *inbound {
                    m.push(("in_port", p.port.to_string()));
                }
                m.extend(pol.fields.iter().map(|(n, v)| policy_field(n, v)));
                let lines = out.get_mut(&p.pe).unwrap();
                lines.push(line(table, 50000, &m, "drop", &format!("pol:{i}.{j}")));
            }
        }
    }
    out.into_iter()
        .map(|(pe, mut lines)| {
            // Stable: equal (table, priority) keep contribution order.
            lines.sort_by_key(|l| (l.table, std::cmp::Reverse(l.priority)));
            let mut s = String::new();
            for l in lines {
                s.push_str(&l.text);
                s.push('\n');
            }
            (pe, s)
        })
        .collect()
}

// ----- fixtures -----

/// Two PEs, one MPLS VPN and one VPLS service with policies.
pub fn micro_instance() -> Instance {
    Instance {
        seed: 11,
        pes: vec![(0, 3), (1, 3)],
        services: vec![
            ServiceDesc {
                kind: Kind::Mpls,
                customer: "c1",
                name: "c1-vpn",
                ports: vec![
                    Port::routed("vp1", 0, 1, "192.168.1.1/24"),
                    Port::routed("vp2", 0, 2, "192.168.2.1/24"),
                    Port::routed("vp3", 1, 1, "192.168.3.1/24"),
                ],
                routes: vec![
                    ("10.1.0.0/16", "vp1"),
                    ("10.2.0.0/16", "vp2"),
                    ("10.3.0.0/16", "vp3"),
                    ("192.168.10.0/24", "vp3"),
                ],
                policies: vec![
                    PolicyDesc {
                        fields: vec![("destinationIP", "192.168.10.1")],
                        applies: vec![("vp1", true), ("vp2", true)],
                    },
                    PolicyDesc {
                        fields: vec![("destinationPort", "21"), ("ipProtocol", "tcp")],
                        applies: vec![("vp3", false)],
                    },
                ],
            },
            ServiceDesc {
                kind: Kind::Vpls,
                customer: "c2",
                name: "c2-lan",
                ports: vec![
                    Port::switched("vp5", 0, 3, Some(&[1, 2, 3])),
                    Port::switched("vp6", 1, 2, None),
                    Port::switched("vp8", 1, 3, Some(&[2, 4])),
                ],
                routes: vec![],
                policies: vec![PolicyDesc {
                    fields: vec![("sourceMAC", "02:00:00:00:00:66"), ("vlan", "2")],
                    applies: vec![("vp8", true)],
                }],
            },
        ],
    }
}

/// Router with four sites on three PEs: vp1 (site A), vp2 (site B),
/// vp3 (site D), vp4 (site F, hosting server 192.168.10.1).
pub fn router_instance(policies: Vec<PolicyDesc>) -> Instance {
    Instance {
        seed: 3,
        pes: vec![(0, 4), (1, 4), (2, 4)],
        services: vec![ServiceDesc {
            kind: Kind::Mpls,
            customer: "c1",
            name: "c1-router",
            ports: vec![
                Port::routed("vp1", 0, 1, "172.16.1.1/24"),
                Port::routed("vp2", 1, 1, "172.16.2.1/24"),
                Port::routed("vp3", 1, 2, "172.16.3.1/24"),
                Port::routed("vp4", 2, 1, "172.16.4.1/24"),
            ],
            routes: vec![
                ("10.1.0.0/16", "vp1"),
                ("10.2.0.0/16", "vp2"),
                ("10.3.0.0/16", "vp3"),
                ("192.168.10.0/24", "vp4"),
            ],
            policies,
        }],
    }
}

/// Source address inside the site behind `vp<n>` of `router_instance`.
pub fn router_site_ip(n: u8) -> Ipv4Addr {
    match n {
        4 => Ipv4Addr::new(192, 168, 10, 50),
        _ => Ipv4Addr::new(10, n, 0, 9),
    }
}

pub fn host(n: u64) -> MacAddr {
    MacAddr::from_u64(0x0200_0000_0000 | n)
}

pub fn tcp(src: Ipv4Addr, dst: Ipv4Addr, dport: u16) -> Packet {
    Packet::tcp(host(1), host(2), src, dst, 40000, dport)
}

pub fn ip(src: Ipv4Addr, dst: Ipv4Addr) -> Packet {
    Packet::ipv4(host(1), host(2), src, dst)
}

pub fn frame(src: MacAddr, dst: MacAddr, vlan: u16) -> Packet {
    Packet::ethernet(src, dst, Some(vlan))
}

pub fn is_opaque(p: &Packet) -> bool {
    matches!(p.kind, PacketKind::Opaque)
}

/// Two MPLS VPN services with identical IP plans and two VPLS services
/// with identical MAC populations, spread over three PEs.
pub fn overlap_instance() -> Instance {
    let router = |customer: &'static str, base: u16| ServiceDesc {
        kind: Kind::Mpls,
        customer,
        name: "overlap-vpn",
        ports: vec![
            Port::routed("a", 0, base, "192.168.1.1/24"),
            Port::routed("b", 1, base, "192.168.2.1/24"),
            Port::routed("c", 2, base, "192.168.3.1/24"),
        ],
        routes: vec![("10.1.0.0/16", "a"), ("10.2.0.0/16", "b"), ("10.3.0.0/16", "c")],
        policies: vec![],
    };
    let switch = |customer: &'static str, base: u16| ServiceDesc {
        kind: Kind::Vpls,
        customer,
        name: "overlap-lan",
        ports: vec![
            Port::switched("x", 0, base, None),
            Port::switched("y", 1, base, Some(&[1, 2])),
            Port::switched("z", 2, base, Some(&[2, 3])),
        ],
        routes: vec![],
        policies: vec![],
    };
    Instance {
        seed: 21,
        pes: vec![(0, 4), (1, 4), (2, 4)],
        services: vec![router("ra", 1), router("rb", 2), switch("sa", 3), switch("sb", 4)],
    }
}

/// Address inside the prefix routed to site index `site` (0..3).
pub fn overlap_ip(site: usize, host: u8) -> Ipv4Addr {
    Ipv4Addr::new(10, site as u8 + 1, 0, host)
}

/// VPLS service whose ports belong to two customers.
pub fn shared_instance() -> Instance {
    Instance {
        seed: 5,
        pes: vec![(0, 2), (1, 2)],
        services: vec![ServiceDesc {
            kind: Kind::Vpls,
            customer: "alpha",
            name: "joint-lan",
            ports: vec![
                Port::switched("a1", 0, 1, Some(&[10])).owned_by("alpha"),
                Port::switched("a2", 1, 1, Some(&[10])).owned_by("alpha"),
                Port::switched("b1", 0, 2, Some(&[10])).owned_by("beta"),
                Port::switched("b2", 1, 2, Some(&[10])).owned_by("beta"),
            ],
            routes: vec![],
            policies: vec![],
        }],
    }
}

/// MPLS VPN whose sites belong to two customers; site n routes 10.n.0.0/16.
pub fn shared_router_instance() -> Instance {
    Instance {
        seed: 6,
        pes: vec![(0, 2), (1, 2), (2, 2)],
        services: vec![ServiceDesc {
            kind: Kind::Mpls,
            customer: "alpha",
            name: "joint-vpn",
            ports: vec![
                Port::routed("a1", 0, 1, "172.16.1.1/24").owned_by("alpha"),
                Port::routed("a2", 1, 1, "172.16.2.1/24").owned_by("alpha"),
                Port::routed("b1", 1, 2, "172.16.3.1/24").owned_by("beta"),
                Port::routed("b2", 2, 1, "172.16.4.1/24").owned_by("beta"),
            ],
            routes: vec![
                ("10.1.0.0/16", "a1"),
                ("10.2.0.0/16", "a2"),
                ("10.3.0.0/16", "b1"),
                ("10.4.0.0/16", "b2"),
            ],
            policies: vec![],
        }],
    }
}
