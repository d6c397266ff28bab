// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Customer-facing virtual devices (router for MPLS VPN, switch for VPLS)
//! and their compilation into per-PE flow rules.
//!
//! Compilation emits rules per hosting PE in a fixed order, which the rule
//! dump preserves within a priority level:
//!
//! 1. IngressMatcher: one rule per local virtual port, ascending port number.
//! 2. ServiceRedirector: one rule matching the service delimiter.
//! 3. Forwarder: router control rules (routing_msg, then arp) followed by
//!    one rule per static route in configured order; or switch broadcast
//!    rules in ascending VLAN order followed by the trunk catch-all.
//! 4. VplsMacLearner (switch only): the core-arrival rule, then the miss rule.
//!
//! Replicate branches list local ports (ascending) before remote PEs
//! (ascending).

mod router;
mod spec;
mod switch;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use router::{ArpReply, RouterPort, VirtualRouter};
pub use spec::{parse_service_spec, GatewayAddr, ServiceSpec, VlanBinding, VportSpec};
pub use switch::{LearnOutcome, MacEntry, MacKey, SwitchPort, VirtualSwitch};

use crate::dataplane::{Cookie, FlowRule, Instruction, KindMatch, MatchSet, PuntReason, TableId};
use crate::labels::LabelPlan;
use crate::packet::{Ipv4Prefix, Label};
use crate::topology::{PeId, PhysicalPort, PortKey, PortNo, PortSide, Topology, TopologyError};

/// Rule priorities per table.
pub mod priority {
    pub const INGRESS_CORE_CONTROL: u16 = 300;
    pub const INGRESS_CORE_LABELED: u16 = 200;
    pub const INGRESS_CUSTOMER: u16 = 100;
    pub const REDIRECT: u16 = 100;
    /// Routing-message and ARP punts in the MPLS VPN forwarder.
    pub const FORWARDER_CONTROL: u16 = 60000;
    /// Customer restriction policies in either forwarder.
    pub const POLICY: u16 = 50000;
    /// Static routes use `ROUTE_BASE + prefix length`.
    pub const ROUTE_BASE: u16 = 1000;
    pub const VPLS_UNICAST: u16 = 2000;
    pub const VPLS_BROADCAST: u16 = 1000;
    pub const VPLS_TRUNK_FLOOD: u16 = 900;
    pub const LEARNER_CORE: u16 = 3000;
    pub const LEARNER_KNOWN: u16 = 2000;
    pub const LEARNER_MISS: u16 = 1;
    pub const NEXTHOP: u16 = 100;
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub u32);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl ServiceId {
    pub fn cookie(self) -> Cookie {
        Cookie::Service(self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceKind {
    MplsVpn,
    Vpls,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::MplsVpn => "mpls-vpn",
            ServiceKind::Vpls => "vpls",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CustomerId(pub String);

impl CustomerId {
    pub fn new(s: impl Into<String>) -> Self {
        CustomerId(s.into())
    }
}

impl fmt::Display for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A port of a virtual device, backed by one customer-side PE port.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VirtualPort {
    pub name: String,
    pub key: PortKey,
    pub owner: CustomerId,
    pub port: PhysicalPort,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("invalid service spec: {0}")]
    InvalidSpec(String),
    #[error("empty VLAN set")]
    EmptyVlanSet,
    #[error("unknown virtual port `{0}`")]
    UnknownPort(String),
    #[error("duplicate virtual port `{0}`")]
    DuplicatePort(String),
    #[error("physical port {0} used twice")]
    DuplicatePhysicalPort(PhysicalPort),
    #[error("virtual port `{0}` needs a gateway address")]
    MissingGateway(String),
    #[error("gateway address {0} used on two ports")]
    DuplicateGateway(std::net::Ipv4Addr),
    #[error("prefix {0} routed to two different ports")]
    DuplicatePrefix(Ipv4Prefix),
    #[error("operation does not apply to a {0} service")]
    KindMismatch(ServiceKind),
    #[error("customer `{customer}` does not own port `{port}`")]
    NotOwner { customer: CustomerId, port: String },
    #[error("customer `{customer}` does not hold key `{key}`")]
    UnownedKey { customer: CustomerId, key: PortKey },
    #[error("virtual port `{0}` is the last port of the service")]
    LastPort(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Read-only inputs shared by all compile operations.
#[derive(Clone, Copy)]
pub struct CompileCtx<'a> {
    pub topo: &'a Topology,
    pub labels: &'a LabelPlan,
    pub idle_timeout: Duration,
}

impl CompileCtx<'_> {
    pub(crate) fn outer(&self, pe: PeId) -> Label {
        self.labels
            .outer(pe)
            .expect("every topology PE has an outer label")
    }
}

/// Per-PE rule lists produced by a compile step.
pub type PeRules = BTreeMap<PeId, Vec<FlowRule>>;

/// Customer-port ingress rule: tag with the delimiter and mark as local.
pub(crate) fn ingress_rule(port: PortNo, delimiter: Label, cookie: Cookie) -> FlowRule {
    FlowRule::new(
        TableId::IngressMatcher,
        priority::INGRESS_CUSTOMER,
        MatchSet::any().in_port(port),
        vec![
            Instruction::PushLabel(delimiter),
            Instruction::SetLsmd(false),
            Instruction::Goto(TableId::ServiceRedirector),
        ],
        cookie,
    )
}

/// Actions sending a copy toward a remote PE through the resolver.
pub(crate) fn to_remote(outer: Label) -> Vec<Instruction> {
    vec![
        Instruction::PushLabel(outer),
        Instruction::Goto(TableId::NextHopResolver),
    ]
}

/// Actions delivering a copy to a local customer port.
pub(crate) fn to_local(port: PortNo) -> Vec<Instruction> {
    vec![Instruction::PopLabel, Instruction::Output(port)]
}

/// Service-independent rules of one PE: core-port control punts, core
/// label termination, and outer-label resolution toward every peer.
pub fn infrastructure_rules(topo: &Topology, labels: &LabelPlan, pe: PeId) -> Vec<FlowRule> {
    let cookie = Cookie::Infrastructure;
    let mut rules = Vec::new();
    for (_, port) in topo.core_ports(pe) {
        rules.push(FlowRule::new(
            TableId::IngressMatcher,
            priority::INGRESS_CORE_CONTROL,
            MatchSet::any().in_port(port).kind(KindMatch::LdpMsg),
            vec![Instruction::ToController(PuntReason::LdpMsg)],
            cookie,
        ));
        rules.push(FlowRule::new(
            TableId::IngressMatcher,
            priority::INGRESS_CORE_CONTROL,
            MatchSet::any().in_port(port).kind(KindMatch::RoutingMsg),
            vec![Instruction::ToController(PuntReason::RoutingMsg)],
            cookie,
        ));
        rules.push(FlowRule::new(
            TableId::IngressMatcher,
            priority::INGRESS_CORE_LABELED,
            MatchSet::any().in_port(port),
            vec![
                Instruction::PopLabel,
                Instruction::SetLsmd(true),
                Instruction::Goto(TableId::ServiceRedirector),
            ],
            cookie,
        ));
    }
    for (peer, port) in topo.core_ports(pe) {
        let outer = labels.outer(peer).expect("every topology PE has an outer label");
        rules.push(FlowRule::new(
            TableId::NextHopResolver,
            priority::NEXTHOP,
            MatchSet::any().label(outer).lsmd(false),
            vec![Instruction::Output(port)],
            cookie,
        ));
    }
    rules
}

/// A port-scoped configuration change requested by one customer.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PortChange {
    /// Replace the VLAN binding of a switch port.
    BindVlans { port: String, binding: VlanBinding },
    /// Replace every static route targeting a router port.
    SetRoutes { port: String, prefixes: Vec<Ipv4Prefix> },
    /// Change the gateway address of a router port.
    SetGateway { port: String, gateway: GatewayAddr },
    /// Remove the port from the device.
    Detach { port: String },
}

impl PortChange {
    pub fn port(&self) -> &str {
        match self {
            PortChange::BindVlans { port, .. }
            | PortChange::SetRoutes { port, .. }
            | PortChange::SetGateway { port, .. }
            | PortChange::Detach { port } => port,
        }
    }
}

/// Per-port settings supplied when a port joins a device.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PortConfig {
    Router { gateway: GatewayAddr },
    Switch { binding: VlanBinding },
}

#[derive(Clone, Debug)]
pub enum Device {
    Router(VirtualRouter),
    Switch(VirtualSwitch),
}

/// A provisioned service: its identity, delimiter and virtual device.
#[derive(Clone, Debug)]
pub struct Service {
    pub id: ServiceId,
    pub name: String,
    pub customer: CustomerId,
    pub delimiter: Label,
    /// Ports may belong to customers other than the provisioner.
    pub shared: bool,
    pub device: Device,
}

impl Service {
    /// Builds a service from a spec, resolving keys and checking that each
    /// port's owner holds its key.
    pub fn from_spec(
        id: ServiceId,
        customer: &CustomerId,
        spec: &ServiceSpec,
        delimiter: Label,
        topo: &Topology,
        holds_key: &dyn Fn(&CustomerId, &PortKey) -> bool,
    ) -> Result<Service, ServiceError> {
        let mut names = BTreeSet::new();
        let mut physical = BTreeSet::new();
        let mut vports = Vec::with_capacity(spec.vports.len());
        for v in &spec.vports {
            if !names.insert(v.name.as_str()) {
                return Err(ServiceError::DuplicatePort(v.name.clone()));
            }
            let owner = spec.declared_owner(&v.name).unwrap_or(customer).clone();
            if !holds_key(&owner, &v.key) {
                return Err(ServiceError::UnownedKey {
                    customer: owner,
                    key: v.key.clone(),
                });
            }
            let port = topo.resolve_port(v.key.as_str())?;
            if !physical.insert(port) {
                return Err(ServiceError::DuplicatePhysicalPort(port));
            }
            vports.push(VirtualPort {
                name: v.name.clone(),
                key: v.key.clone(),
                owner,
                port,
            });
        }
        if let Some(owners) = &spec.shared {
            for (_, p) in owners {
                if !names.contains(p.as_str()) {
                    return Err(ServiceError::UnknownPort(p.clone()));
                }
            }
        }
        if vports.is_empty() {
            return Err(ServiceError::InvalidSpec("service has no virtual ports".into()));
        }
        let device = match spec.kind {
            ServiceKind::MplsVpn => {
                if !spec.vlan_binds.is_empty() {
                    return Err(ServiceError::InvalidSpec(
                        "vlanbind is not valid on an mpls-vpn service".into(),
                    ));
                }
                let mut ports = Vec::with_capacity(vports.len());
                for (vp, vs) in vports.into_iter().zip(&spec.vports) {
                    let gw = vs.ip.ok_or_else(|| ServiceError::MissingGateway(vs.name.clone()))?;
                    ports.push((vp, gw));
                }
                let mut vr = VirtualRouter::new(id, ports)?;
                vr.set_static_routes(spec.routes.clone())?;
                Device::Router(vr)
            }
            ServiceKind::Vpls => {
                if !spec.routes.is_empty() {
                    return Err(ServiceError::InvalidSpec(
                        "route is not valid on a vpls service".into(),
                    ));
                }
                let mut vs = VirtualSwitch::new(id, vports)?;
                for (port, binding) in &spec.vlan_binds {
                    vs.bind(port, binding.clone())?;
                }
                Device::Switch(vs)
            }
        };
        Ok(Service {
            id,
            name: spec.name.clone(),
            customer: customer.clone(),
            delimiter,
            shared: spec.shared.is_some(),
            device,
        })
    }

    pub fn kind(&self) -> ServiceKind {
        match self.device {
            Device::Router(_) => ServiceKind::MplsVpn,
            Device::Switch(_) => ServiceKind::Vpls,
        }
    }

    pub fn cookie(&self) -> Cookie {
        self.id.cookie()
    }

    pub fn ports(&self) -> Vec<&VirtualPort> {
        match &self.device {
            Device::Router(vr) => vr.ports().iter().map(|p| &p.vport).collect(),
            Device::Switch(vs) => vs.ports().iter().map(|p| &p.vport).collect(),
        }
    }

    pub fn port(&self, name: &str) -> Option<&VirtualPort> {
        self.ports().into_iter().find(|p| p.name == name)
    }

    pub fn vport_at(&self, port: PhysicalPort) -> Option<&VirtualPort> {
        self.ports().into_iter().find(|p| p.port == port)
    }

    /// PEs hosting at least one virtual port.
    pub fn hosting_pes(&self) -> BTreeSet<PeId> {
        self.ports().into_iter().map(|p| p.port.pe).collect()
    }

    /// Base rules of the service on every hosting PE (policies and learned
    /// state excluded).
    pub fn compile(&self, ctx: &CompileCtx) -> PeRules {
        match &self.device {
            Device::Router(vr) => vr.compile(ctx, self.delimiter),
            Device::Switch(vs) => vs.compile_base(ctx, self.delimiter),
        }
    }

    /// Adds a port owned by `customer`. The caller has verified that the
    /// customer holds `key`.
    pub fn attach(
        &mut self,
        customer: &CustomerId,
        name: &str,
        key: &PortKey,
        config: PortConfig,
        topo: &Topology,
    ) -> Result<(), ServiceError> {
        if !self.shared && customer != &self.customer {
            return Err(ServiceError::NotOwner {
                customer: customer.clone(),
                port: name.to_string(),
            });
        }
        if self.port(name).is_some() {
            return Err(ServiceError::DuplicatePort(name.to_string()));
        }
        let port = topo.resolve_port(key.as_str())?;
        if port.side != PortSide::Customer || self.vport_at(port).is_some() {
            return Err(ServiceError::DuplicatePhysicalPort(port));
        }
        let vport = VirtualPort {
            name: name.to_string(),
            key: key.clone(),
            owner: customer.clone(),
            port,
        };
        match (&mut self.device, config) {
            (Device::Router(vr), PortConfig::Router { gateway }) => vr.add_port(vport, gateway),
            (Device::Switch(vs), PortConfig::Switch { binding }) => vs.add_port(vport, binding),
            _ => Err(ServiceError::KindMismatch(self.kind())),
        }
    }

    /// Applies a change to a port owned by `customer`.
    pub fn configure(&mut self, customer: &CustomerId, change: PortChange) -> Result<(), ServiceError> {
        let owner = self
            .port(change.port())
            .ok_or_else(|| ServiceError::UnknownPort(change.port().to_string()))?
            .owner
            .clone();
        if &owner != customer {
            return Err(ServiceError::NotOwner {
                customer: customer.clone(),
                port: change.port().to_string(),
            });
        }
        let kind = self.kind();
        match (&mut self.device, change) {
            (Device::Switch(vs), PortChange::BindVlans { port, binding }) => vs.bind(&port, binding),
            (Device::Router(vr), PortChange::SetRoutes { port, prefixes }) => {
                let mut routes: Vec<(Ipv4Prefix, String)> = vr
                    .routes()
                    .iter()
                    .filter(|(_, p)| *p != port)
                    .cloned()
                    .collect();
                routes.extend(prefixes.into_iter().map(|p| (p, port.clone())));
                vr.set_static_routes(routes)
            }
            (Device::Router(vr), PortChange::SetGateway { port, gateway }) => {
                vr.set_gateway(&port, gateway)
            }
            (Device::Router(vr), PortChange::Detach { port }) => vr.remove_port(&port),
            (Device::Switch(vs), PortChange::Detach { port }) => vs.remove_port(&port),
            _ => Err(ServiceError::KindMismatch(kind)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::allocate_labels;

    fn topo() -> Topology {
        Topology::build(3, &[(PeId(0), 4), (PeId(1), 4), (PeId(2), 4)]).unwrap()
    }

    fn key(t: &Topology, pe: u32, port: u16) -> PortKey {
        t.port_key(PeId(pe), PortNo(port)).unwrap().clone()
    }

    #[test]
    fn infrastructure_rules_per_pe() {
        let t = topo();
        let plan = allocate_labels(&t, &[]).unwrap();
        let rules = infrastructure_rules(&t, &plan, PeId(0));
        // 3 ingress rules per core port plus one resolver entry per peer.
        assert_eq!(rules.len(), 2 * 3 + 2);
        let nhr: Vec<_> = rules
            .iter()
            .filter(|r| r.table == TableId::NextHopResolver)
            .map(|r| r.dump_line())
            .collect();
        assert_eq!(
            nhr,
            vec![
                "nexthop|100|lsmd=0,label=1001|output:5|infra|-",
                "nexthop|100|lsmd=0,label=1002|output:6|infra|-",
            ]
        );
    }

    #[test]
    fn from_spec_checks_keys_and_ports() {
        let t = topo();
        let alice = CustomerId::new("alice");
        let k1 = key(&t, 0, 1);
        let k2 = key(&t, 1, 1);
        let spec = ServiceSpec::new(ServiceKind::Vpls, "s")
            .vport("a", &k1, None)
            .vport("b", &k2, None);
        let all = |_: &CustomerId, _: &PortKey| true;
        let none = |_: &CustomerId, _: &PortKey| false;
        let svc = Service::from_spec(ServiceId(0), &alice, &spec, Label(16), &t, &all).unwrap();
        assert_eq!(svc.hosting_pes().into_iter().collect::<Vec<_>>(), vec![PeId(0), PeId(1)]);
        assert!(matches!(
            Service::from_spec(ServiceId(0), &alice, &spec, Label(16), &t, &none),
            Err(ServiceError::UnownedKey { .. })
        ));
        let dup = ServiceSpec::new(ServiceKind::Vpls, "s")
            .vport("a", &k1, None)
            .vport("b", &k1, None);
        assert!(matches!(
            Service::from_spec(ServiceId(0), &alice, &dup, Label(16), &t, &all),
            Err(ServiceError::DuplicatePhysicalPort(_))
        ));
        let no_gw = ServiceSpec::new(ServiceKind::MplsVpn, "r").vport("a", &k1, None);
        assert!(matches!(
            Service::from_spec(ServiceId(0), &alice, &no_gw, Label(16), &t, &all),
            Err(ServiceError::MissingGateway(_))
        ));
    }

    #[test]
    fn shared_configure_respects_ownership() {
        let t = topo();
        let a = CustomerId::new("a");
        let b = CustomerId::new("b");
        let spec = ServiceSpec::new(ServiceKind::Vpls, "svs")
            .vport("pa", &key(&t, 0, 1), None)
            .vport("pb", &key(&t, 1, 1), None)
            .shared_owners(&[("a", "pa"), ("b", "pb")]);
        let all = |_: &CustomerId, _: &PortKey| true;
        let mut svc = Service::from_spec(ServiceId(1), &a, &spec, Label(17), &t, &all).unwrap();
        let bind = |port: &str| PortChange::BindVlans {
            port: port.into(),
            binding: "7".parse().unwrap(),
        };
        assert!(svc.configure(&a, bind("pa")).is_ok());
        assert!(matches!(
            svc.configure(&a, bind("pb")),
            Err(ServiceError::NotOwner { .. })
        ));
        assert!(svc.configure(&b, bind("pb")).is_ok());
        svc.attach(
            &b,
            "pb2",
            &key(&t, 2, 2),
            PortConfig::Switch {
                binding: VlanBinding::Trunk,
            },
            &t,
        )
        .unwrap();
        assert_eq!(svc.port("pb2").unwrap().owner, b);
        assert!(matches!(
            svc.configure(&a, PortChange::Detach { port: "pb2".into() }),
            Err(ServiceError::NotOwner { .. })
        ));
    }
}
