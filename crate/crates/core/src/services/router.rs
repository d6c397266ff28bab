// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Virtual router: the customer view of an MPLS VPN.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use super::{
    ingress_rule, priority, to_remote, CompileCtx, PeRules, ServiceError, ServiceId,
    VirtualPort,
};
use crate::dataplane::{FlowRule, Instruction, KindMatch, MatchSet, PuntReason, TableId};
use crate::packet::{ArpOp, Ipv4Prefix, Label, MacAddr, Packet, PacketKind};
use crate::services::GatewayAddr;
use crate::topology::PhysicalPort;

/// A router port with its gateway address and the CE learned behind it.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RouterPort {
    pub vport: VirtualPort,
    pub gateway: GatewayAddr,
    /// CE (ip, mac) recorded from its last ARP request.
    pub ce: Option<(Ipv4Addr, MacAddr)>,
}

/// ARP reply produced for a CE, to be sent out of `port`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ArpReply {
    pub port: PhysicalPort,
    pub reply: Packet,
    /// The CE MAC behind the port changed; local delivery rules must be
    /// recompiled.
    pub ce_changed: bool,
}

#[derive(Clone, Debug)]
pub struct VirtualRouter {
    id: ServiceId,
    ports: Vec<RouterPort>,
    routes: Vec<(Ipv4Prefix, String)>,
    gateway_mac: MacAddr,
}

impl VirtualRouter {
    pub fn new(id: ServiceId, ports: Vec<(VirtualPort, GatewayAddr)>) -> Result<Self, ServiceError> {
        let mut vr = VirtualRouter {
            id,
            ports: Vec::with_capacity(ports.len()),
            routes: Vec::new(),
            gateway_mac: Self::synthetic_mac(id),
        };
        for (vport, gw) in ports {
            vr.add_port(vport, gw)?;
        }
        Ok(vr)
    }

    /// Locally administered MAC derived from the service id.
    pub fn synthetic_mac(id: ServiceId) -> MacAddr {
        MacAddr::from_u64(0x02_00_5e_00_00_00 | u64::from(id.0 & 0x00ff_ffff))
    }

    pub fn id(&self) -> ServiceId {
        self.id
    }

    pub fn gateway_mac(&self) -> MacAddr {
        self.gateway_mac
    }

    pub fn ports(&self) -> &[RouterPort] {
        &self.ports
    }

    pub fn port(&self, name: &str) -> Option<&RouterPort> {
        self.ports.iter().find(|p| p.vport.name == name)
    }

    pub fn routes(&self) -> &[(Ipv4Prefix, String)] {
        &self.routes
    }

    pub(crate) fn add_port(&mut self, vport: VirtualPort, gateway: GatewayAddr) -> Result<(), ServiceError> {
        if self.port(&vport.name).is_some() {
            return Err(ServiceError::DuplicatePort(vport.name));
        }
        if self.ports.iter().any(|p| p.gateway.ip == gateway.ip) {
            return Err(ServiceError::DuplicateGateway(gateway.ip));
        }
        self.ports.push(RouterPort {
            vport,
            gateway,
            ce: None,
        });
        Ok(())
    }

    pub(crate) fn set_gateway(&mut self, name: &str, gateway: GatewayAddr) -> Result<(), ServiceError> {
        if self
            .ports
            .iter()
            .any(|p| p.vport.name != name && p.gateway.ip == gateway.ip)
        {
            return Err(ServiceError::DuplicateGateway(gateway.ip));
        }
        let port = self
            .ports
            .iter_mut()
            .find(|p| p.vport.name == name)
            .ok_or_else(|| ServiceError::UnknownPort(name.to_string()))?;
        if port.gateway != gateway {
            port.gateway = gateway;
            port.ce = None;
        }
        Ok(())
    }

    /// Removes a port and every route targeting it.
    pub(crate) fn remove_port(&mut self, name: &str) -> Result<(), ServiceError> {
        let i = self
            .ports
            .iter()
            .position(|p| p.vport.name == name)
            .ok_or_else(|| ServiceError::UnknownPort(name.to_string()))?;
        if self.ports.len() == 1 {
            return Err(ServiceError::LastPort(name.to_string()));
        }
        self.ports.remove(i);
        self.routes.retain(|(_, p)| p != name);
        Ok(())
    }

    /// Replaces the static routing table. Exact duplicates collapse; the
    /// same prefix on two ports is rejected.
    pub fn set_static_routes(&mut self, routes: Vec<(Ipv4Prefix, String)>) -> Result<(), ServiceError> {
        let mut seen: BTreeMap<Ipv4Prefix, &str> = BTreeMap::new();
        let mut table = Vec::with_capacity(routes.len());
        for (prefix, port) in &routes {
            if self.port(port).is_none() {
                return Err(ServiceError::UnknownPort(port.clone()));
            }
            match seen.get(prefix) {
                Some(p) if *p == port => continue,
                Some(_) => return Err(ServiceError::DuplicatePrefix(*prefix)),
                None => {
                    seen.insert(*prefix, port);
                    table.push((*prefix, port.clone()));
                }
            }
        }
        self.routes = table;
        Ok(())
    }

    /// Longest-prefix match over the static routes.
    pub fn lookup(&self, ip: Ipv4Addr) -> Option<&RouterPort> {
        self.routes
            .iter()
            .filter(|(p, _)| p.contains(ip))
            .max_by_key(|(p, _)| p.prefix_len())
            .and_then(|(_, name)| self.port(name))
    }

    /// Answers a CE's ARP request for the gateway of its port and records
    /// the CE address. Requests for any other address are ignored.
    pub fn handle_arp(&mut self, ingress: PhysicalPort, pkt: &Packet) -> Option<ArpReply> {
        let PacketKind::Arp {
            op: ArpOp::Request,
            sender_ip,
            sender_mac,
            target_ip,
        } = pkt.kind
        else {
            return None;
        };
        let gateway_mac = self.gateway_mac;
        let port = self.ports.iter_mut().find(|p| p.vport.port == ingress)?;
        if port.gateway.ip != target_ip {
            return None;
        }
        let ce = Some((sender_ip, sender_mac));
        let ce_changed = port.ce.map(|(_, m)| m) != Some(sender_mac);
        port.ce = ce;
        let mut reply = Packet::ethernet(gateway_mac, sender_mac, pkt.vlan);
        reply.kind = PacketKind::Arp {
            op: ArpOp::Reply,
            sender_ip: target_ip,
            sender_mac: gateway_mac,
            target_ip: sender_ip,
        };
        Some(ArpReply {
            port: ingress,
            reply,
            ce_changed,
        })
    }

    /// Ingress, redirector and forwarder rules for every hosting PE.
    pub fn compile(&self, ctx: &CompileCtx, delimiter: Label) -> PeRules {
        let cookie = self.id.cookie();
        let mut out = PeRules::new();
        for pe in self.ports.iter().map(|p| p.vport.port.pe) {
            out.entry(pe).or_default();
        }
        for (pe, rules) in out.iter_mut() {
            let mut local: Vec<&RouterPort> =
                self.ports.iter().filter(|p| p.vport.port.pe == *pe).collect();
            local.sort_by_key(|p| p.vport.port.port_no);
            for p in &local {
                rules.push(ingress_rule(p.vport.port.port_no, delimiter, cookie));
            }
            rules.push(FlowRule::new(
                TableId::ServiceRedirector,
                priority::REDIRECT,
                MatchSet::any().label(delimiter),
                vec![Instruction::Goto(TableId::MplsVpnForwarder)],
                cookie,
            ));
            for (kind, reason) in [
                (KindMatch::RoutingMsg, PuntReason::RoutingMsg),
                (KindMatch::Arp, PuntReason::Arp),
            ] {
                rules.push(FlowRule::new(
                    TableId::MplsVpnForwarder,
                    priority::FORWARDER_CONTROL,
                    MatchSet::any().kind(kind).label(delimiter),
                    vec![Instruction::ToController(reason)],
                    cookie,
                ));
            }
            for (prefix, name) in &self.routes {
                let target = self.port(name).expect("routes target existing ports");
                let actions = if target.vport.port.pe == *pe {
                    let mut a = vec![Instruction::PopLabel, Instruction::SetEthSrc(self.gateway_mac)];
                    if let Some((_, mac)) = target.ce {
                        a.push(Instruction::SetEthDst(mac));
                    }
                    a.push(Instruction::Output(target.vport.port.port_no));
                    a
                } else {
                    to_remote(ctx.outer(target.vport.port.pe))
                };
                rules.push(FlowRule::new(
                    TableId::MplsVpnForwarder,
                    priority::ROUTE_BASE + u16::from(prefix.prefix_len()),
                    MatchSet::any().label(delimiter).dst_ip(*prefix),
                    actions,
                    cookie,
                ));
            }
        }
        out
    }
}
