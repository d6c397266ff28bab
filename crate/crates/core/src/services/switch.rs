// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Virtual switch: the customer view of a VPLS.

use std::collections::{BTreeSet, HashMap};

use super::{
    ingress_rule, priority, to_local, to_remote, CompileCtx, PeRules, ServiceError, ServiceId,
    VirtualPort, VlanBinding,
};
use crate::dataplane::{FlowRule, Instruction, MatchSet, PuntReason, SimTime, TableId};
use crate::packet::{Label, MacAddr, Packet};
use crate::topology::{PeId, PhysicalPort};

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SwitchPort {
    pub vport: VirtualPort,
    pub binding: VlanBinding,
}

/// MAC table key: (VLAN tag, host MAC). Untagged frames use `None`.
pub type MacKey = (Option<u16>, MacAddr);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MacEntry {
    pub port: PhysicalPort,
    pub last_seen: SimTime,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum LearnOutcome {
    /// New entry; learned-state rules must be installed.
    Learned { key: MacKey, port: PhysicalPort },
    /// Entry already current; only the timestamp moved.
    Refreshed { key: MacKey },
    /// Host moved; rules for `from` must be replaced.
    Moved {
        key: MacKey,
        from: PhysicalPort,
        to: PhysicalPort,
    },
    /// Frame not learnable (group source, foreign port, or VLAN not bound).
    Ignored,
}

#[derive(Clone, Debug)]
pub struct VirtualSwitch {
    id: ServiceId,
    ports: Vec<SwitchPort>,
    mac_table: HashMap<MacKey, MacEntry>,
}

impl VirtualSwitch {
    /// New switch; every port starts as a trunk until bound.
    pub fn new(id: ServiceId, ports: Vec<VirtualPort>) -> Result<Self, ServiceError> {
        let mut vs = VirtualSwitch {
            id,
            ports: Vec::with_capacity(ports.len()),
            mac_table: HashMap::new(),
        };
        for vport in ports {
            vs.add_port(vport, VlanBinding::Trunk)?;
        }
        Ok(vs)
    }

    pub fn id(&self) -> ServiceId {
        self.id
    }

    pub fn ports(&self) -> &[SwitchPort] {
        &self.ports
    }

    pub fn port(&self, name: &str) -> Option<&SwitchPort> {
        self.ports.iter().find(|p| p.vport.name == name)
    }

    fn port_at(&self, port: PhysicalPort) -> Option<&SwitchPort> {
        self.ports.iter().find(|p| p.vport.port == port)
    }

    pub fn mac_table(&self) -> &HashMap<MacKey, MacEntry> {
        &self.mac_table
    }

    pub(crate) fn add_port(&mut self, vport: VirtualPort, binding: VlanBinding) -> Result<(), ServiceError> {
        if self.port(&vport.name).is_some() {
            return Err(ServiceError::DuplicatePort(vport.name));
        }
        self.ports.push(SwitchPort { vport, binding });
        Ok(())
    }

    /// Removes a port; the runtime flushes learned entries on reconfigure.
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
        Ok(())
    }

    /// Replaces the VLAN binding of a port.
    pub fn bind(&mut self, name: &str, binding: VlanBinding) -> Result<(), ServiceError> {
        if let VlanBinding::Vlans(set) = &binding {
            if set.is_empty() {
                return Err(ServiceError::EmptyVlanSet);
            }
        }
        let port = self
            .ports
            .iter_mut()
            .find(|p| p.vport.name == name)
            .ok_or_else(|| ServiceError::UnknownPort(name.to_string()))?;
        port.binding = binding;
        Ok(())
    }

    /// Union of explicitly bound VLANs.
    pub fn vlans(&self) -> BTreeSet<u16> {
        let mut out = BTreeSet::new();
        for p in &self.ports {
            if let VlanBinding::Vlans(set) = &p.binding {
                out.extend(set.iter().copied());
            }
        }
        out
    }

    fn has_trunk(&self) -> bool {
        self.ports.iter().any(|p| p.binding.is_trunk())
    }

    /// Replicate branches flooding to every port selected by `carries`:
    /// local ports first, then one copy per remote PE with such a port.
    fn flood_branches(
        &self,
        ctx: &CompileCtx,
        pe: PeId,
        carries: impl Fn(&VlanBinding) -> bool,
    ) -> Vec<Vec<Instruction>> {
        let mut local = Vec::new();
        let mut remote = BTreeSet::new();
        for p in self.ports.iter().filter(|p| carries(&p.binding)) {
            if p.vport.port.pe == pe {
                local.push(p.vport.port.port_no);
            } else {
                remote.insert(p.vport.port.pe);
            }
        }
        local.sort();
        local
            .into_iter()
            .map(to_local)
            .chain(remote.into_iter().map(|r| to_remote(ctx.outer(r))))
            .collect()
    }

    fn flood_actions(branches: Vec<Vec<Instruction>>) -> Vec<Instruction> {
        if branches.is_empty() {
            vec![Instruction::Drop]
        } else {
            vec![Instruction::Replicate(branches)]
        }
    }

    /// Proactive rules on every hosting PE: ingress tagging, duplication to
    /// learner and forwarder, per-VLAN broadcast, trunk catch-all, learner
    /// core-arrival and miss rules.
    pub fn compile_base(&self, ctx: &CompileCtx, delimiter: Label) -> PeRules {
        let cookie = self.id.cookie();
        let vlans = self.vlans();
        let trunk = self.has_trunk();
        let mut out = PeRules::new();
        for pe in self.ports.iter().map(|p| p.vport.port.pe) {
            out.entry(pe).or_default();
        }
        for (pe, rules) in out.iter_mut() {
            let pe = *pe;
            let mut local: Vec<_> = self
                .ports
                .iter()
                .filter(|p| p.vport.port.pe == pe)
                .map(|p| p.vport.port.port_no)
                .collect();
            local.sort();
            for port in local {
                rules.push(ingress_rule(port, delimiter, cookie));
            }
            rules.push(FlowRule::new(
                TableId::ServiceRedirector,
                priority::REDIRECT,
                MatchSet::any().label(delimiter),
                vec![Instruction::Replicate(vec![
                    vec![Instruction::Goto(TableId::VplsMacLearner)],
                    vec![Instruction::Goto(TableId::VplsForwarder)],
                ])],
                cookie,
            ));
            for &v in &vlans {
                let branches = self.flood_branches(ctx, pe, |b| b.carries(v));
                rules.push(FlowRule::new(
                    TableId::VplsForwarder,
                    priority::VPLS_BROADCAST,
                    MatchSet::any().label(delimiter).vlan(v),
                    Self::flood_actions(branches),
                    cookie,
                ));
            }
            if trunk {
                let branches = self.flood_branches(ctx, pe, VlanBinding::is_trunk);
                rules.push(FlowRule::new(
                    TableId::VplsForwarder,
                    priority::VPLS_TRUNK_FLOOD,
                    MatchSet::any().label(delimiter),
                    Self::flood_actions(branches),
                    cookie,
                ));
            }
            rules.push(FlowRule::new(
                TableId::VplsMacLearner,
                priority::LEARNER_CORE,
                MatchSet::any().lsmd(true).label(delimiter),
                vec![],
                cookie,
            ));
            rules.push(FlowRule::new(
                TableId::VplsMacLearner,
                priority::LEARNER_MISS,
                MatchSet::any().label(delimiter),
                vec![Instruction::ToController(PuntReason::MacLearn)],
                cookie,
            ));
        }
        out
    }

    /// Records the source of a punted frame.
    pub fn learn(&mut self, ingress: PhysicalPort, pkt: &Packet, now: SimTime) -> LearnOutcome {
        if pkt.src_mac.is_group() {
            return LearnOutcome::Ignored;
        }
        let Some(port) = self.port_at(ingress) else {
            return LearnOutcome::Ignored;
        };
        if let Some(v) = pkt.vlan {
            if !port.binding.carries(v) {
                return LearnOutcome::Ignored;
            }
        }
        let key = (pkt.vlan, pkt.src_mac);
        match self.mac_table.get_mut(&key) {
            Some(e) if e.port == ingress => {
                e.last_seen = now;
                LearnOutcome::Refreshed { key }
            }
            Some(e) => {
                let from = e.port;
                e.port = ingress;
                e.last_seen = now;
                LearnOutcome::Moved {
                    key,
                    from,
                    to: ingress,
                }
            }
            None => {
                self.mac_table.insert(
                    key,
                    MacEntry {
                        port: ingress,
                        last_seen: now,
                    },
                );
                LearnOutcome::Learned { key, port: ingress }
            }
        }
    }

    pub fn forget(&mut self, key: &MacKey) -> Option<MacEntry> {
        self.mac_table.remove(key)
    }

    /// Rules realizing one learned MAC: the learner suppression rule on the
    /// learning PE, then a unicast rule on every hosting PE (ascending).
    pub fn learned_rules(&self, ctx: &CompileCtx, delimiter: Label, key: MacKey) -> Vec<(PeId, FlowRule)> {
        let Some(entry) = self.mac_table.get(&key) else {
            return Vec::new();
        };
        let cookie = self.id.cookie();
        let (vlan, mac) = key;
        let with_vlan = |m: MatchSet| match vlan {
            Some(v) => m.vlan(v),
            None => m,
        };
        let mut out = Vec::new();
        out.push((
            entry.port.pe,
            FlowRule::new(
                TableId::VplsMacLearner,
                priority::LEARNER_KNOWN,
                with_vlan(MatchSet::any().label(delimiter)).src_mac(mac),
                vec![],
                cookie,
            )
            .with_idle_timeout(ctx.idle_timeout),
        ));
        let pes: BTreeSet<PeId> = self.ports.iter().map(|p| p.vport.port.pe).collect();
        for pe in pes {
            let actions = if pe == entry.port.pe {
                to_local(entry.port.port_no)
            } else {
                to_remote(ctx.outer(entry.port.pe))
            };
            out.push((
                pe,
                FlowRule::new(
                    TableId::VplsForwarder,
                    priority::VPLS_UNICAST,
                    with_vlan(MatchSet::any().label(delimiter)).dst_mac(mac),
                    actions,
                    cookie,
                )
                .with_idle_timeout(ctx.idle_timeout),
            ));
        }
        out
    }
}
