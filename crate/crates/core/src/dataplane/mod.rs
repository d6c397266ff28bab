// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Emulated six-table match-action pipeline, one instance per PE.
//!
//! Each PE owns its tables exclusively; [`Dataplane`] holds one [`Switch`]
//! per PE plus the mesh wiring used to carry packets between them.

mod flow;
mod switch;
mod table;

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

pub use flow::{
    format_actions, format_idle, Cookie, FlowRule, Instruction, KindMatch, MatchSet, PuntReason,
    SimTime, TableId,
};
pub use switch::{
    ExpiredRule, PacketIn, PipelineResult, RuleHandle, RuleStat, Switch, TableStat, TableStats,
    Trace,
};

use crate::packet::Packet;
use crate::topology::{PeId, PhysicalPort, PortSide, Topology};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataplaneError {
    #[error("table {table} on {pe} is full ({cap} rules)")]
    TableFull { pe: PeId, table: TableId, cap: usize },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("unknown PE {0}")]
    UnknownPe(PeId),
    #[error("port {0} does not belong to the PE")]
    ForeignPort(PhysicalPort),
}

/// Everything that came out of the fabric for one injected packet.
#[derive(Clone, Default, Debug)]
pub struct Transmission {
    /// Copies that left the provider network on customer-side ports.
    pub delivered: Vec<(PhysicalPort, Packet)>,
    /// Packets sent over a core link, as (sending port, packet).
    pub core_transits: Vec<(PhysicalPort, Packet)>,
    pub controller_events: Vec<(PeId, PacketIn)>,
    /// Pipeline runs in which some copy hit a drop or a table miss.
    pub runs_with_drops: usize,
    /// Pipeline runs performed (one per PE visit).
    pub pipeline_runs: usize,
    pub traces: Vec<(PeId, Trace)>,
}

/// All PE switches of a topology plus the mesh links between them.
pub struct Dataplane {
    topo: Arc<Topology>,
    switches: Vec<Switch>,
}

impl Dataplane {
    pub fn new(topo: Arc<Topology>) -> Self {
        let switches = topo
            .pe_ids()
            .map(|pe| Switch::new(pe, topo.customer_port_count(pe)))
            .collect();
        Dataplane { topo, switches }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn switch(&self, pe: PeId) -> Result<&Switch, DataplaneError> {
        let i = self.topo.pe_index(pe).ok_or(DataplaneError::UnknownPe(pe))?;
        Ok(&self.switches[i])
    }

    pub fn switch_mut(&mut self, pe: PeId) -> Result<&mut Switch, DataplaneError> {
        let i = self.topo.pe_index(pe).ok_or(DataplaneError::UnknownPe(pe))?;
        Ok(&mut self.switches[i])
    }

    pub fn switches(&self) -> impl Iterator<Item = &Switch> {
        self.switches.iter()
    }

    /// Applies a per-table cap on every PE.
    pub fn set_table_cap(&mut self, table: TableId, cap: Option<usize>) {
        for s in &mut self.switches {
            s.set_table_cap(table, cap);
        }
    }

    pub fn install_rule(
        &mut self,
        pe: PeId,
        rule: FlowRule,
        now: SimTime,
    ) -> Result<RuleHandle, DataplaneError> {
        self.switch_mut(pe)?.install(rule, now)
    }

    pub fn remove_rules(&mut self, pe: PeId, cookie: Cookie) -> usize {
        self.switch_mut(pe).map_or(0, |s| s.remove_rules(cookie))
    }

    pub fn remove_rule(&mut self, handle: RuleHandle) -> Option<FlowRule> {
        self.switch_mut(handle.pe).ok()?.remove(handle)
    }

    pub fn process_packet(
        &mut self,
        pe: PeId,
        ingress: PhysicalPort,
        pkt: Packet,
        now: SimTime,
    ) -> Result<PipelineResult, DataplaneError> {
        if ingress.pe != pe || self.topo.port(pe, ingress.port_no).is_none() {
            return Err(DataplaneError::ForeignPort(ingress));
        }
        Ok(self.switch_mut(pe)?.process(ingress.port_no, pkt, now))
    }

    pub fn expire_idle(&mut self, pe: PeId, now: SimTime) -> Vec<ExpiredRule> {
        self.switch_mut(pe).map_or_else(|_| Vec::new(), |s| s.expire_idle(now))
    }

    pub fn table_stats(&self, pe: PeId) -> Result<TableStats, DataplaneError> {
        Ok(self.switch(pe)?.table_stats())
    }

    pub fn dump_rules(&self, pe: PeId) -> Result<String, DataplaneError> {
        Ok(self.switch(pe)?.dump())
    }

    /// Injects a packet at `ingress` and follows every copy across mesh
    /// links until it leaves on a customer port, is dropped, or is punted.
    pub fn transmit(
        &mut self,
        ingress: PhysicalPort,
        pkt: Packet,
        now: SimTime,
    ) -> Result<Transmission, DataplaneError> {
        let mut out = Transmission::default();
        let mut queue = VecDeque::from([(ingress, pkt)]);
        while let Some((port, pkt)) = queue.pop_front() {
            let res = self.process_packet(port.pe, port, pkt, now)?;
            out.pipeline_runs += 1;
            if res.dropped {
                out.runs_with_drops += 1;
            }
            out.traces
                .extend(res.traces.into_iter().map(|t| (port.pe, t)));
            out.controller_events
                .extend(res.controller_events.into_iter().map(|e| (port.pe, e)));
            for (egress, pkt) in res.egress {
                match egress.side {
                    PortSide::Customer => out.delivered.push((egress, pkt)),
                    PortSide::Core => {
                        if let Some((peer, peer_port)) = self.topo.link_peer(egress.pe, egress.port_no) {
                            out.core_transits.push((egress, pkt.clone()));
                            let far = PhysicalPort {
                                pe: peer,
                                port_no: peer_port,
                                side: PortSide::Core,
                            };
                            queue.push_back((far, pkt));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
