// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Controller event log: always-on counters plus an optional detailed
//! record of every rule change and packet-in.

use serde::Serialize;

use crate::dataplane::{Cookie, PuntReason, SimTime, TableId};
use crate::services::ServiceId;
use crate::topology::{PeId, PhysicalPort};

/// Why a batch of rules was installed.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallCause {
    Infrastructure,
    Provision,
    Reconfigure,
    Learn,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    RuleInstalled {
        at: SimTime,
        pe: PeId,
        table: TableId,
        cookie: Cookie,
        cause: InstallCause,
    },
    RuleRemoved {
        at: SimTime,
        pe: PeId,
        table: TableId,
        cookie: Cookie,
    },
    RuleExpired {
        at: SimTime,
        pe: PeId,
        table: TableId,
        cookie: Cookie,
    },
    PacketIn {
        at: SimTime,
        reason: PuntReason,
        ingress: PhysicalPort,
        service: Option<ServiceId>,
    },
    Provisioned {
        at: SimTime,
        service: ServiceId,
        rules: usize,
    },
    Deprovisioned {
        at: SimTime,
        service: ServiceId,
        rules: usize,
    },
    Ignored {
        at: SimTime,
        detail: String,
    },
}

/// Running totals; the conservation law is
/// `installs - removals - expiries == installed rule count`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, Serialize)]
pub struct Counters {
    pub infra_installs: u64,
    pub provision_installs: u64,
    pub reconfigure_installs: u64,
    pub learn_installs: u64,
    pub removals: u64,
    pub expiries: u64,
    pub mac_learn_events: u64,
    pub arp_events: u64,
    pub routing_msg_events: u64,
    pub ldp_msg_events: u64,
    pub arp_replies: u64,
    pub ignored_events: u64,
}

impl Counters {
    pub fn installs(&self) -> u64 {
        self.infra_installs + self.provision_installs + self.reconfigure_installs + self.learn_installs
    }

    /// Rules that should currently be installed across all PEs.
    pub fn live_rules(&self) -> u64 {
        self.installs() - self.removals - self.expiries
    }

    pub fn controller_events(&self) -> u64 {
        self.mac_learn_events + self.arp_events + self.routing_msg_events + self.ldp_msg_events
    }

    pub fn events_for(&self, reason: PuntReason) -> u64 {
        match reason {
            PuntReason::MacLearn => self.mac_learn_events,
            PuntReason::Arp => self.arp_events,
            PuntReason::RoutingMsg => self.routing_msg_events,
            PuntReason::LdpMsg => self.ldp_msg_events,
        }
    }
}

#[derive(Clone, Default, Debug)]
pub struct EventLog {
    counters: Counters,
    detailed: bool,
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn new(detailed: bool) -> Self {
        EventLog {
            counters: Counters::default(),
            detailed,
            entries: Vec::new(),
        }
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn is_detailed(&self) -> bool {
        self.detailed
    }

    fn push(&mut self, make: impl FnOnce() -> LogEntry) {
        if self.detailed {
            self.entries.push(make());
        }
    }

    pub(crate) fn installed(&mut self, at: SimTime, pe: PeId, table: TableId, cookie: Cookie, cause: InstallCause) {
        let c = &mut self.counters;
        match cause {
            InstallCause::Infrastructure => c.infra_installs += 1,
            InstallCause::Provision => c.provision_installs += 1,
            InstallCause::Reconfigure => c.reconfigure_installs += 1,
            InstallCause::Learn => c.learn_installs += 1,
        }
        self.push(|| LogEntry::RuleInstalled {
            at,
            pe,
            table,
            cookie,
            cause,
        });
    }

    pub(crate) fn removed(&mut self, at: SimTime, pe: PeId, table: TableId, cookie: Cookie) {
        self.counters.removals += 1;
        self.push(|| LogEntry::RuleRemoved { at, pe, table, cookie });
    }

    pub(crate) fn expired(&mut self, at: SimTime, pe: PeId, table: TableId, cookie: Cookie) {
        self.counters.expiries += 1;
        self.push(|| LogEntry::RuleExpired { at, pe, table, cookie });
    }

    pub(crate) fn packet_in(&mut self, at: SimTime, reason: PuntReason, ingress: PhysicalPort, service: Option<ServiceId>) {
        let c = &mut self.counters;
        match reason {
            PuntReason::MacLearn => c.mac_learn_events += 1,
            PuntReason::Arp => c.arp_events += 1,
            PuntReason::RoutingMsg => c.routing_msg_events += 1,
            PuntReason::LdpMsg => c.ldp_msg_events += 1,
        }
        self.push(|| LogEntry::PacketIn {
            at,
            reason,
            ingress,
            service,
        });
    }

    pub(crate) fn arp_reply(&mut self) {
        self.counters.arp_replies += 1;
    }

    pub(crate) fn provisioned(&mut self, at: SimTime, service: ServiceId, rules: usize) {
        self.push(|| LogEntry::Provisioned { at, service, rules });
    }

    pub(crate) fn deprovisioned(&mut self, at: SimTime, service: ServiceId, rules: usize) {
        self.push(|| LogEntry::Deprovisioned { at, service, rules });
    }

    pub(crate) fn ignored(&mut self, at: SimTime, detail: String) {
        self.counters.ignored_events += 1;
        log::debug!("ignored controller event: {detail}");
        self.push(|| LogEntry::Ignored { at, detail });
    }
}
