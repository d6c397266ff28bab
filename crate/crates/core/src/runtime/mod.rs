// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! The controller: customer registry and slicer, label allocation,
//! provisioning with per-call rollback, and the packet-in event loop
//! (ARP answering, MAC learning, idle-expiry bookkeeping).
//!
//! All controller state is owned by one [`Runtime`]; callers serialize
//! provisioning and packet injection through `&mut self`.

mod events;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use events::{Counters, EventLog, InstallCause, LogEntry};
pub use crate::labels::allocate_labels;

use crate::dataplane::{
    Dataplane, DataplaneError, FlowRule, PacketIn, PuntReason, RuleHandle, SimTime, TableId,
    TableStats, Transmission,
};
use crate::labels::{LabelError, LabelPlan};
use crate::packet::Packet;
use crate::policy::{compile_policies, Policy, PolicyError};
use crate::services::{
    infrastructure_rules, CompileCtx, CustomerId, Device, LearnOutcome, MacKey, PeRules,
    PortChange, PortConfig, Service, ServiceError, ServiceId, ServiceSpec,
};
use crate::topology::{PeId, PhysicalPort, PortKey, PortNo, Topology, TopologyError};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    /// Soft timeout of learned MAC rules.
    pub idle_timeout: Duration,
    /// Per-table capacity applied on every PE (`None` = unlimited).
    pub table_caps: [Option<usize>; 6],
    /// Keep a full event record in addition to the counters.
    pub record_events: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            table_caps: [None; 6],
            record_events: false,
        }
    }
}

impl RuntimeConfig {
    pub fn with_cap(mut self, table: TableId, cap: usize) -> Self {
        self.table_caps[table.index()] = Some(cap);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_events = true;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("key `{key}` already belongs to customer `{owner}`")]
    KeyTaken { key: PortKey, owner: CustomerId },
    #[error("port {port} is already used by service {service}")]
    PortClaimed { port: PhysicalPort, service: ServiceId },
    #[error("customer `{customer}` may not apply a policy to port `{port}`")]
    PolicyNotOwner { customer: CustomerId, port: String },
}

/// Result of one injected packet, including controller reactions.
#[derive(Clone, Default, Debug)]
pub struct InjectReport {
    pub transmission: Transmission,
    /// Packets sent by the controller (ARP replies) as (port, packet).
    pub packet_outs: Vec<(PhysicalPort, Packet)>,
}

impl InjectReport {
    pub fn delivered(&self) -> &[(PhysicalPort, Packet)] {
        &self.transmission.delivered
    }

    pub fn controller_events(&self) -> usize {
        self.transmission.controller_events.len()
    }
}

/// Controller reaction to one packet-in.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum DispatchOutcome {
    Learned(LearnOutcome),
    ArpReplied { port: PhysicalPort, reply: Packet },
    Logged(PuntReason),
    Ignored,
}

/// Per-PE rule counts at one instant.
#[derive(Clone, Debug)]
pub struct RuntimeStats {
    pub now: SimTime,
    pub per_pe: Vec<(PeId, [usize; 6])>,
    pub counters: Counters,
    pub services: usize,
}

impl RuntimeStats {
    pub fn total(&self) -> usize {
        self.per_pe.iter().map(|(_, c)| c.iter().sum::<usize>()).sum()
    }

    /// PE with the largest rule total (lowest id on ties) and that total.
    pub fn max_pe(&self) -> Option<(PeId, usize)> {
        self.per_pe
            .iter()
            .map(|(pe, c)| (*pe, c.iter().sum::<usize>()))
            .fold(None, |best, (pe, n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((pe, n)),
            })
    }
}

type PeHandles = BTreeMap<PeId, Vec<RuleHandle>>;

struct ServiceState {
    service: Service,
    policies: Vec<Policy>,
    base: PeHandles,
    policy_rules: PeHandles,
    learned: HashMap<MacKey, Vec<RuleHandle>>,
}

/// The controller and the data plane it programs.
pub struct Runtime {
    topo: Arc<Topology>,
    dp: Dataplane,
    labels: LabelPlan,
    config: RuntimeConfig,
    key_owner: HashMap<PortKey, CustomerId>,
    services: BTreeMap<ServiceId, ServiceState>,
    claimed: HashMap<PhysicalPort, ServiceId>,
    learned_index: HashMap<RuleHandle, (ServiceId, MacKey)>,
    next_service: u32,
    log: EventLog,
    now: SimTime,
}

impl Runtime {
    /// Builds the data plane for `topo` and installs infrastructure rules.
    pub fn new(topo: Topology, config: RuntimeConfig) -> Result<Runtime, RuntimeError> {
        let topo = Arc::new(topo);
        let labels = LabelPlan::for_topology(&topo)?;
        let mut dp = Dataplane::new(topo.clone());
        for table in TableId::ALL {
            dp.set_table_cap(table, config.table_caps[table.index()]);
        }
        let mut rt = Runtime {
            topo: topo.clone(),
            dp,
            labels,
            log: EventLog::new(config.record_events),
            config,
            key_owner: HashMap::new(),
            services: BTreeMap::new(),
            claimed: HashMap::new(),
            learned_index: HashMap::new(),
            next_service: 0,
            now: SimTime::default(),
        };
        for pe in topo.pe_ids() {
            for rule in infrastructure_rules(&topo, &rt.labels, pe) {
                rt.install(pe, rule, InstallCause::Infrastructure)?;
            }
        }
        Ok(rt)
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn dataplane(&self) -> &Dataplane {
        &self.dp
    }

    pub fn labels(&self) -> &LabelPlan {
        &self.labels
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Moves the simulated clock forward (never backward).
    pub fn set_time(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    pub fn advance(&mut self, d: Duration) {
        self.now = self.now.plus(d);
    }

    pub fn service(&self, id: ServiceId) -> Option<&Service> {
        self.services.get(&id).map(|s| &s.service)
    }

    pub fn service_ids(&self) -> impl Iterator<Item = ServiceId> + '_ {
        self.services.keys().copied()
    }

    pub fn policies(&self, id: ServiceId) -> Option<&[Policy]> {
        self.services.get(&id).map(|s| s.policies.as_slice())
    }

    fn ctx(&self) -> CompileCtx<'_> {
        CompileCtx {
            topo: &self.topo,
            labels: &self.labels,
            idle_timeout: self.config.idle_timeout,
        }
    }

    fn install(&mut self, pe: PeId, rule: FlowRule, cause: InstallCause) -> Result<RuleHandle, DataplaneError> {
        let (table, cookie) = (rule.table, rule.cookie);
        let h = self.dp.install_rule(pe, rule, self.now)?;
        self.log.installed(self.now, pe, table, cookie, cause);
        Ok(h)
    }

    fn remove(&mut self, h: RuleHandle) -> Option<FlowRule> {
        let rule = self.dp.remove_rule(h)?;
        self.log.removed(self.now, h.pe, rule.table, rule.cookie);
        Some(rule)
    }

    // ----- customers and keys -----

    /// Hands the key of a purchased port to a customer.
    pub fn grant_key(&mut self, customer: &CustomerId, key: &PortKey) -> Result<PhysicalPort, RuntimeError> {
        let port = self.topo.resolve_port(key.as_str())?;
        match self.key_owner.get(key) {
            Some(owner) if owner != customer => Err(RuntimeError::KeyTaken {
                key: key.clone(),
                owner: owner.clone(),
            }),
            _ => {
                self.key_owner.insert(key.clone(), customer.clone());
                Ok(port)
            }
        }
    }

    pub fn holds_key(&self, customer: &CustomerId, key: &PortKey) -> bool {
        self.key_owner.get(key) == Some(customer)
    }

    /// Keys held by a customer, sorted.
    pub fn customer_keys(&self, customer: &CustomerId) -> Vec<PortKey> {
        let mut keys: Vec<PortKey> = self
            .key_owner
            .iter()
            .filter(|(_, c)| *c == customer)
            .map(|(k, _)| k.clone())
            .collect();
        keys.sort();
        keys
    }

    // ----- provisioning -----

    fn check_policy_ports(&self, customer: &CustomerId, service: &Service, policies: &[Policy]) -> Result<(), RuntimeError> {
        for p in policies {
            for a in &p.apply {
                let vport = service
                    .port(&a.port)
                    .ok_or_else(|| PolicyError::PortNotInService(a.port.clone()))?;
                if &vport.owner != customer {
                    return Err(RuntimeError::PolicyNotOwner {
                        customer: customer.clone(),
                        port: a.port.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Base rules followed by policy rules, per PE.
    fn compile_all(&self, service: &Service, policies: &[Policy]) -> Result<PeRules, RuntimeError> {
        let mut rules = service.compile(&self.ctx());
        for (pe, extra) in compile_policies(policies, service)? {
            rules.entry(pe).or_default().extend(extra);
        }
        Ok(rules)
    }

    /// Verifies every table has room for `rules` once `freed` rules are gone.
    fn check_capacity(&self, rules: &PeRules, freed: &HashMap<(PeId, TableId), usize>) -> Result<(), DataplaneError> {
        let mut need: HashMap<(PeId, TableId), usize> = HashMap::new();
        for (pe, list) in rules {
            for r in list {
                *need.entry((*pe, r.table)).or_default() += 1;
            }
        }
        for ((pe, table), n) in need {
            let sw = self.dp.switch(pe)?;
            if let Some(cap) = sw.table_cap(table) {
                let free = freed.get(&(pe, table)).copied().unwrap_or(0);
                if sw.table_len(table) - free + n > cap {
                    return Err(DataplaneError::TableFull { pe, table, cap });
                }
            }
        }
        Ok(())
    }

    /// Installs compiled rules; on failure removes whatever was installed.
    fn install_batch(
        &mut self,
        rules: PeRules,
        policy_count: &BTreeMap<PeId, usize>,
        cause: InstallCause,
    ) -> Result<(PeHandles, PeHandles), DataplaneError> {
        let mut base = PeHandles::new();
        let mut pol = PeHandles::new();
        let mut done: Vec<(PeId, RuleHandle, FlowRule)> = Vec::new();
        for (pe, list) in rules {
            let n_pol = policy_count.get(&pe).copied().unwrap_or(0);
            let split = list.len() - n_pol;
            for (i, rule) in list.into_iter().enumerate() {
                let copy = rule.clone();
                match self.dp.install_rule(pe, rule, self.now) {
                    Ok(h) => {
                        done.push((pe, h, copy));
                        if i < split {
                            base.entry(pe).or_default().push(h);
                        } else {
                            pol.entry(pe).or_default().push(h);
                        }
                    }
                    Err(e) => {
                        for (_, h, _) in done {
                            self.dp.remove_rule(h);
                        }
                        return Err(e);
                    }
                }
            }
        }
        for (pe, _, rule) in &done {
            self.log.installed(self.now, *pe, rule.table, rule.cookie, cause);
        }
        Ok((base, pol))
    }

    fn policy_counts(policies: &[Policy], service: &Service) -> Result<BTreeMap<PeId, usize>, RuntimeError> {
        Ok(compile_policies(policies, service)?
            .into_iter()
            .map(|(pe, v)| (pe, v.len()))
            .collect())
    }

    /// Provisions a service from its spec and optional policies. Either
    /// every rule is installed or the data plane is left untouched.
    pub fn provision(
        &mut self,
        customer: &CustomerId,
        spec: &ServiceSpec,
        policies: &[Policy],
    ) -> Result<ServiceId, RuntimeError> {
        let id = ServiceId(self.next_service);
        let delimiter = self.labels.peek_inner()?;
        let owners = &self.key_owner;
        let holds = |c: &CustomerId, k: &PortKey| owners.get(k) == Some(c);
        let service = Service::from_spec(id, customer, spec, delimiter, &self.topo, &holds)?;
        for vp in service.ports() {
            if let Some(other) = self.claimed.get(&vp.port) {
                return Err(RuntimeError::PortClaimed {
                    port: vp.port,
                    service: *other,
                });
            }
        }
        self.check_policy_ports(customer, &service, policies)?;
        // Compile against a plan that already contains the delimiter.
        self.labels.assign_inner(id)?;
        let compiled = self
            .compile_all(&service, policies)
            .and_then(|rules| {
                self.check_capacity(&rules, &HashMap::new())?;
                Ok(rules)
            })
            .and_then(|rules| {
                let counts = Self::policy_counts(policies, &service)?;
                Ok(self.install_batch(rules, &counts, InstallCause::Provision)?)
            });
        let (base, policy_rules) = match compiled {
            Ok(v) => v,
            Err(e) => {
                self.labels.release_inner(id);
                return Err(e);
            }
        };
        let total: usize = base.values().chain(policy_rules.values()).map(Vec::len).sum();
        self.next_service += 1;
        for vp in service.ports() {
            self.claimed.insert(vp.port, id);
        }
        log::info!(
            "provisioned service {id} ({}, {} ports, {total} rules) for {customer}",
            service.kind(),
            service.ports().len()
        );
        self.log.provisioned(self.now, id, total);
        self.services.insert(
            id,
            ServiceState {
                service,
                policies: policies.to_vec(),
                base,
                policy_rules,
                learned: HashMap::new(),
            },
        );
        Ok(id)
    }

    /// Removes every rule of a service from every PE.
    pub fn deprovision(&mut self, id: ServiceId) -> Result<usize, RuntimeError> {
        let state = self
            .services
            .remove(&id)
            .ok_or(RuntimeError::UnknownService(id))?;
        for handles in state.learned.values() {
            for h in handles {
                self.learned_index.remove(h);
            }
        }
        let mut removed = 0;
        for pe in state.service.hosting_pes() {
            let victims = self.dp.switch(pe)?.find(|r| r.cookie.service() == Some(id.0));
            for h in victims {
                removed += usize::from(self.remove(h).is_some());
            }
        }
        for vp in state.service.ports() {
            self.claimed.remove(&vp.port);
        }
        self.labels.release_inner(id);
        log::info!("deprovisioned service {id}: {removed} rules removed");
        self.log.deprovisioned(self.now, id, removed);
        Ok(removed)
    }

    /// Replaces all compiled rules of a service by those of `service` and
    /// `policies`, flushing learned MAC state. Rolls back on failure.
    fn replace_service(&mut self, id: ServiceId, service: Service, policies: Vec<Policy>) -> Result<(), RuntimeError> {
        let rules = self.compile_all(&service, &policies)?;
        let counts = Self::policy_counts(&policies, &service)?;
        let mut freed: HashMap<(PeId, TableId), usize> = HashMap::new();
        let state = &self.services[&id];
        for h in state.base.values().chain(state.policy_rules.values()).flatten() {
            *freed.entry((h.pe, h.table)).or_default() += 1;
        }
        self.check_capacity(&rules, &freed)?;
        self.flush_learned(id);
        let state = self.services.get_mut(&id).expect("service exists");
        let old: Vec<RuleHandle> = std::mem::take(&mut state.base)
            .into_values()
            .chain(std::mem::take(&mut state.policy_rules).into_values())
            .flatten()
            .collect();
        let mut saved: PeRules = PeRules::new();
        for h in old {
            if let Some(rule) = self.remove(h) {
                saved.entry(h.pe).or_default().push(rule);
            }
        }
        match self.install_batch(rules, &counts, InstallCause::Reconfigure) {
            Ok((base, pol)) => {
                let state = self.services.get_mut(&id).expect("service exists");
                state.base = base;
                state.policy_rules = pol;
                state.service = service;
                state.policies = policies;
                self.reclaim_ports(id);
                Ok(())
            }
            Err(e) => {
                // Capacity was checked, so restoring the old rules fits.
                let old_state = &self.services[&id];
                let old_counts = Self::policy_counts(&old_state.policies, &old_state.service)?;
                let (base, pol) = self.install_batch(saved, &old_counts, InstallCause::Reconfigure)?;
                let state = self.services.get_mut(&id).expect("service exists");
                state.base = base;
                state.policy_rules = pol;
                Err(e.into())
            }
        }
    }

    fn reclaim_ports(&mut self, id: ServiceId) {
        self.claimed.retain(|_, s| *s != id);
        let ports: Vec<PhysicalPort> = self.services[&id].service.ports().iter().map(|p| p.port).collect();
        for p in ports {
            self.claimed.insert(p, id);
        }
    }

    /// Applies a customer's port-scoped change and recompiles the service.
    pub fn reconfigure(&mut self, customer: &CustomerId, id: ServiceId, change: PortChange) -> Result<(), RuntimeError> {
        let state = self.services.get(&id).ok_or(RuntimeError::UnknownService(id))?;
        let mut service = state.service.clone();
        service.configure(customer, change)?;
        let policies = state.policies.clone();
        for p in &policies {
            for a in &p.apply {
                if service.port(&a.port).is_none() {
                    return Err(PolicyError::PortNotInService(a.port.clone()).into());
                }
            }
        }
        self.replace_service(id, service, policies)
    }

    /// Adds a port owned by `customer` to an existing (shared) device.
    pub fn attach(
        &mut self,
        customer: &CustomerId,
        id: ServiceId,
        name: &str,
        key: &PortKey,
        config: PortConfig,
    ) -> Result<(), RuntimeError> {
        if !self.holds_key(customer, key) {
            return Err(ServiceError::UnownedKey {
                customer: customer.clone(),
                key: key.clone(),
            }
            .into());
        }
        let port = self.topo.resolve_port(key.as_str())?;
        if let Some(other) = self.claimed.get(&port) {
            return Err(RuntimeError::PortClaimed { port, service: *other });
        }
        let state = self.services.get(&id).ok_or(RuntimeError::UnknownService(id))?;
        let mut service = state.service.clone();
        service.attach(customer, name, key, config, &self.topo)?;
        let policies = state.policies.clone();
        self.replace_service(id, service, policies)
    }

    /// Replaces the policies `customer` applies to its own ports of a
    /// service; policies on other customers' ports are kept.
    pub fn set_policies(&mut self, customer: &CustomerId, id: ServiceId, policies: &[Policy]) -> Result<(), RuntimeError> {
        let state = self.services.get(&id).ok_or(RuntimeError::UnknownService(id))?;
        let service = state.service.clone();
        self.check_policy_ports(customer, &service, policies)?;
        let owned_by = |p: &Policy, c: &CustomerId| {
            p.apply
                .iter()
                .all(|a| service.port(&a.port).is_some_and(|v| &v.owner == c))
        };
        let mut merged: Vec<Policy> = state
            .policies
            .iter()
            .filter(|p| !owned_by(p, customer))
            .cloned()
            .collect();
        merged.extend(policies.iter().cloned());
        self.replace_service(id, service, merged)
    }

    // ----- event loop -----

    /// Injects a packet on a port, runs it through the fabric and dispatches
    /// every resulting packet-in in order.
    pub fn inject(&mut self, ingress: PhysicalPort, pkt: Packet) -> Result<InjectReport, RuntimeError> {
        let transmission = self.dp.transmit(ingress, pkt, self.now)?;
        let mut report = InjectReport {
            packet_outs: Vec::new(),
            transmission,
        };
        let events = report.transmission.controller_events.clone();
        for (pe, ev) in events {
            if let DispatchOutcome::ArpReplied { port, reply } = self.dispatch(pe, ev) {
                report.packet_outs.push((port, reply));
            }
        }
        Ok(report)
    }

    /// Injects on `(pe, port_no)`.
    pub fn inject_at(&mut self, pe: PeId, port_no: PortNo, pkt: Packet) -> Result<InjectReport, RuntimeError> {
        let port = self
            .topo
            .port(pe, port_no)
            .ok_or(DataplaneError::UnknownPe(pe))?;
        self.inject(port, pkt)
    }

    /// Handles one packet-in.
    pub fn dispatch(&mut self, pe: PeId, ev: PacketIn) -> DispatchOutcome {
        let now = self.now;
        let service = ev.packet.top_label().and_then(|l| self.labels.service_for(l));
        self.log.packet_in(now, ev.reason, ev.ingress, service);
        match ev.reason {
            PuntReason::RoutingMsg | PuntReason::LdpMsg => {
                log::debug!("{} from {} on {pe}", ev.reason.name(), ev.ingress);
                return DispatchOutcome::Logged(ev.reason);
            }
            PuntReason::MacLearn | PuntReason::Arp => {}
        }
        let Some(id) = service.filter(|s| self.services.contains_key(s)) else {
            self.log.ignored(now, format!("{} event without a live service", ev.reason.name()));
            return DispatchOutcome::Ignored;
        };
        match ev.reason {
            PuntReason::MacLearn => self.handle_learn(id, ev),
            PuntReason::Arp => self.handle_arp(id, ev),
            _ => unreachable!("control punts returned above"),
        }
    }

    fn handle_arp(&mut self, id: ServiceId, ev: PacketIn) -> DispatchOutcome {
        let state = self.services.get_mut(&id).expect("live service");
        let Device::Router(vr) = &mut state.service.device else {
            self.log.ignored(self.now, format!("arp event for non-router service {id}"));
            return DispatchOutcome::Ignored;
        };
        let Some(reply) = vr.handle_arp(ev.ingress, &ev.packet) else {
            self.log.ignored(self.now, format!("arp for a non-gateway address on {}", ev.ingress));
            return DispatchOutcome::Ignored;
        };
        self.log.arp_reply();
        if reply.ce_changed {
            if let Err(e) = self.refresh_pe(id, ev.ingress.pe) {
                log::warn!("recompiling service {id} on {} failed: {e}", ev.ingress.pe);
            }
        }
        DispatchOutcome::ArpReplied {
            port: reply.port,
            reply: reply.reply,
        }
    }

    /// Recompiles the base rules of a service on one PE.
    fn refresh_pe(&mut self, id: ServiceId, pe: PeId) -> Result<(), RuntimeError> {
        let state = &self.services[&id];
        let mut compiled = state.service.compile(&self.ctx());
        let rules = compiled.remove(&pe).unwrap_or_default();
        let old = self
            .services
            .get_mut(&id)
            .expect("live service")
            .base
            .remove(&pe)
            .unwrap_or_default();
        for h in old {
            self.remove(h);
        }
        let mut handles = Vec::with_capacity(rules.len());
        for rule in rules {
            handles.push(self.install(pe, rule, InstallCause::Reconfigure)?);
        }
        self.services.get_mut(&id).expect("live service").base.insert(pe, handles);
        Ok(())
    }

    fn handle_learn(&mut self, id: ServiceId, ev: PacketIn) -> DispatchOutcome {
        let now = self.now;
        let state = self.services.get_mut(&id).expect("live service");
        let Device::Switch(vs) = &mut state.service.device else {
            self.log.ignored(now, format!("mac_learn event for non-switch service {id}"));
            return DispatchOutcome::Ignored;
        };
        let outcome = vs.learn(ev.ingress, &ev.packet, now);
        let key = match &outcome {
            LearnOutcome::Learned { key, .. } => *key,
            LearnOutcome::Moved { key, .. } => {
                self.purge_learned(id, *key, false);
                *key
            }
            LearnOutcome::Refreshed { .. } | LearnOutcome::Ignored => return DispatchOutcome::Learned(outcome),
        };
        let state = &self.services[&id];
        let Device::Switch(vs) = &state.service.device else {
            unreachable!("checked above")
        };
        let rules = vs.learned_rules(&self.ctx(), state.service.delimiter, key);
        let mut handles = Vec::with_capacity(rules.len());
        for (pe, rule) in rules {
            match self.install(pe, rule, InstallCause::Learn) {
                Ok(h) => {
                    self.learned_index.insert(h, (id, key));
                    handles.push(h);
                }
                Err(e) => {
                    log::warn!("learning {key:?} for service {id} failed: {e}");
                    for h in handles {
                        self.learned_index.remove(&h);
                        self.remove(h);
                    }
                    if let Some(Device::Switch(vs)) =
                        self.services.get_mut(&id).map(|s| &mut s.service.device)
                    {
                        vs.forget(&key);
                    }
                    return DispatchOutcome::Ignored;
                }
            }
        }
        self.services
            .get_mut(&id)
            .expect("live service")
            .learned
            .insert(key, handles);
        DispatchOutcome::Learned(outcome)
    }

    /// Removes the rules of one learned MAC; optionally forgets the entry.
    fn purge_learned(&mut self, id: ServiceId, key: MacKey, forget: bool) {
        let Some(state) = self.services.get_mut(&id) else {
            return;
        };
        let handles = state.learned.remove(&key).unwrap_or_default();
        if forget {
            if let Device::Switch(vs) = &mut state.service.device {
                vs.forget(&key);
            }
        }
        for h in handles {
            self.learned_index.remove(&h);
            self.remove(h);
        }
    }

    fn flush_learned(&mut self, id: ServiceId) {
        let keys: Vec<MacKey> = self.services[&id].learned.keys().copied().collect();
        for key in keys {
            self.purge_learned(id, key, true);
        }
        if let Device::Switch(vs) = &mut self.services.get_mut(&id).expect("live service").service.device {
            let stale: Vec<MacKey> = vs.mac_table().keys().copied().collect();
            for k in stale {
                vs.forget(&k);
            }
        }
    }

    /// Expires idle rules on every PE at the current time. Expiry of any
    /// rule of a learned MAC purges the entry and its remaining rules.
    pub fn expire_idle(&mut self) -> usize {
        let now = self.now;
        let mut expired = 0;
        let pes: Vec<PeId> = self.topo.pe_ids().collect();
        let mut stale = Vec::new();
        for pe in pes {
            for ex in self.dp.expire_idle(pe, now) {
                expired += 1;
                self.log.expired(now, pe, ex.rule.table, ex.rule.cookie);
                if let Some(entry) = self.learned_index.remove(&ex.handle) {
                    stale.push(entry);
                }
            }
        }
        // Siblings that idled out in this sweep are already gone; only
        // still-active ones are removed here.
        for (id, key) in stale {
            self.purge_learned(id, key, true);
        }
        expired
    }

    // ----- observation -----

    pub fn table_stats(&self, pe: PeId) -> Result<TableStats, RuntimeError> {
        Ok(self.dp.table_stats(pe)?)
    }

    pub fn dump_rules(&self, pe: PeId) -> Result<String, RuntimeError> {
        Ok(self.dp.dump_rules(pe)?)
    }

    pub fn stats(&self) -> RuntimeStats {
        RuntimeStats {
            now: self.now,
            per_pe: self
                .dp
                .switches()
                .map(|s| (s.pe(), s.table_counts()))
                .collect(),
            counters: *self.log.counters(),
            services: self.services.len(),
        }
    }

    /// PEs on which any rule of the service is installed.
    pub fn service_footprint(&self, id: ServiceId) -> BTreeSet<PeId> {
        self.dp
            .switches()
            .filter(|s| !s.find(|r| r.cookie.service() == Some(id.0)).is_empty())
            .map(|s| s.pe())
            .collect()
    }

    /// Number of learned MAC entries of a switch service.
    pub fn learned_macs(&self, id: ServiceId) -> usize {
        self.services.get(&id).map_or(0, |s| s.learned.len())
    }
}
