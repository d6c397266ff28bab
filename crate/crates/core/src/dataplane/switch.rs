// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

use std::fmt::Write as _;

use smallvec::SmallVec;

use super::flow::{Cookie, FlowRule, Instruction, PuntReason, SimTime, TableId};
use super::table::{Classifier, Entry, PacketFields};
use super::DataplaneError;
use crate::packet::{Packet, MAX_LABEL_DEPTH};
use crate::topology::{PeId, PhysicalPort, PortNo, PortSide};

/// Reference to an installed rule; stale once the rule is removed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct RuleHandle {
    pub pe: PeId,
    pub table: TableId,
    seq: u64,
    slot: u32,
}

/// A packet punted to the controller by a `ToController` action.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PacketIn {
    pub reason: PuntReason,
    pub ingress: PhysicalPort,
    pub packet: Packet,
    pub lsmd: bool,
}

/// Tables visited by one packet copy, in order.
pub type Trace = SmallVec<[TableId; 6]>;

#[derive(Clone, Default, Debug)]
pub struct PipelineResult {
    pub egress: Vec<(PhysicalPort, Packet)>,
    pub controller_events: Vec<PacketIn>,
    /// Some copy hit a drop action or a table miss.
    pub dropped: bool,
    pub traces: Vec<Trace>,
}

#[derive(Clone, Debug)]
pub struct ExpiredRule {
    pub handle: RuleHandle,
    pub rule: FlowRule,
    pub packet_count: u64,
}

#[derive(Clone, Debug)]
pub struct RuleStat {
    pub handle: RuleHandle,
    pub priority: u16,
    pub cookie: Cookie,
    pub packet_count: u64,
}

#[derive(Clone, Debug)]
pub struct TableStat {
    pub table: TableId,
    pub rule_count: usize,
    pub rules: Vec<RuleStat>,
}

/// Snapshot of all six tables of one PE.
#[derive(Clone, Debug)]
pub struct TableStats {
    pub pe: PeId,
    pub tables: Vec<TableStat>,
}

impl TableStats {
    pub fn rule_counts(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for t in &self.tables {
            out[t.table.index()] = t.rule_count;
        }
        out
    }

    pub fn total(&self) -> usize {
        self.tables.iter().map(|t| t.rule_count).sum()
    }
}

struct Installed {
    rule: FlowRule,
    seq: u64,
    last_used: SimTime,
    packet_count: u64,
}

#[derive(Default)]
struct Table {
    classifier: Classifier,
    cap: Option<usize>,
}

/// The flow tables of one PE.
pub struct Switch {
    pe: PeId,
    customer_ports: u16,
    tables: [Table; 6],
    slots: Vec<Option<Installed>>,
    free: Vec<u32>,
    next_seq: u64,
}

struct CopyState {
    pkt: Packet,
    lsmd: bool,
    trace: Trace,
}

impl Switch {
    pub fn new(pe: PeId, customer_ports: u16) -> Self {
        Switch {
            pe,
            customer_ports,
            tables: Default::default(),
            slots: Vec::new(),
            free: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn pe(&self) -> PeId {
        self.pe
    }

    pub fn set_table_cap(&mut self, table: TableId, cap: Option<usize>) {
        self.tables[table.index()].cap = cap;
    }

    pub fn table_cap(&self, table: TableId) -> Option<usize> {
        self.tables[table.index()].cap
    }

    pub fn table_len(&self, table: TableId) -> usize {
        self.tables[table.index()].classifier.len()
    }

    pub fn table_counts(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for t in TableId::ALL {
            out[t.index()] = self.table_len(t);
        }
        out
    }

    pub fn rule_count(&self) -> usize {
        self.tables.iter().map(|t| t.classifier.len()).sum()
    }

    fn port(&self, port_no: PortNo) -> PhysicalPort {
        let side = if port_no.0 >= 1 && port_no.0 <= self.customer_ports {
            PortSide::Customer
        } else {
            PortSide::Core
        };
        PhysicalPort {
            pe: self.pe,
            port_no,
            side,
        }
    }

    /// Checks the structural invariants of a rule's instruction list.
    pub fn validate(rule: &FlowRule) -> Result<(), DataplaneError> {
        validate_actions(rule.table, &rule.actions, false)
    }

    pub fn install(&mut self, rule: FlowRule, now: SimTime) -> Result<RuleHandle, DataplaneError> {
        Self::validate(&rule)?;
        let table = &mut self.tables[rule.table.index()];
        if let Some(cap) = table.cap {
            if table.classifier.len() >= cap {
                return Err(DataplaneError::TableFull {
                    pe: self.pe,
                    table: rule.table,
                    cap,
                });
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                self.slots.push(None);
                (self.slots.len() - 1) as u32
            }
        };
        table.classifier.insert(
            &rule.matches,
            Entry {
                priority: rule.priority,
                seq,
                slot,
            },
        );
        let handle = RuleHandle {
            pe: self.pe,
            table: rule.table,
            seq,
            slot,
        };
        self.slots[slot as usize] = Some(Installed {
            rule,
            seq,
            last_used: now,
            packet_count: 0,
        });
        Ok(handle)
    }

    pub fn contains(&self, handle: RuleHandle) -> bool {
        self.installed(handle).is_some()
    }

    fn installed(&self, handle: RuleHandle) -> Option<&Installed> {
        self.slots
            .get(handle.slot as usize)?
            .as_ref()
            .filter(|i| i.seq == handle.seq)
    }

    /// Installed rule and its packet counter.
    pub fn rule(&self, handle: RuleHandle) -> Option<(&FlowRule, u64)> {
        self.installed(handle).map(|i| (&i.rule, i.packet_count))
    }

    pub fn remove(&mut self, handle: RuleHandle) -> Option<FlowRule> {
        self.installed(handle)?;
        let inst = self.slots[handle.slot as usize].take()?;
        self.tables[inst.rule.table.index()]
            .classifier
            .remove(&inst.rule.matches, handle.slot);
        self.free.push(handle.slot);
        Some(inst.rule)
    }

    /// Removes every rule carrying exactly `cookie`.
    pub fn remove_rules(&mut self, cookie: Cookie) -> usize {
        self.remove_where(|r| r.cookie == cookie).len()
    }

    pub fn remove_where(&mut self, mut pred: impl FnMut(&FlowRule) -> bool) -> Vec<RuleHandle> {
        let victims: Vec<RuleHandle> = self
            .iter_installed()
            .filter(|(_, i)| pred(&i.rule))
            .map(|(h, _)| h)
            .collect();
        for h in &victims {
            self.remove(*h);
        }
        victims
    }

    fn iter_installed(&self) -> impl Iterator<Item = (RuleHandle, &Installed)> + '_ {
        let pe = self.pe;
        self.slots.iter().enumerate().filter_map(move |(slot, s)| {
            s.as_ref().map(|i| {
                (
                    RuleHandle {
                        pe,
                        table: i.rule.table,
                        seq: i.seq,
                        slot: slot as u32,
                    },
                    i,
                )
            })
        })
    }

    /// Handles of all installed rules matching `pred`, in insertion order.
    pub fn find(&self, mut pred: impl FnMut(&FlowRule) -> bool) -> Vec<RuleHandle> {
        let mut v: Vec<RuleHandle> = self
            .iter_installed()
            .filter(|(_, i)| pred(&i.rule))
            .map(|(h, _)| h)
            .collect();
        v.sort_by_key(|h| h.seq);
        v
    }

    /// Removes every rule idle for at least its timeout.
    pub fn expire_idle(&mut self, now: SimTime) -> Vec<ExpiredRule> {
        let stale: Vec<RuleHandle> = self
            .iter_installed()
            .filter(|(_, i)| {
                i.rule
                    .idle_timeout
                    .is_some_and(|t| now.saturating_since(i.last_used) >= t)
            })
            .map(|(h, _)| h)
            .collect();
        let mut out = Vec::with_capacity(stale.len());
        for handle in stale {
            let packet_count = self.installed(handle).map_or(0, |i| i.packet_count);
            if let Some(rule) = self.remove(handle) {
                out.push(ExpiredRule {
                    handle,
                    rule,
                    packet_count,
                });
            }
        }
        out.sort_by_key(|e| e.handle.seq);
        out
    }

    pub fn table_stats(&self) -> TableStats {
        let mut tables: Vec<TableStat> = TableId::ALL
            .into_iter()
            .map(|table| TableStat {
                table,
                rule_count: self.table_len(table),
                rules: Vec::new(),
            })
            .collect();
        for (handle, i) in self.iter_installed() {
            tables[i.rule.table.index()].rules.push(RuleStat {
                handle,
                priority: i.rule.priority,
                cookie: i.rule.cookie,
                packet_count: i.packet_count,
            });
        }
        for t in &mut tables {
            t.rules.sort_by_key(|r| r.handle.seq);
        }
        TableStats {
            pe: self.pe,
            tables,
        }
    }

    /// Rule dump ordered by table, descending priority, then insertion order.
    pub fn dump(&self) -> String {
        let mut rules: Vec<&Installed> = self.iter_installed().map(|(_, i)| i).collect();
        rules.sort_by_key(|i| (i.rule.table, std::cmp::Reverse(i.rule.priority), i.seq));
        let mut out = String::new();
        for i in rules {
            let _ = writeln!(out, "{}", i.rule.dump_line());
        }
        out
    }

    /// Runs one packet through the pipeline, starting at the ingress matcher.
    pub fn process(&mut self, ingress: PortNo, pkt: Packet, now: SimTime) -> PipelineResult {
        let mut result = PipelineResult::default();
        let state = CopyState {
            pkt,
            lsmd: false,
            trace: Trace::new(),
        };
        self.run_table(TableId::IngressMatcher, state, ingress, now, &mut result);
        result
    }

    fn run_table(
        &mut self,
        table: TableId,
        mut st: CopyState,
        ingress: PortNo,
        now: SimTime,
        result: &mut PipelineResult,
    ) {
        st.trace.push(table);
        let fields = PacketFields::extract(ingress, st.lsmd, &st.pkt);
        let Some(entry) = self.tables[table.index()].classifier.lookup(&fields) else {
            result.dropped = true;
            result.traces.push(st.trace);
            return;
        };
        let inst = self.slots[entry.slot as usize]
            .as_mut()
            .expect("classifier points at a live slot");
        inst.packet_count += 1;
        inst.last_used = now;
        let actions = inst.rule.actions.clone();
        self.run_actions(&actions, st, ingress, now, result);
    }

    fn run_actions(
        &mut self,
        actions: &[Instruction],
        mut st: CopyState,
        ingress: PortNo,
        now: SimTime,
        result: &mut PipelineResult,
    ) {
        for action in actions {
            match action {
                Instruction::PushLabel(l) => {
                    if st.pkt.labels.len() >= MAX_LABEL_DEPTH {
                        result.dropped = true;
                        result.traces.push(st.trace);
                        return;
                    }
                    st.pkt.labels.push(*l);
                }
                Instruction::PopLabel => {
                    if st.pkt.labels.pop().is_none() {
                        result.dropped = true;
                        result.traces.push(st.trace);
                        return;
                    }
                }
                Instruction::SetLsmd(v) => st.lsmd = *v,
                Instruction::SetEthSrc(m) => st.pkt.src_mac = *m,
                Instruction::SetEthDst(m) => st.pkt.dst_mac = *m,
                Instruction::Output(p) => {
                    // OpenFlow never hairpins to in_port on a plain output.
                    if *p != ingress {
                        result.egress.push((self.port(*p), st.pkt.clone()));
                    }
                }
                Instruction::Goto(t) => {
                    self.run_table(*t, st, ingress, now, result);
                    return;
                }
                Instruction::ToController(reason) => {
                    result.controller_events.push(PacketIn {
                        reason: *reason,
                        ingress: self.port(ingress),
                        packet: st.pkt.clone(),
                        lsmd: st.lsmd,
                    });
                }
                Instruction::Drop => {
                    result.dropped = true;
                    result.traces.push(st.trace);
                    return;
                }
                Instruction::Replicate(branches) => {
                    for branch in branches {
                        let copy = CopyState {
                            pkt: st.pkt.clone(),
                            lsmd: st.lsmd,
                            trace: st.trace.clone(),
                        };
                        self.run_actions(branch, copy, ingress, now, result);
                    }
                    return;
                }
            }
        }
        result.traces.push(st.trace);
    }
}

fn validate_actions(table: TableId, actions: &[Instruction], nested: bool) -> Result<(), DataplaneError> {
    let invalid = |msg: String| Err(DataplaneError::InvalidRule(msg));
    for (i, a) in actions.iter().enumerate() {
        let last = i + 1 == actions.len();
        match a {
            Instruction::PushLabel(l) if !l.is_valid() => {
                return invalid(format!("label {l} outside 20-bit space"));
            }
            Instruction::Goto(t) => {
                if !table.may_goto(*t) {
                    return invalid(format!("goto {t} from {table} does not advance the pipeline"));
                }
                if !last {
                    return invalid("goto must terminate the action list".into());
                }
            }
            Instruction::Replicate(branches) => {
                if nested {
                    return invalid("nested replicate".into());
                }
                if !last {
                    return invalid("replicate must terminate the action list".into());
                }
                for b in branches {
                    validate_actions(table, b, true)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataplane::flow::MatchSet;
    use crate::packet::{Label, MacAddr, PacketKind};
    use std::time::Duration;

    fn sw() -> Switch {
        Switch::new(PeId(0), 4)
    }

    fn frame() -> Packet {
        Packet::ethernet(MacAddr::from_u64(1), MacAddr::from_u64(2), Some(1))
    }

    fn rule(table: TableId, prio: u16, m: MatchSet, a: Vec<Instruction>) -> FlowRule {
        FlowRule::new(table, prio, m, a, Cookie::Infrastructure)
    }

    #[test]
    fn fresh_switch_has_six_empty_tables() {
        let s = sw();
        let stats = s.table_stats();
        assert_eq!(stats.tables.len(), 6);
        assert!(stats.tables.iter().all(|t| t.rule_count == 0));
        assert_eq!(s.dump(), "");
    }

    #[test]
    fn drop_rule_drops() {
        let mut s = sw();
        s.install(
            rule(TableId::IngressMatcher, 10, MatchSet::any(), vec![Instruction::Output(PortNo(2))]),
            SimTime(0),
        )
        .unwrap();
        s.install(
            rule(TableId::IngressMatcher, 65000, MatchSet::any().in_port(PortNo(1)), vec![Instruction::Drop]),
            SimTime(0),
        )
        .unwrap();
        let r = s.process(PortNo(1), frame(), SimTime(0));
        assert!(r.dropped);
        assert!(r.egress.is_empty());
        let r = s.process(PortNo(3), frame(), SimTime(0));
        assert!(!r.dropped);
        assert_eq!(r.egress.len(), 1);
    }

    #[test]
    fn higher_priority_wins() {
        let mut s = sw();
        s.install(
            rule(TableId::IngressMatcher, 10, MatchSet::any(), vec![Instruction::Output(PortNo(2))]),
            SimTime(0),
        )
        .unwrap();
        s.install(
            rule(TableId::IngressMatcher, 20, MatchSet::any(), vec![Instruction::Output(PortNo(3))]),
            SimTime(0),
        )
        .unwrap();
        let r = s.process(PortNo(1), frame(), SimTime(0));
        assert_eq!(r.egress[0].0.port_no, PortNo(3));
    }

    #[test]
    fn capacity_error() {
        let mut s = sw();
        s.set_table_cap(TableId::VplsForwarder, Some(2));
        for v in 0..2 {
            s.install(
                rule(TableId::VplsForwarder, 1, MatchSet::any().vlan(v), vec![]),
                SimTime(0),
            )
            .unwrap();
        }
        let err = s
            .install(rule(TableId::VplsForwarder, 1, MatchSet::any().vlan(9), vec![]), SimTime(0))
            .unwrap_err();
        assert!(matches!(err, DataplaneError::TableFull { cap: 2, .. }));
        // other tables unaffected
        s.install(rule(TableId::IngressMatcher, 1, MatchSet::any(), vec![]), SimTime(0))
            .unwrap();
    }

    #[test]
    fn invalid_instruction_lists_rejected() {
        let bad = [
            rule(
                TableId::IngressMatcher,
                1,
                MatchSet::any(),
                vec![Instruction::Goto(TableId::ServiceRedirector), Instruction::Drop],
            ),
            rule(
                TableId::VplsForwarder,
                1,
                MatchSet::any(),
                vec![Instruction::Goto(TableId::ServiceRedirector)],
            ),
            rule(
                TableId::VplsForwarder,
                1,
                MatchSet::any(),
                vec![Instruction::Goto(TableId::VplsMacLearner)],
            ),
            rule(
                TableId::ServiceRedirector,
                1,
                MatchSet::any(),
                vec![Instruction::Replicate(vec![vec![Instruction::Replicate(vec![])]])],
            ),
            rule(
                TableId::IngressMatcher,
                1,
                MatchSet::any(),
                vec![Instruction::PushLabel(Label(1 << 20))],
            ),
        ];
        for r in bad {
            assert!(matches!(Switch::validate(&r), Err(DataplaneError::InvalidRule(_))), "{r:?}");
        }
    }

    #[test]
    fn replicate_copies_are_independent() {
        let mut s = sw();
        s.install(
            rule(
                TableId::IngressMatcher,
                1,
                MatchSet::any(),
                vec![
                    Instruction::PushLabel(Label(16)),
                    Instruction::Goto(TableId::ServiceRedirector),
                ],
            ),
            SimTime(0),
        )
        .unwrap();
        s.install(
            rule(
                TableId::ServiceRedirector,
                1,
                MatchSet::any().label(Label(16)),
                vec![Instruction::Replicate(vec![
                    vec![Instruction::PopLabel, Instruction::Output(PortNo(2))],
                    vec![Instruction::PushLabel(Label(1000)), Instruction::Output(PortNo(5))],
                    vec![Instruction::Goto(TableId::VplsMacLearner)],
                ])],
            ),
            SimTime(0),
        )
        .unwrap();
        s.install(
            rule(
                TableId::VplsMacLearner,
                1,
                MatchSet::any(),
                vec![Instruction::ToController(PuntReason::MacLearn)],
            ),
            SimTime(0),
        )
        .unwrap();
        let r = s.process(PortNo(1), frame(), SimTime(0));
        assert_eq!(r.egress.len(), 2);
        assert!(r.egress[0].1.labels.is_empty());
        assert_eq!(r.egress[0].0.side, PortSide::Customer);
        assert_eq!(r.egress[1].1.labels, vec![Label(16), Label(1000)]);
        assert_eq!(r.egress[1].0.side, PortSide::Core);
        assert_eq!(r.controller_events.len(), 1);
        assert_eq!(r.controller_events[0].packet.labels, vec![Label(16)]);
        assert_eq!(r.traces.len(), 3);
    }

    #[test]
    fn output_to_ingress_is_suppressed() {
        let mut s = sw();
        s.install(
            rule(TableId::IngressMatcher, 1, MatchSet::any(), vec![Instruction::Output(PortNo(1))]),
            SimTime(0),
        )
        .unwrap();
        assert!(s.process(PortNo(1), frame(), SimTime(0)).egress.is_empty());
        assert_eq!(s.process(PortNo(2), frame(), SimTime(0)).egress.len(), 1);
    }

    #[test]
    fn label_depth_bounded() {
        let mut s = sw();
        s.install(
            rule(
                TableId::IngressMatcher,
                1,
                MatchSet::any(),
                vec![
                    Instruction::PushLabel(Label(16)),
                    Instruction::PushLabel(Label(17)),
                    Instruction::PushLabel(Label(18)),
                    Instruction::Output(PortNo(2)),
                ],
            ),
            SimTime(0),
        )
        .unwrap();
        let r = s.process(PortNo(1), frame(), SimTime(0));
        assert!(r.dropped);
        assert!(r.egress.is_empty());
    }

    #[test]
    fn counters_and_idle_expiry() {
        let mut s = sw();
        let learned = s
            .install(
                rule(TableId::IngressMatcher, 5, MatchSet::any().in_port(PortNo(1)), vec![])
                    .with_idle_timeout(Duration::from_secs(60)),
                SimTime::from_secs(0),
            )
            .unwrap();
        let recent = s
            .install(
                rule(TableId::IngressMatcher, 5, MatchSet::any().in_port(PortNo(2)), vec![])
                    .with_idle_timeout(Duration::from_secs(60)),
                SimTime::from_secs(0),
            )
            .unwrap();
        let infra = s
            .install(rule(TableId::IngressMatcher, 1, MatchSet::any(), vec![]), SimTime(0))
            .unwrap();
        for _ in 0..3 {
            s.process(PortNo(2), frame(), SimTime::from_secs(60));
        }
        assert_eq!(s.rule(recent).unwrap().1, 3);
        let expired = s.expire_idle(SimTime::from_secs(61));
        assert_eq!(expired.len(), 1);
        assert_eq!(expired[0].handle, learned);
        assert!(!s.contains(learned));
        assert!(s.contains(recent));
        assert!(s.contains(infra));
        assert!(s.expire_idle(SimTime::from_secs(100_000)).iter().all(|e| e.handle != infra));
    }

    #[test]
    fn remove_by_cookie_then_miss() {
        let mut s = sw();
        for p in 1..=3 {
            s.install(
                FlowRule::new(
                    TableId::IngressMatcher,
                    5,
                    MatchSet::any().in_port(PortNo(p)),
                    vec![Instruction::Output(PortNo(4))],
                    Cookie::Service(7),
                ),
                SimTime(0),
            )
            .unwrap();
        }
        assert_eq!(s.remove_rules(Cookie::Service(9)), 0);
        assert_eq!(s.remove_rules(Cookie::Service(7)), 3);
        let r = s.process(PortNo(1), frame(), SimTime(0));
        assert!(r.dropped && r.egress.is_empty());
    }

    #[test]
    fn ldp_on_core_port_punts() {
        let mut s = sw();
        s.install(
            rule(
                TableId::IngressMatcher,
                300,
                MatchSet::any().in_port(PortNo(5)).kind(crate::dataplane::KindMatch::LdpMsg),
                vec![Instruction::ToController(PuntReason::LdpMsg)],
            ),
            SimTime(0),
        )
        .unwrap();
        let r = s.process(PortNo(5), Packet::control(PacketKind::LdpMsg), SimTime(0));
        assert_eq!(r.controller_events.len(), 1);
        assert!(r.egress.is_empty());
        assert_eq!(r.controller_events[0].ingress.side, PortSide::Core);
    }

    #[test]
    fn dump_order_is_stable() {
        let mut s = sw();
        s.install(rule(TableId::NextHopResolver, 1, MatchSet::any(), vec![]), SimTime(0))
            .unwrap();
        s.install(rule(TableId::IngressMatcher, 1, MatchSet::any().vlan(1), vec![]), SimTime(0))
            .unwrap();
        s.install(rule(TableId::IngressMatcher, 9, MatchSet::any(), vec![]), SimTime(0))
            .unwrap();
        s.install(rule(TableId::IngressMatcher, 1, MatchSet::any().vlan(2), vec![]), SimTime(0))
            .unwrap();
        assert_eq!(
            s.dump(),
            "ingress|9|*|-|infra|-\ningress|1|vlan=1|-|infra|-\ningress|1|vlan=2|-|infra|-\nnexthop|1|*|-|infra|-\n"
        );
    }
}
