// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::packet::{Ipv4Prefix, Label, MacAddr, PacketKind};
use crate::topology::PortNo;

/// Simulated clock, in milliseconds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1000)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub fn saturating_since(self, earlier: SimTime) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }

    pub fn plus(self, d: Duration) -> SimTime {
        SimTime(self.0 + d.as_millis() as u64)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

/// The six pipeline tables, in pipeline order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableId {
    IngressMatcher,
    ServiceRedirector,
    MplsVpnForwarder,
    VplsForwarder,
    VplsMacLearner,
    NextHopResolver,
}

impl TableId {
    pub const ALL: [TableId; 6] = [
        TableId::IngressMatcher,
        TableId::ServiceRedirector,
        TableId::MplsVpnForwarder,
        TableId::VplsForwarder,
        TableId::VplsMacLearner,
        TableId::NextHopResolver,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short name used in rule dumps and CSV headers.
    pub fn name(self) -> &'static str {
        match self {
            TableId::IngressMatcher => "ingress",
            TableId::ServiceRedirector => "redirector",
            TableId::MplsVpnForwarder => "mplsvpn",
            TableId::VplsForwarder => "vplsfwd",
            TableId::VplsMacLearner => "maclearner",
            TableId::NextHopResolver => "nexthop",
        }
    }

    fn stage(self) -> u8 {
        match self {
            TableId::IngressMatcher => 0,
            TableId::ServiceRedirector => 1,
            TableId::MplsVpnForwarder | TableId::VplsForwarder | TableId::VplsMacLearner => 2,
            TableId::NextHopResolver => 3,
        }
    }

    /// Whether a rule in `self` may jump to `target`.
    pub fn may_goto(self, target: TableId) -> bool {
        target.stage() > self.stage()
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TableId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TableId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown table `{s}`"))
    }
}

/// Packet classes a rule can select on.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindMatch {
    Arp,
    RoutingMsg,
    LdpMsg,
}

impl KindMatch {
    pub fn of(kind: &PacketKind) -> Option<KindMatch> {
        match kind {
            PacketKind::Arp { .. } => Some(KindMatch::Arp),
            PacketKind::RoutingMsg => Some(KindMatch::RoutingMsg),
            PacketKind::LdpMsg => Some(KindMatch::LdpMsg),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            KindMatch::Arp => "arp",
            KindMatch::RoutingMsg => "routing_msg",
            KindMatch::LdpMsg => "ldp_msg",
        }
    }
}

/// Header predicates of a flow rule. `None` is a wildcard.
#[derive(Clone, Default, PartialEq, Eq, Hash, Debug)]
pub struct MatchSet {
    pub in_port: Option<PortNo>,
    pub kind: Option<KindMatch>,
    pub lsmd: Option<bool>,
    /// Top of the MPLS label stack.
    pub label: Option<Label>,
    pub vlan: Option<u16>,
    pub src_mac: Option<MacAddr>,
    pub dst_mac: Option<MacAddr>,
    pub src_ip: Option<Ipv4Prefix>,
    pub dst_ip: Option<Ipv4Prefix>,
    pub ip_proto: Option<u8>,
    pub l4_dst_port: Option<u16>,
}

impl MatchSet {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn in_port(mut self, p: PortNo) -> Self {
        self.in_port = Some(p);
        self
    }

    pub fn kind(mut self, k: KindMatch) -> Self {
        self.kind = Some(k);
        self
    }

    pub fn lsmd(mut self, v: bool) -> Self {
        self.lsmd = Some(v);
        self
    }

    pub fn label(mut self, l: Label) -> Self {
        self.label = Some(l);
        self
    }

    pub fn vlan(mut self, v: u16) -> Self {
        self.vlan = Some(v);
        self
    }

    pub fn src_mac(mut self, m: MacAddr) -> Self {
        self.src_mac = Some(m);
        self
    }

    pub fn dst_mac(mut self, m: MacAddr) -> Self {
        self.dst_mac = Some(m);
        self
    }

    pub fn src_ip(mut self, p: Ipv4Prefix) -> Self {
        self.src_ip = Some(p);
        self
    }

    pub fn dst_ip(mut self, p: Ipv4Prefix) -> Self {
        self.dst_ip = Some(p);
        self
    }

    pub fn ip_proto(mut self, p: u8) -> Self {
        self.ip_proto = Some(p);
        self
    }

    pub fn l4_dst_port(mut self, p: u16) -> Self {
        self.l4_dst_port = Some(p);
        self
    }
}

impl fmt::Display for MatchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if let Some(p) = self.in_port {
            parts.push(format!("in_port={p}"));
        }
        if let Some(k) = self.kind {
            parts.push(format!("kind={}", k.name()));
        }
        if let Some(l) = self.lsmd {
            parts.push(format!("lsmd={}", u8::from(l)));
        }
        if let Some(l) = self.label {
            parts.push(format!("label={l}"));
        }
        if let Some(v) = self.vlan {
            parts.push(format!("vlan={v}"));
        }
        if let Some(m) = self.src_mac {
            parts.push(format!("src_mac={m}"));
        }
        if let Some(m) = self.dst_mac {
            parts.push(format!("dst_mac={m}"));
        }
        if let Some(p) = self.src_ip {
            parts.push(format!("src_ip={p}"));
        }
        if let Some(p) = self.dst_ip {
            parts.push(format!("dst_ip={p}"));
        }
        if let Some(p) = self.ip_proto {
            parts.push(format!("ip_proto={p}"));
        }
        if let Some(p) = self.l4_dst_port {
            parts.push(format!("l4_dst={p}"));
        }
        if parts.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Why a packet was punted to the controller.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuntReason {
    MacLearn,
    Arp,
    RoutingMsg,
    LdpMsg,
}

impl PuntReason {
    pub const ALL: [PuntReason; 4] = [
        PuntReason::MacLearn,
        PuntReason::Arp,
        PuntReason::RoutingMsg,
        PuntReason::LdpMsg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PuntReason::MacLearn => "mac_learn",
            PuntReason::Arp => "arp",
            PuntReason::RoutingMsg => "routing_msg",
            PuntReason::LdpMsg => "ldp_msg",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Instruction {
    PushLabel(Label),
    PopLabel,
    SetLsmd(bool),
    SetEthSrc(MacAddr),
    SetEthDst(MacAddr),
    Output(PortNo),
    Goto(TableId),
    ToController(PuntReason),
    Drop,
    /// Each sublist runs on an independent copy of the packet.
    Replicate(Vec<Vec<Instruction>>),
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::PushLabel(l) => write!(f, "push_label:{l}"),
            Instruction::PopLabel => f.write_str("pop_label"),
            Instruction::SetLsmd(v) => write!(f, "set_lsmd:{}", u8::from(*v)),
            Instruction::SetEthSrc(m) => write!(f, "set_eth_src:{m}"),
            Instruction::SetEthDst(m) => write!(f, "set_eth_dst:{m}"),
            Instruction::Output(p) => write!(f, "output:{p}"),
            Instruction::Goto(t) => write!(f, "goto:{t}"),
            Instruction::ToController(r) => write!(f, "controller:{}", r.name()),
            Instruction::Drop => f.write_str("drop"),
            Instruction::Replicate(branches) => {
                f.write_str("replicate[")?;
                for (i, b) in branches.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    f.write_str(&format_actions(b))?;
                }
                f.write_str("]")
            }
        }
    }
}

/// Renders an action list as it appears in rule dumps (`-` when empty).
pub fn format_actions(actions: &[Instruction]) -> String {
    if actions.is_empty() {
        return "-".to_string();
    }
    actions
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Owner tag of a rule.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cookie {
    Infrastructure,
    Service(u32),
    Policy { service: u32, index: u32 },
}

impl Cookie {
    /// Service the rule belongs to, for service and policy cookies.
    pub fn service(self) -> Option<u32> {
        match self {
            Cookie::Infrastructure => None,
            Cookie::Service(s) | Cookie::Policy { service: s, .. } => Some(s),
        }
    }
}

impl fmt::Display for Cookie {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cookie::Infrastructure => f.write_str("infra"),
            Cookie::Service(s) => write!(f, "svc:{s}"),
            Cookie::Policy { service, index } => write!(f, "pol:{service}.{index}"),
        }
    }
}

/// A prioritized match-action entry destined for one table.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FlowRule {
    pub table: TableId,
    pub priority: u16,
    pub matches: MatchSet,
    pub actions: Arc<[Instruction]>,
    pub cookie: Cookie,
    pub idle_timeout: Option<Duration>,
}

impl FlowRule {
    pub fn new(
        table: TableId,
        priority: u16,
        matches: MatchSet,
        actions: Vec<Instruction>,
        cookie: Cookie,
    ) -> Self {
        FlowRule {
            table,
            priority,
            matches,
            actions: actions.into(),
            cookie,
            idle_timeout: None,
        }
    }

    pub fn with_idle_timeout(mut self, d: Duration) -> Self {
        self.idle_timeout = Some(d);
        self
    }

    /// One line of the rule dump: `table|priority|match|actions|cookie|idle`.
    pub fn dump_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.table,
            self.priority,
            self.matches,
            format_actions(&self.actions),
            self.cookie,
            format_idle(self.idle_timeout)
        )
    }
}

pub fn format_idle(d: Option<Duration>) -> String {
    match d {
        None => "-".to_string(),
        Some(d) if d.as_millis() % 1000 == 0 => d.as_secs().to_string(),
        Some(d) => format!("{}ms", d.as_millis()),
    }
}
