// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Tuple-space classifier backing one flow table.
//!
//! Rules are grouped by the set of fields they constrain (plus prefix
//! lengths). Within a group every rule is an exact match on the masked key,
//! so lookup is one hash probe per group. Groups are visited in descending
//! order of their highest priority and the scan stops once no remaining
//! group can beat the current winner.

use std::collections::HashMap;

use smallvec::SmallVec;

use super::flow::{KindMatch, MatchSet};
use crate::packet::{Ipv4Prefix, Packet, PacketKind};
use crate::topology::PortNo;

const F_IN_PORT: u16 = 1 << 0;
const F_KIND: u16 = 1 << 1;
const F_LSMD: u16 = 1 << 2;
const F_LABEL: u16 = 1 << 3;
const F_VLAN: u16 = 1 << 4;
const F_SRC_MAC: u16 = 1 << 5;
const F_DST_MAC: u16 = 1 << 6;
const F_SRC_IP: u16 = 1 << 7;
const F_DST_IP: u16 = 1 << 8;
const F_PROTO: u16 = 1 << 9;
const F_L4_DST: u16 = 1 << 10;
const F_NEEDS_IPV4: u16 = F_SRC_IP | F_DST_IP | F_PROTO | F_L4_DST;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct MatchMask {
    fields: u16,
    src_len: u8,
    dst_len: u8,
}

impl MatchMask {
    fn of(m: &MatchSet) -> Self {
        let mut fields = 0;
        let mut set = |present: bool, bit: u16| {
            if present {
                fields |= bit;
            }
        };
        set(m.in_port.is_some(), F_IN_PORT);
        set(m.kind.is_some(), F_KIND);
        set(m.lsmd.is_some(), F_LSMD);
        set(m.label.is_some(), F_LABEL);
        set(m.vlan.is_some(), F_VLAN);
        set(m.src_mac.is_some(), F_SRC_MAC);
        set(m.dst_mac.is_some(), F_DST_MAC);
        set(m.src_ip.is_some(), F_SRC_IP);
        set(m.dst_ip.is_some(), F_DST_IP);
        set(m.ip_proto.is_some(), F_PROTO);
        set(m.l4_dst_port.is_some(), F_L4_DST);
        MatchMask {
            fields,
            src_len: m.src_ip.map_or(0, |p| p.prefix_len()),
            dst_len: m.dst_ip.map_or(0, |p| p.prefix_len()),
        }
    }

    fn has(self, bit: u16) -> bool {
        self.fields & bit != 0
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Debug)]
struct MatchKey {
    in_port: u16,
    vlan: u16,
    l4_dst: u16,
    proto: u8,
    kind: u8,
    lsmd: bool,
    label: u32,
    src_ip: u32,
    dst_ip: u32,
    src_mac: u64,
    dst_mac: u64,
}

fn kind_code(k: KindMatch) -> u8 {
    match k {
        KindMatch::Arp => 1,
        KindMatch::RoutingMsg => 2,
        KindMatch::LdpMsg => 3,
    }
}

fn rule_key(m: &MatchSet) -> MatchKey {
    MatchKey {
        in_port: m.in_port.map_or(0, |p| p.0),
        vlan: m.vlan.unwrap_or(0),
        l4_dst: m.l4_dst_port.unwrap_or(0),
        proto: m.ip_proto.unwrap_or(0),
        kind: m.kind.map_or(0, kind_code),
        lsmd: m.lsmd.unwrap_or(false),
        label: m.label.map_or(0, |l| l.0),
        src_ip: m.src_ip.map_or(0, |p| p.bits()),
        dst_ip: m.dst_ip.map_or(0, |p| p.bits()),
        src_mac: m.src_mac.map_or(0, |a| a.to_u64()),
        dst_mac: m.dst_mac.map_or(0, |a| a.to_u64()),
    }
}

/// Header fields of a packet in pipeline context, extracted once per table.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PacketFields {
    in_port: u16,
    kind: Option<u8>,
    lsmd: bool,
    label: Option<u32>,
    vlan: Option<u16>,
    src_mac: u64,
    dst_mac: u64,
    ipv4: Option<(u32, u32, u8, Option<u16>)>,
}

impl PacketFields {
    pub(crate) fn extract(in_port: PortNo, lsmd: bool, pkt: &Packet) -> Self {
        let ipv4 = match pkt.kind {
            PacketKind::Ipv4 {
                src_ip,
                dst_ip,
                proto,
                dst_port,
                ..
            } => Some((u32::from(src_ip), u32::from(dst_ip), proto, dst_port)),
            _ => None,
        };
        PacketFields {
            in_port: in_port.0,
            kind: KindMatch::of(&pkt.kind).map(kind_code),
            lsmd,
            label: pkt.top_label().map(|l| l.0),
            vlan: pkt.vlan,
            src_mac: pkt.src_mac.to_u64(),
            dst_mac: pkt.dst_mac.to_u64(),
            ipv4,
        }
    }

    fn key(&self, mask: MatchMask) -> Option<MatchKey> {
        let mut k = MatchKey::default();
        if mask.has(F_IN_PORT) {
            k.in_port = self.in_port;
        }
        if mask.has(F_KIND) {
            k.kind = self.kind?;
        }
        if mask.has(F_LSMD) {
            k.lsmd = self.lsmd;
        }
        if mask.has(F_LABEL) {
            k.label = self.label?;
        }
        if mask.has(F_VLAN) {
            k.vlan = self.vlan?;
        }
        if mask.has(F_SRC_MAC) {
            k.src_mac = self.src_mac;
        }
        if mask.has(F_DST_MAC) {
            k.dst_mac = self.dst_mac;
        }
        if mask.fields & F_NEEDS_IPV4 != 0 {
            let (src, dst, proto, l4) = self.ipv4?;
            if mask.has(F_SRC_IP) {
                k.src_ip = src & Ipv4Prefix::mask_bits(mask.src_len);
            }
            if mask.has(F_DST_IP) {
                k.dst_ip = dst & Ipv4Prefix::mask_bits(mask.dst_len);
            }
            if mask.has(F_PROTO) {
                k.proto = proto;
            }
            if mask.has(F_L4_DST) {
                k.l4_dst = l4?;
            }
        }
        Some(k)
    }
}

/// A rule reference stored in the classifier.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) struct Entry {
    pub priority: u16,
    pub seq: u64,
    pub slot: u32,
}

impl Entry {
    /// Higher priority first, then earlier insertion.
    fn beats(&self, other: &Entry) -> bool {
        (self.priority, std::cmp::Reverse(self.seq)) > (other.priority, std::cmp::Reverse(other.seq))
    }
}

struct TupleGroup {
    mask: MatchMask,
    max_priority: u16,
    buckets: HashMap<MatchKey, SmallVec<[Entry; 1]>>,
}

#[derive(Default)]
pub(crate) struct Classifier {
    groups: Vec<TupleGroup>,
    by_mask: HashMap<MatchMask, usize>,
    /// Group indices sorted by descending `max_priority`.
    order: Vec<usize>,
    len: usize,
}

impl Classifier {
    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn insert(&mut self, m: &MatchSet, entry: Entry) {
        let mask = MatchMask::of(m);
        let gi = match self.by_mask.get(&mask) {
            Some(&gi) => gi,
            None => {
                let gi = self.groups.len();
                self.groups.push(TupleGroup {
                    mask,
                    max_priority: entry.priority,
                    buckets: HashMap::new(),
                });
                self.by_mask.insert(mask, gi);
                self.order.push(gi);
                self.resort();
                gi
            }
        };
        let group = &mut self.groups[gi];
        let bucket = group.buckets.entry(rule_key(m)).or_default();
        let pos = bucket
            .iter()
            .position(|e| entry.beats(e))
            .unwrap_or(bucket.len());
        bucket.insert(pos, entry);
        if entry.priority > group.max_priority {
            group.max_priority = entry.priority;
            self.resort();
        }
        self.len += 1;
    }

    pub(crate) fn remove(&mut self, m: &MatchSet, slot: u32) -> bool {
        let mask = MatchMask::of(m);
        let Some(&gi) = self.by_mask.get(&mask) else {
            return false;
        };
        let key = rule_key(m);
        let group = &mut self.groups[gi];
        let Some(bucket) = group.buckets.get_mut(&key) else {
            return false;
        };
        let Some(pos) = bucket.iter().position(|e| e.slot == slot) else {
            return false;
        };
        bucket.remove(pos);
        if bucket.is_empty() {
            group.buckets.remove(&key);
        }
        self.len -= 1;
        true
    }

    pub(crate) fn lookup(&self, fields: &PacketFields) -> Option<Entry> {
        let mut best: Option<Entry> = None;
        for &gi in &self.order {
            let group = &self.groups[gi];
            if let Some(b) = best {
                if group.max_priority < b.priority {
                    break;
                }
            }
            if group.buckets.is_empty() {
                continue;
            }
            let Some(key) = fields.key(group.mask) else {
                continue;
            };
            if let Some(cand) = group.buckets.get(&key).and_then(|b| b.first()) {
                if best.is_none_or(|b| cand.beats(&b)) {
                    best = Some(*cand);
                }
            }
        }
        best
    }

    fn resort(&mut self) {
        let groups = &self.groups;
        self.order
            .sort_by_key(|&gi| std::cmp::Reverse(groups[gi].max_priority));
    }
}
