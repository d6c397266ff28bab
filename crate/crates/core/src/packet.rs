// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Frames flowing through the emulated data plane.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound (exclusive) of the 20-bit MPLS label space.
pub const LABEL_SPACE: u32 = 1 << 20;

/// Maximum label stack depth: inner service delimiter plus outer PE label.
pub const MAX_LABEL_DEPTH: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrParseError {
    #[error("invalid MAC address `{0}`")]
    Mac(String),
    #[error("invalid IPv4 prefix `{0}`")]
    Prefix(String),
}

/// 48-bit Ethernet address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);

    pub fn from_u64(v: u64) -> Self {
        let b = v.to_be_bytes();
        MacAddr([b[2], b[3], b[4], b[5], b[6], b[7]])
    }

    pub fn to_u64(self) -> u64 {
        let b = self.0;
        u64::from_be_bytes([0, 0, b[0], b[1], b[2], b[3], b[4], b[5]])
    }

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }

    /// Group (multicast or broadcast) address: I/G bit set.
    pub fn is_group(self) -> bool {
        self.0[0] & 1 == 1
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MacAddr {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddrParseError::Mac(s.to_string());
        let mut out = [0u8; 6];
        let mut parts = s.split([':', '-']);
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(err)?;
            if part.len() != 2 {
                return Err(err());
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| err())?;
        }
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(MacAddr(out))
    }
}

impl TryFrom<String> for MacAddr {
    type Error = AddrParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MacAddr> for String {
    fn from(m: MacAddr) -> String {
        m.to_string()
    }
}

/// IPv4 network prefix; host bits are always zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ipv4Prefix {
    addr: u32,
    len: u8,
}

impl Ipv4Prefix {
    /// Builds a prefix, masking off host bits. `len` above 32 is clamped.
    pub fn new(addr: Ipv4Addr, len: u8) -> Self {
        let len = len.min(32);
        Ipv4Prefix {
            addr: u32::from(addr) & Self::mask_bits(len),
            len,
        }
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        Self::new(addr, 32)
    }

    pub fn mask_bits(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr)
    }

    pub fn bits(&self) -> u32 {
        self.addr
    }

    pub fn prefix_len(&self) -> u8 {
        self.len
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask_bits(self.len) == self.addr
    }

    /// True when every address of `other` is also in `self`.
    pub fn covers(&self, other: &Ipv4Prefix) -> bool {
        self.len <= other.len && other.addr & Self::mask_bits(self.len) == self.addr
    }

    /// Intersection of two prefixes, which is either the longer one or empty.
    pub fn intersect(&self, other: &Ipv4Prefix) -> Option<Ipv4Prefix> {
        if self.covers(other) {
            Some(*other)
        } else if other.covers(self) {
            Some(*self)
        } else {
            None
        }
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr(), self.len)
    }
}

impl fmt::Debug for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Ipv4Prefix {
    type Err = AddrParseError;

    /// Accepts `a.b.c.d/len` or a bare address (treated as /32).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddrParseError::Prefix(s.to_string());
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => (a, l.parse::<u8>().map_err(|_| err())?),
            None => (s, 32),
        };
        if len > 32 {
            return Err(err());
        }
        let addr: Ipv4Addr = addr.trim().parse().map_err(|_| err())?;
        Ok(Ipv4Prefix::new(addr, len))
    }
}

impl TryFrom<String> for Ipv4Prefix {
    type Error = AddrParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ipv4Prefix> for String {
    fn from(p: Ipv4Prefix) -> String {
        p.to_string()
    }
}

/// A 20-bit MPLS label value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    pub fn is_valid(self) -> bool {
        self.0 < LABEL_SPACE
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArpOp {
    Request,
    Reply,
}

/// Payload classification, as far as the pipeline cares.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PacketKind {
    Ipv4 {
        src_ip: Ipv4Addr,
        dst_ip: Ipv4Addr,
        proto: u8,
        #[serde(default)]
        src_port: Option<u16>,
        #[serde(default)]
        dst_port: Option<u16>,
    },
    Arp {
        op: ArpOp,
        sender_ip: Ipv4Addr,
        sender_mac: MacAddr,
        target_ip: Ipv4Addr,
    },
    RoutingMsg,
    LdpMsg,
    Opaque,
}

/// An Ethernet frame with an optional 802.1Q tag and an MPLS label stack.
///
/// `labels` is stored bottom-first: the last element is the top (outer) label.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Packet {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    #[serde(default)]
    pub vlan: Option<u16>,
    pub kind: PacketKind,
    #[serde(default)]
    pub labels: Vec<Label>,
}

impl Packet {
    pub fn ipv4(src_mac: MacAddr, dst_mac: MacAddr, src_ip: Ipv4Addr, dst_ip: Ipv4Addr) -> Self {
        Packet {
            src_mac,
            dst_mac,
            vlan: None,
            kind: PacketKind::Ipv4 {
                src_ip,
                dst_ip,
                proto: 17,
                src_port: None,
                dst_port: None,
            },
            labels: Vec::new(),
        }
    }

    /// TCP segment to `dst_port`.
    pub fn tcp(
        src_mac: MacAddr,
        dst_mac: MacAddr,
        src_ip: Ipv4Addr,
        dst_ip: Ipv4Addr,
        src_port: u16,
        dst_port: u16,
    ) -> Self {
        Packet {
            src_mac,
            dst_mac,
            vlan: None,
            kind: PacketKind::Ipv4 {
                src_ip,
                dst_ip,
                proto: 6,
                src_port: Some(src_port),
                dst_port: Some(dst_port),
            },
            labels: Vec::new(),
        }
    }

    /// Ethernet frame with an opaque payload, tagged with `vlan`.
    pub fn ethernet(src_mac: MacAddr, dst_mac: MacAddr, vlan: Option<u16>) -> Self {
        Packet {
            src_mac,
            dst_mac,
            vlan,
            kind: PacketKind::Opaque,
            labels: Vec::new(),
        }
    }

    pub fn arp_request(sender_mac: MacAddr, sender_ip: Ipv4Addr, target_ip: Ipv4Addr) -> Self {
        Packet {
            src_mac: sender_mac,
            dst_mac: MacAddr::BROADCAST,
            vlan: None,
            kind: PacketKind::Arp {
                op: ArpOp::Request,
                sender_ip,
                sender_mac,
                target_ip,
            },
            labels: Vec::new(),
        }
    }

    pub fn control(kind: PacketKind) -> Self {
        Packet {
            src_mac: MacAddr::from_u64(0x0200_0000_0001),
            dst_mac: MacAddr::from_u64(0x0100_5e00_0005),
            vlan: None,
            kind,
            labels: Vec::new(),
        }
    }

    pub fn with_vlan(mut self, vlan: u16) -> Self {
        self.vlan = Some(vlan);
        self
    }

    pub fn top_label(&self) -> Option<Label> {
        self.labels.last().copied()
    }

    pub fn is_broadcast(&self) -> bool {
        self.dst_mac.is_broadcast()
    }

    pub fn dst_ip(&self) -> Option<Ipv4Addr> {
        match self.kind {
            PacketKind::Ipv4 { dst_ip, .. } => Some(dst_ip),
            _ => None,
        }
    }
}
