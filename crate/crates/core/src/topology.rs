// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Provider topology: PE devices, their customer- and core-side ports, the
//! full PE mesh and the port-key database handed out to customers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("malformed topology document: {0}")]
    Malformed(String),
    #[error("duplicate PE id {0}")]
    DuplicatePe(PeId),
    #[error("topology has no PE devices")]
    Empty,
    #[error("PE {pe} has too many ports ({count})")]
    TooManyPorts { pe: PeId, count: usize },
    #[error("unknown port key `{0}`")]
    UnknownKey(String),
}

/// Identifier of a provider-edge device.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeId(pub u32);

impl fmt::Display for PeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pe{}", self.0)
    }
}

impl fmt::Debug for PeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for PeId {
    type Err = std::num::ParseIntError;

    /// Accepts `3` as well as `pe3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix("pe")
            .or_else(|| s.strip_prefix("PE"))
            .unwrap_or(s);
        digits.parse().map(PeId)
    }
}

/// Port number local to one PE.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortNo(pub u16);

impl fmt::Display for PortNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortSide {
    Customer,
    Core,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct PhysicalPort {
    pub pe: PeId,
    pub port_no: PortNo,
    pub side: PortSide,
}

impl fmt::Display for PhysicalPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pe, self.port_no)
    }
}

/// Opaque token proving ownership of one customer-side port.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortKey(pub String);

impl PortKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::borrow::Borrow<str> for PortKey {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A direct PE-to-PE link; each end uses a dedicated core-side port.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MeshLink {
    pub a: (PeId, PortNo),
    pub b: (PeId, PortNo),
}

#[derive(Clone, Debug)]
struct PeInfo {
    id: PeId,
    customer_ports: u16,
    /// Peer PE → local core port facing it.
    core_ports: BTreeMap<PeId, PortNo>,
    /// Local core port → (peer PE, peer's core port).
    peers: HashMap<PortNo, (PeId, PortNo)>,
}

/// Immutable provider topology.
#[derive(Clone, Debug)]
pub struct Topology {
    seed: u64,
    pes: Vec<PeInfo>,
    index: HashMap<PeId, usize>,
    links: Vec<MeshLink>,
    keys: HashMap<PortKey, (PeId, PortNo)>,
    key_of: HashMap<(PeId, PortNo), PortKey>,
}

/// Parses a `<topology seed="..."><pe id="..." customer-ports="N"/>...</topology>`
/// document. Mesh links are generated, never listed.
pub fn load_topology(xml: &str) -> Result<Topology, TopologyError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| TopologyError::Malformed(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "topology" {
        return Err(TopologyError::Malformed(format!(
            "expected <topology> root, found <{}>",
            root.tag_name().name()
        )));
    }
    let seed = match root.attribute("seed") {
        Some(s) => s
            .trim()
            .parse::<u64>()
            .map_err(|_| TopologyError::Malformed(format!("bad seed `{s}`")))?,
        None => 0,
    };
    let mut pes = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        if node.tag_name().name() != "pe" {
            return Err(TopologyError::Malformed(format!(
                "unexpected element <{}>",
                node.tag_name().name()
            )));
        }
        let id = node
            .attribute("id")
            .ok_or_else(|| TopologyError::Malformed("<pe> without id".into()))?;
        let id: PeId = id
            .trim()
            .parse()
            .map_err(|_| TopologyError::Malformed(format!("bad PE id `{id}`")))?;
        let ports = node
            .attribute("customer-ports")
            .ok_or_else(|| TopologyError::Malformed(format!("{id} without customer-ports")))?;
        let ports: u16 = ports
            .trim()
            .parse()
            .map_err(|_| TopologyError::Malformed(format!("bad customer-ports `{ports}`")))?;
        pes.push((id, ports));
    }
    Topology::build(seed, &pes)
}

impl Topology {
    /// Builds a full-mesh topology from `(pe, customer port count)` pairs.
    pub fn build(seed: u64, pes: &[(PeId, u16)]) -> Result<Topology, TopologyError> {
        if pes.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut sorted: Vec<(PeId, u16)> = pes.to_vec();
        sorted.sort_by_key(|(id, _)| *id);
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(TopologyError::DuplicatePe(w[0].0));
            }
        }
        let n = sorted.len();
        let mut infos = Vec::with_capacity(n);
        for &(id, customer_ports) in &sorted {
            let total = customer_ports as usize + n - 1;
            if total > u16::MAX as usize {
                return Err(TopologyError::TooManyPorts { pe: id, count: total });
            }
            let core_ports = sorted
                .iter()
                .filter(|(peer, _)| *peer != id)
                .enumerate()
                .map(|(i, (peer, _))| (*peer, PortNo(customer_ports + 1 + i as u16)))
                .collect();
            infos.push(PeInfo {
                id,
                customer_ports,
                core_ports,
                peers: HashMap::new(),
            });
        }
        let mut links = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (infos[i].id, infos[j].id);
                let pa = infos[i].core_ports[&b];
                let pb = infos[j].core_ports[&a];
                infos[i].peers.insert(pa, (b, pb));
                infos[j].peers.insert(pb, (a, pa));
                links.push(MeshLink { a: (a, pa), b: (b, pb) });
            }
        }
        let mut keys = HashMap::new();
        let mut key_of = HashMap::new();
        for info in &infos {
            for p in 1..=info.customer_ports {
                let key = derive_port_key(seed, info.id, PortNo(p));
                if keys.insert(key.clone(), (info.id, PortNo(p))).is_some() {
                    return Err(TopologyError::Malformed(format!("port key collision on {key}")));
                }
                key_of.insert((info.id, PortNo(p)), key);
            }
        }
        let index = infos.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        Ok(Topology {
            seed,
            pes: infos,
            index,
            links,
            keys,
            key_of,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// PE ids in ascending order.
    pub fn pe_ids(&self) -> impl Iterator<Item = PeId> + '_ {
        self.pes.iter().map(|p| p.id)
    }

    pub fn num_pes(&self) -> usize {
        self.pes.len()
    }

    pub fn contains_pe(&self, pe: PeId) -> bool {
        self.index.contains_key(&pe)
    }

    /// Dense index of a PE in ascending id order.
    pub fn pe_index(&self, pe: PeId) -> Option<usize> {
        self.index.get(&pe).copied()
    }

    pub fn links(&self) -> &[MeshLink] {
        &self.links
    }

    pub fn customer_port_count(&self, pe: PeId) -> u16 {
        self.info(pe).map_or(0, |i| i.customer_ports)
    }

    pub fn port(&self, pe: PeId, port_no: PortNo) -> Option<PhysicalPort> {
        let info = self.info(pe)?;
        let side = if port_no.0 >= 1 && port_no.0 <= info.customer_ports {
            PortSide::Customer
        } else if info.peers.contains_key(&port_no) {
            PortSide::Core
        } else {
            return None;
        };
        Some(PhysicalPort { pe, port_no, side })
    }

    pub fn customer_ports(&self, pe: PeId) -> impl Iterator<Item = PhysicalPort> + '_ {
        let n = self.customer_port_count(pe);
        (1..=n).map(move |p| PhysicalPort {
            pe,
            port_no: PortNo(p),
            side: PortSide::Customer,
        })
    }

    /// Core-side ports of `pe` with the peer each one faces, in peer order.
    pub fn core_ports(&self, pe: PeId) -> impl Iterator<Item = (PeId, PortNo)> + '_ {
        self.info(pe)
            .into_iter()
            .flat_map(|i| i.core_ports.iter().map(|(peer, port)| (*peer, *port)))
    }

    /// Local core port of `from` on the link toward `to`.
    pub fn core_port_towards(&self, from: PeId, to: PeId) -> Option<PortNo> {
        self.info(from)?.core_ports.get(&to).copied()
    }

    /// Far end of the mesh link attached to a core-side port.
    pub fn link_peer(&self, pe: PeId, port_no: PortNo) -> Option<(PeId, PortNo)> {
        self.info(pe)?.peers.get(&port_no).copied()
    }

    pub fn port_key(&self, pe: PeId, port_no: PortNo) -> Option<&PortKey> {
        self.key_of.get(&(pe, port_no))
    }

    /// Maps an issued key back to its customer-side port.
    pub fn resolve_port(&self, key: &str) -> Result<PhysicalPort, TopologyError> {
        let (pe, port_no) = self
            .keys
            .get(key)
            .ok_or_else(|| TopologyError::UnknownKey(key.to_string()))?;
        Ok(PhysicalPort {
            pe: *pe,
            port_no: *port_no,
            side: PortSide::Customer,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = (&PortKey, PhysicalPort)> + '_ {
        self.keys.iter().map(|(k, (pe, p))| {
            (
                k,
                PhysicalPort {
                    pe: *pe,
                    port_no: *p,
                    side: PortSide::Customer,
                },
            )
        })
    }

    /// Serializes back into the topology document format.
    pub fn to_xml(&self) -> String {
        let mut out = format!("<topology seed=\"{}\">\n", self.seed);
        for p in &self.pes {
            out.push_str(&format!(
                "  <pe id=\"{}\" customer-ports=\"{}\"/>\n",
                p.id.0, p.customer_ports
            ));
        }
        out.push_str("</topology>\n");
        out
    }

    fn info(&self, pe: PeId) -> Option<&PeInfo> {
        self.index.get(&pe).map(|&i| &self.pes[i])
    }
}

fn derive_port_key(seed: u64, pe: PeId, port: PortNo) -> PortKey {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(pe.0.to_be_bytes());
    h.update(port.0.to_be_bytes());
    let digest = h.finalize();
    PortKey(hex::encode(&digest[..8]))
}
