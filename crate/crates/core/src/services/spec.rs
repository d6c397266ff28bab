// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Customer service specification documents.
//!
//! ```xml
//! <service kind="mpls-vpn" name="acme">
//!   <vport name="vp1" key="..." ip="192.168.1.1/24"/>
//!   <route prefix="10.0.0.0/16" vport="vp1"/>
//!   <shared owners="c1:vp1,c2:vp2"/>
//! </service>
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CustomerId, ServiceError, ServiceKind};
use crate::packet::Ipv4Prefix;
use crate::topology::PortKey;

/// Interface address of a virtual router port (`a.b.c.d/len`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct GatewayAddr {
    pub ip: Ipv4Addr,
    pub len: u8,
}

impl fmt::Display for GatewayAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.ip, self.len)
    }
}

impl FromStr for GatewayAddr {
    type Err = ServiceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ServiceError::InvalidSpec(format!("bad interface address `{s}`"));
        let (ip, len) = match s.split_once('/') {
            Some((ip, len)) => (ip, len.parse::<u8>().map_err(|_| bad())?),
            None => (s, 32),
        };
        if len > 32 {
            return Err(bad());
        }
        Ok(GatewayAddr {
            ip: ip.trim().parse().map_err(|_| bad())?,
            len,
        })
    }
}

/// VLANs a virtual switch port operates on.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum VlanBinding {
    Trunk,
    Vlans(BTreeSet<u16>),
}

impl VlanBinding {
    pub fn carries(&self, vlan: u16) -> bool {
        match self {
            VlanBinding::Trunk => true,
            VlanBinding::Vlans(set) => set.contains(&vlan),
        }
    }

    pub fn is_trunk(&self) -> bool {
        matches!(self, VlanBinding::Trunk)
    }
}

impl fmt::Display for VlanBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VlanBinding::Trunk => f.write_str("trunk"),
            VlanBinding::Vlans(set) => {
                let v: Vec<String> = set.iter().map(|v| v.to_string()).collect();
                f.write_str(&v.join(","))
            }
        }
    }
}

impl FromStr for VlanBinding {
    type Err = ServiceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("trunk") {
            return Ok(VlanBinding::Trunk);
        }
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let v: u16 = part
                .parse()
                .map_err(|_| ServiceError::InvalidSpec(format!("bad VLAN `{part}`")))?;
            if !(1..=4094).contains(&v) {
                return Err(ServiceError::InvalidSpec(format!("VLAN {v} out of range")));
            }
            set.insert(v);
        }
        if set.is_empty() {
            return Err(ServiceError::EmptyVlanSet);
        }
        Ok(VlanBinding::Vlans(set))
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VportSpec {
    pub name: String,
    pub key: PortKey,
    #[serde(default)]
    pub ip: Option<GatewayAddr>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub kind: ServiceKind,
    pub name: String,
    pub vports: Vec<VportSpec>,
    pub routes: Vec<(Ipv4Prefix, String)>,
    pub vlan_binds: Vec<(String, VlanBinding)>,
    /// Explicit port owners for shared devices.
    pub shared: Option<Vec<(CustomerId, String)>>,
}

impl ServiceSpec {
    pub fn new(kind: ServiceKind, name: impl Into<String>) -> Self {
        ServiceSpec {
            kind,
            name: name.into(),
            vports: Vec::new(),
            routes: Vec::new(),
            vlan_binds: Vec::new(),
            shared: None,
        }
    }

    pub fn vport(mut self, name: &str, key: &PortKey, ip: Option<&str>) -> Self {
        self.vports.push(VportSpec {
            name: name.to_string(),
            key: key.clone(),
            ip: ip.map(|s| s.parse().expect("valid interface address")),
        });
        self
    }

    pub fn route(mut self, prefix: &str, vport: &str) -> Self {
        self.routes
            .push((prefix.parse().expect("valid prefix"), vport.to_string()));
        self
    }

    pub fn bind(mut self, vport: &str, binding: VlanBinding) -> Self {
        self.vlan_binds.push((vport.to_string(), binding));
        self
    }

    pub fn shared_owners(mut self, owners: &[(&str, &str)]) -> Self {
        self.shared = Some(
            owners
                .iter()
                .map(|(c, p)| (CustomerId::new(*c), p.to_string()))
                .collect(),
        );
        self
    }

    /// Declared owner of a port, if the spec names one.
    pub fn declared_owner(&self, vport: &str) -> Option<&CustomerId> {
        self.shared
            .as_ref()?
            .iter()
            .find(|(_, p)| p == vport)
            .map(|(c, _)| c)
    }

    /// Renders the spec back into its XML form.
    pub fn to_xml(&self) -> String {
        let kind = match self.kind {
            ServiceKind::MplsVpn => "mpls-vpn",
            ServiceKind::Vpls => "vpls",
        };
        let mut out = format!("<service kind=\"{kind}\" name=\"{}\">\n", self.name);
        for v in &self.vports {
            match v.ip {
                Some(ip) => out.push_str(&format!(
                    "  <vport name=\"{}\" key=\"{}\" ip=\"{ip}\"/>\n",
                    v.name, v.key
                )),
                None => out.push_str(&format!("  <vport name=\"{}\" key=\"{}\"/>\n", v.name, v.key)),
            }
        }
        for (p, v) in &self.routes {
            out.push_str(&format!("  <route prefix=\"{p}\" vport=\"{v}\"/>\n"));
        }
        for (v, b) in &self.vlan_binds {
            out.push_str(&format!("  <vlanbind vport=\"{v}\" vlans=\"{b}\"/>\n"));
        }
        if let Some(owners) = &self.shared {
            let s: Vec<String> = owners.iter().map(|(c, p)| format!("{c}:{p}")).collect();
            out.push_str(&format!("  <shared owners=\"{}\"/>\n", s.join(",")));
        }
        out.push_str("</service>\n");
        out
    }
}

fn attr<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str, ServiceError> {
    node.attribute(name).ok_or_else(|| {
        ServiceError::InvalidSpec(format!(
            "<{}> is missing attribute `{name}`",
            node.tag_name().name()
        ))
    })
}

/// Parses a service specification document.
pub fn parse_service_spec(xml: &str) -> Result<ServiceSpec, ServiceError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ServiceError::InvalidSpec(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "service" {
        return Err(ServiceError::InvalidSpec(format!(
            "expected <service> root, found <{}>",
            root.tag_name().name()
        )));
    }
    let kind = match attr(root, "kind")? {
        "mpls-vpn" | "mpls_vpn" => ServiceKind::MplsVpn,
        "vpls" => ServiceKind::Vpls,
        other => {
            return Err(ServiceError::InvalidSpec(format!("unknown service kind `{other}`")));
        }
    };
    let mut spec = ServiceSpec::new(kind, attr(root, "name")?);
    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "vport" => {
                let ip = node.attribute("ip").map(str::parse).transpose()?;
                spec.vports.push(VportSpec {
                    name: attr(node, "name")?.to_string(),
                    key: PortKey(attr(node, "key")?.to_string()),
                    ip,
                });
            }
            "route" => {
                let prefix = attr(node, "prefix")?;
                let prefix: Ipv4Prefix = prefix
                    .parse()
                    .map_err(|e: crate::packet::AddrParseError| ServiceError::InvalidSpec(e.to_string()))?;
                spec.routes.push((prefix, attr(node, "vport")?.to_string()));
            }
            "vlanbind" => {
                let binding: VlanBinding = attr(node, "vlans")?.parse()?;
                spec.vlan_binds.push((attr(node, "vport")?.to_string(), binding));
            }
            "shared" => {
                let mut owners = Vec::new();
                for item in attr(node, "owners")?
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                {
                    let (c, p) = item.split_once(':').ok_or_else(|| {
                        ServiceError::InvalidSpec(format!("bad owner entry `{item}`"))
                    })?;
                    owners.push((CustomerId::new(c.trim()), p.trim().to_string()));
                }
                spec.shared = Some(owners);
            }
            other => {
                return Err(ServiceError::InvalidSpec(format!("unexpected element <{other}>")));
            }
        }
    }
    Ok(spec)
}
