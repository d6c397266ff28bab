// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Customer restriction policies: XML parsing and compilation into drop
//! rules in the service's forwarder table.
//!
//! ```xml
//! <policy>
//!   <match name="destinationIP" value="192.168.10.1"/>
//!   <apply>
//!     <virtualport name="vp1" direction="in"/>
//!   </apply>
//! </policy>
//! ```
//!
//! A document holds a single `<policy>` or a `<policies>` list of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::{Cookie, FlowRule, Instruction, MatchSet, TableId};
use crate::packet::{Ipv4Prefix, MacAddr};
use crate::services::{priority, PeRules, Service, ServiceKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("malformed policy document: {0}")]
    Xml(String),
    #[error("unexpected element <{0}>")]
    UnexpectedElement(String),
    #[error("<{element}> is missing attribute `{attr}`")]
    MissingAttribute { element: String, attr: String },
    #[error("unknown header field `{0}`")]
    UnknownField(String),
    #[error("bad value `{value}` for field {field}")]
    BadValue { field: String, value: String },
    #[error("field {0} matched twice in one policy")]
    DuplicateField(String),
    #[error("bad direction `{0}` (expected in or out)")]
    BadDirection(String),
    #[error("policy has no <match>")]
    EmptyMatch,
    #[error("policy has no <apply> target")]
    EmptyApply,
    #[error("virtual port `{0}` is not part of the service")]
    PortNotInService(String),
}

/// A header-field predicate of a policy.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PolicyField {
    DestinationIp(Ipv4Prefix),
    SourceIp(Ipv4Prefix),
    DestinationMac(MacAddr),
    SourceMac(MacAddr),
    Vlan(u16),
    IpProtocol(u8),
    DestinationPort(u16),
}

impl PolicyField {
    pub const NAMES: [&'static str; 7] = [
        "destinationIP",
        "sourceIP",
        "destinationMAC",
        "sourceMAC",
        "vlan",
        "ipProtocol",
        "destinationPort",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyField::DestinationIp(_) => "destinationIP",
            PolicyField::SourceIp(_) => "sourceIP",
            PolicyField::DestinationMac(_) => "destinationMAC",
            PolicyField::SourceMac(_) => "sourceMAC",
            PolicyField::Vlan(_) => "vlan",
            PolicyField::IpProtocol(_) => "ipProtocol",
            PolicyField::DestinationPort(_) => "destinationPort",
        }
    }

    /// Parses a `(name, value)` pair from the policy language.
    pub fn parse(name: &str, value: &str) -> Result<PolicyField, PolicyError> {
        let bad = || PolicyError::BadValue {
            field: name.to_string(),
            value: value.to_string(),
        };
        let v = value.trim();
        Ok(match name {
            "destinationIP" => PolicyField::DestinationIp(v.parse().map_err(|_| bad())?),
            "sourceIP" => PolicyField::SourceIp(v.parse().map_err(|_| bad())?),
            "destinationMAC" => PolicyField::DestinationMac(v.parse().map_err(|_| bad())?),
            "sourceMAC" => PolicyField::SourceMac(v.parse().map_err(|_| bad())?),
            "vlan" => {
                let vlan: u16 = v.parse().map_err(|_| bad())?;
                if !(1..=4094).contains(&vlan) {
                    return Err(bad());
                }
                PolicyField::Vlan(vlan)
            }
            "ipProtocol" => PolicyField::IpProtocol(match v.to_ascii_lowercase().as_str() {
                "icmp" => 1,
                "tcp" => 6,
                "udp" => 17,
                n => n.parse().map_err(|_| bad())?,
            }),
            "destinationPort" => PolicyField::DestinationPort(v.parse().map_err(|_| bad())?),
            other => return Err(PolicyError::UnknownField(other.to_string())),
        })
    }

    fn value_string(&self) -> String {
        match self {
            PolicyField::DestinationIp(p) | PolicyField::SourceIp(p) => p.to_string(),
            PolicyField::DestinationMac(m) | PolicyField::SourceMac(m) => m.to_string(),
            PolicyField::Vlan(v) | PolicyField::DestinationPort(v) => v.to_string(),
            PolicyField::IpProtocol(p) => p.to_string(),
        }
    }

    fn apply_to(&self, m: MatchSet) -> MatchSet {
        match *self {
            PolicyField::DestinationIp(p) => m.dst_ip(p),
            PolicyField::SourceIp(p) => m.src_ip(p),
            PolicyField::DestinationMac(a) => m.dst_mac(a),
            PolicyField::SourceMac(a) => m.src_mac(a),
            PolicyField::Vlan(v) => m.vlan(v),
            PolicyField::IpProtocol(p) => m.ip_proto(p),
            PolicyField::DestinationPort(p) => m.l4_dst_port(p),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

impl FromStr for Direction {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Direction::In),
            "out" => Ok(Direction::Out),
            other => Err(PolicyError::BadDirection(other.to_string())),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::In => "in",
            Direction::Out => "out",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Apply {
    pub port: String,
    pub direction: Direction,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Policy {
    pub matches: Vec<PolicyField>,
    pub apply: Vec<Apply>,
}

impl Policy {
    pub fn new(matches: Vec<PolicyField>, apply: Vec<(&str, Direction)>) -> Self {
        Policy {
            matches,
            apply: apply
                .into_iter()
                .map(|(p, d)| Apply {
                    port: p.to_string(),
                    direction: d,
                })
                .collect(),
        }
    }

    /// Renders the policy in the XML policy language.
    pub fn to_xml(&self) -> String {
        let mut out = String::from("<policy>\n");
        for m in &self.matches {
            out.push_str(&format!(
                "  <match name=\"{}\" value=\"{}\"/>\n",
                m.name(),
                m.value_string()
            ));
        }
        out.push_str("  <apply>\n");
        for a in &self.apply {
            out.push_str(&format!(
                "    <virtualport name=\"{}\" direction=\"{}\"/>\n",
                a.port, a.direction
            ));
        }
        out.push_str("  </apply>\n</policy>\n");
        out
    }
}

/// Renders several policies as a `<policies>` document.
pub fn policies_to_xml(policies: &[Policy]) -> String {
    let mut out = String::from("<policies>\n");
    for p in policies {
        out.push_str(&p.to_xml());
    }
    out.push_str("</policies>\n");
    out
}

fn attr<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str, PolicyError> {
    node.attribute(name).ok_or_else(|| PolicyError::MissingAttribute {
        element: node.tag_name().name().to_string(),
        attr: name.to_string(),
    })
}

fn parse_one(node: roxmltree::Node) -> Result<Policy, PolicyError> {
    let mut matches: Vec<PolicyField> = Vec::new();
    let mut apply = Vec::new();
    for child in node.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "match" => {
                let field = PolicyField::parse(attr(child, "name")?, attr(child, "value")?)?;
                if matches.iter().any(|m| m.name() == field.name()) {
                    return Err(PolicyError::DuplicateField(field.name().to_string()));
                }
                matches.push(field);
            }
            "apply" => {
                for vp in child.children().filter(|n| n.is_element()) {
                    if vp.tag_name().name() != "virtualport" {
                        return Err(PolicyError::UnexpectedElement(vp.tag_name().name().to_string()));
                    }
                    apply.push(Apply {
                        port: attr(vp, "name")?.to_string(),
                        direction: attr(vp, "direction")?.parse()?,
                    });
                }
            }
            other => return Err(PolicyError::UnexpectedElement(other.to_string())),
        }
    }
    if matches.is_empty() {
        return Err(PolicyError::EmptyMatch);
    }
    if apply.is_empty() {
        return Err(PolicyError::EmptyApply);
    }
    Ok(Policy { matches, apply })
}

/// Parses a policy document.
pub fn parse_policy(xml: &str) -> Result<Vec<Policy>, PolicyError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| PolicyError::Xml(e.to_string()))?;
    let root = doc.root_element();
    match root.tag_name().name() {
        "policy" => Ok(vec![parse_one(root)?]),
        "policies" => root
            .children()
            .filter(|n| n.is_element())
            .map(|n| {
                if n.tag_name().name() == "policy" {
                    parse_one(n)
                } else {
                    Err(PolicyError::UnexpectedElement(n.tag_name().name().to_string()))
                }
            })
            .collect(),
        other => Err(PolicyError::UnexpectedElement(other.to_string())),
    }
}

/// Forwarder table a service's policies live in.
pub fn forwarder_table(kind: ServiceKind) -> TableId {
    match kind {
        ServiceKind::MplsVpn => TableId::MplsVpnForwarder,
        ServiceKind::Vpls => TableId::VplsForwarder,
    }
}

/// Compiles policies into drop rules, one per (policy, apply entry), on the
/// PE hosting the named port. Policy `i` carries cookie `pol:<service>.<i>`.
pub fn compile_policies(policies: &[Policy], service: &Service) -> Result<PeRules, PolicyError> {
    let table = forwarder_table(service.kind());
    let mut out = PeRules::new();
    for (index, policy) in policies.iter().enumerate() {
        let cookie = Cookie::Policy {
            service: service.id.0,
            index: index as u32,
        };
        for a in &policy.apply {
            let vport = service
                .port(&a.port)
                .ok_or_else(|| PolicyError::PortNotInService(a.port.clone()))?;
            let mut m = MatchSet::any().label(service.delimiter);
            if a.direction == Direction::In {
                m = m.in_port(vport.port.port_no);
            }
            for f in &policy.matches {
                m = f.apply_to(m);
            }
            out.entry(vport.port.pe).or_default().push(FlowRule::new(
                table,
                priority::POLICY,
                m,
                vec![Instruction::Drop],
                cookie,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"<policy>
	<match name="destinationIP"
		value="192.168.10.1" />
	<apply>
		<virtualport name="vp1" direction="in"/>
		<virtualport name="vp2" direction="in"/>
	</apply>
</policy>"#;

    #[test]
    fn parses_restriction_example() {
        let p = parse_policy(EXAMPLE).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].matches, vec![PolicyField::DestinationIp("192.168.10.1/32".parse().unwrap())]);
        assert_eq!(
            p[0].apply,
            vec![
                Apply {
                    port: "vp1".into(),
                    direction: Direction::In
                },
                Apply {
                    port: "vp2".into(),
                    direction: Direction::In
                },
            ]
        );
        assert_eq!(parse_policy(&p[0].to_xml()).unwrap(), p);
    }

    #[test]
    fn parses_policy_lists() {
        let doc = r#"<policies>
            <policy><match name="destinationPort" value="21"/><match name="ipProtocol" value="tcp"/>
              <apply><virtualport name="vp3" direction="out"/></apply></policy>
            <policy><match name="vlan" value="7"/><apply><virtualport name="vp1" direction="in"/></apply></policy>
          </policies>"#;
        let p = parse_policy(doc).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].matches[1], PolicyField::IpProtocol(6));
        assert_eq!(p[0].apply[0].direction, Direction::Out);
        assert_eq!(parse_policy(&policies_to_xml(&p)).unwrap(), p);
    }

    #[test]
    fn rejects_bad_policies() {
        let no_apply = r#"<policy><match name="vlan" value="1"/></policy>"#;
        assert_eq!(parse_policy(no_apply), Err(PolicyError::EmptyApply));
        let empty_apply = r#"<policy><match name="vlan" value="1"/><apply/></policy>"#;
        assert_eq!(parse_policy(empty_apply), Err(PolicyError::EmptyApply));
        let unknown = r#"<policy><match name="ttl" value="1"/><apply><virtualport name="a" direction="in"/></apply></policy>"#;
        assert_eq!(parse_policy(unknown), Err(PolicyError::UnknownField("ttl".into())));
        let bad_ip = r#"<policy><match name="sourceIP" value="1.2.3"/><apply><virtualport name="a" direction="in"/></apply></policy>"#;
        assert!(matches!(parse_policy(bad_ip), Err(PolicyError::BadValue { .. })));
        let bad_dir = r#"<policy><match name="vlan" value="1"/><apply><virtualport name="a" direction="up"/></apply></policy>"#;
        assert_eq!(parse_policy(bad_dir), Err(PolicyError::BadDirection("up".into())));
        assert!(matches!(parse_policy("<policy>"), Err(PolicyError::Xml(_))));
        let no_match = r#"<policy><apply><virtualport name="a" direction="in"/></apply></policy>"#;
        assert_eq!(parse_policy(no_match), Err(PolicyError::EmptyMatch));
    }

    #[test]
    fn all_seven_fields_parse() {
        let values = [
            "10.0.0.0/8",
            "10.0.0.1",
            "00:11:22:33:44:55",
            "00:11:22:33:44:66",
            "12",
            "17",
            "21",
        ];
        for (name, value) in PolicyField::NAMES.iter().zip(values) {
            let f = PolicyField::parse(name, value).unwrap();
            assert_eq!(f.name(), *name);
        }
    }
}
