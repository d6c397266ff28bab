// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! MPLS label assignment: one outer label per destination PE, one inner
//! (service delimiter) label per service.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::packet::{Label, LABEL_SPACE};
use crate::services::ServiceId;
use crate::topology::{PeId, Topology};

/// First outer (PE) label.
pub const OUTER_BASE: u32 = 1000;
/// First inner (service delimiter) label; 0..=15 are reserved by MPLS.
pub const INNER_BASE: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("MPLS label space exhausted")]
    Exhausted,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelPlan {
    inner: BTreeMap<ServiceId, Label>,
    outer: BTreeMap<PeId, Label>,
    by_inner: HashMap<Label, ServiceId>,
    /// Next inner label to try.
    next_inner: u32,
}

impl LabelPlan {
    /// Plan with outer labels for every PE and no services yet.
    pub fn for_topology(topo: &Topology) -> Result<LabelPlan, LabelError> {
        let mut outer = BTreeMap::new();
        for (i, pe) in topo.pe_ids().enumerate() {
            let v = OUTER_BASE
                .checked_add(i as u32)
                .filter(|v| *v < LABEL_SPACE)
                .ok_or(LabelError::Exhausted)?;
            outer.insert(pe, Label(v));
        }
        Ok(LabelPlan {
            inner: BTreeMap::new(),
            outer,
            by_inner: HashMap::new(),
            next_inner: INNER_BASE,
        })
    }

    pub fn outer(&self, pe: PeId) -> Option<Label> {
        self.outer.get(&pe).copied()
    }

    pub fn inner(&self, service: ServiceId) -> Option<Label> {
        self.inner.get(&service).copied()
    }

    pub fn service_for(&self, inner: Label) -> Option<ServiceId> {
        self.by_inner.get(&inner).copied()
    }

    pub fn outer_labels(&self) -> impl Iterator<Item = (PeId, Label)> + '_ {
        self.outer.iter().map(|(p, l)| (*p, *l))
    }

    pub fn inner_labels(&self) -> impl Iterator<Item = (ServiceId, Label)> + '_ {
        self.inner.iter().map(|(s, l)| (*s, *l))
    }

    fn is_outer(&self, v: u32) -> bool {
        let n = self.outer.len() as u32;
        v >= OUTER_BASE && v < OUTER_BASE + n
    }

    /// Label the next call to [`assign_inner`](Self::assign_inner) would hand out.
    pub fn peek_inner(&self) -> Result<Label, LabelError> {
        let mut v = self.next_inner;
        while self.is_outer(v) {
            v += 1;
        }
        if v >= LABEL_SPACE {
            return Err(LabelError::Exhausted);
        }
        Ok(Label(v))
    }

    /// Assigns the next free delimiter label to `service`.
    pub fn assign_inner(&mut self, service: ServiceId) -> Result<Label, LabelError> {
        if let Some(l) = self.inner(service) {
            return Ok(l);
        }
        let l = self.peek_inner()?;
        self.next_inner = l.0 + 1;
        self.inner.insert(service, l);
        self.by_inner.insert(l, service);
        Ok(l)
    }

    /// Releases a service's delimiter. Labels are never reused.
    pub fn release_inner(&mut self, service: ServiceId) {
        if let Some(l) = self.inner.remove(&service) {
            self.by_inner.remove(&l);
        }
    }
}

/// Deterministic plan: sorted PE ids get consecutive outer labels from
/// 1000, sorted service ids get consecutive inner labels from 16 (skipping
/// the outer range).
pub fn allocate_labels(topo: &Topology, services: &[ServiceId]) -> Result<LabelPlan, LabelError> {
    let mut plan = LabelPlan::for_topology(topo)?;
    let mut sorted = services.to_vec();
    sorted.sort();
    sorted.dedup();
    for s in sorted {
        plan.assign_inner(s)?;
    }
    Ok(plan)
}
