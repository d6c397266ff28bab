// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Software-defined MPLS VPN and VPLS provisioning over an emulated
//! multi-table data plane.

pub mod dataplane;
pub mod harness;
pub mod labels;
pub mod packet;
pub mod policy;
pub mod runtime;
pub mod services;
pub mod topology;
