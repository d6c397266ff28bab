// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! C ABI over the sdvpn controller runtime.
//!
//! Every function returns an [`SdvpnStatus`]; on failure the message is
//! available from [`sdvpn_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`sdvpn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use sdvpn::dataplane::{DataplaneError, SimTime};
use sdvpn::packet::Packet;
use sdvpn::policy::parse_policy;
use sdvpn::runtime::{Runtime, RuntimeConfig, RuntimeError};
use sdvpn::services::{parse_service_spec, CustomerId, ServiceId};
use sdvpn::topology::{load_topology, PeId, PortKey, PortNo};

/// Opaque controller handle.
pub struct SdvpnRuntime {
    inner: Runtime,
}

/// Result codes of every call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SdvpnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Topology, spec, policy or packet text failed to parse.
    Parse = 3,
    /// The request was refused (ownership, validation, conflicts).
    Rejected = 4,
    /// Unknown service, PE or port.
    NotFound = 5,
    /// A flow table is full; nothing was installed.
    Capacity = 6,
    /// Internal error; the handle should be freed.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: SdvpnStatus, msg: impl Into<String>) -> SdvpnStatus {
    set_error(msg);
    status
}

fn classify(e: &RuntimeError) -> SdvpnStatus {
    match e {
        RuntimeError::Dataplane(DataplaneError::TableFull { .. }) => SdvpnStatus::Capacity,
        RuntimeError::Dataplane(DataplaneError::UnknownPe(_)) | RuntimeError::UnknownService(_) => {
            SdvpnStatus::NotFound
        }
        RuntimeError::Topology(_) => SdvpnStatus::NotFound,
        _ => SdvpnStatus::Rejected,
    }
}

fn runtime_error(e: RuntimeError) -> SdvpnStatus {
    let status = classify(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> SdvpnStatus) -> SdvpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SdvpnStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SdvpnStatus> {
    if p.is_null() {
        return Err(fail(SdvpnStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SdvpnStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn rt_arg<'a>(rt: *mut SdvpnRuntime) -> Result<&'a mut Runtime, SdvpnStatus> {
    rt.as_mut()
        .map(|h| &mut h.inner)
        .ok_or_else(|| fail(SdvpnStatus::NullArgument, "runtime handle is null"))
}

fn give_string(s: String, out: *mut *mut c_char) -> SdvpnStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: caller checked `out` for null.
            unsafe { *out = c.into_raw() };
            SdvpnStatus::Ok
        }
        Err(_) => fail(SdvpnStatus::Internal, "output contains NUL"),
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Creates a runtime from topology XML. `idle_timeout_ms` of 0 selects the
/// default of 60 s.
///
/// # Safety
/// `topology_xml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_runtime_new(
    topology_xml: *const c_char,
    idle_timeout_ms: u64,
    out: *mut *mut SdvpnRuntime,
) -> SdvpnStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdvpnStatus::NullArgument, "out is null");
        }
        let xml = tri!(str_arg(topology_xml, "topology_xml"));
        let topo = match load_topology(xml) {
            Ok(t) => t,
            Err(e) => return fail(SdvpnStatus::Parse, e.to_string()),
        };
        let mut config = RuntimeConfig::default();
        if idle_timeout_ms > 0 {
            config.idle_timeout = Duration::from_millis(idle_timeout_ms);
        }
        match Runtime::new(topo, config) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SdvpnRuntime { inner }));
                SdvpnStatus::Ok
            }
            Err(e) => runtime_error(e),
        }
    })
}

/// Releases a runtime. Null is ignored.
///
/// # Safety
/// `rt` must come from `sdvpn_runtime_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_runtime_free(rt: *mut SdvpnRuntime) {
    if !rt.is_null() {
        drop(Box::from_raw(rt));
    }
}

/// Hands the key of a port to a customer.
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings / handles.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_grant_key(
    rt: *mut SdvpnRuntime,
    customer: *const c_char,
    key: *const c_char,
) -> SdvpnStatus {
    guard(|| {
        let rt = tri!(rt_arg(rt));
        let customer = CustomerId::new(tri!(str_arg(customer, "customer")));
        let key = PortKey(tri!(str_arg(key, "key")).to_string());
        match rt.grant_key(&customer, &key) {
            Ok(_) => SdvpnStatus::Ok,
            Err(e) => runtime_error(e),
        }
    })
}

/// Provisions a service. `policies_xml` may be null.
///
/// # Safety
/// Pointer arguments must be valid; `out_service` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_provision(
    rt: *mut SdvpnRuntime,
    customer: *const c_char,
    spec_xml: *const c_char,
    policies_xml: *const c_char,
    out_service: *mut u32,
) -> SdvpnStatus {
    guard(|| {
        if out_service.is_null() {
            return fail(SdvpnStatus::NullArgument, "out_service is null");
        }
        let rt = tri!(rt_arg(rt));
        let customer = CustomerId::new(tri!(str_arg(customer, "customer")));
        let spec = match parse_service_spec(tri!(str_arg(spec_xml, "spec_xml"))) {
            Ok(s) => s,
            Err(e) => return fail(SdvpnStatus::Parse, e.to_string()),
        };
        let policies = if policies_xml.is_null() {
            Vec::new()
        } else {
            match parse_policy(tri!(str_arg(policies_xml, "policies_xml"))) {
                Ok(p) => p,
                Err(e) => return fail(SdvpnStatus::Parse, e.to_string()),
            }
        };
        match rt.provision(&customer, &spec, &policies) {
            Ok(id) => {
                *out_service = id.0;
                SdvpnStatus::Ok
            }
            Err(e) => runtime_error(e),
        }
    })
}

/// Removes a service and all of its rules.
///
/// # Safety
/// `rt` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_deprovision(rt: *mut SdvpnRuntime, service: u32) -> SdvpnStatus {
    guard(|| {
        let rt = tri!(rt_arg(rt));
        match rt.deprovision(ServiceId(service)) {
            Ok(_) => SdvpnStatus::Ok,
            Err(e) => runtime_error(e),
        }
    })
}

/// Writes the rule dump of one PE to `*out` (free with `sdvpn_string_free`).
///
/// # Safety
/// `rt` must be a valid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_dump_rules(rt: *mut SdvpnRuntime, pe: u32, out: *mut *mut c_char) -> SdvpnStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdvpnStatus::NullArgument, "out is null");
        }
        let rt = tri!(rt_arg(rt));
        match rt.dump_rules(PeId(pe)) {
            Ok(s) => give_string(s, out),
            Err(e) => runtime_error(e),
        }
    })
}

/// Number of rules installed on one PE.
///
/// # Safety
/// `rt` must be a valid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_rule_count(rt: *mut SdvpnRuntime, pe: u32, out: *mut usize) -> SdvpnStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdvpnStatus::NullArgument, "out is null");
        }
        let rt = tri!(rt_arg(rt));
        match rt.table_stats(PeId(pe)) {
            Ok(s) => {
                *out = s.total();
                SdvpnStatus::Ok
            }
            Err(e) => runtime_error(e),
        }
    })
}

/// Advances simulated time (milliseconds; never moves backwards) and
/// expires idle rules. The number expired is written to `out_expired`
/// when it is not null.
///
/// # Safety
/// `rt` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_advance_to(rt: *mut SdvpnRuntime, now_ms: u64, out_expired: *mut usize) -> SdvpnStatus {
    guard(|| {
        let rt = tri!(rt_arg(rt));
        rt.set_time(SimTime(now_ms));
        let n = rt.expire_idle();
        if !out_expired.is_null() {
            *out_expired = n;
        }
        SdvpnStatus::Ok
    })
}

/// Injects a JSON-encoded packet on `(pe, port)` and writes a JSON report
/// (`delivered`, `controller_events`, `packet_outs`) to `*out`.
///
/// # Safety
/// Pointer arguments must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_inject_json(
    rt: *mut SdvpnRuntime,
    pe: u32,
    port: u16,
    packet_json: *const c_char,
    out: *mut *mut c_char,
) -> SdvpnStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdvpnStatus::NullArgument, "out is null");
        }
        let rt = tri!(rt_arg(rt));
        let packet: Packet = match serde_json::from_str(tri!(str_arg(packet_json, "packet_json"))) {
            Ok(p) => p,
            Err(e) => return fail(SdvpnStatus::Parse, e.to_string()),
        };
        let Some(ingress) = rt.topology().port(PeId(pe), PortNo(port)) else {
            return fail(SdvpnStatus::NotFound, format!("no port {port} on pe{pe}"));
        };
        let report = match rt.inject(ingress, packet) {
            Ok(r) => r,
            Err(e) => return runtime_error(e),
        };
        let port_json = |list: &[(sdvpn::topology::PhysicalPort, Packet)]| -> Vec<serde_json::Value> {
            list.iter()
                .map(|(p, pkt)| serde_json::json!({ "pe": p.pe.0, "port": p.port_no.0, "packet": pkt }))
                .collect()
        };
        let events: Vec<_> = report
            .transmission
            .controller_events
            .iter()
            .map(|(pe, ev)| serde_json::json!({ "pe": pe.0, "reason": ev.reason.name() }))
            .collect();
        let json = serde_json::json!({
            "delivered": port_json(report.delivered()),
            "controller_events": events,
            "packet_outs": port_json(&report.packet_outs),
        });
        give_string(json.to_string(), out)
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sdvpn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sdvpn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
