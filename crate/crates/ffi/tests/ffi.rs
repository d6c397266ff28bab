// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sdvpn_ffi::*;

const TOPO: &str = r#"<topology seed="5"><pe id="0" customer-ports="2"/><pe id="1" customer-ports="2"/></topology>"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = sdvpn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    sdvpn_string_free(p);
    s
}

fn new_runtime() -> *mut SdvpnRuntime {
    let mut rt = ptr::null_mut();
    let st = unsafe { sdvpn_runtime_new(c(TOPO).as_ptr(), 0, &mut rt) };
    assert_eq!(st, SdvpnStatus::Ok);
    rt
}

fn key(pe: u32, port: u16) -> String {
    let topo = sdvpn::topology::load_topology(TOPO).unwrap();
    topo.port_key(sdvpn::topology::PeId(pe), sdvpn::topology::PortNo(port))
        .unwrap()
        .as_str()
        .to_string()
}

#[test]
fn provision_inject_dump_roundtrip() {
    let rt = new_runtime();
    let (k1, k2) = (key(0, 1), key(1, 1));
    unsafe {
        assert_eq!(sdvpn_grant_key(rt, c("acme").as_ptr(), c(&k1).as_ptr()), SdvpnStatus::Ok);
        assert_eq!(sdvpn_grant_key(rt, c("acme").as_ptr(), c(&k2).as_ptr()), SdvpnStatus::Ok);
        assert_eq!(sdvpn_grant_key(rt, c("other").as_ptr(), c(&k2).as_ptr()), SdvpnStatus::Rejected);
        assert!(last_error().contains("already belongs"));

        let spec = format!(r#"<service kind="vpls" name="lan"><vport name="a" key="{k1}"/><vport name="b" key="{k2}"/></service>"#);
        let mut id = u32::MAX;
        assert_eq!(
            sdvpn_provision(rt, c("acme").as_ptr(), c(&spec).as_ptr(), ptr::null(), &mut id),
            SdvpnStatus::Ok
        );
        assert_eq!(id, 0);

        let mut before = 0usize;
        assert_eq!(sdvpn_rule_count(rt, 1, &mut before), SdvpnStatus::Ok);
        let pkt = r#"{"src_mac":"02:00:00:00:00:01","dst_mac":"ff:ff:ff:ff:ff:ff","vlan":3,"kind":{"type":"opaque"}}"#;
        let mut out = ptr::null_mut();
        assert_eq!(sdvpn_inject_json(rt, 0, 1, c(pkt).as_ptr(), &mut out), SdvpnStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(report["delivered"].as_array().unwrap().len(), 1);
        assert_eq!(report["delivered"][0]["pe"], 1);
        assert_eq!(report["controller_events"][0]["reason"], "mac_learn");

        let mut dump = ptr::null_mut();
        assert_eq!(sdvpn_dump_rules(rt, 1, &mut dump), SdvpnStatus::Ok);
        let dump = take(dump);
        assert!(dump.contains("dst_mac=02:00:00:00:00:01"));
        let mut after = 0usize;
        sdvpn_rule_count(rt, 1, &mut after);
        assert_eq!(after, before + 1);

        let mut expired = 0usize;
        assert_eq!(sdvpn_advance_to(rt, 61_000, &mut expired), SdvpnStatus::Ok);
        // Learner rule on PE 0 plus a unicast rule on each of the two PEs.
        assert_eq!(expired, 3);
        assert_eq!(sdvpn_deprovision(rt, id), SdvpnStatus::Ok);
        assert_eq!(sdvpn_deprovision(rt, id), SdvpnStatus::NotFound);
        sdvpn_runtime_free(rt);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    unsafe {
        let mut rt = ptr::null_mut();
        assert_eq!(sdvpn_runtime_new(c("<nope/>").as_ptr(), 0, &mut rt), SdvpnStatus::Parse);
        assert!(rt.is_null());
        assert_eq!(sdvpn_runtime_new(ptr::null(), 0, &mut rt), SdvpnStatus::NullArgument);
        let rt = new_runtime();
        let mut id = 0;
        assert_eq!(
            sdvpn_provision(rt, c("x").as_ptr(), c("<service/>").as_ptr(), ptr::null(), &mut id),
            SdvpnStatus::Parse
        );
        let mut out = ptr::null_mut();
        assert_eq!(sdvpn_inject_json(rt, 0, 9, c("{}").as_ptr(), &mut out), SdvpnStatus::Parse);
        let pkt = r#"{"src_mac":"02:00:00:00:00:01","dst_mac":"ff:ff:ff:ff:ff:ff","kind":{"type":"opaque"}}"#;
        assert_eq!(sdvpn_inject_json(rt, 0, 9, c(pkt).as_ptr(), &mut out), SdvpnStatus::NotFound);
        assert_eq!(sdvpn_dump_rules(rt, 7, &mut out), SdvpnStatus::NotFound);
        assert_eq!(sdvpn_grant_key(ptr::null_mut(), c("a").as_ptr(), c("b").as_ptr()), SdvpnStatus::NullArgument);
        sdvpn_runtime_free(rt);
        sdvpn_runtime_free(ptr::null_mut());
        sdvpn_string_free(ptr::null_mut());
    }
}

#[test]
fn foreign_key_is_rejected() {
    let rt = new_runtime();
    let (k1, k2) = (key(0, 1), key(1, 1));
    unsafe {
        sdvpn_grant_key(rt, c("a").as_ptr(), c(&k1).as_ptr());
        sdvpn_grant_key(rt, c("a").as_ptr(), c(&k2).as_ptr());
        let spec = format!(r#"<service kind="vpls" name="x"><vport name="a" key="{k1}"/></service>"#);
        let mut id = 0;
        assert_eq!(
            sdvpn_provision(rt, c("b").as_ptr(), c(&spec).as_ptr(), ptr::null(), &mut id),
            SdvpnStatus::Rejected
        );
        sdvpn_runtime_free(rt);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sdvpn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "sdvpn_runtime_new",
        "sdvpn_runtime_free",
        "sdvpn_provision",
        "sdvpn_inject_json",
        "sdvpn_last_error",
        "SDVPN_STATUS_CAPACITY",
        "typedef struct SdvpnRuntime SdvpnRuntime",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
