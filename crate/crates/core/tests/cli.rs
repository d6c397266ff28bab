// SPDX-License-Identifier: Apache-2.0
// Copyright The sdvpn Authors

//! Drives the `sdvpn` binary through a provisioning session.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use sdvpn::packet::MacAddr;

fn sdvpn(state: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdvpn"))
        .arg("--state")
        .arg(state)
        .args(args)
        .output()
        .expect("spawn sdvpn")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn session_matches_library_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let inst = micro_instance();
    let topo = inst.topology();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    fs::write(p("topo.xml"), inst.topology_xml()).unwrap();
    ok(sdvpn(&state, &["init", "--topology", &p("topo.xml")]));
    assert!(!sdvpn(&state, &["init", "--topology", &p("topo.xml")]).status.success());

    let keys = ok(sdvpn(&state, &["keys"]));
    assert_eq!(keys.lines().count(), 6);
    for (i, svc) in inst.services.iter().enumerate() {
        for port in &svc.ports {
            ok(sdvpn(&state, &["grant", "--customer", svc.customer, "--key", &inst.key(&topo, port.pe, port.port)]));
        }
        fs::write(p(&format!("spec{i}.xml")), inst.spec_xml(&topo, svc)).unwrap();
        fs::write(p(&format!("pol{i}.xml")), Instance::policy_xml(svc)).unwrap();
        let out = ok(sdvpn(
            &state,
            &["provision", "--customer", svc.customer, "--spec", &p(&format!("spec{i}.xml")), "--policies", &p(&format!("pol{i}.xml"))],
        ));
        assert!(out.starts_with("provisioned service"), "{out}");
    }
    for (pe, dump) in oracle_dumps(&inst) {
        assert_eq!(ok(sdvpn(&state, &["dump-rules", "--pe", &pe.to_string()])), dump);
    }

    let pkt = frame(host(0xa), MacAddr::BROADCAST, 2);
    fs::write(p("pkt.json"), serde_json::to_string(&pkt).unwrap()).unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(sdvpn(&state, &["inject", "--pe", "0", "--port", "3", "--packet", &p("pkt.json")]))).unwrap();
    assert_eq!(out["delivered"].as_array().unwrap().len(), 2);

    let stats: serde_json::Value = serde_json::from_str(&ok(sdvpn(&state, &["stats"]))).unwrap();
    assert_eq!(stats["services"].as_array().unwrap().len(), 2);
    let c = &stats["counters"];
    let installs: u64 = ["infra_installs", "provision_installs", "reconfigure_installs", "learn_installs"]
        .iter()
        .map(|k| c[*k].as_u64().unwrap())
        .sum();
    let live = installs
        - stats["counters"]["removals"].as_u64().unwrap()
        - stats["counters"]["expiries"].as_u64().unwrap();
    let total: u64 = stats["per_pe"].as_array().unwrap().iter().map(|p| p["total"].as_u64().unwrap()).sum();
    assert_eq!(live, total);

    ok(sdvpn(&state, &["deprovision", "--service", "1"]));
    assert!(!sdvpn(&state, &["deprovision", "--service", "1"]).status.success());
}

#[test]
fn foreign_key_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let inst = micro_instance();
    let topo = inst.topology();
    let path = dir.path().join("topo.xml");
    fs::write(&path, inst.topology_xml()).unwrap();
    ok(sdvpn(&state, &["init", "--topology", path.to_str().unwrap()]));
    let key = inst.key(&topo, 0, 1);
    ok(sdvpn(&state, &["grant", "--customer", "a", "--key", &key]));
    let out = sdvpn(&state, &["grant", "--customer", "b", "--key", &key]);
    assert!(!out.status.success());
    let journal: serde_json::Value = serde_json::from_str(&fs::read_to_string(&state).unwrap()).unwrap();
    assert_eq!(journal["ops"].as_array().unwrap().len(), 1);
}

#[test]
fn bench_writes_one_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("matrix.csv");
    let out = sdvpn(&dir.path().join("unused.json"), &["bench", "--scales", "1", "--scenarios", "1,2", "--out", csv.to_str().unwrap(), "--rule-dump", dir.path().to_str().unwrap()]);
    ok(out);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("scale1-scenario1-pe0.rules").exists());
}

#[test]
fn sample_data_walkthrough() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let f = |name: &str| data.join(name).to_string_lossy().into_owned();
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    ok(sdvpn(&state, &["init", "--topology", &f("topology.xml")]));
    let keys = ok(sdvpn(&state, &["keys"]));
    let key = |pe: &str, port: &str| {
        keys.lines()
            .map(|l| l.split('\t').collect::<Vec<_>>())
            .find(|c| c[0] == pe && c[1] == port)
            .map(|c| c[2].to_string())
            .unwrap()
    };
    for (pe, port) in [("pe0", "1"), ("pe1", "1"), ("pe1", "2"), ("pe2", "1")] {
        ok(sdvpn(&state, &["grant", "--customer", "acme", "--key", &key(pe, port)]));
    }
    for (pe, port) in [("pe0", "2"), ("pe1", "3"), ("pe2", "2")] {
        ok(sdvpn(&state, &["grant", "--customer", "globex", "--key", &key(pe, port)]));
    }
    ok(sdvpn(&state, &["provision", "--customer", "acme", "--spec", &f("vpn.xml"), "--policies", &f("vpn-policies.xml")]));
    ok(sdvpn(&state, &["provision", "--customer", "globex", "--spec", &f("lan.xml")]));
    let deliveries = |packet: &str, pe: &str, port: &str| {
        let out: serde_json::Value = serde_json::from_str(&ok(sdvpn(&state, &["inject", "--pe", pe, "--port", port, "--packet", &f(packet)]))).unwrap();
        out["delivered"].as_array().unwrap().len()
    };
    assert_eq!(deliveries("web.json", "1", "2"), 1);
    assert_eq!(deliveries("ftp.json", "1", "2"), 0);
    assert_eq!(deliveries("broadcast.json", "0", "2"), 2);
}
