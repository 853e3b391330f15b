use std::path::PathBuf;

use edgemoe::scenario::{compare, Scenario};
use edgemoe::Error;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn shipped_scenarios_round_trip() {
    for name in ["minimal.json", "output_sweep_single.json", "output_sweep_two.json", "input_sweep_two.json", "input_sweep_three.json"] {
        let a = Scenario::load(&shipped(name)).unwrap();
        let dumped = a.to_json().unwrap();
        let mut b = Scenario::from_json(&dumped).unwrap();
        b.base_dir = a.base_dir.clone();
        assert_eq!(a, b, "{name}");
        assert_eq!(dumped, b.to_json().unwrap());
    }
}

#[test]
fn calibration_topology_keeps_the_stated_bandwidths() {
    let s = Scenario::load(&shipped("output_sweep_two.json")).unwrap();
    for link in &s.topology.links {
        assert_eq!(link.bandwidth, 1e9);
        assert_eq!(s.topology.bus_to_link_ratio(1, link), Some(64.0));
    }
    let params = s.model.total_bytes() as f64 / 2.0;
    assert!((params / 14.3e9 - 1.0).abs() < 0.01, "{params}");
}

#[test]
fn unknown_fields_are_rejected_with_their_path() {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(shipped("minimal.json")).unwrap()).unwrap();
    v["workload"]["zipf"] = serde_json::json!(1.0);
    match Scenario::from_json(&serde_json::to_vec(&v).unwrap()) {
        Err(Error::Config { path, .. }) => assert!(path.starts_with("workload"), "{path}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_model_is_a_config_error() {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(shipped("minimal.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("model");
    let err = Scenario::from_json(&serde_json::to_vec(&v).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
    assert!(err.to_string().contains("model"), "{err}");
}

#[test]
fn wrong_schema_version_is_rejected() {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(shipped("minimal.json")).unwrap()).unwrap();
    v["schema_version"] = serde_json::json!(99);
    assert!(Scenario::from_json(&serde_json::to_vec(&v).unwrap()).is_err());
}

#[test]
fn fixed_placement_file_is_loaded_and_checked() {
    let dir = std::env::temp_dir().join(format!("edgemoe-fixed-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let s = Scenario::load(&shipped("minimal.json")).unwrap();
    let planned = s.run(3).unwrap();
    std::fs::write(dir.join("placement.json"), serde_json::to_vec(&planned.deployment.placement.to_json_value()).unwrap()).unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(shipped("minimal.json")).unwrap()).unwrap();
    v["placement"] = serde_json::json!({"mode": "fixed", "file": "placement.json"});
    std::fs::write(dir.join("fixed.json"), serde_json::to_vec(&v).unwrap()).unwrap();
    let fixed = Scenario::load(&dir.join("fixed.json")).unwrap();
    let out = fixed.run(3).unwrap();
    assert_eq!(out.deployment.placement, planned.deployment.placement);
    assert_eq!(out.report.buckets, planned.report.buckets);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn compare_needs_matching_buckets() {
    let a = Scenario::load(&shipped("minimal.json")).unwrap().run(1).unwrap().report;
    let rows = compare(&a, &a).unwrap();
    assert!(rows.iter().all(|r| (r.latency_ratio - 1.0).abs() < 1e-12));
    let mut b = a.clone();
    b.buckets[0].input += 1;
    assert!(matches!(compare(&a, &b), Err(Error::Value(_))));
}
