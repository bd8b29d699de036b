use serde_json::Value;
use tpmamba_wasm::{flops_table_impl, plane_order_impl, scan_impulse_impl};

#[test]
fn flops_table_has_every_kind() {
    let v: Value = serde_json::from_str(&flops_table_impl(96, 96, 96, 768, 96).unwrap()).unwrap();
    assert_eq!(v["kinds"].as_array().unwrap().len(), 4);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["depth"].as_u64().unwrap()).collect::<Vec<_>>(), [24, 48, 96, 192, 384]);
    assert!(flops_table_impl(0, 96, 96, 768, 96).is_err());
}

#[test]
fn plane_orders_are_permutations() {
    // D=2, H=3, W=4: hw walks row-major; dw runs one (z, x) plane per row y;
    // dh runs one (z, y) plane per column x.
    assert_eq!(plane_order_impl(2, 3, 4, "hw").unwrap(), (0..24).collect::<Vec<u32>>());
    assert_eq!(&plane_order_impl(2, 3, 4, "dw").unwrap()[..8], &[0, 1, 2, 3, 12, 13, 14, 15]);
    assert_eq!(&plane_order_impl(2, 3, 4, "dh").unwrap()[..6], &[0, 4, 8, 12, 16, 20]);
    for p in ["hw", "dw", "dh", "volume"] {
        let mut o = plane_order_impl(2, 3, 4, p).unwrap();
        o.sort_unstable();
        assert_eq!(o, (0..24).collect::<Vec<u32>>());
    }
    assert!(plane_order_impl(2, 3, 4, "xy").is_err());
}

#[test]
fn impulse_decays_geometrically() {
    let v: Value = serde_json::from_str(&scan_impulse_impl(5, 0.5, -1.0).unwrap()).unwrap();
    let fast: Vec<f64> = v["fast"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(fast, v["oracle"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>());
    for t in 1..5 {
        assert!((fast[t] / fast[t - 1] - (-0.5f64).exp()).abs() < 1e-12);
    }
    assert!(scan_impulse_impl(5, 0.5, 1.0).is_err());
}
