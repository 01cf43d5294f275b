use serde_json::Value;
use sfada_demo::{loss_readout, mmd_selection, sinkhorn_plan};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn sinkhorn_plan_has_uniform_marginals_and_sharpens_with_small_eps() {
    let loose = parse(sinkhorn_plan(1, 6, 4, 1.0));
    let tight = parse(sinkhorn_plan(1, 6, 4, 0.01));
    for v in [&loose, &tight] {
        assert!(v["violation"].as_f64().unwrap() < 1e-6, "{v}");
        let plan: Vec<Vec<f64>> = serde_json::from_value(v["plan"].clone()).unwrap();
        for row in &plan {
            assert!((row.iter().sum::<f64>() - 1.0 / 6.0).abs() < 1e-6);
        }
    }
    assert!(tight["entropy"].as_f64() < loose["entropy"].as_f64());
    assert!(tight["transport_cost"].as_f64() <= loose["transport_cost"].as_f64());
    assert!(parse(sinkhorn_plan(1, 0, 4, 0.1))["error"].is_string());
}

#[test]
fn mmd_selection_beats_random_and_covers_clusters() {
    let v = parse(mmd_selection(3, 90, 3, 3, "linear"));
    let sel: Vec<usize> = serde_json::from_value(v["selected"].clone()).unwrap();
    assert_eq!(sel.len(), 3);
    let trace: Vec<f64> = serde_json::from_value(v["mmd_trace"].clone()).unwrap();
    assert_eq!(trace.len(), 3);
    let v = parse(mmd_selection(3, 90, 3, 6, "rbf"));
    let sel: Vec<usize> = serde_json::from_value(v["selected"].clone()).unwrap();
    let mut clusters: Vec<usize> = sel.iter().map(|i| i % 3).collect();
    clusters.sort_unstable();
    clusters.dedup();
    assert_eq!(clusters.len(), 3, "{sel:?}");
    let greedy = v["mmd_trace"].as_array().unwrap().last().unwrap().as_f64().unwrap();
    assert!(greedy <= v["random_mmd"].as_f64().unwrap());
    assert!(parse(mmd_selection(3, 10, 2, 2, "cubic"))["error"].is_string());
}

#[test]
fn loss_readout_reports_ordinal_geometry() {
    let v = parse(loss_readout(0, 2.5, 0.05, 0.1, 0.1));
    assert!(v["adjacent_cosine"].as_f64() > v["far_cosine"].as_f64());
    for key in ["chain_loss", "chain_loss_no_margin", "intra_consistency"] {
        let x = v[key].as_f64().unwrap();
        assert!(x.is_finite() && x >= 0.0, "{key} = {x}");
    }
    assert_eq!(v["labels"].as_array().unwrap().len(), 60);
    assert!(parse(loss_readout(0, 1.0, 0.1, 0.0, 0.1))["error"].is_string());
}
