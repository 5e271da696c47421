//! Regression guard for `norm / (κ·[w]_{A₂})` across a fixed corpus.
//! Set `DYADIC_LAB_WRITE_BASELINE=1` to regenerate the committed baseline.

use std::path::PathBuf;

use dyadic_lab::grid::FiniteModel;
use dyadic_lab::shift::{haar_multiplier_uniform, petermichl_uniform, random_shift, ComplexityType, HaarShift};
use dyadic_lab::verify::{linear_bound_constant, weighted_norm};
use dyadic_lab::weights::{a2_constant, cascade_weight, power_weight, random_a2_weight, Weight};
use serde_json::json;

const SLACK: f64 = 1.05;

fn baseline_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/linear_bound_baseline.json")
}

fn corpus() -> Vec<(String, HaarShift, Weight)> {
    let mut out = Vec::new();
    for model in [FiniteModel::new(1, 10).unwrap(), FiniteModel::new(2, 5).unwrap()] {
        let mut shifts = vec![haar_multiplier_uniform(model, 1.0).unwrap()];
        if model.dim() == 1 {
            shifts.push(petermichl_uniform(model, 1.0).unwrap());
        }
        shifts.push(random_shift(ComplexityType::new(1, 2), 0, 11, model).unwrap());
        shifts.push(random_shift(ComplexityType::new(2, 2), 1, 12, model).unwrap());
        let weights = [
            power_weight(-0.9, model).unwrap(),
            power_weight(-0.5, model).unwrap(),
            power_weight(0.5, model).unwrap(),
            power_weight(0.9, model).unwrap(),
            cascade_weight(0.4, 3, model).unwrap(),
            random_a2_weight(10.0, 4, model).unwrap(),
            random_a2_weight(40.0, 5, model).unwrap(),
        ];
        for s in &shifts {
            for (k, w) in weights.iter().enumerate() {
                let id = format!("d{}N{}/{}/w{k}", model.dim(), model.depth(), s.id());
                out.push((id, s.clone(), w.clone()));
            }
        }
    }
    out
}

#[test]
fn linear_bound_constant_stays_within_baseline() {
    let rows: Vec<(String, f64)> = corpus()
        .into_iter()
        .map(|(id, s, w)| {
            let n = weighted_norm(&s, &w).unwrap().value;
            (id, linear_bound_constant(n, s.kappa(), a2_constant(&w).constant))
        })
        .collect();
    let max = rows.iter().fold(0.0f64, |m, r| m.max(r.1));
    assert!(max.is_finite() && max > 0.0);
    if std::env::var_os("DYADIC_LAB_WRITE_BASELINE").is_some() {
        let doc = json!({
            "max": max,
            "instances": rows.iter().map(|(id, c)| json!({ "id": id, "constant": c })).collect::<Vec<_>>(),
        });
        std::fs::write(baseline_path(), serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(baseline_path()).expect("baseline file");
    let baseline: serde_json::Value = serde_json::from_str(&text).unwrap();
    let limit = SLACK * baseline["max"].as_f64().unwrap();
    for (id, c) in &rows {
        assert!(*c <= limit, "{id}: constant {c} exceeds {limit}");
    }
}
