//! Browser demo. Each exported function takes plain numbers and returns a
//! JSON string; the `*_json` functions hold the logic and run natively too.

use serde_json::{json, Value};
use taxocascade::data::{generate_synthetic, SyntheticSpec, TaxonomyShape};
use taxocascade::evaluation::{DistanceStats, MAX_DISTANCE};
use taxocascade::inference::{decode_beam, decode_greedy, decode_levelwise, AncestorFeed, Prediction};
use taxocascade::model::{masked_softmax, CascadeModel, ModelConfig, Variant};
use taxocascade::numerics::{seeded_rng, Matrix};
use taxocascade::taxonomy::LabelPath;
use taxocascade::{Level, TaxonomyTree};
use wasm_bindgen::prelude::*;

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// Probabilities over the unmasked logits; `mask[i] != 0` keeps entry i.
pub fn masked_softmax_json(logits: &[f64], mask: &[u8]) -> Result<Value, String> {
    if logits.len() != mask.len() {
        return Err(format!("{} logits but {} mask entries", logits.len(), mask.len()));
    }
    let bits: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
    let probs = masked_softmax(logits, &bits).map_err(|e| e.to_string())?;
    let sum: f64 = probs.iter().sum();
    let argmax = (0..probs.len()).filter(|&i| bits[i]).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)));
    Ok(json!({ "probs": probs, "sum": sum, "argmax": argmax }))
}

#[wasm_bindgen]
pub fn masked_softmax_explorer(logits: &[f64], mask: &[u8]) -> Result<String, JsError> {
    to_js(masked_softmax_json(logits, mask))
}

fn toy_tree(seed: u32, classes: usize) -> Result<(TaxonomyTree, Matrix, Vec<LabelPath>), String> {
    let spec = SyntheticSpec {
        shape: TaxonomyShape::Branching { classes, children: [(1, 3), (1, 2), (1, 2), (1, 3)] },
        feature_dim: 8,
        samples_per_species: (1, 1),
        seed: seed.into(),
        ..SyntheticSpec::default()
    };
    let (tree, ds) = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    Ok((tree, ds.features(), ds.labels()))
}

fn describe(tree: &TaxonomyTree, p: &Prediction) -> Value {
    let names: Vec<Value> = Level::ALL
        .iter()
        .map(|&l| p.label(l).map(|i| tree.name(l, i).unwrap().to_owned()).into())
        .collect();
    json!({ "strategy": p.strategy.as_str(), "path": names, "valid": p.path_valid, "score": p.path_score.exp() })
}

/// Random toy taxonomy and untrained H-COFGS model; decodes the centre of
/// record `sample` with every decoder. `sharpness` scales every weight, so
/// larger values give more confident heads.
pub fn compare_decoders_json(seed: u32, classes: usize, sample: usize, sharpness: f64, beam_width: usize) -> Result<Value, String> {
    let (tree, features, labels) = toy_tree(seed, classes.clamp(1, 4))?;
    let cfg = ModelConfig { variant: Variant::HCofgs, feature_dim: 8, adapter_dim: None, width_divisor: 32 };
    let mut model = CascadeModel::new(cfg, &tree, &mut seeded_rng(seed.into())).map_err(|e| e.to_string())?;
    for layer in model.layers_mut() {
        for w in layer.weight.values_mut() {
            *w *= sharpness;
        }
    }
    let row = sample % features.rows();
    let x = Matrix::from_rows(&[features.row(row).to_vec()]).map_err(|e| e.to_string())?;
    let err = |e: taxocascade::Error| e.to_string();
    let preds = [
        decode_greedy(&model, &tree, &x).map_err(err)?.remove(0),
        decode_levelwise(&model, &tree, &x, AncestorFeed::Unmasked).map_err(err)?.remove(0),
        decode_beam(&model, &tree, &x, beam_width.max(1)).map_err(err)?.remove(0),
    ];
    let truth: Vec<&str> = Level::ALL.iter().map(|&l| tree.name(l, labels[row].get(l)).unwrap()).collect();
    let counts: Vec<usize> = Level::ALL.iter().map(|&l| tree.count(l)).collect();
    Ok(json!({
        "counts": counts,
        "truth": truth,
        "beam_width": beam_width.max(1),
        "decoders": preds.iter().map(|p| describe(&tree, p)).collect::<Vec<_>>(),
        "taxonomy": tree.to_text(),
    }))
}

#[wasm_bindgen]
pub fn compare_decoders(seed: u32, classes: usize, sample: usize, sharpness: f64, beam_width: usize) -> Result<String, JsError> {
    to_js(compare_decoders_json(seed, classes, sample, sharpness, beam_width))
}

fn histogram(counts: &[u32]) -> Result<[usize; MAX_DISTANCE + 1], String> {
    let v: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    v.try_into().map_err(|_| format!("expected {} counts (distance 0 to {MAX_DISTANCE})", MAX_DISTANCE + 1))
}

/// Distance statistics from counts at distance 0..=5, with the severity
/// reduction against `baseline` when it is non-empty.
pub fn distance_stats_json(counts: &[u32], baseline: &[u32]) -> Result<Value, String> {
    let stats = DistanceStats::from_histogram(histogram(counts)?).map_err(|e| e.to_string())?;
    let reduction = if baseline.is_empty() {
        None
    } else {
        let base = DistanceStats::from_histogram(histogram(baseline)?).map_err(|e| e.to_string())?;
        stats.severity_reduction(&base)
    };
    Ok(json!({
        "n": stats.n,
        "errors": stats.errors,
        "mean_all": stats.mean_all,
        "mean_errors": stats.mean_errors,
        "std_errors": stats.std_errors,
        "error_shares": stats.error_shares,
        "severity_reduction": reduction,
    }))
}

#[wasm_bindgen]
pub fn distance_stats(counts: &[u32], baseline: &[u32]) -> Result<String, JsError> {
    to_js(distance_stats_json(counts, baseline))
}
