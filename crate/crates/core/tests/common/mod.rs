//! Random instance builders, reference oracles and invariant checks shared
//! by the property suite and the acceptance runner. Every check takes a seed
//! and returns `Err(description)` on the first violation it finds.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use taxocascade::data::{
    allocate, generate_synthetic, stratified_split, Dataset, Split, SplitSpec, SyntheticSpec, TaxonomyShape,
};
use taxocascade::evaluation::{accuracy_and_weighted_f1, distance_stats, per_level_metrics, DistanceStats};
use taxocascade::inference::{decode_beam, decode_greedy, decode_levelwise, flat_lookup, AncestorFeed};
use taxocascade::model::{masked_softmax, CascadeModel, GreedyParents, MaskProvider, ModelConfig, Unmasked, Variant};
use taxocascade::numerics::{
    dropout, dropout_backward, gradient_check, relu, relu_backward, seeded_rng, softmax, AdamW, GradBlock, Linear,
    Matrix, Mode, RngState,
};
use taxocascade::taxonomy::{build_tree, filter_min_samples, CleanConfig, NamePath, DEPTH};
use taxocascade::training::{
    fit, focal_loss, focal_logit_grad, teacher_forcing_masks, FocalParams, LossWeights, TeacherForcing, TrainConfig,
};
use taxocascade::{Error, LabelPath, Level, TaxonomyTree};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub const KINK_MARGIN: f64 = 1e-3;

pub const RESOLVABLE: f64 = 1e-7;

pub const HIERARCHICAL: [Variant; 4] = [Variant::HCo, Variant::HCof, Variant::HCofg, Variant::HCofgs];

// ---------------------------------------------------------------------------
// Builders

/// Random taxonomy with 1-3 classes, 1-3 children per node, at most
/// `max_species` species.
pub fn random_tree(rng: &mut RngState, max_species: usize) -> TaxonomyTree {
    random_tree_with(rng, max_species, 1)
}

pub fn random_tree_with(rng: &mut RngState, max_species: usize, min_classes: usize) -> TaxonomyTree {
    loop {
        let (tree, _) = random_data(rng, 1, (1, 1), min_classes);
        if tree.count(Level::Species) <= max_species {
            return tree;
        }
    }
}

/// Random tree plus records drawn around species centres.
pub fn random_data(
    rng: &mut RngState,
    feature_dim: usize,
    per_species: (usize, usize),
    min_classes: usize,
) -> (TaxonomyTree, Dataset) {
    let classes = rng.random_range(min_classes.max(1)..=3);
    let children = std::array::from_fn(|_| (1, rng.random_range(1..=3)));
    let spec = SyntheticSpec {
        shape: TaxonomyShape::Branching { classes, children },
        feature_dim,
        samples_per_species: per_species,
        seed: rng.random(),
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).expect("valid synthetic spec")
}

/// Small randomly initialised model (hidden widths 16/8/4) with random
/// biases, rescaled by a random factor so output distributions vary in
/// sharpness.
pub fn random_model(rng: &mut RngState, tree: &TaxonomyTree, variant: Variant, feature_dim: usize) -> CascadeModel {
    let scale = rng.random_range(0.8..2.0);
    scaled_model(rng, tree, variant, feature_dim, scale)
}

pub fn scaled_model(
    rng: &mut RngState,
    tree: &TaxonomyTree,
    variant: Variant,
    feature_dim: usize,
    scale: f64,
) -> CascadeModel {
    let adapter_dim = rng.random_bool(0.5).then(|| rng.random_range(2..=6));
    let cfg = ModelConfig {
        variant,
        feature_dim,
        adapter_dim,
        width_divisor: 64,
    };
    let mut model = CascadeModel::new(cfg, tree, &mut seeded_rng(rng.random())).expect("model");
    for layer in model.layers_mut() {
        for w in layer.weight.values_mut() {
            *w *= scale;
        }
        // Zero biases behind a dead layer would put pre-activations exactly on the ReLU kink.
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5) * scale;
        }
    }
    model
}

pub fn random_features(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_paths(rng: &mut RngState, tree: &TaxonomyTree, n: usize) -> Vec<LabelPath> {
    (0..n)
        .map(|_| tree.ancestor_path(rng.random_range(0..tree.count(Level::Species))).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Oracles

/// LCA height by walking both species up one level at a time.
pub fn brute_distance(tree: &TaxonomyTree, a: usize, b: usize) -> u8 {
    let (mut x, mut y) = (a, b);
    let mut height = 0;
    for l in (0..DEPTH).rev() {
        if x == y {
            return height;
        }
        if l == 0 {
            break;
        }
        x = tree.parent(Level::ALL[l], x).unwrap().unwrap();
        y = tree.parent(Level::ALL[l], y).unwrap().unwrap();
        height += 1;
    }
    DEPTH as u8
}

/// Greatest subset in which every taxon at every filtered level keeps at
/// least `threshold` records, found by removing violators until stable.
pub fn brute_filter(paths: &[LabelPath], threshold: usize, levels: &[Level]) -> Vec<usize> {
    let mut alive = vec![true; paths.len()];
    loop {
        let mut changed = false;
        for &level in levels {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (p, _) in paths.iter().zip(&alive).filter(|(_, a)| **a) {
                *counts.entry(p.get(level)).or_default() += 1;
            }
            for (p, a) in paths.iter().zip(alive.iter_mut()) {
                if *a && counts[&p.get(level)] < threshold {
                    *a = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return (0..paths.len()).filter(|&i| alive[i]).collect();
        }
    }
}

/// Exact maximum-product path for one sample: every root-to-leaf prefix at
/// the model's deepest level is scored by a teacher-forced forward pass.
/// Ties go to the lexicographically smaller path.
pub fn exhaustive_best(model: &CascadeModel, tree: &TaxonomyTree, x: &[f64]) -> (Vec<usize>, f64) {
    let levels = model.levels();
    let deepest = *levels.last().unwrap();
    let mut candidates: BTreeMap<Vec<usize>, LabelPath> = BTreeMap::new();
    for s in 0..tree.count(Level::Species) {
        let path = tree.ancestor_path(s).unwrap();
        let prefix: Vec<usize> = levels.iter().map(|&l| path.get(l)).collect();
        candidates.entry(prefix).or_insert(path);
    }
    assert_eq!(candidates.len(), tree.count(deepest));
    let rows: Vec<Vec<f64>> = vec![x.to_vec(); candidates.len()];
    let paths: Vec<LabelPath> = candidates.values().copied().collect();
    let out = model
        .forward(tree, &Matrix::from_rows(&rows).unwrap(), &TeacherForcing { paths: &paths }, Mode::Eval, None)
        .unwrap();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (i, prefix) in candidates.keys().enumerate() {
        let score: f64 = prefix
            .iter()
            .enumerate()
            .map(|(pos, &label)| out.probs[pos].get(i, label).ln())
            .sum();
        // Keys iterate in lexicographic order, so only a strictly better score replaces.
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((prefix.clone(), score));
        }
    }
    best.unwrap()
}

/// Largest-remainder allocation written out independently: floor every
/// quota, then hand out the rest by descending remainder, earlier split
/// first on ties.
pub fn reference_allocation(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = vec![0, 1, 2];
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            rb.partial_cmp(&ra).unwrap()
        }
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

// ---------------------------------------------------------------------------
// Taxonomy

pub fn mask_partition(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 200);
    for l in 1..DEPTH {
        let (parent, child) = (Level::ALL[l - 1], Level::ALL[l]);
        let mut cover = vec![0usize; tree.count(child)];
        for p in 0..tree.count(parent) {
            let mask = ok(tree.child_mask(parent, p, child))?;
            ensure!(mask.bits.iter().any(|&b| b), "{parent} {p} has an empty child mask");
            for (c, &b) in mask.bits.iter().enumerate() {
                cover[c] += usize::from(b);
            }
        }
        ensure!(cover.iter().all(|&c| c == 1), "{child} masks are not a partition: {cover:?}");
    }
    Ok(())
}

pub fn distance_matches_brute_force(seed: u64, pairs: usize) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 80);
    let n = tree.count(Level::Species);
    for _ in 0..pairs {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let d = ok(tree.taxonomic_distance(a, b))?;
        ensure!(d == brute_distance(&tree, a, b), "d({a},{b}) = {d}, brute force {}", brute_distance(&tree, a, b));
    }
    Ok(())
}

pub fn distance_metric_axioms(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 80);
    let n = tree.count(Level::Species);
    let d = |a, b| tree.taxonomic_distance(a, b).unwrap();
    for _ in 0..200 {
        let (a, b, c) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
        ensure!(d(a, b) == d(b, a), "asymmetric at ({a},{b})");
        ensure!((d(a, b) == 0) == (a == b), "identity fails at ({a},{b})");
        ensure!(d(a, c) <= d(a, b) + d(b, c), "triangle fails at ({a},{b},{c})");
    }
    Ok(())
}

/// Clean name paths with incomplete, uncertain, padded and conflicting rows.
pub fn messy_records(rng: &mut RngState, tree: &TaxonomyTree) -> Vec<NamePath> {
    let mut records = Vec::new();
    for s in 0..tree.count(Level::Species) {
        for _ in 0..rng.random_range(1..=3) {
            let mut rec = tree.name_path(&tree.ancestor_path(s).unwrap()).unwrap();
            match rng.random_range(0..10) {
                0 => rec[rng.random_range(0..DEPTH)] = String::new(),
                1 => rec[DEPTH - 1] = format!("{} sp.", rec[DEPTH - 1]),
                2 => {
                    let l = rng.random_range(0..DEPTH - 1);
                    rec[l] = tree.names(Level::ALL[l]).choose(rng).unwrap().clone();
                }
                3 => rec[0] = format!("  {} ", rec[0]),
                _ => {}
            }
            records.push(rec);
        }
    }
    records.shuffle(rng);
    records
}

pub fn build_tree_idempotent(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let source = random_tree(&mut rng, 60);
    let records = messy_records(&mut rng, &source);
    let cfg = CleanConfig::default();
    let first = match build_tree(&records, &cfg) {
        Ok(c) => c,
        Err(Error::EmptyTaxonomy) => return Ok(()),
        Err(e) => return Err(e.to_string()),
    };
    let again = ok(build_tree(&first.records, &cfg))?;
    ensure!(again.tree == first.tree, "rebuilt tree differs");
    ensure!(again.tree.to_text() == first.tree.to_text(), "rebuilt tree text differs");
    ensure!(again.records == first.records, "rebuilt records differ");
    ensure!(again.report.conflicts_resolved == 0, "second build still resolved conflicts");
    Ok(())
}

pub fn filter_matches_fixed_point(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let (tree, ds) = random_data(&mut rng, 1, (1, 6), 1);
    let threshold = rng.random_range(1..=8);
    let mut levels: Vec<Level> = Level::ALL[1..].iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if levels.is_empty() {
        levels.push(Level::Species);
    }
    check_filter(&tree, &ds.labels(), threshold, &levels)
}

pub fn check_filter(tree: &TaxonomyTree, paths: &[LabelPath], threshold: usize, levels: &[Level]) -> Check {
    let expected = brute_filter(paths, threshold, levels);
    match filter_min_samples(tree, paths, threshold, levels) {
        Ok(out) => {
            ensure!(out.kept == expected, "kept {:?}, fixed point {:?}", out.kept, expected);
            for &level in levels {
                let mut counts = vec![0usize; out.tree.count(level)];
                for p in &out.paths {
                    counts[p.get(level)] += 1;
                }
                ensure!(counts.iter().all(|&c| c >= threshold), "{level} below threshold after filtering");
            }
            for (&i, p) in out.kept.iter().zip(&out.paths) {
                ensure!(
                    tree.name_path(&paths[i]).unwrap() == out.tree.name_path(p).unwrap(),
                    "record {i} relabelled to a different taxon"
                );
            }
            Ok(())
        }
        Err(Error::EmptyAfterFiltering { .. }) => {
            ensure!(expected.is_empty(), "reported empty but {} records survive", expected.len());
            Ok(())
        }
        Err(e) => Err(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Numerics

fn grad_report(blocks: &[GradBlock], loss: impl FnMut(&[Vec<f64>]) -> f64) -> Result<f64, String> {
    let report = gradient_check(blocks, loss, GRAD_TOLERANCE);
    let worst = report.max_rel_error();
    ensure!(
        report.passed(),
        "gradient check failed: {:?}",
        report.blocks.iter().filter(|b| !b.passed).collect::<Vec<_>>()
    );
    Ok(worst)
}

fn away_from_zero(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn weighted_sum(c: &[f64], y: &[f64]) -> f64 {
    c.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Linear, ReLU, dropout (fixed mask), softmax, masked softmax and focal
/// loss against central differences. Returns the worst relative error.
pub fn op_gradients(seed: u64) -> Result<f64, String> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    let batch = rng.random_range(1..=4);
    let (inp, out) = (rng.random_range(1..=8), rng.random_range(1..=8));

    // Linear.
    let mut layer = Linear::init_uniform(inp, out, &mut rng);
    layer.bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = random_features(&mut rng, batch, inp);
    let c = random_features(&mut rng, batch, out);
    let gx = ok(layer.backward(&x, &c))?;
    let blocks = [
        GradBlock { name: "weight".into(), values: layer.weight.values().to_vec(), analytic: layer.grad_weight.values().to_vec() },
        GradBlock { name: "bias".into(), values: layer.bias.clone(), analytic: layer.grad_bias.clone() },
        GradBlock { name: "input".into(), values: x.values().to_vec(), analytic: gx.values().to_vec() },
    ];
    worst = worst.max(grad_report(&blocks, |v| {
        let l = Linear::from_params(Matrix::from_vec(out, inp, v[0].clone()).unwrap(), v[1].clone()).unwrap();
        weighted_sum(c.values(), l.forward(&Matrix::from_vec(batch, inp, v[2].clone()).unwrap()).unwrap().values())
    })?);

    // ReLU.
    let xr = Matrix::from_vec(batch, inp, away_from_zero(&mut rng, batch * inp)).unwrap();
    let cr = random_features(&mut rng, batch, inp);
    let blocks = [GradBlock { name: "relu".into(), values: xr.values().to_vec(), analytic: relu_backward(&xr, &cr).values().to_vec() }];
    worst = worst.max(grad_report(&blocks, |v| {
        weighted_sum(cr.values(), relu(&Matrix::from_vec(batch, inp, v[0].clone()).unwrap()).values())
    })?);

    // Dropout with a fixed mask (same seed on every call).
    let rate = rng.random_range(0.0..0.6);
    let mask_seed: u64 = rng.random();
    let (_, scale) = ok(dropout(&xr, rate, Mode::Train, &mut seeded_rng(mask_seed)))?;
    let blocks = [GradBlock {
        name: "dropout".into(),
        values: xr.values().to_vec(),
        analytic: dropout_backward(&cr, scale.as_deref()).values().to_vec(),
    }];
    worst = worst.max(grad_report(&blocks, |v| {
        let m = Matrix::from_vec(batch, inp, v[0].clone()).unwrap();
        weighted_sum(cr.values(), dropout(&m, rate, Mode::Train, &mut seeded_rng(mask_seed)).unwrap().0.values())
    })?);

    // Softmax, masked softmax and focal loss on one logit row.
    let n = rng.random_range(2..=8);
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let cs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let target = rng.random_range(0..n);
    mask[target] = true;
    for (name, m) in [("softmax", vec![true; n]), ("masked softmax", mask.clone())] {
        let p = masked_softmax(&z, &m).unwrap();
        let inner = weighted_sum(&p, &cs);
        let analytic: Vec<f64> = p.iter().zip(&cs).map(|(pi, ci)| pi * (ci - inner)).collect();
        let blocks = [GradBlock { name: name.into(), values: z.clone(), analytic }];
        worst = worst.max(grad_report(&blocks, |v| weighted_sum(&cs, &masked_softmax(&v[0], &m).unwrap()))?);
    }
    let params = FocalParams { alpha: rng.random_range(0.1..=1.0), gamma: rng.random_range(0.0..3.0) };
    let (_, analytic) = ok(focal_logit_grad(&masked_softmax(&z, &mask).unwrap(), target, params))?;
    let blocks = [GradBlock { name: "focal".into(), values: z.clone(), analytic }];
    worst = worst.max(grad_report(&blocks, |v| {
        focal_loss(&masked_softmax(&v[0], &mask).unwrap(), target, params).unwrap().loss
    })?);
    let _ = softmax(&z);
    Ok(worst)
}

pub fn softmax_normalised(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let scale = [1.0, 30.0, 1000.0][rng.random_range(0..3)];
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        mask[rng.random_range(0..n)] = true;
        for p in [softmax(&z), masked_softmax(&z, &mask).unwrap()] {
            ensure!(p.iter().all(|&v| v >= 0.0), "negative probability in {p:?}");
            let s: f64 = p.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-12, "sum {s} for logits at scale {scale}");
        }
    }
    Ok(())
}

/// Two AdamW trajectories, dropout masks and model initialisations from
/// equal seeds agree bit for bit.
pub fn numerics_deterministic(seed: u64) -> Check {
    let run = || {
        let mut rng = seeded_rng(seed);
        let mut l = Linear::init_uniform(5, 3, &mut rng);
        let opt = AdamW::default();
        for step in 1..=5 {
            for g in l.grad_weight.values_mut() {
                *g = rng.random_range(-1.0..1.0);
            }
            for g in l.grad_bias.iter_mut() {
                *g = rng.random_range(-1.0..1.0);
            }
            opt.step(&mut l, step).unwrap();
        }
        let x = random_features(&mut rng, 3, 4);
        let (d, _) = dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        (bits(l.weight.values()), bits(&l.bias), bits(d.values()))
    };
    ensure!(run() == run(), "equal seeds diverged");
    let mut a = seeded_rng(seed);
    let mut b = seeded_rng(seed);
    let tree = random_tree(&mut a, 30);
    let _ = random_tree(&mut b, 30);
    let ma = random_model(&mut a, &tree, Variant::HCofgs, 4);
    let mb = random_model(&mut b, &tree, Variant::HCofgs, 4);
    ensure!(ma == mb, "equal seeds gave different models");
    Ok(())
}

// ---------------------------------------------------------------------------
// Model

pub fn probabilities_valid(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 60);
    let variant = *HIERARCHICAL.choose(&mut rng).unwrap();
    let fd = rng.random_range(2..=8);
    let model = random_model(&mut rng, &tree, variant, fd);
    let batch = rng.random_range(1..=6);
    let x = random_features(&mut rng, batch, fd);
    let paths = random_paths(&mut rng, &tree, batch);
    let tf = TeacherForcing { paths: &paths };
    let providers: [(&str, &dyn MaskProvider); 3] = [("unmasked", &Unmasked), ("greedy", &GreedyParents), ("teacher", &tf)];
    for (name, provider) in providers {
        let out = ok(model.forward(&tree, &x, provider, Mode::Eval, None))?;
        for (pos, &level) in out.levels.iter().enumerate() {
            for b in 0..batch {
                let p = out.probs[pos].row(b);
                let s: f64 = p.iter().sum();
                ensure!((s - 1.0).abs() <= 1e-12 && p.iter().all(|&v| v >= 0.0), "{name}: {level} row {b} is not a distribution");
                if let Some(parent) = out.parents[pos][b] {
                    let mask = tree.child_mask(level.parent().unwrap(), parent, level).unwrap();
                    ensure!(
                        p.iter().zip(&mask.bits).all(|(&v, &bit)| bit || v == 0.0),
                        "{name}: {level} row {b} puts mass outside the children of {parent}"
                    );
                }
            }
        }
    }
    Ok(())
}

pub fn masked_logit_perturbation(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree_with(&mut rng, 60, 2);
    let fd = rng.random_range(2..=8);
    let model = random_model(&mut rng, &tree, Variant::HCofgs, fd);
    let x = random_features(&mut rng, 1, fd);
    let base = ok(model.forward(&tree, &x, &GreedyParents, Mode::Eval, None))?;
    let mut layer_offset = usize::from(model.adapter().is_some());
    for pos in 0..model.heads().len() {
        let n_layers = model.heads()[pos].layers.len();
        let last = layer_offset + n_layers - 1;
        layer_offset += n_layers;
        let Some(parent) = base.parents[pos][0] else { continue };
        let level = base.levels[pos];
        let mask = tree.child_mask(level.parent().unwrap(), parent, level).unwrap();
        let Some(j) = mask.bits.iter().position(|&b| !b) else { continue };
        let mut bumped = model.clone();
        bumped.layers_mut()[last].bias[j] += rng.random_range(-8.0..8.0);
        let out = ok(bumped.forward(&tree, &x, &GreedyParents, Mode::Eval, None))?;
        ensure!(out.logits[pos].get(0, j) != base.logits[pos].get(0, j), "perturbation did not reach the logit");
        for q in pos..out.levels.len() {
            ensure!(out.probs[q] == base.probs[q], "masked logit {j} at {level} changed level {}", out.levels[q]);
        }
    }
    Ok(())
}

/// Mean focal loss per level, weighted and summed, under teacher forcing in
/// eval mode; returns the loss and dL/dprobs per level.
pub fn teacher_forced_loss(
    model: &CascadeModel,
    tree: &TaxonomyTree,
    x: &Matrix,
    paths: &[LabelPath],
    weights: &LossWeights,
    params: FocalParams,
) -> (f64, Vec<Matrix>, taxocascade::model::CascadeOutput) {
    let out = model.forward(tree, x, &TeacherForcing { paths }, Mode::Eval, None).unwrap();
    let b = x.rows() as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (pos, &level) in out.levels.iter().enumerate() {
        let probs = &out.probs[pos];
        let mut g = Matrix::zeros(probs.rows(), probs.cols());
        for (s, p) in paths.iter().enumerate() {
            let term = focal_loss(probs.row(s), p.get(level), params).unwrap();
            total += weights.0[pos] * term.loss / b;
            g.set(s, p.get(level), weights.0[pos] * term.grad_pt / b);
        }
        grads.push(g);
    }
    (total, grads, out)
}

/// Outcome of one whole-model gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradOutcome {
    pub worst: f64,
    /// Draws discarded before a usable instance came up.
    pub redrawn: usize,
}

/// Draws that may be discarded per accepted instance before the check gives
/// up: a backward pass that keeps producing near-zero entries is itself
/// suspect.
pub const MAX_REDRAWS: usize = 8;

/// Whole-model gradient of the weighted focal loss (all heads, adapter and
/// input features) against central differences, at initial parameter scale.
///
/// A draw is discarded when the finite difference cannot act as an oracle:
/// a hidden pre-activation within `KINK_MARGIN` of zero (the probe straddles
/// the ReLU kink), or a nonzero analytic entry below `RESOLVABLE` (a 1e-5
/// step on an O(1) loss cannot resolve it to 1e-4 in f64).
pub fn cascade_gradient(seed: u64, variant: Variant) -> Result<GradOutcome, String> {
    let mut rng = seeded_rng(seed);
    let weights = LossWeights::default_for(variant);
    let params = FocalParams::default();
    for redrawn in 0..=MAX_REDRAWS {
        let tree = random_tree(&mut rng, 12);
        let fd = rng.random_range(2..=8);
        let mut model = scaled_model(&mut rng, &tree, variant, fd, 1.0);
        let batch = rng.random_range(1..=4);
        let x = random_features(&mut rng, batch, fd);
        let paths = random_paths(&mut rng, &tree, batch);
        let (_, grads, out) = teacher_forced_loss(&model, &tree, &x, &paths, &weights, params);
        if out.kink_margin() <= KINK_MARGIN {
            continue;
        }
        model.zero_grad();
        let gx = ok(model.backward(&out, grads))?;
        let mut blocks = model.param_blocks();
        blocks.push(GradBlock { name: "features".into(), values: x.values().to_vec(), analytic: gx.values().to_vec() });
        if blocks.iter().flat_map(|b| &b.analytic).any(|&a| a != 0.0 && a.abs() < RESOLVABLE) {
            continue;
        }
        let n_params = blocks.len() - 1;
        let mut probe = model.clone();
        let worst = grad_report(&blocks, |v| {
            probe.set_param_values(&v[..n_params]).unwrap();
            let xv = Matrix::from_vec(batch, fd, v[n_params].clone()).unwrap();
            teacher_forced_loss(&probe, &tree, &xv, &paths, &weights, params).0
        })?;
        return Ok(GradOutcome { worst, redrawn });
    }
    Err(format!("no checkable instance in {} draws", MAX_REDRAWS + 1))
}

// ---------------------------------------------------------------------------
// Training

pub fn teacher_forcing_keeps_target(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree_with(&mut rng, 60, 2);
    let fd = rng.random_range(2..=6);
    let variant = *HIERARCHICAL.choose(&mut rng).unwrap();
    let model = random_model(&mut rng, &tree, variant, fd);
    let n = tree.count(Level::Species);
    let paths: Vec<LabelPath> = (0..n).map(|s| tree.ancestor_path(s).unwrap()).collect();
    for p in &paths {
        let masks = ok(teacher_forcing_masks(&tree, p))?;
        for level in Level::ALL {
            ensure!(masks[level.ordinal()][p.get(level)], "teacher forcing masks the target at {level}");
        }
    }
    let x = random_features(&mut rng, n, fd);
    let out = ok(model.forward(&tree, &x, &TeacherForcing { paths: &paths }, Mode::Eval, None))?;
    for (pos, &level) in out.levels.iter().enumerate() {
        for (s, p) in paths.iter().enumerate() {
            ok(focal_loss(out.probs[pos].row(s), p.get(level), FocalParams::default()))?;
        }
    }
    Ok(())
}

/// The guard fires when the target is masked out by a wrong parent.
pub fn masked_target_guard(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree_with(&mut rng, 60, 2);
    let s = rng.random_range(0..tree.count(Level::Species));
    let path = tree.ancestor_path(s).unwrap();
    let wrong = (path.get(Level::Class) + 1) % tree.count(Level::Class);
    let mask = tree.child_mask(Level::Class, wrong, Level::Order).unwrap();
    let logits: Vec<f64> = (0..mask.bits.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let probs = ok(masked_softmax(&logits, &mask.bits))?;
    match focal_loss(&probs, path.get(Level::Order), FocalParams::default()) {
        Err(Error::ContractViolation(_)) => Ok(()),
        other => Err(format!("expected a contract violation, got {other:?}")),
    }
}

pub fn separable_fixture(seed: u64) -> (TaxonomyTree, Dataset, Dataset) {
    let spec = SyntheticSpec {
        shape: TaxonomyShape::Counts([2, 4, 4, 4, 4]),
        feature_dim: 8,
        dispersion: [4.0, 3.0, 0.5, 0.5, 0.5],
        noise: 0.2,
        samples_per_species: (20, 20),
        seed,
    };
    let (tree, ds) = generate_synthetic(&spec).unwrap();
    let ds = stratified_split(&ds, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
    (tree, ds.subset(Split::Train), ds.subset(Split::Val))
}

pub fn small_model(tree: &TaxonomyTree, variant: Variant, seed: u64) -> CascadeModel {
    let cfg = ModelConfig {
        variant,
        feature_dim: 8,
        adapter_dim: Some(6),
        width_divisor: 16,
    };
    CascadeModel::new(cfg, tree, &mut seeded_rng(seed)).unwrap()
}

pub fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 16,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// Two full runs with equal seeds: identical checkpoints and epoch logs.
pub fn training_reproducible(seed: u64, epochs: usize) -> Check {
    let (tree, train, val) = separable_fixture(seed);
    let run = || {
        let out = fit(small_model(&tree, Variant::HCofgs, seed), &tree, &train, &val, &quick_config(seed, epochs)).unwrap();
        (out.checkpoint().unwrap().to_json().unwrap(), out.logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    ensure!(a == b, "checkpoints differ");
    ensure!(la == lb, "epoch logs differ");
    Ok(())
}

/// Shipped fixture and seed: epoch-1 mean train loss below epoch 0's.
pub fn first_epoch_loss_decreases() -> Check {
    let (tree, train, val) = separable_fixture(1);
    let out = ok(fit(small_model(&tree, Variant::HCo, 1), &tree, &train, &val, &quick_config(1, 2)))?;
    let total = |i: usize| out.logs[i].train_loss.iter().map(|(_, v)| v).sum::<f64>();
    ensure!(total(1) < total(0), "loss {} -> {}", total(0), total(1));
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference

fn decoder_instance(seed: u64, max_species: usize) -> (TaxonomyTree, CascadeModel, Matrix) {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, max_species);
    let variant = *HIERARCHICAL.choose(&mut rng).unwrap();
    let fd = rng.random_range(2..=8);
    let model = random_model(&mut rng, &tree, variant, fd);
    let batch = rng.random_range(1..=4);
    let x = random_features(&mut rng, batch, fd);
    (tree, model, x)
}

pub fn beam_one_is_greedy(seed: u64) -> Check {
    let (tree, model, x) = decoder_instance(seed, 50);
    let g = ok(decode_greedy(&model, &tree, &x))?;
    let b = ok(decode_beam(&model, &tree, &x, 1))?;
    for (i, (g, b)) in g.iter().zip(&b).enumerate() {
        ensure!(g.labels == b.labels, "sample {i}: greedy {:?}, beam {:?}", g.labels, b.labels);
        ensure!(g.path_score.to_bits() == b.path_score.to_bits(), "sample {i}: scores {} vs {}", g.path_score, b.path_score);
    }
    Ok(())
}

/// Returns the first (sample, k) where widening the beam lowered the score.
pub fn beam_monotone(seed: u64) -> Check {
    let (tree, model, x) = decoder_instance(seed, 50);
    let deepest = *model.levels().last().unwrap();
    let max_k = tree.count(deepest);
    let mut prev: Option<Vec<f64>> = None;
    for k in 1..=max_k {
        let scores: Vec<f64> = ok(decode_beam(&model, &tree, &x, k))?.iter().map(|p| p.path_score).collect();
        if let Some(prev) = &prev {
            for (i, (a, b)) in prev.iter().zip(&scores).enumerate() {
                ensure!(b >= a, "sample {i}: score {a} at k={} drops to {b} at k={k}", k - 1);
            }
        }
        prev = Some(scores);
    }
    Ok(())
}

pub fn beam_saturated_is_exhaustive(seed: u64) -> Check {
    let (tree, model, x) = decoder_instance(seed, 50);
    let width = tree.count(Level::Species);
    let preds = ok(decode_beam(&model, &tree, &x, width))?;
    for (i, p) in preds.iter().enumerate() {
        let (best, score) = exhaustive_best(&model, &tree, x.row(i));
        let labels: Vec<usize> = model.levels().iter().map(|l| p.label(*l).unwrap()).collect();
        ensure!(labels == best, "sample {i}: beam {labels:?}, enumeration {best:?}");
        ensure!((p.path_score - score).abs() <= 1e-12, "sample {i}: score {} vs {score}", p.path_score);
    }
    Ok(())
}

pub fn decoder_chain_validity(seed: u64) -> Check {
    let (tree, model, x) = decoder_instance(seed, 50);
    for p in ok(decode_greedy(&model, &tree, &x))? {
        ensure!(p.path_valid, "greedy produced an invalid chain");
    }
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let flat = random_model(&mut rng, &tree, Variant::FlatSpecies, x.cols());
    for p in ok(flat_lookup(&flat, &tree, &x))? {
        let s = p.label(Level::Species).unwrap();
        ensure!(p.path_valid, "flat lookup produced an invalid chain");
        ensure!(p.labels.map(|l| l.unwrap()) == tree.ancestor_path(s).unwrap().0, "flat lookup path is not the ancestor path");
    }
    for p in ok(decode_levelwise(&model, &tree, &x, AncestorFeed::Unmasked))? {
        let mut disagrees = false;
        for pair in model.levels().windows(2) {
            let (parent, child) = (pair[0], pair[1]);
            let probs = p.probs[child.ordinal()].as_ref().unwrap();
            let children = tree.children(parent, p.label(parent).unwrap()).unwrap();
            let masked = *children
                .iter()
                .max_by(|&&a, &&b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                .unwrap();
            disagrees |= masked != p.label(child).unwrap();
        }
        ensure!(p.path_valid != disagrees, "level-wise validity {} but masked/unmasked disagreement {disagrees}", p.path_valid);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// Random predictions: correct, a sibling, or any species.
fn random_predictions(rng: &mut RngState, tree: &TaxonomyTree, n: usize) -> (Vec<usize>, Vec<usize>) {
    let ns = tree.count(Level::Species);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..ns)).collect();
    let pred = truth
        .iter()
        .map(|&t| match rng.random_range(0..3) {
            0 => t,
            1 => {
                let g = tree.parent(Level::Species, t).unwrap().unwrap();
                *tree.children(Level::Genus, g).unwrap().choose(rng).unwrap()
            }
            _ => rng.random_range(0..ns),
        })
        .collect();
    (pred, truth)
}

fn full_paths(tree: &TaxonomyTree, species: &[usize]) -> Vec<[Option<usize>; DEPTH]> {
    species.iter().map(|&s| tree.ancestor_path(s).unwrap().0.map(Some)).collect()
}

pub fn metric_identities(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 80);
    let n = rng.random_range(1..=200);
    let (pred, truth) = random_predictions(&mut rng, &tree, n);
    let stats = ok(distance_stats(&tree, &pred, &truth))?;
    let (acc, _) = ok(accuracy_and_weighted_f1(&pred, &truth))?;
    let correct = acc * n as f64;
    ensure!((correct - correct.round()).abs() < 1e-9 && correct.round() as usize == stats.histogram[0],
        "distance-0 count {} vs accuracy x n {correct}", stats.histogram[0]);
    match stats.mean_errors {
        Some(m) => {
            let implied = m * stats.errors as f64 / n as f64;
            ensure!((implied - stats.mean_all).abs() <= 1e-12, "mean_all {} vs {implied}", stats.mean_all);
        }
        None => ensure!(stats.mean_all == 0.0 && stats.errors == 0, "no errors but mean_all {}", stats.mean_all),
    }
    Ok(())
}

pub fn metrics_order_invariant(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 80);
    let n = rng.random_range(1..=200);
    let (pred, truth) = random_predictions(&mut rng, &tree, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let (pred2, truth2): (Vec<usize>, Vec<usize>) = idx.iter().map(|&i| (pred[i], truth[i])).unzip();
    let paths = |s: &[usize]| s.iter().map(|&s| tree.ancestor_path(s).unwrap()).collect::<Vec<_>>();
    let a = ok(per_level_metrics(&full_paths(&tree, &pred), &paths(&truth)))?;
    let b = ok(per_level_metrics(&full_paths(&tree, &pred2), &paths(&truth2)))?;
    ensure!(a == b, "per-level metrics changed under reordering");
    let da: DistanceStats = ok(distance_stats(&tree, &pred, &truth))?;
    let db = ok(distance_stats(&tree, &pred2, &truth2))?;
    ensure!(da == db, "distance statistics changed under reordering");
    Ok(())
}

pub fn greedy_correctness_monotone(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let tree = random_tree(&mut rng, 50);
    let fd = rng.random_range(2..=8);
    let model = random_model(&mut rng, &tree, Variant::HCofgs, fd);
    let n = rng.random_range(1..=40);
    let x = random_features(&mut rng, n, fd);
    let truth = random_paths(&mut rng, &tree, n);
    let preds = ok(decode_greedy(&model, &tree, &x))?;
    for (p, t) in preds.iter().zip(&truth) {
        let correct: Vec<bool> = Level::ALL.iter().map(|&l| p.label(l) == Some(t.get(l))).collect();
        ensure!(correct.windows(2).all(|w| w[0] || !w[1]), "correct below a wrong ancestor: {correct:?}");
    }
    let labels: Vec<_> = preds.iter().map(|p| p.labels).collect();
    let metrics = ok(per_level_metrics(&labels, &truth))?;
    ensure!(metrics.windows(2).all(|w| w[0].accuracy >= w[1].accuracy), "accuracy increases with depth");
    Ok(())
}

// ---------------------------------------------------------------------------
// Data

pub fn split_partition(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let (_, ds) = random_data(&mut rng, 2, (1, 12), 1);
    let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
    let total: f64 = raw.iter().sum();
    let fractions = raw.map(|f| f / total);
    let spec = SplitSpec { fractions, stratify_level: Level::Species, seed };
    let out = match stratified_split(&ds, &spec) {
        Ok(o) => o,
        Err(Error::Config(_)) if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 => return Ok(()),
        Err(e) => return Err(e.to_string()),
    };
    ensure!(out.len() == ds.len(), "records lost");
    let mut strata: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for r in out.records() {
        let k = match r.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Unassigned => return Err(format!("record {} left unassigned", r.id)),
        };
        strata.entry(r.labels.get(Level::Species)).or_default()[k] += 1;
    }
    for (s, counts) in strata {
        let n: usize = counts.iter().sum();
        if n < 3 {
            let expect: [usize; 3] = std::array::from_fn(|k| usize::from(k < n));
            ensure!(counts == expect, "tiny stratum {s}: {counts:?}");
            continue;
        }
        let expect = reference_allocation(n, &fractions);
        ensure!(counts == expect, "stratum {s} (n={n}): {counts:?}, expected {expect:?}");
        ensure!(counts == allocate(n, &fractions), "allocate disagrees for n={n}");
        for k in 0..3 {
            ensure!((counts[k] as f64 - fractions[k] * n as f64).abs() < 1.0, "stratum {s} split {k} off by a record or more");
        }
    }
    Ok(())
}

pub fn synthetic_pure(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let spec = SyntheticSpec {
        shape: TaxonomyShape::Branching { classes: 2, children: [(1, 2), (1, 2), (1, 2), (1, 3)] },
        feature_dim: rng.random_range(1..=6),
        samples_per_species: (1, 5),
        seed: rng.random(),
        ..SyntheticSpec::default()
    };
    let a = ok(generate_synthetic(&spec))?;
    let b = ok(generate_synthetic(&spec))?;
    ensure!(a == b, "same spec gave different output");
    let c = ok(generate_synthetic(&SyntheticSpec { seed: spec.seed.wrapping_add(1), ..spec.clone() }))?;
    ensure!(a.1 != c.1, "different seeds gave identical records");
    Ok(())
}

pub fn cross_taxonomy_refused(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let (tree_a, ds_a) = random_data(&mut rng, 3, (2, 4), 1);
    let (tree_b, _) = loop {
        let candidate = random_data(&mut rng, 3, (2, 4), 1);
        if candidate.0.checksum() != tree_a.checksum() {
            break candidate;
        }
    };
    ensure!(matches!(ds_a.check_taxonomy(&tree_b), Err(Error::ChecksumMismatch { .. })), "dataset accepted a foreign tree");
    let model = random_model(&mut rng, &tree_a, Variant::HCo, 3);
    ensure!(model.check_taxonomy(&tree_b).is_err(), "model accepted a foreign tree");
    let split = ok(stratified_split(&ds_a, &SplitSpec::default()))?;
    let (tr, va) = (split.subset(Split::Train), split.subset(Split::Val));
    ensure!(fit(model, &tree_b, &tr, &va, &quick_config(seed, 1)).is_err(), "fit accepted a foreign tree");
    ensure!(ds_a.filter_min_samples(&tree_b, 1, &[Level::Species]).is_err(), "filtering accepted a foreign tree");
    let ck = random_model(&mut rng, &tree_a, Variant::HCo, 3).to_checkpoint().unwrap();
    ensure!(CascadeModel::from_checkpoint(&ck, &tree_b).is_err(), "checkpoint loaded against a foreign tree");
    Ok(())
}

