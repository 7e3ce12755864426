//! Cascaded per-level classification heads.
//!
//! Each head sees the (optionally adapted) backbone features concatenated
//! with the masked probability vectors of every coarser head, and its logits
//! go through a softmax restricted to the children of a chosen parent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Checkpoint, Linear, Matrix, Mode, RngState};
use crate::taxonomy::{Level, MaskRow, TaxonomyTree};

/// The six model variants: two flat baselines and four cascades of
/// increasing depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "f-c")]
    FlatClass,
    #[serde(rename = "f-s")]
    FlatSpecies,
    #[serde(rename = "h-co")]
    HCo,
    #[serde(rename = "h-cof")]
    HCof,
    #[serde(rename = "h-cofg")]
    HCofg,
    #[serde(rename = "h-cofgs")]
    HCofgs,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FlatClass,
        Variant::FlatSpecies,
        Variant::HCo,
        Variant::HCof,
        Variant::HCofg,
        Variant::HCofgs,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::FlatClass => "f-c",
            Variant::FlatSpecies => "f-s",
            Variant::HCo => "h-co",
            Variant::HCof => "h-cof",
            Variant::HCofg => "h-cofg",
            Variant::HCofgs => "h-cofgs",
        }
    }

    /// Levels with a head, coarse to fine.
    pub fn levels(self) -> &'static [Level] {
        match self {
            Variant::FlatClass => &[Level::Class],
            Variant::FlatSpecies => &[Level::Species],
            Variant::HCo => &Level::ALL[..2],
            Variant::HCof => &Level::ALL[..3],
            Variant::HCofg => &Level::ALL[..4],
            Variant::HCofgs => &Level::ALL[..5],
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, Variant::FlatClass | Variant::FlatSpecies)
    }

    pub fn deepest(self) -> Level {
        *self.levels().last().expect("every variant has a head")
    }

    /// The hierarchical variant whose deepest head sits at `level`.
    pub fn hierarchical_to(level: Level) -> Option<Variant> {
        match level {
            Level::Class => None,
            Level::Order => Some(Variant::HCo),
            Level::Family => Some(Variant::HCof),
            Level::Genus => Some(Variant::HCofg),
            Level::Species => Some(Variant::HCofgs),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown variant {s:?}")))
    }
}

/// Layer widths and dropout of one head.
///
/// `layer_dims` runs from the fused input width to the class count.
/// `dropout_rates` has one more entry than there are hidden layers: the
/// first applies to the backbone part of the input (never to ancestor
/// probabilities), the rest follow each hidden ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub level: Level,
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    pub dropout_rates: Vec<f64>,
}

impl HeadSpec {
    /// Table-driven head shape: 2-layer for flat heads and the class head,
    /// 3-layer for order and family, 4-layer for genus and species. Hidden
    /// widths are divided by `width_divisor` (1 keeps the full widths).
    pub fn for_level(
        variant: Variant,
        level: Level,
        input_dim: usize,
        n_classes: usize,
        width_divisor: usize,
    ) -> Result<HeadSpec> {
        if width_divisor == 0 {
            return Err(Error::Config("width_divisor must be at least 1".into()));
        }
        let (hidden, dropout): (&[usize], &[f64]) = if !variant.is_hierarchical() || level == Level::Class {
            (&[512], &[0.3, 0.2])
        } else if level <= Level::Family {
            (&[512, 256], &[0.3, 0.2, 0.1])
        } else {
            (&[1024, 512, 256], &[0.3, 0.2, 0.2, 0.1])
        };
        let mut layer_dims = vec![input_dim];
        layer_dims.extend(hidden.iter().map(|w| (w / width_divisor).max(1)));
        layer_dims.push(n_classes);
        Ok(HeadSpec {
            level,
            input_dim,
            layer_dims,
            dropout_rates: dropout.to_vec(),
        })
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().expect("layer_dims is never empty")
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_dims.len() - 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the provider feature vectors.
    pub feature_dim: usize,
    /// Output width of the optional shared trainable linear adapter.
    #[serde(default)]
    pub adapter_dim: Option<usize>,
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
}

fn default_divisor() -> usize {
    1
}

impl ModelConfig {
    pub fn new(variant: Variant, feature_dim: usize) -> Self {
        ModelConfig {
            variant,
            feature_dim,
            adapter_dim: None,
            width_divisor: 1,
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDefinition {
    pub config: ModelConfig,
    pub backbone_dim: usize,
    pub class_counts: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub taxonomy_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    definition: ModelDefinition,
    adapter: Option<Linear>,
    heads: Vec<Head>,
}

/// Softmax restricted to entries whose mask bit is set. Masked entries get
/// exactly 0 and are excluded from both the max and the normaliser.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::dim("masked softmax mask", logits.len(), mask.len()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY && !mask.iter().any(|&m| m) {
        return Err(Error::NoValidChildren);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub fn masked_softmax_row(logits: &[f64], mask: &MaskRow) -> Result<Vec<f64>> {
    masked_softmax(logits, &mask.bits)
}

/// Logits with masked entries replaced by negative infinity.
pub fn mask_logits(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { z } else { f64::NEG_INFINITY })
        .collect()
}

/// `[backbone; p_class; ...; p_(l-1)]`, checked against the head's input width.
pub fn fuse_features(backbone: &[f64], ancestor_probs: &[&[f64]], input_dim: usize) -> Result<Vec<f64>> {
    let len = backbone.len() + ancestor_probs.iter().map(|p| p.len()).sum::<usize>();
    if len != input_dim {
        return Err(Error::dim("fused head input", input_dim, len));
    }
    let mut x = Vec::with_capacity(len);
    x.extend_from_slice(backbone);
    for p in ancestor_probs {
        x.extend_from_slice(p);
    }
    Ok(x)
}

/// Chooses, per sample and level, the parent whose children form the mask.
pub trait MaskProvider {
    /// Parent index at `level.parent()` for `sample`, or `None` for an
    /// all-ones mask. `upstream` holds this sample's probability vectors for
    /// every coarser level of the model, coarse to fine.
    fn parent(&self, sample: usize, level: Level, upstream: &[&[f64]]) -> Result<Option<usize>>;
}

/// Every level sees an all-ones mask.
pub struct Unmasked;

impl MaskProvider for Unmasked {
    fn parent(&self, _: usize, _: Level, _: &[&[f64]]) -> Result<Option<usize>> {
        Ok(None)
    }
}

/// Masks from the argmax of the previous level's (masked) distribution.
pub struct GreedyParents;

impl MaskProvider for GreedyParents {
    fn parent(&self, _: usize, level: Level, upstream: &[&[f64]]) -> Result<Option<usize>> {
        match upstream.last() {
            Some(p) => Ok(Some(numerics::argmax(p))),
            None => Err(Error::ContractViolation(format!(
                "greedy mask for {level} needs the parent level's distribution"
            ))),
        }
    }
}

/// Output of one head for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub level: Level,
    pub logits: Vec<f64>,
    pub masked_logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Per-level batch outputs of [`CascadeModel::forward`].
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub levels: Vec<Level>,
    pub logits: Vec<Matrix>,
    pub probs: Vec<Matrix>,
    /// Parent used to mask each sample at each level (`None` = all ones).
    pub parents: Vec<Vec<Option<usize>>>,
    // Row-major batch x n mask bits per level.
    masks: Vec<Vec<bool>>,
    cache: ForwardCache,
}

impl CascadeOutput {
    pub fn level_output(&self, sample: usize, pos: usize) -> LevelOutput {
        let logits = self.logits[pos].row(sample).to_vec();
        let probs = self.probs[pos].row(sample).to_vec();
        let n = logits.len();
        let masked_logits = mask_logits(&logits, &self.masks[pos][sample * n..(sample + 1) * n]);
        LevelOutput {
            level: self.levels[pos],
            logits,
            masked_logits,
            probs,
        }
    }

    /// Smallest |pre-activation| over every hidden ReLU in the pass. Finite
    /// differences are only meaningful when this exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        self.cache
            .heads
            .iter()
            .flat_map(|h| h.pre_acts.iter())
            .flat_map(|z| z.values().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    features: Matrix,
    heads: Vec<HeadCache>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    input_scale: Option<Vec<f64>>,
    // layer_inputs[j] feeds layers[j]; pre_acts[j] is layers[j]'s output for hidden j.
    layer_inputs: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
    dropout_scales: Vec<Option<Vec<f64>>>,
}

impl CascadeModel {
    /// Builds a freshly initialised model for `tree`. Parameters are drawn in
    /// a fixed order (adapter, then heads coarse to fine) from `rng`.
    pub fn new(config: ModelConfig, tree: &TaxonomyTree, rng: &mut RngState) -> Result<Self> {
        if config.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let backbone_dim = config.adapter_dim.unwrap_or(config.feature_dim);
        if backbone_dim == 0 {
            return Err(Error::Config("adapter_dim must be positive".into()));
        }
        let levels = config.variant.levels();
        let class_counts: Vec<usize> = levels.iter().map(|&l| tree.count(l)).collect();
        let mut specs = Vec::with_capacity(levels.len());
        let mut input_dim = backbone_dim;
        for (&level, &n) in levels.iter().zip(&class_counts) {
            specs.push(HeadSpec::for_level(config.variant, level, input_dim, n, config.width_divisor)?);
            input_dim += n;
        }
        let adapter = config
            .adapter_dim
            .map(|d| Linear::init_uniform(config.feature_dim, d, rng));
        let heads = specs
            .iter()
            .map(|spec| Head {
                spec: spec.clone(),
                layers: spec
                    .layer_dims
                    .windows(2)
                    .map(|w| Linear::init_uniform(w[0], w[1], rng))
                    .collect(),
            })
            .collect();
        Ok(CascadeModel {
            definition: ModelDefinition {
                config,
                backbone_dim,
                class_counts,
                heads: specs,
                taxonomy_checksum: tree.checksum(),
            },
            adapter,
            heads,
        })
    }

    pub fn definition(&self) -> &ModelDefinition {
        &self.definition
    }

    pub fn variant(&self) -> Variant {
        self.definition.config.variant
    }

    pub fn levels(&self) -> &'static [Level] {
        self.variant().levels()
    }

    pub fn feature_dim(&self) -> usize {
        self.definition.config.feature_dim
    }

    pub fn backbone_dim(&self) -> usize {
        self.definition.backbone_dim
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn adapter(&self) -> Option<&Linear> {
        self.adapter.as_ref()
    }

    pub fn taxonomy_checksum(&self) -> &str {
        &self.definition.taxonomy_checksum
    }

    /// Refuses a tree other than the one the model was built against.
    pub fn check_taxonomy(&self, tree: &TaxonomyTree) -> Result<()> {
        let found = tree.checksum();
        if found != self.definition.taxonomy_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.definition.taxonomy_checksum.clone(),
                found,
            });
        }
        Ok(())
    }

    fn check_counts(&self, tree: &TaxonomyTree) -> Result<()> {
        for (&level, &n) in self.levels().iter().zip(&self.definition.class_counts) {
            if tree.count(level) != n {
                return Err(Error::dim(format!("{level} taxon count"), n, tree.count(level)));
            }
        }
        Ok(())
    }

    /// Shared features fed to every head (identity without an adapter).
    pub fn backbone(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim() {
            return Err(Error::dim("model features", self.feature_dim(), features.cols()));
        }
        match &self.adapter {
            Some(a) => a.forward(features),
            None => Ok(features.clone()),
        }
    }

    /// Evaluates the head at `pos` for one sample in eval mode, given the
    /// backbone row, that sample's ancestor distributions and its parent.
    pub fn head_output(
        &self,
        tree: &TaxonomyTree,
        pos: usize,
        backbone: &[f64],
        ancestors: &[&[f64]],
        parent: Option<usize>,
    ) -> Result<LevelOutput> {
        let head = self.heads.get(pos).ok_or(Error::OutOfRange {
            what: "head",
            index: pos,
            len: self.heads.len(),
        })?;
        let x = fuse_features(backbone, ancestors, head.spec.input_dim)?;
        let mut h = Matrix::from_vec(1, x.len(), x)?;
        let n_layers = head.layers.len();
        for (j, layer) in head.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if j + 1 < n_layers {
                h = numerics::relu(&h);
            }
        }
        let logits = h.into_values();
        let mask = self.mask_bits(tree, pos, parent)?;
        let probs = masked_softmax(&logits, &mask)?;
        Ok(LevelOutput {
            level: head.spec.level,
            masked_logits: mask_logits(&logits, &mask),
            logits,
            probs,
        })
    }

    fn mask_bits(&self, tree: &TaxonomyTree, pos: usize, parent: Option<usize>) -> Result<Vec<bool>> {
        let level = self.heads[pos].spec.level;
        let n = self.heads[pos].spec.n_classes();
        match parent {
            None => Ok(vec![true; n]),
            Some(p) => {
                let parent_level = level.parent().ok_or_else(|| {
                    Error::ContractViolation("the class level has no parent to mask by".into())
                })?;
                let row = tree.child_mask(parent_level, p, level)?;
                if row.bits.len() != n {
                    return Err(Error::dim(format!("{level} mask"), n, row.bits.len()));
                }
                Ok(row.bits)
            }
        }
    }

    /// Cascaded forward pass over a batch, coarse to fine. In train mode
    /// dropout draws from `rng`, which must then be provided.
    pub fn forward(
        &self,
        tree: &TaxonomyTree,
        features: &Matrix,
        masks: &dyn MaskProvider,
        mode: Mode,
        mut rng: Option<&mut RngState>,
    ) -> Result<CascadeOutput> {
        self.check_counts(tree)?;
        if mode == Mode::Train && rng.is_none() {
            return Err(Error::Parameter("train-mode forward needs an RNG for dropout".into()));
        }
        let batch = features.rows();
        let backbone = self.backbone(features)?;
        let mut logits_out = Vec::with_capacity(self.heads.len());
        let mut probs_out: Vec<Matrix> = Vec::with_capacity(self.heads.len());
        let mut parents_out = Vec::with_capacity(self.heads.len());
        let mut masks_out = Vec::with_capacity(self.heads.len());
        let mut head_caches = Vec::with_capacity(self.heads.len());
        let mut eval_rng = numerics::seeded_rng(0);

        for (pos, head) in self.heads.iter().enumerate() {
            let r: &mut RngState = match rng.as_deref_mut() {
                Some(r) => r,
                None => &mut eval_rng,
            };
            let (bb, input_scale) = numerics::dropout(&backbone, head.spec.dropout_rates[0], mode, r)?;
            let mut parts: Vec<&Matrix> = vec![&bb];
            parts.extend(probs_out.iter());
            let x = Matrix::hconcat(&parts)?;
            if x.cols() != head.spec.input_dim {
                return Err(Error::dim(format!("{} head input", head.spec.level), head.spec.input_dim, x.cols()));
            }
            let mut cache = HeadCache {
                input_scale,
                layer_inputs: Vec::with_capacity(head.layers.len()),
                pre_acts: Vec::new(),
                dropout_scales: Vec::new(),
            };
            let mut h = x;
            let n_layers = head.layers.len();
            for (j, layer) in head.layers.iter().enumerate() {
                let z = layer.forward(&h)?;
                cache.layer_inputs.push(h);
                if j + 1 < n_layers {
                    let a = numerics::relu(&z);
                    let (d, scale) = numerics::dropout(&a, head.spec.dropout_rates[j + 1], mode, r)?;
                    cache.pre_acts.push(z);
                    cache.dropout_scales.push(scale);
                    h = d;
                } else {
                    h = z;
                }
            }
            let logits = h;
            let n = head.spec.n_classes();
            let mut probs = Matrix::zeros(batch, n);
            let mut parents = Vec::with_capacity(batch);
            let mut mask_bits = Vec::with_capacity(batch * n);
            for b in 0..batch {
                let parent = if pos == 0 {
                    None
                } else {
                    let upstream: Vec<&[f64]> = probs_out.iter().map(|p| p.row(b)).collect();
                    masks.parent(b, head.spec.level, &upstream)?
                };
                let mask = self.mask_bits(tree, pos, parent)?;
                let p = masked_softmax(logits.row(b), &mask)?;
                probs.row_mut(b).copy_from_slice(&p);
                parents.push(parent);
                mask_bits.extend(mask);
            }
            logits_out.push(logits);
            probs_out.push(probs);
            parents_out.push(parents);
            masks_out.push(mask_bits);
            head_caches.push(cache);
        }
        Ok(CascadeOutput {
            levels: self.levels().to_vec(),
            logits: logits_out,
            probs: probs_out,
            parents: parents_out,
            masks: masks_out,
            cache: ForwardCache {
                features: features.clone(),
                heads: head_caches,
            },
        })
    }

    /// Backpropagates `grad_probs` (dL/dp per level, batch x n) through the
    /// masked softmaxes, the heads, the probability feeds between heads and
    /// the adapter. Parameter gradients accumulate; returns dL/dfeatures.
    pub fn backward(&mut self, out: &CascadeOutput, grad_probs: Vec<Matrix>) -> Result<Matrix> {
        if grad_probs.len() != self.heads.len() {
            return Err(Error::dim("per-level gradients", self.heads.len(), grad_probs.len()));
        }
        let mut grad_probs = grad_probs;
        let batch = out.cache.features.rows();
        let backbone_dim = self.backbone_dim();
        let mut grad_backbone = Matrix::zeros(batch, backbone_dim);
        for pos in (0..self.heads.len()).rev() {
            let probs = &out.probs[pos];
            let g = &grad_probs[pos];
            if g.shape() != probs.shape() {
                return Err(Error::dim(
                    "probability gradient",
                    format!("{:?}", probs.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let mut grad = softmax_backward(probs, g);
            let head = &mut self.heads[pos];
            let cache = &out.cache.heads[pos];
            for j in (0..head.layers.len()).rev() {
                let gx = head.layers[j].backward(&cache.layer_inputs[j], &grad)?;
                grad = if j > 0 {
                    let gd = numerics::dropout_backward(&gx, cache.dropout_scales[j - 1].as_deref());
                    numerics::relu_backward(&cache.pre_acts[j - 1], &gd)
                } else {
                    gx
                };
            }
            // grad is now dL/d(fused input).
            let gb = numerics::dropout_backward(&grad.columns(0, backbone_dim), cache.input_scale.as_deref());
            grad_backbone.add_assign(&gb)?;
            let mut offset = backbone_dim;
            for gp in grad_probs.iter_mut().take(pos) {
                let w = gp.cols();
                gp.add_assign(&grad.columns(offset, w))?;
                offset += w;
            }
        }
        match &mut self.adapter {
            Some(a) => a.backward(&out.cache.features, &grad_backbone),
            None => Ok(grad_backbone),
        }
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    /// All trainable layers in a fixed order, with their checkpoint prefixes.
    pub fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("adapter".to_owned(), a));
        }
        for head in &self.heads {
            for (j, l) in head.layers.iter().enumerate() {
                out.push((format!("head.{}/layer{j}", head.spec.level), l));
            }
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        if let Some(a) = &mut self.adapter {
            out.push(a);
        }
        for head in &mut self.heads {
            out.extend(head.layers.iter_mut());
        }
        out
    }

    /// Copies the adapter and every head of a shared level whose layer
    /// shapes all match. Returns the names of what was copied.
    pub fn copy_compatible_from(&mut self, src: &CascadeModel) -> Vec<String> {
        let mut copied = Vec::new();
        if let (Some(dst), Some(from)) = (&mut self.adapter, &src.adapter) {
            if dst.weight.shape() == from.weight.shape() {
                dst.weight = from.weight.clone();
                dst.bias = from.bias.clone();
                copied.push("adapter".to_owned());
            }
        }
        for head in &mut self.heads {
            let Some(other) = src.heads.iter().find(|h| h.spec.level == head.spec.level) else {
                continue;
            };
            if other.spec.layer_dims != head.spec.layer_dims {
                continue;
            }
            for (d, s) in head.layers.iter_mut().zip(&other.layers) {
                d.weight = s.weight.clone();
                d.bias = s.bias.clone();
            }
            copied.push(format!("head.{}", head.spec.level));
        }
        copied
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.meta.insert("definition".into(), serde_json::to_string(&self.definition)?);
        ck.meta.insert("taxonomy_checksum".into(), self.definition.taxonomy_checksum.clone());
        for (name, layer) in self.layers() {
            ck.put_linear(&name, layer);
        }
        Ok(ck)
    }

    /// Rebuilds a model from a checkpoint, refusing a different taxonomy.
    pub fn from_checkpoint(ck: &Checkpoint, tree: &TaxonomyTree) -> Result<Self> {
        let def: ModelDefinition = serde_json::from_str(
            ck.meta
                .get("definition")
                .ok_or_else(|| Error::Config("checkpoint has no model definition".into()))?,
        )?;
        let mut model = CascadeModel::new(def.config.clone(), tree, &mut numerics::seeded_rng(0))?;
        if model.definition.taxonomy_checksum != def.taxonomy_checksum {
            return Err(Error::ChecksumMismatch {
                expected: def.taxonomy_checksum,
                found: model.definition.taxonomy_checksum,
            });
        }
        if model.definition != def {
            return Err(Error::Config("checkpoint head specs disagree with the rebuilt model".into()));
        }
        let names: Vec<String> = model.layers().into_iter().map(|(n, _)| n).collect();
        for (name, layer) in names.iter().zip(model.layers_mut()) {
            ck.load_linear(name, layer)?;
        }
        Ok(model)
    }

    /// Flattened parameter values and gradients per tensor, in
    /// [`CascadeModel::layers`] order (weight then bias for each layer).
    pub fn param_blocks(&self) -> Vec<numerics::GradBlock> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push(numerics::GradBlock {
                name: format!("{name}/weight"),
                values: l.weight.values().to_vec(),
                analytic: l.grad_weight.values().to_vec(),
            });
            out.push(numerics::GradBlock {
                name: format!("{name}/bias"),
                values: l.bias.clone(),
                analytic: l.grad_bias.clone(),
            });
        }
        out
    }

    /// Inverse of [`CascadeModel::param_blocks`] for the values.
    pub fn set_param_values(&mut self, blocks: &[Vec<f64>]) -> Result<()> {
        let layers = self.layers_mut();
        if blocks.len() != layers.len() * 2 {
            return Err(Error::dim("parameter blocks", layers.len() * 2, blocks.len()));
        }
        for (l, pair) in layers.into_iter().zip(blocks.chunks(2)) {
            if pair[0].len() != l.weight.values().len() || pair[1].len() != l.bias.len() {
                return Err(Error::dim("parameter block", l.weight.values().len(), pair[0].len()));
            }
            l.weight.values_mut().copy_from_slice(&pair[0]);
            l.bias.copy_from_slice(&pair[1]);
        }
        Ok(())
    }
}

/// Row-wise softmax Jacobian-vector product: dz_i = p_i (g_i - Σ_j p_j g_j).
/// Masked entries have p_i = 0 and receive no gradient.
fn softmax_backward(probs: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for b in 0..probs.rows() {
        let p = probs.row(b);
        let g = grad.row(b);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pi, &gi)) in out.row_mut(b).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - inner);
        }
    }
    out
}
