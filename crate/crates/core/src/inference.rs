//! Decoding strategies turning head outputs into label paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CascadeModel, GreedyParents, MaskProvider, Unmasked};
use crate::numerics::{argmax, softmax, Matrix, Mode};
use crate::taxonomy::{Level, TaxonomyTree, DEPTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Levelwise,
    Beam,
    Flat,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Levelwise => "levelwise",
            Strategy::Beam => "beam",
            Strategy::Flat => "flat",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greedy" => Ok(Strategy::Greedy),
            "levelwise" | "level-wise" => Ok(Strategy::Levelwise),
            "beam" => Ok(Strategy::Beam),
            "flat" => Ok(Strategy::Flat),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

/// What level-wise decoding feeds to child heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AncestorFeed {
    /// Plain softmax of each ancestor head.
    #[default]
    Unmasked,
    /// The greedy (masked) ancestor distributions; only the selection ignores masks.
    Masked,
}

/// Decoded labels for one sample. Levels the model does not predict (and
/// cannot look up) are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: [Option<usize>; DEPTH],
    pub probs: [Option<Vec<f64>>; DEPTH],
    pub strategy: Strategy,
    pub path_valid: bool,
    /// Sum of log-probabilities of the labels the model itself selected.
    pub path_score: f64,
}

impl Prediction {
    pub fn label(&self, level: Level) -> Option<usize> {
        self.labels[level.ordinal()]
    }

    pub fn top1_prob(&self, level: Level) -> Option<f64> {
        let l = level.ordinal();
        Some(self.probs[l].as_ref()?[self.labels[l]?])
    }
}

/// True when every pair of consecutive predicted levels is a parent/child pair.
pub fn path_is_valid(tree: &TaxonomyTree, labels: &[Option<usize>; DEPTH]) -> bool {
    for l in 1..DEPTH {
        if let (Some(p), Some(c)) = (labels[l - 1], labels[l]) {
            match tree.parent(Level::ALL[l], c) {
                Ok(Some(actual)) if actual == p => {}
                _ => return false,
            }
        }
    }
    true
}

fn require_hierarchical(model: &CascadeModel) -> Result<()> {
    if !model.variant().is_hierarchical() {
        return Err(Error::Parameter(format!(
            "{} is a flat model; use flat lookup",
            model.variant()
        )));
    }
    Ok(())
}

fn from_forward(
    model: &CascadeModel,
    tree: &TaxonomyTree,
    features: &Matrix,
    masks: &dyn MaskProvider,
    strategy: Strategy,
    select_unmasked: bool,
) -> Result<Vec<Prediction>> {
    let out = model.forward(tree, features, masks, Mode::Eval, None)?;
    let mut preds = Vec::with_capacity(features.rows());
    for b in 0..features.rows() {
        let mut labels = [None; DEPTH];
        let mut probs: [Option<Vec<f64>>; DEPTH] = Default::default();
        let mut score = 0.0;
        for (pos, &level) in out.levels.iter().enumerate() {
            let p = if select_unmasked {
                softmax(out.logits[pos].row(b))
            } else {
                out.probs[pos].row(b).to_vec()
            };
            let k = argmax(&p);
            score += p[k].ln();
            labels[level.ordinal()] = Some(k);
            probs[level.ordinal()] = Some(p);
        }
        preds.push(Prediction {
            path_valid: path_is_valid(tree, &labels),
            labels,
            probs,
            strategy,
            path_score: score,
        });
    }
    Ok(preds)
}

/// Argmax at each level, masking every level below the class by the
/// children of the label just chosen above it.
pub fn decode_greedy(model: &CascadeModel, tree: &TaxonomyTree, features: &Matrix) -> Result<Vec<Prediction>> {
    require_hierarchical(model)?;
    from_forward(model, tree, features, &GreedyParents, Strategy::Greedy, false)
}

/// Independent argmax at each level with no taxonomic constraint; the
/// result may not be a valid chain.
pub fn decode_levelwise(
    model: &CascadeModel,
    tree: &TaxonomyTree,
    features: &Matrix,
    feed: AncestorFeed,
) -> Result<Vec<Prediction>> {
    require_hierarchical(model)?;
    match feed {
        AncestorFeed::Unmasked => from_forward(model, tree, features, &Unmasked, Strategy::Levelwise, false),
        AncestorFeed::Masked => from_forward(model, tree, features, &GreedyParents, Strategy::Levelwise, true),
    }
}

#[derive(Clone, Debug)]
struct BeamCandidate {
    path: Vec<usize>,
    score: f64,
    probs: Vec<Vec<f64>>,
}

/// Level-synchronous beam search keeping the `width` best partial paths by
/// summed log-probability. Each candidate recomputes its children's logits
/// from its own ancestor distributions. Ties go to the lexicographically
/// smaller path.
pub fn decode_beam(model: &CascadeModel, tree: &TaxonomyTree, features: &Matrix, width: usize) -> Result<Vec<Prediction>> {
    require_hierarchical(model)?;
    if width == 0 {
        return Err(Error::Parameter("beam width must be at least 1".into()));
    }
    let backbone = model.backbone(features)?;
    let levels = model.levels();
    let mut preds = Vec::with_capacity(features.rows());
    for b in 0..features.rows() {
        let mut beam = vec![BeamCandidate {
            path: Vec::new(),
            score: 0.0,
            probs: Vec::new(),
        }];
        for (pos, &level) in levels.iter().enumerate() {
            let mut next = Vec::new();
            for cand in &beam {
                let parent = cand.path.last().copied();
                let ancestors: Vec<&[f64]> = cand.probs.iter().map(Vec::as_slice).collect();
                let out = model.head_output(tree, pos, backbone.row(b), &ancestors, parent)?;
                let children: Vec<usize> = match (parent, level.parent()) {
                    (Some(p), Some(pl)) => tree.children(pl, p)?.to_vec(),
                    _ => (0..out.probs.len()).collect(),
                };
                for c in children {
                    let mut path = cand.path.clone();
                    path.push(c);
                    let mut probs = cand.probs.clone();
                    probs.push(out.probs.clone());
                    next.push(BeamCandidate {
                        path,
                        score: cand.score + out.probs[c].ln(),
                        probs,
                    });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
            next.truncate(width);
            beam = next;
        }
        let best = beam.swap_remove(0);
        let mut labels = [None; DEPTH];
        let mut probs: [Option<Vec<f64>>; DEPTH] = Default::default();
        for ((&level, label), p) in levels.iter().zip(best.path).zip(best.probs) {
            labels[level.ordinal()] = Some(label);
            probs[level.ordinal()] = Some(p);
        }
        preds.push(Prediction {
            path_valid: path_is_valid(tree, &labels),
            labels,
            probs,
            strategy: Strategy::Beam,
            path_score: best.score,
        });
    }
    Ok(preds)
}

/// Flat prediction at the model's single level; for a species model the
/// remaining levels come from the species' ancestor path.
pub fn flat_lookup(model: &CascadeModel, tree: &TaxonomyTree, features: &Matrix) -> Result<Vec<Prediction>> {
    if model.variant().is_hierarchical() {
        return Err(Error::Parameter(format!("{} is not a flat model", model.variant())));
    }
    let level = model.variant().deepest();
    let out = model.forward(tree, features, &Unmasked, Mode::Eval, None)?;
    let mut preds = Vec::with_capacity(features.rows());
    for b in 0..features.rows() {
        let p = out.probs[0].row(b).to_vec();
        let k = argmax(&p);
        let mut labels = [None; DEPTH];
        if level == Level::Species {
            labels = tree.ancestor_path(k)?.0.map(Some);
        } else {
            labels[level.ordinal()] = Some(k);
        }
        let score = p[k].ln();
        let mut probs: [Option<Vec<f64>>; DEPTH] = Default::default();
        probs[level.ordinal()] = Some(p);
        preds.push(Prediction {
            path_valid: path_is_valid(tree, &labels),
            labels,
            probs,
            strategy: Strategy::Flat,
            path_score: score,
        });
    }
    Ok(preds)
}

/// Dispatches on `strategy`; `beam_width` is only read for beam search.
pub fn predict(
    model: &CascadeModel,
    tree: &TaxonomyTree,
    features: &Matrix,
    strategy: Strategy,
    beam_width: usize,
) -> Result<Vec<Prediction>> {
    match strategy {
        Strategy::Greedy => decode_greedy(model, tree, features),
        Strategy::Levelwise => decode_levelwise(model, tree, features, AncestorFeed::Unmasked),
        Strategy::Beam => decode_beam(model, tree, features, beam_width),
        Strategy::Flat => flat_lookup(model, tree, features),
    }
}

/// Prediction CSV: `id,strategy`, five label names, five indices,
/// `path_valid,path_score`, then the five top-1 probabilities. Undefined
/// levels are left empty.
pub fn predictions_to_csv(ids: &[String], preds: &[Prediction], tree: &TaxonomyTree) -> Result<String> {
    if ids.len() != preds.len() {
        return Err(Error::dim("prediction ids", preds.len(), ids.len()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_owned(), "strategy".to_owned()];
    header.extend(Level::ALL.iter().map(|l| format!("{l}_name")));
    header.extend(Level::ALL.iter().map(|l| format!("{l}_index")));
    header.extend(["path_valid".to_owned(), "path_score".to_owned()]);
    header.extend(Level::ALL.iter().map(|l| format!("{l}_prob")));
    w.write_record(&header)?;
    for (id, p) in ids.iter().zip(preds) {
        let mut row = vec![id.clone(), p.strategy.to_string()];
        for level in Level::ALL {
            row.push(match p.label(level) {
                Some(i) => tree.name(level, i)?.to_owned(),
                None => String::new(),
            });
        }
        for level in Level::ALL {
            row.push(p.label(level).map(|i| i.to_string()).unwrap_or_default());
        }
        row.push(p.path_valid.to_string());
        row.push(p.path_score.to_string());
        for level in Level::ALL {
            row.push(p.top1_prob(level).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Labels read back from a prediction CSV (probability vectors are not stored).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub strategy: Strategy,
    pub labels: [Option<usize>; DEPTH],
    pub path_valid: bool,
    pub path_score: f64,
}

pub fn predictions_from_csv(text: &str, tree: &TaxonomyTree, source: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let width = rdr.headers()?.len();
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_owned(),
        line,
        message,
    };
    if width != 2 + 3 * DEPTH + 2 {
        return Err(perr(1, format!("expected {} columns, found {width}", 2 + 3 * DEPTH + 2)));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != width {
            return Err(perr(line, format!("expected {width} fields, found {}", row.len())));
        }
        let mut labels = [None; DEPTH];
        for level in Level::ALL {
            let l = level.ordinal();
            let (name, idx) = (&row[2 + l], &row[2 + DEPTH + l]);
            if idx.is_empty() {
                continue;
            }
            let i: usize = idx.parse().map_err(|e| perr(line, format!("{level} index: {e}")))?;
            if tree.name(level, i).map_err(|e| perr(line, e.to_string()))? != name {
                return Err(perr(line, format!("{level} index {i} does not name {name:?}")));
            }
            labels[l] = Some(i);
        }
        out.push(PredictionRow {
            id: row[0].to_owned(),
            strategy: row[1].parse().map_err(|e: Error| perr(line, e.to_string()))?,
            labels,
            path_valid: row[2 + 2 * DEPTH] == *"true",
            path_score: row[3 + 2 * DEPTH]
                .parse()
                .map_err(|e| perr(line, format!("path_score: {e}")))?,
        });
    }
    Ok(out)
}
