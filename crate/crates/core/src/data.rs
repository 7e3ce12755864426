//! Labelled feature datasets: CSV I/O, external feature providers,
//! stratified splitting and a synthetic hierarchical Gaussian generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix};
use crate::taxonomy::{self, FilterReport, LabelPath, Level, NamePath, TaxonomyTree, DEPTH};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Parameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: LabelPath,
    pub split: Split,
}

/// Records sharing one taxonomy (identified by checksum) and one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    taxonomy_checksum: String,
    feature_dim: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(tree: &TaxonomyTree, records: Vec<Record>) -> Result<Self> {
        let feature_dim = records.first().map_or(0, |r| r.features.len());
        for r in &records {
            if r.features.len() != feature_dim {
                return Err(Error::dim(format!("features of record {:?}", r.id), feature_dim, r.features.len()));
            }
            if !tree.is_valid_path(&r.labels) {
                return Err(Error::Parameter(format!(
                    "record {:?} has labels {:?} that are not a chain in the taxonomy",
                    r.id, r.labels.0
                )));
            }
        }
        Ok(Dataset {
            taxonomy_checksum: tree.checksum(),
            feature_dim,
            records,
        })
    }

    pub fn taxonomy_checksum(&self) -> &str {
        &self.taxonomy_checksum
    }

    pub fn check_taxonomy(&self, tree: &TaxonomyTree) -> Result<()> {
        let found = tree.checksum();
        if found != self.taxonomy_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.taxonomy_checksum.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn features(&self) -> Matrix {
        let values = self.records.iter().flat_map(|r| r.features.iter().copied()).collect();
        Matrix::from_vec(self.records.len(), self.feature_dim, values).expect("record widths are validated")
    }

    pub fn labels(&self) -> Vec<LabelPath> {
        self.records.iter().map(|r| r.labels).collect()
    }

    /// Records of one split, in dataset order.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            taxonomy_checksum: self.taxonomy_checksum.clone(),
            feature_dim: self.feature_dim,
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    /// Minimum-sample filtering; returns the surviving records relabelled
    /// against the rebuilt tree.
    pub fn filter_min_samples(
        &self,
        tree: &TaxonomyTree,
        threshold: usize,
        levels: &[Level],
    ) -> Result<(Dataset, TaxonomyTree, FilterReport)> {
        self.check_taxonomy(tree)?;
        let out = taxonomy::filter_min_samples(tree, &self.labels(), threshold, levels)?;
        let records = out
            .kept
            .iter()
            .zip(&out.paths)
            .map(|(&i, &labels)| Record {
                labels,
                ..self.records[i].clone()
            })
            .collect();
        let ds = Dataset::new(&out.tree, records)?;
        Ok((ds, out.tree, out.report))
    }

    /// Serialises as CSV: `id`, the five label names, `f0..`, and a trailing
    /// `split` column when any record is assigned.
    pub fn to_csv(&self, tree: &TaxonomyTree) -> Result<String> {
        self.check_taxonomy(tree)?;
        let with_split = self.records.iter().any(|r| r.split != Split::Unassigned);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = vec!["id".into()];
        header.extend(Level::ALL.iter().map(|l| l.name().to_owned()));
        header.extend((0..self.feature_dim).map(|i| format!("f{i}")));
        if with_split {
            header.push("split".into());
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = vec![r.id.clone()];
            row.extend(tree.name_path(&r.labels)?);
            row.extend(r.features.iter().map(|v| v.to_string()));
            if with_split {
                row.push(r.split.to_string());
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the CSV form. When `provider` is given, feature columns may be
    /// absent and features are looked up by record id.
    pub fn from_csv(text: &str, tree: &TaxonomyTree, source: &str, provider: Option<&FeatureProvider>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let perr = |line: usize, message: String| Error::Parse {
            path: source.to_owned(),
            line,
            message,
        };
        if header.len() < 1 + DEPTH
            || header.get(0) != Some("id")
            || Level::ALL.iter().enumerate().any(|(i, l)| header.get(i + 1) != Some(l.name()))
        {
            return Err(perr(1, "header must start with id,class,order,family,genus,species".into()));
        }
        let has_split = header.iter().next_back() == Some("split");
        let n_features = header.len() - 1 - DEPTH - usize::from(has_split);
        for (i, name) in header.iter().skip(1 + DEPTH).take(n_features).enumerate() {
            if name != format!("f{i}") {
                return Err(perr(1, format!("expected feature column f{i}, found {name:?}")));
            }
        }
        if n_features == 0 && provider.is_none() {
            return Err(perr(1, "no feature columns and no feature provider".into()));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() != header.len() {
                return Err(perr(line, format!("expected {} fields, found {}", header.len(), row.len())));
            }
            let id = row[0].to_owned();
            let names: NamePath = std::array::from_fn(|i| row[i + 1].to_owned());
            let labels = tree.resolve(&names).map_err(|e| perr(line, e.to_string()))?;
            let features = if n_features > 0 {
                (0..n_features)
                    .map(|i| {
                        row[1 + DEPTH + i]
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| perr(line, format!("feature f{i}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                provider
                    .expect("checked above")
                    .get(&id)
                    .ok_or_else(|| perr(line, format!("feature provider has no row for id {id:?}")))?
                    .to_vec()
            };
            let split = if has_split {
                row[row.len() - 1].parse().map_err(|e: Error| perr(line, e.to_string()))?
            } else {
                Split::Unassigned
            };
            records.push(Record {
                id,
                features,
                labels,
                split,
            });
        }
        Dataset::new(tree, records).map_err(|e| perr(0, e.to_string()))
    }
}

pub fn save_dataset(ds: &Dataset, tree: &TaxonomyTree, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, ds.to_csv(tree)?.as_bytes())
}

pub fn load_dataset(path: &Path, tree: &TaxonomyTree) -> Result<Dataset> {
    let text = crate::io::read_to_string(path)?;
    Dataset::from_csv(&text, tree, &path.display().to_string(), None)
}

pub fn load_dataset_with_provider(path: &Path, tree: &TaxonomyTree, provider: &FeatureProvider) -> Result<Dataset> {
    let text = crate::io::read_to_string(path)?;
    Dataset::from_csv(&text, tree, &path.display().to_string(), Some(provider))
}

/// Precomputed feature vectors keyed by record id (`id,f0,f1,...`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureProvider {
    rows: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl FeatureProvider {
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let width = rdr.headers()?.len();
        let perr = |line: usize, message: String| Error::Parse {
            path: source.to_owned(),
            line,
            message,
        };
        if width < 2 {
            return Err(perr(1, "provider header must be id,f0,...".into()));
        }
        let mut rows = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() != width {
                return Err(perr(line, format!("expected {width} fields, found {}", row.len())));
            }
            let v = row
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|e| perr(line, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if rows.insert(row[0].to_owned(), v).is_some() {
                return Err(perr(line, format!("duplicate id {:?}", &row[0])));
            }
        }
        Ok(FeatureProvider { rows, dim: width - 1 })
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureProvider::from_csv(&crate::io::read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub stratify_level: Level,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.70, 0.15, 0.15],
            stratify_level: Level::Species,
            seed: 42,
        }
    }
}

/// Largest-remainder allocation of `n` items over `fractions`; equal
/// remainders favour the earlier split.
pub fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    // Remainders are compared on a 1e-9 grid so 0.15 * 10 ties with itself.
    let key = |i: usize| ((quotas[i] - counts[i] as f64).max(0.0) * 1e9).round() as i64;
    order.sort_by_key(|&i| (std::cmp::Reverse(key(i)), i));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-stratum seeded shuffle and largest-remainder partition. Strata with
/// fewer than three records place one record per split in train, val, test
/// priority order.
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::Parameter("cannot split an empty dataset".into()));
    }
    if spec.fractions.iter().any(|&f| f <= 0.0) || (spec.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {:?} must be positive and sum to 1",
            spec.fractions
        )));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        strata.entry(r.labels.get(spec.stratify_level)).or_default().push(i);
    }
    let mut rng = seeded_rng(spec.seed);
    let mut out = ds.clone();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let counts = if members.len() < 3 {
            let mut c = [0; 3];
            c[..members.len()].fill(1);
            c
        } else {
            allocate(members.len(), &spec.fractions)
        };
        let splits = [Split::Train, Split::Val, Split::Test];
        let mut it = members.iter();
        for (split, count) in splits.into_iter().zip(counts) {
            for &i in it.by_ref().take(count) {
                out.records[i].split = split;
            }
        }
    }
    Ok(out)
}

/// How the synthetic taxonomy is shaped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyShape {
    /// Exact node counts per level; each parent gets at least one child and
    /// the rest are spread uniformly at random.
    Counts([usize; DEPTH]),
    /// Number of classes, then an inclusive children-per-node range per level.
    Branching {
        classes: usize,
        children: [(usize, usize); DEPTH - 1],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: TaxonomyShape,
    pub feature_dim: usize,
    /// Offset scale of each level's centre from its parent's (the class
    /// level is offset from the origin).
    pub dispersion: [f64; DEPTH],
    /// Within-species noise scale.
    pub noise: f64,
    /// Inclusive range of records per species.
    pub samples_per_species: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: TaxonomyShape::Counts([3, 6, 9, 12, 24]),
            feature_dim: 32,
            dispersion: [3.0, 1.6, 1.0, 0.7, 0.5],
            noise: 0.6,
            samples_per_species: (40, 40),
            seed: 42,
        }
    }
}

/// Builds a random taxonomy of the requested shape, assigns each node a
/// Gaussian centre offset from its parent's, and draws records around
/// species centres. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TaxonomyTree, Dataset)> {
    if spec.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be positive".into()));
    }
    if spec.dispersion.iter().any(|&d| !(d > 0.0)) || !(spec.noise >= 0.0) {
        return Err(Error::Config("dispersions must be positive and noise non-negative".into()));
    }
    let (lo, hi) = spec.samples_per_species;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad samples_per_species range {lo}..={hi}")));
    }
    let mut rng = seeded_rng(spec.seed);
    // parents[l][i] for l >= 1.
    let mut parents: [Vec<usize>; DEPTH] = Default::default();
    let mut counts = [0usize; DEPTH];
    match &spec.shape {
        TaxonomyShape::Counts(c) => {
            if c[0] == 0 || c.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config(format!(
                    "level counts {c:?} must be positive and non-decreasing"
                )));
            }
            counts = *c;
            for l in 1..DEPTH {
                let mut p: Vec<usize> = (0..c[l - 1]).collect();
                p.extend((c[l - 1]..c[l]).map(|_| rng.random_range(0..c[l - 1])));
                p.sort_unstable();
                parents[l] = p;
            }
        }
        TaxonomyShape::Branching { classes, children } => {
            if *classes == 0 || children.iter().any(|&(a, b)| a == 0 || a > b) {
                return Err(Error::Config("branching ranges must be non-empty and start at 1".into()));
            }
            counts[0] = *classes;
            for l in 1..DEPTH {
                let (a, b) = children[l - 1];
                for parent in 0..counts[l - 1] {
                    let k = rng.random_range(a..=b);
                    parents[l].extend(std::iter::repeat_n(parent, k));
                }
                counts[l] = parents[l].len();
            }
        }
    }

    let normal = |rng: &mut crate::numerics::RngState, scale: f64, dim: usize| -> Vec<f64> {
        (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut centres: [Vec<Vec<f64>>; DEPTH] = Default::default();
    for l in 0..DEPTH {
        for i in 0..counts[l] {
            let offset = normal(&mut rng, spec.dispersion[l], spec.feature_dim);
            let centre = if l == 0 {
                offset
            } else {
                let base = &centres[l - 1][parents[l][i]];
                base.iter().zip(&offset).map(|(a, b)| a + b).collect()
            };
            centres[l].push(centre);
        }
    }

    let prefixes = ["C", "O", "F", "G", "S"];
    let width = counts.iter().max().copied().unwrap_or(1).to_string().len();
    let name = |l: usize, i: usize| format!("{}{:0width$}", prefixes[l], i);
    let mut species_paths: Vec<NamePath> = Vec::with_capacity(counts[DEPTH - 1]);
    for s in 0..counts[DEPTH - 1] {
        let mut idx = [0usize; DEPTH];
        idx[DEPTH - 1] = s;
        for l in (1..DEPTH).rev() {
            idx[l - 1] = parents[l][idx[l]];
        }
        species_paths.push(std::array::from_fn(|l| name(l, idx[l])));
    }
    let tree = TaxonomyTree::from_name_paths(&species_paths)?;

    let mut records = Vec::new();
    for (s, path) in species_paths.iter().enumerate() {
        let labels = tree.resolve(path)?;
        let n = rng.random_range(lo..=hi);
        for _ in 0..n {
            let noise = normal(&mut rng, spec.noise, spec.feature_dim);
            let features = centres[DEPTH - 1][s].iter().zip(&noise).map(|(c, e)| c + e).collect();
            records.push(Record {
                id: format!("r{:06}", records.len()),
                features,
                labels,
                split: Split::Unassigned,
            });
        }
    }
    let ds = Dataset::new(&tree, records)?;
    Ok((tree, ds))
}

/// Mean feature vector of every taxon at `level` over `ds`. Used by the
/// nearest-centroid reference classifier in tests and demos.
pub fn centroids(ds: &Dataset, tree: &TaxonomyTree, level: Level) -> Vec<Vec<f64>> {
    let n = tree.count(level);
    let mut sums = vec![vec![0.0; ds.feature_dim()]; n];
    let mut counts = vec![0usize; n];
    for r in ds.records() {
        let t = r.labels.get(level);
        counts[t] += 1;
        for (s, v) in sums[t].iter_mut().zip(&r.features) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}
