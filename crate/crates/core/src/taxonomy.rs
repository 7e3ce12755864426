//! The five-rank taxonomy tree: construction from (noisy) name records,
//! minimum-sample filtering, child masks, ancestor lookup and taxonomic
//! distance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ranks in every taxonomy handled by this crate.
pub const DEPTH: usize = 5;

/// A taxonomic rank. Ordering follows the tree from root to leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Class = 0,
    Order = 1,
    Family = 2,
    Genus = 3,
    Species = 4,
}

impl Level {
    pub const ALL: [Level; DEPTH] = [
        Level::Class,
        Level::Order,
        Level::Family,
        Level::Genus,
        Level::Species,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Level> {
        Level::ALL.get(ordinal).copied()
    }

    pub fn parent(self) -> Option<Level> {
        self.ordinal().checked_sub(1).and_then(Level::from_ordinal)
    }

    pub fn child(self) -> Option<Level> {
        Level::from_ordinal(self.ordinal() + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Class => "class",
            Level::Order => "order",
            Level::Family => "family",
            Level::Genus => "genus",
            Level::Species => "species",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parameter(format!("unknown taxonomic level {s:?}")))
    }
}

/// Per-level node indices of one root-to-leaf chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelPath(pub [usize; DEPTH]);

impl LabelPath {
    pub fn get(&self, level: Level) -> usize {
        self.0[level.ordinal()]
    }
}

/// One raw annotation: class, order, family, genus and species names.
/// Empty strings mark missing annotations.
pub type NamePath = [String; DEPTH];

/// Renames a taxon at one level before the tree is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRule {
    pub level: Level,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub merge_rules: Vec<MergeRule>,
    /// Case-insensitive substrings that mark a species name as uncertain.
    pub uncertainty_markers: Vec<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            merge_rules: vec![MergeRule {
                level: Level::Class,
                from: "Mediophyceae".into(),
                to: "Coscinodiscophyceae".into(),
            }],
            uncertainty_markers: vec!["sp.".into(), "cf.".into(), "?".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    /// Records renamed by a merge rule.
    pub merged: usize,
    pub removed_incomplete: usize,
    pub removed_uncertain: usize,
    /// Records moved under the modal parent of some taxon.
    pub conflicts_resolved: usize,
    pub retained: usize,
}

/// Output of [`build_tree`]: the tree plus the surviving (possibly
/// reassigned) records in input order.
#[derive(Clone, Debug)]
pub struct CleanedTaxonomy {
    pub tree: TaxonomyTree,
    pub records: Vec<NamePath>,
    pub report: CleanReport,
}

/// Binary mask over the children level of one parent node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRow {
    pub parent_level: Level,
    pub parent_index: usize,
    pub child_level: Level,
    pub bits: Vec<bool>,
}

/// Immutable five-level taxonomy with contiguous per-level indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyTree {
    names: [Vec<String>; DEPTH],
    // parents[0] is empty; parents[l][i] indexes level l-1.
    parents: [Vec<usize>; DEPTH],
    // children[l][i] indexes level l+1; empty for species.
    children: [Vec<Vec<usize>>; DEPTH],
    name_index: [HashMap<String, usize>; DEPTH],
}

impl TaxonomyTree {
    /// Builds a tree from explicit per-level names and parent indices.
    pub fn from_parts(names: [Vec<String>; DEPTH], parents: [Vec<usize>; DEPTH]) -> Result<Self> {
        if names.iter().any(Vec::is_empty) {
            return Err(Error::EmptyTaxonomy);
        }
        let mut name_index: [HashMap<String, usize>; DEPTH] = Default::default();
        for level in Level::ALL {
            let l = level.ordinal();
            for (i, name) in names[l].iter().enumerate() {
                if name.is_empty() || name.contains(['\t', '\n', '\r']) {
                    return Err(Error::Parameter(format!("invalid {level} name {name:?}")));
                }
                if name_index[l].insert(name.clone(), i).is_some() {
                    return Err(Error::Parameter(format!("duplicate {level} name {name:?}")));
                }
            }
            if l == 0 {
                if !parents[0].is_empty() {
                    return Err(Error::Parameter("class nodes cannot have parents".into()));
                }
                continue;
            }
            if parents[l].len() != names[l].len() {
                return Err(Error::dim(format!("{level} parent list"), names[l].len(), parents[l].len()));
            }
            if let Some(&bad) = parents[l].iter().find(|&&p| p >= names[l - 1].len()) {
                return Err(Error::OutOfRange {
                    what: "parent",
                    index: bad,
                    len: names[l - 1].len(),
                });
            }
        }
        let mut children: [Vec<Vec<usize>>; DEPTH] = Default::default();
        for l in 0..DEPTH {
            children[l] = vec![Vec::new(); names[l].len()];
        }
        for l in 1..DEPTH {
            for (i, &p) in parents[l].iter().enumerate() {
                children[l - 1][p].push(i);
            }
        }
        for l in 0..DEPTH - 1 {
            if let Some(i) = children[l].iter().position(Vec::is_empty) {
                return Err(Error::Parameter(format!(
                    "{} {:?} has no children; ragged hierarchies are not supported",
                    Level::ALL[l],
                    names[l][i]
                )));
            }
        }
        Ok(TaxonomyTree {
            names,
            parents,
            children,
            name_index,
        })
    }

    /// Builds a tree from consistent name paths. Nodes at each level are
    /// indexed in lexicographic name order. Fails if a name has two parents.
    pub fn from_name_paths<'a, I>(paths: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a NamePath>,
    {
        let mut parent_of: [BTreeMap<&str, &str>; DEPTH] = Default::default();
        let mut any = false;
        for path in paths {
            any = true;
            for l in 0..DEPTH {
                let parent = if l == 0 { "" } else { path[l - 1].as_str() };
                match parent_of[l].get(path[l].as_str()) {
                    Some(&p) if p != parent => {
                        return Err(Error::Parameter(format!(
                            "{} {:?} has two parents ({p:?} and {parent:?})",
                            Level::ALL[l],
                            path[l]
                        )))
                    }
                    Some(_) => {}
                    None => {
                        parent_of[l].insert(path[l].as_str(), parent);
                    }
                }
            }
        }
        if !any {
            return Err(Error::EmptyTaxonomy);
        }
        let names: [Vec<String>; DEPTH] =
            std::array::from_fn(|l| parent_of[l].keys().map(|s| s.to_string()).collect());
        let mut parents: [Vec<usize>; DEPTH] = Default::default();
        for l in 1..DEPTH {
            let upper: HashMap<&str, usize> =
                names[l - 1].iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
            parents[l] = parent_of[l].values().map(|p| upper[p]).collect();
        }
        TaxonomyTree::from_parts(names, parents)
    }

    pub fn count(&self, level: Level) -> usize {
        self.names[level.ordinal()].len()
    }

    pub fn counts(&self) -> [usize; DEPTH] {
        std::array::from_fn(|l| self.names[l].len())
    }

    pub fn names(&self, level: Level) -> &[String] {
        &self.names[level.ordinal()]
    }

    pub fn name(&self, level: Level, index: usize) -> Result<&str> {
        self.check(level, index)?;
        Ok(&self.names[level.ordinal()][index])
    }

    pub fn index_of(&self, level: Level, name: &str) -> Result<usize> {
        self.name_index[level.ordinal()]
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel {
                level,
                name: name.to_owned(),
            })
    }

    pub fn parent(&self, level: Level, index: usize) -> Result<Option<usize>> {
        self.check(level, index)?;
        Ok(match level.ordinal() {
            0 => None,
            l => Some(self.parents[l][index]),
        })
    }

    /// Indices (at the next level) of the children of `index`.
    pub fn children(&self, level: Level, index: usize) -> Result<&[usize]> {
        self.check(level, index)?;
        Ok(&self.children[level.ordinal()][index])
    }

    /// Ancestor of node `index` at `level` found at the coarser `target` level.
    pub fn ancestor(&self, level: Level, index: usize, target: Level) -> Result<usize> {
        self.check(level, index)?;
        if target > level {
            return Err(Error::Parameter(format!("{target} is not an ancestor level of {level}")));
        }
        let mut idx = index;
        for l in (target.ordinal() + 1..=level.ordinal()).rev() {
            idx = self.parents[l][idx];
        }
        Ok(idx)
    }

    /// Mask over `child_level` with bits set for the children of the parent node.
    pub fn child_mask(&self, parent_level: Level, parent_index: usize, child_level: Level) -> Result<MaskRow> {
        if parent_level.child() != Some(child_level) {
            return Err(Error::Parameter(format!(
                "{child_level} is not the child level of {parent_level}"
            )));
        }
        let kids = self.children(parent_level, parent_index)?;
        let mut bits = vec![false; self.count(child_level)];
        for &k in kids {
            bits[k] = true;
        }
        Ok(MaskRow {
            parent_level,
            parent_index,
            child_level,
            bits,
        })
    }

    /// The unique class-to-species chain ending at `species`.
    pub fn ancestor_path(&self, species: usize) -> Result<LabelPath> {
        self.check(Level::Species, species)?;
        let mut out = [0; DEPTH];
        out[DEPTH - 1] = species;
        for l in (1..DEPTH).rev() {
            out[l - 1] = self.parents[l][out[l]];
        }
        Ok(LabelPath(out))
    }

    /// Checks that consecutive entries of `path` satisfy the parent relation.
    pub fn is_valid_path(&self, path: &LabelPath) -> bool {
        (0..DEPTH).all(|l| path.0[l] < self.names[l].len())
            && (1..DEPTH).all(|l| self.parents[l][path.0[l]] == path.0[l - 1])
    }

    /// Levels one must ascend from the species rank to reach the lowest
    /// common ancestor: 0 for identical species, 1 for the same genus, up to
    /// 5 when the two species belong to different classes.
    pub fn taxonomic_distance(&self, species_a: usize, species_b: usize) -> Result<u8> {
        let a = self.ancestor_path(species_a)?;
        let b = self.ancestor_path(species_b)?;
        if species_a == species_b {
            return Ok(0);
        }
        for l in (0..DEPTH - 1).rev() {
            if a.0[l] == b.0[l] {
                return Ok((DEPTH - 1 - l) as u8);
            }
        }
        Ok(DEPTH as u8)
    }

    /// Canonical text form: one `level <name> <count>` header per level
    /// followed by node names in index order, tab-separated from the parent
    /// index for non-class levels.
    pub fn to_text(&self) -> String {
        let mut out = String::from("taxonomy v1\n");
        for level in Level::ALL {
            let l = level.ordinal();
            out.push_str(&format!("level {} {}\n", level, self.names[l].len()));
            for (i, name) in self.names[l].iter().enumerate() {
                out.push_str(name);
                if l > 0 {
                    out.push('\t');
                    out.push_str(&self.parents[l][i].to_string());
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: "<taxonomy>".into(),
            line,
            message,
        };
        let mut lines = text.split('\n').enumerate().map(|(i, s)| (i + 1, s));
        match lines.next() {
            Some((_, "taxonomy v1")) => {}
            _ => return Err(err(1, "expected header `taxonomy v1`".into())),
        }
        let mut names: [Vec<String>; DEPTH] = Default::default();
        let mut parents: [Vec<usize>; DEPTH] = Default::default();
        for level in Level::ALL {
            let l = level.ordinal();
            let (no, header) = lines.next().ok_or_else(|| err(0, format!("missing {level} section")))?;
            let count = header
                .strip_prefix(&format!("level {level} "))
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| err(no, format!("expected `level {level} <count>`")))?;
            for _ in 0..count {
                let (no, line) = lines.next().ok_or_else(|| err(no, format!("truncated {level} section")))?;
                if l == 0 {
                    names[0].push(line.to_owned());
                } else {
                    let (name, parent) = line
                        .split_once('\t')
                        .ok_or_else(|| err(no, "expected `<name>\\t<parent index>`".into()))?;
                    let parent = parent
                        .parse::<usize>()
                        .map_err(|e| err(no, format!("bad parent index: {e}")))?;
                    names[l].push(name.to_owned());
                    parents[l].push(parent);
                }
            }
        }
        match (lines.next(), lines.next()) {
            (Some((_, "")), None) => {}
            (Some((no, _)), _) | (_, Some((no, _))) => return Err(err(no, "trailing content".into())),
            (None, None) => return Err(err(0, "missing final newline".into())),
        }
        TaxonomyTree::from_parts(names, parents)
    }

    /// Checksum of the canonical text form.
    pub fn checksum(&self) -> String {
        crate::io::checksum(self.to_text().as_bytes())
    }

    /// Species index paths are the cheapest unique key for a record's labels.
    pub fn name_path(&self, path: &LabelPath) -> Result<NamePath> {
        let mut out: NamePath = Default::default();
        for level in Level::ALL {
            out[level.ordinal()] = self.name(level, path.get(level))?.to_owned();
        }
        Ok(out)
    }

    /// Resolves a name tuple to indices, requiring a valid chain.
    pub fn resolve(&self, names: &NamePath) -> Result<LabelPath> {
        let mut out = [0; DEPTH];
        for level in Level::ALL {
            out[level.ordinal()] = self.index_of(level, &names[level.ordinal()])?;
        }
        let path = LabelPath(out);
        if !self.is_valid_path(&path) {
            return Err(Error::Parameter(format!(
                "labels {names:?} do not form a chain in the taxonomy"
            )));
        }
        Ok(path)
    }

    fn check(&self, level: Level, index: usize) -> Result<()> {
        let len = self.names[level.ordinal()].len();
        if index >= len {
            return Err(Error::OutOfRange {
                what: level.name(),
                index,
                len,
            });
        }
        Ok(())
    }
}

/// Reads raw name records from CSV. The header must name the five ranks
/// (any case, any position); other columns are ignored and missing cells
/// read as empty names.
pub fn read_name_paths(text: &str, source: &str) -> Result<Vec<NamePath>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_owned(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let mut cols = [0usize; DEPTH];
    for level in Level::ALL {
        cols[level.ordinal()] = header
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(level.name()))
            .ok_or_else(|| perr(1, format!("no {level} column in header")))?;
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| perr(i + 2, e.to_string()))?;
        out.push(cols.map(|c| row.get(c).unwrap_or("").to_owned()));
    }
    Ok(out)
}

/// Cleans raw name records and builds the tree over the survivors.
///
/// Steps run in order: merge rules, removal of records missing any rank
/// name, removal of species names carrying an uncertainty marker, then
/// single-parent enforcement by majority vote (ties go to the
/// lexicographically smallest parent name; outvoted records are moved, not
/// dropped).
pub fn build_tree(records: &[NamePath], config: &CleanConfig) -> Result<CleanedTaxonomy> {
    let mut report = CleanReport {
        input: records.len(),
        ..Default::default()
    };
    let markers: Vec<String> = config.uncertainty_markers.iter().map(|m| m.to_lowercase()).collect();
    let mut kept: Vec<NamePath> = Vec::with_capacity(records.len());
    for rec in records {
        let mut rec: NamePath = rec.clone().map(|s| s.trim().to_owned());
        let mut merged = false;
        for rule in &config.merge_rules {
            let slot = &mut rec[rule.level.ordinal()];
            if *slot == rule.from {
                *slot = rule.to.clone();
                merged = true;
            }
        }
        if merged {
            report.merged += 1;
        }
        if rec.iter().any(String::is_empty) {
            report.removed_incomplete += 1;
            continue;
        }
        let species = rec[DEPTH - 1].to_lowercase();
        if markers.iter().any(|m| !m.is_empty() && species.contains(m.as_str())) {
            report.removed_uncertain += 1;
            continue;
        }
        kept.push(rec);
    }
    if kept.is_empty() {
        return Err(Error::EmptyTaxonomy);
    }

    let mut changed = vec![false; kept.len()];
    for l in 1..DEPTH {
        let mut votes: HashMap<&str, BTreeMap<&str, usize>> = HashMap::new();
        for rec in &kept {
            *votes.entry(&rec[l]).or_default().entry(&rec[l - 1]).or_default() += 1;
        }
        // Max count; BTreeMap iteration order makes the smallest name win ties.
        let modal: HashMap<String, String> = votes
            .into_iter()
            .map(|(child, parents)| {
                let mut best: Option<(&str, usize)> = None;
                for (p, c) in parents {
                    if best.is_none_or(|(_, bc)| c > bc) {
                        best = Some((p, c));
                    }
                }
                (child.to_owned(), best.unwrap().0.to_owned())
            })
            .collect();
        // Levels above l-1 are already single-parent, so each parent name has one chain.
        let mut chain_of: HashMap<String, Vec<String>> = HashMap::new();
        for rec in &kept {
            chain_of
                .entry(rec[l - 1].clone())
                .or_insert_with(|| rec[..l - 1].to_vec());
        }
        for (rec, flag) in kept.iter_mut().zip(changed.iter_mut()) {
            let target = &modal[&rec[l]];
            if rec[l - 1] != *target {
                let chain = &chain_of[target];
                rec[..l - 1].clone_from_slice(chain);
                rec[l - 1] = target.clone();
                *flag = true;
            }
        }
    }
    report.conflicts_resolved = changed.iter().filter(|&&c| c).count();
    report.retained = kept.len();
    let tree = TaxonomyTree::from_name_paths(&kept)?;
    Ok(CleanedTaxonomy {
        tree,
        records: kept,
        report,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: usize,
    pub levels: Vec<Level>,
    /// Records removed, attributed to the coarsest filtered level they failed.
    pub removed_per_level: [usize; DEPTH],
    /// Counting passes evaluated, including the final one that removed
    /// nothing. On a strict tree this is 1 (no removals) or 2.
    pub passes: usize,
    pub retained: usize,
}

/// Result of [`filter_min_samples`]: surviving record positions, the tree
/// rebuilt over them, and their remapped label paths.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub tree: TaxonomyTree,
    pub paths: Vec<LabelPath>,
    pub report: FilterReport,
}

/// Repeatedly drops records whose taxon at any filtered level has fewer than
/// `threshold` records until nothing changes, then rebuilds the tree over the
/// survivors so index spaces stay contiguous.
pub fn filter_min_samples(
    tree: &TaxonomyTree,
    paths: &[LabelPath],
    threshold: usize,
    levels: &[Level],
) -> Result<FilterOutcome> {
    if threshold == 0 {
        return Err(Error::Parameter("threshold must be at least 1".into()));
    }
    if levels.contains(&Level::Class) {
        return Err(Error::Parameter("the class level cannot be filtered".into()));
    }
    let levels: Vec<Level> = levels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut report = FilterReport {
        threshold,
        levels: levels.clone(),
        ..Default::default()
    };
    let mut alive: Vec<usize> = (0..paths.len()).collect();
    loop {
        report.passes += 1;
        let mut counts: Vec<HashMap<usize, usize>> = vec![HashMap::new(); DEPTH];
        for &r in &alive {
            for &level in &levels {
                *counts[level.ordinal()].entry(paths[r].get(level)).or_default() += 1;
            }
        }
        let mut next = Vec::with_capacity(alive.len());
        let mut removed = 0;
        for &r in &alive {
            let failing = levels
                .iter()
                .find(|&&level| counts[level.ordinal()][&paths[r].get(level)] < threshold);
            match failing {
                Some(level) => {
                    report.removed_per_level[level.ordinal()] += 1;
                    removed += 1;
                }
                None => next.push(r),
            }
        }
        if removed == 0 {
            break;
        }
        if next.is_empty() {
            let exhausted = levels
                .iter()
                .copied()
                .find(|level| counts[level.ordinal()].values().all(|&c| c < threshold))
                .unwrap_or_else(|| {
                    *levels
                        .iter()
                        .max_by_key(|l| (report.removed_per_level[l.ordinal()], std::cmp::Reverse(**l)))
                        .expect("levels is non-empty when records were removed")
                });
            return Err(Error::EmptyAfterFiltering { level: exhausted });
        }
        alive = next;
    }
    if alive.is_empty() {
        return Err(Error::EmptyTaxonomy);
    }
    report.retained = alive.len();
    let name_paths = alive
        .iter()
        .map(|&r| tree.name_path(&paths[r]))
        .collect::<Result<Vec<_>>>()?;
    let new_tree = TaxonomyTree::from_name_paths(&name_paths)?;
    let new_paths = name_paths
        .iter()
        .map(|n| new_tree.resolve(n))
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterOutcome {
        kept: alive,
        tree: new_tree,
        paths: new_paths,
        report,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn np(c: &str, o: &str, f: &str, g: &str, s: &str) -> NamePath {
        [c, o, f, g, s].map(str::to_owned)
    }

    /// The order-level taxonomy behind the masking worked example: five
    /// pennate orders, two centric and two araphid ones.
    pub fn masking_example() -> TaxonomyTree {
        let rows = [
            ("Bacillariophyceae", "Naviculales"),
            ("Bacillariophyceae", "Eunotiales"),
            ("Bacillariophyceae", "Cymbellales"),
            ("Bacillariophyceae", "Mastogloiales"),
            ("Bacillariophyceae", "Cocconeidales"),
            ("Coscinodiscophyceae", "Thalassiosirales"),
            ("Coscinodiscophyceae", "Melosirales"),
            ("Fragilariophyceae", "Fragilariales"),
            ("Fragilariophyceae", "Tabellariales"),
        ];
        let paths: Vec<NamePath> = rows
            .iter()
            .map(|(c, o)| np(c, o, &format!("{o}-fam"), &format!("{o}-gen"), &format!("{o}-sp")))
            .collect();
        TaxonomyTree::from_name_paths(&paths).unwrap()
    }
}
