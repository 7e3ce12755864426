use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use taxocascade::data::{
    generate_synthetic, load_dataset, load_dataset_with_provider, stratified_split, Dataset, FeatureProvider, Split,
    SplitSpec, SyntheticSpec, TaxonomyShape,
};
use taxocascade::evaluation::{compare_models, evaluate, MetricsReport};
use taxocascade::inference::{predict, predictions_from_csv, predictions_to_csv};
use taxocascade::io::read_to_string;
use taxocascade::model::{CascadeModel, ModelConfig, Variant};
use taxocascade::numerics::{seeded_rng, Checkpoint};
use taxocascade::taxonomy::{build_tree, read_name_paths, CleanConfig};
use taxocascade::training::{epoch_logs_to_csv, fit, progressive_chain, Stage, TrainConfig, Validation};
use taxocascade::{Error, Level, TaxonomyTree};

use crate::manifest::Run;
use crate::{Cli, Command, FeatureArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_divergence() => 3,
            CliError::Core(Error::Config(_) | Error::Parameter(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_tree(path: &Path) -> Result<TaxonomyTree> {
    TaxonomyTree::from_text(&read_to_string(path)?).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    }.into())
}

fn load_data(path: &Path, tree: &TaxonomyTree, provider: Option<&Path>) -> Result<Dataset> {
    Ok(match provider {
        Some(p) => load_dataset_with_provider(path, tree, &FeatureProvider::load(p)?)?,
        None => load_dataset(path, tree)?,
    })
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli { seed, threads, out_dir, command } = cli;
    let run = |name| Run::new(name, &out_dir, seed, threads);
    match command {
        Command::TaxonomyBuild { records, config } => taxonomy_build(run("taxonomy-build"), &records, config.as_deref()),
        Command::TaxonomyInspect { taxonomy } => taxonomy_inspect(run("taxonomy-inspect"), &taxonomy),
        Command::DataSynth(args) => data_synth(run("data-synth"), seed, args),
        Command::DataFilter { data, taxonomy, min_samples, levels } => {
            data_filter(run("data-filter"), &data, &taxonomy, min_samples, levels)
        }
        Command::DataSplit { data, taxonomy, fractions, stratify_level } => {
            data_split(run("data-split"), seed, &data, &taxonomy, fractions, stratify_level)
        }
        Command::Train(args) => train(run("train"), seed, args),
        Command::TrainProgressive { config } => train_progressive(run("train-progressive"), seed, &config),
        Command::Infer { model, taxonomy, data, features, strategy, beam_width } => {
            infer(run("infer"), &model, &taxonomy, &data, features, strategy, beam_width)
        }
        Command::Eval { pred, truth, taxonomy, baseline, name } => {
            eval(run("eval"), &pred, &truth, &taxonomy, baseline.as_deref(), &name)
        }
        Command::Compare { reports } => compare(run("compare"), &reports),
    }
}

fn taxonomy_build(mut run: Run, records: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: CleanConfig = match config {
        Some(p) => {
            run.input("config", p)?;
            read_toml(p)?
        }
        None => CleanConfig::default(),
    };
    run.input("records", records)?;
    let names = read_name_paths(&read_to_string(records)?, &records.display().to_string())?;
    let cleaned = build_tree(&names, &cfg)?;
    eprintln!(
        "{} of {} records kept; taxonomy checksum {}",
        cleaned.records.len(),
        names.len(),
        cleaned.tree.checksum()
    );
    run.config(&cfg)?;
    run.output("taxonomy.txt", cleaned.tree.to_text());
    run.output("clean_report.json", json_bytes(&cleaned.report)?);
    run.finish()
}

fn taxonomy_inspect(mut run: Run, path: &Path) -> Result<()> {
    run.input("taxonomy", path)?;
    let tree = load_tree(path)?;
    let mut levels = Vec::new();
    println!("checksum {}", tree.checksum());
    for (i, level) in Level::ALL.iter().enumerate() {
        let n = tree.count(*level);
        let branching = if i + 1 < Level::ALL.len() {
            let counts: Vec<usize> = (0..n)
                .map(|p| tree.children(*level, p).map(|c| c.len()))
                .collect::<taxocascade::Result<_>>()?;
            let (min, max) = (counts.iter().min().copied().unwrap_or(0), counts.iter().max().copied().unwrap_or(0));
            println!("{:<8} {n:>6} nodes, {min}-{max} children each", level.name());
            Some((min, max))
        } else {
            println!("{:<8} {n:>6} nodes", level.name());
            None
        };
        levels.push(json!({ "level": level, "nodes": n, "children": branching }));
    }
    run.output("taxonomy_summary.json", json_bytes(&json!({ "checksum": tree.checksum(), "levels": levels }))?);
    run.finish()
}

fn data_synth(mut run: Run, seed: Option<u64>, args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(p) => {
            run.input("config", p)?;
            read_toml(p)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(shape) = args.shape {
        spec.shape = TaxonomyShape::Counts(shape);
    }
    if let Some(d) = args.features {
        spec.feature_dim = d;
    }
    if let Some(n) = args.samples {
        spec.samples_per_species = (n, n);
    }
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (tree, ds) = generate_synthetic(&spec)?;
    run.config(&spec)?;
    run.output("taxonomy.txt", tree.to_text());
    run.output("synthetic.csv", ds.to_csv(&tree)?);
    run.finish()
}

fn data_filter(mut run: Run, data: &Path, taxonomy: &Path, min_samples: usize, levels: Vec<Level>) -> Result<()> {
    let levels = if levels.is_empty() { Level::ALL[1..].to_vec() } else { levels };
    run.input("data", data)?;
    run.input("taxonomy", taxonomy)?;
    let tree = load_tree(taxonomy)?;
    let ds = load_dataset(data, &tree)?;
    let (filtered, new_tree, report) = ds.filter_min_samples(&tree, min_samples, &levels)?;
    let plural = if report.passes == 1 { "" } else { "es" };
    eprintln!("{} of {} records kept in {} pass{plural}", filtered.len(), ds.len(), report.passes);
    run.config(json!({ "min_samples": min_samples, "levels": levels }))?;
    run.output("filtered.csv", filtered.to_csv(&new_tree)?);
    run.output("filtered_taxonomy.txt", new_tree.to_text());
    run.output("filter_report.json", json_bytes(&report)?);
    run.finish()
}

fn data_split(
    mut run: Run,
    seed: Option<u64>,
    data: &Path,
    taxonomy: &Path,
    fractions: [f64; 3],
    stratify_level: Level,
) -> Result<()> {
    run.input("data", data)?;
    run.input("taxonomy", taxonomy)?;
    let tree = load_tree(taxonomy)?;
    let ds = load_dataset(data, &tree)?;
    let mut spec = SplitSpec { fractions, stratify_level, ..SplitSpec::default() };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let split = stratified_split(&ds, &spec)?;
    run.config(&spec)?;
    run.output("split.csv", split.to_csv(&tree)?);
    run.finish()
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    adapter_dim: Option<usize>,
    width_divisor: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageConfig {
    variant: Variant,
    data: PathBuf,
    taxonomy: PathBuf,
    #[serde(default)]
    val: Option<PathBuf>,
    #[serde(default)]
    provider: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainConfig,
    stage: Vec<StageConfig>,
}

fn check_train_config(cfg: &TrainConfig) -> Result<()> {
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Train and validation sets: from `--val` when given, otherwise from the
/// split column of the data file.
fn train_val(run: &mut Run, data: &Path, val: Option<&Path>, tree: &TaxonomyTree, provider: Option<&Path>, prefix: &str) -> Result<(Dataset, Dataset)> {
    run.input(format!("{prefix}data"), data)?;
    if let Some(p) = provider {
        run.input(format!("{prefix}provider"), p)?;
    }
    let ds = load_data(data, tree, provider)?;
    let pick = |ds: &Dataset, split: Split| {
        if ds.records().iter().all(|r| r.split == Split::Unassigned) {
            ds.clone()
        } else {
            ds.subset(split)
        }
    };
    let (train, val) = match val {
        Some(v) => {
            run.input(format!("{prefix}val"), v)?;
            (pick(&ds, Split::Train), pick(&load_data(v, tree, provider)?, Split::Val))
        }
        None => (ds.subset(Split::Train), ds.subset(Split::Val)),
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::ContractViolation(format!(
            "{}: no training or no validation records; run data-split or pass --val",
            data.display()
        ))
        .into());
    }
    Ok((train, val))
}

fn train(mut run: Run, seed: Option<u64>, args: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => {
            run.input("config", p)?;
            read_toml(p)?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if args.adapter_dim.is_some() {
        cfg.model.adapter_dim = args.adapter_dim;
    }
    if args.width_divisor.is_some() {
        cfg.model.width_divisor = args.width_divisor;
    }
    check_train_config(&cfg.train)?;
    run.input("taxonomy", &args.taxonomy)?;
    let tree = load_tree(&args.taxonomy)?;
    let (train, val) = train_val(&mut run, &args.data, args.val.as_deref(), &tree, args.provider.as_deref(), "")?;
    let model_cfg = ModelConfig {
        variant: args.variant,
        feature_dim: train.feature_dim(),
        adapter_dim: cfg.model.adapter_dim,
        width_divisor: cfg.model.width_divisor.unwrap_or(1),
    };
    let model = CascadeModel::new(model_cfg.clone(), &tree, &mut seeded_rng(cfg.train.seed))?;
    let result = fit(model, &tree, &train, &val, &cfg.train)?;
    eprintln!(
        "best epoch {} of {}, monitored weighted F1 {:.4}",
        result.best_epoch,
        result.logs.len(),
        result.best_score
    );
    run.config(json!({ "model": model_cfg, "train": cfg.train }))?;
    run.output("model.json", result.checkpoint()?.to_json()?);
    run.output("epochs.csv", epoch_logs_to_csv(&result.logs)?);
    run.finish()
}

fn validation_json(v: &Validation) -> serde_json::Value {
    json!({ "monitored": v.monitored, "levels": v.levels })
}

fn train_progressive(mut run: Run, seed: Option<u64>, config: &Path) -> Result<()> {
    run.input("config", config)?;
    let mut cfg: ChainConfig = read_toml(config)?;
    if cfg.stage.is_empty() {
        return Err(CliError::Usage(format!("{}: no [[stage]] entries", config.display())));
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    check_train_config(&cfg.train)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let mut stages = Vec::new();
    for (i, sc) in cfg.stage.iter().enumerate() {
        let resolve = |p: &Path| base_dir.join(p);
        let tax = resolve(&sc.taxonomy);
        run.input(format!("stage{i}.taxonomy"), &tax)?;
        let tree = load_tree(&tax)?;
        let (train, val) = train_val(
            &mut run,
            &resolve(&sc.data),
            sc.val.as_deref().map(resolve).as_deref(),
            &tree,
            sc.provider.as_deref().map(resolve).as_deref(),
            &format!("stage{i}."),
        )?;
        stages.push(Stage { variant: sc.variant, tree, train, val });
    }
    let base = ModelConfig {
        variant: stages[0].variant,
        feature_dim: stages[0].train.feature_dim(),
        adapter_dim: cfg.model.adapter_dim,
        width_divisor: cfg.model.width_divisor.unwrap_or(1),
    };
    let chain = progressive_chain(&stages, &base, &cfg.train)?;
    let mut report = Vec::new();
    for (i, s) in chain.stages.iter().enumerate() {
        eprintln!("stage {i} ({}): best epoch {}, monitored {:.4}", s.variant, s.best_epoch, s.best.monitored);
        report.push(json!({
            "variant": s.variant,
            "transferred": s.transferred,
            "initial": validation_json(&s.initial),
            "fresh_initial": validation_json(&s.fresh_initial),
            "best": validation_json(&s.best),
            "best_epoch": s.best_epoch,
        }));
        run.output(format!("stage{i}_{}_epochs.csv", s.variant), epoch_logs_to_csv(&s.logs)?);
    }
    let stage_cfg: Vec<_> = cfg.stage.iter().map(|s| json!({ "variant": s.variant })).collect();
    run.config(json!({ "model": cfg.model, "train": cfg.train, "stages": stage_cfg }))?;
    run.output("model.json", chain.model.to_checkpoint()?.to_json()?);
    run.output("chain_report.json", json_bytes(&report)?);
    run.finish()
}

fn infer(
    mut run: Run,
    model_path: &Path,
    taxonomy: &Path,
    data: &Path,
    features: FeatureArgs,
    strategy: taxocascade::inference::Strategy,
    beam_width: usize,
) -> Result<()> {
    run.input("model", model_path)?;
    run.input("taxonomy", taxonomy)?;
    run.input("data", data)?;
    if let Some(p) = &features.provider {
        run.input("provider", p)?;
    }
    let tree = load_tree(taxonomy)?;
    let ck = Checkpoint::from_json(&read_to_string(model_path)?)?;
    let model = CascadeModel::from_checkpoint(&ck, &tree)?;
    let mut ds = load_data(data, &tree, features.provider.as_deref())?;
    if let Some(split) = features.split {
        ds = ds.subset(split);
    }
    let preds = predict(&model, &tree, &ds.features(), strategy, beam_width)?;
    let ids: Vec<String> = ds.records().iter().map(|r| r.id.clone()).collect();
    run.config(json!({ "strategy": strategy, "beam_width": beam_width, "split": features.split }))?;
    run.output("predictions.csv", predictions_to_csv(&ids, &preds, &tree)?);
    run.finish()
}

fn eval(mut run: Run, pred: &Path, truth: &Path, taxonomy: &Path, baseline: Option<&Path>, name: &str) -> Result<()> {
    run.input("predictions", pred)?;
    run.input("truth", truth)?;
    run.input("taxonomy", taxonomy)?;
    let tree = load_tree(taxonomy)?;
    let rows = predictions_from_csv(&read_to_string(pred)?, &tree, &pred.display().to_string())?;
    let truth_ds = load_dataset(truth, &tree)?;
    let by_id: std::collections::HashMap<&str, _> =
        truth_ds.records().iter().map(|r| (r.id.as_str(), r.labels)).collect();
    let strategy = rows
        .first()
        .map(|r| r.strategy)
        .ok_or_else(|| Error::ContractViolation(format!("{}: no predictions", pred.display())))?;
    let mut labels = Vec::with_capacity(rows.len());
    let mut valid = Vec::with_capacity(rows.len());
    let mut truths = Vec::with_capacity(rows.len());
    for r in &rows {
        if r.strategy != strategy {
            return Err(Error::ContractViolation(format!("mixed strategies {strategy} and {}", r.strategy)).into());
        }
        let t = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::ContractViolation(format!("prediction {} has no true labels", r.id)))?;
        labels.push(r.labels);
        valid.push(r.path_valid);
        truths.push(*t);
    }
    let base = match baseline {
        Some(p) => {
            run.input("baseline", p)?;
            let b = MetricsReport::from_json(&read_to_string(p)?)?;
            if b.taxonomy_checksum != tree.checksum() {
                return Err(Error::ChecksumMismatch { expected: tree.checksum(), found: b.taxonomy_checksum }.into());
            }
            let stats = b
                .distance
                .ok_or_else(|| Error::ContractViolation(format!("{}: baseline has no species-level distances", p.display())))?;
            Some(stats)
        }
        None => None,
    };
    let report = evaluate(&tree, name, strategy.as_str(), &labels, &valid, &truths, base.as_ref())?;
    run.config(json!({ "name": name }))?;
    run.output("metrics.json", report.to_json()?);
    run.finish()
}

fn compare(mut run: Run, reports: &[PathBuf]) -> Result<()> {
    let mut parsed = Vec::new();
    for (i, p) in reports.iter().enumerate() {
        run.input(format!("report{i}"), p)?;
        parsed.push(MetricsReport::from_json(&read_to_string(p)?)?);
    }
    let cmp = compare_models(&parsed)?;
    print!("{}", cmp.summary);
    run.config(json!({ "reports": reports.len() }))?;
    run.output("comparison.csv", cmp.csv);
    run.output("comparison.txt", cmp.summary);
    run.finish()
}
