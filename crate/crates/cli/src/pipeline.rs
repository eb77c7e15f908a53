//! The commands behind the binary. Each one reads the effective config,
//! works on the run directory and returns what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use apemkit::apem::{gap_with_gradient, shuffle_map, GapResult};
use apemkit::data::load_idx;
use apemkit::explain::{explain, simplify, Method, RelevanceMap, Stage};
use apemkit::filter::{filter_map, FilterStep};
use apemkit::mapfile::{save_map, MapHeader};
use apemkit::net::{accuracy, desk_cnn_specs, load_model, save_model, train, Network};
use apemkit::records::{read_csv_file, write_csv_file, GapRow, ShuffleRow};
use apemkit::seed::derive_seed;
use apemkit::stats::{
    bootstrap_mean_ci, epsilon_plus_diff, mean, pairwise, spearman, summarize, CorrelationResult,
    MethodSummary, PermutationConfig,
};
use apemkit::{Error, Network64, Sample64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig, SeedStream};
use crate::error::{CliError, ErrorKind};

pub type CliResult<T> = Result<T, CliError>;

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    /// Effective config of the last run of `command`.
    pub fn config(&self, command: &str) -> PathBuf {
        self.root.join("configs").join(format!("{command}.toml"))
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn maps(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_csv_file(rows, path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Creates the run directory and records the effective config of `command`.
pub fn prepare_run(config: &RunConfig, command: &str) -> CliResult<RunDir> {
    config.validate()?;
    let run = RunDir::new(&config.out);
    create_dir(&run.root)?;
    write_file(&run.config(command), config.to_toml())?;
    Ok(run)
}

/// Maps per-sample library errors from a method to a config error when the
/// method cannot run on this model at all.
fn method_error(e: Error) -> CliError {
    match e {
        Error::MethodInapplicable { .. } | Error::UnsupportedArchitecture { .. } => CliError {
            kind: ErrorKind::Config,
            message: e.to_string(),
        },
        other => other.into(),
    }
}

pub struct Splits {
    pub train: Vec<Sample64>,
    pub test: Vec<Sample64>,
    pub classes: usize,
}

fn idx_paths(config: &RunConfig) -> CliResult<(&Path, &Path)> {
    match (&config.dataset.images, &config.dataset.labels) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(CliError::config(
            "dataset: kind = \"idx\" needs `images` and `labels`",
        )),
    }
}

/// Loads the training split only if `with_train`; the test split always.
pub fn load_splits(config: &RunConfig, with_train: bool) -> CliResult<Splits> {
    let d = &config.dataset;
    match d.kind {
        DatasetKind::Synthetic => {
            let gen = config.synthetic();
            let train = if with_train {
                gen.generate::<f64>(d.train_count, 0)?.samples
            } else {
                Vec::new()
            };
            let test = gen.generate::<f64>(d.test_count, 1)?.samples;
            Ok(Splits {
                train,
                test,
                classes: d.classes,
            })
        }
        DatasetKind::Idx => {
            let (images, labels) = idx_paths(config)?;
            for p in [images, labels] {
                if !p.exists() {
                    return Err(CliError::data(format!(
                        "{}: dataset file not found",
                        p.display()
                    )));
                }
            }
            let data = load_idx::<f64>(images, labels, None)?;
            if data.len() <= d.test_count && with_train {
                return Err(CliError::config(format!(
                    "dataset.test_count: {} leaves no training samples out of {}",
                    d.test_count,
                    data.len()
                )));
            }
            let split = data.len().saturating_sub(d.test_count);
            let classes = data.classes;
            let mut samples = data.samples;
            let test = samples.split_off(split);
            Ok(Splits {
                train: if with_train { samples } else { Vec::new() },
                test,
                classes,
            })
        }
    }
}

/// The test images that get evaluated, with their ids.
pub fn evaluation_set<'a>(config: &RunConfig, splits: &'a Splits) -> &'a [Sample64] {
    let n = match config.dataset.limit {
        0 => splits.test.len(),
        l => l.min(splits.test.len()),
    };
    &splits.test[..n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub model_file: String,
    pub format_version: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn cmd_train(config: &RunConfig) -> CliResult<TrainManifest> {
    let run = prepare_run(config, "train")?;
    let splits = load_splits(config, true)?;
    let shape = splits
        .train
        .first()
        .map(|s| s.image.shape().to_vec())
        .ok_or_else(|| CliError::data("training split is empty"))?;
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] % 4 != 0 {
        return Err(CliError::data(format!(
            "images of shape {shape:?} do not fit the desk network (square side divisible by 4)"
        )));
    }
    let init = Network::<f64>::random(
        shape.clone(),
        &desk_cnn_specs(shape[0], shape[1], splits.classes),
        config.seed_for(SeedStream::Init),
    )?;
    let tc = config.train_config();
    let net = train(&init, &splits.train, &tc)?;
    let path = config.model_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save_model(&net, &path)?;
    let manifest = TrainManifest {
        model_file: path.display().to_string(),
        format_version: apemkit::net::MODEL_FORMAT_VERSION,
        epochs: tc.epochs,
        learning_rate: tc.learning_rate,
        batch_size: tc.batch_size,
        seed: config.seed,
        train_samples: splits.train.len(),
        test_samples: splits.test.len(),
        train_accuracy: accuracy(&net, &splits.train)?,
        test_accuracy: accuracy(&net, &splits.test)?,
    };
    write_file(
        &run.model().join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// Loads the configured model and checks it against the dataset.
pub fn load_net(config: &RunConfig, splits: &Splits) -> CliResult<Network64> {
    let path = config.model_path();
    if !path.exists() {
        return Err(CliError::data(format!(
            "{}: model file not found (run `apemkit train` first or set `model`)",
            path.display()
        )));
    }
    let net = load_model::<f64>(&path)?;
    if let Some(s) = splits.test.first() {
        if s.image.shape() != net.input_shape() {
            return Err(CliError::data(format!(
                "{}: model expects input {:?}, dataset images are {:?}",
                path.display(),
                net.input_shape(),
                s.image.shape()
            )));
        }
    }
    if net.classes() < splits.classes {
        return Err(CliError::data(format!(
            "{}: model has {} classes, dataset has {}",
            path.display(),
            net.classes(),
            splits.classes
        )));
    }
    Ok(net)
}

/// Prediction facts recorded with every row of an image.
#[derive(Debug, Clone, Copy)]
pub struct ImageFacts {
    pub id: u64,
    pub predicted_class: usize,
    pub true_class: usize,
    pub confidence: f64,
    pub loss: f64,
}

pub fn image_facts(net: &Network64, sample: &Sample64, id: u64) -> CliResult<ImageFacts> {
    let p = net.forward(&sample.image)?;
    let loss = p.loss(sample.label)?;
    Ok(ImageFacts {
        id,
        predicted_class: p.predicted_class,
        true_class: sample.label,
        confidence: p.confidence,
        loss,
    })
}

impl ImageFacts {
    pub fn row(&self, method: Method, stage: Stage, result: Option<&GapResult>) -> GapRow {
        let mut row = GapRow {
            image_id: self.id,
            method,
            stage,
            eps_minus: None,
            eps_plus: None,
            gap: None,
            capped_minus: None,
            capped_plus: None,
            predicted_class: self.predicted_class,
            true_class: self.true_class,
            confidence: self.confidence,
            loss: self.loss,
        };
        row.set_result(result);
        row
    }
}

pub struct ImageMaps {
    pub facts: ImageFacts,
    /// `(method, params, stage, map)` in config order.
    pub maps: Vec<(Method, BTreeMap<String, f64>, Stage, RelevanceMap<f64>)>,
}

/// All configured maps of one image, explained for its predicted class.
pub fn image_maps(
    net: &Network64,
    sample: &Sample64,
    id: u64,
    config: &RunConfig,
) -> CliResult<ImageMaps> {
    let facts = image_facts(net, sample, id)?;
    let params = config.method_params();
    let mut maps = Vec::new();
    for &method in &config.explain.methods {
        let raw = explain(
            net,
            &sample.image,
            facts.predicted_class,
            method,
            &params,
            id,
        )
        .map_err(method_error)?;
        for &stage in &config.explain.stages {
            let map = simplify(&raw, &sample.image, stage)?;
            maps.push((method, raw.params.clone(), stage, map));
        }
    }
    Ok(ImageMaps { facts, maps })
}

/// Gap of one map, `None` when undefined (all-zero relevance or irrelevance).
pub fn defined_gap(
    net: &Network64,
    image: &apemkit::Tensor64,
    facts: &ImageFacts,
    map: &RelevanceMap<f64>,
    grad: &apemkit::Tensor64,
    config: &RunConfig,
) -> CliResult<Option<GapResult>> {
    match gap_with_gradient(net, image, facts.predicted_class, map, grad, &config.search) {
        Ok(g) => Ok(Some(g)),
        Err(Error::ZeroMap { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn in_order<T: Send>(items: Vec<CliResult<Vec<T>>>) -> CliResult<Vec<T>> {
    let mut out = Vec::new();
    for r in items {
        out.extend(r?);
    }
    Ok(out)
}

fn map_file(root: &Path, method: Method, stage: Stage, id: u64) -> PathBuf {
    root.join(method.name())
        .join(stage.name())
        .join(format!("{id:06}.apemmap"))
}

/// Writes one map file per (image, method, stage); returns how many.
pub fn cmd_explain(config: &RunConfig) -> CliResult<usize> {
    let run = prepare_run(config, "explain")?;
    let splits = load_splits(config, false)?;
    let net = load_net(config, &splits)?;
    let samples = evaluation_set(config, &splits);
    for &m in &config.explain.methods {
        for &s in &config.explain.stages {
            create_dir(&run.maps().join(m.name()).join(s.name()))?;
        }
    }
    let counts: Vec<CliResult<Vec<usize>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let im = image_maps(&net, sample, i as u64, config)?;
            for (method, params, stage, map) in &im.maps {
                let header = MapHeader {
                    image_id: i as u64,
                    method: *method,
                    params: params.clone(),
                    stage: *stage,
                    height: map.height(),
                    width: map.width(),
                };
                let path = map_file(&run.maps(), *method, *stage, i as u64);
                save_map(&path, &header, map)?;
            }
            Ok(vec![im.maps.len()])
        })
        .collect();
    Ok(in_order(counts)?.into_iter().sum())
}

/// Per-image gap rows for every configured method and stage, ordered by
/// method, stage and image id.
pub fn evaluate_rows(
    net: &Network64,
    samples: &[Sample64],
    config: &RunConfig,
) -> CliResult<Vec<GapRow>> {
    let per_image: Vec<CliResult<Vec<GapRow>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let im = image_maps(net, sample, i as u64, config)?;
            let grad = net.input_gradient(&sample.image, im.facts.predicted_class)?;
            im.maps
                .iter()
                .map(|(method, _, stage, map)| {
                    let g = defined_gap(net, &sample.image, &im.facts, map, &grad, config)?;
                    Ok(im.facts.row(*method, *stage, g.as_ref()))
                })
                .collect()
        })
        .collect();
    let mut rows = in_order(per_image)?;
    rows.sort_by_key(|r| (r.method, r.stage, r.image_id));
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub rows: Vec<GapRow>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_evaluate(config: &RunConfig) -> CliResult<EvaluateOutput> {
    let run = prepare_run(config, "evaluate")?;
    let splits = load_splits(config, false)?;
    let net = load_net(config, &splits)?;
    let rows = evaluate_rows(&net, evaluation_set(config, &splits), config)?;
    let (correct, wrong): (Vec<GapRow>, Vec<GapRow>) =
        rows.iter().cloned().partition(|r| r.is_correct());
    let files = vec![
        run.results().join("gaps.csv"),
        run.results().join("gaps_correct.csv"),
        run.results().join("gaps_misclassified.csv"),
    ];
    write_rows(&rows, &files[0])?;
    write_rows(&correct, &files[1])?;
    write_rows(&wrong, &files[2])?;
    Ok(EvaluateOutput { rows, files })
}

/// `k` shuffled-map gap rows per image, method and stage.
pub fn shuffle_rows(
    net: &Network64,
    samples: &[Sample64],
    config: &RunConfig,
    k: u32,
) -> CliResult<Vec<ShuffleRow>> {
    let base = config.seed_for(SeedStream::Shuffle);
    let per_image: Vec<CliResult<Vec<ShuffleRow>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let im = image_maps(net, sample, i as u64, config)?;
            let grad = net.input_gradient(&sample.image, im.facts.predicted_class)?;
            let mut out = Vec::new();
            for (method, _, stage, map) in &im.maps {
                for s in 0..k {
                    let seed = derive_seed(
                        base,
                        &[i as u64, *method as u64, stage.index() as u64, s as u64],
                    );
                    let shuffled = shuffle_map(map, seed);
                    let g = defined_gap(net, &sample.image, &im.facts, &shuffled, &grad, config)?;
                    out.push(ShuffleRow::new(i as u64, *method, *stage, s, g.as_ref()));
                }
            }
            Ok(out)
        })
        .collect();
    let mut rows = in_order(per_image)?;
    rows.sort_by_key(|r| (r.method, r.stage, r.image_id, r.shuffle));
    Ok(rows)
}

pub fn cmd_shuffle_test(config: &RunConfig) -> CliResult<PathBuf> {
    let run = prepare_run(config, "shuffle-test")?;
    let splits = load_splits(config, false)?;
    let net = load_net(config, &splits)?;
    let rows = shuffle_rows(
        &net,
        evaluation_set(config, &splits),
        config,
        config.report.shuffles,
    )?;
    let path = run.results().join("shuffle.csv");
    write_rows(&rows, &path)?;
    Ok(path)
}

/// One filtered map. Gap fields are empty when filtering was inapplicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub image_id: u64,
    pub method: Method,
    pub stage: Stage,
    pub original_gap: Option<i64>,
    pub final_gap: Option<i64>,
    pub iterations: usize,
    pub reverted: bool,
    pub support_before: usize,
    pub support_after: usize,
}

pub fn cmd_filter(config: &RunConfig) -> CliResult<Vec<FilterRow>> {
    let run = prepare_run(config, "filter")?;
    let splits = load_splits(config, false)?;
    let net = load_net(config, &splits)?;
    let samples = evaluation_set(config, &splits);
    let maps_root = run.maps().join("filtered");
    let trace_root = run.results().join("filter");
    for &m in &config.explain.methods {
        for &s in &config.explain.stages {
            create_dir(&maps_root.join(m.name()).join(s.name()))?;
        }
    }
    create_dir(&trace_root)?;
    let per_image: Vec<CliResult<Vec<FilterRow>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let id = i as u64;
            let im = image_maps(&net, sample, id, config)?;
            let mut out = Vec::new();
            for (method, params, stage, map) in &im.maps {
                let support_before = map.values.count_nonzero();
                let row = match filter_map(
                    &net,
                    &sample.image,
                    im.facts.predicted_class,
                    map,
                    &config.search,
                    &config.filter,
                ) {
                    Ok(tr) => {
                        let header = MapHeader {
                            image_id: id,
                            method: *method,
                            params: params.clone(),
                            stage: *stage,
                            height: map.height(),
                            width: map.width(),
                        };
                        save_map(
                            &map_file(&maps_root, *method, *stage, id),
                            &header,
                            &tr.final_map,
                        )?;
                        let trace_path = trace_root.join(format!(
                            "{}_{}_{id:06}.csv",
                            method.name(),
                            stage.name()
                        ));
                        write_rows::<FilterStep>(&tr.iterations, &trace_path)?;
                        FilterRow {
                            image_id: id,
                            method: *method,
                            stage: *stage,
                            original_gap: Some(tr.original_gap),
                            final_gap: Some(tr.final_gap),
                            iterations: tr.iterations.len(),
                            reverted: tr.reverted,
                            support_before,
                            support_after: tr.final_map.values.count_nonzero(),
                        }
                    }
                    Err(Error::FilterInapplicable(_)) => FilterRow {
                        image_id: id,
                        method: *method,
                        stage: *stage,
                        original_gap: None,
                        final_gap: None,
                        iterations: 0,
                        reverted: false,
                        support_before,
                        support_after: support_before,
                    },
                    Err(e) => return Err(e.into()),
                };
                out.push(row);
            }
            Ok(out)
        })
        .collect();
    let mut rows = in_order(per_image)?;
    rows.sort_by_key(|r| (r.method, r.stage, r.image_id));
    write_rows(&rows, &run.results().join("filter.csv"))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub subset: String,
    pub method: Method,
    pub stage: Stage,
    pub n_images: usize,
    pub defined: usize,
    pub measured: usize,
    pub undefined_count: usize,
    pub capped_count: usize,
    pub mean_gap: Option<f64>,
    pub median_gap: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl SummaryRow {
    fn new(subset: &str, s: MethodSummary) -> Self {
        Self {
            subset: subset.to_string(),
            method: s.method,
            stage: s.stage,
            n_images: s.n_images,
            defined: s.defined,
            measured: s.measured,
            undefined_count: s.undefined_count,
            capped_count: s.capped_count,
            mean_gap: s.mean_gap,
            median_gap: s.median_gap,
            q1: s.q1,
            q3: s.q3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub stage: Stage,
    pub method_a: Method,
    pub method_b: Method,
    pub better: f64,
    pub equal: f64,
    pub worse: f64,
    pub n: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub stage: Stage,
    pub method_a: Method,
    pub method_b: Method,
    pub image_id: u64,
    pub diff: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub stage: Stage,
    pub method_a: Method,
    pub method_b: Method,
    pub bin_lower: i64,
    pub bin_upper: i64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub subset: String,
    pub x: String,
    pub y: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

impl CorrelationRow {
    fn new(subset: &str, c: CorrelationResult) -> Self {
        Self {
            subset: subset.to_string(),
            x: c.x,
            y: c.y,
            n: c.n,
            rho: c.rho,
            p_value: c.p_value,
            note: c.note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummaryRow {
    pub method: Method,
    pub stage: Stage,
    pub n: usize,
    pub capped_count: usize,
    pub undefined_count: usize,
    pub mean_gap: Option<f64>,
    pub ci99_low: Option<f64>,
    pub ci99_high: Option<f64>,
    /// Mean |gap| of the unshuffled maps, when `gaps.csv` has them.
    pub unshuffled_mean_abs_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub pairwise: Vec<PairwiseRow>,
    pub eps_plus_histogram: Vec<HistRow>,
    /// Per-image values behind the histogram; written as CSV only.
    #[serde(skip)]
    pub eps_plus_diff: Vec<DiffRow>,
    pub correlation: Vec<CorrelationRow>,
    pub shuffle: Vec<ShuffleSummaryRow>,
}

const SUBSETS: [&str; 3] = ["correct", "misclassified", "full"];

fn subset_rows<'a>(rows: &'a [GapRow], subset: &str) -> Vec<&'a GapRow> {
    rows.iter()
        .filter(|r| match subset {
            "correct" => r.is_correct(),
            "misclassified" => !r.is_correct(),
            _ => true,
        })
        .collect()
}

fn correlate(
    x: &[f64],
    y: &[f64],
    names: (&str, &str),
    cfg: &PermutationConfig,
) -> CliResult<CorrelationResult> {
    if x.len() < 3 {
        return Ok(CorrelationResult {
            x: names.0.to_string(),
            y: names.1.to_string(),
            n: x.len(),
            rho: None,
            p_value: None,
            note: Some("fewer than 3 observations".into()),
        });
    }
    Ok(spearman(x, y, cfg)?.named(names.0, names.1))
}

/// Builds every report table from evaluation rows (and shuffle rows, if any).
pub fn build_report(
    rows: &[GapRow],
    shuffles: &[ShuffleRow],
    config: &RunConfig,
) -> CliResult<Report> {
    let mut summary = Vec::new();
    for subset in SUBSETS {
        let chosen: Vec<GapRow> = subset_rows(rows, subset).into_iter().cloned().collect();
        summary.extend(
            summarize(&chosen)
                .into_iter()
                .map(|s| SummaryRow::new(subset, s)),
        );
    }

    let mut groups: BTreeMap<(Stage, Method), Vec<&GapRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.stage, r.method)).or_default().push(r);
    }
    let stages: Vec<Stage> = {
        let mut s: Vec<Stage> = groups.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    let measured = |g: &[&GapRow]| -> Vec<(u64, Option<i64>)> {
        g.iter()
            .map(|r| (r.image_id, if r.is_capped() { None } else { r.gap }))
            .collect()
    };

    let mut pairs = Vec::new();
    let mut hist = Vec::new();
    let mut diffs = Vec::new();
    for &stage in &stages {
        let methods: Vec<Method> = groups
            .keys()
            .filter(|k| k.0 == stage)
            .map(|k| k.1)
            .collect();
        for &a in &methods {
            for &b in &methods {
                if a == b {
                    continue;
                }
                let (ga, gb) = (&groups[&(stage, a)], &groups[&(stage, b)]);
                let p = pairwise(&measured(ga), &measured(gb));
                pairs.push(PairwiseRow {
                    stage,
                    method_a: a,
                    method_b: b,
                    better: p.better,
                    equal: p.equal,
                    worse: p.worse,
                    n: p.n,
                    excluded: p.excluded,
                });
                if a < b {
                    let uncapped = |g: &[&GapRow]| -> Vec<GapRow> {
                        g.iter()
                            .filter(|r| !r.is_capped())
                            .map(|r| (*r).clone())
                            .collect()
                    };
                    let d =
                        epsilon_plus_diff(&uncapped(ga), &uncapped(gb), config.report.bin_width)?;
                    diffs.extend(d.diffs.iter().map(|&(image_id, diff)| DiffRow {
                        stage,
                        method_a: a,
                        method_b: b,
                        image_id,
                        diff,
                    }));
                    hist.extend(d.bins.iter().map(|&(lo, count)| HistRow {
                        stage,
                        method_a: a,
                        method_b: b,
                        bin_lower: lo,
                        bin_upper: lo + config.report.bin_width,
                        count,
                    }));
                }
            }
        }
    }

    let perm_base = config.seed_for(SeedStream::Permutation);
    let mut correlation = Vec::new();
    for (si, subset) in SUBSETS.iter().enumerate() {
        let perm = |parts: &[u64]| PermutationConfig {
            permutations: config.report.permutations,
            seed: derive_seed(perm_base, parts),
        };
        // confidence and loss are per image, so take them once per image
        let mut per_image: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for r in subset_rows(rows, subset) {
            per_image.insert(r.image_id, (r.confidence, r.loss));
        }
        let (conf, loss): (Vec<f64>, Vec<f64>) = per_image.values().copied().unzip();
        correlation.push(CorrelationRow::new(
            subset,
            correlate(&conf, &loss, ("confidence", "loss"), &perm(&[si as u64]))?,
        ));
        for (&(stage, method), g) in &groups {
            let (x, y): (Vec<f64>, Vec<f64>) = g
                .iter()
                .filter(|r| match *subset {
                    "correct" => r.is_correct(),
                    "misclassified" => !r.is_correct(),
                    _ => true,
                })
                .filter(|r| !r.is_capped())
                .filter_map(|r| r.gap.map(|v| (v as f64, r.loss)))
                .unzip();
            let name = format!("{method}/{stage} gap");
            let seed_parts = [si as u64, 1 + method as u64, stage.index() as u64];
            correlation.push(CorrelationRow::new(
                subset,
                correlate(&x, &y, (&name, "loss"), &perm(&seed_parts))?,
            ));
        }
    }

    let mut shuffle = Vec::new();
    let mut sgroups: BTreeMap<(Method, Stage), Vec<&ShuffleRow>> = BTreeMap::new();
    for r in shuffles {
        sgroups.entry((r.method, r.stage)).or_default().push(r);
    }
    for (&(method, stage), g) in &sgroups {
        let capped = |r: &&&ShuffleRow| r.capped_minus == Some(true) || r.capped_plus == Some(true);
        let values: Vec<f64> = g
            .iter()
            .filter(|r| !capped(r))
            .filter_map(|r| r.gap.map(|v| v as f64))
            .collect();
        let ci = if values.is_empty() {
            None
        } else {
            Some(bootstrap_mean_ci(
                &values,
                0.99,
                config.report.bootstrap_resamples,
                derive_seed(
                    config.seed_for(SeedStream::Bootstrap),
                    &[method as u64, stage.index() as u64],
                ),
            )?)
        };
        let unshuffled: Vec<f64> = groups
            .get(&(stage, method))
            .map(|g| {
                g.iter()
                    .filter(|r| !r.is_capped())
                    .filter_map(|r| r.gap.map(|v| (v as f64).abs()))
                    .collect()
            })
            .unwrap_or_default();
        shuffle.push(ShuffleSummaryRow {
            method,
            stage,
            n: values.len(),
            capped_count: g.iter().filter(capped).count(),
            undefined_count: g.iter().filter(|r| r.gap.is_none()).count(),
            mean_gap: mean(&values),
            ci99_low: ci.map(|c| c.0),
            ci99_high: ci.map(|c| c.1),
            unshuffled_mean_abs_gap: mean(&unshuffled),
        });
    }

    Ok(Report {
        summary,
        pairwise: pairs,
        eps_plus_histogram: hist,
        eps_plus_diff: diffs,
        correlation,
        shuffle,
    })
}

pub fn cmd_report(config: &RunConfig) -> CliResult<Report> {
    let run = prepare_run(config, "report")?;
    let gaps_path = run.results().join("gaps.csv");
    if !gaps_path.exists() {
        return Err(CliError::data(format!(
            "{}: not found (run `apemkit evaluate` first)",
            gaps_path.display()
        )));
    }
    let rows: Vec<GapRow> =
        read_csv_file(&gaps_path).map_err(|e| CliError::from(e).context(gaps_path.display()))?;
    let shuffle_path = run.results().join("shuffle.csv");
    let shuffles: Vec<ShuffleRow> = if shuffle_path.exists() {
        read_csv_file(&shuffle_path)
            .map_err(|e| CliError::from(e).context(shuffle_path.display()))?
    } else {
        Vec::new()
    };
    let report = build_report(&rows, &shuffles, config)?;
    let dir = run.reports();
    write_rows(&report.summary, &dir.join("summary.csv"))?;
    write_rows(&report.pairwise, &dir.join("pairwise.csv"))?;
    write_rows(
        &report.eps_plus_histogram,
        &dir.join("eps_plus_histogram.csv"),
    )?;
    write_rows(&report.eps_plus_diff, &dir.join("eps_plus_diff.csv"))?;
    write_rows(&report.correlation, &dir.join("correlation.csv"))?;
    if !report.shuffle.is_empty() {
        write_rows(&report.shuffle, &dir.join("shuffle_summary.csv"))?;
    }
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}
