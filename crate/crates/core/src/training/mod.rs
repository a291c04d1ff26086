//! Optimization of the pairwise network on ground-truth graphs, and the
//! evaluation metrics.
//!
//! Every epoch visits the training images in a shuffled order; each image's
//! edges are shuffled again and consumed in edge batches, with one Adam step
//! per batch. All randomness comes from one seeded ChaCha8 stream, so equal
//! configurations give identical histories.

mod adam;
mod loss;
mod metrics;

use std::borrow::Cow;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{junction_batch, net_probabilities, node_stripes, EdgeClassifier, DEFAULT_CHUNK};
use crate::dataset::{image_graph, DatasetManifest, GridSpec, Split};
use crate::error::{Error, Result};
use crate::graph::{argmax, AssemblyGraph, RelationLabel, NUM_CLASSES};
use crate::pairnet::{JunctionGeometry, ModelParams, NetConfig, STRIPE_DEPTH};
use crate::raster::RgbImage;
use crate::tensor::{Precision, Tensor};

pub use adam::{Adam, AdamConfig};
pub use loss::{weighted_ce, weighted_ce_grad, LossWeights, LOG_CLAMP, ROW_SUM_TOLERANCE};
pub use metrics::{balanced_accuracy, per_class_f1, Confusion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Edges per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub loss_weights: LossWeights,
    pub grid: GridSpec,
    /// Border stripe depth in pixels.
    pub stripe: usize,
    /// Output sizes of the dense chain.
    pub dense: Vec<usize>,
    pub precision: Precision,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            grid: GridSpec::default(),
            stripe: STRIPE_DEPTH,
            dense: net.dense,
            precision: Precision::Full,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be at least 1"));
        }
        self.optimizer.validate()?;
        self.net_config()?.validate()
    }

    pub fn geometry(&self) -> Result<JunctionGeometry> {
        JunctionGeometry::new(self.grid.patch, self.stripe)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let mut net = NetConfig::for_geometry(self.geometry()?);
        net.dense = self.dense.clone();
        net.precision = self.precision;
        Ok(net)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

/// Indexed collection of ground-truth graphs.
pub trait GraphSource {
    fn len(&self) -> usize;

    fn graph(&self, i: usize) -> Result<Cow<'_, AssemblyGraph>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GraphSource for [AssemblyGraph] {
    fn len(&self) -> usize {
        <[AssemblyGraph]>::len(self)
    }

    fn graph(&self, i: usize) -> Result<Cow<'_, AssemblyGraph>> {
        Ok(Cow::Borrowed(&self[i]))
    }
}

impl GraphSource for Vec<AssemblyGraph> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn graph(&self, i: usize) -> Result<Cow<'_, AssemblyGraph>> {
        Ok(Cow::Borrowed(&self[i]))
    }
}

/// Images on disk, split into ground-truth graphs when requested. Patches
/// are tagged with the file stem.
#[derive(Debug, Clone)]
pub struct ImageGraphs {
    pub paths: Vec<PathBuf>,
    pub grid: GridSpec,
}

impl ImageGraphs {
    pub fn new(paths: impl IntoIterator<Item = impl Into<PathBuf>>, grid: GridSpec) -> Self {
        ImageGraphs {
            paths: paths.into_iter().map(Into::into).collect(),
            grid,
        }
    }

    pub fn from_manifest(manifest: &DatasetManifest, split: Split, grid: GridSpec) -> Self {
        Self::new(manifest.paths(split).map(Path::to_path_buf), grid)
    }
}

impl GraphSource for ImageGraphs {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn graph(&self, i: usize) -> Result<Cow<'_, AssemblyGraph>> {
        let path = &self.paths[i];
        let image = RgbImage::load_png(path)?;
        let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        Ok(Cow::Owned(image_graph(&image, &self.grid, tag.as_deref())?))
    }
}

fn truth_of(g: &AssemblyGraph) -> Result<Vec<RelationLabel>> {
    g.truth()
        .ok_or_else(|| Error::invalid("training graph carries no ground-truth labels"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySplit {
    Train,
    Val,
}

impl HistorySplit {
    pub fn as_str(self) -> &'static str {
        match self {
            HistorySplit::Train => "train",
            HistorySplit::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: HistorySplit,
    pub loss: f64,
    pub balanced_accuracy: f64,
    pub f1: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,balanced_accuracy,f1_1,f1_2,f1_3,f1_4,f1_5";

    pub fn split(&self, split: HistorySplit) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            write!(out, "{},{},{:.6},{:.6}", r.epoch, r.split.as_str(), r.loss, r.balanced_accuracy).unwrap();
            for f in r.f1 {
                write!(out, ",{f:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss and metrics of a classifier over a set of graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: Confusion,
    pub balanced_accuracy: f64,
    pub f1: [f64; NUM_CLASSES],
}

impl Evaluation {
    fn from_parts(loss_sum: f64, confusion: Confusion) -> Result<Self> {
        let n = confusion.total();
        Ok(Evaluation {
            loss: loss_sum / n as f64,
            balanced_accuracy: balanced_accuracy(&confusion)?,
            f1: per_class_f1(&confusion),
            confusion,
        })
    }

    fn record(&self, epoch: usize, split: HistorySplit) -> EpochRecord {
        EpochRecord {
            epoch,
            split,
            loss: self.loss,
            balanced_accuracy: self.balanced_accuracy,
            f1: self.f1,
        }
    }
}

/// Scores `classifier` on every graph of `source` (edge-weighted mean loss).
pub fn evaluate(classifier: &dyn EdgeClassifier, source: &dyn GraphSource, weights: &LossWeights) -> Result<Evaluation> {
    if source.is_empty() {
        return Err(Error::Empty("no graphs to evaluate".into()));
    }
    let mut confusion = Confusion::default();
    let mut loss_sum = 0.0;
    for i in 0..source.len() {
        let g = source.graph(i)?;
        let truth = truth_of(&g)?;
        let rows = classifier.probabilities(&g)?;
        let probs = Tensor::from_vec(&[rows.len(), NUM_CLASSES], rows.concat())?;
        loss_sum += weighted_ce(&probs, &truth, weights)? * truth.len() as f64;
        for (row, &t) in rows.iter().zip(&truth) {
            confusion.add(t, argmax(row));
        }
    }
    Evaluation::from_parts(loss_sum, confusion)
}

/// Eval-mode view of parameters that are still being trained.
struct ParamsView<'a>(&'a ModelParams<f32>);

impl EdgeClassifier for ParamsView<'_> {
    fn name(&self) -> &str {
        "pairnet"
    }

    fn probabilities(&self, g: &AssemblyGraph) -> Result<Vec<[f32; NUM_CLASSES]>> {
        net_probabilities(self.0, DEFAULT_CHUNK, g)
    }
}

/// What the per-epoch callback sees.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub train: &'a EpochRecord,
    pub val: Option<&'a EpochRecord>,
    pub params: &'a ModelParams<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation split).
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub history: History,
}

/// Trains a fresh network. `on_epoch` runs after every epoch and may stop
/// training early with `ControlFlow::Break`.
pub fn train_graphs(
    train: &dyn GraphSource,
    val: Option<&dyn GraphSource>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport<'_>) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split has no images".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    tune_allocator();
    let geo = config.geometry()?;
    let mut params = ModelParams::<f32>::new(config.net_config()?, config.seed)?;
    let mut adam = Adam::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut history = History::default();
    let mut best: Option<(ModelParams<f32>, usize, f64, f64)> = None;
    let mut since_best = 0;
    let mut image_order: Vec<usize> = (0..train.len()).collect();
    let mut buffer = Vec::new();

    for epoch in 1..=config.epochs {
        image_order.shuffle(&mut rng);
        let mut confusion = Confusion::default();
        let mut loss_sum = 0.0;
        for &i in &image_order {
            let g = train.graph(i)?;
            let truth = truth_of(&g)?;
            let stripes = node_stripes(&g, geo)?;
            let mut edges: Vec<usize> = (0..g.edge_count()).collect();
            edges.shuffle(&mut rng);
            for batch in edges.chunks(config.batch_size) {
                let x = junction_batch(&g, &stripes, batch, std::mem::take(&mut buffer))?;
                let labels: Vec<RelationLabel> = batch.iter().map(|&e| truth[e]).collect();
                let trace = params.forward_train(&x)?;
                buffer = x.into_data();
                loss_sum += weighted_ce(&trace.probs, &labels, &config.loss_weights)? * batch.len() as f64;
                for (row, &t) in trace.probs.data().chunks(NUM_CLASSES).zip(&labels) {
                    let row: &[f32; NUM_CLASSES] = row.try_into().expect("rows have five classes");
                    confusion.add(t, argmax(row));
                }
                let dlogits = weighted_ce_grad(&trace.probs, &labels, &config.loss_weights)?;
                params.zero_grad();
                params.backward(trace, &dlogits)?;
                adam.step(params.params_mut())?;
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::invariant(format!("training diverged in epoch {epoch}")));
        }
        let train_record = Evaluation::from_parts(loss_sum, confusion)?.record(epoch, HistorySplit::Train);
        history.records.push(train_record.clone());

        let val_record = match val {
            Some(v) => {
                let record = evaluate(&ParamsView(&params), v, &config.loss_weights)?.record(epoch, HistorySplit::Val);
                history.records.push(record.clone());
                Some(record)
            }
            None => None,
        };

        let score = val_record.as_ref().unwrap_or(&train_record);
        let improved = match &best {
            None => true,
            Some((_, _, ba, loss)) => {
                score.balanced_accuracy > *ba || (score.balanced_accuracy == *ba && score.loss < *loss)
            }
        };
        // without validation data the final epoch is reported as best
        if val_record.is_none() || improved {
            best = Some((params.clone(), epoch, score.balanced_accuracy, score.loss));
            since_best = 0;
        } else {
            since_best += 1;
        }

        let report = EpochReport {
            epoch,
            train: &train_record,
            val: val_record.as_ref(),
            params: &params,
        };
        let stop = on_epoch(&report).is_break();
        if stop || config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    let (best, best_epoch, _, _) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

/// Trains on the manifest's train split, validating on its val split.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    let train = ImageGraphs::from_manifest(manifest, Split::Train, config.grid);
    let val = ImageGraphs::from_manifest(manifest, Split::Val, config.grid);
    train_graphs(&train, Some(&val), config, |_| ControlFlow::Continue(()))
}

/// Keeps glibc from returning the large per-batch activation buffers to the
/// kernel after every step; re-faulting them costs more than the step.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            // SAFETY: mallopt only adjusts allocator thresholds.
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_image;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 7,
            grid: GridSpec::with_grid(3, 3, 16).unwrap(),
            stripe: 4,
            dense: vec![16, 5],
            ..TrainConfig::default()
        }
    }

    fn toy_graphs(n: usize, seed: u64, grid: GridSpec) -> Vec<AssemblyGraph> {
        (0..n)
            .map(|i| {
                let img = synth_image(seed + i as u64, grid.image_w, grid.image_h);
                image_graph(&img, &grid, Some(&format!("img{i}"))).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let cfg = toy_config();
        let data = toy_graphs(3, 1, cfg.grid);
        let val = vec![data[0].clone()];
        let run = || train_graphs(&data, Some(&val), &cfg, |_| ControlFlow::Continue(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history.records.len(), 6);
        let other = train_graphs(&data, None, &TrainConfig { seed: 8, ..cfg }, |_| ControlFlow::Continue(())).unwrap();
        assert_ne!(other.history.records[0], a.history.records[0]);
    }

    #[test]
    fn callback_can_stop_early() {
        let cfg = TrainConfig { epochs: 5, ..toy_config() };
        let data = toy_graphs(2, 3, cfg.grid);
        let mut seen = Vec::new();
        let out = train_graphs(&data, None, &cfg, |r| {
            seen.push(r.epoch);
            if r.epoch == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(seen, [1, 2]);
        assert_eq!(out.best_epoch, 2);
        assert_eq!(out.best, out.last);
    }

    #[test]
    fn empty_split_and_bad_config_are_errors() {
        let cfg = toy_config();
        let empty: Vec<AssemblyGraph> = Vec::new();
        assert!(matches!(
            train_graphs(&empty, None, &cfg, |_| ControlFlow::Continue(())),
            Err(Error::Empty(_))
        ));
        let data = toy_graphs(1, 0, cfg.grid);
        let bad = TrainConfig { epochs: 0, ..cfg.clone() };
        assert!(train_graphs(&data, None, &bad, |_| ControlFlow::Continue(())).is_err());
        let wrong_grid = TrainConfig {
            grid: GridSpec::with_grid(3, 3, 24).unwrap(),
            ..cfg
        };
        assert!(train_graphs(&data, None, &wrong_grid, |_| ControlFlow::Continue(())).is_err());
    }

    #[test]
    fn graphs_without_truth_are_rejected() {
        let cfg = toy_config();
        let g = toy_graphs(1, 0, cfg.grid).remove(0);
        let bare = crate::graph::complete_graph(g.nodes().to_vec()).unwrap();
        assert!(train_graphs(&vec![bare], None, &cfg, |_| ControlFlow::Continue(())).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 1,
                split: HistorySplit::Val,
                loss: 0.5,
                balanced_accuracy: 0.25,
                f1: [0.0, 0.1, 0.2, 0.3, 1.0],
            }],
        };
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,split,loss,balanced_accuracy,f1_1,f1_2,f1_3,f1_4,f1_5");
        assert_eq!(lines[1], "1,val,0.500000,0.250000,0.000000,0.100000,0.200000,0.300000,1.000000");
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = toy_config();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let d = TrainConfig::from_toml("").unwrap();
        assert_eq!(d.epochs, 30);
        assert_eq!(d.loss_weights.as_array(), [0.8, 0.8, 0.8, 0.8, 0.1]);
        assert_eq!(d.optimizer.learning_rate, 1e-3);
        assert!(TrainConfig::from_toml("loss_weights = [1, 1, 1, 1, -1]").is_err());
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn evaluation_of_perfect_oracle() {
        let cfg = toy_config();
        let data = toy_graphs(2, 5, cfg.grid);
        let oracle = crate::assembly::TruthOracle { grid: cfg.grid };
        let ev = evaluate(&oracle, &data, &LossWeights::default()).unwrap();
        assert_eq!(ev.balanced_accuracy, 1.0);
        assert_eq!(ev.f1, [1.0; 5]);
        assert_eq!(ev.loss, 0.0);
        assert_eq!(ev.confusion.total(), 2 * 72);
    }
}
