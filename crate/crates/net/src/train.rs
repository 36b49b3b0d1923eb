//! Training loop, evaluation and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use travkit_core::label::LabelAblation;

use crate::data::Sample;
use crate::graph::Graph;
use crate::loss::{batch_loss, HeadLogits, LossComponents, LossWeights, Targets};
use crate::metrics::{Confusion, MetricsError, MetricsReport};
use crate::model::{NetConfig, ShapeError, Streams, TravNet};

/// Component switches. The first three act on the network, the rest on
/// labeling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_rgb_stream: bool,
    pub disable_geo_stream: bool,
    pub disable_sparse_loss: bool,
    pub disable_footprint: bool,
    pub disable_geom_prior: bool,
    pub disable_prompt_refinement: bool,
}

impl Ablation {
    pub fn streams(&self) -> Streams {
        Streams { rgb: !self.disable_rgb_stream, geo: !self.disable_geo_stream }
    }

    pub fn labeling(&self) -> LabelAblation {
        LabelAblation {
            disable_footprint: self.disable_footprint,
            disable_geom_prior: self.disable_geom_prior,
            disable_prompt_refinement: self.disable_prompt_refinement,
        }
    }

    /// Names of the active flags, for report metadata.
    pub fn active(&self) -> Vec<&'static str> {
        [
            ("disable_rgb_stream", self.disable_rgb_stream),
            ("disable_geo_stream", self.disable_geo_stream),
            ("disable_sparse_loss", self.disable_sparse_loss),
            ("disable_footprint", self.disable_footprint),
            ("disable_geom_prior", self.disable_geom_prior),
            ("disable_prompt_refinement", self.disable_prompt_refinement),
        ]
        .into_iter()
        .filter_map(|(n, on)| on.then_some(n))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Share of frames held out for validation. When nothing is held out the
    /// training frames are scored instead.
    pub val_fraction: f64,
    /// Stop at the end of the first epoch whose scored IoU_trav reaches this.
    pub stop_at_iou: Option<f64>,
    pub loss: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            max_steps: None,
            val_fraction: 0.25,
            stop_at_iou: None,
            loss: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("train.learning_rate must be positive".into());
        }
        if self.max_steps == Some(0) {
            return Err("train.max_steps must be positive when set".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err("train.val_fraction must be in [0, 1)".into());
        }
        if self.ablation.disable_rgb_stream && self.ablation.disable_geo_stream {
            return Err("cannot disable both network streams".into());
        }
        self.loss.validate().map_err(|e| format!("train.loss: {e}"))
    }

    /// Loss weights after ablations.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.disable_sparse_loss {
            w.w_sparse = 0.0;
        }
        w
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training samples")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite {component} ({value}) at epoch {epoch}, step {step}")]
    NonFinite { component: &'static str, value: f64, epoch: usize, step: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Deterministic train/validation split of `n` frames: indices of each.
pub fn split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5117));
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub loss: LossComponents,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Whether the metrics were computed on the training frames.
    pub val_is_train: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &TravNet, lr: f64) -> Self {
        Self { m: net.params.zeros_like(), v: net.params.zeros_like(), t: 0, lr }
    }

    fn step(&mut self, net: &mut TravNet, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (id, g) in grads.iter().enumerate() {
            let p = net.params.value_mut(id);
            for j in 0..g.len() {
                let m = &mut self.m[id][j];
                let v = &mut self.v[id][j];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g[j];
                *v = Self::B2 * *v + (1.0 - Self::B2) * g[j] * g[j];
                p[j] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn check_finite(c: &LossComponents, epoch: usize, step: usize) -> Result<(), TrainError> {
    for (component, value) in c.named().into_iter().chain([("total", c.total)]) {
        if !value.is_finite() {
            return Err(TrainError::NonFinite { component, value, epoch, step });
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one batch. Samples run in parallel; the
/// gradient sum is taken in batch order so results do not depend on
/// scheduling.
pub fn batch_gradients(
    net: &TravNet,
    batch: &[&Sample],
    streams: Streams,
    w: &LossWeights,
) -> Result<(LossComponents, Vec<Vec<f64>>), TrainError> {
    for s in batch {
        net.check_inputs(&s.rgb, &s.geo)?;
    }
    let graphs: Vec<(Graph, crate::model::Heads)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(&net.params);
            let heads = net.forward_graph(&mut g, &s.rgb, &s.geo, streams);
            (g, heads)
        })
        .collect();
    let items: Vec<(HeadLogits, Targets)> = graphs
        .iter()
        .zip(batch)
        .map(|((g, h), s)| {
            (
                HeadLogits {
                    fused: &g.value(h.fused).data,
                    rgb: h.rgb.map(|v| g.value(v).data.as_slice()),
                    geo: h.geo.map(|v| g.value(v).data.as_slice()),
                },
                Targets { pseudo: s.labels.as_slice(), seeds: s.seeds.as_slice() },
            )
        })
        .collect();
    let (loss, head_grads) = batch_loss(&items, w, true);
    let per_sample: Vec<Vec<Vec<f64>>> = graphs
        .par_iter()
        .zip(head_grads.par_iter())
        .map(|((g, h), hg)| {
            let mut grads = net.params.zeros_like();
            let mut seeds: Vec<(usize, &[f64])> = vec![(h.fused, &hg.fused)];
            if let (Some(v), Some(d)) = (h.rgb, &hg.rgb) {
                seeds.push((v, d));
            }
            if let (Some(v), Some(d)) = (h.geo, &hg.geo) {
                seeds.push((v, d));
            }
            g.backward(&seeds, &mut grads);
            grads
        })
        .collect();
    let mut total = net.params.zeros_like();
    for grads in &per_sample {
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, total))
}

pub struct TrainOutcome {
    pub net: TravNet,
    pub log: Vec<EpochLog>,
}

/// Optimizes a freshly initialized network. `on_epoch` sees each log entry
/// as soon as it is complete.
pub fn train(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    net_cfg.validate().map_err(TrainError::Config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let streams = cfg.ablation.streams();
    let w = cfg.effective_loss();
    let mut net = TravNet::new(net_cfg.clone(), cfg.seed);
    let mut adam = Adam::new(&net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (eval_set, val_is_train) = if val_set.is_empty() { (train_set, true) } else { (val_set, false) };
    let mut steps = 0;
    let mut log = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum: Option<LossComponents> = None;
        let mut n_batches = 0;
        let mut done = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&net, &batch, streams, &w)?;
            check_finite(&loss, epoch, steps)?;
            adam.step(&mut net, &grads);
            steps += 1;
            n_batches += 1;
            sum = Some(match sum {
                None => loss,
                Some(s) => add_components(&s, &loss),
            });
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                done = true;
                break;
            }
        }
        let mean = scale_components(&sum.expect("at least one batch"), 1.0 / n_batches as f64, &w);
        let metrics = evaluate_samples(&net, eval_set, Against::Labels, streams)?.metrics;
        let entry = EpochLog { epoch, steps, loss: mean, metrics, val_is_train };
        done |= cfg.stop_at_iou.is_some_and(|t| entry.metrics.iou_trav >= t);
        on_epoch(&entry);
        log.push(entry);
        if done {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { net, log })
}

fn add_components(a: &LossComponents, b: &LossComponents) -> LossComponents {
    let opt = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x + y);
    LossComponents {
        total: a.total + b.total,
        fused: a.fused + b.fused,
        rgb: opt(a.rgb, b.rgb),
        geo: opt(a.geo, b.geo),
        sparse: opt(a.sparse, b.sparse),
    }
}

/// Scales the components and recomputes the total from them, so the logged
/// decomposition holds exactly.
fn scale_components(c: &LossComponents, s: f64, w: &LossWeights) -> LossComponents {
    let mut out = LossComponents {
        total: 0.0,
        fused: c.fused * s,
        rgb: c.rgb.map(|v| v * s),
        geo: c.geo.map(|v| v * s),
        sparse: c.sparse.map(|v| v * s),
    };
    out.total = out.combine(w);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    /// The pseudo labels the samples carry.
    Labels,
    /// Synthetic ground truth.
    Gt,
}

/// Traversable where the fused probability exceeds one half.
pub fn predict(net: &TravNet, s: &Sample, streams: Streams) -> Result<Vec<bool>, ShapeError> {
    Ok(net.forward(&s.rgb, &s.geo, streams)?.fused_logits.iter().map(|&x| x > 0.0).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: String,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub frames: Vec<FrameMetrics>,
}

/// Frame-parallel scoring; counts are added in frame order.
pub fn evaluate_samples(
    net: &TravNet,
    samples: &[Sample],
    against: Against,
    streams: Streams,
) -> Result<EvalReport, TrainError> {
    let frames: Vec<FrameMetrics> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(net, s, streams)?;
            let target = match against {
                Against::Labels => &s.labels,
                Against::Gt => {
                    s.gt.as_ref().ok_or_else(|| TrainError::Config(format!("frame {} has no ground truth", s.id)))?
                }
            };
            Ok(FrameMetrics { id: s.id.clone(), confusion: Confusion::from_pixels(&pred, target.as_slice())? })
        })
        .collect::<Result<_, TrainError>>()?;
    let pooled = frames.iter().fold(Confusion::default(), |a, f| a.add(&f.confusion));
    Ok(EvalReport { metrics: pooled.report()?, frames })
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// The only metadata key. safetensors stores metadata in a hash map, so a
/// single entry is what keeps checkpoint bytes reproducible.
pub const META_KEY: &str = "travkit";

/// Parameters as little-endian f64 arrays, with the network config and a
/// caller-supplied config echo (JSON) in the header.
pub fn checkpoint_bytes(net: &TravNet, config_echo: &serde_json::Value) -> Result<Vec<u8>, CheckpointError> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = net
        .params
        .iter()
        .map(|(n, s, v)| (n.to_string(), s.to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| {
            Ok((
                n.clone(),
                TensorView::new(Dtype::F64, s.clone(), b).map_err(|e| CheckpointError::Format(e.to_string()))?,
            ))
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let header = serde_json::json!({ "net_config": net.config, "config": config_echo });
    let meta = HashMap::from([(META_KEY.to_string(), header.to_string())]);
    safetensors::serialize(views, &Some(meta)).map_err(|e| CheckpointError::Format(e.to_string()))
}

pub fn save_checkpoint(path: &Path, net: &TravNet, config_echo: &serde_json::Value) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(net, config_echo)?;
    std::fs::write(path, bytes)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), msg: e.to_string() })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TravNet, serde_json::Value), CheckpointError> {
    let fmt = |e: String| CheckpointError::Format(e);
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| fmt(e.to_string()))?;
    let header = meta.metadata().clone().unwrap_or_default();
    let mut meta: serde_json::Value =
        serde_json::from_str(header.get(META_KEY).ok_or_else(|| fmt(format!("no `{META_KEY}` metadata")))?)
            .map_err(|e| fmt(format!("metadata: {e}")))?;
    let net_cfg: NetConfig =
        serde_json::from_value(meta.get_mut("net_config").ok_or_else(|| fmt("missing network config".into()))?.take())
            .map_err(|e| fmt(format!("network config: {e}")))?;
    let echo = meta.get_mut("config").map(serde_json::Value::take).unwrap_or_default();
    let st = SafeTensors::deserialize(bytes).map_err(|e| fmt(e.to_string()))?;
    let mut arrays = Vec::with_capacity(st.len());
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(fmt(format!("{name}: expected F64, got {:?}", view.dtype())));
        }
        let values = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((name, view.shape().to_vec(), values));
    }
    Ok((TravNet::with_params(net_cfg, arrays)?, echo))
}

pub fn load_checkpoint(path: &Path) -> Result<(TravNet, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    checkpoint_from_bytes(&bytes)
}
