//! Nested U-shaped encoder-decoder (dense skip grid) hosting the compensation
//! units, plus its training loop.
//!
//! The grid holds nodes `X^{i,j}` (`i` = scale level, `j` = column, `j <=
//! depth - i`). Column 0 is the encoder; every other node concatenates all
//! same-row predecessors with an upsampled deeper feature and applies two 3x3
//! conv + ReLU stages. A single 1x1 conv + sigmoid head reads `X^{0,depth}`.
//!
//! Compensation wiring, applied per forward pass when enabled:
//! - At each row's first skip use (column 1) the GCU consumes `F = X^{i,0}`,
//!   `S = maxpool(X^{i,0})` (the pooled tensor that feeds level `i+1`) and the
//!   upsampled deeper feature `U`. Its updated skip `C` replaces `X^{i,0}` in
//!   every concatenation of that row, and its residual `R` rescales the
//!   remaining same-row nodes (`R (x) X (+) X`) before they are concatenated.
//! - The RCU wraps the upsampled features entering the outermost decoder
//!   nodes (`j = depth - i`) of the highest-resolution stages; the residual
//!   maps are resized to each stage's scale inside the unit. Where both units
//!   meet at one node, the RCU wraps `U` first and the GCU sees the wrapped
//!   tensor.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, Axis, Ix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::gcu::{gcu_forward_t, propagate_residual_t, SeVars, SeWeights, SE_REDUCTION};
use crate::losses_metrics::{segmentation_loss_t, LossConfig};
use crate::params::{accumulate_grads, scale_grads, Adam, Binding, Init, ParamSet};
use crate::rcu::{rcu_forward_t, RcuVars, RcuWeights};
use crate::residual_map::MrmSet;
use crate::seeding::{derive_seed, rng_for};
use crate::synthdata::ImageSlice;
use crate::tape::{Elem, Tape, VarId};
use crate::{bail_config, bail_validation, Error, Result};

/// Architecture and inference settings. Defaults give the desk-scale model:
/// four downsamplings from 64x64, 16 base channels, both compensation units
/// and the importance scores on, RCU patch sizes (4, 4, 8) deepest stage
/// first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: usize,
    pub enable_gcu: bool,
    pub enable_rcu: bool,
    pub enable_importance: bool,
    /// Patch size per RCU-wrapped decoder stage, deepest attached stage
    /// first. The list length selects how many of the highest-resolution
    /// stages are wrapped.
    pub rcu_patch_sizes: Vec<usize>,
    pub loss: LossConfig,
    /// Probability cut for [`predict_mask`] (mask = probability >= threshold).
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 16,
            input_size: 64,
            enable_gcu: true,
            enable_rcu: true,
            enable_importance: true,
            rcu_patch_sizes: vec![4, 4, 8],
            loss: LossConfig::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel width at scale level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            bail_config!("depth must be at least 1");
        }
        if self.base_channels == 0 {
            bail_config!("base_channels must be positive");
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            bail_config!(
                "input_size {} must be a positive multiple of 2^depth = {div}",
                self.input_size
            );
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            bail_config!("threshold must be in [0, 1], got {}", self.threshold);
        }
        self.loss.validate()?;
        if self.enable_rcu && self.rcu_patch_sizes.is_empty() {
            bail_config!("rcu_patch_sizes must not be empty while the rcu is enabled");
        }
        if !self.rcu_patch_sizes.is_empty() {
            if self.rcu_patch_sizes.len() > self.depth {
                bail_config!(
                    "rcu_patch_sizes lists {} stages but a depth-{} model has only {} decoder stages",
                    self.rcu_patch_sizes.len(),
                    self.depth,
                    self.depth
                );
            }
            for (row, p) in self.rcu_stages() {
                let res = self.input_size >> row;
                if p == 0 || res % p != 0 {
                    bail_config!(
                        "rcu stage {row} (resolution {res}x{res}) is not divisible by patch size {p}"
                    );
                }
            }
        }
        Ok(())
    }

    /// RCU-wrapped decoder stages as `(row, patch_size)`. Entry `k` of
    /// `rcu_patch_sizes` maps to row `len - 1 - k`, so the list reads deepest
    /// attached stage first and the last entry is the full-resolution stage.
    pub fn rcu_stages(&self) -> Vec<(usize, usize)> {
        let l = self.rcu_patch_sizes.len().min(self.depth);
        (0..l).map(|k| (l - 1 - k, self.rcu_patch_sizes[k])).collect()
    }
}

/// A segmentation model: configuration plus named weights.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

/// Builds the weight set for `cfg` with a deterministic draw order: grid
/// blocks and upsampling projections first (so every variant of the same seed
/// shares its backbone initialization), then GCU and RCU weights when
/// enabled. Convolutions use He initialization with zero biases.
pub fn build_params<T: Elem>(cfg: &ModelConfig) -> ParamSet<T> {
    let mut init = Init::new(derive_seed(cfg.seed, &[0x6D6F64656C]));
    let mut params = ParamSet::new();
    let l = cfg.depth;
    let block = |params: &mut ParamSet<T>, init: &mut Init, name: &str, cin: usize, cout: usize| {
        params.insert(format!("{name}.c1.w"), init.he(&[3, 3, cin, cout], 9 * cin));
        params.insert(format!("{name}.c1.b"), init.zeros(&[cout]));
        params.insert(format!("{name}.c2.w"), init.he(&[3, 3, cout, cout], 9 * cout));
        params.insert(format!("{name}.c2.b"), init.zeros(&[cout]));
    };
    for i in 0..=l {
        let cin = if i == 0 { 1 } else { cfg.channels(i - 1) };
        block(&mut params, &mut init, &format!("x{i}_0"), cin, cfg.channels(i));
    }
    for j in 1..=l {
        for i in 0..=l - j {
            let (cd, c) = (cfg.channels(i + 1), cfg.channels(i));
            params.insert(format!("up{i}_{j}.w"), init.he(&[1, 1, cd, c], cd));
            params.insert(format!("up{i}_{j}.b"), init.zeros(&[c]));
            block(&mut params, &mut init, &format!("x{i}_{j}"), (j + 1) * c, c);
        }
    }
    params.insert("head.w", init.he(&[1, 1, cfg.channels(0), 1], cfg.channels(0)));
    params.insert("head.b", init.zeros(&[1]));
    if cfg.enable_gcu {
        for i in 0..l {
            let ch = cfg.channels(i);
            SeWeights::<T>::init(&mut init, ch, SE_REDUCTION)
                .insert_into(&mut params, &format!("gcu{i}.se_f"));
            SeWeights::<T>::init(&mut init, ch, SE_REDUCTION)
                .insert_into(&mut params, &format!("gcu{i}.se_u"));
        }
    }
    if cfg.enable_rcu {
        for (row, _) in cfg.rcu_stages() {
            RcuWeights::<T>::init(&mut init, cfg.channels(row))
                .insert_into(&mut params, &format!("rcu{row}"));
        }
    }
    params
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    Ok(Model { config: config.clone(), params: build_params::<f32>(config) })
}

// ---- forward graph --------------------------------------------------------------

fn conv_block<T: Elem>(t: &mut Tape<T>, b: &Binding, name: &str, x: VarId) -> VarId {
    let h = t.conv2d(x, b.id(&format!("{name}.c1.w")), b.id(&format!("{name}.c1.b")));
    let h = t.relu(h);
    let h = t.conv2d(h, b.id(&format!("{name}.c2.w")), b.id(&format!("{name}.c2.b")));
    t.relu(h)
}

/// Bilinear x2 followed by a linear 1x1 channel projection.
fn upconv<T: Elem>(t: &mut Tape<T>, b: &Binding, name: &str, x: VarId, th: usize, tw: usize) -> VarId {
    let up = t.upsample_bilinear(x, th, tw);
    t.conv2d(up, b.id(&format!("{name}.w")), b.id(&format!("{name}.b")))
}

/// Builds the whole grid; returns the sigmoid output `(H, W, 1)` and every
/// node. `gcu_rows` overrides `cfg.enable_gcu` per row when given (diagnostic
/// use; `None` applies the config flag to every row).
fn forward_graph<T: Elem>(
    t: &mut Tape<T>,
    b: &Binding,
    cfg: &ModelConfig,
    image: VarId,
    rms: Option<(VarId, VarId)>,
    gcu_rows: Option<&[bool]>,
) -> (VarId, Vec<Vec<VarId>>) {
    let l = cfg.depth;
    let gcu_on = |i: usize| gcu_rows.map_or(cfg.enable_gcu, |mask| mask[i]);
    let stages = cfg.rcu_stages();

    // encoder column; keep the pooled tensors, the GCU reuses them as S
    let mut grid: Vec<Vec<VarId>> = Vec::with_capacity(l + 1);
    grid.push(vec![conv_block(t, b, "x0_0", image)]);
    let mut pooled: Vec<VarId> = Vec::with_capacity(l);
    for i in 1..=l {
        let p = t.maxpool2(grid[i - 1][0]);
        pooled.push(p);
        grid.push(vec![conv_block(t, b, &format!("x{i}_0"), p)]);
    }

    // skip[i] stands in for X^{i,0} in concatenations; residual[i] rescales
    // the rest of the row once the GCU has run
    let mut skip: Vec<VarId> = grid.iter().map(|row| row[0]).collect();
    let mut residual: Vec<Option<VarId>> = vec![None; l + 1];

    for j in 1..=l {
        for i in 0..=l - j {
            let side = cfg.input_size >> i;
            let mut u = upconv(t, b, &format!("up{i}_{j}"), grid[i + 1][j - 1], side, side);
            if cfg.enable_rcu && j == l - i {
                if let Some(&(_, p)) = stages.iter().find(|(row, _)| *row == i) {
                    let (rm1, rm2) = rms.expect("rcu needs residual maps");
                    let vars = RcuVars::bound(b, &format!("rcu{i}"));
                    u = rcu_forward_t(t, u, rm1, rm2, p, &vars, cfg.enable_importance);
                }
            }
            if j == 1 && gcu_on(i) {
                let se_f = SeVars::bound(b, &format!("gcu{i}.se_f"));
                let se_u = SeVars::bound(b, &format!("gcu{i}.se_u"));
                let (r, c) = gcu_forward_t(t, grid[i][0], pooled[i], u, &se_f, &se_u);
                residual[i] = Some(r);
                skip[i] = c;
            }
            let mut parts = Vec::with_capacity(j + 1);
            parts.push(skip[i]);
            for k in 1..j {
                parts.push(match residual[i] {
                    Some(r) => propagate_residual_t(t, r, grid[i][k]),
                    None => grid[i][k],
                });
            }
            parts.push(u);
            let cat = t.concat_last(&parts);
            let node = conv_block(t, b, &format!("x{i}_{j}"), cat);
            grid[i].push(node);
        }
    }

    let logits = t.conv2d(grid[0][l], b.id("head.w"), b.id("head.b"));
    (t.sigmoid(logits), grid)
}

/// Tape-level forward pass. `image` is an `(H, W, 1)` node; `rms` are the two
/// full-resolution `(H, W, 1)` residual-map nodes, required when the RCU is
/// enabled. Returns the `(H, W, 1)` probability node.
pub fn forward_t<T: Elem>(
    t: &mut Tape<T>,
    b: &Binding,
    cfg: &ModelConfig,
    image: VarId,
    rms: Option<(VarId, VarId)>,
) -> VarId {
    forward_graph(t, b, cfg, image, rms, None).0
}

fn check_forward_inputs(
    cfg: &ModelConfig,
    pixels: &Array2<f32>,
    mrm: Option<&crate::residual_map::ResidualPair>,
) -> Result<()> {
    if pixels.dim() != (cfg.input_size, cfg.input_size) {
        bail_validation!(
            "input is {:?}, expected {}x{}",
            pixels.dim(),
            cfg.input_size,
            cfg.input_size
        );
    }
    if cfg.enable_rcu && mrm.is_none() {
        bail_validation!("residual maps are required while the rcu is enabled");
    }
    Ok(())
}

fn leaf_hw1(t: &mut Tape<f32>, a: &Array2<f32>) -> VarId {
    t.leaf(a.clone().insert_axis(Axis(2)).into_dyn())
}

/// Single-slice inference: probability map in `(0, 1)` with the input's
/// spatial shape. `mrm` is ignored when the RCU is disabled.
pub fn forward(
    model: &Model,
    pixels: &Array2<f32>,
    mrm: Option<&crate::residual_map::ResidualPair>,
) -> Result<Array2<f32>> {
    let cfg = &model.config;
    check_forward_inputs(cfg, pixels, mrm)?;
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let img = leaf_hw1(&mut t, pixels);
    let rms = match (cfg.enable_rcu, mrm) {
        (true, Some(pair)) => Some((leaf_hw1(&mut t, &pair.rm1), leaf_hw1(&mut t, &pair.rm2))),
        _ => None,
    };
    let out = forward_t(&mut t, &b, cfg, img, rms);
    let v = t.value(out).clone().into_dimensionality::<Ix3>().expect("(H, W, 1) output");
    Ok(v.index_axis(Axis(2), 0).to_owned())
}

/// Every grid activation from one forward pass, for diagnostics and plots.
/// `nodes[i][j]` is `X^{i,j}`; rows are triangular (`j <= depth - i`).
pub struct NodeGrid {
    pub nodes: Vec<Vec<Array3<f32>>>,
    pub probability: Array2<f32>,
}

pub fn forward_nodes(
    model: &Model,
    pixels: &Array2<f32>,
    mrm: Option<&crate::residual_map::ResidualPair>,
) -> Result<NodeGrid> {
    let cfg = &model.config;
    check_forward_inputs(cfg, pixels, mrm)?;
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let img = leaf_hw1(&mut t, pixels);
    let rms = match (cfg.enable_rcu, mrm) {
        (true, Some(pair)) => Some((leaf_hw1(&mut t, &pair.rm1), leaf_hw1(&mut t, &pair.rm2))),
        _ => None,
    };
    let (out, grid) = forward_graph(&mut t, &b, cfg, img, rms, None);
    let fetch = |id: VarId| {
        t.value(id).clone().into_dimensionality::<Ix3>().expect("grid nodes are (H, W, C)")
    };
    let nodes = grid.iter().map(|row| row.iter().map(|&id| fetch(id)).collect()).collect();
    let prob = fetch(out).index_axis(Axis(2), 0).to_owned();
    Ok(NodeGrid { nodes, probability: prob })
}

/// Scalar-loop binarization: `mask[p] = prob[p] >= threshold`.
pub fn threshold_mask(prob: &Array2<f32>, threshold: f64) -> Array2<u8> {
    prob.mapv(|p| u8::from(f64::from(p) >= threshold))
}

pub fn predict_mask(
    model: &Model,
    pixels: &Array2<f32>,
    mrm: Option<&crate::residual_map::ResidualPair>,
) -> Result<Array2<u8>> {
    Ok(threshold_mask(&forward(model, pixels, mrm)?, model.config.threshold))
}

// ---- reference baseline ----------------------------------------------------------

/// Plain nested forward pass with no compensation units, written directly
/// against the dense kernels. This is an independent code path from the tape
/// graph; a model with GCU and RCU disabled must reproduce it bit-for-bit
/// under shared weights.
pub fn reference_forward(params: &ParamSet<f32>, cfg: &ModelConfig, pixels: &Array2<f32>) -> Array2<f32> {
    use crate::kernels;
    use ndarray::{Ix1, Ix4};
    let w4 = |n: &str| params.get(n).view().into_dimensionality::<Ix4>().unwrap().into_owned();
    let b1 = |n: &str| params.get(n).view().into_dimensionality::<Ix1>().unwrap().into_owned();
    let block = |name: &str, x: &Array3<f32>| -> Array3<f32> {
        let w = w4(&format!("{name}.c1.w"));
        let bias = b1(&format!("{name}.c1.b"));
        let h = kernels::conv2d_same(&x.view(), &w.view(), Some(&bias.view()));
        let h = h.mapv(|v| v.max(0.0));
        let w = w4(&format!("{name}.c2.w"));
        let bias = b1(&format!("{name}.c2.b"));
        let h = kernels::conv2d_same(&h.view(), &w.view(), Some(&bias.view()));
        h.mapv(|v| v.max(0.0))
    };
    let l = cfg.depth;
    let mut grid: Vec<Vec<Array3<f32>>> = Vec::with_capacity(l + 1);
    let image = pixels.clone().insert_axis(Axis(2));
    grid.push(vec![block("x0_0", &image)]);
    for i in 1..=l {
        let p = kernels::maxpool2(&grid[i - 1][0].view()).0;
        grid.push(vec![block(&format!("x{i}_0"), &p)]);
    }
    for j in 1..=l {
        for i in 0..=l - j {
            let side = cfg.input_size >> i;
            let up = kernels::resize_bilinear(&grid[i + 1][j - 1].view(), side, side);
            let w = w4(&format!("up{i}_{j}.w"));
            let bias = b1(&format!("up{i}_{j}.b"));
            let u = kernels::conv2d_same(&up.view(), &w.view(), Some(&bias.view()));
            let mut parts: Vec<ndarray::ArrayView3<f32>> =
                grid[i][..j].iter().map(|a| a.view()).collect();
            parts.push(u.view());
            let cat = ndarray::concatenate(Axis(2), &parts).unwrap();
            let node = block(&format!("x{i}_{j}"), &cat);
            grid[i].push(node);
        }
    }
    let hw = w4("head.w");
    let hb = b1("head.b");
    let logits = kernels::conv2d_same(&grid[0][l].view(), &hw.view(), Some(&hb.view()));
    logits.index_axis(Axis(2), 0).mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

// ---- training ---------------------------------------------------------------------

/// Optimizer and schedule settings. The warmup ramps the learning rate from
/// `learning_rate / 10` up to `learning_rate` over the first `warmup_epochs`
/// epochs along a cosine, then holds it constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    /// Stop after this many consecutive epochs without a strict validation
    /// improvement.
    pub patience: usize,
    /// Seed of the per-epoch data-order shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 12,
            warmup_epochs: 5,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bail_config!("learning_rate must be positive, got {}", self.learning_rate);
        }
        if self.batch_size == 0 {
            bail_config!("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            bail_config!("max_epochs must be positive");
        }
        if self.patience == 0 {
            bail_config!("patience must be positive");
        }
        Ok(())
    }
}

/// Learning rate for one epoch under the cosine warmup.
pub fn epoch_lr(base: f64, epoch: usize, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        return base;
    }
    let lo = base / 10.0;
    let t = (epoch + 1) as f64 / warmup_epochs as f64;
    lo + (base - lo) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
}

/// Early-stopping bookkeeping on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records one epoch's validation loss; returns whether it strictly
    /// improved on the best seen so far.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// One JSON object per epoch, newline-separated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, self.to_jsonl().as_bytes())
    }
}

/// Builds one sample's loss node: forward pass plus the configured objective
/// against the slice's mask.
fn sample_loss_graph(
    t: &mut Tape<f32>,
    b: &Binding,
    cfg: &ModelConfig,
    slice: &ImageSlice,
    mrms: &MrmSet,
) -> Result<VarId> {
    if slice.pixels.dim() != (cfg.input_size, cfg.input_size) {
        bail_validation!(
            "slice {} #{} is {:?}, expected {}x{}",
            slice.patient_id,
            slice.slice_index,
            slice.pixels.dim(),
            cfg.input_size,
            cfg.input_size
        );
    }
    let img = leaf_hw1(t, &slice.pixels);
    let rms = if cfg.enable_rcu {
        let pair = mrms.for_slice(slice).ok_or_else(|| {
            Error::Validation(format!(
                "no residual maps for slice {} #{}",
                slice.patient_id, slice.slice_index
            ))
        })?;
        Some((leaf_hw1(t, &pair.rm1), leaf_hw1(t, &pair.rm2)))
    } else {
        None
    };
    let prob = forward_t(t, b, cfg, img, rms);
    let gt = t.leaf(slice.mask.mapv(f32::from).insert_axis(Axis(2)).into_dyn());
    Ok(segmentation_loss_t(t, prob, gt, &cfg.loss))
}

fn mean_val_loss(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    slices: &[ImageSlice],
    mrms: &MrmSet,
) -> Result<f64> {
    let losses: Vec<f64> = slices
        .par_iter()
        .map(|s| {
            let mut t = Tape::new();
            let b = params.bind(&mut t);
            let loss = sample_loss_graph(&mut t, &b, cfg, s, mrms)?;
            Ok(t.scalar(loss) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / slices.len() as f64)
}

/// Trains the model in place and returns the per-epoch history. Adam with
/// moments (0.9, 0.999), cosine warmup then a constant rate, early stopping
/// on validation loss; the weights left in `model` are those of the best
/// validation epoch. Batches run data-parallel with deterministic,
/// order-fixed gradient accumulation.
pub fn train(
    model: &mut Model,
    train_slices: &[ImageSlice],
    val_slices: &[ImageSlice],
    mrms: &MrmSet,
    tc: &TrainConfig,
) -> Result<TrainHistory> {
    tc.validate()?;
    model.config.validate()?;
    if train_slices.is_empty() {
        bail_config!("training set is empty");
    }
    if val_slices.is_empty() {
        bail_config!("validation set is empty");
    }
    let cfg = model.config.clone();
    if cfg.enable_rcu {
        for s in train_slices.iter().chain(val_slices) {
            if mrms.for_slice(s).is_none() {
                bail_validation!(
                    "no residual maps for slice {} #{}",
                    s.patient_id,
                    s.slice_index
                );
            }
        }
    }

    let mut adam = Adam::new();
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best_params = model.params.clone();
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..tc.max_epochs {
        let lr = epoch_lr(tc.learning_rate, epoch, tc.warmup_epochs);
        let mut order: Vec<usize> = (0..train_slices.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(tc.seed, &[0x65706F63, epoch as u64]));
        }
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(tc.batch_size) {
            let params = &model.params;
            let results: Vec<(f64, IndexMap<String, ArrayD<f32>>)> = batch
                .par_iter()
                .map(|&idx| {
                    let mut t = Tape::new();
                    let b = params.bind(&mut t);
                    let loss = sample_loss_graph(&mut t, &b, &cfg, &train_slices[idx], mrms)?;
                    let loss_val = t.scalar(loss) as f64;
                    let mut grads = t.backward(loss);
                    Ok((loss_val, b.grads(&t, &mut grads)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acc = IndexMap::new();
            for (lv, g) in &results {
                loss_sum += lv;
                accumulate_grads(&mut acc, g);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f32);
            adam.step(&mut model.params, &acc, lr);
        }
        let train_loss = loss_sum / train_slices.len() as f64;
        let val_loss = mean_val_loss(&model.params, &cfg, val_slices, mrms)?;
        records.push(EpochRecord { epoch, train_loss, val_loss, learning_rate: lr });
        if stopper.observe(epoch, val_loss) {
            best_params = model.params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    model.params = best_params;
    Ok(TrainHistory {
        records,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        stopped_early,
    })
}

// ---- checkpointing ---------------------------------------------------------------

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let meta = serde_json::json!({ "kind": "grcsf", "config": model.config });
    crate::params::save_checkpoint(path, &model.params, &meta)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (params, meta) = crate::params::load_checkpoint::<f32>(path)?;
    let kind = meta.get("kind").and_then(|k| k.as_str());
    if kind != Some("grcsf") {
        return Err(Error::format(path, format!("checkpoint kind {kind:?}, expected \"grcsf\"")));
    }
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::format(path, "checkpoint missing config"))?,
    )?;
    config.validate()?;
    Ok(Model { config, params })
}
