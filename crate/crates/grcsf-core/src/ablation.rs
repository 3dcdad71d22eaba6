//! Ablation harness: trains every configured model variant across a shared
//! seed list on one synthetic dataset and aggregates test-set metrics.
//!
//! All variants of one run share the dataset, the trained MAE, and any
//! residual-map sets their configuration has in common, so measured
//! differences come from the declared overrides alone. A variant whose
//! configuration fails validation (typically a patch-size divisibility error)
//! is reported with its error message while the remaining variants still run.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, predict_mask, train, ModelConfig, TrainConfig};
use crate::bail_config;
use crate::error::Result;
use crate::losses_metrics::{evaluate_slices, MetricValues};
use crate::residual_map::{
    generate_mrm_set, init_mae, train_mae, DiffMetric, MaeConfig, MaeWeights, MrmConfig, MrmSet,
};
use crate::synthdata::{generate_dataset, Dataset, ImageSlice, SynthConfig};

// ---- plan -------------------------------------------------------------------------

/// Overrides one variant applies to the shared base configuration. Unset
/// fields inherit the base, so the run log can state exactly what a variant
/// changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub enable_gcu: Option<bool>,
    pub enable_rcu: Option<bool>,
    pub enable_importance: Option<bool>,
    pub rcu_patch_sizes: Option<Vec<usize>>,
    pub mrm_iterations: Option<usize>,
    pub mrm_ratios: Option<(f64, f64)>,
    pub mrm_metric: Option<DiffMetric>,
}

impl VariantSpec {
    pub fn named(name: &str) -> Self {
        VariantSpec { name: name.to_string(), ..VariantSpec::default() }
    }

    /// Resolves this variant against the base model and residual-map configs.
    pub fn apply(&self, model: &ModelConfig, mrm: &MrmConfig) -> (ModelConfig, MrmConfig) {
        let mut m = model.clone();
        if let Some(v) = self.enable_gcu {
            m.enable_gcu = v;
        }
        if let Some(v) = self.enable_rcu {
            m.enable_rcu = v;
        }
        if let Some(v) = self.enable_importance {
            m.enable_importance = v;
        }
        if let Some(v) = &self.rcu_patch_sizes {
            m.rcu_patch_sizes = v.clone();
        }
        let mut r = mrm.clone();
        if let Some(v) = self.mrm_iterations {
            r.iterations = v;
        }
        if let Some(v) = self.mrm_ratios {
            r.ratios = v;
        }
        if let Some(v) = self.mrm_metric {
            r.metric = v;
        }
        (m, r)
    }

    /// Names of the fields this variant declares, in struct order.
    pub fn declared_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.enable_gcu.is_some() {
            out.push("enable_gcu");
        }
        if self.enable_rcu.is_some() {
            out.push("enable_rcu");
        }
        if self.enable_importance.is_some() {
            out.push("enable_importance");
        }
        if self.rcu_patch_sizes.is_some() {
            out.push("rcu_patch_sizes");
        }
        if self.mrm_iterations.is_some() {
            out.push("mrm_iterations");
        }
        if self.mrm_ratios.is_some() {
            out.push("mrm_ratios");
        }
        if self.mrm_metric.is_some() {
            out.push("mrm_metric");
        }
        out
    }
}

/// Field-level difference between two model configurations (seed excluded:
/// the harness rewrites it per run).
pub fn model_config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if a.depth != b.depth {
        out.push("depth");
    }
    if a.base_channels != b.base_channels {
        out.push("base_channels");
    }
    if a.input_size != b.input_size {
        out.push("input_size");
    }
    if a.enable_gcu != b.enable_gcu {
        out.push("enable_gcu");
    }
    if a.enable_rcu != b.enable_rcu {
        out.push("enable_rcu");
    }
    if a.enable_importance != b.enable_importance {
        out.push("enable_importance");
    }
    if a.rcu_patch_sizes != b.rcu_patch_sizes {
        out.push("rcu_patch_sizes");
    }
    if a.loss != b.loss {
        out.push("loss");
    }
    if a.threshold != b.threshold {
        out.push("threshold");
    }
    out
}

/// Field-level difference between two residual-map configurations.
pub fn mrm_config_diff(a: &MrmConfig, b: &MrmConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if a.ratios != b.ratios {
        out.push("mrm_ratios");
    }
    if a.iterations != b.iterations {
        out.push("mrm_iterations");
    }
    if a.metric != b.metric {
        out.push("mrm_metric");
    }
    if a.base_seed != b.base_seed {
        out.push("mrm_base_seed");
    }
    out
}

/// Which variants to run and over which seeds. The sweep lists append extra
/// variants of the otherwise-unmodified base model, one per listed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    /// Reconstruction-iteration sweep for residual-map generation.
    pub mae_iterations: Vec<usize>,
    /// Mask-ratio-pair sweep for residual-map generation.
    pub ratio_sets: Vec<(f64, f64)>,
    /// Patch-size sweep for the region compensation stages.
    pub patch_size_sets: Vec<Vec<usize>>,
    /// Residual difference-metric sweep.
    pub diff_metrics: Vec<DiffMetric>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        let mut baseline = VariantSpec::named("baseline");
        baseline.enable_gcu = Some(false);
        baseline.enable_rcu = Some(false);
        baseline.enable_importance = Some(false);

        let mut gcu = VariantSpec::named("gcu");
        gcu.enable_gcu = Some(true);
        gcu.enable_rcu = Some(false);
        gcu.enable_importance = Some(false);

        let mut no_importance = VariantSpec::named("gcu_rcu_no_importance");
        no_importance.enable_gcu = Some(true);
        no_importance.enable_rcu = Some(true);
        no_importance.enable_importance = Some(false);

        AblationPlan {
            variants: vec![baseline, gcu, no_importance, VariantSpec::named("grcsf")],
            seeds: vec![1, 2, 3],
            mae_iterations: Vec::new(),
            ratio_sets: Vec::new(),
            patch_size_sets: Vec::new(),
            diff_metrics: Vec::new(),
        }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            bail_config!("ablation plan has no variants");
        }
        if self.seeds.is_empty() {
            bail_config!("ablation plan has no seeds");
        }
        Ok(())
    }

    /// Declared variants followed by one generated variant per sweep value.
    /// Fails on empty plans and on duplicate names.
    pub fn expand(&self) -> Result<Vec<VariantSpec>> {
        self.validate()?;
        let mut out = self.variants.clone();
        for &k in &self.mae_iterations {
            let mut v = VariantSpec::named(&format!("mrm_iterations_{k}"));
            v.mrm_iterations = Some(k);
            out.push(v);
        }
        for &(a, b) in &self.ratio_sets {
            let mut v = VariantSpec::named(&format!(
                "mrm_ratios_{}_{}",
                (a * 100.0).round() as i64,
                (b * 100.0).round() as i64
            ));
            v.mrm_ratios = Some((a, b));
            out.push(v);
        }
        for sizes in &self.patch_size_sets {
            let label: Vec<String> = sizes.iter().map(|p| p.to_string()).collect();
            let mut v = VariantSpec::named(&format!("rcu_patches_{}", label.join("_")));
            v.rcu_patch_sizes = Some(sizes.clone());
            out.push(v);
        }
        for &m in &self.diff_metrics {
            let label = match m {
                DiffMetric::AbsDiff => "absdiff",
                DiffMetric::Mse => "mse",
                DiffMetric::Ssim => "ssim",
            };
            let mut v = VariantSpec::named(&format!("mrm_metric_{label}"));
            v.mrm_metric = Some(m);
            out.push(v);
        }
        for (i, v) in out.iter().enumerate() {
            if v.name.is_empty() {
                bail_config!("variant {} has an empty name", i);
            }
            if out[..i].iter().any(|prev| prev.name == v.name) {
                bail_config!("duplicate variant name '{}'", v.name);
            }
        }
        Ok(out)
    }
}

// ---- run configuration ------------------------------------------------------------

/// Everything one ablation run needs: the plan plus the shared base
/// configurations for data, MAE, residual maps, model, and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub plan: AblationPlan,
    pub synth: SynthConfig,
    pub mae: MaeConfig,
    pub mae_steps: usize,
    pub mrm: MrmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            plan: AblationPlan::default(),
            synth: SynthConfig::default(),
            mae: MaeConfig::default(),
            mae_steps: 200,
            mrm: MrmConfig::default(),
            model: light_model(),
            train: TrainConfig::default(),
        }
    }
}

/// Reduced-capacity model used as the ablation default so a full sweep stays
/// in desk-scale time. The full-size default remains available for single
/// training runs.
pub fn light_model() -> ModelConfig {
    ModelConfig { depth: 3, base_channels: 8, ..ModelConfig::default() }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.synth.validate()?;
        self.mae.validate()?;
        self.mrm.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.mae.input_size != self.synth.image_size {
            bail_config!(
                "mae input size {} does not match the dataset image size {}",
                self.mae.input_size,
                self.synth.image_size
            );
        }
        if self.model.input_size != self.synth.image_size {
            bail_config!(
                "model input size {} does not match the dataset image size {}",
                self.model.input_size,
                self.synth.image_size
            );
        }
        Ok(())
    }
}

// ---- results ----------------------------------------------------------------------

/// Test-set outcome of one (variant, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricValues,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Fields in which the resolved configuration differs from the base.
    pub config_diff: Vec<String>,
    pub parameter_count: Option<usize>,
    pub runs: Vec<SeedRun>,
    /// Seed-averaged test metrics; absent when the variant failed.
    pub mean: Option<MetricValues>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

fn mean_metrics(runs: &[SeedRun]) -> MetricValues {
    let n = runs.len() as f64;
    let mut m =
        MetricValues { dice: 0.0, iou: 0.0, precision: 0.0, recall: 0.0, fpr: 0.0, vose: 0.0 };
    for r in runs {
        m.dice += r.metrics.dice;
        m.iou += r.metrics.iou;
        m.precision += r.metrics.precision;
        m.recall += r.metrics.recall;
        m.fpr += r.metrics.fpr;
        m.vose += r.metrics.vose;
    }
    m.dice /= n;
    m.iou /= n;
    m.precision /= n;
    m.recall /= n;
    m.fpr /= n;
    m.vose /= n;
    m
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationResults {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Seed-averaged test Dice for a named variant, when it succeeded.
    pub fn mean_dice(&self, name: &str) -> Option<f64> {
        self.variant(name).and_then(|v| v.mean.as_ref()).map(|m| m.dice)
    }

    /// One aggregate row per variant; failed variants carry their error text.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,n_seeds,dice,iou,precision,recall,fpr,vose,parameters,error\n");
        for v in &self.variants {
            match &v.mean {
                Some(m) => {
                    out.push_str(&format!(
                        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},\n",
                        csv_field(&v.name),
                        v.runs.len(),
                        m.dice,
                        m.iou,
                        m.precision,
                        m.recall,
                        m.fpr,
                        m.vose,
                        v.parameter_count.unwrap_or(0),
                    ));
                }
                None => {
                    out.push_str(&format!(
                        "{},0,,,,,,,,{}\n",
                        csv_field(&v.name),
                        csv_field(v.error.as_deref().unwrap_or("")),
                    ));
                }
            }
        }
        out
    }

    /// One row per (variant, seed) training run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(
            "variant,seed,dice,iou,precision,recall,fpr,vose,best_epoch,epochs_run,best_val_loss\n",
        );
        for v in &self.variants {
            for r in &v.runs {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}\n",
                    csv_field(&v.name),
                    r.seed,
                    r.metrics.dice,
                    r.metrics.iou,
                    r.metrics.precision,
                    r.metrics.recall,
                    r.metrics.fpr,
                    r.metrics.vose,
                    r.best_epoch,
                    r.epochs_run,
                    r.best_val_loss,
                ));
            }
        }
        out
    }
}

/// Short stable hash of the run configuration, used in run-directory names.
pub fn plan_hash(cfg: &AblationConfig) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    format!("{:08x}", crate::seeding::hash_str(&json) as u32)
}

// ---- execution --------------------------------------------------------------------

struct SharedInputs {
    data: Dataset,
    mae: MaeWeights,
}

fn prepare_shared(cfg: &AblationConfig) -> Result<SharedInputs> {
    let data = generate_dataset(&cfg.synth)?;
    let healthy: Vec<ImageSlice> =
        data.train.iter().filter(|s| !s.has_lesion()).cloned().collect();
    if healthy.is_empty() {
        bail_config!("no lesion-free training slices to fit the MAE on; lower lesion_fraction");
    }
    let mut mae = init_mae(&cfg.mae)?;
    train_mae(&mut mae, &healthy, cfg.mae_steps)?;
    Ok(SharedInputs { data, mae })
}

fn all_slices(data: &Dataset) -> Vec<ImageSlice> {
    let mut out = Vec::with_capacity(data.train.len() + data.val.len() + data.test.len());
    out.extend(data.train.iter().cloned());
    out.extend(data.val.iter().cloned());
    out.extend(data.test.iter().cloned());
    out
}

/// Residual maps keyed by the exact generation config, so variants that share
/// settings reuse one set and sweep variants get their own.
struct MrmCache {
    sets: Vec<(MrmConfig, MrmSet)>,
}

impl MrmCache {
    fn get_or_generate(
        &mut self,
        mae: &MaeWeights,
        slices: &[ImageSlice],
        cfg: &MrmConfig,
    ) -> Result<usize> {
        if let Some(i) = self.sets.iter().position(|(c, _)| c == cfg) {
            return Ok(i);
        }
        let set = generate_mrm_set(mae, slices, cfg)?;
        self.sets.push((cfg.clone(), set));
        Ok(self.sets.len() - 1)
    }
}

struct VariantOutcome {
    config_diff: Vec<String>,
    parameter_count: usize,
    runs: Vec<SeedRun>,
    /// First-seed test predictions, aligned with the dataset's test slices.
    first_seed_preds: Vec<Array2<u8>>,
}

fn run_variant(
    spec: &VariantSpec,
    cfg: &AblationConfig,
    shared: &SharedInputs,
    cache: &mut MrmCache,
    slices: &[ImageSlice],
) -> Result<VariantOutcome> {
    let (model_cfg, mrm_cfg) = spec.apply(&cfg.model, &cfg.mrm);
    model_cfg.validate()?;
    mrm_cfg.validate()?;

    let mut diff: Vec<String> =
        model_config_diff(&cfg.model, &model_cfg).iter().map(|s| s.to_string()).collect();
    diff.extend(mrm_config_diff(&cfg.mrm, &mrm_cfg).iter().map(|s| s.to_string()));

    let empty = MrmSet::new(mrm_cfg.clone());
    let mrms: &MrmSet = if model_cfg.enable_rcu {
        let idx = cache.get_or_generate(&shared.mae, slices, &mrm_cfg)?;
        &cache.sets[idx].1
    } else {
        &empty
    };

    let mut parameter_count = 0;
    let mut runs = Vec::with_capacity(cfg.plan.seeds.len());
    let mut first_seed_preds = Vec::new();
    for (run_idx, &seed) in cfg.plan.seeds.iter().enumerate() {
        let run_cfg = ModelConfig { seed, ..model_cfg.clone() };
        let mut model = build_model(&run_cfg)?;
        parameter_count = model.parameter_count();
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let history = train(&mut model, &shared.data.train, &shared.data.val, mrms, &tc)?;

        let mut items = Vec::with_capacity(shared.data.test.len());
        for s in &shared.data.test {
            let pred = predict_mask(&model, &s.pixels, mrms.for_slice(s))?;
            items.push((s.patient_id.clone(), pred, s.mask.clone()));
        }
        if run_idx == 0 {
            first_seed_preds = items.iter().map(|(_, pred, _)| pred.clone()).collect();
        }
        let report = evaluate_slices(&items)?;
        runs.push(SeedRun {
            seed,
            metrics: report.mean,
            best_epoch: history.best_epoch,
            epochs_run: history.records.len(),
            best_val_loss: history.best_val_loss,
        });
    }
    Ok(VariantOutcome { config_diff: diff, parameter_count, runs, first_seed_preds })
}

/// Results plus the in-memory artifacts qualitative figures need: test
/// slices, one variant's predictions over them, and their residual pairs.
pub struct AblationRun {
    pub results: AblationResults,
    pub test_slices: Vec<ImageSlice>,
    /// Variant behind `reference_preds` (the last successful one).
    pub reference_variant: Option<String>,
    /// First-seed test predictions, aligned with `test_slices`.
    pub reference_preds: Vec<Array2<u8>>,
    /// Test-slice residual pairs under the base config; empty when no variant
    /// used them.
    pub overlay_mrms: MrmSet,
}

/// Runs the full plan. Per-variant configuration failures are captured in the
/// variant's `error` field; dataset or MAE failures abort the whole run.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationResults> {
    Ok(run_ablation_full(cfg)?.results)
}

/// `run_ablation` plus the qualitative artifacts.
pub fn run_ablation_full(cfg: &AblationConfig) -> Result<AblationRun> {
    cfg.validate()?;
    let variants = cfg.plan.expand()?;
    let shared = prepare_shared(cfg)?;
    let slices = all_slices(&shared.data);
    let mut cache = MrmCache { sets: Vec::new() };

    let mut out = Vec::with_capacity(variants.len());
    let mut reference: Option<(String, Vec<Array2<u8>>)> = None;
    for spec in &variants {
        match run_variant(spec, cfg, &shared, &mut cache, &slices) {
            Ok(v) => {
                reference = Some((spec.name.clone(), v.first_seed_preds));
                out.push(VariantResult {
                    name: spec.name.clone(),
                    config_diff: v.config_diff,
                    parameter_count: Some(v.parameter_count),
                    mean: Some(mean_metrics(&v.runs)),
                    runs: v.runs,
                    error: None,
                });
            }
            Err(e) => out.push(VariantResult {
                name: spec.name.clone(),
                config_diff: spec.declared_fields().iter().map(|s| s.to_string()).collect(),
                parameter_count: None,
                runs: Vec::new(),
                mean: None,
                error: Some(e.to_string()),
            }),
        }
    }

    let mut overlay_mrms = MrmSet::new(cfg.mrm.clone());
    if let Some((_, full_set)) = cache.sets.iter().find(|(c, _)| *c == cfg.mrm) {
        for s in &shared.data.test {
            if let Some(pair) = full_set.for_slice(s) {
                overlay_mrms.insert(s.patient_id.clone(), s.slice_index, pair.clone());
            }
        }
    }
    let (reference_variant, reference_preds) = match reference {
        Some((name, preds)) => (Some(name), preds),
        None => (None, Vec::new()),
    };
    Ok(AblationRun {
        results: AblationResults { seeds: cfg.plan.seeds.clone(), variants: out },
        test_slices: shared.data.test,
        reference_variant,
        reference_preds,
        overlay_mrms,
    })
}
