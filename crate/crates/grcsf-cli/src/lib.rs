//! Command-line driver for the GRCSF pipeline.
//!
//! Every subcommand reads one JSON config (all sections optional, defaults
//! apply), accepts dotted-path overrides via `--set section.key=value`, and
//! writes a resolved-config snapshot next to its outputs so any run can be
//! repeated exactly from the artifacts it left behind. Exit codes: 0 on
//! success, 1 on usage/validation errors, 2 on I/O errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use grcsf_core::ablation::{plan_hash, run_ablation_full, AblationConfig, AblationResults};
use grcsf_core::backbone::{
    build_model, load_model, predict_mask, save_model, train, ModelConfig, TrainConfig,
};
use grcsf_core::error::{Error, Result};
use grcsf_core::io;
use grcsf_core::losses_metrics::{evaluate_slices, score_calcium, CalciumReport};
use grcsf_core::plots::{dice_chart, emit_plots, iou_chart, save_svg};
use grcsf_core::residual_map::{
    generate_mrm_set, init_mae, load_mae, load_mrm_set, save_mae, save_mrm_set, train_mae,
    MaeConfig, MrmConfig, MrmSet,
};
use grcsf_core::synthdata::{generate_dataset, load_dataset, save_dataset, ImageSlice, SynthConfig};

// ---- configuration ------------------------------------------------------------------

/// Artifact locations. `out` is the root for everything; the optional fields
/// override the per-artifact defaults derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output root. The `GRCSF_OUT` environment variable overrides it.
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub mae: Option<PathBuf>,
    pub mrm: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Ablation results JSON consumed by `plot`.
    pub results: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out: PathBuf::from("runs"), data: None, mae: None, mrm: None, model: None, results: None }
    }
}

impl Paths {
    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
    pub fn mae_file(&self) -> PathBuf {
        self.mae.clone().unwrap_or_else(|| self.out.join("mae.json"))
    }
    pub fn mrm_dir(&self) -> PathBuf {
        self.mrm.clone().unwrap_or_else(|| self.out.join("mrm"))
    }
    pub fn model_file(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.json"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
    pub fn calcium_dir(&self) -> PathBuf {
        self.out.join("calcium")
    }
}

/// Settings for metric evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Physical volume of one voxel, used by calcium scoring.
    pub voxel_volume: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { voxel_volume: 1.0 }
    }
}

/// One config for all subcommands. Unknown keys anywhere are rejected.
/// `ablation` is self-contained (its own data/model/training sections) so an
/// ablation snapshot replays without touching the single-run sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub mae: MaeConfig,
    pub mae_steps: usize,
    pub mrm: MrmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub paths: Paths,
}

impl RunConfig {
    fn override_seeds(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.mae.seed = seed;
        self.mrm.base_seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.ablation.synth.seed = seed;
        self.ablation.mae.seed = seed;
        self.ablation.mrm.base_seed = seed;
        self.ablation.model.seed = seed;
        self.ablation.train.seed = seed;
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            mae: MaeConfig::default(),
            mae_steps: 200,
            mrm: MrmConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Applies one `key.path=value` override to the config JSON tree. The value
/// is parsed as JSON when possible and kept as a string otherwise, so both
/// `--set train.max_epochs=3` and `--set paths.out=run-a` work.
fn apply_set(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(Error::Config(format!("--set '{spec}' is not of the form key.path=value")));
    };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set '{spec}' has an empty path segment")));
    }
    let mut node = &mut *tree;
    for seg in &segments[..segments.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set '{spec}': '{seg}' is not an object")))?;
        node = obj.entry(seg.to_string()).or_insert(serde_json::json!({}));
    }
    let leaf = segments[segments.len() - 1];
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("--set '{spec}': parent of '{leaf}' is not an object")))?;
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(leaf.to_string(), value);
    Ok(())
}

/// Reads the optional config file, applies overrides, then environment.
fn load_config(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut tree: serde_json::Value = match file {
        Some(p) => serde_json::from_slice(&io::read_bytes(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::json!({}),
    };
    for s in sets {
        apply_set(&mut tree, s)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.override_seeds(s);
    }
    if let Some(out) = std::env::var_os("GRCSF_OUT") {
        cfg.paths.out = PathBuf::from(out);
    }
    Ok(cfg)
}

// ---- argument parsing ----------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "grcsf",
    version,
    about = "Dual-feature-compensation lesion segmentation pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; omitted sections use defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.max_epochs=3 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override every section seed at once
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads for data-parallel stages
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it under the data directory
    SynthData,
    /// Train the masked autoencoder on lesion-free training slices
    TrainMae,
    /// Generate multi-ratio residual maps for every dataset slice
    GenMrm,
    /// Train the segmentation model (requires data; residual maps when the
    /// RCU is enabled)
    Train,
    /// Evaluate a trained model on the test split and write metric reports
    Eval,
    /// Stack test slices per patient and score calcium lesions on HU volumes
    EvalCalcium,
    /// Run the ablation plan end to end and emit results, reports, figures
    Ablate,
    /// Re-render bar charts from a saved ablation results JSON
    Plot,
}

/// Entry point behind `main`: returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap renders its own usage text for both help and errors
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Format { .. } => 2,
                Error::Config(_) | Error::Validation(_) | Error::Serde(_) => 1,
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".to_string()));
        }
        // keeps an existing pool when one is already installed
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.command {
        Command::SynthData => cmd_synth_data(&cfg),
        Command::TrainMae => cmd_train_mae(&cfg),
        Command::GenMrm => cmd_gen_mrm(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::EvalCalcium => cmd_eval_calcium(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Plot => cmd_plot(&cfg),
    }
}

// ---- subcommands -----------------------------------------------------------------------

fn write_snapshot(path: &Path, cfg: &RunConfig) -> Result<()> {
    io::write_json(path, cfg)
}

/// `<dir>/<stem>.history.jsonl` next to a checkpoint at `<dir>/<stem>.<ext>`.
fn history_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{}.history.jsonl", stem.unwrap_or_else(|| "run".into())))
}

fn sibling_snapshot(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{}.config.json", stem.unwrap_or_else(|| "run".into())))
}

fn cmd_synth_data(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.paths.data_dir();
    let data = generate_dataset(&cfg.synth)?;
    let manifest = save_dataset(&dir, &data, &cfg.synth)?;
    write_snapshot(&dir.join("config.json"), cfg)?;
    println!(
        "wrote {} slices ({} train / {} val / {} test) for {} patients to {}",
        manifest.slices.len(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.synth.n_patients,
        dir.display()
    );
    Ok(())
}

fn cmd_train_mae(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_dataset(&cfg.paths.data_dir())?;
    let healthy: Vec<ImageSlice> =
        data.train.iter().filter(|s| !s.has_lesion()).cloned().collect();
    if healthy.is_empty() {
        return Err(Error::Validation(
            "no lesion-free training slices to fit the MAE on".to_string(),
        ));
    }
    let mut weights = init_mae(&cfg.mae)?;
    let history = train_mae(&mut weights, &healthy, cfg.mae_steps)?;

    let path = cfg.paths.mae_file();
    save_mae(&path, &weights)?;
    let jsonl: String =
        history.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    io::atomic_write(&history_path(&path), jsonl.as_bytes())?;
    write_snapshot(&sibling_snapshot(&path), cfg)?;
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => println!(
            "mae: {} steps on {} slices, loss {:.5} -> {:.5}; saved to {}",
            history.len(),
            healthy.len(),
            first.loss,
            last.loss,
            path.display()
        ),
        _ => println!("mae: 0 steps (weights left at initialization); saved to {}", path.display()),
    }
    Ok(())
}

fn cmd_gen_mrm(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_dataset(&cfg.paths.data_dir())?;
    let weights = load_mae(&cfg.paths.mae_file())?;
    let mut slices = data.train;
    slices.extend(data.val);
    slices.extend(data.test);
    let set = generate_mrm_set(&weights, &slices, &cfg.mrm)?;

    let dir = cfg.paths.mrm_dir();
    save_mrm_set(&dir, &set)?;
    write_snapshot(&dir.join("config.json"), cfg)?;
    println!(
        "wrote residual pairs for {} slices (ratios {:?}, {} iterations) to {}",
        set.len(),
        cfg.mrm.ratios,
        cfg.mrm.iterations,
        dir.display()
    );
    Ok(())
}

fn load_mrms_if_needed(cfg: &RunConfig) -> Result<MrmSet> {
    if cfg.model.enable_rcu {
        load_mrm_set(&cfg.paths.mrm_dir())
    } else {
        Ok(MrmSet::new(cfg.mrm.clone()))
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_dataset(&cfg.paths.data_dir())?;
    let mrms = load_mrms_if_needed(cfg)?;
    let mut model = build_model(&cfg.model)?;
    println!("model: {} parameters", model.parameter_count());

    let history = train(&mut model, &data.train, &data.val, &mrms, &cfg.train)?;
    let path = cfg.paths.model_file();
    save_model(&path, &model)?;
    history.save_jsonl(&history_path(&path))?;
    write_snapshot(&sibling_snapshot(&path), cfg)?;
    println!(
        "trained {} epochs; best val loss {:.5} at epoch {}{}; saved to {}",
        history.records.len(),
        history.best_val_loss,
        history.best_epoch,
        if history.stopped_early { " (stopped early)" } else { "" },
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_dataset(&cfg.paths.data_dir())?;
    let model = load_model(&cfg.paths.model_file())?;
    let mrms = if model.config.enable_rcu {
        load_mrm_set(&cfg.paths.mrm_dir())?
    } else {
        MrmSet::new(cfg.mrm.clone())
    };

    let mut items = Vec::with_capacity(data.test.len());
    for s in &data.test {
        let pred = predict_mask(&model, &s.pixels, mrms.for_slice(s))?;
        items.push((s.patient_id.clone(), pred, s.mask.clone()));
    }
    let report = evaluate_slices(&items)?;

    let dir = cfg.paths.eval_dir();
    io::write_json(&dir.join("metrics.json"), &report)?;
    io::atomic_write(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    write_snapshot(&dir.join("config.json"), cfg)?;
    println!(
        "eval: mean dice {:.4}, iou {:.4} over {} slices / {} patients; reports in {}",
        report.mean.dice,
        report.mean.iou,
        report.n_slices,
        report.n_patients,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct PatientCalcium {
    patient_id: String,
    n_slices: usize,
    #[serde(flatten)]
    report: CalciumReport,
}

fn stack_volume<T: Clone + Default>(planes: &[Array2<T>]) -> Array3<T> {
    let (h, w) = planes[0].dim();
    Array3::from_shape_fn((planes.len(), h, w), |(z, y, x)| planes[z][[y, x]].clone())
}

fn cmd_eval_calcium(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_dataset(&cfg.paths.data_dir())?;
    let model = load_model(&cfg.paths.model_file())?;
    let mrms = if model.config.enable_rcu {
        load_mrm_set(&cfg.paths.mrm_dir())?
    } else {
        MrmSet::new(cfg.mrm.clone())
    };

    let mut by_patient: BTreeMap<String, Vec<&ImageSlice>> = BTreeMap::new();
    for s in &data.test {
        by_patient.entry(s.patient_id.clone()).or_default().push(s);
    }

    let mut rows = Vec::new();
    for (pid, mut slices) in by_patient {
        slices.sort_by_key(|s| s.slice_index);
        let mut hu_planes = Vec::with_capacity(slices.len());
        let mut gt_planes = Vec::with_capacity(slices.len());
        let mut pred_planes = Vec::with_capacity(slices.len());
        for s in &slices {
            let hu = s.hu.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "slice {}/{} has no HU plane; regenerate the dataset with synth.hu_mode=true",
                    s.patient_id, s.slice_index
                ))
            })?;
            hu_planes.push(hu.clone());
            gt_planes.push(s.mask.clone());
            pred_planes.push(predict_mask(&model, &s.pixels, mrms.for_slice(s))?);
        }
        let report = score_calcium(
            &stack_volume(&pred_planes),
            &stack_volume(&gt_planes),
            &stack_volume(&hu_planes),
            cfg.eval.voxel_volume,
        )?;
        rows.push(PatientCalcium { patient_id: pid, n_slices: slices.len(), report });
    }

    let dir = cfg.paths.calcium_dir();
    io::write_json(&dir.join("calcium.json"), &rows)?;
    let mut csv = String::from(
        "patient_id,n_slices,gt_lesions,pred_lesions,gt_volume,pred_volume,volume_error,\
         lesion_tp,lesion_fp,lesion_fn,lesion_precision,lesion_recall,lesion_f1\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{:.6},{:.6},{:.6}\n",
            r.patient_id,
            r.n_slices,
            r.report.gt_lesions,
            r.report.pred_lesions,
            r.report.gt_volume,
            r.report.pred_volume,
            r.report.volume_error,
            r.report.lesion_tp,
            r.report.lesion_fp,
            r.report.lesion_fn,
            r.report.lesion_precision,
            r.report.lesion_recall,
            r.report.lesion_f1,
        ));
    }
    io::atomic_write(&dir.join("calcium.csv"), csv.as_bytes())?;
    write_snapshot(&dir.join("config.json"), cfg)?;

    let mean_f1 = rows.iter().map(|r| r.report.lesion_f1).sum::<f64>() / rows.len().max(1) as f64;
    println!(
        "calcium: {} patients, mean lesion F1 {:.4}; reports in {}",
        rows.len(),
        mean_f1,
        dir.display()
    );
    Ok(())
}

fn results_table(results: &AblationResults) -> String {
    let name_w = results.variants.iter().map(|v| v.name.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<name_w$}  {:>6}  {:>6}  {:>9}  {}\n", "variant", "dice", "iou", "params", "note");
    for v in &results.variants {
        match (&v.mean, &v.error) {
            (Some(m), _) => out.push_str(&format!(
                "{:<name_w$}  {:>6.4}  {:>6.4}  {:>9}  \n",
                v.name,
                m.dice,
                m.iou,
                v.parameter_count.unwrap_or(0)
            )),
            (None, err) => out.push_str(&format!(
                "{:<name_w$}  {:>6}  {:>6}  {:>9}  {}\n",
                v.name,
                "-",
                "-",
                "-",
                err.as_deref().unwrap_or("failed")
            )),
        }
    }
    out
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let dir = cfg.paths.out.join(format!("ablate-{stamp}-{}", plan_hash(&cfg.ablation)));

    let run = run_ablation_full(&cfg.ablation)?;
    io::write_json(&dir.join("results.json"), &run.results)?;
    io::atomic_write(&dir.join("results.csv"), run.results.to_csv().as_bytes())?;
    io::atomic_write(&dir.join("runs.csv"), run.results.runs_csv().as_bytes())?;
    emit_plots(&run, &dir)?;
    write_snapshot(&dir.join("config.json"), cfg)?;

    print!("{}", results_table(&run.results));
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_plot(cfg: &RunConfig) -> Result<()> {
    let Some(results_path) = &cfg.paths.results else {
        return Err(Error::Config(
            "plot needs paths.results pointing at an ablation results JSON".to_string(),
        ));
    };
    let results: AblationResults = io::read_json(results_path)?;
    let dir = results_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    save_svg(&dir.join("dice.svg"), &dice_chart(&results)?)?;
    save_svg(&dir.join("iou.svg"), &iou_chart(&results)?)?;
    write_snapshot(&dir.join("plot.config.json"), cfg)?;
    println!("wrote dice.svg and iou.svg to {}", dir.display());
    Ok(())
}
