//! Synthetic low-contrast lesion dataset.
//!
//! Slices are smooth textured backgrounds with optional soft-edged circular
//! lesions whose contrast is deliberately small relative to the background
//! variation. Each slice belongs to a synthetic patient; splits are
//! patient-disjoint so evaluation never sees a training patient. Slice
//! generation is keyed by `(seed, split, index)` only, so a dataset is
//! reproducible regardless of how patients are assigned.
//!
//! On disk a dataset is `manifest.json` plus 16-bit PNGs (image, mask) and
//! optional raw HU planes per slice.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels;
use crate::seeding;
use crate::{bail_config, io, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Generator configuration. Defaults give the desk-scale dataset: 64x64
/// slices, 400/50/50 split across 20 patients, half the slices lesioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_patients: usize,
    /// Fraction of slices that contain lesions (per split).
    pub lesion_fraction: f64,
    /// Inclusive range of lesion count on a lesioned slice.
    pub lesions_per_slice: (usize, usize),
    /// Lesion radius range in pixels.
    pub lesion_radius: (f64, f64),
    /// Peak intensity offset of a lesion above its local background.
    pub lesion_contrast: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Cell size (pixels) of the smooth background texture grid.
    pub background_scale: usize,
    /// Also emit HU-like planes for the calcium-scoring path.
    pub hu_mode: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_train: 400,
            n_val: 50,
            n_test: 50,
            n_patients: 20,
            lesion_fraction: 0.5,
            lesions_per_slice: (1, 3),
            lesion_radius: (2.0, 6.0),
            lesion_contrast: (0.05, 0.15),
            noise_sigma: 0.02,
            background_scale: 8,
            hu_mode: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total_slices(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            bail_config!("image_size must be at least 8, got {}", self.image_size);
        }
        if self.total_slices() == 0 {
            bail_config!("dataset must contain at least one slice");
        }
        if self.n_patients == 0 {
            bail_config!("n_patients must be positive");
        }
        let active = [self.n_train, self.n_val, self.n_test]
            .iter()
            .filter(|&&n| n > 0)
            .count();
        if self.n_patients < active {
            bail_config!(
                "n_patients ({}) must cover every non-empty split ({active})",
                self.n_patients
            );
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            bail_config!("lesion_fraction must be in [0, 1], got {}", self.lesion_fraction);
        }
        if self.lesions_per_slice.0 == 0 || self.lesions_per_slice.0 > self.lesions_per_slice.1 {
            bail_config!("lesions_per_slice range {:?} is invalid", self.lesions_per_slice);
        }
        if !(self.lesion_radius.0 > 0.0 && self.lesion_radius.0 <= self.lesion_radius.1) {
            bail_config!("lesion_radius range {:?} is invalid", self.lesion_radius);
        }
        if 2.0 * self.lesion_radius.1 + 2.0 >= self.image_size as f64 {
            bail_config!(
                "lesion_radius.1 = {} is too large for image_size {}",
                self.lesion_radius.1,
                self.image_size
            );
        }
        if !(self.lesion_contrast.0 >= 0.0 && self.lesion_contrast.0 <= self.lesion_contrast.1) {
            bail_config!("lesion_contrast range {:?} is invalid", self.lesion_contrast);
        }
        if self.noise_sigma < 0.0 {
            bail_config!("noise_sigma must be non-negative");
        }
        if self.background_scale == 0 || self.background_scale > self.image_size {
            bail_config!(
                "background_scale must be in [1, image_size], got {}",
                self.background_scale
            );
        }
        Ok(())
    }
}

/// One 2-D slice with its lesion mask and optional HU plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    /// Intensities in `[0, 1]`, shape `(H, W)`.
    pub pixels: Array2<f32>,
    /// Binary lesion mask, `{0, 1}`.
    pub mask: Array2<u8>,
    /// HU-like plane aligned with `pixels` (present in `hu_mode`).
    pub hu: Option<Array2<f32>>,
    pub patient_id: String,
    pub slice_index: u32,
}

impl ImageSlice {
    pub fn has_lesion(&self) -> bool {
        self.mask.iter().any(|&v| v != 0)
    }

    pub fn key(&self) -> (String, u32) {
        (self.patient_id.clone(), self.slice_index)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceEntry {
    pub patient_id: String,
    pub slice_index: u32,
    pub split: Split,
    pub has_lesion: bool,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hu: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub slices: Vec<SliceEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &SliceEntry> {
        self.slices.iter().filter(move |e| e.split == split)
    }
}

/// In-memory dataset grouped by split, in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<ImageSlice>,
    pub val: Vec<ImageSlice>,
    pub test: Vec<ImageSlice>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageSlice] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<ImageSlice> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Allocates patients to splits proportionally to slice counts; every
/// non-empty split receives at least one patient.
fn allocate_patients(cfg: &SynthConfig) -> [usize; 3] {
    let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
    let total = cfg.total_slices() as f64;
    let ideal: Vec<f64> = counts
        .iter()
        .map(|&n| cfg.n_patients as f64 * n as f64 / total)
        .collect();
    let mut alloc: Vec<usize> = ideal.iter().map(|&x| x.floor() as usize).collect();
    let mut rem: usize = cfg.n_patients - alloc.iter().sum::<usize>();
    // Distribute the remainder by descending fractional part (ties by index).
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        if counts[i] > 0 {
            alloc[i] += 1;
            rem -= 1;
        }
    }
    // Non-empty splits need at least one patient; take from the largest.
    for i in 0..3 {
        if counts[i] > 0 && alloc[i] == 0 {
            let donor = (0..3).max_by_key(|&j| alloc[j]).unwrap();
            alloc[donor] -= 1;
            alloc[i] += 1;
        }
    }
    [alloc[0], alloc[1], alloc[2]]
}

/// Generates the full dataset in memory.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let alloc = allocate_patients(cfg);
    let mut dataset = Dataset::default();
    let mut first_patient = 0usize;
    for (si, &split) in Split::ALL.iter().enumerate() {
        let n_slices = [cfg.n_train, cfg.n_val, cfg.n_test][si];
        let n_patients = alloc[si];
        for j in 0..n_slices {
            let mut rng = seeding::rng_for(cfg.seed, &[split.tag(), j as u64]);
            let lesioned = rng.gen::<f64>() < cfg.lesion_fraction;
            let (pixels, mask, hu) = generate_slice(cfg, &mut rng, lesioned);
            let patient = first_patient + j % n_patients;
            dataset.split_mut(split).push(ImageSlice {
                pixels,
                mask,
                hu,
                patient_id: format!("p{patient:03}"),
                slice_index: (j / n_patients) as u32,
            });
        }
        first_patient += n_patients;
    }
    Ok(dataset)
}

fn generate_slice(
    cfg: &SynthConfig,
    rng: &mut impl Rng,
    lesioned: bool,
) -> (Array2<f32>, Array2<u8>, Option<Array2<f32>>) {
    let n = cfg.image_size;

    // Smooth background: a coarse uniform grid upsampled bilinearly.
    let g = n / cfg.background_scale + 1;
    let coarse = Array3::from_shape_fn((g.max(2), g.max(2), 1), |_| {
        0.0 // placeholder, filled below in a deterministic scan order
    });
    let mut coarse = coarse;
    for v in coarse.iter_mut() {
        *v = rng.gen_range(0.35..0.65);
    }
    let bg = kernels::resize_bilinear(&coarse.view(), n, n);
    let mut pixels = Array2::from_shape_fn((n, n), |(y, x)| bg[[y, x, 0]]);

    // A couple of broad soft blobs for organ-like texture.
    let n_blobs = rng.gen_range(1..=2);
    for _ in 0..n_blobs {
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let r = rng.gen_range(n as f64 / 8.0..n as f64 / 4.0);
        let amp = rng.gen_range(-0.08..0.08) as f32;
        add_blob(&mut pixels, cy, cx, r, amp, None);
    }

    // Lesions: soft paraboloid bumps; the mask is the supporting disk.
    let mut mask = Array2::<u8>::zeros((n, n));
    let mut lesion_profile = Array2::<f32>::zeros((n, n));
    if lesioned {
        let count = rng.gen_range(cfg.lesions_per_slice.0..=cfg.lesions_per_slice.1);
        for _ in 0..count {
            let r = rng.gen_range(cfg.lesion_radius.0..=cfg.lesion_radius.1);
            let margin = r + 1.0;
            let cy = rng.gen_range(margin..n as f64 - margin);
            let cx = rng.gen_range(margin..n as f64 - margin);
            let contrast = rng.gen_range(cfg.lesion_contrast.0..=cfg.lesion_contrast.1) as f32;
            add_blob(&mut pixels, cy, cx, r, contrast, Some((&mut mask, &mut lesion_profile)));
        }
    }

    // HU plane is derived from the clean content, before sensor noise.
    let hu = cfg.hu_mode.then(|| {
        Array2::from_shape_fn((n, n), |(y, x)| {
            300.0 * pixels[[y, x]] - 50.0 + 220.0 * lesion_profile[[y, x]]
        })
    });

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f64, cfg.noise_sigma).expect("validated sigma");
        for v in pixels.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    (pixels, mask, hu)
}

/// Adds `amp * max(0, 1 - (d/r)^2)` centred at `(cy, cx)`. When `targets` is
/// given, also records the profile and marks the supporting disk in the mask.
fn add_blob(
    pixels: &mut Array2<f32>,
    cy: f64,
    cx: f64,
    r: f64,
    amp: f32,
    targets: Option<(&mut Array2<u8>, &mut Array2<f32>)>,
) {
    let n = pixels.dim().0;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize + 1).min(n);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize + 1).min(n);
    let mut targets = targets;
    for y in y0..y1 {
        for x in x0..x1 {
            let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r);
            if d2 <= 1.0 {
                let profile = (1.0 - d2) as f32;
                pixels[[y, x]] += amp * profile;
                if let Some((mask, prof)) = targets.as_mut() {
                    mask[[y, x]] = 1;
                    prof[[y, x]] = prof[[y, x]].max(profile);
                }
            }
        }
    }
}

fn slice_stem(e: &ImageSlice) -> String {
    format!("{}_s{:03}", e.patient_id, e.slice_index)
}

/// Writes the dataset under `dir` and returns the manifest (also saved as
/// `manifest.json`).
pub fn save_dataset(dir: &Path, dataset: &Dataset, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for &split in &Split::ALL {
        for s in dataset.split(split) {
            let stem = slice_stem(s);
            let rel_dir = PathBuf::from(split.dir_name());
            let image = rel_dir.join(format!("{stem}.png"));
            let mask = rel_dir.join(format!("{stem}_mask.png"));
            io::write_png16(&dir.join(&image), &s.pixels)?;
            io::write_mask_png(&dir.join(&mask), &s.mask)?;
            let hu = match &s.hu {
                Some(plane) => {
                    let rel = rel_dir.join(format!("{stem}.hu"));
                    io::write_raw_plane(&dir.join(&rel), plane)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(SliceEntry {
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                split,
                has_lesion: s.has_lesion(),
                image,
                mask,
                hu,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        slices: entries,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(crate::Error::format(
            dir.join("manifest.json"),
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Loads one split back into memory, in manifest order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<ImageSlice>> {
    let mut out = Vec::new();
    for e in manifest.split_entries(split) {
        let pixels = io::read_png16(&dir.join(&e.image))?;
        let mask = io::read_mask_png(&dir.join(&e.mask))?;
        let hu = match &e.hu {
            Some(rel) => Some(io::read_raw_plane(&dir.join(rel))?),
            None => None,
        };
        out.push(ImageSlice {
            pixels,
            mask,
            hu,
            patient_id: e.patient_id.clone(),
            slice_index: e.slice_index,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest = load_manifest(dir)?;
    let dataset = Dataset {
        train: load_split(dir, &manifest, Split::Train)?,
        val: load_split(dir, &manifest, Split::Val)?,
        test: load_split(dir, &manifest, Split::Test)?,
    };
    Ok((manifest, dataset))
}

/// Resamples a slice to `target x target`: bilinear for intensities and HU,
/// nearest-neighbour for the label mask.
pub fn resize_slice(slice: &ImageSlice, target: usize) -> Result<ImageSlice> {
    if target == 0 {
        crate::bail_validation!("resize target must be positive");
    }
    let (h, w) = slice.pixels.dim();
    let lift = |a: &Array2<f32>| {
        Array3::from_shape_fn((h, w, 1), |(y, x, _)| a[[y, x]])
    };
    let drop = |a: Array3<f32>| Array2::from_shape_fn((target, target), |(y, x)| a[[y, x, 0]]);
    Ok(ImageSlice {
        pixels: drop(kernels::resize_bilinear(&lift(&slice.pixels).view(), target, target)),
        mask: kernels::resize_nearest2(&slice.mask.view(), target, target),
        hu: slice
            .hu
            .as_ref()
            .map(|hu| drop(kernels::resize_bilinear(&lift(hu).view(), target, target))),
        patient_id: slice.patient_id.clone(),
        slice_index: slice.slice_index,
    })
}

/// Synthetic HU volume with spherical calcified lesions, for the
/// calcium-scoring path. Background stays well below the 130 HU threshold;
/// lesion cores exceed it.
pub struct HuVolume {
    pub hu: Array3<f32>,
    pub mask: Array3<u8>,
}

pub fn synth_hu_volume(seed: u64, dims: (usize, usize, usize), n_lesions: usize) -> HuVolume {
    let (d, h, w) = dims;
    assert!(d >= 3 && h >= 8 && w >= 8, "volume too small");
    let mut rng = seeding::rng_for(seed, &[0x701]);
    let mut hu = Array3::from_shape_fn((d, h, w), |_| 0.0f32);
    for v in hu.iter_mut() {
        *v = rng.gen_range(-30.0..90.0);
    }
    let mut mask = Array3::<u8>::zeros((d, h, w));
    for _ in 0..n_lesions {
        let r = rng.gen_range(1.4..(h.min(w) as f64 / 4.0).max(1.6));
        let cz = rng.gen_range(0.0..d as f64);
        let cy = rng.gen_range(r..h as f64 - r);
        let cx = rng.gen_range(r..w as f64 - r);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let d2 = ((z as f64 - cz).powi(2)
                        + (y as f64 - cy).powi(2)
                        + (x as f64 - cx).powi(2))
                        / (r * r);
                    if d2 <= 1.0 {
                        mask[[z, y, x]] = 1;
                        hu[[z, y, x]] += 280.0 * (1.0 - d2 as f32) + 80.0;
                    }
                }
            }
        }
    }
    HuVolume { hu, mask }
}
