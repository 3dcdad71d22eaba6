//! Figure rendering for ablation runs: SVG bar charts (seed points included),
//! a Dice-by-lesion-size breakdown, and qualitative PNG overlay panels.
//!
//! SVG is emitted directly as text so figures stay dependency-free and
//! byte-reproducible; overlays go through the `image` crate's PNG encoder.

use ndarray::Array2;
use std::path::Path;

use crate::ablation::AblationResults;
use crate::bail_config;
use crate::error::Result;
use crate::losses_metrics::{count_confusion, metrics_from_counts, MetricValues};
use crate::residual_map::ResidualPair;
use crate::synthdata::ImageSlice;

// ---- bar charts -------------------------------------------------------------------

/// One bar: its mean plus the individual values behind it (drawn as points).
#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub mean: f64,
    pub points: Vec<f64>,
}

const BAR_W: f64 = 72.0;
const BAR_GAP: f64 = 28.0;
const PLOT_H: f64 = 260.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 46.0;

/// Vertical bar chart with per-group scatter points. The y axis starts at
/// zero and spans at least `[0, 1]`, growing when values exceed it.
pub fn bar_chart_svg(title: &str, y_label: &str, groups: &[BarGroup]) -> Result<String> {
    if groups.is_empty() {
        bail_config!("cannot render a bar chart with no groups");
    }
    let mut y_max = 1.0f64;
    for g in groups {
        y_max = y_max.max(g.mean);
        for &p in &g.points {
            y_max = y_max.max(p);
        }
    }
    y_max *= 1.02;

    let width = MARGIN_L + groups.len() as f64 * (BAR_W + BAR_GAP) + BAR_GAP;
    let height = MARGIN_T + PLOT_H + MARGIN_B;
    let y_of = |v: f64| MARGIN_T + PLOT_H - (v.max(0.0) / y_max) * PLOT_H;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        MARGIN_T + PLOT_H / 2.0,
        MARGIN_T + PLOT_H / 2.0,
        xml_escape(y_label)
    ));

    // gridlines and tick labels at five even divisions
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let y = y_of(v);
        s.push_str(&format!(
            "  <line x1=\"{MARGIN_L:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>\n",
            width - BAR_GAP
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0
        ));
    }

    for (i, g) in groups.iter().enumerate() {
        let x = MARGIN_L + BAR_GAP + i as f64 * (BAR_W + BAR_GAP);
        let y = y_of(g.mean);
        s.push_str(&format!(
            "  <rect class=\"bar\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{BAR_W:.1}\" \
             height=\"{:.1}\" fill=\"#4878a8\"/>\n",
            MARGIN_T + PLOT_H - y
        ));
        for (k, &p) in g.points.iter().enumerate() {
            // spread points horizontally so equal values stay visible
            let px = x + BAR_W * (k as f64 + 1.0) / (g.points.len() as f64 + 1.0);
            s.push_str(&format!(
                "  <circle class=\"pt\" cx=\"{px:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#222\"/>\n",
                y_of(p)
            ));
        }
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            x + BAR_W / 2.0,
            MARGIN_T + PLOT_H + 18.0,
            xml_escape(&g.label)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>\n",
            x + BAR_W / 2.0,
            (y - 5.0).max(12.0),
            g.mean
        ));
    }
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L:.1}\" y1=\"{MARGIN_T:.1}\" x2=\"{MARGIN_L:.1}\" y2=\"{:.1}\" \
         stroke=\"#000\"/>\n",
        MARGIN_T + PLOT_H
    ));
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn results_chart(
    results: &AblationResults,
    title: &str,
    y_label: &str,
    pick: fn(&MetricValues) -> f64,
) -> Result<String> {
    let groups: Vec<BarGroup> = results
        .variants
        .iter()
        .filter_map(|v| {
            v.mean.as_ref().map(|m| BarGroup {
                label: v.name.clone(),
                mean: pick(m),
                points: v.runs.iter().map(|r| pick(&r.metrics)).collect(),
            })
        })
        .collect();
    if groups.is_empty() {
        bail_config!("no successful variants to plot");
    }
    bar_chart_svg(title, y_label, &groups)
}

/// Mean test Dice per variant, one point per seed.
pub fn dice_chart(results: &AblationResults) -> Result<String> {
    results_chart(results, "Test Dice by variant", "Dice", |m| m.dice)
}

/// Mean test IoU per variant, one point per seed.
pub fn iou_chart(results: &AblationResults) -> Result<String> {
    results_chart(results, "Test IoU by variant", "IoU", |m| m.iou)
}

// ---- lesion-size breakdown ----------------------------------------------------------

/// Lesion-size bins in ground-truth pixels (inclusive bounds).
pub const SIZE_BINS: [(u64, u64); 4] = [(1, 10), (11, 100), (101, 1000), (1001, u64::MAX)];

#[derive(Debug, Clone, PartialEq)]
pub struct SizeBin {
    pub label: String,
    pub n_slices: usize,
    pub mean_dice: f64,
}

/// Per-slice Dice grouped by ground-truth lesion pixel count. Slices without
/// lesions and bins without slices are omitted.
pub fn lesion_size_breakdown(cases: &[(Array2<u8>, Array2<u8>)]) -> Result<Vec<SizeBin>> {
    let mut sums = [0.0f64; SIZE_BINS.len()];
    let mut counts = [0usize; SIZE_BINS.len()];
    for (pred, gt) in cases {
        let pixels = gt.iter().map(|&v| u64::from(v)).sum::<u64>();
        if pixels == 0 {
            continue;
        }
        let dice = metrics_from_counts(&count_confusion(pred, gt)?).dice;
        let bin = SIZE_BINS.iter().position(|&(lo, hi)| pixels >= lo && pixels <= hi).unwrap();
        sums[bin] += dice;
        counts[bin] += 1;
    }
    let mut out = Vec::new();
    for (i, &(lo, hi)) in SIZE_BINS.iter().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let label = if hi == u64::MAX { format!(">{}", lo - 1) } else { format!("{lo}-{hi}") };
        out.push(SizeBin { label, n_slices: counts[i], mean_dice: sums[i] / counts[i] as f64 });
    }
    Ok(out)
}

/// Bar chart of the breakdown; errors when every bin is empty.
pub fn size_breakdown_svg(bins: &[SizeBin]) -> Result<String> {
    if bins.is_empty() {
        bail_config!("no lesioned slices to bin by size");
    }
    let groups: Vec<BarGroup> = bins
        .iter()
        .map(|b| BarGroup {
            label: format!("{} (n={})", b.label, b.n_slices),
            mean: b.mean_dice,
            points: Vec::new(),
        })
        .collect();
    bar_chart_svg("Test Dice by lesion size (pixels)", "Dice", &groups)
}

// ---- overlay panels -----------------------------------------------------------------

fn gray_of(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Residual heat ramp: dark blue for low response through red for the max.
fn heat_of(v: f32, max: f32) -> [u8; 3] {
    let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    [(t * 255.0).round() as u8, (t * 64.0).round() as u8, ((1.0 - t) * 192.0).round() as u8]
}

/// Side-by-side panels for one slice: input, ground-truth overlay (green),
/// prediction overlay (red), and both residual maps when available. Overlays
/// tint exactly the pixels set in the corresponding mask.
pub fn overlay_panel(
    slice: &ImageSlice,
    pred: &Array2<u8>,
    pair: Option<&ResidualPair>,
) -> Result<image::RgbImage> {
    let (h, w) = slice.pixels.dim();
    if pred.dim() != (h, w) {
        bail_config!("prediction shape {:?} does not match the slice {:?}", pred.dim(), (h, w));
    }
    if let Some(p) = pair {
        if p.rm1.dim() != (h, w) || p.rm2.dim() != (h, w) {
            bail_config!("residual map shape does not match the slice {:?}", (h, w));
        }
    }
    let n_panels = if pair.is_some() { 5 } else { 3 };
    let mut img = image::RgbImage::new((n_panels * w) as u32, h as u32);

    let rm_max = pair.map(|p| {
        let m1 = p.rm1.iter().cloned().fold(0.0f32, f32::max);
        let m2 = p.rm2.iter().cloned().fold(0.0f32, f32::max);
        (m1, m2)
    });
    for y in 0..h {
        for x in 0..w {
            let g = gray_of(slice.pixels[[y, x]]);
            let put = |img: &mut image::RgbImage, panel: usize, px: [u8; 3]| {
                img.put_pixel((panel * w + x) as u32, y as u32, image::Rgb(px));
            };
            put(&mut img, 0, [g, g, g]);
            let gt = if slice.mask[[y, x]] != 0 {
                [g / 2, ((g as u16 + 255) / 2) as u8, g / 2]
            } else {
                [g, g, g]
            };
            put(&mut img, 1, gt);
            let pr = if pred[[y, x]] != 0 {
                [((g as u16 + 255) / 2) as u8, g / 2, g / 2]
            } else {
                [g, g, g]
            };
            put(&mut img, 2, pr);
            if let (Some(p), Some((m1, m2))) = (pair, rm_max) {
                put(&mut img, 3, heat_of(p.rm1[[y, x]], m1));
                put(&mut img, 4, heat_of(p.rm2[[y, x]], m2));
            }
        }
    }
    Ok(img)
}

/// Encodes to PNG and writes atomically.
pub fn save_rgb_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| crate::error::Error::format(path, format!("png encode: {e}")))?;
    crate::io::atomic_write(path, &bytes)
}

/// Writes SVG text atomically.
pub fn save_svg(path: &Path, svg: &str) -> Result<()> {
    crate::io::atomic_write(path, svg.as_bytes())
}

// ---- run figures ----------------------------------------------------------------------

const MAX_OVERLAYS: usize = 4;

/// Standard figure set for one ablation run: Dice and IoU bar charts, the
/// lesion-size breakdown for the reference variant, and overlay panels for
/// the first few lesioned test slices. Returns the paths written. Fails when
/// no variant succeeded.
pub fn emit_plots(run: &crate::ablation::AblationRun, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let put_svg = |name: &str, svg: String, written: &mut Vec<std::path::PathBuf>| {
        let path = dir.join(name);
        save_svg(&path, &svg)?;
        written.push(path);
        Ok::<(), crate::error::Error>(())
    };
    put_svg("dice.svg", dice_chart(&run.results)?, &mut written)?;
    put_svg("iou.svg", iou_chart(&run.results)?, &mut written)?;

    if !run.reference_preds.is_empty() {
        let cases: Vec<(Array2<u8>, Array2<u8>)> = run
            .test_slices
            .iter()
            .zip(&run.reference_preds)
            .map(|(s, p)| (p.clone(), s.mask.clone()))
            .collect();
        let bins = lesion_size_breakdown(&cases)?;
        if !bins.is_empty() {
            put_svg("size_breakdown.svg", size_breakdown_svg(&bins)?, &mut written)?;
        }

        let mut emitted = 0;
        for (s, pred) in run.test_slices.iter().zip(&run.reference_preds) {
            if !s.has_lesion() {
                continue;
            }
            let img = overlay_panel(s, pred, run.overlay_mrms.for_slice(s))?;
            let path = dir.join(format!("overlay_{}_s{:03}.png", s.patient_id, s.slice_index));
            save_rgb_png(&path, &img)?;
            written.push(path);
            emitted += 1;
            if emitted == MAX_OVERLAYS {
                break;
            }
        }
    }
    Ok(written)
}
