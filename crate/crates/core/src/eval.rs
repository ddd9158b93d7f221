//! Evaluation metrics, label-map and band-image rendering, and per-individual
//! interval-averaged spectra.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cube::{AnnotationSet, BandImage, HsCube};
use crate::error::{Error, Result};
use crate::transforms::ColorTables;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Confusion matrix (rows = true class, columns = predicted), per-class
/// accuracies, and overall accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
}

impl EvalReport {
    /// Unweighted mean of per-class accuracies. Equals overall accuracy when
    /// classes are balanced.
    pub fn macro_average(&self) -> f64 {
        if self.per_class_accuracy.is_empty() {
            return 0.0;
        }
        self.per_class_accuracy.iter().sum::<f64>() / self.per_class_accuracy.len() as f64
    }

    /// Renders the report as a per-class accuracy table with an average
    /// column, one row per label list entry.
    pub fn format_table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str("id    ");
        for name in class_names {
            out.push_str(&format!("{name:>8}"));
        }
        out.push_str("  |     Ave.\n");
        out.push_str("acc%  ");
        for acc in &self.per_class_accuracy {
            out.push_str(&format!("{:>8.2}", acc * 100.0));
        }
        out.push_str(&format!("  | {:>8.2}\n", self.macro_average() * 100.0));
        out.push_str(&format!(
            "overall accuracy: {:.4} ({} samples)\n",
            self.overall_accuracy,
            self.confusion.iter().flatten().sum::<u64>()
        ));
        out
    }
}

/// Builds the evaluation report from parallel prediction/truth label slices.
pub fn evaluate(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truth.iter()) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range: pred {p}, true {t}, classes {num_classes}"
            )));
        }
        confusion[t][p] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let row_sum: u64 = row.iter().sum();
            if row_sum == 0 {
                0.0 // empty classes score zero
            } else {
                confusion[c][c] as f64 / row_sum as f64
            }
        })
        .collect();
    Ok(EvalReport {
        confusion,
        per_class_accuracy,
        overall_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
    })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Fixed 27-entry label palette; distinct hues for up to 27 individuals.
pub const LABEL_PALETTE: [[u8; 3]; 27] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [244, 164, 96],
    [47, 79, 79],
    [255, 105, 180],
    [72, 61, 139],
    [143, 188, 143],
    [184, 134, 11],
    [95, 158, 160],
    [216, 191, 216],
];

const OUTSIDE_MASK_GRAY: [u8; 3] = [128, 128, 128];

/// Colors a label map with a palette; pixels outside the optional mask render
/// neutral gray.
pub fn render_label_map(
    labels: &Array2<u16>,
    palette: &[[u8; 3]],
    mask: Option<&Array2<u16>>,
) -> Result<RgbImage> {
    let (h, w) = labels.dim();
    if let Some(m) = mask {
        if m.dim() != labels.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mask is {:?}, labels are {:?}",
                m.dim(),
                labels.dim()
            )));
        }
    }
    if let Some(&max) = labels.iter().max() {
        if max as usize >= palette.len() {
            return Err(Error::InvalidArgument(format!(
                "label {max} exceeds palette of {} colors",
                palette.len()
            )));
        }
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &label) in labels.indexed_iter() {
        let inside = mask.map_or(true, |m| m[[y, x]] > 0);
        let color = if inside {
            palette[label as usize]
        } else {
            OUTSIDE_MASK_GRAY
        };
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
    Ok(img)
}

/// Colormaps for band-image rendering. Viridis runs dark blue to yellow, so
/// brighter bands read as more yellow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    Viridis,
    Gray,
}

/// Viridis anchors at 33 evenly spaced positions; lookups interpolate.
const VIRIDIS_ANCHORS: [[u8; 3]; 33] = [
    [68, 1, 84],
    [71, 13, 96],
    [72, 24, 106],
    [72, 35, 116],
    [71, 46, 124],
    [69, 56, 130],
    [66, 65, 134],
    [62, 74, 137],
    [58, 84, 140],
    [54, 93, 141],
    [50, 101, 142],
    [46, 109, 142],
    [43, 117, 142],
    [40, 125, 142],
    [37, 132, 142],
    [34, 140, 141],
    [31, 148, 140],
    [30, 156, 137],
    [32, 163, 134],
    [37, 171, 130],
    [46, 179, 124],
    [58, 186, 118],
    [72, 193, 110],
    [88, 199, 101],
    [108, 205, 90],
    [127, 211, 78],
    [147, 215, 65],
    [168, 219, 52],
    [192, 223, 37],
    [213, 226, 26],
    [234, 229, 26],
    [253, 231, 37],
    [253, 231, 37],
];

fn colormap_lookup(map: Colormap, t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    match map {
        Colormap::Gray => {
            let v = (t * 255.0).round() as u8;
            [v, v, v]
        }
        Colormap::Viridis => {
            let scaled = t * 32.0;
            let i = (scaled.floor() as usize).min(31);
            let frac = scaled - i as f64;
            let a = VIRIDIS_ANCHORS[i];
            let b = VIRIDIS_ANCHORS[i + 1];
            let mut out = [0u8; 3];
            for c in 0..3 {
                out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * frac).round() as u8;
            }
            out
        }
    }
}

/// Min-max normalizes a band plane and renders it through a colormap.
/// A constant plane renders at the colormap midpoint.
pub fn render_band_image(band: &BandImage, colormap: Colormap) -> Result<RgbImage> {
    if band.plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("band plane".into()));
    }
    let (h, w) = band.plane.dim();
    let min = band.plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = band.plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in band.plane.indexed_iter() {
        let t = if range == 0.0 {
            0.5
        } else {
            ((v - min) / range) as f64
        };
        img.put_pixel(x as u32, y as u32, Rgb(colormap_lookup(colormap, t)));
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Interval-averaged spectra
// ---------------------------------------------------------------------------

/// Which labeled pixels enter the per-individual spectrum averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RegionRule {
    /// Every pixel of the individual's mask.
    AllMaskPixels,
    /// Pixels whose synthesized-RGB luminance is at or above this quantile
    /// within the individual's mask, per cube. Approximates "bright body
    /// parts" selection; 0.6 is the default.
    LuminanceQuantile(f64),
}

impl Default for RegionRule {
    fn default() -> Self {
        RegionRule::LuminanceQuantile(0.6)
    }
}

/// One averaged spectrum: an individual over one time interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraRow {
    pub individual: u16,
    pub interval_index: usize,
    pub interval_start: DateTime<Utc>,
    pub interval_end: DateTime<Utc>,
    pub pixel_count: usize,
    pub mean_spectrum: Vec<f64>,
}

/// Interval-averaged spectra per individual, plus the shared wavelength axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraSummary {
    pub wavelengths_nm: Vec<f64>,
    pub rows: Vec<SpectraRow>,
}

impl SpectraSummary {
    /// CSV with columns: individual, interval_index, interval_start,
    /// interval_end, count, then one column per band.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("individual,interval_index,interval_start,interval_end,count");
        for (i, w) in self.wavelengths_nm.iter().enumerate() {
            out.push_str(&format!(",b{i}_{w}nm"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                row.individual,
                row.interval_index,
                row.interval_start.to_rfc3339(),
                row.interval_end.to_rfc3339(),
                row.pixel_count
            ));
            for v in &row.mean_spectrum {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Quantile threshold over luminances: value at the floor(q * (n-1)) rank.
fn quantile_threshold(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((values.len() - 1) as f64 * q).floor() as usize;
    values[idx]
}

/// Averages each individual's selected pixels over every cube whose capture
/// time falls in each interval. Intervals are half-open `[start, end)` and
/// must not overlap; individuals or intervals with no pixels are omitted.
pub fn interval_mean_spectra(
    items: &[(HsCube, AnnotationSet)],
    intervals: &[(DateTime<Utc>, DateTime<Utc>)],
    rule: RegionRule,
    tables: &ColorTables,
) -> Result<SpectraSummary> {
    for (start, end) in intervals {
        if start >= end {
            return Err(Error::InvalidArgument(format!(
                "empty interval {start} .. {end}"
            )));
        }
    }
    let mut sorted: Vec<_> = intervals.to_vec();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::InvalidArgument(format!(
                "overlapping intervals {} .. {} and {} .. {}",
                pair[0].0, pair[0].1, pair[1].0, pair[1].1
            )));
        }
    }
    if let RegionRule::LuminanceQuantile(q) = rule {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!(
                "luminance quantile must be in [0, 1], got {q}"
            )));
        }
    }

    let missing: Vec<String> = items
        .iter()
        .filter(|(c, _)| c.capture_time.is_none())
        .map(|(c, _)| c.cube_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCaptureTime(missing));
    }

    let mut wavelengths: Option<Vec<f64>> = None;
    // (individual, interval index) -> (per-band sums, pixel count)
    let mut acc: BTreeMap<(u16, usize), (Vec<f64>, usize)> = BTreeMap::new();

    for (cube, ann) in items {
        let time = cube.capture_time.expect("checked above");
        let Some(interval_index) = intervals
            .iter()
            .position(|(start, end)| time >= *start && time < *end)
        else {
            continue;
        };
        ann.validate(cube.height(), cube.width())?;
        match &wavelengths {
            None => wavelengths = Some(cube.wavelengths_nm.clone()),
            Some(w) => {
                if *w != cube.wavelengths_nm {
                    return Err(Error::DimensionMismatch(format!(
                        "cube {} has a different wavelength grid",
                        cube.cube_id
                    )));
                }
            }
        }

        // Collect each individual's pixels in this cube.
        let mut per_id: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
        for ((y, x), &id) in ann.id_mask.indexed_iter() {
            if id > 0 {
                per_id.entry(id).or_default().push((x, y));
            }
        }

        let synth = match rule {
            RegionRule::AllMaskPixels => None,
            RegionRule::LuminanceQuantile(_) => Some(tables.synthesizer(&cube.wavelengths_nm)?),
        };

        for (id, pixels) in per_id {
            let selected: Vec<(usize, usize)> = match (&rule, &synth) {
                (RegionRule::AllMaskPixels, _) => pixels,
                (RegionRule::LuminanceQuantile(q), Some(synth)) => {
                    let lums: Vec<f64> = pixels
                        .iter()
                        .map(|&(x, y)| synth.luminance(&cube.spectrum_at(x, y)))
                        .collect::<Result<_>>()?;
                    let threshold = quantile_threshold(&mut lums.clone(), *q);
                    pixels
                        .iter()
                        .zip(lums.iter())
                        .filter(|&(_, &l)| l >= threshold)
                        .map(|(&p, _)| p)
                        .collect()
                }
                (RegionRule::LuminanceQuantile(_), None) => unreachable!(),
            };
            if selected.is_empty() {
                continue;
            }
            let entry = acc
                .entry((id, interval_index))
                .or_insert_with(|| (vec![0.0; cube.bands()], 0));
            for (x, y) in selected {
                for (b, v) in cube.spectrum_at(x, y).iter().enumerate() {
                    entry.0[b] += *v as f64;
                }
                entry.1 += 1;
            }
        }
    }

    let rows = acc
        .into_iter()
        .map(|((individual, interval_index), (sums, count))| SpectraRow {
            individual,
            interval_index,
            interval_start: intervals[interval_index].0,
            interval_end: intervals[interval_index].1,
            pixel_count: count,
            mean_spectrum: sums.into_iter().map(|s| s / count as f64).collect(),
        })
        .collect();

    Ok(SpectraSummary {
        wavelengths_nm: wavelengths.unwrap_or_default(),
        rows,
    })
}
