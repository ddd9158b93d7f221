//! Spatial denoising and annotated-pixel extraction.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::cube::{AnnotationSet, HsCube};
use crate::error::{Error, Result};

/// One pixel's feature vector with its class label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub features: Vec<f32>,
    pub label: usize,
    pub source: SampleSource,
}

/// Where a sample came from: owning cube and pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSource {
    pub cube_id: Arc<str>,
    pub x: u32,
    pub y: u32,
}

/// Mean filter over one spatial plane with replicate edge padding.
///
/// Separable implementation: a horizontal then a vertical running mean, each
/// with clamped indices, which is exactly the 2-D window mean under replicate
/// padding. Sums are accumulated in f64 before rounding back to f32.
fn box_filter_plane(plane: ArrayView2<'_, f32>, kernel: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (kernel / 2) as isize;
    let k = kernel as f64;

    // Horizontal pass, f64 accumulation.
    let mut horiz = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0f64;
            for dx in -r..=r {
                let xi = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                sum += plane[[y, xi]] as f64;
            }
            horiz[[y, x]] = sum / k;
        }
    }

    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0f64;
            for dy in -r..=r {
                let yi = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                sum += horiz[[yi, x]];
            }
            out[[y, x]] = (sum / k) as f32;
        }
    }
    out
}

/// Replaces each band with its spatial window mean over a `kernel x kernel`
/// neighborhood (replicate padding at the edges). Output shape equals input
/// shape; bands are processed independently.
pub fn box_filter(cube: &HsCube, kernel: usize) -> Result<HsCube> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(format!(
            "box filter kernel must be odd and >= 1, got {kernel}"
        )));
    }
    if kernel > cube.height().min(cube.width()) {
        return Err(Error::InvalidArgument(format!(
            "box filter kernel {} exceeds cube extent {}x{}",
            kernel,
            cube.height(),
            cube.width()
        )));
    }
    if kernel == 1 {
        return Ok(cube.clone());
    }

    let planes: Vec<Array2<f32>> = (0..cube.bands())
        .into_par_iter()
        .map(|b| box_filter_plane(cube.data.index_axis(Axis(0), b), kernel))
        .collect();

    let mut data = cube.data.clone();
    for (b, plane) in planes.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), b).assign(&plane);
    }
    Ok(HsCube {
        cube_id: cube.cube_id.clone(),
        wavelengths_nm: cube.wavelengths_nm.clone(),
        capture_time: cube.capture_time,
        data,
    })
}

/// Extracts one sample per labeled pixel whose id appears in `class_map`.
///
/// Pixels are visited in row-major order, so output order is deterministic.
/// Features are the pixel's full spectrum, copied verbatim from the cube.
pub fn extract_samples(
    cube: &HsCube,
    ann: &AnnotationSet,
    class_map: &BTreeMap<u16, usize>,
) -> Result<Vec<SpectralSample>> {
    if ann.cube_id != cube.cube_id {
        return Err(Error::DimensionMismatch(format!(
            "annotation is for cube {:?}, not {:?}",
            ann.cube_id, cube.cube_id
        )));
    }
    ann.validate(cube.height(), cube.width())?;
    let cube_id: Arc<str> = Arc::from(cube.cube_id.as_str());
    let mut samples = Vec::new();
    for ((y, x), &id) in ann.id_mask.indexed_iter() {
        if id == 0 {
            continue;
        }
        if let Some(&label) = class_map.get(&id) {
            samples.push(SpectralSample {
                features: cube.spectrum_at(x, y),
                label,
                source: SampleSource {
                    cube_id: Arc::clone(&cube_id),
                    x: x as u32,
                    y: y as u32,
                },
            });
        }
    }
    Ok(samples)
}

/// Gathers samples at explicit pixel positions (e.g. from a split plan).
pub fn gather_samples(
    cube: &HsCube,
    picks: &[(u32, u32, usize)],
) -> Result<Vec<SpectralSample>> {
    let cube_id: Arc<str> = Arc::from(cube.cube_id.as_str());
    picks
        .iter()
        .map(|&(x, y, label)| {
            if x as usize >= cube.width() || y as usize >= cube.height() {
                return Err(Error::DimensionMismatch(format!(
                    "pixel ({x}, {y}) outside cube {}x{}",
                    cube.height(),
                    cube.width()
                )));
            }
            Ok(SpectralSample {
                features: cube.spectrum_at(x as usize, y as usize),
                label,
                source: SampleSource {
                    cube_id: Arc::clone(&cube_id),
                    x,
                    y,
                },
            })
        })
        .collect()
}
