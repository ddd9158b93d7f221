//! Hyperspectral cube data model and on-disk container.
//!
//! A cube is stored as a pair of files: `<name>.hsc.json` carrying the header
//! (dimensions, wavelength axis, capture metadata, payload pointer) and
//! `<name>.hsc.raw` carrying the intensity volume as little-endian `f32` in
//! band-sequential (BSQ) order. Annotations for a cube live in a 16-bit
//! grayscale PNG id mask plus a JSON sidecar for labeled bounding boxes.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bands of a paper-conformant cube.
pub const STANDARD_BANDS: usize = 151;
/// First wavelength of the standard grid, in nm.
pub const STANDARD_WAVELENGTH_START_NM: f64 = 350.0;
/// Grid spacing of the standard wavelength axis, in nm.
pub const STANDARD_WAVELENGTH_STEP_NM: f64 = 5.0;

/// The standard 151-band wavelength grid: 350, 355, ..., 1100 nm.
pub fn standard_wavelength_grid() -> Vec<f64> {
    (0..STANDARD_BANDS)
        .map(|i| STANDARD_WAVELENGTH_START_NM + STANDARD_WAVELENGTH_STEP_NM * i as f64)
        .collect()
}

/// An H x W x B intensity volume with its wavelength axis and capture metadata.
///
/// `data` is shaped `(bands, height, width)` so each band plane is contiguous,
/// matching the BSQ payload layout. Values are unitless sensor intensities;
/// the invariants require them finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HsCube {
    pub cube_id: String,
    pub wavelengths_nm: Vec<f64>,
    pub capture_time: Option<DateTime<Utc>>,
    pub data: Array3<f32>,
}

impl HsCube {
    /// Builds a cube and checks all invariants.
    pub fn new(
        cube_id: impl Into<String>,
        wavelengths_nm: Vec<f64>,
        data: Array3<f32>,
        capture_time: Option<DateTime<Utc>>,
    ) -> Result<Self> {
        let cube = HsCube {
            cube_id: cube_id.into(),
            wavelengths_nm,
            capture_time,
            data,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// The full spectrum of pixel (x, y), one value per band.
    pub fn spectrum_at(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.bands()).map(|b| self.data[[b, y, x]]).collect()
    }

    /// Checks every cube invariant, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let (bands, height, width) = self.data.dim();
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidCube(format!(
                "empty dimensions {height}x{width}x{bands}"
            )));
        }
        if self.wavelengths_nm.len() != bands {
            return Err(Error::InvalidCube(format!(
                "wavelength axis has {} entries for {} bands",
                self.wavelengths_nm.len(),
                bands
            )));
        }
        for pair in self.wavelengths_nm.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::InvalidCube(format!(
                    "wavelengths not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.wavelengths_nm.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidCube("non-finite wavelength".into()));
        }
        for &v in self.data.iter() {
            if !v.is_finite() {
                return Err(Error::InvalidCube("non-finite intensity value".into()));
            }
            if v < 0.0 {
                return Err(Error::InvalidCube(format!("negative intensity {v}")));
            }
        }
        Ok(())
    }
}

/// One wavelength slice of a cube, an unmodified view copy of its plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BandImage {
    pub band_index: usize,
    pub wavelength_nm: f64,
    pub plane: Array2<f32>,
}

/// Extracts the plane of one band together with its wavelength.
pub fn extract_band(cube: &HsCube, band_index: usize) -> Result<BandImage> {
    if band_index >= cube.bands() {
        return Err(Error::InvalidArgument(format!(
            "band index {} out of range for {} bands",
            band_index,
            cube.bands()
        )));
    }
    Ok(BandImage {
        band_index,
        wavelength_nm: cube.wavelengths_nm[band_index],
        plane: cube
            .data
            .index_axis(ndarray::Axis(0), band_index)
            .to_owned(),
    })
}

/// JSON header of the `.hsc` container.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CubeHeader {
    pub cube_id: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub wavelengths_nm: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub capture_time: Option<DateTime<Utc>>,
    /// Path of the raw payload, relative to the header file.
    pub payload: String,
    /// Payload element type; only "f32le" is defined.
    pub dtype: String,
    /// Payload layout; only "bsq" is defined.
    pub order: String,
}

impl CubeHeader {
    /// Validates header-level invariants (everything checkable without the payload).
    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32le" {
            return Err(Error::InvalidCube(format!(
                "unsupported dtype {:?}",
                self.dtype
            )));
        }
        if self.order != "bsq" {
            return Err(Error::InvalidCube(format!(
                "unsupported order {:?}",
                self.order
            )));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::InvalidCube(format!(
                "empty dimensions {}x{}x{}",
                self.height, self.width, self.bands
            )));
        }
        if self.wavelengths_nm.len() != self.bands {
            return Err(Error::InvalidCube(format!(
                "wavelength axis has {} entries for {} bands",
                self.wavelengths_nm.len(),
                self.bands
            )));
        }
        for pair in self.wavelengths_nm.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::InvalidCube(format!(
                    "wavelengths not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.wavelengths_nm.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidCube("non-finite wavelength".into()));
        }
        if self.payload.is_empty() {
            return Err(Error::InvalidCube("empty payload path".into()));
        }
        Ok(())
    }

    /// Declared payload size in bytes.
    pub fn payload_bytes(&self) -> u64 {
        self.height as u64 * self.width as u64 * self.bands as u64 * 4
    }
}

/// Parses and validates a container header without touching the payload.
pub fn read_header(path: &Path) -> Result<CubeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: CubeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    header.validate().map_err(|e| Error::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(header)
}

/// Reads a cube from an `.hsc.json` header and its raw payload.
pub fn read_cube(path: &Path) -> Result<HsCube> {
    let header = read_header(path)?;
    let payload_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() as u64 != header.payload_bytes() {
        return Err(Error::PayloadSize {
            path: payload_path,
            expected: header.payload_bytes(),
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec((header.bands, header.height, header.width), values)
        .expect("shape checked against payload length");
    HsCube::new(header.cube_id, header.wavelengths_nm, data, header.capture_time)
}

/// Resolves the `.hsc.json` / `.hsc.raw` pair for a given target path.
fn container_paths(path: &Path) -> (PathBuf, PathBuf, String) {
    let s = path.to_string_lossy();
    let stem = if let Some(stripped) = s.strip_suffix(".hsc.json") {
        stripped.to_string()
    } else {
        s.to_string()
    };
    let header = PathBuf::from(format!("{stem}.hsc.json"));
    let raw = PathBuf::from(format!("{stem}.hsc.raw"));
    let raw_name = raw
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("{stem}.hsc.raw"));
    (header, raw, raw_name)
}

/// Writes a cube as `<stem>.hsc.json` + `<stem>.hsc.raw`.
///
/// `read_cube(write_cube(c)) == c` bit-exactly; invalid cubes are refused
/// before anything is written.
pub fn write_cube(cube: &HsCube, path: &Path) -> Result<()> {
    cube.validate()?;
    let (header_path, raw_path, raw_name) = container_paths(path);
    let header = CubeHeader {
        cube_id: cube.cube_id.clone(),
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        wavelengths_nm: cube.wavelengths_nm.clone(),
        capture_time: cube.capture_time,
        payload: raw_name,
        dtype: "f32le".into(),
        order: "bsq".into(),
    };
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    let slice = cube
        .data
        .as_slice()
        .expect("freshly validated cube is standard layout");
    for v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, &bytes).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    Ok(())
}

/// A labeled bounding box; coordinates satisfy `x0 < x1 <= width`, `y0 < y1 <= height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub id: u16,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

/// Per-pixel individual-id mask plus labeled bounding boxes for one cube.
///
/// Mask value 0 means unlabeled background; k >= 1 is an individual id.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub cube_id: String,
    pub id_mask: Array2<u16>,
    pub boxes: Vec<BoundingBox>,
}

impl AnnotationSet {
    pub fn height(&self) -> usize {
        self.id_mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.id_mask.dim().1
    }

    /// Checks annotation invariants against the owning cube's dimensions.
    pub fn validate(&self, cube_height: usize, cube_width: usize) -> Result<()> {
        if self.height() != cube_height || self.width() != cube_width {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{} but cube is {}x{}",
                self.height(),
                self.width(),
                cube_height,
                cube_width
            )));
        }
        for b in &self.boxes {
            if b.id == 0 {
                return Err(Error::InvalidAnnotation("box id must be >= 1".into()));
            }
            if b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::InvalidAnnotation(format!(
                    "degenerate box ({}, {}, {}, {})",
                    b.x0, b.y0, b.x1, b.y1
                )));
            }
            if b.x1 as usize > cube_width || b.y1 as usize > cube_height {
                return Err(Error::InvalidAnnotation(format!(
                    "box ({}, {}, {}, {}) exceeds {}x{}",
                    b.x0, b.y0, b.x1, b.y1, cube_width, cube_height
                )));
            }
        }
        Ok(())
    }

    /// Sorted distinct individual ids present in the mask.
    pub fn present_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.id_mask.iter().copied().filter(|&v| v > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxSidecar {
    cube_id: String,
    height: usize,
    width: usize,
    boxes: Vec<BoundingBox>,
}

fn annotation_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.to_string_lossy();
    (
        PathBuf::from(format!("{s}.mask.png")),
        PathBuf::from(format!("{s}.boxes.json")),
    )
}

/// Writes `<stem>.mask.png` (16-bit grayscale) and `<stem>.boxes.json`.
pub fn write_annotations(ann: &AnnotationSet, stem: &Path) -> Result<()> {
    ann.validate(ann.height(), ann.width())?;
    let (mask_path, boxes_path) = annotation_paths(stem);
    let (h, w) = ann.id_mask.dim();
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for ((y, x), &v) in ann.id_mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([v]));
    }
    img.save(&mask_path)?;
    let sidecar = BoxSidecar {
        cube_id: ann.cube_id.clone(),
        height: h,
        width: w,
        boxes: ann.boxes.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&boxes_path, text).map_err(|e| Error::io(&boxes_path, e))?;
    Ok(())
}

/// Reads the annotation pair written by [`write_annotations`].
///
/// The mask dimensions are validated against the dimensions declared in the
/// box sidecar, and every box against the declared frame.
pub fn read_annotations(stem: &Path) -> Result<AnnotationSet> {
    let (mask_path, boxes_path) = annotation_paths(stem);
    let text = fs::read_to_string(&boxes_path).map_err(|e| Error::io(&boxes_path, e))?;
    let sidecar: BoxSidecar = serde_json::from_str(&text)?;
    let img = image::open(&mask_path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Array2::<u16>::zeros((h, w));
    for (x, y, pixel) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = pixel.0[0];
    }
    let ann = AnnotationSet {
        cube_id: sidecar.cube_id,
        id_mask: mask,
        boxes: sidecar.boxes,
    };
    ann.validate(sidecar.height, sidecar.width)?;
    Ok(ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn small_cube() -> HsCube {
        let data = Array3::from_shape_fn((3, 2, 4), |(b, y, x)| (b * 100 + y * 10 + x) as f32);
        HsCube::new("c0", vec![400.0, 500.0, 600.0], data, None).unwrap()
    }

    #[test]
    fn minimal_cube_round_trips() {
        let dir = tempdir().unwrap();
        let data = Array3::from_shape_vec((3, 1, 1), vec![0.5, 1.5, 2.5]).unwrap();
        let cube = HsCube::new("tiny", vec![400.0, 500.0, 600.0], data, None).unwrap();
        let path = dir.path().join("tiny.hsc.json");
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back, cube);
        assert_eq!(back.height(), 1);
        assert_eq!(back.width(), 1);
        assert_eq!(back.bands(), 3);
    }

    #[test]
    fn paper_shaped_header_is_accepted() {
        let header = CubeHeader {
            cube_id: "frame".into(),
            height: 1080,
            width: 2048,
            bands: 151,
            wavelengths_nm: standard_wavelength_grid(),
            capture_time: None,
            payload: "frame.hsc.raw".into(),
            dtype: "f32le".into(),
            order: "bsq".into(),
        };
        header.validate().unwrap();
        assert_eq!(header.wavelengths_nm[0], 350.0);
        assert_eq!(*header.wavelengths_nm.last().unwrap(), 1100.0);
        assert_eq!(header.payload_bytes(), 2048 * 1080 * 151 * 4);
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let cube = small_cube();
        let path = dir.path().join("c0.hsc.json");
        write_cube(&cube, &path).unwrap();
        // Truncate the payload to what 2 bands would occupy.
        let raw = dir.path().join("c0.hsc.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..2 * 2 * 4 * 2]).unwrap();
        let err = read_cube(&path).unwrap_err();
        assert!(matches!(err, Error::PayloadSize { .. }), "got {err:?}");
    }

    #[test]
    fn nan_cube_is_refused_before_write() {
        let dir = tempdir().unwrap();
        let mut cube = small_cube();
        cube.data[[0, 0, 0]] = f32::NAN;
        let path = dir.path().join("bad.hsc.json");
        let err = write_cube(&cube, &path).unwrap_err();
        assert!(matches!(err, Error::InvalidCube(_)));
        assert!(!path.exists());
        assert!(!dir.path().join("bad.hsc.raw").exists());
    }

    #[test]
    fn negative_intensity_is_refused() {
        let data = Array3::from_shape_vec((1, 1, 2), vec![1.0, -0.5]).unwrap();
        let err = HsCube::new("neg", vec![400.0], data, None).unwrap_err();
        assert!(matches!(err, Error::InvalidCube(_)));
    }

    #[test]
    fn file_size_matches_format_definition() {
        // 2x2x2 cube: payload must be exactly 2*2*2*4 bytes and the total
        // container size the header bytes plus that payload.
        let dir = tempdir().unwrap();
        let data = Array3::from_shape_fn((2, 2, 2), |(b, y, x)| (b + y + x) as f32);
        let cube = HsCube::new("c2", vec![500.0, 600.0], data, None).unwrap();
        let path = dir.path().join("c2.hsc.json");
        write_cube(&cube, &path).unwrap();
        let raw_len = fs::metadata(dir.path().join("c2.hsc.raw")).unwrap().len();
        assert_eq!(raw_len, 2 * 2 * 2 * 4);
        let header_len = fs::metadata(&path).unwrap().len();
        let total: u64 = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().metadata().unwrap().len())
            .sum();
        assert_eq!(total, header_len + raw_len);
    }

    #[test]
    fn capture_time_round_trips() {
        let dir = tempdir().unwrap();
        let mut cube = small_cube();
        cube.capture_time = Some("2024-01-01T09:30:00Z".parse().unwrap());
        let path = dir.path().join("t.hsc.json");
        write_cube(&cube, &path).unwrap();
        assert_eq!(read_cube(&path).unwrap(), cube);
    }

    #[test]
    fn extract_band_views_the_plane() {
        let cube = small_cube();
        let band = extract_band(&cube, 1).unwrap();
        assert_eq!(band.wavelength_nm, 500.0);
        for y in 0..2 {
            for x in 0..4 {
                assert_eq!(band.plane[[y, x]], cube.data[[1, y, x]]);
            }
        }
    }

    #[test]
    fn extract_band_wavelength_of_standard_grid() {
        let grid = standard_wavelength_grid();
        let data = Array3::zeros((151, 1, 1));
        let cube = HsCube::new("std", grid, data, None).unwrap();
        assert_eq!(extract_band(&cube, 0).unwrap().wavelength_nm, 350.0);
        assert_eq!(extract_band(&cube, 150).unwrap().wavelength_nm, 1100.0);
    }

    #[test]
    fn extract_band_constant_cube() {
        let data = Array3::from_elem((2, 3, 3), 7.0);
        let cube = HsCube::new("const", vec![400.0, 500.0], data, None).unwrap();
        let band = extract_band(&cube, 0).unwrap();
        assert!(band.plane.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn extract_band_out_of_range() {
        let grid = standard_wavelength_grid();
        let cube = HsCube::new("std", grid, Array3::zeros((151, 1, 1)), None).unwrap();
        assert!(extract_band(&cube, 151).is_err());
    }

    #[test]
    fn band_sum_equals_spectrum_sum() {
        let cube = small_cube();
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                let direct: f32 = cube.spectrum_at(x, y).iter().sum();
                let via_bands: f32 = (0..cube.bands())
                    .map(|b| extract_band(&cube, b).unwrap().plane[[y, x]])
                    .sum();
                assert_eq!(direct, via_bands);
            }
        }
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempdir().unwrap();
        let mut mask = Array2::<u16>::zeros((4, 5));
        mask[[1, 2]] = 3;
        mask[[2, 2]] = 27;
        let ann = AnnotationSet {
            cube_id: "c0".into(),
            id_mask: mask,
            boxes: vec![BoundingBox {
                id: 3,
                x0: 1,
                y0: 0,
                x1: 4,
                y1: 3,
            }],
        };
        let stem = dir.path().join("c0");
        write_annotations(&ann, &stem).unwrap();
        let back = read_annotations(&stem).unwrap();
        assert_eq!(back, ann);
    }

    #[test]
    fn empty_mask_no_boxes_is_valid() {
        let ann = AnnotationSet {
            cube_id: "c0".into(),
            id_mask: Array2::zeros((3, 3)),
            boxes: vec![],
        };
        ann.validate(3, 3).unwrap();
        assert!(ann.present_ids().is_empty());
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let ann = AnnotationSet {
            cube_id: "c0".into(),
            id_mask: Array2::zeros((30, 30)),
            boxes: vec![BoundingBox {
                id: 1,
                x0: 10,
                y0: 10,
                x1: 5,
                y1: 20,
            }],
        };
        let err = ann.validate(30, 30).unwrap_err();
        assert!(err.to_string().contains("degenerate box"));
    }

    #[test]
    fn mask_with_full_population_of_ids() {
        let mut mask = Array2::<u16>::zeros((3, 9));
        for id in 1..=27u16 {
            let i = (id - 1) as usize;
            mask[[i / 9, i % 9]] = id;
        }
        let ann = AnnotationSet {
            cube_id: "c0".into(),
            id_mask: mask,
            boxes: vec![],
        };
        ann.validate(3, 9).unwrap();
        assert_eq!(ann.present_ids(), (1..=27).collect::<Vec<u16>>());
    }

    #[test]
    fn mask_dims_validated_against_declared_dims() {
        let ann = AnnotationSet {
            cube_id: "c0".into(),
            id_mask: Array2::zeros((4, 4)),
            boxes: vec![],
        };
        assert!(ann.validate(5, 4).is_err());
    }
}
