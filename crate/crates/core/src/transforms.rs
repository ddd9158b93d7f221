//! The three input representations: full spectrum, PCA compression, RGB synthesis.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SpectralSample;

/// Which representation a pixel spectrum is mapped to before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Hs,
    Pca,
    Rgb,
}

impl InputMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputMode::Hs => "hs",
            InputMode::Pca => "pca",
            InputMode::Rgb => "rgb",
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hs" => Ok(InputMode::Hs),
            "pca" => Ok(InputMode::Pca),
            "rgb" => Ok(InputMode::Rgb),
            other => Err(Error::InvalidArgument(format!(
                "unknown input mode {other:?} (expected hs, pca, or rgb)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Fitted principal-component model: top-k orthonormal directions of the
/// mean-centered training data, ordered by descending explained variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major k x B component matrix, rows orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Projects a sample onto the component space: `C . (x - mean)`.
    pub fn project(&self, sample: &[f64]) -> Result<Vec<f64>> {
        if sample.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} dims, model expects {}",
                sample.len(),
                self.input_dim()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|row| {
                row.iter()
                    .zip(sample.iter().zip(self.mean.iter()))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum()
            })
            .collect())
    }

    /// Maps component coordinates back to the input space: `mean + C^T . y`.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "coords have {} dims, model has {} components",
                coords.len(),
                self.k()
            )));
        }
        let mut out = self.mean.clone();
        for (row, &c) in self.components.iter().zip(coords.iter()) {
            for (o, r) in out.iter_mut().zip(row.iter()) {
                *o += c * r;
            }
        }
        Ok(out)
    }
}

/// Fits a PCA model by singular-value decomposition of the centered data.
///
/// Feeding validation or test pixels here leaks information into the
/// transform; callers fit on the training split only. Each component's
/// largest-magnitude coefficient is made positive for reproducibility.
pub fn fit_pca(data: &Array2<f32>, k: usize) -> Result<PcaModel> {
    let (n, b) = data.dim();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > b {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds feature dimension {b}"
        )));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more than {k} samples to fit {k} components, got {n}"
        )));
    }

    let mean: Vec<f64> = (0..b)
        .map(|j| data.column(j).iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();

    let mut centered = DMatrix::<f64>::zeros(n, b);
    let mut total_var = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in 0..b {
            let d = data[[i, j]] as f64 - mean[j];
            centered[(i, j)] = d;
            total_var += d * d;
            scale = scale.max(data[[i, j]].abs() as f64);
        }
    }
    if total_var <= 1e-18 * scale.max(1.0).powi(2) {
        return Err(Error::InvalidArgument(
            "zero variance: all samples are identical".into(),
        ));
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("singular values are finite")
    });

    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let max_val = row
            .iter()
            .copied()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap();
        if max_val < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.push(row);
        let sigma = svd.singular_values[idx];
        explained.push(sigma * sigma / (n as f64 - 1.0));
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Projects one sample through a fitted PCA model, in feature precision.
pub fn apply_pca(model: &PcaModel, sample: &[f32]) -> Result<Vec<f32>> {
    let as_f64: Vec<f64> = sample.iter().map(|&v| v as f64).collect();
    Ok(model.project(&as_f64)?.into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// RGB synthesis
// ---------------------------------------------------------------------------

/// XYZ -> linear sRGB (D65), IEC 61966-2-1.
pub const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// Color-matching functions and illuminant on a 380-780 nm grid, plus the
/// XYZ -> linear RGB matrix. The default asset is the CIE 1931 2-degree
/// observer with the D65 illuminant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorTables {
    pub wavelengths_nm: Vec<f64>,
    /// Per-wavelength (xbar, ybar, zbar) samples.
    pub cmf: Vec<[f64; 3]>,
    pub illuminant: Vec<f64>,
    pub xyz_to_rgb: [[f64; 3]; 3],
}

const DEFAULT_TABLES_CSV: &str = include_str!("../assets/cie1931_d65.csv");

impl ColorTables {
    /// The built-in CIE 1931 / D65 / sRGB tables.
    pub fn standard() -> ColorTables {
        ColorTables::from_csv_str(DEFAULT_TABLES_CSV).expect("embedded asset is valid")
    }

    /// Parses `wavelength_nm, xbar, ybar, zbar, illuminant` rows. A header
    /// line and `#` comments are skipped.
    pub fn from_csv_str(text: &str) -> Result<ColorTables> {
        let mut wavelengths = Vec::new();
        let mut cmf = Vec::new();
        let mut illuminant = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("wavelength") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::InvalidArgument(format!(
                    "color table line {} has {} fields, expected 5",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!(
                        "color table line {}: bad number {s:?}",
                        lineno + 1
                    ))
                })
            };
            wavelengths.push(parse(fields[0])?);
            cmf.push([parse(fields[1])?, parse(fields[2])?, parse(fields[3])?]);
            illuminant.push(parse(fields[4])?);
        }
        let tables = ColorTables {
            wavelengths_nm: wavelengths,
            cmf,
            illuminant,
            xyz_to_rgb: XYZ_TO_SRGB,
        };
        tables.validate()?;
        Ok(tables)
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<ColorTables> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ColorTables::from_csv_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wavelengths_nm.is_empty() {
            return Err(Error::InvalidArgument("empty color tables".into()));
        }
        if self.cmf.len() != self.wavelengths_nm.len()
            || self.illuminant.len() != self.wavelengths_nm.len()
        {
            return Err(Error::InvalidArgument(
                "color table columns have unequal lengths".into(),
            ));
        }
        let finite = self
            .wavelengths_nm
            .iter()
            .chain(self.illuminant.iter())
            .chain(self.cmf.iter().flatten())
            .chain(self.xyz_to_rgb.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite color table entry".into()));
        }
        for pair in self.wavelengths_nm.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::InvalidArgument(
                    "color table wavelengths not strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// Builds the per-band synthesis weights for a cube wavelength grid.
    pub fn synthesizer(&self, cube_wavelengths_nm: &[f64]) -> Result<RgbSynthesizer> {
        RgbSynthesizer::new(self, cube_wavelengths_nm)
    }
}

/// Precomputed weights mapping a spectrum on one cube grid to RGB.
///
/// The spectrum is treated as reflected radiance (illumination already folded
/// in by the sensor); the illuminant fixes the white point so that an
/// illuminant-shaped spectrum maps to (1, 1, 1) before gamma encoding. Cube
/// bands outside the table range contribute nothing; in-range bands sample
/// the tables exactly when the grids align and by linear interpolation
/// otherwise.
#[derive(Debug, Clone)]
pub struct RgbSynthesizer {
    /// Indices of the cube bands that overlap the table range.
    band_indices: Vec<usize>,
    /// Per overlapping band: CMF sample scaled by delta-lambda / normalization.
    weights: Vec<[f64; 3]>,
    xyz_to_rgb: [[f64; 3]; 3],
    input_dim: usize,
}

impl RgbSynthesizer {
    fn new(tables: &ColorTables, cube_wavelengths_nm: &[f64]) -> Result<RgbSynthesizer> {
        let lo = tables.wavelengths_nm[0];
        let hi = *tables.wavelengths_nm.last().unwrap();
        // Resample the tables onto the cube grid. Aligned wavelengths take
        // the table values verbatim; others interpolate linearly.
        let mut band_indices = Vec::new();
        let mut samples: Vec<([f64; 3], f64)> = Vec::new();
        for (i, &w) in cube_wavelengths_nm.iter().enumerate() {
            if w < lo - 1e-9 || w > hi + 1e-9 {
                continue;
            }
            let hi_row = tables
                .wavelengths_nm
                .partition_point(|&t| t < w)
                .min(tables.wavelengths_nm.len() - 1);
            let lo_row = hi_row.saturating_sub(1);
            let (w0, w1) = (tables.wavelengths_nm[lo_row], tables.wavelengths_nm[hi_row]);
            let t = if hi_row == lo_row || (w - w0).abs() < 1e-9 {
                0.0
            } else {
                ((w - w0) / (w1 - w0)).clamp(0.0, 1.0)
            };
            let lerp = |a: f64, b: f64| a + t * (b - a);
            let cmf = [
                lerp(tables.cmf[lo_row][0], tables.cmf[hi_row][0]),
                lerp(tables.cmf[lo_row][1], tables.cmf[hi_row][1]),
                lerp(tables.cmf[lo_row][2], tables.cmf[hi_row][2]),
            ];
            let illum = lerp(tables.illuminant[lo_row], tables.illuminant[hi_row]);
            band_indices.push(i);
            samples.push((cmf, illum));
        }
        if band_indices.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "cube grid does not overlap the {lo}-{hi} nm color table range"
            )));
        }

        let delta = if band_indices.len() >= 2 {
            let d = cube_wavelengths_nm[band_indices[1]] - cube_wavelengths_nm[band_indices[0]];
            for pair in band_indices.windows(2) {
                let step = cube_wavelengths_nm[pair[1]] - cube_wavelengths_nm[pair[0]];
                if (step - d).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(
                        "cube wavelength grid must be uniform over the color table range".into(),
                    ));
                }
            }
            d
        } else if tables.wavelengths_nm.len() >= 2 {
            tables.wavelengths_nm[1] - tables.wavelengths_nm[0]
        } else {
            1.0
        };

        // White-point normalization over the same bands the spectrum sum uses.
        let norm: f64 = samples
            .iter()
            .map(|(cmf, illum)| illum * cmf[1] * delta)
            .sum();
        if norm <= 0.0 {
            return Err(Error::InvalidArgument(
                "illuminant has zero luminance over the overlapping range".into(),
            ));
        }
        let weights = samples
            .iter()
            .map(|(cmf, _)| {
                [
                    cmf[0] * delta / norm,
                    cmf[1] * delta / norm,
                    cmf[2] * delta / norm,
                ]
            })
            .collect();
        Ok(RgbSynthesizer {
            band_indices,
            weights,
            xyz_to_rgb: tables.xyz_to_rgb,
            input_dim: cube_wavelengths_nm.len(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_spectrum(&self, spectrum: &[f32]) -> Result<()> {
        if spectrum.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "spectrum has {} bands, synthesizer expects {}",
                spectrum.len(),
                self.input_dim
            )));
        }
        if spectrum.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrum".into()));
        }
        Ok(())
    }

    /// Normalized tristimulus values of a spectrum.
    pub fn xyz(&self, spectrum: &[f32]) -> Result<[f64; 3]> {
        self.check_spectrum(spectrum)?;
        let mut xyz = [0.0f64; 3];
        for (&band, w) in self.band_indices.iter().zip(self.weights.iter()) {
            let s = spectrum[band] as f64;
            xyz[0] += s * w[0];
            xyz[1] += s * w[1];
            xyz[2] += s * w[2];
        }
        Ok(xyz)
    }

    /// Linear RGB before gamma encoding and clipping; may leave [0, 1].
    pub fn linear_rgb(&self, spectrum: &[f32]) -> Result<[f64; 3]> {
        let xyz = self.xyz(spectrum)?;
        let m = &self.xyz_to_rgb;
        Ok([
            m[0][0] * xyz[0] + m[0][1] * xyz[1] + m[0][2] * xyz[2],
            m[1][0] * xyz[0] + m[1][1] * xyz[1] + m[1][2] * xyz[2],
            m[2][0] * xyz[0] + m[2][1] * xyz[1] + m[2][2] * xyz[2],
        ])
    }

    /// Gamma-encoded RGB clipped to [0, 1].
    pub fn synthesize(&self, spectrum: &[f32]) -> Result<[f32; 3]> {
        let lin = self.linear_rgb(spectrum)?;
        Ok([
            srgb_encode(lin[0]) as f32,
            srgb_encode(lin[1]) as f32,
            srgb_encode(lin[2]) as f32,
        ])
    }

    /// Relative luminance (the Y tristimulus value) of a spectrum.
    pub fn luminance(&self, spectrum: &[f32]) -> Result<f64> {
        Ok(self.xyz(spectrum)?[1])
    }
}

/// sRGB transfer function with clipping to [0, 1].
pub fn srgb_encode(linear: f64) -> f64 {
    let c = linear.clamp(0.0, 1.0);
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// One-shot conversion of a spectrum on `wavelengths_nm` to gamma-encoded RGB.
pub fn synthesize_rgb(
    spectrum: &[f32],
    wavelengths_nm: &[f64],
    tables: &ColorTables,
) -> Result<[f32; 3]> {
    tables.synthesizer(wavelengths_nm)?.synthesize(spectrum)
}

// ---------------------------------------------------------------------------
// Dataset-level transform
// ---------------------------------------------------------------------------

/// Fitted state required to map samples into one of the input modes.
#[derive(Debug, Clone)]
pub enum TransformState {
    Hs,
    Pca(PcaModel),
    Rgb(RgbSynthesizer),
}

impl TransformState {
    /// Assembles the state for a mode, erroring when the fitted piece is missing.
    pub fn from_mode(
        mode: InputMode,
        pca: Option<PcaModel>,
        rgb: Option<RgbSynthesizer>,
    ) -> Result<TransformState> {
        match mode {
            InputMode::Hs => Ok(TransformState::Hs),
            InputMode::Pca => pca.map(TransformState::Pca).ok_or_else(|| {
                Error::InvalidArgument("pca mode requires a fitted PcaModel".into())
            }),
            InputMode::Rgb => rgb.map(TransformState::Rgb).ok_or_else(|| {
                Error::InvalidArgument("rgb mode requires color tables on the cube grid".into())
            }),
        }
    }

    pub fn mode(&self) -> InputMode {
        match self {
            TransformState::Hs => InputMode::Hs,
            TransformState::Pca(_) => InputMode::Pca,
            TransformState::Rgb(_) => InputMode::Rgb,
        }
    }

    /// Output feature dimension for an input of `input_dim` bands.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            TransformState::Hs => input_dim,
            TransformState::Pca(m) => m.k(),
            TransformState::Rgb(_) => 3,
        }
    }

    /// Maps one feature vector.
    pub fn apply(&self, features: &[f32]) -> Result<Vec<f32>> {
        match self {
            TransformState::Hs => Ok(features.to_vec()),
            TransformState::Pca(model) => apply_pca(model, features),
            TransformState::Rgb(synth) => Ok(synth.synthesize(features)?.to_vec()),
        }
    }
}

/// Maps every sample's features into the mode's representation, preserving
/// labels, provenance, and sample order.
pub fn transform_dataset(
    samples: &[SpectralSample],
    state: &TransformState,
) -> Result<Vec<SpectralSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(SpectralSample {
                features: state.apply(&s.features)?,
                label: s.label,
                source: s.source.clone(),
            })
        })
        .collect()
}

/// Stacks sample features into an N x D matrix plus a label vector.
pub fn samples_to_matrix(samples: &[SpectralSample]) -> Result<(Array2<f32>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let dim = samples[0].features.len();
    let mut data = Array2::<f32>::zeros((samples.len(), dim));
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample {i} has {} features, expected {dim}",
                s.features.len()
            )));
        }
        for (j, &v) in s.features.iter().enumerate() {
            data[[i, j]] = v;
        }
        labels.push(s.label);
    }
    Ok((data, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{SampleSource, SpectralSample};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, b), |_| rng.gen_range(-2.0f32..2.0))
    }

    /// Independent covariance-eigendecomposition PCA, the test oracle.
    fn oracle_pca(data: &Array2<f32>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let (n, b) = data.dim();
        let mean: Vec<f64> = (0..b)
            .map(|j| data.column(j).iter().map(|&v| v as f64).sum::<f64>() / n as f64)
            .collect();
        let mut cov = DMatrix::<f64>::zeros(b, b);
        for i in 0..n {
            for p in 0..b {
                let dp = data[[i, p]] as f64 - mean[p];
                for q in 0..b {
                    let dq = data[[i, q]] as f64 - mean[q];
                    cov[(p, q)] += dp * dq;
                }
            }
        }
        cov /= n as f64 - 1.0;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let mut comps = Vec::new();
        let mut vars = Vec::new();
        for &idx in order.iter().take(k) {
            let col: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            comps.push(col);
            vars.push(eig.eigenvalues[idx]);
        }
        (mean, comps, vars)
    }

    fn max_abs_row_deviation(a: &[f64], b: &[f64]) -> f64 {
        // Rows may differ by a global sign.
        let direct = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let flipped = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x + y).abs())
            .fold(0.0, f64::max);
        direct.min(flipped)
    }

    #[test]
    fn pca_on_spectra_gives_requested_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_matrix(&mut rng, 40, 151);
        let model = fit_pca(&data, 5).unwrap();
        assert_eq!(model.k(), 5);
        assert_eq!(model.input_dim(), 151);
        let y = apply_pca(&model, &vec![0.5f32; 151]).unwrap();
        assert_eq!(y.len(), 5);
    }

    #[test]
    fn collinear_data_reconstructs_exactly_with_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Array2::<f32>::zeros((20, 2));
        for i in 0..20 {
            let t = rng.gen_range(-3.0f32..3.0);
            data[[i, 0]] = 1.0 + 2.0 * t;
            data[[i, 1]] = -0.5 + 1.0 * t;
        }
        let model = fit_pca(&data, 1).unwrap();
        for i in 0..20 {
            let x: Vec<f64> = (0..2).map(|j| data[[i, j]] as f64).collect();
            let y = model.project(&x).unwrap();
            let back = model.reconstruct(&y).unwrap();
            for (orig, rec) in x.iter().zip(back.iter()) {
                assert!((orig - rec).abs() < 1e-5, "{orig} vs {rec}");
            }
        }
    }

    #[test]
    fn full_rank_pca_is_centering_identity_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_matrix(&mut rng, 50, 6);
        let model = fit_pca(&data, 6).unwrap();
        for i in 0..50 {
            let x: Vec<f64> = (0..6).map(|j| data[[i, j]] as f64).collect();
            let back = model.reconstruct(&model.project(&x).unwrap()).unwrap();
            for (orig, rec) in x.iter().zip(back.iter()) {
                assert!((orig - rec).abs() < 1e-8);
            }
        }
        let (o_mean, o_comps, o_vars) = oracle_pca(&data, 6);
        for (m, om) in model.mean.iter().zip(o_mean.iter()) {
            assert!((m - om).abs() < 1e-9);
        }
        for (row, orow) in model.components.iter().zip(o_comps.iter()) {
            assert!(max_abs_row_deviation(row, orow) < 1e-6);
        }
        for (v, ov) in model.explained_variance.iter().zip(o_vars.iter()) {
            assert!((v - ov).abs() < 1e-6 * ov.abs().max(1.0));
        }
    }

    #[test]
    fn pca_oracle_equivalence_over_many_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..50 {
            let n = rng.gen_range(10..=200);
            let b = rng.gen_range(2..=20);
            let k = rng.gen_range(1..=b.min(n - 1));
            let data = random_matrix(&mut rng, n, b);
            let model = fit_pca(&data, k).unwrap();
            let (_, o_comps, _) = oracle_pca(&data, k);
            for (row, orow) in model.components.iter().zip(o_comps.iter()) {
                assert!(
                    max_abs_row_deviation(row, orow) < 1e-6,
                    "trial {trial}: component deviates"
                );
            }
        }
    }

    #[test]
    fn reconstruction_error_non_increasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_matrix(&mut rng, 60, 8);
        let mut prev = f64::INFINITY;
        for k in 1..=8 {
            let model = fit_pca(&data, k).unwrap();
            let mut err = 0.0f64;
            for i in 0..60 {
                let x: Vec<f64> = (0..8).map(|j| data[[i, j]] as f64).collect();
                let back = model.reconstruct(&model.project(&x).unwrap()).unwrap();
                err += x
                    .iter()
                    .zip(back.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            assert!(err <= prev + 1e-9, "k={k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn components_orthonormal_and_variance_matches_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data = random_matrix(&mut rng, 80, 10);
        let model = fit_pca(&data, 4).unwrap();
        for (i, a) in model.components.iter().enumerate() {
            for (j, b) in model.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6);
            }
        }
        // Empirical variance of the projected coordinates equals the model's
        // explained variance.
        let projected: Vec<Vec<f64>> = (0..80)
            .map(|i| {
                let x: Vec<f64> = (0..10).map(|j| data[[i, j]] as f64).collect();
                model.project(&x).unwrap()
            })
            .collect();
        for c in 0..4 {
            let mean: f64 = projected.iter().map(|p| p[c]).sum::<f64>() / 80.0;
            let var: f64 =
                projected.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / (80.0 - 1.0);
            assert!((var - model.explained_variance[c]).abs() < 1e-6 * var.max(1.0));
            if c > 0 {
                assert!(model.explained_variance[c] <= model.explained_variance[c - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let data = Array2::from_elem((10, 4), 1.5f32);
        let err = fit_pca(&data, 2).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn bad_k_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data = random_matrix(&mut rng, 10, 4);
        assert!(fit_pca(&data, 5).is_err());
        assert!(fit_pca(&data, 0).is_err());
        let tiny = random_matrix(&mut rng, 3, 4);
        assert!(fit_pca(&tiny, 3).is_err());
    }

    #[test]
    fn apply_pca_at_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = random_matrix(&mut rng, 30, 5);
        let model = fit_pca(&data, 3).unwrap();
        let mean_f32: Vec<f32> = model.mean.iter().map(|&v| v as f32).collect();
        let y = apply_pca(&model, &mean_f32).unwrap();
        for v in y {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn apply_pca_unit_step_along_first_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data = random_matrix(&mut rng, 30, 5);
        let model = fit_pca(&data, 3).unwrap();
        let sample: Vec<f64> = model
            .mean
            .iter()
            .zip(model.components[0].iter())
            .map(|(m, c)| m + c)
            .collect();
        let y = model.project(&sample).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9);
        assert!(y[1].abs() < 1e-9 && y[2].abs() < 1e-9);
    }

    #[test]
    fn apply_pca_matches_dense_multiply_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data = random_matrix(&mut rng, 30, 7);
        let model = fit_pca(&data, 4).unwrap();
        let sample: Vec<f32> = (0..7).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let got = apply_pca(&model, &sample).unwrap();
        for (c, row) in model.components.iter().enumerate() {
            let expect: f64 = row
                .iter()
                .enumerate()
                .map(|(j, w)| w * (sample[j] as f64 - model.mean[j]))
                .sum();
            assert!((got[c] as f64 - expect).abs() < 1e-6);
        }
        assert!(apply_pca(&model, &sample[..5]).is_err());
    }

    #[test]
    fn zero_spectrum_is_black() {
        let tables = ColorTables::standard();
        let rgb = synthesize_rgb(&vec![0.0f32; 81], &tables.wavelengths_nm, &tables).unwrap();
        assert_eq!(rgb, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn illuminant_shaped_spectrum_is_achromatic() {
        let tables = ColorTables::standard();
        let spectrum: Vec<f32> = tables.illuminant.iter().map(|&v| v as f32).collect();
        let rgb = synthesize_rgb(&spectrum, &tables.wavelengths_nm, &tables).unwrap();
        assert!((rgb[0] - rgb[1]).abs() < 0.02, "{rgb:?}");
        assert!((rgb[1] - rgb[2]).abs() < 0.02, "{rgb:?}");
        // White-point normalization drives the encoded value to ~1.
        assert!(rgb[1] > 0.95);
    }

    #[test]
    fn green_pulse_is_green_dominant_and_matches_table_oracle() {
        let tables = ColorTables::standard();
        let synth = tables.synthesizer(&tables.wavelengths_nm).unwrap();
        let mut spectrum = vec![0.0f32; 81];
        for (i, &w) in tables.wavelengths_nm.iter().enumerate() {
            if (545.0..=555.0).contains(&w) {
                spectrum[i] = 50.0;
            }
        }
        let rgb = synth.synthesize(&spectrum).unwrap();
        assert!(rgb[1] > rgb[0], "{rgb:?}");
        assert!(rgb[1] > rgb[2], "{rgb:?}");

        // Direct summation over the table, performed independently.
        let mut xyz = [0.0f64; 3];
        let mut norm = 0.0f64;
        for (i, &w) in tables.wavelengths_nm.iter().enumerate() {
            let s = spectrum[i] as f64;
            xyz[0] += s * tables.cmf[i][0] * 5.0;
            xyz[1] += s * tables.cmf[i][1] * 5.0;
            xyz[2] += s * tables.cmf[i][2] * 5.0;
            let _ = w;
            norm += tables.illuminant[i] * tables.cmf[i][1] * 5.0;
        }
        for c in &mut xyz {
            *c /= norm;
        }
        let got = synth.xyz(&spectrum).unwrap();
        for (g, e) in got.iter().zip(xyz.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_overlapping_grid_is_rejected() {
        let tables = ColorTables::standard();
        let grid = [900.0, 950.0, 1000.0];
        assert!(tables.synthesizer(&grid).is_err());
    }

    #[test]
    fn scaling_down_never_increases_clipped_linear_channels() {
        let tables = ColorTables::standard();
        let synth = tables.synthesizer(&tables.wavelengths_nm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let spectrum: Vec<f32> = (0..81).map(|_| rng.gen_range(0.0f32..120.0)).collect();
            let s = rng.gen_range(0.01f32..1.0);
            let scaled: Vec<f32> = spectrum.iter().map(|&v| v * s).collect();
            let full = synth.linear_rgb(&spectrum).unwrap();
            let down = synth.linear_rgb(&scaled).unwrap();
            for c in 0..3 {
                assert!(down[c].max(0.0) <= full[c].max(0.0) + 1e-12);
            }
        }
    }

    fn toy_samples(dim: usize, n: usize) -> Vec<SpectralSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let src: Arc<str> = Arc::from("cube");
        (0..n)
            .map(|i| SpectralSample {
                features: (0..dim).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
                label: i % 3,
                source: SampleSource {
                    cube_id: Arc::clone(&src),
                    x: i as u32,
                    y: 0,
                },
            })
            .collect()
    }

    #[test]
    fn transform_dataset_identity_pca_rgb() {
        let tables = ColorTables::standard();
        let grid: Vec<f64> = tables.wavelengths_nm.clone();
        let samples = toy_samples(81, 12);

        let hs = transform_dataset(&samples, &TransformState::Hs).unwrap();
        assert_eq!(hs, samples);

        let (matrix, _) = samples_to_matrix(&samples).unwrap();
        let pca = fit_pca(&matrix, 5).unwrap();
        let out = transform_dataset(&samples, &TransformState::Pca(pca)).unwrap();
        assert!(out.iter().all(|s| s.features.len() == 5));
        assert!(out
            .iter()
            .zip(samples.iter())
            .all(|(a, b)| a.label == b.label && a.source == b.source));

        let synth = tables.synthesizer(&grid).unwrap();
        let rgb = transform_dataset(&samples, &TransformState::Rgb(synth)).unwrap();
        assert_eq!(rgb.len(), samples.len());
        for s in &rgb {
            assert_eq!(s.features.len(), 3);
            assert!(s.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn missing_fitted_state_is_rejected() {
        assert!(TransformState::from_mode(InputMode::Pca, None, None).is_err());
        assert!(TransformState::from_mode(InputMode::Rgb, None, None).is_err());
        assert!(TransformState::from_mode(InputMode::Hs, None, None).is_ok());
    }
}
