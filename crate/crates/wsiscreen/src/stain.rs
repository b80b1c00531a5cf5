//! Stain-space image math: optical density conversion, H&E color
//! deconvolution, Otsu thresholding, foreground extraction, and annotation
//! refinement by intersection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::pnm;
use crate::raster::{BinaryMask, RgbImage};

/// Summed H+E concentration below which an image counts as blank slide glass.
pub const MIN_STAIN_DENSITY: f64 = 0.05;

/// 3x3 matrix of unit-length stain OD vectors (rows: hematoxylin, eosin,
/// residual). Concentrations are recovered by solving `M^T c = od` per pixel.
#[derive(Clone, Debug)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    /// Precomputed inverse of `M^T`.
    inv_t: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct StainMatrixFile {
    hematoxylin: [f64; 3],
    eosin: [f64; 3],
    residual: Option<[f64; 3]>,
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit3(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = norm3(v);
    if n < 1e-9 {
        return Err(ScreenError::Config("zero-length stain vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            // Adjugate is the transposed cofactor matrix.
            inv[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    Some(inv)
}

impl StainMatrix {
    /// Standard published H&E OD vectors, residual completed by cross
    /// product. Scanners vary, so a custom matrix can be loaded from JSON.
    pub fn default_he() -> StainMatrix {
        StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11], None)
            .expect("builtin stain vectors are valid")
    }

    pub fn new(
        hematoxylin: [f64; 3],
        eosin: [f64; 3],
        residual: Option<[f64; 3]>,
    ) -> Result<StainMatrix> {
        let h = unit3(hematoxylin)?;
        let e = unit3(eosin)?;
        let r = match residual {
            Some(r) => unit3(r)?,
            None => {
                let mut r = unit3(cross3(h, e))?;
                if r[0] + r[1] + r[2] < 0.0 {
                    r = [-r[0], -r[1], -r[2]];
                }
                r
            }
        };
        let rows = [h, e, r];
        let mut m_t = [[0.0; 3]; 3];
        for (i, row) in rows.iter().enumerate() {
            for j in 0..3 {
                m_t[j][i] = row[j];
            }
        }
        let inv_t = invert3(&m_t)
            .ok_or_else(|| ScreenError::Config("singular stain matrix".into()))?;
        let matrix = StainMatrix { rows, inv_t };
        let cond = matrix.condition_estimate();
        if cond >= 1e6 {
            return Err(ScreenError::Config(format!(
                "ill-conditioned stain matrix (condition estimate {:.3e})",
                cond
            )));
        }
        Ok(matrix)
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    /// Frobenius-norm condition estimate (upper bounds the 2-norm condition).
    pub fn condition_estimate(&self) -> f64 {
        let frob = |m: &[[f64; 3]; 3]| {
            m.iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let mut m_t = [[0.0; 3]; 3];
        for (i, row) in self.rows.iter().enumerate() {
            for j in 0..3 {
                m_t[j][i] = row[j];
            }
        }
        frob(&m_t) * frob(&self.inv_t)
    }

    pub fn load_json(path: &Path) -> Result<StainMatrix> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScreenError::io_path("reading stain matrix", path, e))?;
        let file: StainMatrixFile = serde_json::from_str(&text)
            .map_err(|e| ScreenError::Config(format!("stain matrix json: {}", e)))?;
        StainMatrix::new(file.hematoxylin, file.eosin, file.residual)
    }
}

/// Per-pixel optical density triples, row-major.
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub od: Vec<f64>,
}

/// Per-pixel stain concentrations, channel order H, E, residual.
pub struct ConcentrationImage {
    pub width: usize,
    pub height: usize,
    pub conc: Vec<f64>,
}

/// `OD_c = -log10((I_c + 1) / 256)`; the +1 keeps black pixels finite.
pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    let od = img
        .pixels()
        .iter()
        .map(|&v| -((v as f64 + 1.0) / 256.0).log10())
        .collect();
    OdImage {
        width: img.width(),
        height: img.height(),
        od,
    }
}

/// Solve `M^T c = od` per pixel to recover stain concentrations.
pub fn stain_separate(od: &OdImage, matrix: &StainMatrix) -> ConcentrationImage {
    let inv = &matrix.inv_t;
    let mut conc = vec![0.0; od.od.len()];
    for (dst, src) in conc.chunks_exact_mut(3).zip(od.od.chunks_exact(3)) {
        for i in 0..3 {
            dst[i] = inv[i][0] * src[0] + inv[i][1] * src[1] + inv[i][2] * src[2];
        }
    }
    ConcentrationImage {
        width: od.width,
        height: od.height,
        conc,
    }
}

/// Synthesize an OD image from known concentrations: `od = M^T c`.
/// Inverse of [`stain_separate`]; used to round-trip the deconvolution.
pub fn stain_synthesize(conc: &ConcentrationImage, matrix: &StainMatrix) -> OdImage {
    let rows = &matrix.rows;
    let mut od = vec![0.0; conc.conc.len()];
    for (dst, src) in od.chunks_exact_mut(3).zip(conc.conc.chunks_exact(3)) {
        for ch in 0..3 {
            dst[ch] = rows[0][ch] * src[0] + rows[1][ch] * src[1] + rows[2][ch] * src[2];
        }
    }
    OdImage {
        width: conc.width,
        height: conc.height,
        od,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtsuOutcome {
    /// Threshold maximizing between-class variance; classes are `<= t` and `> t`.
    Threshold(u8),
    /// All mass in a single bin: no valid split exists.
    Degenerate,
}

/// Exhaustive-equivalent Otsu via cumulative moments. All accumulators stay
/// in exact integer arithmetic so the result matches a brute-force oracle
/// bit for bit; ties resolve to the smallest threshold.
pub fn otsu_threshold_hist(hist: &[u64; 256]) -> Result<OtsuOutcome> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(ScreenError::Validation("otsu of empty histogram".into()));
    }
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    let mut best: Option<(f64, u8)> = None;
    let mut w0: u64 = 0;
    let mut sum0: u64 = 0;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as u64 * hist[t];
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        let mu0 = sum0 as f64 / w0 as f64;
        let mu1 = (sum_all - sum0) as f64 / w1 as f64;
        let d = mu0 - mu1;
        let var = w0 as f64 * w1 as f64 * d * d;
        if best.map_or(true, |(b, _)| var > b) {
            best = Some((var, t as u8));
        }
    }
    Ok(match best {
        Some((_, t)) => OtsuOutcome::Threshold(t),
        None => OtsuOutcome::Degenerate,
    })
}

pub fn otsu_threshold_gray(values: &[u8]) -> Result<OtsuOutcome> {
    if values.is_empty() {
        return Err(ScreenError::Validation("otsu of empty image".into()));
    }
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    otsu_threshold_hist(&hist)
}

/// H+E stain density per pixel, clamped at zero.
pub fn stain_density(img: &RgbImage, matrix: &StainMatrix) -> Vec<f64> {
    let conc = stain_separate(&rgb_to_od(img), matrix);
    conc.conc
        .chunks_exact(3)
        .map(|c| (c[0] + c[1]).max(0.0))
        .collect()
}

/// Tissue foreground by color deconvolution and Otsu thresholding on the
/// summed H+E density. Near-white images yield an empty mask; uniformly
/// stained images (degenerate histogram) yield an all-foreground mask.
pub fn foreground_mask_with(img: &RgbImage, matrix: &StainMatrix, level: u32) -> BinaryMask {
    let density = stain_density(img, matrix);
    let mut mask = BinaryMask::new(img.width(), img.height(), level);
    let smax = density.iter().cloned().fold(0.0, f64::max);
    if smax < MIN_STAIN_DENSITY {
        return mask;
    }
    let bins: Vec<u8> = density
        .iter()
        .map(|&s| (s / smax * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    match otsu_threshold_gray(&bins).expect("non-empty") {
        OtsuOutcome::Degenerate => {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    mask.set(x, y, true);
                }
            }
        }
        OtsuOutcome::Threshold(t) => {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    mask.set(x, y, bins[y * img.width() + x] > t);
                }
            }
        }
    }
    mask
}

pub fn foreground_mask(img: &RgbImage, level: u32) -> BinaryMask {
    foreground_mask_with(img, &StainMatrix::default_he(), level)
}

/// Annotation refinement: pixelwise AND of the manual annotation with the
/// extracted foreground. Never adds pixels to the manual annotation.
pub fn refine_annotation(manual: &BinaryMask, foreground: &BinaryMask) -> Result<BinaryMask> {
    if manual.width() != foreground.width()
        || manual.height() != foreground.height()
        || manual.level() != foreground.level()
    {
        return Err(ScreenError::Validation(format!(
            "mask geometry mismatch: manual {}x{} level {} vs foreground {}x{} level {}",
            manual.width(),
            manual.height(),
            manual.level(),
            foreground.width(),
            foreground.height(),
            foreground.level()
        )));
    }
    let bits = manual
        .bits()
        .iter()
        .zip(foreground.bits())
        .map(|(&a, &b)| a && b)
        .collect();
    BinaryMask::from_bits(manual.width(), manual.height(), manual.level(), bits)
}

#[derive(Serialize, Deserialize)]
struct ConcentrationSidecar {
    scale_max: f64,
    channels: [String; 3],
}

/// Write the three concentration channels as 8-bit PGMs after linear
/// scaling; the scale lands in a JSON sidecar.
pub fn save_concentrations(conc: &ConcentrationImage, base: &Path) -> Result<()> {
    let scale_max = conc.conc.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    let names = ["h", "e", "res"];
    for (ch, name) in names.iter().enumerate() {
        let gray: Vec<u8> = conc
            .conc
            .chunks_exact(3)
            .map(|c| (c[ch].max(0.0) / scale_max * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
        let path = base.with_extension(format!("{}.pgm", name));
        pnm::write_pgm8(&path, conc.width, conc.height, &gray)?;
    }
    let sidecar = ConcentrationSidecar {
        scale_max,
        channels: [
            "hematoxylin".to_string(),
            "eosin".to_string(),
            "residual".to_string(),
        ],
    };
    let path = base.with_extension("json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("json"))
        .map_err(|e| ScreenError::io_path("writing sidecar", &path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_of_white_is_zero() {
        let img = RgbImage::filled(2, 2, [255, 255, 255]);
        let od = rgb_to_od(&img);
        assert!(od.od.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn od_closed_forms() {
        let img = RgbImage::filled(1, 1, [24, 24, 24]);
        let od = rgb_to_od(&img);
        let want = -(25.0f64 / 256.0).log10();
        assert!((od.od[0] - want).abs() < 1e-12);
        assert!((want - 1.0103).abs() < 1e-4);

        let img = RgbImage::filled(1, 1, [0, 0, 0]);
        let od = rgb_to_od(&img);
        let want = -(1.0f64 / 256.0).log10();
        assert!((od.od[0] - want).abs() < 1e-12);
        assert!((want - 2.408).abs() < 1e-3);
    }

    #[test]
    fn od_monotone_decreasing_in_intensity() {
        let mut last = f64::INFINITY;
        for v in 0..=255u8 {
            let od = rgb_to_od(&RgbImage::filled(1, 1, [v, v, v]));
            assert!(od.od[0] < last);
            last = od.od[0];
        }
    }

    #[test]
    fn default_matrix_rows_are_unit_and_well_conditioned() {
        let m = StainMatrix::default_he();
        for row in m.rows() {
            assert!((norm3(*row) - 1.0).abs() < 1e-6);
        }
        assert!(m.condition_estimate() < 1e6);
    }

    #[test]
    fn separate_recovers_synthesized_concentrations() {
        let m = StainMatrix::default_he();
        let cases = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.25, 0.0], [2.5, 3.0, 0.75]];
        for case in cases {
            let conc = ConcentrationImage {
                width: 1,
                height: 1,
                conc: case.to_vec(),
            };
            let od = stain_synthesize(&conc, &m);
            let back = stain_separate(&od, &m);
            for i in 0..3 {
                assert!(
                    (back.conc[i] - case[i]).abs() < 1e-6,
                    "case {:?} channel {} got {}",
                    case,
                    i,
                    back.conc[i]
                );
            }
        }
    }

    #[test]
    fn otsu_separates_two_masses() {
        let mut hist = [0u64; 256];
        hist[10] = 500;
        hist[200] = 500;
        match otsu_threshold_hist(&hist).unwrap() {
            OtsuOutcome::Threshold(t) => assert!((10..200).contains(&t)),
            OtsuOutcome::Degenerate => panic!("expected threshold"),
        }
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        let mut hist = [0u64; 256];
        hist[128] = 1000;
        assert_eq!(otsu_threshold_hist(&hist).unwrap(), OtsuOutcome::Degenerate);
    }

    #[test]
    fn otsu_two_gaussian_modes() {
        // Discretized equal-mass modes at 60 and 180 with sigma 10.
        let mut hist = [0u64; 256];
        for (i, h) in hist.iter_mut().enumerate() {
            let g = |mu: f64| (-((i as f64 - mu) / 10.0).powi(2) / 2.0).exp();
            *h = (1000.0 * (g(60.0) + g(180.0))) as u64;
        }
        match otsu_threshold_hist(&hist).unwrap() {
            OtsuOutcome::Threshold(t) => assert!(t > 60 && t < 180, "t = {}", t),
            OtsuOutcome::Degenerate => panic!("expected threshold"),
        }
    }

    #[test]
    fn foreground_of_white_is_empty() {
        let img = RgbImage::filled(32, 32, [255, 255, 255]);
        assert_eq!(foreground_mask(&img, 0).count_ones(), 0);
    }

    #[test]
    fn foreground_of_uniform_stain_is_full() {
        let img = RgbImage::filled(16, 16, [150, 80, 120]);
        assert_eq!(foreground_mask(&img, 0).count_ones(), 16 * 16);
    }

    #[test]
    fn foreground_finds_stained_disc() {
        let mut img = RgbImage::filled(64, 64, [252, 252, 252]);
        let mut truth = BinaryMask::new(64, 64, 0);
        for y in 0..64i32 {
            for x in 0..64i32 {
                if (x - 32).pow(2) + (y - 32).pow(2) <= 20 * 20 {
                    img.set(x as usize, y as usize, [180, 105, 160]);
                    truth.set(x as usize, y as usize, true);
                }
            }
        }
        let mask = foreground_mask(&img, 0);
        assert!(mask.iou(&truth) >= 0.95);
    }

    #[test]
    fn refine_is_intersection() {
        let mut manual = BinaryMask::new(10, 10, 0);
        let mut fg = BinaryMask::new(10, 10, 0);
        for i in 0..10 {
            manual.set(i, 0, true);
            if i % 2 == 0 {
                fg.set(i, 0, true);
            }
        }
        let refined = refine_annotation(&manual, &fg).unwrap();
        assert_eq!(refined.count_ones(), 5);
        assert!(refined.is_subset_of(&manual));
        assert!(refined.is_subset_of(&fg));

        // manual fully inside foreground comes back unchanged
        let all_fg = {
            let mut m = BinaryMask::new(10, 10, 0);
            for y in 0..10 {
                for x in 0..10 {
                    m.set(x, y, true);
                }
            }
            m
        };
        assert_eq!(refine_annotation(&manual, &all_fg).unwrap(), manual);
    }

    #[test]
    fn refine_rejects_mismatched_masks() {
        let a = BinaryMask::new(4, 4, 0);
        let b = BinaryMask::new(4, 5, 0);
        assert!(refine_annotation(&a, &b).is_err());
        let c = BinaryMask::new(4, 4, 1);
        assert!(refine_annotation(&a, &c).is_err());
    }
}
