//! Multi-resolution tiled slide abstraction: manifest loading, bit-exact
//! region reads, thumbnailing with letterbox geometry, foreground-driven
//! sliding-window planning, and heatmap stitching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::pnm;
use crate::raster::{BinaryMask, RgbImage};
use crate::Label;

pub const THUMB_SIZE: usize = 512;
pub const WINDOW_SIZE: usize = 512;
/// The paper's working magnification: 20X at 0.50 um/pixel.
pub const TARGET_MPP: f64 = 0.50;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level: u32,
    pub downsample: u32,
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub slide_id: String,
    /// Microns per pixel at level 0.
    pub microns_per_pixel: f64,
    pub slide_label: Option<Label>,
    pub levels: Vec<LevelInfo>,
    /// Level number (as string key) to relative PBM path.
    #[serde(default)]
    pub lesion_masks: BTreeMap<String, String>,
}

/// A loaded slide: validated manifest plus its directory.
#[derive(Clone, Debug)]
pub struct SlideManifest {
    dir: PathBuf,
    file: ManifestFile,
}

pub fn tile_path(dir: &Path, level: u32, row: usize, col: usize) -> PathBuf {
    dir.join(format!("tiles/L{}/r{}_c{}.ppm", level, row, col))
}

impl SlideManifest {
    pub fn open(dir: &Path) -> Result<SlideManifest> {
        let manifest_path = dir.join("slide.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| ScreenError::io_path("reading manifest", &manifest_path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| ScreenError::Validation(format!("manifest: {}", e)))?;
        let manifest = SlideManifest {
            dir: dir.to_path_buf(),
            file,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.file.levels.is_empty() {
            return Err(ScreenError::Validation("manifest has no levels".into()));
        }
        let mut prev_down = 0u32;
        for (i, lv) in self.file.levels.iter().enumerate() {
            if lv.level != i as u32 {
                return Err(ScreenError::Validation(format!(
                    "levels must be contiguous from 0, found {} at position {}",
                    lv.level, i
                )));
            }
            if i == 0 && lv.downsample != 1 {
                return Err(ScreenError::Validation(
                    "level 0 must have downsample 1".into(),
                ));
            }
            if lv.downsample <= prev_down {
                return Err(ScreenError::Validation(
                    "downsample factors must be strictly increasing".into(),
                ));
            }
            prev_down = lv.downsample;
            if lv.tile_size == 0 || lv.width == 0 || lv.height == 0 {
                return Err(ScreenError::Validation("degenerate level geometry".into()));
            }
            // Every tile present and of declared size.
            let (rows, cols) = self.tile_grid(lv);
            for r in 0..rows {
                for c in 0..cols {
                    let path = tile_path(&self.dir, lv.level, r, c);
                    let (tw, th, raster_len) = pnm::ppm_dims(&path)?;
                    let want_w = (lv.width - c * lv.tile_size).min(lv.tile_size);
                    let want_h = (lv.height - r * lv.tile_size).min(lv.tile_size);
                    if tw != want_w || th != want_h || raster_len != 3 * want_w * want_h {
                        return Err(ScreenError::Io(format!(
                            "tile '{}' is {}x{} ({} bytes), expected {}x{}",
                            path.display(),
                            tw,
                            th,
                            raster_len,
                            want_w,
                            want_h
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn tile_grid(&self, lv: &LevelInfo) -> (usize, usize) {
        (
            lv.height.div_ceil(lv.tile_size),
            lv.width.div_ceil(lv.tile_size),
        )
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn slide_id(&self) -> &str {
        &self.file.slide_id
    }

    pub fn label(&self) -> Option<Label> {
        self.file.slide_label
    }

    pub fn microns_per_pixel(&self) -> f64 {
        self.file.microns_per_pixel
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.file.levels
    }

    pub fn level(&self, level: u32) -> Result<&LevelInfo> {
        self.file
            .levels
            .get(level as usize)
            .ok_or_else(|| ScreenError::Validation(format!("no such level {}", level)))
    }

    pub fn lowest_level(&self) -> &LevelInfo {
        self.file.levels.last().expect("validated non-empty")
    }

    /// The level whose microns-per-pixel is closest to the 20X working scale.
    pub fn working_level(&self) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for lv in &self.file.levels {
            let mpp = self.file.microns_per_pixel * lv.downsample as f64;
            let err = (mpp - TARGET_MPP).abs();
            if err < best.0 {
                best = (err, lv.level);
            }
        }
        best.1
    }

    /// Pixels of an axis-aligned rectangle, identical to cropping the
    /// assembled level image. `origin` is (row, col); `size` is (h, w).
    pub fn read_region(
        &self,
        level: u32,
        origin: (usize, usize),
        size: (usize, usize),
    ) -> Result<RgbImage> {
        let lv = self.level(level)?;
        let (row0, col0) = origin;
        let (h, w) = size;
        if h == 0 || w == 0 {
            return Err(ScreenError::Validation("empty region".into()));
        }
        if row0 + h > lv.height || col0 + w > lv.width {
            return Err(ScreenError::Validation(format!(
                "region {}x{}+{}+{} outside level {} extent {}x{}",
                w, h, col0, row0, level, lv.width, lv.height
            )));
        }
        let ts = lv.tile_size;
        let mut out = vec![0u8; 3 * w * h];
        let tr0 = row0 / ts;
        let tr1 = (row0 + h - 1) / ts;
        let tc0 = col0 / ts;
        let tc1 = (col0 + w - 1) / ts;
        for tr in tr0..=tr1 {
            for tc in tc0..=tc1 {
                let path = tile_path(&self.dir, level, tr, tc);
                let (tw, _th, pixels) = pnm::read_ppm(&path)?;
                let tile_row0 = tr * ts;
                let tile_col0 = tc * ts;
                let y0 = row0.max(tile_row0);
                let y1 = (row0 + h).min(tile_row0 + (lv.height - tile_row0).min(ts));
                let x0 = col0.max(tile_col0);
                let x1 = (col0 + w).min(tile_col0 + tw);
                for y in y0..y1 {
                    let src = 3 * ((y - tile_row0) * tw + (x0 - tile_col0));
                    let dst = 3 * ((y - row0) * w + (x0 - col0));
                    let len = 3 * (x1 - x0);
                    out[dst..dst + len].copy_from_slice(&pixels[src..src + len]);
                }
            }
        }
        RgbImage::from_pixels(w, h, out)
    }

    /// The whole level as one image.
    pub fn assemble_level(&self, level: u32) -> Result<RgbImage> {
        let lv = self.level(level)?;
        self.read_region(level, (0, 0), (lv.height, lv.width))
    }

    pub fn lesion_mask(&self, level: u32) -> Result<Option<BinaryMask>> {
        let Some(rel) = self.file.lesion_masks.get(&level.to_string()) else {
            return Ok(None);
        };
        let lv = self.level(level)?;
        let mask = BinaryMask::load_pbm(&self.dir.join(rel), level)?;
        if mask.width() != lv.width || mask.height() != lv.height {
            return Err(ScreenError::Validation(format!(
                "lesion mask {}x{} does not match level {} extent {}x{}",
                mask.width(),
                mask.height(),
                level,
                lv.width,
                lv.height
            )));
        }
        Ok(Some(mask))
    }
}

/// Where the thumbnail content sits inside the 512x512 letterboxed frame
/// and how source-level pixels map into it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThumbGeometry {
    pub src_level: u32,
    pub content_w: usize,
    pub content_h: usize,
    pub off_x: usize,
    pub off_y: usize,
    /// Source-level pixels to thumbnail pixels.
    pub scale_x: f64,
    pub scale_y: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub enum ThumbSource {
    /// The lowest-magnification level in the pyramid.
    #[default]
    Lowest,
    Level(u32),
}

pub fn thumb_geometry(manifest: &SlideManifest, source: ThumbSource) -> Result<ThumbGeometry> {
    let lv = match source {
        ThumbSource::Lowest => manifest.lowest_level().clone(),
        ThumbSource::Level(l) => manifest.level(l)?.clone(),
    };
    let scale = (THUMB_SIZE as f64 / lv.width as f64).min(THUMB_SIZE as f64 / lv.height as f64);
    let content_w = ((lv.width as f64 * scale).round() as usize).clamp(1, THUMB_SIZE);
    let content_h = ((lv.height as f64 * scale).round() as usize).clamp(1, THUMB_SIZE);
    Ok(ThumbGeometry {
        src_level: lv.level,
        content_w,
        content_h,
        off_x: (THUMB_SIZE - content_w) / 2,
        off_y: (THUMB_SIZE - content_h) / 2,
        scale_x: content_w as f64 / lv.width as f64,
        scale_y: content_h as f64 / lv.height as f64,
    })
}

/// 512x512 thumbnail: the source level bilinearly resized and centered on a
/// white letterbox. The geometry is returned for mask back-projection.
pub fn thumbnail(
    manifest: &SlideManifest,
    source: ThumbSource,
) -> Result<(RgbImage, ThumbGeometry)> {
    let geom = thumb_geometry(manifest, source)?;
    let full = manifest.assemble_level(geom.src_level)?;
    let content = full.resize_bilinear(geom.content_w, geom.content_h);
    let mut out = RgbImage::filled(THUMB_SIZE, THUMB_SIZE, [255, 255, 255]);
    out.paste(&content, geom.off_x, geom.off_y);
    Ok((out, geom))
}

/// One 512x512 sliding-window position at a slide level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub level: u32,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub foreground_coverage: f64,
}

/// Window origins along one axis: a regular grid plus a clamped final
/// origin so edge windows stay fully inside the level.
fn axis_origins(extent: usize, stride: usize) -> Vec<usize> {
    if extent < WINDOW_SIZE {
        return Vec::new();
    }
    let mut origins = Vec::new();
    let mut o = 0;
    while o + WINDOW_SIZE <= extent {
        origins.push(o);
        o += stride;
    }
    let last = extent - WINDOW_SIZE;
    if *origins.last().expect("at least origin 0") != last {
        origins.push(last);
    }
    origins
}

/// Fraction of a window's back-projection into the thumbnail-space
/// foreground mask that is set.
pub fn window_coverage(
    window_row: usize,
    window_col: usize,
    level_downsample: u32,
    geom: &ThumbGeometry,
    src_downsample: u32,
    foreground: &BinaryMask,
) -> f64 {
    let fy = level_downsample as f64 / src_downsample as f64 * geom.scale_y;
    let fx = level_downsample as f64 / src_downsample as f64 * geom.scale_x;
    let y0 = (window_row as f64 * fy + geom.off_y as f64).round() as usize;
    let y1 = ((window_row + WINDOW_SIZE) as f64 * fy + geom.off_y as f64).round() as usize;
    let x0 = (window_col as f64 * fx + geom.off_x as f64).round() as usize;
    let x1 = ((window_col + WINDOW_SIZE) as f64 * fx + geom.off_x as f64).round() as usize;
    let (y1, x1) = (y1.min(foreground.height()), x1.min(foreground.width()));
    if y1 <= y0 || x1 <= x0 {
        return 0.0;
    }
    let area = (y1 - y0) * (x1 - x0);
    foreground.count_in_rect(x0, y0, x1, y1) as f64 / area as f64
}

/// Plan the sliding windows at the working level: regular grid with the
/// given stride, keeping windows whose back-projected foreground coverage
/// meets `min_coverage`. Deterministic row-major order.
pub fn plan_windows(
    manifest: &SlideManifest,
    foreground: &BinaryMask,
    geom: &ThumbGeometry,
    stride: usize,
    min_coverage: f64,
) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(ScreenError::Validation("stride must be >= 1".into()));
    }
    if foreground.width() != THUMB_SIZE || foreground.height() != THUMB_SIZE {
        return Err(ScreenError::Validation(format!(
            "foreground mask must be {0}x{0} thumbnail space",
            THUMB_SIZE
        )));
    }
    let level = manifest.working_level();
    let lv = manifest.level(level)?;
    let src_down = manifest.level(geom.src_level)?.downsample;
    let mut windows = Vec::new();
    for &row in &axis_origins(lv.height, stride) {
        for &col in &axis_origins(lv.width, stride) {
            let coverage =
                window_coverage(row, col, lv.downsample, geom, src_down, foreground);
            if coverage >= min_coverage {
                windows.push(Window {
                    level,
                    row,
                    col,
                    size: WINDOW_SIZE,
                    foreground_coverage: coverage,
                });
            }
        }
    }
    Ok(windows)
}

/// Float heatmap over a slide level with per-pixel window coverage counts.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub counts: Vec<u32>,
}

impl Heatmap {
    /// 16-bit PGM with the linear scale 0..65535 <-> 0.0..1.0.
    pub fn save_pgm16(&self, path: &Path) -> Result<()> {
        let gray: Vec<u16> = self
            .values
            .iter()
            .map(|&v| (v * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16)
            .collect();
        pnm::write_pgm16(path, self.width, self.height, &gray)
    }

    /// Binarize at a probability threshold into a mask at `level`.
    pub fn to_mask(&self, threshold: f64, level: u32) -> BinaryMask {
        let bits = self.values.iter().map(|&v| v > threshold).collect();
        BinaryMask::from_bits(self.width, self.height, level, bits).expect("consistent")
    }
}

/// Per-pixel mean of all covering windows' segmentation maps; pixels no
/// window covers stay 0.
pub fn stitch_heatmap(
    entries: &[(Window, Vec<f64>)],
    level_width: usize,
    level_height: usize,
) -> Result<Heatmap> {
    let mut sum = vec![0.0f64; level_width * level_height];
    let mut counts = vec![0u32; level_width * level_height];
    for (window, seg) in entries {
        if seg.len() != window.size * window.size {
            return Err(ScreenError::Validation(format!(
                "segmentation map has {} values for a {}x{} window",
                seg.len(),
                window.size,
                window.size
            )));
        }
        if window.row + window.size > level_height || window.col + window.size > level_width {
            return Err(ScreenError::Validation("window outside level".into()));
        }
        for (i, &v) in seg.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(ScreenError::Validation(format!(
                    "segmentation value {} outside [0, 1]",
                    v
                )));
            }
            let y = window.row + i / window.size;
            let x = window.col + i % window.size;
            sum[y * level_width + x] += v;
            counts[y * level_width + x] += 1;
        }
    }
    let values = sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(Heatmap {
        width: level_width,
        height: level_height,
        values,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_origins_grid_and_clamp() {
        assert_eq!(axis_origins(1024, 256), vec![0, 256, 512]);
        assert_eq!(axis_origins(512, 256), vec![0]);
        assert_eq!(axis_origins(300, 256), Vec::<usize>::new());
        // 700 - 512 = 188 is off-grid, so the final origin clamps inward.
        assert_eq!(axis_origins(700, 256), vec![0, 188]);
    }

    #[test]
    fn stitch_single_window() {
        let w = Window {
            level: 0,
            row: 0,
            col: 0,
            size: 2,
            foreground_coverage: 1.0,
        };
        let hm = stitch_heatmap(&[(w, vec![0.1, 0.2, 0.3, 0.4])], 4, 3).unwrap();
        assert_eq!(hm.values[0], 0.1);
        assert_eq!(hm.values[1], 0.2);
        assert_eq!(hm.values[4], 0.3);
        assert_eq!(hm.values[2], 0.0);
        assert_eq!(hm.counts[0], 1);
        assert_eq!(hm.counts[2], 0);
    }

    #[test]
    fn stitch_overlap_means() {
        let mk = |col| Window {
            level: 0,
            row: 0,
            col,
            size: 2,
            foreground_coverage: 1.0,
        };
        let hm = stitch_heatmap(
            &[(mk(0), vec![0.2; 4]), (mk(1), vec![0.8; 4])],
            3,
            2,
        )
        .unwrap();
        // Columns: 0 only first, 1 overlap, 2 only second.
        assert_eq!(hm.values[0], 0.2);
        assert!((hm.values[1] - 0.5).abs() < 1e-12);
        assert_eq!(hm.values[2], 0.8);
    }

    #[test]
    fn stitch_empty_is_all_zero() {
        let hm = stitch_heatmap(&[], 4, 4).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stitch_rejects_bad_values() {
        let w = Window {
            level: 0,
            row: 0,
            col: 0,
            size: 1,
            foreground_coverage: 1.0,
        };
        assert!(stitch_heatmap(&[(w, vec![1.5])], 2, 2).is_err());
        assert!(stitch_heatmap(&[(w, vec![0.5, 0.5])], 2, 2).is_err());
    }
}
