//! Training-patch sampling with paired image/mask augmentation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScreenError};
use crate::raster::{BinaryMask, RgbImage};
use crate::slide::{SlideManifest, Window, WINDOW_SIZE};
use crate::stain;
use crate::Label;

/// A patch is positive iff at least this fraction of its pixels is lesion.
pub const POSITIVE_LESION_FRAC: f64 = 0.01;
/// Sampling margin above the label threshold so geometric augmentation
/// cannot push a positive patch below it.
const SAMPLE_LESION_FRAC: f64 = 0.02;
const MIN_TISSUE_FRAC: f64 = 0.10;

#[derive(Clone, Copy, Debug)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub flips: bool,
    pub rot90: bool,
    /// Random crop-and-resize, scale 0.8..1.2 with aspect jitter 0.9..1.1.
    pub crop_resize: bool,
    /// Contrast jitter of +-20%.
    pub contrast: bool,
    /// Additive Gaussian noise, sigma up to 8/255.
    pub noise: bool,
}

impl AugmentSpec {
    pub fn all() -> AugmentSpec {
        AugmentSpec {
            enabled: true,
            flips: true,
            rot90: true,
            crop_resize: true,
            contrast: true,
            noise: true,
        }
    }

    pub fn none() -> AugmentSpec {
        AugmentSpec {
            enabled: false,
            flips: false,
            rot90: false,
            crop_resize: false,
            contrast: false,
            noise: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchSample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub label: Label,
    pub slide_id: String,
    pub window: Window,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PatchPlan {
    pub positives: usize,
    pub negatives: usize,
}

fn rot90_image(img: &RgbImage, quarter_turns: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => {
            // (x, y) -> (h - 1 - y, x)
            let mut out = RgbImage::filled(h, w, [0, 0, 0]);
            for y in 0..h {
                for x in 0..w {
                    out.set(h - 1 - y, x, img.get(x, y));
                }
            }
            out
        }
        2 => {
            let mut out = RgbImage::filled(w, h, [0, 0, 0]);
            for y in 0..h {
                for x in 0..w {
                    out.set(w - 1 - x, h - 1 - y, img.get(x, y));
                }
            }
            out
        }
        _ => {
            let mut out = RgbImage::filled(h, w, [0, 0, 0]);
            for y in 0..h {
                for x in 0..w {
                    out.set(y, w - 1 - x, img.get(x, y));
                }
            }
            out
        }
    }
}

fn flip_image(img: &RgbImage, horizontal: bool, vertical: bool) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            let sy = if vertical { h - 1 - y } else { y };
            out.set(x, y, img.get(sx, sy));
        }
    }
    out
}

fn rot90_mask(mask: &BinaryMask, quarter_turns: usize) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    match quarter_turns % 4 {
        0 => mask.clone(),
        1 => {
            let mut out = BinaryMask::new(h, w, mask.level());
            for y in 0..h {
                for x in 0..w {
                    out.set(h - 1 - y, x, mask.get(x, y));
                }
            }
            out
        }
        2 => {
            let mut out = BinaryMask::new(w, h, mask.level());
            for y in 0..h {
                for x in 0..w {
                    out.set(w - 1 - x, h - 1 - y, mask.get(x, y));
                }
            }
            out
        }
        _ => {
            let mut out = BinaryMask::new(h, w, mask.level());
            for y in 0..h {
                for x in 0..w {
                    out.set(y, w - 1 - x, mask.get(x, y));
                }
            }
            out
        }
    }
}

pub fn flip_mask(mask: &BinaryMask, horizontal: bool, vertical: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::new(w, h, mask.level());
    for y in 0..h {
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            let sy = if vertical { h - 1 - y } else { y };
            out.set(x, y, mask.get(sx, sy));
        }
    }
    out
}

/// Nearest-neighbor mask resize with pixel-center mapping (keeps the mask
/// strictly binary).
fn resize_mask_nearest(mask: &BinaryMask, rect: (usize, usize, usize, usize), out: usize) -> BinaryMask {
    let (x0, y0, w, h) = rect;
    let mut dst = BinaryMask::new(out, out, mask.level());
    for oy in 0..out {
        let sy = y0 + ((oy as f64 + 0.5) * h as f64 / out as f64).floor() as usize;
        let sy = sy.min(y0 + h - 1);
        for ox in 0..out {
            let sx = x0 + ((ox as f64 + 0.5) * w as f64 / out as f64).floor() as usize;
            let sx = sx.min(x0 + w - 1);
            dst.set(ox, oy, mask.get(sx, sy));
        }
    }
    dst
}

fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
    let mut out = BinaryMask::new(w, h, mask.level());
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, mask.get(x0 + x, y0 + y));
        }
    }
    out
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

fn add_noise(img: &mut RgbImage, sigma_u8: f64, rng: &mut ChaCha8Rng) {
    if sigma_u8 <= 0.0 {
        return;
    }
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut px = img.get(x, y);
            let (g0, g1) = gaussian_pair(rng);
            let (g2, _) = gaussian_pair(rng);
            for (c, g) in [g0, g1, g2].iter().enumerate() {
                let v = px[c] as f64 + g * sigma_u8;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
}

fn apply_contrast(img: &mut RgbImage, factor: f64) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut px = img.get(x, y);
            for v in px.iter_mut() {
                *v = ((*v as f64 - 128.0) * factor + 128.0).round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
}

struct LevelContext<'a> {
    manifest: &'a SlideManifest,
    level: u32,
    width: usize,
    height: usize,
    lesion: Option<&'a BinaryMask>,
    tissue: Option<BinaryMask>,
}

impl LevelContext<'_> {
    fn lesion_frac_in(&self, row: usize, col: usize) -> f64 {
        match self.lesion {
            None => 0.0,
            Some(mask) => {
                mask.count_in_rect(col, row, col + WINDOW_SIZE, row + WINDOW_SIZE) as f64
                    / (WINDOW_SIZE * WINDOW_SIZE) as f64
            }
        }
    }

    fn tissue_frac_in(&self, row: usize, col: usize) -> f64 {
        match &self.tissue {
            None => 1.0,
            Some(mask) => {
                mask.count_in_rect(col, row, col + WINDOW_SIZE, row + WINDOW_SIZE) as f64
                    / (WINDOW_SIZE * WINDOW_SIZE) as f64
            }
        }
    }
}

/// One patch: read the source rect (possibly scale/aspect-jittered around
/// the window), resize to 512, then apply the paired geometric transforms
/// and the photometric ones. Returns the final image, mask, and lesion
/// fraction after all geometry.
fn build_patch(
    ctx: &LevelContext,
    row: usize,
    col: usize,
    augment: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, BinaryMask, f64)> {
    let (src_row, src_col, src_h, src_w) = if augment.enabled && augment.crop_resize {
        let scale: f64 = rng.gen_range(0.8..1.2);
        let aspect: f64 = rng.gen_range(0.9..1.1);
        let src_h = ((WINDOW_SIZE as f64 * scale * aspect).round() as usize)
            .clamp(WINDOW_SIZE / 2, ctx.height);
        let src_w = ((WINDOW_SIZE as f64 * scale / aspect).round() as usize)
            .clamp(WINDOW_SIZE / 2, ctx.width);
        let center_r = row + WINDOW_SIZE / 2;
        let center_c = col + WINDOW_SIZE / 2;
        let src_row = center_r
            .saturating_sub(src_h / 2)
            .min(ctx.height - src_h);
        let src_col = center_c
            .saturating_sub(src_w / 2)
            .min(ctx.width - src_w);
        (src_row, src_col, src_h, src_w)
    } else {
        (row, col, WINDOW_SIZE, WINDOW_SIZE)
    };

    let raw = ctx
        .manifest
        .read_region(ctx.level, (src_row, src_col), (src_h, src_w))?;
    let mut image = if (src_h, src_w) == (WINDOW_SIZE, WINDOW_SIZE) {
        raw
    } else {
        raw.resize_bilinear(WINDOW_SIZE, WINDOW_SIZE)
    };
    let mut mask = match ctx.lesion {
        Some(lesion) => {
            if (src_h, src_w) == (WINDOW_SIZE, WINDOW_SIZE) {
                crop_mask(lesion, src_col, src_row, WINDOW_SIZE, WINDOW_SIZE)
            } else {
                resize_mask_nearest(lesion, (src_col, src_row, src_w, src_h), WINDOW_SIZE)
            }
        }
        None => BinaryMask::new(WINDOW_SIZE, WINDOW_SIZE, ctx.level),
    };

    if augment.enabled {
        if augment.rot90 {
            let turns = rng.gen_range(0..4usize);
            image = rot90_image(&image, turns);
            mask = rot90_mask(&mask, turns);
        }
        if augment.flips {
            let hf = rng.gen::<bool>();
            let vf = rng.gen::<bool>();
            if hf || vf {
                image = flip_image(&image, hf, vf);
                mask = flip_mask(&mask, hf, vf);
            }
        }
        if augment.contrast {
            apply_contrast(&mut image, rng.gen_range(0.8..1.2));
        }
        if augment.noise {
            add_noise(&mut image, rng.gen_range(0.0..8.0), rng);
        }
    }
    let frac = mask.count_ones() as f64 / (WINDOW_SIZE * WINDOW_SIZE) as f64;
    Ok((image, mask, frac))
}

/// Sample training patches from one slide at the working level.
///
/// Positive patches are rejection-sampled to carry at least the label
/// threshold of lesion pixels; negative patches carry exactly none and are
/// placed on tissue (stain-oracle foreground). Fully seeded.
pub fn extract_patches(
    manifest: &SlideManifest,
    lesion_mask: Option<&BinaryMask>,
    plan: &PatchPlan,
    augment: &AugmentSpec,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let level = manifest.working_level();
    let lv = manifest.level(level)?.clone();
    if lv.width < WINDOW_SIZE || lv.height < WINDOW_SIZE {
        return Err(ScreenError::Validation(format!(
            "level {} extent {}x{} smaller than the {} patch size",
            level, lv.width, lv.height, WINDOW_SIZE
        )));
    }
    if let Some(mask) = lesion_mask {
        if mask.width() != lv.width || mask.height() != lv.height {
            return Err(ScreenError::Validation(
                "lesion mask does not match working level".into(),
            ));
        }
    }
    let lesion_nonempty = lesion_mask.is_some_and(|m| m.count_ones() > 0);
    if plan.positives > 0 && !lesion_nonempty {
        return Err(ScreenError::Validation(format!(
            "slide '{}': positive patches requested but lesion mask is empty",
            manifest.slide_id()
        )));
    }

    let tissue = if plan.negatives > 0 {
        Some(stain::foreground_mask(
            &manifest.assemble_level(level)?,
            level,
        ))
    } else {
        None
    };
    let ctx = LevelContext {
        manifest,
        level,
        width: lv.width,
        height: lv.height,
        lesion: lesion_mask,
        tissue,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_row = lv.height - WINDOW_SIZE;
    let max_col = lv.width - WINDOW_SIZE;
    let mut out = Vec::with_capacity(plan.positives + plan.negatives);

    // Lesion bounding box speeds up the fallback placement.
    let lesion_bbox = lesion_mask.filter(|m| m.count_ones() > 0).map(|m| {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    });

    for _ in 0..plan.positives {
        let mut origin = None;
        for _ in 0..100 {
            let row = rng.gen_range(0..=max_row);
            let col = rng.gen_range(0..=max_col);
            if ctx.lesion_frac_in(row, col) >= SAMPLE_LESION_FRAC {
                origin = Some((row, col));
                break;
            }
        }
        let (row, col) = match origin {
            Some(o) => o,
            None => {
                // Center a window on a random lesion pixel.
                let (bx0, by0, bx1, by1) = lesion_bbox.expect("non-empty lesion");
                let lesion = lesion_mask.expect("checked");
                let mut pick = (bx0, by0);
                for _ in 0..1000 {
                    let x = rng.gen_range(bx0..=bx1);
                    let y = rng.gen_range(by0..=by1);
                    if lesion.get(x, y) {
                        pick = (x, y);
                        break;
                    }
                }
                (
                    pick.1.saturating_sub(WINDOW_SIZE / 2).min(max_row),
                    pick.0.saturating_sub(WINDOW_SIZE / 2).min(max_col),
                )
            }
        };
        // Retry the augmentation draw until the label survives the geometry.
        let mut chosen = None;
        for attempt in 0..20 {
            let spec = if attempt < 19 {
                *augment
            } else {
                AugmentSpec {
                    crop_resize: false,
                    ..*augment
                }
            };
            let (image, mask, frac) = build_patch(&ctx, row, col, &spec, &mut rng)?;
            if frac >= POSITIVE_LESION_FRAC {
                chosen = Some((image, mask));
                break;
            }
        }
        let (image, mask) = chosen.ok_or_else(|| {
            ScreenError::Validation(format!(
                "slide '{}': could not keep a positive patch above the label threshold",
                manifest.slide_id()
            ))
        })?;
        out.push(PatchSample {
            image,
            mask,
            label: Label::Positive,
            slide_id: manifest.slide_id().to_string(),
            window: Window {
                level,
                row,
                col,
                size: WINDOW_SIZE,
                foreground_coverage: ctx.lesion_frac_in(row, col),
            },
        });
    }

    for _ in 0..plan.negatives {
        let mut origin = None;
        let mut relaxed = None;
        for _ in 0..200 {
            let row = rng.gen_range(0..=max_row);
            let col = rng.gen_range(0..=max_col);
            if ctx.lesion_frac_in(row, col) > 0.0 {
                continue;
            }
            let tissue_frac = ctx.tissue_frac_in(row, col);
            if tissue_frac >= MIN_TISSUE_FRAC {
                origin = Some((row, col));
                break;
            }
            if relaxed.is_none() {
                relaxed = Some((row, col));
            }
        }
        let (row, col) = origin.or(relaxed).ok_or_else(|| {
            ScreenError::Validation(format!(
                "slide '{}': could not place a lesion-free negative patch",
                manifest.slide_id()
            ))
        })?;
        let mut chosen = None;
        for attempt in 0..20 {
            let spec = if attempt < 19 {
                *augment
            } else {
                AugmentSpec {
                    crop_resize: false,
                    ..*augment
                }
            };
            let (image, mask, frac) = build_patch(&ctx, row, col, &spec, &mut rng)?;
            if frac == 0.0 {
                chosen = Some((image, mask));
                break;
            }
        }
        let (image, mask) = chosen.ok_or_else(|| {
            ScreenError::Validation(format!(
                "slide '{}': could not keep a negative patch lesion-free",
                manifest.slide_id()
            ))
        })?;
        out.push(PatchSample {
            image,
            mask,
            label: Label::Negative,
            slide_id: manifest.slide_id().to_string(),
            window: Window {
                level,
                row,
                col,
                size: WINDOW_SIZE,
                foreground_coverage: ctx.tissue_frac_in(row, col),
            },
        });
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot_and_flip_are_exact_permutations() {
        let mut img = RgbImage::filled(3, 2, [0, 0, 0]);
        img.set(0, 0, [1, 0, 0]);
        img.set(2, 1, [2, 0, 0]);
        let r = rot90_image(&img, 1);
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(r.get(1, 0), [1, 0, 0]);
        assert_eq!(r.get(0, 2), [2, 0, 0]);
        let back = rot90_image(&rot90_image(&r, 1), 2);
        assert_eq!(back, img);

        let f = flip_image(&img, true, false);
        assert_eq!(f.get(2, 0), [1, 0, 0]);
        assert_eq!(flip_image(&f, true, false), img);
    }

    #[test]
    fn mask_transforms_match_image_transforms() {
        let mut mask = BinaryMask::new(4, 4, 0);
        mask.set(1, 0, true);
        mask.set(3, 2, true);
        let rot = rot90_mask(&mask, 3);
        let double = rot90_mask(&rot90_mask(&mask, 2), 1);
        assert_eq!(rot90_mask(&rot, 2), double);
        let flipped = flip_mask(&mask, true, true);
        assert_eq!(flipped.get(2, 3), true);
        assert_eq!(flipped.count_ones(), mask.count_ones());
    }

    #[test]
    fn nearest_resize_keeps_mask_binaryish_structure() {
        let mut mask = BinaryMask::new(8, 8, 0);
        for y in 0..4 {
            for x in 0..8 {
                mask.set(x, y, true);
            }
        }
        let resized = resize_mask_nearest(&mask, (0, 0, 8, 8), 4);
        // Top half stays set, bottom half stays clear.
        assert_eq!(resized.count_ones(), 8);
        assert!(resized.get(0, 0) && resized.get(3, 1));
        assert!(!resized.get(0, 2) && !resized.get(3, 3));
    }
}
