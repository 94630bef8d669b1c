//! Procedural pedestrian renderer.
//!
//! A person is drawn on a canonical canvas in four horizontal body bands (head,
//! torso, legs, shoes). Foreground attributes only paint inside the band they
//! describe. Background slots pick the scene pattern, weather and lighting; the
//! camera applies a fixed horizontal flip/shift/scale; the domain style then
//! rotates hue, scales gain and adds pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::{bg, fg, AttributeProfile};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub type Rgb = [f64; 3];

pub const HEAD_BAND: (f64, f64) = (0.05, 0.22);
pub const TORSO_BAND: (f64, f64) = (0.22, 0.56);
pub const LEGS_BAND: (f64, f64) = (0.56, 0.88);
pub const SHOES_BAND: (f64, f64) = (0.88, 0.95);

/// Rows whose centre falls inside the band `(lo, hi)` of a canvas `height` tall.
pub fn band_rows(band: (f64, f64), height: usize) -> std::ops::Range<usize> {
    let inside = |r: usize| {
        let v = (r as f64 + 0.5) / height as f64;
        v >= band.0 && v < band.1
    };
    let start = (0..height).find(|&r| inside(r)).unwrap_or(height);
    let end = (start..height).find(|&r| !inside(r)).unwrap_or(height);
    start..end
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub domain_id: u32,
    /// Fraction of a full hue turn, in [-0.5, 0.5].
    pub hue_shift: f64,
    /// In [0.5, 1.5].
    pub illumination_gain: f64,
    pub background_palette: u64,
    pub camera_count: u32,
    pub noise_sigma: f64,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        if !(-0.5..=0.5).contains(&self.hue_shift) {
            return Err(Error::Config(format!(
                "domain {}: hue_shift {} outside [-0.5, 0.5]",
                self.domain_id, self.hue_shift
            )));
        }
        if !(0.5..=1.5).contains(&self.illumination_gain) {
            return Err(Error::Config(format!(
                "domain {}: illumination_gain {} outside [0.5, 1.5]",
                self.domain_id, self.illumination_gain
            )));
        }
        if self.camera_count < 2 {
            return Err(Error::Config(format!(
                "domain {}: camera_count must be at least 2",
                self.domain_id
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "domain {}: noise_sigma must be non-negative",
                self.domain_id
            )));
        }
        Ok(())
    }

    /// L2 distance over the numeric style fields, with the palette counted as
    /// a 0/1 indicator.
    pub fn distance(&self, other: &DomainStyle) -> f64 {
        let palette = if self.background_palette == other.background_palette { 0.0 } else { 1.0 };
        ((self.hue_shift - other.hue_shift).powi(2)
            + (self.illumination_gain - other.illumination_gain).powi(2)
            + (self.noise_sigma - other.noise_sigma).powi(2)
            + palette)
            .sqrt()
    }

    pub fn same_style(&self, other: &DomainStyle) -> bool {
        self.hue_shift == other.hue_shift
            && self.illumination_gain == other.illumination_gain
            && self.background_palette == other.background_palette
            && self.camera_count == other.camera_count
            && self.noise_sigma == other.noise_sigma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    /// `[H, W, 3]`, values in [0, 1].
    pub pixels: DenseArray,
    pub identity_id: u32,
    pub camera_id: u32,
    pub domain_id: u32,
}

impl PersonImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let (w, ch) = (self.width(), self.channels());
        &self.pixels.data()[(r * w + c) * ch..(r * w + c + 1) * ch]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.sum() / self.pixels.len() as f64
    }
}

const UPPER: [Rgb; 8] = [
    [0.85, 0.15, 0.15],
    [0.20, 0.70, 0.25],
    [0.15, 0.30, 0.85],
    [0.95, 0.85, 0.20],
    [0.92, 0.92, 0.92],
    [0.10, 0.10, 0.10],
    [0.55, 0.20, 0.70],
    [0.95, 0.55, 0.10],
];
const LOWER: [Rgb; 6] = [
    [0.08, 0.08, 0.08],
    [0.15, 0.25, 0.60],
    [0.50, 0.50, 0.50],
    [0.45, 0.30, 0.15],
    [0.90, 0.90, 0.90],
    [0.20, 0.45, 0.20],
];
const HAIR: [Rgb; 4] = [
    [0.08, 0.07, 0.06],
    [0.40, 0.25, 0.10],
    [0.90, 0.80, 0.45],
    [0.65, 0.65, 0.65],
];
const SKIN: [Rgb; 3] = [[0.96, 0.80, 0.68], [0.87, 0.68, 0.55], [0.78, 0.64, 0.58]];
const HAT: [Rgb; 4] = [[0.0; 3], [0.80, 0.10, 0.10], [0.25, 0.25, 0.45], [0.35, 0.35, 0.30]];
const SHOES: [Rgb; 4] = [
    [0.06, 0.06, 0.06],
    [0.95, 0.95, 0.95],
    [0.40, 0.25, 0.12],
    [0.80, 0.12, 0.12],
];
const BAG: [Rgb; 5] = [
    [0.10, 0.10, 0.10],
    [0.45, 0.28, 0.12],
    [0.80, 0.15, 0.15],
    [0.15, 0.25, 0.75],
    [0.20, 0.55, 0.25],
];

fn scaled(c: Rgb, k: f64) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] * (1.0 - t) + b[0] * t,
        a[1] * (1.0 - t) + b[1] * t,
        a[2] * (1.0 - t) + b[2] * t,
    ]
}

fn in_band(v: f64, band: (f64, f64)) -> bool {
    v >= band.0 && v < band.1
}

/// Colour of the person at canvas coordinates `(u, v)` in [0,1)², or `None`
/// for background.
fn person_pixel(p: &AttributeProfile, u: f64, v: f64) -> Option<Rgb> {
    let f = |slot: usize| p.foreground[slot] as usize;
    let view = p.background[bg::VIEWPOINT] as usize;
    let cx = 0.5
        + match view {
            2 => -0.06,
            3 => 0.06,
            _ => 0.0,
        };
    let side_view = view >= 2;
    let dx = u - cx;
    let skin = SKIN[f(fg::AGE)];

    let build = [0.85, 1.0, 1.2][f(fg::BUILD)];
    let gender = [1.05, 0.9, 1.0][f(fg::GENDER)];
    let torso_half = 0.2 * build * gender * if side_view { 0.75 } else { 1.0 };

    if in_band(v, HEAD_BAND) {
        let (hy, rx, ry) = (0.135, 0.13, 0.085);
        let inside_head = (dx / rx).powi(2) + ((v - hy) / ry).powi(2) <= 1.0;
        let hair = HAIR[f(fg::HAIR_COLOR)];
        // hat sits on top of everything else in the head band
        match f(fg::HAT) {
            1 if v < 0.1 && dx.abs() < rx + if view == 0 { 0.06 } else { 0.0 } => return Some(HAT[1]),
            2 if v < 0.11 && dx.abs() < rx => return Some(HAT[2]),
            3 if inside_head && (v < 0.09 || dx.abs() > rx * 0.65) => return Some(HAT[3]),
            _ => {}
        }
        let style = f(fg::HAIR_STYLE);
        if style == 2 && (v - 0.16).abs() < 0.03 && (dx - if view == 3 { -0.17 } else { 0.17 }).abs() < 0.04 {
            return Some(hair);
        }
        if !inside_head {
            if style == 1 && v > 0.12 && dx.abs() < rx + 0.03 {
                return Some(hair);
            }
            return None;
        }
        let hair_here = match style {
            3 => false,
            1 => v < 0.11 || dx.abs() > rx * 0.6,
            _ => v < 0.1,
        };
        if hair_here || (view == 1 && style != 3) {
            return Some(hair);
        }
        let eye = (v - 0.14).abs() < 0.012
            && match view {
                0 => (dx.abs() - 0.045).abs() < 0.02,
                2 => (dx + 0.05).abs() < 0.02,
                3 => (dx - 0.05).abs() < 0.02,
                _ => false,
            };
        return Some(if eye { [0.1, 0.1, 0.1] } else { skin });
    }

    if in_band(v, TORSO_BAND) {
        let upper = UPPER[f(fg::UPPER_COLOR)];
        let bag = BAG[f(fg::BAG_COLOR)];
        match f(fg::BAG) {
            1 if view == 1 && dx.abs() < torso_half * 0.7 && (0.26..0.5).contains(&v) => return Some(bag),
            1 if view != 1 && (dx.abs() - torso_half - 0.02).abs() < 0.03 && (0.25..0.5).contains(&v) => {
                return Some(bag)
            }
            2 if v >= 0.5 && (dx - torso_half - 0.1).abs() < 0.05 => return Some(bag),
            3 if (dx + (v - 0.4) * 0.9).abs() < 0.025 && dx.abs() < torso_half => return Some(bag),
            3 if v >= 0.48 && (dx - torso_half - 0.05).abs() < 0.06 => return Some(bag),
            _ => {}
        }
        let taper = 1.0 - 0.25 * (v - TORSO_BAND.0) / (TORSO_BAND.1 - TORSO_BAND.0);
        let half = torso_half * taper.max(0.8);
        if dx.abs() < half {
            let trim = scaled(upper, 0.55);
            return Some(match f(fg::UPPER_STYLE) {
                1 if v < 0.27 && dx.abs() < 0.05 => [0.95, 0.95, 0.95],
                2 if dx.abs() < 0.02 => trim,
                3 if (v - 0.47).abs() < 0.015 => trim,
                3 if dx.abs() < 0.015 && ((v - 0.3) * 40.0).rem_euclid(2.0) < 1.0 => trim,
                _ => upper,
            });
        }
        let arm = dx.abs() >= half && dx.abs() < half + 0.08 && (0.24..0.54).contains(&v);
        if arm {
            let covered = match f(fg::SLEEVE) {
                0 => v < 0.34,
                1 => true,
                _ => false,
            };
            return Some(if covered { upper } else { skin });
        }
        return None;
    }

    if in_band(v, LEGS_BAND) {
        let lower = LOWER[f(fg::LOWER_COLOR)];
        if f(fg::BAG) == 2 && v < 0.62 && (dx - torso_half - 0.1).abs() < 0.05 {
            return Some(BAG[f(fg::BAG_COLOR)]);
        }
        let leg_half = 0.075 * if side_view { 0.8 } else { 1.0 };
        let gap = if side_view { 0.0 } else { 0.085 };
        let on_leg = (dx.abs() - gap).abs() < leg_half || (side_view && dx.abs() < leg_half * 1.6);
        return match f(fg::LOWER_STYLE) {
            2 if v < 0.72 => {
                let half = 0.16 + (v - LEGS_BAND.0) * 0.6;
                (dx.abs() < half).then_some(lower)
            }
            2 | 1 if on_leg && v >= if f(fg::LOWER_STYLE) == 1 { 0.66 } else { 0.72 } => Some(skin),
            3 if on_leg && (dx.abs() - gap).abs() < 0.012 => Some(mix(lower, [1.0; 3], 0.35)),
            _ if on_leg => Some(lower),
            _ => None,
        };
    }

    if in_band(v, SHOES_BAND) {
        let gap = if side_view { 0.0 } else { 0.085 };
        let forward = match view {
            2 => -0.02,
            3 => 0.02,
            _ => 0.0,
        };
        return ((dx - forward).abs() - gap).abs().lt(&0.08).then_some(SHOES[f(fg::SHOES)]);
    }
    None
}

/// Deterministic two-colour palette for a (palette seed, scene) pair.
fn scene_palette(palette: u64, scene: usize) -> (Rgb, Rgb) {
    let mut rng = ChaCha8Rng::seed_from_u64(palette.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ scene as u64);
    let mut draw = || -> Rgb { [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)] };
    (draw(), draw())
}

fn background_pixel(p: &AttributeProfile, palette: u64, u: f64, v: f64) -> Rgb {
    let scene = p.background[bg::SCENE] as usize;
    let (a, b) = scene_palette(palette, scene);
    let mut c = match scene {
        0 => if v > 0.7 { scaled(b, 0.8) } else { a },
        1 => if (u * 6.0).floor() as i64 % 2 == 0 { a } else { b },
        2 => mix(a, b, 0.5 + 0.5 * ((u * 11.0).sin() * (v * 7.0).cos())),
        3 => if ((u * 4.0).floor() + (v * 8.0).floor()) as i64 % 2 == 0 { a } else { b },
        _ => if (v * 10.0).floor() as i64 % 3 == 0 { b } else { a },
    };
    match p.background[bg::WEATHER] {
        0 => c = scaled(c, 1.08),
        1 => {
            let g = (c[0] + c[1] + c[2]) / 3.0;
            c = mix(c, [g; 3], 0.4);
        }
        2 => {
            c = scaled(c, 0.8);
            if ((u * 32.0 + v * 64.0) as i64) % 7 == 0 {
                c = mix(c, [0.85; 3], 0.5);
            }
        }
        _ => {}
    }
    c
}

/// Render without the photometric domain style: person, background, weather,
/// lighting and the camera's geometric profile.
pub fn render_reference(
    profile: &AttributeProfile,
    palette: u64,
    camera_id: u32,
    height: usize,
    width: usize,
) -> DenseArray {
    let mut canvas = vec![[0.0; 3]; height * width];
    let illum = profile.background[bg::ILLUMINATION];
    let foggy = profile.background[bg::WEATHER] == 3;
    for r in 0..height {
        let v = (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let u = (c as f64 + 0.5) / width as f64;
            let (mut px, is_person) = match person_pixel(profile, u, v) {
                Some(px) => (px, true),
                None => (background_pixel(profile, palette, u, v), false),
            };
            px = scaled(
                px,
                match (illum, is_person) {
                    (0, _) => 1.15,
                    (2, _) => 0.7,
                    (3, true) => 0.65,
                    (3, false) => 1.2,
                    _ => 1.0,
                },
            );
            if foggy {
                px = mix(px, [0.7; 3], 0.35);
            }
            canvas[r * width + c] = px;
        }
    }

    // fixed per-camera geometry: mirror on odd ids, shift and horizontal scale
    let flip = camera_id % 2 == 1;
    let shift = ((camera_id as i64 * 37) % 5 - 2) as f64;
    let scale = 1.0 + 0.05 * ((camera_id as i64 * 13) % 5 - 2) as f64;
    let mut out = DenseArray::zeros(&[height, width, 3]);
    let data = out.data_mut();
    let centre = width as f64 / 2.0;
    for r in 0..height {
        for c in 0..width {
            let x = if flip { width - 1 - c } else { c } as f64 + 0.5;
            let src = ((x - centre) * scale + centre + shift).floor();
            let src = src.clamp(0.0, width as f64 - 1.0) as usize;
            let px = canvas[r * width + src];
            for ch in 0..3 {
                data[(r * width + c) * 3 + ch] = px[ch].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Rotation about the grey axis by `turns` of a full circle.
fn hue_matrix(turns: f64) -> [[f64; 3]; 3] {
    let theta = turns * std::f64::consts::TAU;
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = 1.0 - c;
    let mut m = [[0.0; 3]; 3];
    let kx = [[0.0, -k, k], [k, 0.0, -k], [-k, k, 0.0]];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let id = if i == j { 1.0 } else { 0.0 };
            *cell = c * id + t * k * k + s * kx[i][j];
        }
    }
    m
}

pub fn render_image(
    profile: &AttributeProfile,
    style: &DomainStyle,
    camera_id: u32,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<PersonImage> {
    if camera_id >= style.camera_count {
        return Err(Error::Config(format!(
            "camera {camera_id} out of range for domain {} with {} cameras",
            style.domain_id, style.camera_count
        )));
    }
    let mut pixels = render_reference(profile, style.background_palette, camera_id, height, width);
    let identity_style = style.hue_shift == 0.0 && style.illumination_gain == 1.0;
    let m = hue_matrix(style.hue_shift);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for px in pixels.data_mut().chunks_exact_mut(3) {
        if !identity_style {
            let src = [px[0], px[1], px[2]];
            for ch in 0..3 {
                let rot = m[ch][0] * src[0] + m[ch][1] * src[1] + m[ch][2] * src[2];
                px[ch] = rot * style.illumination_gain;
            }
        }
        if style.noise_sigma > 0.0 {
            for v in px.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += style.noise_sigma * z;
            }
        }
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(PersonImage {
        pixels,
        identity_id: profile.identity_id,
        camera_id,
        domain_id: style.domain_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::vocab::gen_identities;

    fn style() -> DomainStyle {
        DomainStyle {
            domain_id: 0,
            hue_shift: 0.1,
            illumination_gain: 0.9,
            background_palette: 5,
            camera_count: 3,
            noise_sigma: 0.03,
        }
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let p = gen_identities(2, 1).unwrap()[0].with_background([0, 1, 2, 3]);
        let a = render_image(&p, &style(), 1, 42, 64, 32).unwrap();
        let b = render_image(&p, &style(), 1, 42, 64, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.shape(), &[64, 32, 3]);
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upper_colour_only_changes_torso_rows() {
        let p = gen_identities(2, 9).unwrap()[0].with_background([0, 0, 1, 0]);
        let mut q = p.clone();
        q.foreground[fg::UPPER_COLOR] = (p.foreground[fg::UPPER_COLOR] + 3) % 8;
        let a = render_image(&p, &style(), 0, 7, 64, 32).unwrap();
        let b = render_image(&q, &style(), 0, 7, 64, 32).unwrap();
        let torso = band_rows(TORSO_BAND, 64);
        let mut changed_inside = 0;
        for r in 0..64 {
            for c in 0..32 {
                let differs = a.pixel(r, c) != b.pixel(r, c);
                if torso.contains(&r) {
                    changed_inside += differs as usize;
                } else {
                    assert!(!differs, "pixel ({r},{c}) outside the torso band changed");
                }
            }
        }
        assert!(changed_inside > 20);
    }

    #[test]
    fn identity_style_equals_reference() {
        let p = gen_identities(2, 3).unwrap()[1].with_background([2, 1, 0, 4]);
        let plain = DomainStyle {
            hue_shift: 0.0,
            illumination_gain: 1.0,
            noise_sigma: 0.0,
            ..style()
        };
        let img = render_image(&p, &plain, 2, 0, 64, 32).unwrap();
        let reference = render_reference(&p, plain.background_palette, 2, 64, 32);
        assert_eq!(img.pixels, reference);
        let ref_mean = reference.sum() / reference.len() as f64;
        assert_eq!(img.mean_intensity(), ref_mean);
    }

    #[test]
    fn camera_out_of_range_rejected() {
        let p = gen_identities(2, 3).unwrap()[0].clone();
        assert!(render_image(&p, &style(), 3, 0, 64, 32).is_err());
    }

    #[test]
    fn zero_hue_matrix_is_identity() {
        let m = hue_matrix(0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        // grey is a fixed point of every rotation
        let m = hue_matrix(0.3);
        let g: f64 = (0..3).map(|j| m[0][j] * 0.5).sum();
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn torso_rows_for_default_height() {
        assert_eq!(band_rows(TORSO_BAND, 64), 14..36);
    }
}
