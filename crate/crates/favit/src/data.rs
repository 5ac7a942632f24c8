//! Procedural forgery-detection task with fine-grained pairs.
//!
//! Real images are smooth compositions of anisotropic Gaussian blobs whose
//! palette is fixed by a style class, plus low-amplitude noise. A fake is its
//! paired real with one elliptical region spliced in from a donor real,
//! alpha-blended at the boundary and re-noised inside — so each (real, fake)
//! pair differs only inside a small dilated region, which is exactly the
//! property the pair loss exploits.
//!
//! Two domains, "source" and "shifted", share all content parameters and
//! differ only in blend kernel width and noise amplitude. Everything is a
//! pure function of seeds: regeneration is bitwise identical, so only
//! manifests are ever persisted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const TAG_CONTENT: u64 = 0x636f6e74; // "cont"
const TAG_NOISE: u64 = 0x6e6f6973; // "nois"
const TAG_REGION: u64 = 0x72656769; // "regi"
const TAG_SPLICE_NOISE: u64 = 0x73706e6f; // "spno"

/// Split offsets keep train and test seed ranges disjoint.
pub const TRAIN_SEED_OFFSET: u64 = 0;
pub const TEST_SEED_OFFSET: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum DomainName {
    Source,
    Shifted,
}

impl std::fmt::Display for DomainName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainName::Source => write!(f, "source"),
            DomainName::Shifted => write!(f, "shifted"),
        }
    }
}

/// Generation knobs for one domain. The two domains of a task must differ
/// only in `blend_width` and `noise_amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub style_classes: usize,
    /// Alpha falloff distance (pixels) outside a spliced region.
    pub blend_width: f64,
    /// Uniform noise amplitude, applied to reals everywhere and inside the
    /// spliced region of fakes.
    pub noise_amplitude: f64,
    /// Offsets the palette stream; identical across domains.
    pub palette_seed_offset: u64,
}

impl DomainParams {
    pub fn source() -> Self {
        DomainParams {
            style_classes: 4,
            blend_width: 1.5,
            noise_amplitude: 0.02,
            palette_seed_offset: 0,
        }
    }

    pub fn shifted() -> Self {
        DomainParams {
            blend_width: 4.0,
            noise_amplitude: 0.06,
            ..DomainParams::source()
        }
    }

    /// Check the domains-differ-only-in-two-knobs invariant.
    pub fn compatible(&self, other: &DomainParams) -> bool {
        self.style_classes == other.style_classes
            && self.palette_seed_offset == other.palette_seed_offset
    }
}

pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// 3×64×64, values in [0, 1].
    pub image: Tensor<f32>,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub pair_id: u64,
    pub style_class: usize,
    /// Binary 64×64 manipulation mask; fakes only.
    pub mask: Option<Vec<u8>>,
}

/// Base palette color of a style class: a hue-wheel color jittered by the
/// palette stream, so classes are well separated and the offset reshuffles
/// palettes deterministically.
fn class_palette(class: usize, params: &DomainParams) -> [f64; 3] {
    let mut r = rng::stream(params.palette_seed_offset, mix_class(class));
    let hue_jitter = rng::uniform(&mut r, -0.04, 0.04);
    let hue = (class as f64 / params.style_classes as f64 + hue_jitter).rem_euclid(1.0);
    let sat = rng::uniform(&mut r, 0.55, 0.75);
    let val = rng::uniform(&mut r, 0.55, 0.8);
    hsv_to_rgb(hue, sat, val)
}

fn mix_class(class: usize) -> u64 {
    0x7061_6c00 + class as u64 // "pal" + class
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_a: f64, // 1/σ² along the rotated axes
    inv_b: f64,
    cos_t: f64,
    sin_t: f64,
    color: [f64; 3],
    alpha: f64,
}

/// Render a real image. Content (blobs, colors) is a function of
/// (seed, style_class) only; the domain contributes nothing but the noise
/// amplitude, so matched seeds across domains share all content.
pub fn generate_real(seed: u64, domain: &DomainParams, style_class: usize) -> SampleRecord {
    let n = IMAGE_SIZE;
    let mut content = rng::stream(rng::mix3(seed, style_class as u64, TAG_CONTENT), 1);
    let base = class_palette(style_class, domain);

    // Background: darkened palette color with slight per-sample jitter.
    let bg: Vec<f64> = (0..3)
        .map(|c| (base[c] * 0.45 + rng::uniform(&mut content, -0.04, 0.04)).clamp(0.0, 1.0))
        .collect();

    let blob_count = 3 + (rng::uniform(&mut content, 0.0, 4.0) as usize).min(3);
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let cx = rng::uniform(&mut content, 8.0, n as f64 - 8.0);
        let cy = rng::uniform(&mut content, 8.0, n as f64 - 8.0);
        let sa = rng::uniform(&mut content, 4.0, 14.0);
        let sb = rng::uniform(&mut content, 4.0, 14.0);
        let theta = rng::uniform(&mut content, 0.0, std::f64::consts::PI);
        let color: [f64; 3] = [
            (base[0] + rng::uniform(&mut content, -0.18, 0.18)).clamp(0.0, 1.0),
            (base[1] + rng::uniform(&mut content, -0.18, 0.18)).clamp(0.0, 1.0),
            (base[2] + rng::uniform(&mut content, -0.18, 0.18)).clamp(0.0, 1.0),
        ];
        let alpha = rng::uniform(&mut content, 0.55, 0.95);
        blobs.push(Blob {
            cx,
            cy,
            inv_a: 1.0 / (sa * sa),
            inv_b: 1.0 / (sb * sb),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            color,
            alpha,
        });
    }

    let mut img = vec![0.0f64; 3 * n * n];
    for c in 0..3 {
        img[c * n * n..(c + 1) * n * n].fill(bg[c]);
    }
    for b in &blobs {
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - b.cx;
                let dy = y as f64 - b.cy;
                let u = b.cos_t * dx + b.sin_t * dy;
                let v = -b.sin_t * dx + b.cos_t * dy;
                let q = u * u * b.inv_a + v * v * b.inv_b;
                if q > 18.0 {
                    continue;
                }
                let g = b.alpha * (-0.5 * q).exp();
                let idx = y * n + x;
                for c in 0..3 {
                    let px = &mut img[c * n * n + idx];
                    *px = *px * (1.0 - g) + b.color[c] * g;
                }
            }
        }
    }

    // Noise pattern is domain-independent; only the amplitude differs.
    let mut noise = rng::stream(rng::mix3(seed, style_class as u64, TAG_NOISE), 2);
    let amp = domain.noise_amplitude;
    let data: Vec<f32> = img
        .iter()
        .map(|&v| {
            let e = (rng::uniform(&mut noise, -1.0, 1.0)) * amp;
            ((v + e).clamp(0.0, 1.0)) as f32
        })
        .collect();

    SampleRecord {
        image: Tensor::new(vec![3, n, n], data),
        label: 0,
        pair_id: 0,
        style_class,
        mask: None,
    }
}

/// Splice an elliptical region from a donor real into `real`, blending the
/// boundary over the domain's kernel width and re-noising inside the region.
/// Pixels farther than the blend width from the mask are the real's, bitwise.
pub fn make_fake(
    real: &SampleRecord,
    real_seed: u64,
    donor_seed: u64,
    domain: &DomainParams,
) -> Result<SampleRecord> {
    if real.label != 0 {
        return Err(Error::Data("make_fake requires a real sample".into()));
    }
    let n = IMAGE_SIZE;
    let mut region = rng::stream(rng::mix3(real_seed, donor_seed, TAG_REGION), 3);

    // Elliptical region: diameters within [9, 23] px, fully interior.
    let ra = rng::uniform(&mut region, 4.5, 11.5);
    let rb = rng::uniform(&mut region, 4.5, 11.5);
    let theta = rng::uniform(&mut region, 0.0, std::f64::consts::PI);
    let cx = rng::uniform(&mut region, 16.0, n as f64 - 16.0);
    let cy = rng::uniform(&mut region, 16.0, n as f64 - 16.0);
    let donor_class = (rng::uniform(&mut region, 0.0, domain.style_classes as f64) as usize)
        .min(domain.style_classes - 1);

    let donor = generate_real(donor_seed, domain, donor_class);

    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let inside = |x: usize, y: usize| -> bool {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let u = cos_t * dx + sin_t * dy;
        let v = -sin_t * dx + cos_t * dy;
        (u / ra) * (u / ra) + (v / rb) * (v / rb) <= 1.0
    };

    let mut mask = vec![0u8; n * n];
    let mut mask_px = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if inside(x, y) {
                mask[y * n + x] = 1;
                mask_px.push((x, y));
            }
        }
    }
    if mask_px.is_empty() {
        return Err(Error::Data("degenerate splice region (empty mask)".into()));
    }

    // Boundary pixels of the mask, for exact distance-to-mask blending.
    let boundary: Vec<(f64, f64)> = mask_px
        .iter()
        .filter(|&&(x, y)| {
            let (x, y) = (x as isize, y as isize);
            [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
                .iter()
                .any(|&(nx, ny)| {
                    nx < 0
                        || ny < 0
                        || nx >= n as isize
                        || ny >= n as isize
                        || mask[ny as usize * n + nx as usize] == 0
                })
        })
        .map(|&(x, y)| (x as f64, y as f64))
        .collect();

    let w = domain.blend_width;
    let mut out = real.image.data().to_vec();
    let mut splice_noise = rng::stream(rng::mix3(real_seed, donor_seed, TAG_SPLICE_NOISE), 4);
    let amp = domain.noise_amplitude;

    // Only pixels within the blend band of the mask can change; iterate a
    // bounding box around the region for speed, in fixed row-major order.
    let reach = (ra.max(rb) + w).ceil() as isize + 1;
    let x0 = ((cx as isize) - reach).max(0) as usize;
    let x1 = (((cx as isize) + reach) as usize).min(n - 1);
    let y0 = ((cy as isize) - reach).max(0) as usize;
    let y1 = (((cy as isize) + reach) as usize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let idx = y * n + x;
            let alpha = if mask[idx] == 1 {
                1.0
            } else {
                // Exact Euclidean distance to the nearest mask pixel.
                let mut d2 = f64::MAX;
                for &(bx, by) in &boundary {
                    let dx = x as f64 - bx;
                    let dy = y as f64 - by;
                    d2 = d2.min(dx * dx + dy * dy);
                }
                let d = d2.sqrt();
                if d >= w {
                    continue;
                }
                1.0 - d / w
            };
            for c in 0..3 {
                let p = c * n * n + idx;
                let mut v =
                    alpha * donor.image.data()[p] as f64 + (1.0 - alpha) * out[p] as f64;
                if mask[idx] == 1 {
                    v += rng::uniform(&mut splice_noise, -1.0, 1.0) * amp;
                }
                out[p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(SampleRecord {
        image: Tensor::new(vec![3, n, n], out),
        label: 1,
        pair_id: real.pair_id,
        style_class: real.style_class,
        mask: Some(mask),
    })
}

// ── Manifests and splits ─────────────────────────────────────────────

/// Everything needed to regenerate one (real, fake) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairKey {
    pub real_seed: u64,
    pub donor_seed: u64,
    pub style_class: usize,
    pub pair_id: u64,
}

/// Dataset manifest: generation parameters plus one key per pair. Images
/// regenerate on demand; nothing large persists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub domain_name: DomainName,
    pub domain: DomainParams,
    pub pairs: Vec<PairKey>,
}

/// Build a split of `n_pairs` (real, fake) pairs. `split_offset` partitions
/// the seed space so train and test draws can never collide; style classes
/// rotate round-robin for exact balance.
pub fn build_split(
    n_pairs: usize,
    domain_name: DomainName,
    domain: &DomainParams,
    seed: u64,
    split_offset: u64,
) -> Manifest {
    let base = seed.wrapping_mul(1_000_003).wrapping_add(split_offset);
    let pairs = (0..n_pairs as u64)
        .map(|i| PairKey {
            real_seed: base + 2 * i,
            donor_seed: base + 2 * i + 1,
            style_class: (i as usize) % domain.style_classes,
            pair_id: i,
        })
        .collect();
    Manifest {
        domain_name,
        domain: domain.clone(),
        pairs,
    }
}

impl Manifest {
    /// Same pairs, different domain: the cross-domain evaluation twin.
    pub fn with_domain(&self, name: DomainName, domain: &DomainParams) -> Result<Manifest> {
        if !self.domain.compatible(domain) {
            return Err(Error::Data(
                "domains differ in more than blend width and noise amplitude".into(),
            ));
        }
        Ok(Manifest {
            domain_name: name,
            domain: domain.clone(),
            pairs: self.pairs.clone(),
        })
    }

    /// Materialize one pair.
    pub fn pair(&self, index: usize) -> Result<(SampleRecord, SampleRecord)> {
        let key = &self.pairs[index];
        let mut real = generate_real(key.real_seed, &self.domain, key.style_class);
        real.pair_id = key.pair_id;
        let fake = make_fake(&real, key.real_seed, key.donor_seed, &self.domain)?;
        Ok((real, fake))
    }

    /// Materialize every pair into memory.
    pub fn materialize(&self) -> Result<Vec<(SampleRecord, SampleRecord)>> {
        (0..self.pairs.len()).map(|i| self.pair(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Manifest> {
        Ok(serde_json::from_str(s)?)
    }
}
