//! Procedural factor dataset: motion encodes the action class, a static
//! textured patch encodes the privacy class.
//!
//! Each sample's `path` is a `synth:` recipe string, so a manifest of
//! synthetic samples is fully self-contained and decodes deterministically
//! with no media files on disk.
//!
//! Layout of a frame (side x side, 3 channels):
//! - background: static per-video gray noise around 0.5, plus a smooth
//!   per-video chroma texture (a few low-frequency plane waves with random
//!   orientation, phase, and channel mix). The texture is the stand-in for
//!   scene/appearance cues: it identifies the video from any crop, survives
//!   pooling and pointwise color jitter (which cannot change the geometry of
//!   a spatial pattern), and is static, so it carries no action information;
//! - privacy patch: a fixed-position block at (4, 4) carrying a class hue
//!   tint (with per-sample hue jitter, so tint alone is only partially
//!   informative) plus signed vertical stripes, one stripe frequency per
//!   class bit. Stripe periods are powers of two aligned to the block, so
//!   spatial average pooling by 2 erases bit 0, pooling by 4 erases bit 1,
//!   and so on: resolution reduction deletes privacy information in a
//!   controlled order;
//! - action blob: a small bright square moving with wraparound inside the
//!   band below/right of the patch. The class picks a point on an
//!   (orientation, speed, direction) lattice — horizontal vs vertical first,
//!   then one of four speeds, then travel direction — so small class counts
//!   differ in pooled motion energy, not just its sign. The single-frame
//!   position distribution is identical across classes, so stills carry no
//!   action information.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{ActionLabels, DatasetManifest, LabelSpace, Sample, VideoClip};
use crate::tensor::rng_for;
use crate::{Error, Result};

pub const SCHEME: &str = "synth:";

const ANCHOR: usize = 4;
const BLOB: usize = 5;
const STRIPE_AMP: f64 = 0.15;
/// Static per-video pixel noise. Kept well below the wave texture: iid noise
/// averages out under pooling and decorrelates across crops, so it is
/// nuisance variation rather than a usable identity cue — and it is the one
/// background component reconstruction cannot drive to zero error.
const BG_NOISE: f64 = 0.02;
/// Number of low-frequency plane waves in the per-video chroma texture.
const WAVES: usize = 3;
/// Per-channel amplitude bound of one wave.
const WAVE_AMP: f64 = 0.12;
const BLOCK_NOISE: f64 = 0.02;
const HUE_JITTER: f64 = 1.0 / 6.0;
const SPEEDS: [usize; 4] = [2, 1, 3, 4];

fn class_bits(n_privacy: usize) -> usize {
    if n_privacy <= 1 {
        0
    } else {
        (usize::BITS - (n_privacy - 1).leading_zeros()) as usize
    }
}

fn block_side(n_privacy: usize) -> usize {
    let bits = class_bits(n_privacy);
    8usize.max(1 << (bits + 1))
}

fn min_side(n_privacy: usize) -> usize {
    // patch, margins, and a workable motion band for the blob
    block_side(n_privacy) + ANCHOR + 2 + BLOB + 4
}

fn hsv_to_rgb(h: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    match i {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Generate a deterministic synthetic manifest. Action and privacy classes
/// are sampled independently per sample; every sample's box list marks the
/// privacy patch.
pub fn gen_synthetic_factors(
    n_action: usize,
    n_privacy: usize,
    n_samples: usize,
    side: usize,
    t: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_action < 1 || n_privacy < 1 || n_samples < 1 || side < 1 || t < 1 {
        return Err(Error::Config("all generator counts must be >= 1".into()));
    }
    if n_action > 16 {
        return Err(Error::Config(
            "at most 16 action classes (4 directions x 4 speeds)".into(),
        ));
    }
    if side < min_side(n_privacy) {
        return Err(Error::Config(format!(
            "side {side} too small for {n_privacy} privacy classes; need >= {}",
            min_side(n_privacy)
        )));
    }
    let mut master = rng_for(seed, "synthetic-factors");
    let block = block_side(n_privacy) as u32;
    let space = LabelSpace {
        action_names: (0..n_action).map(|i| format!("action_{i}")).collect(),
        privacy_names: (0..n_privacy).map(|i| format!("privacy_{i}")).collect(),
        action_is_multilabel: false,
    };
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let a = master.gen_range(0..n_action);
        let p = master.gen_range(0..n_privacy);
        let ns: u64 = master.gen();
        let path = format!("{SCHEME}a={a};p={p};np={n_privacy};ns={ns};side={side};t={t}");
        let patch_box = [
            ANCHOR as u32,
            ANCHOR as u32,
            ANCHOR as u32 + block,
            ANCHOR as u32 + block,
        ];
        let mut privacy = vec![0u8; n_privacy];
        privacy[p] = 1;
        samples.push(Sample::new(
            format!("synth-{i:05}"),
            path,
            ActionLabels::Index(a),
            Some(privacy),
            Some(vec![vec![patch_box]; t]),
        ));
    }
    DatasetManifest::new("train", space, samples)
}

/// Decode the part of a recipe after the `synth:` scheme prefix.
pub fn decode_recipe(recipe: &str) -> Result<VideoClip> {
    let mut a = None;
    let mut p = None;
    let mut np = None;
    let mut ns = None;
    let mut side = None;
    let mut t = None;
    for field in recipe.split(';') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Video(format!("bad recipe field: {field}")))?;
        let parse = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Video(format!("bad recipe value: {k}={v}")))
        };
        match k {
            "a" => a = Some(parse(v)? as usize),
            "p" => p = Some(parse(v)? as usize),
            "np" => np = Some(parse(v)? as usize),
            "ns" => ns = Some(parse(v)?),
            "side" => side = Some(parse(v)? as usize),
            "t" => t = Some(parse(v)? as usize),
            _ => return Err(Error::Video(format!("unknown recipe field: {k}"))),
        }
    }
    let (a, p, np, ns, side, t) = match (a, p, np, ns, side, t) {
        (Some(a), Some(p), Some(np), Some(ns), Some(side), Some(t)) => (a, p, np, ns, side, t),
        _ => return Err(Error::Video("recipe missing required fields".into())),
    };
    if p >= np {
        return Err(Error::Video("privacy class out of range".into()));
    }
    if a >= 16 {
        return Err(Error::Video("action class out of range".into()));
    }
    if side < min_side(np) {
        return Err(Error::Video(format!("side {side} too small for np={np}")));
    }
    render(a, p, np, ns, side, t)
}

fn render(a: usize, p: usize, np: usize, ns: u64, side: usize, t: usize) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(ns);
    let block = block_side(np);
    let bits = class_bits(np);

    // static background, shared by all frames: gray noise plus the smooth
    // per-video chroma texture (see module docs)
    let mut bg = Array4::<f64>::zeros((1, side, side, 3));
    for v in bg.iter_mut() {
        *v = 0.5 + rng.gen_range(-BG_NOISE..BG_NOISE);
    }
    for _ in 0..WAVES {
        let cycles = rng.gen_range(0.75..2.0);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let k = cycles * std::f64::consts::TAU / side as f64;
        let (ky, kx) = (k * theta.sin(), k * theta.cos());
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = [
            rng.gen_range(-WAVE_AMP..WAVE_AMP),
            rng.gen_range(-WAVE_AMP..WAVE_AMP),
            rng.gen_range(-WAVE_AMP..WAVE_AMP),
        ];
        for r in 0..side {
            for c in 0..side {
                let s = (ky * r as f64 + kx * c as f64 + phase).sin();
                for ch in 0..3 {
                    bg[[0, r, c, ch]] += amp[ch] * s;
                }
            }
        }
    }
    for v in bg.iter_mut() {
        *v = v.clamp(0.02, 0.98);
    }

    // privacy patch: class hue with jitter, plus one signed stripe per bit
    let amp = rng.gen_range(0.20..0.44);
    let hue = p as f64 / np as f64 + rng.gen_range(-HUE_JITTER..HUE_JITTER);
    let rgb = hsv_to_rgb(hue);
    for r in 0..block {
        for c in 0..block {
            let mut stripes = 0.0;
            for b in 0..bits {
                let sign = if (p >> b) & 1 == 1 { 1.0 } else { -1.0 };
                let pattern = if (c >> b) & 1 == 0 { 1.0 } else { -1.0 };
                stripes += sign * STRIPE_AMP * pattern;
            }
            for ch in 0..3 {
                let v = 0.5
                    + amp * (rgb[ch] - 0.5)
                    + stripes
                    + rng.gen_range(-BLOCK_NOISE..BLOCK_NOISE);
                bg[[0, ANCHOR + r, ANCHOR + c, ch]] = v.clamp(0.01, 0.99);
            }
        }
    }

    // blob motion band below/right of the patch
    let lo = ANCHOR + block + 2;
    let band = side - BLOB - lo + 1;
    let lane = lo + rng.gen_range(0..band);
    let start = rng.gen_range(0..band);
    let horizontal = a % 2 == 0;
    let speed = SPEEDS[(a / 2) % 4];
    let reversed = a / 8 == 1;

    let mut frames = Array4::<f64>::zeros((t, side, side, 3));
    for f in 0..t {
        let mut frame = frames.index_axis_mut(ndarray::Axis(0), f);
        frame.assign(&bg.index_axis(ndarray::Axis(0), 0));
        let step = (speed * f) % band;
        let pos = if reversed {
            (start + band - step) % band
        } else {
            (start + step) % band
        };
        let (row0, col0) = if horizontal {
            (lane, lo + pos)
        } else {
            (lo + pos, lane)
        };
        for r in row0..row0 + BLOB {
            for c in col0..col0 + BLOB {
                for ch in 0..3 {
                    frame[[r, c, ch]] = 0.95;
                }
            }
        }
    }
    VideoClip::new(frames, 8.0)
}
