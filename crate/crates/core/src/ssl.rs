//! Self-supervised privacy branch: frame-pair sampling, augmentation, a 2D
//! backbone with a projection head, and the contrastive / rotation objectives.
//!
//! Augmentation exists in two equivalent forms: a plain data-space transform
//! for dataloading-style use, and a tape-graph construction so the loss can
//! push gradients through the augmented frames back into the anonymizer.
//! Both consume the same [`AugmentPlan`], and a test pins them to identical
//! outputs. Geometric resampling is nearest-neighbor for exactly that
//! reason — one shared index table drives both paths.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::{init_uniform, rng_for, Arr, ColorAffine, ParamSet, Tape, TensorRef};

/// Which self-supervised objective drives the privacy branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslObjective {
    NtXent,
    MomentumContrast,
    RotNet,
    /// Clip-level contrastive variant: positives are two clips of the same
    /// video, features are temporal means of per-frame features.
    NtXentClip,
}

/// How the two positive frames of a video are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "gap")]
pub enum SamplerStrategy {
    Unconstrained,
    /// Both indices at distance strictly greater than `gap`.
    MinGap(usize),
    /// Both indices at distance strictly less than `gap`.
    MaxGap(usize),
}

impl SamplerStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplerStrategy::Unconstrained => Ok(()),
            SamplerStrategy::MinGap(g) | SamplerStrategy::MaxGap(g) if *g >= 1 => Ok(()),
            _ => Err(Error::Config("frame sampler gap must be at least 1".into())),
        }
    }
}

/// Draws two distinct frame indices from `[0, clip_len)` subject to the
/// strategy's distance constraint.
pub fn sample_frame_pair(
    clip_len: usize,
    strategy: SamplerStrategy,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    strategy.validate()?;
    if clip_len < 2 {
        return Err(Error::Config(format!(
            "need at least 2 frames to sample a pair, got {clip_len}"
        )));
    }
    let feasible = |i: usize, j: usize| {
        let d = i.abs_diff(j);
        match strategy {
            SamplerStrategy::Unconstrained => i != j,
            SamplerStrategy::MinGap(g) => d > g,
            SamplerStrategy::MaxGap(g) => i != j && d < g,
        }
    };
    if !(0..clip_len).any(|i| (0..clip_len).any(|j| feasible(i, j))) {
        return Err(Error::Config(format!(
            "no frame pair in a {clip_len}-frame clip satisfies {strategy:?}"
        )));
    }
    loop {
        let i = rng.gen_range(0..clip_len);
        let j = rng.gen_range(0..clip_len);
        if feasible(i, j) {
            return Ok((i, j));
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Low-strength crop/scale, flip, grayscale.
    Supervised,
    /// Adds strong color jitter, color drop, and cut-out.
    Ssl,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const FLIP_P: f64 = 0.5;
const GRAY_P: f64 = 0.2;
const JITTER_P: f64 = 0.8;
const CUTOUT_P: f64 = 0.5;
/// Jitter strength 0.8 for brightness/contrast/saturation, 0.2 for hue.
const JITTER_S: f64 = 0.8;
const HUE_S: f64 = 0.2;
const CROP_AREA_SUPERVISED: (f64, f64) = (0.7, 1.0);
const CROP_AREA_SSL: (f64, f64) = (0.4, 1.0);
const CUTOUT_FRAC: (f64, f64) = (0.25, 0.5);

fn mat_mul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    o
}

fn mat_vec3(a: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

const IDENT3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation of RGB space about the gray axis by `turns` of the color wheel.
fn hue_mat(turns: f64) -> [[f64; 3]; 3] {
    let th = turns * std::f64::consts::TAU;
    let (c, s) = (th.cos(), th.sin());
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let third = 1.0 / 3.0;
            let delta = if i == j { 1.0 } else { 0.0 };
            // Rodrigues rotation about (1,1,1)/sqrt(3).
            let cross = match (i, j) {
                (0, 1) | (1, 2) | (2, 0) => -1.0 / 3f64.sqrt(),
                (1, 0) | (2, 1) | (0, 2) => 1.0 / 3f64.sqrt(),
                _ => 0.0,
            };
            m[i][j] = c * delta + (1.0 - c) * third + s * cross;
        }
    }
    m
}

fn sat_mat(s: f64) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (1.0 - s) * LUMA[j] + if i == j { s } else { 0.0 };
        }
    }
    m
}

fn gray_mat() -> [[f64; 3]; 3] {
    [LUMA, LUMA, LUMA]
}

fn scale_mat(k: f64) -> [[f64; 3]; 3] {
    [[k, 0.0, 0.0], [0.0, k, 0.0], [0.0, 0.0, k]]
}

/// One frozen draw of augmentation parameters, shared by every frame it is
/// applied to. The color transform is pre-composed into a single affine map.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    src_h: usize,
    src_w: usize,
    /// (y0, x0, crop_h, crop_w); the crop is resized back to (src_h, src_w).
    crop: (usize, usize, usize, usize),
    flip: bool,
    mat: [[f64; 3]; 3],
    off: [f64; 3],
    /// (y0, x0, h, w) region zeroed after the color transform.
    cutout: Option<(usize, usize, usize, usize)>,
}

impl AugmentPlan {
    pub fn draw(mode: AugmentMode, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let (lo, hi) = match mode {
            AugmentMode::Supervised => CROP_AREA_SUPERVISED,
            AugmentMode::Ssl => CROP_AREA_SSL,
        };
        let area = rng.gen_range(lo..hi);
        let side_frac = area.sqrt();
        let ch = ((h as f64 * side_frac).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side_frac).round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        let flip = rng.gen_bool(FLIP_P);

        let mut mat = IDENT3;
        let mut off = [0.0; 3];
        if mode == AugmentMode::Ssl && rng.gen_bool(JITTER_P) {
            let b = rng.gen_range(1.0 - JITTER_S..1.0 + JITTER_S);
            let c = rng.gen_range(1.0 - JITTER_S..1.0 + JITTER_S);
            let s = rng.gen_range(1.0 - JITTER_S..1.0 + JITTER_S);
            let hue = rng.gen_range(-HUE_S..HUE_S);
            // brightness, then contrast about 0.5, then saturation, then hue
            mat = scale_mat(b);
            mat = mat_mul3(scale_mat(c), mat);
            off = [(1.0 - c) * 0.5; 3];
            mat = mat_mul3(sat_mat(s), mat);
            off = mat_vec3(sat_mat(s), off);
            mat = mat_mul3(hue_mat(hue), mat);
            off = mat_vec3(hue_mat(hue), off);
        }
        if rng.gen_bool(GRAY_P) {
            mat = mat_mul3(gray_mat(), mat);
            off = mat_vec3(gray_mat(), off);
        }

        let cutout = if mode == AugmentMode::Ssl && rng.gen_bool(CUTOUT_P) {
            let fh = rng.gen_range(CUTOUT_FRAC.0..CUTOUT_FRAC.1);
            let fw = rng.gen_range(CUTOUT_FRAC.0..CUTOUT_FRAC.1);
            let hh = ((h as f64 * fh).round() as usize).max(1);
            let ww = ((w as f64 * fw).round() as usize).max(1);
            let y = rng.gen_range(0..=h - hh);
            let x = rng.gen_range(0..=w - ww);
            Some((y, x, hh, ww))
        } else {
            None
        };

        Self {
            src_h: h,
            src_w: w,
            crop: (y0, x0, ch, cw),
            flip,
            mat,
            off,
            cutout,
        }
    }

    /// Identity plan (useful as a neutral element in tests).
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            src_h: h,
            src_w: w,
            crop: (0, 0, h, w),
            flip: false,
            mat: IDENT3,
            off: [0.0; 3],
            cutout: None,
        }
    }

    pub fn is_color_drop(&self) -> bool {
        // Gray output means all three rows of the matrix are identical.
        self.mat[0] == self.mat[1] && self.mat[1] == self.mat[2]
    }

    /// Flat (src index) table mapping each output pixel to its source pixel:
    /// crop, nearest resize back to the source size, and horizontal flip.
    fn gather_indices(&self) -> Vec<usize> {
        let (y0, x0, ch, cw) = self.crop;
        let (h, w) = (self.src_h, self.src_w);
        let mut idx = Vec::with_capacity(h * w);
        for oy in 0..h {
            let iy = y0 + (((oy as f64 + 0.5) * ch as f64 / h as f64) as usize).min(ch - 1);
            for ox in 0..w {
                let oxx = if self.flip { w - 1 - ox } else { ox };
                let ix = x0 + (((oxx as f64 + 0.5) * cw as f64 / w as f64) as usize).min(cw - 1);
                idx.push(iy * w + ix);
            }
        }
        idx
    }
}

fn clamp01_scalar(v: f64) -> f64 {
    // Mirrors the graph construction 1 - relu(1 - relu(v)) exactly.
    1.0 - (1.0 - v.max(0.0)).max(0.0)
}

/// Differentiable clamp to [0,1] built from two ReLU hinges.
pub fn clamp01_graph(tape: &mut Tape, x: TensorRef) -> TensorRef {
    let r = tape.relu(x);
    let n = tape.neg(r);
    let a = tape.add_scalar(n, 1.0);
    let r2 = tape.relu(a);
    let n2 = tape.neg(r2);
    tape.add_scalar(n2, 1.0)
}

/// Applies one plan to every frame of a clip (data-space path).
pub fn apply_plan(clip: &VideoClip, plan: &AugmentPlan) -> VideoClip {
    assert_eq!((plan.src_h, plan.src_w), (clip.h(), clip.w()));
    let idx = plan.gather_indices();
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    let src = clip.frames();
    let mut out = ndarray::Array4::<f64>::zeros((t, h, w, 3));
    for f in 0..t {
        for oy in 0..h {
            for ox in 0..w {
                let s = idx[oy * w + ox];
                let (sy, sx) = (s / w, s % w);
                let px = [src[[f, sy, sx, 0]], src[[f, sy, sx, 1]], src[[f, sy, sx, 2]]];
                for c in 0..3 {
                    let v = plan.mat[c][0] * px[0]
                        + plan.mat[c][1] * px[1]
                        + plan.mat[c][2] * px[2]
                        + plan.off[c];
                    let v = if let Some((cy, cx, chh, cww)) = plan.cutout {
                        if oy >= cy && oy < cy + chh && ox >= cx && ox < cx + cww {
                            0.0
                        } else {
                            v
                        }
                    } else {
                        v
                    };
                    out[[f, oy, ox, c]] = clamp01_scalar(v);
                }
            }
        }
    }
    VideoClip::new(out, clip.fps).expect("clamped output is in range")
}

/// Draws a fresh plan and applies it to the whole clip.
pub fn augment(clip: &VideoClip, mode: AugmentMode, rng: &mut impl Rng) -> VideoClip {
    let plan = AugmentPlan::draw(mode, clip.h(), clip.w(), rng);
    apply_plan(clip, &plan)
}

/// Graph-space twin of [`apply_plan`] for a batch of frames x: (N, 3, H, W)
/// with one plan per sample. Gradients flow through gather, color transform,
/// cut-out, and the clamp hinges.
pub fn apply_plans_graph(tape: &mut Tape, x: TensorRef, plans: &[AugmentPlan]) -> TensorRef {
    let sh = tape.shape(x).to_vec();
    assert_eq!(sh.len(), 4);
    assert_eq!(sh[0], plans.len(), "one plan per sample");
    let (h, w) = (sh[2], sh[3]);
    assert!(plans.iter().all(|p| p.src_h == h && p.src_w == w));
    let idx: Vec<usize> = plans.iter().flat_map(|p| p.gather_indices()).collect();
    let mut out = tape.gather_hw(x, idx, h, w);
    let aff = ColorAffine {
        mat: plans.iter().map(|p| p.mat).collect(),
        off: plans.iter().map(|p| p.off).collect(),
    };
    out = tape.color_affine(out, aff);
    if plans.iter().any(|p| p.cutout.is_some()) {
        let mut mask = Arr::from_elem(IxDyn(&[plans.len(), 3, h, w]), 1.0);
        for (n, p) in plans.iter().enumerate() {
            if let Some((cy, cx, chh, cww)) = p.cutout {
                for c in 0..3 {
                    for oy in cy..cy + chh {
                        for ox in cx..cx + cww {
                            mask[[n, c, oy, ox]] = 0.0;
                        }
                    }
                }
            }
        }
        let m = tape.leaf(mask);
        out = tape.mul(out, m);
    }
    clamp01_graph(tape, out)
}

// ---------------------------------------------------------------------------
// Backbone and heads
// ---------------------------------------------------------------------------

/// Architecture and contrastive-state hyperparameters of the privacy branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Conv widths; each level is conv3x3 + ReLU + 2x pool.
    pub widths: Vec<usize>,
    /// Projection head output dimension.
    pub proj_dim: usize,
    /// Momentum-encoder EMA coefficient.
    pub momentum: f64,
    /// Momentum-contrast queue capacity.
    pub queue: usize,
    /// Anchor only the first view in the contrastive loss instead of both.
    pub single_view: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            proj_dim: 128,
            momentum: 0.999,
            queue: 4096,
            single_view: false,
        }
    }
}

/// 2D feature extractor with a two-layer projection head (L2-normalized
/// output) and a 4-way rotation head.
#[derive(Debug, Clone)]
pub struct SslBranch {
    cfg: SslConfig,
    pub params: ParamSet,
}

impl SslBranch {
    pub fn new(cfg: SslConfig, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config(
                "ssl branch needs at least one conv level of nonzero width".into(),
            ));
        }
        if cfg.proj_dim == 0 {
            return Err(Error::Config("projection dimension must be nonzero".into()));
        }
        let mut rng = rng_for(seed, "ssl-branch-init");
        let mut params = ParamSet::new("ssl-privacy");
        let mut c_in = 3usize;
        for (i, &w) in cfg.widths.iter().enumerate() {
            params.add(
                format!("conv{i}.w"),
                init_uniform(&[w, c_in, 3, 3], c_in * 9, &mut rng),
            );
            params.add(format!("conv{i}.b"), Arr::zeros(IxDyn(&[w])));
            c_in = w;
        }
        let d = c_in;
        params.add("proj1.w", init_uniform(&[d, d], d, &mut rng));
        params.add("proj1.b", Arr::zeros(IxDyn(&[d])));
        params.add("proj2.w", init_uniform(&[cfg.proj_dim, d], d, &mut rng));
        params.add("proj2.b", Arr::zeros(IxDyn(&[cfg.proj_dim])));
        params.add("rot.w", init_uniform(&[4, d], d, &mut rng));
        params.add("rot.b", Arr::zeros(IxDyn(&[4])));
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &SslConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        *self.cfg.widths.last().unwrap()
    }

    pub fn stride(&self) -> usize {
        1 << self.cfg.widths.len()
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "ssl backbone with {} levels needs height and width divisible by {s}, got {h}x{w}",
                self.cfg.widths.len()
            )));
        }
        Ok(())
    }

    /// Backbone features for frames x: (N, 3, H, W) -> (N, d).
    pub fn features(&self, tape: &mut Tape, slot: usize, x: TensorRef) -> TensorRef {
        let mut idx = 0usize;
        // Per-sample, per-channel centering at the entrance. Color jitter
        // shifts each view by a spatially constant per-channel offset; in a
        // net without normalization layers that offset would dominate every
        // pooled feature and push all projections onto one ray (the
        // zero-gradient collapse point of the contrastive loss). Removing
        // each sample's own channel means cancels constant offsets exactly,
        // so view matching has to rely on spatial structure instead.
        let sh = tape.shape(x).to_vec();
        let (n, c, hh, ww) = (sh[0], sh[1], sh[2], sh[3]);
        let m = tape.global_avg_pool(x);
        let m1 = tape.reshape(m, &[n * c, 1]);
        let ones = tape.leaf(Arr::ones(IxDyn(&[1, hh * ww])));
        let mfull = tape.matmul(m1, ones);
        let mfull = tape.reshape(mfull, &[n, c, hh, ww]);
        let mut h = tape.sub(x, mfull);
        for _ in 0..self.cfg.widths.len() {
            let w = tape.param(slot, &self.params, idx);
            let b = tape.param(slot, &self.params, idx + 1);
            idx += 2;
            h = tape.conv2d(h, w, b, 1, 1);
            h = tape.relu(h);
            h = tape.avg_pool2d(h, 2);
        }
        tape.global_avg_pool(h)
    }

    /// Projection head on backbone features: (N, d) -> unit rows (N, proj).
    ///
    /// The features are standardized across the batch first. This is the
    /// anti-collapse mechanism batch normalization provides in larger nets:
    /// mapping every sample to one common vector is self-defeating, because
    /// the division by the batch standard deviation re-amplifies whatever
    /// differences remain.
    pub fn project(&self, tape: &mut Tape, slot: usize, feats: TensorRef) -> TensorRef {
        let feats = batch_standardize(tape, feats);
        let base = 2 * self.cfg.widths.len();
        let w1 = tape.param(slot, &self.params, base);
        let b1 = tape.param(slot, &self.params, base + 1);
        let w2 = tape.param(slot, &self.params, base + 2);
        let b2 = tape.param(slot, &self.params, base + 3);
        let h = tape.matmul_nt(feats, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul_nt(h, w2);
        let h = tape.add_bias(h, b2);
        tape.l2_normalize_rows(h)
    }

    /// Rotation head on backbone features: (N, d) -> (N, 4) logits.
    pub fn rotation_logits(&self, tape: &mut Tape, slot: usize, feats: TensorRef) -> TensorRef {
        let base = 2 * self.cfg.widths.len() + 4;
        let w = tape.param(slot, &self.params, base);
        let b = tape.param(slot, &self.params, base + 1);
        let h = tape.matmul_nt(feats, w);
        tape.add_bias(h, b)
    }

    /// Convenience: projection of raw frames.
    pub fn project_frames(&self, tape: &mut Tape, slot: usize, x: TensorRef) -> TensorRef {
        let f = self.features(tape, slot, x);
        self.project(tape, slot, f)
    }
}

/// Center and scale every column of f (N, D) to zero mean and unit variance
/// over the batch, composed from primitive tape ops so gradients flow through
/// the batch statistics exactly.
fn batch_standardize(tape: &mut Tape, f: TensorRef) -> TensorRef {
    let sh = tape.shape(f).to_vec();
    let (n, d) = (sh[0], sh[1]);
    debug_assert!(d > 0);
    let avg_row = tape.leaf(Arr::from_elem(IxDyn(&[1, n]), 1.0 / n as f64));
    let ones_col = tape.leaf(Arr::ones(IxDyn(&[n, 1])));
    let mean = tape.matmul(avg_row, f);
    let bmean = tape.matmul(ones_col, mean);
    let centered = tape.sub(f, bmean);
    let sq = tape.mul(centered, centered);
    let var = tape.matmul(avg_row, sq);
    let var = tape.add_scalar(var, 1e-5);
    let lnv = tape.ln(var);
    let half = tape.scale(lnv, -0.5);
    let rstd = tape.exp(half);
    let brstd = tape.matmul(ones_col, rstd);
    tape.mul(centered, brstd)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

fn offdiag_mask(n: usize) -> Arr {
    let mut m = Arr::from_elem(IxDyn(&[n, n]), 1.0);
    for i in 0..n {
        m[[i, i]] = 0.0;
    }
    m
}

/// Symmetrized contrastive loss over two views of N samples. Rows are
/// re-normalized internally, so any positive rescaling of the inputs leaves
/// the loss unchanged. For each anchor the denominator runs over the other
/// 2N-1 projections (both views, self excluded).
pub fn nt_xent_graph(
    tape: &mut Tape,
    z1: TensorRef,
    z2: TensorRef,
    tau: f64,
    symmetric: bool,
) -> TensorRef {
    let n = tape.shape(z1)[0];
    assert!(n >= 2, "contrastive loss needs at least two samples");
    assert!(tau > 0.0);
    let z1 = tape.l2_normalize_rows(z1);
    let z2 = tape.l2_normalize_rows(z2);
    let mask = tape.leaf(offdiag_mask(n));

    let s12 = tape.matmul_nt(z1, z2);
    let s12 = tape.scale(s12, 1.0 / tau);
    let pos = tape.diag(s12);

    let s11 = tape.matmul_nt(z1, z1);
    let s11 = tape.scale(s11, 1.0 / tau);
    let e12 = tape.exp(s12);
    let e11 = tape.exp(s11);
    let e11 = tape.mul(e11, mask);
    let d1a = tape.sum_axis(e12, 1);
    let d1b = tape.sum_axis(e11, 1);
    let denom1 = tape.add(d1a, d1b);
    let ln1 = tape.ln(denom1);
    let l1 = tape.sub(ln1, pos);
    let l1 = tape.mean_all(l1);
    if !symmetric {
        return l1;
    }

    let s21 = tape.permute(s12, &[1, 0]);
    let s22 = tape.matmul_nt(z2, z2);
    let s22 = tape.scale(s22, 1.0 / tau);
    let e21 = tape.exp(s21);
    let e22 = tape.exp(s22);
    let e22 = tape.mul(e22, mask);
    let d2a = tape.sum_axis(e21, 1);
    let d2b = tape.sum_axis(e22, 1);
    let denom2 = tape.add(d2a, d2b);
    let ln2 = tape.ln(denom2);
    let l2 = tape.sub(ln2, pos);
    let l2 = tape.mean_all(l2);

    let s = tape.add(l1, l2);
    tape.scale(s, 0.5)
}

/// Scalar convenience wrapper over [`nt_xent_graph`].
pub fn nt_xent(z: ArrayView2<f64>, zp: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if z.nrows() < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs at least 2 samples, got {}",
            z.nrows()
        )));
    }
    if z.dim() != zp.dim() {
        return Err(Error::Shape(format!(
            "view shapes differ: {:?} vs {:?}",
            z.dim(),
            zp.dim()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(z.to_owned().into_dyn());
    let b = tape.leaf(zp.to_owned().into_dyn());
    let l = nt_xent_graph(&mut tape, a, b, tau, true);
    Ok(tape.scalar(l))
}

/// Momentum encoder parameters plus the FIFO queue of past keys.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub key_params: ParamSet,
    queue: VecDeque<Vec<f64>>,
    momentum: f64,
    capacity: usize,
}

impl MomentumState {
    pub fn new(branch: &SslBranch) -> Self {
        let mut key_params = branch.params.clone();
        key_params.freeze();
        Self {
            key_params,
            queue: VecDeque::new(),
            momentum: branch.cfg.momentum,
            capacity: branch.cfg.queue,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// key <- m * key + (1 - m) * query, element-wise over every tensor.
    pub fn ema_update(&mut self, branch: &SslBranch) {
        let m = self.momentum;
        for (k, q) in self
            .key_params
            .entries_mut()
            .iter_mut()
            .zip(branch.params.entries())
        {
            k.value.zip_mut_with(&q.value, |kv, qv| {
                *kv = m * *kv + (1.0 - m) * *qv;
            });
        }
    }

    pub fn push_keys(&mut self, keys: ArrayView2<f64>) {
        for row in keys.rows() {
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(row.to_vec());
        }
    }

    fn queue_matrix(&self, dim: usize) -> Option<Arr> {
        if self.queue.is_empty() {
            return None;
        }
        let k = self.queue.len();
        let mut flat = Vec::with_capacity(k * dim);
        for row in &self.queue {
            assert_eq!(row.len(), dim, "queued key dimension mismatch");
            flat.extend_from_slice(row);
        }
        Some(Arr::from_shape_vec(IxDyn(&[k, dim]), flat).unwrap())
    }
}

/// One momentum-contrast step: EMA-updates the key encoder, encodes keys
/// without gradient, and returns the InfoNCE loss of queries against the
/// positive key plus the queue. Fresh keys are enqueued afterwards.
pub fn momentum_contrast_loss(
    tape: &mut Tape,
    branch: &SslBranch,
    slot: usize,
    x_query: TensorRef,
    x_key: &Arr,
    state: &mut MomentumState,
    tau: f64,
) -> TensorRef {
    assert!(tau > 0.0);
    state.ema_update(branch);

    // Keys pass through the momentum encoder on a scratch tape: constants
    // with respect to everything trained here.
    let key_branch = SslBranch {
        cfg: branch.cfg.clone(),
        params: state.key_params.clone(),
    };
    let mut scratch = Tape::new();
    let xk = scratch.leaf(x_key.clone());
    let zk = key_branch.project_frames(&mut scratch, 0, xk);
    let keys = scratch.value(zk).clone();
    let keys2 = keys.view().into_dimensionality::<ndarray::Ix2>().unwrap();

    let zq = branch.project_frames(tape, slot, x_query);
    let kp = tape.leaf(keys.clone());
    let prod = tape.mul(zq, kp);
    let pos = tape.sum_axis(prod, 1);
    let n = tape.shape(zq)[0];
    let pos = tape.reshape(pos, &[n, 1]);
    let logits = match state.queue_matrix(branch.cfg.proj_dim) {
        Some(q) => {
            let qref = tape.leaf(q);
            let negs = tape.matmul_nt(zq, qref);
            tape.concat(1, &[pos, negs])
        }
        None => pos,
    };
    let logits = tape.scale(logits, 1.0 / tau);
    let labels = vec![0usize; n];
    let loss = tape.softmax_ce(logits, &labels);

    state.push_keys(keys2);
    loss
}

/// Flat source-index table rotating a (h, w) grid by `r` quarter turns
/// clockwise.
fn rotation_indices(h: usize, w: usize, r: usize) -> Vec<usize> {
    assert_eq!(h, w, "rotations need square frames");
    let mut idx = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = match r % 4 {
                0 => (oy, ox),
                1 => (h - 1 - ox, oy),
                2 => (h - 1 - oy, w - 1 - ox),
                _ => (ox, w - 1 - oy),
            };
            idx.push(sy * w + sx);
        }
    }
    idx
}

/// Rotation-prediction loss: every frame appears under all four rotations
/// and the branch classifies which one it got. Frames must be square.
pub fn rotnet_loss(
    tape: &mut Tape,
    branch: &SslBranch,
    slot: usize,
    x: TensorRef,
) -> Result<TensorRef> {
    let sh = tape.shape(x).to_vec();
    if sh[2] != sh[3] {
        return Err(Error::Shape(format!(
            "rotation prediction needs square frames, got {}x{}",
            sh[2], sh[3]
        )));
    }
    let n = sh[0];
    let (h, w) = (sh[2], sh[3]);
    let mut views = Vec::with_capacity(4);
    for r in 0..4 {
        let base = rotation_indices(h, w, r);
        let mut idx = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            idx.extend_from_slice(&base);
        }
        views.push(tape.gather_hw(x, idx, h, w));
    }
    let cat = tape.concat(0, &views);
    let feats = branch.features(tape, slot, cat);
    let logits = branch.rotation_logits(tape, slot, feats);
    let mut labels = Vec::with_capacity(4 * n);
    for r in 0..4 {
        labels.extend(std::iter::repeat(r).take(n));
    }
    Ok(tape.softmax_ce(logits, &labels))
}

/// Full SSL loss over two frame views v1, v2: (B, 3, H, W) already on the
/// tape (typically anonymizer outputs). Each view gets an independent
/// augmentation draw; gradients reach both the branch and the views.
#[allow(clippy::too_many_arguments)]
pub fn ssl_pair_loss(
    tape: &mut Tape,
    branch: &SslBranch,
    slot: usize,
    v1: TensorRef,
    v2: TensorRef,
    objective: SslObjective,
    tau: f64,
    rng: &mut impl Rng,
    moco: Option<&mut MomentumState>,
) -> Result<TensorRef> {
    let sh = tape.shape(v1).to_vec();
    let b = sh[0];
    if b < 2 && matches!(objective, SslObjective::NtXent | SslObjective::NtXentClip) {
        return Err(Error::Config(format!(
            "contrastive objectives need a batch of at least 2, got {b}"
        )));
    }
    branch.check_spatial(sh[2], sh[3])?;
    let plans1: Vec<AugmentPlan> = (0..b)
        .map(|_| AugmentPlan::draw(AugmentMode::Ssl, sh[2], sh[3], rng))
        .collect();
    let plans2: Vec<AugmentPlan> = (0..b)
        .map(|_| AugmentPlan::draw(AugmentMode::Ssl, sh[2], sh[3], rng))
        .collect();
    let a1 = apply_plans_graph(tape, v1, &plans1);
    let a2 = apply_plans_graph(tape, v2, &plans2);
    match objective {
        SslObjective::NtXent | SslObjective::NtXentClip => {
            let z1 = branch.project_frames(tape, slot, a1);
            let z2 = branch.project_frames(tape, slot, a2);
            Ok(nt_xent_graph(tape, z1, z2, tau, !branch.cfg.single_view))
        }
        SslObjective::MomentumContrast => {
            let state = moco.ok_or_else(|| {
                Error::Config("momentum contrast needs its encoder/queue state".into())
            })?;
            let keys = tape.value(a2).clone();
            Ok(momentum_contrast_loss(tape, branch, slot, a1, &keys, state, tau))
        }
        SslObjective::RotNet => {
            let cat = tape.concat(0, &[a1, a2]);
            rotnet_loss(tape, branch, slot, cat)
        }
    }
}

/// Clip-level contrastive loss: c1, c2 are (B, T, 3, H, W) clip pairs from
/// the same videos; per-frame features are averaged over time before
/// projection.
pub fn ssl_clip_pair_loss(
    tape: &mut Tape,
    branch: &SslBranch,
    slot: usize,
    c1: TensorRef,
    c2: TensorRef,
    tau: f64,
) -> Result<TensorRef> {
    let sh = tape.shape(c1).to_vec();
    assert_eq!(sh.len(), 5);
    let (b, t) = (sh[0], sh[1]);
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive objectives need a batch of at least 2, got {b}"
        )));
    }
    branch.check_spatial(sh[3], sh[4])?;
    let d = branch.feature_dim();
    // (B, T, d) -> (B, d) temporal mean, via a fixed averaging matrix.
    let mut avg = Array2::<f64>::zeros((d, t * d));
    for k in 0..t {
        for j in 0..d {
            avg[[j, k * d + j]] = 1.0 / t as f64;
        }
    }
    let avg = tape.leaf(avg.into_dyn());
    let mut zs = Vec::new();
    for c in [c1, c2] {
        let frames = tape.reshape(c, &[b * t, sh[2], sh[3], sh[4]]);
        let f = branch.features(tape, slot, frames);
        let f = tape.reshape(f, &[b, t * d]);
        let f = tape.matmul_nt(f, avg);
        zs.push(branch.project(tape, slot, f));
    }
    Ok(nt_xent_graph(tape, zs[0], zs[1], tau, !branch.cfg.single_view))
}

/// Data-space SSL loss over a batch of clips: samples a frame pair per clip,
/// stacks the two views, and evaluates the chosen objective on a scratch
/// graph. Returns the scalar loss.
pub fn ssl_loss(
    branch: &SslBranch,
    clips: &[VideoClip],
    strategy: SamplerStrategy,
    objective: SslObjective,
    tau: f64,
    rng: &mut impl Rng,
    moco: Option<&mut MomentumState>,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("ssl loss needs a non-empty batch".into()));
    }
    let (h, w) = (clips[0].h(), clips[0].w());
    let mut v1 = Vec::new();
    let mut v2 = Vec::new();
    for c in clips {
        let (i, j) = sample_frame_pair(c.t(), strategy, rng)?;
        let t = c.to_tchw();
        v1.push(t.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned().into_dyn());
        v2.push(t.slice(ndarray::s![j..j + 1, .., .., ..]).to_owned().into_dyn());
    }
    let stack = |v: &[Arr]| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views)
            .unwrap()
            .as_standard_layout()
            .to_owned()
    };
    let x1 = stack(&v1);
    let x2 = stack(&v2);
    assert_eq!(&x1.shape()[2..], &[h, w]);
    let mut tape = Tape::new();
    let r1 = tape.leaf(x1);
    let r2 = tape.leaf(x2);
    let l = ssl_pair_loss(&mut tape, branch, 0, r1, r2, objective, tau, rng, moco)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, rng_for, Adam};
    use ndarray::{Array2, Array4};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "unit-rows");
        let mut z = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        for mut row in z.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        z
    }

    fn random_frames(n: usize, side: usize, seed: u64) -> Arr {
        let mut rng = rng_for(seed, "ssl-frames");
        Array4::from_shape_fn((n, 3, side, side), |_| rng.gen_range(0.05..0.95)).into_dyn()
    }

    fn toy_branch(seed: u64) -> SslBranch {
        SslBranch::new(
            SslConfig {
                widths: vec![4, 8],
                proj_dim: 16,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    // ------------------------------------------------------------------ sampler

    #[test]
    fn min_gap_pairs_always_exceed_gap() {
        let mut rng = rng_for(3, "sampler");
        for _ in 0..500 {
            let (i, j) = sample_frame_pair(128, SamplerStrategy::MinGap(64), &mut rng).unwrap();
            assert!(i.abs_diff(j) > 64, "({i},{j})");
        }
    }

    #[test]
    fn max_gap_pairs_stay_below_gap() {
        let mut rng = rng_for(4, "sampler");
        for _ in 0..500 {
            let (i, j) = sample_frame_pair(16, SamplerStrategy::MaxGap(8), &mut rng).unwrap();
            assert!(i != j && i.abs_diff(j) < 8, "({i},{j})");
        }
    }

    #[test]
    fn two_frame_clip_yields_the_only_pair() {
        let mut rng = rng_for(5, "sampler");
        for _ in 0..20 {
            let (i, j) = sample_frame_pair(2, SamplerStrategy::Unconstrained, &mut rng).unwrap();
            assert!(matches!((i, j), (0, 1) | (1, 0)));
        }
    }

    #[test]
    fn infeasible_constraints_are_rejected() {
        let mut rng = rng_for(6, "sampler");
        assert!(sample_frame_pair(8, SamplerStrategy::MinGap(8), &mut rng).is_err());
        assert!(sample_frame_pair(5, SamplerStrategy::MaxGap(1), &mut rng).is_err());
        assert!(sample_frame_pair(1, SamplerStrategy::Unconstrained, &mut rng).is_err());
        assert!(sample_frame_pair(4, SamplerStrategy::MinGap(0), &mut rng).is_err());
    }

    #[test]
    fn unconstrained_covers_all_distinct_pairs() {
        let mut rng = rng_for(7, "sampler");
        let mut seen = std::collections::HashSet::new();
        for _ in 0..2000 {
            let p = sample_frame_pair(4, SamplerStrategy::Unconstrained, &mut rng).unwrap();
            assert_ne!(p.0, p.1);
            seen.insert(p);
        }
        assert_eq!(seen.len(), 12, "all ordered distinct pairs of 4 frames");
    }

    // ------------------------------------------------------------- augmentation

    fn random_clip(t: usize, side: usize, seed: u64) -> VideoClip {
        let mut rng = rng_for(seed, "aug-clip");
        let f = Array4::from_shape_fn((t, side, side, 3), |_| rng.gen_range(0.0..1.0));
        VideoClip::new(f, 8.0).unwrap()
    }

    #[test]
    fn identical_frames_stay_identical_under_shared_plan() {
        let mut rng = rng_for(1, "aug");
        let one = random_clip(1, 12, 9);
        let mut frames = Array4::zeros((4, 12, 12, 3));
        for t in 0..4 {
            frames
                .slice_mut(ndarray::s![t..t + 1, .., .., ..])
                .assign(&one.frames().view());
        }
        let clip = VideoClip::new(frames, 8.0).unwrap();
        let out = augment(&clip, AugmentMode::Ssl, &mut rng);
        for t in 1..4 {
            assert_eq!(
                out.frame(0).to_owned(),
                out.frame(t).to_owned(),
                "frame {t} diverged"
            );
        }
    }

    #[test]
    fn same_seed_gives_identical_augmentation() {
        let clip = random_clip(3, 12, 10);
        let a = augment(&clip, AugmentMode::Ssl, &mut rng_for(42, "aug-det"));
        let b = augment(&clip, AugmentMode::Ssl, &mut rng_for(42, "aug-det"));
        assert_eq!(a.frames(), b.frames());
    }

    #[test]
    fn color_drop_fires_and_produces_gray_frames() {
        let clip = random_clip(1, 8, 11);
        let mut dropped = 0;
        for seed in 0..1000u64 {
            let mut rng = rng_for(seed, "aug-drop");
            let plan = AugmentPlan::draw(AugmentMode::Ssl, 8, 8, &mut rng);
            if plan.is_color_drop() {
                dropped += 1;
                let out = apply_plan(&clip, &plan);
                for px in out.frames().rows() {
                    assert!((px[0] - px[1]).abs() < 1e-12 && (px[1] - px[2]).abs() < 1e-12);
                }
            }
        }
        assert!(dropped > 0, "color drop never fired in 1000 draws");
        // roughly the configured probability
        assert!((50..=400).contains(&dropped), "{dropped} / 1000");
    }

    #[test]
    fn augmented_output_stays_in_unit_range() {
        for seed in 0..50u64 {
            let clip = random_clip(2, 10, seed);
            let mut rng = rng_for(seed, "aug-range");
            let out = augment(&clip, AugmentMode::Ssl, &mut rng);
            assert!(out.frames().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn graph_augmentation_matches_data_path_exactly() {
        let clip = random_clip(3, 12, 13);
        for seed in 0..20u64 {
            let mut rng = rng_for(seed, "aug-eq");
            let plan = AugmentPlan::draw(AugmentMode::Ssl, 12, 12, &mut rng);
            let data = apply_plan(&clip, &plan);

            let mut tape = Tape::new();
            let x = tape.leaf(clip.to_tchw());
            let plans = vec![plan.clone(); clip.t()];
            let y = apply_plans_graph(&mut tape, x, &plans);
            let graph = VideoClip::from_tchw(tape.value(y), clip.fps).unwrap();

            let max_diff = data
                .frames()
                .iter()
                .zip(graph.frames().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "paths diverge by {max_diff}");
        }
    }

    #[test]
    fn supervised_mode_skips_strong_components() {
        for seed in 0..200u64 {
            let mut rng = rng_for(seed, "aug-sup");
            let plan = AugmentPlan::draw(AugmentMode::Supervised, 16, 16, &mut rng);
            assert!(plan.cutout.is_none());
            // identity or grayscale color transform only
            if !plan.is_color_drop() {
                assert_eq!(plan.mat, IDENT3);
                assert_eq!(plan.off, [0.0; 3]);
            }
            let (_, _, ch, cw) = plan.crop;
            assert!(ch * cw >= (0.65 * 256.0) as usize, "crop too aggressive");
        }
    }

    // ------------------------------------------------------------------ nt_xent

    #[test]
    fn all_identical_projections_give_ln_3() {
        let z = Array2::from_elem((2, 4), 0.5);
        let l = nt_xent(z.view(), z.view(), 0.1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn aligned_positives_with_orthogonal_negatives_vanish() {
        // Z_i . Z'_i = 1, every cross pair orthogonal, tau = 0.1.
        let z = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let l = nt_xent(z.view(), z.view(), 0.1).unwrap();
        let expect = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
        assert!(l < 1e-4);
    }

    #[test]
    fn positive_rescaling_leaves_loss_unchanged() {
        let z = unit_rows(5, 8, 21);
        let zp = unit_rows(5, 8, 22);
        let base = nt_xent(z.view(), zp.view(), 0.3).unwrap();
        let scaled = nt_xent((&z * 3.7).view(), (&zp * 0.2).view(), 0.3).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn nt_xent_matches_scalar_oracle() {
        // Independent evaluation: softmax-style loop with explicit cosine h.
        let n = 4;
        let z = unit_rows(n, 6, 31);
        let zp = unit_rows(n, 6, 32);
        let tau = 0.25;
        let h = |u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>| {
            let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (nu * nv * tau)).exp()
        };
        let mut total = 0.0;
        for (a, b) in [(z.view(), zp.view()), (zp.view(), z.view())] {
            for i in 0..n {
                let mut denom = 0.0;
                for k in 0..n {
                    if k != i {
                        denom += h(a.row(i), a.row(k));
                    }
                    denom += h(a.row(i), b.row(k));
                }
                total += -(h(a.row(i), b.row(i)) / denom).ln();
            }
        }
        let oracle = total / (2 * n) as f64;
        let got = nt_xent(z.view(), zp.view(), tau).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn nt_xent_rejects_degenerate_batches() {
        let z = unit_rows(1, 4, 41);
        assert!(nt_xent(z.view(), z.view(), 0.1).is_err());
        let z2 = unit_rows(2, 4, 41);
        assert!(nt_xent(z2.view(), z2.view(), 0.0).is_err());
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let mut set = ParamSet::new("z");
        set.add("z1", unit_rows(3, 5, 51).into_dyn());
        set.add("z2", unit_rows(3, 5, 52).into_dyn());
        let loss = |s: &ParamSet| {
            let mut tape = Tape::new();
            let a = tape.param(0, s, 0);
            let b = tape.param(0, s, 1);
            let l = nt_xent_graph(&mut tape, a, b, 0.2, true);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let a = tape.param(0, &set, 0);
        let b = tape.param(0, &set, 1);
        let l = nt_xent_graph(&mut tape, a, b, 0.2, true);
        tape.backward(l, &mut [&mut set]);
        let analytic = set.flat_grads();
        let rel = finite_diff_check(&mut set, &analytic, 1e-6, loss);
        assert!(rel < 1e-4, "max relative error {rel}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn nt_xent_nonnegative_and_permutation_invariant(seed in 0u64..1000) {
            let mut rng = rng_for(seed, "ntxent-prop");
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(2..6);
            let z = unit_rows(n, d, seed);
            let zp = unit_rows(n, d, seed ^ 0xffff);
            let l = nt_xent(z.view(), zp.view(), 0.5).unwrap();
            prop_assert!(l >= 0.0);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let zperm = Array2::from_shape_fn((n, d), |(i, j)| z[[perm[i], j]]);
            let zpperm = Array2::from_shape_fn((n, d), |(i, j)| zp[[perm[i], j]]);
            let lp = nt_xent(zperm.view(), zpperm.view(), 0.5).unwrap();
            prop_assert!((l - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn projections_are_unit_norm() {
        let branch = toy_branch(61);
        let mut tape = Tape::new();
        let x = tape.leaf(random_frames(5, 8, 62));
        let z = branch.project_frames(&mut tape, 0, x);
        let zv = tape.value(z);
        for row in zv.view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    // --------------------------------------------------------------------- moco

    #[test]
    fn positive_only_queue_gives_zero_loss() {
        let branch = toy_branch(71);
        let mut state = MomentumState::new(&branch);
        let mut tape = Tape::new();
        let xq = tape.leaf(random_frames(3, 8, 72));
        let xk = random_frames(3, 8, 73);
        let l = momentum_contrast_loss(&mut tape, &branch, 0, xq, &xk, &mut state, 0.1);
        assert!(tape.scalar(l).abs() < 1e-12);
        assert_eq!(state.queue_len(), 3);
    }

    #[test]
    fn unit_momentum_freezes_key_encoder() {
        let branch = toy_branch(74);
        let mut cfg = branch.cfg.clone();
        cfg.momentum = 1.0;
        let branch2 = SslBranch {
            cfg,
            params: branch.params.clone(),
        };
        let mut state = MomentumState::new(&branch2);
        let before = state.key_params.checksum();
        // change the online branch, then EMA with m = 1
        let mut moved = branch2.clone();
        for e in moved.params.entries_mut() {
            e.value += 0.25;
        }
        state.ema_update(&moved);
        assert_eq!(state.key_params.checksum(), before);
    }

    #[test]
    fn moco_matches_scalar_infonce_oracle() {
        let branch = toy_branch(75);
        let mut state = MomentumState::new(&branch);
        // preload the queue with known unit keys
        let q = unit_rows(3, branch.cfg.proj_dim, 76);
        state.push_keys(q.view());
        let mut tape = Tape::new();
        let xq = tape.leaf(random_frames(2, 8, 77));
        let xk = random_frames(2, 8, 78);
        let tau = 0.2;
        let l = momentum_contrast_loss(&mut tape, &branch, 0, xq, &xk, &mut state, tau);
        let got = tape.scalar(l);

        // oracle from the actual projections
        let mut scratch = Tape::new();
        let xq2 = scratch.leaf(random_frames(2, 8, 77));
        let zq_ref = branch.project_frames(&mut scratch, 0, xq2);
        let zq = scratch.value(zq_ref).clone();
        let zq = zq.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let key_branch = SslBranch {
            cfg: branch.cfg.clone(),
            params: state.key_params.clone(),
        };
        let mut scratch2 = Tape::new();
        let xk2 = scratch2.leaf(xk.clone());
        let zk_ref = key_branch.project_frames(&mut scratch2, 0, xk2);
        let zk = scratch2.value(zk_ref).clone();
        let zk = zk.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();

        let mut oracle = 0.0;
        for i in 0..2 {
            let pos: f64 = zq.row(i).iter().zip(zk.row(i).iter()).map(|(a, b)| a * b).sum();
            let mut denom = (pos / tau).exp();
            for krow in q.rows() {
                let s: f64 = zq.row(i).iter().zip(krow.iter()).map(|(a, b)| a * b).sum();
                denom += (s / tau).exp();
            }
            oracle += -((pos / tau).exp() / denom).ln();
        }
        oracle /= 2.0;
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn queue_is_fifo_with_fixed_capacity() {
        let branch = SslBranch::new(
            SslConfig {
                widths: vec![4],
                proj_dim: 4,
                queue: 5,
                ..Default::default()
            },
            79,
        )
        .unwrap();
        let mut state = MomentumState::new(&branch);
        for i in 0..4 {
            state.push_keys(unit_rows(2, 4, 100 + i).view());
        }
        assert_eq!(state.queue_len(), 5);
    }

    // ------------------------------------------------------------------- rotnet

    #[test]
    fn rotations_form_a_group() {
        let (h, w) = (6, 6);
        let id = rotation_indices(h, w, 0);
        assert_eq!(id, (0..h * w).collect::<Vec<_>>());
        // applying the 180-degree map twice is the identity
        let r2 = rotation_indices(h, w, 2);
        let twice: Vec<usize> = (0..h * w).map(|p| r2[r2[p]]).collect();
        assert_eq!(twice, id);
        // 90 applied four times is the identity
        let r1 = rotation_indices(h, w, 1);
        let mut cur: Vec<usize> = id.clone();
        for _ in 0..4 {
            cur = cur.iter().map(|&p| r1[p]).collect();
        }
        assert_eq!(cur, id);
    }

    #[test]
    fn zeroed_rotation_head_scores_ln_4() {
        let mut branch = toy_branch(81);
        let base = 2 * branch.cfg.widths.len() + 4;
        for k in [base, base + 1] {
            branch.params.entries_mut()[k].value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(random_frames(3, 8, 82));
        let l = rotnet_loss(&mut tape, &branch, 0, x).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_square_frames_are_rejected_for_rotation() {
        let branch = toy_branch(83);
        let mut tape = Tape::new();
        let mut rng = rng_for(84, "rot-rect");
        let x = tape.leaf(
            Array4::from_shape_fn((2, 3, 8, 12), |_| rng.gen_range(0.0..1.0)).into_dyn(),
        );
        assert!(rotnet_loss(&mut tape, &branch, 0, x).is_err());
    }

    #[test]
    fn rotation_prediction_is_learnable() {
        let mut branch = toy_branch(85);
        let x = random_frames(4, 8, 86);
        let mut opt = Adam::new(&branch.params, 1e-2);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..150 {
            let mut tape = Tape::new();
            let xr = tape.leaf(x.clone());
            let l = rotnet_loss(&mut tape, &branch, 0, xr).unwrap();
            last = tape.scalar(l);
            first.get_or_insert(last);
            tape.backward(l, &mut [&mut branch.params]);
            opt.step(&mut branch.params);
        }
        let first = first.unwrap();
        assert!((first - 4f64.ln()).abs() < 0.3, "fresh head starts near ln4, got {first}");
        assert!(last < 0.5 * first, "no learning progress: {first} -> {last}");
    }

    // ----------------------------------------------------------------- ssl_loss

    #[test]
    fn identical_clips_are_harder_negatives_than_distinct_ones() {
        // A duplicated clip turns each anchor's negatives into exact
        // lookalikes of its positive: every candidate scores the same, the
        // softmax is indifferent, and the loss pins at ln(2N-1). Distinct,
        // well-separated clips must score strictly below that.
        let loss_of = |rows1: [[f64; 2]; 2], rows2: [[f64; 2]; 2]| {
            let mut tape = Tape::new();
            let z1 = tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), rows1.concat()).unwrap());
            let z2 = tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), rows2.concat()).unwrap());
            let l = nt_xent_graph(&mut tape, z1, z2, 0.1, true);
            tape.scalar(l)
        };
        let same = [[1.0, 0.0], [1.0, 0.0]];
        let distinct = [[1.0, 0.0], [0.0, 1.0]];
        let hard = loss_of(same, same);
        let easy = loss_of(distinct, distinct);
        assert!(
            (hard - 3.0f64.ln()).abs() < 1e-9,
            "all-identical candidates should pin the loss at ln 3, got {hard}"
        );
        assert!(
            easy < hard,
            "identical clips should be harder: {hard} vs {easy}"
        );
    }

    #[test]
    fn input_ascent_increases_contrastive_loss() {
        let branch = toy_branch(95);
        let mut x1 = random_frames(3, 8, 97);
        let mut x2 = random_frames(3, 8, 98);
        let plans1: Vec<AugmentPlan> = (0..3).map(|_| AugmentPlan::identity(8, 8)).collect();
        let mut curve = Vec::new();
        let step = 0.01;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let r1 = tape.input(x1.clone());
            let r2 = tape.input(x2.clone());
            let a1 = apply_plans_graph(&mut tape, r1, &plans1);
            let a2 = apply_plans_graph(&mut tape, r2, &plans1);
            let z1 = branch.project_frames(&mut tape, 0, a1);
            let z2 = branch.project_frames(&mut tape, 0, a2);
            let l = nt_xent_graph(&mut tape, z1, z2, 0.1, true);
            curve.push(tape.scalar(l));
            let mut frozen = branch.params.clone();
            frozen.freeze();
            tape.backward(l, &mut [&mut frozen]);
            let g1 = tape.input_grad(r1).unwrap().clone();
            let g2 = tape.input_grad(r2).unwrap().clone();
            x1 = &x1 + &(g1 * step);
            x2 = &x2 + &(g2 * step);
        }
        let rises = curve.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(
            rises >= 35,
            "ascent mostly increases the loss: {rises}/49 rises, curve {curve:?}"
        );
        assert!(
            *curve.last().unwrap() > 10.0 * curve.first().unwrap(),
            "ascent should climb decisively: {} -> {}",
            curve.first().unwrap(),
            curve.last().unwrap()
        );
    }

    #[test]
    fn paired_loss_runs_for_every_objective() {
        let branch = toy_branch(99);
        let clips = vec![random_clip(4, 8, 100), random_clip(4, 8, 101)];
        for objective in [
            SslObjective::NtXent,
            SslObjective::RotNet,
            SslObjective::MomentumContrast,
        ] {
            let mut moco = MomentumState::new(&branch);
            let l = ssl_loss(
                &branch,
                &clips,
                SamplerStrategy::Unconstrained,
                objective,
                0.1,
                &mut rng_for(102, "ssl-all"),
                Some(&mut moco),
            )
            .unwrap();
            assert!(l.is_finite(), "{objective:?} produced {l}");
        }
    }

    #[test]
    fn clip_level_variant_contrasts_clip_features() {
        let branch = toy_branch(103);
        let mut rng = rng_for(104, "ssl-clip");
        let c1 = Array4::from_shape_fn((2 * 3, 3, 8, 8), |_| rng.gen_range(0.0..1.0))
            .into_dyn()
            .into_shape_with_order(IxDyn(&[2, 3, 3, 8, 8]))
            .unwrap();
        let c2 = Array4::from_shape_fn((2 * 3, 3, 8, 8), |_| rng.gen_range(0.0..1.0))
            .into_dyn()
            .into_shape_with_order(IxDyn(&[2, 3, 3, 8, 8]))
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(c1);
        let b = tape.leaf(c2);
        let l = ssl_clip_pair_loss(&mut tape, &branch, 0, a, b, 0.1).unwrap();
        assert!(tape.scalar(l).is_finite());
        assert!(tape.scalar(l) >= 0.0);
    }
}
