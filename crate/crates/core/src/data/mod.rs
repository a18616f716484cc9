//! Clips, samples, label spaces, dataset manifests, and clip extraction.
//!
//! A manifest is a JSONL file: one header line naming the split and label
//! space, then one line per sample. Sample paths are resolved relative to
//! the manifest's directory. Three source kinds are decodable: `synth:`
//! recipes (procedural, see [`synth`]), `.rvid` raw containers, and
//! directories of numbered PNG frames.
//!
//! Privacy labels are only reachable through [`Sample::privacy_labels`],
//! which counts every read on a per-thread counter so training code can be
//! audited for label leakage.

pub mod rvid;
pub mod synth;

use std::cell::Cell;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayView3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::tensor::{rng_for, Arr, Adam, ParamSet, Tape};
use crate::{Error, Result};

pub const DEFAULT_CLIP_FRAMES: usize = 16;
pub const DEFAULT_CLIP_SKIP: usize = 2;
pub const DEFAULT_CLIP_SIDE: usize = 112;

/// Frames as (T, H, W, C) intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, fps: f64) -> Result<Self> {
        let sh = frames.shape().to_vec();
        if sh[0] < 1 {
            return Err(Error::Video("clip must have at least one frame".into()));
        }
        if sh[3] != 3 {
            return Err(Error::Video(format!("clip must have 3 channels, got {}", sh[3])));
        }
        if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Video("clip intensities must lie in [0,1]".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    /// One frame flattened to a feature vector (H*W*C).
    pub fn frame_features(&self, i: usize) -> Vec<f64> {
        self.frame(i).iter().copied().collect()
    }

    /// (T, C, H, W) layout for frame-batched 2D models.
    pub fn to_tchw(&self) -> Arr {
        self.frames
            .view()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn()
    }

    /// (C, T, H, W) layout for 3D models.
    pub fn to_cthw(&self) -> Arr {
        self.frames
            .view()
            .permuted_axes([3, 0, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn()
    }

    /// Inverse of [`VideoClip::to_tchw`].
    pub fn from_tchw(arr: &Arr, fps: f64) -> Result<Self> {
        let sh = arr.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::Shape(format!("expected rank 4, got {:?}", sh)));
        }
        let frames = arr
            .view()
            .permuted_axes(vec![0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(frames, fps)
    }
}

/// Axis-aligned pixel box (x0, y0, x1, y1), half-open on the right/bottom.
pub type PixelBox = [u32; 4];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ActionLabels {
    Index(usize),
    Multi(Vec<u8>),
}

thread_local! {
    static PRIVACY_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of privacy-label reads on this thread since the last reset.
pub fn privacy_read_count() -> u64 {
    PRIVACY_READS.with(|c| c.get())
}

pub fn reset_privacy_read_count() {
    PRIVACY_READS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub id: String,
    pub path: String,
    pub action: ActionLabels,
    privacy: Option<Vec<u8>>,
    pub boxes: Option<Vec<Vec<PixelBox>>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<String>,
        action: ActionLabels,
        privacy: Option<Vec<u8>>,
        boxes: Option<Vec<Vec<PixelBox>>>,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            action,
            privacy,
            boxes,
        }
    }

    /// Counted access to the privacy labels; see [`privacy_read_count`].
    pub fn privacy_labels(&self) -> Option<&[u8]> {
        PRIVACY_READS.with(|c| c.set(c.get() + 1));
        self.privacy.as_deref()
    }

    pub fn has_privacy_labels(&self) -> bool {
        self.privacy.is_some()
    }

    /// Index of the single set privacy attribute, if exactly one is set.
    pub fn privacy_class(&self) -> Option<usize> {
        let p = self.privacy_labels()?;
        let set: Vec<usize> = p
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        if set.len() == 1 {
            Some(set[0])
        } else {
            None
        }
    }

    pub fn action_index(&self) -> Option<usize> {
        match &self.action {
            ActionLabels::Index(i) => Some(*i),
            ActionLabels::Multi(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelSpace {
    pub action_names: Vec<String>,
    pub privacy_names: Vec<String>,
    pub action_is_multilabel: bool,
}

impl LabelSpace {
    pub fn validate(&self) -> Result<()> {
        for (kind, names) in [("action", &self.action_names), ("privacy", &self.privacy_names)] {
            if kind == "action" && names.is_empty() {
                return Err(Error::LabelSpace("action label space is empty".into()));
            }
            for n in names {
                if n.is_empty() {
                    return Err(Error::LabelSpace(format!("empty {kind} class name")));
                }
            }
            let mut sorted = names.to_vec();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != names.len() {
                return Err(Error::LabelSpace(format!("duplicate {kind} class names")));
            }
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.action_names.len()
    }

    pub fn privacy_count(&self) -> usize {
        self.privacy_names.len()
    }

    /// Stable hash of the class names, used to bind checkpoints to the label
    /// space they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |s: &str| {
            for &b in s.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        };
        for n in &self.action_names {
            eat(n);
        }
        eat("|");
        for n in &self.privacy_names {
            eat(n);
        }
        eat(if self.action_is_multilabel { "m" } else { "s" });
        h
    }

    /// True when no privacy class name is shared with `other`.
    pub fn privacy_disjoint(&self, other: &LabelSpace) -> bool {
        self.privacy_names
            .iter()
            .all(|n| !other.privacy_names.contains(n))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    split: String,
    action_names: Vec<String>,
    privacy_names: Vec<String>,
    action_is_multilabel: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: String,
    pub label_space: LabelSpace,
    pub samples: Vec<Sample>,
    /// Directory sample paths are resolved against; set on load.
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, label_space: LabelSpace, samples: Vec<Sample>) -> Result<Self> {
        let m = Self {
            split: split.into(),
            label_space,
            samples,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        for s in &self.samples {
            match &s.action {
                ActionLabels::Index(i) => {
                    if self.label_space.action_is_multilabel {
                        return Err(Error::Manifest(format!(
                            "sample {}: single action index in a multi-label space",
                            s.id
                        )));
                    }
                    if *i >= self.label_space.action_count() {
                        return Err(Error::Manifest(format!(
                            "sample {}: action index {} out of range for {} classes",
                            s.id,
                            i,
                            self.label_space.action_count()
                        )));
                    }
                }
                ActionLabels::Multi(v) => {
                    if !self.label_space.action_is_multilabel {
                        return Err(Error::Manifest(format!(
                            "sample {}: action vector in a single-label space",
                            s.id
                        )));
                    }
                    if v.len() != self.label_space.action_count() {
                        return Err(Error::Manifest(format!(
                            "sample {}: action vector length {} != {} classes",
                            s.id,
                            v.len(),
                            self.label_space.action_count()
                        )));
                    }
                }
            }
            if let Some(p) = &s.privacy {
                if p.len() != self.label_space.privacy_count() {
                    return Err(Error::Manifest(format!(
                        "sample {}: privacy vector length {} != {} classes",
                        s.id,
                        p.len(),
                        self.label_space.privacy_count()
                    )));
                }
                if p.iter().any(|&v| v > 1) {
                    return Err(Error::Manifest(format!(
                        "sample {}: privacy vector entries must be 0 or 1",
                        s.id
                    )));
                }
            }
            if let Some(frames) = &s.boxes {
                for boxes in frames {
                    for b in boxes {
                        if b[0] >= b[2] || b[1] >= b[3] {
                            return Err(Error::Manifest(format!(
                                "sample {}: degenerate box {:?}",
                                s.id, b
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Absolute path (or recipe string) for a sample's clip source.
    pub fn resolved_path(&self, sample: &Sample) -> String {
        if sample.path.starts_with(synth::SCHEME) || Path::new(&sample.path).is_absolute() {
            sample.path.clone()
        } else {
            self.base_dir.join(&sample.path).to_string_lossy().into_owned()
        }
    }

    pub fn decode(&self, sample: &Sample) -> Result<VideoClip> {
        decode_video(&self.resolved_path(sample))
    }
}

/// Decode any supported clip source: a `synth:` recipe, an `.rvid` file, or
/// a directory of PNG frames.
pub fn decode_video(path: &str) -> Result<VideoClip> {
    if let Some(recipe) = path.strip_prefix(synth::SCHEME) {
        return synth::decode_recipe(recipe);
    }
    let p = Path::new(path);
    if p.is_dir() {
        return rvid::read_png_dir(p);
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("rvid") => rvid::read_rvid(p),
        _ => Err(Error::Video(format!("unsupported clip source: {path}"))),
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let header = ManifestHeader {
        split: manifest.split.clone(),
        action_names: manifest.label_space.action_names.clone(),
        privacy_names: manifest.label_space.privacy_names.clone(),
        action_is_multilabel: manifest.label_space.action_is_multilabel,
    };
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for s in &manifest.samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Manifest("empty manifest file".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Manifest(format!("bad manifest header: {e}")))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("bad record on line {}: {e}", i + 2)))?;
        samples.push(s);
    }
    let mut m = DatasetManifest {
        split: header.split,
        label_space: LabelSpace {
            action_names: header.action_names,
            privacy_names: header.privacy_names,
            action_is_multilabel: header.action_is_multilabel,
        },
        samples,
        base_dir: path.parent().unwrap_or(Path::new("")).to_path_buf(),
    };
    m.validate()?;
    for s in &m.samples {
        if !s.path.starts_with(synth::SCHEME) {
            let resolved = m.resolved_path(s);
            if !Path::new(&resolved).exists() {
                return Err(Error::Manifest(format!(
                    "sample {}: missing clip source {resolved}",
                    s.id
                )));
            }
        }
    }
    let base = m.base_dir.clone();
    m.base_dir = base;
    Ok(m)
}

/// Bilinear resize of one (H, W, C) frame using half-pixel centers.
pub fn resize_bilinear(frame: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = frame[[y0, x0, ch]] * (1.0 - wy) * (1.0 - wx)
                    + frame[[y0, x1, ch]] * (1.0 - wy) * wx
                    + frame[[y1, x0, ch]] * wy * (1.0 - wx)
                    + frame[[y1, x1, ch]] * wy * wx;
                out[[oy, ox, ch]] = v;
            }
        }
    }
    out
}

/// Extract an n-frame clip starting at `start` with temporal stride `skip`,
/// wrapping frame indices modulo the source length, each frame resized to
/// `side` x `side`.
pub fn make_clip(
    source: &VideoClip,
    start: usize,
    n_frames: usize,
    skip: usize,
    side: usize,
) -> Result<VideoClip> {
    if n_frames < 1 || skip < 1 || side < 1 {
        return Err(Error::Config(
            "make_clip needs n_frames, skip, side all >= 1".into(),
        ));
    }
    let t = source.t();
    let mut frames = Array4::<f64>::zeros((n_frames, side, side, 3));
    for i in 0..n_frames {
        let idx = (start + i * skip) % t;
        let resized = resize_bilinear(source.frame(idx), side, side);
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&resized);
    }
    VideoClip::new(frames, source.fps)
}

/// Multinomial logistic probe: standardizes features, fits by full-batch
/// Adam, and returns test accuracy. Deterministic given the seed.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    n_classes: usize,
    seed: u64,
) -> f64 {
    assert_eq!(train_x.nrows(), train_y.len());
    assert_eq!(test_x.nrows(), test_y.len());
    let d = train_x.ncols();
    let n = train_x.nrows() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in train_x.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for row in train_x.rows() {
        for ((va, &m), &v) in var.iter_mut().zip(&mean).zip(row.iter()) {
            *va += (v - m) * (v - m);
        }
    }
    // center per feature but scale globally: per-feature scaling would
    // blow low-variance noise features up to signal scale
    let scale = (var.iter().sum::<f64>() / (n * d as f64)).sqrt().max(1e-6);
    let norm = |x: &Array2<f64>| {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for (v, &m) in row.iter_mut().zip(&mean) {
                *v = (*v - m) / scale;
            }
        }
        z
    };
    let ztr = norm(train_x).into_dyn();
    let zte = norm(test_x);

    let mut rng = rng_for(seed, "linear-probe");
    let mut set = ParamSet::new("probe");
    let wi = set.add("w", crate::tensor::init_uniform(&[d, n_classes], d, &mut rng));
    let bi = set.add("b", Arr::zeros(IxDyn(&[n_classes])));
    let mut opt = Adam::new(&set, 0.05).with_weight_decay(0.5);
    for _ in 0..400 {
        let mut tape = Tape::new();
        let x = tape.leaf(ztr.clone());
        let w = tape.param(0, &set, wi);
        let b = tape.param(0, &set, bi);
        let logits = tape.matmul(x, w);
        let logits = tape.add_bias(logits, b);
        let loss = tape.softmax_ce(logits, train_y);
        tape.backward(loss, &mut [&mut set]);
        opt.step(&mut set);
    }
    let w = set.value(wi).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let b = set.value(bi).clone();
    let logits = zte.dot(&w);
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(test_y) {
        let mut best = 0usize;
        let mut bestv = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            let v = v + b[[k]];
            if v > bestv {
                bestv = v;
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / test_y.len() as f64
}

use ndarray::Ix2;
