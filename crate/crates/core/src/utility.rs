//! Action-recognition branch: a small 3D conv classifier, its supervised
//! losses, and video-level inference that averages predictions over 10
//! equidistant clips.

use ndarray::{Array2, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{ActionLabels, DatasetManifest, LabelSpace, Sample, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{init_uniform, rng_for, Arr, ParamSet, Tape, TensorRef};

/// Architecture and inference flags of the action classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    /// Conv block widths; each block is a 3x3x3 convolution with stride 2 in
    /// every dimension, followed by ReLU.
    pub widths: Vec<usize>,
    /// Mean per-class binary cross-entropy over sigmoids instead of softmax
    /// cross-entropy.
    pub multilabel: bool,
    /// Average clip logits before the softmax instead of probabilities
    /// after it.
    pub average_logits: bool,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            multilabel: false,
            average_logits: false,
        }
    }
}

/// Spatio-temporal classifier mapping a clip batch (N, 3, T, H, W) to class
/// logits (N, K).
#[derive(Debug, Clone)]
pub struct UtilityModel {
    cfg: UtilityConfig,
    num_classes: usize,
    label_fingerprint: Option<u64>,
    pub params: ParamSet,
}

impl UtilityModel {
    pub fn new(cfg: UtilityConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config(
                "classifier needs at least one conv block of nonzero width".into(),
            ));
        }
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = rng_for(seed, "utility-init");
        let mut params = ParamSet::new("utility");
        let mut c_in = 3usize;
        for (i, &w) in cfg.widths.iter().enumerate() {
            params.add(
                format!("conv{i}.w"),
                init_uniform(&[w, c_in, 3, 3, 3], c_in * 27, &mut rng),
            );
            params.add(format!("conv{i}.b"), Arr::zeros(IxDyn(&[w])));
            c_in = w;
        }
        params.add("head.w", init_uniform(&[num_classes, c_in], c_in, &mut rng));
        params.add("head.b", Arr::zeros(IxDyn(&[num_classes])));
        Ok(Self {
            cfg,
            num_classes,
            label_fingerprint: None,
            params,
        })
    }

    pub fn config(&self) -> &UtilityConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Records the label space this model was trained against.
    pub fn bind_labels(&mut self, space: &LabelSpace) {
        self.label_fingerprint = Some(space.fingerprint());
    }

    pub fn label_fingerprint(&self) -> Option<u64> {
        self.label_fingerprint
    }

    pub fn set_label_fingerprint(&mut self, fp: Option<u64>) {
        self.label_fingerprint = fp;
    }

    /// Refuses evaluation against a label space other than the bound one.
    pub fn check_labels(&self, space: &LabelSpace) -> Result<()> {
        if space.action_names.len() != self.num_classes {
            return Err(Error::LabelSpace(format!(
                "model has {} classes but the manifest defines {}",
                self.num_classes,
                space.action_names.len()
            )));
        }
        if space.action_is_multilabel != self.cfg.multilabel {
            return Err(Error::LabelSpace(
                "single-label/multi-label disagreement between model and manifest".into(),
            ));
        }
        if let Some(fp) = self.label_fingerprint {
            if fp != space.fingerprint() {
                return Err(Error::LabelSpace(
                    "model was trained against a different label space".into(),
                ));
            }
        }
        Ok(())
    }

    /// Class logits for a clip batch x: (N, 3, T, H, W) -> (N, K).
    pub fn logits(&self, tape: &mut Tape, slot: usize, x: TensorRef) -> TensorRef {
        let mut idx = 0usize;
        // Center the [0,1] inputs so early conv responses reflect content
        // rather than the shared DC level; without normalization layers the
        // DC component otherwise swamps the pooled features at cold start.
        let mut h = tape.add_scalar(x, -0.5);
        for _ in 0..self.cfg.widths.len() {
            let w = tape.param(slot, &self.params, idx);
            let b = tape.param(slot, &self.params, idx + 1);
            idx += 2;
            h = tape.conv3d(h, w, b, (2, 2, 2), (1, 1, 1));
            h = tape.relu(h);
        }
        let f = tape.global_avg_pool(h);
        let w = tape.param(slot, &self.params, idx);
        let b = tape.param(slot, &self.params, idx + 1);
        let l = tape.matmul_nt(f, w);
        tape.add_bias(l, b)
    }

    /// Logits without gradient tracking.
    pub fn logits_data(&self, x: &Arr) -> Array2<f64> {
        let mut tape = Tape::new();
        let xr = tape.leaf(x.clone());
        let l = self.logits(&mut tape, 0, xr);
        tape.value(l)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }
}

/// One batch of action labels, matching the model's label mode.
#[derive(Debug, Clone)]
pub enum LabelBatch {
    Single(Vec<usize>),
    /// (N, K) 0/1 indicator matrix.
    Multi(Array2<f64>),
}

impl LabelBatch {
    pub fn len(&self) -> usize {
        match self {
            LabelBatch::Single(v) => v.len(),
            LabelBatch::Multi(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers loose action labels into the mode the model expects.
    pub fn from_actions(
        actions: &[&ActionLabels],
        num_classes: usize,
        multilabel: bool,
    ) -> Result<Self> {
        if multilabel {
            let mut m = Array2::zeros((actions.len(), num_classes));
            for (i, a) in actions.iter().enumerate() {
                match a {
                    ActionLabels::Multi(v) => {
                        if v.len() != num_classes {
                            return Err(Error::LabelSpace(format!(
                                "{} label flags for {} classes",
                                v.len(),
                                num_classes
                            )));
                        }
                        for (k, &f) in v.iter().enumerate() {
                            m[[i, k]] = f as f64;
                        }
                    }
                    ActionLabels::Index(k) => {
                        if *k >= num_classes {
                            return Err(Error::LabelSpace(format!(
                                "label {k} out of range for {num_classes} classes"
                            )));
                        }
                        m[[i, *k]] = 1.0;
                    }
                }
            }
            Ok(LabelBatch::Multi(m))
        } else {
            let mut v = Vec::with_capacity(actions.len());
            for a in actions {
                match a {
                    ActionLabels::Index(k) => v.push(*k),
                    ActionLabels::Multi(_) => {
                        return Err(Error::LabelSpace(
                            "multi-label sample fed to a single-label model".into(),
                        ))
                    }
                }
            }
            Ok(LabelBatch::Single(v))
        }
    }

    /// Gathers the action labels of a sample batch into the mode the model
    /// expects.
    pub fn from_samples(samples: &[&Sample], num_classes: usize, multilabel: bool) -> Result<Self> {
        if multilabel {
            let mut m = Array2::zeros((samples.len(), num_classes));
            for (i, s) in samples.iter().enumerate() {
                match &s.action {
                    ActionLabels::Multi(v) => {
                        if v.len() != num_classes {
                            return Err(Error::LabelSpace(format!(
                                "sample {} carries {} label flags for {} classes",
                                s.id,
                                v.len(),
                                num_classes
                            )));
                        }
                        for (k, &f) in v.iter().enumerate() {
                            m[[i, k]] = f as f64;
                        }
                    }
                    ActionLabels::Index(k) => {
                        if *k >= num_classes {
                            return Err(Error::LabelSpace(format!(
                                "label {k} out of range for {num_classes} classes"
                            )));
                        }
                        m[[i, *k]] = 1.0;
                    }
                }
            }
            Ok(LabelBatch::Multi(m))
        } else {
            let mut v = Vec::with_capacity(samples.len());
            for s in samples {
                match &s.action {
                    ActionLabels::Index(k) => v.push(*k),
                    ActionLabels::Multi(_) => {
                        return Err(Error::LabelSpace(format!(
                            "sample {} is multi-label but the model is single-label",
                            s.id
                        )))
                    }
                }
            }
            Ok(LabelBatch::Single(v))
        }
    }
}

/// Supervised loss on the tape: softmax cross-entropy for single-label
/// models, mean per-class binary cross-entropy for multi-label ones.
pub fn utility_loss_graph(
    tape: &mut Tape,
    model: &UtilityModel,
    slot: usize,
    x: TensorRef,
    labels: &LabelBatch,
) -> Result<TensorRef> {
    let n = tape.shape(x)[0];
    if labels.len() != n {
        return Err(Error::LabelSpace(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let logits = model.logits(tape, slot, x);
    match (model.cfg.multilabel, labels) {
        (false, LabelBatch::Single(idx)) => {
            if let Some(bad) = idx.iter().find(|&&k| k >= model.num_classes) {
                return Err(Error::LabelSpace(format!(
                    "label {bad} out of range for {} classes",
                    model.num_classes
                )));
            }
            Ok(tape.softmax_ce(logits, idx))
        }
        (true, LabelBatch::Multi(t)) => {
            if t.ncols() != model.num_classes {
                return Err(Error::LabelSpace(format!(
                    "{}-wide targets for {} classes",
                    t.ncols(),
                    model.num_classes
                )));
            }
            if t.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::LabelSpace("multi-label targets must be 0/1".into()));
            }
            Ok(tape.bce_logits_mean(logits, t.clone().into_dyn()))
        }
        (false, LabelBatch::Multi(_)) => Err(Error::LabelSpace(
            "single-label model got a multi-label batch".into(),
        )),
        (true, LabelBatch::Single(_)) => Err(Error::LabelSpace(
            "multi-label model got single-label indices".into(),
        )),
    }
}

/// Data-space supervised loss over a clip batch.
pub fn utility_loss(model: &UtilityModel, clips: &[VideoClip], labels: &LabelBatch) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("utility loss needs a non-empty batch".into()));
    }
    let x = stack_clips(clips);
    let mut tape = Tape::new();
    let xr = tape.leaf(x);
    let l = utility_loss_graph(&mut tape, model, 0, xr, labels)?;
    Ok(tape.scalar(l))
}

/// Stacks clips into a batch (N, 3, T, H, W).
pub fn stack_clips(clips: &[VideoClip]) -> Arr {
    let views: Vec<Arr> = clips
        .iter()
        .map(|c| {
            let v = c.to_cthw();
            let sh = v.shape().to_vec();
            v.into_shape_with_order(IxDyn(&[1, sh[0], sh[1], sh[2], sh[3]]))
                .unwrap()
        })
        .collect();
    let refs: Vec<_> = views.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &refs)
        .unwrap()
        .as_standard_layout()
        .to_owned()
}

/// Which frames a sampled clip covers: `frames` indices spaced `skip` apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub frames: usize,
    pub skip: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self { frames: 16, skip: 2 }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.skip == 0 {
            return Err(Error::Config(
                "clip sampling needs nonzero frame count and skip".into(),
            ));
        }
        Ok(())
    }

    /// Number of source frames the clip spans.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.skip + 1
    }
}

/// Start offsets of the 10 equidistant evaluation clips for a video of
/// `len` frames: offset_k = floor(k * (len - span) / 9), clamped at 0 when
/// the video is shorter than one clip span.
pub fn clip_offsets(len: usize, span: usize) -> [usize; 10] {
    let mut out = [0usize; 10];
    if len > span {
        let slack = len - span;
        for (k, o) in out.iter_mut().enumerate() {
            *o = k * slack / 9;
        }
    }
    out
}

/// Cuts one clip out of a video, repeating the last frame past the end.
pub fn extract_clip(video: &VideoClip, offset: usize, spec: &ClipSpec) -> Arr {
    let cthw = video.to_cthw();
    let (t, h, w) = (video.t(), video.h(), video.w());
    let mut out = Arr::zeros(IxDyn(&[1, 3, spec.frames, h, w]));
    for i in 0..spec.frames {
        let src = (offset + i * spec.skip).min(t - 1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[0, c, i, y, x]] = cthw[[c, src, y, x]];
                }
            }
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Collapses per-clip logits (M, K) into one score vector: probabilities are
/// averaged after the softmax/sigmoid unless `average_logits` moves the mean
/// in front of it.
pub fn aggregate_clip_scores(
    logits: ArrayView2<f64>,
    multilabel: bool,
    average_logits: bool,
) -> Vec<f64> {
    let (m, k) = logits.dim();
    assert!(m > 0);
    let squash = |row: &[f64]| -> Vec<f64> {
        if multilabel {
            row.iter().map(|&v| sigmoid(v)).collect()
        } else {
            softmax_row(row)
        }
    };
    if average_logits {
        let mean: Vec<f64> = (0..k)
            .map(|j| logits.column(j).sum() / m as f64)
            .collect();
        squash(&mean)
    } else {
        let mut acc = vec![0.0; k];
        for row in logits.rows() {
            let p = squash(row.as_slice().unwrap());
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= m as f64);
        acc
    }
}

/// Averaged class scores of a whole video under the 10-clip protocol.
pub fn video_scores(model: &UtilityModel, video: &VideoClip, spec: &ClipSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let offsets = clip_offsets(video.t(), spec.span());
    let clips: Vec<Arr> = offsets
        .iter()
        .map(|&o| extract_clip(video, o, spec))
        .collect();
    let refs: Vec<_> = clips.iter().map(|a| a.view()).collect();
    let batch = ndarray::concatenate(Axis(0), &refs)
        .unwrap()
        .as_standard_layout()
        .to_owned();
    let logits = model.logits_data(&batch);
    Ok(aggregate_clip_scores(
        logits.view(),
        model.cfg.multilabel,
        model.cfg.average_logits,
    ))
}

/// Result of video-level inference: averaged scores plus the top-1 verdict.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub hit: bool,
}

/// Video-level top-1: average the 10 clip predictions and compare the argmax
/// with the labelled class.
pub fn video_top1(
    model: &UtilityModel,
    video: &VideoClip,
    label: usize,
    spec: &ClipSpec,
) -> Result<VideoPrediction> {
    if label >= model.num_classes {
        return Err(Error::LabelSpace(format!(
            "label {label} out of range for {} classes",
            model.num_classes
        )));
    }
    let scores = video_scores(model, video, spec)?;
    let predicted = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    Ok(VideoPrediction {
        hit: predicted == label,
        predicted,
        scores,
    })
}

/// Decodes a manifest sample and runs video-level top-1 against its action
/// label. Multi-label samples count a hit when the argmax class is one of
/// the labelled ones.
pub fn video_top1_sample(
    model: &UtilityModel,
    manifest: &DatasetManifest,
    sample: &Sample,
    spec: &ClipSpec,
) -> Result<VideoPrediction> {
    model.check_labels(&manifest.label_space)?;
    let video = manifest.decode(sample)?;
    match &sample.action {
        ActionLabels::Index(k) => video_top1(model, &video, *k, spec),
        ActionLabels::Multi(flags) => {
            if flags.len() != model.num_classes {
                return Err(Error::LabelSpace(format!(
                    "sample {} carries {} label flags for {} classes",
                    sample.id,
                    flags.len(),
                    model.num_classes
                )));
            }
            let scores = video_scores(model, &video, spec)?;
            let predicted = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            Ok(VideoPrediction {
                hit: flags[predicted] != 0,
                predicted,
                scores,
            })
        }
    }
}
