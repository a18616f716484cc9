//! Learnable anonymization network: a small per-frame UNet with a sigmoid
//! output, plus its identity-style initialization by L1 reconstruction.

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, VideoClip};
use crate::error::{Error, Result};
use crate::minimax::{MinimaxConfig, PlateauDetector};
use crate::tensor::{init_uniform, rng_for, Adam, Arr, ParamSet, Tape, TensorRef};

/// Channel widths of the encoder levels; depth (and hence total stride
/// 2^depth) follows from the length. The default gives stride 16, which
/// divides the standard 112x112 input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizerConfig {
    pub widths: Vec<usize>,
}

impl Default for AnonymizerConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl AnonymizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "anonymizer needs at least one encoder level of nonzero width".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder-decoder over single frames. Each encoder level is a 3x3 conv +
/// ReLU followed by 2x average pooling; the decoder mirrors it with nearest
/// upsampling and skip concatenation; a final 3x3 conv + sigmoid maps back
/// to RGB.
#[derive(Debug, Clone)]
pub struct AnonymizerModel {
    cfg: AnonymizerConfig,
    pub params: ParamSet,
}

impl AnonymizerModel {
    pub fn new(cfg: AnonymizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "anonymizer-init");
        let mut params = ParamSet::new("anonymizer");
        let mut c_in = 3usize;
        for (i, &w) in cfg.widths.iter().enumerate() {
            params.add(
                format!("enc{i}.w"),
                init_uniform(&[w, c_in, 3, 3], c_in * 9, &mut rng),
            );
            params.add(format!("enc{i}.b"), Arr::zeros(IxDyn(&[w])));
            c_in = w;
        }
        let mid = c_in * 2;
        params.add(
            "mid.w",
            init_uniform(&[mid, c_in, 3, 3], c_in * 9, &mut rng),
        );
        params.add("mid.b", Arr::zeros(IxDyn(&[mid])));
        let mut up_in = mid;
        for (i, &w) in cfg.widths.iter().enumerate().rev() {
            let cat = up_in + w;
            params.add(
                format!("dec{i}.w"),
                init_uniform(&[w, cat, 3, 3], cat * 9, &mut rng),
            );
            params.add(format!("dec{i}.b"), Arr::zeros(IxDyn(&[w])));
            up_in = w;
        }
        // The raw input is concatenated before the output conv so exact
        // passthrough (up to the sigmoid) is representable from day one.
        params.add(
            "out.w",
            init_uniform(&[3, up_in + 3, 3, 3], (up_in + 3) * 9, &mut rng),
        );
        params.add("out.b", Arr::zeros(IxDyn(&[3])));
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &AnonymizerConfig {
        &self.cfg
    }

    /// Total downsampling factor of the encoder.
    pub fn stride(&self) -> usize {
        1 << self.cfg.widths.len()
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "anonymizer with {} levels needs height and width divisible by {s}, got {h}x{w}",
                self.cfg.widths.len()
            )));
        }
        Ok(())
    }

    /// Builds the forward graph for a batch of frames x: (N, 3, H, W) and
    /// returns the sigmoid output of the same shape. `slot` is the sink index
    /// this model's parameters will occupy at backward time.
    pub fn forward(&self, tape: &mut Tape, slot: usize, x: TensorRef) -> TensorRef {
        let d = self.cfg.widths.len();
        let mut idx = 0usize;
        let take = |tape: &mut Tape, idx: &mut usize| {
            let t = tape.param(slot, &self.params, *idx);
            *idx += 1;
            t
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(d);
        for _ in 0..d {
            let w = take(tape, &mut idx);
            let b = take(tape, &mut idx);
            h = tape.conv2d(h, w, b, 1, 1);
            h = tape.relu(h);
            skips.push(h);
            h = tape.avg_pool2d(h, 2);
        }
        let w = take(tape, &mut idx);
        let b = take(tape, &mut idx);
        h = tape.conv2d(h, w, b, 1, 1);
        h = tape.relu(h);
        for i in (0..d).rev() {
            h = tape.upsample2x(h);
            h = tape.concat(1, &[h, skips[i]]);
            let w = take(tape, &mut idx);
            let b = take(tape, &mut idx);
            h = tape.conv2d(h, w, b, 1, 1);
            h = tape.relu(h);
        }
        h = tape.concat(1, &[h, x]);
        let w = take(tape, &mut idx);
        let b = take(tape, &mut idx);
        h = tape.conv2d(h, w, b, 1, 1);
        debug_assert_eq!(idx, self.params.len());
        tape.sigmoid(h)
    }

    /// Applies the network frame by frame. Output matches the input shape
    /// and every value lies strictly inside (0,1).
    pub fn anonymize(&self, clip: &VideoClip) -> Result<VideoClip> {
        self.check_spatial(clip.h(), clip.w())?;
        let mut tape = Tape::new();
        let x = tape.leaf(clip.to_tchw());
        let y = self.forward(&mut tape, 0, x);
        VideoClip::from_tchw(tape.value(y), clip.fps)
    }
}

/// Sum of absolute differences over every element of two equal-shape arrays.
pub fn l1_loss(x: &Arr, xhat: &Arr) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::Shape(format!(
            "l1_loss shapes differ: {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    Ok(x.iter().zip(xhat.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// `l1_loss` normalized by element count — the number logged and compared
/// against th_A0.
pub fn per_pixel_l1(x: &Arr, xhat: &Arr) -> Result<f64> {
    Ok(l1_loss(x, xhat)? / x.len() as f64)
}

/// Loss curve from reconstruction pretraining. `val_curve[k]` is the
/// held-out per-pixel L1 measured before epoch k; `reached` says whether
/// th_A0 was met inside the epoch budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub val_curve: Vec<f64>,
    pub train_curve: Vec<f64>,
    pub steps: usize,
    pub reached: bool,
}

/// Splits a manifest's samples into a training pool and a small held-out
/// tail used for threshold checks.
pub(crate) fn holdout_split(n: usize) -> (usize, usize) {
    let val = (n / 6).max(1);
    (n - val, val)
}

/// Gradient descent on per-frame L1 reconstruction until the held-out
/// per-pixel L1 drops to `cfg.th_a0` or `cfg.pretrain_epochs` is exhausted.
/// The last sixth of the manifest (at least one sample) is held out.
pub fn reconstruct_pretrain(
    model: &mut AnonymizerModel,
    data: &DatasetManifest,
    cfg: &MinimaxConfig,
) -> Result<PretrainReport> {
    if data.samples.is_empty() {
        return Err(Error::Config(
            "reconstruction pretraining needs a non-empty dataset".into(),
        ));
    }
    let clips: Vec<VideoClip> = data
        .samples
        .iter()
        .map(|s| data.decode(s))
        .collect::<Result<_>>()?;
    model.check_spatial(clips[0].h(), clips[0].w())?;
    let (n_train, _) = holdout_split(clips.len());
    let train_frames: Vec<Arr> = clips[..n_train]
        .iter()
        .flat_map(|c| {
            let t = c.to_tchw();
            (0..c.t())
                .map(|i| {
                    t.slice(ndarray::s![i..i + 1, .., .., ..])
                        .to_owned()
                        .into_dyn()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let val_batches: Vec<Arr> = clips[n_train..].iter().map(|c| c.to_tchw()).collect();

    let validate = |model: &AnonymizerModel| -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for v in &val_batches {
            let mut tape = Tape::new();
            let x = tape.leaf(v.clone());
            let y = model.forward(&mut tape, 0, x);
            total += l1_loss(v, tape.value(y)).expect("shapes match by construction");
            count += v.len();
        }
        total / count as f64
    };

    let mut rng = rng_for(cfg.seed, "reconstruct-pretrain");
    let mut opt = Adam::new(&model.params, cfg.lr_anonymizer);
    let mut plateau = PlateauDetector::new(cfg.plateau_checks, cfg.plateau_eps);
    let mut report = PretrainReport {
        val_curve: Vec::new(),
        train_curve: Vec::new(),
        steps: 0,
        reached: false,
    };
    for _epoch in 0..=cfg.pretrain_epochs {
        let val = validate(model);
        report.val_curve.push(val);
        if val <= cfg.th_a0 {
            report.reached = true;
            break;
        }
        if plateau.observe(val) {
            opt.lr /= 10.0;
        }
        if _epoch == cfg.pretrain_epochs {
            break;
        }
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let batches = order.chunks(cfg.batch.max(1));
        let cap = cfg.steps_per_epoch.unwrap_or(usize::MAX);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in batches.take(cap) {
            let views: Vec<_> = chunk.iter().map(|&i| train_frames[i].view()).collect();
            let x = ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform frame shapes");
            let mut tape = Tape::new();
            let xr = tape.leaf(x);
            let y = model.forward(&mut tape, 0, xr);
            let diff = tape.sub(y, xr);
            let loss = tape.abs(diff);
            let loss = tape.mean_all(loss);
            epoch_loss += tape.scalar(loss);
            epoch_batches += 1;
            tape.backward(loss, &mut [&mut model.params]);
            opt.step(&mut model.params);
            report.steps += 1;
        }
        report
            .train_curve
            .push(epoch_loss / epoch_batches.max(1) as f64);
    }
    Ok(report)
}
