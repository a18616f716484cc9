//! Adversarial training engine: initialization phases and the two-step
//! alternating loop that trades action utility against private-attribute
//! leakage.

use std::collections::VecDeque;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anonymizer::{holdout_split, reconstruct_pretrain, AnonymizerConfig, AnonymizerModel};
use crate::data::{ActionLabels, DatasetManifest, VideoClip};
use crate::error::{Error, Result};
use crate::ssl::{
    apply_plans_graph, momentum_contrast_loss, nt_xent_graph, rotnet_loss, sample_frame_pair,
    ssl_clip_pair_loss, AugmentMode, AugmentPlan, MomentumState, SamplerStrategy, SslBranch,
    SslConfig, SslObjective,
};
use crate::tensor::{rng_for, Adam, Arr, Tape, TensorRef};
use crate::utility::{
    extract_clip, utility_loss_graph, ClipSpec, LabelBatch, UtilityConfig, UtilityModel,
};

/// Everything the training engine needs: loss weights, learning rates,
/// stopping thresholds, per-phase epoch budgets, and the SSL branch setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimaxConfig {
    pub seed: u64,
    /// Weight on the privacy term in the anonymizer update, in (0,1).
    pub omega: f64,
    /// Learning rate for the anonymizer.
    pub lr_anonymizer: f64,
    /// Learning rate for the action branch.
    pub lr_utility: f64,
    /// Learning rate for the SSL branch.
    pub lr_ssl: f64,
    /// Reconstruction pretraining stops once held-out per-pixel L1 drops here.
    pub th_a0: f64,
    /// Action-branch initialization stops once held-out CE drops here.
    pub th_t0: f64,
    /// SSL-branch initialization stops at this loss; `None` means stop on a
    /// plateau instead (no absolute value makes sense across batch sizes).
    pub th_b0: Option<f64>,
    /// Adversarial loop stops once the SSL loss climbs here; `None` derives
    /// ln(2N-1) * 0.95 from the contrastive batch size, just under the
    /// ceiling where the branch can no longer match frames.
    pub th_bmax: Option<f64>,
    pub pretrain_epochs: usize,
    pub utility_init_epochs: usize,
    pub ssl_init_epochs: usize,
    pub adversarial_epochs: usize,
    /// Clips (or frames, during reconstruction) per optimizer step.
    pub batch: usize,
    /// Cap on optimizer steps per epoch; `None` sweeps the whole split.
    pub steps_per_epoch: Option<usize>,
    pub tau: f64,
    pub objective: SslObjective,
    pub sampler: SamplerStrategy,
    /// Frames per training clip.
    pub clip_frames: usize,
    /// Temporal stride when extracting training clips.
    pub clip_skip: usize,
    /// Side length clips are resized to before entering the networks.
    pub clip_side: usize,
    /// A plateau is declared when no check improves on the best seen by more
    /// than `plateau_eps` (relative) for `plateau_checks` checks running.
    pub plateau_checks: usize,
    pub plateau_eps: f64,
    /// Abort if the action loss exceeds this multiple of its post-init value.
    pub divergence_factor: f64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            omega: 0.5,
            lr_anonymizer: 1e-3,
            lr_utility: 1e-3,
            lr_ssl: 1e-3,
            th_a0: 0.02,
            th_t0: 0.3,
            th_b0: None,
            th_bmax: None,
            pretrain_epochs: 100,
            utility_init_epochs: 150,
            ssl_init_epochs: 400,
            adversarial_epochs: 100,
            batch: 8,
            steps_per_epoch: None,
            tau: 0.1,
            objective: SslObjective::NtXent,
            sampler: SamplerStrategy::Unconstrained,
            clip_frames: 16,
            clip_skip: 2,
            clip_side: 112,
            plateau_checks: 5,
            plateau_eps: 0.01,
            divergence_factor: 10.0,
        }
    }
}

/// Watches a loss series and fires once `checks` consecutive observations
/// fail to beat the best seen by more than `eps` relative improvement.
#[derive(Debug, Clone)]
pub struct PlateauDetector {
    best: f64,
    stale: usize,
    checks: usize,
    eps: f64,
}

impl PlateauDetector {
    pub fn new(checks: usize, eps: f64) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            checks,
            eps,
        }
    }

    /// Feeds one observation; returns true when a plateau is declared. The
    /// staleness clock restarts after each declaration, so a later plateau
    /// can fire again.
    pub fn observe(&mut self, v: f64) -> bool {
        let improved = !self.best.is_finite() || v < self.best - self.eps * self.best.abs();
        if improved {
            self.best = v;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.checks {
            self.stale = 0;
            true
        } else {
            false
        }
    }
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::Config(format!(
                "omega must lie in (0,1), got {}",
                self.omega
            )));
        }
        for (name, lr) in [
            ("lr_anonymizer", self.lr_anonymizer),
            ("lr_utility", self.lr_utility),
            ("lr_ssl", self.lr_ssl),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch must be at least 2 for contrastive objectives, got {}",
                self.batch
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        self.sampler.validate()?;
        Ok(())
    }

    /// Effective SSL ceiling for a given contrastive batch size.
    pub fn effective_th_bmax(&self, batch: usize) -> f64 {
        self.th_bmax
            .unwrap_or_else(|| ((2 * batch - 1) as f64).ln() * 0.95)
    }
}

// ---------------------------------------------------------------------------
// Engine state
// ---------------------------------------------------------------------------

/// Training phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitA,
    InitT,
    InitB,
    Adversarial,
    Done,
}

/// One line of the training log. Losses not measured in a phase stay unset;
/// records carry no wall-clock information so logs are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub l_a: Option<f64>,
    pub l_t: Option<f64>,
    pub l_b: Option<f64>,
    pub lr_anonymizer: f64,
    pub lr_utility: f64,
    pub lr_ssl: f64,
}

/// The three models plus optimizer and bookkeeping state of one training run.
#[derive(Debug)]
pub struct MinimaxState {
    pub phase: Phase,
    pub step: u64,
    pub anonymizer: AnonymizerModel,
    pub utility: UtilityModel,
    pub ssl: SslBranch,
    pub moco: Option<MomentumState>,
    pub opt_a: Adam,
    pub opt_t: Adam,
    pub opt_b: Adam,
    pub log: Vec<StepRecord>,
    pub post_init_l_t: Option<f64>,
    pub post_init_l_b: Option<f64>,
}

impl MinimaxState {
    pub fn new(
        anonymizer: AnonymizerModel,
        utility: UtilityModel,
        ssl: SslBranch,
        cfg: &MinimaxConfig,
    ) -> Self {
        let moco = (cfg.objective == SslObjective::MomentumContrast)
            .then(|| MomentumState::new(&ssl));
        let opt_a = Adam::new(&anonymizer.params, cfg.lr_anonymizer);
        let opt_t = Adam::new(&utility.params, cfg.lr_utility);
        let opt_b = Adam::new(&ssl.params, cfg.lr_ssl);
        Self {
            phase: Phase::InitA,
            step: 0,
            anonymizer,
            utility,
            ssl,
            moco,
            opt_a,
            opt_t,
            opt_b,
            log: Vec::new(),
            post_init_l_t: None,
            post_init_l_b: None,
        }
    }

    /// Moves to a later (or the same) phase; going backwards is a bug.
    pub fn advance(&mut self, to: Phase) {
        assert!(
            to >= self.phase,
            "phase may only move forward: {:?} -> {to:?}",
            self.phase
        );
        self.phase = to;
    }

    fn record(&mut self, phase: Phase, l_a: Option<f64>, l_t: Option<f64>, l_b: Option<f64>) {
        self.log.push(StepRecord {
            phase,
            step: self.step,
            l_a,
            l_t,
            l_b,
            lr_anonymizer: self.opt_a.lr,
            lr_utility: self.opt_t.lr,
            lr_ssl: self.opt_b.lr,
        });
        self.step += 1;
    }
}

/// Architectures of the three networks; training hyperparameters live in
/// [`MinimaxConfig`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub anonymizer: AnonymizerConfig,
    pub utility: UtilityConfig,
    pub ssl: SslConfig,
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// All videos of a manifest decoded into memory, with action labels only —
/// the engine never looks at privacy annotations.
pub struct Corpus {
    pub videos: Vec<VideoClip>,
    pub actions: Vec<ActionLabels>,
    pub num_classes: usize,
    pub multilabel: bool,
}

impl Corpus {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut videos = Vec::with_capacity(manifest.samples.len());
        let mut actions = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            videos.push(manifest.decode(s)?);
            actions.push(s.action.clone());
        }
        if videos.is_empty() {
            return Err(Error::Manifest("training needs a non-empty dataset".into()));
        }
        Ok(Self {
            videos,
            actions,
            num_classes: manifest.label_space.action_names.len(),
            multilabel: manifest.label_space.action_is_multilabel,
        })
    }

    /// Deterministic train/holdout index split (the tail is held out).
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let (train, _) = holdout_split(self.videos.len());
        ((0..train).collect(), (train..self.videos.len()).collect())
    }
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn concat_parts(parts: &[Arr]) -> Arr {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .unwrap()
        .as_standard_layout()
        .to_owned()
}

fn random_offset(video: &VideoClip, spec: &ClipSpec, rng: &mut impl Rng) -> usize {
    let max_off = video.t().saturating_sub(spec.span());
    if max_off == 0 {
        0
    } else {
        rng.gen_range(0..=max_off)
    }
}

fn stack_clip_batch(videos: &[VideoClip], idxs: &[usize], offsets: &[usize], spec: &ClipSpec) -> Arr {
    let parts: Vec<Arr> = idxs
        .iter()
        .zip(offsets)
        .map(|(&i, &o)| extract_clip(&videos[i], o, spec))
        .collect();
    concat_parts(&parts)
}

fn action_labels(
    actions: &[ActionLabels],
    idxs: &[usize],
    num_classes: usize,
    multilabel: bool,
) -> Result<LabelBatch> {
    let refs: Vec<&ActionLabels> = idxs.iter().map(|&i| &actions[i]).collect();
    LabelBatch::from_actions(&refs, num_classes, multilabel)
}

/// Two SSL views per video: single frames for the frame-level objectives,
/// short clips for the clip-level one. A lone index is doubled so the
/// contrastive denominator never degenerates.
fn ssl_views(
    videos: &[VideoClip],
    idxs: &[usize],
    cfg: &MinimaxConfig,
    spec: &ClipSpec,
    rng: &mut impl Rng,
) -> Result<(Arr, Arr)> {
    let mut idxs = idxs.to_vec();
    if idxs.len() == 1 {
        idxs.push(idxs[0]);
    }
    let mut p1 = Vec::with_capacity(idxs.len());
    let mut p2 = Vec::with_capacity(idxs.len());
    for &i in &idxs {
        let video = &videos[i];
        let (f1, f2) = sample_frame_pair(video.t(), cfg.sampler, rng)?;
        if cfg.objective == SslObjective::NtXentClip {
            let max_off = video.t().saturating_sub(spec.span());
            p1.push(extract_clip(video, f1.min(max_off), spec));
            p2.push(extract_clip(video, f2.min(max_off), spec));
        } else {
            let t = video.to_tchw();
            p1.push(t.slice(ndarray::s![f1..f1 + 1, .., .., ..]).to_owned().into_dyn());
            p2.push(t.slice(ndarray::s![f2..f2 + 1, .., .., ..]).to_owned().into_dyn());
        }
    }
    Ok((concat_parts(&p1), concat_parts(&p2)))
}

/// Raw inputs of one adversarial iteration: labelled clips for the action
/// loss and two per-video views for the SSL loss. Anonymization happens
/// inside the step, against the current parameters.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    /// (N, 3, T, H, W)
    pub clips: Arr,
    pub labels: LabelBatch,
    /// (N, 3, H, W), or (N, 3, T, H, W) for the clip-level objective.
    pub v1: Arr,
    pub v2: Arr,
}

/// Assembles one batch from the corpus: a random training clip plus a
/// sampled view pair per video.
pub fn make_batch(
    corpus: &Corpus,
    indices: &[usize],
    cfg: &MinimaxConfig,
    rng: &mut impl Rng,
) -> Result<AdvBatch> {
    let spec = ClipSpec {
        frames: cfg.clip_frames,
        skip: cfg.clip_skip,
    };
    spec.validate()?;
    let mut clips = Vec::with_capacity(indices.len());
    for &i in indices {
        let off = random_offset(&corpus.videos[i], &spec, rng);
        clips.push(extract_clip(&corpus.videos[i], off, &spec));
    }
    let (v1, v2) = ssl_views(&corpus.videos, indices, cfg, &spec, rng)?;
    Ok(AdvBatch {
        clips: concat_parts(&clips),
        labels: action_labels(&corpus.actions, indices, corpus.num_classes, corpus.multilabel)?,
        v1,
        v2,
    })
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Runs the per-frame anonymizer over a clip batch (N, 3, T, H, W),
/// preserving the layout.
fn anonymize_clips_graph(
    tape: &mut Tape,
    model: &AnonymizerModel,
    slot: usize,
    x: TensorRef,
) -> TensorRef {
    let sh = tape.shape(x).to_vec();
    let (n, c, t) = (sh[0], sh[1], sh[2]);
    let p = tape.permute(x, &[0, 2, 1, 3, 4]);
    let f = tape.reshape(p, &[n * t, c, sh[3], sh[4]]);
    let y = model.forward(tape, slot, f);
    let y = tape.reshape(y, &[n, t, c, sh[3], sh[4]]);
    tape.permute(y, &[0, 2, 1, 3, 4])
}

/// SSL loss over two already-anonymized view tensors. Frame objectives get
/// per-sample augmentation; the clip objective shares each sample's plan
/// across its frames.
#[allow(clippy::too_many_arguments)]
fn ssl_objective_graph(
    tape: &mut Tape,
    branch: &SslBranch,
    slot: usize,
    in1: TensorRef,
    in2: TensorRef,
    objective: SslObjective,
    tau: f64,
    plans1: &[AugmentPlan],
    plans2: &[AugmentPlan],
    moco: Option<&mut MomentumState>,
) -> Result<TensorRef> {
    match objective {
        SslObjective::NtXent => {
            let a1 = apply_plans_graph(tape, in1, plans1);
            let a2 = apply_plans_graph(tape, in2, plans2);
            let z1 = branch.project_frames(tape, slot, a1);
            let z2 = branch.project_frames(tape, slot, a2);
            Ok(nt_xent_graph(tape, z1, z2, tau, !branch.config().single_view))
        }
        SslObjective::RotNet => {
            let a1 = apply_plans_graph(tape, in1, plans1);
            let a2 = apply_plans_graph(tape, in2, plans2);
            let cat = tape.concat(0, &[a1, a2]);
            rotnet_loss(tape, branch, slot, cat)
        }
        SslObjective::MomentumContrast => {
            let state = moco.ok_or_else(|| {
                Error::Config("momentum contrast needs its encoder/queue state".into())
            })?;
            let a1 = apply_plans_graph(tape, in1, plans1);
            let a2 = apply_plans_graph(tape, in2, plans2);
            let keys = tape.value(a2).clone();
            Ok(momentum_contrast_loss(tape, branch, slot, a1, &keys, state, tau))
        }
        SslObjective::NtXentClip => {
            let sh = tape.shape(in1).to_vec();
            let (n, t) = (sh[0], sh[2]);
            let mut views = Vec::with_capacity(2);
            for (x, plans) in [(in1, plans1), (in2, plans2)] {
                let p = tape.permute(x, &[0, 2, 1, 3, 4]);
                let f = tape.reshape(p, &[n * t, sh[1], sh[3], sh[4]]);
                let rep: Vec<AugmentPlan> = plans
                    .iter()
                    .flat_map(|pl| std::iter::repeat(pl.clone()).take(t))
                    .collect();
                let a = apply_plans_graph(tape, f, &rep);
                views.push(tape.reshape(a, &[n, t, sh[1], sh[3], sh[4]]));
            }
            ssl_clip_pair_loss(tape, branch, slot, views[0], views[1], tau)
        }
    }
}

/// Builds the anonymizer-update objective on one tape: the action loss on
/// anonymized clips plus the SSL loss whose gradient reaches the anonymizer
/// negated and weighted. Forward values are the plain L_T and L_B; only the
/// backward pass sees the reversal. Slots: 0 anonymizer, 1 utility, 2 ssl.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_objective(
    tape: &mut Tape,
    anonymizer: &AnonymizerModel,
    utility: &UtilityModel,
    ssl: &SslBranch,
    batch: &AdvBatch,
    objective: SslObjective,
    omega: f64,
    tau: f64,
    plans1: &[AugmentPlan],
    plans2: &[AugmentPlan],
    moco: Option<&mut MomentumState>,
) -> Result<(TensorRef, TensorRef, TensorRef)> {
    let x = tape.leaf(batch.clips.clone());
    let ax = anonymize_clips_graph(tape, anonymizer, 0, x);
    let l_t = utility_loss_graph(tape, utility, 1, ax, &batch.labels)?;

    let r1 = tape.leaf(batch.v1.clone());
    let r2 = tape.leaf(batch.v2.clone());
    let (a1, a2) = if objective == SslObjective::NtXentClip {
        (
            anonymize_clips_graph(tape, anonymizer, 0, r1),
            anonymize_clips_graph(tape, anonymizer, 0, r2),
        )
    } else {
        (
            anonymizer.forward(tape, 0, r1),
            anonymizer.forward(tape, 0, r2),
        )
    };
    let g1 = tape.grad_reverse(a1, omega);
    let g2 = tape.grad_reverse(a2, omega);
    let l_b = ssl_objective_graph(tape, ssl, 2, g1, g2, objective, tau, plans1, plans2, moco)?;
    let total = tape.add(l_t, l_b);
    Ok((l_t, l_b, total))
}

fn draw_plans(shape: &[usize], count: usize, rng: &mut impl Rng) -> Vec<AugmentPlan> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    (0..count)
        .map(|_| AugmentPlan::draw(AugmentMode::Ssl, h, w, rng))
        .collect()
}

// ---------------------------------------------------------------------------
// Adversarial steps
// ---------------------------------------------------------------------------

/// Step 1: update the anonymizer on the combined objective, auxiliaries
/// frozen. Returns (L_T, L_B) of the batch.
fn step_one(
    state: &mut MinimaxState,
    cfg: &MinimaxConfig,
    batch: &AdvBatch,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let n = batch.v1.shape()[0];
    let plans1 = draw_plans(batch.v1.shape(), n, rng);
    let plans2 = draw_plans(batch.v2.shape(), n, rng);
    // Freeze before building the graph: parameter nodes capture the flag.
    state.utility.params.freeze();
    state.ssl.params.freeze();
    // The queue must only advance when the SSL branch itself trains, so this
    // step works on a throwaway copy of the momentum state.
    let mut moco_probe = state.moco.clone();
    let mut tape = Tape::new();
    let built = adversarial_objective(
        &mut tape,
        &state.anonymizer,
        &state.utility,
        &state.ssl,
        batch,
        cfg.objective,
        cfg.omega,
        cfg.tau,
        &plans1,
        &plans2,
        moco_probe.as_mut(),
    );
    let (l_t, l_b, total) = match built {
        Ok(v) => v,
        Err(e) => {
            state.utility.params.unfreeze();
            state.ssl.params.unfreeze();
            return Err(e);
        }
    };
    let (lt_v, lb_v) = (tape.scalar(l_t), tape.scalar(l_b));
    tape.backward(
        total,
        &mut [
            &mut state.anonymizer.params,
            &mut state.utility.params,
            &mut state.ssl.params,
        ],
    );
    state.opt_a.step(&mut state.anonymizer.params);
    state.anonymizer.params.zero_grads();
    state.utility.params.unfreeze();
    state.ssl.params.unfreeze();
    Ok((lt_v, lb_v))
}

/// One SSL-branch optimizer step on a pair of view tensors (used by both
/// the initialization phase and step 2).
fn ssl_train_step(
    state: &mut MinimaxState,
    cfg: &MinimaxConfig,
    v1: Arr,
    v2: Arr,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = v1.shape()[0];
    let plans1 = draw_plans(v1.shape(), n, rng);
    let plans2 = draw_plans(v2.shape(), n, rng);
    let mut tape = Tape::new();
    let r1 = tape.leaf(v1);
    let r2 = tape.leaf(v2);
    let l = ssl_objective_graph(
        &mut tape,
        &state.ssl,
        0,
        r1,
        r2,
        cfg.objective,
        cfg.tau,
        &plans1,
        &plans2,
        state.moco.as_mut(),
    )?;
    let v = tape.scalar(l);
    tape.backward(l, &mut [&mut state.ssl.params]);
    state.opt_b.step(&mut state.ssl.params);
    state.ssl.params.zero_grads();
    Ok(v)
}

/// Step 2: with the anonymizer frozen, one utility step and one SSL step on
/// a fresh batch. Returns (L_T, L_B).
fn step_two(
    state: &mut MinimaxState,
    cfg: &MinimaxConfig,
    batch: &AdvBatch,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    // Anonymize once with the just-updated parameters; the outputs are
    // constants for both auxiliary updates.
    let (anon_clips, anon_v1, anon_v2) = {
        let mut scratch = Tape::new();
        let c = scratch.leaf(batch.clips.clone());
        let ac = anonymize_clips_graph(&mut scratch, &state.anonymizer, 0, c);
        let v1 = scratch.leaf(batch.v1.clone());
        let v2 = scratch.leaf(batch.v2.clone());
        let (a1, a2) = if cfg.objective == SslObjective::NtXentClip {
            (
                anonymize_clips_graph(&mut scratch, &state.anonymizer, 0, v1),
                anonymize_clips_graph(&mut scratch, &state.anonymizer, 0, v2),
            )
        } else {
            (
                state.anonymizer.forward(&mut scratch, 0, v1),
                state.anonymizer.forward(&mut scratch, 0, v2),
            )
        };
        (
            scratch.value(ac).clone(),
            scratch.value(a1).clone(),
            scratch.value(a2).clone(),
        )
    };

    let lt_v = {
        let mut tape = Tape::new();
        let x = tape.leaf(anon_clips);
        let l = utility_loss_graph(&mut tape, &state.utility, 0, x, &batch.labels)?;
        let v = tape.scalar(l);
        tape.backward(l, &mut [&mut state.utility.params]);
        state.opt_t.step(&mut state.utility.params);
        state.utility.params.zero_grads();
        v
    };
    let lb_v = ssl_train_step(state, cfg, anon_v1, anon_v2, rng)?;
    Ok((lt_v, lb_v))
}

/// One full adversarial iteration: anonymizer update on `first`, auxiliary
/// updates on `second` — two distinct consecutive batches.
pub fn adversarial_step(
    state: &mut MinimaxState,
    cfg: &MinimaxConfig,
    first: &AdvBatch,
    second: &AdvBatch,
    rng: &mut impl Rng,
) -> Result<()> {
    if state.phase != Phase::Adversarial {
        return Err(Error::Protocol(format!(
            "adversarial steps need both initializations done, state is in {:?}",
            state.phase
        )));
    }
    let (lt1, lb1) = step_one(state, cfg, first, rng)?;
    state.record(Phase::Adversarial, None, Some(lt1), Some(lb1));
    let (lt2, lb2) = step_two(state, cfg, second, rng)?;
    state.record(Phase::Adversarial, None, Some(lt2), Some(lb2));
    Ok(())
}

// ---------------------------------------------------------------------------
// Initialization and evaluation
// ---------------------------------------------------------------------------

/// Held-out SSL loss with a frozen pair/augmentation draw, chunked to a
/// fixed contrastive batch size so the reading is comparable across checks
/// and against the termination ceiling. Never mutates the momentum state.
fn eval_ssl(
    ssl: &SslBranch,
    moco: &Option<MomentumState>,
    videos: &[VideoClip],
    idxs: &[usize],
    cfg: &MinimaxConfig,
    spec: &ClipSpec,
) -> Result<f64> {
    let n_eval = idxs.len().max(2).min(cfg.batch);
    let mut rng = rng_for(cfg.seed, "ssl-val");
    let mut chunks: Vec<&[usize]> = idxs.chunks(n_eval).collect();
    if chunks.len() > 1 && chunks.last().unwrap().len() < n_eval {
        chunks.pop();
    }
    let mut total = 0.0;
    let count = chunks.len();
    for chunk in chunks {
        let (v1, v2) = ssl_views(videos, chunk, cfg, spec, &mut rng)?;
        let n = v1.shape()[0];
        let plans1 = draw_plans(v1.shape(), n, &mut rng);
        let plans2 = draw_plans(v2.shape(), n, &mut rng);
        let mut probe = moco.clone();
        let mut tape = Tape::new();
        let r1 = tape.leaf(v1);
        let r2 = tape.leaf(v2);
        let l = ssl_objective_graph(
            &mut tape,
            ssl,
            0,
            r1,
            r2,
            cfg.objective,
            cfg.tau,
            &plans1,
            &plans2,
            probe.as_mut(),
        )?;
        total += tape.scalar(l);
    }
    Ok(total / count as f64)
}

/// Held-out action loss on one deterministic clip per video.
fn eval_utility(
    utility: &UtilityModel,
    videos: &[VideoClip],
    idxs: &[usize],
    actions: &[ActionLabels],
    num_classes: usize,
    multilabel: bool,
    spec: &ClipSpec,
) -> Result<f64> {
    let offsets = vec![0usize; idxs.len()];
    let x = stack_clip_batch(videos, idxs, &offsets, spec);
    let labels = action_labels(actions, idxs, num_classes, multilabel)?;
    let mut tape = Tape::new();
    let xr = tape.leaf(x);
    let l = utility_loss_graph(&mut tape, utility, 0, xr, &labels)?;
    Ok(tape.scalar(l))
}

/// Trains the action and SSL branches on the frozen anonymizer's outputs,
/// stopping each at its threshold (or plateau, for the SSL branch without
/// one) within the configured budgets.
pub fn init_auxiliaries(
    state: &mut MinimaxState,
    cfg: &MinimaxConfig,
    corpus: &Corpus,
) -> Result<()> {
    if state.phase != Phase::InitT {
        return Err(Error::Protocol(format!(
            "auxiliary initialization needs a pretrained anonymizer (expected phase init_t, found {:?})",
            state.phase
        )));
    }
    let spec = ClipSpec {
        frames: cfg.clip_frames,
        skip: cfg.clip_skip,
    };
    spec.validate()?;
    let (train_idx, val_idx) = corpus.split();

    // The anonymizer is frozen through both initializations, so every video
    // is anonymized exactly once up front.
    let anon: Vec<VideoClip> = corpus
        .videos
        .iter()
        .map(|v| state.anonymizer.anonymize(v))
        .collect::<Result<_>>()?;

    // -------- action branch --------
    let mut rng = rng_for(cfg.seed, "init-utility");
    let mut plateau = PlateauDetector::new(cfg.plateau_checks, cfg.plateau_eps);
    let mut last_val = f64::INFINITY;
    for epoch in 0..=cfg.utility_init_epochs {
        last_val = eval_utility(
            &state.utility,
            &anon,
            &val_idx,
            &corpus.actions,
            corpus.num_classes,
            corpus.multilabel,
            &spec,
        )?;
        let fired = plateau.observe(last_val);
        if last_val <= cfg.th_t0 || epoch == cfg.utility_init_epochs {
            break;
        }
        if fired {
            state.opt_t.lr /= 10.0;
        }
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut rng);
        let cap = cfg.steps_per_epoch.unwrap_or(usize::MAX);
        for chunk in order.chunks(cfg.batch).take(cap) {
            let offsets: Vec<usize> = chunk
                .iter()
                .map(|&i| random_offset(&anon[i], &spec, &mut rng))
                .collect();
            let x = stack_clip_batch(&anon, chunk, &offsets, &spec);
            let labels =
                action_labels(&corpus.actions, chunk, corpus.num_classes, corpus.multilabel)?;
            let mut tape = Tape::new();
            let xr = tape.leaf(x);
            let l = utility_loss_graph(&mut tape, &state.utility, 0, xr, &labels)?;
            let v = tape.scalar(l);
            tape.backward(l, &mut [&mut state.utility.params]);
            state.opt_t.step(&mut state.utility.params);
            state.utility.params.zero_grads();
            state.record(Phase::InitT, None, Some(v), None);
        }
    }
    state.post_init_l_t = Some(last_val);
    state.advance(Phase::InitB);

    // -------- ssl branch --------
    let mut rng = rng_for(cfg.seed, "init-ssl");
    let mut plateau = PlateauDetector::new(cfg.plateau_checks, cfg.plateau_eps);
    let mut last_val = f64::INFINITY;
    for epoch in 0..=cfg.ssl_init_epochs {
        last_val = eval_ssl(&state.ssl, &state.moco, &anon, &val_idx, cfg, &spec)?;
        let fired = plateau.observe(last_val);
        let reached = match cfg.th_b0 {
            Some(th) => last_val <= th,
            None => fired,
        };
        if reached || epoch == cfg.ssl_init_epochs {
            break;
        }
        if cfg.th_b0.is_some() && fired {
            state.opt_b.lr /= 10.0;
        }
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut rng);
        let cap = cfg.steps_per_epoch.unwrap_or(usize::MAX);
        for chunk in order
            .chunks(cfg.batch)
            .filter(|c| c.len() >= 2)
            .take(cap)
        {
            let (v1, v2) = ssl_views(&anon, chunk, cfg, &spec, &mut rng)?;
            let v = ssl_train_step(state, cfg, v1, v2, &mut rng)?;
            state.record(Phase::InitB, None, None, Some(v));
        }
    }
    state.post_init_l_b = Some(last_val);
    state.advance(Phase::Adversarial);
    Ok(())
}

// ---------------------------------------------------------------------------
// The full run
// ---------------------------------------------------------------------------

/// Why the adversarial loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SslCeilingReached,
    BudgetExhausted,
}

/// Outcome of a full run: the learned anonymizer (auxiliaries are gone), the
/// step log, and the validation trajectories.
#[derive(Debug)]
pub struct RunReport {
    pub anonymizer: AnonymizerModel,
    pub log: Vec<StepRecord>,
    pub post_init_l_t: f64,
    pub post_init_l_b: f64,
    pub val_l_t: Vec<f64>,
    pub val_l_b: Vec<f64>,
    pub final_l_b: f64,
    pub reason: StopReason,
}

fn validate_adversarial(
    state: &MinimaxState,
    cfg: &MinimaxConfig,
    corpus: &Corpus,
    val_idx: &[usize],
    spec: &ClipSpec,
) -> Result<(f64, f64)> {
    let anon: Vec<VideoClip> = val_idx
        .iter()
        .map(|&i| state.anonymizer.anonymize(&corpus.videos[i]))
        .collect::<Result<_>>()?;
    let val_actions: Vec<ActionLabels> =
        val_idx.iter().map(|&i| corpus.actions[i].clone()).collect();
    let all: Vec<usize> = (0..anon.len()).collect();
    let vlt = eval_utility(
        &state.utility,
        &anon,
        &all,
        &val_actions,
        corpus.num_classes,
        corpus.multilabel,
        spec,
    )?;
    let vlb = eval_ssl(&state.ssl, &state.moco, &anon, &all, cfg, spec)?;
    Ok((vlt, vlb))
}

/// Runs the whole pipeline: reconstruction pretraining, auxiliary
/// initialization, then alternating adversarial steps until the held-out SSL
/// loss (mean over the trailing validation window) reaches the ceiling or
/// the epoch budget runs out. Aborts with a diagnostic if the action loss
/// diverges past `divergence_factor` times its post-init value.
pub fn run_minimax(
    manifest: &DatasetManifest,
    cfg: &MinimaxConfig,
    models: &ModelSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    let corpus = Corpus::load(manifest)?;
    let mut ucfg = models.utility.clone();
    ucfg.multilabel = corpus.multilabel;
    let anonymizer = AnonymizerModel::new(models.anonymizer.clone(), cfg.seed)?;
    let mut utility = UtilityModel::new(ucfg, corpus.num_classes, cfg.seed)?;
    utility.bind_labels(&manifest.label_space);
    let ssl = SslBranch::new(models.ssl.clone(), cfg.seed)?;
    let mut state = MinimaxState::new(anonymizer, utility, ssl, cfg);

    let pre = reconstruct_pretrain(&mut state.anonymizer, manifest, cfg)?;
    for v in &pre.train_curve {
        state.record(Phase::InitA, Some(*v), None, None);
    }
    state.advance(Phase::InitT);
    init_auxiliaries(&mut state, cfg, &corpus)?;

    let (train_idx, val_idx) = corpus.split();
    let spec = ClipSpec {
        frames: cfg.clip_frames,
        skip: cfg.clip_skip,
    };
    // The ceiling must match the batch size the validation loss is actually
    // computed with, otherwise it can be unreachable by construction.
    let contrast_n = val_idx.len().max(2).min(cfg.batch);
    let th_bmax = cfg.effective_th_bmax(contrast_n);
    let post_lt = state.post_init_l_t.expect("set during initialization");
    let post_lb = state.post_init_l_b.expect("set during initialization");

    let mut rng = rng_for(cfg.seed, "adversarial");
    let mut window: VecDeque<f64> = VecDeque::new();
    let mut plateau = PlateauDetector::new(cfg.plateau_checks, cfg.plateau_eps);
    let mut val_l_t = Vec::new();
    let mut val_l_b = Vec::new();
    let mut reason = StopReason::BudgetExhausted;
    for _epoch in 0..cfg.adversarial_epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut rng);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch).filter(|c| c.len() >= 2).collect();
        let cap = cfg.steps_per_epoch.unwrap_or(usize::MAX);
        for (iter, pair) in chunks.chunks(2).enumerate() {
            if pair.len() < 2 || iter >= cap {
                break;
            }
            let b1 = make_batch(&corpus, pair[0], cfg, &mut rng)?;
            let b2 = make_batch(&corpus, pair[1], cfg, &mut rng)?;
            adversarial_step(&mut state, cfg, &b1, &b2, &mut rng)?;
        }
        let (vlt, vlb) = validate_adversarial(&state, cfg, &corpus, &val_idx, &spec)?;
        val_l_t.push(vlt);
        val_l_b.push(vlb);
        if vlt > cfg.divergence_factor * post_lt {
            return Err(Error::Divergence(format!(
                "held-out action loss {vlt:.4} exceeded {}x its post-init value {post_lt:.4}",
                cfg.divergence_factor
            )));
        }
        window.push_back(vlb);
        if window.len() > cfg.plateau_checks {
            window.pop_front();
        }
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        if mean >= th_bmax {
            reason = StopReason::SslCeilingReached;
            break;
        }
        if plateau.observe(vlt) {
            state.opt_a.lr /= 10.0;
            state.opt_t.lr /= 10.0;
            state.opt_b.lr /= 10.0;
        }
    }
    state.advance(Phase::Done);
    Ok(RunReport {
        final_l_b: *val_l_b.last().unwrap_or(&post_lb),
        anonymizer: state.anonymizer,
        log: state.log,
        post_init_l_t: post_lt,
        post_init_l_b: post_lb,
        val_l_t,
        val_l_b,
        reason,
    })
}
