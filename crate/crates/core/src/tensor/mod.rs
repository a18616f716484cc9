//! Reverse-mode autodiff substrate.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes and
//! replays it in reverse to accumulate gradients. Parameters live outside
//! the tape in [`ParamSet`]s with a stable entry order; a frozen set never
//! receives gradient accumulation or optimizer updates, while gradients
//! still flow *through* its functions to earlier inputs.
//!
//! Everything is `f64`. Determinism: all reductions run in a fixed order,
//! so identical seeds give bit-identical trajectories.

mod conv;
mod tape;

pub use tape::{ColorAffine, Tape, TensorRef};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Arr = ArrayD<f64>;

/// One named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arr,
    pub grad: Arr,
}

/// An ordered collection of parameters with a freeze toggle.
///
/// Entry order is stable and is the serialization order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    name: String,
    frozen: bool,
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            frozen: false,
            entries: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> usize {
        let grad = Arr::zeros(value.raw_dim());
        self.entries.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn value(&self, idx: usize) -> &Arr {
        &self.entries[idx].value
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over names and little-endian value bytes, in entry order.
    /// Used to assert that frozen phases leave parameters untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.entries {
            eat(p.name.as_bytes());
            for &v in p.value.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Flatten all parameter values into one vector (entry order).
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.entries {
            out.extend(p.value.iter().copied());
        }
        out
    }

    /// Flatten all gradients into one vector (entry order).
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.entries {
            out.extend(p.grad.iter().copied());
        }
        out
    }

    /// Overwrite values from a flat vector (entry order).
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat length mismatch");
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.value.len();
            for (dst, src) in p.value.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
    }
}

/// Adam optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Decoupled weight decay applied as `w -= lr * wd * w` each step.
    pub weight_decay: f64,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(set: &ParamSet, lr: f64) -> Self {
        let m = set
            .entries
            .iter()
            .map(|p| Arr::zeros(p.value.raw_dim()))
            .collect();
        let v = set
            .entries
            .iter()
            .map(|p| Arr::zeros(p.value.raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m,
            v,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One update from the set's accumulated gradients; clears them after.
    /// A frozen set is left exactly as-is.
    pub fn step(&mut self, set: &mut ParamSet) {
        if set.frozen {
            return;
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in set.entries.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / b1t;
                    let vhat = *v / b2t;
                    *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
            p.grad.fill(0.0);
        }
    }
}

/// Deterministic RNG for a purpose tag, derived from a base seed.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Kaiming-style uniform init for a weight of the given shape.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference gradient check against analytic gradients.
///
/// `analytic` must be the flat gradient (entry order of `set`) of the scalar
/// `loss` at the current values. Returns the maximum relative error over all
/// parameters, with the denominator floored to avoid blowups at zero.
pub fn finite_diff_check(
    set: &mut ParamSet,
    analytic: &[f64],
    eps: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let base = set.flat_values();
    assert_eq!(analytic.len(), base.len());
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        set.set_flat_values(&plus);
        let lp = loss(set);
        let mut minus = base.clone();
        minus[i] -= eps;
        set.set_flat_values(&minus);
        let lm = loss(set);
        let fd = (lp - lm) / (2.0 * eps);
        let an = analytic[i];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        let err = (fd - an).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    set.set_flat_values(&base);
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn frozen_set_receives_no_updates() {
        let mut set = ParamSet::new("p");
        set.add("w", arr1(&[1.0, 2.0]).into_dyn());
        set.entries_mut()[0].grad.fill(1.0);
        set.freeze();
        let before = set.checksum();
        let mut opt = Adam::new(&set, 0.1);
        opt.step(&mut set);
        assert_eq!(set.checksum(), before);
        set.unfreeze();
        opt.step(&mut set);
        assert_ne!(set.checksum(), before);
    }

    #[test]
    fn finite_diff_on_linear_is_machine_precision() {
        // loss = 3*w0 - 2*w1; gradient is (3, -2) exactly.
        let mut set = ParamSet::new("lin");
        set.add("w", arr1(&[0.7, -0.3]).into_dyn());
        let err = finite_diff_check(&mut set, &[3.0, -2.0], 1e-5, |s| {
            let v = s.value(0);
            3.0 * v[[0]] - 2.0 * v[[1]]
        });
        assert!(err < 1e-8, "err={err}");
    }

    #[test]
    fn checksum_tracks_values() {
        let mut set = ParamSet::new("c");
        set.add("w", arr1(&[1.0]).into_dyn());
        let a = set.checksum();
        set.entries_mut()[0].value[[0]] = 1.0 + 1e-15;
        assert_ne!(set.checksum(), a);
    }
}
