//! logSNR-parametrized DDPM over the target strokes of a sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::model::{ChannelNorm, Mdt, ModelInput};
use crate::stroke::{ClassLabel, Stroke, StrokeSequence, STROKE_DIM};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 70;
pub const DEFAULT_GUIDANCE: f64 = 1.5;
pub const CLASS_DROP_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
    CosineLogsnr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
    pub shape: ScheduleShape,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            steps: DEFAULT_STEPS,
            logsnr_min: -15.0,
            logsnr_max: 15.0,
            shape: ScheduleShape::Linear,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || self.logsnr_min >= self.logsnr_max || !self.logsnr_min.is_finite() || !self.logsnr_max.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid noise schedule {self:?}")));
        }
        Ok(())
    }

    /// logSNR at step `t` in `1..=steps`, decreasing from the max to the min.
    pub fn logsnr_at(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps)));
        }
        if t == 1 {
            return Ok(self.logsnr_max);
        }
        if t == self.steps {
            return Ok(self.logsnr_min);
        }
        let u = (t - 1) as f64 / (self.steps - 1) as f64;
        Ok(match self.shape {
            ScheduleShape::Linear => self.logsnr_max + (self.logsnr_min - self.logsnr_max) * u,
            ScheduleShape::CosineLogsnr => {
                let b = (-0.5 * self.logsnr_max).exp().atan();
                let a = (-0.5 * self.logsnr_min).exp().atan() - b;
                -2.0 * (a * u + b).tan().ln()
            }
        })
    }

    /// `sigmoid(logsnr(t))`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(sigmoid(self.logsnr_at(t)?))
    }

    /// `n` evenly strided steps from `steps` down to 1.
    pub fn timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::InvalidArgument(format!("sampling steps {n} outside 1..={}", self.steps)));
        }
        if n == 1 {
            return Ok(vec![self.steps]);
        }
        let span = (self.steps - 1) as f64;
        Ok((0..n)
            .map(|i| 1 + ((n - 1 - i) as f64 * span / (n - 1) as f64).round() as usize)
            .collect())
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn forward_noise<T: Real>(x0: &[T], alpha_bar: f64, eps: &[T]) -> Vec<T> {
    let (a, s) = (T::of(alpha_bar.sqrt()), T::of((1.0 - alpha_bar).sqrt()));
    x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
}

/// Scalars of one reverse step between cumulative products `ab_t` and
/// `ab_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub inv_sqrt_alpha: f64,
    pub eps_coeff: f64,
    pub sigma: f64,
}

impl StepCoeffs {
    pub fn new(ab_t: f64, ab_prev: f64) -> Self {
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let var = if ab_prev >= 1.0 { 0.0 } else { beta * (1.0 - ab_prev) / (1.0 - ab_t) };
        StepCoeffs {
            inv_sqrt_alpha: 1.0 / alpha.sqrt(),
            eps_coeff: beta / (1.0 - ab_t).sqrt(),
            sigma: var.max(0.0).sqrt(),
        }
    }
}

/// `(x_t - eps_coeff * eps_hat) / sqrt(alpha) + sigma * z`.
pub fn ddpm_step<T: Real>(x_t: &[T], eps_hat: &[T], c: &StepCoeffs, z: &[T]) -> Vec<T> {
    x_t.iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &z)| {
            let v = c.inv_sqrt_alpha * (x.as_f64() - c.eps_coeff * e.as_f64()) + c.sigma * z.as_f64();
            T::of(v)
        })
        .collect()
}

/// Reverse step from `t` to `t_prev` on `schedule`.
pub fn ddpm_step_at<T: Real>(schedule: &NoiseSchedule, x_t: &[T], eps_hat: &[T], t: usize, t_prev: usize, z: &[T]) -> Result<Vec<T>> {
    if t < 1 || t_prev >= t {
        return Err(Error::InvalidArgument(format!("reverse step {t} -> {t_prev}")));
    }
    let c = StepCoeffs::new(schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
    Ok(ddpm_step(x_t, eps_hat, &c, z))
}

/// Anything that predicts normalized noise for a batch.
pub trait Denoiser {
    fn seq_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn norm(&self) -> ChannelNorm;
    fn predict_noise(&self, input: &ModelInput<f32>) -> Result<Vec<f32>>;
}

impl Denoiser for Mdt<f32> {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn norm(&self) -> ChannelNorm {
        self.norm
    }

    fn predict_noise(&self, input: &ModelInput<f32>) -> Result<Vec<f32>> {
        Ok(self.predict(input)?.into_data())
    }
}

/// `e_uu + s1 (e_uc - e_uu) + s2 (e_cc - e_uc)`.
pub fn mc_cfg_combine(e_uu: &[f32], e_uc: &[f32], e_cc: &[f32], s1: f64, s2: f64) -> Vec<f32> {
    let (s1, s2) = (s1 as f32, s2 as f32);
    e_uu.iter()
        .zip(e_uc)
        .zip(e_cc)
        .map(|((&uu, &uc), &cc)| uu + s1 * (uc - uu) + s2 * (cc - uc))
        .collect()
}

/// State of one sampling chain at a given noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// `[L, 8]` normalized noisy strokes, zero on context rows.
    pub noisy: Vec<f32>,
    /// `[L, 8]` normalized context strokes, zero on predicted rows.
    pub context: Vec<f32>,
    pub mask: Vec<f32>,
    pub class: ClassLabel,
}

fn branch_inputs(chains: &[&ChainState], logsnr: f64) -> (ModelInput<f32>, Vec<[usize; 3]>) {
    let len = chains.first().map_or(0, |c| c.mask.len());
    let mut input = ModelInput {
        batch: 0,
        len,
        noisy: Vec::new(),
        context: Vec::new(),
        mask: Vec::new(),
        classes: Vec::new(),
        logsnr: Vec::new(),
    };
    let mut push = |noisy: &[f32], ctx: Option<&[f32]>, mask: Option<&[f32]>, class: ClassLabel| {
        input.noisy.extend_from_slice(noisy);
        match ctx {
            Some(c) => input.context.extend_from_slice(c),
            None => input.context.extend(std::iter::repeat_n(0.0, noisy.len())),
        }
        match mask {
            Some(m) => input.mask.extend_from_slice(m),
            None => input.mask.extend(std::iter::repeat_n(0.0, len)),
        }
        input.classes.push(class);
        input.logsnr.push(logsnr);
        input.batch += 1;
        input.batch - 1
    };
    let mut slots = Vec::with_capacity(chains.len());
    for c in chains {
        let uu = push(&c.noisy, None, None, ClassLabel::Null);
        // with no context the context-only branch is the unconditional one
        let uc = if c.mask.iter().any(|&m| m > 0.0) {
            push(&c.noisy, Some(&c.context), Some(&c.mask), ClassLabel::Null)
        } else {
            uu
        };
        let cc = if c.class.is_null() {
            uc
        } else {
            push(&c.noisy, Some(&c.context), Some(&c.mask), c.class)
        };
        slots.push([uu, uc, cc]);
    }
    (input, slots)
}

/// Guided noise estimate for each chain, evaluated as one batch.
pub fn mc_cfg_noise<D: Denoiser + ?Sized>(model: &D, chains: &[&ChainState], logsnr: f64, s1: f64, s2: f64) -> Result<Vec<Vec<f32>>> {
    if s1 < 0.0 || s2 < 0.0 {
        return Err(Error::InvalidArgument(format!("guidance scales must be non-negative, got ({s1}, {s2})")));
    }
    if chains.is_empty() {
        return Ok(Vec::new());
    }
    let (input, slots) = branch_inputs(chains, logsnr);
    let out = model.predict_noise(&input)?;
    let rows = input.len * STROKE_DIM;
    if out.len() != input.batch * rows {
        return Err(Error::LengthMismatch {
            what: "denoiser output",
            expected: input.batch * rows,
            found: out.len(),
        });
    }
    let branch = |i: usize| &out[i * rows..(i + 1) * rows];
    Ok(slots
        .iter()
        .map(|&[uu, uc, cc]| mc_cfg_combine(branch(uu), branch(uc), branch(cc), s1, s2))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub steps: usize,
    pub s1: f64,
    pub s2: f64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            steps: DEFAULT_SAMPLING_STEPS,
            s1: DEFAULT_GUIDANCE,
            s2: DEFAULT_GUIDANCE,
        }
    }
}

/// One completion job: context strokes are the rows of `context` whose mask
/// bit is 1.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub context: &'a StrokeSequence,
    pub mask: &'a Mask,
    pub class: ClassLabel,
    pub seed: u64,
}

fn chain_for<D: Denoiser + ?Sized>(model: &D, req: &SampleRequest<'_>, rng: &mut ChaCha8Rng) -> Result<ChainState> {
    let l = model.seq_len();
    if req.context.len() != l {
        return Err(Error::LengthMismatch {
            what: "context sequence",
            expected: l,
            found: req.context.len(),
        });
    }
    if req.mask.len() != l {
        return Err(Error::LengthMismatch {
            what: "mask",
            expected: l,
            found: req.mask.len(),
        });
    }
    req.class.check(model.num_classes())?;
    let norm = model.norm();
    let mut state = ChainState {
        noisy: vec![0.0; l * STROKE_DIM],
        context: vec![0.0; l * STROKE_DIM],
        mask: req.mask.as_f32(),
        class: req.class,
    };
    for i in 0..l {
        let row = i * STROKE_DIM..(i + 1) * STROKE_DIM;
        if req.mask.is_context(i) {
            state.context[row].copy_from_slice(&norm.normalize(&req.context.strokes[i].to_array()));
        } else {
            for v in &mut state.noisy[row] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    Ok(state)
}

/// Runs independent chains in lockstep so each step is one batched call.
pub fn sample_batch<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    requests: &[SampleRequest<'_>],
    params: &SampleParams,
) -> Result<Vec<StrokeSequence>> {
    schedule.validate()?;
    let ts = schedule.timesteps(params.steps)?;
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut chains = requests
        .iter()
        .zip(&mut rngs)
        .map(|(r, rng)| chain_for(model, r, rng))
        .collect::<Result<Vec<_>>>()?;

    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let coeffs = StepCoeffs::new(schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
        let refs: Vec<&ChainState> = chains.iter().collect();
        let eps = mc_cfg_noise(model, &refs, schedule.logsnr_at(t)?, params.s1, params.s2)?;
        for ((chain, eps), rng) in chains.iter_mut().zip(eps).zip(&mut rngs) {
            for (i, &m) in chain.mask.iter().enumerate() {
                if m > 0.0 {
                    continue;
                }
                let row = i * STROKE_DIM..(i + 1) * STROKE_DIM;
                let z: [f32; STROKE_DIM] = if t_prev > 0 {
                    std::array::from_fn(|_| rng.sample(StandardNormal))
                } else {
                    [0.0; STROKE_DIM]
                };
                let next = ddpm_step(&chain.noisy[row.clone()], &eps[row.clone()], &coeffs, &z);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("sampler produced non-finite values at step {t}")));
                }
                chain.noisy[row].copy_from_slice(&next);
            }
        }
    }

    let norm = model.norm();
    Ok(requests
        .iter()
        .zip(&chains)
        .map(|(req, chain)| {
            let mut out = req.context.clone();
            out.class = req.class;
            for i in 0..out.len() {
                if req.mask.is_context(i) {
                    continue;
                }
                let row = &chain.noisy[i * STROKE_DIM..(i + 1) * STROKE_DIM];
                out.strokes[i] = Stroke::from_array(norm.denormalize(row)).clamped();
                out.occupancy[i] = true;
            }
            out
        })
        .collect())
}

pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    request: &SampleRequest<'_>,
    params: &SampleParams,
) -> Result<StrokeSequence> {
    Ok(sample_batch(model, schedule, std::slice::from_ref(request), params)?.remove(0))
}

/// Noised network inputs plus the regression target for one training batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub input: ModelInput<f32>,
    pub eps: Vec<f32>,
    /// Per-row loss weight: `1 / (B * 8 * predicted rows of the item)` on
    /// predicted rows, zero on context rows.
    pub weights: Vec<f32>,
    pub timesteps: Vec<usize>,
}

/// Draws a timestep, noise and the class drop for every item. Only the target
/// rows are noised.
pub fn make_training_batch<R: Rng + ?Sized>(
    items: &[(&StrokeSequence, &Mask)],
    norm: &ChannelNorm,
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let b = items.len();
    let l = items.first().map_or(0, |(s, _)| s.len());
    let mut batch = TrainingBatch {
        input: ModelInput {
            batch: b,
            len: l,
            noisy: vec![0.0; b * l * STROKE_DIM],
            context: vec![0.0; b * l * STROKE_DIM],
            mask: vec![0.0; b * l],
            classes: Vec::with_capacity(b),
            logsnr: Vec::with_capacity(b),
        },
        eps: vec![0.0; b * l * STROKE_DIM],
        weights: vec![0.0; b * l],
        timesteps: Vec::with_capacity(b),
    };
    for (k, (seq, mask)) in items.iter().enumerate() {
        if seq.len() != l || mask.len() != l {
            return Err(Error::LengthMismatch {
                what: "training item",
                expected: l,
                found: if seq.len() != l { seq.len() } else { mask.len() },
            });
        }
        let predicted = mask.predict_count();
        if predicted == 0 {
            return Err(Error::InvalidArgument("mask leaves nothing to predict".into()));
        }
        let t = rng.random_range(1..=schedule.steps);
        let ab = schedule.alpha_bar(t)?;
        let (sa, sn) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
        let w = 1.0 / (b * STROKE_DIM * predicted) as f32;
        for i in 0..l {
            let r = k * l + i;
            let x0 = norm.normalize(&seq.strokes[i].to_array());
            let dst = r * STROKE_DIM..(r + 1) * STROKE_DIM;
            if mask.is_context(i) {
                batch.input.mask[r] = 1.0;
                batch.input.context[dst].copy_from_slice(&x0);
            } else {
                batch.weights[r] = w;
                for (c, &x) in x0.iter().enumerate() {
                    let e: f32 = rng.sample(StandardNormal);
                    batch.eps[r * STROKE_DIM + c] = e;
                    batch.input.noisy[r * STROKE_DIM + c] = sa * x + sn * e;
                }
            }
        }
        let dropped = rng.random_bool(p_drop);
        batch.input.classes.push(if dropped { ClassLabel::Null } else { seq.class });
        batch.input.logsnr.push(schedule.logsnr_at(t)?);
        batch.timesteps.push(t);
    }
    Ok(batch)
}

/// Mean squared error over predicted rows only.
pub fn masked_mse<'t, T: Real>(pred: Var<'t, T>, batch: &TrainingBatch) -> Result<Var<'t, T>> {
    let tape = pred.tape();
    let (b, l) = (batch.input.batch, batch.input.len);
    let eps = tape.constant(Tensor::new(vec![b, l, STROKE_DIM], batch.eps.iter().map(|&v| T::of(v as f64)).collect())?);
    let w = tape.constant(Tensor::new(vec![b, l, 1], batch.weights.iter().map(|&v| T::of(v as f64)).collect())?);
    let diff = pred.sub(eps)?;
    Ok(diff.mul(diff)?.mul(w)?.sum()?)
}

/// Loss of `model` on a prepared batch, recorded on `tape`.
pub fn training_loss<'t, T: Real>(
    model: &Mdt<T>,
    tape: &'t Tape<T>,
    vars: &[Var<'t, T>],
    batch: &TrainingBatch,
) -> Result<Var<'t, T>> {
    let input = ModelInput {
        batch: batch.input.batch,
        len: batch.input.len,
        noisy: batch.input.noisy.iter().map(|&v| T::of(v as f64)).collect(),
        context: batch.input.context.iter().map(|&v| T::of(v as f64)).collect(),
        mask: batch.input.mask.iter().map(|&v| T::of(v as f64)).collect(),
        classes: batch.input.classes.clone(),
        logsnr: batch.input.logsnr.clone(),
    };
    let pred = model.forward(tape, vars, &input)?;
    masked_mse(pred, batch)
}
