//! Masked diffusion transformer with position-aware attention bias.
//!
//! The network predicts the noise added to the target strokes given the
//! context strokes, the mask, a class label and the logSNR of the current
//! diffusion step. All stroke values it sees are per-channel normalized.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stroke::{ClassLabel, StrokeSequence, STROKE_DIM};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    B,
    L,
    Custom,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
            Variant::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
}

impl ModelConfig {
    fn preset(variant: Variant, layers: usize, dim: usize, heads: usize, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            layers,
            dim,
            heads,
            num_classes,
            seq_len: 360,
            lambda_min: 0.0,
            lambda_max: 0.5,
            logsnr_min: -15.0,
            logsnr_max: 15.0,
            mlp_ratio: 4,
            freq_dim: 256,
        }
    }

    pub fn small(num_classes: usize) -> Self {
        Self::preset(Variant::S, 6, 576, 6, num_classes)
    }

    pub fn base(num_classes: usize) -> Self {
        Self::preset(Variant::B, 8, 768, 12, num_classes)
    }

    pub fn large(num_classes: usize) -> Self {
        Self::preset(Variant::L, 12, 768, 12, num_classes)
    }

    pub fn custom(layers: usize, dim: usize, heads: usize, num_classes: usize) -> Self {
        Self::preset(Variant::Custom, layers, dim, heads, num_classes)
    }

    pub fn with_seq_len(mut self, seq_len: usize) -> Self {
        self.seq_len = seq_len;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.seq_len == 0 {
            return bad(format!("degenerate model config {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("feature dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad(format!("frequency embedding dim {} must be even", self.freq_dim));
        }
        if !(0.0..=1.0).contains(&self.lambda_min) || !(0.0..=1.0).contains(&self.lambda_max) || self.lambda_min > self.lambda_max {
            return bad(format!("lambda bounds [{}, {}] outside [0, 1]", self.lambda_min, self.lambda_max));
        }
        if self.logsnr_min >= self.logsnr_max {
            return bad(format!("logsnr bounds [{}, {}] are empty", self.logsnr_min, self.logsnr_max));
        }
        let expected = match self.variant {
            Variant::S => Some((6, 576, 6)),
            Variant::B => Some((8, 768, 12)),
            Variant::L => Some((12, 768, 12)),
            Variant::Custom => None,
        };
        if let Some(shape) = expected {
            if shape != (self.layers, self.dim, self.heads) {
                return bad(format!("variant {} requires (layers, dim, heads) = {shape:?}", self.variant));
            }
        }
        Ok(())
    }
}

/// Per-channel affine normalization of stroke parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; STROKE_DIM],
    pub std: [f32; STROKE_DIM],
}

impl Default for ChannelNorm {
    fn default() -> Self {
        ChannelNorm::identity()
    }
}

impl ChannelNorm {
    pub fn identity() -> Self {
        ChannelNorm {
            mean: [0.0; STROKE_DIM],
            std: [1.0; STROKE_DIM],
        }
    }

    /// Mean and standard deviation of every channel over occupied slots.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a StrokeSequence>) -> Result<Self> {
        let mut n = 0.0f64;
        let mut sum = [0.0f64; STROKE_DIM];
        let mut sq = [0.0f64; STROKE_DIM];
        for seq in seqs {
            for (s, &occ) in seq.strokes.iter().zip(&seq.occupancy) {
                if !occ {
                    continue;
                }
                n += 1.0;
                for (c, v) in s.to_array().into_iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        if n < 2.0 {
            return Err(Error::InvalidArgument("need at least two strokes to fit normalization".into()));
        }
        let mut norm = ChannelNorm::identity();
        for c in 0..STROKE_DIM {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            norm.mean[c] = mean as f32;
            norm.std[c] = var.sqrt().max(1e-3) as f32;
        }
        Ok(norm)
    }

    pub fn normalize(&self, row: &[f32]) -> [f32; STROKE_DIM] {
        std::array::from_fn(|c| (row[c] - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, row: &[f32]) -> [f32; STROKE_DIM] {
        std::array::from_fn(|c| row[c] * self.std[c] + self.mean[c])
    }
}

/// One batch of network inputs. Stroke arrays are `[B, L, 8]` row-major and
/// normalized; `mask` is `[B, L]` with 1 for context rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub batch: usize,
    pub len: usize,
    pub noisy: Vec<T>,
    pub context: Vec<T>,
    pub mask: Vec<T>,
    pub classes: Vec<ClassLabel>,
    pub logsnr: Vec<f64>,
}

impl<T: Real> ModelInput<T> {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let rows = self.batch * self.len;
        let checks = [
            ("sequence length", config.seq_len, self.len),
            ("noisy strokes", rows * STROKE_DIM, self.noisy.len()),
            ("context strokes", rows * STROKE_DIM, self.context.len()),
            ("mask", rows, self.mask.len()),
            ("class labels", self.batch, self.classes.len()),
            ("logsnr values", self.batch, self.logsnr.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::LengthMismatch { what, expected, found });
            }
        }
        for c in &self.classes {
            c.check(config.num_classes)?;
        }
        Ok(())
    }

    /// Concatenates inputs along the batch axis.
    pub fn stack(parts: &[&ModelInput<T>]) -> Result<Self> {
        let len = parts.first().map_or(0, |p| p.len);
        if parts.iter().any(|p| p.len != len) {
            return Err(Error::InvalidArgument("cannot stack inputs of different lengths".into()));
        }
        let mut out = ModelInput {
            batch: 0,
            len,
            noisy: Vec::new(),
            context: Vec::new(),
            mask: Vec::new(),
            classes: Vec::new(),
            logsnr: Vec::new(),
        };
        for p in parts {
            out.batch += p.batch;
            out.noisy.extend_from_slice(&p.noisy);
            out.context.extend_from_slice(&p.context);
            out.mask.extend_from_slice(&p.mask);
            out.classes.extend_from_slice(&p.classes);
            out.logsnr.extend_from_slice(&p.logsnr);
        }
        Ok(out)
    }
}

/// Linear map of logSNR onto `[lambda_min, lambda_max]`, clamped.
pub fn lambda_schedule(logsnr: f64, logsnr_bounds: (f64, f64), lambda_bounds: (f64, f64)) -> f64 {
    let (lo, hi) = logsnr_bounds;
    let u = ((logsnr - lo) / (hi - lo)).clamp(0.0, 1.0);
    let (lmin, lmax) = lambda_bounds;
    if u == 1.0 {
        lmax
    } else {
        lmin + (lmax - lmin) * u
    }
}

/// Row-wise softmax of negative squared distances between positions.
pub fn paab_scores(positions: &[[f64; 2]]) -> Vec<f64> {
    let n = positions.len();
    let mut out = vec![0.0; n * n];
    for (i, p) in positions.iter().enumerate() {
        let row = &mut out[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, q) in positions.iter().enumerate() {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            row[j] = -d2;
            max = max.max(-d2);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// `[cos(t f_i), sin(t f_i)]` with geometrically spaced frequencies.
pub fn frequency_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    out
}

/// Fixed sinusoidal position table of shape `[len, dim]`.
pub fn positional_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64 * 2.0 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(k);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let f = c.dim;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push(ParamSpec { name, shape });
    push("in_ctx.w".into(), vec![STROKE_DIM, f]);
    push("in_ctx.b".into(), vec![f]);
    push("in_p.w".into(), vec![STROKE_DIM, f]);
    push("in_p.b".into(), vec![f]);
    push("t_mlp.0.w".into(), vec![c.freq_dim, f]);
    push("t_mlp.0.b".into(), vec![f]);
    push("t_mlp.2.w".into(), vec![f, f]);
    push("t_mlp.2.b".into(), vec![f]);
    push("class_emb".into(), vec![c.num_classes + 1, f]);
    for i in 0..c.layers {
        let p = format!("blocks.{i}");
        push(format!("{p}.ada.w"), vec![f, 6 * f]);
        push(format!("{p}.ada.b"), vec![6 * f]);
        push(format!("{p}.attn.qkv.w"), vec![f, 3 * f]);
        push(format!("{p}.attn.qkv.b"), vec![3 * f]);
        push(format!("{p}.attn.out.w"), vec![f, f]);
        push(format!("{p}.attn.out.b"), vec![f]);
        push(format!("{p}.mlp.fc1.w"), vec![f, c.mlp_ratio * f]);
        push(format!("{p}.mlp.fc1.b"), vec![c.mlp_ratio * f]);
        push(format!("{p}.mlp.fc2.w"), vec![c.mlp_ratio * f, f]);
        push(format!("{p}.mlp.fc2.b"), vec![f]);
    }
    push("out.w".into(), vec![f, STROKE_DIM]);
    push("out.b".into(), vec![STROKE_DIM]);
    specs
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::LengthMismatch {
                what: "parameter tensors",
                expected: specs.len(),
                found: tensors.len(),
            });
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Malformed(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(ParamStore { specs, tensors, index })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

fn init_params<T: Real>(c: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0, 0.02).expect("valid std");
    let specs = param_specs(c);
    let f = c.dim;
    let tensors = specs
        .iter()
        .map(|s| {
            let name = s.name.as_str();
            let n = crate::tensor::numel(&s.shape);
            let data: Vec<f64> = if name.ends_with(".ada.w") {
                vec![0.0; n]
            } else if name.ends_with(".ada.b") {
                // (beta, gamma, delta) for attention then MLP; gamma starts at 1
                (0..n).map(|i| if (i / f) % 3 == 1 { 1.0 } else { 0.0 }).collect()
            } else if name.starts_with("t_mlp") && name.ends_with(".w") || name == "class_emb" || name == "out.w" {
                (0..n).map(|_| small.sample(&mut rng)).collect()
            } else if name.ends_with(".w") {
                let bound = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            Tensor::from_f64(&s.shape, &data).expect("shape from spec")
        })
        .collect();
    ParamStore::new(specs, tensors).expect("specs and tensors agree")
}

/// Per-forward constants shared by every block.
struct Prepared<T> {
    bias: Arc<Tensor<T>>,
    lambda: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdt<T = f32> {
    pub config: ModelConfig,
    pub norm: ChannelNorm,
    pub params: ParamStore<T>,
}

impl<T: Real> Mdt<T> {
    pub fn init(config: ModelConfig, norm: ChannelNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Mdt { config, norm, params })
    }

    pub fn from_params(config: ModelConfig, norm: ChannelNorm, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_specs(&config);
        if params.specs() != expected.as_slice() {
            return Err(Error::Malformed("parameter manifest does not match the model config".into()));
        }
        Ok(Mdt { config, norm, params })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        self.params.specs()
    }

    pub fn cast<U: Real>(&self) -> Mdt<U> {
        Mdt {
            config: self.config.clone(),
            norm: self.norm,
            params: self.params.cast(),
        }
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn lambda(&self, logsnr: f64) -> f64 {
        let c = &self.config;
        lambda_schedule(logsnr, (c.logsnr_min, c.logsnr_max), (c.lambda_min, c.lambda_max))
    }

    /// Attention bias `[B, 1, L, L]` from the clamped, denormalized positions
    /// of the combined sequence.
    pub fn paab_bias(&self, input: &ModelInput<T>) -> Tensor<T> {
        let l = input.len;
        let mut data = Vec::with_capacity(input.batch * l * l);
        for b in 0..input.batch {
            let positions: Vec<[f64; 2]> = (0..l)
                .map(|i| {
                    let row = b * l + i;
                    let m = input.mask[row];
                    let pick = |c: usize| {
                        let k = row * STROKE_DIM + c;
                        let v = if m > T::zero() { input.context[k] } else { input.noisy[k] };
                        (v.as_f64() * self.norm.std[c] as f64 + self.norm.mean[c] as f64).clamp(0.0, 1.0)
                    };
                    [pick(0), pick(1)]
                })
                .collect();
            data.extend(paab_scores(&positions).into_iter().map(T::of));
        }
        Tensor::new(vec![input.batch, 1, l, l], data).expect("sized above")
    }

    fn p<'t>(&self, vars: &[Var<'t, T>], name: &str) -> Var<'t, T> {
        vars[self.params.position(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    fn linear<'t>(&self, vars: &[Var<'t, T>], x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let w = self.p(vars, &format!("{prefix}.w"));
        let b = self.p(vars, &format!("{prefix}.b"));
        Ok(x.matmul(w)?.add(b)?)
    }

    /// Embedded input stream `[B, L, F]`, positional term included.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, vars: &[Var<'t, T>], input: &ModelInput<T>) -> Result<Var<'t, T>> {
        let (b, l, f) = (input.batch, input.len, self.config.dim);
        let noisy = tape.constant(Tensor::new(vec![b, l, STROKE_DIM], input.noisy.clone())?);
        let ctx = tape.constant(Tensor::new(vec![b, l, STROKE_DIM], input.context.clone())?);
        let m = tape.constant(Tensor::new(vec![b, l, 1], input.mask.clone())?);
        let not_m = tape.constant(Tensor::new(vec![b, l, 1], input.mask.iter().map(|&v| T::one() - v).collect())?);
        let e_p = self.linear(vars, noisy, "in_p")?.mul(not_m)?;
        let e_c = self.linear(vars, ctx, "in_ctx")?.mul(m)?;
        let pos = tape.constant(Tensor::from_f64(&[l, f], &positional_table(l, f))?);
        Ok(e_p.add(e_c)?.add(pos)?)
    }

    /// Timestep plus class conditioning vector `[B, F]`.
    pub fn condition<'t>(&self, tape: &'t Tape<T>, vars: &[Var<'t, T>], input: &ModelInput<T>) -> Result<Var<'t, T>> {
        let fd = self.config.freq_dim;
        let freqs: Vec<f64> = input.logsnr.iter().flat_map(|&t| frequency_embedding(t, fd)).collect();
        let freqs = tape.constant(Tensor::from_f64(&[input.batch, fd], &freqs)?);
        let h = self.linear(vars, freqs, "t_mlp.0")?.silu()?;
        let temb = self.linear(vars, h, "t_mlp.2")?;
        let null = self.config.num_classes;
        let rows: Vec<usize> = input.classes.iter().map(|c| c.id().unwrap_or(null)).collect();
        let cemb = self.p(vars, "class_emb").gather_rows(&rows)?;
        Ok(temb.add(cemb)?)
    }

    fn attention<'t>(&self, vars: &[Var<'t, T>], h: Var<'t, T>, prefix: &str, prep: &Prepared<T>) -> Result<Var<'t, T>> {
        let shape = h.shape();
        let (b, l) = (shape[0], shape[1]);
        let (f, heads, dh) = (self.config.dim, self.config.heads, self.config.head_dim());
        let qkv = self
            .linear(vars, h, &format!("{prefix}.qkv"))?
            .reshape(&[b, l, 3, heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<'t, T>> { Ok(qkv.slice(0, i, 1)?.reshape(&[b, heads, l, dh])?) };
        let q = part(0)?.scale(T::of(1.0 / (dh as f64).sqrt()))?;
        let (k, v) = (part(1)?, part(2)?);
        let o = q.attention(k, v, &prep.bias, &prep.lambda)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, f])?;
        self.linear(vars, o, &format!("{prefix}.out"))
    }

    fn mlp<'t>(&self, vars: &[Var<'t, T>], h: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let h = self.linear(vars, h, &format!("{prefix}.fc1"))?.gelu()?;
        self.linear(vars, h, &format!("{prefix}.fc2"))
    }

    /// `x + delta * op(gamma * x + beta)` for attention, then the MLP.
    fn block<'t>(
        &self,
        vars: &[Var<'t, T>],
        x: Var<'t, T>,
        cond: Var<'t, T>,
        i: usize,
        prep: &Prepared<T>,
    ) -> Result<Var<'t, T>> {
        let f = self.config.dim;
        let b = cond.shape()[0];
        let p = format!("blocks.{i}");
        let mods = self.linear(vars, cond, &format!("{p}.ada"))?.reshape(&[b, 1, 6 * f])?;
        let chunk = |k: usize| mods.slice(2, k * f, f);
        let (beta1, gamma1, delta1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (beta2, gamma2, delta2) = (chunk(3)?, chunk(4)?, chunk(5)?);
        let h = x.mul(gamma1)?.add(beta1)?;
        let x = x.add(self.attention(vars, h, &format!("{p}.attn"), prep)?.mul(delta1)?)?;
        let h = x.mul(gamma2)?.add(beta2)?;
        Ok(x.add(self.mlp(vars, h, &format!("{p}.mlp"))?.mul(delta2)?)?)
    }

    /// Predicted noise `[B, L, 8]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, vars: &[Var<'t, T>], input: &ModelInput<T>) -> Result<Var<'t, T>> {
        input.validate(&self.config)?;
        if vars.len() != self.params.tensors().len() {
            return Err(Error::LengthMismatch {
                what: "bound parameters",
                expected: self.params.tensors().len(),
                found: vars.len(),
            });
        }
        let prep = Prepared {
            bias: Arc::new(self.paab_bias(input)),
            lambda: input.logsnr.iter().map(|&t| T::of(self.lambda(t))).collect(),
        };
        let mut x = self.embed(tape, vars, input)?;
        let cond = self.condition(tape, vars, input)?.silu()?;
        for i in 0..self.config.layers {
            x = self.block(vars, x, cond, i, &prep)?;
        }
        self.linear(vars, x, "out")
    }

    /// Forward pass with frozen weights.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        Ok(self.forward(&tape, &vars, input)?.value())
    }
}
