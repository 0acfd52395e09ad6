//! Tiny differentiable sequence model with exact gradients.
//!
//! For completion position `t`, the conditioning vector is the mean embedding
//! of the previous `min(c, available)` tokens of `BOS + prompt + completion`.
//! Then `hidden = tanh(W_eff u + b_h)`, `logits = W_out hidden + b_out`, and the
//! example loss is the mean cross-entropy over completion positions only.
//! Prompt positions only ever act as conditioning.
//!
//! With an adapter, `W_eff = W_h + (alpha / r) * B A` and only `A`, `B` are
//! trainable.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{self, SeededRng};
use crate::params::ParamVector;
use crate::{Error, Result};

pub const EMBED: &str = "embed";
pub const W_HIDDEN: &str = "w_hidden";
pub const B_HIDDEN: &str = "b_hidden";
pub const W_OUT: &str = "w_out";
pub const B_OUT: &str = "b_out";
pub const LORA_A: &str = "lora_a";
pub const LORA_B: &str = "lora_b";

const BASE_SEGMENTS: [&str; 5] = [EMBED, W_HIDDEN, B_HIDDEN, W_OUT, B_OUT];
const ADAPTER_SEGMENTS: [&str; 2] = [LORA_A, LORA_B];

/// A tokenized prompt/completion pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    #[serde(default)]
    pub subtask: Option<u32>,
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

impl Example {
    pub fn new(id: u64, subtask: Option<u32>, prompt: Vec<u32>, completion: Vec<u32>) -> Self {
        Example {
            id,
            subtask,
            prompt,
            completion,
        }
    }

    /// Every token of prompt and completion, in order.
    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.prompt.iter().chain(&self.completion).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub bos_token: u32,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            vocab_size: 34,
            embed_dim: 32,
            hidden_dim: 32,
            context_window: 8,
            bos_token: 32,
            lora: Some(LoraConfig {
                rank: 4,
                alpha: 16.0,
            }),
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("vocab_size, embed_dim and hidden_dim must be >= 1");
        }
        if self.context_window == 0 {
            return bad("context_window must be >= 1");
        }
        if self.bos_token as usize >= self.vocab_size {
            return bad("bos_token must be < vocab_size");
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 || lora.rank > self.hidden_dim.min(self.embed_dim) {
                return bad("lora rank must be in [1, min(hidden_dim, embed_dim)]");
            }
            if !lora.alpha.is_finite() {
                return bad("lora alpha must be finite");
            }
        }
        Ok(())
    }
}

/// Per-position forward quantities kept for the backward pass.
#[derive(Debug, Clone)]
struct Position {
    ctx_start: usize,
    ctx_end: usize,
    target: usize,
    u: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    config: TinyLmConfig,
}

impl TinyLm {
    pub fn new(config: TinyLmConfig) -> Result<Self> {
        config.validate()?;
        Ok(TinyLm { config })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    fn shape(&self) -> Vec<(&'static str, usize)> {
        let c = &self.config;
        let mut shape = vec![
            (EMBED, c.vocab_size * c.embed_dim),
            (W_HIDDEN, c.hidden_dim * c.embed_dim),
            (B_HIDDEN, c.hidden_dim),
            (W_OUT, c.vocab_size * c.hidden_dim),
            (B_OUT, c.vocab_size),
        ];
        if let Some(lora) = &c.lora {
            shape.push((LORA_A, lora.rank * c.embed_dim));
            shape.push((LORA_B, c.hidden_dim * lora.rank));
        }
        shape
    }

    /// All-zero parameters with this model's layout.
    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(&self.shape())
    }

    /// Seeded initialization. Base weights come from one stream and the adapter
    /// from another, so the base is identical with or without an adapter.
    pub fn init(&self, seed: u64) -> ParamVector {
        let c = &self.config;
        let mut p = self.zero_params();
        let mut rng = math::rng(seed);
        fill_uniform(&mut rng, p.get_mut(EMBED).unwrap(), libm::sqrt(3.0));
        fill_uniform(
            &mut rng,
            p.get_mut(W_HIDDEN).unwrap(),
            libm::sqrt(3.0 / c.embed_dim as f64),
        );
        fill_uniform(
            &mut rng,
            p.get_mut(W_OUT).unwrap(),
            libm::sqrt(3.0 / c.hidden_dim as f64),
        );
        if c.lora.is_some() {
            let mut rng = math::rng(math::sub_seed(seed, 0x10a));
            let bound = 1.0 / libm::sqrt(c.embed_dim as f64);
            fill_uniform(&mut rng, p.get_mut(LORA_A).unwrap(), bound);
        }
        p
    }

    /// Names of the segments updated during training.
    pub fn trainable_segments(&self) -> &'static [&'static str] {
        if self.config.lora.is_some() {
            &ADAPTER_SEGMENTS
        } else {
            &BASE_SEGMENTS
        }
    }

    pub fn trainable_len(&self) -> usize {
        let names = self.trainable_segments();
        self.shape()
            .iter()
            .filter(|(n, _)| names.contains(n))
            .map(|(_, l)| l)
            .sum()
    }

    pub fn trainable(&self, params: &ParamVector) -> ParamVector {
        params.gather(self.trainable_segments())
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.completion.is_empty() {
            return Err(Error::InvalidExample {
                id: ex.id,
                reason: "empty completion".into(),
            });
        }
        if let Some(t) = ex.tokens().find(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidExample {
                id: ex.id,
                reason: format!("token {} >= vocab size {}", t, self.config.vocab_size),
            });
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let expected = self.zero_params();
        if !expected.same_layout(params) {
            return Err(Error::dims("model params", expected.len(), params.len()));
        }
        Ok(())
    }

    /// `W_h + scaling * B A`, row-major `h x e`.
    fn effective_hidden_weight(&self, params: &ParamVector) -> Vec<f64> {
        let c = &self.config;
        let mut w = params.get(W_HIDDEN).unwrap().to_vec();
        if let Some(lora) = &c.lora {
            let a = params.get(LORA_A).unwrap();
            let b = params.get(LORA_B).unwrap();
            let s = lora.scaling();
            let (e, r) = (c.embed_dim, lora.rank);
            for i in 0..c.hidden_dim {
                for j in 0..e {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += b[i * r + k] * a[k * e + j];
                    }
                    w[i * e + j] += s * acc;
                }
            }
        }
        w
    }

    fn stream(&self, ex: &Example) -> Vec<usize> {
        let mut s = Vec::with_capacity(1 + ex.prompt.len() + ex.completion.len());
        s.push(self.config.bos_token as usize);
        s.extend(ex.tokens().map(|t| t as usize));
        s
    }

    fn position(
        &self,
        params: &ParamVector,
        w_eff: &[f64],
        stream: &[usize],
        pos: usize,
        target: usize,
    ) -> Position {
        let c = &self.config;
        let (e, h, v) = (c.embed_dim, c.hidden_dim, c.vocab_size);
        let embed = params.get(EMBED).unwrap();
        let b_h = params.get(B_HIDDEN).unwrap();
        let w_out = params.get(W_OUT).unwrap();
        let b_out = params.get(B_OUT).unwrap();

        let ctx_start = pos.saturating_sub(c.context_window);
        let n = (pos - ctx_start) as f64;
        let mut u = vec![0.0; e];
        for &tok in &stream[ctx_start..pos] {
            for (uj, ej) in u.iter_mut().zip(&embed[tok * e..(tok + 1) * e]) {
                *uj += ej;
            }
        }
        for uj in u.iter_mut() {
            *uj /= n;
        }

        let mut hidden = vec![0.0; h];
        for i in 0..h {
            let pre = b_h[i] + math::dot(&w_eff[i * e..(i + 1) * e], &u);
            hidden[i] = libm::tanh(pre);
        }
        let mut logits = vec![0.0; v];
        for k in 0..v {
            logits[k] = b_out[k] + math::dot(&w_out[k * h..(k + 1) * h], &hidden);
        }
        let lse = math::log_sum_exp(&logits);
        let probs: Vec<f64> = logits.iter().map(|&l| libm::exp(l - lse)).collect();
        Position {
            ctx_start,
            ctx_end: pos,
            target,
            u,
            hidden,
            probs,
            loss: lse - logits[target],
        }
    }

    fn forward(&self, ex: &Example, params: &ParamVector) -> Result<Vec<Position>> {
        self.check_example(ex)?;
        self.check_params(params)?;
        let w_eff = self.effective_hidden_weight(params);
        let stream = self.stream(ex);
        let first = 1 + ex.prompt.len();
        Ok((first..stream.len())
            .map(|pos| self.position(params, &w_eff, &stream, pos, stream[pos]))
            .collect())
    }

    /// Cross-entropy of each completion token.
    pub fn token_losses(&self, ex: &Example, params: &ParamVector) -> Result<Vec<f64>> {
        Ok(self.forward(ex, params)?.iter().map(|p| p.loss).collect())
    }

    /// Mean cross-entropy over completion positions, in nats.
    pub fn loss(&self, ex: &Example, params: &ParamVector) -> Result<f64> {
        let losses = self.token_losses(ex, params)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Hidden activation at the final completion position.
    pub fn last_hidden(&self, ex: &Example, params: &ParamVector) -> Result<Vec<f64>> {
        let mut positions = self.forward(ex, params)?;
        Ok(positions.pop().unwrap().hidden)
    }

    /// Exact gradient of [`loss`](Self::loss). With `trainable_only` the result
    /// holds just the trainable segments; otherwise it spans the full layout.
    pub fn grad(
        &self,
        ex: &Example,
        params: &ParamVector,
        trainable_only: bool,
    ) -> Result<ParamVector> {
        let positions = self.forward(ex, params)?;
        let mut g = self.zero_params();
        let stream = self.stream(ex);
        let scale = 1.0 / positions.len() as f64;
        let parts = self.parts(trainable_only);
        let w_eff = self.effective_hidden_weight(params);
        for p in &positions {
            self.backward(params, &w_eff, &stream, p, scale, parts, &mut g.values);
        }
        Ok(self.restrict(g, trainable_only))
    }

    /// One trainable-segment gradient per completion token; their mean is
    /// [`grad`](Self::grad) with `trainable_only = true`.
    pub fn per_token_grads(&self, ex: &Example, params: &ParamVector) -> Result<Vec<ParamVector>> {
        let positions = self.forward(ex, params)?;
        let stream = self.stream(ex);
        let parts = self.parts(true);
        let w_eff = self.effective_hidden_weight(params);
        Ok(positions
            .iter()
            .map(|p| {
                let mut g = self.zero_params();
                self.backward(params, &w_eff, &stream, p, 1.0, parts, &mut g.values);
                self.restrict(g, true)
            })
            .collect())
    }

    fn parts(&self, trainable_only: bool) -> Parts {
        let adapter = self.config.lora.is_some();
        Parts {
            base: !(trainable_only && adapter),
            adapter,
        }
    }

    fn restrict(&self, g: ParamVector, trainable_only: bool) -> ParamVector {
        if trainable_only {
            g.gather(self.trainable_segments())
        } else {
            g
        }
    }

    /// Accumulates `scale * d(token loss)/d(params)` into `out` (full layout).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &ParamVector,
        w_eff: &[f64],
        stream: &[usize],
        p: &Position,
        scale: f64,
        parts: Parts,
        out: &mut [f64],
    ) {
        let c = &self.config;
        let (e, h, v) = (c.embed_dim, c.hidden_dim, c.vocab_size);
        let off = |name: &str| params.segment(name).map(|s| s.offset).unwrap_or(0);
        let w_out = params.get(W_OUT).unwrap();

        let mut dlogits = p.probs.clone();
        dlogits[p.target] -= 1.0;
        for d in dlogits.iter_mut() {
            *d *= scale;
        }

        // dhidden = W_out^T dlogits, then through tanh
        let mut dpre = vec![0.0; h];
        for k in 0..v {
            let dk = dlogits[k];
            if dk != 0.0 {
                math::axpy(dk, &w_out[k * h..(k + 1) * h], &mut dpre);
            }
        }
        for (d, hid) in dpre.iter_mut().zip(&p.hidden) {
            *d *= 1.0 - hid * hid;
        }

        if parts.base {
            let o = off(B_OUT);
            for k in 0..v {
                out[o + k] += dlogits[k];
            }
            let o = off(W_OUT);
            for k in 0..v {
                let dk = dlogits[k];
                for i in 0..h {
                    out[o + k * h + i] += dk * p.hidden[i];
                }
            }
            let o = off(B_HIDDEN);
            for i in 0..h {
                out[o + i] += dpre[i];
            }
            let o = off(W_HIDDEN);
            for i in 0..h {
                for j in 0..e {
                    out[o + i * e + j] += dpre[i] * p.u[j];
                }
            }
            // du = W_eff^T dpre, spread evenly over the context tokens
            let mut du = vec![0.0; e];
            for i in 0..h {
                math::axpy(dpre[i], &w_eff[i * e..(i + 1) * e], &mut du);
            }
            let inv_n = 1.0 / (p.ctx_end - p.ctx_start) as f64;
            let o = off(EMBED);
            for &tok in &stream[p.ctx_start..p.ctx_end] {
                for j in 0..e {
                    out[o + tok * e + j] += du[j] * inv_n;
                }
            }
        }

        if parts.adapter {
            let lora = c.lora.as_ref().unwrap();
            let r = lora.rank;
            let s = lora.scaling();
            let a = params.get(LORA_A).unwrap();
            let b = params.get(LORA_B).unwrap();
            // dB = s * dpre (A u)^T
            let mut au = vec![0.0; r];
            for k in 0..r {
                au[k] = math::dot(&a[k * e..(k + 1) * e], &p.u);
            }
            let o = off(LORA_B);
            for i in 0..h {
                for k in 0..r {
                    out[o + i * r + k] += s * dpre[i] * au[k];
                }
            }
            // dA = s * (B^T dpre) u^T
            let o = off(LORA_A);
            for k in 0..r {
                let mut btd = 0.0;
                for i in 0..h {
                    btd += b[i * r + k] * dpre[i];
                }
                for j in 0..e {
                    out[o + k * e + j] += s * btd * p.u[j];
                }
            }
        }
    }

    /// Logits for the next token after `context` (BOS is prepended).
    pub fn next_logits(&self, context: &[u32], params: &ParamVector) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let w_eff = self.effective_hidden_weight(params);
        let mut stream = Vec::with_capacity(context.len() + 2);
        stream.push(self.config.bos_token as usize);
        stream.extend(context.iter().map(|&t| t as usize));
        let pos = stream.len();
        stream.push(0);
        let p = self.position(params, &w_eff, &stream, pos, 0);
        // logits up to the shared log-sum-exp shift are enough for argmax
        Ok(p.probs.iter().map(|&q| libm::log(q)).collect())
    }

    /// Greedy decode of `len` tokens after `prompt`.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        len: usize,
        params: &ParamVector,
    ) -> Result<Vec<u32>> {
        let mut ctx = prompt.to_vec();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = self.next_logits(&ctx, params)?;
            let tok = math::argmax(&logits) as u32;
            out.push(tok);
            ctx.push(tok);
        }
        Ok(out)
    }

    /// Fraction of completion positions whose teacher-forced argmax is the target.
    pub fn token_accuracy(&self, ex: &Example, params: &ParamVector) -> Result<f64> {
        let positions = self.forward(ex, params)?;
        let hits = positions
            .iter()
            .filter(|p| math::argmax(&p.probs) == p.target)
            .count();
        Ok(hits as f64 / positions.len() as f64)
    }
}

#[derive(Debug, Clone, Copy)]
struct Parts {
    base: bool,
    adapter: bool,
}

fn fill_uniform(rng: &mut SeededRng, xs: &mut [f64], bound: f64) {
    for x in xs {
        *x = math::uniform(rng, bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(lora: Option<LoraConfig>) -> TinyLm {
        TinyLm::new(TinyLmConfig {
            vocab_size: 7,
            embed_dim: 4,
            hidden_dim: 5,
            context_window: 3,
            bos_token: 6,
            lora,
        })
        .unwrap()
    }

    fn ex() -> Example {
        Example::new(0, None, vec![1, 2, 3], vec![4, 0, 5])
    }

    #[test]
    fn zero_model_loss_is_ln_vocab() {
        let m = small(None);
        let p = m.zero_params();
        let l = m.loss(&ex(), &p).unwrap();
        assert!((l - libm::log(7.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_model_b_out_gradient_closed_form() {
        let m = small(None);
        let p = m.zero_params();
        let e = ex();
        let g = m.grad(&e, &p, true).unwrap();
        let b_out = g.get(B_OUT).unwrap();
        for k in 0..7 {
            let freq = e.completion.iter().filter(|&&t| t as usize == k).count() as f64 / 3.0;
            assert!((b_out[k] - (1.0 / 7.0 - freq)).abs() < 1e-15);
        }
        assert!(math::all_finite(&g.values));
    }

    #[test]
    fn zero_model_last_hidden_is_zero() {
        let m = small(None);
        let h = m.last_hidden(&ex(), &m.zero_params()).unwrap();
        assert_eq!(h, vec![0.0; 5]);
    }

    #[test]
    fn invalid_tokens_rejected() {
        let m = small(None);
        let p = m.zero_params();
        let bad = Example::new(3, None, vec![9], vec![1]);
        assert!(matches!(
            m.loss(&bad, &p),
            Err(Error::InvalidExample { id: 3, .. })
        ));
        let empty = Example::new(4, None, vec![1], vec![]);
        assert!(m.grad(&empty, &p, true).is_err());
    }

    #[test]
    fn wrong_param_layout_rejected() {
        let m = small(None);
        let p = small(Some(LoraConfig {
            rank: 2,
            alpha: 4.0,
        }))
        .zero_params();
        assert!(matches!(
            m.loss(&ex(), &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lora_rank_bounds() {
        let mut c = small(None).config().clone();
        c.lora = Some(LoraConfig {
            rank: 5,
            alpha: 1.0,
        });
        assert!(TinyLm::new(c.clone()).is_err());
        c.lora = Some(LoraConfig {
            rank: 0,
            alpha: 1.0,
        });
        assert!(TinyLm::new(c).is_err());
    }

    #[test]
    fn adapter_neutral_at_init() {
        let plain = small(None);
        let lora = small(Some(LoraConfig {
            rank: 2,
            alpha: 8.0,
        }));
        let pp = plain.init(11);
        let pl = lora.init(11);
        assert_eq!(pp.get(EMBED), pl.get(EMBED));
        assert!(pl.get(LORA_B).unwrap().iter().all(|&b| b == 0.0));
        let e = ex();
        assert_eq!(plain.loss(&e, &pp).unwrap(), lora.loss(&e, &pl).unwrap());
        assert_eq!(
            plain.last_hidden(&e, &pp).unwrap(),
            lora.last_hidden(&e, &pl).unwrap()
        );
    }

    #[test]
    fn adapter_trainable_subset() {
        let lora = small(Some(LoraConfig {
            rank: 2,
            alpha: 8.0,
        }));
        let p = lora.init(1);
        let g = lora.grad(&ex(), &p, true).unwrap();
        let names: Vec<_> = g.layout.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec![LORA_A, LORA_B]);
        assert_eq!(g.len(), lora.trainable_len());
        // B = 0 at init, so dA vanishes and dB carries the signal
        assert!(g.get(LORA_A).unwrap().iter().all(|&x| x == 0.0));
        assert!(g.get(LORA_B).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn single_token_completion_per_token_equals_grad() {
        let m = small(None);
        let p = m.init(3);
        let e = Example::new(0, None, vec![1, 2], vec![5]);
        let toks = m.per_token_grads(&e, &p).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0], m.grad(&e, &p, true).unwrap());
    }

    #[test]
    fn repeated_token_same_loss_when_position_independent() {
        // b_out only: logits do not depend on the context at all
        let m = small(None);
        let mut p = m.zero_params();
        p.get_mut(B_OUT)
            .unwrap()
            .copy_from_slice(&[0.3, -0.2, 0.1, 0.9, -1.0, 0.0, 0.4]);
        let one = Example::new(0, None, vec![1], vec![3]);
        let three = Example::new(1, None, vec![1], vec![3, 3, 3]);
        let a = m.loss(&one, &p).unwrap();
        let b = m.loss(&three, &p).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn last_hidden_deterministic() {
        let m = small(Some(LoraConfig {
            rank: 2,
            alpha: 8.0,
        }));
        let p = m.init(5);
        assert_eq!(
            m.last_hidden(&ex(), &p).unwrap(),
            m.last_hidden(&ex(), &p).unwrap()
        );
    }

    #[test]
    fn greedy_decode_length() {
        let m = small(None);
        let p = m.init(2);
        let out = m.greedy_decode(&[1, 2], 4, &p).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|&t| t < 7));
    }
}
