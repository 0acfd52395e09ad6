//! Straight-line reference implementations used as test oracles.
#![allow(dead_code)]

use less_core::model::{Example, TinyLmConfig};
use less_core::params::ParamVector;

/// Per-token cross-entropies and final hidden state, computed with plain loops
/// directly from the model definition.
pub fn reference_forward(
    cfg: &TinyLmConfig,
    p: &ParamVector,
    ex: &Example,
) -> (Vec<f64>, Vec<f64>) {
    let (v, e, h, c) = (
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.context_window,
    );
    let embed = p.get("embed").unwrap();
    let wh = p.get("w_hidden").unwrap();
    let bh = p.get("b_hidden").unwrap();
    let wo = p.get("w_out").unwrap();
    let bo = p.get("b_out").unwrap();

    let mut w = vec![vec![0.0; e]; h];
    for i in 0..h {
        for j in 0..e {
            w[i][j] = wh[i * e + j];
            if let Some(l) = &cfg.lora {
                let a = p.get("lora_a").unwrap();
                let b = p.get("lora_b").unwrap();
                let mut s = 0.0;
                for k in 0..l.rank {
                    s += b[i * l.rank + k] * a[k * e + j];
                }
                w[i][j] += l.alpha / l.rank as f64 * s;
            }
        }
    }

    let mut stream = vec![cfg.bos_token as usize];
    stream.extend(ex.prompt.iter().map(|&t| t as usize));
    stream.extend(ex.completion.iter().map(|&t| t as usize));

    let mut losses = Vec::new();
    let mut last = Vec::new();
    for pos in (1 + ex.prompt.len())..stream.len() {
        let lo = pos.saturating_sub(c);
        let mut u = vec![0.0; e];
        for &tok in &stream[lo..pos] {
            for j in 0..e {
                u[j] += embed[tok * e + j];
            }
        }
        for x in u.iter_mut() {
            *x /= (pos - lo) as f64;
        }
        let mut hid = vec![0.0; h];
        for i in 0..h {
            let mut a = bh[i];
            for j in 0..e {
                a += w[i][j] * u[j];
            }
            hid[i] = a.tanh();
        }
        let mut logits = vec![0.0; v];
        for k in 0..v {
            logits[k] = bo[k];
            for i in 0..h {
                logits[k] += wo[k * h + i] * hid[i];
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        losses.push(mx + z.ln() - logits[stream[pos]]);
        last = hid;
    }
    (losses, last)
}

pub fn reference_loss(cfg: &TinyLmConfig, p: &ParamVector, ex: &Example) -> f64 {
    let (l, _) = reference_forward(cfg, p, ex);
    l.iter().sum::<f64>() / l.len() as f64
}

/// Central differences of `f` at every coordinate of `p`.
pub fn central_diff(
    p: &ParamVector,
    step: f64,
    mut f: impl FnMut(&ParamVector) -> f64,
) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let x = q.values[i];
            q.values[i] = x + step;
            let up = f(&q);
            q.values[i] = x - step;
            let down = f(&q);
            q.values[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max of `|a - f| / max(|a|, |f|)` over coordinates with `|a| > floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut counted = 0;
    for (a, f) in analytic.iter().zip(numeric) {
        if a.abs() > floor {
            counted += 1;
            worst = worst.max((a - f).abs() / a.abs().max(f.abs()));
        }
    }
    (worst, counted)
}
