#![allow(dead_code)]

use cprn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central differences of `f` around `x`.
pub fn fd_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

pub fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Plain `a·b` over row-major slices.
pub fn matmul_loop(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// Attention computed one score at a time.
pub fn attend_loop(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (t, c) = (k.shape()[0], v.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|l| q.at(&[i, l]) * k.at(&[j, l])).sum::<f64>() * scale)
            .collect();
        let w = softmax_row(&logits);
        for ch in 0..c {
            out[i * c + ch] = (0..t).map(|j| w[j] * v.at(&[j, ch])).sum();
        }
    }
    out
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` over rows of a flat buffer.
pub fn affine_rows(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / c_in;
    let mut out = Vec::with_capacity(rows * c_out);
    for r in 0..rows {
        for o in 0..c_out {
            let mut s = b.data()[o];
            for i in 0..c_in {
                s += x[r * c_in + i] * w.at(&[i, o]);
            }
            out.push(s);
        }
    }
    out
}

pub fn param_affine(store: &cprn::ParameterStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    affine_rows(x, w, b)
}

/// Half-pixel bilinear resize with edge clamping, one output cell at a time.
pub fn resize_loop(x: &[f64], (h, w, c): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let src = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = if i0 == n_in - 1 { 0.0 } else { s - i0 as f64 };
        (i0, i1, f)
    };
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        let (y0, y1, fy) = src(y, h, oh);
        for xx in 0..ow {
            let (x0, x1, fx) = src(xx, w, ow);
            for ch in 0..c {
                let at = |i: usize, j: usize| x[(i * w + j) * c + ch];
                out[(y * ow + xx) * c + ch] = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                    + (1.0 - fy) * fx * at(y0, x1)
                    + fy * (1.0 - fx) * at(y1, x0)
                    + fy * fx * at(y1, x1);
            }
        }
    }
    out
}

/// Location prior from its axis maps: `e_h[i,t]·e_w[j,t]` normalized per word.
pub fn prior_loop(e_h: &[f64], e_w: &[f64], h: usize, w: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * t];
    for k in 0..t {
        let mut z = 0.0;
        for i in 0..h {
            for j in 0..w {
                z += e_h[i * t + k] * e_w[j * t + k];
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j) * t + k] = e_h[i * t + k] * e_w[j * t + k] / z;
            }
        }
    }
    out
}

/// Row/column prior computed from `V`, `L` and the branch parameters under
/// `prefix`. Returns `(mask_roco, e_h, e_w)`.
pub fn roco_prior_loop(
    store: &cprn::ParameterStore,
    prefix: &str,
    v: &Tensor,
    l: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let t = l.shape()[0];
    let mut pooled_h = vec![0.0; h * c];
    let mut pooled_w = vec![0.0; w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                pooled_h[i * c + ch] += v.at(&[i, j, ch]) / w as f64;
                pooled_w[j * c + ch] += v.at(&[i, j, ch]) / h as f64;
            }
        }
    }
    let v_h: Vec<f64> = param_affine(store, &format!("{prefix}.row"), &pooled_h).into_iter().map(gelu_ref).collect();
    let v_w: Vec<f64> = param_affine(store, &format!("{prefix}.col"), &pooled_w).into_iter().map(gelu_ref).collect();
    let h_k = param_affine(store, &format!("{prefix}.word_hk"), l.data());
    let w_k = param_affine(store, &format!("{prefix}.word_wk"), l.data());
    let scale = 1.0 / (c as f64).sqrt();
    let axis_map = |feat: &[f64], keys: &[f64], n: usize| {
        let mut e = vec![0.0; n * t];
        for k in 0..t {
            let logits: Vec<f64> = (0..n)
                .map(|i| (0..c).map(|ch| feat[i * c + ch] * keys[k * c + ch]).sum::<f64>() * scale)
                .collect();
            for (i, p) in softmax_row(&logits).into_iter().enumerate() {
                e[i * t + k] = p;
            }
        }
        e
    };
    let e_h = axis_map(&v_h, &h_k, h);
    let e_w = axis_map(&v_w, &w_k, w);
    (prior_loop(&e_h, &e_w, h, w, t), e_h, e_w)
}

/// Holistic aggregation: word softmax per pixel, optionally averaged with a
/// prior, contracted with `g_v`, then gated by `v_g`. Returns `(out, mask_holi, mask_roho)`.
pub fn guided_loop(v_g: &Tensor, g_k: &Tensor, g_v: &Tensor, prior: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w, c) = (v_g.shape()[0], v_g.shape()[1], v_g.shape()[2]);
    let t = g_k.shape()[0];
    let scale = 1.0 / (c as f64).sqrt();
    let mut holi = vec![0.0; h * w * t];
    let mut roho = vec![0.0; h * w * t];
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        let logits: Vec<f64> = (0..t)
            .map(|k| (0..c).map(|ch| v_g.data()[p * c + ch] * g_k.at(&[k, ch])).sum::<f64>() * scale)
            .collect();
        let s = softmax_row(&logits);
        for k in 0..t {
            holi[p * t + k] = s[k];
            roho[p * t + k] = match prior {
                Some(m) => (m[p * t + k] + s[k]) / 2.0,
                None => s[k],
            };
        }
        for ch in 0..c {
            let agg: f64 = (0..t).map(|k| roho[p * t + k] * g_v.at(&[k, ch])).sum();
            out[p * c + ch] = agg * v_g.data()[p * c + ch];
        }
    }
    (out, holi, roho)
}

pub fn bce_loop(pred: &[f64], truth: &[f64]) -> f64 {
    let eps = 1e-7f64;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| -(y * p.max(eps).ln() + (1.0 - y) * (1.0 - p).max(eps).ln()))
        .sum();
    total / pred.len() as f64
}

/// Overall IoU, mean IoU and Pre@X from pixel index sets.
pub fn metrics_sets(pairs: &[(Vec<bool>, Vec<bool>)], thresholds: &[f64]) -> (f64, f64, Vec<f64>) {
    use std::collections::BTreeSet;
    let set = |bits: &[bool]| bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect::<BTreeSet<_>>();
    let (mut inter, mut union) = (0usize, 0usize);
    let mut ious = Vec::new();
    for (pred, truth) in pairs {
        let (p, t) = (set(pred), set(truth));
        let i = p.intersection(&t).count();
        let u = p.union(&t).count();
        inter += i;
        union += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let overall = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let pre = thresholds
        .iter()
        .map(|&x| ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64)
        .collect();
    (overall, mean, pre)
}
