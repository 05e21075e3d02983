#![allow(dead_code)]

use mgt_core::attention::{LayerShape, QuasiAttentionLayer};
use mgt_core::mask::GraphMask;
use mgt_core::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// A standalone layer whose Ĝ is filled with noise when `g_hat_std > 0`.
pub fn layer(seed: u64, shape: LayerShape, g_hat_std: f64) -> (ParamStore, QuasiAttentionLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = QuasiAttentionLayer::new(&mut store, "l", shape, &mut r).unwrap();
    if g_hat_std > 0.0 {
        let g = random_tensor(&[shape.heads, shape.l_max, shape.l_max], g_hat_std, &mut r);
        store.get_mut(layer.params.g_hat).value.data_mut().copy_from_slice(g.data());
    }
    (store, layer)
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Reference multi-head attention written with plain loops:
/// `concat_i softmax(Q_i K_iᵀ/√d_h + bias_i) V_i · W_o`, where `bias_i` is
/// `mask + lambda·ĝ[i]` when given.
pub fn naive_attention(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    w_o: &Tensor,
    heads: usize,
    extra: Option<(&GraphMask, f64, &Tensor)>,
) -> Vec<Vec<f64>> {
    let x = mat(x);
    let l = x.len();
    let d = w_q.rows();
    let hd = d / heads;
    let proj = |w: &Tensor| -> Vec<Vec<f64>> {
        (0..l)
            .map(|r| (0..d).map(|c| (0..d).map(|k| x[r][k] * w.at(k, c)).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(w_q), proj(w_k), proj(w_v));
    let mut cat = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let mut s: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            if let Some((mask, lambda, g_hat)) = extra {
                let lmax = g_hat.shape()[1];
                for (j, sj) in s.iter_mut().enumerate() {
                    let m = if mask.is_open(i, j) { 0.0 } else { f64::NEG_INFINITY };
                    *sj += m + lambda * g_hat.data()[h * lmax * lmax + i * lmax + j];
                }
            }
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - top).exp() }).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    (0..l)
        .map(|r| (0..d).map(|c| (0..d).map(|k| cat[r][k] * w_o.at(k, c)).sum()).collect())
        .collect()
}

pub fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((a.at(r, c) - v).abs());
        }
    }
    worst
}

/// Symmetric random mask with Open diagonal.
pub fn symmetric_mask(n: usize, p_open: f64, rng: &mut impl Rng) -> GraphMask {
    let mut m = GraphMask::diagonal(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p_open) {
                m.set(i, j, true);
                m.set(j, i, true);
            }
        }
    }
    m
}
