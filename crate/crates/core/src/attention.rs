//! Multi-head quasi-attention and the pre-norm transformer layer around it.
//!
//! Per head the logits are `QKᵀ/√d_head + G + λĜ[head]`. `G` is a constant
//! tape input (so it never sees a gradient); `Ĝ` is a trainable parameter of
//! shape `h×L_max×L_max` sliced to the live sequence length. Blocked cells of
//! `G` are `-inf` and stay `-inf` whatever `Ĝ` holds.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Parameter, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub lambda: f64,
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.l_max == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Scalar parameter count of one layer.
    pub fn num_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + self.heads * self.l_max * self.l_max + 2 * d * f + f + d + 4 * d
    }
}

/// Parameter handles of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub g_hat: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuasiAttentionLayer {
    pub shape: LayerShape,
    pub params: LayerParams,
}

pub(crate) fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Per-head projections of one sequence.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

impl QuasiAttentionLayer {
    /// Registers the layer's parameters under `prefix`. Ĝ starts at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        shape: LayerShape,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let (d, f, h, l) = (shape.d_model, shape.d_ff, shape.heads, shape.l_max);
        let proj_std = (1.0 / d as f64).sqrt();
        let mut add = |name: &str, t: Tensor| store.add(Parameter::new(format!("{prefix}.{name}"), t));
        let params = LayerParams {
            ln1_gain: add("ln1.gain", Tensor::full(&[d], 1.0)),
            ln1_bias: add("ln1.bias", Tensor::zeros(&[d])),
            w_q: add("attn.w_q", randn(&[d, d], proj_std, rng)),
            w_k: add("attn.w_k", randn(&[d, d], proj_std, rng)),
            w_v: add("attn.w_v", randn(&[d, d], proj_std, rng)),
            w_o: add("attn.w_o", randn(&[d, d], proj_std, rng)),
            g_hat: add("attn.g_hat", Tensor::zeros(&[h, l, l])),
            ln2_gain: add("ln2.gain", Tensor::full(&[d], 1.0)),
            ln2_bias: add("ln2.bias", Tensor::zeros(&[d])),
            ffn_w1: add("ffn.w1", randn(&[d, f], (2.0 / d as f64).sqrt(), rng)),
            ffn_b1: add("ffn.b1", Tensor::zeros(&[f])),
            ffn_w2: add("ffn.w2", randn(&[f, d], (1.0 / f as f64).sqrt(), rng)),
            ffn_b2: add("ffn.b2", Tensor::zeros(&[d])),
        };
        Ok(Self { shape, params })
    }

    /// `H·W_q`, `H·W_k`, `H·W_v`, each split into `h` contiguous column
    /// slices of width `d_model/h`.
    pub fn qkv_project(&self, tape: &mut Tape, x: Var) -> Result<HeadProjections> {
        let l = tape.value(x).rows();
        if l > self.shape.l_max {
            return Err(Error::Capacity {
                len: l,
                max: self.shape.l_max,
            });
        }
        let hd = self.shape.head_dim();
        let mut split = |w: ParamId| -> Result<Vec<Var>> {
            let wv = tape.param(w);
            let full = tape.matmul(x, wv)?;
            (0..self.shape.heads)
                .map(|i| tape.slice_cols(full, i * hd, hd))
                .collect()
        };
        Ok(HeadProjections {
            q: split(self.params.w_q)?,
            k: split(self.params.w_k)?,
            v: split(self.params.w_v)?,
        })
    }

    /// Quasi-attention over `x: L×d_model`. `mask` is the additive `L×L`
    /// constant `G` (`0`/`-inf`). With `None` neither `G` nor `λĜ` is added,
    /// which is plain scaled dot-product attention. Returns the output and
    /// the post-softmax weights of every head.
    pub fn attend(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let l = tape.value(x).rows();
        if let Some(m) = mask {
            let ms = tape.value(m).shape();
            if ms != [l, l] {
                return Err(Error::dim("quasi_attention mask", ms, &[l, l]));
            }
        }
        let proj = self.qkv_project(tape, x)?;
        let scale = 1.0 / (self.shape.head_dim() as f64).sqrt();
        let g_hat = tape.param(self.params.g_hat);
        let mut heads = Vec::with_capacity(self.shape.heads);
        let mut weights = Vec::with_capacity(self.shape.heads);
        for i in 0..self.shape.heads {
            let kt = tape.transpose(proj.k[i])?;
            let raw = tape.matmul(proj.q[i], kt)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
                let bias = tape.block(g_hat, i, l, l)?;
                let bias = tape.scale(bias, self.shape.lambda);
                scores = tape.add(scores, bias)?;
            }
            let w = tape.masked_row_softmax(scores)?;
            heads.push(tape.matmul(w, proj.v[i])?);
            weights.push(w);
        }
        let cat = tape.concat_cols(&heads)?;
        let w_o = tape.param(self.params.w_o);
        Ok((tape.matmul(cat, w_o)?, weights))
    }

    pub fn quasi_attention_forward(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Result<Var> {
        Ok(self.attend(tape, x, mask)?.0)
    }

    /// `y = x + Attn(LN(x))`, `out = y + FFN(LN(y))` with a ReLU FFN.
    pub fn forward_traced(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let p = &self.params;
        let (g1, b1) = (tape.param(p.ln1_gain), tape.param(p.ln1_bias));
        let n1 = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (a, weights) = self.attend(tape, n1, mask)?;
        let y = tape.add(x, a)?;

        let (g2, b2) = (tape.param(p.ln2_gain), tape.param(p.ln2_bias));
        let n2 = tape.layer_norm(y, g2, b2, LN_EPS)?;
        let w1 = tape.param(p.ffn_w1);
        let h = tape.matmul(n2, w1)?;
        let fb1 = tape.param(p.ffn_b1);
        let h = tape.add_row(h, fb1)?;
        let h = tape.relu(h);
        let w2 = tape.param(p.ffn_w2);
        let f = tape.matmul(h, w2)?;
        let fb2 = tape.param(p.ffn_b2);
        let f = tape.add_row(f, fb2)?;
        Ok((tape.add(y, f)?, weights))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Result<Var> {
        Ok(self.forward_traced(tape, x, mask)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const NINF: f64 = f64::NEG_INFINITY;

    fn layer(d: usize, h: usize, l_max: usize, lambda: f64, seed: u64) -> (ParamStore, QuasiAttentionLayer) {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let shape = LayerShape {
            d_model: d,
            heads: h,
            d_ff: 2 * d,
            l_max,
            lambda,
        };
        let layer = QuasiAttentionLayer::new(&mut store, "layer0", shape, &mut rng).unwrap();
        (store, layer)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        let p = store.get_mut(id);
        p.value = t.with_grad();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let shape = LayerShape {
            d_model: 6,
            heads: 4,
            d_ff: 4,
            l_max: 4,
            lambda: 1.0,
        };
        assert!(QuasiAttentionLayer::new(&mut store, "l", shape, &mut rng).is_err());
    }

    #[test]
    fn identity_projection_single_head() {
        let (mut store, layer) = layer(3, 1, 4, 1.0, 1);
        set(&mut store, layer.params.w_q, Tensor::identity(3));
        let x = randn(&[4, 3], 1.0, &mut Xoshiro256PlusPlus::seed_from_u64(9));
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let p = layer.qkv_project(&mut tape, xv).unwrap();
        assert_eq!(tape.value(p.q[0]).data(), x.data());
    }

    #[test]
    fn head_slices_are_contiguous_columns() {
        let (store, layer) = layer(4, 2, 3, 1.0, 2);
        let x = randn(&[3, 4], 1.0, &mut Xoshiro256PlusPlus::seed_from_u64(3));
        let hw = crate::ops::matmul(&x, &store.get(layer.params.w_k).value).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let p = layer.qkv_project(&mut tape, xv).unwrap();
        for head in 0..2 {
            let k = tape.value(p.k[head]);
            for r in 0..3 {
                for c in 0..2 {
                    assert_eq!(k.at(r, c), hw.at(r, head * 2 + c));
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_projections() {
        let (store, layer) = layer(4, 2, 3, 1.0, 4);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::zeros(&[3, 4]));
        let p = layer.qkv_project(&mut tape, xv).unwrap();
        for v in p.q.iter().chain(&p.k).chain(&p.v) {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn over_capacity_rejected() {
        let (store, layer) = layer(4, 2, 3, 1.0, 4);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(layer.qkv_project(&mut tape, xv), Err(Error::Capacity { len: 4, max: 3 })));
    }

    #[test]
    fn hand_computed_two_token_case() {
        let (mut store, layer) = layer(1, 1, 2, 0.0, 5);
        for w in [layer.params.w_q, layer.params.w_k, layer.params.w_v, layer.params.w_o] {
            set(&mut store, w, Tensor::identity(1));
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let g = tape.constant(Tensor::from_rows(&[vec![0.0, NINF], vec![0.0, 0.0]]).unwrap());
        let (out, w) = layer.attend(&mut tape, x, Some(g)).unwrap();
        assert_eq!(tape.value(w[0]).data(), &[1.0, 0.0, 0.5, 0.5]);
        assert_eq!(tape.value(out).data(), &[1.0, 0.5]);
    }

    #[test]
    fn mask_size_mismatch() {
        let (store, layer) = layer(4, 2, 8, 1.0, 6);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let g = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(layer.attend(&mut tape, x, Some(g)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_branches_make_identity_layer() {
        let (mut store, layer) = layer(4, 2, 5, 1.0, 7);
        set(&mut store, layer.params.w_o, Tensor::zeros(&[4, 4]));
        set(&mut store, layer.params.ffn_w2, Tensor::zeros(&[8, 4]));
        let x = randn(&[5, 4], 1.0, &mut Xoshiro256PlusPlus::seed_from_u64(8));
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let out = layer.forward(&mut tape, xv, None).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn single_token_weight_is_one() {
        let (store, layer) = layer(4, 2, 5, 1.0, 10);
        let mut tape = Tape::new(&store);
        let x = tape.constant(randn(&[1, 4], 3.0, &mut Xoshiro256PlusPlus::seed_from_u64(1)));
        let g = tape.constant(Tensor::zeros(&[1, 1]));
        let (_, w) = layer.forward_traced(&mut tape, x, Some(g)).unwrap();
        for h in w {
            assert_eq!(tape.value(h).data(), &[1.0]);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (mut store, layer) = layer(4, 2, 4, 0.5, 11);
        // nonzero Ĝ so its gradient path is exercised away from the origin
        let gh = randn(&[2, 4, 4], 0.3, &mut Xoshiro256PlusPlus::seed_from_u64(12));
        set(&mut store, layer.params.g_hat, gh);
        let x = randn(&[3, 4], 1.0, &mut Xoshiro256PlusPlus::seed_from_u64(13));
        let mask = Tensor::from_rows(&[
            vec![0.0, NINF, 0.0],
            vec![0.0, 0.0, NINF],
            vec![NINF, 0.0, 0.0],
        ])
        .unwrap();
        let readout = randn(&[4, 1], 1.0, &mut Xoshiro256PlusPlus::seed_from_u64(14));
        let err = gradient_check(&mut store, 1e-5, |t| {
            let xv = t.constant(x.clone());
            let m = t.constant(mask.clone());
            let y = layer.forward(t, xv, Some(m))?;
            let r = t.constant(readout.clone());
            let z = t.matmul(y, r)?;
            let z = t.transpose(z)?;
            t.cross_entropy(z, 1)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        let gg = store.get(layer.params.g_hat).value.grad().unwrap();
        assert!(gg.iter().any(|&g| g != 0.0));
    }
}
