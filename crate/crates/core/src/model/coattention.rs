//! Article/question co-attention with a parameter-free gated merge.
//!
//! Shapes: `H*` is `r x k` (sentences), `U*` is `r x m` (question words).
//! Both are shrunk to `r/4` rows by one shared affine map before the
//! similarity matrix `S` (`k x m`) is formed.

use chn_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{ChnError, Result};

pub const W_D: &str = "coattn.w_d";
pub const B_D: &str = "coattn.b_d";
pub const W_S: &str = "coattn.w_s";

#[derive(Clone, Copy, Debug)]
pub struct CoAttentionOut {
    pub h: Var,
    pub u: Var,
    pub s: Var,
    /// `m x k`; column `t` is a distribution over question words.
    pub s_q: Var,
    /// `m x k`; row `j` is a distribution over sentences.
    pub s_t: Var,
    pub u_tilde: Var,
    pub h_tilde: Var,
    /// `G = [H; Ũ; H∘Ũ; H∘H̃]`, `r x k`.
    pub fused: Var,
    /// `σ(G)`.
    pub gate: Var,
    pub z: Var,
}

/// `X -> w_d X + b_d 1ᵀ`, applied with the same weights to both inputs.
pub fn transform<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h_star: Var,
    u_star: Var,
) -> Result<(Var, Var)> {
    let r = g.shape(h_star)[0];
    if !r.is_multiple_of(4) {
        return Err(ChnError::Config(format!("hidden size {r} is not divisible by 4")));
    }
    let w_d = g.param(store, W_D)?;
    let b_d = g.param(store, B_D)?;
    let affine = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let cols = g.shape(x)[1];
        let wx = g.matmul(w_d, x)?;
        let ones = g.ones(1, cols);
        let bias = g.matmul(b_d, ones)?;
        Ok(g.add(wx, bias)?)
    };
    let h = affine(g, h_star)?;
    let u = affine(g, u_star)?;
    Ok((h, u))
}

/// `S_ij = w_sᵀ [h_i; u_j; h_i ∘ u_j]`, evaluated for all pairs at once as
/// `(Hᵀw1)1ᵀ + 1(w2ᵀU) + Hᵀ diag(w3) U`.
pub fn similarity<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h: Var,
    u: Var,
) -> Result<Var> {
    let [d, k] = g.shape(h);
    let [du, m] = g.shape(u);
    if d != du {
        return Err(ChnError::Config(format!(
            "co-attention inputs have {d} and {du} rows"
        )));
    }
    let w_s = g.param(store, W_S)?;
    let w1 = g.slice_rows(w_s, 0, d)?;
    let w2 = g.slice_rows(w_s, d, d)?;
    let w3 = g.slice_rows(w_s, 2 * d, d)?;

    let ht = g.transpose(h);
    let ones_m = g.ones(1, m);
    let hw1 = g.matmul(ht, w1)?;
    let term_h = g.matmul(hw1, ones_m)?;

    let ones_k = g.ones(k, 1);
    let w2t = g.transpose(w2);
    let w2u = g.matmul(w2t, u)?;
    let term_u = g.matmul(ones_k, w2u)?;

    let w3_rep = g.matmul(w3, ones_m)?;
    let scaled_u = g.mul(w3_rep, u)?;
    let term_hu = g.matmul(ht, scaled_u)?;

    let s = g.add(term_h, term_u)?;
    Ok(g.add(s, term_hu)?)
}

fn pair_mask(rows: &[bool], cols: &[bool]) -> Vec<bool> {
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| r && c))
        .collect()
}

/// Returns `(S^Q, S^T)`, both `m x k`. `S^Q` normalises each sentence's
/// scores over question words; `S^T` normalises each question word's scores
/// over sentences. Masked positions are exactly zero.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    word_mask: Option<&[bool]>,
    sentence_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let [k, m] = g.shape(s);
    let words = word_mask.map_or_else(|| vec![true; m], <[bool]>::to_vec);
    let sents = sentence_mask.map_or_else(|| vec![true; k], <[bool]>::to_vec);
    if words.len() != m || sents.len() != k {
        return Err(ChnError::Config(format!(
            "co-attention masks of length {}/{} for a {k}x{m} similarity matrix",
            sents.len(),
            words.len()
        )));
    }
    // A padded sentence row keeps its word distribution defined; it is
    // zeroed by the sentence mask on the other side.
    let q_rows: Vec<bool> = vec![true; k];
    let over_words = g.softmax(s, 1, Some(&pair_mask(&q_rows, &words)))?;
    let over_words = mask_rows(g, over_words, &sents)?;
    let t_cols: Vec<bool> = vec![true; m];
    let over_sents = g.softmax(s, 0, Some(&pair_mask(&sents, &t_cols)))?;
    let over_sents = mask_cols(g, over_sents, &words)?;
    let s_q = g.transpose(over_words);
    let s_t = g.transpose(over_sents);
    Ok((s_q, s_t))
}

fn mask_rows<T: Scalar>(g: &mut Graph<T>, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&v| v) {
        return Ok(x);
    }
    let cols = g.shape(x)[1];
    let m = Tensor::from_fn(keep.len(), cols, |i, _| {
        if keep[i] {
            T::one()
        } else {
            T::zero()
        }
    });
    let m = g.constant(m);
    Ok(g.mul(x, m)?)
}

fn mask_cols<T: Scalar>(g: &mut Graph<T>, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&v| v) {
        return Ok(x);
    }
    let [rows, cols] = g.shape(x);
    let m = Tensor::from_fn(rows, cols, |_, j| {
        if keep[j] {
            T::one()
        } else {
            T::zero()
        }
    });
    let m = g.constant(m);
    Ok(g.mul(x, m)?)
}

/// `Ũ = U S^Q`: per sentence, a weighted sum of question-word vectors.
pub fn attend_a2q<T: Scalar>(g: &mut Graph<T>, u: Var, s_q: Var) -> Result<Var> {
    Ok(g.matmul(u, s_q)?)
}

/// `H̃ = H (S^T)ᵀ S^Q`.
pub fn attend_q2a<T: Scalar>(g: &mut Graph<T>, h: Var, s_t: Var, s_q: Var) -> Result<Var> {
    let s_tt = g.transpose(s_t);
    let per_word = g.matmul(h, s_tt)?;
    Ok(g.matmul(per_word, s_q)?)
}

/// `G = [H; Ũ; H ∘ Ũ; H ∘ H̃]`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, h: Var, u_tilde: Var, h_tilde: Var) -> Result<Var> {
    let hu = g.mul(h, u_tilde)?;
    let hh = g.mul(h, h_tilde)?;
    Ok(g.concat(&[h, u_tilde, hu, hh], 0)?)
}

/// `Z = σ(G) ∘ H* + (1 − σ(G)) ∘ G`. Returns `(gate, Z)`.
pub fn merge<T: Scalar>(g: &mut Graph<T>, fused: Var, h_star: Var) -> Result<(Var, Var)> {
    let gate = g.sigmoid(fused);
    let keep = g.mul(gate, h_star)?;
    let rest = g.one_minus(gate);
    let new = g.mul(rest, fused)?;
    let z = g.add(keep, new)?;
    Ok((gate, z))
}

/// Full block over valid sentences and question words.
pub fn coattend<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h_star: Var,
    u_star: Var,
) -> Result<CoAttentionOut> {
    let (h, u) = transform(g, store, h_star, u_star)?;
    let s = similarity(g, store, h, u)?;
    let (s_q, s_t) = attention_weights(g, s, None, None)?;
    let u_tilde = attend_a2q(g, u, s_q)?;
    let h_tilde = attend_q2a(g, h, s_t, s_q)?;
    let fused = fuse(g, h, u_tilde, h_tilde)?;
    let (gate, z) = merge(g, fused, h_star)?;
    Ok(CoAttentionOut {
        h,
        u,
        s,
        s_q,
        s_t,
        u_tilde,
        h_tilde,
        fused,
        gate,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(r: usize, w_s: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let q = r / 4;
        p.insert(W_D, Tensor::zeros(&[q, r])).unwrap();
        p.insert(B_D, Tensor::zeros(&[q, 1])).unwrap();
        p.insert(W_S, Tensor::column(w_s)).unwrap();
        p
    }

    #[test]
    fn zero_transform_gives_zero() {
        let p = store(8, vec![0.0; 6]);
        let mut g = Graph::new();
        let hs = g.constant(Tensor::full(&[8, 3], 0.7));
        let us = g.constant(Tensor::full(&[8, 2], -0.2));
        let (h, u) = transform(&mut g, &p, hs, us).unwrap();
        assert_eq!(g.shape(h), [2, 3]);
        assert!(g.value(h).data().iter().chain(g.value(u).data()).all(|&x| x == 0.0));
    }

    #[test]
    fn similarity_matches_direct_formula() {
        // d = 2, unit w_s
        let p = store(8, vec![1.0; 6]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]));
        let u = g.constant(Tensor::from_rows(&[&[1.0, 0.0, -3.0], &[0.5, 2.0, 1.0]]));
        let s = similarity(&mut g, &p, h, u).unwrap();
        let hv = g.value(h).clone();
        let uv = g.value(u).clone();
        for i in 0..2 {
            for j in 0..3 {
                let hi = [hv.get(0, i), hv.get(1, i)];
                let uj = [uv.get(0, j), uv.get(1, j)];
                let want = hi.iter().sum::<f64>()
                    + uj.iter().sum::<f64>()
                    + hi[0] * uj[0]
                    + hi[1] * uj[1];
                assert!((g.value(s).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_normalise_and_mask() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let (s_q, s_t) = attention_weights(&mut g, s, None, None).unwrap();
        let a = 1.0 / (1.0 + 1f64.exp());
        let q = g.value(s_q);
        assert!((q.get(0, 0) - a).abs() < 1e-12);
        assert!((q.get(1, 0) - (1.0 - a)).abs() < 1e-12);
        let t = g.value(s_t);
        for j in 0..2 {
            assert!(((t.get(j, 0) + t.get(j, 1)) - 1.0).abs() < 1e-12);
        }

        let s = g.constant(Tensor::full(&[3, 2], 0.3));
        let (s_q, s_t) =
            attention_weights(&mut g, s, Some(&[true, false]), Some(&[true, true, false])).unwrap();
        let q = g.value(s_q);
        assert_eq!(q.get(0, 0), 1.0);
        assert_eq!(q.get(1, 0), 0.0);
        assert_eq!(q.get(0, 2), 0.0);
        let t = g.value(s_t);
        assert_eq!(t.get(0, 0), 0.5);
        assert_eq!(t.get(0, 2), 0.0);
        assert_eq!(t.get(1, 0), 0.0);
    }

    #[test]
    fn single_sentence_q2a_is_identity() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::column(vec![0.3, -0.4]));
        let s = g.constant(Tensor::matrix(1, 3, vec![0.1, 0.5, -2.0]).unwrap());
        let (s_q, s_t) = attention_weights(&mut g, s, None, None).unwrap();
        let ht = attend_q2a(&mut g, h, s_t, s_q).unwrap();
        assert!(g.value(ht).max_abs_diff(g.value(h)).unwrap() < 1e-15);
    }

    #[test]
    fn merge_is_convex() {
        let mut g = Graph::<f64>::new();
        let fused = g.constant(Tensor::zeros(&[4, 1]));
        let hs = g.constant(Tensor::column(vec![1.0, -2.0, 0.5, 4.0]));
        let (_, z) = merge(&mut g, fused, hs).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, -1.0, 0.25, 2.0]);
        let (_, z) = merge(&mut g, hs, hs).unwrap();
        assert!(g.value(z).max_abs_diff(g.value(hs)).unwrap() < 1e-15);
    }

    #[test]
    fn fuse_layout() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::column(vec![2.0]));
        let ut = g.constant(Tensor::column(vec![3.0]));
        let ht = g.constant(Tensor::column(vec![5.0]));
        let f = fuse(&mut g, h, ut, ht).unwrap();
        assert_eq!(g.value(f).data(), &[2.0, 3.0, 6.0, 10.0]);
    }
}
