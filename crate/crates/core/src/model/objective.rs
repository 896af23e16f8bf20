//! Training loss: summed token NLL minus a weighted cosine between the
//! distractor representation `e_D = s_M − e_T` and the article vector `e_T`.

use chn_tensor::{Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use super::InstanceLoss;
use crate::error::{ChnError, Result};
use crate::text::PAD;

pub const NORM_FLOOR: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Adds the cosine term when set; otherwise the loss is the NLL alone.
    pub ssl: bool,
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            ssl: true,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl ObjectiveConfig {
    pub fn nll_only() -> Self {
        ObjectiveConfig {
            ssl: false,
            lambda: 0.0,
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ssl {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub cos_sim: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn read<T: Scalar>(g: &Graph<T>, loss: &InstanceLoss, cfg: &ObjectiveConfig) -> Self {
        LossBreakdown {
            nll: g.scalar(loss.nll).as_f64(),
            cos_sim: g.scalar(loss.cos).as_f64(),
            total: g.scalar(loss.total).as_f64(),
            lambda: cfg.effective_lambda(),
        }
    }
}

/// `−Σ log P[target]` over steps whose target is not PAD and whose `mask`
/// entry (if given) is set.
pub fn nll_loss<T: Scalar>(
    g: &mut Graph<T>,
    log_probs: &[Var],
    targets: &[u32],
    mask: Option<&[bool]>,
) -> Result<Var> {
    if log_probs.len() != targets.len() || mask.is_some_and(|m| m.len() != targets.len()) {
        return Err(ChnError::Config(format!(
            "{} log-prob steps for {} targets",
            log_probs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (t, (&lp, &target)) in log_probs.iter().zip(targets).enumerate() {
        if target == PAD || mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let picked = g.pick(lp, target as usize, 0)?;
        total = Some(match total {
            Some(acc) => g.add(acc, picked)?,
            None => picked,
        });
    }
    let total = total.ok_or(ChnError::Empty("target steps"))?;
    Ok(g.scale(total, T::lit(-1.0)))
}

/// `e_D = s_M − e_T`.
pub fn distractor_representation<T: Scalar>(g: &mut Graph<T>, s_m: Var, e_t: Var) -> Result<Var> {
    Ok(g.sub(s_m, e_t)?)
}

fn norm<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let sq = g.dot(v, v)?;
    let sq = g.floor_at(sq, T::lit(NORM_FLOOR * NORM_FLOOR));
    Ok(g.sqrt(sq))
}

/// Cosine similarity with each norm floored at `1e-12`, clamped to `[−1, 1]`.
pub fn cosine<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let dot = g.dot(a, b)?;
    let na = norm(g, a)?;
    let nb = norm(g, b)?;
    let denom = g.mul(na, nb)?;
    let cos = g.div(dot, denom)?;
    Ok(g.clamp(cos, T::lit(-1.0), T::lit(1.0)))
}

/// `nll − λ·cos`, or `nll` unchanged when the similarity term is off.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, nll: Var, cos: Var, cfg: &ObjectiveConfig) -> Var {
    if !cfg.ssl {
        return nll;
    }
    let term = g.scale(cos, T::lit(-cfg.lambda));
    g.add(nll, term).expect("scalar shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chn_tensor::Tensor;

    #[test]
    fn uniform_nll_and_padding() {
        let mut g = Graph::<f64>::new();
        let lp = g.constant(Tensor::full(&[4, 1], -(4f64).ln()));
        let loss = nll_loss(&mut g, &[lp, lp], &[1, 3], None).unwrap();
        assert!((g.scalar(loss) - 2.0 * 4f64.ln()).abs() < 1e-12);
        let padded = nll_loss(&mut g, &[lp, lp, lp], &[1, 3, PAD], None).unwrap();
        assert_eq!(g.scalar(padded), g.scalar(loss));
        assert!(nll_loss(&mut g, &[lp], &[PAD], None).is_err());
    }

    #[test]
    fn cosine_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::column(vec![1.0, 0.0]));
        let b = g.constant(Tensor::column(vec![1.0, 1.0]));
        let c = cosine(&mut g, a, b).unwrap();
        assert!((g.scalar(c) - 0.5f64.sqrt()).abs() < 1e-12);
        let c = cosine(&mut g, b, b).unwrap();
        assert!((g.scalar(c) - 1.0).abs() < 1e-12);
        let z = g.zeros(2, 1);
        let c = cosine(&mut g, z, b).unwrap();
        assert_eq!(g.scalar(c), 0.0);
    }

    #[test]
    fn zero_vector_gradient_is_finite() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[2, 1]));
        let b = g.constant(Tensor::column(vec![1.0, 1.0]));
        let c = cosine(&mut g, z, b).unwrap();
        g.backward(c).unwrap();
        assert!(g.grad(z).unwrap().all_finite());
    }

    #[test]
    fn total_arithmetic() {
        let mut g = Graph::<f64>::new();
        let nll = g.constant(Tensor::scalar(2.0));
        let cos = g.constant(Tensor::scalar(0.5));
        let cfg = ObjectiveConfig { ssl: true, lambda: 0.1 };
        let t = total_loss(&mut g, nll, cos, &cfg);
        assert!((g.scalar(t) - 1.95).abs() < 1e-15);
        let off = total_loss(&mut g, nll, cos, &ObjectiveConfig::nll_only());
        assert_eq!(off, nll);
    }
}
