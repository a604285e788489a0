//! Relevance redistribution rules for linear forms, activations, softmax and
//! the attention matrix product.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{negative, positive, sign0, DenseMap, LinearMap};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Basic,
    Epsilon,
    AlphaBeta,
    ZPlus,
    Gamma,
}

/// A relevance rule for layers of the form `z_j = Σ_i a_i w_ij + b_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rule {
    kind: RuleKind,
    epsilon: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Rule {
    fn with(kind: RuleKind) -> Self {
        Self { kind, epsilon: DEFAULT_EPSILON, alpha: 1.0, beta: 0.0, gamma: DEFAULT_GAMMA }
    }

    pub fn basic() -> Self {
        Self::with(RuleKind::Basic)
    }

    pub fn epsilon(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon, ..Self::with(RuleKind::Epsilon) })
    }

    /// `α + β` must equal 1 exactly.
    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        if alpha + beta != 1.0 {
            return Err(invalid(format!("alpha + beta must be 1, got {alpha} + {beta}")));
        }
        Ok(Self { alpha, beta, ..Self::with(RuleKind::AlphaBeta) })
    }

    /// `α = 2, β = −1`.
    pub fn ab21() -> Self {
        Self { alpha: 2.0, beta: -1.0, ..Self::with(RuleKind::AlphaBeta) }
    }

    pub fn z_plus() -> Self {
        Self::with(RuleKind::ZPlus)
    }

    pub fn gamma(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(invalid(format!("gamma must be non-negative, got {gamma}")));
        }
        Ok(Self { gamma, ..Self::with(RuleKind::Gamma) })
    }

    pub fn eps() -> Self {
        Self::with(RuleKind::Epsilon)
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn epsilon_value(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma_value(&self) -> f64 {
        self.gamma
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            RuleKind::Basic => "basic",
            RuleKind::Epsilon => "epsilon",
            RuleKind::AlphaBeta if self.alpha == 2.0 && self.beta == -1.0 => "ab21",
            RuleKind::AlphaBeta => "alpha_beta",
            RuleKind::ZPlus => "z_plus",
            RuleKind::Gamma => "gamma",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How relevance passes through a softmax non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxHandler {
    /// Attention matrix treated as constant; no relevance flows through the softmax.
    CpLrp,
    /// Deep-Taylor linearization: `R_i = x_i (R_i − s_i Σ_j R_j)`.
    AttnlrpDtd,
    /// z⁺ applied to the softmax Jacobian linearization.
    AttnlrpZplus,
}

impl SoftmaxHandler {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftmaxHandler::CpLrp => "cp_lrp",
            SoftmaxHandler::AttnlrpDtd => "attnlrp_dtd",
            SoftmaxHandler::AttnlrpZplus => "attnlrp_zplus",
        }
    }
}

impl fmt::Display for SoftmaxHandler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relevance could not be redistributed without dividing by zero.
#[derive(Debug)]
pub struct ZeroDenominator;

fn divide(r: &[f64], z: &[f64], mut stab: impl FnMut(f64) -> Option<f64>) -> std::result::Result<Vec<f64>, ZeroDenominator> {
    r.iter()
        .zip(z)
        .map(|(&rj, &zj)| {
            if rj == 0.0 {
                return Ok(0.0);
            }
            match stab(zj) {
                Some(d) => Ok(rj / d),
                None => Err(ZeroDenominator),
            }
        })
        .collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Relevance of the positive (`sign = +1`) or negative (`-1`) contributions,
/// normalized by the matching partial pre-activation sum.
fn signed_part<M: LinearMap + ?Sized>(
    map: &M,
    a: &[f64],
    w: &[f64],
    bias: &[f64],
    r: &[f64],
    positive_part: bool,
) -> Vec<f64> {
    let (ap, an) = (positive(a), negative(a));
    let (wp, wn) = (positive(w), negative(w));
    // z⁺ pairs equal signs, z⁻ pairs opposite signs.
    let (w_for_ap, w_for_an) = if positive_part { (&wp, &wn) } else { (&wn, &wp) };
    let b: Vec<f64> = if positive_part { positive(bias) } else { negative(bias) };
    let z = plus(&plus(&map.apply(&ap, w_for_ap), &map.apply(&an, w_for_an)), &b);
    let s: Vec<f64> = r.iter().zip(&z).map(|(&rj, &zj)| if zj == 0.0 { 0.0 } else { rj / zj }).collect();
    plus(&mul(&ap, &map.apply_t(&s, w_for_ap)), &mul(&an, &map.apply_t(&s, w_for_an)))
}

/// Redistribute `r` (one value per output of `map`) onto the inputs `a`.
///
/// `bias` has one entry per output; bias terms absorb their share of relevance.
pub fn propagate_map<M: LinearMap + ?Sized>(
    rule: &Rule,
    map: &M,
    a: &[f64],
    w: &[f64],
    bias: &[f64],
    r: &[f64],
) -> std::result::Result<Vec<f64>, ZeroDenominator> {
    match rule.kind {
        RuleKind::Basic | RuleKind::Epsilon => {
            let z = plus(&map.apply(a, w), bias);
            let s = if rule.kind == RuleKind::Basic {
                divide(r, &z, |zj| (zj != 0.0).then_some(zj))?
            } else {
                divide(r, &z, |zj| Some(zj + rule.epsilon * sign0(zj)))?
            };
            Ok(mul(a, &map.apply_t(&s, w)))
        }
        RuleKind::ZPlus => Ok(signed_part(map, a, w, bias, r, true)),
        RuleKind::AlphaBeta => {
            let pos = signed_part(map, a, w, bias, r, true);
            if rule.beta == 0.0 {
                return Ok(pos.iter().map(|p| rule.alpha * p).collect());
            }
            let neg = signed_part(map, a, w, bias, r, false);
            Ok(pos.iter().zip(&neg).map(|(p, n)| rule.alpha * p + rule.beta * n).collect())
        }
        RuleKind::Gamma => {
            let (ap, an) = (positive(a), negative(a));
            let (wp, wn) = (positive(w), negative(w));
            let z = plus(&map.apply(a, w), bias);
            let zp = plus(&plus(&map.apply(&ap, &wp), &map.apply(&an, &wn)), &positive(bias));
            let denom: Vec<f64> = z.iter().zip(&zp).map(|(z, p)| z + rule.gamma * p).collect();
            let s = divide(r, &denom, |d| Some(d + rule.epsilon * sign0(d)))?;
            let plain = mul(a, &map.apply_t(&s, w));
            let boost = plus(&mul(&ap, &map.apply_t(&s, &wp)), &mul(&an, &map.apply_t(&s, &wn)));
            Ok(plain.iter().zip(&boost).map(|(p, b)| p + rule.gamma * b).collect())
        }
    }
}

/// Single dense layer: inputs `a` (`[in]`), weights `[out, in]`, optional bias, `r_out` (`[out]`).
pub fn propagate_linear(rule: &Rule, a: &[f64], w: &[f64], bias: Option<&[f64]>, r_out: &[f64]) -> Result<Vec<f64>> {
    let out = r_out.len();
    if out == 0 || w.len() != out * a.len() || bias.is_some_and(|b| b.len() != out) {
        return Err(crate::error::shape("linear relevance operands are inconsistent"));
    }
    let map = DenseMap { rows: 1, inp: a.len(), out };
    let zeros = vec![0.0; out];
    let r = propagate_map(rule, &map, a, w, bias.unwrap_or(&zeros), r_out).map_err(|_| {
        crate::Error::NonFiniteRelevance { layer: "<linear>".into(), rule: rule.name().into() }
    })?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFiniteRelevance { layer: "<linear>".into(), rule: rule.name().into() });
    }
    Ok(r)
}

/// Relevance through one softmax row (or many rows of length `n`).
///
/// `x` are the softmax inputs and `s` its outputs.
pub fn propagate_softmax(handler: SoftmaxHandler, x: &[f64], s: &[f64], r_out: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    match handler {
        SoftmaxHandler::CpLrp => {}
        SoftmaxHandler::AttnlrpDtd => {
            for row in 0..x.len() / n {
                let idx = row * n..(row + 1) * n;
                let total: f64 = r_out[idx.clone()].iter().sum();
                for i in idx {
                    out[i] = x[i] * (r_out[i] - s[i] * total);
                }
            }
        }
        SoftmaxHandler::AttnlrpZplus => {
            for row in 0..x.len() / n {
                let (xr, sr, rr) = (&x[row * n..(row + 1) * n], &s[row * n..(row + 1) * n], &r_out[row * n..(row + 1) * n]);
                let dst = &mut out[row * n..(row + 1) * n];
                for j in 0..n {
                    if rr[j] == 0.0 {
                        continue;
                    }
                    // J_jk = s_j (δ_jk − s_k); b̃_j = s_j − Σ_k J_jk x_k
                    let terms: Vec<f64> = (0..n)
                        .map(|k| {
                            let jac = sr[j] * (if j == k { 1.0 } else { 0.0 } - sr[k]);
                            jac * xr[k]
                        })
                        .collect();
                    let bias = sr[j] - terms.iter().sum::<f64>();
                    let denom: f64 = terms.iter().map(|t| t.max(0.0)).sum::<f64>() + bias.max(0.0);
                    if denom == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        dst[k] += terms[k].max(0.0) * rr[j] / denom;
                    }
                }
            }
        }
    }
    out
}

/// Split relevance of `O = A·V` between both operands.
///
/// Shapes: `a` is `[q, k]`, `v` is `[k, d]`, `o` and `r_out` are `[q, d]`.
/// Each product term `A_ji V_ip` receives `R_jp / (2 O_jp + ε)`, so the two
/// operands share the relevance of every output entry.
pub fn propagate_matmul_attn(
    a: &[f64],
    v: &[f64],
    o: &[f64],
    r_out: &[f64],
    q: usize,
    k: usize,
    d: usize,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != q * k || v.len() != k * d || o.len() != q * d || r_out.len() != q * d {
        return Err(crate::error::shape("attention matmul operands are inconsistent"));
    }
    let s: Vec<f64> = o
        .iter()
        .zip(r_out)
        .map(|(&oj, &rj)| if rj == 0.0 { 0.0 } else { rj / (2.0 * oj + eps * sign0(2.0 * oj)) })
        .collect();
    let mut ra = vec![0.0; q * k];
    let mut rv = vec![0.0; k * d];
    for j in 0..q {
        for i in 0..k {
            let aji = a[j * k + i];
            let mut acc = 0.0;
            for p in 0..d {
                let t = aji * v[i * d + p] * s[j * d + p];
                acc += t;
                rv[i * d + p] += t;
            }
            ra[j * k + i] = acc;
        }
    }
    Ok((ra, rv))
}

/// `A·V` with `A` held constant, ε-rule: all relevance goes to `V`.
pub(crate) fn propagate_matmul_value_only(
    a: &[f64],
    v: &[f64],
    o: &[f64],
    r_out: &[f64],
    q: usize,
    k: usize,
    d: usize,
    eps: f64,
) -> Vec<f64> {
    let s: Vec<f64> =
        o.iter().zip(r_out).map(|(&oj, &rj)| if rj == 0.0 { 0.0 } else { rj / (oj + eps * sign0(oj)) }).collect();
    let mut rv = vec![0.0; k * d];
    for j in 0..q {
        for i in 0..k {
            let aji = a[j * k + i];
            for p in 0..d {
                rv[i * d + p] += aji * v[i * d + p] * s[j * d + p];
            }
        }
    }
    rv
}
