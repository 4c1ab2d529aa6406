//! Training objective: frame prediction plus the feature-reconstruction
//! terms (compactness, margin diversity, covariance decorrelation).
//!
//! L_total = L_fra + lambda1 * L_fea with
//! L_fea = L_c + lambda2 * L_d + lambda3 * L_cov.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Balance weights of the objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Desired margin of the diversity hinge.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.01, lambda3: 0.01, gamma: 1.0 }
    }
}

/// Algebraic variants kept as documented switches where the source equations
/// are ambiguous. Defaults are the forms used everywhere in this crate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct LossVariants {
    #[serde(default)]
    pub frame: FrameLossKind,
    #[serde(default)]
    pub hinge: HingeKind,
    #[serde(default)]
    pub cov: CovPenaltyKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameLossKind {
    /// Unsquared Euclidean norm over all pixels.
    #[default]
    L2,
    /// Mean squared error.
    Mse,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum HingeKind {
    #[default]
    Linear,
    Squared,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovPenaltyKind {
    /// Mean absolute off-diagonal covariance.
    #[default]
    MeanAbs,
    /// Mean squared off-diagonal covariance (Frobenius-style).
    Frobenius,
}

/// Scalar loss terms of one step, on the tape. `l_d`/`l_cov` are `None` when
/// M = 1 leaves them undefined (they require at least two prototypes).
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_fra: Var,
    pub l_c: Var,
    pub l_d: Option<Var>,
    pub l_cov: Option<Var>,
    pub l_fea: Var,
    pub l_total: Var,
}

/// Concrete values extracted from [`LossVars`] for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_fra: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_cov: f64,
    pub l_fea: f64,
    pub l_total: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_fra: tape.value(self.l_fra).item(),
            l_c: tape.value(self.l_c).item(),
            l_d: self.l_d.map(|v| tape.value(v).item()).unwrap_or(0.0),
            l_cov: self.l_cov.map(|v| tape.value(v).item()).unwrap_or(0.0),
            l_fea: tape.value(self.l_fea).item(),
            l_total: tape.value(self.l_total).item(),
        }
    }
}

/// Frame prediction loss: the L2 distance between prediction and target
/// (unsquared norm over all pixels by default).
pub fn frame_loss(tape: &mut Tape, y_hat: Var, y: Var, kind: FrameLossKind) -> Result<Var> {
    if tape.value(y_hat).shape() != tape.value(y).shape() {
        return Err(Error::ShapeMismatch {
            op: "frame_loss",
            detail: format!(
                "{:?} vs {:?}",
                tape.value(y_hat).shape(),
                tape.value(y).shape()
            ),
        });
    }
    let diff = tape.sub(y_hat, y)?;
    match kind {
        FrameLossKind::L2 => tape.l2_norm(diff),
        FrameLossKind::Mse => {
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        }
    }
}

/// Index of each encoding vector's most relevant prototype (argmax of beta
/// per row). Constant w.r.t. differentiation.
pub fn nearest_by_relevance(tape: &Tape, beta: Var) -> Vec<usize> {
    let b = tape.value(beta);
    let (n, m) = (b.shape()[0], b.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &b.data()[i * m..(i + 1) * m];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

/// Compactness: mean L2 distance from each encoding vector to its most
/// relevant prototype. The argmax pairing is treated as constant during
/// differentiation; gradients flow to encodings and prototypes.
pub fn compact_loss(tape: &mut Tape, enc_rows: Var, pool: Var, beta: Var) -> Result<Var> {
    let ps = tape.value(pool).shape();
    if ps[0] == 0 {
        return Err(Error::TooFewPrototypes { needed: 1, got: 0 });
    }
    let bs = tape.value(beta).shape();
    let es = tape.value(enc_rows).shape();
    if bs[0] != es[0] || bs[1] != ps[0] || es[1] != ps[1] {
        return Err(Error::ShapeMismatch {
            op: "compact_loss",
            detail: format!("enc {es:?}, pool {ps:?}, beta {bs:?}"),
        });
    }
    let idx = nearest_by_relevance(tape, beta);
    let nearest = tape.gather_rows(pool, idx)?;
    let diff = tape.sub(enc_rows, nearest)?;
    let dists = tape.row_l2_norm(diff)?;
    tape.mean(dists)
}

/// Diversity: mean hinge over unordered prototype pairs,
/// (2 / M(M-1)) * sum_{m<m'} max(0, gamma - ||p_m - p_m'||).
pub fn diversity_loss(tape: &mut Tape, pool: Var, gamma: f64, kind: HingeKind) -> Result<Var> {
    let m = tape.value(pool).shape()[0];
    if m < 2 {
        return Err(Error::TooFewPrototypes { needed: 2, got: m });
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            left.push(i);
            right.push(j);
        }
    }
    let a = tape.gather_rows(pool, left)?;
    let b = tape.gather_rows(pool, right)?;
    let diff = tape.sub(a, b)?;
    let dists = tape.row_l2_norm(diff)?;
    let margins = tape.affine(dists, -1.0, gamma)?;
    let hinge = tape.relu(margins)?;
    let hinge = match kind {
        HingeKind::Linear => hinge,
        HingeKind::Squared => tape.mul(hinge, hinge)?,
    };
    tape.mean(hinge)
}

/// Covariance decorrelation: mean |C[m, m']| over off-diagonal pairs of the
/// prototype covariance matrix.
pub fn covariance_loss(tape: &mut Tape, cov: Var, kind: CovPenaltyKind) -> Result<Var> {
    let s = tape.value(cov).shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::ShapeMismatch {
            op: "covariance_loss",
            detail: format!("expected square matrix, got {s:?}"),
        });
    }
    let m = s[0];
    if m < 2 {
        return Err(Error::TooFewPrototypes { needed: 2, got: m });
    }
    let mut idx = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            idx.push(i * m + j);
        }
    }
    let off = tape.gather_flat(cov, idx)?;
    let pen = match kind {
        CovPenaltyKind::MeanAbs => tape.abs(off)?,
        CovPenaltyKind::Frobenius => tape.mul(off, off)?,
    };
    tape.mean(pen)
}

/// Combines the terms: L_fea = L_c + l2*L_d + l3*L_cov and
/// L_total = L_fra + l1*L_fea. Absent diversity/covariance terms (M = 1)
/// contribute zero.
pub fn total_loss(
    tape: &mut Tape,
    l_fra: Var,
    l_c: Var,
    l_d: Option<Var>,
    l_cov: Option<Var>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let mut l_fea = l_c;
    if let Some(ld) = l_d {
        let scaled = tape.scale(ld, weights.lambda2)?;
        l_fea = tape.add(l_fea, scaled)?;
    }
    if let Some(lc) = l_cov {
        let scaled = tape.scale(lc, weights.lambda3)?;
        l_fea = tape.add(l_fea, scaled)?;
    }
    let weighted_fea = tape.scale(l_fea, weights.lambda1)?;
    let l_total = tape.add(l_fra, weighted_fea)?;
    Ok(LossVars { l_fra, l_c, l_d, l_cov, l_fea, l_total })
}
