//! Attention prototype unit.
//!
//! An encoding map of shape c x h x w is viewed as N = h*w vectors of
//! dimension c. M attention heads score every position; a spatial softmax
//! per head turns the scores into row-stochastic normalcy maps, and each
//! prototype is the map-weighted ensemble of the encoding vectors (so it
//! lies in their convex hull per channel). Retrieval scores every encoding
//! vector against the pool by cosine similarity, softmaxes over prototypes,
//! and mixes a normalcy encoding that is added back onto the input.
//! The distinguish step exposes the M x M covariance of the prototypes over
//! the feature dimension; it feeds the covariance loss only and does not
//! alter forward activations.

use std::io::Write as _;
use std::path::Path;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A c x h x w feature map on the tape, with its dimensions alongside the
/// tape handle.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    pub var: Var,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Encoding {
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let s = tape.value(var).shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "Encoding::new",
                detail: format!("expected c x h x w, got {s:?}"),
            });
        }
        Ok(Self { var, c: s[0], h: s[1], w: s[2] })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// The N x c row view of the map (one row per spatial position).
    pub fn rows(&self, tape: &mut Tape) -> Result<Var> {
        let flat = tape.reshape(self.var, vec![self.c, self.h * self.w])?;
        tape.transpose2d(flat)
    }
}

/// Parameters of the M attention heads: an M x c weight matrix, each head a
/// fully connected c -> 1 map. No per-head bias: the spatial softmax that
/// normalizes each head's map is shift-invariant, so a bias would be inert.
#[derive(Debug, Clone, Copy)]
pub struct ApuParams {
    pub head_weight: Var,
    /// Inverse temperature applied to cosine scores before the retrieval
    /// softmax.
    pub sharpness: f64,
}

/// Everything the APU forward pass produces. The intermediates feed the
/// feature losses, anomaly scoring, and normalcy-map export.
#[derive(Debug, Clone, Copy)]
pub struct ApuOutputs {
    /// enc + normalcy encoding, c x h x w.
    pub out: Var,
    /// Row-stochastic normalcy maps, M x N.
    pub maps: Var,
    /// Prototype pool, M x c.
    pub pool: Var,
    /// Retrieval relevance scores, N x M (rows sum to 1).
    pub scores: Var,
    /// Prototype covariance over the feature dimension, M x M.
    pub cov: Var,
    /// The encoding as N x c rows (shared with loss computation).
    pub enc_rows: Var,
}

/// Raw head scores softmaxed over the N spatial positions, one map per head.
/// This spatial softmax is the normalization that makes the ensemble a
/// convex combination.
pub fn attention(tape: &mut Tape, enc: Encoding, params: &ApuParams) -> Result<Var> {
    let wshape = tape.value(params.head_weight).shape();
    if wshape.len() != 2 || wshape[1] != enc.c {
        return Err(Error::ShapeMismatch {
            op: "apu::attention",
            detail: format!("head weight {wshape:?} vs encoding c = {}", enc.c),
        });
    }
    let flat = tape.reshape(enc.var, vec![enc.c, enc.positions()])?;
    let scores = tape.matmul(params.head_weight, flat)?; // M x N
    tape.softmax(scores, 1)
}

/// Prototype m = sum_n map[m, n] * x_n. Expects the maps already
/// row-normalized (attention's softmax is that normalization).
pub fn ensemble(tape: &mut Tape, enc: Encoding, maps: Var) -> Result<Var> {
    let ms = tape.value(maps).shape();
    if ms.len() != 2 || ms[1] != enc.positions() {
        return Err(Error::ShapeMismatch {
            op: "apu::ensemble",
            detail: format!("maps {ms:?} vs N = {}", enc.positions()),
        });
    }
    let rows = enc.rows(tape)?; // N x c
    tape.matmul(maps, rows) // M x c
}

/// Retrieval: cosine similarity of every encoding vector against every
/// prototype, softmax over prototypes, and the resulting normalcy encoding
/// reshaped back to c x h x w. Returns (normalcy encoding, scores N x M).
pub fn retrieve(
    tape: &mut Tape,
    enc: Encoding,
    pool: Var,
    sharpness: f64,
) -> Result<(Var, Var)> {
    let ps = tape.value(pool).shape().to_vec();
    if ps.len() != 2 || ps[1] != enc.c {
        return Err(Error::ShapeMismatch {
            op: "apu::retrieve",
            detail: format!("pool {ps:?} vs encoding c = {}", enc.c),
        });
    }
    if ps[0] == 0 {
        return Err(Error::TooFewPrototypes { needed: 1, got: 0 });
    }
    let rows = enc.rows(tape)?; // N x c
    let cos = tape.cosine_rows(rows, pool)?; // N x M
    let scaled = tape.scale(cos, sharpness)?;
    let beta = tape.softmax(scaled, 1)?;
    let mixed = tape.matmul(beta, pool)?; // N x c
    let mixed_t = tape.transpose2d(mixed)?; // c x N
    let normalcy = tape.reshape(mixed_t, vec![enc.c, enc.h, enc.w])?;
    Ok((normalcy, beta))
}

/// Covariance between prototypes over the feature dimension:
/// C[i, j] = (1/c) sum_k (p_i[k] - mean_i)(p_j[k] - mean_j).
/// Symmetric and PSD by construction. Feeds the covariance loss only.
pub fn distinguish(tape: &mut Tape, pool: Var) -> Result<Var> {
    let ps = tape.value(pool).shape().to_vec();
    if ps.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "apu::distinguish",
            detail: format!("expected M x c pool, got {ps:?}"),
        });
    }
    let (m, c) = (ps[0], ps[1]);
    if m < 2 {
        return Err(Error::TooFewPrototypes { needed: 2, got: m });
    }
    if c < 2 {
        return Err(Error::ShapeMismatch {
            op: "apu::distinguish",
            detail: format!("covariance over the feature dimension needs c >= 2, got {c}"),
        });
    }
    let centered = tape.row_mean_center(pool)?;
    let centered_t = tape.transpose2d(centered)?;
    let prod = tape.matmul(centered, centered_t)?; // M x M
    tape.scale(prod, 1.0 / c as f64)
}

/// Full unit: attention -> ensemble -> retrieve -> distinguish, output
/// aggregated with the input by elementwise sum.
pub fn apu_forward(tape: &mut Tape, enc: Encoding, params: &ApuParams) -> Result<ApuOutputs> {
    let maps = attention(tape, enc, params)?;
    let pool = ensemble(tape, enc, maps)?;
    let (normalcy, scores) = retrieve(tape, enc, pool, params.sharpness)?;
    let m = tape.value(pool).shape()[0];
    let cov = if m >= 2 {
        distinguish(tape, pool)?
    } else {
        // Single prototype: empty covariance stand-in (loss skips it).
        tape.constant(Tensor::zeros(vec![1, 1]))
    };
    let out = tape.add(enc.var, normalcy)?;
    let enc_rows = enc.rows(tape)?;
    Ok(ApuOutputs { out, maps, pool, scores, cov, enc_rows })
}

/// Writes each normalcy map (and their sum) as an 8-bit binary PGM after
/// per-map min-max scaling: `map_00.pgm` .. `map_{M-1}.pgm` + `map_sum.pgm`,
/// M + 1 files.
pub fn export_normalcy_maps(maps: &Tensor, h: usize, w: usize, dir: &Path) -> Result<Vec<String>> {
    let s = maps.shape();
    if s.len() != 2 || s[1] != h * w {
        return Err(Error::ShapeMismatch {
            op: "export_normalcy_maps",
            detail: format!("maps {s:?} vs {h}x{w}"),
        });
    }
    let m = s[0];
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut sum = vec![0.0; h * w];
    for i in 0..m {
        let row = &maps.data()[i * h * w..(i + 1) * h * w];
        for (acc, v) in sum.iter_mut().zip(row) {
            *acc += v;
        }
        let name = format!("map_{i:02}.pgm");
        write_pgm(&dir.join(&name), row, h, w)?;
        written.push(name);
    }
    write_pgm(&dir.join("map_sum.pgm"), &sum, h, w)?;
    written.push("map_sum.pgm".to_string());
    Ok(written)
}

fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if span < 1e-300 {
                0u8
            } else {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}
