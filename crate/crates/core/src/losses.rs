//! Training signals: the cross-domain triplet loss, the large-margin cosine
//! classification loss and the plain triplet loss.
//!
//! All three reduce over the batch with an arithmetic mean. Hinges use
//! [`Tensor::relu`], whose subgradient at exactly zero is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{difference_rows, quadratic_rows, MapShape};
use crate::tensor::Tensor;

/// Tolerance on `|‖v‖ − 1|` for inputs that must arrive l2-normalized.
pub const NORM_TOL: f64 = 1e-6;

/// Where the cosine margin enters the target logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LmclForm {
    /// `s·cos θ − m`
    #[default]
    Paper,
    /// `s·(cos θ − m)`
    Cosface,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin of the cross-domain triplet hinge.
    pub tau: f64,
    /// Margin of the embedding triplet hinge.
    pub rho: f64,
    /// Cosine margin.
    pub m: f64,
    /// Logit scale.
    pub s: f64,
    #[serde(default)]
    pub lmcl_form: LmclForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0,
            rho: 1.0,
            m: 0.5,
            s: 16.0,
            lmcl_form: LmclForm::Paper,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.rho > 0.0 && self.s > 0.0) {
            return Err(Error::Contract(format!(
                "margins and scale must be positive (tau {}, rho {}, s {})",
                self.tau, self.rho, self.s
            )));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Contract(format!("cosine margin {} outside [0, 1)", self.m)));
        }
        Ok(())
    }
}

/// Three `[B, ·]` tensors whose rows line up as (anchor, positive, negative).
#[derive(Clone, Debug)]
pub struct Triplets {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

impl Triplets {
    fn batch(&self) -> Result<usize> {
        let s = self.anchor.shape();
        if s.len() != 2 || self.positive.shape() != s || self.negative.shape() != s {
            return Err(Error::Dimension(format!(
                "triplet members must share a [B, n] shape: {:?} {:?} {:?}",
                s,
                self.positive.shape(),
                self.negative.shape()
            )));
        }
        if s[0] == 0 {
            return Err(Error::Contract("empty triplet batch".into()));
        }
        Ok(s[0])
    }
}

/// Position-averaged Mahalanobis energies per triplet: `(E⁺_b, E⁻_b)`, each `[B]`.
///
/// `E⁺_b = (1/HW) Σ_{h,w} d²_{Σ⁺}(a_b[h,w], p_b[h,w])` and likewise `E⁻_b` with
/// the negative and `Σ⁻`.
pub fn cdt_energies(
    maps: &Triplets,
    shape: MapShape,
    sigma_pos: &Tensor,
    sigma_neg: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let b = maps.batch()?;
    for sigma in [sigma_pos, sigma_neg] {
        if sigma.shape() != [shape.d, shape.d] {
            return Err(Error::Dimension(format!(
                "metric {:?} does not match feature depth {}",
                sigma.shape(),
                shape.d
            )));
        }
    }
    let energy = |other: &Tensor, sigma: &Tensor| -> Result<Tensor> {
        let rows = difference_rows(&maps.anchor, other, shape)?;
        quadratic_rows(&rows, sigma)?
            .reshape(&[b, shape.positions()])?
            .mean(&[1])
    };
    Ok((energy(&maps.positive, sigma_pos)?, energy(&maps.negative, sigma_neg)?))
}

/// Cross-domain triplet loss: `(1/B) Σ_b [E⁺_b − E⁻_b + τ]₊` where the
/// metrics come from a different domain than the feature maps.
pub fn cdt_loss(
    maps: &Triplets,
    shape: MapShape,
    sigma_pos: &Tensor,
    sigma_neg: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let (pos, neg) = cdt_energies(maps, shape, sigma_pos, sigma_neg)?;
    pos.sub(&neg)?.add_scalar(tau).relu().mean_all()
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let s = t.shape();
    let width = *s.last().unwrap_or(&1);
    if width == 0 {
        return Ok(());
    }
    for (i, row) in t.data().chunks(width).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {norm}, expected l2-normalized input"
            )));
        }
    }
    Ok(())
}

/// `(1/B) Σ_b [‖a_b − p_b‖² − ‖a_b − n_b‖² + ρ]₊` on l2-normalized embeddings.
pub fn triplet_loss(emb: &Triplets, rho: f64) -> Result<Tensor> {
    emb.batch()?;
    check_unit_rows(&emb.anchor, "anchor")?;
    check_unit_rows(&emb.positive, "positive")?;
    check_unit_rows(&emb.negative, "negative")?;
    let pos = emb.anchor.sub(&emb.positive)?.square().sum(&[1])?;
    let neg = emb.anchor.sub(&emb.negative)?.square().sum(&[1])?;
    pos.sub(&neg)?.add_scalar(rho).relu().mean_all()
}

/// Large-margin cosine loss averaged over the batch.
///
/// `features` is `[B, e]`, `weights` is `[C, e]`; both must have unit rows.
/// The target logit is `s·cos − m` ([`LmclForm::Paper`]) or `s·(cos − m)`
/// ([`LmclForm::Cosface`]); other classes use `s·cos`.
pub fn lmcl_loss(
    features: &Tensor,
    labels: &[usize],
    weights: &Tensor,
    s: f64,
    m: f64,
    form: LmclForm,
) -> Result<Tensor> {
    let fs = features.shape();
    let ws = weights.shape();
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(Error::Dimension(format!("features {fs:?} against class weights {ws:?}")));
    }
    let (b, c) = (fs[0], ws[0]);
    if b == 0 {
        return Err(Error::Contract("empty classification batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} features", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
    }
    check_unit_rows(features, "feature")?;
    check_unit_rows(weights, "class weight")?;

    let graph = features.graph();
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = graph.constant(onehot, &[b, c])?;
    let cos = features.matmul(&weights.t()?)?;
    let offset = match form {
        LmclForm::Paper => m,
        LmclForm::Cosface => s * m,
    };
    let logits = cos.scale(s).sub(&onehot.scale(offset))?;

    // log-sum-exp shifted by the (constant) row maximum
    let row_max: Vec<f64> = logits
        .data()
        .chunks(c)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = graph.constant(row_max, &[b])?;
    let lse = logits
        .sub(&shift.repeat_cols(c)?)?
        .exp()
        .sum(&[1])?
        .log()?
        .add(&shift)?;
    let target = logits.mul(&onehot)?.sum(&[1])?;
    lse.sub(&target)?.mean_all()
}
