//! Training objectives: classification, regression and contrastive terms and
//! their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Weights of the three objective terms plus the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    /// L2-normalize both sides before the contrastive dot products.
    pub normalize_embeddings: bool,
}

impl Default for LossWeights {
    /// Classification 0.1, regression 100, contrastive 1, τ = 1.
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 100.0, lambda3: 1.0, tau: 1.0, normalize_embeddings: false }
    }
}

impl LossWeights {
    /// The sensitivity-analysis optimum: λ1 = 1, λ2 = 1000, λ3 = 10.
    pub fn tuned() -> Self {
        Self { lambda1: 1.0, lambda2: 1000.0, lambda3: 10.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0, got {lambdas:?}")));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Cross entropy of `logits [B,N]` against integer labels, averaged over the batch.
pub fn loss_cls<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean over all `B·D` scalars of `(Z − Ẑ)²`.
pub fn loss_mse<T: Scalar>(tape: &mut Tape<T>, predicted: Var, target: Var) -> Result<Var> {
    tape.mse(predicted, target)
}

/// Contrastive loss over a batch of predicted/target pairs.
///
/// Row `i` scores `Ẑ_i·Z_j / τ` against every target `j` (itself included);
/// the loss is the batch mean of `−log softmax_i(i)`. With `normalize`,
/// both sides are L2-normalized first.
pub fn loss_con<T: Scalar>(tape: &mut Tape<T>, predicted: Var, target: Var, tau: f64, normalize: bool) -> Result<Var> {
    check_tau(tau)?;
    let (sp, st) = (tape.shape(predicted).to_vec(), tape.shape(target).to_vec());
    if sp.len() != 2 || sp != st {
        return Err(Error::shape("loss_con", format!("{sp:?} vs {st:?}")));
    }
    let (p, t) =
        if normalize { (tape.normalize_rows(predicted)?, tape.normalize_rows(target)?) } else { (predicted, target) };
    let scores = tape.matmul_nt(p, t)?;
    let scores = tape.scale(scores, 1.0 / tau)?;
    let diagonal: Vec<usize> = (0..sp[0]).collect();
    tape.cross_entropy(scores, &diagonal)
}

/// The three loss terms of one batch; disabled terms are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub mse: Option<Var>,
    pub con: Option<Var>,
}

/// `λ1·cls + λ2·mse + λ3·con` over the enabled terms.
pub fn loss_total<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, lambda) in [(terms.cls, w.lambda1), (terms.mse, w.lambda2), (terms.con, w.lambda3)] {
        let Some(term) = term else { continue };
        let weighted = tape.scale(term, lambda)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    acc.ok_or(Error::NoActiveObjective)
}

/// Scalar form of [`loss_total`].
pub fn weighted_total(cls: f64, mse: f64, con: f64, w: &LossWeights) -> f64 {
    w.lambda1 * cls + w.lambda2 * mse + w.lambda3 * con
}
