//! Class-balanced cross-entropy and the deeply-supervised objective.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ForwardResult;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    /// Weight of positive pixels; negatives get `1 - beta`. Fixed for a run.
    pub beta: f64,
    /// Add the fused-map term (hnn mode only).
    pub include_fused: bool,
}

/// Loss handles recorded on the tape.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub side: Vec<Var>,
    pub fused: Option<Var>,
}

impl LossTerms {
    /// `(total, per-side..., fused?)` as plain numbers.
    pub fn values(&self, tape: &Tape) -> (f64, Vec<f64>, Option<f64>) {
        (
            tape.value(self.total).item(),
            self.side.iter().map(|&v| tape.value(v).item()).collect(),
            self.fused.map(|v| tape.value(v).item()),
        )
    }
}

/// Global class-balancing weight: the mean over label images of the
/// fraction of negative pixels. Empty images are skipped.
pub fn estimate_beta<I, L>(labels: I) -> Result<f64>
where
    I: IntoIterator<Item = L>,
    L: AsRef<[u8]>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for label in labels {
        let label = label.as_ref();
        if label.is_empty() {
            continue;
        }
        let negatives = label.iter().filter(|&&y| y == 0).count();
        sum += negatives as f64 / label.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("cannot estimate beta from an empty label stream".into()));
    }
    Ok(sum / count as f64)
}

/// `-β Σ_{y=1} log p - (1-β) Σ_{y=0} log(1-p)`, summed over pixels and
/// averaged over the batch.
pub fn balanced_bce(tape: &mut Tape, prob: Var, label: &Tensor, beta: f64) -> Result<Var> {
    tape.balanced_bce(prob, label, beta)
}

/// Sum of the per-side-output losses, plus the fused-map loss when requested.
pub fn total_loss(tape: &mut Tape, result: &ForwardResult, label: &Tensor, spec: &LossSpec) -> Result<LossTerms> {
    let side = result
        .side_outputs
        .iter()
        .map(|s| balanced_bce(tape, s.probability, label, spec.beta))
        .collect::<Result<Vec<_>>>()?;
    let fused = if spec.include_fused {
        let f = result
            .fused
            .ok_or_else(|| Error::Mode("fused loss requested but the model has no fused output".into()))?;
        Some(balanced_bce(tape, f.probability, label, spec.beta)?)
    } else {
        None
    };
    let mut terms = side.iter().copied().chain(fused);
    let mut total = terms
        .next()
        .ok_or_else(|| Error::Contract("forward result has no side outputs".into()))?;
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(LossTerms { total, side, fused })
}
