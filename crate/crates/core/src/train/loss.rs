use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Dice smoothing term `s`.
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { smoothing: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing > 0.0 && self.smoothing.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("loss.smoothing must be > 0, got {}", self.smoothing)))
        }
    }
}

/// Soft Dice loss per sample, averaged over the batch:
/// `1 − (2Σpg + s)/(Σp + Σg + s)` with `p = sigmoid(logits)`.
pub fn soft_dice<T: Float>(g: &mut Graph<T>, logits: Var, target: Var, smoothing: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s != g.shape(target) || s.len() < 2 {
        return Err(Error::shape("dice_ce_loss", &s, g.shape(target)));
    }
    let axes: Vec<usize> = (1..s.len()).collect();
    let p = g.sigmoid(logits);
    let pg = g.mul(p, target)?;
    let inter = g.sum(pg, &axes, false)?;
    let sp = g.sum(p, &axes, false)?;
    let sg = g.sum(target, &axes, false)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smoothing);
    let den = g.add(sp, sg)?;
    let den = g.add_scalar(den, smoothing);
    let ratio = g.div(num, den)?;
    let mean = g.mean_all(ratio);
    let neg = g.neg(mean);
    Ok(g.add_scalar(neg, 1.0))
}

/// Unweighted sum of soft Dice loss and mean binary cross-entropy on logits.
pub fn dice_ce_loss<T: Float>(g: &mut Graph<T>, logits: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let dice = soft_dice(g, logits, target, cfg.smoothing)?;
    let bce = g.bce_with_logits(logits, target)?;
    g.add(dice, bce)
}
