use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::autodiff::{Graph, Var};
use crate::tensor::Float;

/// Smoothing and class selection of the dice loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceLossParams {
    /// Added to numerator and denominator; keeps empty-empty at loss 0.
    pub alpha: f64,
    /// Classes averaged over.
    pub classes: Vec<usize>,
}

impl Default for DiceLossParams {
    fn default() -> Self {
        DiceLossParams { alpha: 0.1, classes: vec![1, 2] }
    }
}

impl DiceLossParams {
    pub fn with_background(alpha: f64) -> Self {
        DiceLossParams { alpha, classes: vec![0, 1, 2] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(TrainError::Config(format!("dice alpha must be > 0, got {}", self.alpha)));
        }
        if self.classes.is_empty() {
            return Err(TrainError::Config("dice loss needs at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Dice => "dice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_entropy" => Some(LossKind::CrossEntropy),
            "dice" => Some(LossKind::Dice),
            _ => None,
        }
    }
}

/// Weighted mean pixel-wise cross-entropy of raw class scores.
pub fn cross_entropy_loss<T: Float>(g: &mut Graph<T>, scores: Var, target: &[u8], class_weights: &[T]) -> Result<Var> {
    Ok(g.cross_entropy(scores, target, class_weights)?)
}

/// Soft dice loss of softmax probabilities, averaged over `params.classes`.
pub fn dice_loss<T: Float>(g: &mut Graph<T>, probs: Var, target: &[u8], params: &DiceLossParams) -> Result<Var> {
    params.validate()?;
    let alpha = T::from_f64(params.alpha).expect("alpha is representable");
    Ok(g.soft_dice(probs, target, &params.classes, alpha)?)
}

/// `1 - (2|X ∩ Y| + alpha) / (|X| + |Y| + alpha)` for binary sets given
/// as membership masks.
pub fn hard_dice_loss(x: &[bool], y: &[bool], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(TrainError::Config(format!("dice alpha must be > 0, got {alpha}")));
    }
    if x.len() != y.len() {
        return Err(TrainError::Config(format!("mask lengths differ: {} vs {}", x.len(), y.len())));
    }
    let inter = x.iter().zip(y).filter(|(&a, &b)| a && b).count();
    let nx = x.iter().filter(|&&a| a).count();
    let ny = y.iter().filter(|&&b| b).count();
    Ok(1.0 - (2.0 * inter as f64 + alpha) / ((nx + ny) as f64 + alpha))
}
