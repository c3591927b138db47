use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, NetworkGraph, HEAD_PREFIX};
use crate::scalar::Scalar;

/// What `unfreeze_count` counts and where the cut may land.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Trailing conv/dense layers. A cut inside a residual block moves to the
    /// start of that block.
    #[default]
    Layer,
    /// As `Layer`, then widened to the start of the enclosing block.
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub unfreeze_count: usize,
    #[serde(default)]
    pub granularity: Granularity,
}

impl Default for FreezePlan {
    fn default() -> Self {
        FreezePlan::new(2)
    }
}

/// A network cut in two: `tail ∘ trunk` computes the original network.
#[derive(Clone, Debug)]
pub struct CutSplit<T> {
    /// Index of the first tail layer in the original network.
    pub cut: usize,
    pub trunk: NetworkGraph<T>,
    pub tail: NetworkGraph<T>,
}

/// Number of leading layers that are not part of the classification head.
pub fn backbone_len<T: Scalar>(net: &NetworkGraph<T>) -> usize {
    net.layers()
        .iter()
        .position(|l| l.name.starts_with(HEAD_PREFIX))
        .unwrap_or(net.len())
}

fn block_start<T: Scalar>(net: &NetworkGraph<T>, i: usize) -> usize {
    let layers = net.layers();
    match &layers[i].block {
        Some(b) => (0..=i).find(|&j| layers[j].block.as_ref() == Some(b)).unwrap_or(i),
        None => i,
    }
}

fn is_residual_block<T: Scalar>(net: &NetworkGraph<T>, block: &str) -> bool {
    net.layers()
        .iter()
        .any(|l| l.block.as_deref() == Some(block) && matches!(l.kind, LayerKind::ResidualAdd { .. }))
}

impl FreezePlan {
    pub fn new(unfreeze_count: usize) -> Self {
        FreezePlan {
            unfreeze_count,
            granularity: Granularity::Layer,
        }
    }

    pub fn with_granularity(self, granularity: Granularity) -> Self {
        FreezePlan { granularity, ..self }
    }

    /// Index of the first trainable layer of `net`. Head layers (named with
    /// the head prefix) never count and are always behind the cut.
    pub fn cut_index<T: Scalar>(&self, net: &NetworkGraph<T>) -> Result<usize> {
        let end = backbone_len(net);
        let weights: Vec<usize> = net.weight_layer_indices().into_iter().filter(|&i| i < end).collect();
        let n = self.unfreeze_count;
        if n > weights.len() {
            return Err(Error::Validation(format!(
                "cannot unfreeze {n} layers; the backbone has {} weight layers",
                weights.len()
            )));
        }
        if n == 0 {
            return Ok(end);
        }
        if n == weights.len() {
            return Ok(0);
        }
        let cut = weights[weights.len() - n];
        let start = block_start(net, cut);
        let widen = match self.granularity {
            Granularity::Block => true,
            Granularity::Layer => net.layers()[cut]
                .block
                .as_deref()
                .is_some_and(|b| is_residual_block(net, b)),
        };
        Ok(if widen { start } else { cut })
    }

    /// Per-layer trainable flags for `net` under this plan.
    pub fn trainable_flags<T: Scalar>(&self, net: &NetworkGraph<T>) -> Result<Vec<bool>> {
        let cut = self.cut_index(net)?;
        Ok((0..net.len()).map(|i| i >= cut).collect())
    }

    /// Sets the trainable flags of `net` in place.
    pub fn apply<T: Scalar>(&self, net: &mut NetworkGraph<T>) -> Result<()> {
        for (i, t) in self.trainable_flags(net)?.into_iter().enumerate() {
            net.set_trainable(i, t);
        }
        Ok(())
    }
}

/// Splits `net` (backbone, optionally followed by a head) at the plan's cut.
/// The trunk is fully frozen; every tail layer is trainable.
pub fn split_at_cut<T: Scalar>(net: &NetworkGraph<T>, plan: &FreezePlan) -> Result<CutSplit<T>> {
    let cut = plan.cut_index(net)?;
    let mut trunk = net.slice(0..cut)?;
    trunk.freeze_all();
    let mut tail = net.slice(cut..net.len())?;
    for i in 0..tail.len() {
        tail.set_trainable(i, true);
    }
    Ok(CutSplit { cut, trunk, tail })
}
