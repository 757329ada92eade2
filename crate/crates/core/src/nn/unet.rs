use serde::{Deserialize, Serialize};

use super::{Ctx, NnError, Planner, Result};
use crate::autodiff::Var;

/// 2D U-Net with zero-padded convolutions, so every level keeps its entry
/// resolution and skips need no cropping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2x2 max-pool steps.
    pub depth: usize,
    /// Channels of the first level; doubled per level.
    pub base_channels: usize,
    /// Bias terms on every convolution.
    pub bias: bool,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec { in_channels: 3, num_classes: 3, depth: 4, base_channels: 64, bias: true }
    }
}

impl UNetSpec {
    pub fn with_base(base_channels: usize) -> Self {
        UNetSpec { base_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.depth == 0 || self.base_channels == 0 {
            return Err(NnError::Spec(format!(
                "U-Net needs positive channels, depth >= 1 and >= 2 classes: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels at `level`; level `depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub(crate) fn plan(&self, p: &mut Planner) {
        let b = self.bias;
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            p.conv(&format!("enc{l}.conv1"), cin, self.channels(l), &[3, 3], b);
            p.conv(&format!("enc{l}.conv2"), self.channels(l), self.channels(l), &[3, 3], b);
        }
        let (c_in, c_mid) = (self.channels(self.depth - 1), self.channels(self.depth));
        p.conv("bottleneck.conv1", c_in, c_mid, &[3, 3], b);
        p.conv("bottleneck.conv2", c_mid, c_mid, &[3, 3], b);
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            p.conv_transpose(&format!("dec{l}.up"), self.channels(l + 1), c, &[2, 2], b);
            p.conv(&format!("dec{l}.conv1"), 2 * c, c, &[3, 3], b);
            p.conv(&format!("dec{l}.conv2"), c, c, &[3, 3], b);
        }
        p.conv("head", self.channels(0), self.num_classes, &[1, 1], b);
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(NnError::Input(format!("U-Net expects [N, C, H, W], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(NnError::Input(format!("{} input channels, expected {}", shape[1], self.in_channels)));
        }
        let m = 1usize << self.depth;
        for (axis, &n) in ["height", "width"].iter().zip(&shape[2..]) {
            if n % m != 0 {
                return Err(NnError::Input(format!("{axis} {n} is not divisible by {m}")));
            }
        }
        Ok(())
    }

    fn double_conv(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let h = ctx.conv(&format!("{path}.conv1"), x, &[1, 1], &[1, 1])?;
        let h = ctx.g.relu(h);
        let h = ctx.conv(&format!("{path}.conv2"), h, &[1, 1], &[1, 1])?;
        Ok(ctx.g.relu(h))
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for l in 0..self.depth {
            let path = format!("enc{l}");
            h = self.double_conv(ctx, &path, h)?;
            ctx.record(path, h);
            skips.push(h);
            h = ctx.g.max_pool(h, &[2, 2], &[2, 2])?;
        }
        h = self.double_conv(ctx, "bottleneck", h)?;
        ctx.record("bottleneck", h);
        for l in (0..self.depth).rev() {
            let path = format!("dec{l}");
            let up = ctx.conv_transpose(&format!("{path}.up"), h, &[2, 2])?;
            let cat = ctx.g.concat(skips[l], up, 1)?;
            h = self.double_conv(ctx, &path, cat)?;
            ctx.record(path, h);
        }
        let scores = ctx.conv("head", h, &[1, 1], &[0, 0])?;
        ctx.record("head", scores);
        Ok(scores)
    }
}
