use serde::{Deserialize, Serialize};

use super::{Ctx, NnError, Planner, Result};
use crate::autodiff::{BatchNormConfig, Var};

/// Volumetric V-Net with batch norm, PReLU and anisotropic down-transitions.
///
/// Every convolution is followed by batch norm and PReLU. Blocks after the
/// first return `stack(x) + x`; the first block returns `stack(x)` unless
/// `first_block_residual` is set, in which case the input is projected by a
/// 1x1x1 convolution. Down/up transitions use a kernel equal to their stride.
/// Decoder levels add the upsampled maps to the encoder output of the same
/// level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VNetSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of level 0; doubled per level.
    pub base_channels: usize,
    /// Convolutions per encoder level; its length is the number of levels.
    pub encoder_convs: Vec<usize>,
    /// `(z, y, x)` strides of the down-transitions, one fewer than levels.
    pub strides: Vec<[usize; 3]>,
    pub decoder_convs_per_level: usize,
    /// Cubic kernel edge of block convolutions (odd).
    pub kernel: usize,
    pub input_depth: usize,
    pub first_block_residual: bool,
    pub dropout_p: f64,
    /// Encoder levels whose block input passes through dropout.
    pub dropout_levels: Vec<usize>,
    pub batch_norm: BatchNormConfig,
}

impl Default for VNetSpec {
    fn default() -> Self {
        VNetSpec {
            in_channels: 3,
            num_classes: 3,
            base_channels: 16,
            encoder_convs: vec![1, 2, 3, 3, 3],
            strides: vec![[1, 2, 2], [2, 2, 2], [1, 2, 2], [2, 2, 2]],
            decoder_convs_per_level: 1,
            kernel: 5,
            input_depth: 24,
            first_block_residual: false,
            dropout_p: 0.5,
            dropout_levels: vec![3, 4],
            batch_norm: BatchNormConfig::default(),
        }
    }
}

impl VNetSpec {
    pub fn with_base(base_channels: usize) -> Self {
        VNetSpec { base_channels, ..Self::default() }
    }

    pub fn levels(&self) -> usize {
        self.encoder_convs.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Total downsampling factor per axis `(z, y, x)`.
    pub fn reduction(&self) -> [usize; 3] {
        let mut r = [1; 3];
        for s in &self.strides {
            for a in 0..3 {
                r[a] *= s[a];
            }
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::Spec(msg));
        if self.in_channels == 0 || self.num_classes < 2 || self.base_channels == 0 {
            return bad(format!("V-Net needs positive channels and >= 2 classes: {self:?}"));
        }
        if self.levels() < 2 || self.strides.len() + 1 != self.levels() {
            return bad(format!("{} levels need {} strides, got {}", self.levels(), self.levels().saturating_sub(1), self.strides.len()));
        }
        if self.encoder_convs.contains(&0) || self.decoder_convs_per_level == 0 {
            return bad("every level needs at least one convolution".into());
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return bad("strides must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd to preserve extents", self.kernel));
        }
        if self.input_depth == 0 || !self.input_depth.is_multiple_of(self.reduction()[0]) {
            return bad(format!("input depth {} is not divisible by the z reduction {}", self.input_depth, self.reduction()[0]));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout probability {} outside [0, 1)", self.dropout_p));
        }
        if let Some(l) = self.dropout_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("dropout level {l} beyond {} levels", self.levels()));
        }
        Ok(())
    }

    fn conv_unit(&self, p: &mut Planner, path: &str, cin: usize, cout: usize, kernel: &[usize]) {
        p.conv(path, cin, cout, kernel, false);
        p.batch_norm(&format!("{path}.bn"), cout);
        p.prelu(&format!("{path}.prelu"), cout);
    }

    pub(crate) fn plan(&self, p: &mut Planner) {
        let k = [self.kernel; 3];
        for (l, &n) in self.encoder_convs.iter().enumerate() {
            let c = self.channels(l);
            let mut cin = self.in_channels;
            if l > 0 {
                cin = self.channels(l - 1);
                self.conv_unit(p, &format!("down{}", l - 1), cin, c, &self.strides[l - 1]);
                cin = c;
            }
            for i in 0..n {
                self.conv_unit(p, &format!("enc{l}.conv{}", i + 1), if i == 0 { cin } else { c }, c, &k);
            }
            if l == 0 && self.first_block_residual && cin != c {
                p.conv("enc0.proj", cin, c, &[1, 1, 1], true);
            }
        }
        for l in (0..self.levels() - 1).rev() {
            let c = self.channels(l);
            p.conv_transpose(&format!("up{l}"), self.channels(l + 1), c, &self.strides[l], false);
            p.batch_norm(&format!("up{l}.bn"), c);
            p.prelu(&format!("up{l}.prelu"), c);
            for i in 0..self.decoder_convs_per_level {
                self.conv_unit(p, &format!("dec{l}.conv{}", i + 1), c, c, &k);
            }
        }
        p.conv("head", self.channels(0), self.num_classes, &[1, 1, 1], true);
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(NnError::Input(format!("V-Net expects [N, C, D, H, W], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(NnError::Input(format!("{} input channels, expected {}", shape[1], self.in_channels)));
        }
        if shape[2] != self.input_depth {
            return Err(NnError::Input(format!(
                "depth {} != {} (pad the slice axis first)",
                shape[2], self.input_depth
            )));
        }
        let r = self.reduction();
        for (a, axis) in [(1, "height"), (2, "width")] {
            if !shape[2 + a].is_multiple_of(r[a]) {
                return Err(NnError::Input(format!("{axis} {} is not divisible by {}", shape[2 + a], r[a])));
            }
        }
        Ok(())
    }

    fn unit(&self, ctx: &mut Ctx, path: &str, x: Var, stride: &[usize], pad: usize) -> Result<Var> {
        let h = ctx.conv(path, x, stride, &[pad; 3])?;
        let h = ctx.batch_norm(&format!("{path}.bn"), h)?;
        ctx.prelu(&format!("{path}.prelu"), h)
    }

    /// The convolution stack of a block without its residual add.
    pub(crate) fn stack(&self, ctx: &mut Ctx, prefix: &str, n: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..n {
            h = self.unit(ctx, &format!("{prefix}.conv{}", i + 1), h, &[1, 1, 1], self.kernel / 2)?;
        }
        Ok(h)
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.levels());
        let mut h = x;
        for (l, &n) in self.encoder_convs.iter().enumerate() {
            if l > 0 {
                h = self.unit(ctx, &format!("down{}", l - 1), h, &self.strides[l - 1], 0)?;
            }
            if self.dropout_levels.contains(&l) {
                let mode = ctx.mode;
                h = ctx.g.dropout(h, self.dropout_p, mode, &mut *ctx.rng)?;
            }
            let path = format!("enc{l}");
            let s = self.stack(ctx, &path, n, h)?;
            h = if l > 0 {
                ctx.g.add(s, h)?
            } else if self.first_block_residual {
                let proj = if self.in_channels == self.channels(0) { h } else { ctx.conv("enc0.proj", h, &[1, 1, 1], &[0; 3])? };
                ctx.g.add(s, proj)?
            } else {
                s
            };
            ctx.record(path, h);
            skips.push(h);
        }
        for l in (0..self.levels() - 1).rev() {
            let up = ctx.conv_transpose(&format!("up{l}"), h, &self.strides[l])?;
            let up = ctx.batch_norm(&format!("up{l}.bn"), up)?;
            let up = ctx.prelu(&format!("up{l}.prelu"), up)?;
            let merged = ctx.g.add(up, skips[l])?;
            let path = format!("dec{l}");
            let s = self.stack(ctx, &path, self.decoder_convs_per_level, merged)?;
            h = ctx.g.add(s, merged)?;
            ctx.record(path, h);
        }
        let scores = ctx.conv("head", h, &[1, 1, 1], &[0; 3])?;
        ctx.record("head", scores);
        Ok(scores)
    }
}
