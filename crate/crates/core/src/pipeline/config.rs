use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{PipelineError, Result};
use crate::nn::{NetSpec, UNetSpec, VNetSpec};
use crate::train::{DiceLossParams, LossKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Unet,
    Vnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Vnet => "vnet",
        }
    }
}

/// Settings of a training or cross-validation run.
///
/// Text form: one `key = value` per line, `#` starts a comment. Values left
/// unset fall back to per-architecture defaults (U-Net: 64 base channels,
/// 65000 iterations, cross-entropy; V-Net: 16, 15000, dice).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    base_channels: Option<usize>,
    iterations: Option<u64>,
    pub learning_rate: f64,
    pub seed: u64,
    loss: Option<LossKind>,
    pub alpha: f64,
    pub folds: usize,
    pub manifest: Option<PathBuf>,
    pub output: PathBuf,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Reset predicted fat labels where the fat fraction is below 0.5.
    pub ff_threshold_enabled: bool,
    /// In-plane size slices are zero-padded to.
    pub pad_xy: (usize, usize),
    pub dice_include_background: bool,
    /// Folds trained concurrently by `run_cv`.
    pub workers: usize,
    /// Zero the background outside the body mask before the networks.
    pub mask_background: bool,
}

pub const KEYS: [&str; 17] = [
    "arch",
    "base_channels",
    "iterations",
    "learning_rate",
    "seed",
    "loss",
    "alpha",
    "folds",
    "manifest",
    "output",
    "eval_every",
    "checkpoint_every",
    "ff_threshold_enabled",
    "pad_xy",
    "dice_include_background",
    "workers",
    "mask_background",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Unet,
            base_channels: None,
            iterations: None,
            learning_rate: 1e-4,
            seed: 0,
            loss: None,
            alpha: 0.1,
            folds: 10,
            manifest: None,
            output: PathBuf::from("runs"),
            eval_every: 1000,
            checkpoint_every: 1000,
            ff_threshold_enabled: false,
            pad_xy: (256, 256),
            dice_include_background: false,
            workers: 1,
            mask_background: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_pad(value: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = value.split_once('x').unwrap_or((value, value));
    let h = parse_num("pad_xy", h.trim())?;
    let w = parse_num("pad_xy", w.trim())?;
    if h == 0 || w == 0 {
        return Err(format!("pad_xy: sizes must be positive, got {value:?}"));
    }
    Ok((h, w))
}

impl RunConfig {
    pub fn base_channels(&self) -> usize {
        self.base_channels.unwrap_or(match self.arch {
            Arch::Unet => 64,
            Arch::Vnet => 16,
        })
    }

    pub fn iterations(&self) -> u64 {
        self.iterations.unwrap_or(match self.arch {
            Arch::Unet => 65_000,
            Arch::Vnet => 15_000,
        })
    }

    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or(match self.arch {
            Arch::Unet => LossKind::CrossEntropy,
            Arch::Vnet => LossKind::Dice,
        })
    }

    /// Sets one key from its text value. Relative paths are joined onto
    /// `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> std::result::Result<(), String> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key {
            "arch" => {
                self.arch = match value {
                    "unet" => Arch::Unet,
                    "vnet" => Arch::Vnet,
                    _ => return Err(format!("arch: expected unet or vnet, got {value:?}")),
                }
            }
            "base_channels" => self.base_channels = Some(parse_num(key, value)?),
            "iterations" => self.iterations = Some(parse_num(key, value)?),
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "loss" => {
                self.loss = Some(
                    LossKind::parse(value).ok_or_else(|| format!("loss: expected cross_entropy or dice, got {value:?}"))?,
                )
            }
            "alpha" => self.alpha = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "manifest" => self.manifest = Some(path(value)),
            "output" => self.output = path(value),
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "ff_threshold_enabled" => self.ff_threshold_enabled = parse_bool(key, value)?,
            "pad_xy" => self.pad_xy = parse_pad(value)?,
            "dice_include_background" => self.dice_include_background = parse_bool(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "mask_background" => self.mask_background = parse_bool(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| PipelineError::Config { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("{key} set twice")));
            }
            seen.push(key);
            config.set(key, value, base).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Fs { path: path.into(), source })?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(PipelineError::Config { line: 0, msg });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.alpha > 0.0) {
            return err(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.folds < 2 {
            return err(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.workers == 0 {
            return err("workers must be >= 1".into());
        }
        if self.base_channels() == 0 {
            return err("base_channels must be positive".into());
        }
        self.net_spec().validate().map_err(|e| PipelineError::Config { line: 0, msg: e.to_string() })
    }

    pub fn net_spec(&self) -> NetSpec {
        match self.arch {
            Arch::Unet => NetSpec::Unet(UNetSpec::with_base(self.base_channels())),
            Arch::Vnet => NetSpec::Vnet(VNetSpec::with_base(self.base_channels())),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let dice = if self.dice_include_background {
            DiceLossParams::with_background(self.alpha)
        } else {
            DiceLossParams { alpha: self.alpha, ..DiceLossParams::default() }
        };
        TrainConfig {
            learning_rate: self.learning_rate,
            iterations: self.iterations(),
            loss: self.loss(),
            dice,
            class_weights: [1.0; 3],
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        let manifest = self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values = [
            self.arch.name().to_string(),
            self.base_channels().to_string(),
            self.iterations().to_string(),
            format!("{:?}", self.learning_rate),
            self.seed.to_string(),
            self.loss().name().to_string(),
            format!("{:?}", self.alpha),
            self.folds.to_string(),
            manifest,
            self.output.display().to_string(),
            self.eval_every.to_string(),
            self.checkpoint_every.to_string(),
            self.ff_threshold_enabled.to_string(),
            format!("{}x{}", self.pad_xy.0, self.pad_xy.1),
            self.dice_include_background.to_string(),
            self.workers.to_string(),
            self.mask_background.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            if !v.is_empty() {
                writeln!(out, "{k} = {v}").unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_architecture() {
        let u = RunConfig::parse("arch = unet\n", None).unwrap();
        assert_eq!((u.base_channels(), u.iterations(), u.loss()), (64, 65_000, LossKind::CrossEntropy));
        let v = RunConfig::parse("arch = vnet # volumetric\n", None).unwrap();
        assert_eq!((v.base_channels(), v.iterations(), v.loss()), (16, 15_000, LossKind::Dice));
        assert_eq!(v.learning_rate, 1e-4);
        assert_eq!(v.train_config().dice.classes, [1, 2]);
    }

    #[test]
    fn parses_every_key_and_round_trips() {
        let text = "\
# comment line
arch = unet
base_channels = 8
iterations = 1500
learning_rate = 0.001
seed = 42
loss = dice
alpha = 0.5
folds = 5
manifest = data/manifest.csv
output = out
eval_every = 100
checkpoint_every = 500
ff_threshold_enabled = true
pad_xy = 64x96
dice_include_background = true
workers = 2
mask_background = false
";
        let c = RunConfig::parse(text, Some(Path::new("/base"))).unwrap();
        assert_eq!(c.manifest.as_deref(), Some(Path::new("/base/data/manifest.csv")));
        assert_eq!(c.pad_xy, (64, 96));
        assert_eq!(c.train_config().dice.classes, [0, 1, 2]);
        assert!(!c.mask_background);
        let again = RunConfig::parse(&c.to_text(), None).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        let e = RunConfig::parse("arch = unet\nbatch_size = 4\n", None).unwrap_err();
        assert!(matches!(&e, PipelineError::Config { line: 2, msg } if msg.contains("batch_size")), "{e}");
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2\n", None), Err(PipelineError::Config { line: 2, .. })));
        assert!(RunConfig::parse("seed 1\n", None).is_err());
        assert!(RunConfig::parse("arch = resnet\n", None).is_err());
        assert!(RunConfig::parse("alpha = 0\n", None).is_err());
        assert!(RunConfig::parse("folds = 1\n", None).is_err());
        assert!(RunConfig::parse("pad_xy = 0x4\n", None).is_err());
    }
}
