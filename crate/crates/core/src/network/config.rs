use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// A feature-pyramid level; `Pk` has stride `2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::P2, Level::P3, Level::P4, Level::P5];

    pub fn index(self) -> usize {
        match self {
            Level::P2 => 2,
            Level::P3 => 3,
            Level::P4 => 4,
            Level::P5 => 5,
        }
    }

    pub fn from_index(k: usize) -> Option<Level> {
        match k {
            2 => Some(Level::P2),
            3 => Some(Level::P3),
            4 => Some(Level::P4),
            5 => Some(Level::P5),
            _ => None,
        }
    }

    pub fn stride(self) -> usize {
        1 << self.index()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}

/// Channels per level P1..P5 before the width multiplier.
pub const BASE_CHANNELS: [usize; 5] = [32, 64, 128, 256, 256];
/// Bottleneck repeats per backbone stage P2..P5 before the depth multiplier.
pub const BASE_DEPTHS: [usize; 4] = [3, 6, 6, 3];
/// Bottleneck repeats in each neck node before the depth multiplier.
pub const BASE_NECK_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Detection levels, finest first.
    pub levels: Vec<Level>,
    pub use_mfam: bool,
    pub use_iema: bool,
    pub use_dasi: bool,
    pub use_skips: bool,
    pub use_p2: bool,
    pub iema_groups: usize,
    pub mfam_kernels: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale profile with every component enabled.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            image_size: 128,
            width_mult: 0.25,
            depth_mult: 0.33,
            levels: Level::ALL.to_vec(),
            use_mfam: true,
            use_iema: true,
            use_dasi: true,
            use_skips: true,
            use_p2: true,
            iema_groups: 8,
            mfam_kernels: vec![3, 5, 7],
        }
    }

    /// The same profile with every added component removed: three detection
    /// levels, plain PAFPN neck.
    pub fn baseline_tiny(num_classes: usize) -> Self {
        Self {
            levels: vec![Level::P3, Level::P4, Level::P5],
            use_mfam: false,
            use_iema: false,
            use_dasi: false,
            use_skips: false,
            use_p2: false,
            ..Self::tiny(num_classes)
        }
    }

    /// Baseline, then P2, MFAM, skips, IEMA and DASI added one at a time.
    pub fn ablation_ladder(num_classes: usize) -> Vec<(&'static str, ModelConfig)> {
        let mut c = Self::baseline_tiny(num_classes);
        let mut out = vec![("baseline", c.clone())];
        c.use_p2 = true;
        c.levels.insert(0, Level::P2);
        out.push(("+p2", c.clone()));
        c.use_mfam = true;
        out.push(("+mfam", c.clone()));
        c.use_skips = true;
        out.push(("+skips", c.clone()));
        c.use_iema = true;
        out.push(("+iema", c.clone()));
        c.use_dasi = true;
        out.push(("+dasi", c.clone()));
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig =
            serde_json::from_str(text).map_err(|e| config_err(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read model config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channels at P1..P5 after the width multiplier, rounded to multiples
    /// of 4.
    pub fn channels(&self) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for (i, &b) in BASE_CHANNELS.iter().enumerate() {
            let c = (b as f64 * self.width_mult / 4.0).round() as usize * 4;
            if c == 0 {
                return Err(config_err(format!(
                    "width_mult {} leaves level P{} with 0 channels",
                    self.width_mult,
                    i + 1
                )));
            }
            out[i] = c;
        }
        Ok(out)
    }

    /// Channels at level `k` (1..=5).
    pub fn level_channels(&self, k: usize) -> Result<usize> {
        Ok(self.channels()?[k - 1])
    }

    pub fn stage_depth(&self, k: usize) -> usize {
        scaled_depth(BASE_DEPTHS[k - 2], self.depth_mult)
    }

    pub fn neck_depth(&self) -> usize {
        scaled_depth(BASE_NECK_DEPTH, self.depth_mult)
    }

    /// Finest pyramid level carried through the neck.
    pub fn lowest_neck_level(&self) -> usize {
        if self.use_p2 {
            2
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(config_err("num_classes must be at least 1"));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(config_err(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(config_err(format!("width_mult must be positive, got {}", self.width_mult)));
        }
        if !(self.depth_mult > 0.0 && self.depth_mult.is_finite()) {
            return Err(config_err(format!("depth_mult must be positive, got {}", self.depth_mult)));
        }
        if self.levels.is_empty() {
            return Err(config_err("levels must not be empty"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("levels must be strictly increasing, e.g. [\"P3\",\"P4\",\"P5\"]"));
        }
        if self.use_p2 != self.levels.contains(&Level::P2) {
            return Err(config_err(format!(
                "use_p2={} disagrees with levels {:?}",
                self.use_p2, self.levels
            )));
        }
        let ch = self.channels()?;
        if self.use_dasi {
            for l in &self.levels {
                if ch[l.index() - 1] % 4 != 0 {
                    return Err(config_err(format!("level {l} channels not divisible by 4")));
                }
            }
        }
        if self.use_iema {
            for k in self.lowest_neck_level()..=5 {
                crate::blocks::IemaSpec::new(ch[k - 1]).with_groups(self.iema_groups).validate()?;
            }
        }
        if self.use_mfam {
            crate::blocks::MfamSpec {
                channels: ch[1],
                kernel_sizes: self.mfam_kernels.clone(),
                include_identity_branch: true,
            }
            .validate()?;
        }
        Ok(())
    }
}

fn scaled_depth(base: usize, mult: f64) -> usize {
    ((base as f64 * mult).round() as usize).max(1)
}
