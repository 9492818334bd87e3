use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::invalid(format!("unknown schedule `{s}` (cosine|linear|constant)"))),
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then decay to 0 at `total_steps`
/// (cosine or linear). `Constant` ignores warmup and returns `peak_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.kind != ScheduleKind::Constant && !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::invalid(format!(
                "warmup fraction must lie in (0, 1), got {}",
                self.warmup_frac
            )));
        }
        // A constant schedule has no shape to stretch, so zero steps is allowed.
        if (self.total_steps == 0 && self.kind != ScheduleKind::Constant) || !(self.peak_lr >= 0.0) {
            return Err(Error::invalid("need total_steps > 0 and peak_lr >= 0"));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.kind == ScheduleKind::Constant {
            return self.peak_lr;
        }
        if step > self.total_steps {
            return 0.0;
        }
        let total = self.total_steps as f64;
        let warm = self.warmup_frac * total;
        let s = step as f64;
        if s <= warm {
            return self.peak_lr * s / warm;
        }
        let progress = (s - warm) / (total - warm);
        match self.kind {
            ScheduleKind::Cosine => 0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()),
            _ => self.peak_lr * (1.0 - progress),
        }
    }
}

pub fn cosine_warmup_lr(step: u64, total_steps: u64, warmup_frac: f64, peak_lr: f64) -> f64 {
    LrSchedule {
        kind: ScheduleKind::Cosine,
        peak_lr,
        total_steps,
        warmup_frac,
    }
    .lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_anchors() {
        let lr = |s| cosine_warmup_lr(s, 1000, 0.1, 2e-4);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(100), 2e-4);
        assert!(lr(1000).abs() < 1e-20);
        assert!((lr(550) - 1e-4).abs() < 1e-12);
        assert_eq!(lr(1001), 0.0);
        assert!((lr(50) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn linear_and_constant() {
        let s = LrSchedule { kind: ScheduleKind::Linear, peak_lr: 1.0, total_steps: 200, warmup_frac: 0.5 };
        assert_eq!(s.lr(100), 1.0);
        assert!((s.lr(150) - 0.5).abs() < 1e-15);
        let c = LrSchedule { kind: ScheduleKind::Constant, peak_lr: 3e-5, total_steps: 10, warmup_frac: 0.0 };
        assert!(c.validate().is_ok());
        assert_eq!(c.lr(0), 3e-5);
    }

    #[test]
    fn warmup_fraction_checked() {
        let s = LrSchedule { kind: ScheduleKind::Cosine, peak_lr: 1.0, total_steps: 10, warmup_frac: 0.0 };
        assert!(s.validate().is_err());
    }
}
