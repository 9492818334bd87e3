//! Kernel export. A forward kernel tap `l` is the weight of position `k - l` in
//! output `k` (relative position `-l`); backward kernels are reported in
//! backward orientation, tap `l` weighting position `k + l` (relative `+l`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Direction, Model};
use crate::ssm::{discretize, materialize_kernel};

pub const CROP: usize = 10;
pub const CROP_WIDTH: usize = 2 * CROP + 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelEntry {
    pub layer: usize,
    pub direction: &'static str,
    pub taps: Vec<f64>,
    /// Raw taps at relative positions `-10..=10`; zero where the direction has no reach.
    pub crop: [f64; CROP_WIDTH],
    /// Min-max scaling of `|crop|`; all zeros when the crop is constant.
    pub normalized: [f64; CROP_WIDTH],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelDump {
    pub seq_len: usize,
    pub n_layers: usize,
    pub entries: Vec<KernelEntry>,
}

fn crop_of(taps: &[f64], dir: Direction) -> [f64; CROP_WIDTH] {
    let mut crop = [0.0; CROP_WIDTH];
    for (l, &t) in taps.iter().take(CROP + 1).enumerate() {
        let idx = match dir {
            Direction::Forward => CROP - l,
            Direction::Backward => CROP + l,
        };
        crop[idx] = t;
    }
    crop
}

pub fn min_max_abs(values: &[f64; CROP_WIDTH]) -> [f64; CROP_WIDTH] {
    let abs = values.map(f64::abs);
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        abs.map(|v| (v - lo) / (hi - lo))
    } else {
        [0.0; CROP_WIDTH]
    }
}

/// Materialize every layer's forward and backward kernel at `max_len`.
pub fn dump_kernels(model: &Model) -> Result<KernelDump> {
    let seq_len = model.cfg.max_len;
    let mut entries = Vec::new();
    for layer in 0..model.blocks.len() {
        for dir in [Direction::Forward, Direction::Backward] {
            let Some(p) = model.ssm_params(layer, dir) else {
                return Err(Error::Unsupported("no kernels to dump: model is attention-routed".into()));
            };
            let taps = materialize_kernel(&discretize(&p), seq_len).taps;
            let crop = crop_of(&taps, dir);
            entries.push(KernelEntry {
                layer,
                direction: dir.as_str(),
                normalized: min_max_abs(&crop),
                crop,
                taps,
            });
        }
    }
    Ok(KernelDump {
        seq_len,
        n_layers: model.blocks.len(),
        entries,
    })
}

impl KernelDump {
    /// CSV `layer,direction,relative_position,tap,normalized_tap` over the crop.
    pub fn crop_csv(&self) -> String {
        let mut s = String::from("layer,direction,relative_position,tap,normalized_tap\n");
        for e in &self.entries {
            for (i, (t, n)) in e.crop.iter().zip(&e.normalized).enumerate() {
                let rel = i as i64 - CROP as i64;
                let _ = writeln!(s, "{},{},{},{:e},{:e}", e.layer, e.direction, rel, t, n);
            }
        }
        s
    }

    /// CSV `layer,direction,tap_index,tap` with every tap.
    pub fn full_csv(&self) -> String {
        let mut s = String::from("layer,direction,tap_index,tap\n");
        for e in &self.entries {
            for (i, t) in e.taps.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{:e}", e.layer, e.direction, i, t);
            }
        }
        s
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "seq_len": self.seq_len,
            "n_layers": self.n_layers,
            "kernels_per_layer": 2,
            "crop": [-(CROP as i64), CROP],
            "normalization": "min-max of absolute taps per (layer, direction) over the crop",
            "orientation": {
                "forward": "tap l weights position k-l; relative position -l",
                "backward": "tap l weights position k+l; relative position +l"
            }
        })
    }

    /// Writes `kernels.csv`, `kernels_full.csv` and `kernels_header.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = serde_json::to_string_pretty(&self.header())? + "\n";
        for (name, text) in [
            ("kernels.csv", self.crop_csv()),
            ("kernels_full.csv", self.full_csv()),
            ("kernels_header.json", header),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Largest absolute tap change per (layer, direction), e.g. before and after finetuning.
    pub fn diff(&self, other: &KernelDump) -> Result<Vec<(usize, &'static str, f64)>> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid("kernel dumps have different layouts"));
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                if a.layer != b.layer || a.direction != b.direction || a.taps.len() != b.taps.len() {
                    return Err(Error::invalid("kernel dumps have different layouts"));
                }
                let d = a.taps.iter().zip(&b.taps).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                Ok((a.layer, a.direction, d))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig, Routing};

    fn toy() -> Model {
        Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 3).unwrap()
    }

    #[test]
    fn two_kernels_per_layer() {
        let d = dump_kernels(&toy()).unwrap();
        assert_eq!(d.entries.len(), 4);
        for e in &d.entries {
            let max = e.normalized.iter().cloned().fold(0.0, f64::max);
            let min = e.normalized.iter().cloned().fold(1.0, f64::min);
            assert_eq!((min, max), (0.0, 1.0));
        }
    }

    #[test]
    fn forward_taps_are_passthrough() {
        let m = toy();
        let d = dump_kernels(&m).unwrap();
        let p = m.ssm_params(1, Direction::Forward).unwrap();
        let k = materialize_kernel(&discretize(&p), m.cfg.max_len);
        assert_eq!(d.entries[2].taps, k.taps);
    }

    #[test]
    fn crop_orientation() {
        let taps: Vec<f64> = (1..=12).map(f64::from).collect();
        let f = crop_of(&taps, Direction::Forward);
        let b = crop_of(&taps, Direction::Backward);
        assert_eq!((f[CROP], f[0], f[CROP + 1]), (1.0, 11.0, 0.0));
        assert_eq!((b[CROP], b[2 * CROP], b[CROP - 1]), (1.0, 11.0, 0.0));
    }

    #[test]
    fn normalization_is_scale_free() {
        let mut c = [0.0; CROP_WIDTH];
        for (i, v) in c.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin();
        }
        let a = min_max_abs(&c);
        let b = min_max_abs(&c.map(|v| 3.5 * v));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_model_has_no_kernels() {
        let m = Model::new(ModelConfig::toy(Arch::Stacked, Routing::Attention), 1).unwrap();
        assert!(matches!(dump_kernels(&m), Err(Error::Unsupported(_))));
    }
}
