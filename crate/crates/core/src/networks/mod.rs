//! Segmentation network G and multi-task network D, plus the topology
//! records stored alongside their weights in checkpoints.

mod drunet;
mod layers;
mod stmt;

pub use drunet::{Bottleneck, DrUnet, DrUnetConfig, SegmentationOutput, SpatialMode};
pub use stmt::{factorized_mid_channels, MultitaskVars, Stmt, StmtConfig};

use cq_tensor::Tensor;

use crate::error::{CqError, Result};

/// Parameter name prefix of the segmentation network.
pub const G_PREFIX: &str = "g.";
/// Parameter name prefix of the multi-task network.
pub const D_PREFIX: &str = "d.";

pub const G_META: &str = "meta.g";
pub const D_META: &str = "meta.d";

fn small_int(v: f32, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > 1e6 {
        return Err(CqError::invalid("checkpoint", format!("{what} field holds {v}, expected a small integer")));
    }
    Ok(v as usize)
}

impl DrUnetConfig {
    pub fn to_meta(&self) -> Tensor<f32> {
        let mut v = vec![
            self.base_filters as f32,
            self.depth as f32,
            (self.mode == SpatialMode::ThreeD) as u8 as f32,
            self.classes as f32,
            self.in_channels as f32,
            (self.bottleneck == Bottleneck::Parallel) as u8 as f32,
        ];
        v.extend(self.dilations.iter().map(|&d| d as f32));
        Tensor::new(&[v.len()], v).expect("non-empty meta")
    }

    pub fn from_meta(t: &Tensor<f32>) -> Result<Self> {
        let d = t.data();
        if d.len() < 7 {
            return Err(CqError::invalid("checkpoint", format!("{G_META} is too short ({} values)", d.len())));
        }
        let cfg = Self {
            base_filters: small_int(d[0], "base_filters")?,
            depth: small_int(d[1], "depth")?,
            mode: if small_int(d[2], "mode")? == 1 { SpatialMode::ThreeD } else { SpatialMode::TwoD },
            classes: small_int(d[3], "classes")?,
            in_channels: small_int(d[4], "in_channels")?,
            bottleneck: if small_int(d[5], "bottleneck")? == 1 { Bottleneck::Parallel } else { Bottleneck::Stacked },
            dilations: d[6..].iter().map(|&x| small_int(x, "dilation")).collect::<Result<_>>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl StmtConfig {
    pub fn to_meta(&self) -> Tensor<f32> {
        let mut v = vec![self.in_channels as f32, self.head_width as f32];
        v.extend(self.widths.iter().map(|&w| w as f32));
        Tensor::new(&[v.len()], v).expect("non-empty meta")
    }

    pub fn from_meta(t: &Tensor<f32>) -> Result<Self> {
        let d = t.data();
        if d.len() < 3 {
            return Err(CqError::invalid("checkpoint", format!("{D_META} is too short ({} values)", d.len())));
        }
        let cfg = Self {
            in_channels: small_int(d[0], "in_channels")?,
            head_width: small_int(d[1], "head_width")?,
            widths: d[2..].iter().map(|&x| small_int(x, "width")).collect::<Result<_>>()?,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
