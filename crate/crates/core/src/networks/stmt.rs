//! Spatio-temporal multi-task network: factorized (2+1)D blocks followed by a
//! regression branch and a phase-classification branch.

use cq_tensor::{ConvSpec, Graph, Padding, ParamStore, PoolSpec, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvLayer, DenseLayer};
use crate::error::{CqError, Result};
use crate::geometry::INDEX_COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmtConfig {
    /// Output channels of each spatio-temporal block.
    pub widths: Vec<usize>,
    pub in_channels: usize,
    /// Hidden units of each branch before its output layer.
    pub head_width: usize,
    /// L2 coefficient handed to the optimizer.
    pub weight_decay: f64,
}

impl Default for StmtConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128], in_channels: 2, head_width: 64, weight_decay: 1e-4 }
    }
}

impl StmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CqError::config("widths", format!("need positive block widths, got {:?}", self.widths)));
        }
        if self.in_channels == 0 || self.head_width == 0 {
            return Err(CqError::config("head_width", "channel counts must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CqError::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Intermediate width that gives the factorized pair the parameter budget of
/// one full 3×3×3 convolution from `nin` to `nout` channels.
pub fn factorized_mid_channels(nin: usize, nout: usize) -> usize {
    ((27 * nin * nout) / (3 * nin + 9 * nout)).max(1)
}

#[derive(Clone, Debug)]
struct Block {
    temporal: ConvLayer,
    spatial: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct Stmt {
    config: StmtConfig,
    prefix: String,
    blocks: Vec<Block>,
    reg_hidden: DenseLayer,
    reg_out: DenseLayer,
    cls_hidden: DenseLayer,
    cls_out: DenseLayer,
}

/// Outputs of one forward pass: `[N·t, 11]` indices and `[N·t, 1]` logits.
#[derive(Clone, Copy, Debug)]
pub struct MultitaskVars {
    pub indices: Var,
    pub phase_logits: Var,
}

impl Stmt {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        config: &StmtConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut cin = config.in_channels;
        for (i, &cout) in config.widths.iter().enumerate() {
            let mid = factorized_mid_channels(cin, cout);
            let temporal = ConvLayer::new(store, &format!("{prefix}block{i}.temporal"), ConvSpec::new(&[3, 1, 1], cin, mid), rng)?;
            let spatial = ConvLayer::new(store, &format!("{prefix}block{i}.spatial"), ConvSpec::new(&[1, 3, 3], mid, cout), rng)?;
            blocks.push(Block { temporal, spatial });
            cin = cout;
        }
        let hw = config.head_width;
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            blocks,
            reg_hidden: DenseLayer::new(store, &format!("{prefix}regression.hidden"), cin, hw, rng)?,
            reg_out: DenseLayer::new(store, &format!("{prefix}regression.out"), hw, INDEX_COUNT, rng)?,
            cls_hidden: DenseLayer::new(store, &format!("{prefix}phase.hidden"), cin, hw, rng)?,
            cls_out: DenseLayer::new(store, &format!("{prefix}phase.out"), hw, 1, rng)?,
        })
    }

    pub fn config(&self) -> &StmtConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Runs the blocks on `[N, channels, t, h, w]` and returns every block output.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(CqError::invalid(
                "stmt",
                format!("expected [N, {}, t, h, w] input, got {shape:?}", self.config.in_channels),
            ));
        }
        let pool = PoolSpec::new(&[1, 3, 3]).with_padding(Padding::Same);
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let a = block.temporal.apply(g, store, h)?;
            let a = g.relu(a);
            let b = block.spatial.apply(g, store, a)?;
            let b = g.relu(b);
            h = g.max_pool(b, &pool)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<MultitaskVars> {
        let last = *self.features(g, store, x)?.last().expect("at least one block");
        let pooled = g.frame_pool(last)?;
        let r = self.reg_hidden.apply(g, store, pooled)?;
        let r = g.relu(r);
        let indices = self.reg_out.apply(g, store, r)?;
        let c = self.cls_hidden.apply(g, store, pooled)?;
        let c = g.relu(c);
        let phase_logits = self.cls_out.apply(g, store, c)?;
        Ok(MultitaskVars { indices, phase_logits })
    }

    /// Weight count of block `i`'s factorized pair, biases excluded.
    pub fn block_weight_count<T: Scalar>(&self, store: &ParamStore<T>, i: usize) -> usize {
        let b = &self.blocks[i];
        store.get(b.temporal.w).len() + store.get(b.spatial.w).len()
    }
}
