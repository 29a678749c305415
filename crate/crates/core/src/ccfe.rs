//! Contextual contrast features: local minus dilated-context convolutions,
//! grouped into multi-scale blocks that chain into a module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Cbam;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{ConvGeometry, ConvParams};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Context dilations of a full block, in branch order.
pub const CONTEXT_DILATIONS: [usize; 4] = [2, 4, 8, 16];

/// Channels of one branch relative to the block input.
pub const BRANCH_DIVISOR: usize = 4;

/// `local(x) - context(x)` for one branch.
pub fn contextual_contrast<T: Real>(
    input: &Tensor<T>,
    local: &ConvParams<T>,
    context: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let a = local.forward(input)?;
    let b = context.forward(input)?;
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "local branch gives {}, context branch gives {}",
            a.shape(),
            b.shape()
        ));
    }
    a.zip_map(&b, |x, y| x - y)
}

/// Blocks per module, branches per block, and whether branches subtract
/// the local term or keep only the context term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcfeLayout {
    pub blocks: usize,
    pub scales: usize,
    pub contrast: bool,
}

impl Default for CcfeLayout {
    fn default() -> Self {
        CcfeLayout {
            blocks: 4,
            scales: 4,
            contrast: true,
        }
    }
}

impl CcfeLayout {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("ccfe blocks must be at least 1".into()));
        }
        if self.scales == 0 || self.scales > CONTEXT_DILATIONS.len() {
            return Err(Error::Config(format!(
                "ccfe scales must be in 1..={}, got {}",
                CONTEXT_DILATIONS.len(),
                self.scales
            )));
        }
        Ok(())
    }

    pub fn dilations(&self) -> &'static [usize] {
        &CONTEXT_DILATIONS[..self.scales.min(CONTEXT_DILATIONS.len())]
    }
}

/// One block: parallel contrast branches, concatenation, batch norm and
/// relu, then attention. Four branches of a quarter width each give back the
/// input width; narrower blocks add a 1x1 projection.
///
/// The local convolutions of all branches share their input and geometry,
/// so they are stored as one stacked weight whose output channels are the
/// branches' local outputs in order.
#[derive(Clone, Debug)]
pub struct CcfeBlock {
    prefix: String,
    channels: usize,
    dilations: Vec<usize>,
    contrast: bool,
    attention: Cbam,
}

impl CcfeBlock {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        dilations: &[usize],
        contrast: bool,
        reduction: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if channels == 0 || !channels.is_multiple_of(BRANCH_DIVISOR) {
            return Err(Error::Config(format!(
                "{prefix}: width {channels} is not divisible by {BRANCH_DIVISOR}"
            )));
        }
        if dilations.is_empty() {
            return Err(Error::Config(format!("{prefix}: no branches")));
        }
        if let Some(d) = dilations.iter().find(|d| !CONTEXT_DILATIONS.contains(d)) {
            return Err(Error::Config(format!(
                "{prefix}: context dilation {d} not in {CONTEXT_DILATIONS:?}"
            )));
        }
        let concat = channels / BRANCH_DIVISOR * dilations.len();
        let attention = Cbam::new(format!("{prefix}.att"), concat, reduction)?;
        Ok(CcfeBlock {
            prefix,
            channels,
            dilations: dilations.to_vec(),
            contrast,
            attention,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn branch_width(&self) -> usize {
        self.channels / BRANCH_DIVISOR
    }

    /// Width of the concatenated branch outputs.
    pub fn concat_width(&self) -> usize {
        self.branch_width() * self.dilations.len()
    }

    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    /// Blocks with fewer than four branches restore the input width with a
    /// 1x1 convolution, batch norm and relu.
    pub fn has_projection(&self) -> bool {
        self.concat_width() != self.channels
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = &self.prefix;
        if self.contrast {
            store.add_conv(rng, &format!("{p}.local"), self.concat_width(), self.channels, 3, false);
        }
        for k in 0..self.dilations.len() {
            store.add_conv(rng, &format!("{p}.context{k}"), self.branch_width(), self.channels, 3, false);
        }
        store.add_norm(&format!("{p}.norm"), self.concat_width());
        self.attention.init(store, rng);
        if self.has_projection() {
            store.add_conv(rng, &format!("{p}.proj"), self.channels, self.concat_width(), 1, false);
            store.add_norm(&format!("{p}.proj_norm"), self.channels);
        }
    }

    /// Concatenated raw branch outputs, before normalization.
    pub fn contrast_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.channels {
            return Err(shape_err!("{}: expected {} channels, got {c}", self.prefix, self.channels));
        }
        let p = &self.prefix;
        let mut contexts = Vec::with_capacity(self.dilations.len());
        for (k, &d) in self.dilations.iter().enumerate() {
            let w = g.param(store, &format!("{p}.context{k}.weight"))?;
            contexts.push(g.conv(x, w, None, ConvGeometry::same(d))?);
        }
        let context = g.concat(&contexts)?;
        if !self.contrast {
            return Ok(context);
        }
        let w = g.param(store, &format!("{p}.local.weight"))?;
        let local = g.conv(x, w, None, ConvGeometry::same(1))?;
        g.sub(local, context)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let f = self.contrast_features(g, store, x)?;
        let f = g.batch_norm(store, &format!("{p}.norm"), f)?;
        let f = g.relu(f);
        let f = self.attention.forward(g, store, f)?;
        if !self.has_projection() {
            return Ok(f);
        }
        let w = g.param(store, &format!("{p}.proj.weight"))?;
        let f = g.conv(f, w, None, ConvGeometry::pointwise())?;
        let f = g.batch_norm(store, &format!("{p}.proj_norm"), f)?;
        Ok(g.relu(f))
    }
}

/// Chained blocks whose outputs are concatenated, refined by attention and
/// fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct CcfeModule {
    prefix: String,
    channels: usize,
    blocks: Vec<CcfeBlock>,
    fusion: Cbam,
}

impl CcfeModule {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        layout: CcfeLayout,
        reduction: usize,
    ) -> Result<Self> {
        layout.validate()?;
        let prefix = prefix.into();
        let blocks = (0..layout.blocks)
            .map(|b| {
                CcfeBlock::new(
                    format!("{prefix}.block{b}"),
                    channels,
                    layout.dilations(),
                    layout.contrast,
                    reduction,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = Cbam::new(format!("{prefix}.fuse_att"), channels * layout.blocks, reduction)?;
        Ok(CcfeModule {
            prefix,
            channels,
            blocks,
            fusion,
        })
    }

    pub fn blocks(&self) -> &[CcfeBlock] {
        &self.blocks
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.fusion.init(store, rng);
        let p = &self.prefix;
        store.add_conv(rng, &format!("{p}.fuse"), self.channels, self.fusion.channels(), 1, false);
        store.add_norm(&format!("{p}.fuse_norm"), self.channels);
    }

    /// Every block output in chain order, and the fused module output.
    pub fn forward_blocks<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
            outs.push(h);
        }
        let cat = g.concat(&outs)?;
        let f = self.fusion.forward(g, store, cat)?;
        let p = &self.prefix;
        let w = g.param(store, &format!("{p}.fuse.weight"))?;
        let f = g.conv(f, w, None, ConvGeometry::pointwise())?;
        let f = g.batch_norm(store, &format!("{p}.fuse_norm"), f)?;
        Ok((outs, g.relu(f)))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_blocks(g, store, x)?.1)
    }
}
