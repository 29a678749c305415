//! Backbone, per-level contrast modules and coarse-to-fine mirror maps.
//!
//! The backbone is a plain CNN whose stages each apply two conv3x3, batch
//! norm, relu units; every stage after the first starts with a stride-2
//! convolution. Maps are produced from the deepest level upwards: each
//! level's features are gated by the sigmoid of the next-deeper map before
//! its contrast module and 1x1 head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccfe::{CcfeLayout, CcfeModule, BRANCH_DIVISOR};
use crate::crf::{crf_refine, CrfParams};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::loss::LossKind;
use crate::ops::{sigmoid, ConvGeometry};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Network variants of the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Contrast modules at every level, Lovász-hinge loss.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Backbone and heads only ("basic"), Lovász-hinge loss.
    #[serde(rename = "no_ccfe")]
    NoCcfe,
    /// Backbone and heads only, binary cross-entropy.
    #[serde(rename = "bce_loss")]
    BceLoss,
    /// Modules keep only the context term of each branch.
    #[serde(rename = "ccfe_no_contrast")]
    CcfeNoContrast,
    /// One block with four scales.
    #[serde(rename = "1B4C")]
    OneBlockFourScales,
    /// Four blocks with one scale each.
    #[serde(rename = "4B1C")]
    FourBlocksOneScale,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoCcfe,
        Ablation::BceLoss,
        Ablation::CcfeNoContrast,
        Ablation::OneBlockFourScales,
        Ablation::FourBlocksOneScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCcfe => "no_ccfe",
            Ablation::BceLoss => "bce_loss",
            Ablation::CcfeNoContrast => "ccfe_no_contrast",
            Ablation::OneBlockFourScales => "1B4C",
            Ablation::FourBlocksOneScale => "4B1C",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }

    pub fn loss(self) -> LossKind {
        match self {
            Ablation::BceLoss => LossKind::Bce,
            _ => LossKind::LovaszHinge,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Square input side length.
    pub resolution: usize,
    /// Backbone stage widths, shallowest first.
    pub widths: Vec<usize>,
    /// Stride of the first backbone convolution, so the shallowest side
    /// output is at `resolution / stem_stride`.
    pub stem_stride: usize,
    pub ccfe_blocks: usize,
    pub ccfe_scales: usize,
    /// Attention reduction ratio, shared by block and fusion attention.
    pub reduction: usize,
    /// Supervised levels; equals the number of backbone stages.
    pub supervision: usize,
    /// Loss weight per level, shallowest first.
    pub loss_weights: Vec<f64>,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            resolution: 64,
            widths: vec![16, 32, 64, 128],
            stem_stride: 2,
            ccfe_blocks: 4,
            ccfe_scales: 4,
            reduction: 4,
            supervision: 4,
            loss_weights: vec![1.0; 4],
            ablation: Ablation::Full,
        }
    }
}

impl NetworkConfig {
    /// Contrast-module layout, or `None` when the variant has no modules.
    pub fn ccfe_layout(&self) -> Option<CcfeLayout> {
        let (blocks, scales, contrast) = match self.ablation {
            Ablation::NoCcfe | Ablation::BceLoss => return None,
            Ablation::Full => (self.ccfe_blocks, self.ccfe_scales, true),
            Ablation::CcfeNoContrast => (self.ccfe_blocks, self.ccfe_scales, false),
            Ablation::OneBlockFourScales => (1, 4, true),
            Ablation::FourBlocksOneScale => (4, 1, true),
        };
        Some(CcfeLayout {
            blocks,
            scales,
            contrast,
        })
    }

    pub fn loss(&self) -> LossKind {
        self.ablation.loss()
    }

    /// Overall downsampling from the input to the deepest level.
    pub fn total_stride(&self) -> usize {
        self.stem_stride << self.widths.len().saturating_sub(1)
    }

    /// Side length of level `s` (1-based) for an input of side `input`.
    pub fn level_size(&self, input: usize, s: usize) -> usize {
        input / (self.stem_stride << (s - 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() {
            return bad("widths must not be empty".into());
        }
        if self.supervision != self.widths.len() {
            return bad(format!(
                "supervision {} must equal the number of backbone stages {}",
                self.supervision,
                self.widths.len()
            ));
        }
        if self.reduction == 0 {
            return bad("reduction must be positive".into());
        }
        for &w in &self.widths {
            if w == 0 || w % BRANCH_DIVISOR != 0 || w % self.reduction != 0 {
                return bad(format!(
                    "width {w} must be positive and divisible by {BRANCH_DIVISOR} and by reduction {}",
                    self.reduction
                ));
            }
        }
        if self.loss_weights.len() != self.supervision {
            return bad(format!(
                "{} loss weights for {} supervised levels",
                self.loss_weights.len(),
                self.supervision
            ));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return bad(format!("stem_stride must be 1 or 2, got {}", self.stem_stride));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(self.total_stride()) {
            return bad(format!(
                "resolution {} is not divisible by {}",
                self.resolution,
                self.total_stride()
            ));
        }
        if let Some(layout) = self.ccfe_layout() {
            layout.validate()?;
        }
        Ok(())
    }
}

/// Logits of one supervised level, upsampled to the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MirrorMap<T> {
    pub logits: Tensor<T>,
    /// 1-based level; 1 is the shallowest and gives the final prediction.
    pub level: usize,
}

/// Graph handles of one forward pass; index 0 is level 1.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// Per-level logits at input resolution.
    pub maps: Vec<Var>,
    /// Per-level logits at the level's own resolution.
    pub level_maps: Vec<Var>,
}

/// `features * sigmoid(upsample(coarser))`, with the map resized to the
/// features' plane.
pub fn gate_features<T: Real>(g: &mut Graph<T>, features: Var, coarser: Var) -> Result<Var> {
    let s = g.shape(features);
    let up = g.resize(coarser, s.h, s.w)?;
    let gate = g.sigmoid(up);
    g.mul(features, gate)
}

/// `prob >= threshold` as 0/1.
pub fn threshold_mask<T: Real>(prob: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::of(threshold);
    prob.map(|p| if p >= t { T::one() } else { T::zero() })
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    modules: Vec<Option<CcfeModule>>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let modules = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| match config.ccfe_layout() {
                Some(layout) => {
                    CcfeModule::new(format!("level{}.ccfe", i + 1), w, layout, config.reduction)
                        .map(Some)
                }
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { config, modules })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.widths.len()
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut c_in = 3;
        for (i, &w) in self.config.widths.iter().enumerate() {
            let s = i + 1;
            store.add_conv(rng, &format!("fen.stage{s}.conv1"), w, c_in, 3, false);
            store.add_norm(&format!("fen.stage{s}.norm1"), w);
            store.add_conv(rng, &format!("fen.stage{s}.conv2"), w, w, 3, false);
            store.add_norm(&format!("fen.stage{s}.norm2"), w);
            c_in = w;
        }
        for (i, module) in self.modules.iter().enumerate() {
            if let Some(m) = module {
                m.init(&mut store, rng);
            }
            let s = i + 1;
            store.add_conv(rng, &format!("level{s}.head"), 1, self.config.widths[i], 1, true);
        }
        store
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 3 || shape.n == 0 {
            return Err(shape_err!("expected N x 3 x H x W images, got {shape}"));
        }
        let stride = self.config.total_stride();
        if !shape.h.is_multiple_of(stride) || !shape.w.is_multiple_of(stride) || shape.h == 0 || shape.w == 0 {
            return Err(shape_err!(
                "image plane {}x{} is not divisible by {stride}",
                shape.h,
                shape.w
            ));
        }
        Ok(())
    }

    /// Backbone side outputs, shallowest first.
    pub fn backbone<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(image))?;
        let mut feats = Vec::with_capacity(self.levels());
        let mut h = image;
        for s in 1..=self.levels() {
            let stride = if s == 1 { self.config.stem_stride } else { 2 };
            let w = g.param(store, &format!("fen.stage{s}.conv1.weight"))?;
            let geometry = ConvGeometry {
                stride,
                ..ConvGeometry::same(1)
            };
            h = g.conv(h, w, None, geometry)?;
            h = g.batch_norm(store, &format!("fen.stage{s}.norm1"), h)?;
            h = g.relu(h);
            let w = g.param(store, &format!("fen.stage{s}.conv2.weight"))?;
            h = g.conv(h, w, None, ConvGeometry::same(1))?;
            h = g.batch_norm(store, &format!("fen.stage{s}.norm2"), h)?;
            h = g.relu(h);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<NetworkOutput> {
        let input = g.shape(image);
        let feats = self.backbone(g, store, image)?;
        let mut level_maps = vec![None; self.levels()];
        let mut coarser: Option<Var> = None;
        for i in (0..self.levels()).rev() {
            let mut f = feats[i];
            if let Some(m) = coarser {
                f = gate_features(g, f, m)?;
            }
            if let Some(module) = &self.modules[i] {
                f = module.forward(g, store, f)?;
            }
            let s = i + 1;
            let w = g.param(store, &format!("level{s}.head.weight"))?;
            let b = g.param(store, &format!("level{s}.head.bias"))?;
            let m = g.conv(f, w, Some(b), ConvGeometry::pointwise())?;
            level_maps[i] = Some(m);
            coarser = Some(m);
        }
        let level_maps: Vec<Var> = level_maps.into_iter().map(|m| m.expect("every level visited")).collect();
        let maps = level_maps
            .iter()
            .map(|&m| g.resize(m, input.h, input.w))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkOutput { maps, level_maps })
    }

    /// Weighted sum of per-level losses against `mask`.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        output: &NetworkOutput,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let kind = self.config.loss();
        let mut terms = Vec::with_capacity(output.maps.len());
        for (&m, &w) in output.maps.iter().zip(&self.config.loss_weights) {
            let l = g.loss(kind, m, mask)?;
            terms.push((l, T::of(w)));
        }
        g.weighted_sum(&terms)
    }

    /// Inference-mode maps, level 1 first.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<MirrorMap<T>>> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(image.clone());
        let out = self.forward_graph(&mut g, store, x)?;
        Ok(out
            .maps
            .iter()
            .enumerate()
            .map(|(i, &m)| MirrorMap {
                logits: g.value(m).clone(),
                level: i + 1,
            })
            .collect())
    }

    /// Mirror probability of level 1.
    pub fn probabilities<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let maps = self.forward(store, image)?;
        Ok(maps[0].logits.map(sigmoid))
    }

    /// Binary mask from level 1, optionally refined by the dense CRF.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        threshold: f64,
        crf: Option<&CrfParams>,
    ) -> Result<Tensor<T>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Argument(format!("threshold {threshold} not in (0, 1)")));
        }
        let mut prob = self.probabilities(store, image)?;
        if let Some(params) = crf {
            prob = crf_refine(image, &prob, params)?;
        }
        Ok(threshold_mask(&prob, threshold))
    }
}

/// Validates `config` and initializes every parameter from `rng`.
pub fn build_network<T: Real, R: Rng>(config: &NetworkConfig, rng: &mut R) -> Result<(Network, ParamStore<T>)> {
    let net = Network::new(config.clone())?;
    let store = net.init(rng);
    Ok((net, store))
}
