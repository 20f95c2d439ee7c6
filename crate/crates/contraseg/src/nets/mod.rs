//! The hierarchical windowed-attention encoder and the U-shaped segmentation
//! network built from it.
//!
//! Every trainable parameter carries exactly one [`ComponentTag`] so that
//! checkpoint surgery can address network parts by role. Parameter names
//! follow a stable `component/stage{s}/block{b}/module/param` scheme that
//! checkpoints depend on; see [`init`] for the full listing and the
//! decoder-to-encoder mirroring correspondence.

pub mod forward;
pub mod init;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Role of a parameter inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentTag {
    Encoder,
    Bottleneck,
    Decoder,
    Skip,
    Expand,
    Head,
    Projector,
    Predictor,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 8] = [
        ComponentTag::Encoder,
        ComponentTag::Bottleneck,
        ComponentTag::Decoder,
        ComponentTag::Skip,
        ComponentTag::Expand,
        ComponentTag::Head,
        ComponentTag::Projector,
        ComponentTag::Predictor,
    ];

    /// The backbone transferred between pretrainers and the segmentation net.
    pub const BACKBONE: [ComponentTag; 2] = [ComponentTag::Encoder, ComponentTag::Bottleneck];

    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentTag::Encoder => "encoder",
            ComponentTag::Bottleneck => "bottleneck",
            ComponentTag::Decoder => "decoder",
            ComponentTag::Skip => "skip",
            ComponentTag::Expand => "expand",
            ComponentTag::Head => "head",
            ComponentTag::Projector => "projector",
            ComponentTag::Predictor => "predictor",
        }
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "encoder" => ComponentTag::Encoder,
            "bottleneck" => ComponentTag::Bottleneck,
            "decoder" => ComponentTag::Decoder,
            "skip" => ComponentTag::Skip,
            "expand" => ComponentTag::Expand,
            "head" => ComponentTag::Head,
            "projector" => ComponentTag::Projector,
            "predictor" => ComponentTag::Predictor,
            other => return Err(Error::Transfer(format!("unknown component tag {other}"))),
        })
    }
}

/// Named scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePreset {
    PaperTiny,
    Desk,
}

/// Architecture hyperparameters.
///
/// `depths.len()` is the total stage count; the last stage is the bottleneck,
/// the ones before it are encoder stages mirrored by the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub scale_preset: ScalePreset,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// CPU-friendly scale used by tests and the end-to-end harness.
    pub fn desk() -> Self {
        NetConfig {
            img_size: 64,
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 4,
            num_classes: 3,
            mlp_ratio: 4,
            scale_preset: ScalePreset::Desk,
        }
    }

    /// The tiny-variant scale of the clinical setup.
    pub fn paper_tiny() -> Self {
        NetConfig {
            img_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            num_classes: 3,
            mlp_ratio: 4,
            scale_preset: ScalePreset::PaperTiny,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Spatial side of stage `s` tokens.
    pub fn resolution(&self, s: usize) -> usize {
        self.img_size / self.patch_size / (1 << s)
    }

    /// Channel width of stage `s`.
    pub fn dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Window size actually used at stage `s` (clamped to the resolution).
    pub fn window_at(&self, s: usize) -> usize {
        self.window_size.min(self.resolution(s))
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.dim(self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 {
            return Err(Error::Config("need at least 2 stages".into()));
        }
        if self.heads.len() != s {
            return Err(Error::Config(format!(
                "heads per stage ({}) must match depths ({s})",
                self.heads.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        let downsampling = self.patch_size << (s - 1);
        if self.img_size == 0 || !self.img_size.is_multiple_of(downsampling) {
            return Err(Error::Config(format!(
                "img_size {} must be a positive multiple of patch_size*2^(stages-1) = {downsampling}",
                self.img_size
            )));
        }
        for st in 0..s {
            let r = self.resolution(st);
            let w = self.window_at(st);
            if !r.is_multiple_of(w) {
                return Err(Error::Config(format!(
                    "stage {st}: resolution {r} not divisible by window {w}"
                )));
            }
            if !self.dim(st).is_multiple_of(self.heads[st]) {
                return Err(Error::Config(format!(
                    "stage {st}: dim {} not divisible by heads {}",
                    self.dim(st),
                    self.heads[st]
                )));
            }
            if self.depths[st] == 0 {
                return Err(Error::Config(format!("stage {st} has zero depth")));
            }
        }
        Ok(())
    }
}

/// One tagged parameter array.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub array: ArrayD<F>,
    pub tag: ComponentTag,
}

/// Named, tagged parameter collection; iteration order is name order.
#[derive(Debug, Clone, Default)]
pub struct TaggedParameters<F: Scalar> {
    map: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> TaggedParameters<F> {
    pub fn new() -> Self {
        TaggedParameters {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: ComponentTag, array: ArrayD<F>) {
        self.map.insert(name.into(), Param { array, tag });
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn tags_present(&self) -> std::collections::BTreeSet<ComponentTag> {
        self.map.values().map(|p| p.tag).collect()
    }

    /// Clone the subset of parameters carrying any of `tags`.
    pub fn subset(&self, tags: &[ComponentTag]) -> TaggedParameters<F> {
        let map = self
            .map
            .iter()
            .filter(|(_, p)| tags.contains(&p.tag))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        TaggedParameters { map }
    }

    /// Move all entries of `other` into `self` (names must not collide).
    pub fn extend(&mut self, other: TaggedParameters<F>) {
        for (k, v) in other.map {
            debug_assert!(!self.map.contains_key(&k), "parameter name collision {k}");
            self.map.insert(k, v);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.array.len()).sum()
    }

    /// Exact elementwise equality of the shared names.
    pub fn bitwise_eq(&self, other: &TaggedParameters<F>) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().all(|(k, p)| {
                other.map.get(k).is_some_and(|q| {
                    p.array.shape() == q.array.shape()
                        && p.array.iter().zip(q.array.iter()).all(|(a, b)| a == b)
                })
            })
    }

    /// Convert to another scalar type.
    pub fn cast<G: Scalar>(&self) -> TaggedParameters<G> {
        let map = self
            .map
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    Param {
                        array: p.array.mapv(|v| G::cast(v.as_f64())),
                        tag: p.tag,
                    },
                )
            })
            .collect();
        TaggedParameters { map }
    }
}

/// Per-stage encoder features plus the bottleneck output, spatial layout
/// `[B, r, r, C]` with `r` halving and `C` doubling per stage.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F: Scalar> {
    pub stages: Vec<ArrayD<F>>,
    pub bottleneck: ArrayD<F>,
}

/// Projector/predictor head sizes for the contrastive pretrainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub with_predictor: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        // 128-dim embeddings through a 256-wide hidden layer
        HeadConfig {
            hidden_dim: 256,
            out_dim: 128,
            with_predictor: true,
            seed: 0x4845_4144,
        }
    }
}

pub use forward::{encoder_forward, segnet_forward, Binder, EncoderOut};
pub use init::{attach_heads, init_segnet, mirror_source_name, segnet_param_specs, ParamSpec};
