//! Parameter naming scheme, shape table, initialization, and the
//! decoder-to-encoder mirroring correspondence.
//!
//! Naming scheme (stable across versions — checkpoints depend on it):
//!
//! ```text
//! encoder/patch_embed/{proj/{weight,bias}, norm/{gamma,beta}}
//! encoder/stage{s}/block{b}/<block params>        s in 0..S-1
//! encoder/merge{s}/{norm/{gamma,beta}, reduce/weight}
//! bottleneck/block{b}/<block params>              stage S-1
//! bottleneck/norm/{gamma,beta}
//! decoder/stage{d}/block{b}/<block params>        d in 0..S-1, mirrors encoder stage S-2-d
//! expand/up{d}/{linear/weight, norm/{gamma,beta}}
//! expand/final/{linear/weight, norm/{gamma,beta}}
//! skip/stage{d}/fuse/{weight,bias}
//! head/proj/{weight,bias}
//! projector/fc{1,2}/{weight,bias}
//! predictor/fc{1,2}/{weight,bias}
//! ```
//!
//! Block params: `norm1/{gamma,beta}`, `attn/{q,k,v,proj}/{weight,bias}`,
//! `attn/rel_bias/table`, `norm2/{gamma,beta}`, `mlp/fc{1,2}/{weight,bias}`.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{ComponentTag, HeadConfig, NetConfig, TaggedParameters};
use crate::scalar::Scalar;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Truncated normal, std 0.02, clipped at two sigma.
    TruncNormal,
    Zeros,
    Ones,
}

/// Declarative description of one parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub tag: ComponentTag,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

fn spec(name: String, tag: ComponentTag, shape: Vec<usize>, init: InitKind) -> ParamSpec {
    ParamSpec {
        name,
        tag,
        shape,
        init,
    }
}

fn block_specs(prefix: &str, tag: ComponentTag, dim: usize, heads: usize, window: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    use InitKind::*;
    let hidden = dim * mlp_ratio;
    let table_rows = (2 * window - 1) * (2 * window - 1);
    let mut v = Vec::new();
    v.push(spec(format!("{prefix}/norm1/gamma"), tag, vec![dim], Ones));
    v.push(spec(format!("{prefix}/norm1/beta"), tag, vec![dim], Zeros));
    for part in ["q", "k", "v", "proj"] {
        v.push(spec(
            format!("{prefix}/attn/{part}/weight"),
            tag,
            vec![dim, dim],
            TruncNormal,
        ));
        v.push(spec(format!("{prefix}/attn/{part}/bias"), tag, vec![dim], Zeros));
    }
    v.push(spec(
        format!("{prefix}/attn/rel_bias/table"),
        tag,
        vec![table_rows, heads],
        TruncNormal,
    ));
    v.push(spec(format!("{prefix}/norm2/gamma"), tag, vec![dim], Ones));
    v.push(spec(format!("{prefix}/norm2/beta"), tag, vec![dim], Zeros));
    v.push(spec(
        format!("{prefix}/mlp/fc1/weight"),
        tag,
        vec![dim, hidden],
        TruncNormal,
    ));
    v.push(spec(format!("{prefix}/mlp/fc1/bias"), tag, vec![hidden], Zeros));
    v.push(spec(
        format!("{prefix}/mlp/fc2/weight"),
        tag,
        vec![hidden, dim],
        TruncNormal,
    ));
    v.push(spec(format!("{prefix}/mlp/fc2/bias"), tag, vec![dim], Zeros));
    v
}

/// Full parameter table of the segmentation network (no contrastive heads).
pub fn segnet_param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    use ComponentTag::*;
    use InitKind::*;
    let s_total = cfg.stages();
    let e = cfg.embed_dim;
    let p = cfg.patch_size;
    let mut v = Vec::with_capacity(256);

    // patch embedding
    v.push(spec(
        "encoder/patch_embed/proj/weight".into(),
        Encoder,
        vec![p * p * 3, e],
        TruncNormal,
    ));
    v.push(spec(
        "encoder/patch_embed/proj/bias".into(),
        Encoder,
        vec![e],
        Zeros,
    ));
    v.push(spec(
        "encoder/patch_embed/norm/gamma".into(),
        Encoder,
        vec![e],
        Ones,
    ));
    v.push(spec(
        "encoder/patch_embed/norm/beta".into(),
        Encoder,
        vec![e],
        Zeros,
    ));

    // encoder stages and merges
    for st in 0..s_total - 1 {
        for b in 0..cfg.depths[st] {
            v.extend(block_specs(
                &format!("encoder/stage{st}/block{b}"),
                Encoder,
                cfg.dim(st),
                cfg.heads[st],
                cfg.window_at(st),
                cfg.mlp_ratio,
            ));
        }
        let d = cfg.dim(st);
        v.push(spec(
            format!("encoder/merge{st}/norm/gamma"),
            Encoder,
            vec![4 * d],
            Ones,
        ));
        v.push(spec(
            format!("encoder/merge{st}/norm/beta"),
            Encoder,
            vec![4 * d],
            Zeros,
        ));
        v.push(spec(
            format!("encoder/merge{st}/reduce/weight"),
            Encoder,
            vec![4 * d, 2 * d],
            TruncNormal,
        ));
    }

    // bottleneck
    let bs = s_total - 1;
    for b in 0..cfg.depths[bs] {
        v.extend(block_specs(
            &format!("bottleneck/block{b}"),
            Bottleneck,
            cfg.dim(bs),
            cfg.heads[bs],
            cfg.window_at(bs),
            cfg.mlp_ratio,
        ));
    }
    v.push(spec(
        "bottleneck/norm/gamma".into(),
        Bottleneck,
        vec![cfg.dim(bs)],
        Ones,
    ));
    v.push(spec(
        "bottleneck/norm/beta".into(),
        Bottleneck,
        vec![cfg.dim(bs)],
        Zeros,
    ));

    // decoder stages, expands, skips
    for d in 0..s_total - 1 {
        let enc_stage = s_total - 2 - d;
        let dim = cfg.dim(enc_stage);
        let din = cfg.dim(enc_stage + 1); // input to the expand feeding this stage
        v.push(spec(
            format!("expand/up{d}/linear/weight"),
            Expand,
            vec![din, 2 * din],
            TruncNormal,
        ));
        v.push(spec(
            format!("expand/up{d}/norm/gamma"),
            Expand,
            vec![din / 2],
            Ones,
        ));
        v.push(spec(
            format!("expand/up{d}/norm/beta"),
            Expand,
            vec![din / 2],
            Zeros,
        ));
        v.push(spec(
            format!("skip/stage{d}/fuse/weight"),
            Skip,
            vec![2 * dim, dim],
            TruncNormal,
        ));
        v.push(spec(format!("skip/stage{d}/fuse/bias"), Skip, vec![dim], Zeros));
        for b in 0..cfg.depths[enc_stage] {
            v.extend(block_specs(
                &format!("decoder/stage{d}/block{b}"),
                Decoder,
                dim,
                cfg.heads[enc_stage],
                cfg.window_at(enc_stage),
                cfg.mlp_ratio,
            ));
        }
    }

    // final expansion back to pixel resolution, then the projection head
    v.push(spec(
        "expand/final/linear/weight".into(),
        Expand,
        vec![e, p * p * e],
        TruncNormal,
    ));
    v.push(spec("expand/final/norm/gamma".into(), Expand, vec![e], Ones));
    v.push(spec("expand/final/norm/beta".into(), Expand, vec![e], Zeros));
    v.push(spec(
        "head/proj/weight".into(),
        Head,
        vec![e, cfg.num_classes],
        TruncNormal,
    ));
    v.push(spec("head/proj/bias".into(), Head, vec![cfg.num_classes], Zeros));

    v
}

/// Projector (and optional predictor) specs on a pooled feature of `input_dim`.
pub fn head_param_specs(input_dim: usize, head_cfg: &HeadConfig) -> Vec<ParamSpec> {
    use ComponentTag::*;
    use InitKind::*;
    let (h, o) = (head_cfg.hidden_dim, head_cfg.out_dim);
    let mut v = vec![
        spec("projector/fc1/weight".into(), Projector, vec![input_dim, h], TruncNormal),
        spec("projector/fc1/bias".into(), Projector, vec![h], Zeros),
        spec("projector/fc2/weight".into(), Projector, vec![h, o], TruncNormal),
        spec("projector/fc2/bias".into(), Projector, vec![o], Zeros),
    ];
    if head_cfg.with_predictor {
        v.extend([
            spec("predictor/fc1/weight".into(), Predictor, vec![o, h], TruncNormal),
            spec("predictor/fc1/bias".into(), Predictor, vec![h], Zeros),
            spec("predictor/fc2/weight".into(), Predictor, vec![h, o], TruncNormal),
            spec("predictor/fc2/bias".into(), Predictor, vec![o], Zeros),
        ]);
    }
    v
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let x: f64 = rand_distr::StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

/// Materialize parameters for a spec list; deterministic in `seed`.
pub fn init_from_specs<F: Scalar>(specs: &[ParamSpec], seed: u64) -> TaggedParameters<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TaggedParameters::new();
    for sp in specs {
        let n: usize = sp.shape.iter().product();
        let data: Vec<F> = match sp.init {
            InitKind::Zeros => vec![F::zero(); n],
            InitKind::Ones => vec![F::one(); n],
            InitKind::TruncNormal => (0..n)
                .map(|_| F::cast(trunc_normal(&mut rng, 0.02)))
                .collect(),
        };
        params.insert(
            sp.name.clone(),
            sp.tag,
            ArrayD::from_shape_vec(IxDyn(&sp.shape), data).expect("spec shape"),
        );
    }
    params
}

/// Fresh random segmentation network parameters.
pub fn init_segnet<F: Scalar>(cfg: &NetConfig, seed: u64) -> TaggedParameters<F> {
    init_from_specs(&segnet_param_specs(cfg), seed)
}

/// Clone `params` and add projector (+ optional predictor) heads for a pooled
/// feature of width `input_dim`.
pub fn attach_heads<F: Scalar>(
    params: &TaggedParameters<F>,
    input_dim: usize,
    head_cfg: &HeadConfig,
) -> TaggedParameters<F> {
    let mut out = params.clone();
    out.extend(init_from_specs(
        &head_param_specs(input_dim, head_cfg),
        head_cfg.seed,
    ));
    out
}

/// Encoder parameter name a decoder Swin-block parameter mirrors, if any.
///
/// `decoder/stage{d}/block{b}/rest -> encoder/stage{S-2-d}/block{b}/rest`.
/// Only decoder-tagged block parameters have mirror sources; expands, skips
/// and heads do not.
pub fn mirror_source_name(cfg: &NetConfig, decoder_name: &str) -> Option<String> {
    let rest = decoder_name.strip_prefix("decoder/stage")?;
    let slash = rest.find('/')?;
    let d: usize = rest[..slash].parse().ok()?;
    if d + 2 > cfg.stages() {
        return None;
    }
    let enc_stage = cfg.stages() - 2 - d;
    Some(format!("encoder/stage{enc_stage}{}", &rest[slash..]))
}
