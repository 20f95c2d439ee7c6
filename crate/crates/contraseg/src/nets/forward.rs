//! Graph assembly for the encoder, the U-shaped segmentation network, and the
//! contrastive heads.
//!
//! Token tensors are `[B, L, C]`; spatial juggling (window partition, merge,
//! expand) happens through reshape/permute pairs so gradients flow through
//! data movement for free.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use super::{
    init::segnet_param_specs, ComponentTag, FeaturePyramid, NetConfig, TaggedParameters,
};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -100.0;

/// Maps parameter names to graph nodes; parameters from different sets can be
/// bound trainable (leaves) or frozen (constants) into one lookup table.
#[derive(Default)]
pub struct Binder {
    map: BTreeMap<String, (Tensor, ComponentTag)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn bind_all<F: Scalar>(
        &mut self,
        g: &mut Graph<F>,
        params: &TaggedParameters<F>,
        trainable: bool,
    ) {
        for (name, p) in params.iter() {
            let t = if trainable {
                g.leaf(p.array.clone())
            } else {
                g.constant(p.array.clone())
            };
            self.map.insert(name.clone(), (t, p.tag));
        }
    }

    pub fn get(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
            .0
    }

    /// Gradients accumulated on bound parameters after a backward pass.
    pub fn grads<F: Scalar>(&self, g: &Graph<F>) -> BTreeMap<String, ArrayD<F>> {
        self.map
            .iter()
            .filter_map(|(n, (t, _))| g.grad(*t).map(|ga| (n.clone(), ga.clone())))
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&String, Tensor, ComponentTag)> {
        self.map.iter().map(|(n, (t, tag))| (n, *t, *tag))
    }
}

/// Encoder outputs: per-stage tokens (before each merge) and the normalized
/// bottleneck tokens.
pub struct EncoderOut {
    pub stage_tokens: Vec<Tensor>,
    pub bottleneck_tokens: Tensor,
}

fn linear<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    prefix: &str,
    x: Tensor,
    with_bias: bool,
) -> Tensor {
    let w = b.get(&format!("{prefix}/weight"));
    let y = g.matmul(x, w);
    if with_bias {
        let bias = b.get(&format!("{prefix}/bias"));
        g.add_bias(y, bias)
    } else {
        y
    }
}

fn layer_norm<F: Scalar>(g: &mut Graph<F>, b: &Binder, prefix: &str, x: Tensor) -> Tensor {
    let gamma = b.get(&format!("{prefix}/gamma"));
    let beta = b.get(&format!("{prefix}/beta"));
    g.layer_norm(x, gamma, beta, F::cast(LN_EPS))
}

/// Relative-coordinate lookup indices for a `w x w` window: `T*T` entries into
/// a `(2w-1)^2`-row bias table.
fn rel_pos_index(w: usize) -> Vec<usize> {
    let t = w * w;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / w, i % w);
        for j in 0..t {
            let (yj, xj) = (j / w, j % w);
            let dy = yi as isize - yj as isize + (w as isize - 1);
            let dx = xi as isize - xj as isize + (w as isize - 1);
            idx.push((dy * (2 * w as isize - 1) + dx) as usize);
        }
    }
    idx
}

/// Additive attention mask for shifted windows: `[batch*nW*heads, T, T]` with
/// 0 inside a contiguous region and a large negative constant across regions.
fn build_shift_mask<F: Scalar>(batch: usize, r: usize, w: usize, shift: usize, heads: usize) -> ArrayD<F> {
    let nw_side = r / w;
    let nw = nw_side * nw_side;
    let t = w * w;

    // region ids over the rolled image
    let mut region = vec![0u8; r * r];
    let bounds = [0, r - w, r - shift, r];
    let mut cnt = 0u8;
    for hs in 0..3 {
        for ws in 0..3 {
            for y in bounds[hs]..bounds[hs + 1] {
                for x in bounds[ws]..bounds[ws + 1] {
                    region[y * r + x] = cnt;
                }
            }
            cnt += 1;
        }
    }

    let mut win_ids = vec![0u8; nw * t];
    for wy in 0..nw_side {
        for wx in 0..nw_side {
            let wi = wy * nw_side + wx;
            for iy in 0..w {
                for ix in 0..w {
                    win_ids[wi * t + iy * w + ix] = region[(wy * w + iy) * r + (wx * w + ix)];
                }
            }
        }
    }

    let fill = F::cast(MASK_FILL);
    let mut mask = ArrayD::zeros(IxDyn(&[batch * nw * heads, t, t]));
    for bi in 0..batch {
        for wi in 0..nw {
            for h in 0..heads {
                let gidx = (bi * nw + wi) * heads + h;
                for i in 0..t {
                    for j in 0..t {
                        if win_ids[wi * t + i] != win_ids[wi * t + j] {
                            mask[[gidx, i, j]] = fill;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// `[B, L, C] -> [B*nW, T, C]` window partition at resolution `r`.
fn window_partition<F: Scalar>(g: &mut Graph<F>, x: Tensor, batch: usize, r: usize, w: usize, c: usize) -> Tensor {
    let nw_side = r / w;
    let x = g.reshape(x, &[batch, nw_side, w, nw_side, w, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[batch * nw_side * nw_side, w * w, c])
}

fn window_reverse<F: Scalar>(g: &mut Graph<F>, x: Tensor, batch: usize, r: usize, w: usize, c: usize) -> Tensor {
    let nw_side = r / w;
    let x = g.reshape(x, &[batch, nw_side, nw_side, w, w, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[batch, r * r, c])
}

/// One pre-norm Swin block: windowed MSA (optionally shifted) + MLP.
#[allow(clippy::too_many_arguments)]
fn swin_block<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    prefix: &str,
    x: Tensor,
    batch: usize,
    r: usize,
    dim: usize,
    heads: usize,
    window: usize,
    shift: usize,
) -> Tensor {
    let t = window * window;
    let nw = (r / window) * (r / window);
    let head_dim = dim / heads;

    // attention branch
    let xn = layer_norm(g, b, &format!("{prefix}/norm1"), x);
    let mut spatial = g.reshape(xn, &[batch, r, r, dim]);
    if shift > 0 {
        spatial = g.roll_hw(spatial, -(shift as isize), -(shift as isize));
    }
    let spatial = g.reshape(spatial, &[batch, r * r, dim]);
    let windows = window_partition(g, spatial, batch, r, window, dim);
    let flat = g.reshape(windows, &[batch * nw * t, dim]);

    let mut qkv = Vec::with_capacity(3);
    for part in ["q", "k", "v"] {
        let y = linear(g, b, &format!("{prefix}/attn/{part}"), flat, true);
        let y = g.reshape(y, &[batch * nw, t, heads, head_dim]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        qkv.push(g.reshape(y, &[batch * nw * heads, t, head_dim]));
    }
    let (q, k, v) = (qkv[0], qkv[1], qkv[2]);

    let scores = g.bmm_nt(q, k);
    let scores = g.scale(scores, F::cast(1.0 / (head_dim as f64).sqrt()));

    let table = b.get(&format!("{prefix}/attn/rel_bias/table"));
    let bias_rows = g.gather_rows(table, &rel_pos_index(window));
    let bias = g.reshape(bias_rows, &[t, t, heads]);
    let bias = g.permute(bias, &[2, 0, 1]);
    let bias = g.repeat0(bias, batch * nw);
    let mut scores = g.add(scores, bias);

    if shift > 0 {
        let mask = g.constant(build_shift_mask::<F>(batch, r, window, shift, heads));
        scores = g.add(scores, mask);
    }

    let attn = g.softmax_last(scores);
    let ctx = g.bmm(attn, v);
    let ctx = g.reshape(ctx, &[batch * nw, heads, t, head_dim]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[batch * nw * t, dim]);
    let proj = linear(g, b, &format!("{prefix}/attn/proj"), ctx, true);
    let proj = g.reshape(proj, &[batch * nw, t, dim]);

    let mut merged = window_reverse(g, proj, batch, r, window, dim);
    if shift > 0 {
        let sp = g.reshape(merged, &[batch, r, r, dim]);
        let sp = g.roll_hw(sp, shift as isize, shift as isize);
        merged = g.reshape(sp, &[batch, r * r, dim]);
    }
    let x = g.add(x, merged);

    // MLP branch
    let xn2 = layer_norm(g, b, &format!("{prefix}/norm2"), x);
    let flat = g.reshape(xn2, &[batch * r * r, dim]);
    let h1 = linear(g, b, &format!("{prefix}/mlp/fc1"), flat, true);
    let h1 = g.gelu(h1);
    let h2 = linear(g, b, &format!("{prefix}/mlp/fc2"), h1, true);
    let mlp = g.reshape(h2, &[batch, r * r, dim]);
    g.add(x, mlp)
}

/// Shift used by block `b` of a stage: every odd block shifts by half a
/// window, except when the window already spans the whole resolution.
fn block_shift(b: usize, r: usize, w: usize) -> usize {
    if b % 2 == 1 && r > w {
        w / 2
    } else {
        0
    }
}

fn patch_embed<F: Scalar>(g: &mut Graph<F>, b: &Binder, cfg: &NetConfig, input: Tensor) -> Tensor {
    let batch = g.shape(input)[0];
    let p = cfg.patch_size;
    let r0 = cfg.resolution(0);
    let x = g.reshape(input, &[batch, 3, r0, p, r0, p]);
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1]);
    let x = g.reshape(x, &[batch * r0 * r0, p * p * 3]);
    let x = linear(g, b, "encoder/patch_embed/proj", x, true);
    let x = layer_norm(g, b, "encoder/patch_embed/norm", x);
    g.reshape(x, &[batch, r0 * r0, cfg.embed_dim])
}

fn patch_merge<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    stage: usize,
    x: Tensor,
    batch: usize,
    r: usize,
    dim: usize,
) -> Tensor {
    let half = r / 2;
    let x = g.reshape(x, &[batch, half, 2, half, 2, dim]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    let x = g.reshape(x, &[batch * half * half, 4 * dim]);
    let x = layer_norm(g, b, &format!("encoder/merge{stage}/norm"), x);
    let x = linear(g, b, &format!("encoder/merge{stage}/reduce"), x, false);
    g.reshape(x, &[batch, half * half, 2 * dim])
}

/// Learned 2x upsampling: `[B, r^2, C] -> [B, (2r)^2, C/2]`.
fn patch_expand<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    prefix: &str,
    x: Tensor,
    batch: usize,
    r: usize,
    dim: usize,
) -> Tensor {
    let flat = g.reshape(x, &[batch * r * r, dim]);
    let y = linear(g, b, &format!("{prefix}/linear"), flat, false);
    let half = dim / 2;
    let y = g.reshape(y, &[batch, r, r, 2, 2, half]);
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5]);
    let y = g.reshape(y, &[batch * 2 * r * 2 * r, half]);
    let y = layer_norm(g, b, &format!("{prefix}/norm"), y);
    g.reshape(y, &[batch, 2 * r * 2 * r, half])
}

/// Encoder stages + bottleneck on a `[B, 3, H, W]` input node.
pub fn encoder_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    cfg: &NetConfig,
    input: Tensor,
) -> EncoderOut {
    let batch = g.shape(input)[0];
    let s_total = cfg.stages();
    let mut x = patch_embed(g, b, cfg, input);
    let mut stage_tokens = Vec::with_capacity(s_total - 1);
    for st in 0..s_total - 1 {
        let (r, dim, heads, w) = (cfg.resolution(st), cfg.dim(st), cfg.heads[st], cfg.window_at(st));
        for blk in 0..cfg.depths[st] {
            x = swin_block(
                g,
                b,
                &format!("encoder/stage{st}/block{blk}"),
                x,
                batch,
                r,
                dim,
                heads,
                w,
                block_shift(blk, r, w),
            );
        }
        stage_tokens.push(x);
        x = patch_merge(g, b, st, x, batch, r, dim);
    }
    let bs = s_total - 1;
    let (r, dim, heads, w) = (cfg.resolution(bs), cfg.dim(bs), cfg.heads[bs], cfg.window_at(bs));
    for blk in 0..cfg.depths[bs] {
        x = swin_block(
            g,
            b,
            &format!("bottleneck/block{blk}"),
            x,
            batch,
            r,
            dim,
            heads,
            w,
            block_shift(blk, r, w),
        );
    }
    let x = layer_norm(g, b, "bottleneck/norm", x);
    EncoderOut {
        stage_tokens,
        bottleneck_tokens: x,
    }
}

/// Decoder path: expand, fuse skip, run mirrored blocks; ends with the final
/// expansion back to `[B, H*W, embed_dim]`.
pub fn decoder_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    cfg: &NetConfig,
    enc: &EncoderOut,
) -> Tensor {
    let batch = g.shape(enc.bottleneck_tokens)[0];
    let s_total = cfg.stages();
    let mut x = enc.bottleneck_tokens;
    for d in 0..s_total - 1 {
        let enc_stage = s_total - 2 - d;
        let r_in = cfg.resolution(enc_stage + 1);
        let din = cfg.dim(enc_stage + 1);
        x = patch_expand(g, b, &format!("expand/up{d}"), x, batch, r_in, din);

        let (r, dim, heads, w) = (
            cfg.resolution(enc_stage),
            cfg.dim(enc_stage),
            cfg.heads[enc_stage],
            cfg.window_at(enc_stage),
        );
        let cat = g.concat_last(&[x, enc.stage_tokens[enc_stage]]);
        let flat = g.reshape(cat, &[batch * r * r, 2 * dim]);
        let fused = linear(g, b, &format!("skip/stage{d}/fuse"), flat, true);
        x = g.reshape(fused, &[batch, r * r, dim]);

        for blk in 0..cfg.depths[enc_stage] {
            x = swin_block(
                g,
                b,
                &format!("decoder/stage{d}/block{blk}"),
                x,
                batch,
                r,
                dim,
                heads,
                w,
                block_shift(blk, r, w),
            );
        }
    }

    // final x patch_size expansion back to pixel resolution
    let r0 = cfg.resolution(0);
    let p = cfg.patch_size;
    let e = cfg.embed_dim;
    let flat = g.reshape(x, &[batch * r0 * r0, e]);
    let y = linear(g, b, "expand/final/linear", flat, false);
    let y = g.reshape(y, &[batch, r0, r0, p, p, e]);
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5]);
    let y = g.reshape(y, &[batch * cfg.img_size * cfg.img_size, e]);
    let y = layer_norm(g, b, "expand/final/norm", y);
    g.reshape(y, &[batch, cfg.img_size * cfg.img_size, e])
}

/// Pixel-wise class logits `[B, num_classes, H, W]` from decoder tokens.
pub fn head_logits<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    cfg: &NetConfig,
    dec_tokens: Tensor,
) -> Tensor {
    let batch = g.shape(dec_tokens)[0];
    let hw = cfg.img_size;
    let flat = g.reshape(dec_tokens, &[batch * hw * hw, cfg.embed_dim]);
    let y = linear(g, b, "head/proj", flat, true);
    let y = g.reshape(y, &[batch, hw, hw, cfg.num_classes]);
    g.permute(y, &[0, 3, 1, 2])
}

/// Full segmentation forward on a bound graph.
pub fn segnet_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &Binder,
    cfg: &NetConfig,
    input: Tensor,
) -> Tensor {
    let enc = encoder_graph(g, b, cfg, input);
    let dec = decoder_graph(g, b, cfg, &enc);
    head_logits(g, b, cfg, dec)
}

/// Mean-pooled tokens: `[B, L, C] -> [B, C]`.
pub fn pool_tokens<F: Scalar>(g: &mut Graph<F>, tokens: Tensor) -> Tensor {
    g.mean_axis(tokens, 1)
}

/// Projector MLP on pooled features.
pub fn projector_graph<F: Scalar>(g: &mut Graph<F>, b: &Binder, x: Tensor) -> Tensor {
    let h = linear(g, b, "projector/fc1", x, true);
    let h = g.relu(h);
    linear(g, b, "projector/fc2", h, true)
}

/// Predictor MLP on projector output.
pub fn predictor_graph<F: Scalar>(g: &mut Graph<F>, b: &Binder, x: Tensor) -> Tensor {
    let h = linear(g, b, "predictor/fc1", x, true);
    let h = g.relu(h);
    linear(g, b, "predictor/fc2", h, true)
}

// ── public array-level operations (eval mode) ───────────────────────────────

fn validate_batch<F: Scalar>(cfg: &NetConfig, batch: &ArrayD<F>) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.img_size || s[3] != cfg.img_size {
        return Err(Error::Dimension(format!(
            "batch shape {s:?} does not match [B, 3, {0}, {0}]",
            cfg.img_size
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("batch contains non-finite values".into()));
    }
    Ok(())
}

/// Check that `params` covers the spec'd names for `tags` with exact shapes.
pub fn validate_params<F: Scalar>(
    cfg: &NetConfig,
    params: &TaggedParameters<F>,
    tags: &[ComponentTag],
) -> Result<()> {
    for sp in segnet_param_specs(cfg) {
        if !tags.contains(&sp.tag) {
            continue;
        }
        match params.get(&sp.name) {
            None => {
                return Err(Error::Transfer(format!(
                    "missing parameter {} (tag {})",
                    sp.name, sp.tag
                )))
            }
            Some(p) => {
                if p.array.shape() != sp.shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        sp.name,
                        p.array.shape(),
                        sp.shape
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Eval-mode encoder forward; returns spatially shaped stage features.
pub fn encoder_forward<F: Scalar>(
    cfg: &NetConfig,
    params: &TaggedParameters<F>,
    batch: &ArrayD<F>,
) -> Result<FeaturePyramid<F>> {
    cfg.validate()?;
    validate_batch(cfg, batch)?;
    validate_params(cfg, params, &ComponentTag::BACKBONE)?;
    let mut g = Graph::new();
    let mut binder = Binder::new();
    binder.bind_all(&mut g, params, false);
    let input = g.constant(batch.clone());
    let out = encoder_graph(&mut g, &binder, cfg, input);
    let b = batch.shape()[0];
    let stages = out
        .stage_tokens
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let r = cfg.resolution(s);
            let v = g.value(*t).clone();
            v.into_shape_with_order(IxDyn(&[b, r, r, cfg.dim(s)]))
                .expect("stage tokens reshape")
        })
        .collect();
    let bs = cfg.stages() - 1;
    let r = cfg.resolution(bs);
    let bottleneck = g
        .value(out.bottleneck_tokens)
        .clone()
        .into_shape_with_order(IxDyn(&[b, r, r, cfg.dim(bs)]))
        .expect("bottleneck reshape");
    Ok(FeaturePyramid { stages, bottleneck })
}

/// Eval-mode segmentation forward; `[B, num_classes, H, W]` logits.
pub fn segnet_forward<F: Scalar>(
    cfg: &NetConfig,
    params: &TaggedParameters<F>,
    batch: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    cfg.validate()?;
    validate_batch(cfg, batch)?;
    validate_params(
        cfg,
        params,
        &[
            ComponentTag::Encoder,
            ComponentTag::Bottleneck,
            ComponentTag::Decoder,
            ComponentTag::Skip,
            ComponentTag::Expand,
            ComponentTag::Head,
        ],
    )?;
    let mut g = Graph::new();
    let mut binder = Binder::new();
    binder.bind_all(&mut g, params, false);
    let input = g.constant(batch.clone());
    let logits = segnet_graph(&mut g, &binder, cfg, input);
    Ok(g.value(logits).clone())
}
