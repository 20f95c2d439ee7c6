//! Decoder-targeted contrastive pretraining.
//!
//! The encoder is frozen; two augmented views of a slice produce two feature
//! pyramids, and the decoders (base, trained by gradient; momentum, an EMA
//! target) must map them to matching embeddings. Skip connections carry the
//! frozen encoder's stage features into both decoders. Only decoder, skip and
//! expand parameters (plus heads on the base side) are trainable; the output
//! checkpoint keeps decoder+skip+expand and discards the heads.

use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{contrastive_augment, AugmentConfig};
use crate::autodiff::{Graph, Tensor};
use crate::cl_pretrain::{momentum_step, symmetric_loss_graph, NegativesMode};
use crate::error::{Error, Result};
use crate::exp::cosine_lr;
use crate::nets::{
    attach_heads, forward, init_segnet, Binder, ComponentTag, HeadConfig, NetConfig,
    TaggedParameters,
};
use crate::optim::{AdamW, OptimConfig};
use crate::scalar::Scalar;
use crate::synthdata::{derive_seed, DatasetManifest, MultimodalSlice};
use crate::transfer::{Checkpoint, Lineage};

/// Which augmentation family perturbs the frozen encoder's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    /// The full contrastive pipeline.
    Full,
    /// Color dithering and Gaussian blur only.
    Photometric,
}

/// Decoder pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecCLConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub tau: f64,
    pub seed: u64,
    pub negatives: NegativesMode,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
}

impl Default for DecCLConfig {
    fn default() -> Self {
        DecCLConfig {
            epochs: 8,
            batch_size: 16,
            lr_max: 1e-3,
            momentum: 0.99,
            tau: 0.2,
            seed: 23,
            negatives: NegativesMode::InBatch,
            head: HeadConfig::default(),
            augment: AugmentConfig::contrastive(),
            optim: OptimConfig::default(),
        }
    }
}

const DEC_TRAINED: [ComponentTag; 3] = [
    ComponentTag::Decoder,
    ComponentTag::Skip,
    ComponentTag::Expand,
];

/// Live state of the decoder pretrainer.
pub struct DecCLState<F: Scalar> {
    /// Encoder + bottleneck; bitwise constant for the whole run.
    pub frozen_encoder: TaggedParameters<F>,
    /// Decoder + skip + expand + projector + predictor; gradient-trained.
    pub base_decoder: TaggedParameters<F>,
    /// Decoder + skip + expand + projector; EMA of the base side.
    pub momentum_decoder: TaggedParameters<F>,
    pub momentum: f64,
    pub tau: f64,
    pub step: usize,
    pub aug_mode: AugMode,
}

/// Per-step record for the decoder pretrainer.
#[derive(Debug, Clone, Serialize)]
pub struct DecStepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub millis: u64,
    pub batch: usize,
    pub momentum_grads_absent: bool,
    pub encoder_grads_absent: bool,
    /// Mean distance between the two views' normalized pooled encoder
    /// features; near zero means the frozen encoder erases the augmentation
    /// signal and the decoder sees no contrast to learn from.
    pub view_feature_distance: f64,
}

/// Build the initial decoder-pretraining state. `encoder_init = None` uses a
/// randomly initialized frozen encoder.
pub fn init_dec_state<F: Scalar>(
    net_cfg: &NetConfig,
    cfg: &DecCLConfig,
    encoder_init: Option<&Checkpoint<F>>,
    aug_mode: AugMode,
) -> Result<DecCLState<F>> {
    net_cfg.validate()?;
    if cfg.tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {}", cfg.tau)));
    }
    let full = init_segnet::<F>(net_cfg, derive_seed(cfg.seed, 0xdec0, 0));
    let mut frozen_encoder = full.subset(&ComponentTag::BACKBONE);
    if let Some(ckpt) = encoder_init {
        ckpt.require_config(net_cfg)?;
        for t in ComponentTag::BACKBONE {
            if !ckpt.params.tags_present().contains(&t) {
                return Err(Error::Transfer(format!(
                    "encoder init ({}) lacks {t}-tagged parameters",
                    ckpt.lineage
                )));
            }
        }
        for (name, p) in ckpt.params.iter() {
            if ComponentTag::BACKBONE.contains(&p.tag) {
                frozen_encoder.get_mut(name).unwrap().array = p.array.clone();
            }
        }
    }
    let head_cfg = HeadConfig {
        with_predictor: true,
        seed: derive_seed(cfg.seed, 0xdec1, 1),
        ..cfg.head.clone()
    };
    // heads pool the decoder's full-resolution output, width = embed_dim
    let base_decoder = attach_heads(&full.subset(&DEC_TRAINED), net_cfg.embed_dim, &head_cfg);
    let momentum_decoder = base_decoder.subset(&[
        ComponentTag::Decoder,
        ComponentTag::Skip,
        ComponentTag::Expand,
        ComponentTag::Projector,
    ]);
    Ok(DecCLState {
        frozen_encoder,
        base_decoder,
        momentum_decoder,
        momentum: cfg.momentum,
        tau: cfg.tau,
        step: 0,
        aug_mode,
    })
}

fn stack_batch<F: Scalar>(views: &[&Array3<f32>]) -> ArrayD<F> {
    let (c, h, w) = (views[0].shape()[0], views[0].shape()[1], views[0].shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[views.len(), c, h, w]));
    for (i, v) in views.iter().enumerate() {
        for ((ci, y, x), &px) in v.indexed_iter() {
            out[[i, ci, y, x]] = F::cast(px);
        }
    }
    out
}

fn base_embedding<F: Scalar>(
    g: &mut Graph<F>,
    binder: &Binder,
    cfg: &NetConfig,
    enc: &forward::EncoderOut,
) -> Tensor {
    let dec = forward::decoder_graph(g, binder, cfg, enc);
    let pooled = forward::pool_tokens(g, dec);
    let centered = crate::cl_pretrain::center_rows(g, pooled);
    let proj = forward::projector_graph(g, binder, centered);
    forward::predictor_graph(g, binder, proj)
}

fn momentum_embedding<F: Scalar>(
    g: &mut Graph<F>,
    binder: &Binder,
    cfg: &NetConfig,
    enc: &forward::EncoderOut,
) -> Tensor {
    let dec = forward::decoder_graph(g, binder, cfg, enc);
    let pooled = forward::pool_tokens(g, dec);
    let centered = crate::cl_pretrain::center_rows(g, pooled);
    forward::projector_graph(g, binder, centered)
}

/// Mean Euclidean distance between the normalized pooled features of the two
/// views, averaged over the batch.
fn pooled_view_distance<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> f64 {
    let (rows, d) = (a.shape()[0], a.shape()[1]);
    let mut total = 0.0;
    for i in 0..rows {
        let norm = |v: &ArrayD<F>| -> Vec<f64> {
            let row: Vec<f64> = (0..d).map(|j| v[[i, j]].as_f64()).collect();
            let n = (row.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            row.iter().map(|x| x / n).collect()
        };
        let (ra, rb) = (norm(a), norm(b));
        total += ra
            .iter()
            .zip(&rb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    total / rows as f64
}

/// Measure how much the frozen encoder lets augmentation through: mean
/// distance between the two views' normalized pooled bottleneck features.
pub fn view_feature_distance<F: Scalar>(
    net_cfg: &NetConfig,
    encoder_params: &TaggedParameters<F>,
    slices: &[MultimodalSlice],
    augment: &AugmentConfig,
    seed: u64,
) -> Result<f64> {
    if slices.is_empty() {
        return Err(Error::Data("no slices to measure".into()));
    }
    let mut v1 = Vec::new();
    let mut v2 = Vec::new();
    for (i, s) in slices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xfeed, i as u64));
        let pair = contrastive_augment(s, augment, &mut rng);
        v1.push(pair.view1);
        v2.push(pair.view2);
    }
    let b1 = stack_batch::<F>(&v1.iter().collect::<Vec<_>>());
    let b2 = stack_batch::<F>(&v2.iter().collect::<Vec<_>>());
    let mut g = Graph::new();
    let mut binder = Binder::new();
    binder.bind_all(&mut g, encoder_params, false);
    let in1 = g.constant(b1);
    let in2 = g.constant(b2);
    let e1 = forward::encoder_graph(&mut g, &binder, net_cfg, in1);
    let e2 = forward::encoder_graph(&mut g, &binder, net_cfg, in2);
    let p1 = forward::pool_tokens(&mut g, e1.bottleneck_tokens);
    let p2 = forward::pool_tokens(&mut g, e2.bottleneck_tokens);
    Ok(pooled_view_distance(g.value(p1), g.value(p2)))
}

/// Run decoder-targeted contrastive pretraining; the emitted checkpoint holds
/// decoder + skip + expand parameters only.
pub fn pretrain_decoder<F: Scalar>(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &DecCLConfig,
    encoder_init: Option<&Checkpoint<F>>,
    aug_mode: AugMode,
) -> Result<(Checkpoint<F>, Vec<DecStepLog>)> {
    pretrain_decoder_with_hook(manifest, net_cfg, cfg, encoder_init, aug_mode, |_, _| {})
}

pub fn pretrain_decoder_with_hook<F: Scalar>(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &DecCLConfig,
    encoder_init: Option<&Checkpoint<F>>,
    aug_mode: AugMode,
    mut hook: impl FnMut(&DecCLState<F>, &DecStepLog),
) -> Result<(Checkpoint<F>, Vec<DecStepLog>)> {
    if manifest.entries.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    let mut state = init_dec_state(net_cfg, cfg, encoder_init, aug_mode)?;
    let aug = match aug_mode {
        AugMode::Full => cfg.augment.clone(),
        AugMode::Photometric => cfg.augment.photometric_only(),
    };

    let mut slices: Vec<MultimodalSlice> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let (pixels, _) = manifest.load_slice(e)?;
        slices.push(MultimodalSlice {
            pixels,
            slice_id: e.slice_id.clone(),
            patient_id: e.patient_id.clone(),
            labeled: e.labeled(),
        });
    }

    let mut opt = AdamW::<F>::new(cfg.optim.clone());
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max)?;
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
            0xdeca,
        )));

        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    epoch as u64,
                    idx as u64,
                ));
                let pair = contrastive_augment(&slices[idx], &aug, &mut rng);
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            let b1 = stack_batch::<F>(&v1.iter().collect::<Vec<_>>());
            let b2 = stack_batch::<F>(&v2.iter().collect::<Vec<_>>());

            let mut g = Graph::new();
            let mut enc_bind = Binder::new();
            enc_bind.bind_all(&mut g, &state.frozen_encoder, false);
            let mut base_bind = Binder::new();
            base_bind.bind_all(&mut g, &state.base_decoder, true);
            let mut mom_bind = Binder::new();
            mom_bind.bind_all(&mut g, &state.momentum_decoder, false);

            let in1 = g.constant(b1);
            let in2 = g.constant(b2);
            // features differ only because the inputs differ: the encoder is
            // shared, frozen, and excluded from the gradient
            let enc1 = forward::encoder_graph(&mut g, &enc_bind, net_cfg, in1);
            let enc2 = forward::encoder_graph(&mut g, &enc_bind, net_cfg, in2);
            let pool1 = forward::pool_tokens(&mut g, enc1.bottleneck_tokens);
            let pool2 = forward::pool_tokens(&mut g, enc2.bottleneck_tokens);
            let view_dist = pooled_view_distance(g.value(pool1), g.value(pool2));

            let q1 = base_embedding(&mut g, &base_bind, net_cfg, &enc1);
            let q2 = base_embedding(&mut g, &base_bind, net_cfg, &enc2);
            let k1 = momentum_embedding(&mut g, &mom_bind, net_cfg, &enc1);
            let k2 = momentum_embedding(&mut g, &mom_bind, net_cfg, &enc2);
            let loss = symmetric_loss_graph(&mut g, q1, q2, k1, k2, cfg.tau, cfg.negatives)?;
            let loss_val = g.scalar_value(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {} (epoch {epoch})",
                    state.step
                )));
            }
            g.backward(loss);

            let momentum_grads_absent = mom_bind.nodes().all(|(_, t, _)| g.grad(t).is_none());
            let encoder_grads_absent = enc_bind.nodes().all(|(_, t, _)| g.grad(t).is_none());
            debug_assert!(momentum_grads_absent && encoder_grads_absent);

            let grads = base_bind.grads(&g);
            drop(g);
            opt.step(&mut state.base_decoder, &grads);

            let ema_view = state.base_decoder.subset(&[
                ComponentTag::Decoder,
                ComponentTag::Skip,
                ComponentTag::Expand,
                ComponentTag::Projector,
            ]);
            momentum_step(&mut state.momentum_decoder, &ema_view, state.momentum)?;
            state.step += 1;

            let entry = DecStepLog {
                step: state.step,
                epoch,
                loss: loss_val,
                lr,
                millis: started.elapsed().as_millis() as u64,
                batch: chunk.len(),
                momentum_grads_absent,
                encoder_grads_absent,
                view_feature_distance: view_dist,
            };
            hook(&state, &entry);
            logs.push(entry);
        }
    }

    let mut provenance = Vec::new();
    if let Some(ckpt) = encoder_init {
        provenance.extend(ckpt.provenance.iter().copied());
        provenance.push(ckpt.lineage);
    }
    let ckpt = Checkpoint {
        lineage: Lineage::DecoderContrastive,
        net_config: net_cfg.clone(),
        provenance,
        params: state.base_decoder.subset(&DEC_TRAINED),
    };
    Ok((ckpt, logs))
}

// ── the five-variant tuning matrix ──────────────────────────────────────────

/// One downstream-evaluated variant of the decoder pretrainer.
#[derive(Debug, Clone, Serialize)]
pub struct DecoderTuningRow {
    pub index: usize,
    pub training_method: String,
    pub dsc: f64,
    pub mpa: f64,
    pub miou: f64,
    pub hd: Option<f64>,
    /// Expand/skip equality fractions vs the decoder checkpoint used.
    pub expand_skip_loaded: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecoderTuningReport {
    /// Downstream run without any decoder pretraining (the comparison row).
    pub reference: DecoderTuningRow,
    pub rows: Vec<DecoderTuningRow>,
}

/// Configuration bundle for [`decoder_tuning_matrix`].
pub struct DecoderTuningConfig {
    pub dec: DecCLConfig,
    pub seg: crate::exp::TrainConfig,
    pub seed: u64,
}

/// Run the five decoder-pretraining variants plus the reference arm, each
/// followed by downstream segmentation fine-tuning and evaluation.
///
/// Variants: (1) random frozen encoder, (2) contrastive encoder,
/// (3) supervised encoder, (4) supervised encoder with photometric-only
/// augmentation, (5) variant 3's checkpoint with expand/skip parameters
/// dropped at transfer time.
pub fn decoder_tuning_matrix<F: Scalar>(
    pretrain_manifest: &DatasetManifest,
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &DecoderTuningConfig,
    supervised: &Checkpoint<F>,
    contrastive: &Checkpoint<F>,
) -> Result<DecoderTuningReport> {
    use crate::transfer::{
        apply_policy, DecoderSource, EncoderSource, LoadPolicy, Sources,
    };

    let dec_runs: Vec<(usize, &str, Option<&Checkpoint<F>>, AugMode)> = vec![
        (1, "random initialization", None, AugMode::Full),
        (2, "contrastive learning", Some(contrastive), AugMode::Full),
        (3, "supervised learning", Some(supervised), AugMode::Full),
        (4, "change data enhancement", Some(supervised), AugMode::Photometric),
    ];

    let mut dec_ckpts: Vec<(usize, String, Checkpoint<F>, bool)> = Vec::new();
    for (idx, name, enc, mode) in dec_runs {
        let (ckpt, _) = pretrain_decoder(pretrain_manifest, net_cfg, &cfg.dec, enc, mode)?;
        dec_ckpts.push((idx, name.to_string(), ckpt, true));
    }
    // variant 5 reuses variant 3's checkpoint but discards expand/skip at load
    let v3 = dec_ckpts[2].2.clone();
    dec_ckpts.push((5, "remove other parameters".to_string(), v3, false));

    let downstream = |dec_ckpt: Option<(&Checkpoint<F>, bool)>,
                      seed: u64|
     -> Result<(crate::metrics::MetricsReport, std::collections::BTreeMap<String, f64>)> {
        let (policy, sources) = match dec_ckpt {
            Some((ckpt, load_heads)) => (
                LoadPolicy {
                    encoder_source: EncoderSource::Contrastive,
                    decoder_source: DecoderSource::DecoderContrastive,
                    mirror_decoder_from_encoder: false,
                    load_expand_skip_heads: load_heads,
                },
                Sources {
                    contrastive: Some(contrastive.clone()),
                    decoder_contrastive: Some(ckpt.clone()),
                    ..Sources::default()
                },
            ),
            None => (
                LoadPolicy::mirrored(EncoderSource::Contrastive, DecoderSource::Contrastive),
                Sources {
                    contrastive: Some(contrastive.clone()),
                    ..Sources::default()
                },
            ),
        };
        let (params, _audit) = apply_policy(net_cfg, &policy, &sources, seed)?;
        // audit expand/skip against the decoder checkpoint unconditionally so
        // the head-removal variant shows 0.0 rather than an absent entry
        let loaded = match dec_ckpt {
            Some((ckpt, _)) => crate::transfer::audit_equality(&params, ckpt)
                .into_iter()
                .filter(|(t, _)| {
                    *t == crate::nets::ComponentTag::Expand || *t == crate::nets::ComponentTag::Skip
                })
                .map(|(t, f)| (t.to_string(), f))
                .collect(),
            None => std::collections::BTreeMap::new(),
        };
        let (trained, _) = crate::exp::train_segmentation(
            train_manifest,
            test_manifest,
            net_cfg,
            &cfg.seg,
            params,
        )?;
        let report =
            crate::metrics::evaluate(net_cfg, &trained, test_manifest, cfg.seg.batch_size)?;
        Ok((report, loaded))
    };

    let as_row = |index: usize,
                  name: String,
                  report: &crate::metrics::MetricsReport,
                  loaded: std::collections::BTreeMap<String, f64>| DecoderTuningRow {
        index,
        training_method: name,
        dsc: report.macro_avg.dsc,
        mpa: report.macro_avg.mpa,
        miou: report.macro_avg.miou,
        hd: report.macro_avg.hd,
        expand_skip_loaded: loaded,
    };

    let (ref_report, _) = downstream(None, derive_seed(cfg.seed, 0, 0))?;
    let reference = as_row(0, "none".to_string(), &ref_report, Default::default());

    let mut rows = Vec::new();
    for (idx, name, ckpt, load_heads) in &dec_ckpts {
        let (report, loaded) = downstream(
            Some((ckpt, *load_heads)),
            derive_seed(cfg.seed, *idx as u64, 1),
        )?;
        rows.push(as_row(*idx, name.clone(), &report, loaded));
    }
    Ok(DecoderTuningReport { reference, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, PhantomConfig};

    fn tiny_net() -> NetConfig {
        NetConfig {
            img_size: 32,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 2],
            window_size: 2,
            num_classes: 3,
            mlp_ratio: 2,
            scale_preset: crate::nets::ScalePreset::Desk,
        }
    }

    fn tiny_cfg() -> DecCLConfig {
        DecCLConfig {
            epochs: 2,
            batch_size: 2,
            lr_max: 1e-3,
            momentum: 0.9,
            seed: 31,
            head: HeadConfig {
                hidden_dim: 8,
                out_dim: 4,
                ..HeadConfig::default()
            },
            ..DecCLConfig::default()
        }
    }

    #[test]
    fn encoder_frozen_and_momentum_tracks_ema() {
        let dir = tempfile::tempdir().unwrap();
        let phantom = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let manifest = build_dataset(dir.path(), 2, 3, 1.0, 3, &phantom).unwrap();
        let net = tiny_net();
        let cfg = tiny_cfg();

        let sup = Checkpoint {
            lineage: Lineage::Supervised,
            net_config: net.clone(),
            provenance: vec![],
            params: init_segnet::<f64>(&net, 55).subset(&ComponentTag::BACKBONE),
        };

        let state0 = init_dec_state::<f64>(&net, &cfg, Some(&sup), AugMode::Full).unwrap();
        let mut oracle: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> = state0
            .momentum_decoder
            .iter()
            .map(|(n, p)| (n.clone(), p.array.clone()))
            .collect();
        let m = cfg.momentum;

        let (ckpt, logs) = pretrain_decoder_with_hook::<f64>(
            &manifest,
            &net,
            &cfg,
            Some(&sup),
            AugMode::Full,
            |state, log| {
                assert!(log.momentum_grads_absent);
                assert!(log.encoder_grads_absent);
                for (name, arr) in oracle.iter_mut() {
                    let q = &state.base_decoder.get(name).unwrap().array;
                    arr.zip_mut_with(q, |k, &qv| *k = m * *k + (1.0 - m) * qv);
                    let kv = &state.momentum_decoder.get(name).unwrap().array;
                    let max_err = arr
                        .iter()
                        .zip(kv.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    assert!(max_err < 1e-6, "EMA deviates by {max_err} on {name}");
                }
                // frozen encoder must remain bitwise identical
                assert!(state.frozen_encoder.bitwise_eq(&state0.frozen_encoder));
            },
        )
        .unwrap();

        assert!(!logs.is_empty());
        let tags = ckpt.params.tags_present();
        assert!(tags.contains(&ComponentTag::Decoder));
        assert!(tags.contains(&ComponentTag::Skip));
        assert!(tags.contains(&ComponentTag::Expand));
        assert!(!tags.contains(&ComponentTag::Encoder));
        assert!(!tags.contains(&ComponentTag::Bottleneck));
        assert!(!tags.contains(&ComponentTag::Projector));
        assert_eq!(ckpt.lineage, Lineage::DecoderContrastive);
        assert_eq!(ckpt.provenance, vec![Lineage::Supervised]);
    }

    #[test]
    fn encoder_init_without_backbone_is_transfer_error() {
        let net = tiny_net();
        let cfg = tiny_cfg();
        let bad = Checkpoint {
            lineage: Lineage::DecoderContrastive,
            net_config: net.clone(),
            provenance: vec![],
            params: init_segnet::<f64>(&net, 1).subset(&[ComponentTag::Decoder]),
        };
        assert!(matches!(
            init_dec_state::<f64>(&net, &cfg, Some(&bad), AugMode::Full),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn photometric_mode_disables_geometric_ops() {
        let cfg = tiny_cfg();
        let aug = cfg.augment.photometric_only();
        assert_eq!(aug.rotation_prob, 0.0);
        assert_eq!(aug.crop_prob, 0.0);
        assert_eq!(aug.flip_prob, 0.0);
        assert!(aug.jitter_prob > 0.0);
        assert!(aug.blur_prob > 0.0);
    }
}
