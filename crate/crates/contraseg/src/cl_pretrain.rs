//! Momentum-contrastive pretraining of the encoder.
//!
//! The query path runs backbone -> projector -> predictor and learns by
//! gradient; the key path runs backbone -> projector on momentum-updated
//! parameters and never receives gradient (its nodes are graph constants).
//! The loss is the symmetric temperature-scaled InfoNCE over the two views,
//! with the other samples' keys as in-batch negatives; a no-negatives mode
//! degrades the objective to pure view prediction.

use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{contrastive_augment, AugmentConfig};
use crate::autodiff::{Graph, Tensor};
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

const NORM_EPS: f64 = 1e-12;

/// How negatives enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativesMode {
    /// Other samples' keys in the batch are negatives (the printed loss).
    InBatch,
    /// Pure view prediction: negative-cosine objective, no negatives.
    None,
}

/// Contrastive pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CLConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// Momentum coefficient of the key-parameter EMA.
    pub momentum: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub seed: u64,
    pub negatives: NegativesMode,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
}

impl Default for CLConfig {
    fn default() -> Self {
        CLConfig {
            epochs: 12,
            batch_size: 16,
            lr_max: 5e-4,
            momentum: 0.99,
            tau: 0.2,
            seed: 17,
            negatives: NegativesMode::InBatch,
            head: HeadConfig::default(),
            augment: AugmentConfig::contrastive(),
            optim: OptimConfig::default(),
        }
    }
}

impl CLConfig {
    /// Hyperparameters of the clinical-scale run (batch 96, lr 1e-3).
    pub fn paper_scale() -> Self {
        CLConfig {
            batch_size: 96,
            lr_max: 1e-3,
            ..CLConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1], got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

// ── losses ──────────────────────────────────────────────────────────────────

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn logsumexp(zs: &[f64]) -> f64 {
    let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + zs.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Temperature-scaled InfoNCE for one query against one positive and any
/// number of negatives. Embeddings are L2-normalized before similarity.
pub fn infonce(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let qn = normalize(q);
    let kp = normalize(k_pos);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut logits = vec![dot(&qn, &kp) / tau];
    for kn in k_negs {
        let kn = normalize(kn);
        logits.push(dot(&qn, &kn) / tau);
    }
    Ok(logsumexp(&logits) - logits[0])
}

/// Symmetric bidirectional loss, scalar reference form.
pub fn symmetric_loss(
    q1: &[f64],
    q2: &[f64],
    k1: &[f64],
    k2: &[f64],
    negs_for_q1: &[Vec<f64>],
    negs_for_q2: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    Ok(infonce(q1, k2, negs_for_q1, tau)? + infonce(q2, k1, negs_for_q2, tau)?)
}

/// Graph-mode batch InfoNCE: `q, k` are raw `[B, D]` embeddings; both sides
/// are normalized, the positive for row `i` is key row `i`, and the other
/// rows serve as negatives.
pub fn infonce_batch_graph<F: Scalar>(
    g: &mut Graph<F>,
    q: Tensor,
    k: Tensor,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let b = g.shape(q)[0];
    let qn = g.l2_normalize_last(q, F::cast(NORM_EPS));
    let kn = g.l2_normalize_last(k, F::cast(NORM_EPS));
    let kt = g.permute(kn, &[1, 0]);
    let sims = g.matmul(qn, kt);
    let logits = g.scale(sims, F::cast(1.0 / tau));
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.cross_entropy_rows(logits, &targets))
}

/// Graph-mode symmetric loss over two views.
pub fn symmetric_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    q1: Tensor,
    q2: Tensor,
    k1: Tensor,
    k2: Tensor,
    tau: f64,
    mode: NegativesMode,
) -> Result<Tensor> {
    match mode {
        NegativesMode::InBatch => {
            let a = infonce_batch_graph(g, q1, k2, tau)?;
            let b = infonce_batch_graph(g, q2, k1, tau)?;
            Ok(g.add(a, b))
        }
        NegativesMode::None => {
            // prediction objective: 2 - 2 * cos(q, k) per direction
            let d = g.shape(q1)[1];
            let mut total = None;
            for (q, k) in [(q1, k2), (q2, k1)] {
                let qn = g.l2_normalize_last(q, F::cast(NORM_EPS));
                let kn = g.l2_normalize_last(k, F::cast(NORM_EPS));
                let prod = g.mul(qn, kn);
                let mean = g.mean_all(prod);
                let neg = g.scale(mean, F::cast(-2.0 * d as f64));
                let term = g.add_scalar(neg, F::cast(2.0));
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term),
                });
            }
            Ok(total.expect("two directions"))
        }
    }
}

// ── momentum update ─────────────────────────────────────────────────────────

/// Elementwise EMA of key parameters toward query parameters:
/// `k <- m*k + (1-m)*q`. Name sets must coincide. `m = 0` copies the query
/// exactly; `m = 1` leaves the key untouched (bitwise in both cases).
pub fn momentum_step<F: Scalar>(
    key: &mut TaggedParameters<F>,
    query: &TaggedParameters<F>,
    m: f64,
) -> Result<()> {
    let key_names: Vec<String> = key.names().cloned().collect();
    let query_names: Vec<String> = query.names().cloned().collect();
    if key_names != query_names {
        return Err(Error::Transfer(format!(
            "momentum update name mismatch: key has {} names, query has {}",
            key_names.len(),
            query_names.len()
        )));
    }
    if m == 1.0 {
        return Ok(());
    }
    for name in &key_names {
        let qa = &query.get(name).unwrap().array;
        let kp = key.get_mut(name).unwrap();
        if kp.array.shape() != qa.shape() {
            return Err(Error::Transfer(format!(
                "momentum update shape mismatch for {name}"
            )));
        }
        if m == 0.0 {
            kp.array = qa.clone();
        } else {
            let mf = F::cast(m);
            let one_m = F::cast(1.0 - m);
            ndarray::Zip::from(&mut kp.array)
                .and(qa)
                .for_each(|k, &q| *k = mf * *k + one_m * q);
        }
    }
    Ok(())
}

// ── the pretraining loop ────────────────────────────────────────────────────

/// Live state of the pretrainer.
pub struct CLState<F: Scalar> {
    /// Backbone + projector + predictor; updated by gradient.
    pub query: TaggedParameters<F>,
    /// Backbone + projector; updated only by the momentum EMA.
    pub key: TaggedParameters<F>,
    pub momentum: f64,
    pub tau: f64,
    pub step: usize,
}

/// Per-step training record (the line-delimited JSON log).
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub millis: u64,
    pub batch: usize,
    /// Verified every step: no key-path node accumulated a gradient.
    pub key_grads_absent: bool,
}

/// Build the initial pretrainer state. When `init` is given, both query and
/// key backbones start from its encoder+bottleneck parameters (the key is an
/// exact copy of the query at step 0).
pub fn init_cl_state<F: Scalar>(
    net_cfg: &NetConfig,
    cfg: &CLConfig,
    init: Option<&Checkpoint<F>>,
) -> Result<CLState<F>> {
    net_cfg.validate()?;
    cfg.validate()?;
    let mut backbone =
        init_segnet::<F>(net_cfg, derive_seed(cfg.seed, 0x716b, 0)).subset(&ComponentTag::BACKBONE);
    if let Some(ckpt) = init {
        ckpt.require_config(net_cfg)?;
        for t in ComponentTag::BACKBONE {
            if !ckpt.params.tags_present().contains(&t) {
                return Err(Error::Transfer(format!(
                    "init checkpoint ({}) lacks {t}-tagged parameters",
                    ckpt.lineage
                )));
            }
        }
        for (name, p) in ckpt.params.iter() {
            if ComponentTag::BACKBONE.contains(&p.tag) {
                let dst = backbone.get_mut(name).ok_or_else(|| {
                    Error::Transfer(format!("init checkpoint parameter {name} not in backbone"))
                })?;
                if dst.array.shape() != p.array.shape() {
                    return Err(Error::Dimension(format!(
                        "init parameter {name}: {:?} vs {:?}",
                        p.array.shape(),
                        dst.array.shape()
                    )));
                }
                dst.array = p.array.clone();
            }
        }
    }
    let head_cfg = HeadConfig {
        with_predictor: true,
        seed: derive_seed(cfg.seed, 0x6865, 1),
        ..cfg.head.clone()
    };
    let query = attach_heads(&backbone, net_cfg.bottleneck_dim(), &head_cfg);
    let key = query.subset(&[
        ComponentTag::Encoder,
        ComponentTag::Bottleneck,
        ComponentTag::Projector,
    ]);
    Ok(CLState {
        query,
        key,
        momentum: cfg.momentum,
        tau: cfg.tau,
        step: 0,
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

/// Center features across the batch (subtract the per-feature batch mean).
/// Pooled backbone features share one dominant direction at initialization;
/// without removing it, normalized embeddings start out collapsed (all
/// pairwise similarities equal), which is an exact zero-gradient fixed point
/// of the batch InfoNCE.
pub fn center_rows<F: Scalar>(g: &mut Graph<F>, x: Tensor) -> Tensor {
    let mean = g.mean_axis(x, 0);
    let neg = g.scale(mean, -F::one());
    g.add_bias(x, neg)
}

/// Query path: backbone -> pool -> center -> projector -> predictor.
fn query_embeddings<F: Scalar>(
    g: &mut Graph<F>,
    binder: &Binder,
    cfg: &NetConfig,
    input: Tensor,
) -> Tensor {
    let enc = forward::encoder_graph(g, binder, cfg, input);
    let pooled = forward::pool_tokens(g, enc.bottleneck_tokens);
    let centered = center_rows(g, pooled);
    let proj = forward::projector_graph(g, binder, centered);
    forward::predictor_graph(g, binder, proj)
}

/// Key path: backbone -> pool -> center -> projector (no predictor).
fn key_embeddings<F: Scalar>(
    g: &mut Graph<F>,
    binder: &Binder,
    cfg: &NetConfig,
    input: Tensor,
) -> Tensor {
    let enc = forward::encoder_graph(g, binder, cfg, input);
    let pooled = forward::pool_tokens(g, enc.bottleneck_tokens);
    let centered = center_rows(g, pooled);
    forward::projector_graph(g, binder, centered)
}

/// Run contrastive pretraining and emit the query backbone as a checkpoint.
pub fn pretrain_contrastive<F: Scalar>(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &CLConfig,
    init: Option<&Checkpoint<F>>,
) -> Result<(Checkpoint<F>, Vec<StepLog>)> {
    pretrain_contrastive_with_hook(manifest, net_cfg, cfg, init, |_, _| {})
}

/// Same, with a per-step observer (used by the EMA-oracle and stop-gradient
/// audits).
pub fn pretrain_contrastive_with_hook<F: Scalar>(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &CLConfig,
    init: Option<&Checkpoint<F>>,
    mut hook: impl FnMut(&CLState<F>, &StepLog),
) -> Result<(Checkpoint<F>, Vec<StepLog>)> {
    if manifest.entries.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    let mut state = init_cl_state(net_cfg, cfg, init)?;

    // contrastive training uses every slice, labeled or not
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
    let mut warned_degenerate = false;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max)?;
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
            0x0e0c,
        )));

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 && matches!(cfg.negatives, NegativesMode::InBatch)
                && !warned_degenerate {
                    log::warn!("batch of size 1 with in-batch negatives: zero negatives, loss is constant");
                    warned_degenerate = true;
                }
            let started = Instant::now();
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    epoch as u64,
                    idx as u64,
                ));
                let pair = contrastive_augment(&slices[idx], &cfg.augment, &mut rng);
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            let b1 = stack_batch::<F>(&v1.iter().collect::<Vec<_>>());
            let b2 = stack_batch::<F>(&v2.iter().collect::<Vec<_>>());

            let mut g = Graph::new();
            let mut qbind = Binder::new();
            qbind.bind_all(&mut g, &state.query, true);
            let mut kbind = Binder::new();
            kbind.bind_all(&mut g, &state.key, false);
            let in1 = g.constant(b1);
            let in2 = g.constant(b2);
            let q1 = query_embeddings(&mut g, &qbind, net_cfg, in1);
            let q2 = query_embeddings(&mut g, &qbind, net_cfg, in2);
            let k1 = key_embeddings(&mut g, &kbind, net_cfg, in1);
            let k2 = key_embeddings(&mut g, &kbind, net_cfg, in2);
            let loss = symmetric_loss_graph(&mut g, q1, q2, k1, k2, cfg.tau, cfg.negatives)?;
            let loss_val = g.scalar_value(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {} (epoch {epoch})",
                    state.step
                )));
            }
            g.backward(loss);

            let key_grads_absent = kbind.nodes().all(|(_, t, _)| g.grad(t).is_none());
            debug_assert!(key_grads_absent);

            let grads = qbind.grads(&g);
            drop(g);
            opt.step(&mut state.query, &grads);

            let query_ema_view = state.query.subset(&[
                ComponentTag::Encoder,
                ComponentTag::Bottleneck,
                ComponentTag::Projector,
            ]);
            momentum_step(&mut state.key, &query_ema_view, state.momentum)?;
            state.step += 1;

            let entry = StepLog {
                step: state.step,
                epoch,
                loss: loss_val,
                lr,
                millis: started.elapsed().as_millis() as u64,
                batch: chunk.len(),
                key_grads_absent,
            };
            hook(&state, &entry);
            logs.push(entry);
        }
    }

    let lineage = if init.is_some() {
        Lineage::ContrastiveTransfer
    } else {
        Lineage::Contrastive
    };
    let mut provenance = Vec::new();
    if let Some(ckpt) = init {
        provenance.extend(ckpt.provenance.iter().copied());
        provenance.push(ckpt.lineage);
    }
    let ckpt = Checkpoint {
        lineage,
        net_config: net_cfg.clone(),
        provenance,
        params: state.query.subset(&ComponentTag::BACKBONE),
    };
    Ok((ckpt, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, PhantomConfig};
    use ndarray::IxDyn;

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

    fn tiny_cl() -> CLConfig {
        CLConfig {
            epochs: 2,
            batch_size: 2,
            lr_max: 1e-3,
            momentum: 0.9,
            tau: 0.2,
            seed: 5,
            head: HeadConfig {
                hidden_dim: 8,
                out_dim: 4,
                ..HeadConfig::default()
            },
            augment: AugmentConfig::contrastive(),
            ..CLConfig::default()
        }
    }

    #[test]
    fn infonce_orthogonal_closed_form() {
        let q = vec![1.0, 0.0];
        let k = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0]];
        let loss = infonce(&q, &k, &neg, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }

    #[test]
    fn infonce_uniform_is_log_k_plus_1() {
        for k in 1..=16usize {
            let q = vec![0.3, -0.4, 0.1];
            let pos = vec![0.5, 0.5, 0.5];
            let negs: Vec<Vec<f64>> = (0..k).map(|_| pos.clone()).collect();
            let loss = infonce(&q, &pos, &negs, 0.7).unwrap();
            let want = ((k + 1) as f64).ln();
            assert!((loss - want).abs() < 1e-9, "K={k}: {loss} vs {want}");
        }
    }

    #[test]
    fn infonce_saturates() {
        // scaled so q.k+/tau = 50 and negatives sit at -50
        let q = vec![1.0, 0.0];
        let pos = vec![1.0, 0.0];
        let neg = vec![vec![-1.0, 0.0]];
        let loss = infonce(&q, &pos, &neg, 0.02).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn infonce_rejects_bad_tau() {
        assert!(matches!(
            infonce(&[1.0], &[1.0], &[], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn infonce_scale_invariance_means_normalized_inputs() {
        let q = vec![0.2, -0.7, 0.4];
        let pos = vec![0.9, 0.1, -0.3];
        let negs = vec![vec![0.5, 0.5, 0.5], vec![-0.2, 0.8, 0.1]];
        let a = infonce(&q, &pos, &negs, 0.3).unwrap();
        let q2: Vec<f64> = q.iter().map(|v| v * 7.5).collect();
        let b = infonce(&q2, &pos, &negs, 0.3).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn batch_graph_matches_scalar_terms() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (b, d) = (4usize, 8usize);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let q1 = mk(&mut rng);
        let q2 = mk(&mut rng);
        let k1 = mk(&mut rng);
        let k2 = mk(&mut rng);
        let tau = 0.2;

        // graph value
        let to_arr = |rows: &Vec<Vec<f64>>| {
            ArrayD::from_shape_vec(IxDyn(&[b, d]), rows.concat()).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let tq1 = g.leaf(to_arr(&q1));
        let tq2 = g.leaf(to_arr(&q2));
        let tk1 = g.constant(to_arr(&k1));
        let tk2 = g.constant(to_arr(&k2));
        let loss = symmetric_loss_graph(&mut g, tq1, tq2, tk1, tk2, tau, NegativesMode::InBatch)
            .unwrap();
        let got = g.scalar_value(loss);

        // independent two-term computation: per-row InfoNCE with the other
        // rows of the key batch as negatives, averaged over the batch
        let term = |qs: &Vec<Vec<f64>>, ks: &Vec<Vec<f64>>| -> f64 {
            let mut total = 0.0;
            for i in 0..b {
                let negs: Vec<Vec<f64>> = (0..b).filter(|&j| j != i).map(|j| ks[j].clone()).collect();
                total += infonce(&qs[i], &ks[i], &negs, tau).unwrap();
            }
            total / b as f64
        };
        let want = term(&q1, &k2) + term(&q2, &k1);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn symmetric_swap_invariance_over_random_batches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let b = rng.gen_range(2..6);
            let d = rng.gen_range(2..10);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                ArrayD::from_shape_vec(
                    IxDyn(&[b, d]),
                    (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let (a1, a2, b1, b2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let eval = |q1: &ArrayD<f64>, q2: &ArrayD<f64>, k1: &ArrayD<f64>, k2: &ArrayD<f64>| {
                let mut g = Graph::<f64>::new();
                let tq1 = g.constant(q1.clone());
                let tq2 = g.constant(q2.clone());
                let tk1 = g.constant(k1.clone());
                let tk2 = g.constant(k2.clone());
                let loss =
                    symmetric_loss_graph(&mut g, tq1, tq2, tk1, tk2, 0.3, NegativesMode::InBatch)
                        .unwrap();
                g.scalar_value(loss)
            };
            let fwd = eval(&a1, &a2, &b1, &b2);
            let swp = eval(&a2, &a1, &b2, &b1);
            assert!((fwd - swp).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_matched_pairs_closed_form() {
        // q1 = k2 and q2 = k1, one orthogonal negative each, tau = 1
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let loss = symmetric_loss(
            &e1,
            &e2,
            &e2,
            &e1,
            std::slice::from_ref(&e2),
            std::slice::from_ref(&e1),
            1.0,
        )
        .unwrap();
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }

    #[test]
    fn loss_bounded_by_similarity_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let d = rng.gen_range(2..8);
            let k = rng.gen_range(0..6);
            let tau = rng.gen_range(0.1..1.0);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let q = mk(&mut rng);
            let pos = mk(&mut rng);
            let negs: Vec<Vec<f64>> = (0..k).map(|_| mk(&mut rng)).collect();
            let loss = infonce(&q, &pos, &negs, tau).unwrap();
            let bound = (k as f64 * (2.0 / tau).exp() + 1.0).ln();
            assert!(loss >= 0.0 - 1e-12);
            assert!(loss <= bound + 1e-9, "loss {loss} bound {bound}");
        }
    }

    #[test]
    fn gradient_check_symmetric_loss() {
        // d(symmetric loss)/d(query embeddings) vs central differences
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..4 {
            let b = rng.gen_range(2..=8);
            let d = rng.gen_range(2..=16);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                ArrayD::from_shape_vec(
                    IxDyn(&[b, d]),
                    (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let (q1, q2, k1, k2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));

            let mut g = Graph::<f64>::new();
            let tq1 = g.leaf(q1.clone());
            let tq2 = g.leaf(q2.clone());
            let tk1 = g.constant(k1.clone());
            let tk2 = g.constant(k2.clone());
            let loss =
                symmetric_loss_graph(&mut g, tq1, tq2, tk1, tk2, 0.25, NegativesMode::InBatch)
                    .unwrap();
            g.backward(loss);
            let grads = [
                g.grad(tq1).unwrap().clone(),
                g.grad(tq2).unwrap().clone(),
            ];

            let eval = |q1: &ArrayD<f64>, q2: &ArrayD<f64>| -> f64 {
                let mut g = Graph::<f64>::new();
                let tq1 = g.constant(q1.clone());
                let tq2 = g.constant(q2.clone());
                let tk1 = g.constant(k1.clone());
                let tk2 = g.constant(k2.clone());
                let loss = symmetric_loss_graph(
                    &mut g, tq1, tq2, tk1, tk2, 0.25, NegativesMode::InBatch,
                )
                .unwrap();
                g.scalar_value(loss)
            };

            let h = 1e-5;
            for (which, base) in [&q1, &q2].into_iter().enumerate() {
                for idx in 0..base.len() {
                    let mut plus = base.clone();
                    plus.as_slice_mut().unwrap()[idx] += h;
                    let mut minus = base.clone();
                    minus.as_slice_mut().unwrap()[idx] -= h;
                    let (fp, fm) = if which == 0 {
                        (eval(&plus, &q2), eval(&minus, &q2))
                    } else {
                        (eval(&q1, &plus), eval(&q1, &minus))
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads[which].as_slice().unwrap()[idx];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "q{which} elem {idx}: fd {fd} analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn momentum_boundaries_exact() {
        let cfg = tiny_net();
        let query = init_segnet::<f64>(&cfg, 2).subset(&ComponentTag::BACKBONE);
        let other = init_segnet::<f64>(&cfg, 3).subset(&ComponentTag::BACKBONE);

        let mut key = other.clone();
        momentum_step(&mut key, &query, 1.0).unwrap();
        assert!(key.bitwise_eq(&other), "m=1 leaves key unchanged");

        let mut key = other.clone();
        momentum_step(&mut key, &query, 0.0).unwrap();
        assert!(key.bitwise_eq(&query), "m=0 copies query");

        // direct substitution: k=1, q=0, m=0.99 -> 0.99
        let mut key = TaggedParameters::<f64>::new();
        key.insert("w", ComponentTag::Encoder, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut q = TaggedParameters::<f64>::new();
        q.insert("w", ComponentTag::Encoder, ArrayD::from_elem(IxDyn(&[1]), 0.0));
        momentum_step(&mut key, &q, 0.99).unwrap();
        assert!((key.get("w").unwrap().array[[0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn momentum_name_mismatch_is_transfer_error() {
        let cfg = tiny_net();
        let query = init_segnet::<f64>(&cfg, 2).subset(&ComponentTag::BACKBONE);
        let mut key = query.clone();
        let mut bad = TaggedParameters::<f64>::new();
        bad.insert("extra", ComponentTag::Encoder, ArrayD::zeros(IxDyn(&[1])));
        key.extend(bad);
        assert!(matches!(
            momentum_step(&mut key, &query, 0.5),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn pretrain_runs_and_key_tracks_ema_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let phantom = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let manifest = build_dataset(dir.path(), 2, 3, 1.0, 9, &phantom).unwrap();
        let net = tiny_net();
        let cfg = tiny_cl();

        // replay oracle: EMA of logged query trajectories
        let state0 = init_cl_state::<f64>(&net, &cfg, None).unwrap();
        let mut oracle: std::collections::BTreeMap<String, ArrayD<f64>> = state0
            .key
            .iter()
            .map(|(n, p)| (n.clone(), p.array.clone()))
            .collect();
        let m = cfg.momentum;

        let (ckpt, logs) = pretrain_contrastive_with_hook::<f64>(
            &manifest,
            &net,
            &cfg,
            None,
            |state, log| {
                assert!(log.key_grads_absent, "stop-gradient violated at step {}", log.step);
                for (name, arr) in oracle.iter_mut() {
                    let q = &state.query.get(name).unwrap().array;
                    arr.zip_mut_with(q, |k, &qv| *k = m * *k + (1.0 - m) * qv);
                    let kv = &state.key.get(name).unwrap().array;
                    let max_err = arr
                        .iter()
                        .zip(kv.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    assert!(max_err < 1e-6, "EMA deviates by {max_err} on {name}");
                }
            },
        )
        .unwrap();

        assert!(!logs.is_empty());
        assert!(logs.iter().all(|l| l.loss.is_finite()));
        let tags = ckpt.params.tags_present();
        assert!(tags.contains(&ComponentTag::Encoder));
        assert!(tags.contains(&ComponentTag::Bottleneck));
        assert_eq!(tags.len(), 2, "checkpoint holds only the backbone");
        assert_eq!(ckpt.lineage, Lineage::Contrastive);
    }

    #[test]
    fn init_checkpoint_copies_bitwise_and_sets_lineage() {
        let net = tiny_net();
        let sup = Checkpoint {
            lineage: Lineage::Supervised,
            net_config: net.clone(),
            provenance: vec![],
            params: init_segnet::<f64>(&net, 77).subset(&ComponentTag::BACKBONE),
        };
        let cfg = tiny_cl();
        let state = init_cl_state::<f64>(&net, &cfg, Some(&sup)).unwrap();
        for (name, p) in sup.params.iter() {
            let q = &state.query.get(name).unwrap().array;
            assert!(p.array.iter().zip(q.iter()).all(|(a, b)| a == b), "{name}");
        }
        // key starts as an exact copy of the query backbone+projector
        for (name, p) in state.key.iter() {
            let q = &state.query.get(name).unwrap().array;
            assert!(p.array.iter().zip(q.iter()).all(|(a, b)| a == b), "{name}");
        }
    }
}
