//! Checkpoint container and tag-aware weight surgery.
//!
//! A checkpoint file is a tar archive holding `meta.json` (schema version,
//! lineage, net config, provenance, per-blob checksums) plus one NPY blob per
//! parameter named by the parameter scheme. Round-trips are bit-exact when
//! the on-disk dtype matches the in-memory scalar type.
//!
//! `apply_policy` implements the encoder/decoder initialization matrix:
//! encoder and bottleneck load name-to-name; decoder Swin blocks either
//! mirror the corresponding encoder-stage weights of a source checkpoint or
//! load directly from a decoder-contrastive checkpoint; expand/skip/head
//! parameters stay randomly initialized unless a decoder-contrastive source
//! supplies expand and skip.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{
    init::segnet_param_specs, init_segnet, mirror_source_name, ComponentTag, NetConfig,
    TaggedParameters,
};
use crate::npyio;
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

/// Pretraining provenance of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lineage {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "contrastive")]
    Contrastive,
    #[serde(rename = "contrastive+transfer")]
    ContrastiveTransfer,
    #[serde(rename = "decoder-contrastive")]
    DecoderContrastive,
}

impl std::fmt::Display for Lineage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Lineage::None => "none",
            Lineage::Supervised => "supervised",
            Lineage::Contrastive => "contrastive",
            Lineage::ContrastiveTransfer => "contrastive+transfer",
            Lineage::DecoderContrastive => "decoder-contrastive",
        };
        f.write_str(s)
    }
}

/// Named-parameter container with lineage metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub lineage: Lineage,
    pub net_config: NetConfig,
    /// Parent lineages, oldest first.
    pub provenance: Vec<Lineage>,
    pub params: TaggedParameters<F>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    tag: ComponentTag,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    lineage: Lineage,
    net_config: NetConfig,
    provenance: Vec<Lineage>,
    dtype: String,
    params: Vec<ParamMeta>,
}

fn blob_bytes<F: Scalar>(arr: &ndarray::ArrayD<F>) -> Vec<u8> {
    if F::DTYPE == "f32" {
        npyio::to_bytes(&arr.mapv(|v| v.as_f64() as f32))
    } else {
        npyio::to_bytes(&arr.mapv(|v| v.as_f64()))
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write a checkpoint archive.
pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut builder = tar::Builder::new(file);

    let mut metas = Vec::new();
    let mut blobs = Vec::new();
    for (name, p) in ckpt.params.iter() {
        let bytes = blob_bytes(&p.array);
        metas.push(ParamMeta {
            name: name.clone(),
            tag: p.tag,
            shape: p.array.shape().to_vec(),
            sha256: sha_hex(&bytes),
        });
        blobs.push((format!("params/{name}.npy"), bytes));
    }
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        lineage: ckpt.lineage,
        net_config: ckpt.net_config.clone(),
        provenance: ckpt.provenance.clone(),
        dtype: F::DTYPE.to_string(),
        params: metas,
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta)?;

    let mut append = |name: &str, data: &[u8]| -> Result<()> {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder
            .append_data(&mut header, name, data)
            .map_err(Error::Io)
    };
    append("meta.json", &meta_bytes)?;
    for (name, data) in &blobs {
        append(name, data)?;
    }
    builder.into_inner()?.sync_all().ok();
    Ok(())
}

fn read_archive(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = File::open(path)?;
    let mut archive = tar::Archive::new(file);
    let mut out = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data)?;
        out.insert(name, data);
    }
    Ok(out)
}

/// Read a checkpoint archive, verifying schema version and blob checksums.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let entries = read_archive(path)?;
    let meta_bytes = entries
        .get("meta.json")
        .ok_or_else(|| Error::Schema("archive has no meta.json".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Schema(format!("meta.json unreadable: {e}")))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema version {} (supported: {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }

    let mut params = TaggedParameters::new();
    for pm in &meta.params {
        let blob = entries
            .get(&format!("params/{}.npy", pm.name))
            .ok_or_else(|| Error::Integrity(format!("missing blob for {}", pm.name)))?;
        if sha_hex(blob) != pm.sha256 {
            return Err(Error::Integrity(format!(
                "checksum mismatch for parameter {}",
                pm.name
            )));
        }
        let arr = npyio::from_bytes_scalar::<F>(blob)?;
        if arr.shape() != pm.shape.as_slice() {
            return Err(Error::Integrity(format!(
                "blob shape {:?} disagrees with meta {:?} for {}",
                arr.shape(),
                pm.shape,
                pm.name
            )));
        }
        params.insert(pm.name.clone(), pm.tag, arr);
    }
    Ok(Checkpoint {
        lineage: meta.lineage,
        net_config: meta.net_config,
        provenance: meta.provenance,
        params,
    })
}

impl<F: Scalar> Checkpoint<F> {
    /// Verify this checkpoint's arrays agree with `cfg` shape arithmetic.
    pub fn require_config(&self, cfg: &NetConfig) -> Result<()> {
        let specs: BTreeMap<String, Vec<usize>> = segnet_param_specs(cfg)
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect();
        for (name, p) in self.params.iter() {
            if let Some(shape) = specs.get(name) {
                if p.array.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, net config expects {:?}",
                        p.array.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── load policies ────────────────────────────────────────────────────────────

/// Which checkpoint initializes the encoder+bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSource {
    None,
    Supervised,
    Contrastive,
}

/// Which checkpoint initializes the decoder Swin blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderSource {
    None,
    Supervised,
    Contrastive,
    DecoderContrastive,
}

/// Selective initialization policy for the segmentation network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadPolicy {
    pub encoder_source: EncoderSource,
    pub decoder_source: DecoderSource,
    pub mirror_decoder_from_encoder: bool,
    pub load_expand_skip_heads: bool,
}

impl LoadPolicy {
    /// All-random initialization.
    pub fn none() -> Self {
        LoadPolicy {
            encoder_source: EncoderSource::None,
            decoder_source: DecoderSource::None,
            mirror_decoder_from_encoder: false,
            load_expand_skip_heads: false,
        }
    }

    pub fn mirrored(enc: EncoderSource, dec: DecoderSource) -> Self {
        LoadPolicy {
            encoder_source: enc,
            decoder_source: dec,
            mirror_decoder_from_encoder: !matches!(dec, DecoderSource::None),
            load_expand_skip_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.decoder_source {
            DecoderSource::DecoderContrastive if self.mirror_decoder_from_encoder => {
                Err(Error::Policy(
                    "decoder-contrastive source requires mirror_decoder_from_encoder=false".into(),
                ))
            }
            DecoderSource::Supervised | DecoderSource::Contrastive
                if !self.mirror_decoder_from_encoder =>
            {
                Err(Error::Policy(
                    "supervised/contrastive decoder sources initialize decoder blocks by \
                     mirroring; set mirror_decoder_from_encoder=true"
                        .into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Source checkpoints a policy can draw from.
pub struct Sources<F: Scalar> {
    pub supervised: Option<Checkpoint<F>>,
    pub contrastive: Option<Checkpoint<F>>,
    pub decoder_contrastive: Option<Checkpoint<F>>,
}

impl<F: Scalar> Default for Sources<F> {
    fn default() -> Self {
        Sources {
            supervised: None,
            contrastive: None,
            decoder_contrastive: None,
        }
    }
}

impl<F: Scalar> Sources<F> {
    fn encoder(&self, which: EncoderSource) -> Result<Option<&Checkpoint<F>>> {
        Ok(match which {
            EncoderSource::None => None,
            EncoderSource::Supervised => Some(
                self.supervised
                    .as_ref()
                    .ok_or_else(|| Error::Policy("missing supervised source checkpoint".into()))?,
            ),
            EncoderSource::Contrastive => Some(self.contrastive.as_ref().ok_or_else(|| {
                Error::Policy("missing contrastive source checkpoint".into())
            })?),
        })
    }

    fn decoder(&self, which: DecoderSource) -> Result<Option<&Checkpoint<F>>> {
        Ok(match which {
            DecoderSource::None => None,
            DecoderSource::Supervised => Some(
                self.supervised
                    .as_ref()
                    .ok_or_else(|| Error::Policy("missing supervised source checkpoint".into()))?,
            ),
            DecoderSource::Contrastive => Some(self.contrastive.as_ref().ok_or_else(|| {
                Error::Policy("missing contrastive source checkpoint".into())
            })?),
            DecoderSource::DecoderContrastive => {
                Some(self.decoder_contrastive.as_ref().ok_or_else(|| {
                    Error::Policy("missing decoder-contrastive source checkpoint".into())
                })?)
            }
        })
    }
}

fn copy_param<F: Scalar>(
    dst: &mut TaggedParameters<F>,
    dst_name: &str,
    src: &Checkpoint<F>,
    src_name: &str,
) -> Result<()> {
    let sp = src.params.get(src_name).ok_or_else(|| {
        Error::Transfer(format!(
            "source checkpoint ({}) lacks parameter {src_name}",
            src.lineage
        ))
    })?;
    let dp = dst
        .get_mut(dst_name)
        .ok_or_else(|| Error::Transfer(format!("target lacks parameter {dst_name}")))?;
    if dp.array.shape() != sp.array.shape() {
        return Err(Error::Dimension(format!(
            "parameter {dst_name}: target shape {:?} vs source shape {:?}",
            dp.array.shape(),
            sp.array.shape()
        )));
    }
    dp.array = sp.array.clone();
    Ok(())
}

/// Whether equality of this parameter distinguishes a load from fresh init.
/// Biases and layer-norm affines initialize to constants, so they are equal
/// across any two inits and carry no audit signal; weights and bias tables
/// are random and collide with probability zero.
fn informative(name: &str) -> bool {
    name.ends_with("/weight") || name.ends_with("/table")
}

/// Fraction of randomly initialized parameter tensors bit-equal to the
/// checkpoint, per tag, over the names present on both sides.
pub fn audit_equality<F: Scalar>(
    params: &TaggedParameters<F>,
    ckpt: &Checkpoint<F>,
) -> BTreeMap<ComponentTag, f64> {
    let mut counts: BTreeMap<ComponentTag, (usize, usize)> = BTreeMap::new();
    for (name, p) in params.iter() {
        if !informative(name) {
            continue;
        }
        let Some(q) = ckpt.params.get(name) else {
            continue;
        };
        let entry = counts.entry(p.tag).or_default();
        entry.1 += 1;
        let equal = p.array.shape() == q.array.shape()
            && p.array.iter().zip(q.array.iter()).all(|(a, b)| a == b);
        if equal {
            entry.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(t, (eq, total))| (t, eq as f64 / total as f64))
        .collect()
}

/// Fraction of decoder Swin-block tensors bit-equal to the mirrored
/// encoder-stage tensors of `ckpt`.
pub fn audit_mirror<F: Scalar>(
    cfg: &NetConfig,
    params: &TaggedParameters<F>,
    ckpt: &Checkpoint<F>,
) -> f64 {
    let mut total = 0usize;
    let mut equal = 0usize;
    for (name, p) in params.iter() {
        if p.tag != ComponentTag::Decoder || !informative(name) {
            continue;
        }
        let Some(src_name) = mirror_source_name(cfg, name) else {
            continue;
        };
        let Some(q) = ckpt.params.get(&src_name) else {
            continue;
        };
        total += 1;
        if p.array.shape() == q.array.shape()
            && p.array.iter().zip(q.array.iter()).all(|(a, b)| a == b)
        {
            equal += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        equal as f64 / total as f64
    }
}

/// Equality fractions recorded when a policy was applied.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PolicyAudit {
    /// Per-tag equality vs the encoder source checkpoint.
    pub encoder_equality: BTreeMap<String, f64>,
    /// Decoder-block equality vs the mirrored decoder source.
    pub decoder_mirror_fraction: Option<f64>,
    /// Decoder-block direct equality vs the decoder-contrastive source.
    pub decoder_direct_fraction: Option<f64>,
    /// Expand/skip equality vs the decoder-contrastive source.
    pub expand_skip_equality: BTreeMap<String, f64>,
}

/// Build segmentation-network parameters per `policy`. Unloaded components
/// are freshly random from `seed`. Returns the parameters together with a
/// parameter-equality audit proving what was loaded.
pub fn apply_policy<F: Scalar>(
    cfg: &NetConfig,
    policy: &LoadPolicy,
    sources: &Sources<F>,
    seed: u64,
) -> Result<(TaggedParameters<F>, PolicyAudit)> {
    policy.validate()?;
    // fail fast: resolve every needed source before any work
    let enc_src = sources.encoder(policy.encoder_source)?;
    let dec_src = sources.decoder(policy.decoder_source)?;
    for src in [&enc_src, &dec_src].into_iter().flatten() {
        src.require_config(cfg)?;
    }

    let mut params = init_segnet::<F>(cfg, seed);
    let mut audit = PolicyAudit::default();

    if let Some(src) = enc_src {
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| ComponentTag::BACKBONE.contains(&p.tag))
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            copy_param(&mut params, &name, src, &name)?;
        }
        audit.encoder_equality = audit_equality(&params, src)
            .into_iter()
            .map(|(t, f)| (t.to_string(), f))
            .collect();
    }

    match (policy.decoder_source, dec_src) {
        (DecoderSource::None, _) | (_, None) => {}
        (DecoderSource::DecoderContrastive, Some(src)) => {
            let names: Vec<String> = params
                .iter()
                .filter(|(_, p)| p.tag == ComponentTag::Decoder)
                .map(|(n, _)| n.clone())
                .collect();
            for name in names {
                copy_param(&mut params, &name, src, &name)?;
            }
            audit.decoder_direct_fraction = audit_equality(&params, src)
                .get(&ComponentTag::Decoder)
                .copied();
            if policy.load_expand_skip_heads {
                let names: Vec<String> = params
                    .iter()
                    .filter(|(_, p)| {
                        p.tag == ComponentTag::Expand || p.tag == ComponentTag::Skip
                    })
                    .map(|(n, _)| n.clone())
                    .collect();
                for name in names {
                    copy_param(&mut params, &name, src, &name)?;
                }
                audit.expand_skip_equality = audit_equality(&params, src)
                    .into_iter()
                    .filter(|(t, _)| *t == ComponentTag::Expand || *t == ComponentTag::Skip)
                    .map(|(t, f)| (t.to_string(), f))
                    .collect();
            }
        }
        (_, Some(src)) => {
            // mirrored initialization from an encoder-bearing checkpoint
            let names: Vec<String> = params
                .iter()
                .filter(|(_, p)| p.tag == ComponentTag::Decoder)
                .map(|(n, _)| n.clone())
                .collect();
            for name in names {
                let src_name = mirror_source_name(cfg, &name).ok_or_else(|| {
                    Error::Transfer(format!("no mirror correspondence for {name}"))
                })?;
                copy_param(&mut params, &name, src, &src_name)?;
            }
            audit.decoder_mirror_fraction = Some(audit_mirror(cfg, &params, src));
        }
    }

    Ok((params, audit))
}

/// Human-oriented summary used by the `ckpt inspect` command.
#[derive(Debug, Serialize)]
pub struct CkptSummary {
    pub lineage: Lineage,
    pub provenance: Vec<Lineage>,
    pub dtype: String,
    pub n_params: usize,
    pub n_elements: usize,
    pub tags: BTreeMap<String, usize>,
    pub img_size: usize,
    pub embed_dim: usize,
}

pub fn inspect(path: &Path) -> Result<CkptSummary> {
    let ckpt = load_checkpoint::<f64>(path)?;
    let mut tags: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in ckpt.params.iter() {
        *tags.entry(p.tag.to_string()).or_default() += 1;
    }
    let entries = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&entries["meta.json"])?;
    Ok(CkptSummary {
        lineage: ckpt.lineage,
        provenance: ckpt.provenance,
        dtype: meta.dtype,
        n_params: ckpt.params.len(),
        n_elements: ckpt.params.total_elements(),
        tags,
        img_size: ckpt.net_config.img_size,
        embed_dim: ckpt.net_config.embed_dim,
    })
}

/// Per-tag equality fractions between two checkpoints (shared names).
pub fn diff(a: &Path, b: &Path) -> Result<BTreeMap<String, f64>> {
    let ca = load_checkpoint::<f64>(a)?;
    let cb = load_checkpoint::<f64>(b)?;
    Ok(audit_equality(&ca.params, &cb)
        .into_iter()
        .map(|(t, f)| (t.to_string(), f))
        .collect())
}

/// Unpack an archive into a directory of `meta.json` + NPY blobs.
pub fn unpack(path: &Path, out_dir: &Path) -> Result<()> {
    let entries = read_archive(path)?;
    for (name, data) in entries {
        let target = out_dir.join(&name);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(target, data)?;
    }
    Ok(())
}

/// Pack a directory produced by [`unpack`] (or an external converter) back
/// into a checkpoint archive, recomputing checksums.
pub fn pack(dir: &Path, out_path: &Path) -> Result<()> {
    let meta_bytes = std::fs::read(dir.join("meta.json"))?;
    let mut meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Schema(format!("meta.json unreadable: {e}")))?;
    let mut params = TaggedParameters::<f64>::new();
    for pm in &mut meta.params {
        let blob = std::fs::read(dir.join("params").join(format!("{}.npy", pm.name)))?;
        pm.sha256 = sha_hex(&blob);
        let arr = npyio::from_bytes_scalar::<f64>(&blob)?;
        pm.shape = arr.shape().to_vec();
        params.insert(pm.name.clone(), pm.tag, arr);
    }
    let ckpt = Checkpoint {
        lineage: meta.lineage,
        net_config: meta.net_config.clone(),
        provenance: meta.provenance.clone(),
        params,
    };
    save_checkpoint(&ckpt, out_path)
}

impl FromStr for Lineage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Lineage::None,
            "supervised" => Lineage::Supervised,
            "contrastive" => Lineage::Contrastive,
            "contrastive+transfer" => Lineage::ContrastiveTransfer,
            "decoder-contrastive" => Lineage::DecoderContrastive,
            other => return Err(Error::Schema(format!("unknown lineage {other}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_segnet;

    fn small_cfg() -> NetConfig {
        NetConfig {
            img_size: 32,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1, 1],
            heads: vec![2, 2, 2],
            window_size: 2,
            num_classes: 3,
            mlp_ratio: 2,
            scale_preset: crate::nets::ScalePreset::Desk,
        }
    }

    fn make_ckpt(cfg: &NetConfig, lineage: Lineage, seed: u64) -> Checkpoint<f64> {
        Checkpoint {
            lineage,
            net_config: cfg.clone(),
            provenance: vec![],
            params: init_segnet::<f64>(cfg, seed)
                .subset(&[ComponentTag::Encoder, ComponentTag::Bottleneck]),
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let cfg = small_cfg();
        let ckpt = make_ckpt(&cfg, Lineage::Supervised, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        assert!(back.params.bitwise_eq(&ckpt.params));
        assert_eq!(back.lineage, Lineage::Supervised);
    }

    #[test]
    fn tampered_byte_is_integrity_error() {
        let cfg = small_cfg();
        let ckpt = make_ckpt(&cfg, Lineage::Contrastive, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip one byte deep in the payload region
        let at = bytes.len() / 2;
        bytes[at] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::Integrity(_)) | Err(Error::Schema(_)) | Err(Error::Data(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_config_names_parameter() {
        let cfg = small_cfg();
        let ckpt = make_ckpt(&cfg, Lineage::Supervised, 3);
        let bigger = NetConfig {
            embed_dim: 16,
            ..small_cfg()
        };
        let err = ckpt.require_config(&bigger).unwrap_err();
        match err {
            Error::Dimension(msg) => assert!(msg.contains('/'), "message names a parameter: {msg}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn policy_none_matches_nothing() {
        let cfg = small_cfg();
        let sup = make_ckpt(&cfg, Lineage::Supervised, 4);
        let sources = Sources {
            supervised: Some(sup.clone()),
            ..Sources::default()
        };
        let (params, _) = apply_policy(&cfg, &LoadPolicy::none(), &sources, 99).unwrap();
        let eq = audit_equality(&params, &sup);
        for (tag, frac) in eq {
            assert_eq!(frac, 0.0, "tag {tag} unexpectedly equal");
        }
    }

    #[test]
    fn policy_supe_supe_loads_encoder_and_mirrors_decoder() {
        let cfg = small_cfg();
        let sup = make_ckpt(&cfg, Lineage::Supervised, 5);
        let sources = Sources {
            supervised: Some(sup.clone()),
            ..Sources::default()
        };
        let policy = LoadPolicy::mirrored(EncoderSource::Supervised, DecoderSource::Supervised);
        let (params, audit) = apply_policy(&cfg, &policy, &sources, 7).unwrap();
        let eq = audit_equality(&params, &sup);
        assert_eq!(eq[&ComponentTag::Encoder], 1.0);
        assert_eq!(eq[&ComponentTag::Bottleneck], 1.0);
        assert_eq!(audit.decoder_mirror_fraction, Some(1.0));
        // expand/skip/head are fresh: the checkpoint has no such names, and
        // decoder blocks differ from the checkpoint's own namespace entirely
        assert_eq!(audit_mirror(&cfg, &params, &sup), 1.0);
    }

    #[test]
    fn missing_source_fails_fast() {
        let cfg = small_cfg();
        let sources = Sources::<f64>::default();
        let policy = LoadPolicy::mirrored(EncoderSource::Supervised, DecoderSource::None);
        assert!(matches!(
            apply_policy(&cfg, &policy, &sources, 1),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn invalid_policy_combinations_rejected() {
        let bad = LoadPolicy {
            encoder_source: EncoderSource::None,
            decoder_source: DecoderSource::DecoderContrastive,
            mirror_decoder_from_encoder: true,
            load_expand_skip_heads: false,
        };
        assert!(matches!(bad.validate(), Err(Error::Policy(_))));
        let bad2 = LoadPolicy {
            encoder_source: EncoderSource::None,
            decoder_source: DecoderSource::Supervised,
            mirror_decoder_from_encoder: false,
            load_expand_skip_heads: false,
        };
        assert!(matches!(bad2.validate(), Err(Error::Policy(_))));
    }

    #[test]
    fn policy_determinism() {
        let cfg = small_cfg();
        let sup = make_ckpt(&cfg, Lineage::Supervised, 8);
        let sources = Sources {
            supervised: Some(sup),
            ..Sources::default()
        };
        let policy = LoadPolicy::mirrored(EncoderSource::Supervised, DecoderSource::Supervised);
        let (a, _) = apply_policy(&cfg, &policy, &sources, 11).unwrap();
        let (b, _) = apply_policy(&cfg, &policy, &sources, 11).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let cfg = small_cfg();
        let ckpt = make_ckpt(&cfg, Lineage::Supervised, 12);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&ckpt, &a).unwrap();
        let exploded = dir.path().join("exploded");
        unpack(&a, &exploded).unwrap();
        let b = dir.path().join("b.ckpt");
        pack(&exploded, &b).unwrap();
        let back = load_checkpoint::<f64>(&b).unwrap();
        assert!(back.params.bitwise_eq(&ckpt.params));
    }
}
