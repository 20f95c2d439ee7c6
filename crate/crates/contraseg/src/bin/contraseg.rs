//! Command-line front door for the segmentation lab: data synthesis,
//! pretraining, fine-tuning, evaluation, ablations, checkpoint tooling.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use contraseg::cl_pretrain::{pretrain_contrastive, CLConfig};
use contraseg::dec_pretrain::{pretrain_decoder, AugMode, DecCLConfig};
use contraseg::exp::{
    build_chain, run_ablation, train_segmentation, train_supervised_proxy, write_jsonl,
    AblationArm, AblationSources, AblationSpec, ChainConfig, TrainConfig,
};
use contraseg::metrics::evaluate;
use contraseg::nets::{init_segnet, NetConfig};
use contraseg::scalar::Scalar;
use contraseg::synthdata::{build_dataset, split_dataset, DatasetManifest, PhantomConfig};
use contraseg::transfer::{load_checkpoint, save_checkpoint, Checkpoint, Lineage};

#[derive(Parser)]
#[command(name = "contraseg", version, about = "Contrastive pretraining and windowed-attention segmentation on multimodal phantoms")]
struct Cli {
    /// Numeric precision for training and evaluation.
    #[arg(long, global = true, default_value = "f32")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    SynthData {
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        slices_per_patient: usize,
        #[arg(long, default_value_t = 0.4)]
        labeled_frac: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square slice side; must be a multiple of 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.06)]
        noise: f64,
    },
    /// Momentum-contrastive pretraining of the encoder.
    PretrainCl {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file with fields `net` and `cl` (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint that initializes the query and key backbones.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decoder-targeted contrastive pretraining with a frozen encoder.
    PretrainDec {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file with fields `net` and `dec` (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frozen-encoder checkpoint; omitted = random frozen encoder.
        #[arg(long)]
        encoder_init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        aug_mode: AugModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Supervised proxy pretraining (tumor-present classification).
    PretrainSup {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the segmentation network.
    TrainSeg {
        /// Manifest to split internally (alternative: --train-manifest/--test-manifest).
        #[arg(long, conflicts_with_all = ["train_manifest", "test_manifest"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, requires = "test_manifest")]
        train_manifest: Option<PathBuf>,
        #[arg(long, requires = "train_manifest")]
        test_manifest: Option<PathBuf>,
        /// JSON file with fields `net` and `train` (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint whose parameters seed matching names (tags present).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss curves as JSON.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Evaluate a segmentation checkpoint on the labeled entries of a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output report; `.json` or `.csv` by extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Run an ablation described by a spec file.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkpoint tooling.
    Ckpt {
        #[command(subcommand)]
        action: CkptAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AugModeArg {
    Full,
    Photometric,
}

#[derive(Subcommand)]
enum CkptAction {
    /// Print a checkpoint summary as JSON.
    Inspect { file: PathBuf },
    /// Per-tag equality fractions between two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
    /// Convert between the archive and an exploded directory.
    Convert {
        #[command(subcommand)]
        direction: ConvertDirection,
    },
}

#[derive(Subcommand)]
enum ConvertDirection {
    /// Unpack an archive into meta.json + NPY blobs.
    Unpack { archive: PathBuf, dir: PathBuf },
    /// Pack a directory of meta.json + NPY blobs into an archive.
    Pack { dir: PathBuf, archive: PathBuf },
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainClFile {
    net: NetConfig,
    cl: CLConfig,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainDecFile {
    net: NetConfig,
    dec: DecCLConfig,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainSupFile {
    net: NetConfig,
    proxy: contraseg::exp::ProxyConfig,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainSegFile {
    net: NetConfig,
    train: TrainConfig,
}

/// On-disk ablation description: data, arms, seeds, sources.
#[derive(Serialize, Deserialize)]
#[serde(default)]
struct AblationFile {
    manifest: PathBuf,
    split_ratio: f64,
    split_seed: u64,
    net: NetConfig,
    train: TrainConfig,
    seeds: Vec<u64>,
    /// Explicit arms; when empty, `table` picks a canned layout.
    arms: Vec<AblationArm>,
    /// "pretraining" (4 arms) or "encoder-decoder" (9 arms) when `arms` is empty.
    table: String,
    sources: AblationSourcePaths,
    /// Build missing supervised/contrastive sources before running.
    build_chain: Option<ChainConfig>,
}

impl Default for AblationFile {
    fn default() -> Self {
        AblationFile {
            manifest: PathBuf::new(),
            split_ratio: 0.8,
            split_seed: 0,
            net: NetConfig::desk(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            arms: Vec::new(),
            table: "pretraining".into(),
            sources: AblationSourcePaths::default(),
            build_chain: None,
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct AblationSourcePaths {
    supervised: Option<PathBuf>,
    contrastive_with_tl: Option<PathBuf>,
    contrastive_scratch: Option<PathBuf>,
    decoder_contrastive: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> anyhow::Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.precision {
        Precision::F32 => run::<f32>(cli.command),
        Precision::F64 => run::<f64>(cli.command),
    }
}

fn run<F: Scalar>(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SynthData {
            patients,
            slices_per_patient,
            labeled_frac,
            out,
            seed,
            size,
            noise,
        } => {
            let phantom = PhantomConfig {
                height: size,
                width: size,
                noise_sigma: noise,
                ..PhantomConfig::default()
            };
            let manifest = build_dataset(&out, patients, slices_per_patient, labeled_frac, seed, &phantom)?;
            println!(
                "wrote {} slices ({} labeled) under {}",
                manifest.entries.len(),
                manifest.labeled_total,
                out.display()
            );
        }
        Command::PretrainCl {
            manifest,
            config,
            init,
            out,
            log,
        } => {
            let cfg: PretrainClFile = read_json_or_default(&config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let init_ckpt = init.map(|p| load_checkpoint::<F>(&p)).transpose()?;
            let (ckpt, logs) =
                pretrain_contrastive(&manifest, &cfg.net, &cfg.cl, init_ckpt.as_ref())?;
            save_checkpoint(&ckpt, &out)?;
            if let Some(log_path) = log {
                write_jsonl(&log_path, &logs)?;
            }
            let last = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
            println!(
                "pretrained {} steps, final loss {last:.4}, lineage {} -> {}",
                logs.len(),
                ckpt.lineage,
                out.display()
            );
        }
        Command::PretrainDec {
            manifest,
            config,
            encoder_init,
            aug_mode,
            out,
            log,
        } => {
            let cfg: PretrainDecFile = read_json_or_default(&config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let enc = encoder_init.map(|p| load_checkpoint::<F>(&p)).transpose()?;
            let mode = match aug_mode {
                AugModeArg::Full => AugMode::Full,
                AugModeArg::Photometric => AugMode::Photometric,
            };
            let (ckpt, logs) = pretrain_decoder(&manifest, &cfg.net, &cfg.dec, enc.as_ref(), mode)?;
            save_checkpoint(&ckpt, &out)?;
            if let Some(log_path) = log {
                write_jsonl(&log_path, &logs)?;
            }
            println!(
                "decoder-pretrained {} steps -> {}",
                logs.len(),
                out.display()
            );
        }
        Command::PretrainSup {
            manifest,
            config,
            out,
        } => {
            let cfg: PretrainSupFile = read_json_or_default(&config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let (ckpt, curves) = train_supervised_proxy::<F>(&manifest, &cfg.net, &cfg.proxy)?;
            save_checkpoint(&ckpt, &out)?;
            let acc = curves.last().map(|e| e.test_loss).unwrap_or(f64::NAN);
            println!("proxy trained, final train accuracy {acc:.3} -> {}", out.display());
        }
        Command::TrainSeg {
            manifest,
            split_ratio,
            split_seed,
            train_manifest,
            test_manifest,
            config,
            init,
            out,
            curves,
        } => {
            let cfg: TrainSegFile = read_json_or_default(&config)?;
            let (train_m, test_m) = match (manifest, train_manifest, test_manifest) {
                (Some(m), _, _) => {
                    let m = DatasetManifest::load(&m)?;
                    split_dataset(&m, split_ratio, split_seed)?
                }
                (None, Some(tr), Some(te)) => (
                    DatasetManifest::load(&tr)?,
                    DatasetManifest::load(&te)?,
                ),
                _ => bail!("provide either --manifest or --train-manifest with --test-manifest"),
            };
            let mut params = init_segnet::<F>(&cfg.net, cfg.train.seed);
            let mut provenance = Vec::new();
            let mut lineage = Lineage::None;
            if let Some(p) = init {
                let ckpt = load_checkpoint::<F>(&p)?;
                ckpt.require_config(&cfg.net)?;
                let mut loaded = 0usize;
                let names: Vec<String> = ckpt.params.names().cloned().collect();
                for name in names {
                    if let Some(dst) = params.get_mut(&name) {
                        dst.array = ckpt.params.get(&name).unwrap().array.clone();
                        loaded += 1;
                    }
                }
                println!("loaded {loaded} parameters from {}", p.display());
                lineage = ckpt.lineage;
                provenance = ckpt.provenance.clone();
            }
            let (final_params, curve) =
                train_segmentation(&train_m, &test_m, &cfg.net, &cfg.train, params)?;
            let ckpt = Checkpoint {
                lineage,
                net_config: cfg.net.clone(),
                provenance,
                params: final_params,
            };
            save_checkpoint(&ckpt, &out)?;
            if let Some(curve_path) = curves {
                std::fs::write(&curve_path, serde_json::to_string_pretty(&curve)?)?;
            }
            let last = curve.last().unwrap();
            println!(
                "trained {} epochs, train loss {:.4}, test loss {:.4} -> {}",
                curve.len(),
                last.train_loss,
                last.test_loss,
                out.display()
            );
        }
        Command::Evaluate {
            ckpt,
            manifest,
            out,
            batch_size,
        } => {
            let ckpt = load_checkpoint::<F>(&ckpt)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let report = evaluate(&ckpt.net_config, &ckpt.params, &manifest, batch_size)?;
            let is_csv = out.extension().is_some_and(|e| e == "csv");
            if is_csv {
                std::fs::write(&out, report.to_csv())?;
            } else {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            }
            println!(
                "macro: dsc {:.4} mpa {:.4} miou {:.4} hd {} ({} slices, {} hd-skips)",
                report.macro_avg.dsc,
                report.macro_avg.mpa,
                report.macro_avg.miou,
                report
                    .macro_avg
                    .hd
                    .map_or("skipped".into(), |h| format!("{h:.3}")),
                report.n_slices,
                report.skipped_hd_count
            );
            println!("{}", report.footer);
        }
        Command::Ablate { spec, out } => {
            let file: AblationFile = read_json(&spec)?;
            let manifest = DatasetManifest::load(&file.manifest)?;
            let (train_m, test_m) = split_dataset(&manifest, file.split_ratio, file.split_seed)?;

            let mut sources = AblationSources::<F>::default();
            let load = |p: &Option<PathBuf>| -> anyhow::Result<Option<Checkpoint<F>>> {
                Ok(p.as_ref().map(|p| load_checkpoint::<F>(p)).transpose()?)
            };
            sources.supervised = load(&file.sources.supervised)?;
            sources.contrastive_with_tl = load(&file.sources.contrastive_with_tl)?;
            sources.contrastive_scratch = load(&file.sources.contrastive_scratch)?;
            sources.decoder_contrastive = load(&file.sources.decoder_contrastive)?;

            if let Some(chain_cfg) = &file.build_chain {
                std::fs::create_dir_all(&out)?;
                let built = build_chain::<F>(&manifest, &train_m, &file.net, chain_cfg)?;
                if sources.supervised.is_none() {
                    if let Some(c) = &built.supervised {
                        save_checkpoint(c, &out.join("supervised.ckpt"))?;
                    }
                    sources.supervised = built.supervised;
                }
                if sources.contrastive_with_tl.is_none() {
                    if let Some(c) = &built.contrastive_with_tl {
                        save_checkpoint(c, &out.join("contrastive_with_tl.ckpt"))?;
                    }
                    sources.contrastive_with_tl = built.contrastive_with_tl;
                }
                if sources.contrastive_scratch.is_none() {
                    if let Some(c) = &built.contrastive_scratch {
                        save_checkpoint(c, &out.join("contrastive_scratch.ckpt"))?;
                    }
                    sources.contrastive_scratch = built.contrastive_scratch;
                }
            }

            let spec = if file.arms.is_empty() {
                match file.table.as_str() {
                    "pretraining" => AblationSpec::four_arm_pretraining(file.net.clone(), file.train.clone(), file.seeds.clone()),
                    "encoder-decoder" => AblationSpec::encoder_decoder_matrix(file.net.clone(), file.train.clone(), file.seeds.clone()),
                    other => bail!("unknown table layout {other} and no explicit arms"),
                }
            } else {
                AblationSpec {
                    arms: file.arms.clone(),
                    net: file.net.clone(),
                    train: file.train.clone(),
                    seeds: file.seeds.clone(),
                }
            };

            let report = run_ablation(&spec, &sources, &train_m, &test_m)?;
            let files = report.write_outputs(&out)?;
            println!("ablation complete: {} arms, outputs:", report.arms.len());
            for f in files {
                println!("  {}", f.display());
            }
            for arm in &report.arms {
                println!(
                    "  {}: median dsc {:.4} mpa {:.4} miou {:.4} hd {}",
                    arm.name,
                    arm.median_dsc,
                    arm.median_mpa,
                    arm.median_miou,
                    arm.median_hd.map_or("skipped".into(), |h| format!("{h:.3}"))
                );
            }
        }
        Command::Ckpt { action } => match action {
            CkptAction::Inspect { file } => {
                let summary = contraseg::transfer::inspect(&file)?;
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
            CkptAction::Diff { a, b } => {
                let fractions = contraseg::transfer::diff(&a, &b)?;
                println!("{}", serde_json::to_string_pretty(&fractions)?);
            }
            CkptAction::Convert { direction } => match direction {
                ConvertDirection::Unpack { archive, dir } => {
                    contraseg::transfer::unpack(&archive, &dir)?;
                    println!("unpacked {} -> {}", archive.display(), dir.display());
                }
                ConvertDirection::Pack { dir, archive } => {
                    contraseg::transfer::pack(&dir, &archive)?;
                    println!("packed {} -> {}", dir.display(), archive.display());
                }
            },
        },
    }
    Ok(())
}
