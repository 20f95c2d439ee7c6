//! Mid-level integration: the decoder-pretraining matrix, the encoder
//! degeneracy measurement, checkpoint precision handling, and a CLI smoke
//! run through every subcommand.

use std::path::Path;
use std::process::Command;

use contraseg::augment::AugmentConfig;
use contraseg::cl_pretrain::{pretrain_contrastive, CLConfig};
use contraseg::dec_pretrain::{decoder_tuning_matrix, view_feature_distance, DecCLConfig, DecoderTuningConfig};
use contraseg::exp::TrainConfig;
use contraseg::nets::{init_segnet, ComponentTag, HeadConfig, NetConfig};
use contraseg::synthdata::{build_dataset, split_dataset, DatasetManifest, MultimodalSlice, PhantomConfig};
use contraseg::transfer::{load_checkpoint, save_checkpoint, Checkpoint, Lineage};

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
        scale_preset: contraseg::nets::ScalePreset::Desk,
    }
}

fn tiny_dataset(dir: &Path, patients: usize, spp: usize, seed: u64) -> DatasetManifest {
    let phantom = PhantomConfig {
        height: 32,
        width: 32,
        ..PhantomConfig::default()
    };
    build_dataset(dir, patients, spp, 1.0, seed, &phantom).unwrap()
}

fn tiny_head() -> HeadConfig {
    HeadConfig {
        hidden_dim: 8,
        out_dim: 4,
        ..HeadConfig::default()
    }
}

#[test]
fn decoder_tuning_matrix_shape_and_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 4, 3, 70);
    let (train_m, test_m) = split_dataset(&manifest, 0.75, 0).unwrap();
    let net = tiny_net();

    let supervised = Checkpoint {
        lineage: Lineage::Supervised,
        net_config: net.clone(),
        provenance: vec![],
        params: init_segnet::<f32>(&net, 1).subset(&ComponentTag::BACKBONE),
    };
    let contrastive = Checkpoint {
        lineage: Lineage::ContrastiveTransfer,
        net_config: net.clone(),
        provenance: vec![Lineage::Supervised],
        params: init_segnet::<f32>(&net, 2).subset(&ComponentTag::BACKBONE),
    };
    let cfg = DecoderTuningConfig {
        dec: DecCLConfig {
            epochs: 1,
            batch_size: 4,
            seed: 3,
            head: tiny_head(),
            ..DecCLConfig::default()
        },
        seg: TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr_max: 5e-4,
            ..TrainConfig::default()
        },
        seed: 9,
    };

    let report = decoder_tuning_matrix(
        &manifest,
        &train_m,
        &test_m,
        &net,
        &cfg,
        &supervised,
        &contrastive,
    )
    .unwrap();

    assert_eq!(report.rows.len(), 5, "five variants");
    for row in std::iter::once(&report.reference).chain(report.rows.iter()) {
        assert!((0.0..=1.0).contains(&row.dsc), "row {}: dsc {}", row.index, row.dsc);
        assert!((0.0..=1.0).contains(&row.mpa));
        assert!((0.0..=1.0).contains(&row.miou));
        if let Some(hd) = row.hd {
            assert!(hd >= 0.0 && hd.is_finite());
        }
    }
    // variants 1-4 transfer the pretrained expand/skip parameters
    for row in report.rows.iter().filter(|r| r.index <= 4) {
        assert_eq!(row.expand_skip_loaded["expand"], 1.0, "variant {}", row.index);
        assert_eq!(row.expand_skip_loaded["skip"], 1.0, "variant {}", row.index);
    }
    // variant 5 drops them: the audit must report 0.0, not merely omit it
    let v5 = report.rows.iter().find(|r| r.index == 5).unwrap();
    assert_eq!(v5.expand_skip_loaded["expand"], 0.0);
    assert_eq!(v5.expand_skip_loaded["skip"], 0.0);
}

#[test]
fn contrastive_encoder_contracts_view_features() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 4, 3, 80);
    let net = tiny_net();

    let slices: Vec<MultimodalSlice> = manifest
        .entries
        .iter()
        .map(|e| {
            let (pixels, _) = manifest.load_slice(e).unwrap();
            MultimodalSlice {
                pixels,
                slice_id: e.slice_id.clone(),
                patient_id: e.patient_id.clone(),
                labeled: true,
            }
        })
        .collect();

    let cl = CLConfig {
        epochs: 25,
        batch_size: 4,
        lr_max: 5e-4,
        momentum: 0.9,
        seed: 4,
        head: tiny_head(),
        ..CLConfig::default()
    };
    let (trained, _) = pretrain_contrastive::<f32>(&manifest, &net, &cl, None).unwrap();

    let random = init_segnet::<f32>(&net, 4242).subset(&ComponentTag::BACKBONE);
    let aug = AugmentConfig::contrastive();
    let d_random = view_feature_distance(&net, &random, &slices, &aug, 7).unwrap();
    let d_trained = view_feature_distance(&net, &trained.params, &slices, &aug, 7).unwrap();
    let ratio = d_trained / d_random;
    assert!(
        ratio < 1.0,
        "contrastive encoder should contract view distance: trained {d_trained:.4} vs random {d_random:.4} (ratio {ratio:.3})"
    );
}

#[test]
fn encoder_decoder_matrix_nine_row_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 4, 2, 90);
    let (train_m, test_m) = split_dataset(&manifest, 0.75, 0).unwrap();
    let net = tiny_net();
    let sources = contraseg::exp::AblationSources {
        supervised: Some(Checkpoint {
            lineage: Lineage::Supervised,
            net_config: net.clone(),
            provenance: vec![],
            params: init_segnet::<f32>(&net, 1).subset(&ComponentTag::BACKBONE),
        }),
        contrastive_with_tl: Some(Checkpoint {
            lineage: Lineage::ContrastiveTransfer,
            net_config: net.clone(),
            provenance: vec![Lineage::Supervised],
            params: init_segnet::<f32>(&net, 2).subset(&ComponentTag::BACKBONE),
        }),
        ..Default::default()
    };
    let spec = contraseg::exp::AblationSpec::encoder_decoder_matrix(
        net,
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr_max: 5e-4,
            ..TrainConfig::default()
        },
        vec![1],
    );
    assert_eq!(spec.arms.len(), 9);
    let report = contraseg::exp::run_ablation(&spec, &sources, &train_m, &test_m).unwrap();
    assert_eq!(report.arms.len(), 9);
    // arm names carry the encoder/decoder source columns
    for enc in ["none", "supe", "cont"] {
        for dec in ["none", "supe", "cont"] {
            let name = format!("enc-{enc}_dec-{dec}");
            assert!(report.arms.iter().any(|a| a.name == name), "{name} missing");
        }
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().filter(|l| l.contains(",median,")).count(), 9);
}

#[test]
fn checkpoint_cross_precision_load() {
    let dir = tempfile::tempdir().unwrap();
    let net = tiny_net();
    let ckpt32 = Checkpoint {
        lineage: Lineage::Supervised,
        net_config: net.clone(),
        provenance: vec![],
        params: init_segnet::<f32>(&net, 5).subset(&ComponentTag::BACKBONE),
    };
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ckpt32, &path).unwrap();
    let as64 = load_checkpoint::<f64>(&path).unwrap();
    for (name, p) in ckpt32.params.iter() {
        let q = &as64.params.get(name).unwrap().array;
        assert!(p
            .array
            .iter()
            .zip(q.iter())
            .all(|(a, b)| (*a as f64) == *b), "{name} is a lossless widening");
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_contraseg"))
}

#[test]
fn cli_smoke_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");

    let ok = |out: std::process::Output, what: &str| {
        assert!(
            out.status.success(),
            "{what} failed:\n{}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let out = bin()
        .args(["synth-data", "--patients", "3", "--slices-per-patient", "3"])
        .args(["--labeled-frac", "1.0", "--seed", "5", "--size", "32"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    ok(out, "synth-data");
    let manifest = data.join("manifest.json");
    assert!(manifest.is_file());

    let net = tiny_net();
    let sup_cfg = dir.path().join("sup.json");
    std::fs::write(
        &sup_cfg,
        serde_json::json!({
            "net": net,
            "proxy": {"epochs": 1, "batch_size": 4, "lr_max": 0.001, "seed": 2}
        })
        .to_string(),
    )
    .unwrap();
    let sup_ckpt = dir.path().join("sup.ckpt");
    let out = bin()
        .args(["pretrain-sup", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&sup_cfg)
        .arg("--out")
        .arg(&sup_ckpt)
        .output()
        .unwrap();
    ok(out, "pretrain-sup");

    let cl_cfg = dir.path().join("cl.json");
    std::fs::write(
        &cl_cfg,
        serde_json::json!({
            "net": net,
            "cl": {"epochs": 1, "batch_size": 4, "lr_max": 0.0005, "seed": 3,
                    "head": {"hidden_dim": 8, "out_dim": 4}}
        })
        .to_string(),
    )
    .unwrap();
    let cl_ckpt = dir.path().join("cl.ckpt");
    let cl_log = dir.path().join("cl.jsonl");
    let out = bin()
        .args(["pretrain-cl", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&cl_cfg)
        .arg("--init")
        .arg(&sup_ckpt)
        .arg("--out")
        .arg(&cl_ckpt)
        .arg("--log")
        .arg(&cl_log)
        .output()
        .unwrap();
    ok(out, "pretrain-cl");
    let log_text = std::fs::read_to_string(&cl_log).unwrap();
    let first: serde_json::Value = serde_json::from_str(log_text.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "millis"] {
        assert!(first.get(key).is_some(), "log line has {key}");
    }

    let dec_cfg = dir.path().join("dec.json");
    std::fs::write(
        &dec_cfg,
        serde_json::json!({
            "net": net,
            "dec": {"epochs": 1, "batch_size": 4, "lr_max": 0.0005, "seed": 4,
                     "head": {"hidden_dim": 8, "out_dim": 4}}
        })
        .to_string(),
    )
    .unwrap();
    let dec_ckpt = dir.path().join("dec.ckpt");
    let out = bin()
        .args(["pretrain-dec", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&dec_cfg)
        .arg("--encoder-init")
        .arg(&sup_ckpt)
        .args(["--aug-mode", "photometric"])
        .arg("--out")
        .arg(&dec_ckpt)
        .output()
        .unwrap();
    ok(out, "pretrain-dec");

    let seg_cfg = dir.path().join("seg.json");
    std::fs::write(
        &seg_cfg,
        serde_json::json!({
            "net": net,
            "train": {"epochs": 1, "batch_size": 4, "lr_max": 0.0005, "seed": 5}
        })
        .to_string(),
    )
    .unwrap();
    let seg_ckpt = dir.path().join("seg.ckpt");
    let curves = dir.path().join("curves.json");
    let out = bin()
        .args(["train-seg", "--manifest"])
        .arg(&manifest)
        .args(["--split-ratio", "0.67", "--split-seed", "1"])
        .arg("--config")
        .arg(&seg_cfg)
        .arg("--init")
        .arg(&cl_ckpt)
        .arg("--out")
        .arg(&seg_ckpt)
        .arg("--curves")
        .arg(&curves)
        .output()
        .unwrap();
    ok(out, "train-seg");
    assert!(curves.is_file());

    let report_csv = dir.path().join("report.csv");
    let out = bin()
        .args(["evaluate", "--ckpt"])
        .arg(&seg_ckpt)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&report_csv)
        .output()
        .unwrap();
    let stdout = ok(out, "evaluate");
    assert!(stdout.contains("89.60"), "footer shows reference magnitudes");
    let csv = std::fs::read_to_string(&report_csv).unwrap();
    assert!(csv.starts_with("class,dsc,mpa,miou,hd,n,skipped_hd"));

    let out = bin().args(["ckpt", "inspect"]).arg(&sup_ckpt).output().unwrap();
    let text = ok(out, "ckpt inspect");
    assert!(text.contains("supervised"));

    let out = bin()
        .args(["ckpt", "diff"])
        .arg(&sup_ckpt)
        .arg(&cl_ckpt)
        .output()
        .unwrap();
    ok(out, "ckpt diff");

    let exploded = dir.path().join("exploded");
    let out = bin()
        .args(["ckpt", "convert", "unpack"])
        .arg(&sup_ckpt)
        .arg(&exploded)
        .output()
        .unwrap();
    ok(out, "ckpt convert unpack");
    assert!(exploded.join("meta.json").is_file());
    let repacked = dir.path().join("repacked.ckpt");
    let out = bin()
        .args(["ckpt", "convert", "pack"])
        .arg(&exploded)
        .arg(&repacked)
        .output()
        .unwrap();
    ok(out, "ckpt convert pack");
    let a = load_checkpoint::<f64>(&sup_ckpt).unwrap();
    let b = load_checkpoint::<f64>(&repacked).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
}
