//! Deterministic multimodal phantom slices and dataset manifests.
//!
//! Each phantom renders one shared anatomy — an elliptical gland, an optional
//! tumor blob strictly inside it, low-frequency background texture — under
//! three distinct monotone intensity mappings standing in for the STIR / T1 /
//! T2 channel roles, plus channel-independent noise. Everything is a pure
//! function of `(seed, config)`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npyio;

/// Channel roles, in storage order.
pub const CHANNELS: [&str; 3] = ["STIR", "T1", "T2"];

/// Clinical-scale composition the synthetic defaults approximate: 4688
/// usable slices of which 1897 carry segmentation masks (labeled fraction
/// roughly 0.405).
pub const REFERENCE_TOTAL_SLICES: usize = 4688;
pub const REFERENCE_LABELED_SLICES: usize = 1897;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_GLAND: u8 = 1;
pub const CLASS_TUMOR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Three-channel float image with identity metadata.
#[derive(Debug, Clone)]
pub struct MultimodalSlice {
    /// `[3, H, W]`, intensities normalized to `[0, 1]` per channel.
    pub pixels: Array3<f32>,
    pub slice_id: String,
    pub patient_id: String,
    /// Whether a mask exists for this slice.
    pub labeled: bool,
}

impl MultimodalSlice {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Integer label map; 0 = background, 1 = gland, 2 = tumor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array2<u8>,
}

/// Geometry and rendering knobs for one phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub tumor_present: bool,
    /// Std-dev of the per-channel additive noise, on [0,1] intensities.
    pub noise_sigma: f64,
    /// Amplitude of the shared low-frequency texture field.
    pub texture_amp: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            tumor_present: true,
            noise_sigma: 0.06,
            texture_amp: 0.12,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 32 || v % 32 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be >= 32 and a multiple of 32, got {v}"
                )));
            }
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    /// Rotation of the axes, radians.
    phi: f64,
}

impl Ellipse {
    /// Normalized squared radius; <= 1 means inside.
    fn r2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.phi.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.r2(y, x) <= 1.0
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> Array2<f64> {
    // sum of a few random low-frequency sinusoids, range roughly [-amp, amp]
    let mut waves = Vec::new();
    for _ in 0..4 {
        let fy: f64 = rng.gen_range(0.5..2.5);
        let fx: f64 = rng.gen_range(0.5..2.5);
        let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let a: f64 = rng.gen_range(0.3..1.0);
        waves.push((fy, fx, ph, a));
    }
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy_ = y as f64 / h as f64;
        let fx_ = x as f64 / w as f64;
        let mut v = 0.0;
        for &(fy, fx, ph, a) in &waves {
            v += a * (std::f64::consts::TAU * (fy * fy_ + fx * fx_) + ph).sin();
        }
        amp * v / norm
    })
}

/// Monotone per-channel intensity mappings of the shared anatomy value.
fn channel_map(channel: usize, a: f64) -> f64 {
    let a = a.clamp(0.0, 1.0);
    match channel {
        // STIR: fluid/tumor bright
        0 => a.powf(0.65),
        // T1: inverted contrast, tumor dark
        1 => (1.0 - a).powf(0.9),
        // T2: sigmoid mid-contrast stretch
        _ => 1.0 / (1.0 + (-6.0 * (a - 0.5)).exp()),
    }
}

/// Generate one phantom slice and its mask, fully determined by `(seed, cfg)`.
pub fn generate_phantom(
    seed: u64,
    cfg: &PhantomConfig,
) -> Result<(MultimodalSlice, SegmentationMask)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let gland = Ellipse {
        cy: rng.gen_range(0.40..0.60) * h as f64,
        cx: rng.gen_range(0.40..0.60) * w as f64,
        ry: rng.gen_range(0.16..0.27) * h as f64,
        rx: rng.gen_range(0.16..0.27) * w as f64,
        phi: rng.gen_range(0.0..std::f64::consts::PI),
    };
    // tumor center at most 45% of the gland radius from its center; tumor
    // pixels are additionally intersected with the gland so label 2 stays
    // strictly inside the gland ellipse
    let t_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let t_rad: f64 = rng.gen_range(0.0..0.45);
    let (s, c) = gland.phi.sin_cos();
    let (ou, ov) = (
        t_rad * t_angle.cos() * gland.rx,
        t_rad * t_angle.sin() * gland.ry,
    );
    let tumor = Ellipse {
        cy: gland.cy + s * ou + c * ov,
        cx: gland.cx + c * ou - s * ov,
        ry: (rng.gen_range(0.22..0.45) * gland.ry).max(2.0),
        rx: (rng.gen_range(0.22..0.45) * gland.rx).max(2.0),
        phi: rng.gen_range(0.0..std::f64::consts::PI),
    };

    let texture = smooth_field(&mut rng, h, w, cfg.texture_amp);
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut anatomy = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let in_gland = gland.contains(yf, xf);
            let in_tumor = cfg.tumor_present && in_gland && tumor.contains(yf, xf);
            let label = if in_tumor {
                CLASS_TUMOR
            } else if in_gland {
                CLASS_GLAND
            } else {
                CLASS_BACKGROUND
            };
            labels[(y, x)] = label;
            let base = match label {
                CLASS_TUMOR => 0.85,
                CLASS_GLAND => 0.55,
                _ => 0.18,
            };
            anatomy[(y, x)] = base + texture[(y, x)];
        }
    }

    let mut pixels = Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        let mut plane = pixels.index_axis_mut(ndarray::Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                let noise: f64 = rand_distr::StandardNormal.sample(&mut rng);
                plane[(y, x)] =
                    (channel_map(ch, anatomy[(y, x)]) + cfg.noise_sigma * noise) as f32;
            }
        }
        // per-channel min-max normalization back to [0, 1]
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in plane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-6);
        plane.mapv_inplace(|v| (v - lo) / span);
    }

    let slice = MultimodalSlice {
        pixels,
        slice_id: format!("phantom-{seed:016x}"),
        patient_id: String::new(),
        labeled: true,
    };
    Ok((slice, SegmentationMask { labels }))
}

// ── manifests ───────────────────────────────────────────────────────────────

/// One dataset entry; paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slice_id: String,
    pub patient_id: String,
    pub center_id: String,
    pub slice_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn labeled(&self) -> bool {
        self.mask_path.is_some()
    }
}

/// Dataset index: entries plus labeled/unlabeled counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub labeled_total: usize,
    pub unlabeled_total: usize,
    /// Directory all relative paths resolve against (not serialized).
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>, root: PathBuf) -> Self {
        let labeled_total = entries.iter().filter(|e| e.labeled()).count();
        let unlabeled_total = entries.len() - labeled_total;
        DatasetManifest {
            entries,
            labeled_total,
            unlabeled_total,
            root,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("manifest has zero entries".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.slice_id) {
                return Err(Error::Data(format!("duplicate slice_id {}", e.slice_id)));
            }
            if !self.root.join(&e.slice_path).is_file() {
                return Err(Error::Data(format!(
                    "slice path does not resolve: {}",
                    e.slice_path.display()
                )));
            }
            if let Some(m) = &e.mask_path {
                if !self.root.join(m).is_file() {
                    return Err(Error::Data(format!(
                        "mask path does not resolve: {}",
                        m.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&json)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        m.validate()?;
        Ok(m)
    }

    /// Load pixel data (and the mask, when present) for an entry.
    pub fn load_slice(&self, e: &ManifestEntry) -> Result<(Array3<f32>, Option<Array2<u8>>)> {
        let px: ArrayD<f32> = npyio::read_npy(&self.root.join(&e.slice_path))?;
        let px = px
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::Dimension(format!("slice {} is not [3,H,W]", e.slice_id)))?;
        if px.shape()[0] != 3 {
            return Err(Error::Dimension(format!(
                "slice {} has {} channels, expected 3",
                e.slice_id,
                px.shape()[0]
            )));
        }
        let mask = match &e.mask_path {
            Some(p) => {
                let m: ArrayD<u8> = npyio::read_npy(&self.root.join(p))?;
                let m = m
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|_| Error::Dimension(format!("mask {} is not [H,W]", e.slice_id)))?;
                if m.shape() != [px.shape()[1], px.shape()[2]] {
                    return Err(Error::Dimension(format!(
                        "mask {} shape differs from slice",
                        e.slice_id
                    )));
                }
                Some(m)
            }
            None => None,
        };
        Ok((px, mask))
    }

    pub fn labeled_entries(&self) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.labeled()).collect()
    }
}

fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed derivation for per-sample streams.
pub fn derive_seed(global: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(global ^ mix64(a)) ^ mix64(b.wrapping_add(0x517c_c1b7_2722_0a95)))
}

const SEED_DOMAIN_LABELS: u64 = 0x4c41_4245;
const SEED_DOMAIN_SPLIT: u64 = 0x5350_4c49;

/// Generate a phantom dataset on disk and return its manifest.
///
/// Exactly `round(labeled_fraction * total)` entries keep their masks; the
/// labeled subset is a seeded shuffle so it spreads across patients.
pub fn build_dataset(
    out_dir: &Path,
    n_patients: usize,
    slices_per_patient: usize,
    labeled_fraction: f64,
    seed: u64,
    phantom: &PhantomConfig,
) -> Result<DatasetManifest> {
    if n_patients * slices_per_patient == 0 {
        return Err(Error::Config("dataset would have zero entries".into()));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    fs::create_dir_all(out_dir)?;

    let total = n_patients * slices_per_patient;
    let n_labeled = ((labeled_fraction * total as f64).round() as usize).clamp(1, total);
    let mut label_order: Vec<usize> = (0..total).collect();
    label_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        SEED_DOMAIN_LABELS,
        0,
    )));
    let mut labeled_flags = vec![false; total];
    for &i in label_order.iter().take(n_labeled) {
        labeled_flags[i] = true;
    }

    let mut entries = Vec::with_capacity(total);
    for p in 0..n_patients {
        for s in 0..slices_per_patient {
            let idx = p * slices_per_patient + s;
            let slice_seed = derive_seed(seed, p as u64, s as u64);
            let mut cfg = phantom.clone();
            // most slices cut through the tumor; a deterministic minority do not
            cfg.tumor_present = phantom.tumor_present && (slice_seed % 100) < 75;
            let (slice, mask) = generate_phantom(slice_seed, &cfg)?;
            let slice_id = format!("p{p:03}_s{s:03}");
            let patient_id = format!("pat{p:03}");
            let center_id = if p % 2 == 0 { "center-A" } else { "center-B" };

            let slice_path = PathBuf::from(format!("{slice_id}.npy"));
            npyio::write_npy(&out_dir.join(&slice_path), &slice.pixels.into_dyn())?;
            let mask_path = if labeled_flags[idx] {
                let mp = PathBuf::from(format!("{slice_id}_mask.npy"));
                npyio::write_npy(&out_dir.join(&mp), &mask.labels.into_dyn())?;
                Some(mp)
            } else {
                None
            };
            entries.push(ManifestEntry {
                slice_id,
                patient_id,
                center_id: center_id.to_string(),
                slice_path,
                mask_path,
            });
        }
    }

    let manifest = DatasetManifest::from_entries(entries, out_dir.to_path_buf());
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// How `split_dataset` groups entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Group by patient so no patient straddles the split (default).
    Patient,
    /// Split labeled slices directly.
    Slice,
}

/// Split the labeled portion into train/test; unlabeled entries are excluded.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    split_dataset_with_mode(manifest, ratio, seed, SplitMode::Patient)
}

pub fn split_dataset_with_mode(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let labeled: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.labeled())
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_DOMAIN_SPLIT, 1));

    let (train, test): (Vec<ManifestEntry>, Vec<ManifestEntry>) = match mode {
        SplitMode::Patient => {
            let mut patients: Vec<String> = Vec::new();
            for e in &labeled {
                if !patients.contains(&e.patient_id) {
                    patients.push(e.patient_id.clone());
                }
            }
            if patients.len() < 2 {
                return Err(Error::Split(format!(
                    "need at least 2 labeled patients, found {}",
                    patients.len()
                )));
            }
            patients.shuffle(&mut rng);
            let n_train =
                ((ratio * patients.len() as f64).round() as usize).clamp(1, patients.len() - 1);
            let train_set: std::collections::BTreeSet<_> =
                patients.iter().take(n_train).cloned().collect();
            labeled
                .into_iter()
                .partition(|e| train_set.contains(&e.patient_id))
        }
        SplitMode::Slice => {
            if labeled.len() < 2 {
                return Err(Error::Split("need at least 2 labeled slices".into()));
            }
            let mut order: Vec<usize> = (0..labeled.len()).collect();
            order.shuffle(&mut rng);
            let n_train =
                ((ratio * labeled.len() as f64).round() as usize).clamp(1, labeled.len() - 1);
            let train_idx: std::collections::BTreeSet<_> =
                order.into_iter().take(n_train).collect();
            let mut tr = Vec::new();
            let mut te = Vec::new();
            for (i, e) in labeled.into_iter().enumerate() {
                if train_idx.contains(&i) {
                    tr.push(e);
                } else {
                    te.push(e);
                }
            }
            (tr, te)
        }
    };

    Ok((
        DatasetManifest::from_entries(train, manifest.root.clone()),
        DatasetManifest::from_entries(test, manifest.root.clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_all_labels_and_shape() {
        let cfg = PhantomConfig::default();
        let (slice, mask) = generate_phantom(0, &cfg).unwrap();
        assert_eq!(slice.pixels.shape(), &[3, 64, 64]);
        let mut seen = [false; 3];
        for &l in mask.labels.iter() {
            seen[l as usize] = true;
        }
        assert!(seen[0] && seen[1] && seen[2], "labels 0,1,2 all present");
        assert!(slice.pixels.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn phantom_deterministic() {
        let cfg = PhantomConfig::default();
        let (a, ma) = generate_phantom(42, &cfg).unwrap();
        let (b, mb) = generate_phantom(42, &cfg).unwrap();
        assert!(a
            .pixels
            .iter()
            .zip(b.pixels.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ma.labels, mb.labels);
    }

    #[test]
    fn tumor_absent_means_no_label_2() {
        let cfg = PhantomConfig {
            tumor_present: false,
            ..PhantomConfig::default()
        };
        let (_, mask) = generate_phantom(3, &cfg).unwrap();
        assert!(mask.labels.iter().all(|&l| l != CLASS_TUMOR));
    }

    fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
        // Andrew's monotone chain
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        if pts.len() < 3 {
            return pts;
        }
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
            (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
        };
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
            while hull.len() >= 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        hull
    }

    fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
        let n = hull.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            let a = hull[i];
            let b = hull[(i + 1) % n];
            let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cr < -1e-9 {
                return false;
            }
        }
        true
    }

    #[test]
    fn tumor_inside_gland_convex_hull() {
        for seed in 0..25u64 {
            let (_, mask) = generate_phantom(seed, &PhantomConfig::default()).unwrap();
            let gland: Vec<(f64, f64)> = mask
                .labels
                .indexed_iter()
                .filter(|(_, &l)| l == CLASS_GLAND)
                .map(|((y, x), _)| (y as f64, x as f64))
                .collect();
            let hull = convex_hull(&gland);
            let mut tumor_pixels = 0usize;
            for ((y, x), &l) in mask.labels.indexed_iter() {
                if l == CLASS_TUMOR {
                    tumor_pixels += 1;
                    assert!(
                        inside_hull(&hull, (y as f64, x as f64)),
                        "seed {seed}: tumor pixel ({y},{x}) outside gland hull"
                    );
                }
            }
            assert!(tumor_pixels > 0, "seed {seed}: tumor_present yields label 2");
        }
    }

    #[test]
    fn split_disjoint_over_random_seeds() {
        // split_dataset never touches the filesystem, so fabricated entries
        // cover the disjointness property cheaply over many seeds
        let entries: Vec<ManifestEntry> = (0..12)
            .flat_map(|p| {
                (0..3).map(move |s| ManifestEntry {
                    slice_id: format!("p{p}_s{s}"),
                    patient_id: format!("pat{p}"),
                    center_id: "center-A".into(),
                    slice_path: PathBuf::from(format!("p{p}_s{s}.npy")),
                    mask_path: Some(PathBuf::from(format!("p{p}_s{s}_mask.npy"))),
                })
            })
            .collect();
        let m = DatasetManifest::from_entries(entries, PathBuf::from("."));
        for seed in 0..200u64 {
            let (tr, te) = split_dataset(&m, 0.7, seed).unwrap();
            let trp: std::collections::BTreeSet<_> =
                tr.entries.iter().map(|e| e.patient_id.clone()).collect();
            let tep: std::collections::BTreeSet<_> =
                te.entries.iter().map(|e| e.patient_id.clone()).collect();
            assert!(trp.is_disjoint(&tep), "seed {seed}");
            assert!(!trp.is_empty() && !tep.is_empty());
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        let cfg = PhantomConfig {
            height: 48,
            ..PhantomConfig::default()
        };
        assert!(matches!(
            generate_phantom(0, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_dataset_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let m = build_dataset(dir.path(), 16, 16, 0.4, 7, &cfg).unwrap();
        assert_eq!(m.entries.len(), 256);
        assert_eq!(m.labeled_total, 102); // round(0.4 * 256)
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.entries.len(), 256);
        assert_eq!(loaded.labeled_total, 102);
    }

    #[test]
    fn reference_composition_ratio() {
        let frac = REFERENCE_LABELED_SLICES as f64 / REFERENCE_TOTAL_SLICES as f64;
        assert!((frac - 0.405).abs() < 5e-4, "labeled fraction {frac}");
        // the synth-data default of 0.4 mirrors this composition
        assert!((frac - 0.4).abs() < 0.01);
    }

    #[test]
    fn full_label_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let m = build_dataset(dir.path(), 2, 3, 1.0, 7, &cfg).unwrap();
        assert_eq!(m.labeled_total, 6);
        assert_eq!(m.unlabeled_total, 0);
    }

    #[test]
    fn split_by_patient_is_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let m = build_dataset(dir.path(), 10, 4, 1.0, 11, &cfg).unwrap();
        let (tr, te) = split_dataset(&m, 0.8, 5).unwrap();
        let trp: std::collections::BTreeSet<_> =
            tr.entries.iter().map(|e| e.patient_id.clone()).collect();
        let tep: std::collections::BTreeSet<_> =
            te.entries.iter().map(|e| e.patient_id.clone()).collect();
        assert_eq!(trp.len(), 8);
        assert_eq!(tep.len(), 2);
        assert!(trp.is_disjoint(&tep));

        let (tr2, te2) = split_dataset(&m, 0.8, 5).unwrap();
        let ids = |m: &DatasetManifest| -> Vec<String> {
            m.entries.iter().map(|e| e.slice_id.clone()).collect()
        };
        assert_eq!(ids(&tr), ids(&tr2));
        assert_eq!(ids(&te), ids(&te2));
    }

    #[test]
    fn split_half_of_four_patients() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let m = build_dataset(dir.path(), 4, 2, 1.0, 3, &cfg).unwrap();
        let (tr, te) = split_dataset(&m, 0.5, 9).unwrap();
        let trp: std::collections::BTreeSet<_> =
            tr.entries.iter().map(|e| e.patient_id.clone()).collect();
        let tep: std::collections::BTreeSet<_> =
            te.entries.iter().map(|e| e.patient_id.clone()).collect();
        assert_eq!(trp.len(), 2);
        assert_eq!(tep.len(), 2);
        assert!(trp.is_disjoint(&tep));
    }

    #[test]
    fn split_needs_two_labeled_patients() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        let m = build_dataset(dir.path(), 1, 4, 1.0, 3, &cfg).unwrap();
        assert!(matches!(split_dataset(&m, 0.5, 1), Err(Error::Split(_))));
    }
}
