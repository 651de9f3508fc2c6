//! Corpus ingestion and the synthetic two-modality phantom generator.
//!
//! Images live on disk as 2D `<f4` NPY arrays, labels as `|u1`. A manifest
//! is a JSON document listing (image, label, subject, modality) entries for
//! one split. The phantom corpus renders the same randomized 4-class
//! anatomy (nested ellipses) in two modalities with inverted per-class
//! contrast, so the full pipeline runs without any external data.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgdError, Result};
use crate::npy;
use crate::tape::TensorData;

/// A single 2D grayscale slice, intensities in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageSlice {
    /// `[H, W]`
    pub pixels: TensorData,
    pub subject_id: String,
    pub modality_id: usize,
    pub slice_index: usize,
}

impl ImageSlice {
    pub fn height(&self) -> usize {
        self.pixels.shape[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape[1]
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.pixels.shape != [resolution, resolution] {
            return Err(HgdError::Shape(format!(
                "slice {}/m{} has shape {:?}, expected {resolution}x{resolution}",
                self.subject_id, self.modality_id, self.pixels.shape
            )));
        }
        if self.pixels.data.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(HgdError::Validation(format!(
                "slice {}/m{} has pixels outside [-1, 1]",
                self.subject_id, self.modality_id
            )));
        }
        Ok(())
    }
}

/// Integer structure-class map aligned 1:1 with a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub classes: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(classes: Vec<u8>, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(HgdError::Shape("label data does not match declared dims".into()));
        }
        if num_classes < 2 {
            return Err(HgdError::Validation("label map needs at least 2 classes".into()));
        }
        if classes.iter().any(|&c| c as usize >= num_classes) {
            return Err(HgdError::Validation(format!(
                "label entry outside [0, {num_classes})"
            )));
        }
        Ok(LabelMap {
            classes,
            height,
            width,
            num_classes,
            class_names: default_class_names(num_classes),
        })
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == 4 {
        vec!["background".into(), "csf".into(), "gm".into(), "wm".into()]
    } else {
        (0..num_classes).map(|i| format!("class_{i}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
    pub subject_id: String,
    pub modality_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub resolution: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HgdError::Load(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Checks that no subject appears in both splits.
pub fn validate_disjoint_splits(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    let tr = train.subjects();
    for s in test.subjects() {
        if tr.binary_search(&s).is_ok() {
            return Err(HgdError::Validation(format!(
                "subject {s} appears in both train and test splits"
            )));
        }
    }
    Ok(())
}

/// Loads every (image, label) pair of a manifest, min-max rescaling each
/// slice to [-1, 1]. Ordering is (subject_id, modality_id, slice_index).
pub fn load_corpus(manifest: &DatasetManifest) -> Result<Vec<(ImageSlice, LabelMap)>> {
    let mut entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    entries.sort_by(|a, b| {
        (&a.subject_id, a.modality_id).cmp(&(&b.subject_id, b.modality_id))
    });

    // first pass to learn the class count so every LabelMap agrees
    let mut max_class = 0u8;
    let mut raw = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let (ih, iw, img) = npy::read_f32(Path::new(&e.image_path))?;
        let (lh, lw, lab) = npy::read_u8(Path::new(&e.label_path))?;
        if (ih, iw) != (lh, lw) {
            return Err(HgdError::Validation(format!(
                "{}: label {lh}x{lw} does not match image {ih}x{iw}",
                e.image_path
            )));
        }
        max_class = max_class.max(lab.iter().copied().max().unwrap_or(0));
        raw.push((i, ih, iw, img, lab));
    }
    let num_classes = (max_class as usize + 1).max(2);

    let mut out = Vec::with_capacity(raw.len());
    let mut slice_counter: std::collections::BTreeMap<(String, usize), usize> =
        std::collections::BTreeMap::new();
    for (i, h, w, img, lab) in raw {
        let e = entries[i];
        let lo = img.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let pixels: Vec<f64> = if hi > lo {
            img.iter().map(|&v| -1.0 + 2.0 * (v as f64 - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; img.len()]
        };
        let key = (e.subject_id.clone(), e.modality_id);
        let slice_index = *slice_counter
            .entry(key.clone())
            .and_modify(|c| *c += 1)
            .or_insert(0);
        let slice = ImageSlice {
            pixels: TensorData::new(vec![h, w], pixels),
            subject_id: e.subject_id.clone(),
            modality_id: e.modality_id,
            slice_index,
        };
        slice.validate(manifest.resolution)?;
        let labels = LabelMap::new(lab, h, w, num_classes)?;
        out.push((slice, labels));
    }
    Ok(out)
}

/// Writes a [-1, 1] slice back to disk as `<f4`.
pub fn save_image(path: &Path, slice: &ImageSlice) -> Result<()> {
    let data: Vec<f32> = slice.pixels.data.iter().map(|&v| v as f32).collect();
    npy::write_f32(path, slice.height(), slice.width(), &data)
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    npy::write_u8(path, labels.height, labels.width, &labels.classes)
}

/// Nearest-neighbor label downsampling; never invents classes.
pub fn downsample_labels(labels: &LabelMap, target_h: usize, target_w: usize) -> Result<LabelMap> {
    if target_h == 0 || target_w == 0 {
        return Err(HgdError::Argument("downsample_labels: target dims must be > 0".into()));
    }
    if target_h > labels.height || target_w > labels.width {
        return Err(HgdError::Argument(format!(
            "downsample_labels: target {target_h}x{target_w} exceeds source {}x{}",
            labels.height, labels.width
        )));
    }
    let mut out = vec![0u8; target_h * target_w];
    for y in 0..target_h {
        let sy = y * labels.height / target_h;
        for x in 0..target_w {
            let sx = x * labels.width / target_w;
            out[y * target_w + x] = labels.class_at(sy, sx);
        }
    }
    let mut lm = LabelMap::new(out, target_h, target_w, labels.num_classes)?;
    lm.class_names = labels.class_names.clone();
    Ok(lm)
}

pub const PHANTOM_CLASSES: usize = 4;

/// Per-class base intensities. Modality 1 inverts the contrast order, and
/// csf and gm are iso-intense in modality 0 only, so translating 0 -> 1
/// must resolve their identity from spatial context rather than intensity,
/// the way some tissue pairs only separate in one MR contrast.
const BASE_INTENSITY: [[f64; PHANTOM_CLASSES]; 2] =
    [[0.05, 0.50, 0.50, 0.95], [0.95, 0.65, 0.35, 0.05]];

/// Noise sigma as a fraction of the [0, 1] dynamic range.
const NOISE_SIGMA: f64 = 0.02;

pub struct PhantomCorpus {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub train_manifest_path: PathBuf,
    pub test_manifest_path: PathBuf,
}

/// Renders the class map of one subject: nested shapes for CSF / WM / GM
/// over background, randomized in position, size, orientation, and a
/// per-subject radial boundary wobble. The wobble gives every subject a
/// distinct silhouette, so cross-subject contrastive negatives are
/// genuinely separable rather than near-clones.
fn phantom_labels(rng: &mut ChaCha8Rng, res: usize) -> Vec<u8> {
    let r = res as f64;
    let cx = r / 2.0 + rng.gen_range(-r / 16.0..r / 16.0);
    let cy = r / 2.0 + rng.gen_range(-r / 16.0..r / 16.0);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let outer_rx = r * rng.gen_range(0.26..0.40);
    let outer_ry = r * rng.gen_range(0.26..0.40);
    let wm_frac = rng.gen_range(0.50..0.75);
    let csf_frac = rng.gen_range(0.15..0.32);
    let wobble_amp: f64 = rng.gen_range(0.04..0.15);
    let wobble_k = rng.gen_range(2u32..=5) as f64;
    let wobble_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let inside = |x: f64, y: f64, rx: f64, ry: f64| {
        let dx = x - cx;
        let dy = y - cy;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let rad = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
        let ang = v.atan2(u);
        rad <= 1.0 + wobble_amp * (wobble_k * ang + wobble_phase).cos()
    };
    let mut out = vec![0u8; res * res];
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * res + x] = if inside(fx, fy, outer_rx * csf_frac, outer_ry * csf_frac) {
                1 // csf core
            } else if inside(fx, fy, outer_rx * wm_frac, outer_ry * wm_frac) {
                3 // wm
            } else if inside(fx, fy, outer_rx, outer_ry) {
                2 // gm ring
            } else {
                0
            };
        }
    }
    out
}

/// Renders one modality of a subject from its class map.
fn phantom_image(rng: &mut ChaCha8Rng, res: usize, labels: &[u8], modality: usize) -> Vec<f32> {
    // smooth low-order polynomial bias field
    let coeff: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut out = vec![0.0f32; res * res];
    for y in 0..res {
        let fy = 2.0 * y as f64 / (res - 1) as f64 - 1.0;
        for x in 0..res {
            let fx = 2.0 * x as f64 / (res - 1) as f64 - 1.0;
            let class = labels[y * res + x] as usize;
            let base = BASE_INTENSITY[modality][class];
            let bias = 1.0
                + coeff[0] * fx
                + coeff[1] * fy
                + coeff[2] * fx * fy
                + coeff[3] * fx * fx
                + coeff[4] * fy * fy;
            let noise = crate::nn::randn(rng) * NOISE_SIGMA;
            out[y * res + x] = (base * bias + noise).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Generates and materializes a phantom corpus. Pure function of
/// (seed, n_subjects, resolution): re-running with the same arguments
/// reproduces identical file bytes.
pub fn make_phantom_corpus(
    seed: u64,
    n_subjects: usize,
    resolution: usize,
    out_dir: &Path,
) -> Result<PhantomCorpus> {
    if n_subjects < 2 {
        return Err(HgdError::Validation(format!(
            "phantom corpus needs at least 2 subjects, got {n_subjects}"
        )));
    }
    if resolution < 32 {
        return Err(HgdError::Validation(format!(
            "phantom resolution must be >= 32, got {resolution}"
        )));
    }
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&labels_dir)?;

    let n_train = (n_subjects * 3 / 4).clamp(1, n_subjects - 1);
    let mut train_entries = Vec::new();
    let mut test_entries = Vec::new();

    for s in 0..n_subjects {
        // one independent stream per subject keeps subjects stable if the
        // count changes
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(s as u64 + 1)));
        let subject_id = format!("s{s:03}");
        let labels = phantom_labels(&mut rng, resolution);
        let label_path = labels_dir.join(format!("{subject_id}.npy"));
        npy::write_u8(&label_path, resolution, resolution, &labels)?;
        let dest = if s < n_train { &mut train_entries } else { &mut test_entries };
        for m in 0..2 {
            let img = phantom_image(&mut rng, resolution, &labels, m);
            let image_path = images_dir.join(format!("{subject_id}_m{m}.npy"));
            npy::write_f32(&image_path, resolution, resolution, &img)?;
            dest.push(ManifestEntry {
                image_path: image_path.to_string_lossy().into_owned(),
                label_path: label_path.to_string_lossy().into_owned(),
                subject_id: subject_id.clone(),
                modality_id: m,
            });
        }
    }

    let train = DatasetManifest { entries: train_entries, split: Split::Train, resolution };
    let test = DatasetManifest { entries: test_entries, split: Split::Test, resolution };
    let train_manifest_path = out_dir.join("manifest_train.json");
    let test_manifest_path = out_dir.join("manifest_test.json");
    train.save(&train_manifest_path)?;
    test.save(&test_manifest_path)?;
    Ok(PhantomCorpus { train, test, train_manifest_path, test_manifest_path })
}
