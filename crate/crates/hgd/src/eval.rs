//! Translation fidelity metrics: PSNR, Gaussian-windowed SSIM, per-class
//! Dice and volumetric similarity, plus the voxel-level structure analysis
//! built on a toy intensity segmenter.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageSlice, LabelMap};
use crate::error::{HgdError, Result};
use crate::tape::TensorData;

/// Dynamic range of [-1, 1] images.
pub const DYNAMIC_RANGE: f64 = 2.0;
/// Reported in place of +inf dB when the MSE is exactly zero.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

fn check_same_2d(a: &TensorData, b: &TensorData, what: &str) -> Result<()> {
    if a.shape.len() != 2 {
        return Err(HgdError::Shape(format!("{what}: expected 2D images")));
    }
    if a.shape != b.shape {
        return Err(HgdError::Shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn psnr(reference: &TensorData, test: &TensorData) -> Result<f64> {
    check_same_2d(reference, test, "psnr")?;
    let n = reference.numel() as f64;
    let mse = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

/// Mean local SSIM over valid window positions, Gaussian weights,
/// k1 = 0.01, k2 = 0.03 on the declared dynamic range.
pub fn ssim(reference: &TensorData, test: &TensorData, window: usize, sigma: f64) -> Result<f64> {
    check_same_2d(reference, test, "ssim")?;
    let (h, w) = (reference.shape[0], reference.shape[1]);
    if window == 0 || window % 2 == 0 {
        return Err(HgdError::Argument("ssim: window must be odd and positive".into()));
    }
    if h < window || w < window {
        return Err(HgdError::Argument(format!(
            "ssim: image {h}x{w} smaller than {window}x{window} window"
        )));
    }
    if sigma <= 0.0 {
        return Err(HgdError::Argument("ssim: sigma must be > 0".into()));
    }

    let half = (window / 2) as isize;
    let mut kernel = Vec::with_capacity(window);
    for i in 0..window {
        let d = i as isize - half;
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    // separable weighted moments: horizontal pass, then vertical
    let hw_out = w - window + 1;
    let hh_out = h - window + 1;
    let horiz = |src: &[f64], f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; h * hw_out];
        for y in 0..h {
            for x in 0..hw_out {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * f(src[y * w + x + i]);
                }
                out[y * hw_out + x] = acc;
            }
        }
        out
    };
    let vert = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; hh_out * hw_out];
        for y in 0..hh_out {
            for x in 0..hw_out {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * src[(y + i) * hw_out + x];
                }
                out[y * hw_out + x] = acc;
            }
        }
        out
    };

    let id = |v: f64| v;
    let sq = |v: f64| v * v;
    let mu_x = vert(&horiz(&reference.data, &id));
    let mu_y = vert(&horiz(&test.data, &id));
    let xx = vert(&horiz(&reference.data, &sq));
    let yy = vert(&horiz(&test.data, &sq));
    let xy_src: Vec<f64> = reference.data.iter().zip(&test.data).map(|(a, b)| a * b).collect();
    let xy = vert(&horiz(&xy_src, &id));

    let c1 = (0.01 * DYNAMIC_RANGE).powi(2);
    let c2 = (0.03 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..hh_out * hw_out {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (hh_out * hw_out) as f64)
}

/// 2|A∩B| / (|A|+|B|); both masks empty gives 1.0 by convention.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HgdError::Shape("dice: mask length mismatch".into()));
    }
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// 1 - ||A|-|B|| / (|A|+|B|); both masks empty gives 1.0 by convention.
pub fn vol_similarity(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HgdError::Shape("vol_similarity: mask length mismatch".into()));
    }
    let na = a.iter().filter(|&&v| v).count() as f64;
    let nb = b.iter().filter(|&&v| v).count() as f64;
    if na + nb == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (na - nb).abs() / (na + nb))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub vol_similarity: f64,
    /// class absent from both reference and prediction; scores default to 1
    pub absent_in_both: bool,
}

/// Fractions in [0, 1] throughout; PSNR in dB.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub n_samples: usize,
}

/// Nearest-class-mean intensity classifier, calibrated on labeled training
/// phantoms of one modality. Stands in for an external tissue segmenter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalSegmenter {
    pub class_means: Vec<f64>,
    pub modality_id: usize,
}

pub fn calibrate_segmenter(
    samples: &[(ImageSlice, LabelMap)],
    modality: usize,
) -> Result<IntervalSegmenter> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for (img, labels) in samples {
        if img.modality_id != modality {
            continue;
        }
        if sums.is_empty() {
            sums = vec![0.0; labels.num_classes];
            counts = vec![0; labels.num_classes];
        }
        if labels.num_classes != sums.len() {
            return Err(HgdError::Validation("calibrate_segmenter: class count varies".into()));
        }
        for (&v, &c) in img.pixels.data.iter().zip(&labels.classes) {
            sums[c as usize] += v;
            counts[c as usize] += 1;
        }
    }
    if sums.is_empty() {
        return Err(HgdError::Validation(format!(
            "calibrate_segmenter: no samples for modality {modality}"
        )));
    }
    let mut class_means = Vec::with_capacity(sums.len());
    for (c, (&s, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            return Err(HgdError::Validation(format!(
                "calibrate_segmenter: class {c} absent from calibration set"
            )));
        }
        class_means.push(s / n as f64);
    }
    Ok(IntervalSegmenter { class_means, modality_id: modality })
}

impl IntervalSegmenter {
    pub fn segment(&self, image: &TensorData) -> Result<LabelMap> {
        if image.shape.len() != 2 {
            return Err(HgdError::Shape("segment: expected a 2D image".into()));
        }
        if self.class_means.len() < 2 {
            return Err(HgdError::Validation("segment: segmenter has fewer than 2 classes".into()));
        }
        let classes: Vec<u8> = image
            .data
            .iter()
            .map(|&v| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, &m) in self.class_means.iter().enumerate() {
                    let d = (v - m).abs();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(classes, image.shape[0], image.shape[1], self.class_means.len())
    }
}

/// Segments a translated image and scores per-class overlap against the
/// ground-truth labels.
pub fn voxel_analysis(
    translated: &ImageSlice,
    labels: &LabelMap,
    segmenter: &IntervalSegmenter,
) -> Result<MetricReport> {
    if translated.height() != labels.height || translated.width() != labels.width {
        return Err(HgdError::Shape(format!(
            "voxel_analysis: image {}x{} vs labels {}x{}",
            translated.height(),
            translated.width(),
            labels.height,
            labels.width
        )));
    }
    let predicted = segmenter
        .segment(&translated.pixels)
        .map_err(|e| HgdError::Validation(format!("segmenter failed on {}: {e}", translated.subject_id)))?;
    let mut per_class = BTreeMap::new();
    for (c, name) in labels.class_names.iter().enumerate() {
        let c = c as u8;
        let a: Vec<bool> = labels.classes.iter().map(|&v| v == c).collect();
        let b: Vec<bool> = predicted.classes.iter().map(|&v| v == c).collect();
        let absent = !a.contains(&true) && !b.contains(&true);
        per_class.insert(
            name.clone(),
            ClassMetrics {
                dice: dice(&a, &b)?,
                vol_similarity: vol_similarity(&a, &b)?,
                absent_in_both: absent,
            },
        );
    }
    Ok(MetricReport { psnr_db: None, ssim: None, per_class, n_samples: 1 })
}

/// One CSV row per pooled structure feature: subject, class tag, then the
/// feature components, in input order.
pub fn export_embeddings(
    rows: &[(Vec<f64>, String, String)],
    path: &Path,
) -> Result<()> {
    let dim = rows.first().map(|(f, _, _)| f.len()).unwrap_or(0);
    let mut f = std::fs::File::create(path)?;
    let mut header = vec!["subject_id".to_string(), "class".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    writeln!(f, "{}", header.join(","))?;
    for (feat, subject, class) in rows {
        if feat.len() != dim {
            return Err(HgdError::Shape("export_embeddings: ragged feature rows".into()));
        }
        let vals: Vec<String> = feat.iter().map(|v| format!("{v:.9}")).collect();
        writeln!(f, "{subject},{class},{}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, make_phantom_corpus};
    use proptest::prelude::*;

    fn img(h: usize, w: usize, data: Vec<f64>) -> TensorData {
        TensorData::new(vec![h, w], data)
    }

    fn pseudo(n: usize, k: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut v = (i as u64 + 1 + (k << 20)).wrapping_mul(6364136223846793005);
                v ^= v >> 29;
                v = v.wrapping_mul(0x9e3779b97f4a7c15);
                ((v >> 33) % 2000) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn psnr_conventions() {
        let a = img(4, 4, pseudo(16, 1));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_SENTINEL_DB);
        // constant offset of the full range gives MSE = range^2, so 0 dB
        let b = img(4, 4, a.data.iter().map(|v| v + 2.0).collect());
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        let c = img(4, 4, pseudo(16, 7));
        let mse = a
            .data
            .iter()
            .zip(&c.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 16.0;
        let oracle = 10.0 * (4.0 / mse).log10();
        assert!((psnr(&a, &c).unwrap() - oracle).abs() < 1e-9);
        assert!((psnr(&a, &c).unwrap() - psnr(&c, &a).unwrap()).abs() < 1e-12);
        let d = img(2, 8, a.data.clone());
        assert!(psnr(&a, &d).is_err());
    }

    /// Per-window SSIM by direct weighted sums, no separable trick.
    fn ssim_naive(a: &TensorData, b: &TensorData, window: usize, sigma: f64) -> f64 {
        let (h, w) = (a.shape[0], a.shape[1]);
        let half = (window / 2) as isize;
        let mut kernel = vec![0.0; window * window];
        let mut norm = 0.0;
        for y in 0..window {
            for x in 0..window {
                let dy = y as isize - half;
                let dx = x as isize - half;
                let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                kernel[y * window + x] = v;
                norm += v;
            }
        }
        for k in &mut kernel {
            *k /= norm;
        }
        let c1 = (0.01 * DYNAMIC_RANGE).powi(2);
        let c2 = (0.03 * DYNAMIC_RANGE).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=(h - window) {
            for ox in 0..=(w - window) {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..window {
                    for kx in 0..window {
                        let k = kernel[ky * window + kx];
                        let va = a.data[(oy + ky) * w + ox + kx];
                        let vb = b.data[(oy + ky) * w + ox + kx];
                        mx += k * va;
                        my += k * vb;
                        xx += k * va * va;
                        yy += k * vb * vb;
                        xy += k * va * vb;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_conventions_and_oracle() {
        let a = img(16, 16, pseudo(256, 3));
        assert!((ssim(&a, &a, 11, 1.5).unwrap() - 1.0).abs() < 1e-12);

        // anticorrelated images with near-zero local means: the covariance
        // term flips the sign
        let checker: Vec<f64> = (0..256)
            .map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        let zm = img(16, 16, checker.clone());
        let neg = img(16, 16, checker.iter().map(|v| -v).collect());
        assert!(ssim(&zm, &neg, 11, 1.5).unwrap() < 0.0);

        let b = img(16, 16, pseudo(256, 9));
        let got = ssim(&a, &b, 11, 1.5).unwrap();
        let oracle = ssim_naive(&a, &b, 11, 1.5);
        assert!((got - oracle).abs() < 1e-4, "got {got}, oracle {oracle}");

        let small = img(8, 8, pseudo(64, 2));
        assert!(ssim(&small, &small, 11, 1.5).is_err());
    }

    #[test]
    fn dice_and_vs_examples() {
        let a = vec![true; 8];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(vol_similarity(&a, &a).unwrap(), 1.0);

        let mut left = vec![false; 8];
        let mut right = vec![false; 8];
        for i in 0..4 {
            left[i] = true;
            right[i + 4] = true;
        }
        assert_eq!(dice(&left, &right).unwrap(), 0.0);
        assert_eq!(vol_similarity(&left, &right).unwrap(), 1.0);

        // |A|=10, |B|=30, |A∩B|=10
        let mut x = vec![false; 40];
        let mut y = vec![false; 40];
        for i in 0..10 {
            x[i] = true;
        }
        for i in 0..30 {
            y[i] = true;
        }
        assert_eq!(dice(&x, &y).unwrap(), 0.5);
        assert_eq!(vol_similarity(&x, &y).unwrap(), 0.5);

        let empty = vec![false; 8];
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(vol_similarity(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn phantom_segmentation_fidelity() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_phantom_corpus(11, 4, 64, dir.path()).unwrap();
        let train = load_corpus(&corpus.train).unwrap();
        let test = load_corpus(&corpus.test).unwrap();
        let seg = calibrate_segmenter(&train, 1).unwrap();
        let (img1, labels) = test
            .iter()
            .find(|(i, _)| i.modality_id == 1)
            .expect("modality 1 present in test split");
        let report = voxel_analysis(img1, labels, &seg).unwrap();
        assert_eq!(
            report.per_class.keys().cloned().collect::<Vec<_>>(),
            labels.class_names
                .iter()
                .cloned()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>()
        );
        for (name, m) in &report.per_class {
            assert!(m.dice >= 0.95, "class {name} dice {}", m.dice);
            assert!(m.vol_similarity >= m.dice - 1e-12);
        }
    }

    #[test]
    fn voxel_analysis_degenerate_prediction() {
        // segmenter whose means force every pixel into class 0
        let seg = IntervalSegmenter { class_means: vec![0.0, 1e9], modality_id: 0 };
        let labels = LabelMap::new(vec![0, 0, 1, 1, 1, 1, 1, 1], 2, 4, 2).unwrap();
        let translated = ImageSlice {
            pixels: img(2, 4, vec![0.1; 8]),
            subject_id: "s".into(),
            modality_id: 0,
            slice_index: 0,
        };
        let report = voxel_analysis(&translated, &labels, &seg).unwrap();
        let c0 = &report.per_class[&labels.class_names[0]];
        // all-one-class prediction: dice = 2|c| / (|c| + HW)
        assert!((c0.dice - 2.0 * 2.0 / (2.0 + 8.0)).abs() < 1e-12);
        let c1 = &report.per_class[&labels.class_names[1]];
        assert_eq!(c1.dice, 0.0);
        assert!(!c0.absent_in_both && !c1.absent_in_both);
    }

    #[test]
    fn embeddings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let rows = vec![
            (vec![0.1, 0.2, 0.3], "s000".to_string(), "gm".to_string()),
            (vec![-0.5, 0.0, 1.25], "s001".to_string(), "wm".to_string()),
        ];
        export_embeddings(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "subject_id,class,f0,f1,f2");
        for (row, line) in rows.iter().zip(&lines[1..]) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], row.1);
            assert_eq!(cols[1], row.2);
            for (v, c) in row.0.iter().zip(&cols[2..]) {
                assert!((c.parse::<f64>().unwrap() - v).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn vs_dominates_dice(
            a in proptest::collection::vec(any::<bool>(), 16),
            b in proptest::collection::vec(any::<bool>(), 16),
        ) {
            let d = dice(&a, &b).unwrap();
            let v = vol_similarity(&a, &b).unwrap();
            prop_assert!(v >= d - 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
            // symmetry
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert_eq!(v, vol_similarity(&b, &a).unwrap());
        }
    }
}
