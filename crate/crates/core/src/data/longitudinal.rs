//! Synthetic longitudinal subjects: a baseline scan plus later stages that
//! each add a growing, localized lesion. The lesion images are kept as
//! ground truth for difference-based effect maps.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, ImageShape};
use super::shapes::{GroundTruthMap, GtProvenance};
use crate::error::{Error, Result};
use crate::par;

pub const SHAPE: ImageShape = ImageShape::new(64, 64, 1);

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub label: String,
    pub image: Image,
    /// Additive change relative to the baseline stage (zero for the baseline).
    pub lesion: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub subject_id: String,
    pub stages: Vec<Stage>,
}

impl LongitudinalRecord {
    pub fn new(subject_id: impl Into<String>, stages: Vec<Stage>) -> Result<Self> {
        if stages.len() < 2 {
            return Err(Error::Contract(
                "a longitudinal record needs at least two stages".into(),
            ));
        }
        let shape = stages[0].image.shape();
        if stages.iter().any(|s| s.image.shape() != shape) {
            return Err(Error::Contract("all stage images must share one shape".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            stages,
        })
    }

    pub fn stage(&self, label: &str) -> Result<&Stage> {
        self.stages
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| Error::Lookup(format!("subject {} has no stage `{label}`", self.subject_id)))
    }
}

/// Target-stage image minus baseline-stage image.
pub fn normal_target_map(
    record: &LongitudinalRecord,
    baseline_stage: &str,
    target_stage: &str,
) -> Result<GroundTruthMap> {
    let base = record.stage(baseline_stage)?;
    let target = record.stage(target_stage)?;
    Ok(GroundTruthMap {
        values: target.image.sub(&base.image)?,
        provenance: GtProvenance::LongitudinalDiff,
    })
}

fn baseline_scan(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (SHAPE.height, SHAPE.width);
    let (ax, ay) = (rng.random_range(22.0..27.0f32), rng.random_range(26.0..30.0f32));
    let (fa, fb) = (rng.random_range(0.2..0.5f32), rng.random_range(0.2..0.5f32));
    let (pa, pb) = (rng.random_range(0.0..6.28f32), rng.random_range(0.0..6.28f32));
    let mut px = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 + 0.5 - 32.0, y as f32 + 0.5 - 32.0);
            let r = (dx / ax).powi(2) + (dy / ay).powi(2);
            if r > 1.0 {
                continue;
            }
            let texture = 0.12 * (dx * fa + pa).sin() * (dy * fb + pb).cos();
            // Dark central ventricle.
            let v = ((dx / 5.0).powi(2) + (dy / 9.0).powi(2)).min(1.0);
            px[y * w + x] = (0.55 + texture) * (0.35 + 0.65 * v);
        }
    }
    px
}

/// Builds `n_subjects` records with the given stage labels (first = baseline).
///
/// Each later stage darkens a Gaussian region around a subject-specific
/// centre; width and depth grow with the stage index, so the lesion L1 norm
/// increases strictly from stage to stage.
pub fn make_synthetic_longitudinal(
    seed: u64,
    n_subjects: usize,
    stage_labels: &[&str],
) -> Result<Vec<LongitudinalRecord>> {
    if stage_labels.len() < 2 {
        return Err(Error::Contract("need at least two stages".into()));
    }
    let (h, w) = (SHAPE.height, SHAPE.width);
    par::map_indexed(n_subjects, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(s as u64 + 1)));
        let base = baseline_scan(&mut rng);
        let (cx, cy) = (rng.random_range(22.0..42.0f32), rng.random_range(20.0..44.0f32));
        let mut stages = Vec::with_capacity(stage_labels.len());
        for (k, label) in stage_labels.iter().enumerate() {
            let mut img = base.clone();
            if k > 0 {
                let sigma = 2.0 + 1.5 * k as f32;
                let depth = 0.12 + 0.08 * k as f32;
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        if g > 1e-3 && base[y * w + x] > 0.0 {
                            let v = &mut img[y * w + x];
                            *v = (*v - depth * g).max(0.0);
                        }
                    }
                }
            }
            let lesion: Vec<f32> = img.iter().zip(&base).map(|(a, b)| a - b).collect();
            stages.push(Stage {
                label: label.to_string(),
                image: Image::new(SHAPE, img)?,
                lesion: Image::new(SHAPE, lesion)?,
            });
        }
        LongitudinalRecord::new(format!("subject-{s:03}"), stages)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageEntry {
    stage: String,
    image: String,
    lesion: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthFile {
    subject_id: String,
    /// Shape header for the raw lesion blobs: [height, width, channels].
    shape: [usize; 3],
    dtype: String,
    stages: Vec<StageEntry>,
}

pub const GROUND_TRUTH: &str = "ground_truth.json";

/// Writes one directory per subject: 16-bit PNG per stage, raw little-endian
/// f32 lesion blobs, and `ground_truth.json`.
pub fn write_records(dir: &Path, records: &[LongitudinalRecord]) -> Result<()> {
    for rec in records {
        let sdir = dir.join(&rec.subject_id);
        fs::create_dir_all(&sdir)?;
        let shape = rec.stages[0].image.shape();
        let mut entries = Vec::new();
        for st in &rec.stages {
            let png = format!("{}.png", st.label);
            let blob = format!("{}.lesion.f32", st.label);
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
                shape.width as u32,
                shape.height as u32,
                st.image
                    .pixels()
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                    .collect(),
            )
            .expect("buffer sized from shape");
            buf.save(sdir.join(&png))?;
            let raw: Vec<u8> = st.lesion.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(sdir.join(&blob), raw)?;
            entries.push(StageEntry {
                stage: st.label.clone(),
                image: png,
                lesion: blob,
            });
        }
        let gt = GroundTruthFile {
            subject_id: rec.subject_id.clone(),
            shape: shape.as_hwc(),
            dtype: "float32-le".into(),
            stages: entries,
        };
        fs::write(sdir.join(GROUND_TRUTH), serde_json::to_vec_pretty(&gt)?)?;
    }
    Ok(())
}

pub fn read_record(subject_dir: &Path) -> Result<LongitudinalRecord> {
    let gpath = subject_dir.join(GROUND_TRUTH);
    let gt: GroundTruthFile = serde_json::from_slice(&fs::read(&gpath).map_err(|e| Error::load(&gpath, e))?)?;
    let [h, w, c] = gt.shape;
    let shape = ImageShape::new(h, w, c);
    let mut stages = Vec::new();
    for e in gt.stages {
        let ipath = subject_dir.join(&e.image);
        let img = image::open(&ipath)?.into_luma16();
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::format(
                ipath.display().to_string(),
                "image size disagrees with shape header",
            ));
        }
        let px = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        let lpath = subject_dir.join(&e.lesion);
        let raw = fs::read(&lpath).map_err(|err| Error::load(&lpath, err))?;
        if raw.len() != shape.len() * 4 {
            return Err(Error::format(
                lpath.display().to_string(),
                format!("{} bytes, expected {}", raw.len(), shape.len() * 4),
            ));
        }
        let lesion = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        stages.push(Stage {
            label: e.stage,
            image: Image::new(shape, px)?,
            lesion: Image::new(shape, lesion)?,
        });
    }
    LongitudinalRecord::new(gt.subject_id, stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAGES: [&str; 3] = ["baseline", "mid", "late"];

    #[test]
    fn twelve_subjects_deterministic() {
        let a = make_synthetic_longitudinal(7, 12, &STAGES).unwrap();
        let b = make_synthetic_longitudinal(7, 12, &STAGES).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let c = make_synthetic_longitudinal(8, 12, &STAGES).unwrap();
        assert_ne!(a[0].stages[1].lesion, c[0].stages[1].lesion);
    }

    #[test]
    fn lesion_norm_strictly_increases() {
        for rec in make_synthetic_longitudinal(1, 12, &STAGES).unwrap() {
            let norms: Vec<f64> = rec.stages.iter().map(|s| s.lesion.l1_norm()).collect();
            assert_eq!(norms[0], 0.0);
            assert!(norms.windows(2).all(|w| w[1] > w[0]), "{norms:?}");
        }
    }

    #[test]
    fn normal_target_map_cases() {
        let recs = make_synthetic_longitudinal(2, 3, &STAGES).unwrap();
        let rec = &recs[0];
        let same = normal_target_map(rec, "baseline", "baseline").unwrap();
        assert!(same.values.pixels().iter().all(|&v| v == 0.0));

        let mid = normal_target_map(rec, "baseline", "mid").unwrap();
        for (m, l) in mid.values.pixels().iter().zip(rec.stages[1].lesion.pixels()) {
            assert!((m - l).abs() < 1e-6);
        }
        let late = normal_target_map(rec, "baseline", "late").unwrap();
        assert_ne!(mid.values, late.values);
        assert!(late.values.l1_norm() > mid.values.l1_norm());

        assert!(matches!(
            normal_target_map(rec, "baseline", "nope"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn needs_two_stages() {
        assert!(make_synthetic_longitudinal(0, 1, &["only"]).is_err());
    }

    #[test]
    fn persisted_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = make_synthetic_longitudinal(4, 2, &STAGES).unwrap();
        write_records(dir.path(), &recs).unwrap();
        let back = read_record(&dir.path().join(&recs[1].subject_id)).unwrap();
        assert_eq!(back.subject_id, recs[1].subject_id);
        for (a, b) in back.stages.iter().zip(&recs[1].stages) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.lesion, b.lesion);
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
                assert!((x - y).abs() <= 1.0 / 65535.0);
            }
        }
    }
}
