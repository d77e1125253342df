//! Inference-time counterfactual maps: single, interpolated and all-target
//! batch generation, plus raw/PNG export.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::{normalize, Image, ImageShape, LabeledImageBatch, Normalization};
use crate::error::{Error, Result};
use crate::networks::{BinModel, TargetCondition};

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualMap {
    pub values: Image,
    pub source_id: String,
    pub condition: TargetCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub map: CounterfactualMap,
    pub synthesized: Image,
    pub logits_before: TargetCondition,
    pub logits_after: TargetCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub l1: f64,
    pub l2: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Fraction of strictly positive entries.
    pub positive_fraction: f64,
}

impl MapStats {
    pub fn of(values: &[f32]) -> Self {
        let n = values.len().max(1) as f64;
        let mut s = MapStats {
            l1: 0.0,
            l2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            positive_fraction: 0.0,
        };
        for &v in values {
            let v = v as f64;
            s.l1 += v.abs();
            s.l2 += v * v;
            s.min = s.min.min(v);
            s.max = s.max.max(v);
            s.mean += v;
            if v > 0.0 {
                s.positive_fraction += 1.0;
            }
        }
        s.l2 = s.l2.sqrt();
        s.mean /= n;
        s.positive_fraction /= n;
        s
    }
}

impl CounterfactualResult {
    pub fn map_stats(&self) -> MapStats {
        MapStats::of(self.map.values.pixels())
    }
}

fn check_condition(model: &BinModel, y: &TargetCondition) -> Result<()> {
    if y.len() != model.num_classes() {
        return Err(Error::Condition(format!(
            "condition has {} entries, model has {} classes",
            y.len(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn check_image(model: &BinModel, x: &Image) -> Result<()> {
    let s = x.shape();
    let want = model.input_shape();
    if [s.channels as i64, s.height as i64, s.width as i64] != want {
        return Err(Error::Shape {
            expected: want.to_vec(),
            actual: vec![s.channels as i64, s.height as i64, s.width as i64],
        });
    }
    Ok(())
}

fn stack(images: &[&Image]) -> Tensor {
    let shape = images[0].shape();
    let flat: Vec<f32> = images.iter().flat_map(|im| im.pixels().iter().copied()).collect();
    Tensor::from_slice(&flat).view(shape.nchw(images.len()))
}

fn rows_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(Vec::<f32>::try_from(
        t.to_kind(Kind::Float).contiguous().flatten(0, -1),
    )?)
}

/// Generates counterfactuals for aligned `(image, condition)` pairs in one
/// forward pass. The stored map is `x̃ − x` as computed in f32, so the
/// identity `synthesized − source == map` holds exactly.
pub fn generate_pairs(
    model: &BinModel,
    pairs: &[(&Image, &str, &TargetCondition)],
) -> Result<Vec<CounterfactualResult>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    for (x, _, y) in pairs {
        check_image(model, x)?;
        check_condition(model, y)?;
    }
    let shape = pairs[0].0.shape();
    let per = shape.len();
    let images: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
    let conds: Vec<TargetCondition> = pairs.iter().map(|p| p.2.clone()).collect();
    let (maps, before) = tch::no_grad(|| -> Result<(Vec<f32>, Tensor)> {
        let x = model.to_input(&stack(&images));
        let feats = model.encode_for_generator(&x, false)?;
        let m = model.generate_map(&feats, &TargetCondition::batch_tensor(&conds, model.kind), false)?;
        Ok((rows_f32(&m)?, model.classify(&x)?))
    })?;
    let mut synth = Vec::with_capacity(maps.len());
    let mut effective = Vec::with_capacity(maps.len());
    for (i, m) in maps.chunks(per).enumerate() {
        for (&a, &d) in images[i].pixels().iter().zip(m) {
            let s = a + d;
            synth.push(s);
            effective.push(s - a);
        }
    }
    let after =
        tch::no_grad(|| model.classify(&model.to_input(&Tensor::from_slice(&synth).view(shape.nchw(pairs.len())))))?;
    let before = TargetCondition::from_rows(&before);
    let after = TargetCondition::from_rows(&after);
    pairs
        .iter()
        .enumerate()
        .map(|(i, (_, id, y))| {
            let r = i * per..(i + 1) * per;
            Ok(CounterfactualResult {
                map: CounterfactualMap {
                    values: Image::new(shape, effective[r.clone()].to_vec())?,
                    source_id: id.to_string(),
                    condition: (*y).clone(),
                },
                synthesized: Image::new(shape, synth[r].to_vec())?,
                logits_before: before[i].clone(),
                logits_after: after[i].clone(),
            })
        })
        .collect()
}

/// Classifier argmax for each image (inference mode).
pub fn predict(model: &BinModel, images: &[&Image]) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    for x in images {
        check_image(model, x)?;
    }
    let p = tch::no_grad(|| model.classify(&model.to_input(&stack(images))))?;
    Ok(Vec::<i64>::try_from(p.argmax(-1, false))?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

/// `x̃ = x + G(E(x), y)` with posteriors before and after.
pub fn generate(model: &BinModel, x: &Image, source_id: &str, y: &TargetCondition) -> Result<CounterfactualResult> {
    Ok(generate_pairs(model, &[(x, source_id, y)])?.remove(0))
}

/// Results along `y(α) = (1−α)·y_a + α·y_b`, α evenly spaced in [0, 1].
/// Each step runs as its own single-sample call so the endpoints equal plain
/// [`generate`] outputs bit for bit.
pub fn interpolate(
    model: &BinModel,
    x: &Image,
    source_id: &str,
    y_a: &TargetCondition,
    y_b: &TargetCondition,
    steps: usize,
) -> Result<Vec<CounterfactualResult>> {
    if steps < 2 {
        return Err(Error::Contract(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    check_condition(model, y_a)?;
    check_condition(model, y_b)?;
    (0..steps)
        .map(|i| {
            let alpha = if i == steps - 1 {
                1.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            generate(model, x, source_id, &TargetCondition::lerp(y_a, y_b, alpha)?)
        })
        .collect()
}

/// All `K` one-hot targets for every image: `out[b][k]`. Images are processed
/// `chunk` at a time (each chunk runs `chunk·K` rows through the generator).
pub fn batch_generate(
    model: &BinModel,
    batch: &LabeledImageBatch,
    chunk: usize,
) -> Result<Vec<Vec<CounterfactualResult>>> {
    let k = model.num_classes();
    let targets: Vec<TargetCondition> = (0..k).map(|c| TargetCondition::one_hot(c, k)).collect::<Result<_>>()?;
    let images: Vec<Image> = (0..batch.len()).map(|i| batch.image(i)).collect();
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(images.len());
        let pairs: Vec<(&Image, &str, &TargetCondition)> = (start..end)
            .flat_map(|i| targets.iter().map(move |t| (i, t)))
            .map(|(i, t)| (&images[i], batch.source_ids[i].as_str(), t))
            .collect();
        let mut res = generate_pairs(model, &pairs)?.into_iter();
        for _ in start..end {
            out.push(res.by_ref().take(k).collect());
        }
    }
    Ok(out)
}

/// Sidecar written next to a raw map blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    /// `[C, H, W]`; the blob is little-endian float32 in this order.
    pub shape: [usize; 3],
    pub dtype: String,
    pub source_id: String,
    pub condition: TargetCondition,
    pub logits_before: TargetCondition,
    pub logits_after: TargetCondition,
    pub map_stats: MapStats,
}

impl MapSidecar {
    pub fn of(r: &CounterfactualResult) -> Self {
        let s = r.map.values.shape();
        Self {
            shape: [s.channels, s.height, s.width],
            dtype: "float32-le".into(),
            source_id: r.map.source_id.clone(),
            condition: r.map.condition.clone(),
            logits_before: r.logits_before.clone(),
            logits_after: r.logits_after.clone(),
            map_stats: r.map_stats(),
        }
    }
}

pub fn f32_blob(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_blob(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            "map blob",
            format!("{} bytes is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_png(shape: ImageShape, rgb_or_gray: Vec<u8>, color: bool) -> Result<Vec<u8>> {
    let (w, h) = (shape.width as u32, shape.height as u32);
    let mut buf = Cursor::new(Vec::new());
    if color {
        image::RgbImage::from_raw(w, h, rgb_or_gray)
            .ok_or_else(|| Error::format("png", "buffer size"))?
            .write_to(&mut buf, image::ImageFormat::Png)?;
    } else {
        image::GrayImage::from_raw(w, h, rgb_or_gray)
            .ok_or_else(|| Error::format("png", "buffer size"))?
            .write_to(&mut buf, image::ImageFormat::Png)?;
    }
    Ok(buf.into_inner())
}

/// PNG of an image with values clamped to [0, 1]. One channel → grayscale,
/// three → RGB; other channel counts show the channel mean.
pub fn image_png(img: &Image) -> Result<Vec<u8>> {
    let s = img.shape();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match s.channels {
        3 => encode_png(s, img.to_hwc().into_iter().map(q).collect(), true),
        1 => encode_png(s, img.pixels().iter().map(|&v| q(v)).collect(), false),
        _ => encode_png(s, channel_mean(img).into_iter().map(q).collect(), false),
    }
}

fn channel_mean(img: &Image) -> Vec<f32> {
    let s = img.shape();
    let mut out = vec![0.0; s.plane()];
    for c in 0..s.channels {
        for (o, v) in out.iter_mut().zip(img.channel(c)) {
            *o += v / s.channels as f32;
        }
    }
    out
}

/// Decodes a PNG into a normalized image of the given geometry (grayscale
/// for one channel, RGB for three).
pub fn image_from_png(bytes: &[u8], shape: ImageShape, mode: Normalization) -> Result<Image> {
    let img = image::load_from_memory(bytes)?;
    if (img.width() as usize, img.height() as usize) != (shape.width, shape.height) {
        return Err(Error::Shape {
            expected: vec![shape.height as i64, shape.width as i64],
            actual: vec![img.height() as i64, img.width() as i64],
        });
    }
    let hwc: Vec<f32> = match shape.channels {
        1 => img.to_luma8().into_raw().into_iter().map(f32::from).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(f32::from).collect(),
        c => return Err(Error::Contract(format!("cannot decode a PNG into {c} channels"))),
    };
    Ok(normalize(&Image::from_hwc(shape, &hwc)?, mode))
}

/// Blue-white-red colour for `t ∈ [−1, 1]`.
pub fn diverging(t: f32) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let fade = |a: f32| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Diverging-colormap PNG of a map (channel mean), scaled symmetrically to
/// ±max|map| so white is exactly zero.
pub fn map_png(map: &Image) -> Result<Vec<u8>> {
    let m = channel_mean(map);
    let scale = m.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    let rgb = m
        .iter()
        .flat_map(|&v| diverging(if scale > 0.0 { v / scale } else { 0.0 }))
        .collect();
    encode_png(map.shape(), rgb, true)
}

/// Writes `<stem>.map.f32`, `<stem>.map.json`, `<stem>.map.png` and
/// `<stem>.png` (synthesized, clamped) into `dir`.
pub fn export(dir: &Path, stem: &str, r: &CounterfactualResult) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (format!("{stem}.map.f32"), f32_blob(r.map.values.pixels())),
        (
            format!("{stem}.map.json"),
            serde_json::to_vec_pretty(&MapSidecar::of(r))?,
        ),
        (format!("{stem}.map.png"), map_png(&r.map.values)?),
        (format!("{stem}.png"), image_png(&r.synthesized)?),
    ];
    let mut out = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        std::fs::write(&p, bytes)?;
        out.push(p);
    }
    Ok(out)
}
