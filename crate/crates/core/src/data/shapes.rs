//! 3D Shapes style data: latent factors, a procedural renderer, the on-disk
//! array archive, and latent-swap ground-truth maps.
//!
//! The renderer reproduces the factor structure of the original dataset
//! (floor/wall/object hue, scale, shape, orientation) on a 64×64 RGB canvas.
//! It is used whenever the original archive is not available, and as the
//! lookup that turns a pair of latent combinations into a ground-truth map.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{hwc_to_chw, normalize_in_place, Image, ImageShape, Normalization};
use crate::error::{Error, Result};
use crate::par;

pub const SHAPE: ImageShape = ImageShape::new(64, 64, 3);

/// Cardinalities of (floor_hue, wall_hue, object_hue, scale, shape, orientation).
pub const FACTOR_SIZES: [u8; 6] = [10, 10, 10, 8, 4, 15];
pub const FACTOR_NAMES: [&str; 6] = ["floor_hue", "wall_hue", "object_hue", "scale", "shape", "orientation"];

/// Object-hue indices used as classes, in class order:
/// red (0.0), orange (0.1), dodger blue (0.6), green (0.3).
pub const TARGET_HUES: [u8; 4] = [0, 1, 6, 3];
pub const CLASS_NAMES: [&str; 4] = ["red", "orange", "dodger_blue", "green"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentSpec {
    pub floor_hue: u8,
    pub wall_hue: u8,
    pub object_hue: u8,
    pub scale: u8,
    pub shape: u8,
    pub orientation: u8,
}

impl LatentSpec {
    pub fn from_indices(idx: [u8; 6]) -> Result<Self> {
        for (i, (&v, &n)) in idx.iter().zip(&FACTOR_SIZES).enumerate() {
            if v >= n {
                return Err(Error::Contract(format!(
                    "{} index {v} out of range 0..{n}",
                    FACTOR_NAMES[i]
                )));
            }
        }
        Ok(Self {
            floor_hue: idx[0],
            wall_hue: idx[1],
            object_hue: idx[2],
            scale: idx[3],
            shape: idx[4],
            orientation: idx[5],
        })
    }

    pub fn indices(&self) -> [u8; 6] {
        [
            self.floor_hue,
            self.wall_hue,
            self.object_hue,
            self.scale,
            self.shape,
            self.orientation,
        ]
    }

    pub fn with_object_hue(mut self, hue: u8) -> Self {
        self.object_hue = hue;
        self
    }

    /// Class index of the object hue, if it is one of the target hues.
    pub fn class(&self) -> Option<usize> {
        TARGET_HUES.iter().position(|&h| h == self.object_hue)
    }

    pub fn id(&self) -> String {
        let i = self.indices();
        format!("shapes-{}{}{}-{}{}-{:02}", i[0], i[1], i[2], i[3], i[4], i[5])
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn hue(index: u8) -> f32 {
    index as f32 / 10.0
}

/// Object shading at canvas pixel (x, y), or `None` outside the silhouette.
fn object_shade(l: &LatentSpec, x: f32, y: f32) -> Option<f32> {
    let scale = 0.75 + 0.5 * l.scale as f32 / 7.0;
    let angle = -30.0 + 60.0 * l.orientation as f32 / 14.0;
    let s = 9.0 * scale;
    let cx = 32.0 + angle * 0.2;
    let base = 54.0;
    let light = |nx: f32| (0.78 + 0.22 * (-nx * 0.8 + 0.2)).clamp(0.5, 1.0);
    match l.shape {
        // Cube: front face, a side face whose width follows the orientation, and a top face.
        0 => {
            let side = s * (0.35 + 0.3 * (angle + 30.0) / 60.0);
            let (left, front_right, right) = (cx - s, cx + s - side, cx + s);
            let (top, bottom) = (base - 2.0 * s, base);
            let cap = s * 0.45;
            let front = x >= left && x < front_right && y >= top && y < bottom;
            let lift = (x - front_right) / side * cap;
            let side_face = x >= front_right && x < right && y >= top - lift && y < bottom - lift;
            let dy = top - y;
            let shift = dy / cap * side;
            let top_face = dy > 0.0 && dy <= cap && x >= left + shift && x < front_right + shift;
            if front {
                Some(0.92)
            } else if side_face {
                Some(0.68)
            } else if top_face {
                Some(1.0)
            } else {
                None
            }
        }
        // Cylinder: shaded body with an elliptical cap.
        1 => {
            let r = s;
            let (top, bottom) = (base - 2.2 * s, base);
            let nx = (x - cx) / r;
            if nx.abs() > 1.0 {
                return None;
            }
            let ry = 0.3 * r;
            let arc = ry * (1.0 - nx * nx).sqrt();
            let cap = nx * nx + ((y - top) / ry).powi(2) <= 1.0;
            if cap {
                Some(1.0)
            } else if y >= top && y <= bottom - ry + arc {
                Some(light(nx))
            } else {
                None
            }
        }
        // Sphere with Lambertian shading from the upper left.
        2 => {
            let r = 1.15 * s;
            let cy = base - r;
            let (nx, ny) = ((x - cx) / r, (y - cy) / r);
            let d2 = nx * nx + ny * ny;
            if d2 > 1.0 {
                return None;
            }
            let nz = (1.0 - d2).sqrt();
            let lam = -0.5 * nx - 0.45 * ny + 0.74 * nz;
            Some((0.45 + 0.55 * lam).clamp(0.4, 1.0))
        }
        // Capsule: a cylinder body with hemispherical ends.
        _ => {
            let r = 0.75 * s;
            let (top, bottom) = (base - 2.6 * s + r, base - r);
            let nx = (x - cx) / r;
            let inside_body = nx.abs() <= 1.0 && y >= top && y <= bottom;
            let inside_caps = [top, bottom].iter().any(|&cy| nx * nx + ((y - cy) / r).powi(2) <= 1.0);
            (inside_body || inside_caps).then(|| light(nx.clamp(-1.0, 1.0)))
        }
    }
}

/// Renders one scene to interleaved HWC u8 pixels.
pub fn render(l: &LatentSpec) -> Vec<u8> {
    let (h, w) = (SHAPE.height, SHAPE.width);
    let angle = -30.0 + 60.0 * l.orientation as f32 / 14.0;
    let tilt = (angle.to_radians()).tan() * 0.35;
    let wall = hsv_to_rgb(hue(l.wall_hue), 0.8, 0.9);
    let floor = hsv_to_rgb(hue(l.floor_hue), 0.8, 0.9);
    let object = hsv_to_rgb(hue(l.object_hue), 1.0, 1.0);
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let horizon = 36.0 + (fx - 32.0) * tilt;
            let rgb = if let Some(shade) = object_shade(l, fx, fy) {
                object.map(|c| c * shade)
            } else if fy < horizon {
                let v = 0.82 + 0.18 * (fy / horizon);
                wall.map(|c| c * v)
            } else {
                let v = 0.7 + 0.3 * ((fy - horizon) / (h as f32 - horizon)).clamp(0.0, 1.0);
                floor.map(|c| c * v)
            };
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out[o + c] = (rgb[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Renders and normalizes a scene into a channel-major image.
pub fn render_image(l: &LatentSpec, mode: Normalization) -> Image {
    let raw = render(l);
    let mut chw = vec![0u8; SHAPE.len()];
    hwc_to_chw(SHAPE, &raw, &mut chw);
    let mut px: Vec<f32> = chw.into_iter().map(f32::from).collect();
    normalize_in_place(SHAPE, &mut px, mode);
    Image::new(SHAPE, px).expect("renderer produces finite pixels")
}

/// Anything that can produce the (normalized) image for a latent combination.
pub trait LatentLookup {
    fn lookup(&self, latents: &LatentSpec) -> Result<Image>;
}

#[derive(Debug, Clone, Copy)]
pub struct Renderer {
    pub normalization: Normalization,
}

impl Default for Renderer {
    fn default() -> Self {
        Self {
            normalization: Normalization::ChannelMinMax,
        }
    }
}

impl LatentLookup for Renderer {
    fn lookup(&self, latents: &LatentSpec) -> Result<Image> {
        Ok(render_image(latents, self.normalization))
    }
}

/// Where a ground-truth effect map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtProvenance {
    LatentSwap,
    LongitudinalDiff,
    SyntheticLesion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub values: Image,
    pub provenance: GtProvenance,
}

/// Ground-truth map for changing only the object hue: `image(tgt) − image(src)`.
pub fn synthesize_gt_map(
    lookup: &(impl LatentLookup + ?Sized),
    src: &LatentSpec,
    tgt: &LatentSpec,
) -> Result<GroundTruthMap> {
    let (a, b) = (src.indices(), tgt.indices());
    for i in (0..6).filter(|&i| i != 2) {
        if a[i] != b[i] {
            return Err(Error::Contract(format!(
                "latents differ in `{}` ({} vs {}); only object_hue may change",
                FACTOR_NAMES[i], a[i], b[i]
            )));
        }
    }
    let source = lookup.lookup(src)?;
    let target = lookup.lookup(tgt)?;
    Ok(GroundTruthMap {
        values: target.sub(&source)?,
        provenance: GtProvenance::LatentSwap,
    })
}

/// Every latent combination whose object hue is one of the target hues.
pub fn filtered_latents() -> Vec<LatentSpec> {
    let mut out = Vec::with_capacity(10 * 10 * 4 * 8 * 4 * 15);
    for floor in 0..10 {
        for wall in 0..10 {
            for &obj in &TARGET_HUES {
                for scale in 0..8 {
                    for shape in 0..4 {
                        for orient in 0..15 {
                            out.push(LatentSpec {
                                floor_hue: floor,
                                wall_hue: wall,
                                object_hue: obj,
                                scale,
                                shape,
                                orientation: orient,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Draws `n` latent combinations stratified by target hue (n / 4 per class).
pub fn stratified_latents(n: usize, seed: u64) -> Vec<LatentSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = filtered_latents();
    let mut by_class: Vec<Vec<LatentSpec>> = vec![Vec::new(); TARGET_HUES.len()];
    for l in all {
        by_class[l.class().expect("filtered")].push(l);
    }
    let per_class = n / TARGET_HUES.len();
    let mut out = Vec::with_capacity(n);
    for mut group in by_class {
        group.shuffle(&mut rng);
        out.extend(group.into_iter().take(per_class));
    }
    out.shuffle(&mut rng);
    out
}

/// Renders a set of latents into one HWC u8 buffer (in parallel when enabled).
pub fn render_many(latents: &[LatentSpec]) -> Vec<u8> {
    let per = SHAPE.len();
    let mut buf = vec![0u8; latents.len() * per];
    par::for_each_chunk_mut(&mut buf, per, |i, chunk| {
        chunk.copy_from_slice(&render(&latents[i]));
    });
    buf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDtype {
    Float32,
    Uint8,
}

/// JSON manifest describing an array archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub images: String,
    pub labels: String,
    pub latents: String,
    pub dtype: ArrayDtype,
    pub shape: [usize; 4],
}

pub const MANIFEST: &str = "manifest.json";

/// Writes rendered scenes as an array archive: HWC images, u8 object-hue
/// labels, and u8 latent indices (N × 6).
pub fn write_archive(dir: &Path, latents: &[LatentSpec]) -> Result<ArchiveManifest> {
    fs::create_dir_all(dir)?;
    let images = render_many(latents);
    let labels: Vec<u8> = latents.iter().map(|l| l.object_hue).collect();
    let lat: Vec<u8> = latents.iter().flat_map(|l| l.indices()).collect();
    let manifest = ArchiveManifest {
        images: "images.bin".into(),
        labels: "labels.bin".into(),
        latents: "latents.bin".into(),
        dtype: ArrayDtype::Uint8,
        shape: [latents.len(), SHAPE.height, SHAPE.width, SHAPE.channels],
    };
    fs::write(dir.join(&manifest.images), images)?;
    fs::write(dir.join(&manifest.labels), labels)?;
    fs::write(dir.join(&manifest.latents), lat)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Raw contents of an archive: pixels are channel-major per image.
#[derive(Debug, Clone)]
pub struct ShapesArchive {
    pub shape: ImageShape,
    pub pixels: RawPixels,
    pub object_hues: Vec<u8>,
    pub latents: Vec<LatentSpec>,
}

#[derive(Debug, Clone)]
pub enum RawPixels {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

pub fn read_archive(dir: &Path, expected: ImageShape) -> Result<ShapesArchive> {
    let mpath = dir.join(MANIFEST);
    let manifest: ArchiveManifest = serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::load(&mpath, e))?)
        .map_err(|e| Error::format(mpath.display().to_string(), e.to_string()))?;
    let [n, h, w, c] = manifest.shape;
    let shape = ImageShape::new(h, w, c);
    if shape != expected {
        return Err(Error::Shape {
            expected: vec![expected.height as i64, expected.width as i64, expected.channels as i64],
            actual: vec![h as i64, w as i64, c as i64],
        });
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::load(&p, e))
    };
    let img_bytes = read(&manifest.images)?;
    let elem = match manifest.dtype {
        ArrayDtype::Uint8 => 1,
        ArrayDtype::Float32 => 4,
    };
    if img_bytes.len() != n * shape.len() * elem {
        return Err(Error::format(
            &manifest.images,
            format!("{} bytes, manifest implies {}", img_bytes.len(), n * shape.len() * elem),
        ));
    }
    let per = shape.len();
    let pixels = match manifest.dtype {
        ArrayDtype::Uint8 => {
            let mut chw = vec![0u8; img_bytes.len()];
            par::for_each_chunk_mut(&mut chw, per, |i, out| {
                hwc_to_chw(shape, &img_bytes[i * per..(i + 1) * per], out)
            });
            RawPixels::U8(chw)
        }
        ArrayDtype::Float32 => {
            let hwc: Vec<f32> = img_bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let mut chw = vec![0f32; hwc.len()];
            par::for_each_chunk_mut(&mut chw, per, |i, out| {
                hwc_to_chw(shape, &hwc[i * per..(i + 1) * per], out)
            });
            RawPixels::F32(chw)
        }
    };
    let object_hues = read(&manifest.labels)?;
    if object_hues.len() != n {
        return Err(Error::format(
            &manifest.labels,
            format!("{} labels for {n} images", object_hues.len()),
        ));
    }
    let lat = read(&manifest.latents)?;
    if lat.len() != n * 6 {
        return Err(Error::format(
            &manifest.latents,
            format!("{} bytes, expected {}", lat.len(), n * 6),
        ));
    }
    let latents = lat
        .chunks_exact(6)
        .map(|c| LatentSpec::from_indices([c[0], c[1], c[2], c[3], c[4], c[5]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapesArchive {
        shape,
        pixels,
        object_hues,
        latents,
    })
}

/// Lookup backed by an archive's own images.
pub struct ArchiveLookup<'a> {
    archive: &'a ShapesArchive,
    index: HashMap<LatentSpec, usize>,
    normalization: Normalization,
}

impl<'a> ArchiveLookup<'a> {
    pub fn new(archive: &'a ShapesArchive, normalization: Normalization) -> Self {
        let index = archive.latents.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        Self {
            archive,
            index,
            normalization,
        }
    }
}

impl LatentLookup for ArchiveLookup<'_> {
    fn lookup(&self, latents: &LatentSpec) -> Result<Image> {
        let i = *self
            .index
            .get(latents)
            .ok_or_else(|| Error::Lookup(format!("no image for latents {}", latents.id())))?;
        let per = self.archive.shape.len();
        let mut px: Vec<f32> = match &self.archive.pixels {
            RawPixels::U8(v) => v[i * per..(i + 1) * per].iter().map(|&b| b as f32).collect(),
            RawPixels::F32(v) => v[i * per..(i + 1) * per].to_vec(),
        };
        normalize_in_place(self.archive.shape, &mut px, self.normalization);
        Image::new(self.archive.shape, px)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_cylinder() -> LatentSpec {
        LatentSpec::from_indices([5, 8, 0, 4, 1, 7]).unwrap()
    }

    #[test]
    fn identical_latents_give_zero_map() {
        let l = red_cylinder();
        let gt = synthesize_gt_map(&Renderer::default(), &l, &l).unwrap();
        assert!(gt.values.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn red_to_green_signs_on_object_pixels() {
        // Raw (unnormalized) renderer output isolates the hue change.
        let src = red_cylinder();
        let tgt = src.with_object_hue(3);
        let (a, b) = (render(&src), render(&tgt));
        let mut object_pixels = 0;
        for y in 0..64 {
            for x in 0..64 {
                if object_shade(&src, x as f32 + 0.5, y as f32 + 0.5).is_none() {
                    continue;
                }
                object_pixels += 1;
                let o = (y * 64 + x) * 3;
                let dr = b[o] as i32 - a[o] as i32;
                let dg = b[o + 1] as i32 - a[o + 1] as i32;
                assert!(dr < 0, "red channel should drop at ({x},{y})");
                assert!(dg > 0, "green channel should rise at ({x},{y})");
            }
        }
        assert!(object_pixels > 100);
        // Background is untouched.
        assert_eq!(a[0..3], b[0..3]);
    }

    #[test]
    fn gt_map_round_trip() {
        let r = Renderer::default();
        let src = red_cylinder();
        let tgt = src.with_object_hue(6);
        let gt = synthesize_gt_map(&r, &src, &tgt).unwrap();
        let (s, t) = (r.lookup(&src).unwrap(), r.lookup(&tgt).unwrap());
        let back = s.add(&gt.values).unwrap();
        for (x, y) in back.pixels().iter().zip(t.pixels()) {
            assert!((x - y).abs() <= f32::EPSILON, "{x} vs {y}");
        }
    }

    #[test]
    fn non_hue_difference_is_rejected() {
        let src = red_cylinder();
        let mut tgt = src.with_object_hue(3);
        tgt.scale = 0;
        let err = synthesize_gt_map(&Renderer::default(), &src, &tgt).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn every_shape_renders_a_visible_object() {
        for shape in 0..4 {
            for scale in [0, 7] {
                let l = LatentSpec::from_indices([0, 0, 0, scale, shape, 7]).unwrap();
                let n = (0..64 * 64)
                    .filter(|i| object_shade(&l, (i % 64) as f32 + 0.5, (i / 64) as f32 + 0.5).is_some())
                    .count();
                assert!(n > 80, "shape {shape} scale {scale} covers {n} px");
            }
        }
    }

    #[test]
    fn stratified_sampling_is_balanced_and_deterministic() {
        let a = stratified_latents(400, 3);
        let b = stratified_latents(400, 3);
        assert_eq!(a, b);
        let mut counts = [0; 4];
        for l in &a {
            counts[l.class().unwrap()] += 1;
        }
        assert_eq!(counts, [100; 4]);
        assert_eq!(filtered_latents().len(), 192_000);
    }

    #[test]
    fn archive_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let lat = stratified_latents(12, 1);
        write_archive(dir.path(), &lat).unwrap();
        let arch = read_archive(dir.path(), SHAPE).unwrap();
        assert_eq!(arch.latents, lat);
        let lookup = ArchiveLookup::new(&arch, Normalization::ChannelMinMax);
        let img = lookup.lookup(&lat[5]).unwrap();
        assert_eq!(img, render_image(&lat[5], Normalization::ChannelMinMax));
        assert!(matches!(
            read_archive(dir.path(), ImageShape::new(28, 28, 1)),
            Err(Error::Shape { .. })
        ));
    }
}
