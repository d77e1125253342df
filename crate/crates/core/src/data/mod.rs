//! Dataset loading, normalization, splitting and batching.

pub mod image;
pub mod longitudinal;
pub mod mnist;
pub mod shapes;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

pub use self::image::{normalize, Image, ImageShape, Normalization};
use self::shapes::{LatentSpec, RawPixels};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Shapes3d,
}

/// Where the data lives and how it is shaped, normalized and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub normalization: Normalization,
    /// `(train, val, test)` fractions; `None` keeps the split shipped with the data.
    #[serde(default)]
    pub split_ratios: Option<[f64; 3]>,
    /// Stratified subsample size (3D Shapes only).
    #[serde(default)]
    pub subset: Option<usize>,
    /// Render the 3D Shapes subset procedurally instead of reading an archive.
    #[serde(default)]
    pub procedural: bool,
}

impl DatasetDescriptor {
    pub fn mnist(root: impl Into<PathBuf>) -> Self {
        Self {
            name: "mnist".into(),
            kind: DatasetKind::Mnist,
            root: root.into(),
            image_shape: ImageShape::new(28, 28, 1),
            num_classes: 10,
            normalization: Normalization::MinMax,
            split_ratios: None,
            subset: None,
            procedural: false,
        }
    }

    pub fn shapes3d(root: impl Into<PathBuf>) -> Self {
        Self {
            name: "3dshapes".into(),
            kind: DatasetKind::Shapes3d,
            root: root.into(),
            image_shape: shapes::SHAPE,
            num_classes: shapes::TARGET_HUES.len(),
            normalization: Normalization::ChannelMinMax,
            split_ratios: Some([0.8, 0.1, 0.1]),
            subset: Some(40_000),
            procedural: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if let Some(r) = self.split_ratios {
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios {r:?} must be in [0,1] and sum to 1"
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.kind {
            DatasetKind::Mnist => (0..self.num_classes).map(|d| d.to_string()).collect(),
            DatasetKind::Shapes3d => shapes::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Train,
    Test,
}

/// All samples of one dataset, pixels kept raw and normalized on demand.
#[derive(Debug)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    raw: RawPixels,
    labels: Vec<usize>,
    ids: Vec<String>,
    latents: Option<Vec<LatentSpec>>,
    origin: Vec<Origin>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn source_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn latents(&self, i: usize) -> Option<&LatentSpec> {
        self.latents.as_ref().map(|l| &l[i])
    }

    pub fn index_of(&self, source_id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == source_id)
    }

    fn fill_normalized(&self, i: usize, out: &mut [f32]) {
        let per = self.descriptor.image_shape.len();
        match &self.raw {
            RawPixels::U8(v) => {
                for (o, &b) in out.iter_mut().zip(&v[i * per..(i + 1) * per]) {
                    *o = b as f32;
                }
            }
            RawPixels::F32(v) => out.copy_from_slice(&v[i * per..(i + 1) * per]),
        }
        image::normalize_in_place(self.descriptor.image_shape, out, self.descriptor.normalization);
    }

    pub fn image(&self, i: usize) -> Image {
        let mut px = vec![0.0; self.descriptor.image_shape.len()];
        self.fill_normalized(i, &mut px);
        Image::new(self.descriptor.image_shape, px).expect("normalized pixels are finite")
    }

    /// Builds a dataset from in-memory channel-major u8 pixels.
    pub fn from_u8(
        descriptor: DatasetDescriptor,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        ids: Vec<String>,
        latents: Option<Vec<LatentSpec>>,
    ) -> Result<Self> {
        let per = descriptor.image_shape.len();
        if pixels.len() != labels.len() * per || ids.len() != labels.len() {
            return Err(Error::format(
                &descriptor.name,
                "pixels, labels and ids disagree in length",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= descriptor.num_classes) {
            return Err(Error::format(&descriptor.name, format!("label {bad} out of range")));
        }
        let origin = vec![Origin::Train; labels.len()];
        Ok(Self {
            descriptor,
            raw: RawPixels::U8(pixels),
            labels,
            ids,
            latents,
            origin,
        })
    }
}

/// An ordered view on part of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    data: Arc<Dataset>,
    indices: Vec<usize>,
}

/// A batch of normalized images (NCHW, contiguous) with labels and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageBatch {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<String>,
}

impl LabeledImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Image {
        let per = self.shape.len();
        Image::new(self.shape, self.pixels[i * per..(i + 1) * per].to_vec()).expect("finite")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.pixels).view(self.shape.nchw(self.len()))
    }

    pub fn labels_tensor(&self) -> Tensor {
        let l: Vec<i64> = self.labels.iter().map(|&v| v as i64).collect();
        Tensor::from_slice(&l).to_kind(Kind::Int64)
    }

    pub fn from_images(images: &[Image], labels: Vec<usize>, source_ids: Vec<String>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyBatch("LabeledImageBatch"))?;
        let shape = first.shape();
        if images.len() != labels.len() || images.len() != source_ids.len() {
            return Err(Error::Contract("images, labels and ids must have equal length".into()));
        }
        let mut pixels = Vec::with_capacity(images.len() * shape.len());
        for img in images {
            if img.shape() != shape {
                return Err(Error::Shape {
                    expected: shape.as_hwc().iter().map(|&d| d as i64).collect(),
                    actual: img.shape().as_hwc().iter().map(|&d| d as i64).collect(),
                });
            }
            pixels.extend_from_slice(img.pixels());
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            source_ids,
        })
    }
}

impl Split {
    pub fn new(name: impl Into<String>, data: Arc<Dataset>, indices: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            data,
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn shape(&self) -> ImageShape {
        self.data.descriptor.image_shape
    }

    pub fn label(&self, pos: usize) -> usize {
        self.data.label(self.indices[pos])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| self.data.label(i)).collect()
    }

    pub fn source_id(&self, pos: usize) -> &str {
        self.data.source_id(self.indices[pos])
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.indices
            .iter()
            .map(|&i| self.data.source_id(i).to_string())
            .collect()
    }

    pub fn image(&self, pos: usize) -> Image {
        self.data.image(self.indices[pos])
    }

    pub fn latents(&self, pos: usize) -> Option<&LatentSpec> {
        self.data.latents(self.indices[pos])
    }

    pub fn position_of(&self, source_id: &str) -> Option<usize> {
        self.indices.iter().position(|&i| self.data.source_id(i) == source_id)
    }

    /// First `n` elements (or all, if fewer).
    pub fn take(&self, n: usize) -> Split {
        Split::new(
            self.name.clone(),
            self.data.clone(),
            self.indices.iter().take(n).copied().collect(),
        )
    }

    /// Sub-view keeping the elements at the given positions.
    pub fn select(&self, positions: &[usize]) -> Split {
        Split::new(
            self.name.clone(),
            self.data.clone(),
            positions.iter().map(|&p| self.indices[p]).collect(),
        )
    }

    /// Materializes the batch for the given split positions.
    pub fn batch(&self, positions: &[usize]) -> LabeledImageBatch {
        let shape = self.shape();
        let per = shape.len();
        let mut pixels = vec![0.0f32; positions.len() * per];
        par::for_each_chunk_mut(&mut pixels, per, |k, out| {
            self.data.fill_normalized(self.indices[positions[k]], out)
        });
        LabeledImageBatch {
            shape,
            pixels,
            labels: positions.iter().map(|&p| self.label(p)).collect(),
            source_ids: positions
                .iter()
                .map(|&p| self.data.source_id(self.indices[p]).to_string())
                .collect(),
        }
    }

    /// Sequential batches in split order; the last batch may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = LabeledImageBatch> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(order, batch_size, false)
    }

    /// Batches in the given order; `drop_last` discards a trailing short batch.
    pub fn batches_in_order(
        &self,
        order: Vec<usize>,
        batch_size: usize,
        drop_last: bool,
    ) -> impl Iterator<Item = LabeledImageBatch> + '_ {
        let bs = batch_size.max(1);
        let n = if drop_last { order.len() / bs * bs } else { order.len() };
        (0..n).step_by(bs).map(move |s| self.batch(&order[s..(s + bs).min(n)]))
    }

    /// Epoch permutation derived from `(seed, epoch)` only.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch as u64);
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn load_mnist(desc: &DatasetDescriptor) -> Result<Dataset> {
    let root = &desc.root;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut origin = Vec::new();
    for (imgs, labs, tag, o) in [
        (mnist::TRAIN_IMAGES, mnist::TRAIN_LABELS, "train", Origin::Train),
        (mnist::TEST_IMAGES, mnist::TEST_LABELS, "test", Origin::Test),
    ] {
        let im = mnist::read_images(&root.join(imgs))?;
        let lb = mnist::read_labels(&root.join(labs))?;
        if (im.rows, im.cols, 1)
            != (
                desc.image_shape.height,
                desc.image_shape.width,
                desc.image_shape.channels,
            )
        {
            return Err(Error::Shape {
                expected: vec![desc.image_shape.height as i64, desc.image_shape.width as i64],
                actual: vec![im.rows as i64, im.cols as i64],
            });
        }
        if lb.len() != im.count {
            return Err(Error::format(
                labs,
                format!("{} labels for {} images", lb.len(), im.count),
            ));
        }
        if let Some(&bad) = lb.iter().find(|&&l| l as usize >= desc.num_classes) {
            return Err(Error::format(labs, format!("label {bad} out of range")));
        }
        ids.extend((0..im.count).map(|i| format!("mnist-{tag}-{i:05}")));
        labels.extend(lb.iter().map(|&l| l as usize));
        origin.extend(std::iter::repeat_n(o, im.count));
        pixels.extend(im.pixels);
    }
    Ok(Dataset {
        descriptor: desc.clone(),
        raw: RawPixels::U8(pixels),
        labels,
        ids,
        latents: None,
        origin,
    })
}

fn load_shapes(desc: &DatasetDescriptor, seed: u64) -> Result<Dataset> {
    let n = desc.subset.unwrap_or(40_000);
    if desc.procedural {
        let latents = shapes::stratified_latents(n, seed);
        return shapes_from_latents(desc, latents);
    }
    let arch = shapes::read_archive(&desc.root, desc.image_shape)?;
    // Keep only the target hues, then subsample per class.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); shapes::TARGET_HUES.len()];
    for (i, l) in arch.latents.iter().enumerate() {
        if let Some(c) = l.class() {
            by_class[c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = n / by_class.len();
    let mut keep = Vec::new();
    for mut g in by_class {
        g.shuffle(&mut rng);
        keep.extend(g.into_iter().take(per_class));
    }
    keep.sort_unstable();
    let per = desc.image_shape.len();
    let raw = match &arch.pixels {
        RawPixels::U8(v) => RawPixels::U8(
            keep.iter()
                .flat_map(|&i| v[i * per..(i + 1) * per].iter().copied())
                .collect(),
        ),
        RawPixels::F32(v) => RawPixels::F32(
            keep.iter()
                .flat_map(|&i| v[i * per..(i + 1) * per].iter().copied())
                .collect(),
        ),
    };
    let latents: Vec<LatentSpec> = keep.iter().map(|&i| arch.latents[i]).collect();
    Ok(Dataset {
        descriptor: desc.clone(),
        raw,
        labels: latents.iter().map(|l| l.class().expect("filtered")).collect(),
        ids: latents.iter().map(|l| l.id()).collect(),
        latents: Some(latents),
        origin: vec![Origin::Train; keep.len()],
    })
}

/// Renders the given latent combinations into an in-memory dataset.
pub fn shapes_from_latents(desc: &DatasetDescriptor, latents: Vec<LatentSpec>) -> Result<Dataset> {
    if latents.iter().any(|l| l.class().is_none()) {
        return Err(Error::Contract("object hue outside the target hues".into()));
    }
    let hwc = shapes::render_many(&latents);
    let per = desc.image_shape.len();
    let mut chw = vec![0u8; hwc.len()];
    par::for_each_chunk_mut(&mut chw, per, |i, out| {
        image::hwc_to_chw(desc.image_shape, &hwc[i * per..(i + 1) * per], out)
    });
    let labels = latents.iter().map(|l| l.class().expect("checked")).collect();
    let ids = latents.iter().map(|l| l.id()).collect();
    Dataset::from_u8(desc.clone(), chw, labels, ids, Some(latents))
}

/// Splits a dataset into train/val/test according to the descriptor.
pub fn split_dataset(data: Arc<Dataset>, seed: u64) -> Result<DatasetSplits> {
    let desc = &data.descriptor;
    desc.validate()?;
    let n = data.len();
    let (train, val, test) = match desc.split_ratios {
        None => {
            let train = (0..n).filter(|&i| data.origin[i] == Origin::Train).collect();
            let test = (0..n).filter(|&i| data.origin[i] == Origin::Test).collect();
            (train, Vec::new(), test)
        }
        Some([rt, rv, _]) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = ((n as f64) * rt).round() as usize;
            let n_val = (((n as f64) * rv).round() as usize).min(n - n_train);
            let test = order.split_off(n_train + n_val);
            let val = order.split_off(n_train);
            (order, val, test)
        }
    };
    Ok(DatasetSplits {
        train: Split::new("train", data.clone(), train),
        val: Split::new("val", data.clone(), val),
        test: Split::new("test", data, test),
    })
}

/// Loads a dataset and splits it deterministically given `seed`.
pub fn load_dataset(desc: &DatasetDescriptor, seed: u64) -> Result<DatasetSplits> {
    desc.validate()?;
    let data = match desc.kind {
        DatasetKind::Mnist => load_mnist(desc)?,
        DatasetKind::Shapes3d => load_shapes(desc, seed)?,
    };
    split_dataset(Arc::new(data), seed)
}

/// Default data root: `$BIN_DATA_ROOT`, else `<workspace>/data`.
pub fn default_data_root() -> PathBuf {
    std::env::var_os("BIN_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}
