//! Labeled image datasets: a synthetic generator for desk-scale experiments,
//! a packed binary tensor format, and a directory-of-images loader.
//!
//! Packed file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "BELTPACK"
//! 8       4     u32 format version (1)
//! 12      4     u32 number of samples
//! 16      4     u32 number of classes
//! 20      4     u32 split (0 = train, 1 = test)
//! 24      4     u32 tensor rank (3)
//! 28      12    3 x u32 dims: channels, height, width
//! 40      4     u32 dtype (0 = float32)
//! 44      ...   samples x (c*h*w) f32 values, row-major per sample
//! ...     ...   samples x u32 labels
//! ```

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::{rng_from, substream};
use crate::Image;

const PACKED_MAGIC: &[u8; 8] = b"BELTPACK";
const PACKED_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A dataset of same-shape images in `[0, 1]` with class labels in `[0, K)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::contract("a dataset needs at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            for (i, img) in images.iter().enumerate() {
                if img.shape() != first.shape() {
                    return Err(Error::contract(format!(
                        "sample {i} has shape {:?}, expected {:?}",
                        img.shape(),
                        first.shape()
                    )));
                }
                if img.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "sample {i} has values outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|img| {
            let d = img.dim();
            (d.0, d.1, d.2)
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Class-conditional Gaussian blobs. Each class has a fixed blob position
/// (evenly spaced on a circle) and a fixed per-channel color; both depend
/// only on the class index, so datasets drawn with different seeds share the
/// same class structure and can serve as train/test splits of one task.
/// Samples within a class vary by center jitter, amplitude, and pixel noise.
pub fn make_synthetic_dataset(
    num_classes: usize,
    samples_per_class: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::contract("num_classes must be >= 2"));
    }
    if samples_per_class == 0 {
        return Err(Error::contract("samples_per_class must be >= 1"));
    }
    let (c, h, w) = input_shape;
    if c == 0 || h < 4 || w < 4 {
        return Err(Error::contract(format!(
            "input shape {c}x{h}x{w} too small for blob images"
        )));
    }

    // Compact blobs: tails die off well before the image borders, which
    // keeps border regions near-constant background rather than class
    // signal. Border patches are where triggers typically live.
    let radius = h.min(w) as f64 / 6.0;
    let sigma = h.min(w) as f64 / 12.0;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);

    // Class geometry/colors are a pure function of the class index. Peak
    // intensities stay below 0.8 so the upper fifth of the value range is
    // reserved for content brighter than anything the task itself draws —
    // the regime engineered trigger patterns live in.
    let class_colors: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            let mut rng = rng_from(substream(0xC1A55, &format!("class-color-{k}")));
            (0..c).map(|_| rng.gen_range(0.35..=0.8)).collect()
        })
        .collect();

    let mut rng = rng_from(substream(seed, "synthetic-dataset"));
    let jitter = Normal::new(0.0, 1.0).expect("valid normal");
    let pixel_noise = Normal::new(0.0, 0.05).expect("valid normal");

    let mut images = Vec::with_capacity(num_classes * samples_per_class);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for k in 0..num_classes {
        let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
        let (by, bx) = (cy + radius * angle.sin(), cx + radius * angle.cos());
        for _ in 0..samples_per_class {
            let (jy, jx) = (by + jitter.sample(&mut rng), bx + jitter.sample(&mut rng));
            let amp: f64 = rng.gen_range(0.7..=1.0);
            let mut img = Image::zeros((c, h, w));
            for ch in 0..c {
                let peak = amp * class_colors[k][ch];
                for i in 0..h {
                    for j in 0..w {
                        let d2 = (i as f64 - jy).powi(2) + (j as f64 - jx).powi(2);
                        let v =
                            peak * (-d2 / (2.0 * sigma * sigma)).exp() + pixel_noise.sample(&mut rng);
                        img[[ch, i, j]] = v.clamp(0.0, 1.0);
                    }
                }
            }
            images.push(img);
            labels.push(k);
        }
    }
    LabeledDataset::new(images, labels, num_classes, Split::Train)
}

fn load_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Writes a dataset in the packed format documented at module level.
pub fn save_packed(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let (c, h, w) = dataset
        .input_shape()
        .ok_or_else(|| Error::contract("cannot save an empty dataset"))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(PACKED_MAGIC)?;
    out.write_u32::<LittleEndian>(PACKED_VERSION)?;
    out.write_u32::<LittleEndian>(dataset.len() as u32)?;
    out.write_u32::<LittleEndian>(dataset.num_classes as u32)?;
    out.write_u32::<LittleEndian>(match dataset.split {
        Split::Train => 0,
        Split::Test => 1,
    })?;
    out.write_u32::<LittleEndian>(3)?;
    for dim in [c, h, w] {
        out.write_u32::<LittleEndian>(dim as u32)?;
    }
    out.write_u32::<LittleEndian>(DTYPE_F32)?;
    for img in &dataset.images {
        for &v in img.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    for &label in &dataset.labels {
        out.write_u32::<LittleEndian>(label as u32)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a packed dataset file, reporting the byte offset of any malformity.
pub fn load_packed(path: &Path) -> Result<LabeledDataset> {
    let mut file = BufReader::new(File::open(path).map_err(|e| load_err(path, 0, e.to_string()))?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| load_err(path, 0, format!("reading magic: {e}")))?;
    if &magic != PACKED_MAGIC {
        return Err(load_err(path, 0, "bad magic, not a packed dataset file"));
    }
    let version = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 8, e.to_string()))?;
    if version != PACKED_VERSION {
        return Err(load_err(path, 8, format!("unsupported version {version}")));
    }
    let num_samples = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 12, e.to_string()))? as usize;
    let num_classes = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 16, e.to_string()))? as usize;
    let split_tag = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 20, e.to_string()))?;
    let split = match split_tag {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(load_err(path, 20, format!("unknown split tag {other}"))),
    };
    let rank = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 24, e.to_string()))?;
    if rank != 3 {
        return Err(load_err(path, 24, format!("expected rank 3, got {rank}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = file
            .read_u32::<LittleEndian>()
            .map_err(|e| load_err(path, 28 + 4 * i as u64, e.to_string()))? as usize;
    }
    let dtype = file
        .read_u32::<LittleEndian>()
        .map_err(|e| load_err(path, 40, e.to_string()))?;
    if dtype != DTYPE_F32 {
        return Err(load_err(path, 40, format!("unsupported dtype tag {dtype}")));
    }

    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let per_sample = c * h * w;
    let mut images = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let mut values = vec![0f32; per_sample];
        let offset = 44 + (s * per_sample * 4) as u64;
        file.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|e| load_err(path, offset, format!("sample {s} body: {e}")))?;
        let img = Image::from_shape_vec((c, h, w), values.iter().map(|&v| f64::from(v)).collect())
            .map_err(|e| load_err(path, offset, format!("sample {s}: {e}")))?;
        images.push(img);
    }
    let labels_offset = 44 + (num_samples * per_sample * 4) as u64;
    let mut labels = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let label = file
            .read_u32::<LittleEndian>()
            .map_err(|e| load_err(path, labels_offset + 4 * s as u64, format!("label {s}: {e}")))?
            as usize;
        labels.push(label);
    }
    let trailing = file.stream_position().map_err(Error::Io)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(load_err(
            path,
            trailing,
            format!("{} unexpected trailing bytes", rest.len()),
        ));
    }
    LabeledDataset::new(images, labels, num_classes, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Packed,
    ImageDir,
}

/// Loads a dataset from either supported on-disk format.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LabeledDataset> {
    match format {
        DataFormat::Packed => load_packed(path),
        DataFormat::ImageDir => load_image_dir(path),
    }
}

/// Loads a directory whose subdirectories are classes (sorted by name) and
/// whose files are images (sorted by name, rescaled to `[0, 1]` RGB).
pub fn load_image_dir(root: &Path) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| load_err(root, 0, e.to_string()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(load_err(root, 0, "no samples found: no class subdirectories"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| load_err(dir, 0, e.to_string()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| load_err(&file, 0, e.to_string()))?
                .to_rgb8();
            let (iw, ih) = img.dimensions();
            let mut tensor = Image::zeros((3, ih as usize, iw as usize));
            for (x, y, px) in img.enumerate_pixels() {
                for ch in 0..3 {
                    tensor[[ch, y as usize, x as usize]] = f64::from(px.0[ch]) / 255.0;
                }
            }
            images.push(tensor);
            labels.push(class);
        }
    }
    if images.is_empty() {
        return Err(load_err(root, 0, "no samples found: class directories are empty"));
    }
    let num_classes = class_dirs.len().max(2);
    LabeledDataset::new(images, labels, num_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic_dataset(4, 250, (3, 16, 16), 7).unwrap();
        let b = make_synthetic_dataset(4, 250, (3, 16, 16), 7).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x, y);
        }

        let small = make_synthetic_dataset(2, 10, (1, 8, 8), 0).unwrap();
        assert_eq!(small.len(), 20);
        for k in 0..2 {
            assert_eq!(small.labels.iter().filter(|&&l| l == k).count(), 10);
        }
    }

    #[test]
    fn synthetic_classes_differ_but_share_structure_across_seeds() {
        let a = make_synthetic_dataset(4, 5, (3, 16, 16), 1).unwrap();
        let b = make_synthetic_dataset(4, 5, (3, 16, 16), 2).unwrap();
        // Different seeds draw different samples...
        assert_ne!(a.images[0], b.images[0]);
        // ...but class blobs stay put: per-class mean images from the two
        // seeds are far closer to each other than to other classes' means.
        let mean = |ds: &LabeledDataset, k: usize| {
            let mut acc = Image::zeros((3, 16, 16));
            let mut n = 0.0;
            for (img, label) in ds.samples() {
                if label == k {
                    acc += img;
                    n += 1.0;
                }
            }
            acc / n
        };
        for k in 0..4 {
            let same = crate::trigger::l2_norm(&(mean(&a, k) - mean(&b, k)));
            let cross = crate::trigger::l2_norm(&(mean(&a, k) - mean(&b, (k + 1) % 4)));
            assert!(same < cross / 2.0, "class {k}: {same} vs {cross}");
        }
    }

    #[test]
    fn packed_roundtrip_within_f32_precision() {
        let ds = make_synthetic_dataset(3, 4, (3, 8, 8), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.beltpack");
        save_packed(&ds, &path).unwrap();
        let back = load_dataset(&path, DataFormat::Packed).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, ds.num_classes);
        assert_eq!(back.split, ds.split);
        for (a, b) in ds.images.iter().zip(back.images.iter()) {
            let max_err = (a - b).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(max_err <= 1e-7, "round-trip error {max_err}");
        }
    }

    #[test]
    fn packed_load_reports_offset_on_truncation() {
        let ds = make_synthetic_dataset(2, 2, (1, 4, 4), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.beltpack");
        save_packed(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..60]).unwrap();
        match load_packed(&path).unwrap_err() {
            Error::Load { offset, .. } => assert!(offset >= 44, "offset {offset}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn packed_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTAPACKxxxxxxxxxxxxxxxxxxxx").unwrap();
        match load_packed(&path).unwrap_err() {
            Error::Load { offset, detail, .. } => {
                assert_eq!(offset, 0);
                assert!(detail.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn image_dir_roundtrip_and_empty_dir_error() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["0_first", "1_second"] {
            let class_dir = dir.path().join(class);
            std::fs::create_dir(&class_dir).unwrap();
            for i in 0..2 {
                let mut img = image::RgbImage::new(8, 8);
                for px in img.pixels_mut() {
                    px.0 = [if class == "0_first" { 200 } else { 30 }, 10 * i, 0];
                }
                img.save(class_dir.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = load_image_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![0, 0, 1, 1]);
        assert!((ds.images[0][[0, 0, 0]] - 200.0 / 255.0).abs() < 1e-9);

        let empty = tempfile::tempdir().unwrap();
        match load_image_dir(empty.path()).unwrap_err() {
            Error::Load { detail, .. } => assert!(detail.contains("no samples found")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
