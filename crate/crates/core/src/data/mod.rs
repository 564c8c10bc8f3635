//! Image ingestion, splits and batching.
//!
//! Datasets live on disk as `root/<class_name>/*.pgm`. Classes are numbered
//! in lexicographic order of their directory names and files are read in
//! lexicographic order within a class. Pixels `p` are resized bilinearly
//! (corner-aligned) and mapped to `p / 127.5 - 1`.

mod pgm;
pub mod synth;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use pgm::{decode_pgm, encode_pgm, resize_bilinear, GrayImage};
pub use synth::{generate_synthetic, synth_class_names, SYNTH_CLASSES};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[c, H, W]`, values in `[-1, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

/// Source ids per split, written next to training outputs for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// A loaded folder: images plus class names indexed by label.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

#[inline]
pub fn pixel_to_unit(p: f64) -> f64 {
    p / 127.5 - 1.0
}

#[inline]
pub fn unit_to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Converts a decoded PGM into a `[channels, H, W]` tensor.
pub fn image_to_tensor(img: &GrayImage, size: [usize; 2], channels: usize) -> Tensor {
    let raw: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let resized = resize_bilinear(&raw, img.height, img.width, size[0], size[1]);
    let plane: Vec<f64> = resized.into_iter().map(pixel_to_unit).collect();
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![channels, size[0], size[1]], data).expect("positive sizes")
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub fn load_image_folder(root: &Path, size: [usize; 2], channels: usize) -> Result<ImageFolder> {
    if size[0] == 0 || size[1] == 0 || channels == 0 {
        return Err(Error::InvalidConfig(format!(
            "resize {size:?} and {channels} channels must be positive"
        )));
    }
    let class_dirs: Vec<_> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut images = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<_> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(dir.clone()));
        }
        for file in files {
            let bytes = fs::read(&file)?;
            let img = decode_pgm(&bytes, &file.display().to_string())?;
            let name = file.file_name().unwrap().to_string_lossy();
            images.push(LabeledImage {
                pixels: image_to_tensor(&img, size, channels),
                label,
                source_id: format!("{class}/{name}"),
            });
        }
        class_names.push(class);
    }
    Ok(ImageFolder {
        images,
        class_names,
    })
}

/// Writes images as `root/<class_name>/<index>.pgm` (first channel only).
pub fn write_image_folder(root: &Path, images: &[LabeledImage], class_names: &[String]) -> Result<()> {
    for name in class_names {
        fs::create_dir_all(root.join(name))?;
    }
    let mut counters = vec![0usize; class_names.len()];
    for img in images {
        let [_, h, w] = match *img.pixels.shape() {
            [c, h, w] => [c, h, w],
            ref s => return Err(Error::shape("write_image_folder", format!("{s:?}"))),
        };
        let class = class_names.get(img.label).ok_or(Error::LabelOutOfRange {
            label: img.label,
            classes: class_names.len(),
        })?;
        let gray = GrayImage {
            width: w,
            height: h,
            pixels: img.pixels.data()[..h * w].iter().map(|&v| unit_to_pixel(v)).collect(),
        };
        let path = root.join(class).join(format!("{:05}.pgm", counters[img.label]));
        counters[img.label] += 1;
        fs::write(path, encode_pgm(&gray))?;
    }
    Ok(())
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Minimum images per class for a split in which every class reaches every part.
pub const MIN_PER_CLASS: usize = 10;

/// Largest-remainder apportionment of `n` items: every part is within one
/// item of `n·f`, and leftover items go to the largest fractional parts
/// (earlier parts on ties).
fn part_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| n as f64 * f);
    let mut sizes = exact.map(|e| (e + 1e-9).floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Per class: shuffle by seed, then cut into train, validation and test
/// parts sized by largest-remainder rounding of `n·fractions`.
pub fn stratified_split(
    images: &[LabeledImage],
    class_names: &[String],
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let classes = class_names.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, img) in images.iter().enumerate() {
        by_class
            .get_mut(img.label)
            .ok_or(Error::LabelOutOfRange {
                label: img.label,
                classes,
            })?
            .push(i);
    }
    let mut r = rng::seeded(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_names: class_names.to_vec(),
    };
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < MIN_PER_CLASS {
            return Err(Error::TooFewSamples {
                class,
                count: idx.len(),
                min: MIN_PER_CLASS,
            });
        }
        idx.shuffle(&mut r);
        let [n_train, n_val, _] = part_sizes(idx.len(), fractions);
        for (pos, &i) in idx.iter().enumerate() {
            let part = if pos < n_train {
                &mut split.train
            } else if pos < n_train + n_val {
                &mut split.val
            } else {
                &mut split.test
            };
            part.push(images[i].clone());
        }
    }
    Ok(split)
}

impl DatasetSplit {
    pub fn manifest(&self, seed: u64, fractions: [f64; 3]) -> SplitManifest {
        let ids = |part: &[LabeledImage]| part.iter().map(|i| i.source_id.clone()).collect();
        SplitManifest {
            seed,
            fractions,
            class_names: self.class_names.clone(),
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

/// Stacks images into a `[B, c, H, W]` batch.
pub fn stack(images: &[&LabeledImage]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let item_shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.pixels.shape() != item_shape.as_slice() {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", img.pixels.shape(), item_shape),
            ));
        }
        data.extend_from_slice(img.pixels.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(item_shape);
    Tensor::new(shape, data)
}

/// Mini-batches in an order shuffled by `seed ^ epoch`; the last partial
/// batch is kept.
pub struct BatchIter<'a> {
    images: &'a [LabeledImage],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(images: &[LabeledImage], batch_size: usize, seed: u64, epoch: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng::seeded(seed ^ epoch));
    BatchIter {
        images,
        order,
        batch_size,
        pos: 0,
    }
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&LabeledImage> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.images[i])
            .collect();
        self.pos = end;
        let labels = picked.iter().map(|i| i.label).collect();
        Some((stack(&picked).expect("uniform image shapes"), labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n_per_class: usize, classes: usize) -> (Vec<LabeledImage>, Vec<String>) {
        let mut images = Vec::new();
        for c in 0..classes {
            for i in 0..n_per_class {
                images.push(LabeledImage {
                    pixels: Tensor::full(&[1, 2, 2], (c * 1000 + i) as f64 / 1e4),
                    label: c,
                    source_id: format!("c{c}/{i}"),
                });
            }
        }
        (images, (0..classes).map(|c| format!("c{c}")).collect())
    }

    #[test]
    fn split_sizes_and_partition() {
        let (images, names) = dummy(100, 6);
        let split = stratified_split(&images, &names, DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (480, 60, 60));
        for part in [&split.train, &split.val, &split.test] {
            for c in 0..6 {
                let count = part.iter().filter(|i| i.label == c).count();
                assert_eq!(count * 6, part.len());
            }
        }
        let mut all: Vec<_> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .map(|i| i.source_id.clone())
            .collect();
        all.sort();
        let mut expected: Vec<_> = images.iter().map(|i| i.source_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(split, stratified_split(&images, &names, DEFAULT_FRACTIONS, 3).unwrap());
    }

    #[test]
    fn split_needs_ten_per_class() {
        let (images, names) = dummy(9, 2);
        assert!(matches!(
            stratified_split(&images, &names, DEFAULT_FRACTIONS, 0),
            Err(Error::TooFewSamples { count: 9, .. })
        ));
    }

    #[test]
    fn batches_keep_partial_tail() {
        let (images, _) = dummy(10, 1);
        let sizes: Vec<_> = batch_iter(&images, 4, 1, 0).map(|(t, l)| (t.shape()[0], l.len())).collect();
        assert_eq!(sizes, [(4, 4), (4, 4), (2, 2)]);
        let a: Vec<_> = batch_iter(&images, 4, 1, 0).map(|(_, l)| l).collect();
        let b: Vec<_> = batch_iter(&images, 4, 1, 0).map(|(_, l)| l).collect();
        assert_eq!(a, b);
        assert_ne!(batch_iter(&images, 4, 1, 0).order(), batch_iter(&images, 4, 1, 1).order());
    }

    #[test]
    fn pixel_mapping() {
        assert_eq!(pixel_to_unit(0.0), -1.0);
        assert_eq!(pixel_to_unit(255.0), 1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p as f64)), p);
        }
    }
}
