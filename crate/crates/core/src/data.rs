//! MNIST ingestion: IDX parsing, seeded train/validation/test resampling and batching.

use std::fs;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::netcore::Batch;
use crate::rng::{derive_seed, shuffle, stream};
use crate::{Error, Matrix, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Standard MNIST file names inside a data directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Images stored one sample per row, pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let features = height * width;
        if features == 0 || pixels.len() != features * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixel values for {} images of {height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        Ok(Dataset { height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.pixels[i * f..(i + 1) * f]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.features());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { height: self.height, width: self.width, pixels, labels }
    }

    /// Both datasets' samples, `self` first.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::invalid("cannot pool datasets with different image sizes"));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset { height: self.height, width: self.width, pixels, labels })
    }

    /// Network batch (one column per sample) of the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let f = self.features();
        let mut inputs = Matrix::zeros(f, indices.len());
        let n = indices.len();
        let data = inputs.as_mut_slice();
        for (col, &i) in indices.iter().enumerate() {
            for (row, &p) in self.image(i).iter().enumerate() {
                data[row * n + col] = p;
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch { inputs, labels }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Number of samples per class.
    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn format(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.offset as u64, message: message.into() }
    }

    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let chunk = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(chunk)
            }
            None => Err(self.format(format!(
                "file truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.offset
            ))),
        }
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32()?;
        if magic != expected {
            self.offset -= 4;
            return Err(self.format(format!("bad magic {magic:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.format(format!("{} trailing bytes", self.bytes.len() - self.offset)));
        }
        Ok(())
    }
}

/// Parses an IDX3 image file: returns `(count, height, width, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = Reader { bytes, offset: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let raw = r.take(n * h * w)?;
    r.finish()?;
    Ok((n, h, w, raw.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, offset: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    let start = r.offset;
    let raw = r.take(n)?;
    r.finish()?;
    if let Some(pos) = raw.iter().position(|&b| usize::from(b) >= NUM_CLASSES) {
        return Err(Error::Format {
            offset: (start + pos) as u64,
            message: format!("label {} outside [0, {NUM_CLASSES})", raw[pos]),
        });
    }
    Ok(raw.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    Dataset::new(h, w, pixels, labels)
}

/// The canonical 60k training and 10k test files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Sizes of a seeded train/validation/test resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// 50k/10k/10k from the pooled 70k MNIST samples.
    pub fn mnist(seed: u64) -> Self {
        SplitSpec { train: 50_000, val: 10_000, test: 10_000, seed }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Shuffled sample indices `0..n` for `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut stream(seed));
    idx
}

/// Disjoint seeded partition of `pool`.
pub fn split(pool: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if pool.len() < spec.total() {
        return Err(Error::InsufficientData(format!(
            "pool has {} samples, split needs {}",
            pool.len(),
            spec.total()
        )));
    }
    let idx = permutation(pool.len(), spec.seed);
    let (train, rest) = idx.split_at(spec.train);
    let (val, rest) = rest.split_at(spec.val);
    Ok(Splits { train: pool.subset(train), val: pool.subset(val), test: pool.subset(&rest[..spec.test]) })
}

/// Index lists of one epoch: a fresh permutation keyed on `(seed, epoch)`, cut into
/// batches of `batch_size` with a final short batch when needed.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let idx = permutation(len, derive_seed(seed, epoch));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of one epoch over `ds`.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    Ok(batch_indices(ds.len(), batch_size, seed, epoch)?.iter().map(|b| ds.batch(b)).collect())
}

/// Class-conditional Gaussian blobs clipped to `[0, 1]`, for smoke runs without MNIST.
pub fn synthetic_clusters(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Dataset {
    use rand_distr::{Distribution, StandardNormal};
    let features = height * width;
    let classes = classes.clamp(1, NUM_CLASSES);
    let mut rng = stream(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).collect())
        .collect();
    let mut pixels = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &m in &centers[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            pixels.push((m + 0.15 * noise).clamp(0.0, 1.0));
        }
    }
    Dataset { height, width, pixels, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("dlrt-data-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn all_zero_fixture_loads_three_zero_images() {
        let dir = temp_dir("zero");
        let (ip, lp) = write_pair(&dir, &idx_images(3, 2, 2, &[0; 12]), &idx_labels(&[0, 1, 2]));
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features(), 4);
        for i in 0..3 {
            assert_eq!(ds.image(i), &[0.0; 4]);
        }
        assert_eq!(ds.labels(), &[0, 1, 2]);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn pixels_are_scaled_into_unit_interval() {
        let (n, h, w, px) = parse_idx_images(&idx_images(1, 1, 3, &[0, 51, 255])).unwrap();
        assert_eq!((n, h, w), (1, 1, 3));
        assert_eq!(px, vec![0.0, 0.2, 1.0]);
    }

    #[test]
    fn format_errors_name_the_offset() {
        match parse_idx_images(&[]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        match parse_idx_images(&bad) {
            Err(Error::Format { offset: 0, message }) => assert!(message.contains("magic")),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&idx_images(2, 2, 2, &[0; 5])) {
            Err(Error::Format { offset: 16, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_idx_labels(&idx_labels(&[1, 12])) {
            Err(Error::Format { offset: 9, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_labels(&idx_images(1, 1, 1, &[0])).is_err());
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = temp_dir("mismatch");
        let (ip, lp) = write_pair(&dir, &idx_images(2, 1, 1, &[0, 0]), &idx_labels(&[1]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::remove_dir_all(dir).unwrap();
    }

    fn toy(n: usize) -> Dataset {
        let pixels = (0..n).map(|i| i as f64 / n as f64).collect();
        Dataset::new(1, 1, pixels, (0..n).map(|i| i % NUM_CLASSES).collect()).unwrap()
    }

    #[test]
    fn split_is_a_seeded_disjoint_partition() {
        let ds = toy(3);
        let spec = SplitSpec { train: 1, val: 1, test: 1, seed: 9 };
        let a = split(&ds, &spec).unwrap();
        let b = split(&ds, &spec).unwrap();
        let mut all: Vec<f64> =
            [&a.train, &a.val, &a.test].iter().map(|d| d.image(0)[0]).collect();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        all.sort_by(f64::total_cmp);
        assert_eq!(all, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert!(matches!(
            split(&ds, &SplitSpec { train: 2, val: 1, test: 1, seed: 0 }),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let sizes: Vec<usize> = batch_indices(5, 2, 1, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let a = batch_indices(103, 16, 7, 3).unwrap();
        assert_eq!(a, batch_indices(103, 16, 7, 3).unwrap());
        assert_ne!(a, batch_indices(103, 16, 7, 4).unwrap());
        let mut seen: Vec<usize> = a.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        assert!(batch_indices(3, 0, 0, 0).is_err());
    }

    #[test]
    fn batch_columns_are_samples() {
        let ds = Dataset::new(1, 2, vec![0.1, 0.2, 0.3, 0.4], vec![3, 4]).unwrap();
        let b = ds.batch(&[1, 0]);
        assert_eq!(b.inputs, Matrix::from_rows(&[[0.3, 0.1], [0.4, 0.2]]));
        assert_eq!(b.labels, vec![4, 3]);
    }

    #[test]
    fn dataset_rejects_out_of_range_values() {
        assert!(Dataset::new(1, 1, vec![1.5], vec![0]).is_err());
        assert!(Dataset::new(1, 1, vec![0.5], vec![10]).is_err());
        assert!(Dataset::new(1, 2, vec![0.5], vec![1]).is_err());
    }

    #[test]
    fn synthetic_clusters_are_valid() {
        let ds = synthetic_clusters(40, 3, 3, 4, 1);
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.label_histogram()[..4], [10, 10, 10, 10]);
        assert!(Dataset::new(3, 3, ds.pixels.clone(), ds.labels.clone()).is_ok());
    }
}
