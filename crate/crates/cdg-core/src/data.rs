//! Dataset ingestion (IDX image/label files) and synthetic task generation.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Images as 64-bit values in `[0, 1]`, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::invalid(format!(
                "pixel count {} does not match {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {} outside 0..=9", bad)));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, idx: usize) -> &[f64] {
        &self.images[idx * IMAGE_PIXELS..(idx + 1) * IMAGE_PIXELS]
    }

    pub fn label(&self, idx: usize) -> u8 {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copies the selected samples into a new dataset, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse(format!(
            "{}: truncated header, missing {}",
            path.display(),
            what
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image/label file pair and scales pixels to `[0, 1]`.
///
/// Validates the big-endian magics (`0x00000803` images, `0x00000801`
/// labels), the 28x28 image dimensions, and that the sample counts agree.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    let magic = be_u32(&img_bytes, 0, "magic", images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse(format!(
            "{}: wrong magic {:#010x} (expected {:#010x})",
            images_path.display(),
            magic,
            IMAGE_MAGIC
        )));
    }
    let n_images = be_u32(&img_bytes, 4, "image count", images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, "row count", images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, "column count", images_path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Parse(format!(
            "{}: image dims {}x{} (expected {}x{})",
            images_path.display(),
            rows,
            cols,
            IMAGE_SIDE,
            IMAGE_SIDE
        )));
    }
    let expected = 16 + n_images * IMAGE_PIXELS;
    if img_bytes.len() < expected {
        return Err(Error::Parse(format!(
            "{}: truncated data ({} bytes, expected {})",
            images_path.display(),
            img_bytes.len(),
            expected
        )));
    }

    let lbl_magic = be_u32(&lbl_bytes, 0, "magic", labels_path)?;
    if lbl_magic != LABEL_MAGIC {
        return Err(Error::Parse(format!(
            "{}: wrong magic {:#010x} (expected {:#010x})",
            labels_path.display(),
            lbl_magic,
            LABEL_MAGIC
        )));
    }
    let n_labels = be_u32(&lbl_bytes, 4, "label count", labels_path)? as usize;
    if lbl_bytes.len() < 8 + n_labels {
        return Err(Error::Parse(format!(
            "{}: truncated data ({} bytes, expected {})",
            labels_path.display(),
            lbl_bytes.len(),
            8 + n_labels
        )));
    }
    if n_images != n_labels {
        return Err(Error::Parse(format!(
            "count mismatch: {} images vs {} labels",
            n_images, n_labels
        )));
    }

    let images = img_bytes[16..16 + n_images * IMAGE_PIXELS]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels = lbl_bytes[8..8 + n_labels].to_vec();
    Dataset::new(images, labels)
}

/// Seeded selection of `train_n` samples for training; the remainder
/// becomes the held-out set.
pub fn inverted_split(dataset: &Dataset, train_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_n > dataset.len() {
        return Err(Error::invalid(format!(
            "train_n {} exceeds dataset size {}",
            train_n,
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train = dataset.select(&order[..train_n]);
    let test = dataset.select(&order[train_n..]);
    Ok((train, test))
}

/// Seeded epoch order over `n` samples; every index appears exactly once.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Analytic testbed: `L(X) = 0.5 * ||X - X*||^2` with gradient `X - X*`.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub target: Tensor4,
}

impl QuadraticTask {
    pub fn loss(&self, x: &Tensor4) -> Result<f64> {
        let diff = x.sub(&self.target)?;
        Ok(0.5 * diff.dot(&diff)?)
    }

    pub fn grad(&self, x: &Tensor4) -> Result<Tensor4> {
        x.sub(&self.target)
    }
}

pub fn synthetic_quadratic(dims: [usize; 4], seed: u64) -> Result<QuadraticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))?;
    Ok(QuadraticTask { target })
}

/// Procedurally generated digit-style IDX fixtures.
///
/// Each class is a fixed constellation of Gaussian bumps; samples jitter the
/// constellation, scale its intensity, and add pixel noise. The generator is
/// fully determined by its seed, so fixture-backed runs are reproducible. It
/// stands in for the real IDX files when none are supplied (this crate never
/// downloads data).
pub mod fixture {
    use super::*;
    use std::io::Write;

    const BUMPS_PER_CLASS: usize = 5;
    const SHIFT: f64 = 4.0;
    /// Independent positional jitter per bump, deforming the glyph.
    const BUMP_JITTER: f64 = 1.4;
    const PIXEL_NOISE: f64 = 0.3;
    /// Fraction of samples with a random label, capping attainable accuracy.
    const LABEL_NOISE: f64 = 0.03;

    struct Bump {
        cx: f64,
        cy: f64,
        inv_two_s2: f64,
        amp: f64,
    }

    fn class_bumps(class: u8, seed: u64) -> Vec<Bump> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..BUMPS_PER_CLASS)
            .map(|_| {
                let s: f64 = rng.gen_range(1.6..3.2);
                Bump {
                    cx: rng.gen_range(7.0..21.0),
                    cy: rng.gen_range(7.0..21.0),
                    inv_two_s2: 1.0 / (2.0 * s * s),
                    amp: rng.gen_range(0.65..1.0),
                }
            })
            .collect()
    }

    /// Generates `n` samples with balanced classes.
    pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
        synthetic_digits_stream(n, seed, 0)
    }

    /// Samples from the corpus defined by `seed` using an independent
    /// jitter/noise stream, so several pools can share the same class
    /// prototypes.
    pub fn synthetic_digits_stream(n: usize, seed: u64, stream: u64) -> Dataset {
        let prototypes: Vec<Vec<Bump>> = (0..NUM_CLASSES as u8)
            .map(|c| class_bumps(c, seed))
            .collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(1).wrapping_add(stream << 32));
        let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        let mut offsets = [(0.0, 0.0); BUMPS_PER_CLASS];
        for idx in 0..n {
            let class = (idx % NUM_CLASSES) as u8;
            let dx: f64 = rng.gen_range(-SHIFT..SHIFT);
            let dy: f64 = rng.gen_range(-SHIFT..SHIFT);
            let gain: f64 = rng.gen_range(0.7..1.3);
            for o in &mut offsets {
                *o = (
                    dx + rng.gen_range(-BUMP_JITTER..BUMP_JITTER),
                    dy + rng.gen_range(-BUMP_JITTER..BUMP_JITTER),
                );
            }
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let mut v = 0.0;
                    for (b, o) in prototypes[class as usize].iter().zip(&offsets) {
                        let ddx = x as f64 - b.cx - o.0;
                        let ddy = y as f64 - b.cy - o.1;
                        v += b.amp * (-(ddx * ddx + ddy * ddy) * b.inv_two_s2).exp();
                    }
                    v = v * gain + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
                    images.push(v.clamp(0.0, 1.0));
                }
            }
            let label = if rng.gen_range(0.0..1.0) < LABEL_NOISE {
                rng.gen_range(0..NUM_CLASSES as u8)
            } else {
                class
            };
            labels.push(label);
        }
        Dataset { images, labels }
    }

    /// File names of one generated corpus, following the usual IDX layout.
    pub struct FixturePaths {
        pub train_images: PathBuf,
        pub train_labels: PathBuf,
        pub t10k_images: PathBuf,
        pub t10k_labels: PathBuf,
    }

    fn write_idx_pair(dir: &Path, stem: &str, ds: &Dataset) -> Result<(PathBuf, PathBuf)> {
        let images_path = dir.join(format!("{}-images-idx3-ubyte", stem));
        let labels_path = dir.join(format!("{}-labels-idx1-ubyte", stem));
        let mut img = std::io::BufWriter::new(std::fs::File::create(&images_path)?);
        img.write_all(&IMAGE_MAGIC.to_be_bytes())?;
        img.write_all(&(ds.len() as u32).to_be_bytes())?;
        img.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
        img.write_all(&(IMAGE_SIDE as u32).to_be_bytes())?;
        let bytes: Vec<u8> = ds
            .images
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        img.write_all(&bytes)?;
        let mut lbl = std::io::BufWriter::new(std::fs::File::create(&labels_path)?);
        lbl.write_all(&LABEL_MAGIC.to_be_bytes())?;
        lbl.write_all(&(ds.len() as u32).to_be_bytes())?;
        lbl.write_all(&ds.labels)?;
        Ok((images_path, labels_path))
    }

    /// Writes `train-*` and `t10k-*` IDX pairs under `dir`.
    pub fn write_idx_fixture(
        dir: impl AsRef<Path>,
        train_count: usize,
        t10k_count: usize,
        seed: u64,
    ) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        // Both pools share the class prototypes; only the jitter streams
        // differ, so held-out samples test the same concepts.
        let train = synthetic_digits_stream(train_count, seed, 1);
        let t10k = synthetic_digits_stream(t10k_count, seed, 2);
        let (train_images, train_labels) = write_idx_pair(dir, "train", &train)?;
        let (t10k_images, t10k_labels) = write_idx_pair(dir, "t10k", &t10k)?;
        Ok(FixturePaths {
            train_images,
            train_labels,
            t10k_images,
            t10k_labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_built_idx(dir: &Path) -> (PathBuf, PathBuf) {
        use std::io::Write;
        let images = dir.join("imgs");
        let labels = dir.join("lbls");
        let mut img = std::fs::File::create(&images).unwrap();
        img.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        img.write_all(&2u32.to_be_bytes()).unwrap();
        img.write_all(&28u32.to_be_bytes()).unwrap();
        img.write_all(&28u32.to_be_bytes()).unwrap();
        let mut pixels = vec![0u8; 2 * IMAGE_PIXELS];
        pixels[0] = 255;
        pixels[1] = 128;
        pixels[IMAGE_PIXELS] = 51;
        img.write_all(&pixels).unwrap();
        let mut lbl = std::fs::File::create(&labels).unwrap();
        lbl.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        lbl.write_all(&2u32.to_be_bytes()).unwrap();
        lbl.write_all(&[3u8, 7u8]).unwrap();
        (images, labels)
    }

    #[test]
    fn loads_hand_built_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = hand_built_idx(dir.path());
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.label(1), 7);
        assert_eq!(ds.image(0)[0], 1.0);
        assert_eq!(ds.image(0)[1], 128.0 / 255.0);
        assert_eq!(ds.image(0)[2], 0.0);
        assert_eq!(ds.image(1)[0], 51.0 / 255.0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = hand_built_idx(dir.path());
        // An images file posing as labels carries the wrong magic.
        let err = load_idx(&images, &images).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{}", err);
    }

    #[test]
    fn rejects_count_mismatch() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = hand_built_idx(dir.path());
        let labels = dir.path().join("lbls3");
        let mut lbl = std::fs::File::create(&labels).unwrap();
        lbl.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        lbl.write_all(&3u32.to_be_bytes()).unwrap();
        lbl.write_all(&[1u8, 2u8, 3u8]).unwrap();
        let err = load_idx(&images, &labels).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{}", err);
    }

    #[test]
    fn rejects_truncated_images() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = hand_built_idx(dir.path());
        let bytes = std::fs::read(&images).unwrap();
        let cut = dir.path().join("cut");
        std::fs::File::create(&cut)
            .unwrap()
            .write_all(&bytes[..bytes.len() - 10])
            .unwrap();
        let err = load_idx(&cut, &labels).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn rejects_wrong_dims() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (_, labels) = hand_built_idx(dir.path());
        let images = dir.path().join("imgs27");
        let mut img = std::fs::File::create(&images).unwrap();
        img.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        img.write_all(&2u32.to_be_bytes()).unwrap();
        img.write_all(&27u32.to_be_bytes()).unwrap();
        img.write_all(&28u32.to_be_bytes()).unwrap();
        img.write_all(&vec![0u8; 2 * 27 * 28]).unwrap();
        let err = load_idx(&images, &labels).unwrap_err();
        assert!(err.to_string().contains("dims"), "{}", err);
    }

    #[test]
    fn split_full_train_leaves_empty_test() {
        let ds = fixture::synthetic_digits(20, 1);
        let (train, test) = inverted_split(&ds, 20, 9).unwrap();
        assert_eq!(train.len(), 20);
        assert!(test.is_empty());
    }

    #[test]
    fn split_is_seed_deterministic_and_disjoint() {
        let ds = fixture::synthetic_digits(40, 2);
        let (a_train, a_test) = inverted_split(&ds, 25, 3).unwrap();
        let (b_train, _) = inverted_split(&ds, 25, 3).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_train.len() + a_test.len(), ds.len());
        // Disjointness: the multiset of (pixels, label) rows partitions the
        // original. Compare via per-sample byte signatures.
        let sig = |d: &Dataset, i: usize| {
            let mut bytes: Vec<u8> = d.image(i).iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes.push(d.label(i));
            bytes
        };
        let mut all: Vec<Vec<u8>> = (0..ds.len()).map(|i| sig(&ds, i)).collect();
        let mut joined: Vec<Vec<u8>> = (0..a_train.len())
            .map(|i| sig(&a_train, i))
            .chain((0..a_test.len()).map(|i| sig(&a_test, i)))
            .collect();
        all.sort();
        joined.sort();
        assert_eq!(all, joined);
    }

    #[test]
    fn split_rejects_oversized_train() {
        let ds = fixture::synthetic_digits(10, 4);
        assert!(inverted_split(&ds, 11, 0).is_err());
    }

    #[test]
    fn quadratic_task_values() {
        let task = synthetic_quadratic([2, 2, 1, 1], 5).unwrap();
        assert_eq!(task.loss(&task.target).unwrap(), 0.0);
        let mut x = task.target.clone();
        x.data_mut()[0] += 1.0;
        assert!((task.loss(&x).unwrap() - 0.5).abs() <= 1e-15);
        let g = task.grad(&x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let task = synthetic_quadratic([3, 2, 2, 1], 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::from_fn([3, 2, 2, 1], |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let g = task.grad(&x).unwrap();
        let h = 1e-6;
        for j in [0usize, 5, 11] {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (task.loss(&xp).unwrap() - task.loss(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[j]).abs() <= 1e-8, "coord {}", j);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let order = shuffled_indices(100, &mut rng);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(order, shuffled_indices(100, &mut rng2));
    }

    #[test]
    fn fixture_round_trips_through_idx_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture::write_idx_fixture(dir.path(), 30, 20, 11).unwrap();
        let train = load_idx(&paths.train_images, &paths.train_labels).unwrap();
        let t10k = load_idx(&paths.t10k_images, &paths.t10k_labels).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(t10k.len(), 20);
        // Roughly balanced classes (a few labels are deliberately noisy)
        // and values inside [0, 1].
        for c in 0..NUM_CLASSES as u8 {
            let count = train.labels().iter().filter(|&&l| l == c).count();
            assert!((1..=6).contains(&count), "class {} count {}", c, count);
        }
        assert!(train.image(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
