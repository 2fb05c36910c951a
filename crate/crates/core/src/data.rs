//! Binary image datasets: IDX parsing, stochastic binarization, MNIST
//! splits and small synthetic datasets drawn from a random SBN.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{sample_generative, Direction, ModelParams, Topology};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN: usize = 50_000;
pub const MNIST_VALID: usize = 10_000;
pub const MNIST_TEST: usize = 10_000;

/// Unsigned-byte IDX tensor, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    /// Number of items (first dimension) and bytes per item.
    pub fn items(&self) -> (usize, usize) {
        (self.dims[0], self.dims[1..].iter().product())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.dims.len() == 1 { IDX_LABELS_MAGIC } else { IDX_IMAGES_MAGIC };
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&magic.to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("header truncated at byte {at} of {}", bytes.len())))
}

/// Parses an IDX image (`0x00000803`) or label (`0x00000801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "bad magic 0x{other:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x}"
            )))
        }
    };
    let dims = (0..ndims).map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    let actual = bytes.len() - offset;
    if actual < expected {
        return Err(Error::Format(format!("truncated data: expected {expected} bytes for {dims:?}, found {actual}")));
    }
    if actual > expected {
        return Err(Error::Format(format!("dimension mismatch: {dims:?} needs {expected} bytes, found {actual}")));
    }
    Ok(IdxTensor { dims, data: bytes[offset..].to_vec() })
}

/// Reads an IDX file, transparently decompressing gzip.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// `N x D` bit matrix, one image per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImages {
    dim: usize,
    bits: Vec<u8>,
}

impl BinaryImages {
    pub fn from_bits(dim: usize, bits: Vec<u8>) -> Result<Self> {
        if dim == 0 || !bits.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!("{} bits do not form rows of {dim}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("images must be binary".into()));
        }
        Ok(BinaryImages { dim, bits })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.dim..(i + 1) * self.dim]
    }

    pub fn image(&self, i: usize) -> Array1<f64> {
        self.row(i).iter().map(|&b| b as f64).collect()
    }

    pub fn slice(&self, range: Range<usize>) -> BinaryImages {
        BinaryImages { dim: self.dim, bits: self.bits[range.start * self.dim..range.end * self.dim].to_vec() }
    }

    /// SHA-256 over the dimensions and bits, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_be_bytes());
        h.update((self.dim as u64).to_be_bytes());
        h.update(&self.bits);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fraction of ones per pixel.
    pub fn pixel_means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim).map(|d| (0..self.len()).map(|i| self.row(i)[d] as f64).sum::<f64>() / n).collect()
    }
}

/// Each pixel becomes 1 with probability `intensity / 255`, drawn once.
pub fn binarize(raw: &IdxTensor, seed: u64) -> Result<BinaryImages> {
    if raw.dims.len() < 2 {
        return Err(Error::Format(format!("expected an image tensor, got dims {:?}", raw.dims)));
    }
    let (_, dim) = raw.items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = raw.data.iter().map(|&v| (rng.random::<f64>() < v as f64 / 255.0) as u8).collect();
    BinaryImages::from_bits(dim, bits)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub binarization_seed: Option<u64>,
    /// `(name, sha256)` per split.
    pub digests: Vec<(String, String)>,
}

/// Train/validation/test splits of binary images.
#[derive(Clone, Debug)]
pub struct BinaryDataset {
    pub train: BinaryImages,
    pub valid: BinaryImages,
    pub test: BinaryImages,
    pub provenance: Provenance,
}

impl BinaryDataset {
    pub fn new(
        train: BinaryImages,
        valid: BinaryImages,
        test: BinaryImages,
        source: String,
        seed: Option<u64>,
    ) -> Result<Self> {
        if train.dim() != valid.dim() || train.dim() != test.dim() {
            return Err(Error::InvalidArgument("splits have different image sizes".into()));
        }
        let digests = vec![
            ("train".to_string(), train.digest()),
            ("valid".to_string(), valid.digest()),
            ("test".to_string(), test.digest()),
        ];
        Ok(BinaryDataset { train, valid, test, provenance: Provenance { source, binarization_seed: seed, digests } })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(dir.join(stem), std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found")))
}

/// Binarized MNIST: the last 10,000 training images form the validation split,
/// the official test file the test split.
pub fn load_mnist(dir: impl AsRef<Path>, seed: u64) -> Result<BinaryDataset> {
    let dir = dir.as_ref();
    let train_raw = load_idx(find_idx(dir, "train-images-idx3-ubyte")?)?;
    let test_raw = load_idx(find_idx(dir, "t10k-images-idx3-ubyte")?)?;
    let all = binarize(&train_raw, crate::rng::derive_seed(seed, 0))?;
    let test = binarize(&test_raw, crate::rng::derive_seed(seed, 1))?;
    if all.len() != MNIST_TRAIN + MNIST_VALID || test.len() != MNIST_TEST {
        return Err(Error::Format(format!(
            "expected {} training and {MNIST_TEST} test images, found {} and {}",
            MNIST_TRAIN + MNIST_VALID,
            all.len(),
            test.len()
        )));
    }
    let train = all.slice(0..MNIST_TRAIN);
    let valid = all.slice(MNIST_TRAIN..MNIST_TRAIN + MNIST_VALID);
    BinaryDataset::new(train, valid, test, format!("mnist:{}", dir.display()), Some(seed))
}

/// Images sampled from a generative SBN, with the generator kept for diagnostics.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub images: BinaryImages,
    pub generator: ModelParams,
}

pub const SYNTHETIC_MAX_DIM: usize = 64;

/// Random generator SBN with two latent layers (`4-8`) over `dim` pixels.
pub fn random_generator(dim: usize, seed: u64) -> Result<ModelParams> {
    let topology = Topology::new(dim, vec![8, 4], Direction::Generative)?;
    let mut gen = ModelParams::zeros(topology);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Normal::new(0.0, 2.0).expect("valid normal");
    let biases = Normal::new(0.0, 1.0).expect("valid normal");
    for layer in &mut gen.layers {
        layer.weight.mapv_inplace(|_| weights.sample(&mut rng));
        layer.bias.mapv_inplace(|_| biases.sample(&mut rng));
    }
    if let Some(top) = &mut gen.top_logits {
        top.mapv_inplace(|_| biases.sample(&mut rng));
    }
    Ok(gen)
}

/// Draws `num_images` images from `generator`.
pub fn sample_images(generator: &ModelParams, num_images: usize, seed: u64) -> Result<BinaryImages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = Vec::with_capacity(num_images * generator.topology.data_dim());
    for _ in 0..num_images {
        let (x, _) = sample_generative(generator, &mut rng)?;
        bits.extend(x.iter().map(|&v| v as u8));
    }
    BinaryImages::from_bits(generator.topology.data_dim(), bits)
}

pub fn synthetic_dataset(num_images: usize, dim: usize, generator_seed: u64) -> Result<SyntheticDataset> {
    if num_images == 0 || dim == 0 || dim > SYNTHETIC_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs >= 1 image and 1..={SYNTHETIC_MAX_DIM} pixels, got {num_images} x {dim}"
        )));
    }
    let generator = random_generator(dim, generator_seed)?;
    let images = sample_images(&generator, num_images, crate::rng::derive_seed(generator_seed, 1))?;
    Ok(SyntheticDataset { images, generator })
}

/// Synthetic splits drawn from one generator.
pub fn synthetic_splits(train: usize, valid: usize, test: usize, dim: usize, seed: u64) -> Result<BinaryDataset> {
    let data = synthetic_dataset(train + valid + test, dim, seed)?;
    let images = data.images;
    BinaryDataset::new(
        images.slice(0..train),
        images.slice(train..train + valid),
        images.slice(train + valid..train + valid + test),
        format!("synthetic:dim={dim},seed={seed}"),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, rows: usize, cols: usize, fill: u8) -> IdxTensor {
        IdxTensor { dims: vec![n, rows, cols], data: vec![fill; n * rows * cols] }
    }

    #[test]
    fn idx_round_trip() {
        let t = IdxTensor { dims: vec![3, 2, 2], data: (0..12).collect() };
        assert_eq!(parse_idx(&t.to_bytes()).unwrap(), t);
        let labels = IdxTensor { dims: vec![4], data: vec![1, 2, 3, 9] };
        assert_eq!(parse_idx(&labels.to_bytes()).unwrap(), labels);
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = images(1, 2, 2, 0).to_bytes();
        bytes[3] = 0x02;
        let err = parse_idx(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000802"), "{err}");
    }

    #[test]
    fn truncation_reports_counts() {
        let bytes = images(2, 28, 28, 7).to_bytes();
        let err = parse_idx(&bytes[..bytes.len() - 100]).unwrap_err().to_string();
        assert!(err.contains("expected 1568") && err.contains("found 1468"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(parse_idx(&long).is_err());
        assert!(parse_idx(&bytes[..6]).is_err());
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let t = images(5, 3, 3, 200);
        let path = dir.path().join("x.idx.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&t.to_bytes()).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&path).unwrap(), t);
    }

    #[test]
    fn binarization_extremes_and_determinism() {
        let mut raw = images(10, 2, 2, 0);
        for i in 0..10 {
            raw.data[4 * i + 1] = 255;
        }
        let b = binarize(&raw, 3).unwrap();
        for i in 0..10 {
            assert_eq!(b.row(i), &[0, 1, 0, 0]);
        }
        let raw = images(50, 4, 4, 128);
        assert_eq!(binarize(&raw, 11).unwrap().digest(), binarize(&raw, 11).unwrap().digest());
        assert_ne!(binarize(&raw, 11).unwrap().digest(), binarize(&raw, 12).unwrap().digest());
    }

    #[test]
    fn binarization_rate() {
        let raw = IdxTensor { dims: vec![100_000, 1, 1], data: vec![128; 100_000] };
        let b = binarize(&raw, 5).unwrap();
        let p = 128.0 / 255.0;
        let rate = b.pixel_means()[0];
        let se = (p * (1.0 - p) / 100_000.0f64).sqrt();
        assert!((rate - p).abs() < 4.0 * se, "{rate}");
    }

    #[test]
    fn synthetic_sizes() {
        let d = synthetic_dataset(100, 3, 1).unwrap();
        assert_eq!(d.images.len(), 100);
        assert_eq!(d.images.dim(), 3);
        assert!(synthetic_dataset(10, 65, 1).is_err());
        assert!(synthetic_dataset(0, 3, 1).is_err());
    }

    #[test]
    fn saturated_generator_gives_all_ones() {
        let mut gen = random_generator(4, 2).unwrap();
        gen.layers[0].weight.fill(0.0);
        gen.layers[0].bias.fill(40.0);
        let imgs = sample_images(&gen, 50, 3).unwrap();
        assert!((0..50).all(|i| imgs.row(i) == [1, 1, 1, 1]));
    }

    #[test]
    fn splits_are_disjoint_slices() {
        let d = synthetic_splits(30, 10, 5, 6, 9).unwrap();
        assert_eq!((d.train.len(), d.valid.len(), d.test.len()), (30, 10, 5));
        let whole = synthetic_dataset(45, 6, 9).unwrap().images;
        assert_eq!(d.valid.row(0), whole.row(30));
        assert_eq!(d.test.row(4), whole.row(44));
        assert_eq!(d.provenance.digests.len(), 3);
    }
}
