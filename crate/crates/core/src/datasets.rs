//! Image datasets: IDX ingestion (optionally gzip-wrapped), synthetic ID/OOD
//! generators, and decoder-specific preprocessing.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::likelihoods::DecoderKind;
use crate::numerics::{SeededRng, Stream, Tensor};

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Environment variable naming the root of the `data/<name>/...` layout.
pub const DATA_ROOT_ENV: &str = "HVAE_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("wrong magic 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension sizes {0:?} overflow")]
    DimensionOverflow(Vec<u32>),
    #[error("label count {labels} does not match image count {images}")]
    LabelCount { images: usize, labels: usize },
    #[error("unknown generator `{0}` (expected blobs, stripes or noise)")]
    UnknownGenerator(String),
    #[error("dataset is empty")]
    Empty,
    #[error("subsample size {n} outside 1..={available}")]
    SubsampleSize { n: usize, available: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),
    #[error("no {kind} file for dataset `{name}` split `{split}` under {root}")]
    Missing { kind: &'static str, name: String, split: String, root: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Where a dataset's pixels came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    IdxFile { path: String, checksum: String },
    Synthetic { generator: String, seed: u64 },
    Derived { parent: Box<Provenance>, step: String },
}

/// `n` images of shape `(H, W, C)` with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    shape: [usize; 3],
    data: Vec<f64>,
    labels: Option<Vec<u8>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(name: &str, n: usize, shape: [usize; 3], data: Vec<f64>, provenance: Provenance) -> Result<Self, DataError> {
        if n == 0 || shape.contains(&0) {
            return Err(DataError::Empty);
        }
        let expected = n * shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(DataError::Truncated { expected, found: data.len() });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange(bad));
        }
        Ok(Dataset { name: name.to_string(), shape, data, labels: None, provenance })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// The whole set as an `(n, H, W, C)` tensor.
    pub fn tensor(&self) -> Tensor {
        let [h, w, c] = self.shape;
        Tensor::new(&[self.len(), h, w, c], self.data.clone()).expect("dataset shape")
    }

    /// Flattened `[indices.len(), pixels]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), self.pixels()], data).expect("batch shape")
    }

    /// SHA-256 over shape and pixel values; identifies the exact data a
    /// report was computed on.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.len(), self.shape[0], self.shape[1], self.shape[2]] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }

    fn derived(&self, step: String, data: Vec<f64>, labels: Option<Vec<u8>>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            shape: self.shape,
            data,
            labels,
            provenance: Provenance::Derived { parent: Box::new(self.provenance.clone()), step },
        }
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX u8 tensor: big-endian magic, dimension sizes, raw bytes.
fn parse_idx(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8]), DataError> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: header, found: bytes.len() });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(DataError::WrongMagic { expected: magic, found });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated { expected: header, found: bytes.len() });
    }
    let raw_dims: Vec<u32> =
        (0..ndims).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"))).collect();
    let count = raw_dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|c| c.checked_add(header).is_some())
        .ok_or_else(|| DataError::DimensionOverflow(raw_dims.clone()))?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(DataError::Truncated { expected: count, found: payload.len() });
    }
    Ok((raw_dims.iter().map(|&d| d as usize).collect(), &payload[..count]))
}

/// Loads an IDX image file (`n x rows x cols`, u8) and optional label file.
/// Either may be gzip-compressed. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset, DataError> {
    let bytes = read_maybe_gzip(images_path)?;
    let (dims, payload) = parse_idx(&bytes, IDX_MAGIC_IMAGES, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Empty);
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let mut h = Sha256::new();
    h.update(&bytes);
    let name = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let provenance = Provenance::IdxFile { path: images_path.display().to_string(), checksum: hex_digest(h) };
    let mut ds = Dataset::new(&name, n, [rows, cols, 1], data, provenance)?;
    if let Some(lp) = labels_path {
        let lbytes = read_maybe_gzip(lp)?;
        let (ldims, lpayload) = parse_idx(&lbytes, IDX_MAGIC_LABELS, 1)?;
        if ldims[0] != n {
            return Err(DataError::LabelCount { images: n, labels: ldims[0] });
        }
        ds.labels = Some(lpayload.to_vec());
    }
    Ok(ds)
}

fn maybe_gzip(bytes: Vec<u8>, gzip: bool) -> Vec<u8> {
    if !gzip {
        return bytes;
    }
    use flate2::write::GzEncoder;
    use std::io::Write;
    let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(&bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

/// Encodes single-channel images as IDX u8 bytes (`round(v * 255)`).
pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let [h, w, c] = ds.shape;
    let (rows, cols) = (h, w * c);
    let mut out = Vec::with_capacity(16 + ds.data.len());
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes `ds` as an IDX image file, gzip-compressed when asked.
pub fn write_idx(ds: &Dataset, path: &Path, gzip: bool) -> Result<(), DataError> {
    fs::write(path, maybe_gzip(encode_idx_images(ds), gzip)).map_err(io_err(path))
}

pub fn write_idx_labels(labels: &[u8], path: &Path, gzip: bool) -> Result<(), DataError> {
    fs::write(path, maybe_gzip(encode_idx_labels(labels), gzip)).map_err(io_err(path))
}

/// Image and optional label paths for `<root>/<name>/<split>-{images,labels}.idx[.gz]`.
pub fn named_paths(root: &Path, name: &str, split: &str) -> Result<(PathBuf, Option<PathBuf>), DataError> {
    let find = |kind: &str| -> Option<PathBuf> {
        ["idx", "idx.gz"]
            .iter()
            .map(|ext| root.join(name).join(format!("{split}-{kind}.{ext}")))
            .find(|p| p.exists())
    };
    let images = find("images").ok_or_else(|| DataError::Missing {
        kind: "images",
        name: name.to_string(),
        split: split.to_string(),
        root: root.display().to_string(),
    })?;
    Ok((images, find("labels")))
}

/// Built-in image generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One to three Gaussian bumps at random positions.
    Blobs,
    /// A single oriented sinusoid grating.
    Stripes,
    /// Independent uniform pixels.
    Noise,
}

impl std::str::FromStr for Generator {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "blobs" => Ok(Generator::Blobs),
            "stripes" => Ok(Generator::Stripes),
            "noise" => Ok(Generator::Noise),
            other => Err(DataError::UnknownGenerator(other.to_string())),
        }
    }
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Blobs => "blobs",
            Generator::Stripes => "stripes",
            Generator::Noise => "noise",
        }
    }

    fn draw(self, [h, w, c]: [usize; 3], rng: &mut SeededRng, out: &mut Vec<f64>) {
        let size = h.max(w) as f64;
        let mut plane = vec![0.0; h * w];
        match self {
            Generator::Blobs => {
                let bumps = 1 + rng.below(3);
                for _ in 0..bumps {
                    let cy = rng.uniform_range(0.15, 0.85) * h as f64;
                    let cx = rng.uniform_range(0.15, 0.85) * w as f64;
                    let sigma = rng.uniform_range(0.08, 0.2) * size;
                    let amp = rng.uniform_range(0.6, 1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            plane[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            Generator::Stripes => {
                let theta = rng.uniform_range(0.0, std::f64::consts::PI);
                let freq = rng.uniform_range(1.5, 4.0);
                let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                let (s, co) = theta.sin_cos();
                for y in 0..h {
                    for x in 0..w {
                        let t = (x as f64 * co + y as f64 * s) / size;
                        plane[y * w + x] = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * t + phase).sin();
                    }
                }
            }
            Generator::Noise => plane.iter_mut().for_each(|v| *v = rng.uniform()),
        }
        for v in plane {
            let v = v.clamp(0.0, 1.0);
            out.extend(std::iter::repeat_n(v, c));
        }
    }
}

/// `n` images from one generator; deterministic in `seed`.
pub fn synthesize(generator: Generator, shape: [usize; 3], n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = SeededRng::for_stream(seed, Stream::Data);
    let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
    for _ in 0..n {
        generator.draw(shape, &mut rng, &mut data);
    }
    Dataset::new(generator.name(), n, shape, data, Provenance::Synthetic { generator: generator.name().into(), seed })
}

/// Parameters for [`synth_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    pub n: usize,
    pub id_generator: String,
    pub ood_generator: String,
    pub seed: u64,
}

/// ID and OOD sets from independent derived seeds. With the same generator
/// on both sides the two sets are exchangeable.
pub fn synth_pair(spec: &SynthSpec) -> Result<(Dataset, Dataset), DataError> {
    let id_gen: Generator = spec.id_generator.parse()?;
    let ood_gen: Generator = spec.ood_generator.parse()?;
    let base = SeededRng::new(spec.seed);
    let id = synthesize(id_gen, spec.shape, spec.n, base.derive(0).next_u64())?;
    let ood = synthesize(ood_gen, spec.shape, spec.n, base.derive(1).next_u64())?;
    Ok((id, ood))
}

/// Largest value below 1.0.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Binarizes (Bernoulli decoders) or dequantizes (continuous decoders).
pub fn preprocess(ds: &Dataset, decoder: DecoderKind, rng: &mut SeededRng) -> Dataset {
    let (step, data): (&str, Vec<f64>) = if decoder.is_binary() {
        ("binarize", ds.data.iter().map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 }).collect())
    } else {
        ("dequantize", ds.data.iter().map(|&p| (p + rng.uniform() / 256.0).min(BELOW_ONE)).collect())
    };
    ds.derived(format!("{step}(seed={})", rng.seed()), data, ds.labels.clone())
}

/// Seeded uniform sample of `n` images without replacement, kept in original
/// order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || n > ds.len() {
        return Err(DataError::SubsampleSize { n, available: ds.len() });
    }
    let mut rng = SeededRng::for_stream(seed, Stream::Data);
    let idx = rng.sample_indices(ds.len(), n);
    let p = ds.pixels();
    let mut data = Vec::with_capacity(n * p);
    for &i in &idx {
        data.extend_from_slice(ds.image(i));
    }
    let labels = ds.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
    Ok(ds.derived(format!("subsample(n={n},seed={seed})"), data, labels))
}
