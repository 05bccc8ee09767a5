//! Datasets: IDX ingestion, pixel normalisation, batching and a synthetic
//! linear manifold with closed-form projection oracles.

use std::path::Path;

use thiserror::Error;

use crate::linalg::orthonormalize_columns;
use crate::mlp::{Activation, MlpNetwork};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor, TensorError, Transpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated header: {available} bytes, need {needed}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("truncated payload: header declares {expected} bytes, {available} present")]
    TruncatedPayload { expected: usize, available: usize },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dataset is already normalised")]
    AlreadyNormalized,
    #[error("dataset is not normalised")]
    NotNormalized,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// Bytes `0..=255` stored as reals.
    Raw,
    /// `[-1, 1]`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `[count x rows*cols]`, one flattened image per row.
    pub images: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub range: PixelRange,
    pub split: Split,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per image.
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// The first `count` images.
    pub fn take(&self, count: usize) -> Result<ImageDataset> {
        if count > self.len() {
            return Err(DataError::Invalid(format!("asked for {count} of {} images", self.len())));
        }
        Ok(ImageDataset {
            images: self.images.slice_rows(0, count)?,
            ..self.clone()
        })
    }
}

/// Either payload an IDX file can carry.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxContents {
    Images(ImageDataset),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn header(bytes: &[u8], dims: usize, expected: Option<u32>) -> Result<(u32, Vec<usize>)> {
    let needed = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::TruncatedHeader {
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    if let Some(expected) = expected.filter(|&e| e != magic) {
        return Err(DataError::BadMagic { found: magic, expected });
    }
    if bytes.len() < needed {
        return Err(DataError::TruncatedHeader {
            needed,
            available: bytes.len(),
        });
    }
    Ok((magic, (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect()))
}

fn payload<'b>(bytes: &'b [u8], offset: usize, dims: &[usize]) -> Result<&'b [u8]> {
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::DimOverflow(format!("{dims:?} does not fit in memory")))?;
    let available = bytes.len() - offset;
    if available < len {
        return Err(DataError::TruncatedPayload { expected: len, available });
    }
    if available > len {
        return Err(DataError::TrailingBytes(available - len));
    }
    Ok(&bytes[offset..])
}

/// Parses an IDX image file (`u8` pixels, magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8], split: Split) -> Result<ImageDataset> {
    let (_, dims) = header(bytes, 3, Some(IDX_IMAGES_MAGIC))?;
    let [count, rows, cols] = [dims[0], dims[1], dims[2]];
    if rows == 0 || cols == 0 {
        return Err(DataError::DimOverflow(format!("degenerate image size {rows}x{cols}")));
    }
    let data = payload(bytes, 16, &dims)?;
    let pixels: Vec<f64> = data.iter().map(|&b| f64::from(b)).collect();
    Ok(ImageDataset {
        images: Tensor::new(&[count, rows * cols], pixels)?,
        rows,
        cols,
        range: PixelRange::Raw,
        split,
    })
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, dims) = header(bytes, 1, Some(IDX_LABELS_MAGIC))?;
    Ok(payload(bytes, 8, &dims)?.to_vec())
}

/// Dispatches on the magic number.
pub fn parse_idx(bytes: &[u8], split: Split) -> Result<IdxContents> {
    let (magic, _) = header(bytes, 0, None)?;
    match magic {
        IDX_IMAGES_MAGIC => parse_idx_images(bytes, split).map(IdxContents::Images),
        IDX_LABELS_MAGIC => parse_idx_labels(bytes).map(IdxContents::Labels),
        found => Err(DataError::BadMagic {
            found,
            expected: IDX_IMAGES_MAGIC,
        }),
    }
}

pub fn load_idx_images(path: impl AsRef<Path>, split: Split) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx_images(&bytes, split)
}

pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(DataError::Invalid(format!(
            "{} pixels for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn normalize_pixel(p: f64) -> f64 {
    p / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounded and clamped to a byte.
pub fn denormalize_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Maps raw pixels to `[-1, 1]` via `p / 127.5 - 1`.
pub fn normalize_images(raw: &ImageDataset) -> Result<ImageDataset> {
    if raw.range == PixelRange::Normalized {
        return Err(DataError::AlreadyNormalized);
    }
    Ok(ImageDataset {
        images: raw.images.map(normalize_pixel),
        range: PixelRange::Normalized,
        ..raw.clone()
    })
}

pub fn denormalize_images(ds: &ImageDataset) -> Result<ImageDataset> {
    if ds.range == PixelRange::Raw {
        return Err(DataError::NotNormalized);
    }
    Ok(ImageDataset {
        images: ds.images.map(|v| f64::from(denormalize_pixel(v))),
        range: PixelRange::Raw,
        ..ds.clone()
    })
}

/// Row indices of one epoch: a seeded permutation cut into batches of
/// `batch_size`, keeping the last partial batch.
pub fn epoch_batches(count: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be positive".into()));
    }
    Ok(rng.permutation(count).chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// The affine subspace `{W z + b}` with orthonormal `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticManifold {
    /// `[n x k]`.
    pub w: Tensor,
    /// `[n]`.
    pub b: Tensor,
    pub seed: u64,
}

pub fn make_synthetic_manifold(n: usize, k: usize, rng: &mut Rng) -> Result<SyntheticManifold> {
    if k == 0 || k > n {
        return Err(DataError::Invalid(format!("manifold needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let seed = rng.seed();
    let w = orthonormalize_columns(&rng.gaussian(&[n, k], 0.0, 1.0)?)?;
    let b = rng.gaussian(&[n], 0.0, 0.5)?;
    Ok(SyntheticManifold { w, b, seed })
}

impl SyntheticManifold {
    pub fn n(&self) -> usize {
        self.w.rows()
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    /// `W z + b` per row of `z`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        Ok(gemm(z, Transpose::No, &self.w, Transpose::Yes)?.add_row_vector(&self.b)?)
    }

    /// `W^T (x - b)` per row of `x`.
    pub fn exact_pinv(&self, x: &Tensor) -> Result<Tensor> {
        let centred = x.add_row_vector(&self.b.scale(-1.0))?;
        Ok(gemm(&centred, Transpose::No, &self.w, Transpose::No)?)
    }

    /// Orthogonal projection `W W^T (x - b) + b` per row of `x`.
    pub fn exact_project(&self, x: &Tensor) -> Result<Tensor> {
        self.generate(&self.exact_pinv(x)?)
    }

    /// `count` manifold points with their latent codes.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let z = rng.gaussian(&[count, self.k()], 0.0, 1.0)?;
        let x = self.generate(&z)?;
        Ok((z, x))
    }

    /// The generator as a single identity-activation affine layer.
    pub fn generator_network(&self) -> MlpNetwork {
        MlpNetwork::from_params(
            &[self.k(), self.n()],
            &[Activation::Identity],
            0,
            vec![self.w.clone()],
            vec![self.b.clone()],
        )
        .expect("shapes derived from the manifold")
    }

    /// The exact pseudo-inverse `x -> W^T x - W^T b` as a network.
    pub fn pinv_network(&self) -> MlpNetwork {
        let wt = self.w.transpose().expect("rank-2 basis");
        let bias = wt.matvec(self.b.data()).expect("matching width");
        MlpNetwork::from_params(
            &[self.n(), self.k()],
            &[Activation::Identity],
            0,
            vec![wt],
            vec![Tensor::vector(&bias).scale(-1.0)],
        )
        .expect("shapes derived from the manifold")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(count: usize) -> Vec<u8> {
        let px: Vec<u8> = (0..count * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        write_idx_images(count, 4, 3, &px).unwrap()
    }

    #[test]
    fn idx_round_trip_preserves_bytes() {
        let bytes = fixture(5);
        let ds = parse_idx_images(&bytes, Split::Train).unwrap();
        assert_eq!((ds.len(), ds.rows, ds.cols), (5, 4, 3));
        let back: Vec<u8> = ds.images.data().iter().map(|&v| v as u8).collect();
        assert_eq!(write_idx_images(5, 4, 3, &back).unwrap(), bytes);
    }

    #[test]
    fn over_declared_count_is_truncated_payload() {
        let mut bytes = fixture(5);
        bytes[4..8].copy_from_slice(&10u32.to_be_bytes());
        let err = parse_idx_images(&bytes, Split::Test).unwrap_err();
        assert!(matches!(err, DataError::TruncatedPayload { .. }));
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn wrong_magic_and_overflow_are_distinct() {
        let labels = write_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_images(&labels, Split::Train),
            Err(DataError::BadMagic { .. })
        ));
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 2, 3]);
        let mut bytes = fixture(1);
        for at in [4, 8, 12] {
            bytes[at..at + 4].copy_from_slice(&u32::MAX.to_be_bytes());
        }
        let err = parse_idx_images(&bytes, Split::Train).unwrap_err();
        if usize::BITS == 64 {
            assert!(matches!(err, DataError::DimOverflow(_)), "{err}");
        }
    }

    #[test]
    fn normalisation_endpoints_and_symmetry() {
        assert_eq!(normalize_pixel(0.0), -1.0);
        assert_eq!(normalize_pixel(255.0), 1.0);
        for p in 0..=255 {
            let p = f64::from(p);
            assert!((normalize_pixel(255.0 - p) + normalize_pixel(p)).abs() < 1e-15);
            assert_eq!(f64::from(denormalize_pixel(normalize_pixel(p))), p);
        }
        let ds = parse_idx_images(&fixture(2), Split::Train).unwrap();
        let n = normalize_images(&ds).unwrap();
        assert!(matches!(normalize_images(&n), Err(DataError::AlreadyNormalized)));
        assert_eq!(denormalize_images(&n).unwrap(), ds);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let batches = epoch_batches(10, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn manifold_projection_properties() {
        let mut rng = Rng::new(11);
        let m = make_synthetic_manifold(16, 4, &mut rng).unwrap();
        let wtw = gemm(&m.w, Transpose::Yes, &m.w, Transpose::No).unwrap();
        assert!(wtw.max_abs_diff(&Tensor::eye(4)).unwrap() < 1e-10);
        let x = rng.gaussian(&[3, 16], 0.0, 1.0).unwrap();
        let p = m.exact_project(&x).unwrap();
        assert!(m.exact_project(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-12);
        let (_, on) = m.sample(2, &mut rng).unwrap();
        assert!(m.exact_project(&on).unwrap().max_abs_diff(&on).unwrap() < 1e-12);
        let x0 = x.slice_rows(0, 1).unwrap();
        let d = x0.sub(&p.slice_rows(0, 1).unwrap()).unwrap().norm();
        for _ in 0..1000 {
            let z = rng.gaussian(&[1, 4], 0.0, 2.0).unwrap();
            assert!(d <= x0.sub(&m.generate(&z).unwrap()).unwrap().norm() + 1e-12);
        }
    }

    #[test]
    fn network_wrappers_match_closed_forms() {
        let mut rng = Rng::new(12);
        let m = make_synthetic_manifold(10, 3, &mut rng).unwrap();
        let x = rng.gaussian(&[4, 10], 0.0, 1.0).unwrap();
        let z = m.pinv_network().forward(&x, None).unwrap();
        assert!(z.max_abs_diff(&m.exact_pinv(&x).unwrap()).unwrap() < 1e-12);
        let g = m.generator_network().forward(&z, None).unwrap();
        assert!(g.max_abs_diff(&m.exact_project(&x).unwrap()).unwrap() < 1e-12);
        assert!(make_synthetic_manifold(3, 4, &mut rng).is_err());
    }
}
