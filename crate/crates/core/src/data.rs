//! Dataset ingestion: IDX files (MNIST layout), synthetic Gaussian blobs,
//! min-max normalisation and one-hot targets.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, FormatErrorKind, Result};
use crate::matrix::DenseMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images and labels as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// `count * height * width` pixels, image-major, row-major within an image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl RawDataset {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
        classes: usize,
    ) -> Result<Self> {
        let pixels = height * width;
        if pixels == 0 || classes == 0 {
            return Err(Error::invalid(
                "image dimensions and class count must be positive",
            ));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::format(
                FormatErrorKind::CountMismatch,
                format!(
                    "{} pixel bytes for {} labels of {height}x{width}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= classes)
        {
            return Err(Error::format(
                FormatErrorKind::LabelRange,
                format!("label {l} at index {i} is not below {classes} classes"),
            ));
        }
        Ok(RawDataset {
            count: labels.len(),
            height,
            width,
            images,
            labels,
            classes,
        })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.height * self.width;
        &self.images[i * p..(i + 1) * p]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> RawDataset {
        let n = n.min(self.count);
        let p = self.height * self.width;
        RawDataset {
            count: n,
            height: self.height,
            width: self.width,
            images: self.images[..n * p].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::format(
                FormatErrorKind::Truncated,
                format!("file ends inside the {what} field"),
            )
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::format(
            FormatErrorKind::BadMagic,
            format!("magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let body = bytes.len() - header;
    if body < expected {
        return Err(Error::format(
            FormatErrorKind::Truncated,
            format!("{body} data bytes, header declares {expected}"),
        ));
    }
    if body > expected {
        return Err(Error::format(
            FormatErrorKind::TrailingBytes,
            format!("{} bytes past the declared data", body - expected),
        ));
    }
    Ok(())
}

/// Parses an IDX3 image file. Returns `(count, height, width, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let height = be_u32(bytes, 8, "height")? as usize;
    let width = be_u32(bytes, 12, "width")? as usize;
    let total = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(FormatErrorKind::InvalidValue, "declared size overflows"))?;
    check_body(bytes, 16, total)?;
    Ok((count, height, width, bytes[16..].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    check_body(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images<W: Write>(
    mut w: W,
    count: usize,
    height: usize,
    width: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * height * width {
        return Err(Error::dim(format!(
            "{} pixels for {count} images of {height}x{width}",
            pixels.len()
        )));
    }
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [count, height, width] {
        let d = u32::try_from(d)
            .map_err(|_| Error::invalid(format!("dimension {d} does not fit IDX")))?;
        w.write_all(&d.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> Result<()> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::invalid("too many labels for IDX"))?;
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Loads an image file and its label file. Labels must be below `classes`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: usize,
) -> Result<RawDataset> {
    let (count, h, w, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::format(
            FormatErrorKind::CountMismatch,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    RawDataset::new(h, w, pixels, labels, classes)
}

/// Per-feature affine map onto `[0, 1]`. Constant features map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: &DenseMatrix) -> Self {
        let mut min = x.row(0).to_vec();
        let mut max = min.clone();
        for i in 1..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        MinMaxScaler { min, max }
    }

    /// Same range `[lo, hi]` for every one of `dim` features.
    pub fn fixed(dim: usize, lo: f64, hi: f64) -> Self {
        MinMaxScaler {
            min: vec![lo; dim],
            max: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Values outside the fitted range are not clipped.
    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.dim() {
            return Err(Error::dim(format!(
                "scaler fitted on {} features, got {}",
                self.dim(),
                x.cols()
            )));
        }
        Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            let span = self.max[j] - self.min[j];
            if span > 0.0 {
                (x[(i, j)] - self.min[j]) / span
            } else {
                0.0
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// Fit min and max on the data itself.
    Fit,
    /// Reuse a scaler, e.g. the training set's for test data.
    Using(MinMaxScaler),
}

/// Normalised features with one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub scaling: MinMaxScaler,
}

impl Dataset {
    pub fn new(
        x: DenseMatrix,
        labels: Vec<usize>,
        classes: usize,
        scaling: MinMaxScaler,
    ) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let y = one_hot(&labels, classes)?;
        Ok(Dataset {
            x,
            y,
            labels,
            classes,
            scaling,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<DenseMatrix> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::invalid(
            "one-hot encoding needs labels and at least one class",
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {l} is not below {classes} classes"
        )));
    }
    Ok(DenseMatrix::from_fn(labels.len(), classes, |i, j| {
        if labels[i] == j {
            1.0
        } else {
            0.0
        }
    }))
}

/// Flattens images into rows and normalises them.
pub fn to_dataset(raw: &RawDataset, normalization: Normalization) -> Result<Dataset> {
    if raw.count == 0 {
        return Err(Error::invalid("dataset has no samples"));
    }
    let p = raw.height * raw.width;
    let x = DenseMatrix::new(
        raw.count,
        p,
        raw.images.iter().map(|&b| f64::from(b)).collect(),
    )?;
    let scaling = match normalization {
        Normalization::Fit => MinMaxScaler::fit(&x),
        Normalization::Using(s) => s,
    };
    let x = scaling.transform(&x)?;
    Dataset::new(
        x,
        raw.labels.iter().map(|&l| l as usize).collect(),
        raw.classes,
        scaling,
    )
}

/// Unnormalised Gaussian blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub points: DenseMatrix,
    pub labels: Vec<usize>,
    pub centers: DenseMatrix,
}

/// Draws `samples_per_class` points around each of `classes` centers with
/// unit standard deviation per coordinate. Center `k` sits at
/// `k * separation` along a random unit direction, so centers are pairwise
/// at least `separation` apart. Points are shuffled.
pub fn synthetic_blobs_raw(
    classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Blobs> {
    if classes == 0 || samples_per_class == 0 || dim == 0 {
        return Err(Error::invalid(
            "classes, samples per class and dim must be positive",
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::invalid(format!(
            "separation must be finite and nonnegative, got {separation}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let direction = loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
        }
    };
    let centers = DenseMatrix::from_fn(classes, dim, |k, j| k as f64 * separation * direction[j]);
    let (points, labels) = draw_points(&centers, samples_per_class, &mut rng)?;
    Ok(Blobs {
        points,
        labels,
        centers,
    })
}

fn draw_points<R: Rng>(
    centers: &DenseMatrix,
    per_class: usize,
    rng: &mut R,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let (classes, dim) = centers.shape();
    let mut labels: Vec<usize> = (0..classes)
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &k in &labels {
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centers[(k, j)] + noise);
        }
    }
    Ok((DenseMatrix::new(labels.len(), dim, data)?, labels))
}

/// Normalised, one-hot encoded blobs. See [`synthetic_blobs_raw`].
pub fn synthetic_blobs(
    classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let b = synthetic_blobs_raw(classes, samples_per_class, dim, separation, seed)?;
    blobs_dataset(b.points, b.labels, classes, Normalization::Fit)
}

fn blobs_dataset(
    points: DenseMatrix,
    labels: Vec<usize>,
    classes: usize,
    normalization: Normalization,
) -> Result<Dataset> {
    let scaling = match normalization {
        Normalization::Fit => MinMaxScaler::fit(&points),
        Normalization::Using(s) => s,
    };
    Dataset::new(scaling.transform(&points)?, labels, classes, scaling)
}

/// A training set and an independent test set drawn around the same centers.
/// The test set is normalised with the training set's scaler.
pub fn synthetic_blobs_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if test_per_class == 0 {
        return Err(Error::invalid(
            "test set needs at least one sample per class",
        ));
    }
    let b = synthetic_blobs_raw(classes, train_per_class, dim, separation, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (test_points, test_labels) = draw_points(&b.centers, test_per_class, &mut rng)?;
    let train = blobs_dataset(b.points, b.labels, classes, Normalization::Fit)?;
    let test = blobs_dataset(
        test_points,
        test_labels,
        classes,
        Normalization::Using(train.scaling.clone()),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        write_idx_images(&mut images, 2, 2, 2, &[0, 0, 0, 0, 255, 128, 1, 2]).unwrap();
        let mut labels = Vec::new();
        write_idx_labels(&mut labels, &[3, 7]).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let (images, labels) = fixture();
        assert_eq!(&images[..4], &[0, 0, 8, 3]);
        assert_eq!(&labels[..4], &[0, 0, 8, 1]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, &images).unwrap();
        fs::write(&lp, &labels).unwrap();
        let raw = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!((raw.count, raw.height, raw.width), (2, 2, 2));
        assert_eq!(raw.image(1), &[255, 128, 1, 2]);
        assert_eq!(raw.labels, vec![3, 7]);
    }

    #[test]
    fn idx_format_errors() {
        let (images, labels) = fixture();
        let kind = |r: Result<()>| r.unwrap_err().format_kind();
        assert_eq!(
            kind(parse_idx_images(&images[..images.len() - 1]).map(|_| ())),
            Some(FormatErrorKind::Truncated)
        );
        assert_eq!(
            kind(parse_idx_images(&images[..6]).map(|_| ())),
            Some(FormatErrorKind::Truncated)
        );
        assert_eq!(
            kind(parse_idx_images(&labels).map(|_| ())),
            Some(FormatErrorKind::BadMagic)
        );
        let mut long = labels.clone();
        long.push(0);
        assert_eq!(
            kind(parse_idx_labels(&long).map(|_| ())),
            Some(FormatErrorKind::TrailingBytes)
        );
        assert_eq!(
            kind(RawDataset::new(1, 1, vec![0], vec![255], 10).map(|_| ())),
            Some(FormatErrorKind::LabelRange)
        );
        assert_eq!(
            kind(RawDataset::new(1, 1, vec![0, 1], vec![1], 10).map(|_| ())),
            Some(FormatErrorKind::CountMismatch)
        );
    }

    #[test]
    fn normalisation_examples() {
        let raw = RawDataset::new(1, 2, vec![0, 0, 255, 0, 0, 0], vec![3, 0, 9], 10).unwrap();
        let fixed = to_dataset(
            &raw,
            Normalization::Using(MinMaxScaler::fixed(2, 0.0, 255.0)),
        )
        .unwrap();
        assert_eq!(fixed.x.row(0), &[0.0, 0.0]);
        assert_eq!(fixed.x.row(1), &[1.0, 0.0]);
        let fitted = to_dataset(&raw, Normalization::Fit).unwrap();
        // the second pixel is constant and maps to 0
        assert_eq!(fitted.x.column(1), vec![0.0; 3]);
        assert_eq!(
            fitted.y.row(0),
            &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(fitted.labels, vec![3, 0, 9]);
    }

    #[test]
    fn blobs_are_deterministic_and_separated() {
        let a = synthetic_blobs_raw(3, 20, 4, 5.0, 11).unwrap();
        assert_eq!(a, synthetic_blobs_raw(3, 20, 4, 5.0, 11).unwrap());
        assert_ne!(
            a.points,
            synthetic_blobs_raw(3, 20, 4, 5.0, 12).unwrap().points
        );
        for k in 0..3 {
            for l in k + 1..3 {
                let d: f64 = (0..4)
                    .map(|j| (a.centers[(k, j)] - a.centers[(l, j)]).powi(2))
                    .sum();
                assert!(d.sqrt() >= 5.0 - 1e-12);
            }
            assert_eq!(a.labels.iter().filter(|&&x| x == k).count(), 20);
        }
        let ds = synthetic_blobs(3, 20, 4, 5.0, 11).unwrap();
        assert!(ds.x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.len(), 60);
    }

    #[test]
    fn split_shares_centers_but_not_points() {
        let (train, test) = synthetic_blobs_split(2, 50, 30, 3, 6.0, 4).unwrap();
        assert_eq!((train.len(), test.len()), (100, 60));
        assert_eq!(train.scaling, test.scaling);
        assert_eq!(train, synthetic_blobs(2, 50, 3, 6.0, 4).unwrap());
    }
}
