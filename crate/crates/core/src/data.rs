//! Synthetic shifted domains, CSV persistence and seeded batching.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the run seed for the target domain's draws.
pub const TARGET_SEED_OFFSET: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `n x d`.
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub domain_tag: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, num_classes: usize, domain_tag: impl Into<String>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape("dataset", format!("features must be n x d, got {:?}", features.shape())));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("dataset features must be finite".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {} rows", labels.len(), features.rows()),
                ));
            }
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::LabelOutOfRange { row, label, num_classes });
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Copy without labels, as an adaptation run sees the target domain.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Two interleaved half-circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1 - cos t, 0.5 - sin t)`, `t` evenly spaced over `[0, pi]`.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("two-moons needs a positive even n, got {n}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be non-negative, got {noise_sd}")));
    }
    let half = n / 2;
    let angle = |i: usize| if half > 1 { PI * i as f64 / (half - 1) as f64 } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = angle(i);
        data.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..half {
        let t = angle(i);
        data.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_sd > 0.0 {
        for v in &mut data {
            *v += noise_sd * normal(&mut rng);
        }
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, Some(labels), 2, "two-moons")
}

/// Rotates 2-d features about the origin.
pub fn rotate_domain(ds: &Dataset, angle_degrees: f64) -> Result<Dataset> {
    if ds.dim() != 2 {
        return Err(Error::InvalidArgument(format!("rotation needs 2-d features, got {}", ds.dim())));
    }
    let (s, c) = angle_degrees.to_radians().sin_cos();
    let mut features = ds.features.clone();
    for row in features.data_mut().chunks_mut(2) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    Ok(Dataset {
        features,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        domain_tag: format!("{}+rot{}", ds.domain_tag, angle_degrees),
    })
}

/// Default shifted benchmark: `n` source moons and `n` target moons drawn
/// from a separate seed stream and rotated by `angle_degrees`.
pub fn two_moons_shift(n: usize, noise_sd: f64, angle_degrees: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let source = gen_two_moons(n, noise_sd, seed)?;
    let target = gen_two_moons(n, noise_sd, seed.wrapping_add(TARGET_SEED_OFFSET))?;
    Ok((source, rotate_domain(&target, angle_degrees)?))
}

fn blob_centers(k: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut center = vec![0.0; d];
            if d == 1 {
                center[0] = separation * c as f64;
            } else {
                let a = 2.0 * PI * c as f64 / k as f64;
                center[0] = separation * a.cos();
                center[1] = separation * a.sin();
            }
            center
        })
        .collect()
}

/// `K` unit-variance Gaussian blobs in `shift.len()` dimensions. The target
/// redraws the noise and maps every point through `x -> scale * x + shift`.
pub fn gen_blobs_shift(
    n: usize,
    k: usize,
    separation: f64,
    shift: &[f64],
    scale: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if k < 2 || shift.is_empty() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need K >= 2, n >= 1 and a non-empty shift (K={k}, n={n})"
        )));
    }
    let d = shift.len();
    let centers = blob_centers(k, d, separation);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let draw = |seed: u64, affine: &dyn Fn(usize, f64) -> f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for (j, &c) in centers[y].iter().enumerate() {
                data.push(affine(j, c + normal(&mut rng)));
            }
        }
        Tensor::matrix(n, d, data)
    };
    let source = draw(seed, &|_, v| v)?;
    let target = draw(seed.wrapping_add(TARGET_SEED_OFFSET), &|j, v| scale * v + shift[j])?;
    Ok((
        Dataset::new(source, Some(labels.clone()), k, "blobs")?,
        Dataset::new(target, Some(labels), k, "blobs+shift")?,
    ))
}

/// Writes `f0..f{d-1}[,label]` with shortest round-trip decimal floats.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    for (i, row) in ds.features.iter_rows().enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = &ds.labels {
            record.push(labels[i].to_string());
        }
        w.write_record(&record).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`save_csv`]. Without `num_classes` the class count
/// is one more than the largest label (zero for unlabeled files).
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, num_classes, &path.display().to_string())
}

pub fn parse_csv(text: &str, num_classes: Option<usize>, tag: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let labeled = names.last() == Some(&"label");
    let d = names.len() - usize::from(labeled);
    for (j, name) in names.iter().take(d).enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected column f{j}, found {name:?}"),
            });
        }
    }
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            detail: e.to_string(),
        })?;
        if record.len() != names.len() {
            return Err(Error::Parse {
                line,
                detail: format!("row {} has {} fields, expected {}", i + 1, record.len(), names.len()),
            });
        }
        for (j, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("row {}: f{j} is not a number: {cell:?}", i + 1),
            })?;
            data.push(v);
        }
        if labeled {
            let cell = record[d].trim();
            let y: usize = cell.parse().map_err(|_| Error::Parse {
                line,
                detail: format!("row {}: label is not a class index: {cell:?}", i + 1),
            })?;
            if num_classes.is_some_and(|k| y >= k) {
                return Err(Error::Parse {
                    line,
                    detail: format!("row {}: label {y} out of range for {} classes", i + 1, num_classes.unwrap_or(0)),
                });
            }
            labels.push(y);
        }
    }
    let n = data.len() / d;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Tensor::matrix(n, d, data)?;
    Dataset::new(features, labeled.then_some(labels), k, tag).map_err(|e| match e {
        Error::InvalidArgument(detail) => Error::Parse { line: 0, detail },
        other => other,
    })
}

/// Row indices of one epoch: a permutation seeded by `(seed, epoch)` cut
/// into consecutive batches; the last one may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_balanced_and_on_circles_without_noise() {
        let ds = gen_two_moons(200, 0.0, 3).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&y| y == 0).count(), 100);
        for (row, &y) in ds.features.iter_rows().zip(labels) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if y == 0 {
                assert!(row[1] >= -1e-12);
            } else {
                assert!(row[1] <= 0.5 + 1e-12);
            }
        }
        assert_eq!(gen_two_moons(200, 0.1, 5).unwrap(), gen_two_moons(200, 0.1, 5).unwrap());
        assert!(gen_two_moons(201, 0.1, 5).is_err());
    }

    #[test]
    fn rotation_cases() {
        let ds = Dataset::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), None, 0, "x").unwrap();
        let r = rotate_domain(&ds, 90.0).unwrap();
        assert!(r.features.max_abs_diff(&Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap()) < 1e-12);
        assert_eq!(rotate_domain(&ds, 0.0).unwrap().features, ds.features);
        let moons = gen_two_moons(50, 0.1, 1).unwrap();
        let back = rotate_domain(&rotate_domain(&moons, 30.0).unwrap(), -30.0).unwrap();
        assert!(back.features.max_abs_diff(&moons.features) < 1e-12);
        let d3 = Dataset::new(Tensor::zeros(&[2, 3]), None, 0, "x").unwrap();
        assert!(rotate_domain(&d3, 10.0).is_err());
    }

    #[test]
    fn blobs_have_balanced_labels_and_shifted_law() {
        let (s, t) = gen_blobs_shift(101, 3, 5.0, &[0.0, 0.0], 1.0, 2).unwrap();
        let labels = s.labels.as_ref().unwrap();
        let counts: Vec<usize> = (0..3).map(|k| labels.iter().filter(|&&y| y == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_ne!(s.features, t.features);
        let (_, t2) = gen_blobs_shift(101, 3, 5.0, &[10.0, 0.0], 1.0, 2).unwrap();
        for (a, b) in t.features.iter_rows().zip(t2.features.iter_rows()) {
            assert!((b[0] - a[0] - 10.0).abs() < 1e-12 && (b[1] - a[1]).abs() < 1e-12);
        }
        assert!(gen_blobs_shift(10, 1, 1.0, &[0.0], 1.0, 0).is_err());
    }

    #[test]
    fn csv_parse_errors_name_the_row() {
        let ragged = "f0,f1,label\n1,2,0\n3,1\n";
        match parse_csv(ragged, None, "t") {
            Err(Error::Parse { line: 3, detail }) => assert!(detail.contains("row 2")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv("f0,label\nx,0\n", None, "t"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("f0,label\n1.0,5\n", Some(2), "t"), Err(Error::Parse { line: 2, .. })));
        let unlabeled = parse_csv("f0,f1\n1,2\n3,4\n", Some(2), "t").unwrap();
        assert!(unlabeled.labels.is_none());
        assert_eq!(unlabeled.features.shape(), &[2, 2]);
    }

    #[test]
    fn batches_partition_a_permutation() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 4, 1, 0).unwrap(), b);
        assert_ne!(batches(10, 4, 1, 1).unwrap(), b);
        assert_eq!(batches(5, 50, 1, 0).unwrap().len(), 1);
        assert!(batches(5, 0, 1, 0).is_err());
    }
}
