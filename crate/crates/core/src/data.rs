//! Synthetic domain-shift datasets, CSV ingestion and seeded splits.
//!
//! CSV layout: a header `f0,f1,...,fD` optionally followed by `label`, then
//! one sample per row. Values use a decimal point; labels are non-negative
//! integers. [`save_csv`] prints 17 significant digits so a save/load round
//! trip is exact.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub domain_id: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain_id: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            domain_id,
            name: name.into(),
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

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::usage(format!("dataset '{}' has no labels", self.name)))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain_id: self.domain_id,
            name: self.name.clone(),
        }
    }

    /// Drops labels, as seen by source-free adaptation.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_domain(mut self, domain_id: usize, name: impl Into<String>) -> Self {
        self.domain_id = domain_id;
        self.name = name.into();
        self
    }

    /// Fails when a label falls outside `[0, classes)`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(bad) = l.iter().position(|&y| y >= classes) {
                return Err(Error::config(format!(
                    "dataset '{}' sample {bad} has label {} outside [0, {classes})",
                    self.name, l[bad]
                )));
            }
        }
        Ok(())
    }
}

fn rotate(points: &mut Matrix, degrees: f64) {
    let deg = degrees.rem_euclid(360.0);
    if deg == 0.0 {
        return;
    }
    let (s, c) = deg.to_radians().sin_cos();
    for r in 0..points.rows() {
        let row = points.row_mut(r);
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
}

/// Two interleaved half circles with Gaussian noise, rotated about the
/// origin by `rotation_deg`. Class 0 holds `⌈n/2⌉` points.
pub fn gen_two_moons(n: usize, noise_sd: f64, rotation_deg: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::config(format!("two moons needs n >= 4, got {n}")));
    }
    if noise_sd.is_nan() || noise_sd < 0.0 {
        return Err(Error::config("noise must be non-negative"));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n / 2;
    let mut rng = Rng::with_stream(seed, 0x6d6f_6f6e);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let pi = std::f64::consts::PI;
    for i in 0..n_upper {
        let t = pi * i as f64 / (n_upper - 1).max(1) as f64;
        data.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = pi * i as f64 / (n_lower - 1).max(1) as f64;
        data.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_sd > 0.0 {
        for v in data.iter_mut() {
            *v += noise_sd * rng.normal();
        }
    }
    let mut features = Matrix::new(n, 2, data)?;
    rotate(&mut features, rotation_deg);
    Dataset::new(
        features,
        Some(labels),
        0,
        format!("two_moons_{rotation_deg}deg"),
    )
}

/// Isotropic Gaussian clusters around `centers[c] + shift[c]` with
/// `counts[c]` points in class `c`.
pub fn gen_blobs_with_counts(
    counts: &[usize],
    centers: &[Vec<f64>],
    shift: Option<&[Vec<f64>]>,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let c = centers.len();
    if c < 2 {
        return Err(Error::config("blobs need at least two centers"));
    }
    if counts.len() != c {
        return Err(Error::config("one count per center is required"));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|x| x.len() != dim) {
        return Err(Error::config("centers must share a positive dimension"));
    }
    if let Some(s) = shift {
        if s.len() != c || s.iter().any(|x| x.len() != dim) {
            return Err(Error::config("shift must match centers"));
        }
    }
    if spread.is_nan() || spread < 0.0 {
        return Err(Error::config("spread must be non-negative"));
    }
    let mut rng = Rng::with_stream(seed, 0x626c_6f62);
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, (&count, center)) in counts.iter().zip(centers).enumerate() {
        for _ in 0..count {
            for j in 0..dim {
                let offset = shift.map_or(0.0, |s| s[class][j]);
                let noise = if spread > 0.0 {
                    spread * rng.normal()
                } else {
                    0.0
                };
                data.push(center[j] + offset + noise);
            }
            labels.push(class);
        }
    }
    Dataset::new(Matrix::new(n, dim, data)?, Some(labels), 0, "blobs")
}

/// Balanced blobs: class sizes differ by at most one.
pub fn gen_blobs(
    n: usize,
    centers: &[Vec<f64>],
    shift: Option<&[Vec<f64>]>,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let c = centers.len().max(1);
    let counts: Vec<usize> = (0..c).map(|i| n / c + usize::from(i < n % c)).collect();
    gen_blobs_with_counts(&counts, centers, shift, spread, seed)
}

/// Reads a dataset laid out as described in the module docs. With
/// `classes`, labels must fall in `[0, classes)`.
pub fn load_csv(path: &Path, has_labels: bool, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let mut names: Vec<&str> = header.iter().collect();
    if has_labels {
        if names.last() != Some(&"label") {
            return Err(Error::Parse {
                line: 1,
                msg: "expected a trailing 'label' column".into(),
            });
        }
        names.pop();
    }
    if names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }
    for (j, name) in names.iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column {j} is '{name}', expected 'f{j}'"),
            });
        }
    }
    let dim = names.len();
    let width = dim + usize::from(has_labels);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} cells, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cell {j} '{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("cell {j} is not finite"),
                });
            }
            data.push(v);
        }
        if has_labels {
            let cell = &record[dim];
            let y: usize = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("label '{cell}' is not a non-negative integer"),
            })?;
            if let Some(c) = classes {
                if y >= c {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label {y} outside [0, {c})"),
                    });
                }
            }
            labels.push(y);
        }
    }
    let n = data.len() / dim;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Matrix::new(n, dim, data)?,
        has_labels.then_some(labels),
        0,
        name,
    )
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        if let Some(l) = &ds.labels {
            row.push(l[i].to_string());
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

/// Seeded train/test split. Both parts keep the original sample order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut rng = Rng::with_stream(spec.seed, 0x7370_6c69);
    let mut train = Vec::new();
    if spec.stratified {
        let labels = ds.labels()?;
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        for c in 0..classes {
            let mut members: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < 2 {
                return Err(Error::config(format!(
                    "class {c} has {} sample(s); stratified split needs at least 2",
                    members.len()
                )));
            }
            rng.shuffle(&mut members);
            let take = ((members.len() as f64 * spec.train_fraction).round() as usize)
                .clamp(1, members.len() - 1);
            train.extend_from_slice(&members[..take]);
        }
    } else {
        let mut all: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut all);
        let take = (ds.len() as f64 * spec.train_fraction).round() as usize;
        train.extend_from_slice(&all[..take.min(ds.len())]);
    }
    train.sort_unstable();
    let mut in_train = vec![false; ds.len()];
    train.iter().for_each(|&i| in_train[i] = true);
    let test: Vec<usize> = (0..ds.len()).filter(|&i| !in_train[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "split of {} samples at fraction {} leaves an empty part",
            ds.len(),
            spec.train_fraction
        )));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Per-feature z-scoring fitted on one dataset (the source).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::config("cannot fit a standardizer on no samples"));
        }
        let mean = ds.features.column_means();
        let mut var = vec![0.0; ds.dim()];
        for r in ds.features.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let n = ds.len() as f64;
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::shape("standardizer dimension mismatch"));
        }
        let mut out = ds.clone();
        for r in 0..out.len() {
            for (j, x) in out.features.row_mut(r).iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(m: &Matrix) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..m.rows() {
            for j in i + 1..m.rows() {
                let dx = m[(i, 0)] - m[(j, 0)];
                let dy = m[(i, 1)] - m[(j, 1)];
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
        out
    }

    #[test]
    fn moons_rotation_properties() {
        let a = gen_two_moons(41, 0.1, 0.0, 3).unwrap();
        let b = gen_two_moons(41, 0.1, 360.0, 3).unwrap();
        assert_eq!(a.features, b.features);
        let r = gen_two_moons(41, 0.1, 45.0, 3).unwrap();
        for (x, y) in pairwise(&a.features).iter().zip(pairwise(&r.features)) {
            assert!((x - y).abs() < 1e-9);
        }
        let l = a.labels().unwrap();
        assert_eq!(l.iter().filter(|&&y| y == 0).count(), 21);
        assert_eq!(l.iter().filter(|&&y| y == 1).count(), 20);
        assert!(gen_two_moons(3, 0.1, 0.0, 1).is_err());
    }

    #[test]
    fn moons_are_seed_pure() {
        assert_eq!(
            gen_two_moons(50, 0.2, 30.0, 8).unwrap(),
            gen_two_moons(50, 0.2, 30.0, 8).unwrap()
        );
        assert_ne!(
            gen_two_moons(50, 0.2, 30.0, 8).unwrap(),
            gen_two_moons(50, 0.2, 30.0, 9).unwrap()
        );
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn unshifted_blobs_share_marginals() {
        let centers = vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 2.0]];
        let zero = vec![vec![0.0, 0.0]; 3];
        let n = 600;
        // two-sample KS critical value at alpha = 0.001
        let crit = 1.95 * (2.0 / n as f64).sqrt();
        for seed in 0..5 {
            let s = gen_blobs(n, &centers, None, 0.5, seed).unwrap();
            let t = gen_blobs(n, &centers, Some(&zero), 0.5, seed + 100).unwrap();
            for j in 0..2 {
                let col = |d: &Dataset| d.features.row_iter().map(|r| r[j]).collect::<Vec<_>>();
                assert!(ks_statistic(&col(&s), &col(&t)) < crit);
            }
        }
    }

    #[test]
    fn blobs_balanced_and_degenerate() {
        let centers = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, -3.0]];
        let ds = gen_blobs(100, &centers, None, 0.0, 1).unwrap();
        let l = ds.labels().unwrap();
        for c in 0..3 {
            let count = l.iter().filter(|&&y| y == c).count();
            assert!((33..=34).contains(&count));
        }
        for (r, &y) in ds.features.row_iter().zip(l) {
            assert_eq!(r, centers[y].as_slice());
        }
        assert!(gen_blobs(10, &centers[..1], None, 0.1, 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_two_moons(30, 0.3, 17.0, 4).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, true, Some(2)).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_hand_written_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "f0,f1\n1,2\n3.5,-4\n0.25,1e3\n").unwrap();
        let ds = load_csv(&p, false, None).unwrap();
        assert_eq!(ds.features.shape(), (3, 2));
        assert_eq!(ds.features.data(), &[1.0, 2.0, 3.5, -4.0, 0.25, 1000.0]);
        assert!(matches!(
            load_csv(&p, true, None),
            Err(Error::Parse { line: 1, .. })
        ));

        std::fs::write(&p, "f0,f1,label\n1,2,0\n3,4\n").unwrap();
        assert!(matches!(
            load_csv(&p, true, None),
            Err(Error::Parse { line: 3, .. })
        ));
        std::fs::write(&p, "f0,f1,label\n1,x,0\n").unwrap();
        assert!(matches!(
            load_csv(&p, true, None),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&p, "f0,f1,label\n1,2,0\n1,2,5\n").unwrap();
        assert!(matches!(
            load_csv(&p, true, Some(3)),
            Err(Error::Parse { line: 3, .. })
        ));
        std::fs::write(&p, "f0,f1,label\n1,2,-1\n").unwrap();
        assert!(matches!(
            load_csv(&p, true, None),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&p, "x,f1\n1,2\n").unwrap();
        assert!(matches!(
            load_csv(&p, false, None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), false, None),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = gen_two_moons(100, 0.1, 0.0, 1).unwrap();
        for stratified in [false, true] {
            let spec = SplitSpec {
                train_fraction: 0.9,
                seed: 5,
                stratified,
            };
            let (tr, te) = split(&ds, &spec).unwrap();
            assert_eq!((tr.len(), te.len()), (90, 10));
            let mut rows: Vec<Vec<u64>> = tr
                .features
                .row_iter()
                .chain(te.features.row_iter())
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            let mut orig: Vec<Vec<u64>> = ds
                .features
                .row_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            orig.sort();
            assert_eq!(rows, orig);
            let again = split(&ds, &spec).unwrap();
            assert_eq!(again.0, tr);
            assert_eq!(again.1, te);
        }
    }

    #[test]
    fn stratified_keeps_proportions() {
        let centers = vec![vec![0.0], vec![1.0], vec![2.0]];
        let ds = gen_blobs_with_counts(&[50, 30, 7], &centers, None, 0.1, 2).unwrap();
        let (tr, _) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.8,
                seed: 1,
                stratified: true,
            },
        )
        .unwrap();
        let l = tr.labels().unwrap();
        for (c, n) in [(0, 50.0), (1, 30.0), (2, 7.0)] {
            let got = l.iter().filter(|&&y| y == c).count() as f64;
            assert!((got - 0.8 * n).abs() <= 1.0);
        }
        let tiny = gen_blobs_with_counts(&[5, 1], &centers[..2], None, 0.1, 2).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.5,
            seed: 1,
            stratified: true,
        };
        assert!(matches!(split(&tiny, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn standardizer_uses_fit_statistics() {
        let s = gen_two_moons(200, 0.1, 0.0, 1).unwrap();
        let t = gen_two_moons(200, 0.1, 45.0, 2).unwrap();
        let z = Standardizer::fit(&s).unwrap();
        let s2 = z.apply(&s).unwrap();
        for m in s2.features.column_means() {
            assert!(m.abs() < 1e-12);
        }
        let t2 = z.apply(&t).unwrap();
        assert_eq!(
            t2.features[(0, 0)],
            (t.features[(0, 0)] - z.mean[0]) / z.std[0]
        );
    }
}
