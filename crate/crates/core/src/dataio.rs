//! Paired datasets: the TSDS binary format, delimited-text import,
//! per-feature standardisation and seeded train/validation splits.
//!
//! TSDS layout (little-endian): magic `TSDS`, `u32` version, `u64` record
//! count, `u32` z width, `u32` x width, z names then x names (each a `u32`
//! byte length and UTF-8 bytes), then the z matrix and the x matrix as
//! row-major `f64`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"TSDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{space} matrix has {len} values, not a multiple of width {width}")]
    Extent { space: Space, len: usize, width: usize },
    #[error("z has {z} records but x has {x}")]
    RowMismatch { z: usize, x: usize },
    #[error("{space} space has no features")]
    NoFeatures { space: Space },
    #[error("duplicate feature name {name:?} in {space} space")]
    DuplicateName { space: Space, name: String },
    #[error("{path}: line {line}, column {column} ({name}): cannot parse {value:?} as a number")]
    NonNumeric {
        path: PathBuf,
        line: u64,
        column: usize,
        name: String,
        value: String,
    },
    #[error("{path}: line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("standardisation needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("feature {name:?} in {space} space is constant")]
    ConstantFeature { space: Space, name: String },
    #[error("width mismatch in {space} space: standardizer has {expected}, data has {actual}")]
    WidthMismatch { space: Space, expected: usize, actual: usize },
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("split of {n} records at fraction {fraction} leaves one side empty")]
    EmptySplit { n: usize, fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Z,
    X,
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Z => "z",
            Space::X => "x",
        })
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    z_names: Vec<String>,
    x_names: Vec<String>,
    z: Vec<f64>,
    x: Vec<f64>,
}

fn check_names(space: Space, names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(DataError::NoFeatures { space });
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(DataError::DuplicateName {
                space,
                name: n.clone(),
            });
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(z_names: Vec<String>, x_names: Vec<String>, z: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        check_names(Space::Z, &z_names)?;
        check_names(Space::X, &x_names)?;
        for (space, m, w) in [(Space::Z, &z, z_names.len()), (Space::X, &x, x_names.len())] {
            if m.len() % w != 0 {
                return Err(DataError::Extent {
                    space,
                    len: m.len(),
                    width: w,
                });
            }
        }
        let (nz, nx) = (z.len() / z_names.len(), x.len() / x_names.len());
        if nz != nx {
            return Err(DataError::RowMismatch { z: nz, x: nx });
        }
        Ok(Self {
            n: nz,
            z_names,
            x_names,
            z,
            x,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn z_width(&self) -> usize {
        self.z_names.len()
    }

    pub fn x_width(&self) -> usize {
        self.x_names.len()
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Row-major z matrix.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        let w = self.z_width();
        &self.z[i * w..(i + 1) * w]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let w = self.x_width();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn z_column(&self, j: usize) -> Vec<f64> {
        self.z.iter().skip(j).step_by(self.z_width()).copied().collect()
    }

    pub fn x_column(&self, j: usize) -> Vec<f64> {
        self.x.iter().skip(j).step_by(self.x_width()).copied().collect()
    }

    /// Records at `indices`, in that order; pairs stay together.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut z = Vec::with_capacity(indices.len() * self.z_width());
        let mut x = Vec::with_capacity(indices.len() * self.x_width());
        for &i in indices {
            z.extend_from_slice(self.z_row(i));
            x.extend_from_slice(self.x_row(i));
        }
        Dataset {
            n: indices.len(),
            z_names: self.z_names.clone(),
            x_names: self.x_names.clone(),
            z,
            x,
        }
    }

    /// First `n` records (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.n)).collect();
        self.select(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.n as u64);
        w.u32(self.z_width() as u32);
        w.u32(self.x_width() as u32);
        for name in self.z_names.iter().chain(&self.x_names) {
            w.str(name);
        }
        w.f64s(&self.z);
        w.f64s(&self.x);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION)?;
        let n = r.usize()?;
        let zw = r.u32()? as usize;
        let xw = r.u32()? as usize;
        let mut names = Vec::with_capacity(zw + xw);
        for _ in 0..zw + xw {
            names.push(r.str()?);
        }
        let x_names = names.split_off(zw);
        let size = |w: usize| {
            n.checked_mul(w)
                .ok_or_else(|| r.invalid(format!("record count {n} overflows")))
        };
        let (zs, xs) = (size(zw)?, size(xw)?);
        let z = r.f64s(zs)?;
        let x = r.f64s(xs)?;
        r.finish()?;
        Dataset::new(names, x_names, z, x)
    }
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, d.to_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::from_bytes(&bytes)
}

/// Header plus numeric rows from a comma- or tab-separated file. The
/// delimiter is a tab if the header line contains one, otherwise a comma.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let first = text.lines().next().unwrap_or("");
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != names.len() {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: names.len(),
                found: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                path: path.to_path_buf(),
                line,
                column: j + 1,
                name: names[j].clone(),
                value: cell.to_owned(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((names, values, rows))
}

/// Pair row `i` of the z file with row `i` of the x file.
pub fn import_csv(z_path: &Path, x_path: &Path) -> Result<Dataset> {
    let (z_names, z, nz) = read_table(z_path)?;
    let (x_names, x, nx) = read_table(x_path)?;
    if nz != nx {
        return Err(DataError::RowMismatch { z: nz, x: nx });
    }
    Dataset::new(z_names, x_names, z, x)
}

/// Per-feature affine map to zero mean and unit population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
}

fn column_stats(space: Space, m: &[f64], n: usize, names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = names.len();
    let mut mean = vec![0.0; w];
    for row in m.chunks_exact(w) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; w];
    for row in m.chunks_exact(w) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let mut std = Vec::with_capacity(w);
    for (j, v) in var.into_iter().enumerate() {
        let s = (v / n as f64).sqrt();
        if !(s > 1e-12 * mean[j].abs().max(1e-300)) {
            return Err(DataError::ConstantFeature {
                space,
                name: names[j].clone(),
            });
        }
        std.push(s);
    }
    Ok((mean, std))
}

fn affine(m: &mut [f64], mean: &[f64], std: &[f64], forward: bool) {
    for row in m.chunks_exact_mut(mean.len()) {
        for ((v, mu), s) in row.iter_mut().zip(mean).zip(std) {
            *v = if forward { (*v - mu) / s } else { *v * s + mu };
        }
    }
}

impl Standardizer {
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.len() < 2 {
            return Err(DataError::TooFewRecords(d.len()));
        }
        let (z_mean, z_std) = column_stats(Space::Z, &d.z, d.n, &d.z_names)?;
        let (x_mean, x_std) = column_stats(Space::X, &d.x, d.n, &d.x_names)?;
        Ok(Self {
            z_mean,
            z_std,
            x_mean,
            x_std,
        })
    }

    /// Identity map for the given widths.
    pub fn identity(z_width: usize, x_width: usize) -> Self {
        Self {
            z_mean: vec![0.0; z_width],
            z_std: vec![1.0; z_width],
            x_mean: vec![0.0; x_width],
            x_std: vec![1.0; x_width],
        }
    }

    fn check(&self, d: &Dataset) -> Result<()> {
        for (space, expected, actual) in [
            (Space::Z, self.z_mean.len(), d.z_width()),
            (Space::X, self.x_mean.len(), d.x_width()),
        ] {
            if expected != actual {
                return Err(DataError::WidthMismatch {
                    space,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        self.check(d)?;
        let mut out = d.clone();
        affine(&mut out.z, &self.z_mean, &self.z_std, true);
        affine(&mut out.x, &self.x_mean, &self.x_std, true);
        Ok(out)
    }

    pub fn invert(&self, d: &Dataset) -> Result<Dataset> {
        self.check(d)?;
        let mut out = d.clone();
        affine(&mut out.z, &self.z_mean, &self.z_std, false);
        affine(&mut out.x, &self.x_mean, &self.x_std, false);
        Ok(out)
    }

    /// Row-major matrix of the given space, in place.
    pub fn apply_rows(&self, space: Space, m: &mut [f64]) {
        match space {
            Space::Z => affine(m, &self.z_mean, &self.z_std, true),
            Space::X => affine(m, &self.x_mean, &self.x_std, true),
        }
    }

    pub fn invert_rows(&self, space: Space, m: &mut [f64]) {
        match space {
            Space::Z => affine(m, &self.z_mean, &self.z_std, false),
            Space::X => affine(m, &self.x_mean, &self.x_std, false),
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.z_mean.len() as u64);
        w.u64(self.x_mean.len() as u64);
        w.f64s(&self.z_mean);
        w.f64s(&self.z_std);
        w.f64s(&self.x_mean);
        w.f64s(&self.x_std);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> std::result::Result<Self, FormatError> {
        let zw = r.usize()?;
        let xw = r.usize()?;
        Ok(Self {
            z_mean: r.f64s(zw)?,
            z_std: r.f64s(zw)?,
            x_mean: r.f64s(xw)?,
            x_std: r.f64s(xw)?,
        })
    }
}

/// Seeded shuffle, then the first `round(n * fraction)` records train.
pub fn split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n_train = (d.len() as f64 * fraction).round() as usize;
    if n_train == 0 || n_train == d.len() {
        return Err(DataError::EmptySplit { n: d.len(), fraction });
    }
    let perm = rng::permutation(&mut rng::stream(seed, 0), d.len());
    Ok((d.select(&perm[..n_train]), d.select(&perm[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// Column 0 of both spaces holds the record id, so pairing can be audited.
    fn tagged(n: usize) -> Dataset {
        let mut z = Vec::new();
        let mut x = Vec::new();
        for i in 0..n {
            let f = i as f64;
            z.extend([f, f.sin() * 3.0, f * f]);
            x.extend([f, (f * 0.7).cos()]);
        }
        Dataset::new(names("z", 3), names("x", 2), z, x).unwrap()
    }

    fn paired(d: &Dataset) -> bool {
        (0..d.len()).all(|i| d.z_row(i)[0] == d.x_row(i)[0])
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let d = tagged(100);
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert!(d.z().iter().zip(back.z()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsds");
        write_dataset(&d, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset::new(names("z", 2), names("x", 1), vec![], vec![]).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.z_width(), 2);
    }

    #[test]
    fn truncated_file_reports_lengths() {
        let bytes = tagged(4).to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match Dataset::from_bytes(cut) {
            Err(DataError::Format(FormatError::Truncated { expected, actual, .. })) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, cut.len());
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(DataError::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = Dataset::new(vec!["a".into(), "a".into()], names("x", 1), vec![], vec![]);
        assert!(matches!(r, Err(DataError::DuplicateName { .. })));
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn csv_import_pairs_rows() {
        let dir = tempfile::tempdir().unwrap();
        let z = write_file(dir.path(), "z.csv", "a,b\n1,2\n3,4\n");
        let x = write_file(dir.path(), "x.tsv", "c\td\n1.5e2\t-2\n0.25\t1E-3\n");
        let d = import_csv(&z, &x).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.x_names(), ["c", "d"]);
        assert_eq!(d.x_row(0), [150.0, -2.0]);
        assert_eq!(d.x_row(1)[1], 0.001);
    }

    #[test]
    fn csv_import_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ten: String = std::iter::once("a\n".to_string()).chain((0..10).map(|i| format!("{i}\n"))).collect();
        let nine: String = std::iter::once("b\n".to_string()).chain((0..9).map(|i| format!("{i}\n"))).collect();
        let z = write_file(dir.path(), "z.csv", &ten);
        let x = write_file(dir.path(), "x.csv", &nine);
        assert!(matches!(import_csv(&z, &x), Err(DataError::RowMismatch { z: 10, x: 9 })));

        let bad = write_file(dir.path(), "bad.csv", "a,b\n1,2\n3,oops\n");
        match import_csv(&bad, &bad) {
            Err(DataError::NonNumeric { line, column, name, .. }) => {
                assert_eq!((line, column, name.as_str()), (3, 2, "b"));
            }
            other => panic!("{other:?}"),
        }
        let dup = write_file(dir.path(), "dup.csv", "a,a\n1,2\n");
        assert!(matches!(import_csv(&dup, &dup), Err(DataError::DuplicateName { .. })));
    }

    #[test]
    fn standardizer_basic_and_inverse() {
        let d = Dataset::new(names("z", 1), names("x", 1), vec![0.0, 2.0], vec![5.0, 7.0]).unwrap();
        let s = Standardizer::fit(&d).unwrap();
        assert_eq!((s.z_mean[0], s.z_std[0]), (1.0, 1.0));
        assert_eq!(s.apply(&d).unwrap().z(), [-1.0, 1.0]);

        let d = tagged(200);
        let s = Standardizer::fit(&d).unwrap();
        let t = s.apply(&d).unwrap();
        for j in 0..t.z_width() {
            let c = t.z_column(j);
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        let back = s.invert(&t).unwrap();
        for (a, b) in back.z().iter().chain(back.x()).zip(d.z().iter().chain(d.x())) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn standardizer_rejects_constant_and_tiny() {
        let d = Dataset::new(names("z", 1), names("x", 1), vec![3.0, 3.0], vec![1.0, 2.0]).unwrap();
        match Standardizer::fit(&d) {
            Err(DataError::ConstantFeature { space: Space::Z, name }) => assert_eq!(name, "z0"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Standardizer::fit(&tagged(1)), Err(DataError::TooFewRecords(1))));
    }

    #[test]
    fn applying_to_validation_leaves_fit_untouched() {
        let (train, val) = split(&tagged(50), 0.8, 1).unwrap();
        let s = Standardizer::fit(&train).unwrap();
        let before = s.clone();
        s.apply(&val).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn split_sizes_determinism_and_partition() {
        let d = tagged(10);
        let (a, b) = split(&d, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, _) = split(&d, 0.8, 3).unwrap();
        assert_eq!(a, a2);
        assert!(paired(&a) && paired(&b));
        let mut ids: Vec<f64> = a.z_column(0).into_iter().chain(b.z_column(0)).collect();
        ids.sort_by(f64::total_cmp);
        assert_eq!(ids, d.z_column(0));
        assert!(matches!(split(&d, 0.01, 3), Err(DataError::EmptySplit { .. })));
        assert!(matches!(split(&d, 1.0, 3), Err(DataError::BadFraction(_))));
    }
}
