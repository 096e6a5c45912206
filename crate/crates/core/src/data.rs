//! Synthetic generators, CSV ingestion, median-split domains and dataset
//! bundles on disk.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AubError, Result};
use crate::matrix::Matrix;
use crate::numeric::SeededRng;
use crate::scalar::Scalar;

/// One domain's train/validation/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset<T> {
    pub name: String,
    pub train: Matrix<T>,
    pub val: Matrix<T>,
    pub test: Matrix<T>,
    pub dim: usize,
    pub provenance: String,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn new(name: impl Into<String>, train: Matrix<T>, val: Matrix<T>, test: Matrix<T>, provenance: impl Into<String>) -> Result<Self> {
        let dim = train.ncols();
        for (split, m) in [("val", &val), ("test", &test)] {
            if m.ncols() != dim {
                return Err(AubError::Shape(format!("{split} split has width {} but train has {dim}", m.ncols())));
            }
        }
        for (split, m) in [("train", &train), ("val", &val), ("test", &test)] {
            if let Some((r, c)) = m.first_non_finite() {
                return Err(AubError::NonFinite(format!("{split} split at row {r}, column {c}")));
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            val,
            test,
            dim,
            provenance: provenance.into(),
        })
    }

    /// Splits shuffled rows 80/10/10: `floor(0.8n)`, `floor(0.1n)`, rest.
    pub fn from_rows(name: impl Into<String>, rows: &Matrix<T>, rng: &mut SeededRng, provenance: impl Into<String>) -> Result<Self> {
        let (tr, va, te) = split_indices(rows.nrows(), rng);
        Self::new(name, rows.select_rows(&tr), rows.select_rows(&va), rows.select_rows(&te), provenance)
    }

    pub fn cast<U: Scalar>(&self) -> DomainDataset<U> {
        DomainDataset {
            name: self.name.clone(),
            train: self.train.cast(),
            val: self.val.cast(),
            test: self.test.cast(),
            dim: self.dim,
            provenance: self.provenance.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.train.nrows() + self.val.nrows() + self.test.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint index sets covering `0..n` in the 80/10/10 proportions.
pub fn split_indices(n: usize, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(n);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    (
        perm[..n_train].to_vec(),
        perm[n_train..n_train + n_val].to_vec(),
        perm[n_train + n_val..].to_vec(),
    )
}

/// Interleaved half circles of radius 1. The upper moon is
/// `(cos t, sin t)`; the lower is `(1 - cos t, 0.5 - sin t)`, `t ~ U[0, pi]`.
/// `n` points per moon.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<[DomainDataset<f64>; 2]> {
    if n < 10 {
        return Err(AubError::InvalidArgument(format!("moons need n >= 10, got {n}")));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(AubError::InvalidArgument(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut moon = |lower: bool| -> Result<DomainDataset<f64>> {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let t = rng.uniform(0.0, std::f64::consts::PI);
            let (x, y) = if lower {
                (1.0 - t.cos(), 0.5 - t.sin())
            } else {
                (t.cos(), t.sin())
            };
            data.push(x + noise_sd * rng.normal::<f64>());
            data.push(y + noise_sd * rng.normal::<f64>());
        }
        let rows = Matrix::new(n, 2, data)?;
        let name = if lower { "lower_moon" } else { "upper_moon" };
        let prov = format!("two_moons(n={n}, noise_sd={noise_sd}, seed={seed})");
        DomainDataset::from_rows(name, &rows, &mut rng, prov)
    };
    let upper = moon(false)?;
    let lower = moon(true)?;
    Ok([upper, lower])
}

/// Isotropic Gaussian mixture with uniform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobMixture {
    pub centers: Vec<Vec<f64>>,
    pub sd: f64,
}

impl BlobMixture {
    /// Centers uniform in `[lo, hi]^dim`.
    pub fn random(n_components: usize, dim: usize, lo: f64, hi: f64, sd: f64, rng: &mut SeededRng) -> Result<Self> {
        if n_components == 0 || dim == 0 || !(lo < hi) || !(sd >= 0.0) {
            return Err(AubError::InvalidArgument(format!(
                "bad blob mixture: {n_components} components, dim {dim}, box [{lo}, {hi}], sd {sd}"
            )));
        }
        let centers = (0..n_components)
            .map(|_| (0..dim).map(|_| rng.uniform(lo, hi)).collect())
            .collect();
        Ok(Self { centers, sd })
    }

    /// Samples with their component labels.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> (Matrix<f64>, Vec<usize>) {
        let dim = self.centers[0].len();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.below(self.centers.len());
            labels.push(c);
            for &m in &self.centers[c] {
                data.push(m + self.sd * rng.normal::<f64>());
            }
        }
        (Matrix::new(n, dim, data).expect("shape is consistent"), labels)
    }
}

/// Two 2-D domains, each drawn from its own random blob mixture.
pub fn gen_blobs(n: usize, n_components: usize, lo: f64, hi: f64, sd: f64, seed: u64) -> Result<[DomainDataset<f64>; 2]> {
    if n < 10 {
        return Err(AubError::InvalidArgument(format!("blobs need n >= 10, got {n}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut domain = |j: usize| -> Result<DomainDataset<f64>> {
        let mix = BlobMixture::random(n_components, 2, lo, hi, sd, &mut rng)?;
        let (rows, _) = mix.sample(n, &mut rng);
        let prov = format!("blobs(n={n}, n_components={n_components}, box=[{lo}, {hi}], sd={sd}, seed={seed}, domain={j})");
        DomainDataset::from_rows(format!("blobs_{j}"), &rows, &mut rng, prov)
    };
    let a = domain(0)?;
    let b = domain(1)?;
    Ok([a, b])
}

/// One domain per `(mean, sd)` pair of axis-aligned Gaussians; `n` rows each.
pub fn gen_gaussians(n: usize, params: &[(Vec<f64>, Vec<f64>)], seed: u64) -> Result<Vec<DomainDataset<f64>>> {
    if n < 10 || params.is_empty() {
        return Err(AubError::InvalidArgument("need n >= 10 and at least one domain".into()));
    }
    let mut rng = SeededRng::new(seed);
    params
        .iter()
        .enumerate()
        .map(|(j, (mean, sd))| {
            if mean.is_empty() || mean.len() != sd.len() || sd.iter().any(|s| !(*s > 0.0)) {
                return Err(AubError::InvalidArgument(format!("bad Gaussian parameters for domain {j}")));
            }
            let d = mean.len();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                for (m, s) in mean.iter().zip(sd) {
                    data.push(m + s * rng.normal::<f64>());
                }
            }
            let rows = Matrix::new(n, d, data)?;
            let prov = format!("gaussian(mean={mean:?}, sd={sd:?}, n={n}, seed={seed})");
            DomainDataset::from_rows(format!("gaussian_{j}"), &rows, &mut rng, prov)
        })
        .collect()
}

/// Synthetic tabular stand-in: `n` rows of 8 columns. Columns 0..5 are
/// nonlinear, heteroscedastic functions of a 3-D latent; columns 5..8 are
/// noisy functions of the same latent and serve as split features.
pub fn gen_tabular(n: usize, seed: u64) -> Result<Matrix<f64>> {
    if n == 0 {
        return Err(AubError::InvalidArgument("tabular generator needs n > 0".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n * 8);
    for _ in 0..n {
        let u: [f64; 3] = [rng.normal(), rng.normal(), rng.normal()];
        let e: [f64; 8] = std::array::from_fn(|_| rng.normal());
        data.extend_from_slice(&[
            u[0] + 0.3 * e[0],
            0.6 * u[0] * u[0] + 0.4 * u[1] + 0.2 * e[1],
            (1.5 * u[1]).sin() + 0.5 * u[2] + 0.2 * (0.5 * u[0]).exp() * e[2],
            u[2] * (0.4 * u[0]).exp() + 0.2 * e[3],
            (u[0] + u[1]).tanh() * 2.0 + 0.3 * u[2] + 0.25 * e[4],
            u[0] + 0.5 * u[1] + 0.5 * e[5],
            u[1] - 0.5 * u[2] + 0.5 * e[6],
            u[2] + 0.5 * u[0] * u[1] + 0.5 * e[7],
        ]);
    }
    Matrix::new(n, 8, data)
}

/// A parsed CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub data: Matrix<f64>,
}

/// Parses comma-separated decimals (no quoting; `\n` or `\r\n` line ends).
pub fn parse_csv(text: &str, has_header: bool) -> Result<Table> {
    let mut header = None;
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if has_header && header.is_none() {
            header = Some(cells.iter().map(|c| c.trim().to_string()).collect::<Vec<_>>());
            cols = Some(cells.len());
            continue;
        }
        let width = *cols.get_or_insert(cells.len());
        if cells.len() != width {
            return Err(AubError::Parse {
                line: line_no,
                detail: format!("ragged row: expected {width} fields, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| AubError::Parse {
                line: line_no,
                detail: format!("row {}, column {}: '{cell}' is not a number", rows + 1, c + 1),
            })?;
            if !v.is_finite() {
                return Err(AubError::Parse {
                    line: line_no,
                    detail: format!("row {}, column {}: non-finite value", rows + 1, c + 1),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(AubError::Parse {
            line: 0,
            detail: "empty file: no data rows".into(),
        });
    }
    Ok(Table {
        header,
        data: Matrix::new(rows, cols.unwrap_or(0), data)?,
    })
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Table> {
    parse_csv(&std::fs::read_to_string(path)?, has_header)
}

/// Rows as comma-separated shortest round-trip decimals.
pub fn to_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 20);
    for row in m.rows_iter() {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// How to carve a table into domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Columns whose medians define the domains; dropped afterwards.
    pub feature_indices: Vec<usize>,
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_standardize() -> bool {
    true
}

/// `"(+-+)"`-style label of a sign pattern; bit `i` set means below the
/// median on feature `i`.
pub fn pattern_label(bits: usize, m: usize) -> String {
    let mut s = String::from("(");
    for i in 0..m {
        s.push(if bits >> (m - 1 - i) & 1 == 1 { '-' } else { '+' });
    }
    s.push(')');
    s
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Routes rows to `2^m` domains by the sign of `value - median` on each split
/// feature, drops the split features, splits each domain 80/10/10 and
/// optionally z-scores with statistics of the pooled training rows. Rows that
/// tie the median are assigned alternately above and below.
pub fn median_split(table: &Matrix<f64>, spec: &SplitSpec) -> Result<Vec<DomainDataset<f64>>> {
    let m = spec.feature_indices.len();
    if !(1..=4).contains(&m) {
        return Err(AubError::InvalidArgument(format!("median split needs 1 to 4 features, got {m}")));
    }
    let n_domains = 1usize << m;
    if table.nrows() < n_domains * 10 {
        return Err(AubError::InvalidArgument(format!(
            "{} rows cannot fill {n_domains} domains of at least 10 rows",
            table.nrows()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &f in &spec.feature_indices {
        if f >= table.ncols() || !seen.insert(f) {
            return Err(AubError::InvalidArgument(format!("split feature index {f} is out of range or repeated")));
        }
    }
    if table.ncols() == m {
        return Err(AubError::InvalidArgument("no columns remain after dropping split features".into()));
    }

    let mut codes = vec![0usize; table.nrows()];
    for (i, &f) in spec.feature_indices.iter().enumerate() {
        let col = table.column(f);
        let med = median(&mut col.clone());
        let mut tie_below = false;
        for (r, &v) in col.iter().enumerate() {
            let below = if v < med {
                true
            } else if v > med {
                false
            } else {
                let b = tie_below;
                tie_below = !tie_below;
                b
            };
            if below {
                codes[r] |= 1 << (m - 1 - i);
            }
        }
    }
    let keep: Vec<usize> = (0..table.ncols()).filter(|c| !spec.feature_indices.contains(c)).collect();
    let reduced = table.select_columns(&keep);

    let mut rng = SeededRng::new(spec.seed);
    let mut domains = Vec::with_capacity(n_domains);
    for code in 0..n_domains {
        let rows: Vec<usize> = (0..table.nrows()).filter(|&r| codes[r] == code).collect();
        let label = pattern_label(code, m);
        if rows.len() < 10 {
            return Err(AubError::InvalidArgument(format!("domain {label} received only {} rows", rows.len())));
        }
        let prov = format!(
            "median_split(features={:?}, kept_columns={keep:?}, standardize={}, seed={})",
            spec.feature_indices, spec.standardize, spec.seed
        );
        domains.push(DomainDataset::from_rows(label, &reduced.select_rows(&rows), &mut rng, prov)?);
    }
    if spec.standardize {
        let pooled: Vec<&Matrix<f64>> = domains.iter().map(|d| &d.train).collect();
        let (mean, sd) = column_stats(&Matrix::vstack(&pooled)?);
        for d in &mut domains {
            for split in [&mut d.train, &mut d.val, &mut d.test] {
                standardize_in_place(split, &mean, &sd);
            }
        }
    }
    Ok(domains)
}

/// Column means and population standard deviations; zero spread maps to 1.
pub fn column_stats(m: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = m.column_means();
    let n = m.nrows().max(1) as f64;
    let mut var = vec![0.0; m.ncols()];
    for row in m.rows_iter() {
        for (c, v) in row.iter().enumerate() {
            var[c] += (v - mean[c]).powi(2);
        }
    }
    let sd = var.iter().map(|v| if *v > 0.0 { (v / n).sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

pub fn standardize_in_place(m: &mut Matrix<f64>, mean: &[f64], sd: &[f64]) {
    let cols = m.ncols();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        let c = i % cols;
        *v = (*v - mean[c]) / sd[c];
    }
}

/// One manifest entry per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub name: String,
    pub dir: String,
    pub dim: usize,
    pub provenance: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub seed: u64,
    pub domains: Vec<DomainManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus `domain_<j>/{train,val,test}.csv`.
pub fn write_bundle(dir: impl AsRef<Path>, datasets: &[DomainDataset<f64>], seed: u64) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut domains = Vec::with_capacity(datasets.len());
    for (j, d) in datasets.iter().enumerate() {
        let sub = format!("domain_{j}");
        let path = dir.join(&sub);
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("train.csv"), to_csv(&d.train))?;
        std::fs::write(path.join("val.csv"), to_csv(&d.val))?;
        std::fs::write(path.join("test.csv"), to_csv(&d.test))?;
        domains.push(DomainManifest {
            name: d.name.clone(),
            dir: sub,
            dim: d.dim,
            provenance: d.provenance.clone(),
            n_train: d.train.nrows(),
            n_val: d.val.nrows(),
            n_test: d.test.nrows(),
        });
    }
    let manifest = BundleManifest { seed, domains };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<BundleManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?)?)
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(BundleManifest, Vec<DomainDataset<f64>>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.domains.len());
    for d in &manifest.domains {
        let load = |split: &str, rows: usize| -> Result<Matrix<f64>> {
            let m = load_csv(dir.join(&d.dir).join(format!("{split}.csv")), false)?.data;
            if m.nrows() != rows || m.ncols() != d.dim {
                return Err(AubError::Shape(format!(
                    "{}/{split}.csv is {}x{}, manifest says {rows}x{}",
                    d.dir,
                    m.nrows(),
                    m.ncols(),
                    d.dim
                )));
            }
            Ok(m)
        };
        out.push(DomainDataset::new(
            d.name.clone(),
            load("train", d.n_train)?,
            load("val", d.n_val)?,
            load("test", d.n_test)?,
            d.provenance.clone(),
        )?);
    }
    Ok((manifest, out))
}
