//! Datasets: TSV ingestion, cross-domain pairing by sample id, train/val
//! splits, column standardization, and a synthetic two-level generator.
//!
//! Matrix files are UTF-8 tab-separated with a header row. The first column
//! is `sample_id`; the remaining header cells name features (or tasks, for
//! label files). Missing labels are spelled `NA`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix, Rng};

/// Label values with their availability mask (1 = observed, 0 = NA; NA
/// values are stored as 0.0).
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub names: Vec<String>,
    pub values: Matrix,
    pub mask: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub labels: Option<Labels>,
}

impl DomainDataset {
    pub fn new(
        sample_ids: Vec<String>,
        feature_names: Vec<String>,
        features: Matrix,
        labels: Option<Labels>,
    ) -> Result<Self> {
        if sample_ids.len() != features.nrows() {
            return Err(Error::Data(format!(
                "{} sample ids for {} feature rows",
                sample_ids.len(),
                features.nrows()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate sample id {dup}")));
        }
        if let Some(l) = &labels {
            if l.values.nrows() != features.nrows() || l.values.dim() != l.mask.dim() {
                return Err(Error::Data("label matrix does not match features".into()));
            }
        }
        Ok(Self {
            sample_ids,
            feature_names,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> DomainDataset {
        DomainDataset {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            feature_names: self.feature_names.clone(),
            features: self.features.select(Axis(0), rows),
            labels: self.labels.as_ref().map(|l| Labels {
                names: l.names.clone(),
                values: l.values.select(Axis(0), rows),
                mask: l.mask.select(Axis(0), rows),
            }),
        }
    }

    /// Keeps only rows with at least one observed label.
    pub fn with_observed_labels(&self) -> Result<DomainDataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| labels.mask.row(i).sum() > 0.0)
            .collect();
        Ok(self.select(&keep))
    }
}

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

struct RawTable {
    columns: Vec<String>,
    ids: Vec<String>,
    // None = NA
    cells: Vec<Vec<Option<f64>>>,
}

fn read_table(path: &Path, allow_na: bool) -> Result<RawTable> {
    let text = fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, 0, format!("cannot read file: {e}")))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, 1, "empty file"))?;
    let mut head = header.split('\t');
    let first = head.next().unwrap_or_default();
    if first.trim() != "sample_id" {
        return Err(parse_err(path, 1, 1, format!("first header cell must be `sample_id`, got `{first}`")));
    }
    let columns: Vec<String> = head.map(|s| s.trim().to_string()).collect();
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for (ln, line) in lines {
        let line_no = ln + 1;
        let mut parts = line.split('\t');
        let id = parts.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(parse_err(path, line_no, 1, "empty sample id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line_no, 1, format!("duplicate sample id `{id}`")));
        }
        let mut row = Vec::with_capacity(columns.len());
        for (c, cell) in parts.enumerate() {
            let cell = cell.trim();
            let col = c + 2;
            if cell == "NA" {
                if !allow_na {
                    return Err(parse_err(path, line_no, col, "NA is only allowed in label files"));
                }
                row.push(None);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line_no, col, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, col, format!("non-finite cell `{cell}`")));
            }
            row.push(Some(v));
        }
        if row.len() != columns.len() {
            return Err(parse_err(
                path,
                line_no,
                row.len() + 2,
                format!("ragged row: {} cells, header has {}", row.len(), columns.len()),
            ));
        }
        ids.push(id);
        cells.push(row);
    }
    Ok(RawTable { columns, ids, cells })
}

/// Reads a feature matrix and, optionally, a label matrix joined on
/// `sample_id`. Feature rows absent from the label file get an all-NA row.
pub fn load_matrix(path: &Path, label_path: Option<&Path>) -> Result<DomainDataset> {
    let table = read_table(path, false)?;
    let n = table.ids.len();
    let d = table.columns.len();
    let features = Matrix::from_shape_fn((n, d), |(i, j)| table.cells[i][j].unwrap_or(0.0));
    let labels = match label_path {
        None => None,
        Some(lp) => {
            let lt = read_table(lp, true)?;
            let index: HashMap<&str, usize> =
                lt.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let k = lt.columns.len();
            let mut values = Matrix::zeros((n, k));
            let mut mask = Matrix::zeros((n, k));
            for (i, id) in table.ids.iter().enumerate() {
                if let Some(&r) = index.get(id.as_str()) {
                    for j in 0..k {
                        if let Some(v) = lt.cells[r][j] {
                            values[[i, j]] = v;
                            mask[[i, j]] = 1.0;
                        }
                    }
                }
            }
            Some(Labels {
                names: lt.columns,
                values,
                mask,
            })
        }
    };
    DomainDataset::new(table.ids, table.columns, features, labels)
}

fn write_table(path: &Path, names: &[String], ids: &[String], cell: impl Fn(usize, usize) -> String) -> Result<()> {
    let mut out = String::from("sample_id");
    for n in names {
        out.push('\t');
        out.push_str(n);
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..names.len() {
            out.push('\t');
            out.push_str(&cell(i, j));
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes features (as f32 text) and, if present and requested, labels.
pub fn write_matrix(ds: &DomainDataset, path: &Path, label_path: Option<&Path>) -> Result<()> {
    write_table(path, &ds.feature_names, &ds.sample_ids, |i, j| {
        format!("{}", ds.features[[i, j]] as f32)
    })?;
    if let (Some(lp), Some(l)) = (label_path, &ds.labels) {
        write_table(lp, &l.names, &ds.sample_ids, |i, j| {
            if l.mask[[i, j]] == 0.0 {
                "NA".to_string()
            } else {
                format!("{}", l.values[[i, j]] as f32)
            }
        })?;
    }
    Ok(())
}

/// Row-aligned feature pairs of the same samples in both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub sample_ids: Vec<String>,
    pub high: Matrix,
    pub low: Matrix,
    /// Row indices into the source high/low datasets.
    pub high_rows: Vec<usize>,
    pub low_rows: Vec<usize>,
    pub labels: Option<Labels>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Inner join on sample ids, in `high` order. Labels are taken from the
/// high dataset, else from the low one.
pub fn pair_domains(high: &DomainDataset, low: &DomainDataset) -> Result<PairedDataset> {
    let low_index: HashMap<&str, usize> = low
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let (high_rows, low_rows): (Vec<usize>, Vec<usize>) = high
        .sample_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| low_index.get(id.as_str()).map(|&j| (i, j)))
        .unzip();
    if high_rows.is_empty() {
        return Err(Error::Data("the two domains share no sample ids".into()));
    }
    let labels = if let Some(l) = &high.labels {
        Some(Labels {
            names: l.names.clone(),
            values: l.values.select(Axis(0), &high_rows),
            mask: l.mask.select(Axis(0), &high_rows),
        })
    } else {
        low.labels.as_ref().map(|l| Labels {
            names: l.names.clone(),
            values: l.values.select(Axis(0), &low_rows),
            mask: l.mask.select(Axis(0), &low_rows),
        })
    };
    Ok(PairedDataset {
        sample_ids: high_rows.iter().map(|&i| high.sample_ids[i].clone()).collect(),
        high: high.features.select(Axis(0), &high_rows),
        low: low.features.select(Axis(0), &low_rows),
        high_rows,
        low_rows,
        labels,
    })
}

/// Seeded random split into `(train, val)` with `round(n·train_frac)` train
/// rows, clamped so both sides are non-empty.
pub fn split(ds: &DomainDataset, train_frac: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_frac}")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} samples")));
    }
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
    let mut rng = Rng::derive(seed, "split");
    let perm = rng.permutation(n);
    let mut train: Vec<usize> = perm[..n_train].to_vec();
    let mut val: Vec<usize> = perm[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.select(&train), ds.select(&val)))
}

/// Per-column standardization fitted on one matrix and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = (0..x.ncols())
            .map(|j| {
                let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// Parameters of the synthetic two-level generator.
///
/// Each sample has a latent factor `t ~ N(0, I_r)`. The high domain observes
/// `A·t + σ_H·ε`; the low domain observes `B·t + σ_L·ε` thresholded to binary
/// with roughly `low_density` ones per column. Labels are
/// `sigmoid(C·tanh(D·t))`, each missing with probability `na_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub latent_rank: usize,
    pub high_features: usize,
    pub low_features: usize,
    pub tasks: usize,
    pub label_hidden: usize,
    pub label_gain: f64,
    pub noise_high: f64,
    pub noise_low: f64,
    /// Expected fraction of ones in the low domain; `None` keeps it continuous.
    pub low_density: Option<f64>,
    pub na_rate: f64,
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            latent_rank: 8,
            high_features: 128,
            low_features: 512,
            tasks: 20,
            label_hidden: 16,
            label_gain: 2.0,
            noise_high: 0.3,
            noise_low: 1.0,
            low_density: Some(0.05),
            na_rate: 0.1,
            n_unlabeled: 2000,
            n_labeled: 500,
            n_test: 200,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_rank == 0 || self.high_features == 0 || self.low_features == 0 {
            return Err(Error::Config("synth widths must be positive".into()));
        }
        if self.tasks == 0 || self.label_hidden == 0 {
            return Err(Error::Config("synth tasks and label_hidden must be positive".into()));
        }
        if !(self.noise_high >= 0.0 && self.noise_high < self.noise_low) {
            return Err(Error::Config(
                "synth noise must satisfy 0 <= noise_high < noise_low".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.na_rate) {
            return Err(Error::Config("synth na_rate must be in [0, 1)".into()));
        }
        if let Some(p) = self.low_density {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config("synth low_density must be in (0, 1)".into()));
            }
        }
        if self.n_labeled < 2 {
            return Err(Error::Config("synth n_labeled must be at least 2".into()));
        }
        Ok(())
    }
}

/// The partitions of a two-domain corpus: unlabeled samples observed in
/// both domains, labeled samples observed in both domains, and labeled test
/// samples observed in the low domain only.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub high_unlabeled: DomainDataset,
    pub low_unlabeled: DomainDataset,
    pub high_labeled: DomainDataset,
    pub low_labeled: DomainDataset,
    pub test_low: DomainDataset,
}

/// Synthetic corpus together with the latent factors that generated it.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Corpus,
    pub latent_unlabeled: Matrix,
    pub latent_labeled: Matrix,
    pub latent_test: Matrix,
}

struct Mixing {
    a: Matrix,
    b: Matrix,
    thresholds: Option<Vec<f64>>,
    c: Matrix,
    d: Matrix,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let r = spec.latent_rank;
    let mut mrng = Rng::derive(spec.seed, "synth.mixing");
    let a = mrng.normal_matrix(spec.high_features, r) / (r as f64).sqrt();
    let b = mrng.normal_matrix(spec.low_features, r) / (r as f64).sqrt();
    let d = mrng.normal_matrix(spec.label_hidden, r) * (spec.label_gain / (r as f64).sqrt());
    let c = mrng.normal_matrix(spec.tasks, spec.label_hidden)
        * (spec.label_gain / (spec.label_hidden as f64).sqrt());
    let thresholds = spec.low_density.map(|p| {
        let z = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - p);
        b.outer_iter()
            .map(|row| z * (row.dot(&row) + spec.noise_low * spec.noise_low).sqrt())
            .collect()
    });
    let mix = Mixing {
        a,
        b,
        thresholds,
        c,
        d,
    };

    let mut srng = Rng::derive(spec.seed, "synth.samples");
    let (t_u, xh_u, xl_u, _) = draw_partition(spec, &mix, &mut srng, spec.n_unlabeled, false);
    let (t_l, xh_l, xl_l, y_l) = draw_partition(spec, &mix, &mut srng, spec.n_labeled, true);
    let (t_t, _, xl_t, y_t) = draw_partition(spec, &mix, &mut srng, spec.n_test, true);

    let hn = names("expr", spec.high_features);
    let ln = names("mut", spec.low_features);
    let ids = |p: &str, n: usize| -> Vec<String> { (0..n).map(|i| format!("{p}{i:05}")).collect() };
    let u_ids = ids("U", spec.n_unlabeled);
    let l_ids = ids("L", spec.n_labeled);
    let t_ids = ids("T", spec.n_test);

    let corpus = Corpus {
        high_unlabeled: DomainDataset::new(u_ids.clone(), hn.clone(), xh_u, None)?,
        low_unlabeled: DomainDataset::new(u_ids, ln.clone(), xl_u, None)?,
        high_labeled: DomainDataset::new(l_ids.clone(), hn, xh_l, y_l.clone())?,
        low_labeled: DomainDataset::new(l_ids, ln.clone(), xl_l, y_l)?,
        test_low: DomainDataset::new(t_ids, ln, xl_t, y_t)?,
    };
    Ok(SynthData {
        corpus,
        latent_unlabeled: t_u,
        latent_labeled: t_l,
        latent_test: t_t,
    })
}

fn draw_partition(
    spec: &SynthSpec,
    mix: &Mixing,
    rng: &mut Rng,
    n: usize,
    labeled: bool,
) -> (Matrix, Matrix, Matrix, Option<Labels>) {
    let t = rng.normal_matrix(n, spec.latent_rank);
    let xh = t.dot(&mix.a.t()) + rng.normal_matrix(n, spec.high_features) * spec.noise_high;
    let mut xl = t.dot(&mix.b.t()) + rng.normal_matrix(n, spec.low_features) * spec.noise_low;
    if let Some(th) = &mix.thresholds {
        for mut row in xl.outer_iter_mut() {
            for (v, &cut) in row.iter_mut().zip(th) {
                *v = if *v > cut { 1.0 } else { 0.0 };
            }
        }
    }
    let labels = labeled.then(|| {
        let hidden = t.dot(&mix.d.t()).mapv(f64::tanh);
        let values = hidden.dot(&mix.c.t()).mapv(sigmoid);
        let mut mask = Matrix::ones(values.raw_dim());
        if spec.na_rate > 0.0 {
            for mut row in mask.outer_iter_mut() {
                for m in row.iter_mut() {
                    if rng.uniform() < spec.na_rate {
                        *m = 0.0;
                    }
                }
                // every labeled sample keeps at least one observed task
                if row.sum() == 0.0 {
                    let j = rng.below(spec.tasks);
                    row[j] = 1.0;
                }
            }
        }
        let values = &values * &mask;
        Labels {
            names: names("drug", spec.tasks),
            values,
            mask,
        }
    });
    (t, xh, xl, labels)
}

/// File locations of a real corpus, in the TSV format above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub high_unlabeled: PathBuf,
    pub low_unlabeled: PathBuf,
    pub high_labeled: PathBuf,
    pub low_labeled: PathBuf,
    pub labels: PathBuf,
    pub test_low: PathBuf,
    pub test_labels: PathBuf,
}

impl DataFiles {
    pub fn paths(&self) -> [(&'static str, &Path); 7] {
        [
            ("high_unlabeled", &self.high_unlabeled),
            ("low_unlabeled", &self.low_unlabeled),
            ("high_labeled", &self.high_labeled),
            ("low_labeled", &self.low_labeled),
            ("labels", &self.labels),
            ("test_low", &self.test_low),
            ("test_labels", &self.test_labels),
        ]
    }

    pub fn load(&self) -> Result<Corpus> {
        Ok(Corpus {
            high_unlabeled: load_matrix(&self.high_unlabeled, None)?,
            low_unlabeled: load_matrix(&self.low_unlabeled, None)?,
            high_labeled: load_matrix(&self.high_labeled, Some(&self.labels))?,
            low_labeled: load_matrix(&self.low_labeled, Some(&self.labels))?,
            test_low: load_matrix(&self.test_low, Some(&self.test_labels))?,
        })
    }

    /// Writes `corpus` under `dir` and returns the matching file set.
    pub fn write(corpus: &Corpus, dir: &Path) -> Result<Self> {
        let files = DataFiles {
            high_unlabeled: dir.join("high_unlabeled.tsv"),
            low_unlabeled: dir.join("low_unlabeled.tsv"),
            high_labeled: dir.join("high_labeled.tsv"),
            low_labeled: dir.join("low_labeled.tsv"),
            labels: dir.join("labels.tsv"),
            test_low: dir.join("test_low.tsv"),
            test_labels: dir.join("test_labels.tsv"),
        };
        write_matrix(&corpus.high_unlabeled, &files.high_unlabeled, None)?;
        write_matrix(&corpus.low_unlabeled, &files.low_unlabeled, None)?;
        write_matrix(&corpus.high_labeled, &files.high_labeled, Some(&files.labels))?;
        write_matrix(&corpus.low_labeled, &files.low_labeled, None)?;
        write_matrix(&corpus.test_low, &files.test_low, Some(&files.test_labels))?;
        Ok(files)
    }
}

/// Short human-readable summary of a corpus, one partition per line.
pub fn describe(corpus: &Corpus) -> String {
    let mut s = String::new();
    for (name, ds) in [
        ("high_unlabeled", &corpus.high_unlabeled),
        ("low_unlabeled", &corpus.low_unlabeled),
        ("high_labeled", &corpus.high_labeled),
        ("low_labeled", &corpus.low_labeled),
        ("test_low", &corpus.test_low),
    ] {
        let observed = ds.labels.as_ref().map_or(0.0, |l| l.mask.sum());
        let _ = writeln!(s, "{name}\t{}x{}\tlabels_observed={observed}", ds.len(), ds.width());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_small_matrix_with_na_labels() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.tsv", "sample_id\tg1\tg2\tg3\nb\t1\t2\t3\na\t4\t5\t6\n");
        let l = write(dir.path(), "y.tsv", "sample_id\td1\td2\na\t0.5\tNA\nb\tNA\t0.25\n");
        let ds = load_matrix(&f, Some(&l)).unwrap();
        assert_eq!(ds.features.dim(), (2, 3));
        assert_eq!(ds.sample_ids, vec!["b", "a"]);
        let labels = ds.labels.unwrap();
        assert_eq!(labels.mask, array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(labels.values, array![[0.0, 0.25], [0.5, 0.0]]);
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write(dir.path(), "d.tsv", "sample_id\tg\na\t1\na\t2\n");
        assert!(matches!(load_matrix(&dup, None), Err(Error::Parse { line: 3, column: 1, .. })));
        let ragged = write(dir.path(), "r.tsv", "sample_id\tg\th\na\t1\n");
        assert!(matches!(load_matrix(&ragged, None), Err(Error::Parse { line: 2, .. })));
        let bad = write(dir.path(), "b.tsv", "sample_id\tg\th\na\t1\tx\n");
        assert!(matches!(load_matrix(&bad, None), Err(Error::Parse { line: 2, column: 3, .. })));
    }

    #[test]
    fn write_then_read_round_trips_at_f32() {
        let mut rng = Rng::new(4);
        let features = rng.normal_matrix(6, 4);
        let values = rng.uniform_matrix(6, 3);
        let mut mask = Matrix::ones((6, 3));
        mask[[2, 1]] = 0.0;
        let ds = DomainDataset::new(
            names("s", 6),
            names("f", 4),
            features,
            Some(Labels {
                names: names("d", 3),
                values: &values * &mask,
                mask,
            }),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (fp, lp) = (dir.path().join("f.tsv"), dir.path().join("l.tsv"));
        write_matrix(&ds, &fp, Some(&lp)).unwrap();
        let back = load_matrix(&fp, Some(&lp)).unwrap();
        assert_eq!(back.sample_ids, ds.sample_ids);
        for (a, b) in back.features.iter().zip(ds.features.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let (bl, l) = (back.labels.unwrap(), ds.labels.unwrap());
        assert_eq!(bl.mask, l.mask);
        for (a, b) in bl.values.iter().zip(l.values.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    fn ids_ds(ids: &[&str]) -> DomainDataset {
        let n = ids.len();
        DomainDataset::new(
            ids.iter().map(|s| s.to_string()).collect(),
            vec!["f".into()],
            Matrix::from_shape_fn((n, 1), |(i, _)| i as f64),
            None,
        )
        .unwrap()
    }

    #[test]
    fn pairing_cases() {
        let p = pair_domains(&ids_ds(&["a", "b", "c"]), &ids_ds(&["c", "a", "b"])).unwrap();
        assert_eq!(p.len(), 3);
        assert!(pair_domains(&ids_ds(&["a"]), &ids_ds(&["z"])).is_err());
        let p = pair_domains(&ids_ds(&["a", "b", "c"]), &ids_ds(&["b", "c", "d"])).unwrap();
        assert_eq!(p.sample_ids, vec!["b", "c"]);
        assert_eq!(p.low, array![[0.0], [1.0]]);
        assert_eq!(p.high, array![[1.0], [2.0]]);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = ids_ds(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        let (tr, va) = split(&ds, 0.9, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
        let (tr2, _) = split(&ds, 0.9, 3).unwrap();
        assert_eq!(tr.sample_ids, tr2.sample_ids);
        let mut all: Vec<_> = tr.sample_ids.iter().chain(&va.sample_ids).cloned().collect();
        all.sort();
        assert_eq!(all, ds.sample_ids);
        assert!(split(&ids_ds(&["a"]), 0.5, 0).is_err());
    }

    #[test]
    fn synth_defaults_and_degenerate_cases() {
        let spec = SynthSpec {
            n_unlabeled: 50,
            n_labeled: 40,
            n_test: 10,
            na_rate: 0.0,
            ..SynthSpec::default()
        };
        let s = synthesize(&spec).unwrap();
        let labels = s.corpus.low_labeled.labels.as_ref().unwrap();
        assert!(labels.mask.iter().all(|&m| m == 1.0));
        assert!(labels.values.iter().all(|&v| v > 0.0 && v < 1.0));
        let x = &s.corpus.low_unlabeled.features;
        assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.corpus.test_low.labels.is_some());

        let again = synthesize(&spec).unwrap();
        assert_eq!(again.corpus, s.corpus);
    }

    #[test]
    fn synth_binarization_density_near_target() {
        let spec = SynthSpec {
            n_unlabeled: 2000,
            n_labeled: 10,
            n_test: 0,
            ..SynthSpec::default()
        };
        let s = synthesize(&spec).unwrap();
        let x = &s.corpus.low_unlabeled.features;
        let density = x.sum() / x.len() as f64;
        assert!((density - 0.05).abs() < 0.005, "{density}");
    }

    #[test]
    fn noiseless_high_domain_is_linear_in_latent() {
        let spec = SynthSpec {
            noise_high: 0.0,
            low_density: None,
            n_unlabeled: 40,
            n_labeled: 5,
            n_test: 0,
            ..SynthSpec::default()
        };
        let s = synthesize(&spec).unwrap();
        let t = &s.latent_unlabeled;
        let x = &s.corpus.high_unlabeled.features;
        // least squares x ≈ t·M through the normal equations
        let tt = t.t().dot(t);
        let tx = t.t().dot(x);
        let m = solve_spd(&tt, &tx);
        let resid = x - &t.dot(&m);
        assert!(resid.iter().all(|v| v.abs() < 1e-9));
    }

    fn solve_spd(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.nrows();
        let mut l = Matrix::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
                l[[i, j]] = if i == j { (a[[i, i]] - s).sqrt() } else { (a[[i, j]] - s) / l[[j, j]] };
            }
        }
        let mut x = b.clone();
        for c in 0..b.ncols() {
            for i in 0..n {
                let s: f64 = (0..i).map(|k| l[[i, k]] * x[[k, c]]).sum();
                x[[i, c]] = (x[[i, c]] - s) / l[[i, i]];
            }
            for i in (0..n).rev() {
                let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[[k, c]]).sum();
                x[[i, c]] = (x[[i, c]] - s) / l[[i, i]];
            }
        }
        x
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let x = array![[1.0, 5.0], [3.0, 5.0]];
        let s = Standardizer::fit(&x);
        let y = s.apply(&x);
        assert_eq!(y, array![[-1.0, 0.0], [1.0, 0.0]]);
    }
}
