use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::UnitVector;

/// One dataset: inputs stored column-wise and a target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub name: String,
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Realization {
    pub fn new(name: impl Into<String>, columns: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let name = name.into();
        for (j, c) in columns.iter().enumerate() {
            if c.len() != y.len() {
                return Err(Error::Dataset(format!(
                    "{name}: column {j} has {} rows but y has {}",
                    c.len(),
                    y.len()
                )));
            }
        }
        if columns.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("{name}: non-finite entry")));
        }
        if y.is_empty() {
            return Err(Error::Dataset(format!("{name}: no samples")));
        }
        Ok(Realization { name, columns, y })
    }

    /// Build from row-major samples.
    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let n_vars = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(rows.len()); n_vars];
        for row in rows {
            if row.len() != n_vars {
                return Err(Error::Dataset("ragged input rows".into()));
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        Realization::new(name, columns, y)
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn with_y(&self, y: Vec<f64>) -> Result<Realization> {
        Realization::new(self.name.clone(), self.columns.clone(), y)
    }

    pub fn read_csv(path: &Path) -> Result<Realization> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
        let headers = reader
            .headers()
            .map_err(|source| Error::Csv { path: path.to_path_buf(), source })?
            .clone();
        let n = headers.len();
        if n < 1 || headers.get(n - 1) != Some("y") {
            return Err(Error::Dataset(format!(
                "{}: header must be x0,...,y",
                path.display()
            )));
        }
        for (j, h) in headers.iter().take(n - 1).enumerate() {
            if h != format!("x{j}") {
                return Err(Error::Dataset(format!(
                    "{}: expected column x{j}, found {h:?}",
                    path.display()
                )));
            }
        }
        let mut columns = vec![Vec::new(); n - 1];
        let mut y = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Dataset(format!(
                        "{}:{}: bad number {field:?}",
                        path.display(),
                        line + 2
                    ))
                })?;
                if j + 1 == n {
                    y.push(v);
                } else {
                    columns[j].push(v);
                }
            }
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("realization");
        Realization::new(name, columns, y)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
        let mut header: Vec<String> = (0..self.n_vars()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        let wrap = |source| Error::Csv { path: path.to_path_buf(), source };
        w.write_record(&header).map_err(wrap)?;
        for i in 0..self.n_samples() {
            let mut row: Vec<String> = self.columns.iter().map(|c| format!("{:e}", c[i])).collect();
            row.push(format!("{:e}", self.y[i]));
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ordered realizations sharing one set of variables.
///
/// Samples are also kept pooled (all realizations concatenated) with
/// offsets so a single tape pass can evaluate every realization.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiDataset {
    realizations: Vec<Realization>,
    var_units: Vec<UnitVector>,
    y_units: UnitVector,
    pooled: Vec<Vec<f64>>,
    y_pooled: Vec<f64>,
    offsets: Vec<usize>,
}

impl MultiDataset {
    pub fn new(
        realizations: Vec<Realization>,
        var_units: Vec<UnitVector>,
        y_units: UnitVector,
    ) -> Result<Self> {
        let first = realizations
            .first()
            .ok_or_else(|| Error::Dataset("a dataset needs at least one realization".into()))?;
        let n_vars = first.n_vars();
        if realizations.iter().any(|r| r.n_vars() != n_vars) {
            return Err(Error::Dataset("realizations disagree on variable count".into()));
        }
        if var_units.len() != n_vars {
            return Err(Error::Dataset(format!(
                "{} variable unit entries for {n_vars} variables",
                var_units.len()
            )));
        }
        let mut pooled = vec![Vec::new(); n_vars];
        let mut y_pooled = Vec::new();
        let mut offsets = vec![0];
        for r in &realizations {
            for (p, c) in pooled.iter_mut().zip(r.columns()) {
                p.extend_from_slice(c);
            }
            y_pooled.extend_from_slice(r.y());
            offsets.push(y_pooled.len());
        }
        Ok(MultiDataset { realizations, var_units, y_units, pooled, y_pooled, offsets })
    }

    /// Dimensionless units for every variable and the target.
    pub fn unitless(realizations: Vec<Realization>) -> Result<Self> {
        let n_vars = realizations.first().map_or(0, Realization::n_vars);
        MultiDataset::new(realizations, vec![UnitVector::DIMENSIONLESS; n_vars], UnitVector::DIMENSIONLESS)
    }

    pub fn realizations(&self) -> &[Realization] {
        &self.realizations
    }

    pub fn n_realizations(&self) -> usize {
        self.realizations.len()
    }

    pub fn n_vars(&self) -> usize {
        self.pooled.len()
    }

    pub fn n_total(&self) -> usize {
        self.y_pooled.len()
    }

    pub fn var_units(&self) -> &[UnitVector] {
        &self.var_units
    }

    pub fn y_units(&self) -> UnitVector {
        self.y_units
    }

    pub fn pooled_columns(&self) -> &[Vec<f64>] {
        &self.pooled
    }

    pub fn pooled_y(&self) -> &[f64] {
        &self.y_pooled
    }

    /// Realization boundaries into the pooled arrays (length N_r + 1).
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Same data with realizations in a new order.
    pub fn permuted(&self, order: &[usize]) -> Result<MultiDataset> {
        let reals = order.iter().map(|&i| self.realizations[i].clone()).collect();
        MultiDataset::new(reals, self.var_units.clone(), self.y_units)
    }

    pub fn subset(&self, count: usize) -> Result<MultiDataset> {
        let reals = self.realizations.iter().take(count).cloned().collect();
        MultiDataset::new(reals, self.var_units.clone(), self.y_units)
    }

    pub fn load_manifest(path: &Path) -> Result<MultiDataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|source| Error::Json { context: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let reals = manifest
            .realizations
            .iter()
            .map(|p| {
                let full = if p.is_absolute() { p.clone() } else { base.join(p) };
                if !full.exists() {
                    return Err(Error::Dataset(format!(
                        "realization file {} does not exist",
                        full.display()
                    )));
                }
                Realization::read_csv(&full)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_vars = reals.first().map_or(0, Realization::n_vars);
        let var_units = manifest
            .var_units
            .unwrap_or_else(|| vec![UnitVector::DIMENSIONLESS; n_vars]);
        MultiDataset::new(reals, var_units, manifest.y_units.unwrap_or_default())
    }

    /// Write one CSV per realization plus `manifest.json` into `dir`.
    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (i, r) in self.realizations.iter().enumerate() {
            let file = PathBuf::from(format!("realization_{i:03}.csv"));
            r.write_csv(&dir.join(&file))?;
            files.push(file);
        }
        let manifest = DatasetManifest {
            realizations: files,
            var_units: Some(self.var_units.clone()),
            y_units: Some(self.y_units),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub realizations: Vec<PathBuf>,
    #[serde(default)]
    pub var_units: Option<Vec<UnitVector>>,
    #[serde(default)]
    pub y_units: Option<UnitVector>,
}
