//! Interlaboratory calibration data.
//!
//! A calibration study sends aliquots at known concentrations
//! `x_1 = 0 < x_2 < ... < x_r` to `q` laboratories; lab `i` reports
//! `N_ij >= 1` replicate measurements at level `j`. Replicate counts may be
//! unbalanced and a lab may skip a nonzero level entirely, but every lab
//! must measure the blank (`x = 0`) and at least one nonzero level: the
//! blank replicates identify the lab intercept and the pure measurement
//! error, and the nonzero levels identify the lab slope.
//!
//! [`CalibrationQuery`] holds measurements of unknown samples taken by a
//! subset of the training labs, the input to concentration estimation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ragged per-cell storage: `[lab][level] -> replicate values`.
/// An empty innermost vector marks an absent cell.
pub type CellArray = Vec<Vec<Vec<f64>>>;

/// Training data for one interlaboratory study.
///
/// Concentrations are stored sorted ascending with the blank first, so
/// level index `0` is always `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterlabDataset {
    labs: Vec<String>,
    concentrations: Vec<f64>,
    cells: CellArray,
}

impl InterlabDataset {
    /// Build a dataset from per-cell measurements.
    ///
    /// `cells[i][j]` are the replicates of lab `i` at `concentrations[j]`;
    /// rows are reordered so concentrations end up sorted. Fails when the
    /// blank level is missing, concentrations repeat or are negative, any
    /// lab lacks blank or nonzero-level data, or a value is non-finite.
    pub fn new(
        labs: Vec<String>,
        concentrations: Vec<f64>,
        cells: CellArray,
    ) -> Result<Self> {
        let q = labs.len();
        if q == 0 {
            return Err(Error::InvalidData("dataset has no laboratories".into()));
        }
        if cells.len() != q {
            return Err(Error::InvalidData(format!(
                "expected {} lab rows of cells, got {}",
                q,
                cells.len()
            )));
        }
        let mut names = BTreeSet::new();
        for lab in &labs {
            if !names.insert(lab.as_str()) {
                return Err(Error::InvalidData(format!("duplicate lab id {lab:?}")));
            }
        }
        for (j, &x) in concentrations.iter().enumerate() {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::InvalidData(format!(
                    "concentration at level {j} is {x}; levels must be finite and nonnegative"
                )));
            }
        }
        // Sort levels ascending, carrying the cell columns along.
        let mut order: Vec<usize> = (0..concentrations.len()).collect();
        order.sort_by(|&a, &b| concentrations[a].total_cmp(&concentrations[b]));
        let concentrations: Vec<f64> = order.iter().map(|&j| concentrations[j]).collect();
        let cells: CellArray = cells
            .into_iter()
            .map(|row| {
                if row.len() != concentrations.len() {
                    return Err(Error::InvalidData(format!(
                        "expected {} levels per lab, got {}",
                        concentrations.len(),
                        row.len()
                    )));
                }
                Ok(order.iter().map(|&j| row[j].clone()).collect())
            })
            .collect::<Result<_>>()?;

        if concentrations.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(
                "concentration levels must be distinct".into(),
            ));
        }
        match concentrations.first() {
            Some(&x) if x == 0.0 => {}
            _ => {
                return Err(Error::InvalidData(
                    "the design must include the blank level x = 0".into(),
                ))
            }
        }
        if concentrations.len() < 2 {
            return Err(Error::InvalidData(
                "the design needs at least one nonzero concentration level".into(),
            ));
        }
        for (i, row) in cells.iter().enumerate() {
            for (j, reps) in row.iter().enumerate() {
                for &y in reps {
                    if !y.is_finite() {
                        return Err(Error::InvalidData(format!(
                            "non-finite measurement in lab {:?} at level {}",
                            labs[i], concentrations[j]
                        )));
                    }
                }
            }
            if row[0].is_empty() {
                return Err(Error::InvalidData(format!(
                    "lab {:?} has no blank (x = 0) measurements; every lab must measure the blank",
                    labs[i]
                )));
            }
            if row[1..].iter().all(|reps| reps.is_empty()) {
                return Err(Error::InvalidData(format!(
                    "lab {:?} has no nonzero-concentration measurements",
                    labs[i]
                )));
            }
        }
        Ok(Self {
            labs,
            concentrations,
            cells,
        })
    }

    /// Number of laboratories `q`.
    pub fn n_labs(&self) -> usize {
        self.labs.len()
    }

    /// Number of concentration levels `r` (including the blank).
    pub fn n_levels(&self) -> usize {
        self.concentrations.len()
    }

    pub fn labs(&self) -> &[String] {
        &self.labs
    }

    pub fn lab_index(&self, lab: &str) -> Option<usize> {
        self.labs.iter().position(|l| l == lab)
    }

    /// Concentration levels, sorted ascending; `concentrations()[0] == 0`.
    pub fn concentrations(&self) -> &[f64] {
        &self.concentrations
    }

    /// Replicates of lab `i` at level `j` (empty when the cell is absent).
    pub fn cell(&self, lab: usize, level: usize) -> &[f64] {
        &self.cells[lab][level]
    }

    pub fn n_replicates(&self, lab: usize, level: usize) -> usize {
        self.cells[lab][level].len()
    }

    pub fn n_measurements(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|row| row.iter())
            .map(|reps| reps.len())
            .sum()
    }

    /// Visit every nonempty cell as `(lab, level, replicates)`.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.cells.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, reps)| !reps.is_empty())
                .map(move |(j, reps)| (i, j, reps.as_slice()))
        })
    }

    /// Pooled degrees of freedom of the blank level, `sum_i (N_i1 - 1)`.
    pub fn blank_df(&self) -> usize {
        self.cells.iter().map(|row| row[0].len() - 1).sum()
    }

    /// An all-zero array with the same ragged shape as the data, used to
    /// hold one standard-normal value per observation.
    pub fn zeros_like(&self) -> CellArray {
        self.cells
            .iter()
            .map(|row| row.iter().map(|reps| vec![0.0; reps.len()]).collect())
            .collect()
    }

    /// The sampling design of this dataset (labs, levels, replicate counts).
    pub fn design(&self) -> StudyDesign {
        StudyDesign {
            labs: self.labs.clone(),
            concentrations: self.concentrations.clone(),
            replicates: self
                .cells
                .iter()
                .map(|row| row.iter().map(|reps| reps.len()).collect())
                .collect(),
        }
    }

    /// Read a dataset from CSV with header
    /// `lab,concentration,replicate,measurement`.
    ///
    /// Rows may appear in any order and produce the same dataset: labs are
    /// ordered by name, levels by concentration, and replicates by their
    /// index. Duplicate `(lab, concentration, replicate)` keys are
    /// rejected.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_csv_str(&raw)
    }

    pub fn from_csv_str(raw: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(raw.as_bytes());
        check_header(
            reader.headers()?,
            &["lab", "concentration", "replicate", "measurement"],
        )?;

        let mut labs: Vec<String> = Vec::new();
        let mut concs: Vec<f64> = Vec::new();
        // (lab index, level index, replicate id) -> value
        let mut rows: Vec<(usize, usize, u64, f64)> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 4 {
                return Err(Error::InvalidData(format!(
                    "row {}: expected 4 fields, got {}",
                    line + 2,
                    record.len()
                )));
            }
            let lab = record[0].to_string();
            let x: f64 = parse_field(&record[1], "concentration", line)?;
            let rep: u64 = record[2].parse().map_err(|_| {
                Error::InvalidData(format!(
                    "row {}: replicate {:?} is not an integer",
                    line + 2,
                    &record[2]
                ))
            })?;
            let y: f64 = parse_field(&record[3], "measurement", line)?;
            let i = match labs.iter().position(|l| *l == lab) {
                Some(i) => i,
                None => {
                    labs.push(lab);
                    labs.len() - 1
                }
            };
            let j = match concs.iter().position(|&c| c == x) {
                Some(j) => j,
                None => {
                    concs.push(x);
                    concs.len() - 1
                }
            };
            rows.push((i, j, rep, y));
        }
        // Canonical lab order, so shuffled rows yield an identical dataset.
        let mut order: Vec<usize> = (0..labs.len()).collect();
        order.sort_by(|&a, &b| labs[a].cmp(&labs[b]));
        let mut rank = vec![0usize; labs.len()];
        for (new_i, &old_i) in order.iter().enumerate() {
            rank[old_i] = new_i;
        }
        let labs: Vec<String> = order.into_iter().map(|i| labs[i].clone()).collect();
        for row in &mut rows {
            row.0 = rank[row.0];
        }
        let mut cells: CellArray = vec![vec![Vec::new(); concs.len()]; labs.len()];
        let mut keys = BTreeSet::new();
        rows.sort_by_key(|&(i, j, rep, _)| (i, j, rep));
        for (i, j, rep, y) in rows {
            if !keys.insert((i, j, rep)) {
                return Err(Error::InvalidData(format!(
                    "duplicate row for lab {:?}, concentration {}, replicate {}",
                    labs[i], concs[j], rep
                )));
            }
            cells[i][j].push(y);
        }
        Self::new(labs, concs, cells)
    }

    /// Serialize to the CSV exchange format, replicates numbered from 1.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("lab,concentration,replicate,measurement\n");
        for (i, lab) in self.labs.iter().enumerate() {
            for (j, &x) in self.concentrations.iter().enumerate() {
                for (k, y) in self.cells[i][j].iter().enumerate() {
                    writeln!(out, "{lab},{x},{},{y}", k + 1).unwrap();
                }
            }
        }
        out
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn parse_field(s: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| {
        Error::InvalidData(format!("row {}: {name} {s:?} is not a number", line + 2))
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidData(format!(
            "row {}: {name} must be finite",
            line + 2
        )));
    }
    Ok(v)
}

fn check_header(headers: &csv::StringRecord, expect: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got != expect {
        return Err(Error::InvalidData(format!(
            "expected CSV header {expect:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Measurements of unknown samples, resolved against a training dataset.
///
/// Unknown `u` was measured by some subset of the training labs;
/// `cells[u][p]` holds the replicates from participating lab `p`, where
/// `p` indexes [`CalibrationQuery::lab_indices`] (positions in the
/// training dataset's lab list).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationQuery {
    lab_indices: Vec<usize>,
    unknown_ids: Vec<String>,
    cells: CellArray,
}

impl CalibrationQuery {
    pub fn new(
        data: &InterlabDataset,
        labs: &[String],
        unknown_ids: Vec<String>,
        cells: CellArray,
    ) -> Result<Self> {
        let lab_indices: Vec<usize> = labs
            .iter()
            .map(|lab| {
                data.lab_index(lab).ok_or_else(|| {
                    Error::Query(format!(
                        "lab {lab:?} does not appear in the training data"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if cells.len() != unknown_ids.len() {
            return Err(Error::Query(format!(
                "expected {} unknown rows, got {}",
                unknown_ids.len(),
                cells.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for id in &unknown_ids {
            if !ids.insert(id.as_str()) {
                return Err(Error::Query(format!("duplicate unknown id {id:?}")));
            }
        }
        for (u, row) in cells.iter().enumerate() {
            if row.len() != lab_indices.len() {
                return Err(Error::Query(format!(
                    "unknown {:?}: expected {} lab columns, got {}",
                    unknown_ids[u],
                    lab_indices.len(),
                    row.len()
                )));
            }
            let mut n = 0;
            for reps in row {
                n += reps.len();
                for &y in reps {
                    if !y.is_finite() {
                        return Err(Error::Query(format!(
                            "non-finite measurement for unknown {:?}",
                            unknown_ids[u]
                        )));
                    }
                }
            }
            if n == 0 {
                return Err(Error::Query(format!(
                    "unknown {:?} has no measurements",
                    unknown_ids[u]
                )));
            }
        }
        Ok(Self {
            lab_indices,
            unknown_ids,
            cells,
        })
    }

    /// Read new measurements from CSV with header
    /// `lab,unknown_id,replicate,measurement`, resolving labs against the
    /// training data. Unknowns keep their order of first appearance.
    pub fn from_csv_path(data: &InterlabDataset, path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_csv_str(data, &raw)
    }

    pub fn from_csv_str(data: &InterlabDataset, raw: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(raw.as_bytes());
        check_header(
            reader.headers()?,
            &["lab", "unknown_id", "replicate", "measurement"],
        )?;
        let mut labs: Vec<String> = Vec::new();
        let mut ids: Vec<String> = Vec::new();
        let mut rows: Vec<(usize, usize, u64, f64)> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 4 {
                return Err(Error::Query(format!(
                    "row {}: expected 4 fields, got {}",
                    line + 2,
                    record.len()
                )));
            }
            let lab = record[0].to_string();
            let id = record[1].to_string();
            let rep: u64 = record[2].parse().map_err(|_| {
                Error::Query(format!(
                    "row {}: replicate {:?} is not an integer",
                    line + 2,
                    &record[2]
                ))
            })?;
            let y = parse_field(&record[3], "measurement", line)?;
            let p = match labs.iter().position(|l| *l == lab) {
                Some(p) => p,
                None => {
                    labs.push(lab);
                    labs.len() - 1
                }
            };
            let u = match ids.iter().position(|e| *e == id) {
                Some(u) => u,
                None => {
                    ids.push(id);
                    ids.len() - 1
                }
            };
            rows.push((u, p, rep, y));
        }
        if rows.is_empty() {
            return Err(Error::Query("no new measurements in file".into()));
        }
        let mut cells: CellArray = vec![vec![Vec::new(); labs.len()]; ids.len()];
        let mut keys = BTreeSet::new();
        rows.sort_by_key(|&(u, p, rep, _)| (u, p, rep));
        for (u, p, rep, y) in rows {
            if !keys.insert((u, p, rep)) {
                return Err(Error::Query(format!(
                    "duplicate row for unknown {:?}, lab {:?}, replicate {}",
                    ids[u], labs[p], rep
                )));
            }
            cells[u][p].push(y);
        }
        Self::new(data, &labs, ids, cells)
    }

    /// Training-data lab indices of the participating labs.
    pub fn lab_indices(&self) -> &[usize] {
        &self.lab_indices
    }

    pub fn unknown_ids(&self) -> &[String] {
        &self.unknown_ids
    }

    pub fn n_unknowns(&self) -> usize {
        self.unknown_ids.len()
    }

    /// Replicates of unknown `u` as `(training lab index, values)`,
    /// skipping labs that did not measure it.
    pub fn measurements(&self, u: usize) -> impl Iterator<Item = (usize, &[f64])> {
        self.cells[u]
            .iter()
            .enumerate()
            .filter(|(_, reps)| !reps.is_empty())
            .map(move |(p, reps)| (self.lab_indices[p], reps.as_slice()))
    }

    pub fn n_measurements(&self, u: usize) -> usize {
        self.cells[u].iter().map(|reps| reps.len()).sum()
    }

    /// Replicates of unknown `u` from lab position `p` (indexing
    /// [`Self::lab_indices`]); empty when that lab skipped this unknown.
    pub fn position_replicates(&self, u: usize, p: usize) -> &[f64] {
        &self.cells[u][p]
    }
}

/// Design of a future measurement of one unknown sample: which training
/// labs participate (by index into the dataset's lab list) and how many
/// replicates each contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDesign {
    pub lab_indices: Vec<usize>,
    pub replicates: Vec<usize>,
}

impl QueryDesign {
    /// All of `lab_indices` measure the unknown `n` times each.
    pub fn uniform(lab_indices: Vec<usize>, n: usize) -> Self {
        let replicates = vec![n; lab_indices.len()];
        Self {
            lab_indices,
            replicates,
        }
    }

    pub fn n_measurements(&self) -> usize {
        self.replicates.iter().sum()
    }

    pub fn validate(&self, data: &InterlabDataset) -> Result<()> {
        if self.lab_indices.is_empty() || self.lab_indices.len() != self.replicates.len() {
            return Err(Error::Config(
                "query design needs one replicate count per participating lab".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for &i in &self.lab_indices {
            if i >= data.n_labs() {
                return Err(Error::Config(format!(
                    "lab index {i} out of range for {} training labs",
                    data.n_labs()
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Config(format!("lab index {i} listed twice")));
            }
        }
        if self.n_measurements() == 0 {
            return Err(Error::Config(
                "query design has zero total replicates".into(),
            ));
        }
        Ok(())
    }
}

/// Sampling design for simulation: which labs measure which levels, and
/// how many replicates each cell gets. `replicates[i][j] == 0` marks an
/// absent cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub labs: Vec<String>,
    pub concentrations: Vec<f64>,
    pub replicates: Vec<Vec<usize>>,
}

impl StudyDesign {
    /// A balanced design: `q` labs, every cell with `n` replicates.
    pub fn balanced(q: usize, concentrations: Vec<f64>, n: usize) -> Self {
        let labs = (1..=q).map(|i| format!("lab{i}")).collect();
        let replicates = vec![vec![n; concentrations.len()]; q];
        Self {
            labs,
            concentrations,
            replicates,
        }
    }

    pub fn n_labs(&self) -> usize {
        self.labs.len()
    }

    pub fn n_levels(&self) -> usize {
        self.concentrations.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        // Reuse the dataset checks by building an empty-shaped dataset.
        let cells: CellArray = self
            .replicates
            .iter()
            .map(|row| row.iter().map(|&n| vec![0.0; n]).collect())
            .collect();
        InterlabDataset::new(self.labs.clone(), self.concentrations.clone(), cells)?;
        Ok(())
    }
}
