//! Panel data container, CSV input/output and validation.
//!
//! A panel holds a unit-level treatment indicator, time-invariant
//! covariates and outcomes split into three blocks: pre-treatment periods
//! `-T0..=-1` (oldest first), the target period `0`, and post-treatment
//! periods `1..=T1`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    treatment: Vec<bool>,
    covariates: DMatrix<f64>,
    y_pre: DMatrix<f64>,
    y_target: DVector<f64>,
    y_post: DMatrix<f64>,
}

impl PanelDataset {
    /// Builds a panel, checking that every block has one row per unit and
    /// that all values are finite. Unit ids default to `1..=N`.
    pub fn new(
        treatment: Vec<bool>,
        covariates: DMatrix<f64>,
        y_pre: DMatrix<f64>,
        y_target: DVector<f64>,
        y_post: DMatrix<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        let rows = [
            ("covariates", covariates.nrows()),
            ("y_pre", y_pre.nrows()),
            ("y_target", y_target.len()),
            ("y_post", y_post.nrows()),
        ];
        for (name, r) in rows {
            if r != n {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {r} rows but there are {n} units"
                )));
            }
        }
        if y_pre.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "panel needs at least one pre period".into(),
            ));
        }
        let finite = covariates.iter().all(|v| v.is_finite())
            && y_pre.iter().all(|v| v.is_finite())
            && y_target.iter().all(|v| v.is_finite())
            && y_post.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            treatment,
            covariates,
            y_pre,
            y_target,
            y_post,
        })
    }

    pub fn with_unit_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_units() {
            return Err(Error::DimensionMismatch(format!(
                "{} unit ids for {} units",
                ids.len(),
                self.n_units()
            )));
        }
        self.unit_ids = ids;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.treatment.len()
    }
    pub fn n_pre(&self) -> usize {
        self.y_pre.ncols()
    }
    pub fn n_post(&self) -> usize {
        self.y_post.ncols()
    }
    pub fn n_cov(&self) -> usize {
        self.covariates.ncols()
    }
    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }
    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }
    pub fn y_pre(&self) -> &DMatrix<f64> {
        &self.y_pre
    }
    pub fn y_target(&self) -> &DVector<f64> {
        &self.y_target
    }
    pub fn y_post(&self) -> &DMatrix<f64> {
        &self.y_post
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&a| a).count()
    }
    pub fn n_control(&self) -> usize {
        self.n_units() - self.n_treated()
    }

    /// Indices of treated and control units.
    pub fn group_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let (t, c): (Vec<usize>, Vec<usize>) =
            (0..self.n_units()).partition(|&i| self.treatment[i]);
        (t, c)
    }

    /// Outcome of unit `i` at period `t` in `-T0..=T1`.
    pub fn outcome(&self, i: usize, t: i64) -> f64 {
        let t0 = self.n_pre() as i64;
        match t {
            t if t < 0 => self.y_pre[(i, (t + t0) as usize)],
            0 => self.y_target[i],
            t => self.y_post[(i, (t - 1) as usize)],
        }
    }

    /// Instrument-side vector: post outcomes stacked on covariates.
    pub fn z_row(&self, i: usize) -> DVector<f64> {
        let (t1, d) = (self.n_post(), self.n_cov());
        DVector::from_fn(t1 + d, |j, _| {
            if j < t1 {
                self.y_post[(i, j)]
            } else {
                self.covariates[(i, j - t1)]
            }
        })
    }

    /// Regressor-side vector: pre outcomes stacked on covariates.
    pub fn w_row(&self, i: usize) -> DVector<f64> {
        let (t0, d) = (self.n_pre(), self.n_cov());
        DVector::from_fn(t0 + d, |j, _| {
            if j < t0 {
                self.y_pre[(i, j)]
            } else {
                self.covariates[(i, j - t0)]
            }
        })
    }

    /// N x (T1 + d) matrix of instrument rows.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_units(), self.n_post() + self.n_cov());
        z.columns_mut(0, self.n_post()).copy_from(&self.y_post);
        z.columns_mut(self.n_post(), self.n_cov())
            .copy_from(&self.covariates);
        z
    }

    /// N x (T0 + d) matrix of regressor rows.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_units(), self.n_pre() + self.n_cov());
        w.columns_mut(0, self.n_pre()).copy_from(&self.y_pre);
        w.columns_mut(self.n_pre(), self.n_cov())
            .copy_from(&self.covariates);
        w
    }

    /// Subset of units, in the given order.
    pub fn select_units(&self, idx: &[usize]) -> Self {
        Self {
            unit_ids: idx.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            covariates: self.covariates.select_rows(idx),
            y_pre: self.y_pre.select_rows(idx),
            y_target: self.y_target.select_rows(idx),
            y_post: self.y_post.select_rows(idx),
        }
    }

    /// Discards the `k` oldest pre periods.
    pub fn drop_leading_pre(&self, k: usize) -> Result<Self> {
        if k >= self.n_pre() {
            return Err(Error::DimensionMismatch(format!(
                "cannot drop {k} of {} pre periods",
                self.n_pre()
            )));
        }
        let mut out = self.clone();
        out.y_pre = self.y_pre.columns(k, self.n_pre() - k).into_owned();
        Ok(out)
    }

    /// Moves the `k` oldest pre periods into the post block, replacing the
    /// genuine post-treatment outcomes.
    pub fn substitute_leading_pre_for_post(&self, k: usize) -> Result<Self> {
        if k == 0 || k >= self.n_pre() {
            return Err(Error::DimensionMismatch(format!(
                "cannot move {k} of {} pre periods",
                self.n_pre()
            )));
        }
        let mut out = self.clone();
        out.y_post = self.y_pre.columns(0, k).into_owned();
        out.y_pre = self.y_pre.columns(k, self.n_pre() - k).into_owned();
        Ok(out)
    }
}

/// Column names of the long CSV format.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: String,
    /// Covariates are the columns `<prefix>1`, `<prefix>2`, ...
    pub covariate_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "y".into(),
            treatment: "a".into(),
            covariate_prefix: "x".into(),
        }
    }
}

struct UnitAccum {
    treated: bool,
    covariates: Vec<f64>,
    outcomes: HashMap<i64, f64>,
}

fn parse_err(record: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        record,
        message: message.into(),
    }
}

/// Reads a long-format panel. Lines starting with `#` are ignored.
pub fn read_panel_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(0, format!("missing column `{name}`")))
    };
    let (c_unit, c_time, c_y, c_a) = (
        col(&schema.unit)?,
        col(&schema.time)?,
        col(&schema.outcome)?,
        col(&schema.treatment)?,
    );
    let mut cov_cols = Vec::new();
    for j in 1.. {
        match headers
            .iter()
            .position(|h| h == format!("{}{j}", schema.covariate_prefix))
        {
            Some(p) => cov_cols.push(p),
            None => break,
        }
    }
    let cov_names: Vec<String> = (1..=cov_cols.len())
        .map(|j| format!("{}{j}", schema.covariate_prefix))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut units: HashMap<String, UnitAccum> = HashMap::new();
    for (rec_no, rec) in rdr.records().enumerate() {
        let line = rec_no as u64 + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize, what: &str| -> Result<f64> {
            let s = field(c);
            s.parse::<f64>()
                .map_err(|_| parse_err(line, format!("{what} value `{s}` is not a number")))
        };
        let unit = field(c_unit).to_string();
        let time: i64 = field(c_time)
            .parse()
            .map_err(|_| parse_err(line, format!("time `{}` is not an integer", field(c_time))))?;
        let y = num(c_y, "outcome")?;
        let a = match num(c_a, "treatment")? {
            0.0 => false,
            1.0 => true,
            v => {
                return Err(parse_err(
                    line,
                    format!("treatment value {v} is not 0 or 1"),
                ))
            }
        };
        let x: Vec<f64> = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| num(c, name))
            .collect::<Result<_>>()?;
        let entry = units.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            UnitAccum {
                treated: a,
                covariates: x.clone(),
                outcomes: HashMap::new(),
            }
        });
        if entry.treated != a {
            return Err(Error::TreatmentNotConstantWithinUnit(unit));
        }
        if let Some(j) = (0..x.len()).find(|&j| x[j].to_bits() != entry.covariates[j].to_bits()) {
            return Err(Error::CovariateNotConstantWithinUnit {
                unit,
                column: cov_names[j].clone(),
            });
        }
        if entry.outcomes.insert(time, y).is_some() {
            return Err(parse_err(
                line,
                format!("duplicate row for unit {unit} at time {time}"),
            ));
        }
    }
    if order.is_empty() {
        return Err(parse_err(0, "no data rows"));
    }
    let all_times = units.values().flat_map(|u| u.outcomes.keys().copied());
    let (t_min, t_max) = all_times.fold((i64::MAX, i64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if t_min >= 0 {
        return Err(parse_err(0, "panel has no pre-treatment periods"));
    }
    if t_max < 0 {
        return Err(parse_err(0, "panel has no target period"));
    }
    let (t0, t1) = ((-t_min) as usize, t_max as usize);
    let n = order.len();
    let d = cov_cols.len();
    let mut y_pre = DMatrix::zeros(n, t0);
    let mut y_target = DVector::zeros(n);
    let mut y_post = DMatrix::zeros(n, t1);
    let mut covariates = DMatrix::zeros(n, d);
    let mut treatment = Vec::with_capacity(n);
    for (i, id) in order.iter().enumerate() {
        let u = &units[id];
        treatment.push(u.treated);
        for j in 0..d {
            covariates[(i, j)] = u.covariates[j];
        }
        for t in t_min..=t_max {
            let y = *u.outcomes.get(&t).ok_or_else(|| Error::MissingCell {
                unit: id.clone(),
                time: t,
            })?;
            match t {
                t if t < 0 => y_pre[(i, (t - t_min) as usize)] = y,
                0 => y_target[i] = y,
                t => y_post[(i, (t - 1) as usize)] = y,
            }
        }
    }
    PanelDataset::new(treatment, covariates, y_pre, y_target, y_post)?.with_unit_ids(order)
}

pub fn load_panel_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    read_panel_csv(std::fs::File::open(path)?, schema)
}

/// Writes the long format. Each `comments` entry becomes a `# ` line.
pub fn write_panel<W: Write>(mut out: W, data: &PanelDataset, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut header = String::from("unit,time,y,a");
    for j in 1..=data.n_cov() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(out, "{header}")?;
    let t0 = data.n_pre() as i64;
    let t1 = data.n_post() as i64;
    for i in 0..data.n_units() {
        let covs: String = (0..data.n_cov())
            .map(|j| format!(",{}", data.covariates[(i, j)]))
            .collect();
        for t in -t0..=t1 {
            writeln!(
                out,
                "{},{},{},{}{}",
                data.unit_ids[i],
                t,
                data.outcome(i, t),
                u8::from(data.treatment[i]),
                covs
            )?;
        }
    }
    Ok(())
}

pub fn write_panel_csv(
    path: impl AsRef<Path>,
    data: &PanelDataset,
    comments: &[String],
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_panel(file, data, comments)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Treated,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    DimensionMismatch(String),
    /// A covariate column other than a leading intercept is constant.
    NoVariation {
        column: usize,
    },
    DegenerateGroup(Group),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_treated: usize,
    pub n_control: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_panel(data: &PanelDataset) -> ValidationReport {
    let n = data.n_units();
    let mut issues = Vec::new();
    for (name, rows) in [
        ("covariates", data.covariates.nrows()),
        ("y_pre", data.y_pre.nrows()),
        ("y_target", data.y_target.len()),
        ("y_post", data.y_post.nrows()),
    ] {
        if rows != n {
            issues.push(ValidationIssue::DimensionMismatch(format!(
                "{name}: {rows} rows, {n} units"
            )));
        }
    }
    for j in 0..data.n_cov() {
        let col = data.covariates.column(j);
        let constant = col.iter().all(|&v| v == col[0]);
        if constant && j > 0 {
            issues.push(ValidationIssue::NoVariation { column: j });
        }
    }
    let n_treated = data.n_treated();
    let n_control = n - n_treated;
    if n_treated == 0 {
        issues.push(ValidationIssue::DegenerateGroup(Group::Treated));
    }
    if n_control == 0 {
        issues.push(ValidationIssue::DegenerateGroup(Group::Control));
    }
    ValidationReport {
        n_treated,
        n_control,
        issues,
    }
}

/// Replaces the target with the average of periods `0..=L` and keeps
/// periods `L+1..=T1` as the post block.
pub fn aggregate_target(data: &PanelDataset, horizon: usize) -> Result<PanelDataset> {
    let t1 = data.n_post();
    if horizon == 0 || horizon >= t1 {
        return Err(Error::HorizonTooLarge {
            horizon,
            n_post: t1,
        });
    }
    let n = data.n_units();
    let scale = 1.0 / (horizon as f64 + 1.0);
    let y_target = DVector::from_fn(n, |i, _| {
        let s: f64 = data.y_target[i] + (0..horizon).map(|j| data.y_post[(i, j)]).sum::<f64>();
        s * scale
    });
    let mut out = data.clone();
    out.y_target = y_target;
    out.y_post = data.y_post.columns(horizon, t1 - horizon).into_owned();
    Ok(out)
}
