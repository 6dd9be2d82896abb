//! CSV readers and writers for the file formats in `docs/formats`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use dorqf::quantile::{ProbabilityGrid, QuantileFunction};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(path: &Path, line: u64, field: &str) -> CliResult<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| CliError::Data(format!("{}: line {line}: '{field}' is not a number", path.display())))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("{}: line {line}: non-finite value", path.display())));
    }
    Ok(v)
}

/// Raw observations per subject from the long format, in order of first appearance.
#[derive(Debug, Default)]
pub struct LongSamples {
    pub ids: Vec<String>,
    pub outcome: Vec<Vec<f64>>,
    pub predictor: Vec<Vec<f64>>,
}

impl LongSamples {
    pub fn has_predictor(&self) -> bool {
        self.predictor.iter().any(|v| !v.is_empty())
    }
}

pub fn read_long(path: &Path) -> CliResult<LongSamples> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let (ci, cv, cx) = (col("subject_id")?, col("variable")?, col("value")?);
    let mut out = LongSamples::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = line_of(&rec);
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| CliError::Data(format!("{}: line {line}: too few fields", path.display())))
        };
        let id = field(ci)?.to_string();
        if id.is_empty() {
            return Err(CliError::Data(format!("{}: line {line}: empty subject_id", path.display())));
        }
        let value = parse_f64(path, line, field(cx)?)?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            out.ids.push(id);
            out.outcome.push(Vec::new());
            out.predictor.push(Vec::new());
            out.ids.len() - 1
        });
        match field(cv)? {
            "outcome" => out.outcome[k].push(value),
            "predictor" => out.predictor[k].push(value),
            other => {
                return Err(CliError::Data(format!(
                    "{}: line {line}: variable must be 'outcome' or 'predictor', got '{other}'",
                    path.display()
                )))
            }
        }
    }
    if out.ids.is_empty() {
        return Err(CliError::Data(format!("{}: no observations", path.display())));
    }
    Ok(out)
}

/// Quantile functions in the wide format: a `p` column and one column per subject.
#[derive(Debug, Clone)]
pub struct WideTable {
    pub grid: Arc<ProbabilityGrid>,
    pub ids: Vec<String>,
    pub functions: Vec<QuantileFunction>,
}

impl WideTable {
    pub fn by_id(&self) -> HashMap<&str, &QuantileFunction> {
        self.ids.iter().map(String::as_str).zip(&self.functions).collect()
    }
}

pub fn read_wide(path: &Path) -> CliResult<WideTable> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    if headers.get(0) != Some("p") {
        return Err(CliError::Data(format!("{}: first column must be 'p'", path.display())));
    }
    let ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(CliError::Data(format!("{}: no subject columns", path.display())));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CliError::Data(format!("{}: duplicate subject '{dup}'", path.display())));
    }
    let mut points = Vec::new();
    let mut columns = vec![Vec::new(); ids.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = line_of(&rec);
        if rec.len() != ids.len() + 1 {
            return Err(CliError::Data(format!(
                "{}: line {line}: expected {} fields, found {}",
                path.display(),
                ids.len() + 1,
                rec.len()
            )));
        }
        points.push(parse_f64(path, line, &rec[0])?);
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(parse_f64(path, line, &rec[c + 1])?);
        }
    }
    let grid = Arc::new(
        ProbabilityGrid::new(points).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
    );
    let functions = columns
        .into_iter()
        .zip(&ids)
        .map(|(v, id)| {
            QuantileFunction::new(Arc::clone(&grid), v)
                .map_err(|e| CliError::Data(format!("{}: subject '{id}': {e}", path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(WideTable { grid, ids, functions })
}

pub fn wide_csv(grid: &[f64], ids: &[String], columns: &[&[f64]]) -> String {
    let mut out = String::from("p");
    for id in ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (l, p) in grid.iter().enumerate() {
        out.push_str(&fmt_f64(*p));
        for c in columns {
            out.push(',');
            out.push_str(&fmt_f64(c[l]));
        }
        out.push('\n');
    }
    out
}

/// Scalar covariates: a `subject_id` column followed by named numeric columns.
#[derive(Debug, Clone)]
pub struct CovariateTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn by_id(&self) -> HashMap<&str, &Vec<f64>> {
        self.ids.iter().map(String::as_str).zip(&self.rows).collect()
    }
}

/// Reads the requested columns, or every column after `subject_id` when none are given.
pub fn read_covariates(path: &Path, columns: Option<&[String]>) -> CliResult<CovariateTable> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    if headers.get(0) != Some("subject_id") {
        return Err(CliError::Data(format!("{}: first column must be 'subject_id'", path.display())));
    }
    let names: Vec<String> = match columns {
        Some(c) => c.to_vec(),
        None => headers.iter().skip(1).map(str::to_string).collect(),
    };
    let idx = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .skip(1)
                .position(|h| h == n)
                .map(|p| p + 1)
                .ok_or_else(|| CliError::Data(format!("{}: missing covariate column '{n}'", path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = line_of(&rec);
        if rec.len() != headers.len() {
            return Err(CliError::Data(format!(
                "{}: line {line}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(CliError::Data(format!("{}: line {line}: duplicate subject '{id}'", path.display())));
        }
        rows.push(idx.iter().map(|&c| parse_f64(path, line, &rec[c])).collect::<CliResult<Vec<_>>>()?);
        ids.push(id);
    }
    Ok(CovariateTable { ids, names, rows })
}

/// Error listing subjects present in one source but not the other.
pub fn id_mismatch(reference: &[String], other: &[String], what: &str) -> Option<CliError> {
    let a: BTreeSet<&str> = reference.iter().map(String::as_str).collect();
    let b: BTreeSet<&str> = other.iter().map(String::as_str).collect();
    let missing: Vec<&str> = a.difference(&b).copied().collect();
    let extra: Vec<&str> = b.difference(&a).copied().collect();
    if missing.is_empty() && extra.is_empty() {
        return None;
    }
    let mut msg = format!("subject ids in {what} do not match the outcomes");
    if !missing.is_empty() {
        msg.push_str(&format!("; missing: {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        msg.push_str(&format!("; unexpected: {}", extra.join(", ")));
    }
    Some(CliError::Data(msg))
}
