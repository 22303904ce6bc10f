//! CSV ingestion and design-matrix construction.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use glmm_deriv::GlmmData;
use nalgebra::DMatrix;

use crate::config::{ModelConfig, Term, TermList};
use crate::error::{CliError, Result};

const MISSING: [&str; 3] = ["", "NA", "NaN"];

fn is_missing(v: &str) -> bool {
    MISSING.contains(&v.trim())
}

/// Raw table: header plus records with their 1-based file line numbers.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::ingestion(None, format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::ingestion(Some(1), e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(CliError::ingestion(Some(1), "header row required"));
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::ingestion(e.position().map(|p| p.line()), e.to_string()))?;
            lines.push(rec.position().map_or(0, |p| p.line()));
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows, lines })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::ingestion(Some(1), format!("unknown column '{name}'")))
    }
}

/// A referenced column restricted to the retained rows.
#[derive(Debug, Clone)]
enum Column {
    Numeric(Vec<f64>),
    /// Sorted levels and per-row level index.
    Factor(Vec<String>, Vec<usize>),
}

/// Sorted distinct levels; numerically when every level parses as a number.
fn factor_levels(values: &[&str]) -> (Vec<String>, Vec<usize>) {
    let set: BTreeSet<&str> = values.iter().copied().collect();
    let mut levels: Vec<String> = set.into_iter().map(str::to_string).collect();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut idx: Vec<usize> = (0..levels.len()).collect();
        idx.sort_by(|&a, &b| nums[a].total_cmp(&nums[b]));
        levels = idx.into_iter().map(|i| levels[i].clone()).collect();
    }
    let pos: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let codes = values.iter().map(|v| pos[v]).collect();
    (levels, codes)
}

/// Data after missing-row removal, with the table kept for later lookups.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Arc<GlmmData>,
    pub dropped_rows: usize,
    table: Table,
    /// Indices into `table.rows` of the rows that were kept.
    retained: Vec<usize>,
}

impl Ingested {
    /// One value per cluster of `column`, in cluster order. The column must be
    /// constant within clusters; categorical values map to their sorted level index.
    pub fn cluster_values(&self, column: &str) -> Result<Vec<f64>> {
        let c = self.table.column(column)?;
        let raw: Vec<&str> = self.retained.iter().map(|&r| self.table.rows[r][c].trim()).collect();
        if let Some(k) = raw.iter().position(|v| is_missing(v)) {
            return Err(CliError::ingestion(Some(self.table.lines[self.retained[k]]), format!("missing value in '{column}'")));
        }
        let values: Vec<f64> = match raw.iter().map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>() {
            Ok(v) => v,
            Err(_) => factor_levels(&raw).1.into_iter().map(|i| i as f64).collect(),
        };
        let mut out = Vec::with_capacity(self.data.n_clusters());
        for block in self.data.clusters() {
            let first = values[block.rows[0]];
            if let Some(&r) = block.rows.iter().find(|&&r| values[r] != first) {
                return Err(CliError::Config(format!(
                    "'{column}' varies within a cluster (line {})",
                    self.table.lines[self.retained[r]]
                )));
            }
            out.push(first);
        }
        Ok(out)
    }
}

pub fn ingest_csv(path: &Path, config: &ModelConfig) -> Result<Ingested> {
    ingest_table(Table::read(path)?, config)
}

pub fn ingest_table(table: Table, config: &ModelConfig) -> Result<Ingested> {
    let referenced = config.referenced_columns()?;
    let idx: Vec<usize> = referenced.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != table.header.len() {
            return Err(CliError::ingestion(Some(table.lines[r]), "wrong number of fields"));
        }
    }
    let retained: Vec<usize> =
        (0..table.rows.len()).filter(|&r| idx.iter().all(|&c| !is_missing(&table.rows[r][c]))).collect();
    let dropped_rows = table.rows.len() - retained.len();
    if retained.is_empty() {
        return Err(CliError::ingestion(None, "no complete rows remain after dropping missing values"));
    }
    let line_of = |k: usize| table.lines[retained[k]];

    let mut columns: HashMap<&str, Column> = HashMap::new();
    for (name, &c) in referenced.iter().zip(&idx).skip(2) {
        let raw: Vec<&str> = retained.iter().map(|&r| table.rows[r][c].trim()).collect();
        let parsed: Vec<Option<f64>> = raw.iter().map(|v| v.parse::<f64>().ok()).collect();
        let col = if config.factors.contains(name) || parsed.iter().all(Option::is_none) {
            let (levels, codes) = factor_levels(&raw);
            Column::Factor(levels, codes)
        } else if let Some(k) = parsed.iter().position(Option::is_none) {
            return Err(CliError::ingestion(Some(line_of(k)), format!("unparseable number '{}' in '{name}'", raw[k])));
        } else {
            Column::Numeric(parsed.into_iter().map(Option::unwrap).collect())
        };
        columns.insert(name.as_str(), col);
    }

    let mut y = Vec::with_capacity(retained.len());
    for (k, &r) in retained.iter().enumerate() {
        let v = table.rows[r][idx[0]].trim();
        y.push(v.parse::<f64>().map_err(|_| {
            CliError::ingestion(Some(line_of(k)), format!("unparseable response '{v}' in '{}'", config.response))
        })?);
    }
    let cluster: Vec<String> = retained.iter().map(|&r| table.rows[r][idx[1]].trim().to_string()).collect();

    let fixed = TermList::parse(&config.fixed, "fixed")?;
    let random = TermList::parse(&config.random, "random")?;
    let (x, xnames) = design(&fixed, &columns, retained.len())?;
    let (z, znames) = design(&random, &columns, retained.len())?;
    let data = GlmmData::new(&y, &x, &z, &cluster)?.with_names(xnames, znames)?;
    Ok(Ingested { data: Arc::new(data), dropped_rows, table, retained })
}

/// Dense design matrix for a term list.
///
/// A categorical column in term T uses treatment coding (first level as
/// reference) when the rest of T is already in the model, the empty rest
/// counting as present with an intercept. Otherwise it gets one indicator per
/// level. Without an intercept the first categorical main effect is therefore
/// fully coded and later ones fall back to treatment coding.
fn design(list: &TermList, columns: &HashMap<&str, Column>, n: usize) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    if list.intercept {
        cols.push(vec![1.0; n]);
        names.push("(Intercept)".into());
    }
    let mut empty_present = list.intercept;
    let has_main = |c: &str| list.terms.contains(&Term::Main(c.to_string()));

    // (name, values) pieces for one column inside a term
    let pieces = |name: &str, full: bool| -> Vec<(String, Vec<f64>)> {
        match &columns[name] {
            Column::Numeric(v) => vec![(name.to_string(), v.clone())],
            Column::Factor(levels, codes) => levels
                .iter()
                .enumerate()
                .skip(if full { 0 } else { 1 })
                .map(|(l, level)| (format!("{name}{level}"), codes.iter().map(|&c| f64::from(c == l)).collect()))
                .collect(),
        }
    };

    for term in &list.terms {
        match term {
            Term::Main(a) => {
                let full = matches!(columns[a.as_str()], Column::Factor(..)) && !empty_present;
                if full {
                    empty_present = true;
                }
                for (nm, v) in pieces(a, full) {
                    names.push(nm);
                    cols.push(v);
                }
            }
            Term::Product(a, b) => {
                let pa = pieces(a, !has_main(b));
                let pb = pieces(b, !has_main(a));
                for (na, va) in &pa {
                    for (nb, vb) in &pb {
                        names.push(format!("{na}:{nb}"));
                        cols.push(va.iter().zip(vb).map(|(p, q)| p * q).collect());
                    }
                }
            }
        }
    }
    let m = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok((m, names))
}
