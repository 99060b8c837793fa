//! CSV input and output.
//!
//! Trials use the header `z,y,x1,...,xJ`; populations use `y0,y1,x1,...,xJ`.
//! Every cell must be present and numeric, and `z` must be 0 or 1.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::design::Assignment;
use crate::error::{Error, Result};
use crate::estimators::ObservedTrial;
use crate::population::FinitePopulation;

fn parse_error(line: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Numeric table with a validated header: `lead` fixed columns followed by
/// `x1..xJ`.
struct Table {
    lead: Vec<Vec<f64>>,
    x: Vec<f64>,
    j: usize,
    rows: usize,
}

fn read_table<R: Read>(input: R, lead: &[&str]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    for (k, name) in lead.iter().enumerate() {
        match header.get(k) {
            Some(h) if h == name => {}
            Some(h) => return Err(parse_error(1, h, format!("expected column `{name}`"))),
            None => return Err(parse_error(1, name, "missing column")),
        }
    }
    let j = header.len() - lead.len();
    if j == 0 {
        return Err(parse_error(1, "x1", "at least one covariate column is required"));
    }
    for (k, h) in header[lead.len()..].iter().enumerate() {
        if *h != format!("x{}", k + 1) {
            return Err(parse_error(1, h, format!("expected column `x{}`", k + 1)));
        }
    }

    let mut table = Table {
        lead: vec![Vec::new(); lead.len()],
        x: Vec::new(),
        j,
        rows: 0,
    };
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(r + 2);
        if record.len() != header.len() {
            let col = header.get(record.len()).map(String::as_str).unwrap_or("(extra)");
            return Err(parse_error(
                line,
                col,
                format!("expected {} cells, found {}", header.len(), record.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(parse_error(line, &header[c], "missing value"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(line, &header[c], format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(line, &header[c], "value must be finite"));
            }
            if c < lead.len() {
                table.lead[c].push(v);
            } else {
                table.x.push(v);
            }
        }
        table.rows += 1;
    }
    Ok(table)
}

/// Reads a trial and checks `z ∈ {0, 1}`, both arms present and `N ≥ J + 3`.
pub fn read_trial_csv<R: Read>(input: R) -> Result<ObservedTrial> {
    let t = read_table(input, &["z", "y"])?;
    let mut z = Vec::with_capacity(t.rows);
    for (i, &v) in t.lead[0].iter().enumerate() {
        if v == 0.0 {
            z.push(false);
        } else if v == 1.0 {
            z.push(true);
        } else {
            return Err(parse_error(i + 2, "z", format!("treatment must be 0 or 1, got {v}")));
        }
    }
    if t.rows < t.j + 3 {
        return Err(parse_error(
            t.rows + 1,
            "z",
            format!("need at least J + 3 = {} units, found {}", t.j + 3, t.rows),
        ));
    }
    let n1 = z.iter().filter(|&&b| b).count();
    if n1 == 0 || n1 == t.rows {
        return Err(parse_error(t.rows + 1, "z", "both arms must contain at least one unit"));
    }
    let x = DMatrix::from_row_slice(t.rows, t.j, &t.x);
    ObservedTrial::new(Assignment::new(z)?, t.lead[1].clone(), x)
}

pub fn read_trial_csv_path(path: &Path) -> Result<ObservedTrial> {
    read_trial_csv(std::fs::File::open(path)?)
}

fn x_header(j: usize) -> impl Iterator<Item = String> {
    (1..=j).map(|k| format!("x{k}"))
}

/// Writes the observed trial; covariates appear centered.
pub fn write_trial_csv<W: Write>(trial: &ObservedTrial, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let j = trial.x().ncols();
    w.write_record(["z".to_string(), "y".to_string()].into_iter().chain(x_header(j)))?;
    for i in 0..trial.len() {
        let z = if trial.z().indicators()[i] { "1" } else { "0" };
        let row = [z.to_string(), trial.y()[i].to_string()]
            .into_iter()
            .chain((0..j).map(|c| trial.x()[(i, c)].to_string()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_population_csv<W: Write>(pop: &FinitePopulation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let j = pop.covariates();
    w.write_record(["y0".to_string(), "y1".to_string()].into_iter().chain(x_header(j)))?;
    for i in 0..pop.len() {
        let row = [pop.y0()[i].to_string(), pop.y1()[i].to_string()]
            .into_iter()
            .chain((0..j).map(|c| pop.x()[(i, c)].to_string()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_population_csv<R: Read>(input: R) -> Result<FinitePopulation> {
    let t = read_table(input, &["y0", "y1"])?;
    let x = DMatrix::from_row_slice(t.rows, t.j, &t.x);
    FinitePopulation::new(t.lead[0].clone(), t.lead[1].clone(), x)
}
