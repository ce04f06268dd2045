//! CSV and JSON readers and writers for datasets, parameters and latent
//! values.
//!
//! * M2PL responses: header + N rows of J `{0,1}` columns.
//! * Q-matrix: header + J rows of K `{0,1}` columns.
//! * Multilevel data: long format `level2_id, y, x_1, ..., x_K`.
//! * Parameters: JSON `{"model", "latent_dim", "blocks": {name: [..]}}`.
//! * Latent values: header + N rows of K columns.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{
    LatentState, Layout, M2plData, M2plModel, MultilevelData, MultilevelModel, ParamFile,
    ParamVector,
};
use crate::optimizer::Checkpoint;

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn parse_f64(s: &str, path: &Path, row: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| {
        Error::invalid(format!(
            "{}: row {row}: cannot parse '{s}' as a number",
            path.display()
        ))
    })
}

fn parse_bit(s: &str, path: &Path, row: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::invalid(format!(
            "{}: row {row}: expected 0 or 1, got '{s}'",
            path.display()
        ))),
    }
}

/// Reads a header + rows matrix of 0/1 entries. Returns `(rows, cols, data)`.
fn read_bit_matrix(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut rdr = reader(path)?;
    let cols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::invalid(format!(
                "{}: row {} has {} fields, expected {cols}",
                path.display(),
                r + 1,
                rec.len()
            )));
        }
        for f in rec.iter() {
            data.push(parse_bit(f, path, r + 1)?);
        }
        rows += 1;
    }
    Ok((rows, cols, data))
}

pub fn read_m2pl(responses: &Path, q_matrix: &Path) -> Result<M2plModel> {
    let (n, j, y) = read_bit_matrix(responses)?;
    let (jq, k, q) = read_bit_matrix(q_matrix)?;
    if jq != j {
        return Err(Error::invalid(format!(
            "Q-matrix has {jq} rows but the response file has {j} items"
        )));
    }
    let data = M2plData::new(n, j, k, y, q)?;
    for item in data.degenerate_items() {
        log::warn!(
            "item {item} has identical responses for every respondent; its intercept may diverge"
        );
    }
    Ok(M2plModel::new(data))
}

fn write_rows<W: Write, T: ToString>(
    w: &mut csv::Writer<W>,
    header: &[String],
    rows: impl Iterator<Item = Vec<T>>,
) -> Result<()> {
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_m2pl(model: &M2plModel, responses: &Path, q_matrix: &Path) -> Result<()> {
    let d = model.data();
    let (n, j, k) = (d.n_obs(), d.n_items(), d.latent_dim());
    let mut w = csv::Writer::from_path(responses)?;
    let header: Vec<String> = (1..=j).map(|c| format!("item_{c}")).collect();
    write_rows(&mut w, &header, (0..n).map(|i| d.responses(i).to_vec()))?;
    let mut w = csv::Writer::from_path(q_matrix)?;
    let header: Vec<String> = (1..=k).map(|c| format!("factor_{c}")).collect();
    write_rows(&mut w, &header, d.q().chunks(k).map(|r| r.to_vec()))?;
    Ok(())
}

pub fn read_multilevel(path: &Path) -> Result<MultilevelModel> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "level2_id" || &headers[1] != "y" {
        return Err(Error::invalid(format!(
            "{}: expected columns level2_id, y, x_1, ..., x_K",
            path.display()
        )));
    }
    let k = headers.len() - 2;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<(u8, Vec<f64>)>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != k + 2 {
            return Err(Error::invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                r + 1,
                rec.len(),
                k + 2
            )));
        }
        let id = rec[0].to_string();
        let y = parse_bit(&rec[1], path, r + 1)?;
        let x = (2..k + 2)
            .map(|c| parse_f64(&rec[c], path, r + 1))
            .collect::<Result<Vec<_>>>()?;
        let g = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push((y, x));
    }
    let mut offsets = vec![0];
    let mut y = Vec::new();
    let mut x = Vec::new();
    for g in groups {
        for (yy, xx) in g {
            y.push(yy);
            x.extend(xx);
        }
        offsets.push(y.len());
    }
    Ok(MultilevelModel::new(MultilevelData::new(
        k, ids, offsets, y, x,
    )?))
}

pub fn write_multilevel(model: &MultilevelModel, path: &Path) -> Result<()> {
    let d = model.data();
    let k = d.latent_dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["level2_id".to_string(), "y".to_string()];
    header.extend((1..=k).map(|c| format!("x_{c}")));
    w.write_record(&header)?;
    for i in 0..d.n_obs() {
        let (ys, xs) = d.group(i);
        for (yy, xr) in ys.iter().zip(xs.chunks(k)) {
            let mut rec = vec![d.ids()[i].clone(), yy.to_string()];
            rec.extend(xr.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<LatentState> {
    let mut rdr = reader(path)?;
    let k = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != k {
            return Err(Error::invalid(format!(
                "{}: row {} has {} fields, expected {k}",
                path.display(),
                r + 1,
                rec.len()
            )));
        }
        for f in rec.iter() {
            data.push(parse_f64(f, path, r + 1)?);
        }
        n += 1;
    }
    LatentState::from_rows(n, k, data)
}

pub fn write_latent(xi: &LatentState, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=xi.dim()).map(|c| format!("xi_{c}")).collect();
    write_rows(&mut w, &header, xi.rows().map(|r| r.to_vec()))
}

pub fn read_param_file(path: &Path) -> Result<ParamFile> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn read_params(path: &Path, layout: Arc<Layout>) -> Result<ParamVector> {
    ParamVector::from_file(layout, &read_param_file(path)?)
}

pub fn write_params(beta: &ParamVector, path: &Path) -> Result<()> {
    write_json(&beta.to_file(), path)
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Square matrix with named rows and columns.
pub fn write_square_matrix(m: &[f64], names: &[String], path: &Path) -> Result<()> {
    let p = names.len();
    if m.len() != p * p {
        return Err(Error::invalid("matrix size does not match the names"));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (a, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m[a * p..(a + 1) * p].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per checkpoint: `epoch, acceptance`, the iterate, then the
/// Polyak-Ruppert average (`avg_` prefix, empty before averaging starts).
/// Wall-clock stamps are left out so reruns compare byte for byte.
pub fn write_checkpoints(checkpoints: &[Checkpoint], names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "acceptance".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("avg_{n}")));
    w.write_record(&header)?;
    for c in checkpoints {
        if c.beta.len() != names.len() {
            return Err(Error::invalid("checkpoint length does not match the names"));
        }
        let mut rec = vec![c.epoch.to_string(), c.acceptance.to_string()];
        rec.extend(c.beta.iter().map(|v| v.to_string()));
        match &c.beta_avg {
            Some(avg) => rec.extend(avg.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), names.len())),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
