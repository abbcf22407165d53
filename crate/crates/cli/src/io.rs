//! File formats at the command-line boundary: input batches, logit sample
//! CSVs, metric CSVs and guarded output files.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pfp_core::{ModelGraph, SampleBatch, Tensor};
use serde::Deserialize;

/// Reads a whole file, or stdin for `-`.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if path.as_os_str() == "-" {
        io::stdin().read_to_end(&mut buf).context("reading stdin")?;
    } else {
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .with_context(|| format!("reading {}", path.display()))?;
    }
    Ok(buf)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = read_bytes(path)?;
    pfp_core::model::read_model(&bytes).with_context(|| format!("loading model {}", path.display()))
}

#[derive(Deserialize)]
struct BlobHeader {
    shape: Vec<usize>,
}

/// Input batch for `graph`: either a one-line JSON header `{"shape":[..]}`
/// followed by little-endian f32 values, or CSV with one item per row.
pub fn read_input(path: &Path, graph: &ModelGraph) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let item_shape = graph.input_shape();
    let per_item: usize = item_shape.iter().product();
    let (shape, data) = if bytes.first() == Some(&b'{') {
        let end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .context("blob header must end with a newline")?;
        let header: BlobHeader = serde_json::from_slice(&bytes[..end]).context("parsing blob header")?;
        let body = &bytes[end + 1..];
        ensure!(body.len() % 4 == 0, "blob body is not a whole number of f32 values");
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut shape = header.shape;
        if shape == item_shape {
            shape.insert(0, 1);
        }
        (shape, data)
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(bytes.as_slice());
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
            match parsed {
                Ok(v) => {
                    ensure!(
                        v.len() == per_item,
                        "row {} has {} values, model expects {per_item}",
                        i + 1,
                        v.len()
                    );
                    data.extend(v);
                    rows += 1;
                }
                Err(_) if i == 0 => continue,
                Err(e) => bail!("row {}: {e}", i + 1),
            }
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(item_shape);
        (shape, data)
    };
    ensure!(
        shape.len() == item_shape.len() + 1 && shape[1..] == *item_shape,
        "input shape {shape:?} does not match model input {item_shape:?} plus a batch dimension"
    );
    ensure!(shape[0] > 0, "input batch is empty");
    Ok(Tensor::new(shape, data)?)
}

pub const SAMPLES_HEADER: &str = "sample,item,class,logit";

pub fn write_samples(batch: &SampleBatch, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{SAMPLES_HEADER}")?;
    let (s, n, _) = batch.dims();
    for sample in 0..s {
        for item in 0..n {
            for (class, v) in batch.row(sample, item).iter().enumerate() {
                writeln!(out, "{sample},{item},{class},{v}")?;
            }
        }
    }
    Ok(())
}

/// Parses a `sample,item,class,logit` CSV; rows may come in any order but
/// must cover the full grid exactly once.
pub fn read_samples(path: &Path) -> Result<SampleBatch> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    ensure!(
        headers.iter().collect::<Vec<_>>() == SAMPLES_HEADER.split(',').collect::<Vec<_>>(),
        "logit CSV header must be '{SAMPLES_HEADER}'"
    );
    let mut rows = Vec::new();
    for rec in reader.deserialize::<(usize, usize, usize, f32)>() {
        rows.push(rec?);
    }
    ensure!(!rows.is_empty(), "logit CSV has no rows");
    let s = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let n = rows.iter().map(|r| r.1).max().unwrap() + 1;
    let k = rows.iter().map(|r| r.2).max().unwrap() + 1;
    ensure!(rows.len() == s * n * k, "logit CSV has {} rows, expected {s}x{n}x{k}", rows.len());
    let mut logits = vec![f32::NAN; s * n * k];
    let mut seen = vec![false; s * n * k];
    for (a, b, c, v) in rows {
        let i = (a * n + b) * k + c;
        ensure!(!seen[i], "duplicate row for sample {a}, item {b}, class {c}");
        seen[i] = true;
        logits[i] = v;
    }
    Ok(SampleBatch::new(s, n, k, logits, 0)?)
}

/// One named column of a metrics CSV.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h == column)
        .with_context(|| format!("{} has no column '{column}'", path.display()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = rec.get(idx).context("short row")?;
        out.push(field.parse::<f64>().with_context(|| format!("bad value '{field}'"))?);
    }
    Ok(out)
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (5 - x.abs().log10().floor() as i32).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

/// Refuses an output path that names one of the command's inputs, so
/// `--force` can never clobber an input file.
pub fn ensure_not_input(out: Option<&PathBuf>, inputs: &[&Path]) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    let Ok(out) = out.canonicalize() else { return Ok(()) };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == out) {
            bail!("--out {} would overwrite an input file", out.display());
        }
    }
    Ok(())
}

/// Destination for command output: stdout, or a file that is only replaced
/// when `force` is set.
pub fn open_output(path: Option<&PathBuf>, force: bool) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) if p.as_os_str() == "-" => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            if p.exists() && !force {
                bail!("{} exists; pass --force to overwrite", p.display());
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(2.5), "2.50000");
        assert_eq!(sig6(1.234_567_8), "1.23457");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(123456.7), "123457");
    }
}
