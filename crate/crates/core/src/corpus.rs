//! On-disk corpus: a tab-separated manifest of per-sample metadata and
//! binary matrices of flux rows.
//!
//! A matrix file is one ASCII header line
//! `WEAKSIG-MATRIX 1 kind=<kind> rows=<r> cols=<c> [key=value ...]`
//! followed by `r · c` little-endian `f32` values, row after row. Row `i`
//! belongs to manifest record `i`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::catalog::{ClassLabel, Split};
use crate::error::{integrity, validation, Result};
use crate::spectra_synth::StellarParams;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const FLUX_FILE: &str = "flux.bin";
pub const PROCESSED_FILE: &str = "processed.bin";

const MANIFEST_MAGIC: &str = "# weaksig-manifest 1";
const COLUMNS: [&str; 9] = ["id", "t_eff", "log_g", "fe_h", "c_h", "rv", "snr", "class", "split"];
const MATRIX_MAGIC: &str = "WEAKSIG-MATRIX 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub params: StellarParams,
    pub snr: f64,
    pub class: ClassLabel,
    pub split: Split,
}

/// Records plus `# key=value` header attributes (such as the split seed).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub attrs: Vec<(String, String)>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn render_manifest(m: &Manifest) -> String {
    let mut s = format!("{MANIFEST_MAGIC}\n");
    for (k, v) in &m.attrs {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s.push_str(&COLUMNS.join("\t"));
    s.push('\n');
    let records = &m.records;
    for r in records {
        let p = &r.params;
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            p.t_eff,
            p.log_g,
            p.fe_h,
            p.c_h,
            p.rv,
            r.snr,
            r.class.code(),
            r.split
        ));
    }
    s
}

pub fn parse_manifest(text: &str, source: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MANIFEST_MAGIC => {}
        _ => return Err(integrity(format!("{source}: not a corpus manifest"))),
    }
    let mut attrs = Vec::new();
    loop {
        match lines.next() {
            Some((n, l)) if l.starts_with('#') => {
                let (k, v) = l[1..]
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| integrity(format!("{source}:{}: bad header attribute", n + 1)))?;
                attrs.push((k.to_string(), v.to_string()));
            }
            Some((_, l)) if l.split('\t').eq(COLUMNS) => break,
            _ => return Err(integrity(format!("{source}: manifest column header missing or changed"))),
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| integrity(format!("{source}:{}: {what}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(bad(&format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("bad {} {:?}", COLUMNS[i], f[i])));
        let id: usize = f[0].parse().map_err(|_| bad("bad id"))?;
        if id != out.len() {
            return Err(bad(&format!("record id {id} out of sequence")));
        }
        let params = StellarParams { t_eff: num(1)?, log_g: num(2)?, fe_h: num(3)?, c_h: num(4)?, rv: num(5)? };
        params.validate().map_err(|e| bad(&e.to_string()))?;
        let class_code: usize = f[7].parse().map_err(|_| bad("bad class"))?;
        out.push(Record {
            id,
            params,
            snr: num(6)?,
            class: ClassLabel::from_code(class_code).map_err(|e| bad(&e.to_string()))?,
            split: Split::parse(f[8]).map_err(|e| bad(&e.to_string()))?,
        });
    }
    Ok(Manifest { attrs, records: out })
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    std::fs::write(path, render_manifest(m))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, &path.display().to_string())
}

/// A dense row-major matrix read from a matrix file.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub attrs: Vec<(String, String)>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| integrity(format!("{} matrix header lacks {key}", self.kind)))
    }

    pub fn attr_f64(&self, key: &str) -> Result<f64> {
        let v = self.attr(key)?;
        v.parse().map_err(|_| integrity(format!("{} matrix header: bad {key} {v:?}", self.kind)))
    }
}

pub fn write_matrix<R: AsRef<[f64]>>(
    w: &mut impl Write,
    kind: &str,
    rows: &[R],
    attrs: &[(String, String)],
) -> Result<()> {
    let cols = rows.first().map_or(0, |r| r.as_ref().len());
    if let Some(i) = rows.iter().position(|r| r.as_ref().len() != cols) {
        return Err(validation(format!("row {i} has {} values, expected {cols}", rows[i].as_ref().len())));
    }
    let mut header = format!("{MATRIX_MAGIC} kind={kind} rows={} cols={cols}", rows.len());
    for (k, v) in attrs {
        if k.contains(['=', ' ']) || v.contains([' ', '\n']) {
            return Err(validation(format!("matrix attribute {k:?} = {v:?} is not header-safe")));
        }
        header.push_str(&format!(" {k}={v}"));
    }
    writeln!(w, "{header}")?;
    let mut buf = Vec::with_capacity(cols * 4);
    for r in rows {
        buf.clear();
        for v in r.as_ref() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a matrix of the expected `kind`. Truncated payloads are reported
/// with the first incomplete record.
pub fn read_matrix(r: &mut impl BufRead, kind: &str) -> Result<Matrix> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let rest = header
        .trim_end()
        .strip_prefix(MATRIX_MAGIC)
        .ok_or_else(|| integrity(format!("not a {kind} matrix file")))?;
    let mut fields: Vec<(String, String)> = Vec::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| integrity(format!("bad matrix header token {tok:?}")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    let take = |key: &str| -> Result<String> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| integrity(format!("matrix header lacks {key}")))
    };
    let found = take("kind")?;
    if found != kind {
        return Err(integrity(format!("expected a {kind} matrix, found {found}")));
    }
    let dim = |key: &str| -> Result<usize> {
        let v = take(key)?;
        v.parse().map_err(|_| integrity(format!("bad matrix {key} {v:?}")))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = vec![0u8; cols * 4];
    for i in 0..rows {
        read_full(r, &mut buf).map_err(|got| {
            integrity(format!("{kind} matrix truncated in record {i}: {got} of {} bytes present", buf.len()))
        })?;
        data.extend(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(integrity(format!("{kind} matrix has trailing bytes after record {}", rows.saturating_sub(1))));
    }
    let attrs = fields.into_iter().filter(|(k, _)| !["kind", "rows", "cols"].contains(&k.as_str())).collect();
    Ok(Matrix { kind: kind.to_string(), rows, cols, data, attrs })
}

/// Fills `buf`, returning the byte count read on a short read.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::result::Result<(), usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(got),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return Err(got),
        }
    }
    Ok(())
}

pub fn save_matrix<R: AsRef<[f64]>>(path: &Path, kind: &str, rows: &[R], attrs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, kind, rows, attrs)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path, kind: &str) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_matrix(&mut r, kind)
}
