//! On-disk formats.
//!
//! A dataset `<prefix>` is two tab-separated files, each optionally gzipped
//! (`.gz` suffix):
//!
//! * `<prefix>.matrix.tsv`: one header line of gene names, then one row of
//!   expression values per cell. Values are single precision written in
//!   shortest round-trip form (at most 9 significant digits), so a save/load
//!   cycle is bit-exact.
//! * `<prefix>.meta.tsv`: three `#`-prefixed vocabulary lines (contexts,
//!   perturbations, doses), a header, then one row per cell with columns
//!   `cell_id context perturbation dose replicate split provenance`.
//!
//! A checkpoint is `CDCK`, a little-endian `u32` format version, a `u64`
//! length, a JSON header of that length, and the raw little-endian `f64`
//! parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use celldiff_core::data::{CellMeta, Dataset, Split};
use celldiff_core::denoiser::ModelConfig;
use celldiff_core::Matrix;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

const MATRIX_SUFFIX: &str = ".matrix.tsv";
const META_SUFFIX: &str = ".meta.tsv";
const META_COLUMNS: [&str; 7] = ["cell_id", "context", "perturbation", "dose", "replicate", "split", "provenance"];

fn with_suffix(prefix: &Path, suffix: &str, gzip: bool) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    if gzip {
        s.push(".gz");
    }
    PathBuf::from(s)
}

/// The matrix and metadata paths a dataset prefix would be written to.
pub fn dataset_paths(prefix: &Path, gzip: bool) -> (PathBuf, PathBuf) {
    (with_suffix(prefix, MATRIX_SUFFIX, gzip), with_suffix(prefix, META_SUFFIX, gzip))
}

/// Existing files for `prefix`, preferring the uncompressed pair.
fn existing_paths(prefix: &Path) -> CliResult<(PathBuf, PathBuf)> {
    for gzip in [false, true] {
        let (m, t) = dataset_paths(prefix, gzip);
        if m.exists() && t.exists() {
            return Ok((m, t));
        }
    }
    Err(CliError::Precondition(format!(
        "no dataset at {} (expected {} and {})",
        prefix.display(),
        dataset_paths(prefix, false).0.display(),
        dataset_paths(prefix, false).1.display()
    )))
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn create(path: &Path) -> CliResult<Box<dyn Write>> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let w = BufWriter::new(f);
    Ok(if is_gz(path) { Box::new(GzEncoder::new(w, Compression::default())) } else { Box::new(w) })
}

fn open(path: &Path) -> CliResult<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(if is_gz(path) { Box::new(BufReader::new(GzDecoder::new(f))) } else { Box::new(BufReader::new(f)) })
}

/// Single-precision value in shortest round-trip form.
pub fn format_value(v: f64) -> String {
    format!("{}", v as f32)
}

fn write_lines(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Refuses to clobber existing files unless `force`.
pub fn check_writable(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(CliError::Precondition(format!("{} exists; pass --force to overwrite", p.display())));
    }
    Ok(())
}

pub fn save_dataset(prefix: &Path, ds: &Dataset, gzip: bool) -> CliResult<(PathBuf, PathBuf)> {
    if ds.is_empty() {
        return Err(CliError::Precondition("refusing to save an empty dataset".into()));
    }
    let (matrix_path, meta_path) = dataset_paths(prefix, gzip);
    if let Some(dir) = matrix_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_lines(&matrix_path, |w| {
        writeln!(w, "{}", ds.genes.join("\t"))?;
        let mut line = String::new();
        for row in ds.expression().iter_rows() {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push('\t');
                }
                line.push_str(&format_value(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    write_lines(&meta_path, |w| {
        writeln!(w, "#contexts\t{}", ds.contexts.join("\t"))?;
        writeln!(w, "#perturbations\t{}", ds.perturbations.join("\t"))?;
        writeln!(w, "#doses\t{}", ds.doses.join("\t"))?;
        writeln!(w, "{}", META_COLUMNS.join("\t"))?;
        for m in ds.meta() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.cell_id,
                ds.contexts[m.context],
                ds.perturbations[m.perturbation],
                m.dose.map(|d| ds.doses[d].as_str()).unwrap_or(""),
                m.replicate,
                m.split.as_str(),
                m.provenance.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    })?;
    Ok((matrix_path, meta_path))
}

fn read_line(r: &mut dyn BufRead, path: &Path, buf: &mut String) -> CliResult<bool> {
    buf.clear();
    let n = r.read_line(buf).map_err(|e| CliError::io(path, e))?;
    while buf.ends_with('\n') || buf.ends_with('\r') {
        buf.pop();
    }
    Ok(n > 0)
}

fn vocab_line(line: &str, key: &str, path: &Path, lineno: usize) -> CliResult<Vec<String>> {
    let mut fields = line.split('\t');
    if fields.next() != Some(key) {
        return Err(CliError::format(path, lineno, format!("expected a `{key}` vocabulary line")));
    }
    Ok(fields.filter(|f| !f.is_empty()).map(str::to_string).collect())
}

fn lookup(vocab: &[String], name: &str, kind: &str, path: &Path, line: usize) -> CliResult<usize> {
    vocab
        .iter()
        .position(|v| v == name)
        .ok_or_else(|| CliError::format(path, line, format!("unknown {kind} `{name}`")))
}

pub fn load_dataset(prefix: &Path) -> CliResult<Dataset> {
    let (matrix_path, meta_path) = existing_paths(prefix)?;
    let mut buf = String::new();

    let mut r = open(&meta_path)?;
    let mut lines = Vec::new();
    let mut lineno = 0;
    let mut vocab = Vec::new();
    for key in ["#contexts", "#perturbations", "#doses"] {
        lineno += 1;
        if !read_line(&mut r, &meta_path, &mut buf)? {
            return Err(CliError::format(&meta_path, lineno, "truncated vocabulary header"));
        }
        vocab.push(vocab_line(&buf, key, &meta_path, lineno)?);
    }
    let doses = vocab.pop().unwrap();
    let perturbations = vocab.pop().unwrap();
    let contexts = vocab.pop().unwrap();
    lineno += 1;
    read_line(&mut r, &meta_path, &mut buf)?;
    if buf.split('\t').collect::<Vec<_>>() != META_COLUMNS {
        return Err(CliError::format(&meta_path, lineno, format!("header must be `{}`", META_COLUMNS.join(" "))));
    }
    while read_line(&mut r, &meta_path, &mut buf)? {
        lineno += 1;
        let f: Vec<&str> = buf.split('\t').collect();
        if f.len() != META_COLUMNS.len() {
            return Err(CliError::format(
                &meta_path,
                lineno,
                format!("expected {} fields, found {}", META_COLUMNS.len(), f.len()),
            ));
        }
        let dose = if f[3].is_empty() { None } else { Some(lookup(&doses, f[3], "dose", &meta_path, lineno)?) };
        lines.push(CellMeta {
            cell_id: f[0].to_string(),
            context: lookup(&contexts, f[1], "context", &meta_path, lineno)?,
            perturbation: lookup(&perturbations, f[2], "perturbation", &meta_path, lineno)?,
            dose,
            replicate: f[4]
                .parse()
                .map_err(|_| CliError::format(&meta_path, lineno, format!("bad replicate `{}`", f[4])))?,
            split: Split::parse(f[5])
                .ok_or_else(|| CliError::format(&meta_path, lineno, format!("bad split `{}`", f[5])))?,
            provenance: (!f[6].is_empty()).then(|| f[6].to_string()),
        });
    }

    let mut r = open(&matrix_path)?;
    if !read_line(&mut r, &matrix_path, &mut buf)? || buf.is_empty() {
        return Err(CliError::format(&matrix_path, 1, "missing gene header"));
    }
    let genes: Vec<String> = buf.split('\t').map(str::to_string).collect();
    let mut data = Vec::with_capacity(lines.len() * genes.len());
    let mut rows = 0;
    while read_line(&mut r, &matrix_path, &mut buf)? {
        rows += 1;
        let before = data.len();
        for field in buf.split('\t') {
            let v: f32 = field
                .parse()
                .map_err(|_| CliError::format(&matrix_path, rows + 1, format!("bad value `{field}`")))?;
            data.push(v as f64);
        }
        if data.len() - before != genes.len() {
            return Err(CliError::format(
                &matrix_path,
                rows + 1,
                format!("expected {} values, found {}", genes.len(), data.len() - before),
            ));
        }
    }
    if rows != lines.len() {
        return Err(CliError::format(
            &matrix_path,
            rows + 1,
            format!("expected {} rows (from {}), found {rows}", lines.len(), meta_path.display()),
        ));
    }
    let expression = Matrix::new(rows, genes.len(), data)?;
    Ok(Dataset::new(genes, contexts, perturbations, doses, expression, lines)?)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CDCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub genes: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub self_condition: bool,
    pub contexts: usize,
    pub perturbations: usize,
    pub doses: usize,
}

impl From<ModelConfig> for ModelShape {
    fn from(c: ModelConfig) -> Self {
        Self {
            genes: c.genes,
            width: c.width,
            blocks: c.blocks,
            heads: c.heads,
            self_condition: c.self_condition,
            contexts: c.contexts,
            perturbations: c.perturbations,
            doses: c.doses,
        }
    }
}

impl From<&ModelShape> for ModelConfig {
    fn from(c: &ModelShape) -> Self {
        Self {
            genes: c.genes,
            width: c.width,
            blocks: c.blocks,
            heads: c.heads,
            self_condition: c.self_condition,
            contexts: c.contexts,
            perturbations: c.perturbations,
            doses: c.doses,
        }
    }
}

/// Everything in a checkpoint besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelShape,
    pub step: usize,
    /// `scratch`, `pretrain` or `finetune`.
    pub mode: String,
    pub score: Option<f64>,
    pub genes: Vec<String>,
    pub contexts: Vec<String>,
    pub perturbations: Vec<String>,
    pub doses: Vec<String>,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn model_config(&self) -> ModelConfig {
        (&self.header.model).into()
    }

    /// Checks that `ds` uses the same gene and condition vocabularies.
    pub fn check_compatible(&self, ds: &Dataset) -> CliResult<()> {
        vocab_diff("genes", &self.header.genes, &ds.genes)?;
        vocab_diff("contexts", &self.header.contexts, &ds.contexts)?;
        vocab_diff("perturbations", &self.header.perturbations, &ds.perturbations)?;
        vocab_diff("doses", &self.header.doses, &ds.doses)
    }
}

/// Errors naming the entries that differ between two vocabularies.
pub fn vocab_diff(kind: &str, expected: &[String], found: &[String]) -> CliResult<()> {
    if expected == found {
        return Ok(());
    }
    let missing: Vec<&str> = expected.iter().filter(|g| !found.contains(g)).map(String::as_str).collect();
    let extra: Vec<&str> = found.iter().filter(|g| !expected.contains(g)).map(String::as_str).collect();
    let detail = if missing.is_empty() && extra.is_empty() {
        "same entries in a different order".to_string()
    } else {
        format!("missing [{}], unexpected [{}]", missing.join(", "), extra.join(", "))
    };
    Err(CliError::Precondition(format!("{kind} vocabulary mismatch: {detail}")))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_lines(path, |w| {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &ckpt.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: &str| CliError::format(path, 0, msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let rest = &bytes[16 + len..];
    if rest.len() != header.num_parameters * 8 {
        return Err(bad(&format!(
            "expected {} parameters, found {} bytes",
            header.num_parameters,
            rest.len()
        )));
    }
    let params = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Checkpoint { header, params })
}
