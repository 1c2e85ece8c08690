//! On-disk formats: dataset directories, embedding and sample CSVs,
//! selection artifacts, training logs, key=value configs and binary
//! checkpoints.
//!
//! Every real number is written with 17 significant digits so values
//! round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::adapt::EpochLog;
use crate::alignment::{SubjectDataset, Trial};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig};
use crate::numerics::Mat;
use crate::selection::{MdsCoordinates, SubjectEmbedding};

pub const MANIFEST_FILE: &str = "manifest";
pub const SUBJECTS_DIR: &str = "subjects";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

const CHECKPOINT_MAGIC: &[u8; 8] = b"MSDACKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// `{:.16e}`: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, format!("line {line}: '{field}' is not a number")))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

fn write_record<I, S>(w: &mut csv::Writer<fs::File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(record).map_err(|e| csv_err(path, e))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain key=value text; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

pub fn write_key_values(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub subjects: Vec<String>,
    pub channels: usize,
    pub samples: usize,
    pub n_classes: usize,
    pub sample_rate: f64,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut kv = BTreeMap::new();
        kv.insert("subjects".to_string(), self.subjects.join(","));
        kv.insert("C".to_string(), self.channels.to_string());
        kv.insert("T".to_string(), self.samples.to_string());
        kv.insert("K".to_string(), self.n_classes.to_string());
        kv.insert("sample_rate".to_string(), self.sample_rate.to_string());
        write_key_values(path, &kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = read_key_values(path)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::parse(path, format!("missing key '{k}'")))
        };
        let count = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(path, format!("'{k}' is not a count")))
        };
        let subjects: Vec<String> = get("subjects")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if subjects.is_empty() {
            return Err(Error::parse(path, "no subjects listed"));
        }
        Ok(Self {
            subjects,
            channels: count("C")?,
            samples: count("T")?,
            n_classes: count("K")?,
            sample_rate: get("sample_rate")?
                .parse()
                .map_err(|_| Error::parse(path, "'sample_rate' is not a number"))?,
        })
    }
}

pub fn subject_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(SUBJECTS_DIR).join(format!("{subject}.csv"))
}

/// One row per trial: 1-based label (empty when unlabeled) then the
/// channel-major flattened signal.
pub fn write_subject_csv(path: &Path, ds: &SubjectDataset) -> Result<()> {
    let (c, t) = (ds.channels(), ds.samples());
    let mut w = csv_writer(path)?;
    let header = std::iter::once("label".to_string())
        .chain((0..c).flat_map(|ch| (0..t).map(move |s| format!("c{ch}_t{s}"))));
    write_record(&mut w, path, header)?;
    for trial in &ds.trials {
        let label = trial.label.map_or(String::new(), |l| (l + 1).to_string());
        let row = std::iter::once(label).chain(trial.signal.data().iter().map(|v| fmt_f64(*v)));
        write_record(&mut w, path, row)?;
    }
    finish(w, path)
}

pub fn read_subject_csv(
    path: &Path,
    subject_id: &str,
    channels: usize,
    samples: usize,
    n_classes: usize,
) -> Result<SubjectDataset> {
    let mut r = csv_reader(path, true)?;
    let width = channels * samples + 1;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.len() != width || header.get(0) != Some("label") {
        return Err(Error::parse(
            path,
            format!("header has {} columns, expected label plus {channels}x{samples}", header.len()),
        ));
    }
    let mut trials = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != width {
            return Err(Error::parse(path, format!("line {line}: {} columns, expected {width}", rec.len())));
        }
        let label = match &rec[0] {
            "" => None,
            s => {
                let l: usize = s
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {line}: bad label '{s}'")))?;
                if l == 0 || l > n_classes {
                    return Err(Error::parse(path, format!("line {line}: label {l} outside 1..={n_classes}")));
                }
                Some(l - 1)
            }
        };
        let data = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        let signal = Mat::new(channels, samples, data).map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        trials.push(Trial::new(signal, label));
    }
    SubjectDataset::new(subject_id, trials, n_classes)
}

/// Per-trial embedding rows, `subject_id,e0,...,e{d-1}`.
pub fn write_embeddings_csv(path: &Path, embeddings: &[SubjectEmbedding]) -> Result<()> {
    let d = embeddings.first().map_or(0, SubjectEmbedding::dim);
    let mut w = csv_writer(path)?;
    let header = std::iter::once("subject_id".to_string()).chain((0..d).map(|j| format!("e{j}")));
    write_record(&mut w, path, header)?;
    for e in embeddings {
        for i in 0..e.vectors.rows() {
            let row = std::iter::once(e.subject_id.clone()).chain(e.vectors.row(i).iter().map(|v| fmt_f64(*v)));
            write_record(&mut w, path, row)?;
        }
    }
    finish(w, path)
}

/// Groups rows by subject in order of first appearance.
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<SubjectEmbedding>> {
    let mut r = csv_reader(path, true)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.get(0) != Some("subject_id") || header.len() < 2 {
        return Err(Error::parse(path, "header must be subject_id,e0,..."));
    }
    let d = header.len() - 1;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != d + 1 {
            return Err(Error::parse(path, format!("line {line}: {} columns, expected {}", rec.len(), d + 1)));
        }
        let id = rec[0].to_string();
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        let entry = rows.entry(id).or_default();
        for f in rec.iter().skip(1) {
            entry.push(parse_f64(path, line, f)?);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let data = rows.remove(&id).expect("grouped");
            let n = data.len() / d;
            let vectors = Mat::new(n, d, data).map_err(|e| Error::parse(path, e.to_string()))?;
            SubjectEmbedding::new(id, vectors)
        })
        .collect()
}

/// Numeric sample matrix, one row per sample. A non-numeric first row is
/// treated as a header.
pub fn read_samples_csv(path: &Path) -> Result<Mat> {
    let mut r = csv_reader(path, false)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if i == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let line = i + 1;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::parse(path, format!("line {line}: {} columns, expected {c}", rec.len())));
            }
            _ => {}
        }
        for f in rec.iter() {
            data.push(parse_f64(path, line, f)?);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::parse(path, "no samples"))?;
    Mat::new(rows, cols, data).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_samples_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, (0..m.cols()).map(|j| format!("x{j}")))?;
    for i in 0..m.rows() {
        write_record(&mut w, path, m.row(i).iter().map(|v| fmt_f64(*v)))?;
    }
    finish(w, path)
}

/// Square matrix with the subject ids as header.
pub fn write_divergence_matrix(path: &Path, ids: &[String], m: &Mat) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ids)?;
    for i in 0..m.rows() {
        write_record(&mut w, path, m.row(i).iter().map(|v| fmt_f64(*v)))?;
    }
    finish(w, path)
}

pub fn read_divergence_matrix(path: &Path) -> Result<(Vec<String>, Mat)> {
    let mut r = csv_reader(path, true)?;
    let ids: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let n = ids.len();
    let mut data = Vec::with_capacity(n * n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for f in rec.iter() {
            data.push(parse_f64(path, i + 2, f)?);
        }
    }
    let m = Mat::new(n, n, data).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((ids, m))
}

pub fn write_mds_csv(path: &Path, ids: &[String], mds: &MdsCoordinates) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ["subject_id", "x", "y"])?;
    for (i, id) in ids.iter().enumerate() {
        let x = mds.coords.row(i).first().copied().unwrap_or(0.0);
        let y = mds.coords.row(i).get(1).copied().unwrap_or(0.0);
        write_record(&mut w, path, [id.clone(), fmt_f64(x), fmt_f64(y)])?;
    }
    finish(w, path)
}

/// Writes the per-epoch loss log. Timing lives in a separate file so this
/// one is reproducible bit for bit.
pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let with_acc = log.iter().any(|e| e.target_acc.is_some());
    let mut w = csv_writer(path)?;
    let mut header = vec![
        "epoch", "L_cls", "L_FLA_ST", "L_FLA_SS", "L_DLA_ST", "L_DLA_SS", "L_total", "alpha_tau", "beta_tau", "lr",
    ];
    if with_acc {
        header.push("target_acc");
    }
    header.push("clamp_warnings");
    write_record(&mut w, path, &header)?;
    for e in log {
        let l = &e.losses;
        let mut row = vec![l.epoch.to_string()];
        row.extend(
            [l.cls, l.fla_st, l.fla_ss, l.dla_st, l.dla_ss, l.total, l.alpha_tau, l.beta_tau, e.lr]
                .iter()
                .map(|v| fmt_f64(*v)),
        );
        if with_acc {
            row.push(e.target_acc.map_or(String::new(), fmt_f64));
        }
        row.push(e.clamp_warnings.to_string());
        write_record(&mut w, path, &row)?;
    }
    finish(w, path)
}

pub fn write_timing(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ["epoch", "wall_ms"])?;
    for e in log {
        write_record(&mut w, path, [e.losses.epoch.to_string(), fmt_f64(e.wall_ms)])?;
    }
    finish(w, path)
}

/// Binary checkpoint: magic, version, JSON backbone config, then named
/// tensors as `(name, rows, cols, little-endian f64 data)`.
pub fn save_checkpoint(path: &Path, backbone: &Backbone) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&backbone.config).map_err(|e| Error::parse(path, e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    let names = backbone.param_names();
    let params = backbone.params();
    buf.extend_from_slice(&(names.len() as u64).to_le_bytes());
    for (name, p) in names.iter().zip(params) {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.cols() as u64).to_le_bytes());
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    create_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::parse(self.path, "checkpoint truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::parse(self.path, "length overflow"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    let n = cur.len()?;
    let config: BackboneConfig =
        serde_json::from_slice(cur.take(n)?).map_err(|e| Error::parse(path, format!("config: {e}")))?;
    let mut backbone = Backbone::init(config)?;
    let names = backbone.param_names();
    let count = cur.len()?;
    if count != names.len() {
        return Err(Error::parse(path, format!("{count} tensors, model has {}", names.len())));
    }
    for (expected, p) in names.iter().zip(backbone.params_mut()) {
        let n = cur.len()?;
        let name = std::str::from_utf8(cur.take(n)?).map_err(|_| Error::parse(path, "tensor name not UTF-8"))?;
        if name != expected {
            return Err(Error::parse(path, format!("tensor '{name}' where '{expected}' was expected")));
        }
        let (rows, cols) = (cur.len()?, cur.len()?);
        if (rows, cols) != p.shape() {
            return Err(Error::parse(
                path,
                format!("tensor '{name}' is {rows}x{cols}, model expects {:?}", p.shape()),
            ));
        }
        let bytes = cur.take(rows * cols * 8)?;
        for (dst, chunk) in p.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::parse(path, "trailing bytes after last tensor"));
    }
    Ok(backbone)
}

/// Writes manifest, per-subject trial files and optionally embeddings.
pub fn write_dataset_dir(
    dir: &Path,
    datasets: &[SubjectDataset],
    sample_rate: f64,
    embeddings: Option<&[SubjectEmbedding]>,
) -> Result<Manifest> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::SampleSize("no subjects to write".into()))?;
    let manifest = Manifest {
        subjects: datasets.iter().map(|d| d.subject_id.clone()).collect(),
        channels: first.channels(),
        samples: first.samples(),
        n_classes: first.n_classes,
        sample_rate,
    };
    fs::create_dir_all(dir.join(SUBJECTS_DIR)).map_err(|e| Error::io(dir, e))?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    for ds in datasets {
        write_subject_csv(&subject_path(dir, &ds.subject_id), ds)?;
    }
    if let Some(e) = embeddings {
        write_embeddings_csv(&dir.join(EMBEDDINGS_FILE), e)?;
    }
    Ok(manifest)
}

pub fn read_dataset_dir(dir: &Path) -> Result<(Manifest, Vec<SubjectDataset>)> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let datasets = manifest
        .subjects
        .iter()
        .map(|id| {
            read_subject_csv(
                &subject_path(dir, id),
                id,
                manifest.channels,
                manifest.samples,
                manifest.n_classes,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, datasets))
}
