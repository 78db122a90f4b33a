//! CSV, JSON, checkpoint and SVG formats.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use faststi_core::data::{Dataset, Normalizer};
use faststi_core::graph::KernelOptions;
use faststi_core::grid::{Grid, Mask};
use faststi_core::metrics::EvalReport;
use faststi_core::model::{ModelConfig, ModelParams};
use faststi_core::schedule::ScheduleSpec;
use faststi_core::solvers::TraceRow;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const DEFAULT_MISSING_MARKER: f64 = 0.0;
pub const CHECKPOINT_VERSION: u32 = 1;

fn open(path: &Path) -> AppResult<File> {
    File::open(path).map_err(|e| AppError::input(path, e))
}

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::output(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| AppError::output(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    AppError::Format(format!("{}: {e}", path.display()))
}

fn parse_f64(path: &Path, row: usize, s: &str) -> AppResult<f64> {
    s.trim()
        .parse()
        .map_err(|_| AppError::Format(format!("{}: row {row}: cannot parse '{s}' as a number", path.display())))
}

/// Values CSV: header `timestamp,<node ids>`, then one row per timestamp.
/// Entries equal to `missing_marker` (or empty / NaN) are natively missing.
pub struct ValuesTable {
    pub node_ids: Vec<String>,
    pub timestamps: Vec<i64>,
    pub values: Grid,
    pub mask: Mask,
}

pub fn read_values(path: &Path, missing_marker: Option<f64>) -> AppResult<ValuesTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(AppError::Format(format!("{}: need a timestamp column and at least one node", path.display())));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let nodes = node_ids.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != nodes + 1 {
            return Err(AppError::Format(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row + 1,
                rec.len(),
                nodes + 1
            )));
        }
        let ts: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| AppError::Format(format!("{}: row {}: bad timestamp '{}'", path.display(), row + 1, &rec[0])))?;
        timestamps.push(ts);
        for field in rec.iter().skip(1) {
            let field = field.trim();
            let v = if field.is_empty() { f64::NAN } else { parse_f64(path, row + 1, field)? };
            let missing = v.is_nan() || missing_marker.is_some_and(|m| v == m);
            mask.push(!missing);
            values.push(if missing { 0.0 } else { v });
        }
    }
    let len = timestamps.len();
    if len == 0 {
        return Err(AppError::Format(format!("{}: no data rows", path.display())));
    }
    if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(AppError::Format(format!("{}: timestamps not increasing at row {}", path.display(), i + 2)));
    }
    Ok(ValuesTable {
        node_ids,
        timestamps,
        values: Grid::from_vec(len, nodes, values)?,
        mask: Mask::from_vec(len, nodes, mask)?,
    })
}

/// Writes values; entries outside `mask` are written as `missing_marker`.
pub fn write_values(
    path: &Path,
    node_ids: &[String],
    timestamps: &[i64],
    values: &Grid,
    mask: Option<&Mask>,
    missing_marker: f64,
) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["timestamp".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (l, ts) in timestamps.iter().enumerate() {
        let mut rec = vec![ts.to_string()];
        for n in 0..values.nodes() {
            let keep = mask.is_none_or(|m| m.get(l, n));
            rec.push(format_f64(if keep { values.get(l, n) } else { missing_marker }));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Mask CSV: same layout as values, `1` for true and `0` for false.
pub fn write_mask(path: &Path, node_ids: &[String], timestamps: &[i64], mask: &Mask) -> AppResult<()> {
    let g = Grid::from_fn(mask.len(), mask.nodes(), |l, n| if mask.get(l, n) { 1.0 } else { 0.0 });
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["timestamp".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (l, ts) in timestamps.iter().enumerate() {
        let mut rec = vec![ts.to_string()];
        rec.extend((0..g.nodes()).map(|n| if g.get(l, n) == 1.0 { "1".to_string() } else { "0".to_string() }));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

pub fn read_mask(path: &Path) -> AppResult<ValuesTable> {
    let t = read_values(path, None)?;
    if t.values.as_slice().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(AppError::Format(format!("{}: mask entries must be 0 or 1", path.display())));
    }
    let mask = Mask::from_fn(t.values.len(), t.values.nodes(), |l, n| t.values.get(l, n) == 1.0);
    Ok(ValuesTable { mask, ..t })
}

/// Distances CSV, either an edge list with header `from,to,distance` or a
/// square matrix whose header row lists node ids (first cell ignored).
/// Missing pairs are infinitely far apart.
pub fn read_distances(path: &Path, node_ids: &[String]) -> AppResult<Vec<f64>> {
    let n = node_ids.len();
    let index = |id: &str| node_ids.iter().position(|x| x == id.trim());
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
    }
    if header.len() == 3 && header[0] == "from" && header[1] == "to" {
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let (Some(i), Some(j)) = (index(&rec[0]), index(&rec[1])) else {
                return Err(AppError::Format(format!(
                    "{}: row {}: unknown node '{}' or '{}'",
                    path.display(),
                    row + 1,
                    &rec[0],
                    &rec[1]
                )));
            };
            let v = parse_f64(path, row + 1, &rec[2])?;
            if v < 0.0 {
                return Err(AppError::Format(format!("{}: row {}: negative distance", path.display(), row + 1)));
            }
            d[i * n + j] = v;
        }
        return Ok(d);
    }
    let cols: Vec<usize> = header
        .iter()
        .skip(1)
        .map(|id| {
            index(id).ok_or_else(|| AppError::Format(format!("{}: unknown node '{id}' in header", path.display())))
        })
        .collect::<AppResult<_>>()?;
    if cols.len() != n {
        return Err(AppError::Format(format!("{}: matrix has {} columns, expected {n}", path.display(), cols.len())));
    }
    let mut seen = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let i = index(&rec[0])
            .ok_or_else(|| AppError::Format(format!("{}: row {}: unknown node '{}'", path.display(), row + 1, &rec[0])))?;
        if rec.len() != n + 1 {
            return Err(AppError::Format(format!("{}: row {} has {} fields", path.display(), row + 1, rec.len())));
        }
        for (k, &j) in cols.iter().enumerate() {
            let field = rec[k + 1].trim();
            d[i * n + j] = match field {
                "" | "inf" => f64::INFINITY,
                s => parse_f64(path, row + 1, s)?,
            };
        }
        seen += 1;
    }
    if seen != n {
        return Err(AppError::Format(format!("{}: matrix has {seen} rows, expected {n}", path.display())));
    }
    Ok(d)
}

/// Writes finite off-diagonal distances as an edge list.
pub fn write_distances(path: &Path, node_ids: &[String], distances: &[f64]) -> AppResult<()> {
    let n = node_ids.len();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["from", "to", "distance"]).map_err(|e| csv_err(path, e))?;
    for i in 0..n {
        for j in 0..n {
            let v = distances[i * n + j];
            if i != j && v.is_finite() {
                w.write_record([node_ids[i].as_str(), node_ids[j].as_str(), &format_f64(v)])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

/// Square adjacency matrix with node ids on both axes.
pub fn write_matrix(path: &Path, node_ids: &[String], matrix: &[f64]) -> AppResult<()> {
    let n = node_ids.len();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec![String::new()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..n {
        let mut rec = vec![node_ids[i].clone()];
        rec.extend((0..n).map(|j| format_f64(matrix[i * n + j])));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

pub fn load_dataset(values: &Path, distances: &Path, missing_marker: Option<f64>) -> AppResult<Dataset> {
    let table = read_values(values, missing_marker)?;
    let distances = read_distances(distances, &table.node_ids)?;
    let ds = Dataset {
        values: table.values,
        observed_mask: table.mask,
        node_ids: table.node_ids,
        timestamps: table.timestamps,
        distances,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(values: &Path, distances: &Path, ds: &Dataset, missing_marker: f64) -> AppResult<()> {
    write_values(values, &ds.node_ids, &ds.timestamps, &ds.values, Some(&ds.observed_mask), missing_marker)?;
    write_distances(distances, &ds.node_ids, &ds.distances)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| AppError::Format(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| AppError::output(path, e))?;
    w.flush().map_err(|e| AppError::output(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s).map_err(|e| AppError::input(path, e))?;
    serde_json::from_str(&s).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

pub fn read_schedule(path: &Path) -> AppResult<ScheduleSpec> {
    read_json(path)
}

/// Everything needed to reuse trained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub parameter_count: usize,
    /// SHA-256 of the little-endian parameter payload, hex encoded.
    pub checksum: String,
    pub schedule: ScheduleSpec,
    pub normalizer: Normalizer,
    pub kernel: KernelOptions,
    pub sequence_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

fn payload(params: &ModelParams) -> Vec<u8> {
    params.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        schedule: ScheduleSpec,
        normalizer: Normalizer,
        kernel: KernelOptions,
        sequence_length: usize,
    ) -> Self {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: params.config().clone(),
            parameter_count: params.len(),
            checksum: hex_digest(&payload(&params)),
            schedule,
            normalizer,
            kernel,
            sequence_length,
        };
        Checkpoint { header, params }
    }

    /// One JSON header line followed by the raw little-endian `f64` payload.
    pub fn save(&self, path: &Path) -> AppResult<()> {
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        {
            let mut w = create(&tmp)?;
            let header = serde_json::to_string(&self.header).map_err(|e| AppError::Format(e.to_string()))?;
            w.write_all(header.as_bytes()).map_err(|e| AppError::output(path, e))?;
            w.write_all(b"\n").map_err(|e| AppError::output(path, e))?;
            w.write_all(&payload(&self.params)).map_err(|e| AppError::output(path, e))?;
            w.flush().map_err(|e| AppError::output(path, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| AppError::output(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let mut r = BufReader::new(open(path)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| AppError::input(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| AppError::Format(format!("{}: bad header: {e}", path.display())))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(AppError::Format(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                header.version
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| AppError::input(path, e))?;
        if bytes.len() != header.parameter_count * 8 {
            return Err(AppError::Format(format!(
                "{}: payload holds {} bytes, header declares {} parameters",
                path.display(),
                bytes.len(),
                header.parameter_count
            )));
        }
        if hex_digest(&bytes) != header.checksum {
            return Err(AppError::Format(format!("{}: checksum mismatch", path.display())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let params = ModelParams::from_flat(header.config.clone(), values)?;
        Ok(Checkpoint { header, params })
    }
}

/// Loss curve rows `epoch,train_loss,val_loss`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

pub fn write_loss_curve(path: &Path, rows: &[EpochRecord]) -> AppResult<()> {
    if rows.is_empty() {
        let mut w = create(path)?;
        writeln!(w, "epoch,train_loss,val_loss").map_err(|e| AppError::output(path, e))?;
        return w.flush().map_err(|e| AppError::output(path, e));
    }
    write_csv_rows(path, rows)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> AppResult<()> {
    write_csv_rows(path, rows)
}

/// Per-node report rows; node ids replace indices when available.
pub fn write_node_report(path: &Path, report: &EvalReport, node_ids: Option<&[String]>) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["node", "n_eval", "mae", "rmse", "crps"]).map_err(|e| csv_err(path, e))?;
    for (i, r) in report.per_node.iter().enumerate() {
        let name = node_ids.and_then(|ids| ids.get(i)).cloned().unwrap_or_else(|| i.to_string());
        let crps = r.crps.map(format_f64).unwrap_or_default();
        w.write_record([name, r.n_eval.to_string(), format_f64(r.mae), format_f64(r.rmse), crps])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

/// Ensemble CSV: header `sample,timestamp,<node ids>`.
pub fn write_ensemble(path: &Path, node_ids: &[String], timestamps: &[i64], samples: &[Grid]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample".to_string(), "timestamp".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (k, g) in samples.iter().enumerate() {
        for (l, ts) in timestamps.iter().enumerate() {
            let mut rec = vec![k.to_string(), ts.to_string()];
            rec.extend((0..g.nodes()).map(|n| format_f64(g.get(l, n))));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

pub fn read_ensemble(path: &Path) -> AppResult<(Vec<String>, Vec<i64>, Vec<Grid>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 3 || &header[0] != "sample" {
        return Err(AppError::Format(format!("{}: expected header sample,timestamp,<nodes>", path.display())));
    }
    let node_ids: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let nodes = node_ids.len();
    let mut rows: Vec<(usize, i64, Vec<f64>)> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != nodes + 2 {
            return Err(AppError::Format(format!("{}: row {} has {} fields", path.display(), row + 1, rec.len())));
        }
        let k = parse_f64(path, row + 1, &rec[0])? as usize;
        let ts = parse_f64(path, row + 1, &rec[1])? as i64;
        let vals = rec.iter().skip(2).map(|s| parse_f64(path, row + 1, s)).collect::<AppResult<Vec<_>>>()?;
        rows.push((k, ts, vals));
    }
    let n_samples = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let timestamps: Vec<i64> = rows.iter().filter(|r| r.0 == 0).map(|r| r.1).collect();
    let len = timestamps.len();
    if len == 0 || rows.len() != n_samples * len {
        return Err(AppError::Format(format!("{}: ragged ensemble", path.display())));
    }
    let mut samples = vec![Grid::zeros(len, nodes); n_samples];
    let mut filled = vec![0usize; n_samples];
    for (k, _, vals) in rows {
        let l = filled[k];
        if l >= len {
            return Err(AppError::Format(format!("{}: ragged ensemble", path.display())));
        }
        for (n, v) in vals.into_iter().enumerate() {
            samples[k].set(l, n, v);
        }
        filled[k] += 1;
    }
    Ok((node_ids, timestamps, samples))
}

/// Horizontal bar chart of labelled values.
pub fn bar_chart_svg(title: &str, unit: &str, bars: &[(String, f64)]) -> String {
    let width = 640.0;
    let bar_h = 24.0;
    let left = 180.0;
    let top = 40.0;
    let height = top + bars.len() as f64 * (bar_h + 8.0) + 20.0;
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<text x=\"10\" y=\"22\" font-size=\"14\">{}</text>\n", escape(title));
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = top + i as f64 * (bar_h + 8.0);
        let w = (width - left - 90.0) * v / max;
        s += &format!("<text x=\"10\" y=\"{:.1}\">{}</text>\n", y + 16.0, escape(label));
        s += &format!("<rect x=\"{left}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{bar_h}\" fill=\"#4a7ab7\"/>\n");
        s += &format!("<text x=\"{:.1}\" y=\"{:.1}\">{v:.4} {}</text>\n", left + w + 6.0, y + 16.0, escape(unit));
    }
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> AppResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| AppError::output(path, e))?;
    w.flush().map_err(|e| AppError::output(path, e))
}
