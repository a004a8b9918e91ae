//! Coverage, traveled distance, skill/state correlations and result export.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Trajectory;

/// Occupied bins of a square grid over the plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageGrid {
    pub bin_size_bits: u64,
    pub occupied: BTreeSet<(i64, i64)>,
}

impl CoverageGrid {
    pub fn new(bin_size: f64) -> Result<Self> {
        if !(bin_size > 0.0) || !bin_size.is_finite() {
            return Err(Error::Contract(format!("bin size must be positive, got {bin_size}")));
        }
        Ok(Self {
            bin_size_bits: bin_size.to_bits(),
            occupied: BTreeSet::new(),
        })
    }

    pub fn bin_size(&self) -> f64 {
        f64::from_bits(self.bin_size_bits)
    }

    pub fn insert(&mut self, p: [f64; 2]) {
        let b = self.bin_size();
        self.occupied
            .insert(((p[0] / b).floor() as i64, (p[1] / b).floor() as i64));
    }

    pub fn count(&self) -> usize {
        self.occupied.len()
    }
}

/// Number of distinct bins touched by any visited state.
pub fn state_coverage(trajectories: &[Trajectory], bin_size: f64) -> Result<usize> {
    let mut grid = CoverageGrid::new(bin_size)?;
    for p in trajectories.iter().flat_map(|t| &t.positions) {
        grid.insert(*p);
    }
    Ok(grid.count())
}

/// Mean `‖s_T − s_0‖` in the coordinates the networks see.
pub fn traveled_distance(trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Contract("traveled_distance needs at least one trajectory".into()));
    }
    let total: f64 = trajectories.iter().map(endpoint_distance).sum();
    Ok(total / trajectories.len() as f64)
}

/// Mean start-to-end distance in environment units, from raw positions. Equal
/// to [`traveled_distance`] when no state normalizer is active.
pub fn raw_displacement(trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Contract("raw_displacement needs at least one trajectory".into()));
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| {
            let (a, b) = (t.initial_position(), t.final_position());
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .sum();
    Ok(total / trajectories.len() as f64)
}

fn endpoint_distance(t: &Trajectory) -> f64 {
    match (t.transitions.first(), t.transitions.last()) {
        (Some(first), Some(last)) => first
            .state
            .iter()
            .zip(&last.next_state)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt(),
        _ => 0.0,
    }
}

/// Pearson correlations, rows indexed by state dimension and columns by skill
/// dimension. Entries whose inputs have zero variance are 0 and listed in
/// `degenerate`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Array2<f64>,
    pub degenerate: Vec<(usize, usize)>,
}

/// Correlates final states with skills across trajectories, or every visited
/// next-state with its skill when `per_step` is set.
pub fn skill_state_correlation(trajectories: &[Trajectory], per_step: bool) -> Result<CorrelationMatrix> {
    if trajectories.len() < 2 {
        return Err(Error::Contract("correlation needs at least two trajectories".into()));
    }
    let mut states: Vec<&[f64]> = Vec::new();
    let mut skills: Vec<&[f64]> = Vec::new();
    for t in trajectories {
        let steps: Box<dyn Iterator<Item = _>> = if per_step {
            Box::new(t.transitions.iter())
        } else {
            Box::new(t.transitions.last().into_iter())
        };
        for tr in steps {
            states.push(&tr.next_state);
            skills.push(&t.skill.vector);
        }
    }
    if states.len() < 2 {
        return Err(Error::Contract("correlation needs at least two samples".into()));
    }
    let (sd, zd) = (states[0].len(), skills[0].len());
    let n = states.len() as f64;
    let mean = |rows: &[&[f64]], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let ms: Vec<f64> = (0..sd).map(|i| mean(&states, i)).collect();
    let mz: Vec<f64> = (0..zd).map(|j| mean(&skills, j)).collect();
    let mut values = Array2::zeros((sd, zd));
    let mut degenerate = Vec::new();
    for i in 0..sd {
        for j in 0..zd {
            let (mut cov, mut vs, mut vz) = (0.0, 0.0, 0.0);
            for (s, z) in states.iter().zip(&skills) {
                let (a, b) = (s[i] - ms[i], z[j] - mz[j]);
                cov += a * b;
                vs += a * a;
                vz += b * b;
            }
            if vs == 0.0 || vz == 0.0 {
                degenerate.push((i, j));
            } else {
                values[[i, j]] = (cov / (vs.sqrt() * vz.sqrt())).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(CorrelationMatrix { values, degenerate })
}

/// One point of a trajectory plot: `hue` in `[0, 1)` encodes the skill's
/// direction in its first two coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub trajectory: usize,
    pub hue: f64,
    pub x: f64,
    pub y: f64,
}

impl ResultRecord for PlotPoint {
    const COLUMNS: &'static [&'static str] = &["trajectory", "hue", "x", "y"];
}

pub fn plot_points(trajectories: &[Trajectory]) -> Vec<PlotPoint> {
    let mut out = Vec::new();
    for (k, t) in trajectories.iter().enumerate() {
        let z = &t.skill.vector;
        let angle = z[1..].first().map_or(0.0, |&y| y.atan2(z[0]));
        let hue = (angle / std::f64::consts::TAU).rem_euclid(1.0);
        out.extend(t.positions.iter().map(|p| PlotPoint {
            trajectory: k,
            hue,
            x: p[0],
            y: p[1],
        }));
    }
    out
}

/// A flat record that can be written by [`export_results`].
pub trait ResultRecord: Serialize + DeserializeOwned {
    /// Column names in serialization order.
    const COLUMNS: &'static [&'static str];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ExportFormat::Json,
            _ => ExportFormat::Csv,
        }
    }
}

/// Identifies the run that produced an export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub config_digest: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonExport<T> {
    config_digest: String,
    seed: u64,
    columns: Vec<String>,
    records: Vec<T>,
}

/// Writes records with a stable column order. CSV files start with
/// `# config_digest=…` and `# seed=…` lines; JSON files carry the same keys
/// next to a `records` array.
pub fn export_results<T: ResultRecord>(
    records: &[T],
    header: &ExportHeader,
    path: &Path,
    format: ExportFormat,
) -> Result<()> {
    let bytes = match format {
        ExportFormat::Csv => {
            let mut buf = Vec::new();
            writeln!(buf, "# config_digest={}", header.config_digest).expect("vec write");
            writeln!(buf, "# seed={}", header.seed).expect("vec write");
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(buf);
            w.write_record(T::COLUMNS).map_err(csv_err)?;
            for r in records {
                w.serialize(r).map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Export(e.to_string()))?
        }
        ExportFormat::Json => {
            let doc = JsonExport {
                config_digest: header.config_digest.clone(),
                seed: header.seed,
                columns: T::COLUMNS.iter().map(|c| c.to_string()).collect(),
                records: records.iter().collect::<Vec<_>>(),
            };
            let mut s = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Export(e.to_string()))?;
            s.push(b'\n');
            s
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads back a file produced by [`export_results`].
pub fn read_results<T: ResultRecord>(path: &Path, format: ExportFormat) -> Result<(ExportHeader, Vec<T>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        ExportFormat::Json => {
            let doc: JsonExport<T> =
                serde_json::from_str(&text).map_err(|e| Error::Export(format!("bad export: {e}")))?;
            if doc.columns != T::COLUMNS {
                return Err(Error::Export("export columns do not match the record type".into()));
            }
            Ok((
                ExportHeader {
                    config_digest: doc.config_digest,
                    seed: doc.seed,
                },
                doc.records,
            ))
        }
        ExportFormat::Csv => {
            let field = |key: &str| -> Result<String> {
                text.lines()
                    .filter_map(|l| l.strip_prefix("# "))
                    .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                    .map(str::to_string)
                    .ok_or_else(|| Error::Export(format!("export header lacks `{key}`")))
            };
            let header = ExportHeader {
                config_digest: field("config_digest")?,
                seed: field("seed")?
                    .parse()
                    .map_err(|_| Error::Export("export seed is not an integer".into()))?,
            };
            let mut rdr = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .from_reader(text.as_bytes());
            let cols: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
            if cols != T::COLUMNS {
                return Err(Error::Export("export columns do not match the record type".into()));
            }
            let records = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err)?;
            Ok((header, records))
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Export(format!("csv: {e}"))
}
