//! Run configuration files, manifests, snapshot records and the per-step
//! diagnostics table.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FlowError;
use crate::flow::{FlowConfig, FlowSolver, FlowState, HsRefMode, StepRecord};
use crate::geometry::{RadialField, SphereGrid, Topology, Vec3};

/// Version tag written into every manifest.
pub const ARTIFACT_VERSION: &str = concat!("capflow ", env!("CARGO_PKG_VERSION"));
/// Schema version of snapshot records.
pub const SNAPSHOT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("I/O error on {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("snapshot schema mismatch: found {found}, expected {expected}")]
    SchemaMismatch { found: u64, expected: u32 },
}

pub type IoResult<T> = std::result::Result<T, IoError>;

impl IoError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            IoError::Config(_) => 2,
            IoError::Flow(e) => match e {
                FlowError::InvalidArgument(_)
                | FlowError::InvalidGrid(_)
                | FlowError::Topology { .. } => 2,
                FlowError::Extinction { .. } => 4,
                FlowError::Degenerate { .. } => 5,
                _ => 3,
            },
            IoError::File { .. } | IoError::Corrupt { .. } | IoError::SchemaMismatch { .. } => 6,
        }
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Initial radial function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// `rho = radius`.
    Constant { radius: f64 },
    /// `rho = radius + amplitude cos(mode phi)`, `phi` the azimuth in the `x_1 x_2` plane.
    Cosine {
        radius: f64,
        amplitude: f64,
        mode: u32,
    },
    /// Last frame of a snapshot file.
    Snapshot { path: PathBuf },
}

impl InitialCondition {
    fn parse(text: &str) -> Result<Self, String> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| format!("initial: cannot parse number `{s}`"))
        };
        match parts.as_slice() {
            ["constant", r] => Ok(InitialCondition::Constant { radius: num(r)? }),
            ["cosine", r, a, k] => Ok(InitialCondition::Cosine {
                radius: num(r)?,
                amplitude: num(a)?,
                mode: k
                    .parse()
                    .map_err(|_| format!("initial: cannot parse mode `{k}`"))?,
            }),
            ["snapshot", p] => Ok(InitialCondition::Snapshot {
                path: PathBuf::from(p),
            }),
            _ => Err(format!(
                "initial must be `constant R`, `cosine R A K` or `snapshot PATH`, got `{text}`"
            )),
        }
    }

    /// Samples the initial field on `grid`.
    pub fn build(&self, grid: Arc<SphereGrid>) -> IoResult<RadialField> {
        match self {
            InitialCondition::Constant { radius } => Ok(RadialField::constant(grid, *radius)?),
            InitialCondition::Cosine {
                radius,
                amplitude,
                mode,
            } => {
                let k = *mode as f64;
                let f = |x: &Vec3| radius + amplitude * (k * x[1].atan2(x[0])).cos();
                Ok(RadialField::from_fn(grid, f)?)
            }
            InitialCondition::Snapshot { path } => {
                let snap = read_snapshot(path)?;
                let last = snap.records.last().ok_or_else(|| IoError::Corrupt {
                    line: 1,
                    reason: "snapshot holds no frames".into(),
                })?;
                Ok(RadialField::new(grid, last.values.clone())?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub resolution: usize,
    pub topology: Topology,
    pub nodes: usize,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: FlowConfig,
    pub grid: GridSpec,
    pub initial: InitialCondition,
    /// Snapshot frame stride in accepted steps.
    pub save_every: usize,
}

impl RunManifest {
    pub fn new(config: FlowConfig, initial: InitialCondition, save_every: usize) -> IoResult<Self> {
        config.validate()?;
        let grid = config.build_grid()?;
        let grid = GridSpec {
            n: config.n,
            resolution: config.resolution,
            topology: config.topology,
            nodes: grid.len(),
        };
        Ok(RunManifest {
            version: ARTIFACT_VERSION.to_string(),
            config,
            grid,
            initial,
            save_every: save_every.max(1),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> IoResult<Self> {
        serde_json::from_str(text).map_err(|e| IoError::Corrupt {
            line: 1,
            reason: e.to_string(),
        })
    }
}

const KEYS: &[&str] = &[
    "s",
    "theta",
    "dt",
    "t_end",
    "resolution",
    "n",
    "topology",
    "hs_ref_mode",
    "max_picard",
    "picard_tol",
    "bc_tol",
    "refresh_remainders",
    "homotopy_order",
    "anderson_depth",
    "initial",
    "save_every",
];
const REQUIRED: &[&str] = &["s", "theta", "dt", "resolution", "topology"];

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> IoResult<T> {
    raw.parse()
        .map_err(|_| IoError::Config(format!("cannot parse `{raw}` for key {key}")))
}

/// Parses a `key = value` configuration text. `#` starts a comment.
pub fn parse_config_str(text: &str) -> IoResult<RunManifest> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| IoError::Config(format!("line {}: expected key = value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(IoError::Config(format!(
                "unknown key {k} (known: {})",
                KEYS.join(", ")
            )));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(IoError::Config(format!("duplicate key {k}")));
        }
    }
    for k in REQUIRED {
        if !map.contains_key(*k) {
            return Err(IoError::Config(format!("missing required key {k}")));
        }
    }

    let mut c = FlowConfig::default();
    for (k, raw) in &map {
        let raw = raw.as_str();
        match k.as_str() {
            "s" => c.s = parse_value(k, raw)?,
            "theta" => c.theta = parse_value(k, raw)?,
            "dt" => c.dt = parse_value(k, raw)?,
            "t_end" => c.t_end = parse_value(k, raw)?,
            "resolution" => c.resolution = parse_value(k, raw)?,
            "n" => c.n = parse_value(k, raw)?,
            "topology" => {
                c.topology = raw
                    .parse()
                    .map_err(|e: FlowError| IoError::Config(format!("topology: {e}")))?
            }
            "hs_ref_mode" => {
                c.hs_ref_mode = raw
                    .parse()
                    .map_err(|e: FlowError| IoError::Config(format!("hs_ref_mode: {e}")))?
            }
            "max_picard" => c.max_picard = parse_value(k, raw)?,
            "picard_tol" => c.picard_tol = parse_value(k, raw)?,
            "bc_tol" => c.bc_tol = parse_value(k, raw)?,
            "refresh_remainders" => c.refresh_remainders = parse_value(k, raw)?,
            "homotopy_order" => c.homotopy_order = parse_value(k, raw)?,
            "anderson_depth" => c.anderson_depth = parse_value(k, raw)?,
            _ => {}
        }
    }
    if !map.contains_key("hs_ref_mode") && c.topology == Topology::FullSphere {
        c.hs_ref_mode = HsRefMode::FullSphere;
    }
    c.validate().map_err(|e| match e {
        FlowError::InvalidArgument(msg) => IoError::Config(msg),
        other => IoError::Config(other.to_string()),
    })?;
    let initial = match map.get("initial") {
        Some(raw) => InitialCondition::parse(raw).map_err(IoError::Config)?,
        None => InitialCondition::Constant { radius: 1.0 },
    };
    let save_every = match map.get("save_every") {
        Some(raw) => parse_value::<usize>("save_every", raw)?,
        None => 1,
    };
    if save_every == 0 {
        return Err(IoError::Config("save_every must be at least 1".into()));
    }
    RunManifest::new(c, initial, save_every)
}

pub fn parse_config(path: &Path) -> IoResult<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    parse_config_str(&text)
}

/// One saved frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub schema: u32,
    pub t: f64,
    pub values: Vec<f64>,
    pub max_bc_residual: f64,
    pub volume: f64,
    pub min_rho: f64,
}

impl SnapshotRecord {
    pub fn from_state(state: &FlowState) -> Self {
        SnapshotRecord {
            schema: SNAPSHOT_SCHEMA,
            t: state.t,
            values: state.rho.values().to_vec(),
            max_bc_residual: state.diagnostics.max_bc_residual,
            volume: state.diagnostics.volume,
            min_rho: state.diagnostics.min_rho,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Parses one line; `line` is only used in error messages.
    pub fn from_line(text: &str, line: usize) -> IoResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| IoError::Corrupt {
                line,
                reason: e.to_string(),
            })?;
        let found = value
            .get("schema")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| IoError::Corrupt {
                line,
                reason: "missing schema field".into(),
            })?;
        if found != SNAPSHOT_SCHEMA as u64 {
            return Err(IoError::SchemaMismatch {
                found,
                expected: SNAPSHOT_SCHEMA,
            });
        }
        serde_json::from_value(value).map_err(|e| IoError::Corrupt {
            line,
            reason: e.to_string(),
        })
    }

    /// Rebuilds the state on `grid`; diagnostics are recomputed from the values.
    pub fn to_state(&self, grid: Arc<SphereGrid>, theta: f64) -> IoResult<FlowState> {
        let rho = RadialField::new(grid, self.values.clone())?;
        Ok(FlowState::new(self.t, rho, theta))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    schema: u32,
    manifest: RunManifest,
}

/// Parsed `.snap` file: the header manifest followed by frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub manifest: RunManifest,
    pub records: Vec<SnapshotRecord>,
}

impl Snapshot {
    /// Grid the records were written on.
    pub fn grid(&self) -> IoResult<Arc<SphereGrid>> {
        let g = &self.manifest.grid;
        Ok(Arc::new(SphereGrid::build(g.n, g.resolution, g.topology)?))
    }
}

pub fn parse_snapshot(text: &str) -> IoResult<Snapshot> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| IoError::Corrupt {
        line: 1,
        reason: "empty snapshot".into(),
    })?;
    let head: serde_json::Value = serde_json::from_str(first).map_err(|e| IoError::Corrupt {
        line: 1,
        reason: e.to_string(),
    })?;
    let found = head.get("schema").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != SNAPSHOT_SCHEMA as u64 {
        return Err(IoError::SchemaMismatch {
            found,
            expected: SNAPSHOT_SCHEMA,
        });
    }
    let header: SnapshotHeader = serde_json::from_value(head).map_err(|e| IoError::Corrupt {
        line: 1,
        reason: e.to_string(),
    })?;
    let records = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec = SnapshotRecord::from_line(l, i + 1)?;
            if rec.values.len() != header.manifest.grid.nodes {
                return Err(IoError::Corrupt {
                    line: i + 1,
                    reason: format!(
                        "expected {} values, found {}",
                        header.manifest.grid.nodes,
                        rec.values.len()
                    ),
                });
            }
            Ok(rec)
        })
        .collect::<IoResult<Vec<_>>>()?;
    Ok(Snapshot {
        manifest: header.manifest,
        records,
    })
}

pub fn read_snapshot(path: &Path) -> IoResult<Snapshot> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    parse_snapshot(&text)
}

/// Column header of the diagnostics table.
pub const CSV_COLUMNS: &str = "t,volume,osc,max_bc_residual,picard_iterations,dt_used";

pub fn csv_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.t, r.volume, r.oscillation, r.max_bc_residual, r.picard_iterations, r.dt_used
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub frames: usize,
    pub t_final: f64,
    pub snapshot: PathBuf,
    pub table: PathBuf,
}

struct Outputs {
    snap: BufWriter<File>,
    csv: BufWriter<File>,
    snap_path: PathBuf,
    csv_path: PathBuf,
}

impl Outputs {
    fn create(prefix: &Path, manifest: &RunManifest) -> IoResult<Self> {
        let snap_path = prefix.with_extension("snap");
        let csv_path = prefix.with_extension("csv");
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(file_err(p));
        let mut out = Outputs {
            snap: open(&snap_path)?,
            csv: open(&csv_path)?,
            snap_path,
            csv_path,
        };
        let header = SnapshotHeader {
            schema: SNAPSHOT_SCHEMA,
            manifest: manifest.clone(),
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        writeln!(out.snap, "{json}").map_err(file_err(&out.snap_path))?;
        writeln!(out.csv, "# manifest: {}", manifest.to_json()).map_err(file_err(&out.csv_path))?;
        writeln!(out.csv, "{CSV_COLUMNS}").map_err(file_err(&out.csv_path))?;
        Ok(out)
    }

    fn frame(&mut self, state: &FlowState) -> IoResult<()> {
        writeln!(self.snap, "{}", SnapshotRecord::from_state(state).to_line())
            .map_err(file_err(&self.snap_path))
    }

    fn row(&mut self, record: &StepRecord) -> IoResult<()> {
        writeln!(self.csv, "{}", csv_row(record)).map_err(file_err(&self.csv_path))
    }

    fn flush(&mut self) -> IoResult<()> {
        self.snap.flush().map_err(file_err(&self.snap_path))?;
        self.csv.flush().map_err(file_err(&self.csv_path))
    }
}

/// Runs `manifest`, writing `<prefix>.snap` and `<prefix>.csv`.
///
/// Output written before a solver failure is flushed before the error is
/// returned.
pub fn run_manifest(manifest: &RunManifest, prefix: &Path) -> IoResult<RunSummary> {
    let mut solver = FlowSolver::new(manifest.config.clone())?;
    let rho0 = manifest.initial.build(solver.grid().clone())?;
    let mut out = Outputs::create(prefix, manifest)?;
    let (mut steps, mut frames) = (0usize, 0usize);
    let mut last_saved = true;
    let mut io_failure = None;
    let result = solver.run_with(rho0, |state, record| {
        let res = (|| {
            match record {
                None => {
                    out.frame(state)?;
                    frames += 1;
                }
                Some(r) => {
                    steps += 1;
                    if r.rejections > 0 {
                        eprintln!(
                            "step {steps} (t = {}): dt halved {} times to {}",
                            r.t, r.rejections, r.dt_used
                        );
                    }
                    out.row(r)?;
                    last_saved = steps % manifest.save_every == 0;
                    if last_saved {
                        out.frame(state)?;
                        frames += 1;
                    }
                }
            }
            Ok::<(), IoError>(())
        })();
        res.map_err(|e| {
            io_failure = Some(e);
            FlowError::InvalidArgument("output failure".into())
        })
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    let final_state = match result {
        Ok(state) => state,
        Err(e) => {
            out.flush()?;
            return Err(e.into());
        }
    };
    if !last_saved {
        out.frame(&final_state)?;
        frames += 1;
    }
    out.flush()?;
    Ok(RunSummary {
        steps,
        frames,
        t_final: final_state.t,
        snapshot: out.snap_path,
        table: out.csv_path,
    })
}

/// Reads the diagnostics table back: the manifest and the numeric rows.
pub fn read_table(path: &Path) -> IoResult<(RunManifest, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(file_err(path))?;
    let mut manifest = None;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if let Some(json) = line.strip_prefix("# manifest: ") {
            manifest = Some(RunManifest::from_json(json)?);
        } else if line == CSV_COLUMNS || line.is_empty() {
            continue;
        } else {
            let row = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| IoError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            rows.push(row);
        }
    }
    let manifest = manifest.ok_or_else(|| IoError::Corrupt {
        line: 1,
        reason: "missing manifest header".into(),
    })?;
    Ok((manifest, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "s=0.5\ntheta=1.5707963\ndt=1e-3\nresolution=256\ntopology=hemisphere\n";

    #[test]
    fn parses_basic_config() {
        let m = parse_config_str(BASIC).unwrap();
        assert_eq!(m.config.s, 0.5);
        assert!((m.config.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-7);
        assert_eq!(m.config.resolution, 256);
        assert_eq!(m.config.topology, Topology::Hemisphere);
        assert_eq!(m.config.bc_tol, FlowConfig::default().bc_tol);
        assert_eq!(m.initial, InitialCondition::Constant { radius: 1.0 });
        assert_eq!(m.grid.nodes, 256);
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = parse_config_str(&BASIC.replace("s=0.5", "s=1.2")).unwrap_err();
        assert_eq!(err.to_string(), "config error: s must lie in (0,1)");
        let err = parse_config_str(&BASIC.replace("theta=1.5707963", "theta=0")).unwrap_err();
        assert_eq!(err.to_string(), "config error: theta must lie in (0,pi)");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn rejects_unknown_missing_and_duplicate_keys() {
        let err = parse_config_str(&format!("{BASIC}colour=blue\n")).unwrap_err();
        assert!(err.to_string().contains("unknown key colour"));
        let err = parse_config_str(&BASIC.replace("dt=1e-3\n", "")).unwrap_err();
        assert!(err.to_string().contains("missing required key dt"));
        let err = parse_config_str(&format!("{BASIC}s=0.4\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate key s"));
        let err = parse_config_str(&BASIC.replace("dt=1e-3", "dt=fast")).unwrap_err();
        assert!(err.to_string().contains("key dt"));
    }

    #[test]
    fn full_sphere_defaults_reference_mode() {
        let m = parse_config_str(&BASIC.replace("hemisphere", "full-sphere")).unwrap();
        assert_eq!(m.config.hs_ref_mode, HsRefMode::FullSphere);
        let err = parse_config_str(&format!(
            "{}hs_ref_mode=half-ball\n",
            BASIC.replace("hemisphere", "full-sphere")
        ));
        assert!(err.is_err());
    }

    #[test]
    fn initial_condition_forms() {
        let m = parse_config_str(&format!("{BASIC}initial = cosine 1 0.05 2 # comment\n")).unwrap();
        assert_eq!(
            m.initial,
            InitialCondition::Cosine {
                radius: 1.0,
                amplitude: 0.05,
                mode: 2
            }
        );
        assert!(parse_config_str(&format!("{BASIC}initial = wobbly\n")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = parse_config_str(&format!("{BASIC}initial = cosine 1 0.05 2\n")).unwrap();
        m.config.picard_tol = 1.0 / 3.0;
        let back = RunManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.version, ARTIFACT_VERSION);
    }

    fn sample_state() -> FlowState {
        let grid = Arc::new(SphereGrid::build(1, 65, Topology::Hemisphere).unwrap());
        let rho = RadialField::from_fn(grid, |x| {
            1.0 + 0.1 * x[1] + 1e-17 * x[0] + std::f64::consts::PI * 1e-3
        })
        .unwrap();
        FlowState::new(0.1 + 0.2, rho, 1.0)
    }

    #[test]
    fn snapshot_record_round_trip() {
        let state = sample_state();
        let rec = SnapshotRecord::from_state(&state);
        let back = SnapshotRecord::from_line(&rec.to_line(), 2).unwrap();
        assert_eq!(back, rec);
        let st = back.to_state(state.rho.grid_arc().clone(), 1.0).unwrap();
        assert_eq!(st.t.to_bits(), state.t.to_bits());
        assert_eq!(st.rho.values(), state.rho.values());
        assert_eq!(st.diagnostics, state.diagnostics);
    }

    #[test]
    fn truncated_record_is_corrupt() {
        let line = SnapshotRecord::from_state(&sample_state()).to_line();
        let cut = &line[..line.len() / 2];
        assert!(matches!(
            SnapshotRecord::from_line(cut, 7),
            Err(IoError::Corrupt { line: 7, .. })
        ));
    }

    #[test]
    fn schema_bump_is_reported() {
        let mut rec = SnapshotRecord::from_state(&sample_state());
        rec.schema = SNAPSHOT_SCHEMA + 1;
        let err = SnapshotRecord::from_line(&rec.to_line(), 2).unwrap_err();
        assert!(matches!(
            err,
            IoError::SchemaMismatch {
                found: 2,
                expected: 1
            }
        ));
        assert_eq!(err.exit_code(), 6);
    }

    #[test]
    fn exit_codes() {
        let ext = IoError::Flow(FlowError::Extinction {
            min_radius: 0.01,
            threshold: 0.05,
        });
        assert_eq!(ext.exit_code(), 4);
        let inj = IoError::Flow(FlowError::Degenerate {
            ratio: 0.0,
            min: 0.1,
        });
        assert_eq!(inj.exit_code(), 5);
        let nc = IoError::Flow(FlowError::PicardNonConvergence {
            iterations: 3,
            change: 1.0,
        });
        assert_eq!(nc.exit_code(), 3);
    }
}
