use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capflow::io::{parse_config, read_snapshot, run_manifest, IoError};
use capflow::validate::{run_suite, SUITES};

#[derive(Parser)]
#[command(
    name = "capflow",
    version,
    about = "Fractional mean curvature flow of capillary graphs over the half-sphere"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a flow described by a key = value config file.
    Run {
        config: PathBuf,
        /// Output prefix; `.snap` and `.csv` are appended. Defaults to the config path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an oracle suite and print a pass/fail table.
    Validate {
        suite: String,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Summarize a snapshot file.
    Inspect { snapshot: PathBuf },
}

fn fail(err: IoError) -> u8 {
    eprintln!("error: {err}");
    err.exit_code() as u8
}

fn main() -> ExitCode {
    ExitCode::from(dispatch(Cli::parse()))
}

fn dispatch(cli: Cli) -> u8 {
    match cli.command {
        Command::Run { config, out } => {
            let manifest = match parse_config(&config) {
                Ok(m) => m,
                Err(e) => return fail(e),
            };
            let prefix = out.unwrap_or_else(|| config.clone());
            match run_manifest(&manifest, &prefix) {
                Ok(summary) => {
                    println!(
                        "{} steps to t = {}; {} frames in {}, table in {}",
                        summary.steps,
                        summary.t_final,
                        summary.frames,
                        summary.snapshot.display(),
                        summary.table.display()
                    );
                    0
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { suite, resolution } => {
            if !SUITES.contains(&suite.as_str()) {
                eprintln!(
                    "error: unknown suite {suite}; available: {}",
                    SUITES.join(", ")
                );
                return 2;
            }
            match run_suite(&suite, resolution) {
                Ok(report) => {
                    println!("{report}");
                    if report.passed() {
                        0
                    } else {
                        1
                    }
                }
                Err(e) => fail(IoError::Flow(e)),
            }
        }
        Command::Inspect { snapshot } => match read_snapshot(&snapshot) {
            Ok(snap) => {
                let m = &snap.manifest;
                println!("{}", m.version);
                println!(
                    "n = {}, {} nodes ({}), s = {}, theta = {}, dt = {}, t_end = {}",
                    m.grid.n,
                    m.grid.nodes,
                    m.grid.topology.as_str(),
                    m.config.s,
                    m.config.theta,
                    m.config.dt,
                    m.config.t_end
                );
                println!(
                    "{:>12}  {:>12}  {:>12}  {:>12}",
                    "t", "volume", "min rho", "bc residual"
                );
                for r in &snap.records {
                    println!(
                        "{:>12.6}  {:>12.8}  {:>12.8}  {:>12.3e}",
                        r.t, r.volume, r.min_rho, r.max_bc_residual
                    );
                }
                0
            }
            Err(e) => fail(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use capflow::io::{read_snapshot, read_table};

    use super::*;

    fn capflow(args: &[&str]) -> u8 {
        let argv = std::iter::once("capflow").chain(args.iter().copied());
        dispatch(Cli::try_parse_from(argv).unwrap())
    }

    fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p.to_string_lossy().into_owned()
    }

    const CIRCLE: &str = "s = 0.5\ntheta = 1.5707963\ndt = 1e-3\nt_end = 4e-3\nresolution = 64\ntopology = full-sphere\n";

    #[test]
    fn run_writes_self_describing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "circle.cfg", CIRCLE);
        assert_eq!(capflow(&["run", &cfg]), 0);

        let snap = read_snapshot(&dir.path().join("circle.snap")).unwrap();
        assert_eq!(snap.records.len(), 5);
        assert_eq!(snap.manifest.grid.nodes, 64);
        let (manifest, rows) = read_table(&dir.path().join("circle.csv")).unwrap();
        assert_eq!(manifest, snap.manifest);
        assert_eq!(rows.len(), 4);
        assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
        assert!(rows.iter().all(|r| r.len() == 6));
        assert_eq!(
            capflow(&["inspect", dir.path().join("circle.snap").to_str().unwrap()]),
            0
        );
    }

    #[test]
    fn save_every_thins_frames_but_keeps_final() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "c.cfg", &format!("{CIRCLE}save_every = 3\n"));
        assert_eq!(capflow(&["run", &cfg]), 0);
        let snap = read_snapshot(&dir.path().join("c.snap")).unwrap();
        let times: Vec<f64> = snap.records.iter().map(|r| r.t).collect();
        assert_eq!(times.len(), 3);
        assert!((times[2] - 4e-3).abs() < 1e-15);
    }

    #[test]
    fn restart_from_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "a.cfg", CIRCLE);
        assert_eq!(capflow(&["run", &cfg]), 0);
        let snap_path = dir.path().join("a.snap");
        let body = format!("{CIRCLE}initial = snapshot {}\n", snap_path.display());
        let cfg2 = write_cfg(dir.path(), "b.cfg", &body);
        assert_eq!(capflow(&["run", &cfg2]), 0);
        let a = read_snapshot(&snap_path).unwrap();
        let b = read_snapshot(&dir.path().join("b.snap")).unwrap();
        assert_eq!(a.records.last().unwrap().values, b.records[0].values);
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let bad_s = write_cfg(dir.path(), "s.cfg", &CIRCLE.replace("s = 0.5", "s = 1.2"));
        assert_eq!(capflow(&["run", &bad_s]), 2);

        let nc = write_cfg(
            dir.path(),
            "nc.cfg",
            &format!("{CIRCLE}max_picard = 1\ninitial = cosine 1 0.1 2\n"),
        );
        assert_eq!(capflow(&["run", &nc]), 3);

        let ext = CIRCLE
            .replace("t_end = 4e-3", "t_end = 0.1")
            .replace("64", "32");
        let ext = write_cfg(dir.path(), "ext.cfg", &ext);
        assert_eq!(capflow(&["run", &ext]), 4);

        let inj = write_cfg(
            dir.path(),
            "inj.cfg",
            &format!("{CIRCLE}initial = cosine 1 0.97 12\n"),
        );
        assert_eq!(capflow(&["run", &inj]), 5);

        assert_eq!(capflow(&["run", "/nonexistent/x.cfg"]), 6);
        let garbage = write_cfg(dir.path(), "g.snap", "{\"schema\":1,\"manif");
        assert_eq!(capflow(&["inspect", &garbage]), 6);
    }

    #[test]
    fn validate_suite_names() {
        assert_eq!(capflow(&["validate", "scaling", "--resolution", "128"]), 0);
        assert_eq!(capflow(&["validate", "everything"]), 2);
    }
}
