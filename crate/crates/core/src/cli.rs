//! The `aaq` command line: fixtures, runs, sweeps, evaluation and inspection.
//!
//! Every command writes into `--out` through temp-file-then-rename and
//! leaves one `manifest.json` naming its sibling artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};
use crate::eval::{
    ablation_sweep, emit_report, evaluate, to_json_bytes, AblationGrid, Artifact, ReportFormat,
};
use crate::model::{load_model, make_fixture_pair, save_model, ModelPair, TinyLM};
use crate::pipeline::{run_pipeline, trace_csv, RunConfig, Stability};
use crate::write_atomic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FIXTURE: i32 = 3;
pub const EXIT_INSTABILITY: i32 = 4;

pub const TOKEN_MAGIC: &[u8; 8] = b"AAQTOKS1";

pub const PT_FILE: &str = "pt.aaqm";
pub const FT_FILE: &str = "ft.aaqm";
pub const CALIB_FILE: &str = "calib.tok";
pub const EVAL_FILE: &str = "eval.tok";
pub const MQ_FILE: &str = "mq.aaqm";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "aaq", version, about = "Alignment-aware quantization on toy language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a PT/FT model pair and calibration/eval token streams.
    Fixtures {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize transforms on a fixture, quantize, and evaluate.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep loss variant × α × k on one fixture.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved model against a fixture.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print shapes, quantizer specs and transform norms of a saved model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: RunConfig,
    pub fixture_seed: u64,
    pub run_seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fixture_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stability: Option<Stability>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_secs: Option<f64>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn write_tokens(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn read_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() < 8 || &bytes[..8] != TOKEN_MAGIC {
        return Err(AaqError::format("magic", "token stream must start with AAQTOKS1"));
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(AaqError::format("length", "token stream body is not a multiple of 4 bytes"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_tokens(path: &Path) -> Result<Vec<u32>> {
    read_tokens(&std::fs::read(path).map_err(|e| AaqError::io(path, e))?)
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p).map_err(|e| AaqError::io(p, e))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.fixture.seed = s;
        cfg.aaq.seed = s;
    }
    Ok(cfg)
}

/// A fixture directory written by `aaq fixtures`.
pub struct LoadedFixture {
    pub pair: ModelPair,
    pub calibration: Vec<u32>,
    pub eval: Vec<u32>,
}

pub fn load_fixture_dir(dir: &Path) -> Result<LoadedFixture> {
    let pt = load_model(&dir.join(PT_FILE))?;
    let ft = load_model(&dir.join(FT_FILE))?;
    Ok(LoadedFixture {
        pair: ModelPair::from_models(pt, ft)?,
        calibration: load_tokens(&dir.join(CALIB_FILE))?,
        eval: load_tokens(&dir.join(EVAL_FILE))?,
    })
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| AaqError::io(out, e))
}

struct ManifestBuilder {
    command: &'static str,
    config_path: Option<PathBuf>,
    started: u128,
}

impl ManifestBuilder {
    fn new(command: &'static str, config_path: Option<&Path>) -> Self {
        Self {
            command,
            config_path: config_path.map(Path::to_path_buf),
            started: now_ms(),
        }
    }

    fn finish(self, cfg: &RunConfig, artifacts: &[&str]) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path.map(|p| p.display().to_string()),
            config: cfg.clone(),
            fixture_seed: cfg.fixture.seed,
            run_seed: cfg.aaq.seed,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            fixture_margin: None,
            stability: None,
            wall_secs: None,
        }
    }
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    write_atomic(&out.join(MANIFEST_FILE), &to_json_bytes(m)?)
}

pub fn cmd_fixtures(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mb = ManifestBuilder::new("fixtures", config);
    let cfg = load_config(config, seed)?;
    cfg.validate()?;
    let fx = make_fixture_pair(&cfg.fixture)?;
    prepare_out(out)?;
    save_model(&fx.pair.pt, &out.join(PT_FILE))?;
    save_model(&fx.pair.ft, &out.join(FT_FILE))?;
    write_atomic(&out.join(CALIB_FILE), &write_tokens(&fx.calibration))?;
    write_atomic(&out.join(EVAL_FILE), &write_tokens(&fx.eval))?;
    let mut m = mb.finish(&cfg, &[PT_FILE, FT_FILE, CALIB_FILE, EVAL_FILE]);
    m.fixture_margin = Some(fx.meta.margin);
    write_manifest(out, &m)?;
    Ok(m)
}

/// Resolved config for a run on a saved fixture: the fixture section is
/// taken from the models' embedded metadata.
fn config_for_fixture(config: Option<&Path>, seed: Option<u64>, pair: &ModelPair) -> Result<RunConfig> {
    let mut cfg = load_config(config, seed)?;
    if let Some(meta) = &pair.ft.fixture {
        cfg.fixture = meta.spec.clone();
    }
    cfg.aaq.validate(pair.ft.vocab_size)?;
    Ok(cfg)
}

pub fn cmd_run(config: Option<&Path>, fixtures: &Path, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mb = ManifestBuilder::new("run", config);
    let fx = load_fixture_dir(fixtures)?;
    let cfg = config_for_fixture(config, seed, &fx.pair)?;
    prepare_out(out)?;
    let result = run_pipeline(&fx.pair, &fx.calibration, &fx.eval, &cfg);
    let run = match result {
        Ok(run) => run,
        Err(AaqError::NonFiniteLoss { step, snapshot }) => {
            write_atomic(&out.join(TRACE_FILE), trace_csv(&snapshot.trace).as_bytes())?;
            let mut m = mb.finish(&cfg, &[TRACE_FILE]);
            m.stability = Some(Stability::Exploded);
            write_manifest(out, &m)?;
            return Err(AaqError::NonFiniteLoss { step, snapshot });
        }
        Err(e) => return Err(e),
    };
    save_model(&run.mq, &out.join(MQ_FILE))?;
    write_atomic(&out.join(TRACE_FILE), trace_csv(&run.trace).as_bytes())?;
    emit_report(&Artifact::Report(&run.report), &out.join(REPORT_FILE), ReportFormat::Json)?;
    let mut m = mb.finish(&cfg, &[MQ_FILE, TRACE_FILE, REPORT_FILE]);
    m.stability = Some(run.report.stability);
    m.wall_secs = Some(run.state.elapsed_secs);
    write_manifest(out, &m)?;
    Ok(m)
}

pub fn cmd_ablate(config: Option<&Path>, grid: &Path, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mb = ManifestBuilder::new("ablate", config);
    let cfg = load_config(config, seed)?;
    cfg.validate()?;
    let text = std::fs::read_to_string(grid).map_err(|e| AaqError::io(grid, e))?;
    let grid: AblationGrid = serde_json::from_str(&text).map_err(|e| AaqError::config("grid", e.to_string()))?;
    let table = ablation_sweep(&cfg.fixture, &cfg.aaq, &grid)?;
    prepare_out(out)?;
    emit_report(&Artifact::Table(&table), &out.join(ABLATION_FILE), ReportFormat::Csv)?;
    let m = mb.finish(&cfg, &[ABLATION_FILE]);
    write_manifest(out, &m)?;
    Ok(m)
}

pub fn cmd_eval(
    model: &Path,
    fixtures: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<crate::eval::EvalReport> {
    let mb = ManifestBuilder::new("eval", config);
    let fx = load_fixture_dir(fixtures)?;
    let m = load_model(model)?;
    let cfg = config_for_fixture(config, seed, &fx.pair)?;
    let report = evaluate(&fx.pair, &m, &fx.eval, &cfg, Stability::Stable, 0)?;
    if let Some(out) = out {
        prepare_out(out)?;
        emit_report(&Artifact::Report(&report), &out.join(REPORT_FILE), ReportFormat::Json)?;
        write_manifest(out, &mb.finish(&cfg, &[REPORT_FILE]))?;
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Human-readable summary of a model file.
pub fn inspect_model(m: &TinyLM) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "V={} C={} d={} H={}\n",
        m.vocab_size,
        m.context_len,
        m.embed_dim,
        m.num_hidden()
    ));
    s.push_str(&format!("seed={}\n", m.seed));
    for (i, l) in m.layers.iter().enumerate() {
        let wb = l.weight_spec.as_ref().map_or("fp".to_string(), |q| q.bits.to_string());
        let ab = l.act_spec.as_ref().map_or("fp".to_string(), |q| q.bits.to_string());
        s.push_str(&format!(
            "layer{i}: {}x{} w_bits={wb} a_bits={ab} input_rotation={}",
            l.out_dim(),
            l.in_dim(),
            l.input_rotation.is_some()
        ));
        if let Some(p) = &l.transform {
            s.push_str(&format!(
                " theta: |log_scales|={:.6e} |skew|={:.6e}",
                norm(&p.log_scales),
                norm(&p.skew_gen)
            ));
        }
        s.push('\n');
    }
    if let Some(meta) = &m.fixture {
        s.push_str(&format!(
            "fixture: seed={} attempt={} margin={:.6} premise={:.3} triggers={:?} refusal={:?}\n",
            meta.spec.seed, meta.attempt, meta.margin, meta.premise_fraction, meta.trigger_tokens, meta.refusal_set
        ));
    }
    s
}

pub fn cmd_inspect(model: &Path) -> Result<String> {
    Ok(inspect_model(&load_model(model)?))
}

pub fn exit_code(e: &AaqError) -> i32 {
    match e {
        AaqError::Config { .. }
        | AaqError::Format { .. }
        | AaqError::InvalidArgument(_)
        | AaqError::InvalidInput(_)
        | AaqError::Io { .. } => EXIT_CONFIG,
        AaqError::Fixture { .. } => EXIT_FIXTURE,
        AaqError::NonFiniteLoss { .. } => EXIT_INSTABILITY,
        AaqError::Shape(_) | AaqError::Numeric(_) => EXIT_INTERNAL,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Fixtures { config, out, seed } => {
            let m = cmd_fixtures(config.as_deref(), &out, seed)?;
            if let Some(margin) = m.fixture_margin {
                eprintln!("fixture margin {margin:.6}");
            }
            Ok(EXIT_OK)
        }
        Command::Run {
            config,
            fixtures,
            out,
            seed,
        } => {
            let m = cmd_run(config.as_deref(), &fixtures, &out, seed)?;
            if m.stability == Some(Stability::Exploded) {
                eprintln!("run terminated: instability");
                Ok(EXIT_INSTABILITY)
            } else {
                Ok(EXIT_OK)
            }
        }
        Command::Ablate {
            config,
            grid,
            out,
            seed,
        } => {
            cmd_ablate(config.as_deref(), &grid, &out, seed)?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            model,
            fixtures,
            config,
            out,
            seed,
        } => {
            let r = cmd_eval(&model, &fixtures, config.as_deref(), out.as_deref(), seed)?;
            print!("{}", String::from_utf8_lossy(&to_json_bytes(&r)?));
            Ok(EXIT_OK)
        }
        Command::Inspect { model } => {
            print!("{}", cmd_inspect(&model)?);
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Sizes the global worker pool from `AAQ_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var("AAQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
