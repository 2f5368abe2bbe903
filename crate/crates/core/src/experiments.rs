//! Reproducible end-to-end experiments and their on-disk outputs.
//!
//! Each runner takes an [`ExperimentConfig`], writes CSV/JSON/binary results
//! plus a `manifest.json` into the configured output directory, and returns a
//! summary. Configuration files are TOML; every key is optional and falls back
//! to the per-experiment defaults of [`ExperimentConfig::defaults`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{convergence_order, mid_row, scaling_fit, total_variation, RunRecord};
use crate::driver::{simulate, RunOptions, RunOutput, Scheme, Starter, StepPlan};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::kernels::{
    certify_mesh, quadratic_form_probes, r_star, stability_constants, verify_orthogonality, CertificationReport,
    ProbeReport, TimeMesh,
};
use crate::meshing::{random_mesh, random_ratio_mesh, read_mesh_csv, uniform_mesh, write_mesh_csv, AdaptiveConfig};
use crate::schemes::{FixedPointConfig, ManufacturedSolution, ModelParams, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Accuracy,
    Compare,
    Adaptive,
    Coarsen,
    Certify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Accuracy => "accuracy",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Adaptive => "adaptive",
            ExperimentKind::Coarsen => "coarsen",
            ExperimentKind::Certify => "certify",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshKind {
    Uniform,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySettings {
    pub mesh: MeshKind,
    pub final_time: f64,
    pub steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    pub final_time: f64,
    pub taus: Vec<f64>,
    pub reference_tau: f64,
    pub schemes: Vec<Scheme>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSettings {
    pub final_time: f64,
    pub betas: Vec<f64>,
    pub tau_min: f64,
    pub tau_max: f64,
    pub r_user: f64,
    /// Step of the uniform BDF2 reference run.
    pub reference_tau: f64,
    /// Whether to compute the reference run at all.
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenSettings {
    pub final_time: f64,
    pub beta: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub r_user: f64,
    pub snapshot_times: Vec<f64>,
    pub fit_window: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    /// Number of random-ratio meshes.
    pub meshes: usize,
    pub steps: usize,
    /// Ratios are drawn from `U(ratio_min, ratio_max)`.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub r_user: f64,
    /// Random vectors per mesh for the quadratic-form probes.
    pub trials: usize,
    /// Optional mesh file (`k,t,tau,r` CSV) certified in addition.
    pub mesh_file: Option<PathBuf>,
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelParams,
    pub scheme: Scheme,
    pub starter: Option<Starter>,
    pub energy_safe: bool,
    pub fixed_point: FixedPointConfig,
    pub accuracy: AccuracySettings,
    pub compare: CompareSettings,
    pub adaptive: AdaptiveSettings,
    pub coarsen: CoarsenSettings,
    pub certify: CertifySettings,
}

impl ExperimentConfig {
    /// Defaults: the manufactured-solution problem for `accuracy`, the
    /// random-initial-data coarsening problem otherwise.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        let model = match kind {
            ExperimentKind::Accuracy => ModelParams {
                kappa: 1.0,
                epsilon: 0.5f64.sqrt(),
                length: two_pi,
                grid_size: 32,
            },
            _ => ModelParams {
                kappa: 0.01,
                epsilon: 0.05,
                length: two_pi,
                grid_size: 128,
            },
        };
        Self {
            experiment: kind,
            seed: 20_200_101,
            output_dir: PathBuf::from("results").join(kind.name()),
            model,
            scheme: Scheme::Bdf2,
            starter: None,
            energy_safe: false,
            fixed_point: FixedPointConfig::default(),
            accuracy: AccuracySettings {
                mesh: MeshKind::Random,
                final_time: 1.0,
                steps: vec![40, 80, 160, 320, 640],
            },
            compare: CompareSettings {
                final_time: 0.1,
                taus: vec![0.1, 0.02, 0.01, 0.001],
                reference_tau: 1e-4,
                schemes: vec![Scheme::Bdf2, Scheme::Cn, Scheme::Cncs],
            },
            adaptive: AdaptiveSettings {
                final_time: 30.0,
                betas: vec![10.0, 100.0, 1000.0],
                tau_min: 1e-4,
                tau_max: 0.1,
                r_user: 4.0,
                reference_tau: 1e-3,
                reference: true,
            },
            coarsen: CoarsenSettings {
                final_time: 500.0,
                beta: 1e3,
                tau_min: 1e-4,
                tau_max: 0.1,
                r_user: 4.0,
                snapshot_times: vec![10.0, 50.0, 100.0, 200.0, 300.0, 500.0],
                fit_window: [50.0, 500.0],
            },
            certify: CertifySettings {
                meshes: 100,
                steps: 500,
                ratio_min: 0.01,
                ratio_max: 4.0,
                r_user: 4.0,
                trials: 20,
                mesh_file: None,
            },
        }
    }

    /// Parses TOML on top of the defaults for `kind` (or for the file's own
    /// `experiment` key when `kind` is `None`).
    pub fn from_toml_str(text: &str, kind: Option<ExperimentKind>) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let file_kind = match overrides.get("experiment") {
            Some(v) => Some(
                ExperimentKind::deserialize(v.clone()).map_err(|e| Error::Config(format!("experiment: {e}")))?,
            ),
            None => None,
        };
        let kind = match (kind, file_kind) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "config is for '{}' but '{}' was requested",
                    b.name(),
                    a.name()
                )))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(Error::Config("no experiment kind given".into())),
        };
        let defaults = toml::Table::try_from(Self::defaults(kind)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::Table(defaults);
        merge(&mut merged, toml::Value::Table(overrides));
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.experiment = kind;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, kind: Option<ExperimentKind>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?, kind)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fixed_point.validate()?;
        if self.accuracy.steps.is_empty() || self.accuracy.steps.contains(&0) {
            return Err(Error::Config("accuracy.steps must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn problem(&self) -> Result<Problem> {
        Problem::new(self.model)
    }

    fn run_options(&self, scheme: Scheme, plan: StepPlan) -> RunOptions {
        let mut opts = RunOptions::new(scheme, plan);
        opts.fixed_point = self.fixed_point;
        opts.energy_safe = self.energy_safe;
        if scheme == self.scheme {
            opts.starter = self.starter;
        }
        opts
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Independent sub-seed `k` of a master seed (SplitMix64 finaliser).
pub fn derive_seed(master: u64, k: u64) -> u64 {
    let mut z = master ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// I.i.d. `U(−amp, amp)` grid values.
pub fn random_initial_field(size: usize, amp: f64, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..size * size).map(|_| rng.random_range(-amp..amp)).collect();
    Field::from_values(size, values).expect("size matches")
}

// ---------------------------------------------------------------- output

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    record.write_csv(&mut w, true)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    seed: u64,
    version: &'a str,
    grid: GridInfo,
    scheme: &'a str,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct GridInfo {
    size: usize,
    length: f64,
    spacing: f64,
}

fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = Manifest {
        experiment: cfg.experiment.name(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        grid: GridInfo {
            size: cfg.model.grid_size,
            length: cfg.model.length,
            spacing: cfg.model.length / cfg.model.grid_size as f64,
        },
        scheme: cfg.scheme.name(),
        config: cfg,
    };
    write_json(&cfg.output_dir.join("manifest.json"), &manifest)
}

/// Flat little-endian snapshot: `u64 M`, `f64 L`, `f64 t`, then `M²` values
/// in row-major order (`values[j·M + i]` at `(x_i, y_j)`).
pub fn write_snapshot_bin<W: Write>(mut out: W, grid: &Grid, t: f64, field: &Field) -> Result<()> {
    out.write_all(&(grid.size() as u64).to_le_bytes())?;
    out.write_all(&grid.length().to_le_bytes())?;
    out.write_all(&t.to_le_bytes())?;
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot_bin`]: `(L, t, field)`.
pub fn read_snapshot_bin(bytes: &[u8]) -> Result<(f64, f64, Field)> {
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(8 * i..8 * i + 8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Parse("truncated snapshot".into()))
    };
    let m = u64::from_le_bytes(word(0)?) as usize;
    let length = f64::from_le_bytes(word(1)?);
    let t = f64::from_le_bytes(word(2)?);
    if bytes.len() != 8 * (3 + m * m) {
        return Err(Error::Parse(format!("snapshot of size {m} has {} bytes", bytes.len())));
    }
    let values = (0..m * m).map(|k| word(3 + k).map(f64::from_le_bytes)).collect::<Result<_>>()?;
    Ok((length, t, Field::from_values(m, values)?))
}

/// CSV alternative: `x,y,phi` per grid point.
pub fn write_snapshot_csv<W: Write>(mut out: W, grid: &Grid, field: &Field) -> Result<()> {
    writeln!(out, "x,y,phi")?;
    let m = grid.size();
    for j in 0..m {
        for i in 0..m {
            writeln!(out, "{},{},{}", grid.coord(i), grid.coord(j), field.at(i, j))?;
        }
    }
    Ok(())
}

fn write_slice(path: &Path, grid: &Grid, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,phi")?;
    for (i, v) in mid_row(field).iter().enumerate() {
        writeln!(w, "{},{}", grid.coord(i), v)?;
    }
    w.flush()?;
    Ok(())
}

fn tag(x: f64) -> String {
    format!("{x:e}").replace('.', "p")
}

// ---------------------------------------------------------------- accuracy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub steps: usize,
    /// Largest step of the mesh.
    pub tau: f64,
    pub error: f64,
    /// Order against the previous (coarser) row.
    pub order: Option<f64>,
    pub max_ratio: f64,
    /// Levels with `r_k ≥ r*`.
    pub n1: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mesh: MeshKind,
    pub rows: Vec<AccuracyRow>,
}

/// `max_n ‖Φ(t_n) − φⁿ‖` for the manufactured solution on one mesh.
pub fn manufactured_error(problem: &Problem, mesh: &TimeMesh, opts: &RunOptions) -> Result<f64> {
    let exact = ManufacturedSolution;
    let grid = problem.grid();
    let phi0 = exact.exact(grid, mesh.levels()[0]);
    let mut worst: f64 = 0.0;
    let mut observe = |_: usize, t: f64, phi: &Field| {
        let diff = phi.lincomb(1.0, &exact.exact(grid, t), -1.0);
        worst = worst.max(grid.norm_l2(&diff));
    };
    simulate(problem, &phi0, opts, &mut observe)?;
    Ok(worst)
}

pub fn run_accuracy(cfg: &ExperimentConfig) -> Result<AccuracyReport> {
    let settings = &cfg.accuracy;
    let problem = cfg.problem()?.with_forcing(Arc::new(ManufacturedSolution));
    let meshes = settings
        .steps
        .iter()
        .enumerate()
        .map(|(k, &n)| match settings.mesh {
            MeshKind::Uniform => uniform_mesh(settings.final_time, n),
            MeshKind::Random => random_mesh(settings.final_time, n, derive_seed(cfg.seed, k as u64)),
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = meshes
            .iter()
            .zip(&settings.steps)
            .map(|(mesh, &n)| {
                let problem = &problem;
                s.spawn(move || {
                    let opts = cfg.run_options(cfg.scheme, StepPlan::Mesh(mesh.clone()));
                    manufactured_error(problem, mesh, &opts)
                        .map_err(|e| Error::Config(format!("accuracy run with N = {n} failed: {e}")))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("accuracy worker panicked")).collect()
    });
    let errors = errors.into_iter().collect::<Result<Vec<f64>>>()?;
    let taus: Vec<f64> = meshes.iter().map(TimeMesh::max_step).collect();
    let orders = if errors.len() >= 2 { convergence_order(&errors, &taus)? } else { Vec::new() };
    let rs = r_star();
    let rows: Vec<AccuracyRow> = meshes
        .iter()
        .enumerate()
        .map(|(k, mesh)| AccuracyRow {
            steps: settings.steps[k],
            tau: taus[k],
            error: errors[k],
            order: if k == 0 { None } else { Some(orders[k - 1]) },
            max_ratio: mesh.max_ratio(),
            n1: mesh.count_ratios_above(rs),
        })
        .collect();

    create_dir(&cfg.output_dir)?;
    write_manifest(cfg)?;
    let mut w = BufWriter::new(File::create(cfg.output_dir.join("table.csv"))?);
    writeln!(w, "N,tau,error,order,max_ratio,n1")?;
    for r in &rows {
        let order = r.order.map(|o| o.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.steps, r.tau, r.error, order, r.max_ratio, r.n1)?;
    }
    w.flush()?;
    for (k, mesh) in meshes.iter().enumerate() {
        let f = File::create(cfg.output_dir.join(format!("mesh_N{}.csv", settings.steps[k])))?;
        write_mesh_csv(mesh, BufWriter::new(f))?;
    }
    Ok(AccuracyReport {
        mesh: settings.mesh,
        rows,
    })
}

// ---------------------------------------------------------------- compare

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub scheme: Scheme,
    pub tau: f64,
    /// `None` when the run failed; see `failure`.
    pub total_variation: Option<f64>,
    pub max_diff_to_reference: Option<f64>,
    pub volume_drift: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub reference_tau: f64,
    pub reference_total_variation: f64,
    pub entries: Vec<CompareEntry>,
}

impl CompareReport {
    pub fn entry(&self, scheme: Scheme, tau: f64) -> Option<&CompareEntry> {
        self.entries
            .iter()
            .find(|e| e.scheme == scheme && (e.tau - tau).abs() <= 1e-12 * tau)
    }
}

fn uniform_run(cfg: &ExperimentConfig, problem: &Problem, phi0: &Field, scheme: Scheme, tau: f64) -> Result<RunOutput> {
    let final_time = cfg.compare.final_time;
    let steps = (final_time / tau).round().max(1.0) as usize;
    let mesh = uniform_mesh(final_time, steps)?;
    simulate(problem, phi0, &cfg.run_options(scheme, StepPlan::Mesh(mesh)), &mut |_, _, _| {})
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let settings = &cfg.compare;
    let problem = cfg.problem()?;
    let phi0 = random_initial_field(cfg.model.grid_size, 1e-3, derive_seed(cfg.seed, 0));
    create_dir(&cfg.output_dir)?;
    write_manifest(cfg)?;

    let reference = uniform_run(cfg, &problem, &phi0, Scheme::Bdf2, settings.reference_tau)?;
    let grid = problem.grid();
    write_slice(&cfg.output_dir.join("slice_reference.csv"), grid, &reference.final_field)?;
    write_record(&cfg.output_dir.join("energy_reference.csv"), &reference.record)?;
    let ref_slice = mid_row(&reference.final_field).to_vec();

    let jobs: Vec<(Scheme, f64)> = settings
        .schemes
        .iter()
        .flat_map(|&s| settings.taus.iter().map(move |&t| (s, t)))
        .collect();
    let outputs: Vec<Result<RunOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(scheme, tau)| {
                let (problem, phi0) = (&problem, &phi0);
                s.spawn(move || uniform_run(cfg, problem, phi0, scheme, tau))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect()
    });

    let mut entries = Vec::new();
    for (&(scheme, tau), out) in jobs.iter().zip(outputs) {
        let entry = match out {
            Ok(out) => {
                let name = format!("{}_tau{}", scheme.name(), tag(tau));
                write_slice(&cfg.output_dir.join(format!("slice_{name}.csv")), grid, &out.final_field)?;
                write_record(&cfg.output_dir.join(format!("energy_{name}.csv")), &out.record)?;
                let slice = mid_row(&out.final_field);
                let diff = slice.iter().zip(&ref_slice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                CompareEntry {
                    scheme,
                    tau,
                    total_variation: Some(total_variation(slice)),
                    max_diff_to_reference: Some(diff),
                    volume_drift: Some(out.record.max_volume_drift()),
                    failure: None,
                }
            }
            Err(e) => CompareEntry {
                scheme,
                tau,
                total_variation: None,
                max_diff_to_reference: None,
                volume_drift: None,
                failure: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }
    let report = CompareReport {
        reference_tau: settings.reference_tau,
        reference_total_variation: total_variation(&ref_slice),
        entries,
    };
    write_json(&cfg.output_dir.join("summary.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- adaptive

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveEntry {
    pub beta: f64,
    /// Number of time levels (steps).
    pub levels: usize,
    pub cpu_seconds: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_ratio: f64,
    pub rejections: usize,
    /// Largest relative energy deviation from the reference for `t ≥ 1`.
    pub max_rel_energy_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveReport {
    pub reference_levels: Option<usize>,
    pub reference_cpu_seconds: Option<f64>,
    pub entries: Vec<AdaptiveEntry>,
}

/// Piecewise-linear interpolation of `(ts, vs)` at `t` (clamped).
fn interpolate(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    let k = ts.partition_point(|&x| x < t);
    if k == 0 {
        return vs[0];
    }
    if k >= ts.len() {
        return vs[vs.len() - 1];
    }
    let w = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
    vs[k - 1] + w * (vs[k] - vs[k - 1])
}

pub fn run_adaptive(cfg: &ExperimentConfig) -> Result<AdaptiveReport> {
    let settings = &cfg.adaptive;
    let problem = cfg.problem()?;
    let phi0 = random_initial_field(cfg.model.grid_size, 1e-3, derive_seed(cfg.seed, 0));
    create_dir(&cfg.output_dir)?;
    write_manifest(cfg)?;

    let plan = |beta: f64| StepPlan::Adaptive {
        config: AdaptiveConfig {
            tau_min: settings.tau_min,
            tau_max: settings.tau_max,
            beta,
            r_user: settings.r_user,
        },
        final_time: settings.final_time,
        initial_step: None,
    };
    let (reference, runs) = std::thread::scope(|s| {
        let (problem, phi0) = (&problem, &phi0);
        let reference = settings.reference.then_some(settings.reference_tau).map(|tau| {
            s.spawn(move || -> Result<RunOutput> {
                let steps = (settings.final_time / tau).round().max(1.0) as usize;
                let mesh = uniform_mesh(settings.final_time, steps)?;
                simulate(problem, phi0, &cfg.run_options(Scheme::Bdf2, StepPlan::Mesh(mesh)), &mut |_, _, _| {})
            })
        });
        let runs: Vec<_> = settings
            .betas
            .iter()
            .map(|&beta| {
                let plan = plan(beta);
                s.spawn(move || simulate(problem, phi0, &cfg.run_options(Scheme::Bdf2, plan), &mut |_, _, _| {}))
            })
            .collect();
        (
            reference.map(|h| h.join().expect("reference worker panicked")),
            runs.into_iter()
                .map(|h| h.join().expect("adaptive worker panicked"))
                .collect::<Vec<_>>(),
        )
    });
    let reference = reference.transpose()?;
    if let Some(r) = &reference {
        write_record(&cfg.output_dir.join("record_reference.csv"), &r.record)?;
    }
    let mut entries = Vec::new();
    for (&beta, run) in settings.betas.iter().zip(runs) {
        let run = run?;
        write_record(&cfg.output_dir.join(format!("record_beta{}.csv", tag(beta))), &run.record)?;
        let max_rel_energy_diff = reference.as_ref().map(|r| {
            let (rt, re) = (r.record.times(), r.record.energies());
            run.record
                .rows()
                .iter()
                .filter(|row| row.t >= 1.0)
                .map(|row| {
                    let e_ref = interpolate(&rt, &re, row.t);
                    ((row.energy - e_ref) / e_ref).abs()
                })
                .fold(0.0, f64::max)
        });
        let steps = run.mesh.steps();
        entries.push(AdaptiveEntry {
            beta,
            levels: run.mesh.num_steps(),
            cpu_seconds: run.wall_seconds,
            min_step: steps.iter().copied().fold(f64::INFINITY, f64::min),
            max_step: run.mesh.max_step(),
            max_ratio: run.mesh.max_ratio(),
            rejections: run.rejections,
            max_rel_energy_diff,
        });
    }
    let report = AdaptiveReport {
        reference_levels: reference.as_ref().map(|r| r.mesh.num_steps()),
        reference_cpu_seconds: reference.as_ref().map(|r| r.wall_seconds),
        entries,
    };
    write_json(&cfg.output_dir.join("summary.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- coarsen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenReport {
    pub levels: usize,
    pub cpu_seconds: f64,
    pub rejections: usize,
    pub max_volume_drift: f64,
    /// `None` if the run does not cover the fit window.
    pub energy_slope: Option<f64>,
    pub fit_window: [f64; 2],
    pub snapshot_times: Vec<f64>,
    /// Largest `𝓔[φⁿ] − 𝓔[φⁿ⁻¹]` over `n ≥ 2`.
    pub max_modified_energy_increase: f64,
    pub final_energy: f64,
}

/// The coarsening run itself, without writing outputs.
pub fn coarsen_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let settings = &cfg.coarsen;
    let problem = cfg.problem()?;
    let phi0 = random_initial_field(cfg.model.grid_size, 1e-3, derive_seed(cfg.seed, 0));
    let plan = StepPlan::Adaptive {
        config: AdaptiveConfig {
            tau_min: settings.tau_min,
            tau_max: settings.tau_max,
            beta: settings.beta,
            r_user: settings.r_user,
        },
        final_time: settings.final_time,
        initial_step: None,
    };
    let mut opts = cfg.run_options(cfg.scheme, plan);
    opts.snapshot_times = settings.snapshot_times.clone();
    simulate(&problem, &phi0, &opts, &mut |_, _, _| {})
}

/// Largest increase `𝓔[φⁿ] − 𝓔[φⁿ⁻¹]` over `n ≥ 2`.
pub fn max_modified_energy_increase(record: &RunRecord) -> f64 {
    let me: Vec<f64> = record.rows().iter().skip(1).filter_map(|r| r.modified_energy).collect();
    me.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

pub fn run_coarsen(cfg: &ExperimentConfig) -> Result<CoarsenReport> {
    let out = coarsen_run(cfg)?;
    let grid = Grid::new(cfg.model.length, cfg.model.grid_size)?;
    create_dir(&cfg.output_dir)?;
    write_manifest(cfg)?;
    write_record(&cfg.output_dir.join("record.csv"), &out.record)?;
    for snap in &out.snapshots {
        let name = format!("snapshot_t{}", snap.t);
        let mut w = BufWriter::new(File::create(cfg.output_dir.join(format!("{name}.bin")))?);
        write_snapshot_bin(&mut w, &grid, snap.t, &snap.field)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(cfg.output_dir.join(format!("{name}.csv")))?);
        write_snapshot_csv(&mut w, &grid, &snap.field)?;
        w.flush()?;
    }
    let [lo, hi] = cfg.coarsen.fit_window;
    let energy_slope = scaling_fit(&out.record.times(), &out.record.energies(), lo, hi).ok();
    let report = CoarsenReport {
        levels: out.mesh.num_steps(),
        cpu_seconds: out.wall_seconds,
        rejections: out.rejections,
        max_volume_drift: out.record.max_volume_drift(),
        energy_slope,
        fit_window: cfg.coarsen.fit_window,
        snapshot_times: out.snapshots.iter().map(|s| s.t).collect(),
        max_modified_energy_increase: max_modified_energy_increase(&out.record),
        final_energy: out.record.rows().last().map(|r| r.energy).unwrap_or(f64::NAN),
    };
    write_json(&cfg.output_dir.join("summary.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- certify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyEntry {
    pub mesh: String,
    pub steps: usize,
    pub max_ratio: f64,
    pub orthogonality_residual: Option<f64>,
    pub eigen: Option<CertificationReport>,
    pub probes: Option<ProbeReport>,
    /// Set when a guard (e.g. a ratio above `r_user`) stopped certification.
    pub error: Option<String>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub r_user: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub entries: Vec<CertifyEntry>,
    pub all_pass: bool,
}

fn certify_one(name: String, mesh: &TimeMesh, r_user: f64, trials: usize, seed: u64) -> Result<CertifyEntry> {
    let constants = stability_constants(r_user)?;
    let orthogonality_residual = Some(verify_orthogonality(mesh, mesh.num_steps())?);
    let mut entry = CertifyEntry {
        mesh: name,
        steps: mesh.num_steps(),
        max_ratio: mesh.max_ratio(),
        orthogonality_residual,
        eigen: None,
        probes: None,
        error: None,
        pass: false,
    };
    match certify_mesh(mesh, &constants).and_then(|eig| Ok((eig, quadratic_form_probes(mesh, &constants, trials, seed)?))) {
        Ok((eig, probes)) => {
            entry.pass = eig.pass && probes.violations() == 0;
            entry.eigen = Some(eig);
            entry.probes = Some(probes);
        }
        Err(e @ Error::RatioExceedsUser { .. }) => entry.error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(entry)
}

pub fn run_certify(cfg: &ExperimentConfig) -> Result<CertifyReport> {
    let s = &cfg.certify;
    let constants = stability_constants(s.r_user)?;
    let mut entries = Vec::new();
    for k in 0..s.meshes {
        let seed = derive_seed(cfg.seed, k as u64);
        let mesh = random_ratio_mesh(s.steps, s.ratio_min, s.ratio_max, seed)?;
        entries.push(certify_one(format!("random-{k}"), &mesh, s.r_user, s.trials, seed)?);
    }
    if let Some(path) = &s.mesh_file {
        let mesh = read_mesh_csv(std::io::BufReader::new(File::open(path)?))?;
        entries.push(certify_one(path.display().to_string(), &mesh, s.r_user, s.trials, cfg.seed)?);
    }
    let report = CertifyReport {
        r_user: s.r_user,
        m1: constants.m1,
        m2: constants.m2,
        m3: constants.m3,
        all_pass: entries.iter().all(|e| e.pass),
        entries,
    };
    create_dir(&cfg.output_dir)?;
    write_manifest(cfg)?;
    write_json(&cfg.output_dir.join("certify.json"), &report)?;
    Ok(report)
}
