//! Command implementations. Each returns its artifacts; writing them and
//! mapping the status to an exit code happens in [`crate::execute`].

use std::path::Path;
use std::str::FromStr;

use ei_core::baseline::bp_fit;
use ei_core::polarize::assess;
use ei_core::reduce::reduction_loop;
use ei_core::report::{Outcome, ProbeRecord, TrainReport};
use ei_core::trainer::{
    capacity_probe, extrema_census, noise_probe, size_rule, verify_extremum, StationaryPointReport,
};
use ei_core::{fit, forward, Dataset, NetSpec, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{Probe, RunConfig};
use crate::data::load_dataset;
use crate::error::{CliError, ExitStatus, Result};
use crate::output::Artifacts;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    FitEi,
    FitBp,
    Verify,
    Census,
    Capacity,
    Reduce,
    Grid,
    SizeRule,
}

pub const COMMANDS: &[(&str, &str)] = &[
    ("fit-ei", "train by extremum increment and report per-sample margins"),
    (
        "fit-bp",
        "train the back-propagation baseline with the same report schema",
    ),
    (
        "verify",
        "gradient residual and Hessian class of every output at every sample",
    ),
    ("census", "grid search for stationary points of the outputs (m <= 3)"),
    ("capacity", "stage-n nullity as generic samples are appended"),
    (
        "reduce",
        "train neighborhood centers, verify the rest, promote failures",
    ),
    ("grid", "sample a trained 2-input net over a box into grid.csv"),
    ("size-rule", "smallest hidden width for the sample count"),
];

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fit-ei" => Command::FitEi,
            "fit-bp" => Command::FitBp,
            "verify" => Command::Verify,
            "census" => Command::Census,
            "capacity" => Command::Capacity,
            "reduce" => Command::Reduce,
            "grid" => Command::Grid,
            "size-rule" => Command::SizeRule,
            other => return Err(CliError::Config(format!("unknown command `{other}`"))),
        })
    }
}

impl Command {
    pub fn name(self) -> &'static str {
        COMMANDS[self as usize].0
    }
}

/// Dataset if configured, labels checked against the output width.
pub fn dataset(cfg: &RunConfig) -> Result<Option<Dataset>> {
    let classes = cfg.layers.as_ref().and_then(|l| l.last().copied());
    cfg.data.as_deref().map(|p| load_dataset(p, classes)).transpose()
}

fn require_data(data: &Option<Dataset>) -> Result<&Dataset> {
    data.as_ref()
        .ok_or_else(|| CliError::Config("`data` is required for this command".into()))
}

fn input_dim(cfg: &RunConfig, data: &Option<Dataset>) -> Result<usize> {
    match (data.as_ref().and_then(|d| d.input_dim()), cfg.inputs) {
        (Some(m), Some(i)) if m != i => Err(CliError::Config(format!(
            "`inputs` = {i} but the dataset has {m} columns"
        ))),
        (Some(m), _) | (None, Some(m)) => Ok(m),
        (None, None) => Err(CliError::Config("set `data` or `inputs`".into())),
    }
}

fn load_weights(path: &Path, spec: &NetSpec) -> Result<WeightSet> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rows = [
        &v["result"]["report"]["weights"],
        &v["result"]["fit"]["weights"],
        &v["weights"],
    ]
    .into_iter()
    .find(|w| w.is_array())
    .ok_or_else(|| CliError::Data(format!("{}: no weights found", path.display())))?;
    let rows: Vec<Vec<Vec<f64>>> =
        serde_json::from_value(rows.clone()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    WeightSet::from_rows(spec, &rows).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn initial_weights(cfg: &RunConfig, spec: &NetSpec) -> Result<WeightSet> {
    match &cfg.weights {
        Some(p) => load_weights(p, spec),
        None => Ok(WeightSet::random(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports are plain data")
}

fn report_lines(art: &mut Artifacts, report: &TrainReport) {
    art.line("method", &report.method);
    art.line("outcome", to_json(&report.outcome));
    if let Some(stage) = report.success_stage() {
        art.line("stage", stage);
    }
    art.line("updated_layers", format!("{:?}", report.updated_layers));
    art.line("passed", format!("{}/{}", report.passed(), report.samples.len()));
    if let Some(loss) = report.loss {
        art.line("loss", format!("{loss:e}"));
    }
    for a in &report.stage_history {
        art.line(
            format!("stage_attempt.{}", a.stage),
            format!(
                "variant={} rank={} nullity={} found={} restarts={}",
                a.variant.name(),
                a.rank,
                a.nullity,
                a.found,
                a.restarts
            ),
        );
    }
    for s in &report.samples {
        art.line(
            format!("sample.{}", s.index),
            format!(
                "essence={} pass={} margin={:e} residual={:e} outputs={:?}",
                s.essence, s.pass, s.margin, s.stationarity_residual, s.outputs
            ),
        );
    }
    for p in &report.probes {
        art.line(format!("probe.{}", p.name), format!("pass={:?} {}", p.pass, p.detail));
    }
}

/// EI fit, or stored weights when `weights` is set.
fn trained(cfg: &RunConfig, spec: &NetSpec, data: &Option<Dataset>) -> Result<(WeightSet, Option<TrainReport>)> {
    if let Some(p) = &cfg.weights {
        return Ok((load_weights(p, spec)?, None));
    }
    let data = require_data(data)?;
    let w0 = initial_weights(cfg, spec)?;
    let report = fit(data, spec, &w0, &cfg.train)?;
    Ok((report.final_weights(spec)?, Some(report)))
}

fn fit_status(report: &Option<TrainReport>) -> ExitStatus {
    match report.as_ref().map(|r| r.outcome) {
        Some(Outcome::Exhausted) => ExitStatus::Exhausted,
        Some(Outcome::Diverged) => ExitStatus::Diverged,
        _ => ExitStatus::Ok,
    }
}

fn units(cfg: &RunConfig, spec: &NetSpec) -> Result<Vec<usize>> {
    match cfg.unit {
        0 => Ok((1..=spec.classes()).collect()),
        v if v <= spec.classes() => Ok(vec![v]),
        v => Err(CliError::Config(format!("`unit` {v} outside 0..={}", spec.classes()))),
    }
}

/// Perturbation of length `size` in a seeded random direction.
fn noise_vector(rng: &mut ChaCha8Rng, m: usize, size: f64) -> Vec<f64> {
    let d: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    d.into_iter().map(|x| x * size / norm).collect()
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<Artifacts> {
    let mut art = Artifacts::new(command.name());
    if command == Command::SizeRule {
        return size_rule_cmd(cfg, art);
    }
    let data = dataset(cfg)?;
    let m = input_dim(cfg, &data)?;
    // Preconditions first, so no work is wasted on a doomed request.
    if command == Command::Census && m > 3 {
        return Err(ei_core::Error::CensusDimension(m).into());
    }
    if command == Command::Grid && m != 2 {
        return Err(CliError::Config(format!("grid needs a 2-input net, got {m} inputs")));
    }
    let spec = cfg.spec(m)?;
    if let Some(d) = &data {
        d.validate_for(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    }

    match command {
        Command::FitEi => {
            let data = require_data(&data)?;
            let w0 = initial_weights(cfg, &spec)?;
            let mut report = fit(data, &spec, &w0, &cfg.train)?;
            if !cfg.probes.contains(&Probe::Vanishing) {
                report.probes.retain(|p| p.name != "vanishing");
            }
            let fitted = report.final_weights(&spec)?;
            if cfg.probes.contains(&Probe::Noise) {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut changed = 0;
                let mut outside = 0;
                for i in 0..data.len() {
                    let noise = noise_vector(&mut rng, m, cfg.noise);
                    let r = noise_probe(&spec, &fitted, data, i, &noise, cfg.neighborhood.gamma)?;
                    changed += r.prediction_changed as usize;
                    outside += !r.within_gamma as usize;
                }
                report.probes.push(ProbeRecord {
                    name: "noise".into(),
                    pass: None,
                    detail: format!(
                        "{changed}/{} predictions changed under noise {:e}; {outside} perturbed surfaces outside γ",
                        data.len(),
                        cfg.noise
                    ),
                });
            }
            if cfg.probes.contains(&Probe::Capacity) {
                let c = capacity_probe(&spec, &w0, data, data.len(), cfg.train.rank_tol, cfg.train.exec)?;
                report.probes.push(ProbeRecord {
                    name: "capacity".into(),
                    pass: None,
                    detail: format!("nullities {:?}, capacity {:?}", c.nullities, c.capacity),
                });
            }
            report_lines(&mut art, &report);
            art.status = fit_status(&Some(report.clone()));
            art.result = json!({ "report": to_json(&report) });
        }
        Command::FitBp => {
            let data = require_data(&data)?;
            let w0 = initial_weights(cfg, &spec)?;
            let report = bp_fit(data, &spec, &w0, &cfg.bp)?;
            report_lines(&mut art, &report);
            art.status = fit_status(&Some(report.clone()));
            art.result = json!({ "report": to_json(&report) });
        }
        Command::Verify => {
            let data = require_data(&data)?;
            let (weights, fitted) = trained(cfg, &spec, &Some(data.clone()))?;
            let evals = assess(&spec, &weights, data, &cfg.train.mode, cfg.train.exec)?;
            let units = units(cfg, &spec)?;
            let mut samples = Vec::new();
            for (i, (s, e)) in data.samples().iter().zip(&evals).enumerate() {
                let per: Vec<StationaryPointReport> = units
                    .iter()
                    .map(|&v| verify_extremum(&spec, &weights, s.surface(), v, &cfg.tolerances))
                    .collect::<ei_core::Result<_>>()?;
                art.line(
                    format!("sample.{i}"),
                    format!(
                        "essence={} pass={} margin={:e} stationary={} classes={:?}",
                        s.essence(),
                        e.pass,
                        e.margin,
                        e.stationary(),
                        per.iter().map(|p| p.classification).collect::<Vec<_>>()
                    ),
                );
                samples.push(json!({
                    "index": i,
                    "essence": s.essence(),
                    "evaluation": to_json(e),
                    "units": to_json(&per),
                }));
            }
            if let Some(r) = &fitted {
                art.line("fit.outcome", to_json(&r.outcome));
            }
            art.status = fit_status(&fitted);
            art.result = json!({ "fit": fitted.as_ref().map(to_json), "samples": samples });
        }
        Command::Census => {
            let (weights, fitted) = trained(cfg, &spec, &data)?;
            let grid = cfg.census_grid(m)?;
            let occupancy = data.as_ref().map(|d| (d, cfg.neighborhood.gamma));
            let mut per_unit = Vec::new();
            for v in units(cfg, &spec)? {
                let points = extrema_census(&spec, &weights, v, &grid, occupancy, &cfg.tolerances, cfg.train.exec)?;
                for (k, p) in points.iter().enumerate() {
                    art.line(
                        format!("unit.{v}.point.{k}"),
                        format!(
                            "location={:?} class={:?} residual={:e} occupancy={}",
                            p.location,
                            p.classification,
                            p.gradient_residual,
                            p.occupancy.map_or("none".to_string(), |i| i.to_string())
                        ),
                    );
                }
                per_unit.push(json!({ "unit": v, "points": to_json(&points) }));
            }
            if let Some(r) = &fitted {
                art.line("fit.outcome", to_json(&r.outcome));
            }
            art.status = fit_status(&fitted);
            art.result = json!({ "fit": fitted.as_ref().map(to_json), "grid": to_json(&grid), "units": per_unit });
        }
        Command::Capacity => {
            let w = initial_weights(cfg, &spec)?;
            // A dataset is used as the stream when given; otherwise draw
            // generic surfaces from the seed.
            let stream = match &data {
                Some(d) => d.clone(),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
                    Dataset::from_pairs(
                        (0..cfg.capacity_max)
                            .map(|_| ((0..m).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), 1)),
                    )?
                }
            };
            let curve = capacity_probe(&spec, &w, &stream, cfg.capacity_max, cfg.train.rank_tol, cfg.train.exec)?;
            let mut csv = String::from("samples,nullity,unknowns\n");
            for (k, z) in curve.nullities.iter().enumerate() {
                csv.push_str(&format!("{},{z},{}\n", k + 1, curve.unknowns));
            }
            art.line("unknowns", curve.unknowns);
            art.line("nullities", format!("{:?}", curve.nullities));
            art.line("capacity", curve.capacity.map_or("none".to_string(), |c| c.to_string()));
            art.csv = Some(("capacity.csv".into(), csv));
            art.result = to_json(&curve);
        }
        Command::Reduce => {
            let data = require_data(&data)?;
            let w0 = initial_weights(cfg, &spec)?;
            let (report, state) = reduction_loop(data, &spec, &w0, &cfg.train, &cfg.neighborhood)?;
            art.line("central", format!("{:?}", state.central));
            art.line("rounds", state.round_count());
            report_lines(&mut art, &report);
            art.status = fit_status(&Some(report.clone()));
            art.result = json!({ "report": to_json(&report), "reduction": to_json(&state) });
        }
        Command::Grid => {
            let (weights, fitted) = trained(cfg, &spec, &data)?;
            let lower = RunConfig::corner(&cfg.grid_lower, 2, "grid-lower")?;
            let upper = RunConfig::corner(&cfg.grid_upper, 2, "grid-upper")?;
            let n = cfg.grid_resolution;
            let at = |a: usize, i: usize| lower[a] + (upper[a] - lower[a]) * i as f64 / (n - 1) as f64;
            let mut csv = String::from("x1,x2");
            for v in 1..=spec.classes() {
                csv.push_str(&format!(",h{v}"));
            }
            csv.push('\n');
            for i in 0..n {
                for j in 0..n {
                    let x = [at(0, i), at(1, j)];
                    let t = forward(&spec, &weights, &x)?;
                    csv.push_str(&format!("{},{}", x[0], x[1]));
                    for h in t.output().iter() {
                        csv.push_str(&format!(",{h}"));
                    }
                    csv.push('\n');
                }
            }
            art.line("rows", n * n);
            if let Some(r) = &fitted {
                report_lines(&mut art, r);
            }
            art.status = fit_status(&fitted);
            art.csv = Some(("grid.csv".into(), csv));
            art.result = json!({
                "fit": fitted.as_ref().map(to_json),
                "lower": lower,
                "upper": upper,
                "resolution": n,
                "rows": n * n,
            });
        }
        Command::SizeRule => unreachable!("handled above"),
    }
    Ok(art)
}

fn size_rule_cmd(cfg: &RunConfig, mut art: Artifacts) -> Result<Artifacts> {
    let data = dataset(cfg)?;
    let m = input_dim(cfg, &data)?;
    let phi = match (&data, cfg.samples) {
        (Some(d), _) => d.len(),
        (None, Some(p)) => p,
        (None, None) => return Err(CliError::Config("set `data` or `samples`".into())),
    };
    let l_n = match (&cfg.layers, &data) {
        (Some(l), _) => *l.last().expect("validated non-empty"),
        (None, Some(d)) => d.max_essence(),
        (None, None) => return Err(CliError::Config("set `layers` or `data` for the output width".into())),
    };
    let width = size_rule(m, phi, l_n)?;
    art.line("inputs", m);
    art.line("samples", phi);
    art.line("outputs", l_n);
    art.line("width", width);
    art.result = json!({ "inputs": m, "samples": phi, "outputs": l_n, "width": width });
    Ok(art)
}
