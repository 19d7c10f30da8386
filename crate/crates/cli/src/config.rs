//! Run configuration: a `key = value` file plus command-line overrides.
//!
//! Every key doubles as a long flag (`--climb-steps 50`). Values resolve in
//! the order built-in default, config file, flag. The fully resolved key
//! table is echoed into every report and is enough to repeat a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ei_core::baseline::BpConfig;
use ei_core::linsys::Assembly;
use ei_core::reduce::{ClusterRule, NeighborhoodConfig};
use ei_core::trainer::{CensusGrid, ExtremumTolerances};
use ei_core::{Execution, NetSpec, SearchBudget, TerminationMode, TrainConfig};

use crate::error::{CliError, Result};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_VAR: &str = "EI_OUTPUT_DIR";

/// `(key, default, help)`. An empty default means "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "", "dataset CSV (x1..xm, y)"),
    ("layers", "", "layer widths from first hidden to output, e.g. 5,2"),
    ("inputs", "", "input dimension when no dataset is given"),
    ("samples", "", "sample count for size-rule when no dataset is given"),
    ("weights", "", "JSON report whose weights replace the random start"),
    ("seed", "0", "seed for initial weights and every search"),
    ("mode", "weakened", "termination mode: ideal, weakened or softmax"),
    ("epsilon", "0.05", "ideal-mode tolerance"),
    ("delta", "0.05", "weakened-mode margin around 0.5"),
    ("alpha", "0.1", "softmax-mode tolerance on the labelled ratio"),
    ("beta", "0.1", "softmax-mode bound on every other ratio"),
    (
        "variant",
        "c-corrected",
        "deep-stage assembly: c-corrected or aggregate",
    ),
    ("stage-floor", "1", "deepest stage the fit may descend to"),
    ("draws", "10000", "stage-n restarts per output unit"),
    ("climb-steps", "100", "hill-climb steps per restart"),
    ("deep-draws", "48", "restarts per deep stage"),
    ("deep-climb-steps", "2", "hill-climb steps per deep restart"),
    (
        "refine-iters",
        "200",
        "Levenberg-Marquardt iterations per deep candidate",
    ),
    ("repair-draws", "400", "stage-n repair restarts after a deep candidate"),
    ("repair-climb-steps", "60", "hill-climb steps per repair restart"),
    ("scale-max-exponent", "10", "scale sweep covers 2^0 ..= 2^k"),
    ("chunk", "64", "restarts per parallel batch"),
    ("rank-tol", "1e-10", "relative singular value cutoff"),
    ("execution", "parallel", "parallel or sequential"),
    ("gamma", "0.1", "neighborhood radius"),
    ("cluster", "radius", "reduce clustering: radius or count"),
    ("clusters", "1", "clusters per class for cluster = count"),
    ("learning-rate", "0.5", "baseline learning rate"),
    ("epochs", "10000", "baseline epochs"),
    ("fd-step", "1e-5", "finite-difference step for Hessians"),
    ("eig-tol", "1e-6", "eigenvalues within this of zero are degenerate"),
    ("unit", "0", "output unit for census and verify, 0 for all"),
    ("census-lower", "-1", "census box lower corner (scalar or list)"),
    ("census-upper", "1", "census box upper corner (scalar or list)"),
    ("census-cells", "100", "census cells per axis"),
    ("grid-lower", "-1", "grid box lower corner (scalar or pair)"),
    ("grid-upper", "2", "grid box upper corner (scalar or pair)"),
    ("grid-resolution", "50", "grid points per axis"),
    ("capacity-max", "20", "longest generic sample stream for capacity"),
    (
        "probes",
        "vanishing",
        "fit-ei probes: vanishing, noise, capacity or none",
    ),
    ("noise", "0.01", "noise probe perturbation size"),
    ("output-dir", "", "report directory; defaults to $EI_OUTPUT_DIR, then ."),
];

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key = value",
                origin.display(),
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !is_key(k) {
            return Err(CliError::Config(format!(
                "{}:{}: unknown key `{k}`",
                origin.display(),
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Vanishing,
    Noise,
    Capacity,
}

/// Fully validated run settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Resolved key table, echoed verbatim into reports.
    pub echo: BTreeMap<String, String>,
    pub data: Option<PathBuf>,
    pub layers: Option<Vec<usize>>,
    pub inputs: Option<usize>,
    pub samples: Option<usize>,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub train: TrainConfig,
    pub neighborhood: NeighborhoodConfig,
    pub bp: BpConfig,
    pub tolerances: ExtremumTolerances,
    pub unit: usize,
    pub census_lower: Vec<f64>,
    pub census_upper: Vec<f64>,
    pub census_cells: usize,
    pub grid_lower: Vec<f64>,
    pub grid_upper: Vec<f64>,
    pub grid_resolution: usize,
    pub capacity_max: usize,
    pub probes: Vec<Probe>,
    pub noise: f64,
    pub output_dir: PathBuf,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn present(v: &str) -> Option<&str> {
    (!v.is_empty()).then_some(v)
}

impl RunConfig {
    /// Resolves `overrides` (file entries first, then flags) over the
    /// defaults and validates the result.
    pub fn resolve(overrides: &[(String, String)], env_output: Option<String>) -> Result<Self> {
        let mut echo: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (k, v) in overrides {
            if !is_key(k) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            echo.insert(k.clone(), v.clone());
        }
        if echo["output-dir"].is_empty() {
            echo.insert(
                "output-dir".into(),
                env_output.filter(|s| !s.is_empty()).unwrap_or_else(|| ".".into()),
            );
        }
        let g = |k: &str| echo[k].as_str();

        let seed: u64 = num("seed", g("seed"))?;
        let mode = match g("mode") {
            "ideal" => TerminationMode::Ideal {
                epsilon: num("epsilon", g("epsilon"))?,
            },
            "weakened" => TerminationMode::Weakened {
                delta: num("delta", g("delta"))?,
            },
            "softmax" => TerminationMode::Softmax {
                alpha: num("alpha", g("alpha"))?,
                beta: num("beta", g("beta"))?,
            },
            other => return Err(CliError::Config(format!("`mode`: unknown mode `{other}`"))),
        };
        mode.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let variant: Assembly = g("variant")
            .parse()
            .map_err(|_| CliError::Config(format!("`variant`: unknown assembly `{}`", g("variant"))))?;
        let exec = match g("execution") {
            "parallel" => Execution::Parallel,
            "sequential" => Execution::Sequential,
            other => return Err(CliError::Config(format!("`execution`: unknown schedule `{other}`"))),
        };
        let budget = SearchBudget {
            draws: num("draws", g("draws"))?,
            climb_steps: num("climb-steps", g("climb-steps"))?,
            deep_draws: num("deep-draws", g("deep-draws"))?,
            deep_climb_steps: num("deep-climb-steps", g("deep-climb-steps"))?,
            refine_iters: num("refine-iters", g("refine-iters"))?,
            repair_draws: num("repair-draws", g("repair-draws"))?,
            repair_climb_steps: num("repair-climb-steps", g("repair-climb-steps"))?,
            scale_max_exponent: num("scale-max-exponent", g("scale-max-exponent"))?,
            chunk: num("chunk", g("chunk"))?,
            seed,
        };
        budget.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let rank_tol: f64 = num("rank-tol", g("rank-tol"))?;
        if !(rank_tol > 0.0 && rank_tol < 1.0) {
            return Err(CliError::Config("`rank-tol` must lie in (0, 1)".into()));
        }
        let train = TrainConfig {
            mode,
            stage_floor: num("stage-floor", g("stage-floor"))?,
            variant,
            budget,
            rank_tol,
            exec,
        };

        let rule = match g("cluster") {
            "radius" => ClusterRule::Radius,
            "count" => ClusterRule::Count(num("clusters", g("clusters"))?),
            other => return Err(CliError::Config(format!("`cluster`: unknown rule `{other}`"))),
        };
        let neighborhood = NeighborhoodConfig {
            gamma: num("gamma", g("gamma"))?,
            rule,
            seed,
        };
        neighborhood.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let bp = BpConfig {
            learning_rate: num("learning-rate", g("learning-rate"))?,
            epochs: num("epochs", g("epochs"))?,
            seed,
            mode,
        };
        bp.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let tolerances = ExtremumTolerances {
            fd_step: num("fd-step", g("fd-step"))?,
            eig_tol: num("eig-tol", g("eig-tol"))?,
        };
        if !(tolerances.fd_step > 0.0 && tolerances.eig_tol >= 0.0) {
            return Err(CliError::Config("`fd-step` must be > 0 and `eig-tol` >= 0".into()));
        }

        let layers = present(g("layers")).map(|v| list::<usize>("layers", v)).transpose()?;
        if let Some(l) = &layers {
            if l.is_empty() || l.contains(&0) {
                return Err(CliError::Config("`layers` needs positive widths".into()));
            }
        }
        let probes = if g("probes") == "none" {
            Vec::new()
        } else {
            g("probes")
                .split(',')
                .map(|p| match p.trim() {
                    "vanishing" => Ok(Probe::Vanishing),
                    "noise" => Ok(Probe::Noise),
                    "capacity" => Ok(Probe::Capacity),
                    other => Err(CliError::Config(format!("`probes`: unknown probe `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?
        };
        let noise: f64 = num("noise", g("noise"))?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(CliError::Config("`noise` must be finite and >= 0".into()));
        }
        let census_cells: usize = num("census-cells", g("census-cells"))?;
        let grid_resolution: usize = num("grid-resolution", g("grid-resolution"))?;
        if grid_resolution < 2 {
            return Err(CliError::Config("`grid-resolution` must be >= 2".into()));
        }

        Ok(RunConfig {
            data: present(g("data")).map(PathBuf::from),
            layers,
            inputs: present(g("inputs")).map(|v| num("inputs", v)).transpose()?,
            samples: present(g("samples")).map(|v| num("samples", v)).transpose()?,
            weights: present(g("weights")).map(PathBuf::from),
            seed,
            train,
            neighborhood,
            bp,
            tolerances,
            unit: num("unit", g("unit"))?,
            census_lower: list("census-lower", g("census-lower"))?,
            census_upper: list("census-upper", g("census-upper"))?,
            census_cells,
            grid_lower: list("grid-lower", g("grid-lower"))?,
            grid_upper: list("grid-upper", g("grid-upper"))?,
            grid_resolution,
            capacity_max: num("capacity-max", g("capacity-max"))?,
            probes,
            noise,
            output_dir: PathBuf::from(g("output-dir")),
            echo,
        })
    }

    /// Architecture for input dimension `m`.
    pub fn spec(&self, m: usize) -> Result<NetSpec> {
        let layers = self
            .layers
            .clone()
            .ok_or_else(|| CliError::Config("`layers` is required".into()))?;
        let spec = NetSpec::new(m, layers).map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.stage_floor == 0 || self.train.stage_floor > spec.depth() {
            return Err(CliError::Config(format!(
                "`stage-floor` {} outside 1..={}",
                self.train.stage_floor,
                spec.depth()
            )));
        }
        Ok(spec)
    }

    /// Scalar or per-axis box corner expanded to `m` axes.
    pub fn corner(values: &[f64], m: usize, key: &str) -> Result<Vec<f64>> {
        match values.len() {
            1 => Ok(vec![values[0]; m]),
            n if n == m => Ok(values.to_vec()),
            n => Err(CliError::Config(format!("`{key}` has {n} values for {m} axes"))),
        }
    }

    pub fn census_grid(&self, m: usize) -> Result<CensusGrid> {
        let lower = Self::corner(&self.census_lower, m, "census-lower")?;
        let upper = Self::corner(&self.census_upper, m, "census-upper")?;
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| a.partial_cmp(b) != Some(std::cmp::Ordering::Less))
        {
            return Err(CliError::Config("census box needs lower < upper on every axis".into()));
        }
        Ok(CensusGrid {
            lower,
            upper,
            cells: self.census_cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_resolve_and_echo_every_key() {
        let c = RunConfig::resolve(&[], None).unwrap();
        assert_eq!(c.echo.len(), KEYS.len());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.output_dir, PathBuf::from("."));
        assert!(c.layers.is_none());
    }

    #[test]
    fn later_entries_override_and_env_fills_output() {
        let c = RunConfig::resolve(
            &pairs(&[("draws", "10"), ("draws", "20"), ("layers", "5,2")]),
            Some("/tmp/out".into()),
        )
        .unwrap();
        assert_eq!(c.train.budget.draws, 20);
        assert_eq!(c.layers, Some(vec![5, 2]));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for (k, v) in [
            ("mode", "fuzzy"),
            ("delta", "0.7"),
            ("draws", "-1"),
            ("layers", "3,0"),
            ("gamma", "0"),
        ] {
            let e = RunConfig::resolve(&pairs(&[(k, v)]), None).unwrap_err();
            assert!(matches!(e, CliError::Config(_)), "{k}={v}: {e}");
        }
    }

    #[test]
    fn config_file_names_the_bad_line() {
        let e = parse_config_text("seed = 1\n\nbogus = 2\n", Path::new("run.cfg")).unwrap_err();
        assert!(e.to_string().contains("run.cfg:3"), "{e}");
        let ok = parse_config_text("# comment\nlayers = 5,2  # trailing\n", Path::new("x")).unwrap();
        assert_eq!(ok, pairs(&[("layers", "5,2")]));
    }
}
