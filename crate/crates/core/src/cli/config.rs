//! Run configuration: a TOML file merged with command-line overrides and
//! validated against the chosen command.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensitivity::{alpha_grid, default_alpha_grid};
use crate::smm::Link;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Fit,
    Sweep,
    Simulate,
    Calibrate,
    Relevance,
}

impl CommandKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommandKind::Fit => "fit",
            CommandKind::Sweep => "sweep",
            CommandKind::Simulate => "simulate",
            CommandKind::Calibrate => "calibrate",
            CommandKind::Relevance => "relevance",
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config(
                "output_format",
                format!("unknown format `{other}` (expected csv or json)"),
            )),
        }
    }
}

/// Names of the CSV columns holding each variable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub y: Option<String>,
    pub x: Option<String>,
    pub z: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// An α grid given as explicit values, as `center ± half_width`, or as
/// `start..=stop`, each with a step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub values: Option<Vec<f64>>,
    pub center: Option<f64>,
    pub half_width: Option<f64>,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub step: Option<f64>,
}

impl GridConfig {
    fn is_empty(&self) -> bool {
        *self == GridConfig::default()
    }

    /// Resolves the grid; `fallback_center` is used when nothing is set.
    pub fn resolve(&self, fallback_center: Option<f64>) -> Result<Vec<f64>> {
        let field = |name: &str| format!("grid.{name}");
        if let Some(values) = &self.values {
            if let Some(name) = [
                ("center", self.center.is_some()),
                ("half_width", self.half_width.is_some()),
                ("start", self.start.is_some()),
                ("stop", self.stop.is_some()),
                ("step", self.step.is_some()),
            ]
            .iter()
            .find_map(|(n, set)| set.then_some(*n))
            {
                return Err(Error::config(
                    field(name),
                    "not allowed together with grid.values",
                ));
            }
            if values.is_empty() {
                return Err(Error::config(field("values"), "must not be empty"));
            }
            if !values.windows(2).all(|w| w[0] < w[1]) || !values.iter().all(|v| v.is_finite()) {
                return Err(Error::config(
                    field("values"),
                    "must be finite and strictly increasing",
                ));
            }
            return Ok(values.clone());
        }
        let by_center = self.center.is_some() || self.half_width.is_some();
        let by_range = self.start.is_some() || self.stop.is_some();
        if by_center && by_range {
            let name = if self.start.is_some() {
                "start"
            } else {
                "stop"
            };
            return Err(Error::config(
                field(name),
                "use either center/half_width or start/stop",
            ));
        }
        let wrap = |e: Error, name: &str| match e {
            Error::InvalidArgument(msg) => Error::config(field(name), msg),
            other => other,
        };
        if by_center {
            let center = self
                .center
                .ok_or_else(|| Error::config(field("center"), "missing"))?;
            let half = self
                .half_width
                .ok_or_else(|| Error::config(field("half_width"), "missing"))?;
            let step = self
                .step
                .ok_or_else(|| Error::config(field("step"), "missing"))?;
            return alpha_grid(center, half, step).map_err(|e| wrap(e, "step"));
        }
        if by_range {
            let start = self
                .start
                .ok_or_else(|| Error::config(field("start"), "missing"))?;
            let stop = self
                .stop
                .ok_or_else(|| Error::config(field("stop"), "missing"))?;
            let step = self
                .step
                .ok_or_else(|| Error::config(field("step"), "missing"))?;
            if !(stop >= start) {
                return Err(Error::config(field("stop"), "must not be below grid.start"));
            }
            let center = 0.5 * (start + stop);
            return alpha_grid(center, 0.5 * (stop - start), step).map_err(|e| wrap(e, "step"));
        }
        if self.step.is_some() {
            return Err(Error::config(
                field("step"),
                "given without center/half_width or start/stop",
            ));
        }
        match fallback_center {
            Some(c) => Ok(default_alpha_grid(c)),
            None => Err(Error::config("grid", "missing")),
        }
    }
}

/// Simulation and calibration targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub psi: Option<f64>,
    pub alpha_star: Option<f64>,
    pub p_z: Option<f64>,
    pub p_x: Option<f64>,
    pub p_y: Option<f64>,
    pub sigma: Option<f64>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub master_seed: Option<u64>,
}

/// The configuration file as written, before validation. Every field is
/// optional here; [`RawConfig::validate`] enforces what each command needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<CommandKind>,
    pub data_path: Option<PathBuf>,
    pub columns: Option<ColumnMap>,
    pub standardize_exposure: Option<bool>,
    pub link: Option<String>,
    pub alpha: Option<f64>,
    pub grid: Option<GridConfig>,
    pub simulation: Option<SimulationConfig>,
    pub output_path: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
}

impl RawConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            // toml reports unknown keys as "unknown field `x`, expected ..."
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| {
                    message.starts_with("unknown field") || message.starts_with("missing field")
                })
                .unwrap_or("config")
                .to_string();
            Error::config(field, message)
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn simulation_mut(&mut self) -> &mut SimulationConfig {
        self.simulation
            .get_or_insert_with(SimulationConfig::default)
    }

    fn grid_mut(&mut self) -> &mut GridConfig {
        self.grid.get_or_insert_with(GridConfig::default)
    }

    fn columns_mut(&mut self) -> &mut ColumnMap {
        self.columns.get_or_insert_with(ColumnMap::default)
    }

    pub fn validate(&self) -> Result<RunConfig> {
        let command = self
            .command
            .ok_or_else(|| Error::config("command", "missing"))?;
        let present = |name: &str| -> bool {
            match name {
                "data_path" => self.data_path.is_some(),
                "columns" => self.columns.is_some(),
                "standardize_exposure" => self.standardize_exposure.is_some(),
                "link" => self.link.is_some(),
                "alpha" => self.alpha.is_some(),
                "grid" => self.grid.as_ref().is_some_and(|g| !g.is_empty()),
                "simulation" => self.simulation.is_some(),
                _ => false,
            }
        };
        let allowed: &[&str] = match command {
            CommandKind::Fit => &[
                "data_path",
                "columns",
                "standardize_exposure",
                "link",
                "alpha",
            ],
            CommandKind::Sweep => &[
                "data_path",
                "columns",
                "standardize_exposure",
                "link",
                "grid",
            ],
            CommandKind::Simulate => &["link", "grid", "simulation"],
            CommandKind::Calibrate => &["link", "simulation"],
            CommandKind::Relevance => &["data_path", "columns", "standardize_exposure"],
        };
        for name in [
            "data_path",
            "columns",
            "standardize_exposure",
            "link",
            "alpha",
            "grid",
            "simulation",
        ] {
            if present(name) && !allowed.contains(&name) {
                return Err(Error::config(
                    name,
                    format!("not used by the `{command}` command"),
                ));
            }
        }

        let link = || -> Result<Link> {
            self.link
                .as_deref()
                .ok_or_else(|| Error::config("link", "missing"))?
                .parse()
        };
        let data = || -> Result<DataSource> {
            let path = self
                .data_path
                .clone()
                .ok_or_else(|| Error::config("data_path", "missing"))?;
            let cols = self.columns.clone().unwrap_or_default();
            let get = |v: Option<String>, name: &str| {
                v.ok_or_else(|| Error::config(format!("columns.{name}"), "missing"))
            };
            Ok(DataSource {
                path,
                columns: ResolvedColumns {
                    y: if command == CommandKind::Relevance {
                        cols.y
                    } else {
                        Some(get(cols.y, "y")?)
                    },
                    x: get(cols.x, "x")?,
                    z: get(cols.z, "z")?,
                    covariates: cols.covariates,
                },
                standardize_exposure: self.standardize_exposure.unwrap_or(false),
            })
        };

        let task = match command {
            CommandKind::Fit => Task::Fit {
                data: data()?,
                link: link()?,
                alpha: self
                    .alpha
                    .ok_or_else(|| Error::config("alpha", "missing"))?,
            },
            CommandKind::Sweep => Task::Sweep {
                data: data()?,
                link: link()?,
                grid: self.grid.clone().unwrap_or_default().resolve(None)?,
            },
            CommandKind::Simulate => {
                let link = link()?;
                let targets = self.targets(command, link)?;
                let sim = self.simulation.clone().unwrap_or_default();
                let positive = |v: Option<usize>, name: &str| -> Result<usize> {
                    match v {
                        Some(0) => Err(Error::config(
                            format!("simulation.{name}"),
                            "must be at least 1",
                        )),
                        Some(k) => Ok(k),
                        None => Err(Error::config(format!("simulation.{name}"), "missing")),
                    }
                };
                Task::Simulate {
                    grid: self
                        .grid
                        .clone()
                        .unwrap_or_default()
                        .resolve(Some(targets.alpha_star))?,
                    targets,
                    n: positive(sim.n, "n")?,
                    m: positive(sim.m, "m")?,
                    master_seed: sim
                        .master_seed
                        .ok_or_else(|| Error::config("simulation.master_seed", "missing"))?,
                }
            }
            CommandKind::Calibrate => {
                let link = link()?;
                let targets = self.targets(command, link)?;
                Task::Calibrate { targets }
            }
            CommandKind::Relevance => Task::Relevance { data: data()? },
        };

        Ok(RunConfig {
            command,
            task,
            output_path: self.output_path.clone(),
            output_format: self.output_format.unwrap_or_else(|| {
                match self
                    .output_path
                    .as_ref()
                    .and_then(|p| p.extension())
                    .and_then(|e| e.to_str())
                {
                    Some("json") => OutputFormat::Json,
                    _ => OutputFormat::Csv,
                }
            }),
            echo: self.clone(),
        })
    }

    fn targets(&self, command: CommandKind, link: Link) -> Result<Targets> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| Error::config("simulation", "missing"))?;
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::config(format!("simulation.{name}"), "missing"))
        };
        let reject = |set: bool, name: &str, why: &str| -> Result<()> {
            if set {
                Err(Error::config(format!("simulation.{name}"), why.to_string()))
            } else {
                Ok(())
            }
        };
        if command == CommandKind::Calibrate {
            reject(sim.n.is_some(), "n", "not used by the `calibrate` command")?;
            reject(sim.m.is_some(), "m", "not used by the `calibrate` command")?;
            reject(
                sim.master_seed.is_some(),
                "master_seed",
                "not used by the `calibrate` command",
            )?;
        }
        let dgp = match link {
            Link::Identity => {
                reject(sim.p_y.is_some(), "p_y", "only used with the logit link")?;
                let sigma = sim.sigma.unwrap_or(1.0);
                if !(sigma > 0.0) {
                    return Err(Error::config("simulation.sigma", "must be positive"));
                }
                DgpKind::Linear { sigma }
            }
            Link::Logit => {
                reject(
                    sim.sigma.is_some(),
                    "sigma",
                    "only used with the identity link",
                )?;
                DgpKind::Logistic {
                    p_y: need(sim.p_y, "p_y")?,
                }
            }
            Link::Log => {
                return Err(Error::config(
                    "link",
                    "no calibrated data-generating process exists for the log link",
                ))
            }
        };
        Ok(Targets {
            psi: need(sim.psi, "psi")?,
            alpha_star: need(sim.alpha_star, "alpha_star")?,
            p_z: need(sim.p_z, "p_z")?,
            p_x: need(sim.p_x, "p_x")?,
            dgp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedColumns {
    /// Optional only for `relevance`, which does not use the outcome.
    pub y: Option<String>,
    pub x: String,
    pub z: String,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub columns: ResolvedColumns,
    pub standardize_exposure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DgpKind {
    Linear { sigma: f64 },
    Logistic { p_y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Targets {
    pub psi: f64,
    pub alpha_star: f64,
    pub p_z: f64,
    pub p_x: f64,
    pub dgp: DgpKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Task {
    Fit {
        data: DataSource,
        link: Link,
        alpha: f64,
    },
    Sweep {
        data: DataSource,
        link: Link,
        grid: Vec<f64>,
    },
    Simulate {
        targets: Targets,
        n: usize,
        m: usize,
        master_seed: u64,
        grid: Vec<f64>,
    },
    Calibrate {
        targets: Targets,
    },
    Relevance {
        data: DataSource,
    },
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub task: Task,
    /// `None` writes to standard output.
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
    /// The configuration as given, echoed into JSON reports.
    pub echo: RawConfig,
}

/// Per-field overrides collected from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_path: Option<PathBuf>,
    pub y: Option<String>,
    pub x: Option<String>,
    pub z: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub standardize_exposure: bool,
    pub link: Option<String>,
    pub alpha: Option<f64>,
    pub grid_values: Option<Vec<f64>>,
    pub grid_center: Option<f64>,
    pub grid_half_width: Option<f64>,
    pub grid_start: Option<f64>,
    pub grid_stop: Option<f64>,
    pub grid_step: Option<f64>,
    pub psi: Option<f64>,
    pub alpha_star: Option<f64>,
    pub p_z: Option<f64>,
    pub p_x: Option<f64>,
    pub p_y: Option<f64>,
    pub sigma: Option<f64>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub master_seed: Option<u64>,
    pub output_path: Option<PathBuf>,
    pub output_format: Option<String>,
}

impl RawConfig {
    pub fn apply(&mut self, o: Overrides) -> Result<()> {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = Some(v);
                }
            };
        }
        set!(o.data_path, self.data_path);
        if o.y.is_some() || o.x.is_some() || o.z.is_some() || o.covariates.is_some() {
            let cols = self.columns_mut();
            set!(o.y, cols.y);
            set!(o.x, cols.x);
            set!(o.z, cols.z);
            if let Some(c) = o.covariates {
                cols.covariates = c;
            }
        }
        if o.standardize_exposure {
            self.standardize_exposure = Some(true);
        }
        set!(o.link, self.link);
        set!(o.alpha, self.alpha);
        if o.grid_values.is_some()
            || o.grid_center.is_some()
            || o.grid_half_width.is_some()
            || o.grid_start.is_some()
            || o.grid_stop.is_some()
            || o.grid_step.is_some()
        {
            let g = self.grid_mut();
            set!(o.grid_values, g.values);
            set!(o.grid_center, g.center);
            set!(o.grid_half_width, g.half_width);
            set!(o.grid_start, g.start);
            set!(o.grid_stop, g.stop);
            set!(o.grid_step, g.step);
        }
        if o.psi.is_some()
            || o.alpha_star.is_some()
            || o.p_z.is_some()
            || o.p_x.is_some()
            || o.p_y.is_some()
            || o.sigma.is_some()
            || o.n.is_some()
            || o.m.is_some()
            || o.master_seed.is_some()
        {
            let s = self.simulation_mut();
            set!(o.psi, s.psi);
            set!(o.alpha_star, s.alpha_star);
            set!(o.p_z, s.p_z);
            set!(o.p_x, s.p_x);
            set!(o.p_y, s.p_y);
            set!(o.sigma, s.sigma);
            set!(o.n, s.n);
            set!(o.m, s.m);
            set!(o.master_seed, s.master_seed);
        }
        set!(o.output_path, self.output_path);
        if let Some(f) = o.output_format {
            self.output_format = Some(f.parse()?);
        }
        Ok(())
    }
}
