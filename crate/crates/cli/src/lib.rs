//! Run specifications and the subcommands behind the `contnet` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use contnet::arch::{Arch, EvalCounter, ModelConfig};
use contnet::basis::{conditioning_report, BasisFamily, BasisKind, TimeGrid};
use contnet::data::{
    load_csv, split, synth_surrogate, DataSidecar, Dataset, Orientation, SplitSpec, Splits,
    SurrogateKind,
};
use contnet::gradients::{block_errors, finite_diff_params, model_gradient, model_loss, BlockError};
use contnet::integrators::StepControl;
use contnet::model::Model;
use contnet::optim::{evaluate, init_params, train_with, RunMetrics, TrainConfig};
use contnet::Error;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "CONTNET_OUT_DIR";

/// Where the samples come from.
///
/// Written as `synth:<smooth|ode>:<n>:<m>:<samples>[:<seed>]` or
/// `csv:<features>:<targets>:<rows|cols>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    Synth {
        kind: SurrogateKind,
        n_features: usize,
        m_targets: usize,
        n_samples: usize,
        seed: Option<u64>,
    },
    Csv {
        features: PathBuf,
        targets: PathBuf,
        orientation: Orientation,
    },
}

impl FromStr for DataSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["synth", kind, n, m, samples, rest @ ..] if rest.len() <= 1 => {
                let num = |v: &str, what: &str| -> anyhow::Result<usize> {
                    match v.parse() {
                        Ok(0) => bail!("{what} must be positive in data descriptor"),
                        Ok(n) => Ok(n),
                        Err(_) => bail!("bad {what} `{v}` in data descriptor"),
                    }
                };
                Ok(DataSource::Synth {
                    kind: kind.parse()?,
                    n_features: num(n, "feature count")?,
                    m_targets: num(m, "target count")?,
                    n_samples: num(samples, "sample count")?,
                    seed: rest
                        .first()
                        .map(|v| v.parse().with_context(|| format!("bad seed `{v}`")))
                        .transpose()?,
                })
            }
            ["csv", features, targets, orient] => Ok(DataSource::Csv {
                features: PathBuf::from(features),
                targets: PathBuf::from(targets),
                orientation: match *orient {
                    "rows" => Orientation::SamplesAsRows,
                    "cols" => Orientation::SamplesAsCols,
                    o => bail!("orientation must be `rows` or `cols`, got `{o}`"),
                },
            }),
            _ => bail!(
                "data descriptor `{s}` is neither synth:<smooth|ode>:<n>:<m>:<samples>[:<seed>] \
                 nor csv:<features>:<targets>:<rows|cols>"
            ),
        }
    }
}

impl TryFrom<String> for DataSource {
    type Error = anyhow::Error;
    fn try_from(s: String) -> anyhow::Result<Self> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        d.to_string()
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synth {
                kind,
                n_features,
                m_targets,
                n_samples,
                seed,
            } => {
                let kind = match kind {
                    SurrogateKind::Smooth => "smooth",
                    SurrogateKind::Ode => "ode",
                };
                write!(f, "synth:{kind}:{n_features}:{m_targets}:{n_samples}")?;
                if let Some(s) = seed {
                    write!(f, ":{s}")?;
                }
                Ok(())
            }
            DataSource::Csv {
                features,
                targets,
                orientation,
            } => {
                let o = match orientation {
                    Orientation::SamplesAsRows => "rows",
                    Orientation::SamplesAsCols => "cols",
                };
                write!(f, "csv:{}:{}:{o}", features.display(), targets.display())
            }
        }
    }
}

impl DataSource {
    /// Loads the full dataset. Synthetic tasks without an explicit seed use
    /// `default_seed`.
    pub fn load(&self, default_seed: u64) -> anyhow::Result<Dataset> {
        Ok(match self {
            DataSource::Synth {
                kind,
                n_features,
                m_targets,
                n_samples,
                seed,
            } => synth_surrogate(
                *kind,
                *n_features,
                *m_targets,
                *n_samples,
                seed.unwrap_or(default_seed),
            )?,
            DataSource::Csv {
                features,
                targets,
                orientation,
            } => load_csv(features, targets, *orientation)?,
        })
    }

    fn with_seed(&self, default_seed: u64) -> DataSource {
        match self.clone() {
            DataSource::Synth {
                kind,
                n_features,
                m_targets,
                n_samples,
                seed,
            } => DataSource::Synth {
                kind,
                n_features,
                m_targets,
                n_samples,
                seed: Some(seed.unwrap_or(default_seed)),
            },
            csv => csv,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// `n_features` and `m_targets` may be left at 0 to take them from the data.
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunSpec {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).context("invalid run specification")
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        let mut m = self.model.clone();
        m.n_features = m.n_features.max(1);
        m.m_targets = m.m_targets.max(1);
        m.validate()?;
        Ok(())
    }

    /// Output directory: explicit, else `$CONTNET_OUT_DIR/<name>`, else
    /// `runs/<name>`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!(
            "{}-{}-n{}-s{}",
            self.model.arch, self.model.basis, self.model.n_steps, self.train.seed
        ))
    }

    /// Validates, loads and splits the data, and fills in data-derived
    /// fields so the returned spec is self-contained.
    pub fn resolve(&self) -> anyhow::Result<(RunSpec, Dataset, Splits)> {
        self.validate()?;
        let mut spec = self.clone();
        spec.data = self.data.with_seed(self.train.seed);
        let ds = spec.data.load(self.train.seed)?;
        for (field, have, want) in [
            ("n_features", spec.model.n_features, ds.n_features()),
            ("m_targets", spec.model.m_targets, ds.m_targets()),
        ] {
            if have != 0 && have != want {
                bail!("model.{field} = {have} but the data provides {want}");
            }
        }
        spec.model.n_features = ds.n_features();
        spec.model.m_targets = ds.m_targets();
        spec.model.validate()?;
        spec.out_dir = Some(self.resolved_out_dir());
        let splits = split(&ds, &spec.split)?;
        Ok((spec, ds, splits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: String,
    pub epochs_run: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub total_rhs_evals: u64,
    pub wall_ms: u64,
    pub n_trainable: usize,
    pub error: Option<String>,
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub spec: RunSpec,
    pub metrics: RunMetrics,
    pub summary: Summary,
    pub model: Option<Model>,
}

impl TrainOutcome {
    pub fn succeeded(&self) -> bool {
        self.summary.status == "ok"
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Trains according to `spec` and writes `config.json`, `data.json`,
/// `metrics.csv`, `model.ckpt` and `summary.json` into the output directory.
///
/// Invalid specifications fail before any file is written. Divergence and
/// integrator failures still produce artifacts; the outcome then reports a
/// non-`ok` status and `summary.json` carries the diagnostics.
pub fn cmd_train(spec: &RunSpec) -> anyhow::Result<TrainOutcome> {
    let (spec, ds, splits) = spec.resolve()?;
    let out = spec.out_dir.clone().expect("resolved");
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write_json(&out.join("config.json"), &spec)?;
    DataSidecar {
        source: spec.data.to_string(),
        orientation: match &spec.data {
            DataSource::Csv { orientation, .. } => Some(*orientation),
            DataSource::Synth { .. } => None,
        },
        n_features: ds.n_features(),
        m_targets: ds.m_targets(),
        n_samples: ds.n_samples(),
        split: spec.split.clone(),
        split_sizes: [
            splits.train.n_samples(),
            splits.val.n_samples(),
            splits.test.n_samples(),
        ],
    }
    .write(&out.join("data.json"))?;

    let model = Model::new(spec.model.clone(), init_params(&spec.model, spec.train.seed))?;
    let val = (splits.val.n_samples() > 0).then_some(&splits.val);
    let mut metrics = RunMetrics::default();
    let result = train_with(model, &splits.train, val, &spec.train, |row| {
        metrics.rows.push(row.clone())
    });
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;

    let last = metrics.last();
    let mut summary = Summary {
        status: "ok".into(),
        epochs_run: metrics.rows.len(),
        final_train_loss: last.map(|r| r.train_loss),
        final_val_loss: last.and_then(|r| r.val_loss),
        test_loss: None,
        total_rhs_evals: last.map_or(0, |r| r.cum_rhs_evals),
        wall_ms: last.map_or(0, |r| r.wall_ms),
        n_trainable: spec.model.n_trainable(),
        error: None,
    };
    let model = match result {
        Ok((model, _)) => {
            if splits.test.n_samples() > 0 {
                summary.test_loss = Some(evaluate(&model, &splits.test, &spec.train.ode)?);
            }
            Some(model)
        }
        Err(Error::Diverged { epoch, last_good }) => {
            summary.status = "diverged".into();
            summary.error = Some(format!(
                "non-finite loss during epoch {epoch}; checkpoint holds the last finite parameters"
            ));
            Some(*last_good)
        }
        Err(e @ (Error::NonConvergence { .. } | Error::StepTooSmall { .. })) => {
            summary.status = "integrator_failure".into();
            summary.error = Some(e.to_string());
            None
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(m) = &model {
        m.save(&out.join("model.ckpt"))?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(TrainOutcome {
        spec,
        metrics,
        summary,
        model,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Degree,
    Basis,
    Arch,
    Depth,
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "degree" => Self::Degree,
            "basis" => Self::Basis,
            "arch" => Self::Arch,
            "depth" => Self::Depth,
            _ => bail!("unknown sweep axis `{s}` (degree, basis, arch, depth)"),
        })
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Degree => "degree",
            Self::Basis => "basis",
            Self::Arch => "arch",
            Self::Depth => "depth",
        })
    }
}

/// How the depth axis is interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DepthMode {
    /// Values are horizons `T`; `n_steps` stays fixed.
    #[default]
    Horizon,
    /// Values are step counts; `dt` stays fixed, so `T` grows with them.
    Steps,
}

/// One configuration of a sweep, derived from the base spec.
pub fn sweep_variant(
    base: &RunSpec,
    axis: SweepAxis,
    value: &str,
    mode: DepthMode,
) -> anyhow::Result<RunSpec> {
    let mut spec = base.clone();
    let m = &mut spec.model;
    match axis {
        SweepAxis::Degree => {
            let d: usize = value.parse().with_context(|| format!("bad degree `{value}`"))?;
            if !m.basis.is_polynomial() {
                bail!("degree sweep needs a polynomial basis, base spec has `none`");
            }
            m.basis.degree = d;
        }
        SweepAxis::Basis => {
            let family: BasisFamily = value.parse()?;
            m.basis = BasisKind {
                family,
                degree: m.basis.degree,
            };
        }
        SweepAxis::Arch => m.arch = value.parse()?,
        SweepAxis::Depth => match mode {
            DepthMode::Horizon => {
                m.t_end = value.parse().with_context(|| format!("bad horizon `{value}`"))?;
            }
            DepthMode::Steps => {
                let n: usize = value.parse().with_context(|| format!("bad step count `{value}`"))?;
                let dt = m.t_end / m.n_steps as f64;
                m.n_steps = n;
                m.t_end = dt * n as f64;
            }
        },
    }
    let root = base.resolved_out_dir();
    spec.out_dir = Some(root.join(format!("{axis}-{value}")));
    spec.validate()?;
    Ok(spec)
}

pub const SWEEP_HEADER: &str = "axis,value,arch,basis,degree,n_steps,t_end,status,epochs,\
final_train_loss,final_val_loss,total_rhs_evals,n_trainable,error";

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub spec: Option<RunSpec>,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs every value of `axis` in order and writes `sweep.csv` to the base
/// output directory. A failing run is recorded in its row and the sweep
/// continues.
pub fn cmd_sweep(
    base: &RunSpec,
    axis: SweepAxis,
    values: &[String],
    mode: DepthMode,
) -> anyhow::Result<Vec<SweepRow>> {
    base.validate()?;
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let root = base.resolved_out_dir();
    fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
    let mut rows = Vec::with_capacity(values.len());
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for value in values {
        let row = match sweep_variant(base, axis, value, mode).and_then(|s| cmd_train(&s)) {
            Ok(o) => SweepRow {
                value: value.clone(),
                error: o.summary.error.clone(),
                spec: Some(o.spec),
                summary: Some(o.summary),
            },
            Err(e) => SweepRow {
                value: value.clone(),
                spec: None,
                summary: None,
                error: Some(format!("{e:#}")),
            },
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let (arch, basis, degree, n_steps, t_end) = match &row.spec {
            Some(s) => (
                s.model.arch.to_string(),
                s.model.basis.family.to_string(),
                s.model.basis.degree.to_string(),
                s.model.n_steps.to_string(),
                format!("{:?}", s.model.t_end),
            ),
            None => Default::default(),
        };
        let s = row.summary.as_ref();
        let _ = writeln!(
            csv,
            "{axis},{},{arch},{basis},{degree},{n_steps},{t_end},{},{},{},{},{},{},{}",
            csv_field(value),
            s.map_or("error", |s| s.status.as_str()),
            s.map_or(0, |s| s.epochs_run),
            opt(s.and_then(|s| s.final_train_loss)),
            opt(s.and_then(|s| s.final_val_loss)),
            s.map_or(0, |s| s.total_rhs_evals),
            s.map_or(0, |s| s.n_trainable),
            csv_field(row.error.as_deref().unwrap_or("")),
        );
        rows.push(row);
    }
    fs::write(root.join("sweep.csv"), csv)?;
    Ok(rows)
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error >= self.tolerance)
            .map(|b| b.name)
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>14}  result\n", "block", "max_rel_err");
        for b in &self.blocks {
            let verdict = if b.max_rel_error < self.tolerance { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:<8} {:>14.3e}  {verdict}", b.name, b.max_rel_error);
        }
        let _ = writeln!(s, "tolerance {:e}", self.tolerance);
        s
    }
}

/// Compares analytic gradients with central finite differences on the first
/// `samples` training examples, at the initial parameters for `spec.train.seed`.
///
/// Discrete networks use a step of `1e-5 max(1, |x|)`. The neural ODE uses
/// `1e-4 max(1, |x|)` with its loss evaluated at rtol 1e-12, while the
/// adjoint runs at the tolerances of `spec.train.ode`. `corrupt` negates the
/// named analytic block, for exercising the failure path.
pub fn cmd_gradcheck(
    spec: &RunSpec,
    tolerance: f64,
    samples: usize,
    corrupt: Option<&str>,
) -> anyhow::Result<GradcheckReport> {
    let (spec, _, splits) = spec.resolve()?;
    let model = Model::new(spec.model.clone(), init_params(&spec.model, spec.train.seed))?;
    let n = samples.clamp(1, splits.train.n_samples());
    let y = splits.train.features.columns(0, n).into_owned();
    let c = splits.train.targets.columns(0, n).into_owned();
    let (_, mut grads) = model_gradient(&model, &y, &c, &spec.train.ode, &EvalCounter::new())?;
    let (h, ref_ctrl) = match spec.model.arch {
        Arch::NeuralOde => (1e-4, StepControl::with_tolerances(1e-12, 1e-14)),
        _ => (1e-5, spec.train.ode),
    };
    let mut failure = None;
    let fd = finite_diff_params(
        |p| {
            let m = Model {
                cfg: model.cfg.clone(),
                params: p.clone(),
            };
            model_loss(&m, &y, &c, &ref_ctrl).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &model.params,
        h,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    if let Some(name) = corrupt {
        let names = contnet::model::BLOCK_NAMES;
        let i = names
            .iter()
            .position(|b| *b == name)
            .with_context(|| format!("unknown block `{name}` (one of {names:?})"))?;
        for v in grads.blocks_mut()[i].iter_mut() {
            *v = -*v;
        }
    }
    Ok(GradcheckReport {
        blocks: block_errors(&grads, &fd),
        tolerance,
    })
}

/// `kind,degree,cond2` CSV of basis-matrix condition numbers on `points`
/// equispaced nodes of `[0, 1]`. Rank-deficient rows read `inf`.
pub fn cmd_condition(
    degrees: &[usize],
    points: usize,
    kinds: &[BasisFamily],
) -> anyhow::Result<String> {
    if kinds.contains(&BasisFamily::None) {
        bail!("basis `none` has no basis matrix");
    }
    let grid = TimeGrid::equispaced(0.0, 1.0, points)?;
    let rows = conditioning_report(kinds, degrees, &grid)?;
    let mut s = String::from("kind,degree,cond2\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e}", r.family, r.degree, r.cond2);
    }
    Ok(s)
}

/// Parses `3..10` (inclusive), `3,4,7` or a single value.
pub fn parse_degrees(s: &str) -> anyhow::Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().with_context(|| format!("bad range `{s}`"))?;
        let b: usize = b.trim().parse().with_context(|| format!("bad range `{s}`"))?;
        if a > b {
            bail!("empty degree range `{s}`");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().with_context(|| format!("bad degree `{v}`")))
        .collect()
}
