//! Experiment configuration, the two-phase training loop, metrics, output
//! files, checkpoints and the benchmark suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{run_ensemble, train_pinn, EnsembleConfig, PinnConfig};
use crate::diffcore::{AdamConfig, AdamState, Mat, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::gp_prior::stream_rng;
use crate::objectives::{LossBreakdown, LvmGp, ModelConfig, Prediction, StepBatch, TrainingData};
use crate::operator_decoder::tensor_grid;
use crate::problems::{generate_dataset, make_problem, Mode, ProblemKind, ProblemSpec, SensorDataset};

const STREAM_MODEL: u64 = 10;
const STREAM_BATCH: u64 = 11;
const STREAM_PREDICT: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lvmgp,
    Pinn,
    Ensemble,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lvmgp => "lvmgp",
            Method::Pinn => "pinn",
            Method::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    /// Steps `[0, phase_split)` train the mean group only.
    pub phase_split: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub log_every: usize,
}

impl Schedule {
    pub fn for_problem(spec: &ProblemSpec) -> Self {
        match spec.kind {
            ProblemKind::Source2d => Self {
                steps: 20_000,
                phase_split: 10_000,
                lr: 1e-3,
                decay: 1.0,
                decay_interval: 1000,
                log_every: 100,
            },
            _ => Self {
                steps: 10_000,
                phase_split: if spec.kind == ProblemKind::Porous1d { 2000 } else { 5000 },
                lr: 1e-3,
                decay: 0.7,
                decay_interval: 1000,
                log_every: 100,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay: self.decay,
            decay_interval: self.decay_interval,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    /// Noise case label of the problem (e.g. `"0.01"`).
    pub noise: String,
    pub method: Method,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Omit wall-clock time from `metrics.csv` so reruns are byte-identical.
    pub deterministic: bool,
    /// Evaluation grid points per dimension.
    pub eval_grid: usize,
    /// Latent draws used for prediction statistics.
    pub predict_draws: usize,
    pub svg: bool,
    pub schedule: Schedule,
    pub model: ModelConfig,
    pub pinn: PinnConfig,
    pub ensemble: EnsembleConfig,
}

impl ExperimentConfig {
    pub fn defaults(problem: &str) -> Result<Self> {
        let spec = make_problem(problem)?;
        let schedule = Schedule::for_problem(&spec);
        let pinn = PinnConfig {
            steps: schedule.steps,
            adam: schedule.adam(),
            ..PinnConfig::default()
        };
        let mut ensemble = EnsembleConfig::default();
        ensemble.member.steps = schedule.steps;
        ensemble.member.adam = schedule.adam();
        Ok(Self {
            problem: problem.to_string(),
            noise: spec.noise_cases[0].label.clone(),
            method: Method::Lvmgp,
            seed: 0,
            output_dir: PathBuf::from(format!("runs/{problem}")),
            deterministic: false,
            eval_grid: if spec.dim() == 1 { 201 } else { 41 },
            predict_draws: 512,
            svg: true,
            schedule,
            model: ModelConfig::for_problem(&spec),
            pinn,
            ensemble,
        })
    }

    /// Parses a TOML document. Keys not given keep the problem's defaults;
    /// unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse()?;
        Self::from_table(user)
    }

    pub fn from_table(user: toml::Table) -> Result<Self> {
        let problem = user
            .get("problem")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::config("config needs a string `problem` key"))?
            .to_string();
        let base = Self::defaults(&problem)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        make_problem(&self.problem)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        spec.noise_case(&self.noise)?;
        if self.method == Method::Lvmgp {
            self.model.validate(&spec)?;
        }
        if self.schedule.phase_split > self.schedule.steps {
            return Err(Error::config("phase_split exceeds the number of steps"));
        }
        if self.predict_draws < 2 {
            return Err(Error::config("predict_draws must be at least 2"));
        }
        if self.eval_grid < 2 {
            return Err(Error::config("eval_grid must be at least 2"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<SensorDataset> {
        let spec = self.spec()?;
        let case = spec.noise_case(&self.noise)?;
        Ok(generate_dataset(&spec, self.seed, &case))
    }

    /// Model configuration with noise initialisations resolved against the
    /// dataset.
    pub fn resolved_model(&self, data: &SensorDataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.resolve_for(data);
        m
    }

    pub fn eval_points(&self) -> Result<Mat> {
        let spec = self.spec()?;
        Ok(tensor_grid(&spec.lower, &spec.upper, &vec![self.eval_grid; spec.dim()]))
    }
}

/// Recursive table merge; `over` wins.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub phase: u8,
    pub lc: f64,
    pub loss: LossBreakdown,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,phase,lr,lc,data_u,data_f,data_b,data_lambda,reg,beta,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{:.10e},{}", self.step, self.phase, self.lr, self.lc, self.loss.csv_row())
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TraceRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Failed run: the error and the parameters of the last finite step.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub last_good: ParamStore,
}

/// Runs the two-phase schedule on `model`. `on_log` sees every logged row.
pub fn train_model(
    model: &mut LvmGp,
    data: &TrainingData,
    schedule: &Schedule,
    seed: u64,
    mut on_log: impl FnMut(&TraceRow),
) -> std::result::Result<Vec<TraceRow>, Box<Aborted>> {
    let mut rng = stream_rng(seed, STREAM_BATCH);
    let mut adam = AdamState::new(schedule.adam(), model.store.num_scalars());
    let mut trace = Vec::new();
    let log_every = schedule.log_every.max(1);
    let abort = |model: &LvmGp, error: Error| {
        Box::new(Aborted {
            error,
            last_good: model.store.clone(),
        })
    };
    for step in 0..=schedule.steps {
        let batch = StepBatch::sample(model, &mut rng);
        let last = step == schedule.steps;
        let (loss, grad) = match model.evaluate(data, &batch, !last) {
            Ok(v) => v,
            Err(e) => return Err(abort(model, e)),
        };
        if let Some(term) = loss.non_finite_term() {
            return Err(abort(model, Error::Training { step, term: term.into() }));
        }
        let phase = if step < schedule.phase_split { 1 } else { 2 };
        if step % log_every == 0 || last {
            let row = TraceRow {
                step,
                lr: adam.current_lr(),
                phase,
                lc: model.lc(),
                loss,
            };
            on_log(&row);
            trace.push(row);
        }
        if last {
            break;
        }
        let grad = grad.expect("requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(abort(model, Error::Training { step, term: "gradient".into() }));
        }
        let frozen: &[ParamGroup] = if phase == 1 { &[ParamGroup::Std] } else { &[] };
        adam.step(&mut model.store, &grad, frozen);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsRecord {
    pub problem: String,
    pub method: String,
    pub noise: String,
    pub seed: u64,
    pub steps: usize,
    pub rel_l2_u: f64,
    pub rel_l2_f: Option<f64>,
    /// Fraction of exact `u` values inside the 95% predictive band.
    pub coverage_u: f64,
    pub lambda_names: Vec<String>,
    pub lambda_mean: Vec<f64>,
    pub lambda_std: Vec<f64>,
    /// Mean confidence `m` over all sensor locations.
    pub mean_m_sensors: Option<f64>,
    /// Mean confidence `m` over the evaluation grid.
    pub mean_m_grid: Option<f64>,
    pub lc_final: Option<f64>,
    pub final_total: Option<f64>,
    pub wall_clock_s: Option<f64>,
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        let o = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        row("problem", self.problem.clone());
        row("method", self.method.clone());
        row("noise", self.noise.clone());
        row("seed", self.seed.to_string());
        row("steps", self.steps.to_string());
        row("rel_l2_u", format!("{:.10e}", self.rel_l2_u));
        row("rel_l2_f", o(self.rel_l2_f));
        row("coverage_u", format!("{:.10e}", self.coverage_u));
        for (i, n) in self.lambda_names.iter().enumerate() {
            row(&format!("lambda_mean.{n}"), format!("{:.10e}", self.lambda_mean[i]));
            row(&format!("lambda_std.{n}"), format!("{:.10e}", self.lambda_std[i]));
        }
        row("mean_m_sensors", o(self.mean_m_sensors));
        row("mean_m_grid", o(self.mean_m_grid));
        row("lc_final", o(self.lc_final));
        row("final_total", o(self.final_total));
        row("wall_clock_s", o(self.wall_clock_s));
        s
    }
}

pub fn rel_l2(pred: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(exact).map(|(p, e)| (p - e).powi(2)).sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Fraction of `exact` inside `mean ± 1.96 std`.
pub fn coverage(mean: &[f64], std: &[f64], exact: &[f64]) -> f64 {
    let inside = mean
        .iter()
        .zip(std)
        .zip(exact)
        .filter(|((m, s), e)| (*e - *m).abs() <= 1.96 * *s)
        .count();
    inside as f64 / exact.len().max(1) as f64
}

fn all_sensor_points(data: &SensorDataset) -> Mat {
    Mat::vstack(&[&data.u.points, &data.f.points, &data.b.points])
}

/// Everything a finished LVM-GP run produced.
#[derive(Clone, Debug)]
pub struct LvmgpRun {
    pub model: LvmGp,
    pub data: SensorDataset,
    pub trace: Vec<TraceRow>,
    pub prediction: Prediction,
    pub metrics: MetricsRecord,
}

/// Trains LVM-GP per `config` and evaluates it; writes nothing.
pub fn train_lvmgp(config: &ExperimentConfig, on_log: impl FnMut(&TraceRow)) -> Result<LvmgpRun> {
    config.validate()?;
    let spec = config.spec()?;
    let data = config.dataset()?;
    let mcfg = config.resolved_model(&data);
    let mut rng = stream_rng(config.seed, STREAM_MODEL);
    let mut model = LvmGp::new(&spec, &mcfg, &mut rng)?;
    let td = TrainingData::new(&model, &data)?;
    let start = Instant::now();
    let trace = match train_model(&mut model, &td, &config.schedule, config.seed, on_log) {
        Ok(t) => t,
        Err(a) => {
            model.store = a.last_good;
            if let Err(e) = write_checkpoint(&config.output_dir.join("checkpoint.bin"), config, &model) {
                return Err(Error::Training {
                    step: 0,
                    term: format!("{} (checkpoint not written: {e})", a.error),
                });
            }
            return Err(a.error);
        }
    };
    let (prediction, metrics) = evaluate_model(config, &model, &data)?;
    let mut metrics = metrics;
    metrics.final_total = trace.last().map(|r| r.loss.total);
    metrics.wall_clock_s = (!config.deterministic).then(|| start.elapsed().as_secs_f64());
    Ok(LvmgpRun {
        model,
        data,
        trace,
        prediction,
        metrics,
    })
}

/// Prediction statistics on the evaluation grid and the derived metrics.
pub fn evaluate_model(config: &ExperimentConfig, model: &LvmGp, data: &SensorDataset) -> Result<(Prediction, MetricsRecord)> {
    let spec = &model.spec;
    let x = config.eval_points()?;
    let mut rng = stream_rng(config.seed, STREAM_PREDICT);
    let pred = model.predict_stats(&x, config.predict_draws, &mut rng)?;
    let exact_u: Vec<f64> = (0..x.rows()).map(|i| spec.exact_u(x.row(i))).collect();
    let exact_f: Vec<f64> = (0..x.rows()).map(|i| spec.exact_f(x.row(i))).collect();
    let (lm, ls) = pred
        .lambda
        .as_ref()
        .map(|l| (l.mean.clone(), l.std.clone()))
        .unwrap_or_default();
    let metrics = MetricsRecord {
        problem: spec.name.clone(),
        method: Method::Lvmgp.name().into(),
        noise: config.noise.clone(),
        seed: config.seed,
        steps: config.schedule.steps,
        rel_l2_u: rel_l2(&pred.u.mean, &exact_u),
        rel_l2_f: Some(rel_l2(&pred.f.mean, &exact_f)),
        coverage_u: coverage(&pred.u.mean, &pred.u.total, &exact_u),
        lambda_names: if lm.is_empty() { vec![] } else { spec.unknown_names.clone() },
        lambda_mean: lm,
        lambda_std: ls,
        mean_m_sensors: Some(model.mean_confidence(&all_sensor_points(data))),
        mean_m_grid: Some(model.mean_confidence(&x)),
        lc_final: Some(model.lc()),
        final_total: None,
        wall_clock_s: None,
    };
    Ok((pred, metrics))
}

fn field_csv(points: &Mat, mean: &[f64], epi: &[f64], total: &[f64]) -> String {
    let d = points.cols();
    let mut s = String::new();
    for k in 0..d {
        let _ = write!(s, "x{k},");
    }
    s.push_str("mean,epistemic_std,total_std\n");
    for i in 0..points.rows() {
        for v in points.row(i) {
            let _ = write!(s, "{v:.10e},");
        }
        let _ = writeln!(s, "{:.10e},{:.10e},{:.10e}", mean[i], epi[i], total[i]);
    }
    s
}

fn lambda_csv(names: &[String], mean: &[f64], std: &[f64]) -> String {
    let mut s = String::from("name,mean,std\n");
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(s, "{n},{:.10e},{:.10e}", mean[i], std[i]);
    }
    s
}

/// Writes `prediction_<field>.csv` files (and SVG plots in 1D).
pub fn write_prediction(dir: &Path, spec: &ProblemSpec, pred: &Prediction, data: Option<&SensorDataset>, svg: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("prediction_u.csv"),
        field_csv(&pred.points, &pred.u.mean, &pred.u.epistemic, &pred.u.total),
    )?;
    fs::write(
        dir.join("prediction_f.csv"),
        field_csv(&pred.points, &pred.f.mean, &pred.f.epistemic, &pred.f.total),
    )?;
    let mut m = String::new();
    for k in 0..pred.points.cols() {
        let _ = write!(m, "x{k},");
    }
    m.push_str("confidence\n");
    for (i, c) in pred.confidence.iter().enumerate() {
        for v in pred.points.row(i) {
            let _ = write!(m, "{v:.10e},");
        }
        let _ = writeln!(m, "{c:.10e}");
    }
    fs::write(dir.join("prediction_m.csv"), m)?;
    if let Some(l) = &pred.lambda {
        fs::write(dir.join("prediction_lambda.csv"), lambda_csv(&spec.unknown_names, &l.mean, &l.std))?;
    }
    if svg && spec.dim() == 1 {
        let xs = pred.points.col(0);
        let exact_u: Vec<f64> = xs.iter().map(|&x| spec.exact_u(&[x])).collect();
        let exact_f: Vec<f64> = xs.iter().map(|&x| spec.exact_f(&[x])).collect();
        let sens = |s: &crate::problems::SensorSet| -> Vec<(f64, f64)> {
            (0..s.len()).map(|i| (s.points[(i, 0)], s.values[i])).collect()
        };
        let (su, sf) = match data {
            Some(d) => {
                let mut u = sens(&d.u);
                u.extend(sens(&d.b));
                (u, sens(&d.f))
            }
            None => (vec![], vec![]),
        };
        fs::write(
            dir.join("prediction_u.svg"),
            crate::plot::band_svg("u", &xs, &pred.u.mean, &pred.u.total, &exact_u, &su),
        )?;
        fs::write(
            dir.join("prediction_f.svg"),
            crate::plot::band_svg("f", &xs, &pred.f.mean, &pred.f.total, &exact_f, &sf),
        )?;
    }
    Ok(())
}

/// Paths and metrics of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub metrics: MetricsRecord,
}

/// Runs one experiment and writes its outputs into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, on_log: impl FnMut(&TraceRow)) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let spec = config.spec()?;
    let metrics = match config.method {
        Method::Lvmgp => {
            let run = train_lvmgp(config, on_log)?;
            fs::write(dir.join("loss_trace.csv"), trace_csv(&run.trace))?;
            write_prediction(&dir, &spec, &run.prediction, Some(&run.data), config.svg)?;
            write_checkpoint(&dir.join("checkpoint.bin"), config, &run.model)?;
            run.metrics
        }
        Method::Pinn | Method::Ensemble => run_baseline(config, &spec, &dir)?,
    };
    fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
    Ok(RunSummary { output_dir: dir, metrics })
}

fn run_baseline(config: &ExperimentConfig, spec: &ProblemSpec, dir: &Path) -> Result<MetricsRecord> {
    let data = config.dataset()?;
    let x = config.eval_points()?;
    let exact_u: Vec<f64> = (0..x.rows()).map(|i| spec.exact_u(x.row(i))).collect();
    let start = Instant::now();
    let (mean, std, lam_mean, lam_std) = match config.method {
        Method::Pinn => {
            let m = train_pinn(spec, &data, &config.pinn, config.seed)?;
            let p = m.predict(&x);
            let lam = m.lambda_values().unwrap_or_default();
            let n = p.len();
            let k = lam.len();
            (p, vec![0.0; n], lam, vec![0.0; k])
        }
        _ => {
            let run = run_ensemble(spec, &data, &config.ensemble, config.seed, &x)?;
            (
                run.mean,
                run.std,
                run.lambda_mean.unwrap_or_default(),
                run.lambda_std.unwrap_or_default(),
            )
        }
    };
    fs::write(dir.join("prediction_u.csv"), field_csv(&x, &mean, &std, &std))?;
    if !lam_mean.is_empty() {
        fs::write(dir.join("prediction_lambda.csv"), lambda_csv(&spec.unknown_names, &lam_mean, &lam_std))?;
    }
    Ok(MetricsRecord {
        problem: spec.name.clone(),
        method: config.method.name().into(),
        noise: config.noise.clone(),
        seed: config.seed,
        steps: match config.method {
            Method::Pinn => config.pinn.steps,
            _ => config.ensemble.member.steps,
        },
        rel_l2_u: rel_l2(&mean, &exact_u),
        rel_l2_f: None,
        coverage_u: coverage(&mean, &std, &exact_u),
        lambda_names: if lam_mean.is_empty() { vec![] } else { spec.unknown_names.clone() },
        lambda_mean: lam_mean,
        lambda_std: lam_std,
        mean_m_sensors: None,
        mean_m_grid: None,
        lc_final: None,
        final_total: None,
        wall_clock_s: (!config.deterministic).then(|| start.elapsed().as_secs_f64()),
    })
}

// Checkpoint layout (little endian):
//   magic  b"LVMGPCK\0"
//   u32    version
//   u32    length of the embedded config, then that many bytes of TOML
//   u32    number of arrays, then per array:
//            u16 name length, name bytes (UTF-8), u8 group tag,
//            u32 rows, u32 cols, rows*cols f64 values (row-major)
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LVMGPCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `model`'s parameters with `config` (noise initialisations
/// resolved) embedded.
pub fn write_checkpoint(path: &Path, config: &ExperimentConfig, model: &LvmGp) -> Result<()> {
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    let text = cfg.to_toml()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let entries = model.store.entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.group.tag());
        buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
        for v in &model.store.flatten()[e.offset..e.offset + e.len()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Rebuilds a trained model from a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(ExperimentConfig, LvmGp)> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(bad("bad magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let text = std::str::from_utf8(r.take(n).ok_or_else(|| bad("truncated config"))?).map_err(|_| bad("config is not UTF-8"))?;
    let config = ExperimentConfig::from_toml(text)?;
    let spec = config.spec()?;
    let mut rng = stream_rng(config.seed, STREAM_MODEL);
    let mut model = LvmGp::new(&spec, &config.model, &mut rng)?;
    let count = r.u32().ok_or_else(|| bad("truncated table"))? as usize;
    if count != model.store.entries().len() {
        return Err(bad(&format!(
            "{count} arrays stored, model has {}",
            model.store.entries().len()
        )));
    }
    for _ in 0..count {
        let len = r.u16().ok_or_else(|| bad("truncated table"))? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let tag = r.take(1).ok_or_else(|| bad("truncated table"))?[0];
        let rows = r.u32().ok_or_else(|| bad("truncated table"))? as usize;
        let cols = r.u32().ok_or_else(|| bad("truncated table"))? as usize;
        let id = model.store.id(&name).ok_or_else(|| bad(&format!("unknown array `{name}`")))?;
        let e = model.store.entry(id);
        if (e.rows, e.cols) != (rows, cols) || Some(e.group) != ParamGroup::from_tag(tag) {
            return Err(bad(&format!("array `{name}` does not match the model")));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            vals.push(r.f64().ok_or_else(|| bad("truncated data"))?);
        }
        model.store.set(id, &Mat::from_vec(rows, cols, vals));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, model))
}

/// Prediction statistics from a checkpoint on an `n`-per-dimension grid.
pub fn predict_checkpoint(path: &Path, grid: usize, draws: usize) -> Result<(ExperimentConfig, Prediction)> {
    if grid == 0 {
        return Err(Error::config("grid needs at least one point"));
    }
    let (config, model) = read_checkpoint(path)?;
    let spec = &model.spec;
    let x = if grid == 1 {
        Mat::row_vector(spec.lower.iter().zip(&spec.upper).map(|(a, b)| 0.5 * (a + b)).collect())
    } else {
        tensor_grid(&spec.lower, &spec.upper, &vec![grid; spec.dim()])
    };
    let mut rng = stream_rng(config.seed, STREAM_PREDICT);
    let pred = model.predict_stats(&x, draws, &mut rng)?;
    Ok((config, pred))
}

/// One entry of a benchmark suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteRun {
    pub problem: String,
    /// Noise case labels; all of the problem's cases when empty.
    #[serde(default)]
    pub noise: Vec<String>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    /// Experiment keys applied on top of the problem defaults.
    #[serde(default)]
    pub overrides: toml::Table,
}

fn all_methods() -> Vec<Method> {
    vec![Method::Lvmgp, Method::Pinn, Method::Ensemble]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub runs: Vec<SuiteRun>,
}

impl SuiteConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Published reference `(mean, std)` per component for a method.
pub fn reference_values(problem: &str, noise: &str, method: &str) -> Option<Vec<(f64, f64)>> {
    let v = match (problem, noise, method) {
        ("nlpoisson1d_inverse", "0.01", "lvmgp") => vec![(0.6976, 9.816e-3)],
        ("nlpoisson1d_inverse", "0.1", "lvmgp") => vec![(0.6965, 6.954e-2)],
        ("nlpoisson1d_inverse", "0.01", "hmc") => vec![(0.6967, 4.225e-3)],
        ("nlpoisson1d_inverse", "0.1", "hmc") => vec![(0.6787, 4.166e-2)],
        ("nlpoisson1d_inverse", "0.01", "ensemble") => vec![(0.6966, 2.493e-4)],
        ("nlpoisson1d_inverse", "0.1", "ensemble") => vec![(0.6959, 3.691e-2)],
        ("nlpoisson1d_extrap", "0.01", "lvmgp") => vec![(0.7040, 1.361e-2)],
        ("diffreact2d_inverse", "0.01", "lvmgp") => vec![(1.0003, 4.58e-3)],
        ("diffreact2d_inverse", "0.1", "lvmgp") => vec![(0.9916, 5.70e-3)],
        ("diffreact2d_inverse", "0.01", "hmc") => vec![(1.0005, 5.75e-3)],
        ("diffreact2d_inverse", "0.1", "hmc") => vec![(0.9781, 4.98e-2)],
        ("diffreact2d_inverse", "0.01", "ensemble") => vec![(1.0047, 4.12e-3)],
        ("diffreact2d_inverse", "0.1", "ensemble") => vec![(0.9302, 2.60e-2)],
        ("source6d_inverse", _, "lvmgp") => [
            (0.2927, 2.79e-2),
            (0.3022, 6.25e-2),
            (0.7433, 2.87e-2),
            (0.7542, 2.36e-2),
            (0.2065, 5.49e-2),
            (0.7569, 6.34e-2),
        ]
        .to_vec(),
        ("source6d_inverse", _, "hmc") => [
            (0.3014, 3.08e-3),
            (0.2883, 3.45e-3),
            (0.7473, 3.51e-3),
            (0.7496, 2.52e-3),
            (0.2268, 18.97e-3),
            (0.6519, 11.47e-3),
        ]
        .to_vec(),
        _ => return None,
    };
    Some(v)
}

pub const SUMMARY_HEADER: &str =
    "problem,noise,method,quantity,mean,std,rel_l2_u,ref_mean,ref_std,hmc_mean,hmc_std,status";

/// Runs every (problem, noise, method) combination of the suite; failures
/// are recorded and the suite continues. Returns the summary CSV text,
/// which is also written to `summary.csv`.
pub fn run_benchmark(suite: &SuiteConfig, mut on_run: impl FnMut(&str)) -> Result<String> {
    fs::create_dir_all(&suite.output_dir)?;
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for run in &suite.runs {
        let spec = make_problem(&run.problem)?;
        let cases: Vec<String> = if run.noise.is_empty() {
            spec.noise_cases.iter().map(|c| c.label.clone()).collect()
        } else {
            run.noise.clone()
        };
        for noise in &cases {
            for &method in &run.methods {
                let tag = format!("{}_{}_{}", run.problem, noise, method.name());
                on_run(&tag);
                let result = (|| -> Result<MetricsRecord> {
                    let mut table = run.overrides.clone();
                    table.insert("problem".into(), run.problem.clone().into());
                    table.insert("noise".into(), noise.clone().into());
                    table.insert("method".into(), method.name().into());
                    table.insert("seed".into(), toml::Value::Integer(suite.seed as i64));
                    table.insert(
                        "output_dir".into(),
                        suite.output_dir.join(&tag).to_string_lossy().into_owned().into(),
                    );
                    let cfg = ExperimentConfig::from_table(table)?;
                    Ok(run_experiment(&cfg, |_| {})?.metrics)
                })();
                summary_rows(&mut out, &spec, noise, method, result);
            }
        }
    }
    fs::write(suite.output_dir.join("summary.csv"), &out)?;
    Ok(out)
}

fn summary_rows(out: &mut String, spec: &ProblemSpec, noise: &str, method: Method, result: Result<MetricsRecord>) {
    let refs = reference_values(&spec.name, noise, method.name());
    let hmc = reference_values(&spec.name, noise, "hmc");
    let r = |v: &Option<Vec<(f64, f64)>>, i: usize| -> (String, String) {
        v.as_ref()
            .and_then(|v| v.get(i))
            .map(|(m, s)| (m.to_string(), s.to_string()))
            .unwrap_or_default()
    };
    let quantities: Vec<String> = if spec.mode == Mode::Forward {
        vec!["u".into()]
    } else {
        spec.unknown_names.clone()
    };
    for (i, q) in quantities.iter().enumerate() {
        let (rm, rs) = r(&refs, i);
        let (hm, hs) = r(&hmc, i);
        let (mean, std, l2, status) = match &result {
            Ok(m) => (
                m.lambda_mean.get(i).map(|v| format!("{v:.6}")).unwrap_or_default(),
                m.lambda_std.get(i).map(|v| format!("{v:.4e}")).unwrap_or_default(),
                format!("{:.4e}", m.rel_l2_u),
                "ok".to_string(),
            ),
            Err(e) => (String::new(), String::new(), String::new(), format!("failed: {}", e.to_string().replace(',', ";"))),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            spec.name,
            noise,
            method.name(),
            q,
            mean,
            std,
            l2,
            rm,
            rs,
            hm,
            hs,
            status
        );
    }
}
