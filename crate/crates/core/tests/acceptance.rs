//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! test log. `ACCEPTANCE_ONLY=1,7,12` restricts the run to some criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use lvmgp_core::baselines::run_ensemble;
use lvmgp_core::diffcore::{Graph, Mat, ParamGroup};
use lvmgp_core::encoder::{kernel_matrix, latent_kl_correlated, latent_kl_independent};
use lvmgp_core::gp_prior::{self, stream_rng};
use lvmgp_core::objectives::{LvmGp, StepBatch, TrainingData};
use lvmgp_core::operator_decoder::{kernel_weights, KernelGeometry, QuadratureGrid};
use lvmgp_core::problems::{make_problem, PROBLEM_NAMES};
use lvmgp_core::trainer::{train_lvmgp, ExperimentConfig, LvmgpRun};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};

type Outcome = Result<String, String>;

fn config(problem: &str, noise: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        "problem = \"{problem}\"\nnoise = \"{noise}\"\noutput_dir = \"{}\"\n{extra}",
        std::env::temp_dir().join(format!("lvmgp-acceptance-{problem}")).display()
    );
    ExperimentConfig::from_toml(&text).expect("valid acceptance config")
}

/// Trains and reports the wall-clock seconds of training plus evaluation.
fn run(cfg: &ExperimentConfig) -> (LvmgpRun, f64) {
    let start = Instant::now();
    let run = train_lvmgp(cfg, |_| {}).expect("training succeeds");
    (run, start.elapsed().as_secs_f64())
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

fn lambda0(run: &LvmgpRun) -> (f64, f64) {
    (run.metrics.lambda_mean[0], run.metrics.lambda_std[0])
}

fn criterion_1() -> Outcome {
    let (r, secs) = run(&config("nlpoisson1d_inverse", "0.01", ""));
    let (m, s) = lambda0(&r);
    verdict(
        within(m, 0.68, 0.72) && within(s, 2e-3, 5e-2) && secs < 600.0,
        format!("lambda mean {m:.4} in [0.68, 0.72], std {s:.3e} in [2e-3, 5e-2], {secs:.0} s < 600 s"),
    )
}

/// Criteria 2 and 11 share the noise-0.1 run with the default β.
fn nlpoisson_noise_01() -> &'static LvmgpRun {
    use std::sync::OnceLock;
    static RUN: OnceLock<LvmgpRun> = OnceLock::new();
    RUN.get_or_init(|| run(&config("nlpoisson1d_inverse", "0.1", "")).0)
}

fn criterion_2() -> Outcome {
    let (m, _) = lambda0(nlpoisson_noise_01());
    verdict(within(m, 0.62, 0.78), format!("lambda mean {m:.4} in [0.62, 0.78]"))
}

const SCHEDULE_2D: &str = "[schedule]\nsteps = 4000\nphase_split = 2000\ndecay_interval = 400\n";

fn criterion_3() -> Outcome {
    let extra = format!("eval_grid = 21\n{SCHEDULE_2D}");
    let mut ok = true;
    let mut parts = Vec::new();
    for (noise, lo, hi) in [("0.01", 0.97, 1.03), ("0.1", 0.90, 1.08)] {
        let (r, secs) = run(&config("diffreact2d_inverse", noise, &extra));
        let (m, _) = lambda0(&r);
        ok &= within(m, lo, hi) && secs < 1800.0;
        parts.push(format!("noise {noise}: lambda mean {m:.4} in [{lo}, {hi}], {secs:.0} s < 1800 s"));
    }
    verdict(ok, parts.join("; "))
}

const SCHEDULE_6D: &str = "[schedule]\nsteps = 10000\nphase_split = 5000\n";

fn criterion_4() -> Outcome {
    let cfg = config("source6d_inverse", "default", &format!("eval_grid = 21\n{SCHEDULE_6D}"));
    let truth = cfg.spec().unwrap().unknown_true;
    let (r, secs) = run(&cfg);
    let worst = r
        .metrics
        .lambda_mean
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let est: Vec<String> = r.metrics.lambda_mean.iter().map(|v| format!("{v:.4}")).collect();
    verdict(
        worst <= 0.10 && secs < 3600.0,
        format!("centres [{}], worst deviation {worst:.4} <= 0.10, {secs:.0} s < 3600 s", est.join(", ")),
    )
}

fn criterion_5() -> Outcome {
    let (r, _) = run(&config("nlpoisson1d_extrap", "0.01", ""));
    let (m, _) = lambda0(&r);
    let p = &r.prediction;
    let (mut right, mut nr, mut left, mut nl) = (0.0, 0, 0.0, 0);
    for (i, e) in p.u.epistemic.iter().enumerate() {
        if p.points[(i, 0)] > 0.0 {
            right += e;
            nr += 1;
        } else {
            left += e;
            nl += 1;
        }
    }
    let (right, left) = (right / nr as f64, left / nl as f64);
    verdict(
        within(m, 0.67, 0.74) && right > left,
        format!("constant {m:.4} in [0.67, 0.74]; mean epistemic std x > 0 {right:.3e} > x <= 0 {left:.3e}"),
    )
}

fn criterion_6() -> Outcome {
    let cfg = config("nlpoisson1d_inverse", "0.01", "method = \"ensemble\"");
    let spec = cfg.spec().unwrap();
    let data = cfg.dataset().unwrap();
    let r = run_ensemble(&spec, &data, &cfg.ensemble, cfg.seed, &cfg.eval_points().unwrap()).map_err(|e| e.to_string())?;
    let m = r.lambda_mean.expect("inverse problem")[0];
    verdict(
        within(m, 0.68, 0.72),
        format!("ensemble of {} ({} diverged): lambda mean {m:.4} in [0.68, 0.72]", r.seeds.len(), r.diverged.len()),
    )
}

fn criterion_7() -> Outcome {
    let mut worst_all: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut parts = Vec::new();
    for name in PROBLEM_NAMES {
        let start = Instant::now();
        let spec = make_problem(name).unwrap();
        let two_d = spec.dim() == 2;
        let extra = format!(
            "[model]\nlatent_dim = 3\nhidden = [8, 8]\nquadrature = {}\nkl_terms = {}\ndraws = 2\nreg_points = 8\ndeeponet_points = 4\n{}",
            if two_d { 4 } else { 16 },
            if two_d { 4 } else { 8 },
            if spec.num_unknowns() > 1 { "lambda_hidden = [8]" } else { "" },
        );
        let cfg = config(name, &spec.noise_cases[0].label, &extra);
        let mut data = cfg.dataset().unwrap();
        data.u = data.u.truncate(8);
        data.f = data.f.truncate(8);
        data.b = data.b.truncate(8);
        let mcfg = cfg.resolved_model(&data);
        let mut rng = stream_rng(7, 0);
        let model = LvmGp::new(&spec, &mcfg, &mut rng).unwrap();
        let td = TrainingData::new(&model, &data).unwrap();
        let batch = StepBatch::sample(&model, &mut rng);
        let (_, grad) = model.evaluate(&td, &batch, true).unwrap();
        let grad = grad.unwrap();
        let base = model.store.flatten().to_vec();
        let mut worst: f64 = 0.0;
        for _ in 0..4 {
            let dir: Vec<f64> = (0..base.len()).map(|_| rng.sample(StandardNormal)).collect();
            let h = 1e-5;
            let eval = |s: f64| {
                let mut m = model.clone();
                let p: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s * d).collect();
                m.store.unflatten(&p).unwrap();
                -m.evaluate(&td, &batch, false).unwrap().0.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            worst = worst.max((fd - an).abs() / an.abs().max(1e-8));
        }
        let secs = start.elapsed().as_secs_f64();
        worst_all = worst_all.max(worst);
        slowest = slowest.max(secs);
        parts.push(format!("{name} {worst:.1e}"));
    }
    verdict(
        worst_all < 1e-4 && slowest < 60.0,
        format!("max rel error {worst_all:.2e} < 1e-4 ({}), slowest {slowest:.1} s < 60 s", parts.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let mut worst: f64 = 0.0;
    for name in ["poisson1d", "diffreact2d_inverse", "source6d_inverse"] {
        let spec = make_problem(name).unwrap();
        let cfg = config(name, &spec.noise_cases[0].label, "[model]\nlatent_dim = 4\nhidden = [16, 16]\nquadrature = 8\nkl_terms = 8\n");
        let data = cfg.dataset().unwrap();
        let mut rng = stream_rng(8, 0);
        let mut model = LvmGp::new(&spec, &cfg.resolved_model(&data), &mut rng).unwrap();
        // Random parameters: perturb every unbounded mean-group entry.
        let entries: Vec<_> = model.store.entries().to_vec();
        let noise = Normal::new(0.0, 0.2).unwrap();
        for e in entries.iter().filter(|e| e.bounds.is_none() && e.group == ParamGroup::Mean) {
            for v in &mut model.store.flatten_mut()[e.offset..e.offset + e.len()] {
                *v += rng.sample(noise);
            }
        }
        let d = spec.dim();
        let n = 6;
        let x = Mat::from_fn(n, d, |_, k| {
            let (lo, hi) = (spec.lower[k], spec.upper[k]);
            lo + (hi - lo) * (0.15 + 0.7 * rng.random::<f64>())
        });
        let omega = model.sample_omega(1, &mut rng);
        let jets = model.mean_jet(&x, &omega).unwrap();
        let h = 1e-3;
        let centre = model.sample_means(&x, &omega, 1).unwrap();
        let mut fd = vec![0.0; n];
        for k in 0..d {
            let shift = |s: f64| {
                let mut y = x.clone();
                for i in 0..n {
                    y[(i, k)] += s;
                }
                model.sample_means(&y, &omega, 1).unwrap()
            };
            let (p, m) = (shift(h), shift(-h));
            for i in 0..n {
                fd[i] += (p[(0, i)] - 2.0 * centre[(0, i)] + m[(0, i)]) / (h * h);
            }
        }
        let jet: Vec<f64> = jets.iter().map(|j| (0..d).map(|k| j.hess_diag[k][0]).sum()).collect();
        let num: f64 = jet.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den.max(1e-12));
    }
    verdict(worst < 1e-3, format!("max rel error of the jet Laplacian {worst:.2e} < 1e-3"))
}

fn criterion_9() -> Outcome {
    let ell = 0.5;
    let v = gp_prior::validate(ell, 10_000, 64, 0).map_err(|e| e.to_string())?;
    let cov_err = v
        .kernel_rows
        .iter()
        .map(|(_, _, exact, _, emp)| (emp - exact).abs())
        .fold(0.0, f64::max);
    let v = gp_prior::validate(ell, 100_000, 64, 0).map_err(|e| e.to_string())?;
    let d1 = v.variance_rows.iter().find(|r| r.0 == "d1").unwrap();
    let d2 = v.variance_rows.iter().find(|r| r.0 == "d2").unwrap();
    let target = 1.0 / (ell * ell);
    let var_err = (d1.2 - target).abs() / target;
    let agree = ((d1.2 - d1.3).abs() / d1.3).max((d2.2 - d2.3).abs() / d2.3);
    verdict(
        cov_err < 0.05 && var_err < 0.05 && agree < 0.05,
        format!(
            "cov max abs error {cov_err:.4} < 0.05 (1e4 draws); Var(dz0) {:.4} vs 1/l^2 = {target} ({:.2}% < 5%); KL vs joint derivative variances differ {:.2}% < 5%",
            d1.2,
            100.0 * var_err,
            100.0 * agree
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = stream_rng(10, 0);
    let (b, dz) = (5, 3);
    let m = Mat::from_fn(b, dz, |_, _| 0.05 + 0.9 * rng.random::<f64>());
    let zbar = Mat::from_fn(b, dz, |_, _| rng.sample::<f64, _>(StandardNormal));

    let mut g = Graph::new();
    let (mv, zv) = (g.constant(m.clone()), g.constant(zbar.clone()));
    let kl = latent_kl_independent(&mut g, mv, zv);
    let closed = g.scalar_value(kl);

    // Monte-Carlo oracle: E_q[log q(z) - log p(z)], averaged over points.
    let reps = 200;
    let per = 500;
    let mut est = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut acc = 0.0;
        for _ in 0..per {
            for i in 0..b {
                for c in 0..dz {
                    let (mu, sd) = (m[(i, c)] * zbar[(i, c)], 1.0 - m[(i, c)]);
                    let e: f64 = rng.sample(StandardNormal);
                    let z = mu + sd * e;
                    acc += (-0.5 * e * e - sd.ln()) - (-0.5 * z * z);
                }
            }
        }
        est.push(acc / (per * b) as f64);
    }
    let mc = est.iter().sum::<f64>() / reps as f64;
    let se = (est.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt() / (reps as f64).sqrt();
    let mc_ok = (closed - mc).abs() < 3.0 * se;

    // Well-separated points keep cond(K) small; the trace term goes through
    // K⁻¹, so its rounding error scales with the condition number.
    let pts = Mat::from_vec(b, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5]);
    let mut g = Graph::new();
    let lc = g.scalar(0.3);
    let k = kernel_matrix(&mut g, &pts, lc);
    let zero = g.constant(Mat::zeros(b, dz));
    let zv = g.constant(zbar.clone());
    let at_zero = latent_kl_correlated(&mut g, zero, zv, k, gp_prior::JITTER_START, gp_prior::JITTER_MAX).map_err(|e| e.to_string())?;
    let at_zero = g.scalar_value(at_zero);

    let eye = g.constant(Mat::identity(b));
    let mv = g.constant(m.clone());
    let corr_i = latent_kl_correlated(&mut g, mv, zv, eye, 0.0, 0.0).map_err(|e| e.to_string())?;
    let corr_i = g.scalar_value(corr_i);
    let ident = (corr_i - closed).abs();

    verdict(
        mc_ok && at_zero.abs() <= 1e-12 && ident <= 1e-12 * closed.abs().max(1.0),
        format!(
            "independent KL {closed:.5} vs MC {mc:.5} (|diff| {:.2e} < 3 SE = {:.2e}); correlated at m=0: {at_zero:.1e}; correlated(K=I) - mean independent: {ident:.1e}",
            (closed - mc).abs(),
            3.0 * se
        ),
    )
}

fn criterion_11() -> Outcome {
    let (collapsed, _) = run(&config("nlpoisson1d_inverse", "0.1", "[model]\nbeta = 0.0\n"));
    let m_train = collapsed.metrics.mean_m_sensors.unwrap();

    let reg = nlpoisson_noise_01();
    let data = &reg.data;
    let sensors: Vec<f64> = [&data.u, &data.f, &data.b]
        .iter()
        .flat_map(|s| (0..s.len()).map(move |i| s.points[(i, 0)]))
        .collect();
    // Grid points at least 0.01 from every sensor (the f spacing is 0.045).
    let grid = &reg.prediction.points;
    let away: Vec<usize> = (0..grid.rows())
        .filter(|&i| sensors.iter().all(|s| (grid[(i, 0)] - s).abs() >= 0.01))
        .collect();
    let m_away = away.iter().map(|&i| reg.prediction.confidence[i]).sum::<f64>() / away.len() as f64;
    verdict(
        m_train > 0.99 && m_away < 0.95 && !away.is_empty(),
        format!(
            "beta = 0: mean m over training inputs {m_train:.4} > 0.99; beta = 0.01: mean m over {} points away from sensors {m_away:.4} < 0.95",
            away.len()
        ),
    )
}

fn criterion_12() -> Outcome {
    let mut rng = stream_rng(12, 0);
    let grids = [
        QuadratureGrid::new(&[-0.7], &[0.7], &[64]).unwrap(),
        QuadratureGrid::new(&[-1.0, -1.0], &[1.0, 1.0], &[16, 16]).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    let mut tol: f64 = 0.0;
    for t in 0..100 {
        let grid = &grids[t % 2];
        let d = grid.nodes().cols();
        let x = Mat::from_fn(1, d, |_, _| -1.0 + 2.0 * rng.random::<f64>());
        let alpha = 10f64.powf(-1.0 + 4.0 * rng.random::<f64>());
        let geom = KernelGeometry::new(&x, grid);
        let mut g = Graph::inference();
        let a = g.scalar(alpha);
        let w = kernel_weights(&mut g, &geom, a, false);
        let s: f64 = g.value(w.value).sum();
        worst = worst.max((s - 1.0).abs());
        tol = tol.max(grid.len() as f64 * f64::EPSILON);
    }
    verdict(worst <= tol, format!("max |sum w - 1| = {worst:.1e} over 100 pairs (<= Q eps = {tol:.1e})"))
}

fn criterion_13() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = Vec::new();
    for d in &dirs {
        let text = format!(
            "problem = \"nlpoisson1d_inverse\"\nseed = 42\ndeterministic = true\noutput_dir = \"{}\"\n[schedule]\nsteps = 300\nphase_split = 150\n",
            d.path().display()
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        lvmgp_core::trainer::run_experiment(&cfg, |_| {}).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(d.path().join("metrics.csv")).unwrap());
    }
    verdict(
        bytes[0] == bytes[1],
        format!("two seeded runs wrote {} and {} byte metrics files, identical: {}", bytes[0].len(), bytes[1].len(), bytes[0] == bytes[1]),
    )
}

fn criterion_14() -> Outcome {
    let cfg = config("poisson1d", "0.1", "");
    let (r, _) = run(&cfg);
    let c = r.metrics.coverage_u;
    verdict(
        c >= 0.8 && r.prediction.points.rows() == 201,
        format!("95% band covers {:.1}% of exact u on a {}-point grid (>= 80%)", 100.0 * c, r.prediction.points.rows()),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 14] = [
        (1, "nlpoisson1d_inverse noise 0.01", criterion_1),
        (2, "nlpoisson1d_inverse noise 0.1", criterion_2),
        (3, "diffreact2d_inverse", criterion_3),
        (4, "source6d_inverse", criterion_4),
        (5, "nlpoisson1d_extrap", criterion_5),
        (6, "deep ensemble", criterion_6),
        (7, "gradient fidelity", criterion_7),
        (8, "spatial-jet fidelity", criterion_8),
        (9, "GP prior", criterion_9),
        (10, "regulariser identities", criterion_10),
        (11, "collapse ablation", criterion_11),
        (12, "kernel normalisation", criterion_12),
        (13, "determinism", criterion_13),
        (14, "forward coverage", criterion_14),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS criterion {id:>2} ({name}): {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
