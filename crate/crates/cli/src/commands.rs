use std::path::Path;
use std::time::Instant;

use clap::Args;
use nalgebra::DMatrix;
use serde::Serialize;
use trackalloc::policy::{optimize, Policy};
use trackalloc::riccati::{estimate_critical_lambda, solve_fixed_point, MareProblem};
use trackalloc::schedule::compile_schedule;
use trackalloc::sim::{compare_patterns, run_seeds, sweep_lambda, MetricsLog};

use crate::config::Experiment;
use crate::output::{flag, num, Manifest, OutDir};
use crate::CliError;

pub struct Context {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

/// Settling tolerance reported in `policy.json`.
const SETTLE_TOL: f64 = 0.01;

pub fn experiment(ctx: &Context, command: &str, config: &Path, out: &Path) -> Result<(), CliError> {
    let exp = Experiment::load(config)?.with_seed(ctx.seed);
    exp.check()?;
    execute(command, &exp, out, ctx.threads).map(|_| ())
}

fn execute(command: &str, exp: &Experiment, out: &Path, threads: Option<usize>) -> Result<Manifest, CliError> {
    let start = Instant::now();
    let mut dir = OutDir::create(out)?;
    let seeds = match command {
        "simulate" => simulate(exp, &mut dir)?,
        "optimize" => optimize_cmd(exp, &mut dir)?,
        "compare-patterns" => patterns(exp, &mut dir)?,
        "sweep-lambda" => sweep(exp, &mut dir)?,
        other => return Err(CliError::Config(format!("unknown command {other:?}"))),
    };
    let manifest = Manifest::new(command, exp, seeds, threads, start.elapsed().as_secs_f64())?;
    dir.finish(manifest)
}

pub fn replay(ctx: &Context, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let recorded = Manifest::load(manifest)?;
    let fresh = execute(&recorded.command, &recorded.config, out, ctx.threads)?;
    if fresh.outputs != recorded.outputs {
        let differing: Vec<&str> = fresh
            .outputs
            .iter()
            .filter(|f| !recorded.outputs.contains(f))
            .map(|f| f.path.as_str())
            .collect();
        return Err(CliError::Mismatch(format!("replay outputs differ from the manifest: {}", differing.join(", "))));
    }
    println!("reproduced {} output file(s)", fresh.outputs.len());
    Ok(())
}

fn simulate(exp: &Experiment, dir: &mut OutDir) -> Result<Vec<u64>, CliError> {
    let seeds = exp.seeds();
    let logs = run_seeds(&exp.scenario, &seeds)?;
    let metrics = logs.iter().flat_map(|log| {
        log.records.iter().map(move |r| {
            vec![
                log.seed.to_string(),
                r.k.to_string(),
                r.target.to_string(),
                flag(r.beta).into(),
                flag(r.gamma).into(),
                num(r.trace_p),
                num(r.mse_contrib),
                num(log.mse[r.k - 1]),
                num(r.pos_sq_error),
            ]
        })
    });
    dir.csv(
        "metrics.csv",
        &["seed", "k", "target", "beta", "gamma", "trace_P", "mse_contrib", "mse_agg", "pos_sq_error"],
        metrics,
    )?;
    dir.csv(
        "summary.csv",
        &["seed", "target", "mean_mse", "mean_position_mse", "accumulated_trace", "attempts", "successes"],
        summary_rows(&logs, exp.scenario.targets.len()),
    )?;
    let policies: Vec<Vec<String>> = logs
        .iter()
        .filter_map(|log| log.policy.as_ref().map(|p| (log.seed, p)))
        .flat_map(|(seed, p)| {
            p.alpha()
                .iter()
                .enumerate()
                .map(move |(i, a)| vec![seed.to_string(), i.to_string(), num(*a)])
                .collect::<Vec<_>>()
        })
        .collect();
    if !policies.is_empty() {
        dir.csv("policy.csv", &["seed", "target", "alpha"], policies)?;
    }
    Ok(seeds)
}

#[derive(Clone, Copy, Default)]
struct Tally {
    mse: f64,
    position_mse: f64,
    trace: f64,
    attempts: usize,
    successes: usize,
}

impl Tally {
    fn row(&self, seed: &str, target: &str) -> Vec<String> {
        vec![
            seed.into(),
            target.into(),
            num(self.mse),
            num(self.position_mse),
            num(self.trace),
            self.attempts.to_string(),
            self.successes.to_string(),
        ]
    }
}

/// Per-target rows use the target's own squared error; `all` rows use the
/// aggregate `Σ_i |x_i − x̂_i|² / N`. The final `mean` rows average over
/// seeds.
fn summary_rows(logs: &[MetricsLog], n: usize) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut mean = vec![Tally::default(); n + 1];
    for log in logs {
        let h = log.horizon() as f64;
        let mut tallies = vec![Tally::default(); n];
        for r in &log.records {
            let t = &mut tallies[r.target];
            t.mse += r.sq_error / h;
            t.position_mse += r.pos_sq_error / h;
            t.trace += r.trace_p;
            t.attempts += r.beta as usize;
            t.successes += r.gamma as usize;
        }
        let s = log.summary;
        tallies.push(Tally {
            mse: s.mean_mse,
            position_mse: s.mean_position_mse,
            trace: s.accumulated_trace,
            attempts: s.attempts,
            successes: s.successes,
        });
        for (i, t) in tallies.iter().enumerate() {
            let target = if i < n { i.to_string() } else { "all".into() };
            rows.push(t.row(&log.seed.to_string(), &target));
            let m = &mut mean[i];
            m.mse += t.mse / logs.len() as f64;
            m.position_mse += t.position_mse / logs.len() as f64;
            m.trace += t.trace / logs.len() as f64;
            m.attempts += t.attempts;
            m.successes += t.successes;
        }
    }
    for (i, t) in mean.iter().enumerate() {
        let target = if i < n { i.to_string() } else { "all".into() };
        rows.push(t.row("mean", &target));
    }
    rows
}

#[derive(Serialize)]
struct PolicyReport<'a> {
    alpha: &'a [f64],
    budget: f64,
    converged: bool,
    iterations: usize,
    settling_iteration: Option<usize>,
    settling_tolerance: f64,
}

fn optimize_cmd(exp: &Experiment, dir: &mut OutDir) -> Result<Vec<u64>, CliError> {
    let (policy, log) = optimize(&exp.scenario, &exp.scenario.pso)?;
    let rows = log.records.iter().flat_map(|rec| {
        rec.alpha.iter().enumerate().flat_map(move |(p, alpha)| {
            alpha.iter().enumerate().map(move |(i, a)| {
                vec![rec.iteration.to_string(), p.to_string(), i.to_string(), num(*a), num(rec.fitness[p])]
            })
        })
    });
    dir.csv("alpha_trajectory.csv", &["iteration", "particle", "target", "alpha", "fitness"], rows)?;
    let best = log.records.iter().flat_map(|rec| {
        rec.best_alpha.iter().enumerate().map(move |(i, a)| {
            vec![
                rec.iteration.to_string(),
                i.to_string(),
                num(*a),
                num(rec.best_alpha_score),
                num(rec.best_fitness),
                rec.best_particle.to_string(),
            ]
        })
    });
    dir.csv(
        "best_trajectory.csv",
        &["iteration", "target", "alpha", "price", "best_fitness", "best_particle"],
        best,
    )?;
    dir.json(
        "policy.json",
        &PolicyReport {
            alpha: policy.alpha(),
            budget: policy.budget(),
            converged: log.converged,
            iterations: log.records.len(),
            settling_iteration: log.settling_iteration(SETTLE_TOL),
            settling_tolerance: SETTLE_TOL,
        },
    )?;
    Ok(vec![exp.scenario.seed])
}

fn patterns(exp: &Experiment, dir: &mut OutDir) -> Result<Vec<u64>, CliError> {
    let study = exp
        .patterns
        .as_ref()
        .ok_or_else(|| CliError::Config("compare-patterns needs a \"patterns\" section".into()))?;
    let table = compare_patterns(&exp.scenario, study.alpha, &study.variants, study.replicates)?;
    let rows = table.iter().map(|s| {
        vec![
            s.variant.name().into(),
            num(study.alpha),
            num(s.mean),
            num(s.std_dev),
            num(s.min),
            num(s.max),
            s.replicates.to_string(),
        ]
    });
    dir.csv("patterns.csv", &["variant", "alpha", "mean", "std_dev", "min", "max", "replicates"], rows)?;
    Ok(vec![exp.scenario.seed])
}

fn sweep(exp: &Experiment, dir: &mut OutDir) -> Result<Vec<u64>, CliError> {
    if exp.lambdas.is_empty() {
        return Err(CliError::Config("sweep-lambda needs a non-empty \"lambdas\" list".into()));
    }
    let rows = sweep_lambda(&exp.scenario, &exp.lambdas, exp.replicates)?;
    dir.csv(
        "sweep.csv",
        &["lambda", "mean_mse", "mean_position_mse", "seeds"],
        rows.iter()
            .map(|r| vec![num(r.lambda), num(r.mean_mse), num(r.mean_position_mse), r.seeds.len().to_string()]),
    )?;
    let per_seed = rows.iter().flat_map(|r| {
        r.seeds.iter().enumerate().map(move |(j, s)| {
            vec![num(r.lambda), s.to_string(), num(r.per_seed_mse[j]), num(r.per_seed_position_mse[j])]
        })
    });
    dir.csv("sweep_seeds.csv", &["lambda", "seed", "mse", "position_mse"], per_seed)?;
    Ok(exp.seeds())
}

#[derive(Debug, Args)]
pub struct MareArgs {
    /// Scalar shorthand `a,c,q,r`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["a", "c", "q", "r"])]
    scalar: Option<Vec<f64>>,
    /// Row-major JSON matrix, e.g. `[[1,0.1],[0,1]]`.
    #[arg(long)]
    a: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    r: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Starting iterate: a JSON matrix, or a number meaning that multiple of
    /// the identity. Identity when absent.
    #[arg(long)]
    p0: Option<String>,
    /// Also bracket the critical probability to this width.
    #[arg(long)]
    bracket: Option<f64>,
}

fn parse_matrix(name: &str, text: &str) -> Result<DMatrix<f64>, CliError> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("--{name}: expected a JSON matrix: {e}")))?;
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("--{name}: matrix must be non-empty and rectangular")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct MareReport {
    lambda: f64,
    converged: bool,
    diverged: bool,
    iterations: usize,
    residual: f64,
    p_star: Vec<Vec<f64>>,
    trace: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bracket: Option<BracketReport>,
}

#[derive(Serialize)]
struct BracketReport {
    lower: f64,
    upper: f64,
    width: f64,
}

pub fn mare(args: &MareArgs) -> Result<(), CliError> {
    let problem = match &args.scalar {
        Some(v) if v.len() != 4 => {
            return Err(CliError::Config(format!("--scalar takes four values a,c,q,r, got {}", v.len())))
        }
        Some(v) => MareProblem::scalar(v[0], v[1], v[2], v[3], args.lambda)?,
        None => {
            let get = |name: &str, v: &Option<String>| {
                v.as_deref()
                    .ok_or_else(|| CliError::Config(format!("--{name} is required without --scalar")))
                    .and_then(|t| parse_matrix(name, t))
            };
            MareProblem::new(
                get("a", &args.a)?,
                get("c", &args.c)?,
                get("q", &args.q)?,
                get("r", &args.r)?,
                args.lambda,
            )?
        }
    };
    let n = problem.dim();
    let p0 = match args.p0.as_deref() {
        None => DMatrix::identity(n, n),
        Some(t) => match t.trim().parse::<f64>() {
            Ok(s) => DMatrix::identity(n, n) * s,
            Err(_) => parse_matrix("p0", t)?,
        },
    };
    if p0.shape() != (n, n) {
        return Err(CliError::Config(format!("--p0 must be {n}x{n}")));
    }
    let sol = solve_fixed_point(&problem, &p0, args.tol, args.max_iter);
    let bracket = match args.bracket {
        Some(tol) => {
            let b = estimate_critical_lambda(&problem.a, &problem.c, &problem.q, &problem.r, tol)?;
            Some(BracketReport {
                lower: b.lower,
                upper: b.upper,
                width: b.width(),
            })
        }
        None => None,
    };
    let report = MareReport {
        lambda: args.lambda,
        converged: sol.converged,
        diverged: sol.diverged,
        iterations: sol.iterations,
        residual: sol.residual,
        trace: sol.p_star.trace(),
        p_star: matrix_rows(&sol.p_star),
        bracket,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Comma-separated attempt probabilities.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<f64>,
    #[arg(long)]
    cycle_len: usize,
    /// Instruments per slot; the smallest count covering `Σα` when absent.
    #[arg(long)]
    instruments: Option<usize>,
}

pub fn schedule(args: &ScheduleArgs) -> Result<(), CliError> {
    let total: f64 = args.alpha.iter().sum();
    let m = args.instruments.unwrap_or_else(|| (total - 1e-9).ceil().max(1.0) as usize);
    let policy = Policy::new(args.alpha.clone(), m as f64)?;
    let s = compile_schedule(&policy, args.cycle_len)?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    let mut header = vec!["target".to_string()];
    header.extend((0..s.cycle_len()).map(|t| format!("slot_{t}")));
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for (i, row) in s.rows().iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|b| flag(*b).to_string()));
        w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}
