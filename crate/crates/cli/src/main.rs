mod args;
mod run;

use std::fs;
use std::process::ExitCode;

use args::{Cli, Cmd, FitArgs, MethodArg, SelectArgs, SnrArgs, SolverArgs};
use clap::Parser;
use parafac2::direct::DirectFitOptions;
use parafac2::vb::{GenerativeConfig, VbOptions};
use parafac2::Error;
use run::{DataSource, ExperimentConfig, FitConfig, FitMethod, GenerateConfig, RunCommand, SnrStudyConfig};

const THREADS_ENV: &str = "PARAFAC2_THREADS";

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn solver_options(s: &SolverArgs, seed: u64) -> (DirectFitOptions, VbOptions) {
    let direct = DirectFitOptions { max_iters: s.max_iters, rel_tol_r2: s.direct_tol, restarts: s.restarts, seed };
    let vb = VbOptions {
        max_iters: s.max_iters,
        rel_tol_elbo: s.vb_tol,
        restarts: s.restarts,
        ard_delay_iters: s.tau_delay,
        seed,
        ..VbOptions::default()
    };
    (direct, vb)
}

/// `lo:hi`, `lo:step:hi` or `a,b,c`.
fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("`{s}` in grid `{text}`: {e}"));
    if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(num).collect::<Result<_, _>>()?;
        let (lo, step, hi) = match parts[..] {
            [lo, hi] => (lo, 1.0, hi),
            [lo, step, hi] => (lo, step, hi),
            _ => return Err(format!("grid `{text}` must be lo:hi or lo:step:hi")),
        };
        if !(step > 0.0) || hi < lo || !lo.is_finite() || !hi.is_finite() {
            return Err(format!("grid `{text}` needs lo <= hi and a positive step"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| lo + i as f64 * step).collect())
    } else {
        text.split(',').map(num).collect()
    }
}

fn parse_orders(text: &str) -> Result<Vec<usize>, String> {
    parse_grid(text)?
        .into_iter()
        .map(|v| if v >= 1.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(format!("model order `{v}` is not a positive integer")) })
        .collect()
}

fn fit_config(a: FitArgs) -> FitConfig {
    let (direct, vb) = solver_options(&a.solver, a.seed);
    FitConfig {
        data: a.data,
        method: match a.method {
            MethodArg::Direct => FitMethod::Direct,
            MethodArg::Vb => FitMethod::Vb,
        },
        model: GenerativeConfig::new(a.components, a.orth.into(), a.noise.into()),
        direct,
        vb,
        out: a.out,
    }
}

fn select_config(a: SelectArgs) -> Result<ExperimentConfig, Failure> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Failure::Lib(Error::ParseError { file: path.display().to_string(), line: e.line(), msg: e.to_string() })
        })?;
        if let Some(out) = a.out {
            cfg.out = out;
        }
        return Ok(cfg);
    }
    let out = a.out.ok_or_else(|| Failure::Usage("select needs --out (or --config)".into()))?;
    let (direct, vb) = solver_options(&a.solver, a.seed);
    let data = if a.data.is_empty() {
        DataSource::Synthetic { spec: a.synth.spec(a.snr, 0), replicates: a.replicates }
    } else {
        DataSource::Directories { paths: a.data }
    };
    Ok(ExperimentConfig {
        data,
        methods: a.methods,
        orders: parse_orders(&a.components).map_err(Failure::Usage)?,
        vb,
        direct,
        out,
        master_seed: a.seed,
    })
}

fn snr_config(a: SnrArgs) -> Result<SnrStudyConfig, Failure> {
    let (direct, vb) = solver_options(&a.solver, a.seed);
    Ok(SnrStudyConfig {
        base: a.synth.spec(f64::INFINITY, 0),
        snrs: parse_grid(&a.snr).map_err(Failure::Usage)?,
        repeats: a.repeats,
        methods: a.methods,
        orders: parse_orders(&a.components).map_err(Failure::Usage)?,
        vb,
        direct,
        out: a.out,
        master_seed: a.seed,
    })
}

fn resolve(cmd: Cmd) -> Result<RunCommand, Failure> {
    Ok(match cmd {
        Cmd::Generate(a) => RunCommand::Generate(GenerateConfig { spec: a.synth.spec(a.snr, a.seed), out: a.out }),
        Cmd::Fit(a) => RunCommand::Fit(fit_config(a)),
        Cmd::Select(a) => RunCommand::Select(select_config(a)?),
        Cmd::SnrStudy(a) => RunCommand::SnrStudy(snr_config(a)?),
        Cmd::Replay(a) => {
            let mut rec = run::load_record(&a.run)?;
            if let Some(out) = a.out {
                rec.command.set_out(out);
            }
            rec.command
        }
    })
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| resolve(cli.command)).and_then(|c| run::execute(&c).map_err(Failure::from));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `parafac2 --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error [{}]: {e}", e.module());
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
