use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gflow_core::losses::{
    classify_loss_report, f_from_g, g_from_f, make_builtin_loss, BuiltinLoss, FDivergenceSpec, RegressionLoss,
};
use gflow_core::oracle::{run_correspondence_matrix, MatrixConfig};
use gflow_core::runner::{aggregate, run_stem, run_suite, ExperimentConfig};

/// Directory for run outputs when `--out` is not given.
const OUT_DIR_VAR: &str = "GFLOW_OUT_DIR";

#[derive(Parser)]
#[command(name = "gflow", version, about = "Train and verify GFlowNets with pluggable regression losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its CSV, summary and checkpoint.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every `*.toml` in a directory once per seed.
    Suite {
        config_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the loss/divergence gradient correspondence on random DAGs.
    Verify {
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        dags: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-forcing / zero-avoiding classification of a loss.
    Classify {
        /// Built-in name or an expression in `t`.
        loss: String,
    },
    /// Tabulate the dual of a loss or divergence generator.
    Convert {
        /// Loss (built-in name or expression in `t`); prints f on a log grid.
        #[arg(long, conflicts_with = "f", required_unless_present = "f")]
        g: Option<String>,
        /// Divergence generator as an expression in `t`; prints g on [-3, 3].
        #[arg(long)]
        f: Option<String>,
    },
}

/// Writes to stdout, treating a closed pipe (`gflow ... | head`) as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os(OUT_DIR_VAR).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_loss(spec: &str) -> Result<RegressionLoss> {
    if BuiltinLoss::from_name(spec).is_some() {
        return Ok(make_builtin_loss(spec)?);
    }
    RegressionLoss::from_expression("custom", spec)
        .with_context(|| format!("`{spec}` is neither a built-in loss nor a valid expression"))
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let output = gflow_core::runner::run_experiment(&cfg)?;
    let dir = out_dir(out);
    output.write_to(&dir, &run_stem(&cfg))?;
    println!("{}", serde_json::to_string(&output.summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_suite(config_dir: &Path, seeds: &[u64], parallelism: usize, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(config_dir)
        .with_context(|| format!("reading {}", config_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let mut configs = Vec::new();
    for p in &paths {
        let base = load_config(p)?;
        configs.extend(seeds.iter().map(|&s| base.with_seed(s)));
    }
    let results = run_suite(&configs, parallelism);
    let dir = out_dir(out);
    let mut failed = 0;
    for (cfg, r) in configs.iter().zip(&results) {
        match r {
            Ok(o) => o.write_to(&dir, &run_stem(cfg))?,
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", run_stem(cfg));
            }
        }
    }
    let stats = aggregate(&configs, &results);
    std::fs::write(dir.join("suite_summary.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    for s in &stats {
        println!("{}", serde_json::to_string(s)?);
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_verify(tol: f64, dags: usize, seed: u64, out: Option<PathBuf>) -> Result<ExitCode> {
    let config = MatrixConfig { n_dags: dags, seed, tol, ..MatrixConfig::default() };
    let losses: Vec<RegressionLoss> = BuiltinLoss::ALL.into_iter().map(RegressionLoss::builtin).collect();
    let report = run_correspondence_matrix(&config, &losses)?;
    let mut counterexamples = None;
    let mut text = String::new();
    for row in &report.rows {
        writeln!(
            text,
            "{}",
            serde_json::json!({
                "dag": row.dag,
                "loss": row.loss,
                "case": row.case,
                "family": row.family,
                "max_rel_error": row.max_rel_error,
                "fd_max_rel_error": row.fd_max_rel_error,
                "applicable": row.applicable,
                "pass": row.pass,
            })
        )?;
        if let Some(text) = &row.counterexample {
            let dir = counterexamples.get_or_insert_with(|| out_dir(out.clone()).join("counterexamples"));
            std::fs::create_dir_all(&*dir)?;
            std::fs::write(dir.join(format!("dag{}_{}_{}_{}.dag", row.dag, row.loss, row.case, row.family)), text)?;
        }
    }
    emit(&text)?;
    eprintln!(
        "{} configurations, max relative error {:.3e}, max finite-difference error {:.3e}: {}",
        report.rows.len(),
        report.max_rel_error(),
        report.max_fd_rel_error(),
        if report.all_pass() { "PASS" } else { "FAIL" }
    );
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_classify(loss: &str) -> Result<ExitCode> {
    let g = resolve_loss(loss)?;
    let r = classify_loss_report(&g)?;
    println!(
        "{}: f(0) = {}, f'(inf) = {}, zero-forcing {}, zero-avoiding {}{}",
        g.name(),
        r.f_at_zero,
        r.f_prime_at_infinity,
        yes_no(r.classification.zero_forcing),
        yes_no(r.classification.zero_avoiding),
        if r.pseudo { " (pseudo-divergence: g is not convex)" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_convert(g: Option<String>, f: Option<String>) -> Result<ExitCode> {
    let mut text = String::new();
    match (g, f) {
        (Some(g), None) => {
            let loss = resolve_loss(&g)?;
            writeln!(text, "t\tf(t)")?;
            for i in -6..=6 {
                let t = 10f64.powf(i as f64 * 0.5);
                writeln!(text, "{t:.6e}\t{:.12e}", f_from_g(&loss, t)?)?;
            }
        }
        (None, Some(f)) => {
            let spec = FDivergenceSpec::from_expression("custom", &f)?;
            writeln!(text, "t\tg(t)")?;
            for i in -6..=6 {
                let t = i as f64 * 0.5;
                writeln!(text, "{t:.2}\t{:.12e}", g_from_f(&spec, t)?)?;
            }
        }
        _ => bail!("give exactly one of --g or --f"),
    }
    emit(&text)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Suite { config_dir, seeds, parallelism, out } => cmd_suite(&config_dir, &seeds, parallelism, out),
        Command::Verify { tol, dags, seed, out } => cmd_verify(tol, dags, seed, out),
        Command::Classify { loss } => cmd_classify(&loss),
        Command::Convert { g, f } => cmd_convert(g, f),
    }
}
