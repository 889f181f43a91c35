use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opal_tomo::harness::{
    fit_regret_slope, read_aggregate_csv, run_experiment, SimConfig, AGGREGATE_FILE,
};
use opal_tomo::Result;

#[derive(Parser)]
#[command(name = "opal", version, about = "Online probe allocation for network tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write its artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output directory of the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the topology and probe set of one scenario.
    Topology {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        scenario: usize,
    },
    /// Fit log-log regret slopes from an aggregate CSV.
    Slope {
        #[arg(long)]
        input: PathBuf,
        /// Points with t >= t_last / window enter the fit.
        #[arg(long, default_value_t = 10.0)]
        window: f64,
    },
}

fn simulate(config: PathBuf, output: Option<PathBuf>) -> Result<()> {
    let mut cfg = SimConfig::load(&config)?;
    if output.is_some() {
        cfg.output = output;
    }
    let dir = cfg.output.clone();
    let report = run_experiment(&cfg)?;
    println!("policy\tfinal_regret\tfinal_mse\tslope");
    for p in &report.summary.policies {
        let slope = p.regret_slope.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!(
            "{}\t{:.6e}\t{:.6e}\t{}",
            p.policy, p.final_stats.regret_mean, p.final_stats.mse_mean, slope
        );
    }
    match dir {
        Some(d) => println!("wrote {}", d.join(AGGREGATE_FILE).display()),
        None => eprintln!("no output directory configured; nothing written"),
    }
    Ok(())
}

fn topology(config: PathBuf, scenario: usize) -> Result<()> {
    let cfg = SimConfig::load(&config)?;
    cfg.validate()?;
    let sc = cfg.scenario(scenario)?;
    let topo = &sc.topology;
    println!("nodes: {}", topo.node_count());
    println!("links: {}", topo.link_count());
    println!("kind: {:?}", topo.kind());
    println!("probes: {}", sc.probes.len());
    for (m, p) in sc.probes.probes().iter().enumerate() {
        println!("  {:>3}: {}", m + 1, p.describe());
    }
    let matrix = sc.probes.matrix();
    println!("rank(Q): {}", matrix.rank());
    if matrix.is_square() {
        println!("Q^-1:");
        for row in matrix.kappa().row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:>6.3}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(())
}

fn slope(input: PathBuf, window: f64) -> Result<()> {
    let rows = read_aggregate_csv(&input)?;
    let mut labels: Vec<&str> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.policy.as_str()) {
            labels.push(&r.policy);
        }
    }
    for label in labels {
        let (t, v): (Vec<u64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.policy == label)
            .map(|r| (r.t, r.stats.regret_mean))
            .unzip();
        match fit_regret_slope(&t, &v, window) {
            Some(s) => println!("{label}\t{s:.6}"),
            None => println!("{label}\t-"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, output } => simulate(config, output),
        Command::Topology { config, scenario } => topology(config, scenario),
        Command::Slope { input, window } => slope(input, window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
