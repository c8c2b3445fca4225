use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use wpfed::adversary::{AttackConfig, AttackKind};
use wpfed::announce::{verify_dump, RevealOutcome};
use wpfed::experiments::{
    compare_modes, lsh_cheat_csv, lsh_cheat_experiment, modes_csv, poison_csv, poison_experiment, Variant,
};
use wpfed::selection::SelectionMode;
use wpfed::sim::{run_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "wpfed", version, about = "Decentralized personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, board log, summary and manifest.
    Run(Common),
    /// Compare selection modes across seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "full,no_lsh,no_rank,random,silo")]
        modes: Vec<Variant>,
    },
    /// Target accuracy with LSH cheaters, verification on and off.
    AttackLsh {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Honest accuracy under periodic-reinitialization poisoners.
    AttackPoison {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "full,random")]
        modes: Vec<SelectionMode>,
    },
    /// Re-check every commitment/reveal pair in a board dump.
    VerifyDump { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    mode: Option<SelectionMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ScenarioConfig::from_toml(&text)?
            }
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(mode) = self.mode {
            cfg = cfg.with_mode(mode);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn seed_list(cfg: &ScenarioConfig, n: u64) -> Vec<u64> {
    (0..n).map(|i| cfg.master_seed + i).collect()
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn with_attack(mut cfg: ScenarioConfig, kind: AttackKind) -> anyhow::Result<ScenarioConfig> {
    match &cfg.attack {
        Some(a) if a.kind != kind => bail!("scenario file configures a {} attack, expected {kind}", a.kind),
        Some(_) => {}
        None => {
            let fraction = if kind == AttackKind::LshCheat { 0.5 } else { 0.2 };
            cfg.attack = Some(AttackConfig { kind, malicious_fraction: fraction, ..AttackConfig::default() });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let (summary, dir) = run_scenario(&cfg)?;
            println!(
                "rounds={} honest_clients={} final_accuracy={:.4} +- {:.4}",
                summary.rounds, summary.honest_clients, summary.mean_accuracy, summary.std_accuracy
            );
            println!("outputs in {}", dir.display());
        }
        Command::Ablate { common, seeds, modes } => {
            let cfg = common.load()?;
            let rows = compare_modes(&cfg, &modes, &seed_list(&cfg, seeds))?;
            for r in &rows {
                println!("{:<8} {:.4} +- {:.4}", r.variant.to_string(), r.mean, r.std);
            }
            write(&cfg.output_dir, "ablation.csv", &modes_csv(&rows))?;
        }
        Command::AttackLsh { common, seeds } => {
            let cfg = with_attack(common.load()?, AttackKind::LshCheat)?;
            let rows = lsh_cheat_experiment(&cfg, &seed_list(&cfg, seeds))?;
            for r in &rows {
                println!(
                    "seed {}: baseline {:.4} on {:.4} off {:.4} excluded {:.2} entered {:.2}",
                    r.seed, r.baseline, r.verification_on, r.verification_off, r.on_exclusion_rate, r.off_entry_rate
                );
            }
            write(&cfg.output_dir, "lsh_cheat.csv", &lsh_cheat_csv(&rows))?;
        }
        Command::AttackPoison { common, seeds, fractions, modes } => {
            let cfg = with_attack(common.load()?, AttackKind::Poison)?;
            let rows = poison_experiment(&cfg, &fractions, &modes, &seed_list(&cfg, seeds))?;
            for &f in &fractions {
                for &m in &modes {
                    let d: Vec<f64> =
                        rows.iter().filter(|r| r.fraction == f && r.mode == m).map(|r| r.degradation()).collect();
                    println!("fraction {f} {m}: mean degradation {:.4}", d.iter().sum::<f64>() / d.len() as f64);
                }
            }
            write(&cfg.output_dir, "poison.csv", &poison_csv(&rows))?;
        }
        Command::VerifyDump { path } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let checks = verify_dump(&text)?;
            let failed: Vec<_> = checks.iter().filter(|c| c.outcome != RevealOutcome::Verified).collect();
            for c in &failed {
                println!("round {} client {}: {:?}", c.round, c.client_id, c.outcome);
            }
            println!("{} reveals checked, {} failed", checks.len(), failed.len());
            if !failed.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
