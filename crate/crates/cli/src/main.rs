//! `riskaudit` — plan, run, analyze, and report a prompt-perturbation
//! reliability audit of LLM risk scoring.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use riskaudit_cli::config::AuditConfig;
use riskaudit_cli::pipeline;
use riskaudit_core::mock::MockBehavior;
use riskaudit_core::prompting::PromptStyle;
use riskaudit_core::provider::{ModelTarget, OpenRouterClient, Provider, RetryPolicy};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "riskaudit",
    about = "Reliability audit: how LLM risk scores destabilize under irrelevant features and prompt rhetoric"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; flags override file values, which override defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale preset (2 models, 4 prompts, 10 patients, 11 levels, 2 reps)
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated model keys (defaults subset) or key=provider/id pairs
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated prompt styles: neutral, logical, human_impact, clinical_judgment
    #[arg(long, value_delimiter = ',')]
    prompts: Option<Vec<String>>,
    #[arg(long)]
    patients: Option<u32>,
    #[arg(long)]
    reps: Option<u8>,
    #[arg(long)]
    levels: Option<u8>,
    /// Run directory for all artifacts
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the cohort, build configurations and prompts, write the manifest
    Plan(ConfigArgs),
    /// Execute pending cells against the provider (resumable)
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Mock behavior instead of the real provider, e.g. null_model,
        /// linear_drift:delta=0.2,sigma=0.3, prompt_shift:logical=1.0
        #[arg(long)]
        mock: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Aggregate the ledger into instability, curves, and hypothesis tests
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        /// Analyze an incomplete ledger
        #[arg(long)]
        allow_partial: bool,
    },
    /// Emit SVG figures and the summary report
    Report {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the oracle fixture suite
    Verify,
}

fn resolve_config(args: &ConfigArgs) -> anyhow::Result<AuditConfig> {
    let mut config = if let Some(path) = &args.config {
        AuditConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?
    } else if args.desk {
        AuditConfig::desk_preset()
    } else {
        AuditConfig::default()
    };
    if args.desk && args.config.is_some() {
        bail!("--desk and --config are mutually exclusive");
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(models) = &args.models {
        let defaults = ModelTarget::defaults();
        config.models = models
            .iter()
            .map(|spec| -> anyhow::Result<ModelTarget> {
                if let Some((key, id)) = spec.split_once('=') {
                    Ok(ModelTarget {
                        key: key.to_string(),
                        provider_model_id: id.to_string(),
                        temperature: 1.0,
                        max_tokens: 4096,
                    })
                } else {
                    defaults
                        .iter()
                        .find(|m| m.key == *spec)
                        .cloned()
                        .with_context(|| format!("unknown model key `{spec}`"))
                }
            })
            .collect::<anyhow::Result<Vec<ModelTarget>>>()?;
    }
    if let Some(prompts) = &args.prompts {
        config.prompts = prompts
            .iter()
            .map(|p| PromptStyle::parse(p).map_err(anyhow::Error::from))
            .collect::<anyhow::Result<Vec<PromptStyle>>>()?;
    }
    if let Some(v) = args.patients {
        config.patients = v;
    }
    if let Some(v) = args.reps {
        config.reps = v;
    }
    if let Some(v) = args.levels {
        config.levels = v;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Plan(args) => {
            let config = resolve_config(&args)?;
            let manifest = pipeline::cmd_plan(&config, &args.out)?;
            println!(
                "planned {} cells ({} models × {} prompts × {} patients × {} levels × {} reps)",
                manifest.planned_cells,
                config.models.len(),
                config.prompts.len(),
                config.patients,
                config.levels + 1,
                config.reps
            );
            println!(
                "estimated cost at ${:.4}/call: ${:.2}",
                config.price_per_call_usd, manifest.estimated_cost_usd
            );
            println!("manifest: {}", args.out.join(pipeline::MANIFEST_FILE).display());
        }
        Command::Run {
            config: args,
            mock,
            concurrency,
        } => {
            let mut config = resolve_config(&args)?;
            if let Some(c) = concurrency {
                config.concurrency = c;
            }
            let provider = match &mock {
                Some(behavior) => Provider::Mock(MockBehavior::parse(behavior)?),
                None => Provider::Real(OpenRouterClient::from_env(
                    &config.base_url,
                    RetryPolicy::default(),
                    config.requests_per_second,
                )?),
            };
            let total_cells = config.cell_count();
            let stats = pipeline::cmd_run(&config, &args.out, &provider, |done, total| {
                if done % 200 == 0 || done == total {
                    print!("\rexecuted {done}/{total} pending cells");
                    let _ = std::io::stdout().flush();
                }
            })?;
            println!();
            println!(
                "run complete ({total_cells} planned): ok {} | parse_failed {} | refused {} | transport_failed {}",
                stats.ok, stats.parse_failed, stats.refused, stats.transport_failed
            );
            if stats.transport_failed > 0 {
                bail!("{} cells ended transport_failed; re-run to retry them", stats.transport_failed);
            }
        }
        Command::Analyze {
            config: args,
            allow_partial,
        } => {
            let config = resolve_config(&args)?;
            let analysis = pipeline::cmd_analyze(&config, &args.out, allow_partial)?;
            println!(
                "analyzed {} model batteries; {} cells dropped (too few valid repetitions)",
                analysis.batteries.len(),
                analysis.dropped_cells
            );
            println!("outputs in {}", args.out.join("analysis").display());
        }
        Command::Report { config: args } => {
            let written = pipeline::cmd_report(&args.out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Verify => {
            for line in pipeline::cmd_verify()? {
                println!("{line}");
            }
            println!("verify: all fixtures passed");
        }
    }
    Ok(())
}
