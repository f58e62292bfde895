//! Command-line experiment driver.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use mxml_core::harness::{
    build_domains, emit_report, evaluate_phase, load_base_members, load_config, parse_results_csv,
    run_experiment, train_base_phase, train_wpn_phase, EvalResult, ExperimentConfig, RESULTS_CSV,
    WPN_CKPT,
};
use mxml_core::mixture::CombineMode;
use mxml_core::tensor::load_checkpoint;
use mxml_core::wpn::WpnParams;

struct Flags {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    episodes: Option<usize>,
    transductive: Option<bool>,
    mode: Option<CombineMode>,
}

fn parse_flags(args: &[String]) -> Result<Flags, String> {
    let mut flags = Flags {
        config: None,
        seed: None,
        out: None,
        episodes: None,
        transductive: None,
        mode: None,
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{name} expects a value"))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                flags.seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|_| "--seed expects an unsigned integer".to_string())?,
                )
            }
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--episodes" => {
                flags.episodes = Some(
                    value("--episodes")?
                        .parse()
                        .map_err(|_| "--episodes expects a positive integer".to_string())?,
                )
            }
            "--transductive" => {
                flags.transductive = Some(match value("--transductive")?.as_str() {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(format!("--transductive expects true|false, got '{other}'"))
                    }
                })
            }
            "--mode" => {
                flags.mode = Some(CombineMode::parse(&value("--mode")?).map_err(|e| e.to_string())?)
            }
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(flags)
}

fn load_configured(flags: &Flags) -> Result<ExperimentConfig, String> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| "--config <path> is required".to_string())?;
    let mut cfg = load_config(path).map_err(|e| e.to_string())?;
    cfg.apply_overrides(
        flags.seed,
        flags.episodes,
        flags.transductive,
        flags.mode,
        flags.out.clone(),
    );
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Print without panicking when the consumer closes the pipe early
/// (for example `mxml --help | head`).
fn say(line: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{line}");
}

fn print_summary(results: &[EvalResult]) {
    for r in results {
        say(&format!(
            "{:<16} {:<24} {:<12} {:>7.2}% (±{:.2})",
            r.model, r.train_domains, r.test_domain, r.mean_acc, r.ci95
        ));
    }
}

fn cmd_run(flags: &Flags) -> Result<(), String> {
    let cfg = load_configured(flags)?;
    let results = run_experiment(&cfg).map_err(|e| e.to_string())?;
    print_summary(&results);
    say(&format!("artifacts written to {}", cfg.eval.out.display()));
    Ok(())
}

fn cmd_train_base(flags: &Flags) -> Result<(), String> {
    let cfg = load_configured(flags)?;
    std::fs::create_dir_all(&cfg.eval.out).map_err(|e| e.to_string())?;
    let built = build_domains(&cfg).map_err(|e| e.to_string())?;
    let trained = train_base_phase(&cfg, &built, &cfg.eval.out).map_err(|e| e.to_string())?;
    say(&format!(
        "trained {} base learner(s){} into {}",
        trained.members.len(),
        if trained.single.is_some() {
            " plus the pooled single model"
        } else {
            ""
        },
        cfg.eval.out.display()
    ));
    Ok(())
}

fn cmd_train_wpn(flags: &Flags) -> Result<(), String> {
    let cfg = load_configured(flags)?;
    let built = build_domains(&cfg).map_err(|e| e.to_string())?;
    let trained = load_base_members(&cfg, &built, &cfg.eval.out).map_err(|e| e.to_string())?;
    train_wpn_phase(&cfg, &built, &trained.members, &cfg.eval.out).map_err(|e| e.to_string())?;
    say(&format!(
        "weight network trained; checkpoint and manifest in {}",
        cfg.eval.out.display()
    ));
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<(), String> {
    let cfg = load_configured(flags)?;
    let built = build_domains(&cfg).map_err(|e| e.to_string())?;
    let trained = load_base_members(&cfg, &built, &cfg.eval.out).map_err(|e| e.to_string())?;
    let wpn_ckpt = load_checkpoint(&cfg.eval.out.join(WPN_CKPT)).map_err(|e| e.to_string())?;
    let wpn = WpnParams::from_checkpoint(&wpn_ckpt).map_err(|e| e.to_string())?;
    let results =
        evaluate_phase(&cfg, &built, &trained, &wpn, &cfg.eval.out).map_err(|e| e.to_string())?;
    emit_report(&results, &cfg.eval.out).map_err(|e| e.to_string())?;
    print_summary(&results);
    Ok(())
}

fn cmd_report(flags: &Flags) -> Result<(), String> {
    let out = flags
        .out
        .as_ref()
        .ok_or_else(|| "--out <dir> is required for report".to_string())?;
    let path = out.join(RESULTS_CSV);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let rows = parse_results_csv(&text, &path.display().to_string()).map_err(|e| e.to_string())?;
    let results: Vec<EvalResult> = rows
        .into_iter()
        .map(|r| EvalResult {
            model: r.model,
            train_domains: r.train_domains,
            test_domain: r.test_domain,
            n_way: r.n_way,
            k_shot: r.k_shot,
            queries: r.queries,
            episodes: r.episodes,
            mean_acc: r.mean_acc,
            ci95: r.ci95,
            per_episode: Vec::new(),
            coefficients: None,
        })
        .collect();
    if results.is_empty() {
        return Err("results.csv holds no rows".to_string());
    }
    let md = mxml_core::harness::report::report_markdown(&results);
    let md_path = out.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| e.to_string())?;
    say(&format!("rewrote {}", md_path.display()));
    Ok(())
}

fn usage() {
    say(concat!(
        "mxml — meta-learning ensemble experiments\n",
        "\n",
        "Usage: mxml <command> [flags]\n",
        "\n",
        "Commands:\n",
        "  run         full pipeline: train base learners, train WPN, evaluate, report\n",
        "  train-base  train the per-domain base learners (and pooled single model)\n",
        "  train-wpn   train the weight prediction network over saved base learners\n",
        "  eval        evaluate saved models on the meta-test domains\n",
        "  report      rebuild report.md from results.csv\n",
        "\n",
        "Flags:\n",
        "  --config <path>            experiment configuration file\n",
        "  --seed <u64>               reseed splits, training, WPN, and evaluation\n",
        "  --out <dir>                output directory (overrides [eval] out)\n",
        "  --episodes <n>             evaluation episode count (overrides [eval] episodes)\n",
        "  --transductive <bool>      pin the transductive setting and variant\n",
        "  --mode <normalized|paper_literal>  prediction combination mode",
    ));
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        usage();
        return ExitCode::FAILURE;
    };
    if command == "--help" || command == "-h" || command == "help" {
        usage();
        return ExitCode::SUCCESS;
    }
    let flags = match parse_flags(&args[1..]) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match command.as_str() {
        "run" => cmd_run(&flags),
        "train-base" => cmd_train_base(&flags),
        "train-wpn" => cmd_train_wpn(&flags),
        "eval" => cmd_eval(&flags),
        "report" => cmd_report(&flags),
        other => {
            eprintln!("error: unknown command '{other}'");
            usage();
            return ExitCode::FAILURE;
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
