use skewgrad_cli::{cmd_diagnose, cmd_gen_data, cmd_pilot, cmd_sweep, cmd_train, config, report};
use skewgrad_core::error::Error;
use std::path::Path;
use std::process::ExitCode;

const USAGE: &str = "\
skewgrad — skewness-guided sample selection for point-cloud domain adaptation

USAGE:
  skewgrad <COMMAND> [--config PATH] [--key value ...]

COMMANDS:
  gen-data   Generate the synthetic source/target benchmark (XYZ + manifest)
  train      Run the two-stage training pipeline and write logs + checkpoints
  sweep      Grid runs over --sweep-betas / --sweep-alphas x --sweep-seeds
  diagnose   Train with conflict diagnostics; write conflict/skewness CSVs,
             print skewness-conflict correlations and the ANM verdict
  pilot      Compare selection modes {all, random-freeze:0.5, sm-dsb}
  report     Aggregate a run directory into plot-ready CSVs (positional or
             --output-dir run directory)

Every config field is a flag (kebab-case), e.g. --beta 0.7 --seed 11
--selection-mode sm-dsb|all|none|random-freeze:P --output-dir runs/x.
--ssl-weight W sets both SSL loss weights. SKEWGRAD_SEED overrides the seed.

EXIT CODES: 0 ok, 2 configuration error, 3 training divergence.
";

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn run() -> Result<(), (u8, String)> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        print!("{USAGE}");
        return Ok(());
    }
    let command = args.remove(0);

    // `report` accepts a positional run directory.
    let mut report_dir: Option<String> = None;
    if command == "report" && !args.is_empty() && !args[0].starts_with("--") {
        report_dir = Some(args.remove(0));
    }

    let cfg = config::resolve(&args).map_err(|e| (exit_code_for(&e), e.to_string()))?;
    let fail = |e: Error| (exit_code_for(&e), e.to_string());

    match command.as_str() {
        "gen-data" => {
            let out = cmd_gen_data(&cfg).map_err(fail)?;
            println!(
                "wrote {} source + {} target clouds; manifest at {}",
                out.source_files,
                out.target_files,
                out.manifest.display()
            );
        }
        "train" => {
            let summary = cmd_train(&cfg).map_err(fail)?;
            println!(
                "done: source accuracy {:.4}, target accuracy {:.4} (stage-1 target {:.4}, pseudo-label {:.4})",
                summary.final_source_accuracy,
                summary.final_target_accuracy,
                summary.stage1_target_accuracy,
                summary.pseudo_label_accuracy
            );
            println!("outputs in {}", cfg.output_dir);
        }
        "sweep" => {
            let summary = cmd_sweep(&cfg).map_err(fail)?;
            println!("{} runs, {} rows -> {}/sweep.csv", summary.runs, summary.rows, cfg.output_dir);
            for (param, value, mean) in &summary.means {
                println!("  {param}={value}: mean final target accuracy {mean:.4}");
            }
        }
        "diagnose" => {
            let d = cmd_diagnose(&cfg).map_err(fail)?;
            println!("{} conflict records -> {}/conflict.csv", d.records, cfg.output_dir);
            if let Some(c) = &d.batch_skew_vs_ssl_oracle {
                println!(
                    "batch mean skewness vs sim(G_SSL, G_oracle): pearson {:+.4}, spearman {:+.4}",
                    c.pearson, c.spearman
                );
            }
            if let Some(c) = &d.sample_skew_vs_ssl_oracle {
                println!(
                    "per-sample skewness vs sim(G_SSL, G_oracle): pearson {:+.4}, spearman {:+.4}",
                    c.pearson, c.spearman
                );
            }
            if let Some(anm) = &d.anm {
                println!(
                    "anm: skewness->conflict {:.4}, conflict->skewness {:.4}, verdict {:?}",
                    anm.score_x_to_y, anm.score_y_to_x, anm.verdict
                );
            }
            for notice in &d.notices {
                println!("notice: {notice}");
            }
        }
        "pilot" => {
            let table = cmd_pilot(&cfg).map_err(fail)?;
            for s in &table.summaries {
                println!("{}: target accuracy {:.4} +- {:.4} over {} runs", s.mode, s.mean, s.std, s.runs);
            }
            println!("rows in {}/pilot.csv", cfg.output_dir);
        }
        "report" => {
            let dir = report_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let out = report::cmd_report(Path::new(&dir)).map_err(fail)?;
            println!("report in {}: {}", out.report_dir.display(), out.files.join(", "));
        }
        other => {
            return Err((2, format!("unknown command `{other}`; run `skewgrad --help`")));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
