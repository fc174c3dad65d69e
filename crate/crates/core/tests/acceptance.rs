//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use bginet_core::verify::{
    check_ablation, check_determinism, check_f1_reference, check_gradients, check_oracles, check_param_count,
    check_projection_invariants, check_render_colors, format_table, run_ablation, AblationConfig, CheckOutcome,
};

fn report(rows: &mut Vec<CheckOutcome>, row: CheckOutcome, started: Instant) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{row} [{:.1}s]", started.elapsed().as_secs_f64()).expect("stdout");
    out.flush().expect("stdout");
    rows.push(row);
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut rows = Vec::new();
    let checks: Vec<(&str, Box<dyn Fn() -> CheckOutcome>)> = vec![
        ("f1", Box::new(check_f1_reference)),
        ("projection", Box::new(|| check_projection_invariants(1000, 0))),
        ("oracles", Box::new(|| check_oracles(50, 1))),
        ("gradients", Box::new(|| check_gradients(2))),
        (
            "ablation",
            Box::new(|| {
                let cfg = AblationConfig::default();
                match run_ablation(&cfg) {
                    Ok(r) => {
                        for run in &r.runs {
                            println!(
                                "    ablation seed {} gim {}: test F1 {:.4}, best epoch {}, {:.0}s",
                                run.seed, run.use_gim, run.test_f1, run.best_epoch, run.seconds
                            );
                        }
                        check_ablation(&r)
                    }
                    Err(e) => CheckOutcome {
                        id: 5,
                        name: "ablation direction",
                        passed: false,
                        detail: format!("error: {e}"),
                    },
                }
            }),
        ),
        ("params", Box::new(check_param_count)),
        ("determinism", Box::new(|| check_determinism(work.path()))),
        ("render", Box::new(check_render_colors)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    for (key, check) in &checks {
        if !filter.is_empty() && !filter.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        report(&mut rows, check(), started);
    }
    println!();
    print!("{}", format_table(&rows));
    if rows.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
