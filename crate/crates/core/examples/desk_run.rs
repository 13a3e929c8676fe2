//! Runs the desk-scale pipeline for a few seeds and prints the headline numbers.
//!
//! Usage: `cargo run --release --example desk_run -- [seed ...]`

use std::time::Instant;

use corlab::eval::{dormant_zone, lambda_sweep, run_pipeline, scatter_rows, PipelineConfig};

fn main() -> corlab::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2, 3, 4] } else { seeds };
    for seed in seeds {
        let t = Instant::now();
        let cfg = PipelineConfig::desk_scale(seed)?;
        let run = run_pipeline(&cfg)?;
        let last = run.loss_log.last().map(|s| s.lm_loss).unwrap_or(f64::NAN);
        println!("seed {seed}: final loss {last:.3}, budgets {:?}", run.plan.budgets());
        for m in &run.report.modes {
            println!(
                "  {:10} K={:3} acc {:.3} tail {:.3} nll {:.3}",
                m.mode,
                m.k_total,
                m.accuracy,
                m.tail_accuracy.unwrap_or(f64::NAN),
                m.mean_nll
            );
        }
        println!("  dormant experts {}", dormant_zone(&scatter_rows(&run.cei)).len());
        let sweep = lambda_sweep(&run.model, &run.rki, &run.cei, &cfg.plan, &[0.05, 0.1, 0.2, 0.5], &run.corpus.test)?;
        for s in sweep {
            println!("  lambda {:.2} tail {:.3}", s.lambda, s.tail_accuracy.unwrap_or(f64::NAN));
        }
        println!("  {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
