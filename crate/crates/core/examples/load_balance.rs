//! Longest-processing-time block assignment versus a naive equal split,
//! plus the exact optimum on a small case.

use lsrm::harness::checks::scene_corpus;
use lsrm::oracle::optimal_makespan;
use lsrm::parallel::{imbalance_report, lpt_assign, worker_loads};

fn main() -> lsrm::Result<()> {
    let loads = [37, 29, 25, 21, 18, 12, 9, 8, 5, 3];
    let owner = lpt_assign(&loads, 3)?;
    let per = worker_loads(&loads, &owner, 3);
    println!("blocks {loads:?} on 3 workers: loads {per:?}, optimum makespan {}", optimal_makespan(&loads, 3));

    let corpus = scene_corpus(20, 7, 48, 24, 4)?;
    let pairs: Vec<_> = corpus.iter().map(|(v, i)| (v, i)).collect();
    for workers in [2, 4, 8] {
        let rows = imbalance_report(&pairs, workers)?;
        let mean = |f: fn(&lsrm::parallel::ImbalanceRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        println!(
            "W={workers}: mean max/mean load, block-aware {:.3}, naive {:.3}",
            mean(|r| r.block_aware_ratio),
            mean(|r| r.naive_ratio)
        );
    }
    Ok(())
}
