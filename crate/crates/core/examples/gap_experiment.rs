//! Optimality gaps of the nominal and robust controllers as the radius grows,
//! written to CSV by the experiment runner and read back.

use drlq::experiments::{read_csv, run_gaps, spearman, Experiment, ExperimentConfig, GapRow, RhoSpec};

fn main() -> drlq::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        rho: RhoSpec::Many(vec![0.0, 1.0, 2.0, 4.0, 8.0]),
        output_dir: dir.path().to_path_buf(),
        jobs: 2,
        ..ExperimentConfig::preset(Experiment::Gaps)
    };
    let summary = run_gaps(&cfg)?;
    let rows: Vec<GapRow> = read_csv(&dir.path().join("gaps.csv"))?;
    for r in &rows {
        println!("seed {}  rho {:>4.1}  robust gap {:.3e}  nominal gap {:.3e}", r.seed, r.rho, r.worst_case_gap, r.nominal_gap);
    }
    for seed in &cfg.seeds {
        let (rho, gap): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.seed == *seed).map(|r| (r.rho, r.worst_case_gap)).unzip();
        println!("seed {seed}: Spearman(rho, gap) = {:.3}", spearman(&rho, &gap));
    }
    println!("all converged: {}", summary.all_converged);
    Ok(())
}
