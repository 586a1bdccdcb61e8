//! Scratch calibration for the 2D regression benchmark windows.

use wdro_core::data::gen_regression_2d;
use wdro_core::elimination::elim_run;
use wdro_core::losses::GlmRegressionLoss;
use wdro_core::particles::{seeded_theta, ParticleState};
use wdro_core::problem::{ProblemSpec, SolverConfig};
use wdro_core::runlog::{RunLog, ELIM_COLUMNS};

fn main() {
    let data = gen_regression_2d(200, 7);
    let loss = GlmRegressionLoss::new(2);
    let theta0 = seeded_theta(2, 42, 1.0);

    for gamma in [0.5, 1.0] {
        let problem = ProblemSpec::unconditioned(gamma, 2, 2);
        let cfg = SolverConfig {
            eta: 0.4,
            tau: 0.2,
            tol: 1e-5,
            inner_tol: 1e-5,
            max_iters: 5000,
            seed: 42,
            ..SolverConfig::default()
        };
        let mut st = ParticleState::new(theta0.clone(), &data, &cfg).unwrap();
        let mut log = RunLog::new(ELIM_COLUMNS);
        elim_run(&mut st, &loss, &data, &problem, &cfg, &mut log).unwrap();
        let means = log.column("nge_batch_mean");
        let mins = log.column("nge_batch_min");
        let half = means.len() / 2;
        let tail = &means[half..];
        for width in [20usize, 30, 40, 50] {
            let blocks: Vec<f64> = tail
                .chunks(width)
                .filter(|c| c.len() == width)
                .map(|c| c.iter().sum::<f64>() / width as f64)
                .collect();
            let increases: Vec<(usize, f64)> = blocks
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[1] > w[0])
                .map(|(i, w)| (i, w[1] - w[0]))
                .collect();
            println!(
                "gamma={gamma} width={width}: blocks={} increases={:?} last_block={:.4}",
                blocks.len(),
                increases,
                blocks.last().unwrap()
            );
        }
        let q3 = 3 * mins.len() / 4;
        let min_tail_max = mins[q3..].iter().cloned().fold(f64::NAN, f64::max);
        println!(
            "gamma={gamma}: iters={} last_mean={} max_of_min_last_quarter={min_tail_max}",
            log.iterations,
            tail.last().unwrap()
        );
    }
}
