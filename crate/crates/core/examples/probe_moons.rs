// scratch probe for pipeline tuning (not shipped)
use unlearn_core::eval::rho_sweep;
use unlearn_core::pipeline::{prepare_shared, PipelineConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let cfg = PipelineConfig::moons_default(7);
    let shared = prepare_shared(&cfg).expect("prepare");
    println!(
        "prepared in {:.1}s; original d_r acc {:.2} d_e acc {:.2}; oracle d_r {:.2} d_e {:.2}",
        t0.elapsed().as_secs_f64(),
        unlearn_core::eval::accuracy(&shared.original, &shared.scenario.d_r_eval).unwrap(),
        unlearn_core::eval::accuracy(&shared.original, &shared.scenario.d_e_eval).unwrap(),
        unlearn_core::eval::accuracy(&shared.oracle, &shared.scenario.d_r_eval).unwrap(),
        unlearn_core::eval::accuracy(&shared.oracle, &shared.scenario.d_e_eval).unwrap(),
    );
    let last = shared.inversion_log.last().unwrap();
    println!(
        "inv last: total {:.3} bn {:.3} ent {:.3} aug {:.3} div {:.3} tv {:.3}",
        last.total, last.bn, last.ent, last.aug, last.div, last.tv
    );
    let reports = rho_sweep(&shared, &cfg, &[0.25], &[0, 1, 2]).expect("sweep");
    for r in &reports {
        println!(
            "seed {} rho {}: unl d_r {:.2} d_e {:.2} | kl_oracle {:.4} kl_orig {:.4} | flagged {}/{} t_f {:.3} sigma {:?} cand_time {:.1}s",
            r.meta.seed,
            r.metrics.rho,
            r.metrics.accuracy.unlearned.d_r,
            r.metrics.accuracy.unlearned.d_e,
            r.metrics.kl_vs_oracle,
            r.metrics.kl_vs_original,
            r.metrics.filtration.n_flagged,
            r.metrics.filtration.n_candidates,
            r.metrics.filtration.t_f,
            r.metrics.filtration.sigma,
            r.meta.wall_clock_seconds,
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
