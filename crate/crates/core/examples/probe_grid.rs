// scratch probe: per-point KL decomposition at the best setting so far
use ndarray::IxDyn;
use unlearn_core::data::{make_moons, region_removal_split, sample_target_subset};
use unlearn_core::eval::{accuracy, kl_to_reference};
use unlearn_core::filtration::{build_unlearn_set, generate_candidates, knee_point, similarity_scores, BandwidthPolicy, SimilarityMetric};
use unlearn_core::inversion::train_generator;
use unlearn_core::model::{train_classifier, train_oracle, AugmentationSet, TrainConfig, Transform};
use unlearn_core::pipeline::PipelineConfig;
use unlearn_core::relearn::{unlearn, RelearnConfig};
use unlearn_core::util::derive_seed;

fn main() {
    let base = PipelineConfig::moons_default(7);
    let clean = make_moons(100, 0.1, derive_seed(7, "dataset")).unwrap();
    let (d_r, d_e) = region_removal_split(&clean, 1, 20).unwrap();
    let is_region: Vec<bool> = (0..clean.len()).map(|i| {
        d_e.iter().any(|(x, _)| {
            x[IxDyn(&[0])] == clean.input(i)[IxDyn(&[0])] && x[IxDyn(&[1])] == clean.input(i)[IxDyn(&[1])]
        })
    }).collect();
    let aug = AugmentationSet::new(vec![Transform::GaussianJitter { sigma: 0.3 }]);
    let original = train_classifier(&clean, &aug, &base.train).unwrap();
    let ocfg = TrainConfig { epochs: 800, learning_rate: 0.1, seed: derive_seed(7, "oracle"), ..TrainConfig::default() };
    let oracle = train_oracle(&original, &d_r, &aug, &ocfg).unwrap();
    let (generator, _) = train_generator(&original, &aug, &base.inversion).unwrap();
    let targets: std::collections::BTreeSet<u32> = [1u32].into_iter().collect();
    let mut fc = base.filtration.clone();
    fc.target_count = 600;
    let d_e_rho = sample_target_subset(&d_e, 0.25, derive_seed(0, "rho")).unwrap();
    let cands = generate_candidates(&generator, &original, &aug, &fc, derive_seed(0, "cand")).unwrap();
    let (_, info) = similarity_scores(&cands, &d_e_rho, &original, &fc).unwrap();
    fc.metric = SimilarityMetric::Rbf { bandwidth: BandwidthPolicy::Fixed(info.sigma.unwrap() / 12.0) };
    let (scores, _) = similarity_scores(&cands, &d_e_rho, &original, &fc).unwrap();
    let t_f = knee_point(&scores, 1.0).unwrap().map(|k| k.value).unwrap_or(f64::INFINITY);
    let (d_unl, _, _) = build_unlearn_set(&cands, &scores, t_f, &targets).unwrap();
    let rcfg = RelearnConfig { epochs: 5, learning_rate: 0.001, seed: derive_seed(0, "relearn"), ..RelearnConfig::default() };
    let (unl, _) = unlearn(&original, &d_unl, &aug, &rcfg).unwrap();
    println!("kl_o total {:.4}, d_r {:.1}", kl_to_reference(&unl, &oracle, &clean).unwrap(), accuracy(&unl, &d_r).unwrap());
    let mut contrib: Vec<(f64, bool, f64, f64)> = (0..clean.len()).map(|i| {
        let x = clean.input(i);
        let po = oracle.predict_proba(&x.view()).unwrap();
        let pu = unl.predict_proba(&x.view()).unwrap();
        let kl: f64 = po.iter().zip(&pu).map(|(&r, &m)| if r > 0.0 { r * (r / m.max(1e-12)).ln() } else { 0.0 }).sum();
        (kl, is_region[i], po[1], pu[1])
    }).collect();
    let region_sum: f64 = contrib.iter().filter(|c| c.1).map(|c| c.0).sum();
    let rest_sum: f64 = contrib.iter().filter(|c| !c.1).map(|c| c.0).sum();
    println!("region contribution {:.4}, rest {:.4} (mean over 100)", region_sum / 100.0, rest_sum / 100.0);
    contrib.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (kl, reg, po, pu) in contrib.iter().take(15) {
        println!("kl {kl:.3} region {reg} oracle_p1 {po:.3} unl_p1 {pu:.3}");
    }
}
