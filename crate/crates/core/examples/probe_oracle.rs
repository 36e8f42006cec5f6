// scratch probe: jitter scale for oracle reversion + bandwidth flag quality
use ndarray::IxDyn;
use unlearn_core::data::sample_target_subset;
use unlearn_core::eval::accuracy;
use unlearn_core::filtration::{generate_candidates, knee_point, similarity_scores, BandwidthPolicy, FiltrationConfig, SimilarityMetric};
use unlearn_core::model::{train_classifier, train_oracle, TrainConfig, AugmentationSet, Transform};
use unlearn_core::pipeline::{build_scenario, PipelineConfig};
use unlearn_core::inversion::train_generator;

fn main() {
    let cfg = PipelineConfig::moons_default(7);
    let scen = build_scenario(&cfg.dataset, &cfg.split, cfg.seed).unwrap();

    for jitter in [0.05f64, 0.1, 0.15, 0.2, 0.3] {
        let aug = AugmentationSet::new(vec![Transform::GaussianJitter { sigma: jitter }]);
        let original = train_classifier(&scen.train, &aug, &cfg.train).unwrap();
        let ocfg = TrainConfig {
            epochs: 400,
            learning_rate: 0.01,
            weight_decay: 2e-4,
            seed: unlearn_core::util::derive_seed(7, "oracle"),
            ..TrainConfig::default()
        };
        let oracle = train_oracle(&original, &scen.d_r_train, &aug, &ocfg).unwrap();
        // mean class-1 prob over the pocket for both models
        let mut p_orig = 0.0;
        let mut p_oracle = 0.0;
        for (x, _) in scen.d_e_eval.iter() {
            p_orig += original.predict_proba(&x.view()).unwrap()[1];
            p_oracle += oracle.predict_proba(&x.view()).unwrap()[1];
        }
        p_orig /= scen.d_e_eval.len() as f64;
        p_oracle /= scen.d_e_eval.len() as f64;
        println!(
            "jitter {jitter}: orig d_r {:.1} d_e {:.1} (p1 {:.3}) | oracle d_r {:.1} d_e {:.1} (p1 {:.3})",
            accuracy(&original, &scen.d_r_eval).unwrap(),
            accuracy(&original, &scen.d_e_eval).unwrap(),
            p_orig,
            accuracy(&oracle, &scen.d_r_eval).unwrap(),
            accuracy(&oracle, &scen.d_e_eval).unwrap(),
            p_oracle,
        );
    }

    // flag quality vs ground-truth pocket membership, default jitter
    let aug = AugmentationSet::default_for_shape(scen.train.input_shape());
    let original = train_classifier(&scen.train, &aug, &cfg.train).unwrap();
    let (generator, _) = train_generator(&original, &aug, &cfg.inversion).unwrap();
    let d_e_rho = sample_target_subset(&scen.d_e_train, 0.25, 99).unwrap();
    let candidates = generate_candidates(&generator, &original, &aug, &cfg.filtration, 5).unwrap();
    // ground truth: candidate is pocket-like if its nearest training point is a D_e member
    let truth: Vec<bool> = (0..candidates.len())
        .map(|i| {
            let x = candidates.input(i);
            let (x0, x1) = (x[IxDyn(&[0])], x[IxDyn(&[1])]);
            let d2 = |p: &ndarray::ArrayD<f64>| {
                (p[IxDyn(&[0])] - x0).powi(2) + (p[IxDyn(&[1])] - x1).powi(2)
            };
            let de_min = scen.d_e_train.iter().map(|(p, _)| d2(p)).fold(f64::MAX, f64::min);
            let dr_min = scen.d_r_train.iter().map(|(p, _)| d2(p)).fold(f64::MAX, f64::min);
            de_min < dr_min
        })
        .collect();
    let n_true = truth.iter().filter(|&&t| t).count();
    println!("candidates {}, pocket-like by ground truth {}", candidates.len(), n_true);

    let (_, info) = similarity_scores(&candidates, &d_e_rho, &original, &cfg.filtration).unwrap();
    let cross_median = info.sigma.unwrap();
    // within-exemplar median
    let feats: Vec<Vec<f64>> = (0..d_e_rho.len())
        .map(|i| original.extract_features(&d_e_rho.input(i).view()).unwrap())
        .collect();
    let mut within = Vec::new();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let d: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            within.push(d);
        }
    }
    within.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let within_median = within.get(within.len() / 2).copied().unwrap_or(0.0);
    println!("cross median {cross_median:.3}, within-exemplar median {within_median:.3}");

    for (name, sigma) in [
        ("cross", cross_median),
        ("cross/2", cross_median / 2.0),
        ("cross/3", cross_median / 3.0),
        ("cross/4", cross_median / 4.0),
        ("within", within_median.max(1e-6)),
        ("within*2", (2.0 * within_median).max(1e-6)),
    ] {
        let mut fc = cfg.filtration.clone();
        fc.metric = SimilarityMetric::Rbf { bandwidth: BandwidthPolicy::Fixed(sigma) };
        let (scores, _) = similarity_scores(&candidates, &d_e_rho, &original, &fc).unwrap();
        let t_f = knee_point(&scores, 1.0).unwrap().map(|k| k.value).unwrap_or(f64::INFINITY);
        let flags: Vec<bool> = scores.iter().map(|&s| s >= t_f).collect();
        let tp = flags.iter().zip(&truth).filter(|(&f, &t)| f && t).count();
        let fp = flags.iter().zip(&truth).filter(|(&f, &t)| f && !t).count();
        let fnn = flags.iter().zip(&truth).filter(|(&f, &t)| !f && t).count();
        println!(
            "sigma {name} ({sigma:.3}): flagged {} | precision {:.3} recall {:.3}",
            tp + fp,
            tp as f64 / (tp + fp).max(1) as f64,
            tp as f64 / (tp + fnn).max(1) as f64
        );
    }
}
