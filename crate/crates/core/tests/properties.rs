use lvt_core::config::ModelConfig;
use lvt_core::fusion::{decompose_attention, fuse_lowrank, DellaLayer};
use lvt_core::harness::checkpoint::Checkpoint;
use lvt_core::harness::tokenizer::{decode, encode};
use lvt_core::latent::GaussianParams;
use lvt_core::metrics::{active_units, bleu, dist_n, jaccard_similarity, perplexity_from, LayerPosterior, PosteriorSummary};
use lvt_core::objective::{gaussian_kl, AnnealMode, AnnealSchedule};
use lvt_core::tensor::{RngState, Tensor};
use proptest::prelude::*;

fn gaussian(mean: Vec<f64>, log_var: Vec<f64>) -> GaussianParams<f64> {
    let p = mean.len();
    GaussianParams {
        mean: Tensor::from_vec(mean, &[1, p]).unwrap(),
        log_var: Tensor::from_vec(log_var, &[1, p]).unwrap(),
    }
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_equal_params(
        qm in prop::collection::vec(-5.0..5.0f64, 3),
        ql in prop::collection::vec(-8.0..8.0f64, 3),
        pm in prop::collection::vec(-5.0..5.0f64, 3),
        pl in prop::collection::vec(-8.0..8.0f64, 3),
    ) {
        let kl = gaussian_kl(&gaussian(qm.clone(), ql.clone()), &gaussian(pm, pl)).unwrap().item();
        prop_assert!(kl >= -1e-12);
        let same = gaussian_kl(&gaussian(qm.clone(), ql.clone()), &gaussian(qm, ql)).unwrap().item();
        prop_assert!(same.abs() < 1e-10);
    }

    #[test]
    fn beta_is_bounded_periodic_and_rises_within_a_period(period in 1usize..200, step in 0usize..1000) {
        let s = AnnealSchedule { mode: AnnealMode::Cyclical, period };
        let b = s.beta_at(step);
        prop_assert!((1e-5..=1.0).contains(&b));
        prop_assert_eq!(b, s.beta_at(step + period));
        if (step + 1) % period != 0 {
            prop_assert!(s.beta_at(step + 1) >= b);
        }
    }

    #[test]
    fn tokenizer_round_trips(s in any::<String>()) {
        prop_assert_eq!(decode(&encode(&s)), s);
    }

    #[test]
    fn diversity_metrics_are_bounded_and_order_free(xs in prop::collection::vec(sentence(), 2..6), shift in 0usize..6) {
        let mut ys = xs.clone();
        ys.rotate_left(shift % xs.len());
        if let Ok(d) = dist_n(&xs, 1) {
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dist_n(&ys, 1).unwrap());
        }
        let j = jaccard_similarity(&xs, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!((j - jaccard_similarity(&ys, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_a_percentage(c in sentence(), r in sentence()) {
        prop_assume!(!c.is_empty() && !r.is_empty());
        let b = bleu(&[c], &[vec![r]], 2).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }

    #[test]
    fn active_units_are_bounded_and_order_free(means in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 2..10)) {
        let s: Vec<PosteriorSummary> = means
            .iter()
            .map(|m| PosteriorSummary { layers: vec![LayerPosterior { layer: 1, mean: m.clone(), log_var: vec![0.0; 3] }] })
            .collect();
        let au = active_units(&s, 0.2).unwrap();
        prop_assert!((0.0..=3.0).contains(&au));
        let mut rev = s.clone();
        rev.reverse();
        prop_assert_eq!(au, active_units(&rev, 0.2).unwrap());
    }

    #[test]
    fn raising_likelihood_lowers_perplexity(ll in prop::collection::vec(-20.0..-0.1f64, 1..5), bump in 0.01..1.0f64) {
        let n: Vec<usize> = ll.iter().map(|_| 4).collect();
        let better: Vec<f64> = ll.iter().map(|l| l + bump).collect();
        prop_assert!(perplexity_from(&better, &n).unwrap().ppl < perplexity_from(&ll, &n).unwrap().ppl);
    }

    #[test]
    fn four_term_identity(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = RngState::new(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
        let (ei, ej, z) = (v(d), v(d), v(d));
        let wq: Vec<Vec<f64>> = (0..d).map(|_| v(d)).collect();
        let wk: Vec<Vec<f64>> = (0..d).map(|_| v(d)).collect();
        let t = decompose_attention(&ei, &ej, &z, &wq, &wk).unwrap();
        prop_assert!((t.sum() - t.raw).abs() <= 1e-10 * (1.0 + t.raw.abs()));
    }

    #[test]
    fn della_fusion_is_linear_in_the_values(seed in any::<u64>(), alpha in -3.0..3.0f64) {
        let cfg = ModelConfig { hidden_dim: 4, latent_dim: 3, rank: 2, init_std: 1.0, ..Default::default() };
        let mut rng = RngState::new(seed);
        let w = DellaLayer::<f64>::new(1, &cfg, &mut rng).unwrap();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.normal()).collect();
        let v = Tensor::from_vec(vals, &[2, 3, 4]).unwrap();
        let z = Tensor::from_vec((0..6).map(|_| rng.normal()).collect(), &[2, 3]).unwrap();
        let lhs = fuse_lowrank(&v.scale(alpha).unwrap(), &z, &w).unwrap().to_f64_vec();
        let rhs = fuse_lowrank(&v, &z, &w).unwrap().scale(alpha).unwrap().to_f64_vec();
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(-1e6..1e6f32, 1..40)) {
        let mut ck = Checkpoint::new(ModelConfig::default(), serde_json::json!({"step": 3}));
        ck.insert("t", &[vals.len()], vals.clone());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.get("t").unwrap().1, &vals);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
