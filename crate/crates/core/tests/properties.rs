use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use themewise_core::itas::{fuse, scores_to_weights, scores_to_weights_masked, uniform_weights};
use themewise_core::model::ThemeEmbedding;
use themewise_core::numeric::random_matrix;
use themewise_core::tcl::{stage1, stage2, AttentionParams, Stage};
use themewise_core::{
    compute_metrics, Feedback, FeedbackSource, ItasMode, Label, Model, ModelConfig, PerTheme, SessionFeatures,
    ThemeId,
};

fn scores() -> impl Strategy<Value = PerTheme<f64>> {
    proptest::array::uniform5(0.0f64..=10.0).prop_map(|a| PerTheme::from_fn(|t| a[t.index()]))
}

fn session(lengths: [usize; 5], d: usize, seed: u64, s: PerTheme<f64>) -> SessionFeatures {
    SessionFeatures {
        session_id: format!("p{seed}"),
        label: None,
        themes: PerTheme::from_fn(|t| ThemeEmbedding {
            tokens: (0..lengths[t.index()]).map(|i| format!("t{i}")).collect(),
            x: random_matrix(lengths[t.index()], d, seed ^ (t.index() as u64 + 1)),
        }),
        feedback: Feedback {
            scores: s,
            source: FeedbackSource::Clinician,
            rationales: PerTheme::default(),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(lengths in proptest::array::uniform5(1usize..7), d in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let themes: Vec<_> = (0..5).map(|i| random_matrix(lengths[i], d, seed.wrapping_add(i as u64))).collect();
        let s1 = stage1(&themes, &AttentionParams::init(d, Stage::Stage1, &mut rng)).unwrap();
        let s2 = stage2(&s1.outputs(), &AttentionParams::init(d, Stage::Stage2, &mut rng)).unwrap();
        let mut mats: Vec<_> = s1.caches.iter().map(|c| c.a.clone()).collect();
        mats.push(s2.cache.a.clone());
        for a in &mats {
            for r in 0..a.rows() {
                let row = a.row(r);
                prop_assert!(row.iter().all(|x| *x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let parts = s2.resplit().unwrap();
        for (p, t) in parts.iter().zip(&themes) {
            prop_assert_eq!(p.shape(), t.shape());
        }
    }

    #[test]
    fn normalized_weights_sum_to_one(s in scores()) {
        let w = scores_to_weights(&s, ItasMode::Normalized).unwrap();
        let sum: f64 = w.alpha.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for t in ThemeId::ALL {
            prop_assert!(*w.alpha.get(t) > 0.0);
            prop_assert_eq!(*w.w.get(t), s.get(t) / 10.0);
        }
    }

    #[test]
    fn literal_weights_are_one_plus_w(s in scores()) {
        let w = scores_to_weights(&s, ItasMode::Literal).unwrap();
        for t in ThemeId::ALL {
            prop_assert_eq!(*w.alpha.get(t), 1.0 + s.get(t) / 10.0);
        }
    }

    #[test]
    fn masked_theme_gets_no_weight(s in scores(), drop in 0usize..5) {
        let mut active = [true; 5];
        active[drop] = false;
        let w = scores_to_weights_masked(&s, ItasMode::Normalized, &active).unwrap();
        prop_assert_eq!(*w.alpha.get(ThemeId::ALL[drop]), 0.0);
        prop_assert!((w.alpha.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fused_vector_is_sum_of_contributions(lengths in proptest::array::uniform5(1usize..6), seed in any::<u64>(), s in scores()) {
        let themes: Vec<_> = (0..5).map(|i| random_matrix(lengths[i], 4, seed.wrapping_add(i as u64))).collect();
        let alpha = scores_to_weights(&s, ItasMode::Normalized).unwrap().alpha.values().to_vec();
        let f = fuse(&themes, &alpha).unwrap();
        for c in 0..4 {
            let sum: f64 = f.contributions.iter().map(|m| m.get(0, c)).sum();
            prop_assert!((sum - f.x_final.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let lab = |b: bool| if b { Label::Depressed } else { Label::NonDepressed };
        let pairs: Vec<_> = pairs.into_iter().map(|(p, t)| (lab(p), lab(t))).collect();
        let m = compute_metrics(&pairs).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.wa_precision, m.wa_recall, m.wa_f1, m.g_mean, m.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        let correct = pairs.iter().filter(|(p, t)| p == t).count() as f64;
        prop_assert_eq!(m.accuracy, correct / pairs.len() as f64);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions(lengths in proptest::array::uniform5(1usize..5), seed in any::<u64>(), s in scores()) {
        let model = Model::init(ModelConfig::new(6), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = Model::from_checkpoint(&model.to_checkpoint(seed, serde_json::json!({}))).unwrap();
        let f = session(lengths, 6, seed, s);
        let a = model.predict(&f).unwrap();
        let b = back.predict(&f).unwrap();
        prop_assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        prop_assert!(a.probability > 0.0 && a.probability < 1.0);
    }

    #[test]
    fn equal_scores_match_uniform_weights(v in 0.0f64..=10.0) {
        let w = scores_to_weights(&PerTheme::from_fn(|_| v), ItasMode::Normalized).unwrap();
        prop_assert_eq!(w.alpha, uniform_weights(&[true; 5]).unwrap().alpha);
    }
}
