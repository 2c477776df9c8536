//! Property tests for the module invariants that hold over whole input
//! families rather than single examples.

use ndarray::{Array1, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inctrl_core::data::{
    build_protocol, select_prompt_set, DatasetManifest, ManifestEntry, NormalSelector, PromptPool,
    ProtocolSpec, Split,
};
use inctrl_core::encoder::{EncoderBackend, ImageTensor, MockBackend, MockConfig};
use inctrl_core::image_residual::{adapt_feature, prompt_prototype, AdapterParams};
use inctrl_core::patch_residual::{layer_residual_map, patch_level_score};
use inctrl_core::text_prior::{text_prior_score, TextPriorConfig, TextPrototypes};
use inctrl_core::training::sample_episode;
use inctrl_core::{rank_metrics, Error};

fn grid_strategy(h: usize, w: usize, d: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(-1.0f64..1.0, h * w * d)
        .prop_map(move |v| Array3::from_shape_vec((h, w, d), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Mock backends keep every layer on one (h, w, d) geometry and every
    /// value finite and bounded, for any configuration.
    #[test]
    fn mock_backend_geometry_and_bounds(
        layers in 1usize..4,
        grid in 1usize..5,
        patch_dim in 1usize..9,
        global_dim in 1usize..17,
        seed in any::<u64>(),
        fill in -0.9f64..0.9,
    ) {
        let backend = MockBackend::new(MockConfig {
            layers, grid, patch_dim, global_dim, seed, resolution: 4,
        }).unwrap();
        let img = ImageTensor::new(Array3::from_elem((3, 4, 4), fill)).unwrap();
        let maps = backend.encode_image(&img).unwrap();
        prop_assert_eq!(maps.layer_count(), layers);
        prop_assert_eq!(maps.grid_shape(), (grid, grid, patch_dim));
        prop_assert_eq!(maps.class_embedding().len(), global_dim);
        for layer in maps.layers() {
            prop_assert!(layer.iter().all(|v| v.is_finite() && v.abs() <= 10.0));
        }
    }

    /// Residuals stay in [0, 2]; permuting prompts changes nothing; adding
    /// a prompt can never increase any residual.
    #[test]
    fn residual_range_permutation_and_monotonicity(
        query in grid_strategy(2, 2, 3),
        p1 in grid_strategy(2, 2, 3),
        p2 in grid_strategy(2, 2, 3),
        extra in grid_strategy(2, 2, 3),
    ) {
        let base = layer_residual_map(&query, &[&p1, &p2], None).unwrap();
        prop_assert!(base.values().iter().all(|v| (0.0..=2.0).contains(v)));

        let swapped = layer_residual_map(&query, &[&p2, &p1], None).unwrap();
        for (a, b) in base.values().iter().zip(swapped.values().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let widened = layer_residual_map(&query, &[&p1, &p2, &extra], None).unwrap();
        for (narrow, wide) in base.values().iter().zip(widened.values().iter()) {
            prop_assert!(wide <= &(narrow + 1e-12));
        }

        let duplicated = layer_residual_map(&query, &[&p1, &p2, &p1, &p2], None).unwrap();
        for (a, b) in base.values().iter().zip(duplicated.values().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        prop_assert!(patch_level_score(&base) <= 2.0);
    }

    /// Prompt prototypes ignore prompt order and whole-set duplication.
    #[test]
    fn prototype_permutation_invariance(
        a in proptest::collection::vec(-2.0f64..2.0, 6),
        b in proptest::collection::vec(-2.0f64..2.0, 6),
        c in proptest::collection::vec(-2.0f64..2.0, 6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AdapterParams::init(6, None, &mut rng).unwrap();
        let (a, b, c) = (Array1::from_vec(a), Array1::from_vec(b), Array1::from_vec(c));
        let base = prompt_prototype(&[a.clone(), b.clone(), c.clone()], &params).unwrap();
        let permuted = prompt_prototype(&[c.clone(), a.clone(), b.clone()], &params).unwrap();
        let doubled = prompt_prototype(
            &[a.clone(), b.clone(), c.clone(), a.clone(), b.clone(), c.clone()],
            &params,
        ).unwrap();
        for i in 0..6 {
            prop_assert!((base[i] - permuted[i]).abs() < 1e-12);
            prop_assert!((base[i] - doubled[i]).abs() < 1e-12);
        }
        // Prototype of one vector is its adapted feature.
        let single = prompt_prototype(std::slice::from_ref(&a), &params).unwrap();
        let adapted = adapt_feature(&a, &params).unwrap();
        for i in 0..6 {
            prop_assert!((single[i] - adapted[i]).abs() < 1e-12);
        }
    }

    /// The text prior is a probability, complements under prototype swap,
    /// and is invariant to a shared logit shift.
    #[test]
    fn text_prior_softmax_properties(
        v in proptest::collection::vec(-3.0f64..3.0, 4),
        fn_ in proptest::collection::vec(-3.0f64..3.0, 4),
        fa in proptest::collection::vec(-3.0f64..3.0, 4),
        shift in -50.0f64..50.0,
    ) {
        let cfg = TextPriorConfig { temperature: 1.0, normalize: false };
        let v = Array1::from_vec(v);
        let protos = TextPrototypes {
            normal: Array1::from_vec(fn_.clone()),
            abnormal: Array1::from_vec(fa.clone()),
        };
        let s = text_prior_score(&v, &protos, &cfg).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);

        let swapped = TextPrototypes {
            normal: protos.abnormal.clone(),
            abnormal: protos.normal.clone(),
        };
        let s_swap = text_prior_score(&v, &swapped, &cfg).unwrap();
        prop_assert!((s + s_swap - 1.0).abs() < 1e-9);

        // Shifting both logits by the same constant leaves the score alone.
        // Adding c*v/|v|^2 to both prototypes shifts both dot products by c.
        let norm_sq = v.dot(&v);
        prop_assume!(norm_sq > 1e-6);
        let offset = &v * (shift / norm_sq);
        let shifted = TextPrototypes {
            normal: &protos.normal + &offset,
            abnormal: &protos.abnormal + &offset,
        };
        let s_shift = text_prior_score(&v, &shifted, &cfg).unwrap();
        prop_assert!((s - s_shift).abs() < 1e-6, "{s} vs {s_shift}");
    }

    /// AUROC/AUPRC are invariant under strictly increasing transforms and
    /// AUROC flips exactly under label negation.
    #[test]
    fn rank_metric_invariances(
        raw in proptest::collection::vec(0u8..50, 4..60),
        flips in proptest::collection::vec(any::<bool>(), 4..60),
    ) {
        let n = raw.len().min(flips.len());
        let scores: Vec<f64> = raw[..n].iter().map(|v| f64::from(*v) / 10.0).collect();
        let mut labels = flips[..n].to_vec();
        labels[0] = true;
        labels[1] = false;
        let (auroc, auprc) = rank_metrics(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&auroc));
        prop_assert!((0.0..=1.0).contains(&auprc));

        let affine: Vec<f64> = scores.iter().map(|s| 0.5 * s + 3.0).collect();
        prop_assert_eq!(rank_metrics(&affine, &labels).unwrap(), (auroc, auprc));

        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let (flipped_auroc, _) = rank_metrics(&scores, &flipped).unwrap();
        prop_assert!((auroc + flipped_auroc - 1.0).abs() < 1e-12);
    }

    /// Episodes sampled from random manifests always satisfy the episode
    /// invariants, and failures only happen for want of normal images.
    #[test]
    fn episodes_are_always_valid(
        normals in 0usize..12,
        anomalies in 0usize..6,
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(normals + anomalies > 0);
        let mut entries = Vec::new();
        for i in 0..normals {
            entries.push(ManifestEntry {
                path: format!("n{i}.png").into(),
                anomalous: false,
                category: format!("c{}", i % 3),
                split: Split::Train,
            });
        }
        for i in 0..anomalies {
            entries.push(ManifestEntry {
                path: format!("a{i}.png").into(),
                anomalous: true,
                category: "c0".into(),
                split: Split::Train,
            });
        }
        let manifest = DatasetManifest::new("m", entries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_episode(&manifest, k, &mut rng) {
            Ok(episode) => {
                episode.check().unwrap();
                prop_assert_eq!(episode.prompts.len(), k);
            }
            Err(Error::InsufficientData(_)) => {
                // Legal only when the normal pool (minus a normal query)
                // cannot cover k.
                prop_assert!(normals < k + 1);
            }
            Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other}"))),
        }
    }

    /// Protocol relabeling conserves entry count and paths, and prompt
    /// selection returns only normal train-split images.
    #[test]
    fn protocol_conservation_and_prompt_validity(
        per_class in 1usize..6,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut entries = Vec::new();
        for class in 0..4 {
            for i in 0..per_class {
                entries.push(ManifestEntry {
                    path: format!("{class}/{i}.png").into(),
                    anomalous: false,
                    category: class.to_string(),
                    split: if i % 2 == 0 { Split::Train } else { Split::Test },
                });
            }
        }
        let manifest = DatasetManifest::new("m", entries).unwrap();
        let spec = ProtocolSpec::multi_class(NormalSelector::EvenNumber);
        let relabeled = build_protocol(&manifest, &spec).unwrap();
        prop_assert_eq!(relabeled.len(), manifest.len());
        for (before, after) in manifest.entries.iter().zip(&relabeled.entries) {
            prop_assert_eq!(&before.path, &after.path);
            prop_assert_eq!(&before.category, &after.category);
            let expected = !matches!(after.category.as_str(), "0" | "2");
            prop_assert_eq!(after.anomalous, expected);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(prompts) = select_prompt_set(&relabeled, k, &mut rng, None, PromptPool::default()) {
            for p in &prompts {
                prop_assert!(!p.anomalous);
                prop_assert_eq!(p.split, Split::Train);
            }
            // Same seed, same prompts.
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let again = select_prompt_set(&relabeled, k, &mut rng2, None, PromptPool::default()).unwrap();
            prop_assert_eq!(prompts, again);
        }
    }
}
