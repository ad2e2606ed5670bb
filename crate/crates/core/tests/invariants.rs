//! Cross-module invariants as property tests.

use motiongen_core::decompose::{decompose_rule_based, DecomposerConfig, ScriptList, ScriptSource};
use motiongen_core::denoiser::{DenoiserModel, ModelConfig};
use motiongen_core::diffusion::{diffuse_with_noise, make_schedule, standard_normal, ScheduleKind, ScheduleParams};
use motiongen_core::metrics::{diversity, fid};
use motiongen_core::motion::{MotionSequence, Skeleton};
use motiongen_core::retrieval::{build_database, embed_scripts, rank_entries, score_entry, DbItem, HashTfEmbedder};
use motiongen_core::sampler::{select_branch, Branch, EditMask, Generator, GuidanceConfig};
use motiongen_core::synth::{build_dataset, random_composition, sample_rng, synthesize_text, Split, FPS, MAX_STEPS};
use motiongen_core::train::DataOptions;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule_params() -> impl Strategy<Value = ScheduleParams> {
    (2usize..300, 1e-5f64..1e-2, 1e-2f64..0.5).prop_map(|(steps, beta_start, beta_end)| ScheduleParams {
        steps,
        beta_start,
        beta_end,
        kind: ScheduleKind::Linear,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_bar_decreases_inside_unit_interval(p in schedule_params()) {
        let s = make_schedule(&p).unwrap();
        prop_assert_eq!(s.alpha_bar.len(), p.steps);
        let mut prev = 1.0;
        for &ab in &s.alpha_bar {
            prop_assert!(ab > 0.0 && ab < prev);
            prev = ab;
        }
        for t in 1..=p.steps {
            let (c0, ct) = s.posterior_coefficients(t).unwrap();
            prop_assert!(c0 > 0.0 && ct >= 0.0);
            prop_assert!(s.posterior_variance[t - 1] >= 0.0);
        }
    }

    #[test]
    fn zero_noise_diffusion_is_pure_scaling(p in schedule_params(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let s = make_schedule(&p).unwrap();
        let t = 1 + ((p.steps - 1) as f64 * frac) as usize;
        let x0 = standard_normal((5, 3), &mut ChaCha8Rng::seed_from_u64(seed));
        let xt = diffuse_with_noise(&x0, &Array2::zeros((5, 3)), t, &s);
        let k = s.alpha_bar[t - 1].sqrt();
        for (a, b) in xt.iter().zip(x0.iter()) {
            prop_assert!((a - k * b).abs() <= 1e-12);
        }
    }

    #[test]
    fn respacing_keeps_endpoints(p in schedule_params(), frac in 0.0f64..1.0) {
        let s = make_schedule(&p).unwrap();
        let k = 1 + ((p.steps - 1) as f64 * frac) as usize;
        let r = s.respaced(k).unwrap();
        prop_assert_eq!(r.model_timesteps.len(), k);
        prop_assert_eq!(*r.model_timesteps.last().unwrap(), p.steps);
        prop_assert!(r.model_timesteps.windows(2).all(|w| w[0] < w[1]));
        let last = (r.alpha_bar[k - 1] - s.alpha_bar[p.steps - 1]).abs();
        prop_assert!(last <= 1e-12);
    }

    #[test]
    fn extreme_lambdas_pick_one_branch(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            prop_assert_eq!(select_branch(0.0, &mut rng), Branch::A);
            prop_assert_eq!(select_branch(1.0, &mut rng), Branch::B);
        }
    }

    #[test]
    fn synthetic_text_decomposes_to_its_scripts(seed in any::<u64>(), index in 0usize..10_000) {
        let skel = Skeleton::stick_figure();
        let mut rng = sample_rng(seed, index);
        let comp = random_composition(&mut rng, MAX_STEPS, &skel);
        let (text, truth) = synthesize_text(&comp, seed ^ index as u64).unwrap();
        let got = decompose_rule_based(&text, &DecomposerConfig::default()).unwrap();
        prop_assert_eq!(got.scripts, truth.scripts);
    }

    #[test]
    fn fid_is_symmetric_and_translation_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = standard_normal((40, 3), &mut rng);
        let b = standard_normal((50, 3), &mut rng) * 1.5 + 0.3;
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        let moved = fid(&(&a + shift), &(&b + shift)).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!((ab - moved).abs() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn diversity_is_nonnegative_and_scales(seed in any::<u64>(), k in 0.1f64..10.0) {
        let x = standard_normal((30, 4), &mut ChaCha8Rng::seed_from_u64(seed));
        let d = diversity(&x, 12, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let dk = diversity(&(&x * k), 12, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((dk - k * d).abs() <= 1e-9 * (1.0 + dk));
    }
}

fn script_list() -> impl Strategy<Value = Vec<String>> {
    const VOCAB: [&str; 6] = [
        "walk forward",
        "jump in place",
        "raise the left arm",
        "squat down",
        "nod the head",
        "turn to the left",
    ];
    prop::collection::vec(prop::sample::select(&VOCAB[..]), 1..4)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ranking_is_sorted_permutation_and_self_scores_one(query in script_list(), seed in 0u64..50) {
        let skel = Skeleton::stick_figure();
        let emb = HashTfEmbedder::default();
        let ds = build_dataset(30, seed, &skel).unwrap();
        let db = build_database(ds.split(Split::Train).map(|(i, s)| DbItem::from_sample(i, s)), &emb).unwrap();
        let q = embed_scripts(&ScriptList::new(query, ScriptSource::GroundTruth), &emb).unwrap();
        let ranked = rank_entries(&q, &db, None);
        prop_assert_eq!(ranked.len(), db.len());
        let mut ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        ids.sort_unstable();
        prop_assert!(ids.iter().enumerate().all(|(i, id)| i == *id));
        prop_assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        for (id, score) in &ranked {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(score));
            prop_assert_eq!(*score, score_entry(&q, &db.entries[*id]));
        }
        for e in &db.entries {
            prop_assert!((score_entry(&e.script_embeddings, e) - 1.0).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn imputation_keeps_every_fixed_entry(
        seed in any::<u64>(),
        frame_bits in prop::collection::vec(any::<bool>(), 24),
        joint_bits in prop::collection::vec(any::<bool>(), 33),
        prompt in prop::option::of(Just("a person squats down")),
    ) {
        let skel = Skeleton::stick_figure();
        let emb = HashTfEmbedder { dim: 16 };
        let ds = build_dataset(12, 3, &skel).unwrap();
        let db = build_database(ds.split(Split::Train).map(|(i, s)| DbItem::from_sample(i, s)), &emb).unwrap();
        let model = DenoiserModel::new(ModelConfig {
            width: 8,
            heads: 2,
            encoder_layers: 1,
            fusion_layers: 1,
            ff_hidden: 16,
            patch: 4,
            feature_dim: skel.feature_dim(),
            embed_dim: 16,
            use_reference: true,
            seed,
        })
        .unwrap();
        let schedule = make_schedule(&ScheduleParams::default()).unwrap();
        let decomposer = DecomposerConfig::default();
        let gen = Generator {
            model: &model,
            schedule: &schedule,
            stats: &ds.stats,
            db: Some(&db),
            embedder: &emb,
            decomposer: &decomposer,
            data: DataOptions { reference_frames: 24, ..Default::default() },
            fps: FPS,
        };
        let base: MotionSequence = ds.samples[0].motion.fit_length(24);
        let mask = EditMask::new(&frame_bits, &joint_bits, base.clone()).unwrap();
        let lambda = if prompt.is_some() { 0.5 } else { 0.0 };
        let cfg = GuidanceConfig { steps: 5, seed, lambda, ..Default::default() };
        let out = gen.impute(prompt, &mask, &cfg).unwrap();
        prop_assert_eq!(out.frames.dim(), base.frames.dim());
        for ((f, k), fixed) in mask.fixed.indexed_iter() {
            if *fixed {
                prop_assert_eq!(out.frames[[f, k]], base.frames[[f, k]]);
            }
        }
    }
}
