#![allow(dead_code)]

use std::sync::OnceLock;

use gmvae_core::corpus::{build_corpus, Corpus, CorpusConfig, Split};
use gmvae_core::eval::macro_f1;
use gmvae_core::gmvae::{kl_diag_gaussian, Batch, Gmvae, MixturePrior, ModelConfig, ModelMode, Noise};
use gmvae_core::graph::Graph;
use gmvae_core::latent::transfer_code;
use gmvae_core::nn::{seeded, Mode};
use gmvae_core::Tensor;
use proptest::prelude::*;

fn simplex_ok(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

fn mixture(components: usize, dim: usize) -> impl Strategy<Value = (MixturePrior, Vec<f64>)> {
    (
        prop::collection::vec(-5.0f64..5.0, components * dim),
        prop::collection::vec(-8.0f64..8.0, dim),
        prop_oneof![Just((-2.0f64).exp()), Just(1.0), 0.05f64..3.0],
    )
        .prop_map(move |(means, z, std)| (MixturePrior::new(means, components, std).unwrap(), z))
}

fn tiny_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        build_corpus(&CorpusConfig { instruments: 3, pitches: 4, total_examples: 30, ..CorpusConfig::desk() }).unwrap()
    })
}

/// Fixed-seed sweep over `n` random inputs: instrument posteriors, graph
/// softmax and log-softmax rows, and closed-form KL. Returns the worst
/// deviation of a row sum from 1, the smallest probability and the
/// smallest KL seen.
pub fn probability_sweep(n: usize) -> (f64, f64, f64) {
    use rand::Rng as _;
    let mut rng = seeded(2024);
    let (mut sum_err, mut min_p, mut min_kl) = (0.0f64, f64::INFINITY, f64::INFINITY);
    let record = |row: &[f64], sum_err: &mut f64, min_p: &mut f64| {
        *sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        *min_p = row.iter().cloned().fold(*min_p, f64::min);
    };
    for i in 0..n {
        let k = 2 + i % 11;
        let dim = 1 + i % 16;
        let scale = [0.5, 5.0, 50.0][i % 3];
        let std = [(-2.0f64).exp(), 1.0, 0.3][i % 3];
        let means = (0..k * dim).map(|_| rng.random_range(-scale..scale)).collect();
        let prior = MixturePrior::new(means, k, std).unwrap();
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        record(&prior.posterior(&z), &mut sum_err, &mut min_p);

        let t = Tensor::from_fn(&[2, k], |_| rng.random_range(-scale..scale) * 4.0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t);
        let s = g.softmax(x);
        let ls = g.log_softmax(x);
        let e = g.exp(ls);
        for r in g.value(s).rows().chain(g.value(e).rows()) {
            record(r, &mut sum_err, &mut min_p);
        }

        let mq: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        let lv: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mp: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        min_kl = min_kl.min(kl_diag_gaussian(&mq, &lv, &mp, std)).min(kl_diag_gaussian(&mq, &lv, &mq, std));
    }
    (sum_err, min_p, min_kl)
}

#[test]
fn fixed_sweep_of_probability_invariants() {
    let (sum_err, min_p, min_kl) = probability_sweep(1000);
    assert!(sum_err <= 1e-6 && min_p >= 0.0 && min_kl >= -1e-6, "{sum_err} {min_p} {min_kl}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn instrument_posterior_is_a_distribution(((prior, z), _) in (2usize..13).prop_flat_map(|k| (mixture(k, 16), Just(k)))) {
        prop_assert!(simplex_ok(&prior.posterior(&z)));
    }

    #[test]
    fn graph_softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..200.0) {
        use rand::Rng as _;
        let mut rng = seeded(seed);
        let t = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-spread..spread));
        let mut g = Graph::<f64>::new();
        let x = g.constant(t);
        let s = g.softmax(x);
        let ls = g.log_softmax(x);
        let e = g.exp(ls);
        for r in g.value(s).rows().chain(g.value(e).rows()) {
            prop_assert!(simplex_ok(r));
        }
    }

    #[test]
    fn kl_is_non_negative(
        (mq, lvq, mp) in (1usize..17).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )),
        std in prop_oneof![Just((-2.0f64).exp()), Just(1.0), 0.01f64..5.0],
    ) {
        prop_assert!(kl_diag_gaussian(&mq, &lvq, &mp, std) >= -1e-6);
    }

    #[test]
    fn posterior_is_translation_equivariant(((prior, z), shift) in (2usize..8).prop_flat_map(|k| (mixture(k, 6), prop::collection::vec(-20.0f64..20.0, 6)))) {
        let moved_means: Vec<f64> = prior.means.iter().enumerate().map(|(i, m)| m + shift[i % prior.dim]).collect();
        let moved = MixturePrior::new(moved_means, prior.components, prior.std).unwrap();
        let zc: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        for (a, b) in prior.posterior(&z).iter().zip(moved.posterior(&zc)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn transfer_is_additive_in_alpha(
        (z, ms, mt) in (1usize..17).prop_flat_map(|d| (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
        )),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let step = transfer_code(&transfer_code(&z, &ms, &mt, a), &ms, &mt, b);
        let once = transfer_code(&z, &ms, &mt, a + b);
        for (x, y) in step.iter().zip(&once) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        prop_assert_eq!(transfer_code(&z, &ms, &mt, 0.0), z);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn macro_f1_ignores_example_order(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut seeded(seed));
        let (p2, t2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let a = macro_f1(&pred, &truth, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - macro_f1(&p2, &t2, 5).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(macro_f1(&truth, &truth, 5).unwrap(), 1.0);
    }

    #[test]
    fn batches_partition_the_split(batch_size in 1usize..40, seed in any::<u64>(), val in any::<bool>()) {
        let c = tiny_corpus();
        let split = if val { Split::Val } else { Split::Train };
        let batches = c.batches(split, batch_size, &mut seeded(seed)).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, c.indices(split));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch_size));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == batch_size));
    }

    #[test]
    fn masking_keeps_the_requested_share(percent in 0.0f64..=100.0, seed in any::<u64>()) {
        let c = tiny_corpus();
        let m = c.mask_labels(percent, &mut seeded(seed)).unwrap();
        for k in 0..c.instrument_classes() {
            let train: Vec<_> = m.examples.iter().filter(|e| e.split == Split::Train && e.instrument == k).collect();
            let kept = train.iter().filter(|e| e.labeled).count();
            prop_assert_eq!(kept, (percent / 100.0 * train.len() as f64).round() as usize);
        }
        prop_assert!(m.examples.iter().filter(|e| e.split == Split::Val).all(|e| e.labeled));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_kl_terms_are_non_negative(seed in any::<u64>(), labeled in prop::collection::vec(any::<bool>(), 4), vae in any::<bool>()) {
        use rand::Rng as _;
        let mode = if vae { ModelMode::VaeBaseline } else { ModelMode::Gmvae };
        let cfg = ModelConfig {
            frames: 4, bands: 5, latent_dim: 3, conv_channels: 3, hidden_units: 4,
            pitch_classes: 3, instrument_classes: 2, aux_hidden: 3,
            ..ModelConfig::reference(3, 2, mode)
        };
        let mut rng = seeded(seed);
        let model = Gmvae::<f64>::new(cfg, 1e-3, &mut rng).unwrap();
        let batch = Batch {
            x: Tensor::from_fn(&[4, 4, 5], |_| rng.random_range(-1.0..1.0)),
            pitch: (0..4).map(|_| rng.random_range(0..3)).collect(),
            instrument: labeled.iter().map(|&l| l.then(|| rng.random_range(0..2))).collect(),
        };
        let noise = Noise::draw(4, 3, &mut rng);
        let l = model.loss(&batch, &noise, Mode::Train).unwrap();
        prop_assert!(l.kl_pitch >= -1e-6);
        prop_assert!(l.expected_kl_timbre >= -1e-6);
        prop_assert!(l.kl_categorical >= -1e-6);
        prop_assert!(l.supervised_ce >= -1e-6);
    }
}
