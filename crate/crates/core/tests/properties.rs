//! Invariants over random inputs.

mod common;

use dnas_core::latency::{candidate_latencies, total_latency};
use dnas_core::prunode::MaskState;
use dnas_core::pruning::{block_probabilities, prune_layer, SkipInjection};
use dnas_core::search::{run_search, Search};
use dnas_core::supernet::{layer_forward, Binder, SuperNet};
use dnas_core::tensor::{softmax_values, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(z in prop::collection::vec(-30.0..30.0f64, 1..9), c in -50.0..50.0f64) {
        let p = softmax_values(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax_values(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_stay_valid(max_steps in 2usize..12, g in prop::sample::select(vec![8usize, 16, 32]),
                        steps in prop::collection::vec((0.0..0.2f64, -1.5..1.5f64), 1..40)) {
        let mut st = MaskState::new(max_steps * g, g).unwrap();
        let mut progress = 0.0;
        for (dp, signal) in steps {
            progress = (progress + dp).min(1.0);
            let before = st.clone();
            let u = st.update_masks(progress, signal);
            st.check().map_err(|e| TestCaseError::fail(e.to_string()))?;
            if u.was_frozen {
                prop_assert_eq!(&st, &before);
            } else {
                let d = 0.6 * (1.0 - progress) * (1.0 - progress);
                prop_assert!((st.l - st.s - d).abs() < 1e-12);
                prop_assert!(st.s >= 0.0);
            }
        }
    }

    #[test]
    fn constant_signal_converges(max_steps in 2usize..16, g in prop::sample::select(vec![8usize, 16, 32]),
                                 mag in 0.05..1.0f64, positive in any::<bool>(), n in 20usize..60) {
        let max = max_steps * g;
        let mut st = MaskState::new(max, g).unwrap();
        let signal = if positive { mag } else { -mag };
        for i in 0..=n {
            st.update_masks(i as f64 / n as f64, signal);
        }
        prop_assert!(st.is_frozen());
        let want = if positive { (max - g, max) } else { (g, 2 * g) };
        prop_assert_eq!((st.small_mask, st.large_mask), want);
    }

    #[test]
    fn pruning_never_grows_or_empties_a_layer(seed in any::<u64>(), ts in prop::collection::vec(0.0..0.7f64, 1..8)) {
        let (cfg, ..) = common::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = SuperNet::new(&cfg.supernet, &mut rng).unwrap();
        for l in &mut net.layers {
            for w in l.arch_weights_mut() {
                w.value = rand::Rng::gen_range(&mut rng, -2.0..2.0);
            }
        }
        let mut ts = ts;
        ts.sort_by(f64::total_cmp);
        for t in ts {
            for l in &mut net.layers {
                let before = (l.blocks.len(), l.candidate_count());
                let rep = prune_layer(l, t);
                prop_assert!(!l.blocks.is_empty());
                prop_assert!(l.blocks.len() <= before.0 && l.candidate_count() <= before.1);
                if rep.injected.is_some() {
                    prop_assert!(l.plan.skippable);
                }
                prop_assert!(l.blocks.iter().filter(|b| b.is_skip()).count() <= 1);
                let probs = block_probabilities(l);
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_output_is_linear_in_coefficients(seed in any::<u64>(), a in prop::collection::vec(-1.0..1.0f64, 8),
                                              b in prop::collection::vec(-1.0..1.0f64, 8), inject in any::<bool>()) {
        let (cfg, ..) = common::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = SuperNet::new(&cfg.supernet, &mut rng).unwrap();
        let mut layer = net.layers.remove(1);
        if inject {
            layer.blocks.truncate(1);
            layer.blocks.push(dnas_core::supernet::LayerBlock::Skip { theta: dnas_core::supernet::ArchWeight::new(0.0) });
            layer.skip_injected = true;
        }
        let n = layer.candidate_count();
        let (a, b) = (&a[..n], &b[..n]);
        let skip = SkipInjection::default();
        let x: Vec<f64> = (0..24).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect();
        let run = |coef: &[f64]| {
            let mut g = Graph::new();
            let mut binder = Binder::frozen(&net.store);
            let xv = g.constant(Tensor::matrix(2, 12, x.clone()).unwrap());
            let av = g.constant(Tensor::vector(coef.to_vec()).unwrap());
            let y = layer_forward(&mut g, &mut binder, &net.store, &layer, xv, av, skip).unwrap();
            g.value(y).data().to_vec()
        };
        let mix: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.3 * p - 1.7 * q).collect();
        let (ya, yb, ym) = (run(a), run(b), run(&mix));
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (0.3 * ya[i] - 1.7 * yb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn latency_is_linear_with_exact_gradient(seed in any::<u64>(), raw in prop::collection::vec(0.0..1.0f64, 24)) {
        let (cfg, _, _, lut) = common::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SuperNet::new(&cfg.supernet, &mut rng).unwrap();
        let lats = candidate_latencies(&net, &lut).unwrap();
        let mut g = Graph::new();
        let mut coef = Vec::new();
        let mut want = lut.fixed_latency(&cfg.supernet).unwrap();
        let mut off = 0;
        for l in &lats {
            let a = raw[off..off + l.len()].to_vec();
            want += a.iter().zip(l).map(|(x, y)| x * y).sum::<f64>();
            coef.push(g.param(Tensor::vector(a).unwrap()));
            off += l.len();
        }
        let lat = total_latency(&mut g, &net, &coef, &lut).unwrap();
        prop_assert!((g.value(lat).item() - want).abs() < 1e-9);
        g.backward(lat).unwrap();
        for (c, l) in coef.iter().zip(&lats) {
            prop_assert_eq!(g.grad(*c).unwrap(), l.as_slice());
        }
    }
}

#[test]
fn steps_touch_only_their_own_weights() {
    let (cfg, tr, _, lut) = common::tiny();
    let mut s = Search::new(&cfg.supernet, cfg.search().unwrap().clone(), &tr, &lut).unwrap();
    let rows: Vec<usize> = (0..32).collect();
    let (psi, theta) = (s.net().store.checksum(), s.net().theta_checksum());
    s.psi_step(&rows).unwrap();
    assert_ne!(s.net().store.checksum(), psi);
    assert_eq!(s.net().theta_checksum(), theta);
    let psi = s.net().store.checksum();
    s.theta_step(&rows).unwrap();
    assert_eq!(s.net().store.checksum(), psi);
    assert_ne!(s.net().theta_checksum(), theta);
}

#[test]
fn warmup_is_independent_of_alpha_and_lambda() {
    let (cfg, tr, _, lut) = common::tiny();
    let base = cfg.search().unwrap().clone();
    let mut other = base.clone();
    other.alpha = 2.5;
    other.lambda = 0.4;
    let mut a = Search::new(&cfg.supernet, base, &tr, &lut).unwrap();
    let mut b = Search::new(&cfg.supernet, other, &tr, &lut).unwrap();
    let theta0 = a.net().theta_checksum();
    a.run_warmup().unwrap();
    b.run_warmup().unwrap();
    assert_eq!(a.net().store.checksum(), b.net().store.checksum());
    assert_eq!(a.net().theta_checksum(), theta0);
    assert_eq!(b.net().theta_checksum(), theta0);
    assert_eq!(a.checkpoint().rng, b.checkpoint().rng);
}

#[test]
fn architecture_steps_descend_latency_when_it_dominates() {
    let (cfg, tr, _, lut) = common::tiny();
    let mut sc = cfg.search().unwrap().clone();
    sc.alpha = 1e4;
    let mut s = Search::new(&cfg.supernet, sc, &tr, &lut).unwrap();
    let rows: Vec<usize> = (0..32).collect();
    let mut prev = s.expected_latency().unwrap();
    for _ in 0..10 {
        s.theta_step(&rows).unwrap();
        let now = s.expected_latency().unwrap();
        assert!(now < prev, "{now} >= {prev}");
        prev = now;
    }
}

#[test]
fn sampled_architectures_fit_the_space() {
    let (cfg, tr, _, lut) = common::tiny();
    for seed in 0..3 {
        let mut sc = cfg.search().unwrap().clone();
        sc.seed = seed;
        let out = run_search(&cfg.supernet, &sc, &tr, &lut).unwrap();
        out.arch.validate_against(&cfg.supernet).unwrap();
        assert!(out.net.layers.iter().all(|l| l.blocks.len() == 1));
    }
}
