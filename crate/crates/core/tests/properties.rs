use gridmoe::dso::{
    backbone_multiplier, consistency_score, head_multipliers, DsoConfig, LossTracker,
};
use gridmoe::moe::{gate, GateParams, MoeConfig, MoeLayer};
use gridmoe::tensor::{finite_diff_check, softmax, Tape, Tensor};
use proptest::prelude::*;

fn vec_in(
    len: std::ops::RangeInclusive<usize>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn gate_case() -> impl Strategy<Value = (MoeConfig, GateParams, Vec<f64>)> {
    (1usize..=10, 1usize..=6, 1usize..=6)
        .prop_flat_map(|(n, d, cin)| {
            let k = 1..=n.min(3);
            (
                Just((n, d, cin)),
                k,
                0.05f64..2.0,
                vec_in(d * cin..=d * cin, -1.0, 1.0),
                vec_in(d * n..=d * n, -1.0, 1.0),
                vec_in(cin..=cin, -3.0, 3.0),
            )
        })
        .prop_filter_map("degenerate embedding", |((n, d, cin), k, t, w, e, x)| {
            let cfg = MoeConfig {
                n_experts: n,
                top_k: k,
                gate_temperature: t,
                in_channels: cin,
                out_channels: cin,
                gate_dim: d,
            };
            let params = GateParams::new(
                Tensor::new(vec![d, cin], w).ok()?,
                Tensor::new(vec![d, n], e).ok()?,
                &cfg,
            )
            .ok()?;
            Some((cfg, params, x))
        })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        v in vec_in(1..=12, -30.0, 30.0),
        t in 0.01f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let p = softmax(&v, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted, t).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed(
        x in vec_in(6..=6, -2.0, 2.0),
        w in vec_in(6..=6, -2.0, 2.0),
        c in -3.0f64..3.0,
    ) {
        let grad = |scale: f64| {
            let mut tape = Tape::new();
            let xv = tape.param(Tensor::new(vec![3, 2], x.clone()).unwrap());
            let wv = tape.param(Tensor::new(vec![3, 2], w.clone()).unwrap());
            let y = tape.grid_linear(xv, wv, None).unwrap();
            let s = tape.sum(y).unwrap();
            let s = tape.scale(s, scale).unwrap();
            tape.backward(s).unwrap();
            tape.grad(xv).unwrap()
        };
        let g1 = grad(1.0);
        let gc = grad(c);
        for (a, b) in g1.data().iter().zip(gc.data()) {
            prop_assert!((c * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(
        x in vec_in(4..=4, 0.2, 2.0),
    ) {
        let point = Tensor::new(vec![2, 2], x).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let s = tape.sigmoid(v)?;
                let l = tape.log(s)?;
                let q = tape.square(v)?;
                let m = tape.mul(l, q)?;
                let p = tape.log_softmax(m)?;
                let h = tape.smooth_l1(p)?;
                tape.sum(h)
            },
            &point,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn routing_is_scale_invariant((cfg, params, x) in gate_case(), c in 1e-3f64..1e3) {
        let a = gate(&x, &params, &cfg).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let b = gate(&scaled, &params, &cfg).unwrap();
        let gap = |p: &[f64]| {
            let mut s = p.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            if s.len() > cfg.top_k { s[cfg.top_k - 1] - s[cfg.top_k] } else { 1.0 }
        };
        // only compare indices when the k-th and (k+1)-th probabilities are not tied
        if gap(&a.full_softmax) > 1e-9 {
            prop_assert_eq!(&a.selected, &b.selected);
        }
        for (p, q) in a.full_softmax.iter().zip(&b.full_softmax) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_keeps_k_unnormalized_weights((cfg, params, x) in gate_case()) {
        let d = gate(&x, &params, &cfg).unwrap();
        prop_assert_eq!(d.selected.len(), cfg.top_k);
        prop_assert!(d.gate_weights.windows(2).all(|w| w[0] >= w[1]));
        let kept: f64 = d.gate_weights.iter().sum();
        prop_assert!(kept <= 1.0 + 1e-12);
        for (&e, &w) in d.selected.iter().zip(&d.gate_weights) {
            prop_assert_eq!(w, d.full_softmax[e]);
        }
        let dense = d.dense_gates();
        prop_assert_eq!(dense.iter().filter(|&&g| g != 0.0).count() <= cfg.top_k, true);
    }

    #[test]
    fn head_multipliers_sum_to_task_count(
        cur in vec_in(2..=8, 1e-6, 1e3),
        scale in vec_in(8..=8, 0.1, 10.0),
        theta in 0.1f64..5.0,
    ) {
        let t = cur.len();
        let mut cfg = DsoConfig::new(t);
        cfg.theta = theta;
        let his: Vec<f64> = cur.iter().zip(&scale).map(|(c, s)| c * s).collect();
        let mut tracker = LossTracker::new(t);
        tracker.update_ema(&his, 1.0).unwrap();
        tracker.update_ema(&cur, 0.0).unwrap();
        tracker.cur = cur.clone();
        let h = head_multipliers(&tracker, &cfg).unwrap();
        prop_assert!((h.lambdas.iter().sum::<f64>() - t as f64).abs() < 1e-9);
        prop_assert!(h.lambdas.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn backbone_multiplier_is_bounded_and_monotone(
        c1 in -50.0f64..1.0,
        c2 in -50.0f64..1.0,
        tau in 0.5f64..5.0,
        b in 0.0f64..1.0,
    ) {
        let mut cfg = DsoConfig::new(3);
        cfg.tau = tau;
        cfg.bias_b = b;
        let (g1, g2) = (backbone_multiplier(c1, &cfg), backbone_multiplier(c2, &cfg));
        prop_assert!(g1 > 0.0 && g1 < 2.0);
        if c1 < c2 {
            prop_assert!(g1 <= g2);
        }
        prop_assert!((backbone_multiplier(b, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_is_at_most_one(
        cur in vec_in(3..=3, 1e-3, 1e2),
        his in vec_in(3..=3, 1e-3, 1e2),
    ) {
        let mut tracker = LossTracker::new(3);
        tracker.update_ema(&his, 1.0).unwrap();
        let same = consistency_score(&tracker).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-12);
        tracker.update_ema(&cur, 0.0).unwrap();
        tracker.cur = cur;
        prop_assert!(consistency_score(&tracker).unwrap() <= 1.0);
    }
}

/// Averaged over independent gate draws the top-1 frequency of every expert
/// approaches 1/N, as the initialization is exchangeable across experts.
#[test]
fn fresh_gates_spread_top1_evenly() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let n = 4;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; n];
    let (draws, inputs) = (200, 50);
    for _ in 0..draws {
        let w = Tensor::identity(8);
        let b = Tensor::vector(vec![0.0; 8]);
        let cfg = MoeConfig::new(8, 8).with_experts(n, 2);
        let layer = MoeLayer::from_pretrained(&w, &b, cfg.clone(), &mut rng).unwrap();
        for _ in 0..inputs {
            let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            counts[gate(&x, &layer.gate, &cfg).unwrap().top1()] += 1;
        }
    }
    let total = (draws * inputs) as f64;
    for (e, &c) in counts.iter().enumerate() {
        let f = c as f64 / total;
        assert!((f - 0.25).abs() < 0.1, "expert {e}: frequency {f}");
    }
}
