use aero_core::autodiff::Tape;
use aero_core::entropy::{
    bucket_counts, entropy_reg_loss, headwise_entropy, mean_head_entropy, EntropyRegConfig, EntropySnapshot, RegMode,
};
use aero_core::tensor::{causal_mask, softmax_rows, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores(b: usize, h: usize, t: usize, std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[b, h, t, t], std, &mut rng)
}

fn causal_attention(b: usize, h: usize, t: usize, std: f64, seed: u64) -> Tensor {
    softmax_rows(&scores(b, h, t, std, seed), None, Some(&causal_mask(t))).unwrap()
}

fn reg(attn: &Tensor, theta: &[f64], gamma: f64, mode: RegMode) -> f64 {
    let t = attn.shape()[2];
    let mut tape = Tape::new();
    let a = tape.constant(attn.clone());
    let th = tape.constant(Tensor::new(&[theta.len()], theta.to_vec()).unwrap());
    let cfg = EntropyRegConfig { gamma, mode, ..EntropyRegConfig::short_context() };
    let l = entropy_reg_loss(&mut tape, &[a], &[th], &cfg, t).unwrap();
    tape.value(l).item()
}

fn permute_heads(attn: &Tensor, perm: &[usize]) -> Tensor {
    let s = attn.shape();
    let block = s[2] * s[3];
    let mut out = Vec::with_capacity(attn.numel());
    for b in 0..s[0] {
        for &h in perm {
            let start = (b * s[1] + h) * block;
            out.extend_from_slice(&attn.data()[start..start + block]);
        }
    }
    Tensor::new(s, out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropies_lie_between_zero_and_log_t(t in 1usize..40, h in 1usize..4, std in 0.0f64..20.0, seed: u64) {
        let e = headwise_entropy(&causal_attention(2, h, t, std, seed)).unwrap();
        for (i, &v) in e.data().iter().enumerate() {
            let row = i % t;
            prop_assert!(v >= 0.0);
            prop_assert!(v <= ((row + 1) as f64).ln() + 1e-9, "row {} entropy {}", row, v);
        }
        for &m in mean_head_entropy(&e).unwrap().data() {
            prop_assert!((0.0..=(t as f64).ln() + 1e-9).contains(&m));
        }
    }

    #[test]
    fn reg_loss_ignores_head_order(t in 2usize..12, seed: u64, theta in prop::collection::vec(0.0f64..1.5, 3), gamma in 0.0f64..0.5) {
        let attn = causal_attention(2, 3, t, 3.0, seed);
        let perm = [2, 0, 1];
        let theta_p: Vec<f64> = perm.iter().map(|&i| theta[i]).collect();
        for mode in [RegMode::PerPosition, RegMode::PerHeadMean] {
            let a = reg(&attn, &theta, gamma, mode);
            let b = reg(&permute_heads(&attn, &perm), &theta_p, gamma, mode);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn wider_tolerance_never_raises_the_loss(t in 2usize..12, seed: u64, theta in prop::collection::vec(0.0f64..1.5, 2), g1 in 0.0f64..0.9, g2 in 0.0f64..0.9) {
        let attn = causal_attention(1, 2, t, 2.0, seed);
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        for mode in [RegMode::PerPosition, RegMode::PerHeadMean] {
            prop_assert!(reg(&attn, &theta, hi, mode) <= reg(&attn, &theta, lo, mode));
        }
    }

    #[test]
    fn sharper_temperature_lowers_entropy(t in 2usize..24, seed: u64, lo in 0.01f64..10.0, factor in 1.0f64..10.0) {
        let x = scores(1, 1, t, 1.0, seed);
        let at = |temp: f64| {
            let temp = Tensor::scalar(temp);
            let a = softmax_rows(&x, Some(&temp), None).unwrap();
            headwise_entropy(&a).unwrap().into_data()
        };
        for (cold, hot) in at(lo).iter().zip(at(lo * factor)) {
            prop_assert!(*cold <= hot + 1e-12);
        }
    }

    #[test]
    fn buckets_partition_every_head(values in prop::collection::vec(0.0f64..5.0, 1..40), max in 0.0f64..6.0) {
        let counts = bucket_counts(values.iter(), max);
        prop_assert_eq!(counts.iter().sum::<usize>(), values.len());
    }
}

#[test]
fn reg_gradient_reaches_temperature() {
    let (h, t) = (2, 6);
    let x = scores(2, h, t, 1.5, 9);
    let mask = causal_mask(t);
    let theta = [0.9, 0.1];
    let cfg = EntropyRegConfig { gamma: 0.05, ..EntropyRegConfig::short_context() };
    let loss_at = |temps: &[f64], grad: bool| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tv = if grad { tape.param(Tensor::new(&[h, t], temps.to_vec()).unwrap()) } else { tape.constant(Tensor::new(&[h, t], temps.to_vec()).unwrap()) };
        let a = tape.softmax_rows(xv, Some(tv), Some(&mask)).unwrap();
        let th = tape.constant(Tensor::new(&[h], theta.to_vec()).unwrap());
        let l = entropy_reg_loss(&mut tape, &[a], &[th], &cfg, t).unwrap();
        let value = tape.value(l).item();
        let g = if grad {
            tape.backward(l).unwrap();
            tape.grad(tv).unwrap().to_vec()
        } else {
            Vec::new()
        };
        (value, g)
    };
    let temps: Vec<f64> = (0..h * t).map(|i| 0.6 + 0.07 * i as f64).collect();
    let (loss, grad) = loss_at(&temps, true);
    assert!(loss > 0.0);
    // Row 0 of the causal map has a single position; its entropy cannot move.
    assert!(grad.iter().enumerate().filter(|(i, _)| i % t != 0).all(|(_, g)| g.abs() > 1e-8), "{grad:?}");
    let step = 1e-6;
    for i in 0..h * t {
        let mut up = temps.clone();
        let mut down = temps.clone();
        up[i] += step;
        down[i] -= step;
        let fd = (loss_at(&up, false).0 - loss_at(&down, false).0) / (2.0 * step);
        assert!((fd - grad[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "temp {i}: fd {fd} analytic {}", grad[i]);
    }
}

#[test]
fn bucket_hand_counts() {
    // ln 8 ~ 2.079: ranges [0, 0.520), [0.520, 1.560), [1.560, 2.079].
    let snap = EntropySnapshot::from_head_means(7, 8, vec![vec![0.0, 0.5, 0.6], vec![1.5, 1.6, 8f64.ln()]]);
    assert_eq!(snap.buckets_log_t, [2, 2, 2]);
    // Observed max is ln 8 too, so both histograms agree.
    assert_eq!(snap.buckets, snap.buckets_log_t);
    assert_eq!(snap.num_heads(), 6);
    assert!((snap.fraction_above(0.9) - 1.0 / 6.0).abs() < 1e-12);

    let low = EntropySnapshot::from_head_means(0, 8, vec![vec![0.2, 0.4]]);
    assert_eq!(low.buckets, [0, 1, 1]);
    assert_eq!(low.buckets_log_t, [2, 0, 0]);
}

#[test]
fn snapshot_round_trips_through_json() {
    let snap = EntropySnapshot::from_head_means(3, 16, vec![vec![0.1, 2.0], vec![2.5, 1.0]]);
    let back: EntropySnapshot = serde_json::from_str(&serde_json::to_string(&snap).unwrap()).unwrap();
    assert_eq!(back, snap);
}
