use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use srak_core::corpus::num_phonemes;
use srak_core::grad::{Tape, Tensor};
use srak_core::models::{sentence_decision, AttackerConfig, AttackerNet, ClassifierConfig, Mode, SincClassifier};

fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-amp..amp)).collect()
}

/// Attacker with every parameter and running statistic randomized, so the
/// residual branch is far from zero.
fn scrambled_attacker(seed: u64) -> AttackerNet<f64> {
    let mut net = AttackerNet::<f64>::new(AttackerConfig::default(), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let names: Vec<String> = net.params().names().to_vec();
    for (name, t) in names.iter().zip(net.params_mut().values_mut()) {
        for v in t.data_mut() {
            *v = if name.ends_with("gamma") {
                r.random_range(0.5..1.5)
            } else {
                r.random_range(-0.3..0.3)
            };
        }
    }
    // One train-mode pass gives non-trivial running statistics.
    let x = noise(seed, 2 * 400, 0.5);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![2, 1, 400], x).unwrap());
    let f = net.forward(&mut tape, xv, Mode::Train, false).unwrap();
    let stats = f.batch_stats;
    net.update_running_stats(&stats);
    net
}

#[test]
fn fresh_attacker_is_identity() {
    let net = AttackerNet::<f32>::new(AttackerConfig::default(), 3).unwrap();
    let x: Vec<f32> = noise(1, 16000, 1.0).into_iter().map(|v| v as f32).collect();
    let y = net.apply(&x).unwrap();
    assert_eq!(y.len(), 16000);
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));

    // Also in train mode on a batch.
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![2, 1, 8000], x.clone()).unwrap());
    let f = net.forward(&mut tape, xv, Mode::Train, true).unwrap();
    assert_eq!(tape.value(f.output).data(), &x[..]);
}

#[test]
fn attacker_receptive_field() {
    assert_eq!(AttackerConfig::default().receptive_field(), 23);
}

#[test]
fn attacker_stitching_matches_full_signal() {
    let net = scrambled_attacker(11);
    let x = noise(5, 3000, 0.8);
    let full = net.apply(&x).unwrap();
    assert!(full.iter().zip(&x).any(|(a, b)| (a - b).abs() > 1e-3), "branch should be active");
    let half = 11; // one-sided context of the residual branch
    for &(cut, overlap) in &[(1500usize, 23usize), (777, 40), (2400, 100)] {
        let a_end = cut + overlap - overlap / 2;
        let b_start = cut - overlap / 2;
        let a = net.apply(&x[..a_end]).unwrap();
        let b = net.apply(&x[b_start..]).unwrap();
        let mut stitched = a[..cut].to_vec();
        stitched.extend_from_slice(&b[cut - b_start..]);
        for i in half..x.len() - half {
            assert!((stitched[i] - full[i]).abs() <= 1e-6, "sample {i} cut {cut} overlap {overlap}");
        }
    }
}

#[test]
fn attacker_shift_covariance() {
    let net = scrambled_attacker(12);
    let x = noise(6, 1200, 0.8);
    let y = net.apply(&x).unwrap();
    for k in [1usize, 7, 50] {
        let mut shifted = vec![0.0; k];
        shifted.extend_from_slice(&x[..x.len() - k]);
        let ys = net.apply(&shifted).unwrap();
        for i in 23 + k..x.len() - 23 {
            assert_eq!(ys[i].to_bits(), y[i - k].to_bits(), "shift {k} sample {i}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn attacker_preserves_length(len in 1usize..10000) {
        let net = AttackerNet::<f32>::new(AttackerConfig::default(), 1).unwrap();
        let x = vec![0.1f32; len];
        prop_assert_eq!(net.apply(&x).unwrap().len(), len);
    }
}

fn magnitude_at(h: &[f64], hz: f64, fs: f64) -> f64 {
    let n = 8192;
    let mut buf: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(if i < h.len() { h[i] } else { 0.0 }, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[(hz / fs * n as f64).round() as usize].norm()
}

fn single_band_net(f1: f64, bw: f64) -> SincClassifier<f64> {
    let mut cfg = ClassifierConfig::speaker(2);
    cfg.sinc_filters = 1;
    let mut net = SincClassifier::<f64>::new(cfg, 0).unwrap();
    let floor = net.config().min_band_hz;
    let p = net.params_mut().values_mut();
    let mut it = p.into_iter();
    it.next().unwrap().data_mut()[0] = f1 - floor;
    it.next().unwrap().data_mut()[0] = (bw - floor).max(0.0);
    net
}

#[test]
fn sinc_band_pass_response() {
    let net = single_band_net(1000.0, 1000.0);
    assert_eq!(net.band_edges(), vec![(1000.0, 2000.0)]);
    let h = net.sinc_kernels();
    let pass = magnitude_at(&h, 1500.0, 16000.0);
    let stop = magnitude_at(&h, 4000.0, 16000.0);
    assert!(20.0 * (pass / stop).log10() >= 20.0, "pass {pass} stop {stop}");
    let mid = h.len() / 2;
    for n in 1..=mid {
        assert_eq!(h[mid - n], h[mid + n]);
    }
}

#[test]
fn sinc_minimal_band_has_little_energy() {
    let energy = |h: Vec<f64>| h.iter().map(|v| v * v).sum::<f64>();
    let narrow = single_band_net(1000.0, 0.0);
    let wide = single_band_net(1000.0, 1000.0);
    let (f1, f2) = narrow.band_edges()[0];
    assert_eq!(f2 - f1, narrow.config().min_band_hz);
    assert!(energy(narrow.sinc_kernels()) < 0.1 * energy(wide.sinc_kernels()));
}

#[test]
fn sinc_edges_stay_in_range() {
    let mut net = SincClassifier::<f64>::new(ClassifierConfig::speaker(4), 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for t in net.params_mut().values_mut().into_iter().take(2) {
        for v in t.data_mut() {
            *v = r.random_range(-20000.0..20000.0);
        }
    }
    for (f1, f2) in net.band_edges() {
        assert!(0.0 < f1 && f1 < f2 && f2 <= 8000.0, "{f1} {f2}");
    }
}

#[test]
fn speaker_net_contracts() {
    let net = SincClassifier::<f32>::new(ClassifierConfig::speaker(5), 4).unwrap();
    let f: Vec<f32> = noise(2, 3200, 0.5).into_iter().map(|v| v as f32).collect();
    let mut two = f.clone();
    two.extend_from_slice(&f);
    let l = net.logits(&two).unwrap();
    assert_eq!(l.len(), 2);
    assert_eq!(l[0], l[1]);
    assert_eq!(sentence_decision(&l[..1]).unwrap(), l[0].first);
    assert!(net.logits(&f[..3199]).is_err());

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 3000], f[..3000].to_vec()).unwrap());
    assert!(net.forward(&mut tape, x, Mode::Eval, false).is_err());
}

#[test]
fn frozen_classifier_passes_gradient_to_input_only() {
    let net = SincClassifier::<f64>::new(ClassifierConfig::speaker(4), 5).unwrap();
    let f = noise(3, 3200, 0.5);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 3200], f.clone()).unwrap(), true);
    let fw = net.forward(&mut tape, x, Mode::Eval, false).unwrap();
    let logit = tape.gather(fw.output, &[1]).unwrap();
    let loss = tape.sum(logit, None).unwrap();
    tape.backward(loss).unwrap();
    assert!(fw.params.iter().all(|p| tape.grad(*p).is_none()));
    let g = tape.grad(x).unwrap().data().to_vec();
    let (i, gi) = g
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, v)| (i, *v))
        .unwrap();
    assert!(gi != 0.0);
    let h = 1e-5;
    let eval = |d: f64| {
        let mut y = f.clone();
        y[i] += d;
        net.logits(&y).unwrap()[0].values[1]
    };
    let fd = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((fd - gi).abs() / (gi.abs() + 1e-8) < 1e-4, "fd {fd} analytic {gi}");
}

#[test]
fn untrained_phoneme_net_is_near_uniform() {
    let p = num_phonemes();
    let net = SincClassifier::<f32>::new(ClassifierConfig::phoneme(p), 6).unwrap();
    let frames: Vec<f32> = noise(4, 100 * 3200, 0.5).into_iter().map(|v| v as f32).collect();
    let post = net.posteriors(&frames).unwrap();
    assert_eq!(post.len(), 100);
    for row in &post {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!(row.iter().cloned().fold(0.0f32, f32::max) < 2.0 / p as f32);
    }
    let again = net.posteriors(&frames[..3200]).unwrap();
    assert_eq!(again[0], post[0]);
}
