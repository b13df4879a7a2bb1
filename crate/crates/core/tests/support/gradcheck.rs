//! Central finite-difference oracle for every tape primitive and for the
//! composed attacker → frozen classifier → attack loss graph.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srak_core::grad::{NormStats, SincBankParams, Tape, Tensor, Var};
use srak_core::losses::{self, AttackLossConfig};
use srak_core::models::{AttackerConfig, AttackerNet, ClassifierConfig, ClassifierKind, Mode, SincClassifier};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 20;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.05, 1]` and random sign, keeping kinks at
/// zero far from the finite-difference step.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random projection so that every output element carries its own weight.
fn projection(n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(n as u64 + 17);
    (0..n)
        .map(|_| {
            let m = r.random_range(0.5..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn scalar_loss(tape: &mut Tape<f64>, out: Var) -> Var {
    let w = projection(tape.value(out).len());
    let p = tape.mul_const(out, &w).unwrap();
    tape.sum(p, None).unwrap()
}

/// Loss value and branch signature of one rebuild.
fn evaluate(inputs: &[Tensor<f64>], build: &Build) -> (f64, u64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_loss(&mut tape, out);
    (tape.value(loss).data()[0], tape.branch_signature())
}

/// Gradients below `ABS_FLOOR · max(1, |loss|)` are compared in absolute
/// terms; this sits well above the rounding noise of a central difference.
pub const ABS_FLOOR: f64 = 1e-6;

/// Step halvings tried when a perturbation lands on another smooth piece.
pub const MAX_HALVINGS: u32 = 10;

/// Share of elements allowed to sit so close to a kink that no step up to
/// `STEP / 2^MAX_HALVINGS` stays on one piece.
pub const MAX_KINK_FRACTION: f64 = 0.01;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every element of every input.
///
/// The numeric derivative is the Richardson combination of central
/// differences at `h` and `h/2`, exact up to fourth order. A central difference is only meaningful when both shifted evaluations
/// stay on the same smooth piece as the base point, so the step is halved
/// until the branch signatures agree. Elements where that never happens are
/// skipped; if too many are, the result is infinite.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    max_relative_error_at(inputs, build, STEP)
}

pub fn max_relative_error_at(inputs: &[Tensor<f64>], build: &Build, step: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_loss(&mut tape, out);
    let base = tape.branch_signature();
    let floor = ABS_FLOOR * tape.value(loss).data()[0].abs().max(1.0);
    tape.backward(loss).unwrap();
    let debug = std::env::var("GC_DEBUG").is_ok();
    let mut worst = 0.0f64;
    let (mut total, mut skipped) = (0usize, 0usize);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for e in 0..input.len() {
            total += 1;
            let shifted = |d: f64| {
                let mut ins = inputs.to_vec();
                ins[k].data_mut()[e] += d;
                evaluate(&ins, build)
            };
            let numeric = (0..=MAX_HALVINGS).find_map(|i| {
                let h = step / f64::from(1u32 << i);
                let mut d = [0.0; 2];
                for (j, hj) in [h, h / 2.0].into_iter().enumerate() {
                    let (up, su) = shifted(hj);
                    let (down, sd) = shifted(-hj);
                    if su != base || sd != base {
                        return None;
                    }
                    d[j] = (up - down) / (2.0 * hj);
                }
                Some((4.0 * d[1] - d[0]) / 3.0)
            });
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > TOLERANCE && debug {
                eprintln!("  input {k} elem {e}: analytic {a:.6e} numeric {numeric:.6e}");
            }
            worst = worst.max(rel);
        }
    }
    if debug && skipped > 0 {
        eprintln!("  {skipped} of {total} elements sit on a kink");
    }
    if skipped as f64 > MAX_KINK_FRACTION * total as f64 {
        return f64::INFINITY;
    }
    worst
}

fn small(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn conv1d(r: &mut ChaCha8Rng) -> f64 {
    let (b, cin, cout, k) = (small(r, 1, 2), small(r, 1, 3), small(r, 1, 3), small(r, 1, 4));
    let (stride, dilation) = (small(r, 1, 3), small(r, 1, 3));
    let padding = small(r, 0, 3);
    let span = (k - 1) * dilation + 1;
    let len = small(r, span.saturating_sub(2 * padding).max(1), span + 8);
    let bias = r.random::<bool>();
    let inputs = vec![
        uniform(r, &[b, cin, len], -1.0, 1.0),
        uniform(r, &[cout, cin, k], -1.0, 1.0),
        uniform(r, &[cout], -1.0, 1.0),
    ];
    max_relative_error(&inputs, &|t, v| {
        t.conv1d(v[0], v[1], bias.then_some(v[2]), stride, dilation, padding).unwrap()
    })
}

pub fn batch_norm_train(r: &mut ChaCha8Rng) -> f64 {
    let (b, c, l) = (small(r, 1, 3), small(r, 1, 3), small(r, 2, 6));
    let inputs = vec![
        uniform(r, &[b, c, l], -2.0, 2.0),
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
    ];
    max_relative_error(&inputs, &|t, v| t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap().0)
}

pub fn batch_norm_eval(r: &mut ChaCha8Rng) -> f64 {
    let (b, c, l) = (small(r, 1, 3), small(r, 1, 3), small(r, 1, 6));
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    let inputs = vec![
        uniform(r, &[b, c, l], -2.0, 2.0),
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
    ];
    max_relative_error(&inputs, &|t, v| {
        let stats = NormStats::Running { mean: &mean, var: &var };
        t.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap().0
    })
}

pub fn affine(r: &mut ChaCha8Rng) -> f64 {
    let (b, n, m) = (small(r, 1, 4), small(r, 1, 5), small(r, 1, 5));
    let inputs = vec![
        uniform(r, &[b, n], -1.0, 1.0),
        uniform(r, &[m, n], -1.0, 1.0),
        uniform(r, &[m], -1.0, 1.0),
    ];
    max_relative_error(&inputs, &|t, v| t.affine(v[0], v[1], v[2]).unwrap())
}

fn random_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = small(r, 1, 3);
    (0..rank).map(|_| small(r, 1, 4)).collect()
}

pub fn unary(name: &'static str) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r| {
        let shape = random_shape(r);
        let x = away_from_zero(r, &shape);
        let c = r.random_range(-2.0..2.0);
        max_relative_error(&[x], &|t, v| match name {
            "relu" => t.relu(v[0]),
            "leaky_relu" => t.leaky_relu(v[0], 0.2),
            "abs" => t.abs(v[0]),
            "square" => t.square(v[0]),
            // Kink at 0, away from every input.
            "clamp_min" => t.clamp_min(v[0], 0.0),
            "scale" => t.scale(v[0], c),
            "add_scalar" => t.add_scalar(v[0], c),
            _ => unreachable!(),
        })
    }
}

pub fn binary(name: &'static str) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r| {
        let shape = random_shape(r);
        let inputs = vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)];
        max_relative_error(&inputs, &|t, v| match name {
            "add" => t.add(v[0], v[1]).unwrap(),
            "sub" => t.sub(v[0], v[1]).unwrap(),
            "mul" => t.mul(v[0], v[1]).unwrap(),
            _ => unreachable!(),
        })
    }
}

pub fn mul_const(r: &mut ChaCha8Rng) -> f64 {
    let shape = random_shape(r);
    let x = uniform(r, &shape, -1.0, 1.0);
    let c: Vec<f64> = (0..x.len()).map(|_| r.random_range(-2.0..2.0)).collect();
    max_relative_error(&[x], &|t, v| t.mul_const(v[0], &c).unwrap())
}

pub fn row_scale(r: &mut ChaCha8Rng) -> f64 {
    let shape = random_shape(r);
    let x = uniform(r, &shape, -1.0, 1.0);
    let f: Vec<f64> = (0..shape[0]).map(|_| r.random_range(-2.0..2.0)).collect();
    max_relative_error(&[x], &|t, v| t.row_scale(v[0], &f).unwrap())
}

pub fn max_pool1d(r: &mut ChaCha8Rng) -> f64 {
    let (b, c, size) = (small(r, 1, 2), small(r, 1, 3), small(r, 1, 4));
    let len = size * small(r, 1, 4) + small(r, 0, size - 1);
    // Distinct values spaced well beyond the step keep the argmax fixed.
    let n = b * c * len;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![b, c, len], vals).unwrap();
    max_relative_error(&[x], &|t, v| t.max_pool1d(v[0], size).unwrap())
}

pub fn log_softmax(r: &mut ChaCha8Rng) -> f64 {
    let (b, c) = (small(r, 1, 4), small(r, 2, 6));
    let x = uniform(r, &[b, c], -3.0, 3.0);
    max_relative_error(&[x], &|t, v| t.log_softmax(v[0]).unwrap())
}

pub fn reduce(name: &'static str) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r| {
        let shape = random_shape(r);
        let axis = if r.random::<bool>() {
            None
        } else {
            Some(r.random_range(0..shape.len()))
        };
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let x = Tensor::new(shape, vals).unwrap();
        max_relative_error(&[x], &|t, v| match name {
            "sum" => t.sum(v[0], axis).unwrap(),
            "mean" => t.mean(v[0], axis).unwrap(),
            "max" => t.max(v[0], axis).unwrap().0,
            _ => unreachable!(),
        })
    }
}

pub fn gather(r: &mut ChaCha8Rng) -> f64 {
    let (rows, cols) = (small(r, 1, 4), small(r, 1, 5));
    let idx: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
    let x = uniform(r, &[rows, cols], -1.0, 1.0);
    max_relative_error(&[x], &|t, v| t.gather(v[0], &idx).unwrap())
}

pub fn reshape(r: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (small(r, 1, 4), small(r, 1, 4));
    let x = uniform(r, &[a, b], -1.0, 1.0);
    max_relative_error(&[x], &|t, v| {
        let y = t.reshape(v[0], &[b, a]).unwrap();
        t.square(y)
    })
}

pub fn sinc_bank(r: &mut ChaCha8Rng) -> f64 {
    let n = small(r, 1, 4);
    let length = 2 * small(r, 2, 12) + 1;
    let params = SincBankParams {
        length,
        sample_rate: 16000.0,
        floor_hz: 50.0,
    };
    // Cutoffs well inside the band so neither clamp is active.
    let low = away_from_zero(r, &[n]);
    let low = Tensor::new(vec![n], low.data().iter().map(|v| v * 3000.0).collect()).unwrap();
    let band = uniform(r, &[n], 100.0, 3000.0);
    max_relative_error(&[low, band], &|t, v| t.sinc_bank(v[0], v[1], params).unwrap())
}

/// Attacker (train mode) → frozen speaker and phoneme classifiers (eval
/// mode) → full attack loss, differentiated w.r.t. every attacker
/// parameter and the input frames.
pub fn composed_attack_graph(r: &mut ChaCha8Rng) -> f64 {
    composed_attack_graph_at(r, STEP)
}

pub fn composed_attack_graph_at(r: &mut ChaCha8Rng, step: f64) -> f64 {
    let frame_len = small(r, 90, 120);
    let batch = small(r, 2, 3);
    let acfg = AttackerConfig {
        channels: small(r, 2, 4),
        kernel: 3,
        dilations: vec![1, 2, 5, 2, 1],
    };
    let mut attacker = AttackerNet::<f64>::new(acfg, r.random()).unwrap();
    for t in attacker.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let tiny = |kind: ClassifierKind, classes: usize| ClassifierConfig {
        kind,
        frame_len,
        sample_rate: 16000,
        sinc_filters: 3,
        sinc_len: 15,
        sinc_stride: 2,
        sinc_pool: 2,
        min_band_hz: 50.0,
        conv_channels: vec![3],
        conv_kernel: 3,
        conv_pool: 2,
        hidden: 6,
        classes,
        leaky_slope: 0.2,
    };
    let mut speaker = SincClassifier::<f64>::new(tiny(ClassifierKind::Speaker, 4), r.random()).unwrap();
    let mut phoneme = SincClassifier::<f64>::new(tiny(ClassifierKind::Phoneme, 3), r.random()).unwrap();
    for m in [&mut speaker, &mut phoneme] {
        let warm = uniform(r, &[4, 1, frame_len], -0.5, 0.5);
        let mut tape = Tape::new();
        let x = tape.constant(warm);
        let f = m.forward(&mut tape, x, Mode::Train, false).unwrap();
        m.update_running_stats(&f.batch_stats);
    }
    let clean = uniform(r, &[batch, 1, frame_len], -0.5, 0.5);
    let scales: Vec<f64> = (0..batch).map(|_| r.random_range(0.3..1.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..4)).collect();
    let target = r.random::<bool>().then(|| r.random_range(0..4));
    let p_clean: Vec<f64> = phoneme.posteriors(clean.data()).unwrap().concat();
    let cfg = AttackLossConfig {
        lambda_phn: r.random_range(0.5..2.0),
        lambda_norm: r.random_range(10.0..1000.0),
        margin: r.random_range(0.005..0.02),
        target,
    };
    let nparams = attacker.params().len();
    let mut inputs: Vec<Tensor<f64>> = attacker.params().values().to_vec();
    inputs.push(clean.clone());
    max_relative_error_at(&inputs, &|t, v| {
        let params = &v[..nparams];
        let xn = v[nparams];
        let mut stats = Vec::new();
        let out = attacker.forward_bound(t, params, xn, Mode::Train, &mut stats).unwrap();
        let adv = t.row_scale(out, &scales).unwrap();
        let clean_v = t.row_scale(xn, &scales).unwrap();
        let logits = speaker.forward(t, adv, Mode::Eval, false).unwrap().output;
        let spk = losses::spk_loss(t, logits, &labels, cfg.target).unwrap();
        let phn_logits = phoneme.forward(t, adv, Mode::Eval, false).unwrap().output;
        let phn = losses::phn_loss(t, &p_clean, phn_logits).unwrap();
        let norm = losses::norm_loss(t, clean_v, adv, cfg.margin).unwrap();
        losses::total_loss(t, spk, phn, norm, &cfg).unwrap().total
    }, step)
}

pub type Check = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

/// Every checked graph with its name.
pub fn all_checks() -> Vec<(&'static str, Check)> {
    let mut v: Vec<(&'static str, Check)> = vec![
        ("conv1d", Box::new(conv1d)),
        ("batch_norm_train", Box::new(batch_norm_train)),
        ("batch_norm_eval", Box::new(batch_norm_eval)),
        ("affine", Box::new(affine)),
    ];
    for name in ["relu", "leaky_relu", "abs", "square", "clamp_min", "scale", "add_scalar"] {
        v.push((name, Box::new(unary(name))));
    }
    for name in ["add", "sub", "mul"] {
        v.push((name, Box::new(binary(name))));
    }
    v.push(("mul_const", Box::new(mul_const)));
    v.push(("row_scale", Box::new(row_scale)));
    v.push(("max_pool1d", Box::new(max_pool1d)));
    v.push(("log_softmax", Box::new(log_softmax)));
    for name in ["sum", "mean", "max"] {
        v.push((name, Box::new(reduce(name))));
    }
    v.push(("gather", Box::new(gather)));
    v.push(("reshape", Box::new(reshape)));
    v.push(("sinc_bank", Box::new(sinc_bank)));
    v.push(("attacker_classifier_loss", Box::new(composed_attack_graph)));
    v
}

/// Runs `CASES` random cases of one check; returns the worst error.
pub fn run_check(name: &str, check: &Check, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    (0..CASES).map(|_| check(&mut r)).fold(0.0, f64::max)
}
