//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion with the
//! measured values, then a summary. Set `SRAK_ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a nonzero exit status.
//!
//! The full run trains two classifiers and four attackers on the default
//! corpus and takes roughly half an hour on one core.


use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srak_core::audio::{normalize_frame, SAMPLE_RATE};
use srak_core::corpus::{Corpus, CorpusConfig};
use srak_core::eval::{self, EvalConfig, MetricsReport};
use srak_core::losses::{self, AttackLossConfig};
use srak_core::models::{AttackerConfig, AttackerNet, Logits, SincClassifier};
use srak_core::trainer::{self, AttackerRun, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Board {
    rows: Vec<(usize, &'static str, Verdict)>,
}

impl Board {
    fn record(&mut self, n: usize, name: &'static str, v: Verdict) {
        println!("criterion {n:>2} {name:<28} {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        self.rows.push((n, name, v));
    }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut failing = Vec::new();
    let checks = gradcheck::all_checks();
    for (name, check) in &checks {
        let err = gradcheck::run_check(name, check, 2024);
        if !(err < gradcheck::TOLERANCE) {
            failing.push(format!("{name} {err:.2e}"));
        }
        if err > worst.1 || err.is_nan() {
            worst = (name, err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        failing.is_empty() && secs < 60.0 && gradcheck::CASES >= 20,
        format!(
            "{} graphs x {} cases, worst {} {:.2e} (< {:.0e}), {secs:.1} s (< 60 s){}",
            checks.len(),
            gradcheck::CASES,
            worst.0,
            worst.1,
            gradcheck::TOLERANCE,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

fn zero_init_identity() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(404);
    let mut exact = 0;
    for i in 0..100u64 {
        let net = AttackerNet::<f32>::new(AttackerConfig::default(), i).unwrap();
        let len = r.random_range(1..=10000usize);
        let amp: f32 = r.random_range(0.01..1.0);
        let x: Vec<f32> = (0..len).map(|_| r.random_range(-amp..amp)).collect();
        let y = net.perturb(&x).unwrap();
        if y.len() == x.len() && x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
    }
    Verdict::new(exact == 100, format!("{exact}/100 random waveforms returned bit-exactly"))
}

/// Runs `net` over overlapping chunks and keeps, from each chunk, only the
/// samples that are at least half the overlap away from its cut edges.
fn stitched(net: &AttackerNet<f32>, x: &[f32], chunk: usize, overlap: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    let mut start = 0;
    while start < x.len() {
        let end = (start + chunk).min(x.len());
        let lo = start.saturating_sub(overlap / 2);
        let hi = (end + overlap - overlap / 2).min(x.len());
        let y = net.apply(&x[lo..hi]).unwrap();
        out.extend_from_slice(&y[start - lo..end - lo]);
        start = end;
    }
    out
}

fn stitching(net: &AttackerNet<f32>, corpus: &Corpus) -> Verdict {
    let half = net.config().receptive_field() / 2;
    let mut worst = 0.0f64;
    let mut samples = 0usize;
    let mut residual = 0.0f64;
    for (k, (_, u)) in eval::test_set(corpus).iter().take(12).enumerate() {
        let x = normalize_frame(&u.waveform.samples).unwrap().values;
        let full = net.apply(&x).unwrap();
        residual = residual.max(full.iter().zip(&x).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max));
        let overlap = 23 + 7 * (k % 4);
        let chunk = 1000 + 613 * k;
        let s = stitched(net, &x, chunk, overlap);
        for i in half..x.len().saturating_sub(half) {
            worst = worst.max((s[i] - full[i]).abs() as f64);
            samples += 1;
        }
    }
    Verdict::new(
        worst <= 1e-6 && residual > 0.0,
        format!("trained attacker, 12 utterances, overlaps 23..44, {samples} interior samples, max |diff| {worst:.2e} (<= 1e-6), residual peak {residual:.3}"),
    )
}

#[allow(clippy::approx_constant)]
fn loss_examples(op_run: &AttackerRun) -> Verdict {
    let lg = |v: &[f64]| Logits::new(v.to_vec()).unwrap();
    let l = lg(&[3.0, 1.0, 0.5]);
    let shifted = lg(&[10.25, 8.25, 7.75]);
    let mut checks: Vec<(&str, bool)> = vec![
        ("margin y=0 is 2", losses::l_spk_nontargeted(&l, 0).unwrap() == 2.0),
        ("margin y=1 is 0", losses::l_spk_nontargeted(&l, 1).unwrap() == 0.0),
        ("margin shift invariant", losses::l_spk_nontargeted(&shifted, 0).unwrap() == 2.0),
        ("targeted t=2 is 2.5", losses::l_spk_targeted(&l, 2).unwrap() == 2.5),
        ("targeted t=0 is 0", losses::l_spk_targeted(&l, 0).unwrap() == 0.0),
    ];
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let nonneg = (0..200).all(|_| {
        let v: Vec<f64> = (0..5).map(|_| r.random_range(-4.0..4.0)).collect();
        (0..5).all(|t| losses::l_spk_targeted(&lg(&v), t).unwrap() >= 0.0)
    });
    checks.push(("targeted never negative", nonneg));
    let p = [0.2f64, 0.3, 0.5];
    checks.push(("KL of equal posteriors is 0", losses::l_phn(&p, &p).unwrap() == 0.0));
    let ln2 = losses::l_phn(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
    checks.push(("KL([1,0],[.5,.5]) is ln 2", (ln2 - std::f64::consts::LN_2).abs() < 1e-12 && (ln2 - 0.6931).abs() < 1e-4));
    let s = [0.1f64, -0.2, 0.3, 0.05];
    let shift = |d: f64| s.iter().map(|v| v + d).collect::<Vec<f64>>();
    checks.push(("hinge inside margin is 0", losses::l_norm(&s, &shift(0.0099), 0.01).unwrap() == 0.0));
    checks.push(("hinge +0.02 is 1e-4", (losses::l_norm(&s, &shift(0.02), 0.01).unwrap() - 1e-4).abs() < 1e-12));
    checks.push(("hinge -0.02 is 1e-4", (losses::l_norm(&s, &shift(-0.02), 0.01).unwrap() - 1e-4).abs() < 1e-12));
    let zero = AttackLossConfig { lambda_phn: 0.0, lambda_norm: 0.0, ..Default::default() };
    checks.push(("zero weights give l_spk", losses::l_total(1.5, 2.0, 3.0, &zero).l_total == 1.5));
    let op = AttackLossConfig::default();
    let b = losses::l_total(0.5, 0.25, 1e-4, &op);
    checks.push((
        "operating point recorded",
        (op.lambda_phn, op.lambda_norm, op.margin) == (1.0, 1000.0, 0.01) && b.l_total == 0.5 + 0.25 + 0.1,
    ));
    checks.push(("all-zero parts give 0", losses::l_total(0.0, 0.0, 0.0, &op).l_total == 0.0));
    let logged = op_run
        .log
        .iter()
        .all(|l| l.loss.is_consistent(&op_run.config.loss, 1e-6) && l.loss.l_phn >= 0.0 && l.loss.l_norm >= 0.0);
    checks.push(("decomposition holds on every training step", logged));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Verdict::new(
        failed.is_empty(),
        format!(
            "{}/{} examples, {} logged steps checked{}",
            checks.len() - failed.len(),
            checks.len(),
            op_run.log.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join("; ")) }
        ),
    )
}

/// Extra checks on the default-corpus models; reported but not numbered.
fn supplementary(name: &str, v: Verdict) {
    println!("supplementary {name:<25} {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

/// The first epoch has no predecessor and counts as non-increasing.
fn loss_curve(losses: &[f64]) -> Verdict {
    let n = losses.len();
    let ok = n.min(1) + losses.windows(2).filter(|w| w[1] <= w[0]).count();
    let needed = (n * 8).div_ceil(10);
    Verdict::new(
        ok >= needed,
        format!(
            "{ok}/{n} epochs non-increasing (>= {needed}): {}",
            losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn attack(
    corpus: &Corpus,
    speaker: &SincClassifier<f32>,
    phoneme: &SincClassifier<f32>,
    lambda_phn: f64,
    lambda_norm: f64,
    target: Option<usize>,
) -> (AttackerRun, MetricsReport, f64) {
    let cfg = TrainConfig {
        loss: AttackLossConfig { lambda_phn, lambda_norm, target, ..Default::default() },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let run = trainer::train_attacker(corpus, speaker, phoneme, &cfg, |_| {}).unwrap();
    let (report, _) = eval::evaluate(&run.attacker, speaker, &eval::test_set(corpus), &EvalConfig { hop: cfg.eval_hop, target }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!(
        "  attack lambda_phn {lambda_phn} lambda_norm {lambda_norm} target {target:?}: SER {:.2}% SNR {:.2} dB proxy {:.2} PTR {:?} in {secs:.0} s",
        report.ser_percent, report.mean_snr_db, report.mean_perceptual_proxy, report.ptr_percent
    );
    (run, report, secs)
}

fn srak(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_srak"))
        .args(args)
        .env("SRAK_DATA_ROOT", dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Report lines with the timing-dependent RTF removed.
fn timing_free_report(dir: &Path) -> Option<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(dir.join("eval/report.jsonl")).ok()?;
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).ok()?;
            v.as_object_mut()?.remove("rtf");
            Some(v)
        })
        .collect()
}

fn end_to_end(dir: &Path) -> Option<(Vec<Vec<u8>>, Vec<serde_json::Value>)> {
    let steps: [&[&str]; 5] = [
        &["corpus", "--speakers", "3", "--utterances", "6", "--seed", "11"],
        &["pretrain", "--model", "speaker", "--epochs", "2", "--frames-per-epoch", "128", "--batch-size", "32", "--seed", "3"],
        &["pretrain", "--model", "phoneme", "--epochs", "2", "--frames-per-epoch", "128", "--batch-size", "32", "--seed", "3"],
        &["attack-train", "--epochs", "2", "--frames-per-epoch", "32", "--batch-size", "16", "--seed", "3"],
        &["evaluate"],
    ];
    for s in steps {
        if !srak(dir, s) {
            eprintln!("  srak {s:?} failed");
            return None;
        }
    }
    let mut files = Vec::new();
    for f in ["corpus/manifest.txt", "speaker.ckpt", "phoneme.ckpt", "attacker.ckpt", "attacker.ckpt.log"] {
        files.push(std::fs::read(dir.join(f)).ok()?);
    }
    Some((files, timing_free_report(dir)?))
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (end_to_end(a.path()), end_to_end(b.path())) {
        (Some(x), Some(y)) => {
            let files_same = x.0 == y.0;
            let metrics_same = x.1 == y.1;
            Verdict::new(
                files_same && metrics_same,
                format!(
                    "two CLI runs (3 speakers): manifest, checkpoints and log {}, metrics {}",
                    if files_same { "identical" } else { "DIFFER" },
                    if metrics_same { "identical" } else { "DIFFER" }
                ),
            )
        }
        _ => Verdict::new(false, "an end-to-end run failed"),
    }
}

fn main() {
    // `cargo test` forwards harness flags: a listing request gets an empty
    // list and `--skip acceptance` skips the whole run.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") || args.windows(2).any(|w| w[0] == "--skip" && "acceptance".contains(w[1].as_str())) {
        return;
    }
    let mut board = Board { rows: Vec::new() };
    let suite = Instant::now();

    board.record(1, "gradient oracle", gradient_oracle());
    board.record(2, "zero-init identity", zero_init_identity());

    let corpus = Corpus::generate(&CorpusConfig::default()).unwrap();
    let start = Instant::now();
    let speaker = trainer::pretrain_speaker(&corpus, &TrainConfig::pretrain()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc = speaker.report.test_sentence_accuracy.unwrap_or(0.0) * 100.0;
    board.record(
        4,
        "clean speaker baseline",
        Verdict::new(
            acc >= 95.0 && speaker.config.epochs <= 10 && secs < 900.0,
            format!("test sentence accuracy {acc:.2}% (>= 95), {} epochs, {secs:.0} s (< 900 s)", speaker.config.epochs),
        ),
    );
    let phoneme = trainer::pretrain_phoneme(&corpus, &TrainConfig::pretrain()).unwrap();
    supplementary("speaker loss curve", loss_curve(&speaker.report.epoch_losses));
    supplementary("phoneme loss curve", loss_curve(&phoneme.report.epoch_losses));
    let fer = 100.0 * (1.0 - phoneme.report.test_frame_accuracy);
    let chance = 100.0 / phoneme.model.classes() as f64;
    supplementary(
        "phoneme frame error",
        Verdict::new(
            fer <= 30.0 && 100.0 - fer > chance,
            format!("test frame error {fer:.2}% (<= 30), accuracy {:.2}% vs chance {chance:.2}%", 100.0 - fer),
        ),
    );
    let (spk, phn) = (&speaker.model, &phoneme.model);

    let (op_run, op, op_secs) = attack(&corpus, spk, phn, 1.0, 1000.0, None);
    board.record(
        5,
        "operating-point attack",
        Verdict::new(
            op.ser_percent >= 90.0 && op.mean_snr_db >= 30.0 && op.mean_perceptual_proxy >= 25.0 && op_secs < 1800.0,
            format!(
                "SER {:.2}% (>= 90), SNR {:.2} dB (>= 30), proxy {:.2} (>= 25), clean SER {:.2}%, {op_secs:.0} s (< 1800 s)",
                op.ser_percent, op.mean_snr_db, op.mean_perceptual_proxy, op.clean_ser_percent
            ),
        ),
    );
    board.record(3, "stitching", stitching(&op_run.attacker, &corpus));

    let (_, free, _) = attack(&corpus, spk, phn, 0.0, 0.0, None);
    let (_, norm_only, _) = attack(&corpus, spk, phn, 0.0, 1000.0, None);
    let snr_gap = norm_only.mean_snr_db - free.mean_snr_db;
    board.record(
        6,
        "trade-off direction",
        Verdict::new(
            snr_gap >= 10.0 && op.mean_perceptual_proxy >= norm_only.mean_perceptual_proxy,
            format!(
                "SNR (0,0) {:.2} vs (0,1000) {:.2} dB, gap {snr_gap:.2} (>= 10); proxy (1,1000) {:.2} vs (0,1000) {:.2}",
                free.mean_snr_db, norm_only.mean_snr_db, op.mean_perceptual_proxy, norm_only.mean_perceptual_proxy
            ),
        ),
    );

    let target = ChaCha8Rng::seed_from_u64(2019).random_range(0..spk.classes());
    let (_, tg, _) = attack(&corpus, spk, phn, 1.0, 1000.0, Some(target));
    let ptr = tg.ptr_percent.unwrap_or(0.0);
    board.record(
        7,
        "targeted attack",
        Verdict::new(
            ptr >= 50.0 && tg.mean_snr_db >= 25.0,
            format!("target {target}: PTR {ptr:.2}% (>= 50), SNR {:.2} dB (>= 25), SER {:.2}%", tg.mean_snr_db, tg.ser_percent),
        ),
    );

    let test = eval::test_set(&corpus);
    let signals: Vec<&[f32]> = test.iter().map(|(_, u)| u.waveform.samples.as_slice()).collect();
    let rtf = eval::rtf(&op_run.attacker, &signals, SAMPLE_RATE).unwrap();
    board.record(
        8,
        "real-time factor",
        Verdict::new(rtf < 0.5, format!("{rtf:.4} (< 0.5) over {} test utterances, one thread", signals.len())),
    );
    board.record(9, "loss examples", loss_examples(&op_run));
    board.record(10, "determinism", determinism());

    board.rows.sort_by_key(|r| r.0);
    let passed = board.rows.iter().filter(|r| r.2.pass).count();
    println!("\nsummary ({:.0} s)", suite.elapsed().as_secs_f64());
    for (n, name, v) in &board.rows {
        println!("  {n:>2} {name:<28} {}", if v.pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {passed}/{} criteria pass", board.rows.len());
    let strict = std::env::var("SRAK_ACCEPTANCE_STRICT").is_ok_and(|v| v != "0" && !v.is_empty());
    if strict && passed != board.rows.len() {
        std::process::exit(1);
    }
}
