//! End-to-end acceptance checks, one test per criterion. Each test writes a
//! single `criterion N: PASS|FAIL ...` line straight to stderr so the verdicts
//! show up in `cargo test` output even when the test itself passes.
//!
//! The attack-heavy criteria share one benchmark dataset and run one at a
//! time so their wall-clock timings are not inflated by each other.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use clap::Parser;
use uap_core::attack::{run_attack, AttackConfig, Constraint, Norm, Strategy};
use uap_core::boundary::{
    binary_distance, binary_min_perturbation, cross_k_boundaries, default_max_iters, multiclass_min_perturbation,
    nearest_boundary, LinearClassifier,
};
use uap_core::cli::{cmd_attack, cmd_gen, Cli, Command, GenSummary};
use uap_core::datagen::Dataset;
use uap_core::encoder::{gradcheck_random, Encoder, EncoderConfig};
use uap_core::eval::{evaluate, find, Report, IR_RECALL, TR_RECALL};
use uap_core::rng::Lcg64;
use uap_core::tensor::{apply_patch, l2_norm, project_l2, project_linf, Mask, PixelImage, Tensor};

/// Post-attack recalls of the default TIRA patch run on the benchmark.
const ANCHOR_TR_R10: f64 = 0.81;
const ANCHOR_IR_R10: f64 = 0.96;
const ANCHOR_TOLERANCE: f64 = 0.01;

fn verdict(n: u32, pass: bool, detail: &str, elapsed: Duration, limit_secs: f64) -> bool {
    let in_time = elapsed.as_secs_f64() < limit_secs;
    let ok = pass && in_time;
    let line = format!(
        "criterion {n}: {} {detail} ({:.2}s, limit {limit_secs}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

fn argv(args: &[&str]) -> Command {
    let mut full = vec!["uap"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).expect("valid arguments").command
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Serializes the heavy criteria.
fn heavy() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Benchmark {
    dir: PathBuf,
    summary: GenSummary,
}

/// The standard benchmark: `uap gen` with every default.
fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = scratch("benchmark");
        let Command::Gen(args) = argv(&["gen", "--out", dir.to_str().unwrap()]) else { unreachable!() };
        let summary = cmd_gen(&args).expect("benchmark generates");
        Benchmark { dir, summary }
    })
}

fn loaded() -> &'static (Encoder, Dataset) {
    static LOADED: OnceLock<(Encoder, Dataset)> = OnceLock::new();
    LOADED.get_or_init(|| {
        let b = benchmark();
        (Encoder::load(&b.dir.join("encoder")).unwrap(), Dataset::load(&b.dir).unwrap())
    })
}

fn default_tira(out: &Path) -> Report {
    let dataset = benchmark().dir.to_str().unwrap().to_string();
    let Command::Attack(args) = argv(&["attack", "--dataset", &dataset, "--out", out.to_str().unwrap()]) else {
        unreachable!()
    };
    cmd_attack(&args).expect("attack runs")
}

fn r10(report: &Report, metric: &str) -> (f64, f64) {
    let m = find(&report.metrics, metric, 10).expect("R@10 reported");
    (m.clean, m.adversarial)
}

fn gaussian_tensor(rng: &mut Lcg64, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gaussian()).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_classifier(rng: &mut Lcg64, c: usize, n: usize) -> LinearClassifier {
    LinearClassifier::new(gaussian_tensor(rng, vec![c, n]), gaussian_tensor(rng, vec![c])).unwrap()
}

fn brute_scores(clf: &LinearClassifier, x: &[f64]) -> Vec<f64> {
    (0..clf.num_classes()).map(|i| dot(clf.weights().row(i), x) + clf.offsets().data()[i]).collect()
}

fn top_class(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best })
}

#[test]
fn criterion_1_binary_geometry() {
    let started = Instant::now();
    let mut rng = Lcg64::new(101);
    let (mut worst_f, mut worst_d) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 1 + rng.below(64);
        let w = gaussian_tensor(&mut rng, vec![n]);
        let x = gaussian_tensor(&mut rng, vec![n]);
        let b = rng.gaussian();
        let r = binary_min_perturbation(&w, b, &x).unwrap();
        let moved: Vec<f64> = x.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
        let wn = l2_norm(&w).unwrap();
        worst_f = worst_f.max((dot(w.data(), &moved) + b).abs() / wn);
        let expected = (dot(w.data(), x.data()) + b).abs() / wn;
        worst_d = worst_d.max((l2_norm(&r).unwrap() - expected).abs());
        worst_d = worst_d.max((binary_distance(&w, b, &x).unwrap() - expected).abs());
    }
    let pass = worst_f <= 1e-9 && worst_d <= 1e-9;
    let detail = format!("max |f(x+r)|/|w| = {worst_f:.2e}, max distance error = {worst_d:.2e}");
    assert!(verdict(1, pass, &detail, started.elapsed(), 1.0), "{detail}");
}

#[test]
fn criterion_2_multiclass_minimality() {
    let started = Instant::now();
    let mut rng = Lcg64::new(202);
    let (mut worst, mut agree) = (0.0f64, 0usize);
    for _ in 0..500 {
        let n = 5 + rng.below(16);
        let c = 3 + rng.below(18);
        let clf = random_classifier(&mut rng, c, n);
        let x = gaussian_tensor(&mut rng, vec![n]);
        let scores = brute_scores(&clf, x.data());
        let y = top_class(&scores);
        let mut best = (usize::MAX, f64::INFINITY);
        for l in (0..c).filter(|&l| l != y) {
            let gap: Vec<f64> = clf.weights().row(l).iter().zip(clf.weights().row(y)).map(|(a, b)| a - b).collect();
            let d = (scores[l] - scores[y]).abs() / dot(&gap, &gap).sqrt();
            if d < best.1 {
                best = (l, d);
            }
        }
        let r = multiclass_min_perturbation(&clf, &x, y).unwrap();
        worst = worst.max((l2_norm(&r).unwrap() - best.1).abs());
        agree += usize::from(nearest_boundary(&clf, &x, y).unwrap() == best.0);
    }
    let pass = worst <= 1e-9 && agree == 500;
    let detail = format!("max norm error = {worst:.2e}, nearest boundary agrees {agree}/500");
    assert!(verdict(2, pass, &detail, started.elapsed(), 5.0), "{detail}");
}

#[test]
fn criterion_3_top_k_crossing() {
    let started = Instant::now();
    let mut rng = Lcg64::new(303);
    let (k, eta) = (5, 0.02);
    let (mut converged, mut pushed_out) = (0, 0);
    for _ in 0..200 {
        let clf = random_classifier(&mut rng, 50, 20);
        let x = gaussian_tensor(&mut rng, vec![20]);
        let y = top_class(&brute_scores(&clf, x.data()));
        let report = cross_k_boundaries(&clf, &x, y, k, eta, default_max_iters(k)).unwrap();
        converged += usize::from(report.converged);
        let moved: Vec<f64> = x.data().iter().zip(report.perturbation.data()).map(|(a, b)| a + b).collect();
        let scores = brute_scores(&clf, &moved);
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let rank = order.iter().position(|&c| c == y).unwrap() + 1;
        pushed_out += usize::from(rank > k);
    }
    let pass = converged == 200 && pushed_out == 200;
    let detail = format!("converged {converged}/200, true class ranked below top {k} in {pushed_out}/200");
    assert!(verdict(3, pass, &detail, started.elapsed(), 10.0), "{detail}");
}

#[test]
fn criterion_4_gradient_soundness() {
    let started = Instant::now();
    let linear = Encoder::random(EncoderConfig::linear([3, 32, 32], 64, 42)).unwrap();
    let mlp = Encoder::random(EncoderConfig::toy_mlp()).unwrap();
    let e_linear = gradcheck_random(&linear, 20, 50, 1e-5, 1).unwrap();
    let e_mlp = gradcheck_random(&mlp, 20, 50, 1e-5, 1).unwrap();
    let pass = e_linear < 1e-6 && e_mlp < 1e-6;
    let detail = format!("max relative error linear {e_linear:.2e}, mlp {e_mlp:.2e}");
    assert!(verdict(4, pass, &detail, started.elapsed(), 30.0), "{detail}");
}

#[test]
fn criterion_5_projection_invariants() {
    let started = Instant::now();
    let mut rng = Lcg64::new(505);
    let mut failures = Vec::new();
    for trial in 0..10_000 {
        let shape = vec![1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(6)];
        let t = gaussian_tensor(&mut rng, shape.clone()).scale(0.1 + 3.0 * rng.next_f64()).unwrap();
        let eps = 0.05 + 2.0 * rng.next_f64();

        let p2 = project_l2(&t, eps).unwrap();
        let n2 = l2_norm(&p2).unwrap();
        let n = l2_norm(&t).unwrap();
        let cosine = dot(p2.data(), t.data()) / (n2 * n);
        if project_l2(&p2, eps).unwrap() != p2 || n2 > eps || (n > 0.0 && (cosine - 1.0).abs() > 1e-12) {
            failures.push(format!("l2 #{trial}"));
        }
        let pi = project_linf(&t, eps).unwrap();
        if project_linf(&pi, eps).unwrap() != pi || pi.max_abs() > eps {
            failures.push(format!("linf #{trial}"));
        }

        let (h, w) = (shape[1], shape[2]);
        let side = 1 + rng.below(h.min(w));
        let inset = (rng.below(h - side + 1), rng.below(w - side + 1));
        let mask = Mask::bottom_right_square(&shape, side, inset).unwrap();
        let len = t.len();
        let image = PixelImage::new(Tensor::new(shape.clone(), (0..len).map(|_| rng.next_f64()).collect()).unwrap())
            .unwrap();
        let delta = Tensor::new(shape, (0..len).map(|_| rng.next_f64()).collect()).unwrap();
        let patched = apply_patch(&image, &delta, &mask).unwrap();
        let off_mask_equal = (0..len)
            .filter(|&i| mask.tensor().data()[i] == 0.0)
            .all(|i| patched.tensor().data()[i].to_bits() == image.tensor().data()[i].to_bits());
        if !off_mask_equal {
            failures.push(format!("patch #{trial}"));
        }
    }
    let detail = format!("{} violations over 10000 tensors {:?}", failures.len(), &failures[..failures.len().min(5)]);
    assert!(verdict(5, failures.is_empty(), &detail, started.elapsed(), 5.0), "{detail}");
}

static TIRA_RUN: OnceLock<(PathBuf, Report, Duration)> = OnceLock::new();

fn tira_run() -> &'static (PathBuf, Report, Duration) {
    TIRA_RUN.get_or_init(|| {
        benchmark();
        let out = scratch("tira_a");
        let started = Instant::now();
        let report = default_tira(&out);
        (out, report, started.elapsed())
    })
}

#[test]
fn criterion_6_end_to_end_patch_attack() {
    let _guard = heavy();
    let floor = &benchmark().summary.clean_floor;
    let (_, report, elapsed) = tira_run();
    let (tr_clean, tr_adv) = r10(report, TR_RECALL);
    let (ir_clean, ir_adv) = r10(report, IR_RECALL);
    let floor_ok = floor.recall >= floor.required;
    let halved = tr_adv <= 0.5 * tr_clean && ir_adv <= 0.5 * ir_clean;
    let anchored = (tr_adv - ANCHOR_TR_R10).abs() <= ANCHOR_TOLERANCE && (ir_adv - ANCHOR_IR_R10).abs() <= ANCHOR_TOLERANCE;
    let detail = format!(
        "clean floor {:.3} >= {:.3}: {floor_ok}; TR R@10 {tr_clean:.3} -> {tr_adv:.3}, IR R@10 {ir_clean:.3} -> {ir_adv:.3}; \
         halved both: {halved}; anchors ({ANCHOR_TR_R10}, {ANCHOR_IR_R10}) +-{ANCHOR_TOLERANCE}: {anchored}",
        floor.recall, floor.required
    );
    assert!(verdict(6, floor_ok && halved && anchored, &detail, *elapsed, 300.0), "{detail}");
}

fn patch_run(strategy: Strategy) -> Report {
    let (enc, ds) = loaded();
    let cfg = AttackConfig::new(Constraint::default_patch(ds.params.image_shape).unwrap());
    let (p, _) = run_attack(enc, ds, &cfg, strategy).unwrap();
    let mut report = Report::new("attack", enc.content_hash(), ds.content_hash().unwrap());
    report.metrics = evaluate(enc, ds, &p, &[10], &[]).unwrap();
    report
}

#[test]
fn criterion_7_strategy_asymmetry() {
    let _guard = heavy();
    loaded();
    let started = Instant::now();
    let tra = patch_run(Strategy::Tra);
    let ira = patch_run(Strategy::Ira);
    let (tr_clean, tr_after_ira) = r10(&ira, TR_RECALL);
    let (ir_clean, ir_after_ira) = r10(&ira, IR_RECALL);
    let (_, ir_after_tra) = r10(&tra, IR_RECALL);
    let pass = ir_after_tra >= ir_after_ira && tr_after_ira < tr_clean && ir_after_ira < ir_clean;
    let detail = format!(
        "IR R@10 after TRA {ir_after_tra:.3} >= after IRA {ir_after_ira:.3}; IRA moves TR {tr_clean:.3} -> {tr_after_ira:.3}, \
         IR {ir_clean:.3} -> {ir_after_ira:.3}"
    );
    assert!(verdict(7, pass, &detail, started.elapsed(), 600.0), "{detail}");
}

#[test]
fn criterion_8_global_budgets() {
    let _guard = heavy();
    loaded();
    let (enc, ds) = loaded();
    let started = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut tr_after = Vec::new();
    for norm in [Norm::L2, Norm::Linf] {
        let cfg = AttackConfig::new(Constraint::default_global(norm));
        let Constraint::Global { epsilon, .. } = cfg.constraint else { unreachable!() };
        let (p, trace) = run_attack(enc, ds, &cfg, Strategy::Tra).unwrap();
        let worst = trace
            .commits
            .iter()
            .map(|c| if norm == Norm::L2 { c.l2_norm } else { c.linf_norm })
            .fold(0.0, f64::max);
        let final_size = if norm == Norm::L2 { l2_norm(&p.delta).unwrap() } else { p.delta.max_abs() };
        let bound = if norm == Norm::L2 { epsilon + 1e-9 } else { epsilon };
        pass &= !trace.commits.is_empty() && worst <= bound && final_size <= bound;
        let metrics = evaluate(enc, ds, &p, &[10], &[]).unwrap();
        tr_after.push(find(&metrics, TR_RECALL, 10).unwrap().adversarial);
        parts.push(format!("{norm:?}: {} commits, max {worst:.6} <= {bound:.6}", trace.commits.len()));
    }

    let cfg = AttackConfig::new(Constraint::Global { norm: Norm::L2, epsilon: 1e-9 });
    let (p, _) = run_attack(enc, ds, &cfg, Strategy::Tra).unwrap();
    let metrics = evaluate(enc, ds, &p, &[1, 5, 10], &[1, 5]).unwrap();
    let drift = metrics.iter().map(|m| (m.clean - m.adversarial).abs()).fold(0.0, f64::max);
    pass &= drift <= 0.01;
    parts.push(format!("eps=1e-9 max metric drift {drift:.4}"));
    parts.push(format!("TR R@10 after l2 {:.3}, after linf {:.3}", tr_after[0], tr_after[1]));
    let detail = parts.join("; ");
    assert!(verdict(8, pass, &detail, started.elapsed(), 600.0), "{detail}");
}

#[test]
fn criterion_9_determinism() {
    let _guard = heavy();
    let (first_dir, first, _) = tira_run();
    let second_dir = scratch("tira_b");
    let started = Instant::now();
    let second = default_tira(&second_dir);
    let a = fs::read(first_dir.join("delta.uapt")).unwrap();
    let b = fs::read(second_dir.join("delta.uapt")).unwrap();
    let pass = a == b && first.perturbation_hash == second.perturbation_hash;
    let detail = format!(
        "delta hashes {} / {}",
        first.perturbation_hash.as_deref().unwrap_or("-"),
        second.perturbation_hash.as_deref().unwrap_or("-")
    );
    assert!(verdict(9, pass, &detail, started.elapsed(), 300.0), "{detail}");
}
