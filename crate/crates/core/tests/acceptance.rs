//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use camodet_core::alignment::{
    batch_coverage_term, coverage_loss, intersect_area, iou, AlignmentConfig, CoveragePair,
};
use camodet_core::dataset::{
    self, build_term_repository, default_stopwords, mask_to_bbox, read_yolo_txt, write_yolo_txt,
    ConvertOptions, LabelRecord, MaskImage,
};
use camodet_core::eval::{evaluate, EvalConfig};
use camodet_core::gradcheck::{run_all, GradcheckConfig};
use camodet_core::numerics::svd_truncate;
use camodet_core::sfglu::{
    sfglu_gate, sfglu_gate_values, spatial_distances, target_patch, PatchGrid, SimilarityField,
};
use camodet_core::synth::{box_shrink_toy, run_benchmark, BenchConfig};
use camodet_core::textfusion::contrastive_weights;
use camodet_core::{
    BBox, FeatureMap, FusionVariant, GateConfig, GateConvParams, GateVariant, Matrix,
};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
    /// Set when the only failing clause is one no correct implementation can
    /// satisfy; the reason is printed and the run still exits zero.
    unattainable: Option<&'static str>,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
        unattainable: None,
    }
}

const AP75_NOT_INVARIANT: &str = "AP >= AP75 is not implied by threshold monotonicity: one GT matched by one detection at IoU 0.8 scores AP_t = 1 for t <= 0.8 and 0 above, so AP = 0.7 < AP75 = 1";

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn box_formulas() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst = 0.0f64;
    let mut mismatched_errors = 0;
    for _ in 0..10_000 {
        let (a, b) = random_box_pair(&mut rng);
        let exact = exact_box(&a, &b);
        worst = worst
            .max((intersect_area(&a, &b) - to_f64(&exact.intersect)).abs())
            .max((iou(&a, &b) - to_f64(&exact.iou)).abs());
        match (coverage_loss(&a, &b), &exact.coverage) {
            (Ok(v), Some(e)) => worst = worst.max((v - to_f64(e)).abs()),
            (Err(_), None) => {}
            _ => mismatched_errors += 1,
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && mismatched_errors == 0 && elapsed < Duration::from_secs(5),
        format!("10000 pairs, max abs error {worst:.2e}, {mismatched_errors} error mismatches, {elapsed:.2?}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let report = run_all(&GradcheckConfig::default()).expect("suites run");
    let elapsed = start.elapsed();
    let parts: Vec<String> = report
        .suites
        .iter()
        .map(|s| format!("{} {:.2e}", s.name, s.max_rel_error))
        .collect();
    let n = report.suites.iter().map(|s| s.instances).min().unwrap_or(0);
    outcome(
        report.passed() && n >= 50 && elapsed < Duration::from_secs(30),
        format!(
            "{n} instances per suite, max rel error: {}, {elapsed:.2?}",
            parts.join(", ")
        ),
    )
}

fn svd_contract() -> Outcome {
    let mut rng = rng(3);
    let (mut worst_tail, mut monotone, mut idempotent) = (0.0f64, true, true);
    for m in 0..100 {
        let k = rng.random_range(2..=12);
        let d = rng.random_range(4..=40);
        let mut rows: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut rng, d)).collect();
        if m % 4 == 0 {
            // rank-deficient: repeat a row
            rows[k - 1] = rows[0].clone();
        }
        let t = Matrix::from_rows(&rows).unwrap();
        let sigma = centered_singular_values(&t);
        let scale = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        let mut prev = f64::INFINITY;
        for r in 1..=k {
            let tr = svd_truncate(&t, r).unwrap();
            let err = frobenius_diff(&t, &tr);
            let tail = sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt();
            let rel = if tail > 1e-6 * scale {
                (err - tail).abs() / tail
            } else {
                (err - tail).abs() / scale
            };
            worst_tail = worst_tail.max(rel);
            monotone &= err <= prev + 1e-12 * scale;
            prev = err;
            let again = svd_truncate(&tr, r).unwrap();
            idempotent &= frobenius_diff(&again, &tr) <= 1e-10 * scale.max(1.0);
        }
    }
    outcome(
        worst_tail <= 1e-8 && monotone && idempotent,
        format!("100 matrices, max relative tail error {worst_tail:.2e}, monotone {monotone}, idempotent {idempotent}"),
    )
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &x)| if x > b.1 { (i, x) } else { b },
        )
        .0
}

fn fusion_contract() -> Outcome {
    let mut rng = rng(4);
    let (mut worst_sum, mut worst_uniform, mut flips) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let d = rng.random_range(2..=16);
        let refined = Matrix::new(k, d, gaussian(&mut rng, k * d)).unwrap();
        let v = gaussian(&mut rng, d);
        let g = gaussian(&mut rng, d);
        let w = contrastive_weights(&v, &g, &refined).unwrap();
        worst_sum = worst_sum.max((w.normalized.iter().sum::<f64>() - 1.0).abs());
        let same = contrastive_weights(&v, &v, &refined).unwrap();
        for b in &same.normalized {
            worst_uniform = worst_uniform.max((b - 1.0 / k as f64).abs());
        }
        let (a, c) = (
            10f64.powf(rng.random_range(-3.0..3.0)),
            10f64.powf(rng.random_range(-3.0..3.0)),
        );
        let vs: Vec<f64> = v.iter().map(|x| a * x).collect();
        let gs: Vec<f64> = g.iter().map(|x| c * x).collect();
        let scaled = contrastive_weights(&vs, &gs, &refined).unwrap();
        if argmax(&scaled.raw_scores) != argmax(&w.raw_scores) {
            flips += 1;
        }
    }
    outcome(
        worst_sum <= 1e-12 && worst_uniform <= 1e-12 && flips == 0,
        format!("1000 triples, |Σβ−1| ≤ {worst_sum:.1e}, uniform dev ≤ {worst_uniform:.1e}, {flips} argmax flips"),
    )
}

fn gate_bounds() -> Outcome {
    let mut rng = rng(5);
    let (mut elements, mut violations, mut non_finite, mut target_elements) =
        (0usize, 0usize, 0usize, 0usize);
    while elements < 100_000 {
        let (h, w, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let z = FeatureMap::new(h, w, c, gaussian(&mut rng, h * w * c)).unwrap();
        let spread = 10f64.powf(rng.random_range(-2.0..4.0));
        let scores = SimilarityField(
            gaussian(&mut rng, h * w)
                .into_iter()
                .map(|s| s * spread)
                .collect(),
        );
        let conv = GateConvParams::new(
            gaussian(&mut rng, c)
                .into_iter()
                .map(|x| x * spread)
                .collect(),
            gaussian(&mut rng, c).into_iter().map(|x| x * 5.0).collect(),
        )
        .unwrap();
        let cfg = GateConfig {
            temperature: 10f64.powf(rng.random_range(-2.0..1.0)),
            alpha: rng.random_range(0.1..3.0),
            epsilon: 10f64.powf(rng.random_range(-12.0..-3.0)),
        };
        let target = target_patch(&scores).unwrap();
        let dist = spatial_distances(&PatchGrid::new(h, w), target, cfg.epsilon).unwrap();
        let gates = sfglu_gate_values(&z, &scores, &dist, &conv, &cfg).unwrap();
        let out = sfglu_gate(&z, &scores, &dist, &conv, &cfg).unwrap();
        for (i, ((&x, &y), &g)) in z
            .as_slice()
            .iter()
            .zip(out.as_slice())
            .zip(&gates)
            .enumerate()
        {
            elements += 1;
            if i / c == target {
                target_elements += 1;
            }
            if !y.is_finite() || !g.is_finite() {
                non_finite += 1;
                continue;
            }
            let ok = g > 1.0
                && g < 1.0 + cfg.alpha
                && y.signum() == x.signum()
                && y.abs() > x.abs()
                && y.abs() < (1.0 + cfg.alpha) * x.abs();
            if !ok {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0 && non_finite == 0,
        format!("{elements} elements ({target_elements} on target patches), {violations} bound violations, {non_finite} non-finite"),
    )
}

fn evaluator_oracle() -> Outcome {
    let mut rng = rng(6);
    let (mut worst, mut presence, mut above_ap50, mut below_ap75) = (0.0f64, 0, 0, 0);
    let mut diff = |a: Option<f64>, b: Option<f64>, presence: &mut usize| match (a, b) {
        (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
        (None, None) => {}
        _ => *presence += 1,
    };
    for _ in 0..50 {
        let (dets, gts, difficulty) = toy_dataset(&mut rng);
        let report = evaluate(
            &dets,
            &gts,
            &EvalConfig {
                difficulty: difficulty.clone(),
            },
        );
        let brute = brute_evaluate(&dets, &gts, &difficulty);
        diff(report.ap, brute.ap, &mut presence);
        diff(report.ap50, brute.ap50, &mut presence);
        diff(report.ap75, brute.ap75, &mut presence);
        diff(report.ap_medium, brute.ap_medium, &mut presence);
        diff(report.ap_large, brute.ap_large, &mut presence);
        if report.per_class.len() != brute.per_class.len()
            || report.per_difficulty.len() != brute.per_difficulty.len()
        {
            presence += 1;
        }
        for row in &report.per_class {
            let b = brute
                .per_class
                .get(&row.class_index)
                .copied()
                .unwrap_or([None; 3]);
            diff(row.ap, b[0], &mut presence);
            diff(row.ap50, b[1], &mut presence);
            diff(row.ap75, b[2], &mut presence);
        }
        for row in &report.per_difficulty {
            let b = brute
                .per_difficulty
                .get(&row.level)
                .copied()
                .unwrap_or([None; 3]);
            diff(row.ap, b[0], &mut presence);
            diff(row.ap50, b[1], &mut presence);
            diff(row.ap75, b[2], &mut presence);
        }
        if let (Some(a), Some(a50), Some(a75)) = (report.ap, report.ap50, report.ap75) {
            above_ap50 += usize::from(a > a50);
            below_ap75 += usize::from(a < a75);
        }
    }
    let agrees = worst <= 1e-9 && presence == 0 && above_ap50 == 0;
    let mut o = outcome(
        agrees && below_ap75 == 0,
        format!(
            "50 datasets, max metric difference {worst:.2e}, {presence} presence mismatches, AP > AP50 on {above_ap50}, AP < AP75 on {below_ap75}"
        ),
    );
    if agrees && below_ap75 > 0 {
        o.unattainable = Some(AP75_NOT_INVARIANT);
    }
    o
}

fn hand_masks() -> Vec<(MaskImage, [f64; 4])> {
    let mut out = Vec::new();
    let mut rect = |h: usize,
                    w: usize,
                    rows: std::ops::Range<usize>,
                    cols: std::ops::Range<usize>,
                    expect: [f64; 4]| {
        let mut m = MaskImage::empty(h, w);
        m.fill_rect(rows, cols);
        out.push((m, expect));
    };
    rect(4, 4, 1..3, 1..3, [0.25, 0.25, 0.75, 0.75]);
    rect(4, 4, 0..4, 0..4, [0.0, 0.0, 1.0, 1.0]);
    rect(5, 10, 0..1, 0..1, [0.0, 0.0, 0.1, 0.2]);
    rect(5, 10, 4..5, 9..10, [0.9, 0.8, 1.0, 1.0]);
    rect(8, 4, 0..8, 2..3, [0.5, 0.0, 0.75, 1.0]);
    rect(10, 10, 3..4, 0..10, [0.0, 0.3, 1.0, 0.4]);
    rect(3, 7, 1..2, 6..7, [6.0 / 7.0, 1.0 / 3.0, 1.0, 2.0 / 3.0]);
    // two blobs: the box spans both
    let mut m = MaskImage::empty(6, 6);
    m.set(0, 5, true);
    m.set(5, 0, true);
    out.push((m, [0.0, 0.0, 1.0, 1.0]));
    // L shape touching the left border
    let mut m = MaskImage::empty(10, 20);
    m.fill_rect(2..9, 0..2);
    m.fill_rect(7..9, 0..12);
    out.push((m, [0.0, 0.2, 0.6, 0.9]));
    // diagonal
    let mut m = MaskImage::empty(4, 8);
    for i in 0..4 {
        m.set(i, 2 * i + 1, true);
    }
    out.push((m, [0.125, 0.0, 1.0, 1.0]));
    out
}

fn convert_fixture(dir: &std::path::Path) {
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    std::fs::create_dir_all(dir.join("descriptions")).unwrap();
    let mut labels = String::new();
    for (i, (mask, _)) in hand_masks().iter().enumerate() {
        let (h, w) = (mask.height, mask.width);
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if mask.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        });
        img.save(dir.join("masks").join(format!("m{i}.png")))
            .unwrap();
        labels.push_str(&format!(
            "m{i}\t{}\n",
            ["Pygmy Seahorse", "stick insect", "leaf frog"][i % 3]
        ));
    }
    std::fs::write(dir.join("labels.tsv"), labels).unwrap();
    std::fs::write(
        dir.join("descriptions").join("pygmy_seahorse.txt"),
        "A tiny seahorse with knobby tubercles.\nIts pink tubercles match the coral polyps.\nCurled tail grips gorgonian coral.\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("descriptions").join("stick insect.txt"),
        "Long thin body like a twig.\nBrown legs held along the body. Twig-like segments!\n",
    )
    .unwrap();
}

fn dataset_pipeline() -> Outcome {
    let mut rng = rng(7);
    let records: Vec<LabelRecord> = (0..10_000)
        .map(|_| {
            let (cx, cy): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let w = rng.random_range(0.0..=2.0f64 * cx.min(1.0 - cx));
            let h = rng.random_range(0.0..=2.0f64 * cy.min(1.0 - cy));
            LabelRecord {
                class_index: rng.random_range(0..100),
                bbox: BBox::from_center(cx, cy, w, h).unwrap(),
            }
        })
        .collect();
    let back = read_yolo_txt(&write_yolo_txt(&records)).unwrap();
    let mut worst = 0.0f64;
    let mut class_ok = back.len() == records.len();
    for (a, b) in records.iter().zip(&back) {
        class_ok &= a.class_index == b.class_index;
        for (x, y) in [
            (a.bbox.x1, b.bbox.x1),
            (a.bbox.y1, b.bbox.y1),
            (a.bbox.x2, b.bbox.x2),
            (a.bbox.y2, b.bbox.y2),
        ] {
            worst = worst.max((x - y).abs());
        }
    }

    let masks = hand_masks();
    let mask_misses = masks
        .iter()
        .filter(|(m, e)| {
            let b = mask_to_bbox(m).unwrap();
            [b.x1, b.y1, b.x2, b.y2]
                .iter()
                .zip(e)
                .any(|(x, y)| (x - y).abs() > 1e-12)
        })
        .count();

    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    convert_fixture(&input);
    let run = |name: &str| {
        let output = tmp.path().join(name);
        dataset::convert(&ConvertOptions {
            input: input.clone(),
            output: output.clone(),
            modifiers: vec!["pygmy".into()],
            stopwords: default_stopwords(),
            min_phrases: dataset::MIN_PHRASES,
        })
        .unwrap();
        ["terms.tsv", "phrases.tsv", "classes.txt", "text_stats.tsv"]
            .map(|f| std::fs::read(output.join(f)).unwrap())
    };
    let deterministic_files = run("a") == run("b");
    let descriptions = vec![
        (
            "frog".to_owned(),
            "green frog green leaf frog on a leaf".to_owned(),
        ),
        ("moth".to_owned(), "bark moth with bark wings".to_owned()),
    ];
    let reordered: HashSet<String> = {
        let mut words: Vec<String> = default_stopwords().into_iter().collect();
        words.reverse();
        words.into_iter().collect()
    };
    let mut r1 = build_term_repository(&descriptions, &default_stopwords());
    let mut r2 = build_term_repository(&descriptions, &reordered);
    r1.assemble(dataset::MIN_PHRASES);
    r2.assemble(dataset::MIN_PHRASES);
    let deterministic = deterministic_files
        && r1.terms_tsv() == r2.terms_tsv()
        && r1.phrases_tsv() == r2.phrases_tsv();

    outcome(
        worst <= 1e-6 && class_ok && mask_misses == 0 && deterministic,
        format!(
            "round-trip max error {worst:.2e} over 10000 records, {mask_misses}/{} masks wrong, repository deterministic {deterministic}",
            masks.len()
        ),
    )
}

fn benchmark_config() -> BenchConfig {
    BenchConfig {
        fusions: vec![FusionVariant::SumNormalize, FusionVariant::Contrastive],
        gates: vec![GateVariant::None, GateVariant::Sfglu],
        lambdas: vec![5.0],
        ..BenchConfig::default()
    }
}

fn directional(report: &camodet_core::synth::BenchReport, elapsed: Duration) -> Outcome {
    let parts: Vec<String> = ["contrastive fusion", "sf-glu gating"]
        .iter()
        .map(|n| match report.comparisons.iter().find(|c| c.name == *n) {
            Some(c) => format!(
                "{n}: {}/{} wins, means {:.4} vs {:.4}",
                c.wins,
                c.seeds,
                c.mean_better.unwrap_or(f64::NAN),
                c.mean_worse.unwrap_or(f64::NAN)
            ),
            None => format!("{n}: missing"),
        })
        .collect();
    let passed = ["contrastive fusion", "sf-glu gating"].iter().all(|n| {
        report
            .comparisons
            .iter()
            .any(|c| c.name == *n && c.passed && c.seeds == 20 && c.wins >= 16)
    });
    outcome(
        passed && elapsed < Duration::from_secs(300),
        format!("{}; {elapsed:.2?}", parts.join("; ")),
    )
}

fn difficulty(report: &camodet_core::synth::BenchReport) -> Outcome {
    let run = report
        .find(FusionVariant::Contrastive, GateVariant::Sfglu, 5.0)
        .expect("run present");
    let (m, o, s) = (run.mean_ap_mild, run.mean_ap_moderate, run.mean_ap_severe);
    let passed = matches!((m, o, s), (Some(a), Some(b), Some(c)) if a > b && b > c);
    let f = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.4}"));
    outcome(
        passed,
        format!(
            "mild {} > moderate {} > severe {} over {} seeds",
            f(m),
            f(o),
            f(s),
            run.seeds.len()
        ),
    )
}

fn lambda_behavior() -> Outcome {
    let mut rng = rng(10);
    let mut nonzero = 0;
    for _ in 0..1000 {
        let pairs: Vec<CoveragePair> = (0..rng.random_range(1..8))
            .map(|_| {
                let (mut a, b) = random_box_pair(&mut rng);
                if a.area() == 0.0 {
                    a = BBox::new(0.1, 0.1, 0.9, 0.9).unwrap();
                }
                CoveragePair {
                    pred: a,
                    gt: b,
                    gated: rng.random_bool(0.7),
                }
            })
            .collect();
        let cfg = AlignmentConfig {
            lambda: 0.0,
            ..AlignmentConfig::default()
        };
        if batch_coverage_term(&pairs, &cfg).unwrap() != 0.0 {
            nonzero += 1;
        }
    }
    let on = box_shrink_toy(5.0, 32, 50, 0.05, 0).unwrap();
    let off = box_shrink_toy(0.0, 32, 50, 0.05, 0).unwrap();
    let (on_start, on_end) = (on.mean_coverage[0], *on.mean_coverage.last().unwrap());
    let off_end = *off.mean_coverage.last().unwrap();
    // strictly decreasing until it reaches the contained equilibrium, then
    // only equilibrium chatter
    let settle = on
        .mean_coverage
        .iter()
        .position(|&m| m < 1e-3)
        .unwrap_or(on.mean_coverage.len());
    let decreasing = on.mean_coverage[..settle.min(on.mean_coverage.len() - 1) + 1]
        .windows(2)
        .all(|w| w[1] < w[0])
        && on.mean_coverage[settle..].iter().all(|&m| m < 1e-3);
    let below_off = on
        .mean_coverage
        .iter()
        .zip(&off.mean_coverage)
        .skip(1)
        .all(|(a, b)| a < b);
    outcome(
        nonzero == 0
            && on_end < on_start
            && decreasing
            && below_off
            && off.coverage_term.iter().all(|&t| t == 0.0),
        format!(
            "λ=0 term exactly 0 on 1000 batches ({nonzero} nonzero); toy coverage λ=5: {on_start:.4} → {on_end:.4}, λ=0: {:.4} → {off_end:.4}",
            off.mean_coverage[0]
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("box formula oracle", box_formulas()),
        ("gradient suite", gradients()),
        ("svd contract", svd_contract()),
        ("fusion contract", fusion_contract()),
        ("gate bounds", gate_bounds()),
        ("evaluator oracle", evaluator_oracle()),
        ("dataset pipeline", dataset_pipeline()),
    ];
    let start = Instant::now();
    let report = run_benchmark(&benchmark_config()).expect("benchmark runs");
    let elapsed = start.elapsed();
    results.push(("directional ablation", directional(&report, elapsed)));
    results.push(("difficulty ordering", difficulty(&report)));
    results.push(("coverage weight", lambda_behavior()));

    let (mut failed, mut fatal) = (0, 0);
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "{} {:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        if !o.passed {
            failed += 1;
            match o.unattainable {
                Some(reason) => println!("        not attainable: {reason}"),
                None => fatal += 1,
            }
        }
    }
    println!(
        "{}/{} criteria passed, {} failed as unattainable",
        results.len() - failed,
        results.len(),
        failed - fatal
    );
    if fatal > 0 {
        std::process::exit(1);
    }
}
