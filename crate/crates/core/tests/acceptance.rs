//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a readable checklist.
//!
//! The end-to-end criteria train the tiny backbone for 50 epochs twice and take
//! most of the suite's runtime.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gravitynet::anchors::{generate_gravity_points, GridConfig, HookingAssignment, LesionAnnotation, Point};
use gravitynet::config::{Profile, TrainConfig};
use gravitynet::data::{generate_synthetic, SyntheticSpec};
use gravitynet::eval::{bootstrap_compare, froc_curve, partial_aufc, EvalConfig, FrocCurve, MatchedImage};
use gravitynet::inference::{iou, nms, score_order, Detection, InferenceConfig};
use gravitynet::loss::{
    classification_loss, gravity_loss, gravity_loss_with_grad, regression_loss, smooth_l1, GravityLoss, LossConfig,
};
use gravitynet::pipeline::{cmd_compare, cmd_init, cmd_test, cmd_train, ComparisonReport, Subset, TestOptions};
use gravitynet::train::{RunReport, BEST_CHECKPOINT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) -> bool {
    println!("acceptance {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    r.set_stream(stream);
    r
}

// ---------------------------------------------------------------- 1

type Geometry = (usize, usize, usize, usize, &'static [(usize, usize)]);

#[test]
fn grid_counts_for_reference_geometries() {
    let start = Instant::now();
    let cases: [Geometry; 2] = [
        (3328, 2560, 104, 80, &[(6, 299_520), (10, 133_120), (15, 74_880), (30, 33_280)]),
        (1216, 1408, 38, 44, &[(5, 81_928), (6, 60_192), (10, 26_752), (15, 15_048), (30, 6_688)]),
    ];
    let mut mismatches = Vec::new();
    for (h, w, fh, fw, expected) in cases {
        for &(step, count) in expected {
            let grid = GridConfig {
                image_height: h,
                image_width: w,
                fm_height: fh,
                fm_width: fw,
                step,
                hooking_distance: step as f64,
            };
            let n = generate_gravity_points(&grid).unwrap().len();
            if n != count {
                mismatches.push(format!("{h}x{w} step {step}: {n} != {count}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches.is_empty() && elapsed < Duration::from_secs(1);
    let detail = format!("9 geometries, {:.3}s, mismatches {:?}", elapsed.as_secs_f64(), mismatches);
    assert!(verdict(1, "grid counts", ok, &detail));
}

// ---------------------------------------------------------------- 2

/// Central-difference check of the combined loss on one random instance.
/// Returns the worst relative error over all inputs that are not within
/// `margin` of a smooth-L1 breakpoint.
fn finite_difference_error(r: &mut ChaCha8Rng, config: &LossConfig) -> f64 {
    let n = r.random_range(2..12);
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    let offsets: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]).collect();
    let positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    let target_offset: Vec<[f64; 2]> = positive
        .iter()
        .map(|&p| if p { [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0)] } else { [0.0; 2] })
        .collect();
    let assignment = HookingAssignment {
        matched_lesion: positive.iter().map(|&p| p.then_some(0)).collect(),
        positive,
        target_offset,
    };
    let (_, grad) = gravity_loss_with_grad(&scores, &offsets, &assignment, config).unwrap();
    let h = 1e-6;
    let margin = 1e-3;
    let total = |s: &[f64], o: &[[f64; 2]]| gravity_loss(s, o, &assignment, config).unwrap().total;
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (mut up, mut down) = (scores.clone(), scores.clone());
        up[i] += h;
        down[i] -= h;
        let numeric = (total(&up, &offsets) - total(&down, &offsets)) / (2.0 * h);
        worst = worst.max(rel(grad.scores[i], numeric));
        for axis in 0..2 {
            let residual = (assignment.target_offset[i][axis] - offsets[i][axis]).abs();
            if assignment.positive[i] && (residual - 1.0).abs() < margin {
                continue;
            }
            let (mut up, mut down) = (offsets.clone(), offsets.clone());
            up[i][axis] += h;
            down[i][axis] -= h;
            let numeric = (total(&scores, &up) - total(&scores, &down)) / (2.0 * h);
            worst = worst.max(rel(grad.offsets[i][axis], numeric));
        }
    }
    worst
}

#[test]
fn loss_values_and_gradients() {
    let start = Instant::now();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let ce = LossConfig {
        lambda: 10.0,
        alpha: 0.5,
        phi: 0.0,
    };
    let focal = LossConfig::default();
    let reg_example = regression_loss(&[[0.0, 0.0]], &[[2.0, 0.0]], &[true]).unwrap();
    let values = [
        ("smooth_l1(0)", smooth_l1(0.0), 0.0),
        ("smooth_l1(1)", smooth_l1(1.0), 0.5),
        ("smooth_l1(2)", smooth_l1(2.0), 1.5),
        ("focal ce 0.5", classification_loss(&[0.5], &[true], &ce).unwrap(), 0.5 * 2f64.ln()),
        ("focal 0.9", classification_loss(&[0.9], &[true], &focal).unwrap(), 0.25 * 0.01 * -(0.9f64.ln())),
        ("regression (2,0)", reg_example, 1.5),
        ("no positives", regression_loss(&[[3.0, 1.0]], &[[0.0, 0.0]], &[false]).unwrap(), 0.0),
        ("combine", GravityLoss::combine(0.2, 0.05, 10.0).total, 0.7),
    ];
    let mut bad: Vec<String> = values
        .iter()
        .filter(|(_, got, want)| !close(*got, *want))
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    let perfect = classification_loss(&[1.0], &[true], &focal).unwrap();
    if !(0.0..1e-12).contains(&perfect) {
        bad.push(format!("perfect score loss {perfect}"));
    }
    if (0.9f64.ln() * -0.25 * 0.01 - 2.634e-4).abs() > 1e-7 {
        bad.push("focal 0.9 does not round to 2.634e-4".into());
    }

    let mut r = rng(2);
    let worst = (0..100).map(|_| finite_difference_error(&mut r, &focal)).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let ok = bad.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(30);
    let detail = format!(
        "worst gradient relative error {worst:.2e} over 100 instances, {:.2}s, value mismatches {bad:?}",
        elapsed.as_secs_f64()
    );
    assert!(verdict(2, "loss analytics", ok, &detail));
}

// ---------------------------------------------------------------- 3

#[test]
fn nms_suppression_certificate_and_idempotence() {
    let mut r = rng(3);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = r.random_range(0..=500);
        let extent = r.random_range(20.0..200.0);
        let mut candidates: Vec<Detection> = (0..n)
            .map(|i| {
                let score = (r.random_range(0..200) as f64) / 200.0;
                Detection::new(r.random_range(0.0..extent), r.random_range(0.0..extent), score, i)
            })
            .collect();
        candidates.sort_by(score_order);
        let config = InferenceConfig {
            box_side: [3.0, 5.0, 7.0][case % 3],
            iou_threshold: r.random_range(0.1..0.9),
            ..InferenceConfig::default()
        };
        let (side, thr) = (config.box_side, config.iou_threshold);
        let kept = nms(&candidates, &config);
        let kept_ids: std::collections::HashSet<usize> = kept.iter().map(|d| d.index).collect();

        let ordered = kept.windows(2).all(|w| w[0].score >= w[1].score);
        let mutually_clear = kept.iter().enumerate().all(|(i, a)| {
            kept[i + 1..].iter().all(|b| iou(&a.position, &b.position, side) <= thr)
        });
        let covered = candidates.iter().filter(|c| !kept_ids.contains(&c.index)).all(|c| {
            kept.iter()
                .any(|k| k.score >= c.score && iou(&k.position, &c.position, side) > thr)
        });
        let idempotent = nms(&kept, &config) == kept;
        if !(ordered && mutually_clear && covered && idempotent) {
            failures.push(case);
        }
    }
    let exact = iou(&Point::new(0.0, 0.0), &Point::new(1.0, 0.0), 7.0);
    let ok = failures.is_empty() && exact == 0.75;
    let detail = format!("1000 random sets, failing cases {failures:?}, iou(L=7, 1 px) = {exact}");
    assert!(verdict(3, "nms oracle", ok, &detail));
}

// ---------------------------------------------------------------- 4

/// Per image: `(position, score)` detections and the lesions.
type Instance = Vec<(Vec<(Point, f64)>, Vec<LesionAnnotation>)>;

/// Brute-force curve: greedy matching in descending score, then one operating
/// point per distinct score counting strictly higher detections, plus a final
/// cut at zero when every score is positive.
fn oracle_curve(images: &Instance) -> Vec<(f64, f64)> {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (dets, lesions) in images {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
        let mut claimed = vec![false; lesions.len()];
        for i in order {
            let (pos, score) = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (l, lesion) in lesions.iter().enumerate() {
                let d = ((pos.x - lesion.center.x).powi(2) + (pos.y - lesion.center.y).powi(2)).sqrt();
                let side = lesion.bbox_width.max(lesion.bbox_height);
                if !claimed[l] && d <= side && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((l, d));
                }
            }
            if let Some((l, _)) = best {
                claimed[l] = true;
            }
            pooled.push((score, best.is_some()));
        }
    }
    let lesions: usize = images.iter().map(|(_, l)| l.len()).sum();
    let n = images.len() as f64;
    let mut thresholds: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    if thresholds.last().is_none_or(|&t| t > 0.0) {
        thresholds.push(0.0);
    }
    thresholds
        .iter()
        .map(|&t| {
            let tp = pooled.iter().filter(|p| p.0 > t && p.1).count() as f64;
            let fp = pooled.iter().filter(|p| p.0 > t && !p.1).count() as f64;
            (fp / n, tp / lesions as f64)
        })
        .collect()
}

/// Area under the piecewise-linear curve on `[0, limit]` over `limit`, with the
/// curve extended flat past its last point.
fn oracle_aufc(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend_from_slice(points);
    let last = *pts.last().unwrap();
    pts.push((f64::INFINITY, last.1));
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 <= limit {
            (x1, y1)
        } else if x1.is_infinite() {
            (limit, y0)
        } else {
            (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

fn matched(images: &Instance) -> Vec<MatchedImage> {
    images
        .iter()
        .enumerate()
        .map(|(i, (dets, lesions))| {
            let d: Vec<Detection> = dets.iter().enumerate().map(|(k, (p, s))| Detection::new(p.x, p.y, *s, k)).collect();
            MatchedImage::new(format!("img{i}"), &d, lesions)
        })
        .collect()
}

fn micro_instance(r: &mut ChaCha8Rng) -> Instance {
    loop {
        let n_images = r.random_range(1..=5);
        let mut budget = r.random_range(0..=20);
        let mut images = Vec::new();
        for _ in 0..n_images {
            let lesions: Vec<LesionAnnotation> = (0..r.random_range(0..=3))
                .map(|_| {
                    let side = r.random_range(2.0..6.0);
                    LesionAnnotation::new(r.random_range(0.0..40.0), r.random_range(0.0..40.0), side, side)
                })
                .collect();
            let k = r.random_range(0..=budget);
            budget -= k;
            let dets = (0..k)
                .map(|_| {
                    let pos = match lesions.get(r.random_range(0..4)) {
                        Some(l) => Point::new(
                            l.center.x + r.random_range(-6.0..6.0),
                            l.center.y + r.random_range(-6.0..6.0),
                        ),
                        None => Point::new(r.random_range(0.0..40.0), r.random_range(0.0..40.0)),
                    };
                    // coarse scores so ties are common
                    (pos, r.random_range(0..8) as f64 / 8.0)
                })
                .collect();
            images.push((dets, lesions));
        }
        if images.iter().any(|(_, l)| !l.is_empty()) {
            return images;
        }
    }
}

#[test]
fn froc_and_aufc_match_brute_force() {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..500 {
        let inst = micro_instance(&mut r);
        let limit = [0.5, 1.0, 2.0, 10.0][case % 4];
        let curve = froc_curve(&matched(&inst)).unwrap();
        let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fppi, p.tpr)).collect();
        let want = oracle_curve(&inst);
        if got.len() != want.len() {
            failures.push(case);
            continue;
        }
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g.0 - w.0).abs()).max((g.1 - w.1).abs());
        }
        worst = worst.max((partial_aufc(&curve, limit) - oracle_aufc(&want, limit)).abs());
    }

    // Worked example: TP 0.9, FP 0.7, TP 0.5 over two images with one lesion each.
    let lesion = |x| LesionAnnotation::new(x, 10.0, 4.0, 4.0);
    let worked: Instance = vec![
        (vec![(Point::new(10.0, 10.0), 0.9), (Point::new(40.0, 40.0), 0.7)], vec![lesion(10.0)]),
        (vec![(Point::new(30.0, 10.0), 0.5)], vec![lesion(30.0)]),
    ];
    let worked_curve = froc_curve(&matched(&worked)).unwrap();
    let worked_points: Vec<(f64, f64)> = worked_curve.points.iter().map(|p| (p.fppi, p.tpr)).collect();
    let worked_ok = worked_points == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]
        && (partial_aufc(&worked_curve, 10.0) - 0.975).abs() < 1e-12;

    // Curve (0,0) -> (1,0.5) -> (10,0.5): ties make both jumps diagonal.
    let fp = |k: usize, s: f64| (0..k).map(move |i| (Point::new(100.0 + i as f64 * 10.0, 100.0), s));
    let mut first: Vec<(Point, f64)> = vec![(Point::new(10.0, 10.0), 0.8)];
    first.extend(fp(1, 0.8));
    first.extend(fp(9, 0.5));
    let mut second: Vec<(Point, f64)> = fp(1, 0.8).collect();
    second.extend(fp(9, 0.5));
    let tied: Instance = vec![(first, vec![lesion(10.0)]), (second, vec![lesion(30.0)])];
    let tied_aufc = partial_aufc(&froc_curve(&matched(&tied)).unwrap(), 10.0);
    let direct = FrocCurve {
        points: [(0.0, 0.0), (1.0, 0.5), (10.0, 0.5)]
            .iter()
            .map(|&(fppi, tpr)| gravitynet::eval::OperatingPoint { threshold: 0.0, fppi, tpr })
            .collect(),
    };
    let fixture_ok = (partial_aufc(&direct, 10.0) - 0.475).abs() < 1e-12 && (tied_aufc - 0.475).abs() < 1e-9;

    let ok = failures.is_empty() && worst < 1e-9 && worked_ok && fixture_ok;
    let detail = format!(
        "500 instances, max deviation {worst:.1e}, length mismatches {failures:?}, worked example {worked_points:?}, 0.475 fixture {tied_aufc}"
    );
    assert!(verdict(4, "froc/aufc oracle", ok, &detail));
}

// ---------------------------------------------------------------- 5

/// Two result sets on the same images, shaped like real ones: every image has
/// a few lesions, found at high scores with the given probability, plus
/// lower-scoring false positives.
fn result_pair(r: &mut ChaCha8Rng, images: usize, quality: [f64; 2]) -> [Vec<MatchedImage>; 2] {
    let mut sets = [Vec::new(), Vec::new()];
    for i in 0..images {
        let lesions: Vec<LesionAnnotation> = (0..r.random_range(0..=6))
            .map(|k| LesionAnnotation::new(20.0 + 30.0 * k as f64, 50.0, 5.0, 5.0))
            .collect();
        for (set, q) in sets.iter_mut().zip(quality) {
            let mut dets = Vec::new();
            for l in &lesions {
                if r.random_bool(q) {
                    dets.push(Detection::new(l.center.x, l.center.y, r.random_range(0.4..1.0), dets.len()));
                }
            }
            for _ in 0..r.random_range(0..40) {
                dets.push(Detection::new(r.random_range(0.0..250.0), 200.0, r.random_range(0.0..0.8), dets.len()));
            }
            set.push(MatchedImage::new(format!("img{i:03}"), &dets, &lesions));
        }
    }
    sets
}

#[test]
fn bootstrap_contract() {
    let mut r = rng(5);
    let [set, _] = result_pair(&mut r, 60, [0.7, 0.7]);
    let self_p: Vec<f64> = (0..10)
        .map(|seed| {
            let cfg = EvalConfig {
                rng_seed: seed,
                bootstrap_iterations: 200,
                ..EvalConfig::default()
            };
            bootstrap_compare(&set, &set, &cfg).unwrap().p_value
        })
        .collect();
    let self_ok = self_p.iter().all(|&p| p == 1.0);

    let lesions: Vec<Vec<LesionAnnotation>> = (0..30)
        .map(|i| (0..1 + i % 3).map(|k| LesionAnnotation::new(10.0 + 20.0 * k as f64, 10.0, 4.0, 4.0)).collect())
        .collect();
    let perfect: Vec<MatchedImage> = lesions
        .iter()
        .enumerate()
        .map(|(i, ls)| {
            let dets: Vec<Detection> = ls.iter().enumerate().map(|(k, l)| Detection::new(l.center.x, l.center.y, 1.0, k)).collect();
            MatchedImage::new(format!("p{i}"), &dets, ls)
        })
        .collect();
    let empty: Vec<MatchedImage> = lesions.iter().enumerate().map(|(i, ls)| MatchedImage::new(format!("p{i}"), &[], ls)).collect();
    let pe = bootstrap_compare(&perfect, &empty, &EvalConfig::default()).unwrap();
    let perfect_ok = pe.p_value == 0.0 && pe.deltas.iter().all(|&d| d > 0.0);

    let [big_a, big_b] = result_pair(&mut r, 200, [0.9, 0.5]);
    let cfg = EvalConfig::default();
    let start = Instant::now();
    let first = bootstrap_compare(&big_a, &big_b, &cfg).unwrap();
    let elapsed = start.elapsed();
    let second = bootstrap_compare(&big_a, &big_b, &cfg).unwrap();
    let json = |b: &gravitynet::eval::BootstrapResult| serde_json::to_string(b).unwrap();
    let repro_ok = first == second && json(&first) == json(&second);
    let fast = first.iterations == 1000 && elapsed < Duration::from_secs(60);

    let ok = self_ok && perfect_ok && repro_ok && fast;
    let detail = format!(
        "self p-values {self_p:?}, perfect-vs-empty p {}, reproducible {repro_ok}, 1000 iterations on 200 images in {:.2}s",
        pe.p_value,
        elapsed.as_secs_f64()
    );
    assert!(verdict(5, "bootstrap contract", ok, &detail));
}

// ---------------------------------------------------------------- 6 and 7

struct EndToEnd {
    _dir: tempfile::TempDir,
    report: RunReport,
    trained: PathBuf,
    comparison: ComparisonReport,
    seconds: f64,
}

fn end_to_end(tag: &str) -> EndToEnd {
    let dir = tempfile::Builder::new().prefix(tag).tempdir().unwrap();
    let data = dir.path().join("data");
    let start = Instant::now();
    generate_synthetic(&SyntheticSpec::default(), &data).unwrap();
    let mut config = TrainConfig::for_profile(Profile::Desk);
    config.checkpoint_dir = dir.path().join("run");
    let report = cmd_train(&config, &data).unwrap();

    let untrained_ckpt = dir.path().join("untrained.ckpt");
    cmd_init(&config, &data, &untrained_ckpt).unwrap();
    let options = TestOptions {
        subset: Subset::Test,
        inference: None,
    };
    let trained = dir.path().join("trained.csv");
    let untrained = dir.path().join("untrained.csv");
    cmd_test(&config.checkpoint_dir.join(BEST_CHECKPOINT), &data, &options, &trained).unwrap();
    cmd_test(&untrained_ckpt, &data, &options, &untrained).unwrap();
    let comparison = cmd_compare(&trained, &untrained, &data, &config, Subset::Test, &dir.path().join("compare")).unwrap();
    EndToEnd {
        seconds: start.elapsed().as_secs_f64(),
        _dir: dir,
        report,
        trained,
        comparison,
    }
}

fn first_run() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| end_to_end("gravitynet-run-a"))
}

#[test]
fn synthetic_end_to_end() {
    let run = first_run();
    let report = &run.report;
    let coverage_ok = report.coverage.lesions > 0 && report.coverage.uncovered == 0 && report.coverage.min_coverage >= 1;
    let best = &report.epochs[report.best_epoch - 1];
    let loss_ok = best.train_loss.total < report.epochs[0].train_loss.total;
    let aufc_ok = report.best_val_aufc >= 0.70;
    let r = &run.comparison.result;
    let gap = r.aufc_a - r.aufc_b;
    let compare_ok = gap >= 0.5 && r.p_value < 0.001;
    let time_ok = run.seconds <= 20.0 * 60.0;
    let ok = coverage_ok && loss_ok && aufc_ok && compare_ok && time_ok;
    let detail = format!(
        "coverage {:?}; best epoch {} val AUFC {:.4}; train loss {:.3} -> {:.3}; test AUFC trained {:.4} vs untrained {:.4}, gap {gap:.4}, p {}; {:.0}s",
        report.coverage,
        report.best_epoch,
        report.best_val_aufc,
        report.epochs[0].train_loss.total,
        best.train_loss.total,
        r.aufc_a,
        r.aufc_b,
        r.p_value,
        run.seconds
    );
    assert!(verdict(6, "synthetic end-to-end", ok, &detail));
}

fn digest(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn repeated_runs_give_identical_detections() {
    let a = first_run();
    let b = end_to_end("gravitynet-run-b");
    let (da, db) = (digest(&a.trained), digest(&b.trained));
    let ok = da == db && !da.is_empty();
    let detail = format!("detections files of {} and {} bytes", da.len(), db.len());
    assert!(verdict(7, "determinism", ok, &detail));
}
