//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest harness so the
//! report is printed even when everything passes; the process exits non-zero on any FAIL.
//! An optional substring argument restricts the run to matching check names.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use wsseg_core::eval::{assd, hd95, BinaryMask};
use wsseg_core::nn::{grad_check, ConvSpec, LabeledImage, TinyNet, TinyNetConfig};
use wsseg_core::numerics::MatrixKind;
use wsseg_core::pam::{pairwise_affinity, random_walk, transition_matrix, AffinityField};
use wsseg_core::sce::{kmeans, Cam};
use wsseg_core::{Field2D, SeededRng, SparseMatrix};
use wsseg_harness::{
    run_ablation, run_pipeline, run_sweep, Cache, HarnessError, RunConfig, SweepAxis,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// A pipeline error fails the check with its message.
fn reported(r: Result<Outcome, HarnessError>) -> Outcome {
    r.unwrap_or_else(|e| outcome(false, format!("error: {e}")))
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

// ---------------------------------------------------------------------------------------------
// random walk

fn random_symmetric(rng: &mut SeededRng, n: usize, density: f64) -> SparseMatrix {
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(density) {
                let w = 1.0 - rng.uniform();
                entries.push((i, j, w));
                entries.push((j, i, w));
            }
        }
    }
    SparseMatrix::from_triplets(n, entries, MatrixKind::Symmetric).unwrap()
}

fn stochasticity() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.below(59);
        let density = rng.range(0.02, 0.5);
        let a = random_symmetric(&mut rng, n, density);
        for beta in [1.0, 2.0, 4.0, 8.0] {
            let t = transition_matrix(&a, beta).unwrap();
            for i in 0..n {
                let s: f64 = t.row(i).map(|(_, w)| w).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && within(elapsed, 10),
        format!(
            "1000 matrices x 4 betas, max |row sum - 1| = {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Dense reference for the whole refinement: affinities, Hadamard power, row normalization,
/// explicit matrix power, then max normalization.
fn dense_refine(
    m: &[f64],
    h: usize,
    w: usize,
    gamma: f64,
    beta: f64,
    t: usize,
    cam: &[f64],
) -> Vec<f64> {
    let n = h * w;
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (
                (i / w) as f64 - (j / w) as f64,
                (i % w) as f64 - (j % w) as f64,
            );
            if dy * dy + dx * dx <= gamma * gamma {
                a[i][j] = if i == j {
                    1.0
                } else {
                    (-(m[i] - m[j]).abs()).exp()
                };
            }
        }
    }
    let tm: Vec<Vec<f64>> = a
        .iter()
        .map(|row| {
            let p: Vec<f64> = row.iter().map(|x| x.powf(beta)).collect();
            let d: f64 = p.iter().sum();
            p.iter().map(|x| x / d).collect()
        })
        .collect();
    let mut power: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _ in 0..t {
        power = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| power[i][k] * tm[k][j]).sum())
                    .collect()
            })
            .collect();
    }
    let v: Vec<f64> = power
        .iter()
        .map(|row| row.iter().zip(cam).map(|(p, c)| p * c).sum())
        .collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| x / max).collect()
}

fn cam_of(h: usize, w: usize, values: Vec<f64>) -> Cam {
    Cam {
        class: 0,
        sample_id: "fixture".into(),
        checkpoint: "none".into(),
        map: Field2D::new(h, w, values).unwrap(),
    }
}

fn random_cam(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let max = v.iter().copied().fold(0.0, f64::max);
    v.iter_mut().for_each(|x| *x /= max);
    v
}

fn dense_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut shapes = vec![(12, 12), (1, 12), (12, 1), (1, 1)];
    shapes.extend((0..8).map(|_| (1 + rng.below(12), 1 + rng.below(12))));
    let mut worst = 0.0f64;
    let mut fixtures = 0;
    for &(h, w) in &shapes {
        // piecewise field so some affinities are near 1 and others near exp(-1)
        let m: Vec<f64> = (0..h * w)
            .map(|i| if (i % w) * 2 < w { 0.1 } else { 0.9 } + 0.1 * rng.uniform())
            .collect();
        let field = AffinityField::new(Field2D::new(h, w, m.clone()).unwrap()).unwrap();
        let cam = random_cam(&mut rng, h * w);
        for gamma in [1.0, 2.0, 5.0] {
            let a = pairwise_affinity(&field, gamma).unwrap();
            for beta in [1.0, 2.0, 4.0] {
                let tm = transition_matrix(&a, beta).unwrap();
                for t in [1, 4] {
                    let sparse = random_walk(&tm, &cam_of(h, w, cam.clone()), t).unwrap();
                    let dense = dense_refine(&m, h, w, gamma, beta, t, &cam);
                    for (x, y) in sparse.map.values().iter().zip(&dense) {
                        worst = worst.max((x - y).abs());
                    }
                    fixtures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && within(elapsed, 30),
        format!(
            "{fixtures} fixtures, max |sparse - dense| = {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn trivial_walks() -> Outcome {
    let mut rng = SeededRng::new(303);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let n = h * w;
        let cam = cam_of(h, w, random_cam(&mut rng, n));
        let identity = transition_matrix(&SparseMatrix::identity(n), 4.0).unwrap();
        if random_walk(&identity, &cam, 4).unwrap().map != cam.map {
            failures.push(format!("A = I, trial {trial}"));
        }
        let field = AffinityField::new(Field2D::from_fn(h, w, |_, _| rng.uniform())).unwrap();
        let tm = transition_matrix(&pairwise_affinity(&field, 2.0).unwrap(), 4.0).unwrap();
        if random_walk(&tm, &cam, 0).unwrap().map != cam.map {
            failures.push(format!("t = 0, trial {trial}"));
        }
        let constant = cam_of(h, w, vec![1.0; n]);
        if random_walk(&tm, &constant, 4).unwrap().map != constant.map {
            failures.push(format!("constant CAM, trial {trial}"));
        }
    }
    let detail = if failures.is_empty() {
        "50 trials x 3 identities, exact".to_string()
    } else {
        format!("mismatches: {}", failures.join("; "))
    };
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------------------------
// joint loss gradients

fn gradients() -> Outcome {
    let start = Instant::now();
    let (classes, k, size) = (2, 3, 8);
    let net = TinyNet::new(TinyNetConfig {
        image_size: size,
        encoder: vec![
            ConvSpec {
                channels: 4,
                stride: 2,
            },
            ConvSpec {
                channels: 6,
                stride: 1,
            },
        ],
        n_classes: classes,
        n_subclasses: k,
        init_seed: 5,
    })
    .unwrap();
    let mut rng = SeededRng::new(404);
    let data: Vec<(Field2D, Vec<u8>, Vec<u8>)> = (0..4)
        .map(|_| {
            let image = Field2D::from_fn(size, size, |_, _| rng.uniform());
            let y_p: Vec<u8> = (0..classes).map(|_| u8::from(rng.bernoulli(0.5))).collect();
            let mut y_s = vec![0u8; classes * k];
            for (c, &p) in y_p.iter().enumerate() {
                if p == 1 {
                    y_s[c * k + rng.below(k)] = 1;
                }
            }
            (image, y_p, y_s)
        })
        .collect();
    let batch: Vec<LabeledImage<'_>> = data
        .iter()
        .map(|(image, y_p, y_s)| LabeledImage {
            image,
            y_p,
            y_s: Some(y_s),
        })
        .collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for lambda in [0.0, 0.5, 1.0] {
        let r = grad_check(&net, &batch, lambda, 1e-5, 17).unwrap();
        pass &= r.coords_checked >= 200 && r.max_rel_error < 1e-4;
        parts.push(format!(
            "lambda {lambda}: {:.1e} over {} coords",
            r.max_rel_error, r.coords_checked
        ));
    }
    let elapsed = start.elapsed();
    outcome(
        pass && within(elapsed, 60),
        format!("{}, {:.2}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------------------------
// surface metrics

fn brute_boundary(bits: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && bits[y as usize * w + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let interior =
                inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1);
            if inside(y, x) && !interior {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn brute_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn brute_metrics(a: &[bool], b: &[bool], h: usize, w: usize) -> (f64, f64) {
    let (ba, bb) = (brute_boundary(a, h, w), brute_boundary(b, h, w));
    let (ab, ba) = (brute_directed(&ba, &bb), brute_directed(&bb, &ba));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let assd = (mean(&ab) + mean(&ba)) / 2.0;
    let mut pooled: Vec<f64> = ab.iter().chain(&ba).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let rank = 0.95 * (pooled.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let hd95 = pooled[lo] + (pooled[hi] - pooled[lo]) * (rank - lo as f64);
    (assd, hd95)
}

fn random_mask(rng: &mut SeededRng, h: usize, w: usize) -> Vec<bool> {
    let bits: Vec<bool> = if rng.bernoulli(0.5) {
        let p = rng.range(0.1, 0.9);
        (0..h * w).map(|_| rng.bernoulli(p)).collect()
    } else {
        let (cy, cx) = (rng.range(0.0, h as f64), rng.range(0.0, w as f64));
        let r = rng.range(0.5, 8.0);
        (0..h * w)
            .map(|i| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2) <= r * r)
            .collect()
    };
    if bits.iter().any(|&b| b) {
        bits
    } else {
        let mut bits = bits;
        bits[rng.below(h * w)] = true;
        bits
    }
}

fn surface_metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(505);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (h, w) = (1 + rng.below(16), 1 + rng.below(16));
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let (ma, mb) = (
            BinaryMask::new(h, w, a.clone()).unwrap(),
            BinaryMask::new(h, w, b.clone()).unwrap(),
        );
        let expected = brute_metrics(&a, &b, h, w);
        let got = (assd(&ma, &mb).unwrap(), hd95(&ma, &mb).unwrap());
        if got.0.to_bits() != expected.0.to_bits() || got.1.to_bits() != expected.1.to_bits() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && within(elapsed, 60),
        format!(
            "500 pairs, {mismatches} bitwise mismatches, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// k-means

/// Every lowest-SSE partition of `x` into exactly `k` non-empty groups (ties kept), as
/// canonical label vectors numbered by first occurrence.
fn exhaustive_partitions(x: &[f64], k: usize) -> Vec<Vec<usize>> {
    let n = x.len();
    let mut scored: Vec<(Vec<usize>, f64)> = Vec::new();
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        if (0..k).any(|c| !labels.contains(&c)) {
            continue;
        }
        let sse: f64 = (0..k)
            .map(|c| {
                let members: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| x[i]).collect();
                let m = members.iter().sum::<f64>() / members.len() as f64;
                members.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            })
            .sum();
        scored.push((canonical(&labels), sse));
    }
    let best = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let mut optimal: Vec<Vec<usize>> = scored
        .into_iter()
        .filter(|s| s.1 <= best + 1e-9)
        .map(|s| s.0)
        .collect();
    optimal.dedup();
    optimal
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut seen = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(p) => p,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

fn kmeans_fixtures() -> Outcome {
    let mut fixtures: Vec<Vec<f64>> = vec![
        vec![0.0, 1.0, 10.0, 11.0],
        vec![11.0, 0.0, 10.0, 1.0],
        vec![0.0, 0.5, 1.0, 9.0],
        vec![-4.0, -3.5, 2.0, 2.5],
        vec![0.0, 4.0, 6.0, 10.0],
    ];
    let mut rng = SeededRng::new(606);
    fixtures.extend((0..200).map(|_| (0..4).map(|_| rng.range(-10.0, 10.0)).collect()));
    let (mut runs, mut optimal, mut non_monotone) = (0, 0, 0);
    let mut misses = Vec::new();
    for (f, x) in fixtures.iter().enumerate() {
        let points: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        for k in 1..=3 {
            let best = exhaustive_partitions(x, k);
            for seed in 0..5 {
                let r = kmeans(&points, k, seed).unwrap();
                runs += 1;
                if r.sse_history.windows(2).any(|w| w[1] > w[0]) {
                    non_monotone += 1;
                }
                if best.contains(&canonical(&r.assignments)) {
                    optimal += 1;
                } else if misses.len() < 3 {
                    misses.push(format!("fixture {f} {x:?} k {k} seed {seed}"));
                }
            }
        }
    }
    let mut detail =
        format!("{runs} runs, {optimal} exact partition matches, {non_monotone} SSE increases");
    if !misses.is_empty() {
        detail.push_str(&format!("; e.g. {}", misses.join(", ")));
    }
    outcome(optimal == runs && non_monotone == 0, detail)
}

// ---------------------------------------------------------------------------------------------
// benchmark experiments

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ablation(cache: &Cache) -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let table = run_ablation(&cfg, &SEEDS, None, cache)?;
    let elapsed = start.elapsed();
    let mean = |l: &str| 100.0 * table.cell(l).dsc_mean;
    let (base, sce, pam, full) = (mean("baseline"), mean("sce"), mean("pam"), mean("sce+pam"));
    let pass = full > pam && pam > base && full > sce && sce > base && full - base >= 5.0;
    Ok(outcome(
        pass && within(elapsed, 600),
        format!(
            "Dice baseline {base:.2}, sce {sce:.2}, pam {pam:.2}, full {full:.2}; full - baseline {:.2} points, {:.0}s",
            full - base,
            elapsed.as_secs_f64()
        ),
    ))
}

fn k_sweep(cache: &Cache) -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let values = [1.0, 2.0, 4.0, 8.0, 16.0];
    let table = run_sweep(
        &RunConfig::default(),
        SweepAxis::K,
        &values,
        &SEEDS,
        None,
        cache,
    )?;
    let best = table.argmax();
    let curve: Vec<String> = table
        .points
        .iter()
        .map(|p| format!("K={} {:.2}", p.value, 100.0 * p.dsc_mean))
        .collect();
    Ok(outcome(
        best != 1.0 && best != 16.0,
        format!(
            "{}; argmax K = {best}, {:.0}s",
            curve.join(", "),
            start.elapsed().as_secs_f64()
        ),
    ))
}

/// Spread of the 5-seed mean Dice across clustering seeds; the widest spread for a single
/// benchmark seed is reported alongside.
fn cluster_seed_spread(cache: &Cache) -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let spread = |v: &[f64]| {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let dice: Vec<Vec<f64>> = (0..4u64)
        .map(|c| {
            SEEDS
                .iter()
                .map(|&seed| {
                    let mut cfg = RunConfig {
                        seed,
                        ..RunConfig::default()
                    };
                    cfg.sce.cluster_seed = Some(1000 + c);
                    Ok(100.0 * run_pipeline(&cfg, None, cache)?.dice())
                })
                .collect()
        })
        .collect::<Result<_, HarnessError>>()?;
    let means: Vec<f64> = dice
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let (worst_seed, worst) = SEEDS
        .iter()
        .enumerate()
        .map(|(i, &seed)| (seed, spread(&dice.iter().map(|d| d[i]).collect::<Vec<_>>())))
        .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    let elapsed = start.elapsed();
    let shown: Vec<String> = means.iter().map(|d| format!("{d:.2}")).collect();
    Ok(outcome(
        spread(&means) < 2.0 && within(elapsed, 600),
        format!(
            "mean Dice per clustering seed [{}], spread {:.2} points (widest single-seed spread {worst:.2} at seed {worst_seed}), {:.0}s",
            shown.join(", "),
            spread(&means),
            elapsed.as_secs_f64()
        ),
    ))
}

fn determinism() -> Result<Outcome, HarnessError> {
    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let cfg = RunConfig {
        seed: 77,
        ..RunConfig::default()
    };
    run_pipeline(&cfg, Some(&first), &Cache::new())?;
    let snapshot = RunConfig::load(&first.join("config.json"))?;
    run_pipeline(&snapshot, Some(&second), &Cache::new())?;
    let a = fs::read(first.join("metrics.csv")).unwrap();
    let b = fs::read(second.join("metrics.csv")).unwrap();
    Ok(outcome(
        !a.is_empty() && a == b,
        format!("metrics.csv {} bytes, identical: {}", a.len(), a == b),
    ))
}

type Check<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let cache = Cache::new();
    let checks: Vec<Check<'_>> = vec![
        ("transition rows are stochastic", Box::new(stochasticity)),
        (
            "sparse walk equals dense matrix power",
            Box::new(dense_equivalence),
        ),
        ("trivial walks are identities", Box::new(trivial_walks)),
        (
            "joint loss gradients match finite differences",
            Box::new(gradients),
        ),
        (
            "surface metrics equal brute force",
            Box::new(surface_metrics),
        ),
        (
            "module ablation ordering",
            Box::new(|| reported(ablation(&cache))),
        ),
        (
            "sub-class count sweep has interior maximum",
            Box::new(|| reported(k_sweep(&cache))),
        ),
        (
            "clustering seed spread under 2 points",
            Box::new(|| reported(cluster_seed_spread(&cache))),
        ),
        (
            "rerun from snapshot is byte-identical",
            Box::new(|| reported(determinism())),
        ),
        (
            "k-means on 1-D fixtures is monotone and optimal",
            Box::new(kmeans_fixtures),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let r = check();
        failed += usize::from(!r.pass);
        println!(
            "{} {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
