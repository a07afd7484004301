//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Run with `cargo test -p weaksig-cli --test acceptance -- --nocapture`
//! to see the verdict lines.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksig::catalog::{apportion, assign_label, stratified_split, ClassLabel, Split, DEFAULT_RATIOS};
use weaksig::corpus::read_manifest;
use weaksig::dualview::{StftConfig, WindowFn};
use weaksig::objectives::{focal_loss, focal_loss_tensor, gaussian_nll, gaussian_nll_tensor};
use weaksig::pdvfn::acr::Acr;
use weaksig::pdvfn::pmtf::Pmtf;
use weaksig::pdvfn::{PdvfnConfig, Task, Views};
use weaksig::preprocess::{run_pipeline_traced, PipelineConfig};
use weaksig::spectra_synth::{generate_spectrum, sample_params, GeneratorConfig, StellarParams, C_KM_S};
use weaksig::train_eval::metrics::{classification_metrics, rank_auc};
use weaksig_cli::population::{Outcome, Population, POPULATION_FILE};
use weaksig_cli::run::{LOSS_LOG_FILE, SUMMARY_FILE};
use weaksig_tensor::gradcheck::{finite_difference_check, store_gradient_check, weighted_sum, Coords};
use weaksig_tensor::nn::{self, AttentionWeights, BatchNormOptions, GruLayer, GruWeights};
use weaksig_tensor::{ParamStore, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_weaksig");

fn verdict(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn desk_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn weaksig(args: &[&str]) {
    let o = Command::new(BIN).args(args).output().expect("binary runs");
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

// ---------------------------------------------------------------- 1

/// Deviation relative to `max(|expected|, 1)`: relative for values of
/// order one and above, absolute below.
fn deviation(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual.iter().zip(expected).map(|(a, e)| (a - e).abs() / e.abs().max(1.0)).fold(0.0, f64::max)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Linear interpolation in ln λ, locating each node by a linear scan.
fn naive_resample(wl: &[f64], flux: &[f64], range: (f64, f64), len: usize) -> Vec<f64> {
    let xs: Vec<f64> = wl.iter().map(|l| l.ln()).collect();
    let (a, b) = (range.0.ln(), range.1.ln());
    (0..len)
        .map(|k| {
            let x = a + k as f64 * (b - a) / (len - 1) as f64;
            let mut j = 0;
            for i in 0..xs.len() - 1 {
                if xs[i] <= x {
                    j = i;
                }
            }
            let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
            flux[j] + t * (flux[j + 1] - flux[j])
        })
        .collect()
}

/// Fully sorted window per node, edges replicated.
fn brute_median(v: &[f64], window: usize) -> Vec<f64> {
    let half = (window / 2) as isize;
    let n = v.len() as isize;
    (0..n)
        .map(|i| {
            let mut w: Vec<f64> = (-half..=half).map(|d| v[(i + d).clamp(0, n - 1) as usize]).collect();
            w.sort_by(f64::total_cmp);
            w[half as usize]
        })
        .collect()
}

/// Divides by the least-squares polynomial from the normal equations,
/// solved with Gauss-Jordan elimination and partial pivoting, on the node
/// index mapped to [-1, 1].
fn normal_equation_normalize(v: &[f64], degree: usize) -> Vec<f64> {
    let n = v.len();
    let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let k = degree + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (xi, yi) in x.iter().zip(v) {
        let pw: Vec<f64> = (0..k).map(|j| xi.powi(j as i32)).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += pw[r] * pw[c];
            }
            a[r][k] += pw[r] * yi;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|r| a[r][k] / a[r][r]).collect();
    x.iter()
        .zip(v)
        .map(|(xi, yi)| yi / coef.iter().enumerate().map(|(j, c)| c * xi.powi(j as i32)).sum::<f64>())
        .collect()
}

fn clip_and_standardize(v: &[f64], k: f64) -> Vec<f64> {
    let (m, sd) = mean_std(v);
    let clipped: Vec<f64> = v.iter().map(|&x| if (x - m).abs() > k * sd { m } else { x }).collect();
    let (m2, s2) = mean_std(&clipped);
    clipped.iter().map(|x| (x - m2) / s2).collect()
}

#[test]
fn criterion_1_preprocessing_exactness() {
    let start = Instant::now();
    let gcfg = GeneratorConfig::default();
    let pcfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut stage_dev, mut chain_dev, mut moment_dev) = (0.0f64, 0.0f64, 0.0f64);
    let mut lengths_ok = true;
    for i in 0..100 {
        let class = ClassLabel::ALL[i % 3];
        let params = StellarParams { rv: rng.random_range(-500.0..500.0), ..sample_params(class, &mut rng).unwrap() };
        let snr = rng.random_range(5.0..300.0);
        let spec = generate_spectrum(&params, snr, &gcfg, i as u64).unwrap();
        let t = run_pipeline_traced(&spec, &pcfg, i).unwrap();

        let rest: Vec<f64> = spec.wavelengths.iter().map(|l| l / (1.0 + params.rv / C_KM_S)).collect();
        let resampled = naive_resample(&t.rest_wavelengths, &spec.fluxes, pcfg.common_range, pcfg.target_length);
        let filtered = brute_median(&t.resampled, pcfg.median_window);
        let normalized = normal_equation_normalize(&t.filtered, pcfg.continuum_degree);
        let output = clip_and_standardize(&t.normalized, pcfg.clip_k);
        for (a, e) in [
            (&t.rest_wavelengths, &rest),
            (&t.resampled, &resampled),
            (&t.filtered, &filtered),
            (&t.normalized, &normalized),
            (&t.output.values, &output),
        ] {
            stage_dev = stage_dev.max(deviation(a, e));
        }

        // the oracle chain on its own, from the raw spectrum
        let chained = clip_and_standardize(
            &normal_equation_normalize(
                &brute_median(
                    &naive_resample(&rest, &spec.fluxes, pcfg.common_range, pcfg.target_length),
                    pcfg.median_window,
                ),
                pcfg.continuum_degree,
            ),
            pcfg.clip_k,
        );
        chain_dev = chain_dev.max(deviation(&t.output.values, &chained));

        lengths_ok &= t.output.values.len() == 3450;
        let (m, sd) = mean_std(&t.output.values);
        moment_dev = moment_dev.max(m.abs()).max((sd - 1.0).abs());
    }
    let elapsed = start.elapsed();
    let pass = stage_dev < 1e-9 && chain_dev < 1e-9 && lengths_ok && moment_dev < 1e-6 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        pass,
        &format!(
            "stage dev {stage_dev:.2e}, chained dev {chain_dev:.2e}, length 3450: {lengths_ok}, \
             moment dev {moment_dev:.2e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_labels_and_split() {
    let start = Instant::now();
    // index 250 sits exactly on each threshold
    let mut mismatches = 0;
    for i in 0..501i32 {
        for j in 0..501i32 {
            let fe_h = -1.0 + f64::from(i - 250) / 100.0;
            let c_fe = 0.7 + f64::from(j - 250) / 100.0;
            let expected = if i >= 250 {
                ClassLabel::Nmp
            } else if j >= 250 {
                ClassLabel::Cemp
            } else {
                ClassLabel::Cnmp
            };
            if assign_label(fe_h, c_fe).unwrap() != expected {
                mismatches += 1;
            }
        }
    }

    let n = 13_158;
    let class_counts = apportion(n, &GeneratorConfig::default().class_proportions);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in ClassLabel::ALL.iter().zip(&class_counts) {
        for _ in 0..count {
            let p = sample_params(*class, &mut rng).unwrap();
            labels.push(assign_label(p.fe_h, p.c_fe()).unwrap());
        }
    }
    labels.shuffle(&mut rng);
    let sampled_ok = ClassLabel::ALL
        .iter()
        .zip(&class_counts)
        .all(|(c, &k)| labels.iter().filter(|l| *l == c).count() == k);
    let splits = stratified_split(&labels, DEFAULT_RATIOS, 3).unwrap();
    let totals: Vec<usize> = Split::ALL.iter().map(|sp| splits.iter().filter(|s| *s == sp).count()).collect();
    let totals_ok = totals.iter().zip([9210usize, 1316, 2632]).all(|(&t, e)| t.abs_diff(e) <= 3);
    let mut per_class_ok = true;
    for class in ClassLabel::ALL {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        for (k, sp) in Split::ALL.iter().enumerate() {
            let got = members.iter().filter(|&&i| splits[i] == *sp).count() as f64;
            per_class_ok &= (got - DEFAULT_RATIOS[k] * members.len() as f64).abs() <= 1.0;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && sampled_ok && totals_ok && per_class_ok && elapsed < Duration::from_secs(5);
    verdict(
        2,
        pass,
        &format!(
            "{mismatches} grid mismatches, classes {class_counts:?}, splits {totals:?}, \
             per-class within 1: {per_class_ok}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 3

const STEP: f64 = 1e-5;
const ELEMENTWISE_TOL: f64 = 1e-4;
const STRUCTURED_TOL: f64 = 1e-3;
const MIN_COORDS: usize = 20;

type Input = (Vec<f64>, Vec<usize>);
type OpFn = Box<dyn Fn(&[Tensor]) -> weaksig_tensor::Result<Tensor>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Input {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape.to_vec())
}

/// |x| in [0.1, 1], away from the relu kink.
fn off_zero(shape: &[usize], seed: u64) -> Input {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, s) = uniform(shape, 0.1, 1.0, seed);
    (d.into_iter().map(|v| if rng.random_bool(0.5) { v } else { -v }).collect(), s)
}

/// Values 0.05 apart, so max selections survive the perturbation.
fn distinct(shape: &[usize], seed: u64) -> Input {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    d.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (d, shape.to_vec())
}

fn gru_weights(t: &[Tensor]) -> GruWeights {
    GruWeights { w_ih: t[0].clone(), w_hh: t[1].clone(), b_ih: t[2].clone(), b_hh: t[3].clone() }
}

fn gru_inputs(input: usize, hidden: usize, directions: usize, seed: u64) -> Vec<Input> {
    (0..directions)
        .flat_map(|d| {
            let s = seed + 4 * d as u64;
            [
                uniform(&[input, 3 * hidden], -0.6, 0.6, s),
                uniform(&[hidden, 3 * hidden], -0.6, 0.6, s + 1),
                uniform(&[3 * hidden], -0.3, 0.3, s + 2),
                uniform(&[3 * hidden], -0.3, 0.3, s + 3),
            ]
        })
        .collect()
}

fn op_cases() -> Vec<(String, f64, Vec<Input>, OpFn)> {
    let mut cases: Vec<(String, f64, Vec<Input>, OpFn)> = Vec::new();
    let mut add = |name: &str, tol: f64, inputs: Vec<Input>, f: OpFn| cases.push((name.to_string(), tol, inputs, f));
    let e = ELEMENTWISE_TOL;
    let st = STRUCTURED_TOL;
    let x = || uniform(&[4, 6], -1.5, 1.5, 1);
    let pos = || uniform(&[4, 6], 0.2, 2.0, 2);

    add("neg", e, vec![x()], Box::new(|t| Ok(t[0].neg())));
    add("add_scalar", e, vec![x()], Box::new(|t| Ok(t[0].add_scalar(0.7))));
    add("mul_scalar", e, vec![x()], Box::new(|t| Ok(t[0].mul_scalar(-1.3))));
    add("exp", e, vec![x()], Box::new(|t| Ok(t[0].exp())));
    add("ln", e, vec![pos()], Box::new(|t| Ok(t[0].ln())));
    add("square", e, vec![x()], Box::new(|t| Ok(t[0].square())));
    add("sqrt", e, vec![pos()], Box::new(|t| Ok(t[0].sqrt())));
    add("powf", e, vec![pos()], Box::new(|t| Ok(t[0].powf(-0.5))));
    add("relu", e, vec![off_zero(&[4, 6], 3)], Box::new(|t| Ok(t[0].relu())));
    add("sigmoid", e, vec![x()], Box::new(|t| Ok(t[0].sigmoid())));
    add("tanh", e, vec![x()], Box::new(|t| Ok(t[0].tanh())));
    add("softplus", e, vec![x()], Box::new(|t| Ok(t[0].softplus())));
    add("map", e, vec![x()], Box::new(|t| Ok(t[0].map(f64::sin, |x, _| x.cos()))));

    let a = || uniform(&[4, 5], -1.0, 1.0, 4);
    let b = || uniform(&[4, 5], -1.0, 1.0, 5);
    let row = || uniform(&[5], -1.0, 1.0, 6);
    let col = || uniform(&[4, 1], 0.5, 1.5, 7);
    add("add", e, vec![a(), b()], Box::new(|t| t[0].add(&t[1])));
    add("sub", e, vec![a(), b()], Box::new(|t| t[0].sub(&t[1])));
    add("mul", e, vec![a(), b()], Box::new(|t| t[0].mul(&t[1])));
    add("div", e, vec![a(), col()], Box::new(|t| t[0].div(&t[1])));
    add("add broadcast row", e, vec![a(), row()], Box::new(|t| t[0].add(&t[1])));
    add("mul broadcast row", e, vec![a(), row()], Box::new(|t| t[1].mul(&t[0])));
    add("sub broadcast column", e, vec![a(), col()], Box::new(|t| t[0].sub(&t[1])));

    let cube = || uniform(&[2, 3, 4], -1.0, 1.0, 8);
    add("sum", e, vec![cube()], Box::new(|t| Ok(t[0].sum())));
    add("mean", e, vec![cube()], Box::new(|t| Ok(t[0].mean())));
    add("sum_axes", e, vec![cube()], Box::new(|t| t[0].sum_axes(&[0, 2], false)));
    add("mean_axes", e, vec![cube()], Box::new(|t| t[0].mean_axes(&[1], true)));
    add("max_axis", e, vec![distinct(&[2, 3, 4], 9)], Box::new(|t| t[0].max_axis(1, false)));
    add("reshape", e, vec![cube()], Box::new(|t| t[0].reshape(&[6, 4])));
    add("permute", e, vec![cube()], Box::new(|t| t[0].permute(&[2, 0, 1])));
    add("transpose_last", e, vec![cube()], Box::new(|t| t[0].transpose_last()));
    add("narrow", e, vec![cube()], Box::new(|t| t[0].narrow(2, 1, 2)));
    add(
        "concat",
        e,
        vec![cube(), uniform(&[2, 1, 4], -1.0, 1.0, 11)],
        Box::new(|t| Tensor::concat(&[t[0].clone(), t[1].clone(), t[0].clone()], 1)),
    );
    add(
        "gather_rows",
        e,
        vec![uniform(&[8, 3], -2.0, 2.0, 12)],
        Box::new(|t| t[0].gather_rows(&[0, 2, 1, 1, 0, 2, 2, 1])),
    );
    add("softmax", e, vec![uniform(&[4, 5], -2.0, 2.0, 19)], Box::new(|t| t[0].softmax()));
    add("log_softmax", e, vec![uniform(&[4, 5], -2.0, 2.0, 19)], Box::new(|t| t[0].log_softmax()));

    add(
        "matmul 2-d",
        st,
        vec![uniform(&[3, 4], -1.0, 1.0, 13), uniform(&[4, 5], -1.0, 1.0, 14)],
        Box::new(|t| t[0].matmul(&t[1])),
    );
    add(
        "matmul batched",
        st,
        vec![uniform(&[2, 3, 4], -1.0, 1.0, 15), uniform(&[2, 4, 2], -1.0, 1.0, 16)],
        Box::new(|t| t[0].matmul(&t[1])),
    );
    add(
        "matmul shared rhs",
        st,
        vec![uniform(&[2, 3, 4], -1.0, 1.0, 17), uniform(&[4, 3], -1.0, 1.0, 18)],
        Box::new(|t| t[0].matmul(&t[1])),
    );
    add(
        "conv1d",
        st,
        vec![uniform(&[2, 3, 9], -1.0, 1.0, 20), uniform(&[4, 3, 3], -1.0, 1.0, 21), uniform(&[4], -1.0, 1.0, 22)],
        Box::new(|t| t[0].conv1d(&t[1], Some(&t[2]), 2, 1)),
    );
    add(
        "conv2d",
        st,
        vec![
            uniform(&[2, 2, 5, 6], -1.0, 1.0, 25),
            uniform(&[3, 2, 3, 3], -1.0, 1.0, 26),
            uniform(&[3], -1.0, 1.0, 27),
        ],
        Box::new(|t| t[0].conv2d(&t[1], Some(&t[2]), 2, 1)),
    );
    add(
        "reverse_conv2d",
        st,
        vec![uniform(&[2, 2, 6, 5], -1.0, 1.0, 28), uniform(&[2, 3, 5, 5], -1.0, 1.0, 29), uniform(&[3], -1.0, 1.0, 30)],
        Box::new(|t| t[0].reverse_conv2d(&t[1], Some(&t[2]))),
    );
    let map = || uniform(&[2, 2, 6, 8], -1.0, 1.0, 31);
    let seq = || uniform(&[2, 3, 10], -1.0, 1.0, 33);
    add("max_pool2d", st, vec![distinct(&[2, 2, 6, 8], 32)], Box::new(|t| t[0].max_pool2d(2, 2)));
    add("avg_pool2d", st, vec![map()], Box::new(|t| t[0].avg_pool2d(3, 2)));
    add("adaptive_avg_pool2d", st, vec![map()], Box::new(|t| t[0].adaptive_avg_pool2d(4, 3)));
    add("upsample_nearest2d", st, vec![map()], Box::new(|t| t[0].upsample_nearest2d(2)));
    add("max_pool1d", st, vec![distinct(&[2, 3, 10], 34)], Box::new(|t| t[0].max_pool1d(2, 2)));
    add("avg_pool1d", st, vec![seq()], Box::new(|t| t[0].avg_pool1d(3, 1)));
    add("adaptive_avg_pool1d", st, vec![seq()], Box::new(|t| t[0].adaptive_avg_pool1d(3)));

    add(
        "linear",
        st,
        vec![uniform(&[3, 4], -1.0, 1.0, 35), uniform(&[4, 2], -1.0, 1.0, 36), uniform(&[2], -1.0, 1.0, 37)],
        Box::new(|t| nn::linear(&t[0], &t[1], Some(&t[2]))),
    );
    add("normalize", st, vec![uniform(&[3, 8], -2.0, 2.0, 38)], Box::new(|t| nn::normalize(&t[0], &[1], 1e-5)));
    add(
        "layer_norm",
        st,
        vec![uniform(&[3, 5], -2.0, 2.0, 38), uniform(&[5], 0.5, 1.5, 39), uniform(&[5], -0.5, 0.5, 40)],
        Box::new(|t| nn::layer_norm(&t[0], &[1], &t[1], &t[2], 1e-5)),
    );
    let bn = || vec![uniform(&[3, 2, 4], -2.0, 2.0, 41), uniform(&[2], 0.5, 1.5, 42), uniform(&[2], -0.5, 0.5, 43)];
    add(
        "batch_norm training",
        st,
        bn(),
        Box::new(|t| Ok(nn::batch_norm(&t[0], &t[1], &t[2], &[0.0; 2], &[1.0; 2], BatchNormOptions::default())?.0)),
    );
    add(
        "batch_norm inference",
        st,
        bn(),
        Box::new(|t| {
            let opts = BatchNormOptions { training: false, ..Default::default() };
            Ok(nn::batch_norm(&t[0], &t[1], &t[2], &[0.3, -0.2], &[1.5, 0.7], opts)?.0)
        }),
    );

    let mut gru_dir = vec![uniform(&[2, 3, 2], -1.0, 1.0, 44)];
    gru_dir.extend(gru_inputs(2, 3, 1, 100));
    add("gru_direction", st, gru_dir.clone(), Box::new(|t| nn::gru_direction(&t[0], &gru_weights(&t[1..]), false)));
    add("gru_direction reversed", st, gru_dir, Box::new(|t| nn::gru_direction(&t[0], &gru_weights(&t[1..]), true)));
    let mut gru_bi = vec![uniform(&[2, 3, 2], -1.0, 1.0, 45)];
    gru_bi.extend(gru_inputs(2, 2, 2, 200));
    gru_bi.extend(gru_inputs(4, 2, 2, 300));
    add(
        "gru_bidirectional",
        st,
        gru_bi,
        Box::new(|t| {
            let layers: Vec<GruLayer> = t[1..]
                .chunks(8)
                .map(|c| GruLayer { forward: gru_weights(&c[..4]), backward: gru_weights(&c[4..]) })
                .collect();
            nn::gru_bidirectional(&t[0], &layers)
        }),
    );
    let d = 4;
    let mut attn = vec![uniform(&[2, 3, d], -1.0, 1.0, 46)];
    for i in 0..4 {
        attn.push(uniform(&[d, d], -0.8, 0.8, 47 + 2 * i));
        attn.push(uniform(&[d], -0.3, 0.3, 48 + 2 * i));
    }
    add(
        "multi_head_attention",
        st,
        attn,
        Box::new(|t| {
            let w = AttentionWeights {
                wq: t[1].clone(),
                bq: t[2].clone(),
                wk: t[3].clone(),
                bk: t[4].clone(),
                wv: t[5].clone(),
                bv: t[6].clone(),
                wo: t[7].clone(),
                bo: t[8].clone(),
            };
            Ok(nn::multi_head_attention(&t[0], &w, 2)?.0)
        }),
    );
    cases
}

/// Branch configuration small enough for exhaustive-ish checks: input
/// length 64 and an 8×16 time-frequency map.
fn branch_config() -> PdvfnConfig {
    let mut cfg = PdvfnConfig::toy();
    cfg.input_len = 64;
    cfg.stft = StftConfig { window_length: 30, hop: 8, window_fn: WindowFn::Hann };
    cfg.acr.channels = 4;
    cfg.acr.gru_hidden = 4;
    cfg.acr.heads = 2;
    cfg.acr.output_dim = 6;
    cfg.pmtf.branch_channels = 2;
    cfg.pmtf.rc_channels = 2;
    cfg.pmtf.ffc_target = (4, 8);
    cfg.pmtf.state_dim = 3;
    cfg.pmtf.output_dim = 6;
    cfg.head_hidden = 8;
    cfg.task = Task::Classification;
    cfg
}

#[test]
fn criterion_3_autodiff_soundness() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut n_checks = 0;
    for (name, tol, inputs, f) in op_cases() {
        let total: usize = inputs.iter().map(|(d, _)| d.len()).sum();
        let coords = if total <= 40 { Coords::All } else { Coords::Random { count: 40, seed: 11 } };
        n_checks += 1;
        let r = match finite_difference_check(|t| weighted_sum(&f(t)?, 3), &inputs, coords, STEP) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        if r.checked < MIN_COORDS || !(r.max_rel_error < tol) {
            failures.push(format!("{name} ({} coords, {:.1e})", r.checked, r.max_rel_error));
        }
    }

    let cfg = branch_config();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let spectra: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (vectors, maps) = Views::build(&cfg, &spectra).unwrap().batch(&[0, 1]).unwrap();
    assert_eq!(maps.shape(), &[2, 8, 16]);

    let mut store = ParamStore::new();
    let acr = Acr::new(&mut store, &cfg.acr, &mut rng).unwrap();
    let r = store_gradient_check(&store, |s| weighted_sum(&acr.forward(s, &vectors).unwrap(), 7), 40, 11, STEP).unwrap();
    n_checks += 1;
    if r.checked < MIN_COORDS || !(r.max_rel_error < STRUCTURED_TOL) {
        failures.push(format!("ACR branch ({} coords, {:.1e})", r.checked, r.max_rel_error));
    }

    let mut store = ParamStore::new();
    let pmtf = Pmtf::new(&mut store, &cfg.pmtf, &mut rng).unwrap();
    let r = store_gradient_check(&store, |s| weighted_sum(&pmtf.forward(s, &maps).unwrap(), 6), 40, 12, STEP).unwrap();
    n_checks += 1;
    if r.checked < MIN_COORDS || !(r.max_rel_error < STRUCTURED_TOL) {
        failures.push(format!("PMTF branch ({} coords, {:.1e})", r.checked, r.max_rel_error));
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        3,
        pass,
        &format!("{n_checks} gradient checks, failing: {failures:?}, {:.1} s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- 4

fn weighted_cross_entropy(logits: &[f64], targets: &[usize], alpha: &[f64]) -> Vec<f64> {
    let c = alpha.len();
    logits
        .chunks(c)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            alpha[t] * (log_z - row[t])
        })
        .collect()
}

#[test]
fn criterion_4_loss_oracles() {
    let zero = gaussian_nll(&[1.3], &[1.3], &[0.0], 1).unwrap().scalar;
    let half = gaussian_nll(&[2.0], &[1.0], &[0.0], 1).unwrap().scalar;
    let mut anchor_dev = zero.abs().max((half - 0.5).abs());

    // minimiser σ² = r²: zero gradient in log σ² there, higher loss either side
    let mut minimiser_ok = true;
    for r in [0.05, 0.3, 1.0, 2.5, 40.0] {
        let s_star = (r * r as f64).ln();
        let mu = Tensor::new(vec![0.0], &[1, 1]).unwrap();
        let log_var = Tensor::param(vec![s_star], &[1, 1]).unwrap();
        let loss = gaussian_nll_tensor(&mu, &log_var, &[r]).unwrap();
        loss.backward().unwrap();
        let grad = log_var.grad().unwrap()[0];
        anchor_dev = anchor_dev.max(grad.abs()).max((loss.item() - (0.5 * s_star + 0.5)).abs());
        let at = |s: f64| gaussian_nll(&[r], &[0.0], &[s], 1).unwrap().scalar;
        minimiser_ok &= at(s_star - 1e-3) > at(s_star) && at(s_star + 1e-3) > at(s_star);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut focal_dev = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..48);
        let logits: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let alpha: Vec<f64> = if rng.random_bool(0.5) {
            vec![1.0; 3]
        } else {
            (0..3).map(|_| rng.random_range(0.1..5.0)).collect()
        };
        let ce = weighted_cross_entropy(&logits, &targets, &alpha);
        let ce_mean = ce.iter().sum::<f64>() / n as f64;
        let fl = focal_loss(&logits, &targets, &alpha, 0.0).unwrap();
        let ft = focal_loss_tensor(&Tensor::new(logits.clone(), &[n, 3]).unwrap(), &targets, &alpha, 0.0).unwrap();
        focal_dev = focal_dev
            .max(deviation(&fl.per_sample, &ce))
            .max((fl.scalar - ce_mean).abs() / ce_mean.abs().max(1.0))
            .max((ft.item() - ce_mean).abs() / ce_mean.abs().max(1.0));
    }
    let pass = anchor_dev < 1e-9 && minimiser_ok && focal_dev < 1e-9;
    verdict(
        4,
        pass,
        &format!("NLL anchor dev {anchor_dev:.2e}, minimiser bracketed: {minimiser_ok}, focal(γ=0) vs CE dev {focal_dev:.2e}"),
    );
}

// ---------------------------------------------------------------- 5

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

struct Oracle {
    auc: f64,
    f1: f64,
    g_mean: f64,
    mcc: f64,
}

/// Macro scores over classes present in `y`; MCC as the correlation of
/// the one-hot truth and prediction matrices.
fn brute_force_metrics(scores: &[f64], y: &[usize]) -> Oracle {
    let n = y.len();
    let pred: Vec<usize> = scores
        .chunks(3)
        .map(|r| if r[0] >= r[1] && r[0] >= r[2] { 0 } else if r[1] >= r[2] { 1 } else { 2 })
        .collect();
    let present: Vec<usize> = (0..3).filter(|k| y.contains(k)).collect();
    let (mut auc, mut f1, mut log_recall, mut zero_recall) = (0.0f64, 0.0f64, 0.0f64, false);
    for &k in &present {
        let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            match (y[i] == k, pred[i] == k) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let col: Vec<f64> = scores.chunks(3).map(|r| r[k]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t == k).collect();
        auc += pairwise_auc(&col, &pos).unwrap_or(0.5);
        f1 += if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        let recall = tp / (tp + fn_);
        if recall == 0.0 {
            zero_recall = true;
        } else {
            log_recall += recall.ln();
        }
    }
    let m = present.len() as f64;
    let onehot = |v: &[usize]| -> Vec<[f64; 3]> {
        v.iter().map(|&c| std::array::from_fn(|k| if k == c { 1.0 } else { 0.0 })).collect()
    };
    let (xt, xp) = (onehot(y), onehot(&pred));
    let mean = |x: &[[f64; 3]], k: usize| x.iter().map(|r| r[k]).sum::<f64>() / n as f64;
    let cov = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
        (0..3)
            .map(|k| {
                let (ma, mb) = (mean(a, k), mean(b, k));
                a.iter().zip(b).map(|(ra, rb)| (ra[k] - ma) * (rb[k] - mb)).sum::<f64>()
            })
            .sum()
    };
    let denom = (cov(&xt, &xt) * cov(&xp, &xp)).sqrt();
    Oracle {
        auc: auc / m,
        f1: f1 / m,
        g_mean: if zero_recall { 0.0 } else { (log_recall / m).exp() },
        mcc: if denom > 0.0 { cov(&xt, &xp) / denom } else { 0.0 },
    }
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dev = 0.0f64;
    for set in 0..1000 {
        let n = rng.random_range(2..=120);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        // every fourth set has coarse scores, so AUC sees ties
        let coarse = set % 4 == 0;
        let scores: Vec<f64> = (0..3 * n)
            .map(|i| {
                let v: f64 = rng.random_range(-1.0..1.0) + if i % 3 == y[i / 3] { 0.4 } else { 0.0 };
                if coarse {
                    (v * 4.0).round() / 4.0 + 1e-3 * (i % 3) as f64
                } else {
                    v
                }
            })
            .collect();
        let got = classification_metrics(&scores, &y).unwrap();
        let want = brute_force_metrics(&scores, &y);
        for (a, b) in [(got.auc, want.auc), (got.f1, want.f1), (got.g_mean, want.g_mean), (got.mcc, want.mcc)] {
            dev = dev.max((a - b).abs());
        }
    }
    let mut auc_dev = 0.0f64;
    for n in (2..=500).step_by(7).chain([500]) {
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0) * 20.0f64).floor()).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        positive[0] = true;
        positive[1] = false;
        auc_dev = auc_dev.max((rank_auc(&scores, &positive).unwrap() - pairwise_auc(&scores, &positive).unwrap()).abs());
    }
    let pass = dev < 1e-12 && auc_dev < 1e-12;
    verdict(5, pass, &format!("metric dev {dev:.2e} over 1000 sets, rank vs pairwise AUC dev {auc_dev:.2e}"));
}

// ---------------------------------------------------------------- 6, 7

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    gen: PathBuf,
    proc: PathBuf,
}

/// The shipped desk scenario, generated and preprocessed once.
fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let (gen, proc) = (root.join("gen"), root.join("proc"));
        weaksig(&["generate", "--config", s(&desk_config("generate.kv")), "--out", s(&gen)]);
        weaksig(&[
            "preprocess",
            "--data",
            s(&gen),
            "--pipeline-config",
            s(&desk_config("pipeline.kv")),
            "--out",
            s(&proc),
        ]);
        Desk { _dir: dir, root, gen, proc }
    })
}

fn train_and_evaluate(name: &str, extra: &[&str], split: &str) -> (PathBuf, PathBuf) {
    let d = desk();
    let (model_cfg, train_cfg) = (desk_config("model.kv"), desk_config("train.kv"));
    let (model, eval) = (d.root.join(format!("{name}-model")), d.root.join(format!("{name}-eval")));
    let mut args = vec![
        "train",
        "--data",
        s(&d.proc),
        "--model-config",
        s(&model_cfg),
        "--train-config",
        s(&train_cfg),
        "--out",
        s(&model),
    ];
    args.extend_from_slice(extra);
    weaksig(&args);
    let ckpt = model.join("model.ckpt");
    weaksig(&["evaluate", "--data", s(&d.proc), "--checkpoint", s(&ckpt), "--split", split, "--out", s(&eval)]);
    (model, eval)
}

fn train_losses(model_dir: &Path) -> Vec<f64> {
    fs::read_to_string(model_dir.join(LOSS_LOG_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn criterion_6_end_to_end_learnability() {
    let start = Instant::now();
    let (model, eval) = train_and_evaluate("classify", &[], "test");
    let losses = train_losses(&model);
    let drop = 1.0 - losses[losses.len() - 1] / losses[0];

    let pop = Population::parse(&fs::read_to_string(eval.join(POPULATION_FILE)).unwrap(), "population").unwrap();
    let Outcome::Classification { class, logits, .. } = &pop.outcome else { panic!("classification expected") };
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let f1 = classification_metrics(&flat, class).unwrap().f1;

    let manifest = read_manifest(&desk().gen.join("manifest.tsv")).unwrap();
    let mut train_counts = [0usize; 3];
    for r in manifest.records.iter().filter(|r| r.split == Split::Train) {
        train_counts[r.class.code()] += 1;
    }
    let majority = (0..3).max_by_key(|&k| train_counts[k]).unwrap();
    let constant: Vec<f64> = class.iter().flat_map(|_| std::array::from_fn::<f64, 3, _>(|k| if k == majority { 1.0 } else { 0.0 })).collect();
    let majority_f1 = classification_metrics(&constant, class).unwrap().f1;

    // mean F1 over 20 row permutations of the logits
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut shuffled_f1 = 0.0;
    for _ in 0..20 {
        let mut rows: Vec<usize> = (0..logits.len()).collect();
        rows.shuffle(&mut rng);
        let permuted: Vec<f64> = rows.iter().flat_map(|&r| logits[r]).collect();
        shuffled_f1 += classification_metrics(&permuted, class).unwrap().f1 / 20.0;
    }
    let elapsed = start.elapsed();
    let pass = drop >= 0.5 && f1 >= majority_f1 + 0.15 && f1 >= shuffled_f1 + 0.15;
    verdict(
        6,
        pass,
        &format!(
            "{} epochs, loss {:.4} -> {:.4} (drop {:.1}%), test macro-F1 {f1:.3} vs majority {majority_f1:.3} \
             and shuffled {shuffled_f1:.3}, {:.0} s",
            losses.len(),
            losses[0],
            losses[losses.len() - 1],
            100.0 * drop,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_error_trends() {
    let start = Instant::now();
    let (_, eval) = train_and_evaluate("feh", &["--task", "regression", "--targets", "feh"], "test");
    let report = desk().root.join("feh-report");
    weaksig(&["report", "--eval", s(&eval), "--out", s(&report)]);
    let mut summary = weaksig::kv::KvMap::read(&report.join(SUMMARY_FILE)).unwrap();
    // undefined correlations read as NaN and fail the comparisons
    let mut num = |k: &str| summary.take_raw(k).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let (bins, snr_rho) = (num("snr_trend.bins"), num("snr_trend.spearman"));
    let (cells, density_rho) = (num("density.cells"), num("density.spearman"));
    let pass = bins >= 5.0 && snr_rho <= -0.8 && density_rho <= -0.5;
    verdict(
        7,
        pass,
        &format!(
            "SNR trend rho {snr_rho:.3} over {bins} bins, density rho {density_rho:.3} over {cells} cells, {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 8

const SMALL_MODEL: &str = "preset = toy
input_len = 64
stft.window_length = 30
stft.hop = 8
acr.channels = 4
acr.gru_hidden = 4
acr.gru_layers = 1
acr.heads = 2
acr.output_dim = 6
pmtf.branch_channels = 2
pmtf.rc_channels = 2
pmtf.ffc_target = 4, 8
pmtf.ssm_blocks = 1
pmtf.state_dim = 3
pmtf.output_dim = 6
head_hidden = 8
task = regression
targets = feh
";

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen_cfg = root.join("gen.kv");
    fs::write(&gen_cfg, "n_samples = 90\nclass_proportions = 0.45, 0.1, 0.45\nseed = 8\n").unwrap();
    let model_cfg = root.join("model.kv");
    fs::write(&model_cfg, SMALL_MODEL).unwrap();
    let train_cfg = root.join("train.kv");
    fs::write(&train_cfg, "epochs = 2\nbatch_size = 16\nlr0 = 0.005\n").unwrap();
    let dirs: Vec<PathBuf> = ["gen", "proc", "model", "eval", "report"].iter().map(|n| root.join(n)).collect();
    let ckpt = dirs[2].join("model.ckpt");
    weaksig(&["generate", "--config", s(&gen_cfg), "--out", s(&dirs[0])]);
    weaksig(&["preprocess", "--data", s(&dirs[0]), "--out", s(&dirs[1])]);
    weaksig(&[
        "train",
        "--data",
        s(&dirs[1]),
        "--model-config",
        s(&model_cfg),
        "--train-config",
        s(&train_cfg),
        "--out",
        s(&dirs[2]),
    ]);
    weaksig(&["evaluate", "--data", s(&dirs[1]), "--checkpoint", s(&ckpt), "--split", "all", "--out", s(&dirs[3])]);
    weaksig(&["report", "--eval", s(&dirs[3]), "--out", s(&dirs[4])]);

    let mut differing = Vec::new();
    let mut compared = 0;
    for d in &dirs {
        let again = root.join(format!("{}-replay", d.file_name().unwrap().to_string_lossy()));
        weaksig(&["replay", s(&d.join("run.manifest")), "--out", s(&again)]);
        let (a, b) = (dir_files(d), dir_files(&again));
        compared += a.len();
        if a != b {
            differing.push(d.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    verdict(
        8,
        differing.is_empty(),
        &format!("{compared} artifacts over 5 stages replayed, stages differing: {differing:?}"),
    );
}
