//! Acceptance suite: one pass/fail line per criterion, then a non-zero exit
//! if any failed. Runs without the libtest harness so the report stays
//! readable under `cargo test`.

use std::fs;
use std::process::Command;
use std::time::Instant;

use bnpbss::audio::{write_wav, WavEncoding};
use bnpbss::demix::{cost, demix, ip_sweep};
use bnpbss::eval::{decompose, evaluate, evaluate_signals, EvalScores};
use bnpbss::gig::{gig_moments, GigParams};
use bnpbss::mixgen::{convolve_mix, synth_nmf_source, synth_room, MixSpec, Mixing, ToySourceSpec};
use bnpbss::separator::{separate, stack_sources, SeparationResult};
use bnpbss::stft::{istft, stft, StftPlan};
use bnpbss::vb::init_vb_model;
use bnpbss::{Algorithm, DemixingStack, MultichannelSignal, SeparationConfig, Spectrogram};
use nalgebra::DMatrix;
use ndarray::{array, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

const RATE: u32 = 16_000;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moments of θ^{γ-1} exp(-ρθ - τ/θ) by trapezoid quadrature in log θ.
fn gig_quadrature(gamma: f64, rho: f64, tau: f64) -> (f64, f64) {
    let log_f = |u: f64| gamma * u - rho * u.exp() - tau * (-u).exp();
    let mode = ((gamma + (gamma * gamma + 4.0 * rho * tau).sqrt()) / (2.0 * rho)).ln();
    let peak = log_f(mode);
    let edge = |dir: f64| {
        let (mut u, mut step) = (mode, 0.01);
        while log_f(u) - peak > -750.0 {
            u += dir * step;
            step *= 1.2;
        }
        u
    };
    let (lo, hi) = (edge(-1.0), edge(1.0));
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let (mut z, mut m1, mut mi) = (0.0, 0.0, 0.0);
    for k in 0..=n {
        let u = lo + k as f64 * h;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        let f = w * (log_f(u) - peak).exp();
        z += f;
        m1 += f * u.exp();
        mi += f * (-u).exp();
    }
    (m1 / z, mi / z)
}

fn gig_moment_accuracy() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &gamma in &[-2.0, -0.5, 0.1, 0.5, 1.0, 5.0] {
        for &rho in &[1e-3, 1.0, 1e3] {
            for &tau in &[1e-3, 1.0, 1e3] {
                let m = gig_moments(&GigParams::new(gamma, rho, tau).unwrap()).unwrap();
                let (mean, inv) = gig_quadrature(gamma, rho, tau);
                worst = worst.max((m.mean - mean).abs() / mean).max((m.inv_mean - inv).abs() / inv);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "GIG moments vs quadrature",
        worst <= 1e-8 && secs < 10.0,
        format!("worst rel. error {worst:.2e} (limit 1e-8), {secs:.2} s (limit 10 s)"),
    )
}

fn stft_reconstruction() -> Verdict {
    let n = 3 * RATE as usize;
    let x = MultichannelSignal::from_channels(&[noise(n, 1), noise(n, 2)], RATE).unwrap();
    let plan = StftPlan::new(8192, 2048).unwrap();
    let start = Instant::now();
    let y = istft(&stft(&x, &plan).unwrap(), &plan, n).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        let a = x.channel(c).unwrap();
        let b = y.channel(c).unwrap();
        let (a, b) = (&a[8192..n - 8192], &b[8192..n - 8192]);
        let diff: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
        worst = worst.max((dot(&diff, &diff) / dot(a, a)).sqrt());
    }
    verdict(
        "STFT perfect reconstruction",
        worst <= 1e-10 && secs < 1.0,
        format!("interior rel. L2 error {worst:.2e} (limit 1e-10), {secs:.3} s (limit 1 s)"),
    )
}

fn demixing_monotonicity() -> Verdict {
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let (bins, frames) = (8, 64);
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((bins, frames, 2), || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let x = Spectrogram::new(data, 2 * (bins - 1), 1, RATE).unwrap();
        let r: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_simple_fn((bins, frames), || rng.random_range(0.1..3.0)))
            .collect();
        let mats = (0..bins)
            .map(|_| DMatrix::from_fn(2, 2, |a, b| c(if a == b { 2.0 } else { 0.0 } + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
            .collect();
        let mut w = DemixingStack::new(mats).unwrap();
        let mut prev = cost(&w, &demix(&w, &x).unwrap(), &r).unwrap();
        for _ in 0..50 {
            ip_sweep(&mut w, &x, &r, false).unwrap();
            let q = cost(&w, &demix(&w, &x).unwrap(), &r).unwrap();
            worst = worst.max((q - prev) / prev.abs());
            prev = q;
        }
    }
    verdict(
        "demixing sweep never increases the cost",
        worst <= 1e-9,
        format!("largest relative increase {worst:.2e} (limit 1e-9) over 10 instances x 50 sweeps"),
    )
}

fn bound_monotonicity() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let p = Array2::from_shape_simple_fn((32, 32), || {
            let e: f64 = Exp1.sample(&mut rng);
            e * rng.random_range(0.1..10.0)
        });
        let mut m = init_vb_model(p.view(), 8, 0.1, 0.1, 1.0 / 8.0, seed).unwrap();
        let mut prev = m.objective(p.view()).unwrap();
        for _ in 0..20 {
            for step in 0..3 {
                let aux = m.compute_auxiliaries();
                match step {
                    0 => m.update_t(p.view(), &aux).unwrap(),
                    1 => m.update_v(p.view(), &aux).unwrap(),
                    _ => m.update_z(p.view(), &aux).unwrap(),
                }
                let now = m.objective(p.view()).unwrap();
                worst = worst.max((now - prev) / prev.abs());
                prev = now;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "variational bound never increases",
        worst <= 1e-6 && secs < 30.0,
        format!("largest relative increase {worst:.2e} (limit 1e-6), {secs:.2} s (limit 30 s)"),
    )
}

fn eval_consistency() -> Verdict {
    let n = 20_000;
    let (a, b) = (noise(n, 10), noise(n, 11));
    let est: Vec<f64> = a.iter().zip(&b).zip(noise(n, 12)).map(|((x, y), z)| 0.8 * x - 0.3 * y + 0.2 * z).collect();
    let d = decompose(&est, &[&a, &b], 0, 32).unwrap();
    let additivity = (0..n)
        .map(|t| (d.s_target[t] + d.e_interf[t] + d.e_artif[t] - est[t]).abs())
        .fold(0.0, f64::max)
        / dot(&est, &est).sqrt();

    let s = noise(n, 13);
    let mut e = noise(n, 14);
    let k = dot(&e, &s) / dot(&s, &s);
    e.iter_mut().zip(&s).for_each(|(v, x)| *v -= k * x);
    let g = (dot(&s, &s) / dot(&e, &e) / 10.0).sqrt();
    let noisy: Vec<f64> = s.iter().zip(&e).map(|(x, y)| x + g * y).collect();
    let other = noise(n, 15);
    let snr = evaluate(&[&noisy, &other], &[&s, &other], 1).unwrap().sdr[0];

    let refs: Vec<Vec<f64>> = (0..3).map(|k| noise(4000, 20 + k)).collect();
    let r: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let perm = evaluate(&[r[2], r[0], r[1]], &r, 8).unwrap().permutation;

    verdict(
        "bss-eval self-consistency",
        additivity <= 1e-8 && (snr - 10.0).abs() <= 0.2 && perm == [2, 0, 1],
        format!("additivity {additivity:.1e} (limit 1e-8), 10 dB construction gives {snr:.3} dB, permutation {perm:?}"),
    )
}

struct Oracle {
    mixture: MultichannelSignal,
    references: MultichannelSignal,
}

/// Rank-2 and rank-8 toy sources, `n` seconds at 16 kHz, drawn on a grid of
/// `window` samples with a quarter hop.
fn toy_pair(seed: u64, window: usize, mixing: impl FnOnce() -> Mixing) -> Oracle {
    let source = |rank, s| {
        let mut spec = ToySourceSpec::new(rank, RATE, 10.0, s);
        spec.window_len = window;
        spec.hop = window / 4;
        synth_nmf_source(&spec).unwrap()
    };
    let sources = vec![source(2, 1000 + seed), source(8, 2000 + seed)];
    let references = stack_sources(&sources).unwrap();
    let mixture = convolve_mix(&MixSpec { sources, mixing: mixing() }).unwrap();
    Oracle { mixture, references }
}

fn instantaneous(seed: u64) -> Oracle {
    toy_pair(seed, 2048, || Mixing::Instantaneous(array![[1.0, 0.5], [0.5, 1.0]]))
}

fn config(algorithm: Algorithm, bases: usize, window_ms: f64, seed: u64) -> SeparationConfig {
    let mut cfg = SeparationConfig::for_algorithm(algorithm).with_bases(bases);
    cfg.window_ms = window_ms;
    cfg.hop_ms = window_ms / 4.0;
    cfg.seed = seed;
    cfg.iterations = 100;
    cfg
}

fn run(oracle: &Oracle, cfg: &SeparationConfig) -> (SeparationResult, EvalScores, f64) {
    let start = Instant::now();
    let result = separate(&oracle.mixture, cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let scores = evaluate_signals(&result.sources, &oracle.references, 512).unwrap();
    (result, scores, secs)
}

/// Final active-basis count of the estimate matched to each reference.
fn active_by_reference(result: &SeparationResult, scores: &EvalScores) -> Vec<usize> {
    let mut out = vec![0; scores.permutation.len()];
    for (e, &r) in scores.permutation.iter().enumerate() {
        out[r] = result.models[e].active_bases();
    }
    out
}

fn fmt_db(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.1}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Returns the oracle-separation verdict and the VB run's active counts,
/// which double as seed 0 of the adaptivity experiment.
fn oracle_separation() -> (Verdict, Vec<usize>) {
    let oracle = instantaneous(0);
    let mut pass = true;
    let mut parts = Vec::new();
    let mut vb_active = Vec::new();
    for (algorithm, bases) in [(Algorithm::VbNonparametric, 30), (Algorithm::Ilrma, 10)] {
        let (result, scores, secs) = run(&oracle, &config(algorithm, bases, 128.0, 0));
        pass &= scores.sir.iter().all(|&v| v >= 15.0) && scores.sdr.iter().all(|&v| v >= 10.0) && secs < 60.0;
        parts.push(format!(
            "{} K={bases}: SIR {} SDR {} dB in {secs:.1} s",
            algorithm.name(),
            fmt_db(&scores.sir),
            fmt_db(&scores.sdr)
        ));
        if algorithm == Algorithm::VbNonparametric {
            vb_active = active_by_reference(&result, &scores);
        }
    }
    let detail = format!("{} (limits SIR 15, SDR 10, 60 s)", parts.join("; "));
    (verdict("oracle separation", pass, detail), vb_active)
}

fn adaptivity(seed0: Vec<usize>) -> Verdict {
    let rest: Vec<Vec<usize>> = (1..10u64)
        .into_par_iter()
        .map(|seed| {
            let (result, scores, _) = run(&instantaneous(seed), &config(Algorithm::VbNonparametric, 30, 128.0, seed));
            active_by_reference(&result, &scores)
        })
        .collect();
    let all: Vec<Vec<usize>> = std::iter::once(seed0).chain(rest).collect();
    let wins = all.iter().filter(|a| a[0] < a[1]).count();
    let pairs: Vec<String> = all.iter().map(|a| format!("{}/{}", a[0], a[1])).collect();
    verdict(
        "active bases adapt to source rank",
        wins >= 8,
        format!("rank-2 < rank-8 in {wins}/10 seeds (need 8); counts {}", pairs.join(" ")),
    )
}

fn robustness_to_k() -> Verdict {
    let runs = [(Algorithm::VbNonparametric, 30), (Algorithm::Ilrma, 2), (Algorithm::Ilrma, 30)];
    let sdr: Vec<[f64; 3]> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let oracle = toy_pair(seed, 8192, || Mixing::Convolutive(synth_room(0.3, 4800, 2, 2, 3000 + seed, RATE).unwrap()));
            let mut row = [0.0; 3];
            for (slot, &(algorithm, bases)) in runs.iter().enumerate() {
                row[slot] = run(&oracle, &config(algorithm, bases, 512.0, seed)).1.mean_sdr();
            }
            row
        })
        .collect();
    let mean = |k: usize| sdr.iter().map(|r| r[k]).sum::<f64>() / sdr.len() as f64;
    let (vb, k2, k30) = (mean(0), mean(1), mean(2));
    let spread = (k2 - k30).abs();
    verdict(
        "robustness to the basis count",
        vb >= k2.min(k30) && spread >= 0.5,
        format!("mean SDR vb K=30 {vb:.2} dB, ilrma K=2 {k2:.2} dB, K=30 {k30:.2} dB; spread {spread:.2} dB (need 0.5)"),
    )
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let oracle = toy_pair(0, 1024, || Mixing::Instantaneous(array![[1.0, 0.5], [0.5, 1.0]]));
    let n = 3 * RATE as usize;
    let short = oracle.mixture.samples().slice(ndarray::s![.., ..n]).to_owned();
    let mix = dir.path().join("mix.wav");
    write_wav(&mix, &MultichannelSignal::new(short, RATE).unwrap(), WavEncoding::Float32).unwrap();
    let trace = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_bnpbss"))
            .args(["separate", "--input", mix.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .args(["--seed", "11", "--iters", "20"])
            .env("BNPBSS_THREADS", "1")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
        diag["cost_trace"].to_string().into_bytes()
    };
    let (a, b) = (trace("a"), trace("b"));
    verdict(
        "CLI determinism",
        a == b,
        format!("cost traces of two runs are {} ({} bytes)", if a == b { "byte-identical" } else { "different" }, a.len()),
    )
}

fn main() {
    // `cargo test -- --list` and similar probes expect no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut verdicts = vec![
        gig_moment_accuracy(),
        stft_reconstruction(),
        demixing_monotonicity(),
        bound_monotonicity(),
    ];
    let (oracle, seed0) = oracle_separation();
    verdicts.push(oracle);
    verdicts.push(adaptivity(seed0));
    verdicts.push(robustness_to_k());
    verdicts.push(eval_consistency());
    verdicts.push(cli_determinism());

    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        verdicts.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
