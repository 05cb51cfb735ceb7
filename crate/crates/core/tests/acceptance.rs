//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crosstalk::fcp::{estimate_filter, fcp_image, fcp_weights, FcpConfig, FilterEstimate};
use crosstalk::loss::{f_div, mc_total, sa_loss, total_loss, Alpha, MixtureSet, Objective};
use crosstalk::metrics::{permute_resolve, sdr_proj, si_sdr, Metric, DEFAULT_PROJ_TAPS};
use crosstalk::pipeline::{blockwise_separate, BlockPlan, Passthrough, Session};
use crosstalk::scene::{synth_subband_scene, OverlapStyle, Scene, SceneConfig};
use crosstalk::signal::{istft, stft, Spectrogram, StftConfig, StftGeometry, Waveform};
use crosstalk::solver::{
    estimate_gradient, filter_step, init_estimates, solve, SolveConfig, SupervisionMode,
};
use crosstalk::SubbandFilter;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let worst = (0..1000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let sr = if k % 2 == 0 { 8000 } else { 16000 };
            let n = rng.random_range(sr as usize..=10 * sr as usize);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Waveform::new(x, sr).unwrap();
            let y = istft(&stft(&w, &cfg).unwrap(), n).unwrap();
            let num: f64 = w.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
            (num / w.energy()).sqrt()
        })
        .reduce(|| 0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 10.0,
        format!("max relative error {worst:.2e} over 1000 signals, {secs:.1} s"),
    )
}

/// Tap at lag `lag` (frames into the past), or zero outside the support.
fn tap(f: &SubbandFilter, freq: usize, lag: isize) -> Complex64 {
    let k = f.past_taps as isize - 1 - lag;
    if (0..f.len() as isize).contains(&k) {
        f.taps[[freq, k as usize]]
    } else {
        Complex64::new(0.0, 0.0)
    }
}

fn tap_error(est: &SubbandFilter, truth: &SubbandFilter) -> f64 {
    let lo = -(est.future_taps.max(truth.future_taps) as isize);
    let hi = est.past_taps.max(truth.past_taps) as isize;
    let (mut num, mut den) = (0.0, 0.0);
    for f in 0..truth.num_freqs() {
        for lag in lo..hi {
            let t = tap(truth, f, lag);
            num += (tap(est, f, lag) - t).norm_sqr();
            den += t.norm_sqr();
        }
    }
    (num / den).sqrt()
}

fn oracle_filters(scene: &Scene) -> FilterEstimate {
    let r_n = scene.num_receivers();
    let mut filters = FilterEstimate::empty(scene.num_speakers, r_n);
    for r in 0..r_n {
        for c in 0..scene.num_speakers {
            if let Some(f) = scene.subband_filter(r, c) {
                filters.set(r, c, f.clone());
            }
        }
    }
    filters
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|k| {
            let a = 2 + (k % 3) as usize;
            let b = (k % 2) as usize;
            let cfg = SceneConfig {
                num_speakers: 1,
                num_far: 2,
                noise_snr_range: None,
                past_taps: a,
                future_taps: b,
                seed: 1000 + k,
                ..SceneConfig::default()
            };
            let scene = synth_subband_scene(&cfg).unwrap();
            let mix = scene.mixture_set().unwrap();
            let dry = scene.dry_specs().unwrap();
            let images = scene.image_specs.as_ref().unwrap();
            let fcp = FcpConfig {
                past_taps: a + (k as usize / 3) % 3,
                future_taps: b,
                ..FcpConfig::default()
            };
            let (mut taps, mut img) = (0.0f64, 0.0f64);
            for r in 1..scene.num_receivers() {
                let y = mix.receiver(r);
                let w = fcp_weights(y, fcp.xi).unwrap();
                let est = estimate_filter(&dry[0], y, &w, &fcp).unwrap();
                taps = taps.max(tap_error(&est, scene.subband_filter(r, 0).unwrap()));
                let image = fcp_image(&est, &dry[0]).unwrap();
                img = img.max(rel_err(&image.values, &images[r][0].values));
            }
            (taps, img)
        })
        .collect();
    let tap_max = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let img_max = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let mc_max = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let cfg = SceneConfig {
                noise_snr_range: None,
                seed: 2000 + k,
                ..SceneConfig::default()
            };
            let scene = synth_subband_scene(&cfg).unwrap();
            let mix = scene.mixture_set().unwrap();
            let filters = oracle_filters(&scene);
            mc_total(&scene.dry_specs().unwrap(), &mix, &filters, Alpha::InverseP)
                .unwrap()
                .total
        })
        .reduce(|| 0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        tap_max < 1e-8 && img_max < 1e-8 && mc_max < 1e-8 && secs < 60.0,
        format!(
            "tap error {tap_max:.2e}, image error {img_max:.2e} (50 scenes); \
             oracle MC loss {mc_max:.2e} (20 two-speaker scenes); {secs:.1} s"
        ),
    )
}

fn criterion_3() -> Outcome {
    let g = StftGeometry::new(128, 64, 8000).unwrap();
    let mut s = Spectrogram::zeros(&g, 8000);
    s.values[[3, 5]] = Complex64::new(0.0, 2.0);
    let w = fcp_weights(&s, 1e-3).unwrap();
    let lambda = w.values[[0, 0]];

    let ones = s.with_values(s.values.mapv(|_| Complex64::new(1.0, 0.0)));
    let zeros = s.with_values(s.values.mapv(|_| Complex64::new(0.0, 0.0)));
    let f = f_div(&ones, &zeros).unwrap();

    let wf = |v: &[f64]| Waveform::new(v.to_vec(), 8000).unwrap();
    let d = [true, true, false, false];
    let sa = sa_loss(&wf(&[5.0, 5.0, 1.0, 1.0]), &wf(&[2.0; 4]), &d).unwrap();
    let sa_all_active = sa_loss(&wf(&[5.0, 5.0, 1.0, 1.0]), &wf(&[2.0; 4]), &[true; 4]).unwrap();
    let sa_zero_est = sa_loss(&wf(&[0.0; 4]), &wf(&[2.0; 4]), &d).unwrap();
    outcome(
        lambda == 0.004 && f == 2.0 && sa == 0.25 && sa_all_active == 0.0 && sa_zero_est == 0.0,
        format!(
            "lambda {lambda}, F {f}, SA {sa}, SA fully active {sa_all_active}, SA zero estimate {sa_zero_est}"
        ),
    )
}

/// L2 gradient against central differences on sampled coordinates.
fn gradient_check() -> f64 {
    let cfg_scene = SceneConfig {
        duration_s: 1.0,
        seed: 77,
        ..SceneConfig::default()
    };
    let scene = synth_subband_scene(&cfg_scene).unwrap();
    let mix = scene.mixture_set().unwrap();
    let cfg = SolveConfig {
        objective: Objective::L2,
        fcp: FcpConfig {
            past_taps: 4,
            ..FcpConfig::default()
        },
        ..SolveConfig::default()
    };
    let mut state = init_estimates(&mix, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in &mut state.estimates {
        s.values.mapv_inplace(|z| {
            z * rng.random_range(0.5..1.5)
                + Complex64::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))
        });
    }
    let filters = filter_step(&state, &mix, &cfg, None).unwrap();
    let grad = estimate_gradient(&state.estimates, &mix, &filters, &cfg, None).unwrap();
    let loss = |e: &[Spectrogram]| {
        total_loss(e, &mix, &filters, cfg.alpha, cfg.objective, None)
            .unwrap()
            .total
    };
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..100 {
        let c = rng.random_range(0..state.estimates.len());
        let (t_n, f_n) = state.estimates[c].values.dim();
        let (t, f) = (rng.random_range(0..t_n), rng.random_range(0..f_n));
        for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
            let scale = state.estimates[c].values[[t, f]].norm().max(1e-3);
            let h = 1e-5 * scale;
            let mut plus = state.estimates.clone();
            plus[c].values[[t, f]] += dir * h;
            let mut minus = state.estimates.clone();
            minus[c].values[[t, f]] -= dir * h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let g = grad[c][[t, f]];
            let analytic = if dir.re != 0.0 { g.re } else { g.im };
            num += (fd - analytic).powi(2);
            den += analytic.powi(2);
        }
    }
    (num / den).sqrt()
}

fn is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0])
}

struct SceneRun {
    input_si_sdr: Vec<f64>,
    output_si_sdr: Vec<f64>,
    /// Every output scores higher against its own wearer than any other.
    anchored: bool,
    monotone: bool,
    estimates: Vec<Waveform>,
}

fn run_scene(scene: &Scene, cfg: &SolveConfig) -> SceneRun {
    let mix = scene.mixture_set().unwrap();
    let n = scene.num_samples();
    let activity = Some(scene.activity.as_slice());
    let state = solve(&mix, activity, cfg).unwrap();
    let estimates: Vec<Waveform> = state
        .estimates
        .iter()
        .map(|s| istft(s, n).unwrap())
        .collect();
    let input_si_sdr = (0..scene.num_speakers)
        .map(|c| si_sdr(&scene.mixtures[c], &scene.dry_sources[c]).unwrap())
        .collect();
    let output_si_sdr: Vec<f64> = (0..scene.num_speakers)
        .map(|c| si_sdr(&estimates[c], &scene.dry_sources[c]).unwrap())
        .collect();
    let anchored = (0..scene.num_speakers).all(|c| {
        (0..scene.num_speakers).filter(|&o| o != c).all(|o| {
            si_sdr(&estimates[c], &scene.dry_sources[o]).unwrap() < output_si_sdr[c]
        })
    });
    let totals: Vec<f64> = state.loss_trace.iter().map(|l| l.total).collect();
    SceneRun {
        input_si_sdr,
        output_si_sdr,
        anchored,
        monotone: is_monotone(&totals),
        estimates,
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn base_solver() -> SolveConfig {
    SolveConfig {
        fcp: FcpConfig {
            past_taps: 4,
            ..FcpConfig::default()
        },
        ..SolveConfig::default()
    }
}

fn criterion_5(runs: &[SceneRun], secs: f64) -> Outcome {
    let input = mean(runs.iter().flat_map(|r| r.input_si_sdr.iter().copied()));
    let output = mean(runs.iter().flat_map(|r| r.output_si_sdr.iter().copied()));
    let deltas: Vec<f64> = runs
        .iter()
        .map(|r| mean(r.output_si_sdr.iter().copied()) - mean(r.input_si_sdr.iter().copied()))
        .collect();
    let worst = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let anchors = runs.iter().all(|r| r.anchored);
    let calibrated = (input - 14.7).abs() <= 1.5;
    outcome(
        calibrated && output - input >= 3.0 && worst >= -0.5 && anchors && secs < 900.0,
        format!(
            "input {input:.2} dB, output {output:.2} dB, mean gain {:.2} dB, \
             worst scene {worst:.2} dB, channel anchor held {anchors}, {secs:.0} s",
            output - input
        ),
    )
}

/// Active-range over silent-range energy of `w` in dB, as total energies
/// and as mean powers per sample.
fn silence_suppression_db(w: &Waveform, d: &[bool]) -> Option<(f64, f64)> {
    let (mut ea, mut na, mut es, mut ns) = (0.0, 0usize, 0.0, 0usize);
    for (v, &a) in w.samples.iter().zip(d) {
        if a {
            ea += v * v;
            na += 1;
        } else {
            es += v * v;
            ns += 1;
        }
    }
    if na == 0 || ns == 0 {
        return None;
    }
    let es = es.max(f64::MIN_POSITIVE);
    let energy = 10.0 * (ea / es).log10();
    let power = energy - 10.0 * (na as f64 / ns as f64).log10();
    Some((energy, power))
}

fn sparse_scenes() -> Vec<Scene> {
    (0..20u64)
        .into_par_iter()
        .map(|k| {
            synth_subband_scene(&SceneConfig {
                overlap_style: OverlapStyle::Sparse,
                overlap_ratio: 0.25,
                seed: 6000 + k,
                ..SceneConfig::default()
            })
            .unwrap()
        })
        .collect()
}

fn criterion_6(scenes: &[Scene], weak: &[SceneRun], unsup: &[SceneRun]) -> Outcome {
    let (mut worst, mut worst_power) = (f64::INFINITY, f64::INFINITY);
    for (scene, run) in scenes.iter().zip(weak) {
        for c in 0..scene.num_speakers {
            if let Some((e, p)) = silence_suppression_db(&run.estimates[c], &scene.activity[c]) {
                worst = worst.min(e);
                worst_power = worst_power.min(p);
            }
        }
    }
    let weak_mean = mean(weak.iter().flat_map(|r| r.output_si_sdr.iter().copied()));
    let unsup_mean = mean(unsup.iter().flat_map(|r| r.output_si_sdr.iter().copied()));
    outcome(
        worst >= 20.0 && weak_mean >= unsup_mean - 0.5,
        format!(
            "worst silent-range energy suppression {worst:.1} dB \
             (per-sample power {worst_power:.1} dB); mean SI-SDR weak {weak_mean:.2} dB, \
             unsupervised {unsup_mean:.2} dB"
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let pairs: Vec<(f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + k);
            let n = rng.random_range(2000..6000);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = rng.random_range(0.1..3.0);
            let noise = rng.random_range(0.01..2.0);
            let e: Vec<f64> = r.iter().map(|v| g * v + noise * rng.random_range(-1.0..1.0)).collect();
            let r = Waveform::new(r, 8000).unwrap();
            let e = Waveform::new(e, 8000).unwrap();
            let a = rng.random_range(1e-3..1e3);
            let base = si_sdr(&e, &r).unwrap();
            let scaled = si_sdr(&e.scaled(a), &r).unwrap();
            let proj = sdr_proj(&e, &r, DEFAULT_PROJ_TAPS).unwrap();
            ((scaled - base).abs(), proj - base)
        })
        .collect();
    let scale_dev = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    let proj_margin = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);

    let mut agree = 0;
    for k in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(12000 + k);
        let n = 1000;
        let refs: Vec<Waveform> = (0..3)
            .map(|_| Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap())
            .collect();
        let est: Vec<Waveform> = (0..3)
            .map(|_| {
                let mix: Vec<f64> = (0..n)
                    .map(|i| refs.iter().map(|r| r.samples[i] * rng.random_range(0.0..1.0)).sum())
                    .collect();
                Waveform::new(mix, 8000).unwrap()
            })
            .collect();
        let report = permute_resolve(&est, &refs, Metric::SiSdr).unwrap();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for p in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let m: f64 = (0..3).map(|i| si_sdr(&est[p[i]], &refs[i]).unwrap()).sum::<f64>() / 3.0;
            if m > best.0 {
                best = (m, p.to_vec());
            }
        }
        if report.assignment == best.1 && (report.mean_si_sdr() - best.0).abs() < 1e-9 {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        scale_dev <= 1e-9 && proj_margin >= -1e-9 && agree == 100,
        format!(
            "scale deviation {scale_dev:.1e} dB, min sdr_proj - si_sdr {proj_margin:.2e} dB, \
             permutation agreement {agree}/100, {secs:.1} s"
        ),
    )
}

fn random_session(len: usize, seed: u64) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = || {
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    };
    Session {
        sample_rate: 8000,
        speaker_ids: vec!["a".into(), "b".into(), "c".into()],
        mic_ids: vec!["f".into()],
        close_talk: vec![w(), w(), w()],
        far_field: vec![w()],
        activity: None,
    }
}

fn collect_files(dir: &Path, prefix: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let rel = p.strip_prefix(prefix).unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            collect_files(&p, prefix, out);
        } else {
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

fn end_to_end(root: &Path, threads: &str) -> BTreeMap<String, Vec<u8>> {
    let bin = env!("CARGO_BIN_EXE_ctr");
    let scene = root.join("scene");
    let est = root.join("est");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let s = scene.to_str().unwrap();
    let e = est.to_str().unwrap();
    run(&["--seed", "11", "--threads", threads, "simulate", "--out", s, "--duration", "10"]);
    let manifest = format!("{s}/manifest.json");
    run(&[
        "--threads", threads, "separate", "--manifest", &manifest, "--out", e, "--iters", "8",
        "--past-taps", "4",
    ]);
    let report = root.join("report.json");
    run(&[
        "evaluate", "--references", &manifest, "--estimates", &format!("{e}/estimates.json"),
        "--out", report.to_str().unwrap(), "--csv", root.join("report.csv").to_str().unwrap(),
    ]);
    let mut files = BTreeMap::new();
    collect_files(root, root, &mut files);
    files
}

fn criterion_8() -> Outcome {
    let mut exact = true;
    let mut lengths = true;
    for (k, secs) in [7.0, 8.0, 20.5].into_iter().enumerate() {
        let n = (secs * 8000.0) as usize;
        let s = random_session(n, k as u64);
        let out = blockwise_separate(&s, &BlockPlan::default(), &Passthrough).unwrap();
        for (e, y) in out.estimates.iter().zip(&s.close_talk) {
            lengths &= e.len() == n;
            exact &= e.samples == y.samples;
        }
    }
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = end_to_end(a.path(), "1");
    let fb = end_to_end(b.path(), "4");
    let identical = fa == fb && fa.len() >= 12;
    outcome(
        exact && lengths && identical,
        format!(
            "passthrough bit-exact {exact}, lengths preserved {lengths}, \
             end-to-end byte-identical {identical} ({} files, 1 vs 4 threads)",
            fa.len()
        ),
    )
}

/// Energy of the estimate for a speaker absent from every mixture, relative
/// to the present speaker's estimate. Reported only.
fn over_separation_db() -> Vec<f64> {
    (0..5u64)
        .into_par_iter()
        .map(|k| {
            let scene = synth_subband_scene(&SceneConfig {
                noise_snr_range: None,
                seed: 8000 + k,
                ..SceneConfig::default()
            })
            .unwrap();
            let images = scene.image_specs.as_ref().unwrap();
            let mix = MixtureSet::new(
                (0..2).map(|r| images[r][0].clone()).collect(),
                (2..4).map(|r| images[r][0].clone()).collect(),
            )
            .unwrap();
            let state = solve(&mix, None, &base_solver()).unwrap();
            10.0 * (state.estimates[1].energy() / state.estimates[0].energy()).log10()
        })
        .collect()
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let start = Instant::now();
    let cfg = base_solver();
    let scenes5: Vec<Scene> = (0..20u64)
        .into_par_iter()
        .map(|k| {
            synth_subband_scene(&SceneConfig {
                seed: 5000 + k,
                ..SceneConfig::default()
            })
            .unwrap()
        })
        .collect();
    let runs5: Vec<SceneRun> = scenes5.par_iter().map(|s| run_scene(s, &cfg)).collect();
    let secs5 = start.elapsed().as_secs_f64();

    let scenes6 = sparse_scenes();
    let weak_cfg = SolveConfig {
        mode: SupervisionMode::Weak,
        beta: 1.0,
        ..base_solver()
    };
    let weak6: Vec<SceneRun> = scenes6.par_iter().map(|s| run_scene(s, &weak_cfg)).collect();
    let unsup6: Vec<SceneRun> = scenes6.par_iter().map(|s| run_scene(s, &cfg)).collect();

    let fd = gradient_check();
    let monotone = runs5.iter().chain(&weak6).chain(&unsup6).filter(|r| r.monotone).count();
    let total = runs5.len() + weak6.len() + unsup6.len();
    report(
        4,
        outcome(
            monotone == total && fd < 1e-4,
            format!("monotone loss traces {monotone}/{total}; l2 gradient relative error {fd:.2e}"),
        ),
    );
    report(5, criterion_5(&runs5, secs5));
    report(6, criterion_6(&scenes6, &weak6, &unsup6));
    report(7, criterion_7());
    report(8, criterion_8());

    let over = over_separation_db();
    println!(
        "measured: absent-speaker estimate energy relative to present speaker {:?} dB",
        over.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
