//! Acceptance suite. Runs every criterion on the desk configuration and
//! prints one PASS/FAIL line per criterion; fails if any criterion fails.
//!
//! The study criteria train on the default scenario with three seeds, which
//! takes well over an hour on one CPU core. Artifacts land in
//! `$CARGO_TARGET_TMPDIR/acceptance`.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use hyperds::baselines::SrArch;
use hyperds::config::RunConfig;
use hyperds::grid::{area_downsample, bilinear_interpolate, DomainSpec, GridGeometry, Split, STATION_VARIABLES};
use hyperds::io::{format_metrics_csv, parse_metrics_csv, Dataset};
use hyperds::losses::{grid_loss, grid_loss_no_hr_terms, mse_mae, LossConfig};
use hyperds::model::{pixel_mean, DecoderVariant};
use hyperds::nn::to_f64_vec;
use hyperds::synth::SyntheticScenario;
use hyperds::train::{
    evaluate, evaluate_interpolation, format_curves_csv, load_model, train, CurveRow, DataAccess, EvalReport, Model,
    ModelSpec, TrainOutcome,
};
use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const ORACLE_INSTANCES: usize = 128;
const ORACLE_TOL: f64 = 1e-10;
const WS: usize = 0;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, name, pass, detail }
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_config(seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).unwrap().with_seed(seed)
}

// ---- criterion 1: oracles ----

fn hat(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Bilinear interpolation as a sum of tensor-product hat functions over
/// every cell center.
fn oracle_bilinear(values: ArrayView3<'_, f64>, geom: &GridGeometry, coords: &[(f64, f64)]) -> Array2<f64> {
    let (nv, rows, cols) = values.dim();
    let mut out = Array2::zeros((nv, coords.len()));
    for (q, &(lon, lat)) in coords.iter().enumerate() {
        let x = ((lon - geom.lon_min) / geom.cell - 0.5).clamp(0.0, (cols - 1) as f64);
        let y = ((geom.lat_max - lat) / geom.cell - 0.5).clamp(0.0, (rows - 1) as f64);
        for c in 0..nv {
            let mut acc = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    acc += values[[c, i, j]] * hat(x - j as f64) * hat(y - i as f64);
                }
            }
            out[[c, q]] = acc;
        }
    }
    out
}

fn oracle_downsample(values: ArrayView3<'_, f64>, k: usize) -> Array3<f64> {
    let (nv, h, w) = values.dim();
    Array3::from_shape_fn((nv, h / k, w / k), |(c, i, j)| {
        let mut acc = 0.0;
        for di in 0..k {
            for dj in 0..k {
                acc += values[[c, i * k + di, j * k + dj]];
            }
        }
        acc / (k * k) as f64
    })
}

fn oracle_mse(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}

fn random_array3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-3.0..3.0))
}

fn random_domain(rng: &mut ChaCha8Rng) -> DomainSpec {
    let k = [2usize, 4][rng.random_range(0..2)];
    let lon_min = rng.random_range(-10..10) as f64;
    let lat_min = rng.random_range(-10..10) as f64;
    DomainSpec {
        lon_min,
        lon_max: lon_min + rng.random_range(2..6) as f64,
        lat_min,
        lat_max: lat_min + rng.random_range(2..6) as f64,
        lr_cell: 1.0,
        hr_cell: 1.0 / k as f64,
    }
}

fn criterion_oracles() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..ORACLE_INSTANCES {
        let k = rng.random_range(2..5);
        let shape = (rng.random_range(1..4), k * rng.random_range(1..5), k * rng.random_range(1..5));
        let a = random_array3(&mut rng, shape);
        let got = area_downsample(a.view(), k).unwrap();
        let want = oracle_downsample(a.view(), k);
        note("area_downsample", max_abs(got.iter(), want.iter()));

        let geom = GridGeometry {
            lon_min: rng.random_range(-5.0..5.0),
            lat_max: rng.random_range(-5.0..5.0),
            cell: rng.random_range(0.2..2.0),
            rows: rng.random_range(1..7),
            cols: rng.random_range(1..7),
        };
        let nv = rng.random_range(1..4);
        let v = random_array3(&mut rng, (nv, geom.rows, geom.cols));
        let coords: Vec<(f64, f64)> = (0..rng.random_range(1..20))
            .map(|_| {
                (
                    geom.lon_min + rng.random_range(0.0..1.0) * geom.cell * geom.cols as f64,
                    geom.lat_max - rng.random_range(0.0..1.0) * geom.cell * geom.rows as f64,
                )
            })
            .collect();
        let got = bilinear_interpolate(v.view(), &geom, &coords);
        let want = oracle_bilinear(v.view(), &geom, &coords);
        note("bilinear_interpolate", max_abs(got.iter(), want.iter()));

        let (s, t) = (rng.random_range(1..10), rng.random_range(1..10));
        let p = Array2::from_shape_fn((s, t), |_| rng.random_range(-3.0..3.0));
        let y = Array2::from_shape_fn((s, t), |_| rng.random_range(-3.0..3.0));
        let mut m = Array2::from_shape_fn((s, t), |_| rng.random_bool(0.7));
        m[[0, 0]] = true;
        let (mse, mae) = mse_mae(p.view(), y.view(), Some(m.view())).unwrap();
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0.0);
        for i in 0..s {
            for j in 0..t {
                if m[[i, j]] {
                    let e = p[[i, j]] - y[[i, j]];
                    sq += e * e;
                    ab += e.abs();
                    n += 1.0;
                }
            }
        }
        note("mse_mae", (mse - sq / n).abs().max((mae - ab / n).abs()));

        let domain = random_domain(&mut rng);
        let (lr, hr) = (domain.lr_geometry(), domain.hr_geometry());
        let nv = rng.random_range(1..4);
        let pred = random_array3(&mut rng, (nv, hr.rows, hr.cols));
        let label = random_array3(&mut rng, (nv, hr.rows, hr.cols));
        let input = random_array3(&mut rng, (nv, lr.rows, lr.cols));
        let e_grid = (grid_loss(pred.view(), label.view()).unwrap() - oracle_mse(pred.view(), label.view())).abs();
        let (l_hr, l_lr) = grid_loss_no_hr_terms(pred.view(), input.view(), &domain).unwrap();
        let hr_centers: Vec<(f64, f64)> = (0..hr.rows)
            .flat_map(|i| (0..hr.cols).map(move |j| (i, j)))
            .map(|(i, j)| hr.center(i, j))
            .collect();
        let up = oracle_bilinear(input.view(), &lr, &hr_centers)
            .into_shape_with_order((nv, hr.rows, hr.cols))
            .unwrap();
        let down = oracle_downsample(pred.view(), domain.factor());
        let e_hr = (l_hr - oracle_mse(up.view(), pred.view())).abs();
        let e_lr = (l_lr - oracle_mse(input.view(), down.view())).abs();
        note("grid losses", e_grid.max(e_hr).max(e_lr));

        let (b, n_px, pp, nvars) = (rng.random_range(1..3), rng.random_range(1..10), rng.random_range(1..6), rng.random_range(1..5));
        let ys: Vec<f64> = (0..b * n_px * pp * nvars).map(|_| rng.random_range(-3.0..3.0)).collect();
        let yt = Tensor::from_vec(ys.clone(), (b, n_px * pp, nvars), &Device::Cpu).unwrap();
        let got = to_f64_vec(&pixel_mean(&yt, n_px, pp).unwrap()).unwrap();
        let mut e: f64 = 0.0;
        for bb in 0..b {
            for v in 0..nvars {
                for i in 0..n_px {
                    let mean = (0..pp).map(|k| ys[(bb * n_px * pp + i * pp + k) * nvars + v]).sum::<f64>() / pp as f64;
                    e = e.max((got[(bb * nvars + v) * n_px + i] - mean).abs());
                }
            }
        }
        note("pixel mean", e);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst.values().all(|&e| e <= ORACLE_TOL) && elapsed < 60.0;
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(1, "oracle suite", pass, format!("{ORACLE_INSTANCES} instances each; worst {detail}; {elapsed:.1}s"))
}

fn max_abs<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- criterion 2: gradients ----

fn criterion_gradients() -> Verdict {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for variant in [DecoderVariant::MultiBlock, DecoderVariant::MultiVar] {
        for (dtype, tol) in [(DType::F32, 1e-3), (DType::F64, 1e-5)] {
            let e = common::gradcheck::worst_error(variant, dtype);
            pass &= e < tol;
            parts.push(format!("{variant:?} {dtype:?} {e:.1e}"));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    verdict(
        2,
        "gradient check",
        pass,
        format!("{} entries per case; {}; {elapsed:.1}s", common::gradcheck::N_PARAMS, parts.join(", ")),
    )
}

// ---- criterion 3: nesting ----

fn criterion_nesting(ds: &Dataset, seconds: f64) -> Verdict {
    let t0 = Instant::now();
    let k = ds.manifest.domain.factor();
    let mut worst: f64 = 0.0;
    for t in 0..ds.n_times() {
        let down = area_downsample(ds.hr.index_axis(Axis(0), t), k).unwrap();
        let lr = ds.lr.index_axis(Axis(0), t);
        for (a, b) in down.iter().zip(lr.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let elapsed = seconds + t0.elapsed().as_secs_f64();
    verdict(
        3,
        "nesting",
        worst <= 1e-10 && elapsed < 60.0,
        format!("{} time steps, worst scaled difference {worst:.1e}; {elapsed:.1}s with generation", ds.n_times()),
    )
}

// ---- study runs ----

struct Run {
    outcome: TrainOutcome,
    report: EvalReport,
}

fn fit(spec: &ModelSpec, cfg: &RunConfig, loss: &LossConfig, data: &DataAccess<'_>, label: &str) -> Run {
    fit_then(spec, cfg, loss, data, label, |_| {})
}

/// Trains, calls `after_training` before anything reads the test split, then evaluates.
fn fit_then(
    spec: &ModelSpec,
    cfg: &RunConfig,
    loss: &LossConfig,
    data: &DataAccess<'_>,
    label: &str,
    after_training: impl FnOnce(&TrainOutcome),
) -> Run {
    let t0 = Instant::now();
    let model = Model::build(spec, *data.domain(), data.shapes(), cfg.train.seed, cfg.train.dtype().unwrap()).unwrap();
    let outcome = train(&model, data, loss, &cfg.train).unwrap();
    after_training(&outcome);
    let best = load_model(&outcome.checkpoint, data, cfg.train.dtype().unwrap()).unwrap();
    let report = evaluate(label, &best, data, Split::Test, &cfg.train).unwrap();
    eprintln!(
        "[seed {}] {label}: best epoch {}, test mse {:?}, {:.0}s",
        cfg.train.seed,
        outcome.checkpoint.epoch,
        report.normalized_mse.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
    Run { outcome, report }
}

fn hyperds_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec::Hyperds(cfg.model.clone())
}

fn sr_spec(cfg: &RunConfig, arch: SrArch) -> ModelSpec {
    ModelSpec::Sr(hyperds::baselines::SrConfig { arch, ..cfg.sr.clone() })
}

struct SeedResults {
    interp_lr: EvalReport,
    interp_hr: EvalReport,
    full: Run,
    no_station: Run,
    unet: Run,
    edsr: Run,
}

fn run_seed(seed: u64, data: &DataAccess<'_>, protocol: &mut Option<Verdict>) -> SeedResults {
    let cfg = desk_config(seed);
    let interp_lr = evaluate_interpolation(data, Split::Test, false, true).unwrap();
    let interp_hr = evaluate_interpolation(data, Split::Test, true, false).unwrap();
    data.clear_log();
    let full = fit_then(&hyperds_spec(&cfg), &cfg, &cfg.loss, data, "hyperds", |outcome| {
        if protocol.is_none() {
            *protocol = Some(check_protocol(data, outcome));
        }
    });
    let no_station = fit(
        &hyperds_spec(&cfg),
        &cfg,
        &LossConfig { beta: 0.0, ..cfg.loss.clone() },
        data,
        "hyperds_no_station",
    );
    let unet = fit(&sr_spec(&cfg, SrArch::Unet), &cfg, &cfg.loss, data, "unet");
    let edsr = fit(&sr_spec(&cfg, SrArch::Edsr), &cfg, &cfg.loss, data, "edsr");
    let dir = artifacts().join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let mut rows = Vec::new();
    for r in [&interp_lr, &interp_hr, &full.report, &no_station.report, &unet.report, &edsr.report] {
        rows.extend(r.rows.iter().cloned());
    }
    std::fs::write(dir.join("metrics.csv"), format_metrics_csv(&rows)).unwrap();
    SeedResults {
        interp_lr,
        interp_hr,
        full,
        no_station,
        unet,
        edsr,
    }
}

// ---- criterion 7: protocol ----

fn check_protocol(data: &DataAccess<'_>, outcome: &TrainOutcome) -> Verdict {
    let log = data.log();
    let test_stations = data.station_indices(Split::Test);
    let leaks = data.violations(data.times(Split::Test), &test_stations).len();
    let (tr, va, te) = (data.times(Split::Train), data.times(Split::Val), data.times(Split::Test));
    let times_disjoint = tr.end <= va.start && va.end <= te.start;
    let sets: Vec<Vec<usize>> = Split::ALL.iter().map(|&s| data.station_indices(s)).collect();
    let stations_disjoint = (0..3).all(|i| (i + 1..3).all(|j| sets[i].iter().all(|x| !sets[j].contains(x))));
    let best = outcome
        .curves
        .iter()
        .min_by(|a, b| a.val_station_loss.total_cmp(&b.val_station_loss))
        .unwrap();
    let argmin = outcome.checkpoint.epoch == best.epoch && outcome.checkpoint.val_station_loss == best.val_station_loss;
    verdict(
        7,
        "protocol integrity",
        !log.is_empty() && leaks == 0 && times_disjoint && stations_disjoint && argmin,
        format!(
            "{} logged reads, {leaks} touching test data; splits disjoint {}; checkpoint epoch {} is the validation argmin {argmin}",
            log.len(),
            times_disjoint && stations_disjoint,
            outcome.checkpoint.epoch
        ),
    )
}

// ---- criteria 4, 5 ----

fn criterion_ordering(results: &[SeedResults]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(results) {
        let h = r.full.report.normalized_mse[WS];
        let (lr, hr) = (r.interp_lr.normalized_mse[WS], r.interp_hr.normalized_mse[WS]);
        let (un, ed) = (r.unet.report.normalized_mse[WS], r.edsr.report.normalized_mse[WS]);
        let ok = h <= 0.8 * lr && h <= 0.8 * hr && h < un && h < ed;
        wins += ok as usize;
        parts.push(format!(
            "seed {seed} {}: hyperds {h:.4} interp_lr {lr:.4} interp_hr {hr:.4} unet {un:.4} edsr {ed:.4}",
            if ok { "ok" } else { "miss" }
        ));
    }
    verdict(
        4,
        "wind speed ordering",
        wins >= 2,
        format!("{wins}/3 seeds; {}", parts.join("; ")),
    )
}

fn criterion_ablation(results: &[SeedResults]) -> Verdict {
    let n = results.len() as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (v, name) in STATION_VARIABLES.iter().enumerate() {
        let full = results.iter().map(|r| r.full.report.normalized_mse[v]).sum::<f64>() / n;
        let ablated = results.iter().map(|r| r.no_station.report.normalized_mse[v]).sum::<f64>() / n;
        pass &= ablated > full;
        parts.push(format!("{name} {full:.4} -> {ablated:.4}"));
    }
    verdict(
        5,
        "station supervision ablation",
        pass,
        format!("seed-mean test mse, full -> beta 0: {}", parts.join(", ")),
    )
}

// ---- criterion 6 ----

fn criterion_no_hr(data: &DataAccess<'_>, seed0: &SeedResults) -> Verdict {
    let cfg = desk_config(SEEDS[0]);
    let loss = LossConfig {
        hr_supervision: false,
        ..cfg.loss.clone()
    };
    data.clear_log();
    let run = fit(&hyperds_spec(&cfg), &cfg, &loss, data, "hyperds_no_hr");
    let read_labels = data
        .log()
        .iter()
        .any(|a| a.kind == hyperds::train::AccessKind::GridLabel && data.times(Split::Train).contains(&a.time.unwrap_or(usize::MAX)));
    let h = run.report.normalized_mse[WS];
    let (lr, hr) = (seed0.interp_lr.normalized_mse[WS], seed0.interp_hr.normalized_mse[WS]);
    let sup = seed0.full.report.normalized_mse[WS];
    verdict(
        6,
        "training without labels",
        h < lr && h < hr && !read_labels,
        format!(
            "seed 0 wind speed {h:.4} vs interp_lr {lr:.4}, interp_hr {hr:.4}; supervised {sup:.4} ({:+.1}%)",
            100.0 * (h / sup - 1.0)
        ),
    )
}

// ---- criterion 8 ----

fn criterion_determinism(seed0: &SeedResults) -> Verdict {
    let seed = SEEDS[0];
    let cfg = desk_config(seed);
    let ds = SyntheticScenario::new(cfg.scenario.clone()).unwrap().generate().unwrap();
    let data = DataAccess::new(&ds).unwrap();
    let interp_lr = evaluate_interpolation(&data, Split::Test, false, true).unwrap();
    let interp_hr = evaluate_interpolation(&data, Split::Test, true, false).unwrap();
    let rerun = fit(&hyperds_spec(&cfg), &cfg, &cfg.loss, &data, "hyperds");
    let csv = |reports: [&EvalReport; 3]| {
        let rows: Vec<_> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        parse_metrics_csv(&format_metrics_csv(&rows)).unwrap()
    };
    let a = csv([&seed0.interp_lr, &seed0.interp_hr, &seed0.full.report]);
    let b = csv([&interp_lr, &interp_hr, &rerun.report]);
    let mut worst: f64 = 0.0;
    let mut same_rows = a.len() == b.len();
    for (x, y) in a.iter().zip(&b) {
        same_rows &= x.method == y.method && x.variable == y.variable && x.n_stations == y.n_stations;
        worst = worst.max((x.mse - y.mse).abs()).max((x.mae - y.mae).abs());
    }
    let curve_diff = curve_distance(&seed0.full.outcome.curves, &rerun.outcome.curves);
    verdict(
        8,
        "determinism",
        same_rows && worst <= 1e-10 && curve_diff <= 1e-10,
        format!("seed {seed} rerun: metrics differ by {worst:.1e}, curves by {curve_diff:.1e}"),
    )
}

fn curve_distance(a: &[CurveRow], b: &[CurveRow]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            (x.grid_loss - y.grid_loss)
                .abs()
                .max((x.station_loss - y.station_loss).abs())
                .max((x.val_station_loss - y.val_station_loss).abs())
        })
        .fold(0.0, f64::max)
}

// ---- criterion 9 ----

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians of the grid loss over each learning-rate restart cycle.
fn cycle_medians(curves: &[CurveRow], period: usize) -> Vec<f64> {
    let g: Vec<f64> = curves.iter().map(|c| c.grid_loss).collect();
    g.chunks(period).map(median).collect()
}

fn criterion_curves(data: &DataAccess<'_>, seed0: &SeedResults) -> Verdict {
    let cfg = desk_config(SEEDS[0]);
    let beta10 = fit(
        &hyperds_spec(&cfg),
        &cfg,
        &LossConfig { beta: 0.1, ..cfg.loss.clone() },
        data,
        "hyperds_beta0.1",
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for (beta, curves) in [(cfg.loss.beta, &seed0.full.outcome.curves), (0.1, &beta10.outcome.curves)] {
        let path = artifacts().join(format!("curves_beta{beta}.csv"));
        std::fs::write(&path, format_curves_csv(curves)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        let finite = rows.len() == cfg.train.epochs && rows.iter().flatten().all(|x| x.is_finite());
        let med = cycle_medians(curves, cfg.train.restart_period);
        let monotone = med.windows(2).all(|w| w[1] <= w[0]);
        pass &= finite && monotone;
        parts.push(format!(
            "beta {beta}: {} rows finite {finite}, cycle medians [{}]",
            rows.len(),
            med.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        ));
    }
    verdict(9, "trade-off curves", pass, parts.join("; "))
}

#[test]
fn acceptance() {
    let mut verdicts = vec![criterion_oracles(), criterion_gradients()];

    let mut datasets = Vec::new();
    for &seed in &SEEDS {
        let t0 = Instant::now();
        let ds = SyntheticScenario::new(desk_config(seed).scenario).unwrap().generate().unwrap();
        datasets.push((ds, t0.elapsed().as_secs_f64()));
    }
    verdicts.push(criterion_nesting(&datasets[0].0, datasets[0].1));

    let mut protocol = None;
    let mut results = Vec::new();
    let accesses: Vec<DataAccess<'_>> = datasets.iter().map(|(ds, _)| DataAccess::new(ds).unwrap()).collect();
    for (&seed, data) in SEEDS.iter().zip(&accesses) {
        results.push(run_seed(seed, data, &mut protocol));
    }
    verdicts.push(criterion_ordering(&results));
    verdicts.push(criterion_ablation(&results));
    verdicts.push(criterion_no_hr(&accesses[0], &results[0]));
    verdicts.push(protocol.expect("seed 0 ran"));
    verdicts.push(criterion_determinism(&results[0]));
    verdicts.push(criterion_curves(&accesses[0], &results[0]));

    verdicts.sort_by_key(|v| v.id);
    let mut summary = String::new();
    for v in &verdicts {
        let line = format!(
            "criterion {} {}: {}: {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    std::fs::write(artifacts().join("summary.txt"), &summary).unwrap();
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
