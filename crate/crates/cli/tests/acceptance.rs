//! Acceptance suite. Each test prints one PASS/FAIL line per criterion before
//! asserting it.

use std::path::Path;
use std::sync::OnceLock;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};

use crcvoi::imis::{
    calibrate, posterior_predictive, posterior_summary, predictive_coverage, FixedInputs, PosteriorSample,
};
use crcvoi::microsim::{simulate_cohort, Horizon};
use crcvoi::nathist::{
    matrix_exponential, HealthState, IntensityMatrix, LifeTable, NaturalHistoryParams, SquareMatrix,
    CALIBRATED_NAMES, N_STATES,
};
use crcvoi::psa::{
    build_draws, evpi, evpi_curve, run_psa, sample_variance, EvpiCurve, PsaRecord, PsaResult, UncertaintyApproach,
};
use crcvoi::screening::{discount, simulate_strategy, CeaParams, ScreeningStrategy, StrategyKind};
use crcvoi::stats::PriorSet;
use crcvoi::targets::{generate_targets, TargetSet};
use crcvoi_cli::{run, Command, Context, RunConfig};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

type Matrix = SquareMatrix<f64, N_STATES>;

fn series_oracle(q: &Matrix) -> [[f64; N_STATES]; N_STATES] {
    let mut sum = [[0.0; N_STATES]; N_STATES];
    let mut term = [[0.0; N_STATES]; N_STATES];
    for i in 0..N_STATES {
        sum[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..=120 {
        let mut next = [[0.0; N_STATES]; N_STATES];
        for i in 0..N_STATES {
            for j in 0..N_STATES {
                let mut acc = 0.0;
                for m in 0..N_STATES {
                    acc += term[i][m] * q[(m, j)];
                }
                next[i][j] = acc / k as f64;
            }
        }
        term = next;
        for i in 0..N_STATES {
            for j in 0..N_STATES {
                sum[i][j] += term[i][j];
            }
        }
    }
    sum
}

#[test]
fn c01_matrix_exponential_oracle() {
    let start = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(101);
    let absorbing: Vec<usize> = HealthState::ALL
        .iter()
        .filter(|s| s.is_absorbing())
        .map(|s| s.index())
        .collect();
    let mut worst: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    for _ in 0..100 {
        let mut rows = [[0.0; N_STATES]; N_STATES];
        for (i, row) in rows.iter_mut().enumerate() {
            if absorbing.contains(&i) {
                continue;
            }
            for (j, x) in row.iter_mut().enumerate() {
                if i != j && rng.random_bool(0.5) {
                    *x = rng.random_range(0.0..1.0);
                }
            }
        }
        let q = IntensityMatrix::from_rates(SquareMatrix::from_rows(rows)).unwrap();
        let p = matrix_exponential(&q).unwrap();
        let oracle = series_oracle(q.matrix());
        for i in 0..N_STATES {
            let mut row_sum = 0.0;
            for j in 0..N_STATES {
                worst = worst.max((p.matrix()[(i, j)] - oracle[i][j]).abs());
                row_sum += p.matrix()[(i, j)];
            }
            worst_row = worst_row.max((row_sum - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && worst_row <= 1e-10;
    verdict(
        1,
        "matrix exponential vs series",
        pass,
        &format!("max |diff| {worst:.2e}, max |row sum - 1| {worst_row:.2e}, {secs:.3} s"),
    );
    assert!(pass);
}

#[test]
fn c02_discrete_engine_vs_event_clock() {
    let (l, lam2) = (0.04, 0.08);
    let params = NaturalHistoryParams {
        p_adeno: 0.1,
        p_small: 0.6,
        l,
        gamma: 1.0,
        lam2,
        lam3: 1e-300,
        ..NaturalHistoryParams::reference()
    };
    let lt = LifeTable::gompertz_synthetic().scaled(0.0);
    let horizon = Horizon { age_min: 50, age_max: 75 };
    let n = 1_000_000;
    let start = std::time::Instant::now();
    let cohort = simulate_cohort(&params, &lt, horizon, n, 2024, 0).unwrap();

    let init = crcvoi::microsim::initial_state_distribution(&params).unwrap();
    let p_normal = init[HealthState::Normal.index()];
    let p_small = init[HealthState::SmallAdenoma.index()];
    let p_large = init[HealthState::LargeAdenoma.index()];
    let onset = Exp::new(l).unwrap();
    let growth = Exp::new(lam2).unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let ages = [55u32, 65, 75];
    let mut event_counts = [[0u64; 3]; 3];
    for _ in 0..n {
        let u: f64 = rng.random();
        let (t_small, t_large) = if u < p_normal {
            let t1: f64 = onset.sample(&mut rng);
            (t1, t1 + growth.sample(&mut rng))
        } else if u < p_normal + p_small {
            (0.0, growth.sample(&mut rng))
        } else if u < p_normal + p_small + p_large {
            (0.0, 0.0)
        } else {
            continue;
        };
        for (k, &age) in ages.iter().enumerate() {
            let t = (age - 50) as f64;
            let s = if t < t_small {
                0
            } else if t < t_large {
                1
            } else {
                2
            };
            event_counts[k][s] += 1;
        }
    }

    let mut worst_z: f64 = 0.0;
    for (k, &age) in ages.iter().enumerate() {
        let counts = cohort.state_counts[(age - 50) as usize];
        let discrete = [
            counts[HealthState::Normal.index()],
            counts[HealthState::SmallAdenoma.index()],
            counts[HealthState::LargeAdenoma.index()],
        ];
        for s in 0..3 {
            let p1 = discrete[s] as f64 / n as f64;
            let p2 = event_counts[k][s] as f64 / n as f64;
            let se = (p1 * (1.0 - p1) / n as f64 + p2 * (1.0 - p2) / n as f64).sqrt();
            worst_z = worst_z.max((p1 - p2).abs() / se);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_z <= 3.0 && secs < 120.0;
    verdict(
        2,
        "discrete engine vs event-driven clock",
        pass,
        &format!("max |z| {worst_z:.2} over ages 55/65/75, {secs:.1} s"),
    );
    assert!(pass);
}

struct Calibration {
    targets: TargetSet,
    fixed: FixedInputs,
    priors: PriorSet,
    sample: PosteriorSample,
    seconds: f64,
}

fn desk_config() -> RunConfig {
    RunConfig::default()
}

fn shared_targets() -> &'static (TargetSet, FixedInputs) {
    static CELL: OnceLock<(TargetSet, FixedInputs)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = desk_config();
        let truth = cfg.true_params().unwrap();
        let fixed = cfg.fixed_inputs().unwrap();
        let targets = generate_targets(&truth, &fixed.life_table, &cfg.target_gen()).unwrap();
        (targets, fixed)
    })
}

fn calibration(j: usize) -> Calibration {
    let cfg = desk_config();
    let (targets, fixed) = shared_targets();
    let priors = cfg.priors().unwrap();
    let mut imis = cfg.imis_config();
    imis.j = j;
    imis.n_lik = 10_000;
    let start = std::time::Instant::now();
    let sample = calibrate(&priors, targets, fixed, &imis).unwrap();
    Calibration {
        targets: targets.clone(),
        fixed: fixed.clone(),
        priors,
        sample,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn desk_run() -> &'static Calibration {
    static CELL: OnceLock<Calibration> = OnceLock::new();
    CELL.get_or_init(|| calibration(2000))
}

fn full_run() -> &'static Calibration {
    static CELL: OnceLock<Calibration> = OnceLock::new();
    CELL.get_or_init(|| calibration(5000))
}

#[test]
fn c03_self_consistency_recovery() {
    let run = desk_run();
    let summary = posterior_summary(&run.sample.draws);
    let truth = desk_config().targets.true_params.to_vec();
    let prior_sd: Vec<f64> = run.priors.specs().iter().map(|s| s.sd()).collect();
    let mut misses = Vec::new();
    let mut no_shrink = Vec::new();
    for (k, name) in CALIBRATED_NAMES.iter().enumerate() {
        let p = summary.get(name).unwrap();
        println!(
            "  {name:<8} truth {:>11.4e}  CrI [{:>11.4e}, {:>11.4e}]  sd {:>10.3e}  prior sd {:>10.3e}",
            truth[k], p.cri_lb, p.cri_ub, p.sd, prior_sd[k]
        );
        if !(p.cri_lb <= truth[k] && truth[k] <= p.cri_ub) {
            misses.push(*name);
        }
        if p.sd >= prior_sd[k] {
            no_shrink.push(*name);
        }
    }
    let pass = misses.is_empty() && no_shrink.is_empty();
    verdict(
        3,
        "self-consistency recovery",
        pass,
        &format!(
            "outside CrI: {misses:?}, no shrinkage: {no_shrink:?}, {:.0} s",
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn c04_correlation_structure() {
    let summary = posterior_summary(&desk_run().sample.draws);
    let lg = summary.corr("l", "gamma").unwrap();
    let l45 = summary.corr("lam4", "lam5").unwrap();
    let ps = summary.corr("p_adeno", "p_small").unwrap();
    let pass = lg < -0.8 && l45 > 0.3 && ps > 0.2;
    verdict(
        4,
        "posterior correlation structure",
        pass,
        &format!("corr(l, gamma) {lg:.3}, corr(lam4, lam5) {l45:.3}, corr(p_adeno, p_small) {ps:.3}"),
    );
    assert!(pass);
}

#[test]
fn c05_posterior_predictive_coverage() {
    let run = desk_run();
    let cfg = desk_config();
    let bands = posterior_predictive(
        &run.sample.draws,
        &run.fixed,
        cfg.validate.n_per_draw,
        &run.targets.metadata.bins,
        cfg.seeds.master_seed,
    )
    .unwrap();
    let (covered, total) = predictive_coverage(&bands, &run.targets);
    let frac = covered as f64 / total as f64;
    let pass = frac >= 0.9;
    verdict(
        5,
        "posterior predictive coverage",
        pass,
        &format!("{covered}/{total} bins = {:.1}%", 100.0 * frac),
    );
    assert!(pass);
}

#[test]
fn c06_imis_diagnostics_shape() {
    let run = full_run();
    let d = &run.sample.draws.diagnostics;
    let j = run.sample.draws.len();
    let pass = j == 5000
        && 1 < d.unique_count
        && d.unique_count < j
        && 1.0 < d.ess
        && d.ess < j as f64
        && d.ess <= d.unique_count as f64
        && d.stopped_by_rule
        && d.iterations < d_max_iterations();
    verdict(
        6,
        "IMIS diagnostics shape",
        pass,
        &format!(
            "j {j}, unique {}, ESS {:.0}, stopped by rule {} after {} iterations, {:.0} s",
            d.unique_count, d.ess, d.stopped_by_rule, d.iterations, run.seconds
        ),
    );
    assert!(pass);
}

fn d_max_iterations() -> usize {
    desk_config().imis.max_iterations
}

fn toy_result(rows: &[[f64; 4]]) -> PsaResult {
    PsaResult {
        approach: UncertaintyApproach::A1Full,
        n_individuals: 1,
        master_seed: 0,
        records: rows
            .iter()
            .enumerate()
            .map(|(i, r)| PsaRecord {
                draw_index: i,
                theta: vec![],
                external: vec![],
                cost_none: r[0],
                qaly_none: r[1],
                cost_screen: r[2],
                qaly_screen: r[3],
                d_cost: r[2] - r[0],
                d_qaly: r[3] - r[1],
            })
            .collect(),
    }
}

fn enumeration_evpi(nmb: &[[f64; 2]]) -> f64 {
    let n = nmb.len();
    let baseline = (0..2)
        .map(|s| nmb.iter().map(|r| r[s]).sum::<f64>() / n as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_rule = (0..1u32 << n)
        .map(|rule| (0..n).map(|i| nmb[i][((rule >> i) & 1) as usize]).sum::<f64>() / n as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    best_rule - baseline
}

#[test]
fn c07_evpi_oracle() {
    let mut rng = StdRng::seed_from_u64(707);
    let wtp = [0.0, 10_000.0, 50_000.0, 100_000.0];
    let mut worst: f64 = 0.0;
    let mut min_evpi = f64::INFINITY;
    let mut cases = 0;
    for n in 1..=4 {
        for _ in 0..500 {
            let rows: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..5000.0),
                        rng.random_range(15.0..17.0),
                        rng.random_range(0.0..5000.0),
                        rng.random_range(15.0..17.0),
                    ]
                })
                .collect();
            let psa = toy_result(&rows);
            let curve = evpi_curve(&psa, &wtp).unwrap();
            for p in &curve.points {
                let oracle = enumeration_evpi(&psa.nmb(p.wtp));
                worst = worst.max((p.evpi - oracle).abs());
                min_evpi = min_evpi.min(p.evpi);
                cases += 1;
            }
        }
    }
    let direct = evpi(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let pass = worst == 0.0 && min_evpi >= 0.0 && direct == 0.5;
    verdict(
        7,
        "EVPI vs exhaustive enumeration",
        pass,
        &format!("{cases} curve points, max |diff| {worst:e}, min EVPI {min_evpi:e}"),
    );
    assert!(pass);
}

fn sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

#[test]
fn c08_four_approach_structure() {
    let run = full_run();
    let cfg = desk_config();
    let lt = &run.fixed.life_table;
    let base = cfg.base_params();
    let wtp = cfg.wtp_grid().unwrap();
    let start = std::time::Instant::now();
    let mut results = Vec::new();
    let mut curves: Vec<EvpiCurve> = Vec::new();
    for approach in UncertaintyApproach::ALL {
        let draws = build_draws(
            approach,
            &run.sample.draws,
            &base,
            &cfg.cea.external,
            cfg.cea.discount_rate,
            500,
            cfg.seeds.master_seed,
        )
        .unwrap();
        let res = run_psa(
            approach,
            &draws,
            &cfg.cea.strategy,
            lt,
            cfg.horizon(),
            10_000,
            cfg.seeds.master_seed,
        )
        .unwrap();
        curves.push(evpi_curve(&res, &wtp).unwrap());
        results.push(res);
    }
    let secs = start.elapsed().as_secs_f64();
    let [a1, a2, _, a4] = [0, 1, 2, 3].map(|i| &results[i]);
    let [e1, e2, e3, e4] = [0, 1, 2, 3].map(|i| &curves[i]);
    for (r, c) in results.iter().zip(&curves) {
        let (mc, mq) = r.mean_incremental();
        let peak = c.peak();
        println!(
            "  {:<24} mean dC {:>9.1} sd {:>8.1}  mean dQ {:>8.5} sd {:>8.5}  peak EVPI {:>8.2} at {:>7.0}  crossing {:?}",
            r.approach.name(),
            mc,
            sd(&r.d_costs()),
            mq,
            sd(&r.d_qalys()),
            peak.evpi,
            peak.wtp,
            r.nmb_crossing().map(|x| x.round())
        );
    }

    let a = sd(&a4.d_costs()) >= sd(&a1.d_costs()) && sd(&a4.d_qalys()) >= sd(&a1.d_qalys());
    let b = sample_variance(&a1.d_costs()) >= sample_variance(&a2.d_costs())
        && sample_variance(&a1.d_qalys()) >= sample_variance(&a2.d_qalys());
    let (p1, p2, p3, p4) = (e1.peak().evpi, e2.peak().evpi, e3.peak().evpi, e4.peak().evpi);
    let a3_lowest = (0..wtp.len()).all(|k| {
        let v = e3.points[k].evpi;
        v <= e1.points[k].evpi && v <= e2.points[k].evpi && v <= e4.points[k].evpi
    });
    let c = p4 > p1.max(p2) && p1.max(p2) > p3 && a3_lowest;
    let mut d = true;
    let mut offsets = Vec::new();
    for (r, e) in [(a1, e1), (a2, e2), (a4, e4)] {
        let off = r.nmb_crossing().map(|x| (e.peak().wtp - x).abs());
        offsets.push(off.map(|o| o.round()));
        d &= off.is_some_and(|o| o <= 5000.0);
    }
    let nonneg = curves.iter().all(|c| c.points.iter().all(|p| p.evpi >= 0.0));
    let pass = a && b && c && d && nonneg;
    verdict(
        8,
        "four-approach structure",
        pass,
        &format!(
            "(a) {a} (b) {b} (c) {c} [peaks A1 {p1:.1} A2 {p2:.1} A3 {p3:.1} A4 {p4:.1}, A3 lowest {a3_lowest}] \
             (d) {d} [peak offsets {offsets:?}] EVPI >= 0 {nonneg}, {secs:.0} s"
        ),
    );
    assert!(pass);
}

const DETERMINISM_CONFIG: &str = r#"
[seeds]
master_seed = 9

[targets]
reps = 10
n_adenoma = 500
n_cancer = 5000

[imis]
n0 = 600
b = 200
j = 500
max_iterations = 6
density_grid = 25

[psa]
n_draws = 24
n_individuals = 1500
"#;

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c09_worker_count_determinism() {
    let cfg = RunConfig::parse(DETERMINISM_CONFIG).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, workers) in dirs.iter().zip([1, 4]) {
        let ctx = Context::new(cfg.clone(), dir.path(), workers).unwrap();
        for cmd in [
            Command::SimulateTargets,
            Command::Calibrate { targets: None },
            Command::Psa { posterior: None },
            Command::Evpi { psa: vec![] },
        ] {
            run(&ctx, &cmd).unwrap();
        }
    }
    let a = outputs(dirs[0].path());
    let b = outputs(dirs[1].path());
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = a.len() == b.len() && a.len() >= 15 && differing.is_empty();
    verdict(
        9,
        "byte-identical outputs at 1 and 4 workers",
        pass,
        &format!("{} files compared, differing {differing:?}", a.len()),
    );
    assert!(pass);
}

#[test]
fn c10_inert_arm_hand_trace() {
    let nh = NaturalHistoryParams {
        p_adeno: 1e-12,
        l: 1e-40,
        ..NaturalHistoryParams::reference()
    };
    let cea = CeaParams::default().inert();
    let strat = ScreeningStrategy::colonoscopy();
    let none = ScreeningStrategy {
        kind: StrategyKind::None,
        ..strat
    };
    let lt = LifeTable::gompertz_synthetic();
    let horizon = Horizon::default();
    let (draw, base, screen) = (0u64..)
        .find_map(|draw| {
            let base = simulate_strategy(&nh, &cea, &none, &lt, horizon, 1, 31, draw).unwrap();
            (base.diagnoses == [0, 0] && base.life_years >= 25.0).then(|| {
                let screen = simulate_strategy(&nh, &cea, &strat, &lt, horizon, 1, 31, draw).unwrap();
                (draw, base, screen)
            })
        })
        .unwrap();

    let death_age = 50.0 + base.life_years;
    let exam_ages: Vec<f64> = [50.0, 60.0, 70.0, 80.0]
        .into_iter()
        .filter(|&a| a < death_age)
        .collect();
    let hand: f64 = exam_ages
        .iter()
        .map(|&a| cea.cost_colonoscopy / 1.03f64.powi((a - 50.0) as i32))
        .sum();
    let via_discount: f64 = exam_ages.iter().map(|&a| discount(cea.cost_colonoscopy, a, 50.0, 0.03)).sum();
    let d_cost = screen.cost - base.cost;
    let d_qaly = screen.qaly - base.qaly;
    let pass = d_qaly == 0.0
        && screen.colonoscopies == exam_ages.len() as u64
        && (d_cost - hand).abs() <= 1e-9 * hand
        && (hand - via_discount).abs() <= 1e-9 * hand;

    let cohort_none = simulate_strategy(&NaturalHistoryParams::reference(), &cea, &none, &lt, horizon, 2000, 5, 0).unwrap();
    let cohort_screen = simulate_strategy(&NaturalHistoryParams::reference(), &cea, &strat, &lt, horizon, 2000, 5, 0).unwrap();
    let cohort_ok = cohort_screen.qaly == cohort_none.qaly
        && cohort_screen.symptomatic == cohort_none.symptomatic
        && cohort_screen.cost > cohort_none.cost;
    verdict(
        10,
        "inert screening arm under common random numbers",
        pass && cohort_ok,
        &format!(
            "draw {draw}: death age {death_age}, exams {exam_ages:?}, d_cost {d_cost:.6} vs hand {hand:.6}, d_qaly {d_qaly:e}; \
             cohort d_qaly {:e}",
            cohort_screen.qaly - cohort_none.qaly
        ),
    );
    assert!(pass && cohort_ok);
}
