//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dyadic_lab::corona::{audit_forest, build_stopping_cubes, carleson_check, decompose_form, ladder_cubes};
use dyadic_lab::grid::{norm, FiniteModel, StepFunction};
use dyadic_lab::martingale::{bessel_gap, complexity_identity_residual, decompose, MartingaleLadder};
use dyadic_lab::shift::{
    haar_multiplier_uniform, max_normalized_sup, petermichl_uniform, random_shift,
    rectangle_constancy_violations, unconditionality_check, ComplexityType, HaarShift,
};
use dyadic_lab::verify::{a2_sweep, duality_check, fit_slope, lemma_li_ratios, random_pair, weighted_norm, ShiftSpec, WeightSpec};
use dyadic_lab::weights::{a2_constant, cascade_weight, power_weight, random_a2_weight, Weight};
use dyadic_lab::LabError;

struct Outcome {
    passed: bool,
    summary: String,
}

fn outcome(passed: bool, summary: String) -> Outcome {
    Outcome { passed, summary }
}

/// Separated corpus shifts: canonical generators on one residue class and
/// seeded random shifts of every complexity type with `m, n <= 3`.
fn shift_corpus(model: FiniteModel) -> Result<Vec<HaarShift>, LabError> {
    let mut out = vec![
        haar_multiplier_uniform(model, 1.0)?.separate(0)?,
        haar_multiplier_uniform(model, -1.0)?.separate(1)?,
    ];
    if model.dim() == 1 {
        out.push(petermichl_uniform(model, 1.0)?.separate(0)?);
        out.push(petermichl_uniform(model, 1.0)?.separate(2)?);
    }
    let mut seed = 100;
    for m in 0..=3 {
        for n in 0..=3 {
            let c = ComplexityType::new(m, n);
            if c.kappa() as u64 > model.depth() as u64 {
                continue;
            }
            seed += 1;
            let residue = ((seed as u32) % c.kappa()).min(model.depth() - c.kappa());
            out.push(random_shift(c, residue, seed, model)?);
        }
    }
    Ok(out)
}

/// Alternating power and cascade weights indexed by `k`.
fn corpus_weight(k: usize, model: FiniteModel) -> Result<Weight, LabError> {
    let alphas = [-0.9, -0.6, -0.3, 0.3, 0.6, 0.9];
    let targets = [1.5, 3.0, 8.0, 20.0];
    match k % 3 {
        0 => power_weight(alphas[(k / 3) % alphas.len()], model),
        1 => random_a2_weight(targets[(k / 3) % targets.len()], k as u64, model),
        _ => cascade_weight(0.3 + 0.05 * ((k / 3) % 4) as f64, k as u64, model),
    }
}

fn a1() -> Result<Outcome, LabError> {
    let model = FiniteModel::new(1, 10)?;
    let shifts = shift_corpus(model)?;
    let (mut identity, mut u_err) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let shift = &shifts[k % shifts.len()];
        let w = corpus_weight(k, model)?;
        let (f, g) = random_pair(model, 1000 + k as u64);
        let r = decompose_form(shift, &f, &g, &w)?;
        identity = identity.max(r.identity_error());
        u_err = u_err.max(r.u_error());
    }
    Ok(outcome(
        identity <= 1e-10 && u_err <= 1e-10,
        format!("100 instances at d=1, N=10: total vs U+V*+W {identity:.2e}, U vs Vtilde+V {u_err:.2e} (tol 1e-10)"),
    ))
}

fn a2() -> Result<Outcome, LabError> {
    let models = [FiniteModel::new(1, 8)?, FiniteModel::new(2, 4)?, FiniteModel::new(3, 3)?];
    let (mut recon, mut parseval, mut gap) = (0.0f64, 0.0f64, f64::INFINITY);
    for k in 0..1000usize {
        let model = models[k % models.len()];
        let kappa = 1 + (k / 3) as u32 % 3;
        let residue = ((k / 9) as u32 % kappa).min(model.depth() - kappa);
        let w = corpus_weight(k, model)?;
        let sigma = w.sigma_measure();
        let (f, _) = random_pair(model, 5000 + k as u64);
        let ladder = MartingaleLadder::new(sigma.clone(), kappa, residue)?;
        let dec = decompose(&f, &ladder)?;
        recon = recon.max(dec.reconstruct().sub(&f)?.max_abs());
        let total = norm(&f, &sigma)?.powi(2);
        let mut energy = norm(&dec.coarse, &sigma)?.powi(2) + norm(&dec.refinement, &sigma)?.powi(2);
        for d in dec.differences.values() {
            energy += ladder.local_energy(&d.cube, &d.values);
        }
        parseval = parseval.max((energy - total).abs() / (1.0 + total));
        gap = gap.min(bessel_gap(&f, &ladder)?);
    }
    let mut complexity = 0.0f64;
    let mut blocks = 0;
    for model in [FiniteModel::new(1, 10)?, FiniteModel::new(2, 5)?] {
        for (k, shift) in shift_corpus(model)?.iter().enumerate() {
            let w = corpus_weight(k, model)?;
            let ladder = MartingaleLadder::new(w.sigma_measure(), shift.kappa(), shift.residue().unwrap_or(0))?;
            let (f, _) = random_pair(model, 9000 + k as u64);
            complexity = complexity.max(complexity_identity_residual(shift, &f, &ladder)?);
            blocks += shift.n_blocks();
        }
    }
    Ok(outcome(
        recon <= 1e-10 && parseval <= 1e-10 && gap >= -1e-12 && complexity <= 1e-12,
        format!(
            "1000 (f, sigma): reconstruction {recon:.2e}, Parseval {parseval:.2e}, min Bessel gap {gap:.2e}; \
             complexity identity {complexity:.2e} over {blocks} blocks"
        ),
    ))
}

fn a3() -> Result<Outcome, LabError> {
    let mut violations = 0;
    let mut count_mismatch = 0;
    let mut packing = 0.0f64;
    let mut instances = 0;
    let models = [FiniteModel::new(1, 10)?, FiniteModel::new(2, 5)?, FiniteModel::new(3, 3)?];
    for k in 0..200usize {
        let model = models[k % models.len()];
        let kappa = 1 + (k / 3) as u32 % 4;
        let kappa = kappa.min(model.depth());
        let residue = (k / 12) as u32 % kappa;
        let w = corpus_weight(k, model)?;
        let (f, _) = random_pair(model, 20_000 + k as u64);
        let forest = build_stopping_cubes(&f, &w, kappa, residue)?;
        let audit = audit_forest(&forest, &f, &w)?;
        if !audit.is_clean() {
            violations += 1;
        }
        let covered: usize = forest.cubes().map(|c| forest.corona(c).len()).sum();
        if covered != ladder_cubes(model, kappa, residue).len() || covered != audit.ladder_cubes {
            count_mismatch += 1;
        }
        packing = packing.max(carleson_check(&forest, &f, &w)?.packing);
        instances += 1;
    }
    for model in [FiniteModel::new(1, 10)?, FiniteModel::new(2, 5)?] {
        for (k, shift) in shift_corpus(model)?.iter().enumerate() {
            for j in 0..6 {
                let w = corpus_weight(k + j, model)?;
                let (f, _) = random_pair(model, 30_000 + (k * 8 + j) as u64);
                let forest = build_stopping_cubes(&f, &w, shift.kappa(), shift.residue().unwrap_or(0))?;
                packing = packing.max(carleson_check(&forest, &f, &w)?.packing);
                instances += 1;
            }
        }
    }
    Ok(outcome(
        violations == 0 && count_mismatch == 0 && packing <= 64.0,
        format!(
            "200 audited forests: {violations} with violations, {count_mismatch} partition count mismatches; \
             max Carleson packing {packing:.4} over {instances} instances (bound 64)"
        ),
    ))
}

fn a4() -> Result<Outcome, LabError> {
    let mut sup = 0.0f64;
    let mut rect = 0;
    for model in [FiniteModel::new(1, 8)?, FiniteModel::new(2, 4)?, FiniteModel::new(3, 3)?] {
        for shift in shift_corpus(model)? {
            sup = sup.max(max_normalized_sup(&shift));
            rect += rectangle_constancy_violations(&shift)?;
        }
        rect += rectangle_constancy_violations(&haar_multiplier_uniform(model, 1.0)?)?;
    }
    let model = FiniteModel::new(1, 8)?;
    let hm = unconditionality_check(&haar_multiplier_uniform(model, 1.0)?, 64, 11)?;
    let pm = unconditionality_check(&petermichl_uniform(model, 1.0)?, 64, 12)?;
    let hm2 = unconditionality_check(&haar_multiplier_uniform(FiniteModel::new(2, 4)?, 1.0)?, 64, 13)?;
    let canonical = hm.max(hm2).max(pm);
    Ok(outcome(
        sup <= 1.0 && rect == 0 && canonical <= 1.0 + 1e-9 && (pm - 1.0).abs() <= 1e-9,
        format!(
            "max |s_Q|·|Q| {sup}, rectangle violations {rect}; unconditionality at N=8: \
             Haar multiplier {hm:.12}, d=2 multiplier {hm2:.12}, Petermichl {pm:.12}"
        ),
    ))
}

fn a5() -> Result<Outcome, LabError> {
    let shifts = [
        ShiftSpec::HaarMultiplier { sign: 1.0, residue: Some(0) },
        ShiftSpec::Petermichl { sign: 1.0, residue: Some(0) },
        ShiftSpec::Random { m: 1, n: 2, residue: 0, seed: 3 },
        ShiftSpec::Random { m: 2, n: 1, residue: 1, seed: 5 },
    ];
    let weights: [(WeightSpec, f64); 4] = [
        (WeightSpec::Power, -0.8),
        (WeightSpec::Power, 0.7),
        (WeightSpec::CascadeAmplitude { seed: 1 }, 0.4),
        (WeightSpec::CascadeAmplitude { seed: 2 }, 0.5),
    ];
    let depths = [8u32, 10, 12];
    let mut maxima = [[0.0f64; 2]; 3];
    let mut worst_increase = 0.0f64;
    let mut finite = true;
    for s in &shifts {
        for (spec, param) in &weights {
            let mut per_depth = [[0.0f64; 2]; 3];
            for (i, &n) in depths.iter().enumerate() {
                let model = FiniteModel::new(1, n)?;
                let r = lemma_li_ratios(&s.build(model)?, &spec.build(*param, model)?, &model.root(), 32, 7)?;
                finite &= r.r1_max.is_finite() && r.r2_max.is_finite();
                per_depth[i] = [r.r1_max, r.r2_max];
                maxima[i][0] = maxima[i][0].max(r.r1_max);
                maxima[i][1] = maxima[i][1].max(r.r2_max);
            }
            for j in 0..2 {
                worst_increase = worst_increase.max(per_depth[2][j] / per_depth[1][j] - 1.0);
            }
        }
    }
    for j in 0..2 {
        worst_increase = worst_increase.max(maxima[2][j] / maxima[1][j] - 1.0);
    }
    let table: Vec<String> = depths
        .iter()
        .zip(&maxima)
        .map(|(n, m)| format!("N={n}: r1 {:.4}, r2 {:.4}", m[0], m[1]))
        .collect();
    Ok(outcome(
        finite && worst_increase <= 0.10,
        format!("{}; largest increase N=10 to 12 {:.2}% (limit 10%)", table.join("; "), 100.0 * worst_increase),
    ))
}

fn a6() -> Result<Outcome, LabError> {
    let model = FiniteModel::new(1, 14)?;
    let alphas = [-0.95, -0.98, -0.99, -0.995, -0.998, -0.999, -0.9995];
    let mut parts = Vec::new();
    let mut passed = true;
    for shift in [
        ShiftSpec::Petermichl { sign: 1.0, residue: None },
        ShiftSpec::HaarMultiplier { sign: 1.0, residue: None },
    ] {
        let rows = a2_sweep(&shift, &WeightSpec::Power, &alphas, model, None)?;
        let (lo, hi) = rows.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(r.a2), h.max(r.a2)));
        let fit = fit_slope(&rows, 10.0)?;
        passed &= fit.slope <= 1.15 && lo >= 10.0 && hi <= 1000.5 && rows.iter().all(|r| r.is_ok());
        parts.push(format!(
            "{} slope {:.4} (r2 {:.4}, A2 {lo:.1}..{hi:.1})",
            rows[0].shift_id, fit.slope, fit.r2
        ));
    }
    Ok(outcome(passed, format!("d=1, N=14: {} (limit 1.15)", parts.join("; "))))
}

fn a7() -> Result<Outcome, LabError> {
    let one = a2_constant(&Weight::constant(FiniteModel::new(2, 5)?, 1.0)?).constant;
    let m1 = FiniteModel::new(1, 1)?;
    let step = a2_constant(&Weight::from_density(StepFunction::from_values(m1, vec![2.0, 0.5])?)?).constant;
    let mut duality = 0.0f64;
    let mut inexact = 0;
    let mut built = 0;
    for k in 0..50usize {
        let model = [FiniteModel::new(1, 8)?, FiniteModel::new(2, 4)?][k % 2];
        let shifts = shift_corpus(model)?;
        let mut shift = shifts[k % shifts.len()].clone();
        if k % 5 == 0 {
            shift = haar_multiplier_uniform(model, 1.0)?;
        }
        let w = corpus_weight(k, model)?;
        let n = weighted_norm(&shift, &w)?.value;
        let gap = duality_check(&shift, &w)?;
        duality = duality.max(if n > 0.0 { gap / n } else { gap });
        for v in [w.clone(), dyadic_lab::weights::dual_weight(&w)] {
            built += 1;
            if !v.is_exact_pair() {
                inexact += 1;
            }
        }
    }
    for model in [FiniteModel::new(1, 14)?, FiniteModel::new(3, 4)?] {
        for k in 0..12 {
            built += 1;
            if !corpus_weight(k, model)?.is_exact_pair() {
                inexact += 1;
            }
        }
    }
    Ok(outcome(
        one == 1.0 && step == 25.0 / 16.0 && duality <= 1e-9 && inexact == 0,
        format!(
            "A2(1) = {one}, A2(2, 1/2) = {step}; duality gap {duality:.2e} on 50 instances; \
             {inexact} of {built} weights with w*sigma != 1"
        ),
    ))
}

fn a8() -> Result<Outcome, LabError> {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-a8");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).map_err(|e| LabError::InvalidParameter(e.to_string()))?;
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{"model":{"d":1,"N":10},"shift":{"type":"random","m":2,"n":1,"seed":4},
            "weights":{"family":"cascade","seed":6,"params":[1.0,2.0,5.0,10.0,20.0,50.0,100.0,200.0]}}"#,
    )
    .map_err(|e| LabError::InvalidParameter(e.to_string()))?;
    let mut outputs = Vec::new();
    for jobs in ["1", "2", "4", "1"] {
        let out = dir.join(format!("jobs{jobs}-{}", outputs.len()));
        let st = Command::new(env!("CARGO_BIN_EXE_dyadic-lab"))
            .env_remove("DYADIC_LAB_SEED")
            .args(["--jobs", jobs, "sweep"])
            .arg(&config)
            .arg("--output")
            .arg(&out)
            .output()
            .map_err(|e| LabError::InvalidParameter(e.to_string()))?;
        if !st.status.success() {
            return Ok(outcome(false, format!("sweep with --jobs {jobs} exited with {}", st.status)));
        }
        outputs.push(fs::read(out.join("sweep.csv")).map_err(|e| LabError::InvalidParameter(e.to_string()))?);
    }
    let identical = outputs.windows(2).all(|p| p[0] == p[1]);
    Ok(outcome(
        identical,
        format!("sweep.csv for --jobs 1, 2, 4 and a rerun: {} ({} bytes)", if identical { "byte-identical" } else { "differ" }, outputs[0].len()),
    ))
}

type Criterion = (&'static str, fn() -> Result<Outcome, LabError>, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("A1", a1, Duration::from_secs(60)),
        ("A2", a2, Duration::from_secs(30)),
        ("A3", a3, Duration::from_secs(300)),
        ("A4", a4, Duration::from_secs(300)),
        ("A5", a5, Duration::from_secs(300)),
        ("A6", a6, Duration::from_secs(600)),
        ("A7", a7, Duration::from_secs(300)),
        ("A8", a8, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (passed, summary) = match result {
            Ok(o) => (o.passed && elapsed <= budget, o.summary),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{name} {} {summary} [{:.1}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
