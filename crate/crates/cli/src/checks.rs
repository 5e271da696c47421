//! Invariant suites run by `verify`.

use dyadic_lab::corona::{
    audit_forest, build_stopping_cubes, carleson_check, decompose_form, sign_average, square_function_v,
};
use dyadic_lab::grid::{norm, FiniteModel, StepFunction};
use dyadic_lab::linalg::SolverOptions;
use dyadic_lab::martingale::{bessel_gap, complexity_identity_residual, decompose, MartingaleLadder};
use dyadic_lab::shift::{max_normalized_sup, rectangle_constancy_violations, unconditionality_check, HaarShift, DENSE_LEAF_BITS};
use dyadic_lab::verify::{duality_check, lemma_li_ratios, linear_bound_constant, random_pair, weighted_norm, weighted_norm_dense};
use dyadic_lab::weights::{a2_constant, Weight};
use dyadic_lab::LabError;
use serde::Serialize;

pub const ALL_CHECKS: [&str; 11] = [
    "weights",
    "shift_axioms",
    "martingale",
    "stopping",
    "carleson",
    "decomposition",
    "square_function",
    "lemma_ratios",
    "duality",
    "norm_crosscheck",
    "linear_bound",
];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured value for the check's criterion.
    pub measured: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub detail: String,
}

/// The fixed inputs every check iterates over.
pub struct Instances {
    pub model: FiniteModel,
    pub shift: HaarShift,
    /// `shift` restricted to one residue class when it spans several.
    pub separated: HaarShift,
    pub weights: Vec<(f64, Weight)>,
    pub seeds: Vec<u64>,
}

impl Instances {
    fn pairs(&self) -> impl Iterator<Item = (&Weight, u64, StepFunction, StepFunction)> + '_ {
        self.weights.iter().flat_map(move |(_, w)| {
            self.seeds.iter().map(move |&s| {
                let (f, g) = random_pair(self.model, s);
                (w, s, f, g)
            })
        })
    }
}

fn result(name: &str, measured: f64, tolerance: f64, passed: bool, instances: usize, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        measured,
        tolerance,
        instances,
        detail,
    }
}

type CheckOutcome = Result<CheckResult, LabError>;

pub fn run_check(name: &str, inst: &Instances) -> CheckOutcome {
    match name {
        "weights" => check_weights(inst),
        "shift_axioms" => check_shift_axioms(inst),
        "martingale" => check_martingale(inst),
        "stopping" => check_stopping(inst),
        "carleson" => check_carleson(inst),
        "decomposition" => check_decomposition(inst),
        "square_function" => check_square_function(inst),
        "lemma_ratios" => check_lemma_ratios(inst),
        "duality" => check_duality(inst),
        "norm_crosscheck" => check_norm_crosscheck(inst),
        "linear_bound" => check_linear_bound(inst),
        other => Err(LabError::InvalidParameter(format!("unknown check `{other}`"))),
    }
}

fn check_weights(inst: &Instances) -> CheckOutcome {
    let mut inexact = 0;
    let mut min_a2 = f64::INFINITY;
    for (_, w) in &inst.weights {
        if !w.is_exact_pair() {
            inexact += 1;
        }
        min_a2 = min_a2.min(a2_constant(w).constant);
    }
    Ok(result(
        "weights",
        min_a2,
        1.0,
        inexact == 0 && min_a2 >= 1.0,
        inst.weights.len(),
        format!("{inexact} weights with w*sigma != 1; smallest A2 constant {min_a2}"),
    ))
}

fn check_shift_axioms(inst: &Instances) -> CheckOutcome {
    let sup = max_normalized_sup(&inst.shift);
    let rect = if inst.model.dim() * inst.model.depth() <= DENSE_LEAF_BITS {
        rectangle_constancy_violations(&inst.shift)?
    } else {
        0
    };
    let unc = unconditionality_check(&inst.shift, 32, inst.seeds[0])?;
    Ok(result(
        "shift_axioms",
        unc,
        1.0 + 1e-9,
        sup <= 1.0 && rect == 0 && unc <= 1.0 + 1e-9,
        1,
        format!("max |s_Q|·|Q| = {sup}, rectangle violations {rect}, sampled unconditional norm {unc}"),
    ))
}

fn check_martingale(inst: &Instances) -> CheckOutcome {
    let kappa = inst.separated.kappa();
    let residue = inst.separated.residue().unwrap_or(0);
    let (mut recon, mut parseval, mut min_gap, mut complexity) = (0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    let mut n = 0;
    for (w, _, f, _) in inst.pairs() {
        let sigma = w.sigma_measure();
        let ladder = MartingaleLadder::new(sigma.clone(), kappa, residue)?;
        let dec = decompose(&f, &ladder)?;
        recon = recon.max(dec.reconstruct().sub(&f)?.max_abs());
        let total = norm(&f, &sigma)?.powi(2);
        let mut energy = norm(&dec.coarse, &sigma)?.powi(2) + norm(&dec.refinement, &sigma)?.powi(2);
        for d in dec.differences.values() {
            energy += ladder.local_energy(&d.cube, &d.values);
        }
        parseval = parseval.max((energy - total).abs() / (1.0 + total));
        min_gap = min_gap.min(bessel_gap(&f, &ladder)?);
        complexity = complexity.max(complexity_identity_residual(&inst.separated, &f, &ladder)?);
        n += 1;
    }
    let worst = recon.max(parseval);
    Ok(result(
        "martingale",
        worst,
        1e-10,
        worst <= 1e-10 && min_gap >= -1e-12 && complexity <= 1e-12,
        n,
        format!("reconstruction {recon:e}, Parseval {parseval:e}, smallest Bessel gap {min_gap:e}, complexity identity {complexity:e}"),
    ))
}

fn check_stopping(inst: &Instances) -> CheckOutcome {
    let kappa = inst.separated.kappa();
    let residue = inst.separated.residue().unwrap_or(0);
    let mut violations = 0;
    let mut n = 0;
    for (w, _, f, _) in inst.pairs() {
        let forest = build_stopping_cubes(&f, w, kappa, residue)?;
        let audit = audit_forest(&forest, &f, w)?;
        violations += audit.partition + audit.minimality + audit.corona_bound + audit.threshold + audit.rho;
        n += 1;
    }
    Ok(result(
        "stopping",
        violations as f64,
        0.0,
        violations == 0,
        n,
        format!("{violations} violations of the stopping conditions"),
    ))
}

fn check_carleson(inst: &Instances) -> CheckOutcome {
    let kappa = inst.separated.kappa();
    let residue = inst.separated.residue().unwrap_or(0);
    let (mut packing, mut overlap, mut squared) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    for (w, _, f, _) in inst.pairs() {
        let forest = build_stopping_cubes(&f, w, kappa, residue)?;
        let c = carleson_check(&forest, &f, w)?;
        packing = packing.max(c.packing);
        overlap = overlap.max(c.overlap / c.packing);
        squared = squared.max(c.packing_squared);
        n += 1;
    }
    Ok(result(
        "carleson",
        packing,
        64.0,
        packing <= 64.0 && overlap.is_finite(),
        n,
        format!("max packing {packing}, max overlap/packing {overlap}, max squared-average packing {squared}"),
    ))
}

fn check_decomposition(inst: &Instances) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (w, _, f, g) in inst.pairs() {
        let r = match decompose_form(&inst.separated, &f, &g, w) {
            Ok(r) => r,
            Err(LabError::IdentityViolation { .. }) => {
                worst = f64::INFINITY;
                continue;
            }
            Err(e) => return Err(e),
        };
        worst = worst.max(r.identity_error()).max(r.u_error());
        n += 1;
    }
    Ok(result(
        "decomposition",
        worst,
        1e-10,
        worst <= 1e-10,
        n,
        format!("largest relative defect in total = U + V* + W and U = Vtilde + V: {worst:e}"),
    ))
}

fn check_square_function(inst: &Instances) -> CheckOutcome {
    let (mut slack, mut sign_err) = (f64::NEG_INFINITY, 0.0f64);
    let mut n = 0;
    for (w, seed, f, g) in inst.pairs() {
        let r = decompose_form(&inst.separated, &f, &g, w)?;
        let sq = square_function_v(&inst.separated, &f, w)?;
        let wm = w.w_measure();
        slack = slack.max(r.V.abs() - norm(&g, &wm)? * norm(&sq, &wm)?);
        let s = sign_average(&inst.separated, &f, w, 256, seed)?;
        sign_err = sign_err.max((s.mean_energy - s.square_energy).abs() / (1.0 + s.square_energy));
        n += 1;
    }
    Ok(result(
        "square_function",
        sign_err,
        1e-10,
        slack <= 1e-10 && sign_err <= 1e-10,
        n,
        format!("largest |V| - ‖g‖‖SF‖ = {slack:e}; sign-average defect {sign_err:e}"),
    ))
}

fn check_lemma_ratios(inst: &Instances) -> CheckOutcome {
    let root = inst.model.root();
    let (mut r1, mut r2) = (0.0f64, 0.0f64);
    for (_, w) in &inst.weights {
        let r = lemma_li_ratios(&inst.separated, w, &root, 32, inst.seeds[0])?;
        r1 = r1.max(r.r1_max);
        r2 = r2.max(r.r2_max);
    }
    Ok(result(
        "lemma_ratios",
        r1.max(r2),
        f64::INFINITY,
        r1.is_finite() && r2.is_finite(),
        inst.weights.len(),
        format!("r1_max {r1}, r2_max {r2}"),
    ))
}

fn check_duality(inst: &Instances) -> CheckOutcome {
    let mut worst = 0.0f64;
    for (_, w) in &inst.weights {
        let n = weighted_norm(&inst.shift, w)?.value;
        let gap = duality_check(&inst.shift, w)?;
        worst = worst.max(if n > 0.0 { gap / n } else { gap });
    }
    Ok(result(
        "duality",
        worst,
        1e-9,
        worst <= 1e-9,
        inst.weights.len(),
        format!("largest relative gap between the norms of S under w and S* under sigma: {worst:e}"),
    ))
}

fn check_norm_crosscheck(inst: &Instances) -> CheckOutcome {
    if inst.model.dim() * inst.model.depth() > 8 {
        return Ok(result(
            "norm_crosscheck",
            0.0,
            1e-9,
            true,
            0,
            "skipped: dense cross-check runs for d*N <= 8".into(),
        ));
    }
    let mut worst = 0.0f64;
    let mut certificate = 0.0f64;
    let opts = SolverOptions::default();
    for (_, w) in &inst.weights {
        let k = weighted_norm(&inst.shift, w)?;
        let d = weighted_norm_dense(&inst.shift, w)?;
        worst = worst.max((k.value - d).abs() / d.max(f64::MIN_POSITIVE));
        certificate = certificate.max(k.residual / k.value.max(f64::MIN_POSITIVE));
    }
    Ok(result(
        "norm_crosscheck",
        worst,
        1e-9,
        worst <= 1e-9 && certificate <= opts.certificate,
        inst.weights.len(),
        format!("Krylov vs dense SVD relative gap {worst:e}, largest residual/value {certificate:e}"),
    ))
}

fn check_linear_bound(inst: &Instances) -> CheckOutcome {
    let mut c = 0.0f64;
    for (_, w) in &inst.weights {
        let n = weighted_norm(&inst.shift, w)?.value;
        c = c.max(linear_bound_constant(n, inst.shift.kappa(), a2_constant(w).constant));
    }
    Ok(result(
        "linear_bound",
        c,
        f64::INFINITY,
        c.is_finite(),
        inst.weights.len(),
        format!("largest norm / (kappa · A2) = {c}"),
    ))
}
