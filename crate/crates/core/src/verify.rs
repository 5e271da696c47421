//! Weighted operator norms, testing-condition ratios, A₂ sweeps and slope
//! fits.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{CubeId, FiniteModel, StepFunction};
use crate::linalg::{largest_singular_value, DenseMatrix, LinearMap, NormResult, SolverOptions};
use crate::shift::{
    haar_multiplier, petermichl_shift, random_shift, uniform_signs, ComplexityType, HaarShift,
};
use crate::weights::{a2_constant, cascade_weight, dual_weight, power_weight, random_a2_weight, Weight};

/// `f ↦ √w · M(√σ · f)`, the shift conjugated into unweighted `L²`.
pub struct WeightedShiftMap<'a> {
    shift: &'a HaarShift,
    sqrt_w: Vec<f64>,
    sqrt_sigma: Vec<f64>,
}

impl<'a> WeightedShiftMap<'a> {
    pub fn new(shift: &'a HaarShift, w: &Weight) -> Result<Self> {
        if shift.model() != w.model() {
            return Err(LabError::ModelMismatch);
        }
        Ok(Self {
            shift,
            sqrt_w: w.w().values().iter().map(|v| v.sqrt()).collect(),
            sqrt_sigma: w.sigma().values().iter().map(|v| v.sqrt()).collect(),
        })
    }
}

impl LinearMap for WeightedShiftMap<'_> {
    fn rows(&self) -> usize {
        self.sqrt_w.len()
    }

    fn cols(&self) -> usize {
        self.sqrt_sigma.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let scaled: Vec<f64> = x.iter().zip(&self.sqrt_sigma).map(|(a, b)| a * b).collect();
        self.shift.apply_filtered(&scaled, y, false, |_| true);
        y.iter_mut().zip(&self.sqrt_w).for_each(|(a, b)| *a *= b);
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let scaled: Vec<f64> = x.iter().zip(&self.sqrt_w).map(|(a, b)| a * b).collect();
        self.shift.apply_filtered(&scaled, y, true, |_| true);
        y.iter_mut().zip(&self.sqrt_sigma).for_each(|(a, b)| *a *= b);
    }
}

/// Norm of `f ↦ S(fσ)` from `L²(σ)` to `L²(w)`.
pub fn weighted_norm(shift: &HaarShift, w: &Weight) -> Result<NormResult> {
    weighted_norm_with(shift, w, &SolverOptions::default())
}

pub fn weighted_norm_with(shift: &HaarShift, w: &Weight, opts: &SolverOptions) -> Result<NormResult> {
    largest_singular_value(&WeightedShiftMap::new(shift, w)?, opts)
}

/// The conjugated matrix `B = diag(√w) M diag(√σ)`, dense.
pub fn weighted_matrix(shift: &HaarShift, w: &Weight) -> Result<DenseMatrix> {
    if shift.model() != w.model() {
        return Err(LabError::ModelMismatch);
    }
    let m = shift.assemble_matrix()?;
    let n = m.rows();
    let (wv, sv) = (w.w().values(), w.sigma().values());
    let mut data = m.data().to_vec();
    for i in 0..n {
        let a = wv[i].sqrt();
        for j in 0..n {
            data[i * n + j] *= a * sv[j].sqrt();
        }
    }
    DenseMatrix::from_row_major(n, n, data)
}

/// Dense SVD cross-check of [`weighted_norm`].
pub fn weighted_norm_dense(shift: &HaarShift, w: &Weight) -> Result<f64> {
    Ok(weighted_matrix(shift, w)?.dense_norm())
}

/// `|‖S‖_{σ→w} - ‖S*‖_{w→σ}|`.
pub fn duality_check(shift: &HaarShift, w: &Weight) -> Result<f64> {
    let a = weighted_norm(shift, w)?.value;
    let b = weighted_norm(&shift.adjoint(), &dual_weight(w))?.value;
    Ok((a - b).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRatios {
    pub r1_max: f64,
    pub r2_max: f64,
    pub collections: usize,
}

/// Over the blocks inside `q`: the full collection, each generation slice
/// and `subcollections` seeded random subsets `𝒬`, the largest
/// `∫_q |S_𝒬(σ𝟙_q)| w / ([w]_{A₂}|q|)` and
/// `∫_q S_𝒬(σ𝟙_q)² w / ([w]²_{A₂} σ(q))`.
pub fn lemma_li_ratios(shift: &HaarShift, w: &Weight, q: &CubeId, subcollections: usize, seed: u64) -> Result<LemmaRatios> {
    let model = shift.model();
    if w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    model.check_cube(q)?;
    let inside: Vec<CubeId> = shift.block_cubes().filter(|c| q.contains(c)).copied().collect();
    if inside.is_empty() {
        return Err(LabError::InsufficientData(format!("no blocks inside {q}")));
    }
    let a2 = a2_constant(w).constant;
    let leaves = model.cube_leaves(q)?;
    let input: Vec<f64> = {
        let mut v = vec![0.0; model.n_leaves()];
        for &i in &leaves {
            v[i] = w.sigma().values()[i];
        }
        v
    };
    let wv = w.w().values();
    let h = model.leaf_volume();
    let sigma_q = w.sigma_measure().mass(q)?;
    let mut collections: Vec<BTreeSet<CubeId>> = vec![inside.iter().copied().collect()];
    let generations: BTreeSet<u32> = inside.iter().map(|c| c.generation()).collect();
    for g in generations {
        collections.push(inside.iter().filter(|c| c.generation() == g).copied().collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..subcollections {
        collections.push(inside.iter().filter(|_| rng.gen::<bool>()).copied().collect());
    }
    let mut out = vec![0.0; model.n_leaves()];
    let (mut r1_max, mut r2_max) = (0.0f64, 0.0f64);
    for set in &collections {
        if set.is_empty() {
            continue;
        }
        shift.apply_filtered(&input, &mut out, false, |c| set.contains(c));
        let (mut l1, mut l2) = (0.0, 0.0);
        for &i in &leaves {
            l1 += out[i].abs() * wv[i] * h;
            l2 += out[i] * out[i] * wv[i] * h;
        }
        r1_max = r1_max.max(l1 / (a2 * q.volume()));
        r2_max = r2_max.max(l2 / (a2 * a2 * sigma_q));
    }
    Ok(LemmaRatios {
        r1_max,
        r2_max,
        collections: collections.len(),
    })
}

/// A shift family for sweeps and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShiftSpec {
    HaarMultiplier {
        #[serde(default = "one")]
        sign: f64,
        #[serde(default)]
        residue: Option<u32>,
    },
    Petermichl {
        #[serde(default = "one")]
        sign: f64,
        #[serde(default)]
        residue: Option<u32>,
    },
    Random {
        m: u32,
        n: u32,
        #[serde(default)]
        residue: u32,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn build(&self, model: FiniteModel) -> Result<HaarShift> {
        match *self {
            ShiftSpec::HaarMultiplier { sign, residue } => {
                let s = haar_multiplier(&uniform_signs(model, model.depth(), sign), model)?;
                match residue {
                    Some(r) => s.separate(r),
                    None => Ok(s),
                }
            }
            ShiftSpec::Petermichl { sign, residue } => {
                let s = petermichl_shift(&uniform_signs(model, model.depth().saturating_sub(1), sign), model)?;
                match residue {
                    Some(r) => s.separate(r),
                    None => Ok(s),
                }
            }
            ShiftSpec::Random { m, n, residue, seed } => random_shift(ComplexityType::new(m, n), residue, seed, model),
        }
    }

    pub fn kappa(&self) -> u32 {
        match *self {
            ShiftSpec::HaarMultiplier { .. } => 2,
            ShiftSpec::Petermichl { .. } => 3,
            ShiftSpec::Random { m, n, .. } => ComplexityType::new(m, n).kappa(),
        }
    }

    /// The same family with its seed replaced, where it has one.
    pub fn with_seed(&self, seed: u64) -> ShiftSpec {
        match self.clone() {
            ShiftSpec::Random { m, n, residue, .. } => ShiftSpec::Random { m, n, residue, seed },
            other => other,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ShiftSpec::Random { seed, .. } => *seed,
            _ => 0,
        }
    }
}

/// A weight family; the sweep parameter is interpreted per family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightSpec {
    /// Parameter: the exponent `α` of `|x₁|^α`.
    Power,
    /// Parameter: the target A₂ constant.
    Cascade {
        #[serde(default)]
        seed: u64,
    },
    /// Parameter: the cascade amplitude.
    CascadeAmplitude {
        #[serde(default)]
        seed: u64,
    },
}

impl WeightSpec {
    pub fn build(&self, param: f64, model: FiniteModel) -> Result<Weight> {
        match *self {
            WeightSpec::Power => power_weight(param, model),
            WeightSpec::Cascade { seed } => random_a2_weight(param, seed, model),
            WeightSpec::CascadeAmplitude { seed } => cascade_weight(param, seed, model),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            WeightSpec::Power => 0,
            WeightSpec::Cascade { seed } | WeightSpec::CascadeAmplitude { seed } => *seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> WeightSpec {
        match self {
            WeightSpec::Power => WeightSpec::Power,
            WeightSpec::Cascade { .. } => WeightSpec::Cascade { seed },
            WeightSpec::CascadeAmplitude { .. } => WeightSpec::CascadeAmplitude { seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub a2: f64,
    pub norm: f64,
    pub kappa: u32,
    pub d: u32,
    #[serde(rename = "N")]
    pub depth: u32,
    pub shift_id: String,
    pub seed: u64,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn sweep_row(shift: &std::result::Result<HaarShift, LabError>, spec: &ShiftSpec, weights: &WeightSpec, param: f64, model: FiniteModel) -> SweepRow {
    let mut row = SweepRow {
        param,
        a2: f64::NAN,
        norm: f64::NAN,
        kappa: spec.kappa(),
        d: model.dim(),
        depth: model.depth(),
        shift_id: String::new(),
        seed: weights.seed(),
        residual: f64::NAN,
        error: None,
    };
    let run = || -> Result<(f64, NormResult, String)> {
        let shift = shift.as_ref().map_err(Clone::clone)?;
        let w = weights.build(param, model)?;
        let a2 = a2_constant(&w).constant;
        Ok((a2, weighted_norm(shift, &w)?, shift.id()))
    };
    match run() {
        Ok((a2, n, id)) => {
            row.a2 = a2;
            row.norm = n.value;
            row.residual = n.residual;
            row.shift_id = id;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// One row per parameter, in parameter order, computed on up to `jobs`
/// worker threads (`None` uses the global pool). Failures are recorded in
/// their row.
pub fn a2_sweep(
    shift: &ShiftSpec,
    weights: &WeightSpec,
    params: &[f64],
    model: FiniteModel,
    jobs: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if params.is_empty() {
        return Err(LabError::InsufficientData("empty parameter list".into()));
    }
    let built = shift.build(model);
    let work = || -> Vec<SweepRow> {
        params
            .par_iter()
            .map(|&p| sweep_row(&built, shift, weights, p, model))
            .collect()
    };
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| LabError::InvalidParameter(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Default lower cutoff on `[w]_{A₂}` for slope fits.
pub const FIT_A2_MIN: f64 = 10.0;

/// Least squares fit of `log(norm)` against `log(a2)` over successful rows
/// with `a2 >= a2_min` and positive norm.
pub fn fit_slope(rows: &[SweepRow], a2_min: f64) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.is_ok() && r.a2 >= a2_min && r.norm > 0.0)
        .map(|r| (r.a2.ln(), r.norm.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(LabError::InsufficientData(format!(
            "{} usable rows with a2 >= {a2_min}, need 3",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(LabError::InsufficientData("all rows share one a2 value".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        points: pts.len(),
    })
}

/// `‖S‖_{σ→w} / (κ [w]_{A₂})`.
pub fn linear_bound_constant(norm: f64, kappa: u32, a2: f64) -> f64 {
    norm / (kappa as f64 * a2)
}

/// CSV header of sweep output.
pub const CSV_HEADER: [&str; 9] = ["param", "a2", "norm", "kappa", "d", "N", "shift_id", "seed", "residual"];

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

impl SweepRow {
    pub fn csv_record(&self) -> [String; 9] {
        [
            fmt_num(self.param),
            fmt_num(self.a2),
            fmt_num(self.norm),
            self.kappa.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.shift_id.clone(),
            self.seed.to_string(),
            fmt_num(self.residual),
        ]
    }
}

/// Seeded test functions `f`, `g` with leaf values uniform in `[-1, 1)`.
pub fn random_pair(model: FiniteModel, seed: u64) -> (StepFunction, StepFunction) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        StepFunction::from_values(model, (0..model.n_leaves()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("length matches")
    };
    (draw(), draw())
}
