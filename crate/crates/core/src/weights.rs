//! A2 weights on the finite model.
//!
//! A [`Weight`] stores `w` together with `σ = 1/w`. Leaf values are paired
//! so that `w * σ == 1.0` holds exactly in `f64`: when the rounded
//! reciprocal misses, `w` is nudged by a few ulps until an exact pair
//! exists. The A2 characteristic is the supremum over the *dyadic* cubes of
//! the model only; it is not the continuum constant.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{CubeId, FiniteModel, Measure, Pyramid, StepFunction};

/// Largest cascade amplitude; factors stay in `[1 - A, 1 + A]`.
const MAX_CASCADE_AMPLITUDE: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "lowercase")]
pub enum WeightFamily {
    Power { alpha: f64 },
    Cascade { target: Option<f64>, amplitude: f64, seed: u64 },
    Explicit {},
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weight {
    w: StepFunction,
    sigma: StepFunction,
    family: WeightFamily,
}

/// Returns `(w', s)` with `w'` within a few ulps of `x` and `w' * s == 1.0`.
fn reciprocal_pair(x: f64) -> (f64, f64) {
    let mut w = x;
    for step in 0..64 {
        let s = 1.0 / w;
        for cand in [s, s.next_up(), s.next_down(), s.next_up().next_up(), s.next_down().next_down()] {
            if w * cand == 1.0 {
                return (w, cand);
            }
        }
        // Alternate around the requested value: x+1ulp, x-1ulp, x+2ulp, ...
        w = x;
        let k = step / 2 + 1;
        for _ in 0..k {
            w = if step % 2 == 0 { w.next_up() } else { w.next_down() };
        }
    }
    unreachable!("no exact reciprocal pair near {x}")
}

impl Weight {
    /// Builds a weight from a strictly positive density.
    pub fn from_density(w: StepFunction) -> Result<Self> {
        Self::with_family(w, WeightFamily::Explicit {})
    }

    fn with_family(w: StepFunction, family: WeightFamily) -> Result<Self> {
        let model = w.model();
        let mut wv = Vec::with_capacity(model.n_leaves());
        let mut sv = Vec::with_capacity(model.n_leaves());
        for (leaf, &value) in w.values().iter().enumerate() {
            if !(value.is_finite() && value > 0.0) || !(1.0 / value).is_finite() || 1.0 / value == 0.0 {
                return Err(LabError::NonPositiveDensity { leaf, value });
            }
            let (a, b) = reciprocal_pair(value);
            wv.push(a);
            sv.push(b);
        }
        Ok(Self {
            w: StepFunction::from_values(model, wv)?,
            sigma: StepFunction::from_values(model, sv)?,
            family,
        })
    }

    pub fn constant(model: FiniteModel, c: f64) -> Result<Self> {
        Self::from_density(StepFunction::constant(model, c))
    }

    pub fn model(&self) -> FiniteModel {
        self.w.model()
    }

    pub fn w(&self) -> &StepFunction {
        &self.w
    }

    pub fn sigma(&self) -> &StepFunction {
        &self.sigma
    }

    pub fn family(&self) -> &WeightFamily {
        &self.family
    }

    pub fn w_measure(&self) -> Measure {
        Measure::from_density(self.w.clone()).expect("weights are positive")
    }

    pub fn sigma_measure(&self) -> Measure {
        Measure::from_density(self.sigma.clone()).expect("weights are positive")
    }

    /// True when every stored leaf pair multiplies to exactly one.
    pub fn is_exact_pair(&self) -> bool {
        self.w
            .values()
            .iter()
            .zip(self.sigma.values())
            .all(|(a, b)| a * b == 1.0)
    }

    /// `c * w`; the A2 constant is unchanged.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_density(self.w.scale(c))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.family).expect("family serializes");
        let obj = v.as_object_mut().expect("tagged enum is an object");
        obj.insert("d".into(), self.model().dim().into());
        obj.insert("N".into(), self.model().depth().into());
        obj.insert("values".into(), serde_json::to_value(self.w.values()).unwrap());
        v
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let f = StepFunction::from_json(value)?;
        let family: WeightFamily = serde_json::from_value(value.clone())
            .map_err(|e| LabError::Serialization(e.to_string()))?;
        Self::with_family(f, family)
    }
}

/// The weight whose density is `σ` and whose dual is `w`.
pub fn dual_weight(w: &Weight) -> Weight {
    Weight {
        w: w.sigma.clone(),
        sigma: w.w.clone(),
        family: WeightFamily::Explicit {},
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2Report {
    pub constant: f64,
    #[serde(rename = "argmax")]
    pub argmax_cube: CubeId,
}

/// `(w(Q)/|Q|)·(σ(Q)/|Q|)` for every cube, per generation.
pub fn a2_products(w: &Weight) -> Vec<Vec<f64>> {
    let model = w.model();
    let wp = Pyramid::integrals(model, |i| w.w.values()[i]);
    let sp = Pyramid::integrals(model, |i| w.sigma.values()[i]);
    (0..=model.depth())
        .map(|g| {
            let vol = crate::grid::cube_volume(model.dim(), g);
            wp.level(g)
                .iter()
                .zip(sp.level(g))
                .map(|(a, b)| (a / vol) * (b / vol))
                .collect()
        })
        .collect()
}

/// The dyadic A2 characteristic: the largest product of averages over all
/// cubes of the model. Ties go to the coarsest, then lexicographically
/// smallest, cube.
pub fn a2_constant(w: &Weight) -> A2Report {
    let model = w.model();
    let mut best = (f64::NEG_INFINITY, model.root());
    for (g, level) in a2_products(w).iter().enumerate() {
        for (i, &p) in level.iter().enumerate() {
            if p > best.0 {
                best = (p, model.cube(g as u32, i));
            }
        }
    }
    A2Report {
        constant: best.0,
        argmax_cube: best.1,
    }
}

/// Mean of `t^alpha` over `[a, b)`, `0 <= a < b`.
fn power_mean(alpha: f64, a: f64, b: f64) -> f64 {
    let p = alpha + 1.0;
    if a == 0.0 {
        return b.powf(alpha) / p;
    }
    // a^p ((b/a)^p - 1) / (p (b - a)), written to avoid cancellation.
    a.powf(p) * (p * ((b - a) / a).ln_1p()).exp_m1() / (p * (b - a))
}

/// `w(x) = x_1^alpha`, discretized by exact leaf means.
pub fn power_weight(alpha: f64, model: FiniteModel) -> Result<Weight> {
    if !(alpha.abs() < 1.0) {
        return Err(LabError::InvalidParameter(format!(
            "power weight exponent must satisfy |alpha| < 1, got {alpha}"
        )));
    }
    let h = crate::grid::cube_volume(1, model.depth());
    let values = (0..model.n_leaves())
        .map(|leaf| {
            let q = model.cube(model.depth(), leaf);
            let a = q.position()[0] as f64 * h;
            if alpha == 0.0 {
                1.0
            } else {
                power_mean(alpha, a, a + h)
            }
        })
        .collect();
    Weight::with_family(
        StepFunction::from_values(model, values)?,
        WeightFamily::Power { alpha },
    )
}

/// Random generator for one cube, independent of the model depth.
pub(crate) fn cube_rng(seed: u64, q: &CubeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(q.global_index());
    rng
}

/// Mean-zero child directions with largest entry of modulus one.
fn cascade_directions(seed: u64, q: &CubeId) -> Vec<f64> {
    let mut rng = cube_rng(seed, q);
    let k = 1usize << q.dim();
    let u: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mean = u.iter().sum::<f64>() / k as f64;
    let v: Vec<f64> = u.iter().map(|x| x - mean).collect();
    let top = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if top == 0.0 {
        return vec![0.0; k];
    }
    v.iter().map(|x| x / top).collect()
}

/// Multiplicative cascade with fixed amplitude `a ∈ [0, 1)`: every cube
/// splits its value among its children by factors `1 + a·v_i` with a
/// seeded mean-zero direction `v`.
pub fn cascade_weight(amplitude: f64, seed: u64, model: FiniteModel) -> Result<Weight> {
    let w = cascade_density(amplitude, seed, model)?;
    Weight::with_family(
        w,
        WeightFamily::Cascade {
            target: None,
            amplitude,
            seed,
        },
    )
}

fn cascade_density(amplitude: f64, seed: u64, model: FiniteModel) -> Result<StepFunction> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(LabError::InvalidParameter(format!(
            "cascade amplitude must lie in [0, 1), got {amplitude}"
        )));
    }
    let mut level = vec![1.0f64];
    for g in 0..model.depth() {
        let mut next = vec![0.0; model.cubes_in_generation(g + 1)];
        for (i, &value) in level.iter().enumerate() {
            let q = model.cube(g, i);
            let dirs = cascade_directions(seed, &q);
            for (local, v) in dirs.iter().enumerate() {
                next[model.descendant_index(&q, 1, local)] = value * (1.0 + amplitude * v);
            }
        }
        level = next;
    }
    StepFunction::from_values(model, level)
}

/// Seeded cascade whose dyadic A2 constant lies within a factor 4 of
/// `target`. The amplitude is found by bisection with the random directions
/// held fixed.
pub fn random_a2_weight(target: f64, seed: u64, model: FiniteModel) -> Result<Weight> {
    if !(target >= 1.0) || !target.is_finite() {
        return Err(LabError::InvalidParameter(format!("A2 target must be >= 1, got {target}")));
    }
    let family = |amplitude| WeightFamily::Cascade {
        target: Some(target),
        amplitude,
        seed,
    };
    if target == 1.0 {
        return Weight::with_family(StepFunction::constant(model, 1.0), family(0.0));
    }
    let eval = |a: f64| -> Result<(f64, StepFunction)> {
        let density = cascade_density(a, seed, model)?;
        let weight = Weight::from_density(density.clone())?;
        Ok((a2_constant(&weight).constant, density))
    };
    let (top, top_density) = eval(MAX_CASCADE_AMPLITUDE)?;
    if top < target / 4.0 {
        return Err(LabError::UnreachableTarget { target, best: top });
    }
    let (mut lo, mut hi) = (0.0f64, MAX_CASCADE_AMPLITUDE);
    let mut best = (top, MAX_CASCADE_AMPLITUDE, top_density);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (a2, density) = eval(mid)?;
        if (a2 / target).ln().abs() < (best.0 / target).ln().abs() {
            best = (a2, mid, density);
        }
        if a2 < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (a2 / target).ln().abs() < 1e-3 {
            break;
        }
    }
    if !(best.0 >= target / 4.0 && best.0 <= target * 4.0) {
        return Err(LabError::UnreachableTarget { target, best: best.0 });
    }
    Weight::with_family(best.2, family(best.1))
}
