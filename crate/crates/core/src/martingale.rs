//! Weighted conditional expectations and `κ`-step martingale differences.

use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::grid::{average, average_pyramid, spread_level, CubeId, FiniteModel, Measure, Pyramid, StepFunction};
use crate::shift::HaarShift;

/// Cubes lighter than this are rejected when building a ladder.
pub const MASS_FLOOR: f64 = 1e-300;

/// The generations `residue, residue + κ, …` that still have `κ`-step
/// descendants inside the model, with a fixed measure.
#[derive(Clone, Debug)]
pub struct MartingaleLadder {
    measure: Measure,
    masses: Pyramid,
    kappa: u32,
    residue: u32,
    generations: Vec<u32>,
}

impl MartingaleLadder {
    pub fn new(measure: Measure, kappa: u32, residue: u32) -> Result<Self> {
        if kappa == 0 {
            return Err(LabError::InvalidParameter("kappa must be positive".into()));
        }
        let model = measure.model();
        let depth = model.depth();
        let generations: Vec<u32> = (0..)
            .map(|j| residue + j * kappa)
            .take_while(|&g| g + kappa <= depth)
            .collect();
        if generations.is_empty() {
            return Err(LabError::InvalidParameter(format!(
                "empty ladder: residue {residue} with kappa {kappa} at depth {depth}"
            )));
        }
        let masses = measure.masses();
        for g in 0..=depth {
            if let Some(i) = masses.level(g).iter().position(|&m| !(m >= MASS_FLOOR)) {
                return Err(LabError::DegenerateMeasure(model.cube(g, i)));
            }
        }
        Ok(Self {
            measure,
            masses,
            kappa,
            residue,
            generations,
        })
    }

    pub fn model(&self) -> FiniteModel {
        self.measure.model()
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn residue(&self) -> u32 {
        self.residue
    }

    pub fn generations(&self) -> &[u32] {
        &self.generations
    }

    pub fn contains(&self, q: &CubeId) -> bool {
        self.generations.binary_search(&q.generation()).is_ok()
            && self.model().check_cube(q).is_ok()
    }

    pub fn cubes(&self) -> impl Iterator<Item = CubeId> + '_ {
        let model = self.model();
        self.generations.iter().flat_map(move |&g| (0..model.cubes_in_generation(g)).map(move |i| model.cube(g, i)))
    }

    pub fn n_cubes(&self) -> usize {
        self.generations.iter().map(|&g| self.model().cubes_in_generation(g)).sum()
    }

    pub fn mass(&self, q: &CubeId) -> f64 {
        self.masses.get(q)
    }

    /// The generation where the final refinement term starts.
    pub fn bottom(&self) -> u32 {
        self.generations.last().unwrap() + self.kappa
    }

    fn check(&self, f: &StepFunction) -> Result<()> {
        if f.model() != self.model() {
            return Err(LabError::ModelMismatch);
        }
        Ok(())
    }

    /// `D_Q f` as values on the `κ`-step descendants of `q`, read from a
    /// pyramid of `μ`-averages of `f`.
    pub fn local_difference(&self, averages: &Pyramid, q: &CubeId) -> Vec<f64> {
        let model = self.model();
        let level = averages.level(q.generation() + self.kappa);
        let mean = averages.get(q);
        (0..1usize << (model.dim() * self.kappa))
            .map(|k| level[model.descendant_index(q, self.kappa, k)] - mean)
            .collect()
    }

    /// Descendant step used for a shift block at `q`: `κ` on the ladder,
    /// and the distance to the leaves for residue-class cubes below it
    /// (zero for a leaf, where the difference vanishes).
    pub fn block_step(&self, q: &CubeId) -> Result<u32> {
        let g = q.generation();
        let depth = self.model().depth();
        if g < self.residue || (g - self.residue) % self.kappa != 0 || g > depth {
            return Err(LabError::NotOnLadder(*q));
        }
        Ok(self.kappa.min(depth - g))
    }

    /// Like [`Self::local_difference`] with an explicit step.
    pub fn local_difference_step(&self, averages: &Pyramid, q: &CubeId, step: u32) -> Vec<f64> {
        let model = self.model();
        let level = averages.level(q.generation() + step);
        let mean = averages.get(q);
        (0..1usize << (model.dim() * step))
            .map(|k| level[model.descendant_index(q, step, k)] - mean)
            .collect()
    }

    /// `‖D_Q f‖²_μ` from the local values.
    pub fn local_energy(&self, q: &CubeId, local: &[f64]) -> f64 {
        let model = self.model();
        let level = self.masses.level(q.generation() + self.kappa);
        local
            .iter()
            .enumerate()
            .map(|(k, v)| v * v * level[model.descendant_index(q, self.kappa, k)])
            .sum()
    }
}

/// `𝔼^μ_q f · 𝟙_q`.
pub fn expectation(f: &StepFunction, mu: &Measure, q: &CubeId) -> Result<StepFunction> {
    let a = average(f, mu, q)?;
    Ok(StepFunction::indicator(f.model(), q)?.scale(a))
}

/// Conditional expectation onto generation `g`.
pub fn conditional_expectation(f: &StepFunction, mu: &Measure, g: u32) -> Result<StepFunction> {
    let averages = average_pyramid(f, mu)?;
    Ok(spread_level(f.model(), g, averages.level(g)))
}

/// Writes `local` (indexed by the `below`-step descendants of `q`) into a
/// leaf-level function that vanishes off `q`.
pub fn spread_local(model: FiniteModel, q: &CubeId, below: u32, local: &[f64]) -> StepFunction {
    let mut out = StepFunction::zeros(model);
    for (k, cell) in q.descendants(below).iter().enumerate() {
        for leaf in model.cube_leaves(cell).expect("descendant inside the model") {
            out.values_mut()[leaf] = local[k];
        }
    }
    out
}

/// `D^μ_q f = Σ_{Q'} 𝔼^μ_{Q'} f 𝟙_{Q'} - 𝔼^μ_q f 𝟙_q` over the `κ`-step
/// descendants `Q'` of `q`.
pub fn difference(f: &StepFunction, ladder: &MartingaleLadder, q: &CubeId) -> Result<StepFunction> {
    ladder.check(f)?;
    if !ladder.contains(q) {
        return Err(LabError::NotOnLadder(*q));
    }
    let model = ladder.model();
    let mu = ladder.measure();
    let mean = average(f, mu, q)?;
    let local: Vec<f64> = q
        .descendants(ladder.kappa)
        .iter()
        .map(|c| average(f, mu, c).map(|a| a - mean))
        .collect::<Result<_>>()?;
    Ok(spread_local(model, q, ladder.kappa, &local))
}

/// `D^μ_q f` with step [`MartingaleLadder::block_step`]; agrees with
/// [`difference`] on the ladder.
pub fn block_difference(f: &StepFunction, ladder: &MartingaleLadder, q: &CubeId) -> Result<StepFunction> {
    ladder.check(f)?;
    let step = ladder.block_step(q)?;
    let mu = ladder.measure();
    let mean = average(f, mu, q)?;
    let local: Vec<f64> = q
        .descendants(step)
        .iter()
        .map(|c| average(f, mu, c).map(|a| a - mean))
        .collect::<Result<_>>()?;
    Ok(spread_local(ladder.model(), q, step, &local))
}

/// One martingale difference, stored by its values on the `κ`-step
/// descendants of its cube.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDifference {
    pub cube: CubeId,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub coarse: StepFunction,
    pub differences: BTreeMap<CubeId, LocalDifference>,
    pub refinement: StepFunction,
    kappa: u32,
}

impl Decomposition {
    pub fn difference_function(&self, q: &CubeId) -> Option<StepFunction> {
        let model = self.coarse.model();
        self.differences
            .get(q)
            .map(|d| spread_local(model, &d.cube, self.kappa, &d.values))
    }

    /// `coarse + Σ_Q D_Q f + refinement`.
    pub fn reconstruct(&self) -> StepFunction {
        let model = self.coarse.model();
        let mut out = self.coarse.clone();
        for d in self.differences.values() {
            for (k, cell) in d.cube.descendants(self.kappa).iter().enumerate() {
                for leaf in model.cube_leaves(cell).expect("descendant inside the model") {
                    out.values_mut()[leaf] += d.values[k];
                }
            }
        }
        out.add(&self.refinement).expect("same model")
    }
}

/// Splits `f` into the conditional expectation at the top ladder
/// generation, one difference per ladder cube, and the remainder below the
/// last full `κ`-step.
pub fn decompose(f: &StepFunction, ladder: &MartingaleLadder) -> Result<Decomposition> {
    ladder.check(f)?;
    let model = ladder.model();
    let averages = average_pyramid(f, ladder.measure())?;
    let top = ladder.generations[0];
    let coarse = spread_level(model, top, averages.level(top));
    let differences = ladder
        .cubes()
        .map(|q| {
            let values = ladder.local_difference(&averages, &q);
            (q, LocalDifference { cube: q, values })
        })
        .collect();
    let bottom = ladder.bottom();
    let refinement = f.sub(&spread_level(model, bottom, averages.level(bottom)))?;
    Ok(Decomposition {
        coarse,
        differences,
        refinement,
        kappa: ladder.kappa,
    })
}

/// `‖f‖²_μ - Σ_Q ‖D_Q f‖²_μ`.
pub fn bessel_gap(f: &StepFunction, ladder: &MartingaleLadder) -> Result<f64> {
    ladder.check(f)?;
    let averages = average_pyramid(f, ladder.measure())?;
    let total = crate::grid::inner_product(f, f, ladder.measure())?;
    let energy: f64 = ladder
        .cubes()
        .map(|q| ladder.local_energy(&q, &ladder.local_difference(&averages, &q)))
        .sum();
    Ok(total - energy)
}

/// Largest discrepancy, over the blocks of `shift`, in
/// `∫ s_Q f σ = 𝔼^σ_Q f ∫ s_Q σ + ∫ s_Q D^σ_Q f σ`, relative to
/// `1 + |lhs|` in the sup norm. The ladder measure plays the role of `σ`.
pub fn complexity_identity_residual(
    shift: &HaarShift,
    f: &StepFunction,
    ladder: &MartingaleLadder,
) -> Result<f64> {
    ladder.check(f)?;
    if shift.model() != ladder.model() {
        return Err(LabError::ModelMismatch);
    }
    let model = ladder.model();
    let sigma = ladder.measure().density();
    let fs = f.mul(sigma)?;
    let mut worst = 0.0f64;
    for q in shift.block_cubes() {
        let mean = average(f, ladder.measure(), q)?;
        let lhs = shift.apply_block(q, &fs)?;
        let flat = shift.apply_block(q, &StepFunction::indicator(model, q)?.mul(sigma)?)?;
        let diff = shift.apply_block(q, &block_difference(f, ladder, q)?.mul(sigma)?)?;
        for i in 0..model.n_leaves() {
            let l = lhs.values()[i];
            let r = mean * flat.values()[i] + diff.values()[i];
            worst = worst.max((l - r).abs() / (1.0 + l.abs()));
        }
    }
    Ok(worst)
}
