//! Stopping cubes, the Carleson packing estimate, and the corona splitting
//! of the weighted bilinear form `⟨S(fσ), g⟩_w`.
//!
//! Throughout, `𝒟_κ` is the set of cubes whose generation lies in
//! `residue + κℕ` and is strictly below the model depth; these are exactly
//! the cubes that can carry a block of a separated shift.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{average_pyramid, inner_product, maximal_function, norm, CubeId, FiniteModel, Pyramid, StepFunction};
use crate::martingale::MASS_FLOOR;
use crate::shift::HaarShift;
use crate::weights::{a2_constant, Weight};

/// Jump factor for stopping cubes.
pub const STOPPING_THRESHOLD: f64 = 4.0;

/// Relative tolerance of the exact decomposition identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// Cubes of `𝒟_κ` in generation order.
pub fn ladder_cubes(model: FiniteModel, kappa: u32, residue: u32) -> Vec<CubeId> {
    (residue..model.depth())
        .step_by(kappa as usize)
        .flat_map(|g| (0..model.cubes_in_generation(g)).map(move |i| model.cube(g, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoppingForest {
    model: FiniteModel,
    kappa: u32,
    residue: u32,
    threshold: f64,
    /// Stopping cube to its stopping parent (`None` for roots).
    parents: BTreeMap<CubeId, Option<CubeId>>,
    rho: BTreeMap<CubeId, f64>,
    corona: BTreeMap<CubeId, Vec<CubeId>>,
    roots: Vec<CubeId>,
}

#[derive(Serialize)]
struct ForestEntry {
    cube: CubeId,
    rho: f64,
    parent: Option<CubeId>,
    corona_size: usize,
}

impl StoppingForest {
    pub fn model(&self) -> FiniteModel {
        self.model
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn residue(&self) -> u32 {
        self.residue
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn cubes(&self) -> impl Iterator<Item = &CubeId> {
        self.rho.keys()
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn rho(&self, f: &CubeId) -> Option<f64> {
        self.rho.get(f).copied()
    }

    pub fn stopping_parent(&self, f: &CubeId) -> Option<CubeId> {
        self.parents.get(f).copied().flatten()
    }

    pub fn corona(&self, f: &CubeId) -> &[CubeId] {
        self.corona.get(f).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn roots(&self) -> &[CubeId] {
        &self.roots
    }

    /// The minimal stopping cube containing `q`.
    pub fn owner(&self, q: &CubeId) -> Option<CubeId> {
        (self.residue..=q.generation())
            .rev()
            .step_by(self.kappa as usize)
            .filter_map(|g| q.ancestor(g))
            .find(|a| self.rho.contains_key(a))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<ForestEntry> = self
            .rho
            .iter()
            .map(|(q, r)| ForestEntry {
                cube: *q,
                rho: *r,
                parent: self.stopping_parent(q),
                corona_size: self.corona(q).len(),
            })
            .collect();
        serde_json::json!({
            "d": self.model.dim(),
            "N": self.model.depth(),
            "kappa": self.kappa,
            "residue": self.residue,
            "threshold": self.threshold,
            "cubes": self.rho.keys().collect::<Vec<_>>(),
            "stopping": entries,
        })
    }
}

fn abs_sigma_averages(f: &StepFunction, w: &Weight) -> Result<Pyramid> {
    average_pyramid(&f.abs(), &w.sigma_measure())
}

fn check_masses(model: FiniteModel, masses: &Pyramid) -> Result<()> {
    for g in 0..=model.depth() {
        if let Some(i) = masses.level(g).iter().position(|&m| !(m >= MASS_FLOOR)) {
            return Err(LabError::DegenerateMeasure(model.cube(g, i)));
        }
    }
    Ok(())
}

/// Stopping cubes for `f` with the default threshold.
pub fn build_stopping_cubes(f: &StepFunction, w: &Weight, kappa: u32, residue: u32) -> Result<StoppingForest> {
    build_stopping_cubes_with(f, w, kappa, residue, STOPPING_THRESHOLD)
}

/// Roots are the cubes of generation `residue`. Below a stopping cube `F`,
/// the stopping children are the maximal `Q ∈ 𝒟_κ`, `Q ⊊ F`, with
/// `𝔼^σ_Q|f| > threshold · 𝔼^σ_F|f|`; every other cube joins the corona of
/// its minimal stopping ancestor.
pub fn build_stopping_cubes_with(
    f: &StepFunction,
    w: &Weight,
    kappa: u32,
    residue: u32,
    threshold: f64,
) -> Result<StoppingForest> {
    let model = f.model();
    if w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    if kappa == 0 || residue >= model.depth() {
        return Err(LabError::InvalidParameter(format!(
            "kappa {kappa} and residue {residue} leave no cubes at depth {}",
            model.depth()
        )));
    }
    if f.is_zero() {
        return Err(LabError::DegenerateFunction);
    }
    check_masses(model, &w.sigma_measure().masses())?;
    let averages = abs_sigma_averages(f, w)?;
    let depth = model.depth();
    let mut parents = BTreeMap::new();
    let mut rho = BTreeMap::new();
    let mut corona: BTreeMap<CubeId, Vec<CubeId>> = BTreeMap::new();
    let roots: Vec<CubeId> = model.generation_cubes(residue).collect();
    // (cube, owning stopping cube)
    let mut stack: Vec<(CubeId, CubeId)> = Vec::new();
    for &r in roots.iter().rev() {
        parents.insert(r, None);
        rho.insert(r, averages.get(&r));
        stack.push((r, r));
    }
    while let Some((q, owner)) = stack.pop() {
        corona.entry(owner).or_default().push(q);
        if q.generation() + kappa >= depth {
            continue;
        }
        let bar = threshold * rho[&owner];
        for c in q.descendants(kappa).into_iter().rev() {
            let a = averages.get(&c);
            if a > bar {
                parents.insert(c, Some(owner));
                rho.insert(c, a);
                stack.push((c, c));
            } else {
                stack.push((c, owner));
            }
        }
    }
    for cubes in corona.values_mut() {
        cubes.sort();
    }
    Ok(StoppingForest {
        model,
        kappa,
        residue,
        threshold,
        parents,
        rho,
        corona,
        roots,
    })
}

/// Violation counts for the defining properties of a forest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForestAudit {
    /// Cubes of `𝒟_κ` not in exactly one corona.
    pub partition: usize,
    /// Corona cubes that are not inside their stopping cube, or whose
    /// minimal stopping ancestor is another cube.
    pub minimality: usize,
    /// Corona cubes with `𝔼^σ_Q|f| > threshold · ρ(F)`.
    pub corona_bound: usize,
    /// Non-root stopping cubes with `ρ(F) <= threshold · ρ(π(F))`.
    pub threshold: usize,
    /// Stopping cubes whose stored `ρ` differs from the recomputed average.
    pub rho: usize,
    pub ladder_cubes: usize,
    pub stopping_cubes: usize,
}

impl ForestAudit {
    pub fn is_clean(&self) -> bool {
        self.partition + self.minimality + self.corona_bound + self.threshold + self.rho == 0
    }
}

/// Rechecks the stopping conditions from scratch.
pub fn audit_forest(forest: &StoppingForest, f: &StepFunction, w: &Weight) -> Result<ForestAudit> {
    let model = forest.model;
    if f.model() != model || w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    let averages = abs_sigma_averages(f, w)?;
    let all = ladder_cubes(model, forest.kappa, forest.residue);
    let mut audit = ForestAudit {
        ladder_cubes: all.len(),
        stopping_cubes: forest.len(),
        ..Default::default()
    };
    let mut seen: BTreeMap<CubeId, usize> = BTreeMap::new();
    for (owner, cubes) in &forest.corona {
        let bar = forest.threshold * forest.rho[owner];
        for q in cubes {
            *seen.entry(*q).or_default() += 1;
            if !owner.contains(q) || forest.owner(q) != Some(*owner) {
                audit.minimality += 1;
            }
            if averages.get(q) > bar {
                audit.corona_bound += 1;
            }
        }
    }
    audit.partition = all.iter().filter(|q| seen.get(q) != Some(&1)).count() + seen.len().saturating_sub(all.len());
    for (q, r) in &forest.rho {
        if *r != averages.get(q) {
            audit.rho += 1;
        }
        if let Some(p) = forest.stopping_parent(q) {
            if !(*r > forest.threshold * forest.rho[&p]) {
                audit.threshold += 1;
            }
        }
    }
    Ok(audit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarlesonReport {
    /// `Σ_F ρ(F)² σ(F) / ‖f‖²_σ`.
    pub packing: f64,
    /// `‖Σ_F ρ(F) 𝟙_F‖²_σ / ‖f‖²_σ`.
    pub overlap: f64,
    /// `Σ_F 𝔼^σ_F|f|² σ(F) / ‖f‖²_σ`.
    pub packing_squared: f64,
}

pub fn carleson_check(forest: &StoppingForest, f: &StepFunction, w: &Weight) -> Result<CarlesonReport> {
    let model = forest.model;
    if f.model() != model || w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    let sigma = w.sigma_measure();
    let averages = abs_sigma_averages(f, w)?;
    for (q, r) in &forest.rho {
        if *r != averages.get(q) {
            return Err(LabError::InvalidParameter(format!(
                "forest was not built from this function (cube {q})"
            )));
        }
    }
    let energy = inner_product(f, f, &sigma)?;
    let masses = sigma.masses();
    let sq = average_pyramid(&f.map(|v| v * v), &sigma)?;
    let mut packing = 0.0;
    let mut packing_squared = 0.0;
    let mut phi = vec![0.0; model.n_leaves()];
    for (q, r) in &forest.rho {
        let m = masses.get(q);
        packing += r * r * m;
        packing_squared += sq.get(q) * m;
        for leaf in model.cube_leaves(q)? {
            phi[leaf] += r;
        }
    }
    let phi = StepFunction::from_values(model, phi)?;
    Ok(CarlesonReport {
        packing: packing / energy,
        overlap: inner_product(&phi, &phi, &sigma)? / energy,
        packing_squared: packing_squared / energy,
    })
}

/// Per-block pieces of the bilinear form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTerms {
    pub cube: CubeId,
    /// `𝔼^σ_Q f`.
    pub mean_f: f64,
    /// `𝔼^w_Q g`.
    pub mean_g: f64,
    /// `∬ s_Q σ(dy) w(dx)`.
    pub flat: f64,
    pub vtilde: f64,
    pub v: f64,
    pub vstar: f64,
    pub w: f64,
    pub u: f64,
    /// `‖D^σ_Q f‖_σ`.
    pub df_norm: f64,
    /// `‖D^w_Q g‖_w`.
    pub dg_norm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BilinearReport {
    pub total: f64,
    pub U: f64,
    pub Vstar: f64,
    pub W: f64,
    pub V: f64,
    pub Vtilde: f64,
    pub I: f64,
    pub II: f64,
}

impl BilinearReport {
    /// `|total - (U + V* + W)| / (1 + |total|)`.
    pub fn identity_error(&self) -> f64 {
        (self.total - (self.U + self.Vstar + self.W)).abs() / (1.0 + self.total.abs())
    }

    /// `|U - (Ṽ + V)| / (1 + |U|)`.
    pub fn u_error(&self) -> f64 {
        (self.U - (self.Vtilde + self.V)).abs() / (1.0 + self.U.abs())
    }
}

fn require_separated(shift: &HaarShift) -> Result<u32> {
    shift.residue().ok_or_else(|| {
        LabError::NotSeparated(format!(
            "block generations span several residues mod {}",
            shift.kappa()
        ))
    })
}

struct FormData {
    f_int: Pyramid,
    sigma_mass: Pyramid,
    g_int: Pyramid,
    w_mass: Pyramid,
}

impl FormData {
    fn new(f: &StepFunction, g: &StepFunction, w: &Weight) -> Result<Self> {
        let model = f.model();
        if g.model() != model || w.model() != model {
            return Err(LabError::ModelMismatch);
        }
        let (fv, gv) = (f.values(), g.values());
        let (wv, sv) = (w.w().values(), w.sigma().values());
        let sigma_mass = w.sigma_measure().masses();
        let w_mass = w.w_measure().masses();
        check_masses(model, &sigma_mass)?;
        check_masses(model, &w_mass)?;
        Ok(Self {
            f_int: Pyramid::integrals(model, |i| fv[i] * sv[i]),
            sigma_mass,
            g_int: Pyramid::integrals(model, |i| gv[i] * wv[i]),
            w_mass,
        })
    }

    fn mean_f(&self, q: &CubeId) -> f64 {
        self.f_int.get(q) / self.sigma_mass.get(q)
    }

    fn mean_g(&self, q: &CubeId) -> f64 {
        self.g_int.get(q) / self.w_mass.get(q)
    }

    /// `‖D_Q‖²` for a step-`s` difference from integral and mass pyramids.
    fn diff_energy(model: FiniteModel, int: &Pyramid, mass: &Pyramid, q: &CubeId, step: u32) -> f64 {
        let mean = int.get(q) / mass.get(q);
        let g = q.generation() + step;
        let (il, ml) = (int.level(g), mass.level(g));
        (0..1usize << (model.dim() * step))
            .map(|k| {
                let i = model.descendant_index(q, step, k);
                let a = il[i] / ml[i] - mean;
                a * a * ml[i]
            })
            .sum()
    }
}

/// Per-block terms of the corona splitting. Each block uses the difference
/// step `min(κ, N - gen(Q))`, which is at least the block's input and
/// output depths.
pub fn block_terms(shift: &HaarShift, f: &StepFunction, g: &StepFunction, w: &Weight) -> Result<Vec<BlockTerms>> {
    require_separated(shift)?;
    let model = shift.model();
    if f.model() != model {
        return Err(LabError::ModelMismatch);
    }
    let data = FormData::new(f, g, w)?;
    Ok(block_terms_with(shift, &data))
}

fn block_terms_with(shift: &HaarShift, data: &FormData) -> Vec<BlockTerms> {
    let model = shift.model();
    let (m, n) = (shift.complexity().m, shift.complexity().n);
    let kappa = shift.kappa();
    let d = model.dim();
    let (rows, cols) = (1usize << (d * m), 1usize << (d * n));
    let mut out = Vec::with_capacity(shift.n_blocks());
    let mut fs = vec![0.0; cols];
    let mut ss = vec![0.0; cols];
    for block in shift.blocks() {
        let q = block.cube;
        let gq = q.generation();
        let ef = data.mean_f(&q);
        let eg = data.mean_g(&q);
        let (fl, sl) = (data.f_int.level(gq + n), data.sigma_mass.level(gq + n));
        for s in 0..cols {
            let i = model.descendant_index(&q, n, s);
            fs[s] = fl[i];
            ss[s] = sl[i];
        }
        let (gl, wl) = (data.g_int.level(gq + m), data.w_mass.level(gq + m));
        let mut t = BlockTerms {
            cube: q,
            mean_f: ef,
            mean_g: eg,
            flat: 0.0,
            vtilde: 0.0,
            v: 0.0,
            vstar: 0.0,
            w: 0.0,
            u: 0.0,
            df_norm: 0.0,
            dg_norm: 0.0,
        };
        for r in 0..rows {
            let i = model.descendant_index(&q, m, r);
            let (gr, wr) = (gl[i], wl[i]);
            let dg = gr - eg * wr;
            let row = &block.table[r * cols..(r + 1) * cols];
            let mut flat = 0.0;
            let mut df_w = 0.0;
            let mut u_row = 0.0;
            for s in 0..cols {
                let ts = row[s];
                flat += ts * ss[s];
                df_w += ts * (fs[s] - ef * ss[s]);
                u_row += ts * ss[s] * gr;
            }
            t.flat += flat * wr;
            t.v += flat * dg;
            t.vstar += df_w * wr;
            t.w += df_w * dg;
            t.u += u_row;
        }
        t.vtilde = ef * eg * t.flat;
        t.v *= ef;
        t.vstar *= eg;
        t.u *= ef;
        let step = kappa.min(model.depth() - gq);
        t.df_norm = FormData::diff_energy(model, &data.f_int, &data.sigma_mass, &q, step).sqrt();
        t.dg_norm = FormData::diff_energy(model, &data.g_int, &data.w_mass, &q, step).sqrt();
        out.push(t);
    }
    out
}

/// `⟨S(fσ), g⟩_w`, through the dense matrix when it fits and matrix-free
/// otherwise.
pub fn bilinear_total(shift: &HaarShift, f: &StepFunction, g: &StepFunction, w: &Weight) -> Result<f64> {
    let model = shift.model();
    let fs = f.mul(w.sigma())?;
    let sf = if model.dim() * model.depth() <= crate::shift::DENSE_LEAF_BITS {
        StepFunction::from_values(model, shift.assemble_matrix()?.mul_vec(fs.values()))?
    } else {
        shift.apply(&fs)?
    };
    inner_product(&sf, g, &w.w_measure())
}

/// The corona splitting of `⟨S(fσ), g⟩_w` into `U + V* + W`, with
/// `U = Ṽ + V`. Fails with [`LabError::IdentityViolation`] if either
/// identity misses [`IDENTITY_TOLERANCE`]. `I` and `II` are left at zero;
/// see [`corona_diagnostics`].
pub fn decompose_form(shift: &HaarShift, f: &StepFunction, g: &StepFunction, w: &Weight) -> Result<BilinearReport> {
    let terms = block_terms(shift, f, g, w)?;
    let mut report = BilinearReport {
        total: bilinear_total(shift, f, g, w)?,
        ..Default::default()
    };
    for t in &terms {
        report.U += t.u;
        report.V += t.v;
        report.Vstar += t.vstar;
        report.W += t.w;
        report.Vtilde += t.vtilde;
    }
    if report.identity_error() > IDENTITY_TOLERANCE {
        return Err(LabError::IdentityViolation {
            total: report.total,
            parts: report.U + report.Vstar + report.W,
        });
    }
    if report.u_error() > IDENTITY_TOLERANCE {
        return Err(LabError::IdentityViolation {
            total: report.U,
            parts: report.Vtilde + report.V,
        });
    }
    Ok(report)
}

/// Sums block outputs written on cells of various generations inside a
/// fixed cube and pushes them down to its leaves.
struct LocalLevels {
    anchor: CubeId,
    levels: Vec<Vec<f64>>,
    touched: Vec<bool>,
}

impl LocalLevels {
    fn new(model: FiniteModel, anchor: CubeId) -> Self {
        let span = model.depth() - anchor.generation();
        let d = model.dim();
        Self {
            anchor,
            levels: (0..=span).map(|k| vec![0.0; 1usize << (d * k)]).collect(),
            touched: vec![false; span as usize + 1],
        }
    }

    fn add(&mut self, cell: &CubeId, v: f64) {
        let k = (cell.generation() - self.anchor.generation()) as usize;
        self.levels[k][self.anchor.local_index_of(cell)] += v;
        self.touched[k] = true;
    }

    /// Values on the anchor's leaves, in local lexicographic order.
    fn finish(mut self, dim: u32) -> Vec<f64> {
        let span = self.levels.len() - 1;
        let mut active = false;
        for k in 0..span {
            active |= self.touched[k];
            if !active {
                continue;
            }
            let (upper, lower) = self.levels.split_at_mut(k + 1);
            let parent = &upper[k];
            let child_level = k as u32 + 1;
            for (i, v) in lower[0].iter_mut().enumerate() {
                *v += parent[local_parent(i, child_level, dim)];
            }
        }
        self.levels.pop().unwrap()
    }
}

fn local_parent(index: usize, g: u32, dim: u32) -> usize {
    if dim == 1 {
        return index >> 1;
    }
    let d = dim as usize;
    let mask = (1usize << g) - 1;
    let mut out = 0usize;
    for axis in 0..d {
        let coord = (index >> (g as usize * (d - 1 - axis))) & mask;
        out |= (coord >> 1) << ((g - 1) as usize * (d - 1 - axis));
    }
    out
}

/// Leaf-level output of one block applied to a cube-constant input:
/// the values `Σ_s T[r][s] σ(S)` on the `m`-step cells `R`.
fn flat_rows(shift: &HaarShift, block_cube: &CubeId, sigma_mass: &Pyramid) -> Vec<(CubeId, f64)> {
    let model = shift.model();
    let block = shift.block(block_cube).expect("block exists");
    let (m, n) = (shift.complexity().m, shift.complexity().n);
    let cols = 1usize << (model.dim() * n);
    let sl = sigma_mass.level(block_cube.generation() + n);
    let sigma_s: Vec<f64> = (0..cols)
        .map(|s| sl[model.descendant_index(block_cube, n, s)])
        .collect();
    block_cube
        .descendants(m)
        .into_iter()
        .enumerate()
        .map(|(r, cell)| {
            let v = (0..cols).map(|s| block.table[r * cols + s] * sigma_s[s]).sum();
            (cell, v)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CoronaDiagnostics {
    /// `Σ_F ‖U_{σ,F} f‖²_w`.
    pub I: f64,
    /// `Σ_F Σ_{F' ⊊ F} ∫_{F'} |U_{σ,F} f · U_{σ,F'} f| w`.
    pub II: f64,
    /// `‖Σ_F |U_{σ,F} f|‖_w`.
    pub normUf: f64,
    /// Largest `|𝔼^σ_Q f| / ρ(F)` over blocks `Q` in the corona of `F`.
    pub max_normalized_average: f64,
    /// `Σ_F ⟨U_{σ,F} f, g⟩_w` for the `g` supplied, if any.
    pub u_pairing: Option<f64>,
}

/// The corona operators `U_{σ,F} f = Σ_{Q ∈ 𝒟_F} 𝔼^σ_Q f ∫ s_Q(·, y) σ(dy)`,
/// each as values on the leaves of `F`.
pub fn corona_operators(shift: &HaarShift, f: &StepFunction, w: &Weight, forest: &StoppingForest) -> Result<BTreeMap<CubeId, Vec<f64>>> {
    let model = shift.model();
    if forest.model != model || f.model() != model || w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    let residue = require_separated(shift)?;
    if forest.kappa != shift.kappa() || (shift.n_blocks() > 0 && forest.residue != residue) {
        return Err(LabError::InvalidParameter(format!(
            "forest (kappa {}, residue {}) does not match the shift (kappa {}, residue {residue})",
            forest.kappa,
            forest.residue,
            shift.kappa()
        )));
    }
    let sigma_mass = w.sigma_measure().masses();
    let means = average_pyramid(f, &w.sigma_measure())?;
    let mut ops: BTreeMap<CubeId, LocalLevels> = BTreeMap::new();
    for q in shift.block_cubes() {
        let owner = forest.owner(q).ok_or(LabError::UnknownCube(*q))?;
        let ef = means.get(q);
        let acc = ops.entry(owner).or_insert_with(|| LocalLevels::new(model, owner));
        for (cell, v) in flat_rows(shift, q, &sigma_mass) {
            acc.add(&cell, ef * v);
        }
    }
    Ok(ops.into_iter().map(|(k, v)| (k, v.finish(model.dim()))).collect())
}

pub fn corona_diagnostics(
    shift: &HaarShift,
    f: &StepFunction,
    w: &Weight,
    forest: &StoppingForest,
    g: Option<&StepFunction>,
) -> Result<CoronaDiagnostics> {
    let model = shift.model();
    let ops = corona_operators(shift, f, w, forest)?;
    let means = average_pyramid(f, &w.sigma_measure())?;
    let mut max_normalized_average = 0.0f64;
    for q in shift.block_cubes() {
        let owner = forest.owner(q).expect("checked in corona_operators");
        let rho = forest.rho[&owner];
        let ef = means.get(q).abs();
        let ratio = if rho > 0.0 { ef / rho } else if ef == 0.0 { 0.0 } else { f64::INFINITY };
        max_normalized_average = max_normalized_average.max(ratio);
    }
    let wv = w.w().values();
    let h = model.leaf_volume();
    let depth = model.depth();
    let leaves_of = |q: &CubeId| -> Vec<usize> {
        let span = depth - q.generation();
        (0..1usize << (model.dim() * span))
            .map(|k| model.descendant_index(q, span, k))
            .collect()
    };
    let mut i_sum = 0.0;
    let mut total_abs = vec![0.0; model.n_leaves()];
    let mut pairing = 0.0;
    for (q, vals) in &ops {
        for (k, leaf) in leaves_of(q).into_iter().enumerate() {
            i_sum += vals[k] * vals[k] * wv[leaf] * h;
            total_abs[leaf] += vals[k].abs();
            if let Some(g) = g {
                pairing += vals[k] * g.values()[leaf] * wv[leaf] * h;
            }
        }
    }
    let mut ii_sum = 0.0;
    for (inner, inner_vals) in &ops {
        let mut ancestor = forest.stopping_parent(inner);
        while let Some(outer) = ancestor {
            if let Some(outer_vals) = ops.get(&outer) {
                for (k, leaf) in leaves_of(inner).into_iter().enumerate() {
                    let local_inner = model.cube(depth, leaf);
                    let ko = outer.local_index_of(&local_inner);
                    debug_assert_eq!(model.descendant_index(&outer, depth - outer.generation(), ko), leaf);
                    ii_sum += (outer_vals[ko] * inner_vals[k]).abs() * wv[leaf] * h;
                }
            }
            ancestor = forest.stopping_parent(&outer);
        }
    }
    let norm_uf = total_abs
        .iter()
        .zip(wv)
        .map(|(a, w)| a * a * w * h)
        .sum::<f64>()
        .sqrt();
    Ok(CoronaDiagnostics {
        I: i_sum,
        II: ii_sum,
        normUf: norm_uf,
        max_normalized_average,
        u_pairing: g.map(|_| pairing),
    })
}

/// `[Σ_Q (𝔼^σ_Q f ∫ s_Q(x, y) σ(dy))²]^{1/2}`.
pub fn square_function_v(shift: &HaarShift, f: &StepFunction, w: &Weight) -> Result<StepFunction> {
    require_separated(shift)?;
    let model = shift.model();
    if f.model() != model || w.model() != model {
        return Err(LabError::ModelMismatch);
    }
    let sigma_mass = w.sigma_measure().masses();
    let means = average_pyramid(f, &w.sigma_measure())?;
    let mut acc = LocalLevels::new(model, model.root());
    for q in shift.block_cubes() {
        let ef = means.get(q);
        for (cell, v) in flat_rows(shift, q, &sigma_mass) {
            let t = ef * v;
            acc.add(&cell, t * t);
        }
    }
    let local = acc.finish(model.dim());
    let depth = model.depth();
    let mut values = vec![0.0; model.n_leaves()];
    for (k, v) in local.into_iter().enumerate() {
        values[model.descendant_index(&model.root(), depth, k)] = v.sqrt();
    }
    StepFunction::from_values(model, values)
}

/// Seeded sign patterns over `count` items whose pairwise products
/// average to exactly zero: rows of a Walsh design with shuffled,
/// sign-flipped columns. Returns `patterns[p][item]`.
pub fn orthogonal_sign_patterns(count: usize, min_patterns: usize, seed: u64) -> Vec<Vec<f64>> {
    let patterns = min_patterns.max((count + 1).next_power_of_two());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes: Vec<usize> = (1..patterns).collect();
    codes.shuffle(&mut rng);
    let flips: Vec<f64> = (0..count).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    (0..patterns)
        .map(|p| {
            (0..count)
                .map(|i| {
                    let parity = (p & codes[i]).count_ones() & 1;
                    flips[i] * if parity == 0 { 1.0 } else { -1.0 }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignAverage {
    /// Mean of `‖Σ_Q ε_Q 𝔼^σ_Q f ∫ s_Q σ dy‖²_w` over the patterns.
    pub mean_energy: f64,
    /// `‖square_function_v‖²_w`.
    pub square_energy: f64,
    pub patterns: usize,
}

/// Averages the energy of sign-randomized paraproducts over at least
/// `min_patterns` seeded patterns.
pub fn sign_average(shift: &HaarShift, f: &StepFunction, w: &Weight, min_patterns: usize, seed: u64) -> Result<SignAverage> {
    let sq = square_function_v(shift, f, w)?;
    let model = shift.model();
    let wm = w.w_measure();
    let sigma_mass = w.sigma_measure().masses();
    let means = average_pyramid(f, &w.sigma_measure())?;
    let rows: Vec<Vec<(CubeId, f64)>> = shift
        .block_cubes()
        .map(|q| {
            let ef = means.get(q);
            flat_rows(shift, q, &sigma_mass).into_iter().map(|(c, v)| (c, ef * v)).collect()
        })
        .collect();
    let patterns = orthogonal_sign_patterns(rows.len(), min_patterns, seed);
    let depth = model.depth();
    let mut total = 0.0;
    for eps in &patterns {
        let mut acc = LocalLevels::new(model, model.root());
        for (block, e) in rows.iter().zip(eps) {
            for (cell, v) in block {
                acc.add(cell, e * v);
            }
        }
        let local = acc.finish(model.dim());
        let mut values = vec![0.0; model.n_leaves()];
        for (k, v) in local.into_iter().enumerate() {
            values[model.descendant_index(&model.root(), depth, k)] = v;
        }
        let u = StepFunction::from_values(model, values)?;
        total += inner_product(&u, &u, &wm)?;
    }
    Ok(SignAverage {
        mean_energy: total / patterns.len() as f64,
        square_energy: inner_product(&sq, &sq, &wm)?,
        patterns: patterns.len(),
    })
}

/// Largest `|W_Q| / ([w]_{A₂} ‖D^σ_Q f‖_σ ‖D^w_Q g‖_w)` over blocks with
/// nonzero differences.
pub fn w_block_ratio(terms: &[BlockTerms], a2: f64) -> f64 {
    terms
        .iter()
        .filter(|t| t.df_norm > 0.0 && t.dg_norm > 0.0)
        .map(|t| t.w.abs() / (a2 * t.df_norm * t.dg_norm))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VtildeChain {
    pub vtilde: f64,
    pub a2: f64,
    /// `‖M^σ f‖_σ`.
    pub max_f: f64,
    /// `‖M^w g‖_w`.
    pub max_g: f64,
    /// `∫ M^σ f · M^w g dx`.
    pub inner: f64,
    /// `|Ṽ| / ([w]_{A₂} ‖M^σ f‖_σ ‖M^w g‖_w)`.
    pub constant: f64,
}

pub fn vtilde_chain(shift: &HaarShift, f: &StepFunction, g: &StepFunction, w: &Weight) -> Result<VtildeChain> {
    let terms = block_terms(shift, f, g, w)?;
    let vtilde: f64 = terms.iter().map(|t| t.vtilde).sum();
    let a2 = a2_constant(w).constant;
    let (sigma, wm) = (w.sigma_measure(), w.w_measure());
    let mf = maximal_function(f, &sigma)?;
    let mg = maximal_function(g, &wm)?;
    let max_f = norm(&mf, &sigma)?;
    let max_g = norm(&mg, &wm)?;
    let inner = inner_product(&mf, &mg, &crate::grid::Measure::lebesgue(f.model()))?;
    let denom = a2 * max_f * max_g;
    Ok(VtildeChain {
        vtilde,
        a2,
        max_f,
        max_g,
        inner,
        constant: if denom > 0.0 { vtilde.abs() / denom } else { 0.0 },
    })
}

/// Largest `Σ_{Q ⊂ Q₀} |∬ s_Q σ dy w dx| / ([w]_{A₂} |Q₀|)` over all cubes
/// `Q₀` of the model.
pub fn restricted_sum_constant(shift: &HaarShift, w: &Weight) -> Result<f64> {
    let model = shift.model();
    let zero = StepFunction::zeros(model);
    let one = StepFunction::constant(model, 1.0);
    let terms = block_terms(shift, &one, &zero, w)?;
    let a2 = a2_constant(w).constant;
    let mut sums: BTreeMap<CubeId, f64> = BTreeMap::new();
    for t in &terms {
        let v = t.flat.abs();
        for g in 0..=t.cube.generation() {
            *sums.entry(t.cube.ancestor(g).unwrap()).or_default() += v;
        }
    }
    Ok(sums
        .iter()
        .map(|(q, s)| s / (a2 * q.volume()))
        .fold(0.0, f64::max))
}

/// Cubes of a forest, for JSON and reporting.
pub fn stopping_set(forest: &StoppingForest) -> BTreeSet<CubeId> {
    forest.cubes().copied().collect()
}
