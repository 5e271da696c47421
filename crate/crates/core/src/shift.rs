//! Haar shift operators of complexity type `(m, n)`.
//!
//! A shift is a sum of blocks `S_Q f(x) = ∫_Q s_Q(x, y) f(y) dy`. Each block
//! stores its kernel as a table indexed by `(R, S)`, where `R` runs over the
//! descendants of `Q` that are `m` generations down (output side) and `S`
//! over those `n` generations down (input side), both in local
//! lexicographic order. A table entry is the constant value of `s_Q` on
//! `R × S`.
//!
//! Canonical generators (Haar multiplier, Petermichl shift) place blocks on
//! every resolvable generation; [`HaarShift::separate`] keeps one residue
//! class mod `κ`, which is what the stopping-time machinery requires.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{cube_volume, CubeId, FiniteModel, Pyramid, StepFunction};
use crate::linalg::{largest_singular_value, DenseMatrix, LinearMap, SolverOptions};
use crate::weights::{cube_rng, Weight};

/// Safety factor applied on top of the sampled unconditional norm when
/// rescaling random shifts.
pub const RESCALE_SAFETY: f64 = 1.05;

/// Random subcollections sampled when rescaling random shifts.
pub const RESCALE_SAMPLES: usize = 32;

/// Largest `d * N` for which dense matrices are assembled.
pub const DENSE_LEAF_BITS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComplexityType {
    pub m: u32,
    pub n: u32,
}

impl ComplexityType {
    pub fn new(m: u32, n: u32) -> Self {
        Self { m, n }
    }

    pub fn kappa(&self) -> u32 {
        1 + self.m.max(self.n)
    }

    pub fn transposed(&self) -> Self {
        Self { m: self.n, n: self.m }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftBlock {
    pub cube: CubeId,
    /// Row-major, `2^(dm)` rows by `2^(dn)` columns.
    pub table: Vec<f64>,
}

impl ShiftBlock {
    pub fn sup_norm(&self) -> f64 {
        self.table.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    HaarMultiplier,
    Petermichl,
    Random { seed: u64 },
    Explicit,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::HaarMultiplier => "haar_multiplier",
            ShiftKind::Petermichl => "petermichl",
            ShiftKind::Random { .. } => "random",
            ShiftKind::Explicit => "explicit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HaarShift {
    model: FiniteModel,
    complexity: ComplexityType,
    residue: Option<u32>,
    blocks: BTreeMap<CubeId, ShiftBlock>,
    kind: ShiftKind,
    signs: Option<BTreeMap<CubeId, f64>>,
}

fn infer_residue<'a>(cubes: impl Iterator<Item = &'a CubeId>, kappa: u32, fallback: Option<u32>) -> Option<u32> {
    let mut residue = None;
    for q in cubes {
        let r = q.generation() % kappa;
        match residue {
            None => residue = Some(r),
            Some(prev) if prev != r => return None,
            _ => {}
        }
    }
    residue.or(fallback)
}

impl HaarShift {
    /// Builds a shift from explicit blocks, validating table sizes, the
    /// sup bound and resolvability.
    pub fn from_blocks(
        model: FiniteModel,
        complexity: ComplexityType,
        blocks: impl IntoIterator<Item = ShiftBlock>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for b in blocks {
            model.check_cube(&b.cube)?;
            let needed = b.cube.generation() + complexity.m.max(complexity.n);
            if needed > model.depth() {
                return Err(LabError::UnresolvedBlock {
                    cube: b.cube,
                    needed,
                    depth: model.depth(),
                });
            }
            let d = model.dim();
            let expect = 1usize << (d * (complexity.m + complexity.n));
            if b.table.len() != expect {
                return Err(LabError::InvalidParameter(format!(
                    "block at {} has {} entries, expected {expect}",
                    b.cube,
                    b.table.len()
                )));
            }
            if b.sup_norm() > 1.0 / b.cube.volume() {
                return Err(LabError::InvalidParameter(format!(
                    "block at {} violates the sup bound 1/|Q|",
                    b.cube
                )));
            }
            map.insert(b.cube, b);
        }
        let residue = infer_residue(map.keys(), complexity.kappa(), Some(0));
        Ok(Self {
            model,
            complexity,
            residue,
            blocks: map,
            kind: ShiftKind::Explicit,
            signs: None,
        })
    }

    pub fn model(&self) -> FiniteModel {
        self.model
    }

    pub fn complexity(&self) -> ComplexityType {
        self.complexity
    }

    pub fn kappa(&self) -> u32 {
        self.complexity.kappa()
    }

    /// `Some(r)` when every block generation is `≡ r (mod κ)`.
    pub fn residue(&self) -> Option<u32> {
        self.residue
    }

    pub fn kind(&self) -> &ShiftKind {
        &self.kind
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ShiftBlock> {
        self.blocks.values()
    }

    pub fn block(&self, q: &CubeId) -> Option<&ShiftBlock> {
        self.blocks.get(q)
    }

    pub fn block_cubes(&self) -> impl Iterator<Item = &CubeId> {
        self.blocks.keys()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.values().all(|b| b.table.iter().all(|&v| v == 0.0))
    }

    fn rows_per_block(&self) -> usize {
        1usize << (self.model.dim() * self.complexity.m)
    }

    fn cols_per_block(&self) -> usize {
        1usize << (self.model.dim() * self.complexity.n)
    }

    /// Short identifier used in sweep output.
    pub fn id(&self) -> String {
        let sep = match self.residue {
            Some(r) if self.is_separated_subset() => format!("r{r}"),
            _ => "full".to_string(),
        };
        match &self.kind {
            ShiftKind::Random { seed } => format!(
                "random_{}x{}_{sep}_s{seed}",
                self.complexity.m, self.complexity.n
            ),
            k => format!("{}_{sep}", k.name()),
        }
    }

    fn is_separated_subset(&self) -> bool {
        matches!(self.kind, ShiftKind::Random { .. }) || self.blocks.len() > 0 && self.residue.is_some()
    }

    /// Keeps only the blocks with generation `≡ residue (mod κ)`.
    pub fn separate(&self, residue: u32) -> Result<HaarShift> {
        let kappa = self.kappa();
        if residue >= kappa {
            return Err(LabError::InvalidParameter(format!(
                "residue {residue} must be below kappa = {kappa}"
            )));
        }
        let cubes: BTreeSet<CubeId> = self
            .blocks
            .keys()
            .filter(|q| q.generation() % kappa == residue)
            .copied()
            .collect();
        let mut out = self.restrict(&cubes)?;
        out.residue = Some(residue);
        Ok(out)
    }

    /// The shift keeping only the blocks at `cubes`.
    pub fn restrict(&self, cubes: &BTreeSet<CubeId>) -> Result<HaarShift> {
        let mut blocks = BTreeMap::new();
        for q in cubes {
            let b = self.blocks.get(q).ok_or(LabError::UnknownCube(*q))?;
            blocks.insert(*q, b.clone());
        }
        let residue = infer_residue(blocks.keys(), self.kappa(), self.residue);
        let signs = self
            .signs
            .as_ref()
            .map(|s| s.iter().filter(|(q, _)| cubes.contains(q)).map(|(q, v)| (*q, *v)).collect());
        Ok(HaarShift {
            model: self.model,
            complexity: self.complexity,
            residue,
            blocks,
            kind: self.kind.clone(),
            signs,
        })
    }

    /// Kernel `s*(x, y) = s(y, x)`: tables transposed, `(m, n)` swapped.
    pub fn adjoint(&self) -> HaarShift {
        let (rows, cols) = (self.rows_per_block(), self.cols_per_block());
        let blocks = self
            .blocks
            .iter()
            .map(|(q, b)| {
                let mut t = vec![0.0; rows * cols];
                for r in 0..rows {
                    for s in 0..cols {
                        t[s * rows + r] = b.table[r * cols + s];
                    }
                }
                (*q, ShiftBlock { cube: *q, table: t })
            })
            .collect();
        HaarShift {
            model: self.model,
            complexity: self.complexity.transposed(),
            residue: self.residue,
            blocks,
            kind: ShiftKind::Explicit,
            signs: None,
        }
    }

    /// Kernel value `s_Q(x, y)` for leaves `x`, `y`; zero off `Q × Q`.
    pub fn block_kernel(&self, block: &ShiftBlock, x_leaf: usize, y_leaf: usize) -> f64 {
        let q = &block.cube;
        let n = self.model.depth();
        let xq = self.model.cube(n, x_leaf);
        let yq = self.model.cube(n, y_leaf);
        if !q.contains(&xq) || !q.contains(&yq) {
            return 0.0;
        }
        let r = q.local_index_of(&xq.ancestor(q.generation() + self.complexity.m).unwrap());
        let s = q.local_index_of(&yq.ancestor(q.generation() + self.complexity.n).unwrap());
        block.table[r * self.cols_per_block() + s]
    }

    /// `S f` computed block by block, without forming a matrix.
    pub fn apply(&self, f: &StepFunction) -> Result<StepFunction> {
        if f.model() != self.model {
            return Err(LabError::ModelMismatch);
        }
        let mut y = vec![0.0; self.model.n_leaves()];
        self.apply_filtered(f.values(), &mut y, false, |_| true);
        StepFunction::from_values(self.model, y)
    }

    /// Applies one block.
    pub fn apply_block(&self, q: &CubeId, f: &StepFunction) -> Result<StepFunction> {
        if !self.blocks.contains_key(q) {
            return Err(LabError::UnknownCube(*q));
        }
        let mut y = vec![0.0; self.model.n_leaves()];
        self.apply_filtered(f.values(), &mut y, false, |c| c == q);
        StepFunction::from_values(self.model, y)
    }

    /// `y = M x` (or `Mᵀ x`) restricted to the blocks accepted by `keep`.
    pub(crate) fn apply_filtered(
        &self,
        x: &[f64],
        y: &mut [f64],
        transpose: bool,
        keep: impl Fn(&CubeId) -> bool,
    ) {
        let model = self.model;
        let depth = model.depth();
        let integrals = Pyramid::integrals(model, |i| x[i]);
        let mut out: Vec<Vec<f64>> = (0..=depth)
            .map(|g| vec![0.0; model.cubes_in_generation(g)])
            .collect();
        let (m, n) = (self.complexity.m, self.complexity.n);
        let (rows, cols) = (self.rows_per_block(), self.cols_per_block());
        let mut touched = vec![false; depth as usize + 1];
        let mut inputs = vec![0.0; rows.max(cols)];
        for (q, block) in &self.blocks {
            if !keep(q) {
                continue;
            }
            let g = q.generation();
            let (in_depth, out_depth, n_in, n_out) = if transpose {
                (m, n, rows, cols)
            } else {
                (n, m, cols, rows)
            };
            let in_level = integrals.level(g + in_depth);
            for (s, slot) in inputs.iter_mut().enumerate().take(n_in) {
                *slot = in_level[model.descendant_index(q, in_depth, s)];
            }
            let out_level = &mut out[(g + out_depth) as usize];
            touched[(g + out_depth) as usize] = true;
            for r in 0..n_out {
                let acc: f64 = if transpose {
                    (0..n_in).map(|s| block.table[s * cols + r] * inputs[s]).sum()
                } else {
                    (0..n_in).map(|s| block.table[r * cols + s] * inputs[s]).sum()
                };
                out_level[model.descendant_index(q, out_depth, r)] += acc;
            }
        }
        // Push every level down to the leaves.
        let mut active = false;
        for g in 0..depth {
            active |= touched[g as usize];
            if !active {
                continue;
            }
            let (upper, lower) = out.split_at_mut(g as usize + 1);
            let parent = &upper[g as usize];
            for (i, v) in lower[0].iter_mut().enumerate() {
                *v += parent[model.parent_index(i, g + 1)];
            }
        }
        y.copy_from_slice(&out[depth as usize]);
    }

    /// Dense leaf-space matrix: entry `(i, j) = Σ_Q s_Q(x_i, y_j) · |leaf|`.
    pub fn assemble_matrix(&self) -> Result<DenseMatrix> {
        self.assemble_filtered(|_| true)
    }

    pub(crate) fn assemble_filtered(&self, keep: impl Fn(&CubeId) -> bool) -> Result<DenseMatrix> {
        let model = self.model;
        let bits = model.dim() * model.depth();
        if bits > DENSE_LEAF_BITS {
            return Err(LabError::SizeGuard(format!(
                "dense assembly needs d*N <= {DENSE_LEAF_BITS}, got {bits}"
            )));
        }
        let depth = model.depth();
        for q in self.blocks.keys() {
            let needed = q.generation() + self.complexity.m.max(self.complexity.n);
            if needed > depth {
                return Err(LabError::UnresolvedBlock { cube: *q, needed, depth });
            }
        }
        let n_leaves = model.n_leaves();
        let h = model.leaf_volume();
        let mut mat = DenseMatrix::zeros(n_leaves, n_leaves);
        let (m, n) = (self.complexity.m, self.complexity.n);
        let cols = self.cols_per_block();
        for (q, block) in &self.blocks {
            if !keep(q) {
                continue;
            }
            let g = q.generation();
            let out_cells: Vec<CubeId> = q.descendants(m);
            let in_cells: Vec<CubeId> = q.descendants(n);
            let in_leaves: Vec<Vec<usize>> = in_cells
                .iter()
                .map(|c| model.cube_leaves(c))
                .collect::<Result<_>>()?;
            for (r, rc) in out_cells.iter().enumerate() {
                debug_assert_eq!(rc.generation(), g + m);
                for i in model.cube_leaves(rc)? {
                    for (s, leaves) in in_leaves.iter().enumerate() {
                        let v = block.table[r * cols + s] * h;
                        if v != 0.0 {
                            for &j in leaves {
                                mat.add_to(i, j, v);
                            }
                        }
                    }
                }
            }
        }
        Ok(mat)
    }

    /// Matrix-free view usable by the singular value solver.
    pub fn operator(&self) -> ShiftOperator<'_> {
        ShiftOperator { shift: self, keep: None }
    }

    /// `S(f σ)`.
    pub fn apply_weighted(&self, f: &StepFunction, w: &Weight) -> Result<StepFunction> {
        if f.model() != self.model || w.model() != self.model {
            return Err(LabError::ModelMismatch);
        }
        self.apply(&f.mul(w.sigma())?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "type": self.kind.name(),
            "m": self.complexity.m,
            "n": self.complexity.n,
            "residue": self.residue,
            "N": self.model.depth(),
            "d": self.model.dim(),
        });
        let obj = v.as_object_mut().unwrap();
        match (&self.kind, &self.signs) {
            (ShiftKind::Random { seed }, _) => {
                obj.insert("seed".into(), (*seed).into());
            }
            (ShiftKind::HaarMultiplier | ShiftKind::Petermichl, Some(signs)) => {
                let list: Vec<_> = signs
                    .iter()
                    .map(|(q, s)| {
                        serde_json::json!({
                            "generation": q.generation(),
                            "position": q.position(),
                            "sign": s,
                        })
                    })
                    .collect();
                obj.insert("signs".into(), list.into());
            }
            _ => {
                obj.insert(
                    "blocks".into(),
                    serde_json::to_value(self.blocks.values().collect::<Vec<_>>()).unwrap(),
                );
            }
        }
        v
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct SignEntry {
            generation: u32,
            position: Vec<u32>,
            sign: f64,
        }
        #[derive(Deserialize)]
        struct Repr {
            #[serde(rename = "type")]
            kind: String,
            m: u32,
            n: u32,
            residue: Option<u32>,
            #[serde(rename = "N")]
            depth: u32,
            d: u32,
            seed: Option<u64>,
            signs: Option<Vec<SignEntry>>,
            blocks: Option<Vec<ShiftBlock>>,
        }
        let repr: Repr = serde_json::from_value(value.clone())
            .map_err(|e| LabError::Serialization(e.to_string()))?;
        let model = FiniteModel::new(repr.d, repr.depth)?;
        let read_signs = |entries: Option<Vec<SignEntry>>| -> Result<BTreeMap<CubeId, f64>> {
            entries
                .unwrap_or_default()
                .into_iter()
                .map(|e| Ok((model.cube_at(e.generation, &e.position)?, e.sign)))
                .collect()
        };
        let missing = |what: &str| LabError::Serialization(format!("missing field `{what}`"));
        match repr.kind.as_str() {
            "haar_multiplier" => haar_multiplier(&read_signs(repr.signs)?, model),
            "petermichl" => petermichl_shift(&read_signs(repr.signs)?, model),
            "random" => random_shift(
                ComplexityType::new(repr.m, repr.n),
                repr.residue.unwrap_or(0),
                repr.seed.ok_or_else(|| missing("seed"))?,
                model,
            ),
            "explicit" => HaarShift::from_blocks(
                model,
                ComplexityType::new(repr.m, repr.n),
                repr.blocks.ok_or_else(|| missing("blocks"))?,
            ),
            other => Err(LabError::Serialization(format!("unknown shift type `{other}`"))),
        }
    }
}

/// Matrix-free `M` and `Mᵀ` for a shift, optionally over a subcollection.
pub struct ShiftOperator<'a> {
    shift: &'a HaarShift,
    keep: Option<&'a BTreeSet<CubeId>>,
}

impl<'a> ShiftOperator<'a> {
    pub fn subcollection(shift: &'a HaarShift, keep: &'a BTreeSet<CubeId>) -> Self {
        Self { shift, keep: Some(keep) }
    }
}

impl LinearMap for ShiftOperator<'_> {
    fn rows(&self) -> usize {
        self.shift.model.n_leaves()
    }

    fn cols(&self) -> usize {
        self.shift.model.n_leaves()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self.keep {
            Some(set) => self.shift.apply_filtered(x, y, false, |q| set.contains(q)),
            None => self.shift.apply_filtered(x, y, false, |_| true),
        }
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        match self.keep {
            Some(set) => self.shift.apply_filtered(x, y, true, |q| set.contains(q)),
            None => self.shift.apply_filtered(x, y, true, |_| true),
        }
    }
}

/// All cubes of generation `< limit`, each mapped to `value`.
pub fn uniform_signs(model: FiniteModel, limit: u32, value: f64) -> BTreeMap<CubeId, f64> {
    (0..limit.min(model.depth()))
        .flat_map(|g| model.generation_cubes(g))
        .map(|q| (q, value))
        .collect()
}

/// Seeded signs in `{-1, +1}` on cubes of generation `< limit`.
pub fn random_signs(model: FiniteModel, limit: u32, seed: u64) -> BTreeMap<CubeId, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..limit.min(model.depth()))
        .flat_map(|g| model.generation_cubes(g))
        .map(|q| (q, if rng.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

/// `f ↦ Σ_Q ε_Q Σ_h <f, h> h` over an orthonormal Haar basis of each
/// cube's children (`2^d - 1` functions).
///
/// In `d = 1` the block kernel is `ε_Q h_Q(x) h_Q(y)`, with sup exactly
/// `1/|Q|`. For `d > 1` the summed kernel `ε_Q (2^d 1[same child] - 1)/|Q|`
/// has sup `(2^d - 1)/|Q|`, so blocks are divided by `2^d - 1` to respect
/// the sup bound.
pub fn haar_multiplier(signs: &BTreeMap<CubeId, f64>, model: FiniteModel) -> Result<HaarShift> {
    let complexity = ComplexityType::new(1, 1);
    let k = 1usize << model.dim();
    let normalization = (k - 1) as f64;
    let mut blocks = Vec::new();
    for (q, &eps) in signs {
        model.check_cube(q)?;
        if !(-1.0..=1.0).contains(&eps) {
            return Err(LabError::InvalidParameter(format!("sign {eps} at {q} outside [-1, 1]")));
        }
        if q.generation() >= model.depth() {
            return Err(LabError::UnresolvedBlock {
                cube: *q,
                needed: q.generation() + 1,
                depth: model.depth(),
            });
        }
        if eps == 0.0 {
            continue;
        }
        let inv = 1.0 / q.volume();
        let mut table = vec![0.0; k * k];
        for r in 0..k {
            for s in 0..k {
                let base = if r == s { (k - 1) as f64 } else { -1.0 };
                table[r * k + s] = eps * base / normalization * inv;
            }
        }
        blocks.push(ShiftBlock { cube: *q, table });
    }
    let mut shift = HaarShift::from_blocks(model, complexity, blocks)?;
    shift.kind = ShiftKind::HaarMultiplier;
    shift.signs = Some(signs.clone());
    Ok(shift)
}

/// The dyadic Hilbert transform model
/// `f ↦ Σ_I ε_I <f, h_I> (h_{I-} - h_{I+})/√2`, complexity `(2, 1)`.
pub fn petermichl_shift(signs: &BTreeMap<CubeId, f64>, model: FiniteModel) -> Result<HaarShift> {
    if model.dim() != 1 {
        return Err(LabError::InvalidParameter(
            "the Petermichl shift is defined for d = 1 only".into(),
        ));
    }
    let complexity = ComplexityType::new(2, 1);
    // (h_{I-} - h_{I+})(x)·h_I(y)/√2 in units of 1/|I|.
    const PATTERN: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
    let mut blocks = Vec::new();
    for (q, &eps) in signs {
        model.check_cube(q)?;
        if ![-1.0, 0.0, 1.0].contains(&eps) {
            return Err(LabError::InvalidParameter(format!("sign {eps} at {q} not in {{-1, 0, 1}}")));
        }
        if q.generation() + 2 > model.depth() {
            return Err(LabError::UnresolvedBlock {
                cube: *q,
                needed: q.generation() + 2,
                depth: model.depth(),
            });
        }
        if eps == 0.0 {
            continue;
        }
        let inv = 1.0 / q.volume();
        let mut table = vec![0.0; 8];
        for r in 0..4 {
            for (s, hs) in [1.0, -1.0].iter().enumerate() {
                table[r * 2 + s] = eps * PATTERN[r] * hs * inv;
            }
        }
        blocks.push(ShiftBlock { cube: *q, table });
    }
    let mut shift = HaarShift::from_blocks(model, complexity, blocks)?;
    shift.kind = ShiftKind::Petermichl;
    shift.signs = Some(signs.clone());
    Ok(shift)
}

/// Haar multiplier with every resolvable sign equal to `value`.
pub fn haar_multiplier_uniform(model: FiniteModel, value: f64) -> Result<HaarShift> {
    haar_multiplier(&uniform_signs(model, model.depth(), value), model)
}

/// Petermichl shift with every resolvable sign equal to `value`.
pub fn petermichl_uniform(model: FiniteModel, value: f64) -> Result<HaarShift> {
    petermichl_shift(&uniform_signs(model, model.depth().saturating_sub(1), value), model)
}

/// Seeded random kernel tables on one residue class, rescaled so that the
/// sampled unconditional norm, times [`RESCALE_SAFETY`], is at most one.
pub fn random_shift(
    complexity: ComplexityType,
    residue: u32,
    seed: u64,
    model: FiniteModel,
) -> Result<HaarShift> {
    let kappa = complexity.kappa();
    if residue >= kappa {
        return Err(LabError::InvalidParameter(format!(
            "residue {residue} must be below kappa = {kappa}"
        )));
    }
    let reach = complexity.m.max(complexity.n);
    let size = 1usize << (model.dim() * (complexity.m + complexity.n));
    let mut blocks = Vec::new();
    let mut g = residue;
    while g + reach <= model.depth() {
        for q in model.generation_cubes(g) {
            let mut rng = cube_rng(seed ^ 0x9e37_79b9_7f4a_7c15, &q);
            let inv = 1.0 / q.volume();
            let table = (0..size).map(|_| rng.gen_range(-1.0..=1.0) * inv).collect();
            blocks.push(ShiftBlock { cube: q, table });
        }
        g += kappa;
    }
    let mut shift = HaarShift::from_blocks(model, complexity, blocks)?;
    shift.kind = ShiftKind::Random { seed };
    shift.residue = Some(residue);
    let bound = unconditionality_check(&shift, RESCALE_SAMPLES, seed)?;
    let scale = if bound * RESCALE_SAFETY > 1.0 {
        1.0 / (bound * RESCALE_SAFETY)
    } else {
        1.0
    };
    for b in shift.blocks.values_mut() {
        b.table.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(shift)
}

fn solver() -> SolverOptions {
    SolverOptions::default()
}

/// Unweighted `L² → L²` norm of the subcollection `keep`.
pub fn subcollection_norm(shift: &HaarShift, keep: &BTreeSet<CubeId>) -> Result<f64> {
    Ok(largest_singular_value(&ShiftOperator::subcollection(shift, keep), &solver())?.value)
}

/// Exact norm of one block: the largest singular value of the table in
/// normalized indicator bases, `T[r][s]·√(|R||S|)`.
pub fn block_norm(shift: &HaarShift, block: &ShiftBlock) -> f64 {
    let (rows, cols) = (shift.rows_per_block(), shift.cols_per_block());
    let d = shift.model.dim();
    let g = block.cube.generation();
    let rv = cube_volume(d, g + shift.complexity.m);
    let sv = cube_volume(d, g + shift.complexity.n);
    let c = (rv * sv).sqrt();
    let mat = DMatrix::from_fn(rows, cols, |r, s| block.table[r * cols + s] * c);
    mat.singular_values().iter().fold(0.0f64, |a, &b| a.max(b))
}

/// Maximum `L² → L²` norm over the full collection, every single block,
/// every generation slice, and `samples` seeded random subcollections.
/// A certified lower bound for the supremum over all subcollections.
pub fn unconditionality_check(shift: &HaarShift, samples: usize, seed: u64) -> Result<f64> {
    if shift.blocks.is_empty() {
        return Ok(0.0);
    }
    let mut best = largest_singular_value(&shift.operator(), &solver())?.value;
    for b in shift.blocks.values() {
        best = best.max(block_norm(shift, b));
    }
    let generations: BTreeSet<u32> = shift.blocks.keys().map(|q| q.generation()).collect();
    for g in generations {
        let slice: BTreeSet<CubeId> = shift.blocks.keys().filter(|q| q.generation() == g).copied().collect();
        best = best.max(subcollection_norm(shift, &slice)?);
    }
    let all: Vec<CubeId> = shift.blocks.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let subset: BTreeSet<CubeId> = all.iter().filter(|_| rng.gen::<bool>()).copied().collect();
        if !subset.is_empty() {
            best = best.max(subcollection_norm(shift, &subset)?);
        }
    }
    Ok(best)
}

/// Seeded random subcollection of the blocks (each kept with probability 1/2).
pub fn random_subcollection(shift: &HaarShift, rng: &mut ChaCha8Rng) -> BTreeSet<CubeId> {
    shift.blocks.keys().filter(|_| rng.gen::<bool>()).copied().collect()
}

/// Random subcollection of a given size.
pub fn random_subcollection_of_size(shift: &HaarShift, size: usize, rng: &mut ChaCha8Rng) -> BTreeSet<CubeId> {
    let mut all: Vec<CubeId> = shift.blocks.keys().copied().collect();
    all.shuffle(rng);
    all.into_iter().take(size).collect()
}

/// Largest leaf-pair value of `|Σ_Q s_Q(x, y)| · |x - y|^d` over leaf
/// centers `x ≠ y`.
pub fn kernel_decay_check(shift: &HaarShift) -> Result<f64> {
    let model = shift.model;
    if model.dim() * model.depth() > 10 {
        return Err(LabError::SizeGuard(format!(
            "kernel decay needs d*N <= 10, got {}",
            model.dim() * model.depth()
        )));
    }
    let mat = shift.assemble_matrix()?;
    let h = model.leaf_volume();
    let d = model.dim() as usize;
    let centers: Vec<_> = (0..model.n_leaves()).map(|i| model.leaf_center(i)).collect();
    let mut best = 0.0f64;
    for i in 0..model.n_leaves() {
        for j in 0..model.n_leaves() {
            if i == j {
                continue;
            }
            let dist = (0..d)
                .map(|a| (centers[i][a] - centers[j][a]).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max((mat.get(i, j) / h).abs() * dist.powi(d as i32));
        }
    }
    Ok(best)
}

/// Largest `|s_Q|·|Q|` over blocks; at most one for a valid shift.
pub fn max_normalized_sup(shift: &HaarShift) -> f64 {
    shift
        .blocks
        .values()
        .map(|b| b.sup_norm() * b.cube.volume())
        .fold(0.0, f64::max)
}

/// Checks that each block, assembled alone, is constant on every `R × S`
/// rectangle (all four rectangle corners agree with the table entry).
pub fn rectangle_constancy_violations(shift: &HaarShift) -> Result<usize> {
    let model = shift.model;
    let h = model.leaf_volume();
    let mut violations = 0;
    let cols = shift.cols_per_block();
    for (q, block) in &shift.blocks {
        let mat = shift.assemble_filtered(|c| c == q)?;
        for (r, rc) in q.descendants(shift.complexity.m).iter().enumerate() {
            let rl = model.cube_leaves(rc)?;
            for (s, sc) in q.descendants(shift.complexity.n).iter().enumerate() {
                let sl = model.cube_leaves(sc)?;
                let expect = block.table[r * cols + s] * h;
                for &i in [rl[0], rl[rl.len() - 1]].iter() {
                    for &j in [sl[0], sl[sl.len() - 1]].iter() {
                        if mat.get(i, j) != expect {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(violations)
}
