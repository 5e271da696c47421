//! The finite dyadic model on the unit cube `[0,1)^d`.
//!
//! Cubes are half-open, so the cubes of one generation partition the root
//! exactly. Leaves are the cubes of generation `N`; a step function stores
//! one value per leaf, with leaves ordered lexicographically by their
//! position vector (first coordinate most significant).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LabError, Result};

pub const MAX_DIM: usize = 3;

/// Largest supported `d * N`; dense objects are `4^(dN)` sized.
pub const MAX_LEAF_BITS: u32 = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FiniteModel {
    dim: u32,
    depth: u32,
}

impl FiniteModel {
    pub fn new(dim: u32, depth: u32) -> Result<Self> {
        if dim == 0 || dim as usize > MAX_DIM {
            return Err(LabError::InvalidModel(format!(
                "dimension {dim} not in 1..={MAX_DIM}"
            )));
        }
        if depth == 0 {
            return Err(LabError::InvalidModel("depth must be positive".into()));
        }
        if dim * depth > MAX_LEAF_BITS {
            return Err(LabError::InvalidModel(format!(
                "d*N = {} exceeds {MAX_LEAF_BITS}",
                dim * depth
            )));
        }
        Ok(Self { dim, depth })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        1usize << (self.dim * self.depth)
    }

    pub fn leaf_volume(&self) -> f64 {
        cube_volume(self.dim, self.depth)
    }

    /// Number of cubes in generation `g`.
    pub fn cubes_in_generation(&self, g: u32) -> usize {
        1usize << (self.dim * g)
    }

    pub fn root(&self) -> CubeId {
        CubeId {
            generation: 0,
            position: [0; MAX_DIM],
            dim: self.dim as u8,
        }
    }

    /// The cube of generation `g` with lexicographic index `index`.
    pub fn cube(&self, g: u32, index: usize) -> CubeId {
        let mut position = [0u32; MAX_DIM];
        let mask = (1usize << g) - 1;
        for (axis, p) in position.iter_mut().enumerate().take(self.dim as usize) {
            let shift = g as usize * (self.dim as usize - 1 - axis);
            *p = ((index >> shift) & mask) as u32;
        }
        CubeId {
            generation: g,
            position,
            dim: self.dim as u8,
        }
    }

    pub fn cube_at(&self, g: u32, position: &[u32]) -> Result<CubeId> {
        if g > self.depth {
            return Err(LabError::GenerationOutOfRange {
                generation: g,
                depth: self.depth,
            });
        }
        if position.len() != self.dim as usize {
            return Err(LabError::InvalidParameter(format!(
                "position has {} coordinates, model has d = {}",
                position.len(),
                self.dim
            )));
        }
        let mut pos = [0u32; MAX_DIM];
        for (slot, &p) in pos.iter_mut().zip(position) {
            if (p as u64) >= (1u64 << g) {
                return Err(LabError::InvalidParameter(format!(
                    "position coordinate {p} out of range for generation {g}"
                )));
            }
            *slot = p;
        }
        Ok(CubeId {
            generation: g,
            position: pos,
            dim: self.dim as u8,
        })
    }

    pub fn generation_cubes(&self, g: u32) -> impl Iterator<Item = CubeId> + '_ {
        (0..self.cubes_in_generation(g)).map(move |i| self.cube(g, i))
    }

    /// All cubes of generations `0..=N`, coarse to fine.
    pub fn all_cubes(&self) -> impl Iterator<Item = CubeId> + '_ {
        (0..=self.depth).flat_map(move |g| self.generation_cubes(g))
    }

    pub fn check_cube(&self, q: &CubeId) -> Result<()> {
        if q.dim as u32 != self.dim {
            return Err(LabError::ForeignCube(*q));
        }
        if q.generation > self.depth {
            return Err(LabError::GenerationOutOfRange {
                generation: q.generation,
                depth: self.depth,
            });
        }
        Ok(())
    }

    /// Leaf indices covering `q`, in increasing order.
    ///
    /// For `d = 1` these are contiguous; in higher dimensions they form
    /// `2^((d-1)(N-g))` runs along the last coordinate.
    pub fn cube_leaves(&self, q: &CubeId) -> Result<Vec<usize>> {
        self.check_cube(q)?;
        let below = self.depth - q.generation;
        let count = 1usize << (self.dim * below);
        Ok((0..count).map(|local| self.descendant_index(q, below, local)).collect())
    }

    /// Lexicographic index, at generation `q.generation + below`, of the
    /// descendant of `q` with local lexicographic index `local`.
    #[inline]
    pub fn descendant_index(&self, q: &CubeId, below: u32, local: usize) -> usize {
        let g = q.generation + below;
        if self.dim == 1 {
            return ((q.position[0] as usize) << below) + local;
        }
        let d = self.dim as usize;
        let local_mask = (1usize << below) - 1;
        let mut index = 0usize;
        for axis in 0..d {
            let l = (local >> (below as usize * (d - 1 - axis))) & local_mask;
            let coord = ((q.position[axis] as usize) << below) + l;
            index |= coord << (g as usize * (d - 1 - axis));
        }
        index
    }

    /// Index at generation `g - 1` of the parent of the cube with index
    /// `index` at generation `g`.
    #[inline]
    pub fn parent_index(&self, index: usize, g: u32) -> usize {
        self.ancestor_index(index, g, g - 1)
    }

    /// Index at generation `target` of the ancestor of cube `index` at
    /// generation `g >= target`.
    #[inline]
    pub fn ancestor_index(&self, index: usize, g: u32, target: u32) -> usize {
        let up = g - target;
        if self.dim == 1 {
            return index >> up;
        }
        let d = self.dim as usize;
        let mask = (1usize << g) - 1;
        let mut out = 0usize;
        for axis in 0..d {
            let coord = (index >> (g as usize * (d - 1 - axis))) & mask;
            out |= (coord >> up) << (target as usize * (d - 1 - axis));
        }
        out
    }

    /// Center of a leaf, first `d` coordinates meaningful.
    pub fn leaf_center(&self, leaf: usize) -> [f64; MAX_DIM] {
        let q = self.cube(self.depth, leaf);
        let side = q.side_length();
        let mut c = [0.0; MAX_DIM];
        for axis in 0..self.dim as usize {
            c[axis] = (q.position[axis] as f64 + 0.5) * side;
        }
        c
    }
}

pub fn cube_volume(dim: u32, generation: u32) -> f64 {
    // Exact power of two.
    f64::from_bits(((1023 - (dim * generation) as i64) as u64) << 52)
}

/// A dyadic cube: generation `g` and integer position in `[0, 2^g)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CubeId {
    generation: u32,
    position: [u32; MAX_DIM],
    dim: u8,
}

impl CubeId {
    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn position(&self) -> &[u32] {
        &self.position[..self.dim as usize]
    }

    pub fn dim(&self) -> u32 {
        self.dim as u32
    }

    pub fn side_length(&self) -> f64 {
        cube_volume(1, self.generation)
    }

    pub fn volume(&self) -> f64 {
        cube_volume(self.dim as u32, self.generation)
    }

    /// Lexicographic index within its generation.
    pub fn index(&self) -> usize {
        let d = self.dim as usize;
        let g = self.generation as usize;
        (0..d).fold(0usize, |acc, axis| {
            acc | ((self.position[axis] as usize) << (g * (d - 1 - axis)))
        })
    }

    /// Index unique across all generations and independent of model depth.
    pub fn global_index(&self) -> u64 {
        let d = self.dim as u64;
        let before = ((1u64 << (d * self.generation as u64)) - 1) / ((1u64 << d) - 1);
        before + self.index() as u64
    }

    pub fn parent(&self) -> Option<CubeId> {
        self.ancestor(self.generation.checked_sub(1)?)
    }

    /// Ancestor at generation `g <= self.generation`.
    pub fn ancestor(&self, g: u32) -> Option<CubeId> {
        if g > self.generation {
            return None;
        }
        let up = self.generation - g;
        let mut position = self.position;
        for p in position.iter_mut() {
            *p >>= up;
        }
        Some(CubeId {
            generation: g,
            position,
            dim: self.dim,
        })
    }

    /// The `2^d` children in lexicographic order.
    pub fn children(&self) -> Vec<CubeId> {
        self.descendants(1)
    }

    /// Descendants `below` generations down, in local lexicographic order.
    pub fn descendants(&self, below: u32) -> Vec<CubeId> {
        let d = self.dim as usize;
        let count = 1usize << (d * below as usize);
        let mask = (1usize << below) - 1;
        (0..count)
            .map(|local| {
                let mut position = [0u32; MAX_DIM];
                for axis in 0..d {
                    let l = (local >> (below as usize * (d - 1 - axis))) & mask;
                    position[axis] = (self.position[axis] << below) + l as u32;
                }
                CubeId {
                    generation: self.generation + below,
                    position,
                    dim: self.dim,
                }
            })
            .collect()
    }

    /// True when `other` is contained in `self` (including equality).
    pub fn contains(&self, other: &CubeId) -> bool {
        other.dim == self.dim
            && other.generation >= self.generation
            && other.ancestor(self.generation) == Some(*self)
    }

    /// Local lexicographic index of a descendant `below` generations down.
    pub fn local_index_of(&self, descendant: &CubeId) -> usize {
        let d = self.dim as usize;
        let below = descendant.generation - self.generation;
        let mask = (1u32 << below) - 1;
        (0..d).fold(0usize, |acc, axis| {
            acc | (((descendant.position[axis] & mask) as usize) << (below as usize * (d - 1 - axis)))
        })
    }
}

impl fmt::Display for CubeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q(g={}, pos={:?})", self.generation, self.position())
    }
}

#[derive(Serialize, Deserialize)]
struct CubeRepr {
    generation: u32,
    position: Vec<u32>,
}

impl Serialize for CubeId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CubeRepr {
            generation: self.generation,
            position: self.position().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CubeId {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = CubeRepr::deserialize(de)?;
        if repr.position.is_empty() || repr.position.len() > MAX_DIM {
            return Err(serde::de::Error::custom("position must have 1..=3 coordinates"));
        }
        let mut position = [0u32; MAX_DIM];
        for (slot, p) in position.iter_mut().zip(&repr.position) {
            if repr.generation >= 32 || (*p as u64) >= (1u64 << repr.generation) {
                return Err(serde::de::Error::custom("position out of range"));
            }
            *slot = *p;
        }
        Ok(CubeId {
            generation: repr.generation,
            position,
            dim: repr.position.len() as u8,
        })
    }
}

/// A real function constant on the leaves of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    model: FiniteModel,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn zeros(model: FiniteModel) -> Self {
        Self::constant(model, 0.0)
    }

    pub fn constant(model: FiniteModel, c: f64) -> Self {
        Self {
            model,
            values: vec![c; model.n_leaves()],
        }
    }

    pub fn from_values(model: FiniteModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.n_leaves() {
            return Err(LabError::InvalidParameter(format!(
                "expected {} leaf values, got {}",
                model.n_leaves(),
                values.len()
            )));
        }
        Ok(Self { model, values })
    }

    pub fn indicator(model: FiniteModel, q: &CubeId) -> Result<Self> {
        let mut f = Self::zeros(model);
        for leaf in model.cube_leaves(q)? {
            f.values[leaf] = 1.0;
        }
        Ok(f)
    }

    pub fn model(&self) -> FiniteModel {
        self.model
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn zip_with(&self, other: &StepFunction, op: impl Fn(f64, f64) -> f64) -> Result<StepFunction> {
        if self.model != other.model {
            return Err(LabError::ModelMismatch);
        }
        Ok(StepFunction {
            model: self.model,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> StepFunction {
        self.map(|v| c * v)
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction {
            model: self.model,
            values: self.values.iter().map(|&v| op(v)).collect(),
        }
    }

    pub fn abs(&self) -> StepFunction {
        self.map(f64::abs)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "d": self.model.dim,
            "N": self.model.depth,
            "values": self.values,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Repr {
            d: u32,
            #[serde(rename = "N")]
            depth: u32,
            values: Vec<f64>,
        }
        let repr: Repr = serde_json::from_value(value.clone())
            .map_err(|e| LabError::Serialization(e.to_string()))?;
        Self::from_values(FiniteModel::new(repr.d, repr.depth)?, repr.values)
    }
}

/// An absolutely continuous measure with a nonnegative step density.
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    density: StepFunction,
}

impl Measure {
    pub fn lebesgue(model: FiniteModel) -> Self {
        Self {
            density: StepFunction::constant(model, 1.0),
        }
    }

    pub fn from_density(density: StepFunction) -> Result<Self> {
        if let Some((leaf, &value)) = density
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(LabError::InvalidParameter(format!(
                "measure density at leaf {leaf} is {value}"
            )));
        }
        Ok(Self { density })
    }

    pub fn density(&self) -> &StepFunction {
        &self.density
    }

    pub fn model(&self) -> FiniteModel {
        self.density.model
    }

    /// Masses of every cube, generation by generation.
    pub fn masses(&self) -> Pyramid {
        Pyramid::integrals(self.model(), |i| self.density.values[i])
    }

    pub fn mass(&self, q: &CubeId) -> Result<f64> {
        let model = self.model();
        model.check_cube(q)?;
        Ok(model
            .cube_leaves(q)?
            .into_iter()
            .map(|i| self.density.values[i])
            .sum::<f64>()
            * model.leaf_volume())
    }
}

/// Integrals over every dyadic cube, stored per generation in
/// lexicographic order. Built by pairwise halving one axis at a time, so
/// integrals of constants are exact.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<Vec<f64>>,
}

impl Pyramid {
    /// `levels[g][i] = ∫_{Q(g,i)} leaf_value dx`.
    pub fn integrals(model: FiniteModel, leaf_value: impl Fn(usize) -> f64) -> Self {
        let h = model.leaf_volume();
        let leaves: Vec<f64> = (0..model.n_leaves()).map(|i| leaf_value(i) * h).collect();
        Self::from_leaf_masses(model, leaves)
    }

    pub fn from_leaf_masses(model: FiniteModel, leaves: Vec<f64>) -> Self {
        let d = model.dim() as usize;
        let n = model.depth() as usize;
        let mut levels = vec![Vec::new(); n + 1];
        levels[n] = leaves;
        for g in (0..n).rev() {
            // (2^(g+1))^d reduced one axis at a time to (2^g)^d.
            let mut sizes = vec![1usize << (g + 1); d];
            let mut data = halve_axis(&levels[g + 1], &sizes, d - 1);
            sizes[d - 1] >>= 1;
            for axis in (0..d - 1).rev() {
                data = halve_axis(&data, &sizes, axis);
                sizes[axis] >>= 1;
            }
            levels[g] = data;
        }
        Self { levels }
    }

    pub fn depth(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    pub fn level(&self, g: u32) -> &[f64] {
        &self.levels[g as usize]
    }

    pub fn get(&self, q: &CubeId) -> f64 {
        self.levels[q.generation() as usize][q.index()]
    }
}

fn halve_axis(data: &[f64], sizes: &[usize], axis: usize) -> Vec<f64> {
    let inner: usize = sizes[axis + 1..].iter().product();
    let len = sizes[axis];
    let outer: usize = sizes[..axis].iter().product();
    let mut out = Vec::with_capacity(data.len() / 2);
    for o in 0..outer {
        let base = o * len * inner;
        for j in 0..len / 2 {
            let a = base + 2 * j * inner;
            let b = a + inner;
            for k in 0..inner {
                out.push(data[a + k] + data[b + k]);
            }
        }
    }
    out
}

/// `∫_q f dμ / μ(q)`.
pub fn average(f: &StepFunction, mu: &Measure, q: &CubeId) -> Result<f64> {
    if f.model != mu.model() {
        return Err(LabError::ModelMismatch);
    }
    let model = f.model;
    let leaves = model.cube_leaves(q)?;
    let dens = &mu.density.values;
    let mass: f64 = leaves.iter().map(|&i| dens[i]).sum();
    if !(mass > 0.0) {
        return Err(LabError::DegenerateMeasure(*q));
    }
    let integral: f64 = leaves.iter().map(|&i| f.values[i] * dens[i]).sum();
    Ok(integral / mass)
}

/// Averages of `f` over every cube, per generation.
pub fn average_pyramid(f: &StepFunction, mu: &Measure) -> Result<Pyramid> {
    if f.model != mu.model() {
        return Err(LabError::ModelMismatch);
    }
    let model = f.model;
    let dens = &mu.density.values;
    let num = Pyramid::integrals(model, |i| f.values[i] * dens[i]);
    let den = mu.masses();
    let mut levels = Vec::with_capacity(num.levels.len());
    for g in 0..=model.depth() {
        let (a, b) = (num.level(g), den.level(g));
        let mut level = Vec::with_capacity(a.len());
        for (i, (&x, &m)) in a.iter().zip(b).enumerate() {
            if !(m > 0.0) {
                return Err(LabError::DegenerateMeasure(model.cube(g, i)));
            }
            level.push(x / m);
        }
        levels.push(level);
    }
    Ok(Pyramid { levels })
}

pub fn inner_product(f: &StepFunction, g: &StepFunction, mu: &Measure) -> Result<f64> {
    if f.model != g.model || f.model != mu.model() {
        return Err(LabError::ModelMismatch);
    }
    let s: f64 = f
        .values
        .iter()
        .zip(&g.values)
        .zip(&mu.density.values)
        .map(|((a, b), w)| a * b * w)
        .sum();
    Ok(s * f.model.leaf_volume())
}

pub fn norm(f: &StepFunction, mu: &Measure) -> Result<f64> {
    Ok(inner_product(f, f, mu)?.sqrt())
}

/// The dyadic maximal function `M^μ f(x) = max_{Q ∋ x} |avg_Q^μ f|`.
pub fn maximal_function(f: &StepFunction, mu: &Measure) -> Result<StepFunction> {
    let model = f.model;
    let averages = average_pyramid(f, mu)?;
    let mut running = vec![averages.level(0)[0].abs()];
    for g in 1..=model.depth() {
        let level = averages.level(g);
        running = (0..level.len())
            .map(|i| running[model.parent_index(i, g)].max(level[i].abs()))
            .collect();
    }
    StepFunction::from_values(model, running)
}

/// Values of a pyramid level pushed down to leaves: each leaf receives the
/// entry of its ancestor at generation `g`.
pub fn spread_level(model: FiniteModel, g: u32, level: &[f64]) -> StepFunction {
    let n = model.depth();
    let values = (0..model.n_leaves())
        .map(|leaf| level[model.ancestor_index(leaf, n, g)])
        .collect();
    StepFunction { model, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(d: u32, n: u32) -> FiniteModel {
        FiniteModel::new(d, n).unwrap()
    }

    #[test]
    fn leaves_of_root_and_halves() {
        let model = m(1, 2);
        assert_eq!(model.cube_leaves(&model.root()).unwrap(), vec![0, 1, 2, 3]);
        let right = model.cube_at(1, &[1]).unwrap();
        assert_eq!(model.cube_leaves(&right).unwrap(), vec![2, 3]);
        let model2 = m(2, 1);
        assert_eq!(model2.cube_leaves(&model2.root()).unwrap().len(), 4);
    }

    #[test]
    fn leaves_in_two_dimensions_follow_lex_order() {
        let model = m(2, 2);
        let q = model.cube_at(1, &[0, 1]).unwrap();
        // positions (0,2),(0,3),(1,2),(1,3) -> 2,3,6,7
        assert_eq!(model.cube_leaves(&q).unwrap(), vec![2, 3, 6, 7]);
    }

    #[test]
    fn generation_out_of_range() {
        let model = m(1, 2);
        assert!(model.cube_at(3, &[0]).is_err());
        let deep = m(1, 5).cube_at(4, &[0]).unwrap();
        assert!(matches!(
            model.cube_leaves(&deep),
            Err(LabError::GenerationOutOfRange { .. })
        ));
    }

    #[test]
    fn cube_geometry() {
        let model = m(2, 3);
        let q = model.cube_at(2, &[1, 3]).unwrap();
        assert_eq!(q.side_length(), 0.25);
        assert_eq!(q.volume(), 1.0 / 16.0);
        for c in q.children() {
            assert_eq!(c.parent(), Some(q));
            assert!(q.contains(&c));
        }
        assert_eq!(q.children().len(), 4);
    }

    #[test]
    fn partition_of_every_generation() {
        for (d, n) in [(1, 5), (2, 3), (3, 2)] {
            let model = m(d, n);
            for g in 0..=n {
                let mut seen = vec![0u8; model.n_leaves()];
                let mut vol = 0.0;
                for q in model.generation_cubes(g) {
                    vol += q.volume();
                    for leaf in model.cube_leaves(&q).unwrap() {
                        seen[leaf] += 1;
                    }
                }
                assert_eq!(vol, 1.0);
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn index_helpers_agree_with_cube_ids() {
        let model = m(2, 3);
        for q in model.all_cubes() {
            assert_eq!(model.cube(q.generation(), q.index()), q);
            if let Some(p) = q.parent() {
                assert_eq!(model.parent_index(q.index(), q.generation()), p.index());
            }
            for (local, c) in q.descendants(model.depth() - q.generation()).iter().enumerate() {
                assert_eq!(model.descendant_index(&q, model.depth() - q.generation(), local), c.index());
                assert_eq!(q.local_index_of(c), local);
            }
        }
    }

    #[test]
    fn averages() {
        let model = m(1, 1);
        let f = StepFunction::from_values(model, vec![1.0, 3.0]).unwrap();
        let leb = Measure::lebesgue(model);
        assert_eq!(average(&f, &leb, &model.root()).unwrap(), 2.0);
        let mu = Measure::from_density(StepFunction::from_values(model, vec![3.0, 1.0]).unwrap()).unwrap();
        assert_eq!(average(&f, &mu, &model.root()).unwrap(), 1.5);
        let c = StepFunction::constant(m(1, 4), 0.7);
        let mu4 = Measure::from_density(StepFunction::from_values(
            m(1, 4),
            (0..16).map(|i| 1.0 + i as f64).collect(),
        ).unwrap()).unwrap();
        let a = average(&c, &mu4, &m(1, 4).root()).unwrap();
        assert!((a - 0.7).abs() < 1e-15);
    }

    #[test]
    fn degenerate_measure_is_reported() {
        let model = m(1, 1);
        let f = StepFunction::constant(model, 1.0);
        let mu = Measure::from_density(StepFunction::from_values(model, vec![0.0, 1.0]).unwrap()).unwrap();
        let left = model.cube_at(1, &[0]).unwrap();
        assert_eq!(average(&f, &mu, &left), Err(LabError::DegenerateMeasure(left)));
    }

    #[test]
    fn inner_products() {
        let model = m(1, 3);
        let one = StepFunction::constant(model, 1.0);
        assert_eq!(inner_product(&one, &one, &Measure::lebesgue(model)).unwrap(), 1.0);
        let mut a = StepFunction::zeros(model);
        let mut b = StepFunction::zeros(model);
        a.values_mut()[0] = 2.0;
        b.values_mut()[5] = 3.0;
        assert_eq!(inner_product(&a, &b, &Measure::lebesgue(model)).unwrap(), 0.0);

        let model = m(1, 1);
        let f = StepFunction::from_values(model, vec![1.0, 0.0]).unwrap();
        let g = StepFunction::from_values(model, vec![1.0, 1.0]).unwrap();
        let mu = Measure::from_density(StepFunction::constant(model, 2.0)).unwrap();
        assert_eq!(inner_product(&f, &g, &mu).unwrap(), 1.0);
        assert_eq!(inner_product(&f, &StepFunction::zeros(m(1, 2)), &mu), Err(LabError::ModelMismatch));
    }

    #[test]
    fn maximal_function_examples() {
        let model = m(1, 1);
        let f = StepFunction::from_values(model, vec![4.0, 0.0]).unwrap();
        let mf = maximal_function(&f, &Measure::lebesgue(model)).unwrap();
        assert_eq!(mf.values(), &[4.0, 2.0]);
        let c = StepFunction::constant(m(2, 2), -1.5);
        let mc = maximal_function(&c, &Measure::lebesgue(m(2, 2))).unwrap();
        assert!(mc.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pyramid_of_constant_is_exact() {
        let model = m(3, 3);
        let p = Pyramid::integrals(model, |_| 0.1);
        for g in 0..=3 {
            for &v in p.level(g) {
                assert_eq!(v, 0.1 * cube_volume(3, g));
            }
        }
    }

    #[test]
    fn step_function_json_roundtrip() {
        let model = m(1, 2);
        let f = StepFunction::from_values(model, vec![0.5, -1.0, 2.0, 1e-300]).unwrap();
        let back = StepFunction::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn cube_json_roundtrip() {
        let model = m(2, 3);
        let q = model.cube_at(3, &[5, 2]).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"generation":3,"position":[5,2]}"#);
        let back: CubeId = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }
}
