//! Causal core: the adjacency matrix, the DAGness measure and its polynomial
//! penalty, the linear SCM, masked propagation of latents and labels, and
//! rounding/acyclicity analysis of learned graphs.
//!
//! Convention: `A[i][j]` is the influence of concept `i` on concept `j`, so
//! column `j` holds the parent weights of concept `j`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::diffcore::{Linear, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Off-diagonal value of a freshly initialized adjacency matrix.
pub const INIT_EDGE_WEIGHT: f64 = 0.5;
/// Default threshold for turning weights into edges.
pub const ROUNDING_THRESHOLD: f64 = 0.5;
/// Hidden width of each per-concept mask map.
pub const MASK_HIDDEN: usize = 32;
/// SCM solves with a larger 1-norm condition estimate are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Weights of the penalty `linear * H(A) + quadratic * H(A)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DagWeights {
    pub linear: f64,
    pub quadratic: f64,
}

impl DagWeights {
    pub const NONE: DagWeights = DagWeights::new(0.0, 0.0);

    pub const fn new(linear: f64, quadratic: f64) -> Self {
        Self { linear, quadratic }
    }

    pub fn is_zero(&self) -> bool {
        self.linear == 0.0 && self.quadratic == 0.0
    }
}

/// Zero diagonal, every other entry [`INIT_EDGE_WEIGHT`].
pub fn init_adjacency<T: Scalar>(c: usize) -> Tensor<T> {
    let mut a = Tensor::full(&[c, c], T::of(INIT_EDGE_WEIGHT));
    for i in 0..c {
        a.set(i, i, T::zero());
    }
    a
}

/// Ones everywhere except the diagonal.
pub fn off_diagonal_mask<T: Scalar>(c: usize) -> Tensor<T> {
    let mut m = Tensor::full(&[c, c], T::one());
    for i in 0..c {
        m.set(i, i, T::zero());
    }
    m
}

/// `A` with its diagonal forced to zero (no self-loops reach any consumer).
pub fn effective_adjacency<T: Scalar>(tape: &mut Tape<'_, T>, a: Var) -> Result<Var> {
    let c = tape.shape(a)[0];
    let mask = tape.constant(off_diagonal_mask(c));
    tape.mul(a, mask)
}

/// `H(A) = tr((I + A ∘ A)^c) - c`, via `c - 1` matrix products.
pub fn dagness<T: Scalar>(tape: &mut Tape<'_, T>, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let c = match shape.as_slice() {
        [n, m] if n == m => *n,
        _ => return Err(Error::shape("dagness", &shape, &[])),
    };
    let sq = tape.mul(a, a)?;
    let id = tape.constant(Tensor::identity(c));
    let base = tape.add(id, sq)?;
    let mut power = base;
    for _ in 1..c {
        power = tape.matmul(power, base)?;
    }
    let tr = tape.trace(power)?;
    Ok(tape.add_scalar(tr, -(c as f64)))
}

/// Value-only DAGness, evaluated in f64.
pub fn dagness_value<T: Scalar>(a: &Tensor<T>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(a.cast());
    let h = dagness(&mut tape, v).expect("square adjacency");
    tape.scalar_value(h)
}

/// `λ1 H(A) + λ2 H(A)^2`.
pub fn dag_penalty<T: Scalar>(tape: &mut Tape<'_, T>, a: Var, weights: DagWeights) -> Result<Var> {
    if weights.linear < 0.0 || weights.quadratic < 0.0 {
        return Err(Error::Invalid(format!(
            "DAG weights must be non-negative, got {weights:?}"
        )));
    }
    let h = dagness(tape, a)?;
    let lin = tape.scale(h, weights.linear);
    let sq = tape.square(h)?;
    let quad = tape.scale(sq, weights.quadratic);
    tape.add(lin, quad)
}

/// Solves `(I - A^T) z = ε` for every sample and every one of the `α`
/// columns of the per-sample `c x α` layout.
///
/// `eps` is `[batch, c * α]`, concept-major (concept `j` owns columns
/// `j*α .. (j+1)*α`). Returns `z` in the same layout.
pub fn linear_scm<T: Scalar>(
    tape: &mut Tape<'_, T>,
    a: Var,
    eps: Var,
    alpha: usize,
) -> Result<Var> {
    let c = tape.shape(a)[0];
    let (batch, width) = match tape.shape(eps) {
        [b, w] => (*b, *w),
        s => return Err(Error::shape("linear_scm", s, &[c, alpha])),
    };
    if width != c * alpha {
        return Err(Error::shape("linear_scm", tape.shape(eps), &[c, alpha]));
    }
    let id = tape.constant(Tensor::identity(c));
    let at = tape.transpose(a)?;
    let system = tape.sub(id, at)?;

    let e3 = tape.reshape(eps, &[batch, c, alpha])?;
    let e_swapped = tape.swap_last_axes(e3)?;
    let rows = tape.reshape(e_swapped, &[batch * alpha, c])?;
    let rhs = tape.transpose(rows)?;
    let solved = match tape.solve(system, rhs, MAX_CONDITION) {
        Ok(v) => v,
        Err(Error::Singular { condition, .. }) => {
            return Err(Error::Singular {
                condition,
                dagness: dagness_value(tape.value(a)),
            })
        }
        Err(e) => return Err(e),
    };
    let back = tape.transpose(solved)?;
    let z3 = tape.reshape(back, &[batch, alpha, c])?;
    let z_swapped = tape.swap_last_axes(z3)?;
    tape.reshape(z_swapped, &[batch, c * alpha])
}

/// Parameters η of the per-concept maps `a^j`.
///
/// Each concept has a shared first layer `c -> 32` followed by ELU and two
/// heads: `32 -> α` for latents and `32 -> 1` for labels.
#[derive(Clone, Debug)]
pub struct MaskLayer {
    pub concepts: Vec<ConceptMap>,
    pub alpha: usize,
}

#[derive(Clone, Debug)]
pub struct ConceptMap {
    pub hidden: Linear,
    pub z_head: Linear,
    pub u_head: Linear,
}

impl MaskLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        c: usize,
        alpha: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let concepts = (0..c)
            .map(|j| ConceptMap {
                hidden: Linear::new(store, &format!("mask.{j}.hidden"), c, MASK_HIDDEN, rng),
                z_head: Linear::new(store, &format!("mask.{j}.z_head"), MASK_HIDDEN, alpha, rng),
                u_head: Linear::new(store, &format!("mask.{j}.u_head"), MASK_HIDDEN, 1, rng),
            })
            .collect();
        Self { concepts, alpha }
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.concepts
            .iter()
            .flat_map(|m| [m.hidden.params(), m.z_head.params(), m.u_head.params()])
            .flatten()
            .collect()
    }

    fn hidden<'s, T: Scalar>(
        &self,
        tape: &mut Tape<'s, T>,
        store: &'s ParamStore<T>,
        j: usize,
        a: Var,
        summary: Var,
    ) -> Result<Var> {
        let parents = tape.column(a, j)?;
        let masked = tape.mul_row(summary, parents)?;
        let h = self.concepts[j].hidden.forward(tape, store, masked)?;
        Ok(tape.elu(h))
    }
}

/// `z'_j = a^j(A^j ⊙ ζ; η^j) + ε_j` where `ζ_j` is the mean of `z_j` over its
/// `α` entries. Shapes: `z`, `eps` and the result are `[batch, c * α]`.
pub fn masked_propagate<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    mask: &MaskLayer,
    a: Var,
    z: Var,
    eps: Var,
) -> Result<Var> {
    let c = mask.concept_count();
    let alpha = mask.alpha;
    if tape.shape(z) != tape.shape(eps) {
        return Err(Error::shape("masked_propagate", tape.shape(z), tape.shape(eps)));
    }
    if tape.shape(z).len() != 2 || tape.shape(z)[1] != c * alpha {
        return Err(Error::shape("masked_propagate", tape.shape(z), &[c, alpha]));
    }
    let summary = tape.mean_groups(z, alpha)?;
    let mut parts = Vec::with_capacity(c);
    for j in 0..c {
        let h = mask.hidden(tape, store, j, a, summary)?;
        let out = mask.concepts[j].z_head.forward(tape, store, h)?;
        let noise = tape.narrow_cols(eps, j * alpha, alpha)?;
        parts.push(tape.add(out, noise)?);
    }
    tape.concat_cols(&parts)
}

/// `u'_j = a^j(A^j ⊙ u; η^j)` through the scalar head. `u` is `[batch, c]`.
pub fn mask_labels<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    mask: &MaskLayer,
    a: Var,
    u: Var,
) -> Result<Var> {
    let c = mask.concept_count();
    if tape.shape(u).len() != 2 || tape.shape(u)[1] != c {
        return Err(Error::shape("mask_labels", tape.shape(u), &[c]));
    }
    let mut parts = Vec::with_capacity(c);
    for j in 0..c {
        let h = mask.hidden(tape, store, j, a, u)?;
        parts.push(mask.concepts[j].u_head.forward(tape, store, h)?);
    }
    tape.concat_cols(&parts)
}

/// Square boolean matrix; `get(i, j)` is the edge `i -> j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BoolMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            data: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(n);
        for &(i, j) in edges {
            m.set(i, j, true);
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.n + j] = v;
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Concepts without outgoing edges.
    pub fn sinks(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| (0..self.n).all(|j| !self.get(i, j)))
            .collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[self.n, self.n], data).expect("square")
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.data
            .chunks(self.n)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }
}

/// Edge `i -> j` iff `clamp(A_ij, 0, 1) >= threshold`; no self-loops.
pub fn round_adjacency<T: Scalar>(a: &Tensor<T>, threshold: f64) -> BoolMatrix {
    let n = a.shape()[0];
    let mut b = BoolMatrix::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && a.at(i, j).as_f64().clamp(0.0, 1.0) >= threshold {
                b.set(i, j, true);
            }
        }
    }
    b
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DagCheck {
    pub acyclic: bool,
    /// Topological order (smallest ready index first) when acyclic.
    pub order: Option<Vec<usize>>,
}

/// Kahn elimination; ties resolved by lowest index.
pub fn is_dag(b: &BoolMatrix) -> DagCheck {
    let n = b.size();
    let mut indegree: Vec<usize> = (0..n)
        .map(|j| (0..n).filter(|&i| b.get(i, j)).count())
        .collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for j in 0..n {
            if b.get(i, j) {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
    }
    if order.len() == n {
        DagCheck {
            acyclic: true,
            order: Some(order),
        }
    } else {
        DagCheck {
            acyclic: false,
            order: None,
        }
    }
}

/// Rounded graph, verdict and DAGness for an adjacency matrix.
#[derive(Clone, Debug)]
pub struct StructureReport {
    pub adjacency: Tensor<f64>,
    pub threshold: f64,
    pub rounded: BoolMatrix,
    pub check: DagCheck,
    pub dagness: f64,
}

impl StructureReport {
    pub fn new<T: Scalar>(a: &Tensor<T>, threshold: f64) -> Self {
        let rounded = round_adjacency(a, threshold);
        let check = is_dag(&rounded);
        Self {
            adjacency: a.cast(),
            threshold,
            dagness: dagness_value(a),
            rounded,
            check,
        }
    }

    /// Raw matrix as tab-separated rows.
    pub fn matrix_tsv(&self) -> String {
        let n = self.rounded.size();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n)
                .map(|j| format!("{:.6}", self.adjacency.at(i, j)))
                .collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    /// `key = value` lines: size, threshold, DAGness, verdict, order and the
    /// rounded rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.rounded.size();
        let _ = writeln!(out, "concepts = {n}");
        let _ = writeln!(out, "threshold = {}", self.threshold);
        let _ = writeln!(out, "dagness = {:.6}", self.dagness);
        let _ = writeln!(out, "is_dag = {}", self.check.acyclic);
        let order = self
            .check
            .order
            .as_ref()
            .map(|o| {
                o.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .unwrap_or_default();
        let _ = writeln!(out, "topological_order = {order}");
        for (i, row) in self.rounded.rows().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "rounded.{i} = {}", cells.join(" "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::grad_check;

    fn mat(c: usize, entries: &[(usize, usize, f64)]) -> Tensor<f64> {
        let mut m = Tensor::zeros(&[c, c]);
        for &(i, j, v) in entries {
            m.set(i, j, v);
        }
        m
    }

    #[test]
    fn dagness_closed_forms() {
        assert_eq!(dagness_value(&Tensor::<f64>::zeros(&[4, 4])), 0.0);
        assert_eq!(dagness_value(&Tensor::<f64>::identity(4)), 60.0);
        assert_eq!(dagness_value(&mat(4, &[(0, 1, 1.0)])), 0.0);
        assert_eq!(dagness_value(&mat(4, &[(0, 1, 1.0), (1, 0, 1.0)])), 14.0);
        let h = dagness_value(&init_adjacency::<f64>(4));
        let want = 1.75f64.powi(4) + 3.0 * 0.75f64.powi(4) - 4.0;
        assert!((h - want).abs() < 1e-12);
        assert!((h - 6.3281).abs() < 1e-4);
    }

    #[test]
    fn penalty_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[4, 4]));
        let p = dag_penalty(&mut tape, z, DagWeights::new(6.0, 1.0)).unwrap();
        assert_eq!(tape.scalar_value(p), 0.0);

        let id = tape.constant(Tensor::identity(4));
        let p = dag_penalty(&mut tape, id, DagWeights::new(6.0, 1.0)).unwrap();
        assert_eq!(tape.scalar_value(p), 3960.0);

        let init = tape.constant(init_adjacency(4));
        let p = dag_penalty(&mut tape, init, DagWeights::new(6.0, 1.0)).unwrap();
        assert!((tape.scalar_value(p) - 78.01).abs() < 1e-2);

        assert!(dag_penalty(&mut tape, init, DagWeights::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn dagness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let data: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let point = Tensor::new(&[4, 4], data).unwrap();
            let check = grad_check(|t, a| dagness(t, a), &point).unwrap();
            assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
        }
    }

    #[test]
    fn zero_dagness_iff_acyclic_exhaustive_c3() {
        let off: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .collect();
        for pattern in 0u32..(1 << off.len()) {
            let edges: Vec<(usize, usize)> = off
                .iter()
                .enumerate()
                .filter(|(bit, _)| pattern & (1 << bit) != 0)
                .map(|(_, &e)| e)
                .collect();
            let b = BoolMatrix::from_edges(3, &edges);
            let h = dagness_value(&b.to_tensor::<f64>());
            assert_eq!(h == 0.0, is_dag(&b).acyclic, "pattern {pattern:06b}");
        }
    }

    #[test]
    fn linear_scm_examples() {
        let mut tape = Tape::<f64>::new();
        let a0 = tape.constant(Tensor::zeros(&[4, 4]));
        let eps = tape.constant(Tensor::matrix(1, 8, (0..8).map(f64::from).collect()).unwrap());
        let z = linear_scm(&mut tape, a0, eps, 2).unwrap();
        assert_eq!(tape.value(z), tape.value(eps));

        let a = tape.constant(mat(4, &[(0, 1, 0.5)]));
        let ones = tape.constant(Tensor::full(&[1, 4], 1.0));
        let z = linear_scm(&mut tape, a, ones, 1).unwrap();
        let got = tape.value(z).data();
        let want = [1.0, 1.5, 1.0, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_scm_shape_and_singularity_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[4, 4]));
        let bad = tape.constant(Tensor::zeros(&[2, 7]));
        assert!(matches!(
            linear_scm(&mut tape, a, bad, 2),
            Err(Error::Shape { .. })
        ));
        // A^T = I makes I - A^T the zero matrix.
        let id = tape.constant(Tensor::identity(4));
        let eps = tape.constant(Tensor::full(&[1, 4], 1.0));
        match linear_scm(&mut tape, id, eps, 1) {
            Err(Error::Singular { dagness, .. }) => assert_eq!(dagness, 60.0),
            other => panic!("expected singular error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn rounding_examples() {
        let r = round_adjacency(&init_adjacency::<f32>(4), 0.5);
        assert_eq!(r.edge_count(), 12);
        for i in 0..4 {
            assert!(!r.get(i, i));
        }
        assert_eq!(round_adjacency(&Tensor::<f32>::zeros(&[4, 4]), 0.5).edge_count(), 0);
        let r = round_adjacency(&mat(2, &[(0, 1, 0.49), (1, 0, 0.5)]), 0.5);
        assert!(!r.get(0, 1));
        assert!(r.get(1, 0));
        let r = round_adjacency(&mat(2, &[(0, 1, 3.0), (0, 0, 1.0)]), 0.5);
        assert!(r.get(0, 1));
        assert!(!r.get(0, 0));
    }

    #[test]
    fn is_dag_examples() {
        let empty = is_dag(&BoolMatrix::empty(4));
        assert!(empty.acyclic);
        assert_eq!(empty.order.unwrap().len(), 4);
        assert!(!is_dag(&BoolMatrix::from_edges(4, &[(0, 1), (1, 0)])).acyclic);
        let chain = is_dag(&BoolMatrix::from_edges(4, &[(0, 1), (1, 2), (2, 3)]));
        assert_eq!(chain.order, Some(vec![0, 1, 2, 3]));
        let rev = is_dag(&BoolMatrix::from_edges(3, &[(2, 1), (1, 0)]));
        assert_eq!(rev.order, Some(vec![2, 1, 0]));
    }

    #[test]
    fn structure_report_text() {
        let report = StructureReport::new(&init_adjacency::<f32>(4), 0.5);
        let text = report.to_text();
        assert!(text.contains("is_dag = false"));
        assert!(text.contains("rounded.0 = 0 1 1 1"));
        assert!(text.contains("dagness = 6.328125"));
        assert_eq!(report.matrix_tsv().lines().count(), 4);
    }

    #[test]
    fn sinks_have_no_outgoing_edges() {
        let b = BoolMatrix::from_edges(4, &[(0, 2), (1, 2), (0, 3)]);
        assert_eq!(b.sinks(), vec![2, 3]);
    }
}
