//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Training losses are assembled as small computation graphs on a [`Tape`]:
//! every operation records its forward value plus a closure that turns the
//! incoming gradient into vector-Jacobian products for its parents. A single
//! [`Tape::backward`] sweep from a scalar root then yields gradients for all
//! leaves.
//!
//! Conventions: every tensor is an `Array2<f64>`; scalars are `1x1`, row
//! vectors (biases) are `1xn`. Generic dense ops live here; fused geometry
//! ops with hand-derived adjoints live next to their math in
//! [`crate::hypgeom`] and [`crate::align`].

use ndarray::{Array2, Axis};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
}

/// Half-width of the guard band around every clamp boundary.
///
/// Gradients are defined as zero through clamps; finite-difference
/// comparisons are only trusted for inputs farther than this margin from a
/// boundary, so forward passes count how many evaluations landed inside it.
pub const CLAMP_MARGIN: f64 = 1e-3;

/// Clamp-proximity counters accumulated during forward evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampEvents {
    /// acosh argument of a geodesic distance within the margin of 1.
    pub distance: usize,
    /// Exterior-angle cosine within the margin of +/-1.
    pub exterior: usize,
    /// Half-aperture sine argument within the margin of 1.
    pub aperture: usize,
    /// Entailment penalty within the margin of its hinge at 0.
    pub penalty_kink: usize,
    /// Degenerate exterior-angle denominator (coincident points).
    pub degenerate: usize,
}

impl ClampEvents {
    pub fn total(&self) -> usize {
        self.distance + self.exterior + self.aperture + self.penalty_kink + self.degenerate
    }

    /// True when no evaluation came near a clamp boundary.
    pub fn is_clean(&self) -> bool {
        self.total() == 0
    }
}

/// Reverse-mode computation tape.
pub struct Tape {
    nodes: Vec<Node>,
    /// Clamp-proximity events recorded by fused geometry ops.
    pub clamp_events: ClampEvents,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), clamp_events: ClampEvents::default() }
    }

    /// Forward value of a recorded tensor.
    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Forward value of a `1x1` tensor as a scalar.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub(crate) fn push(
        &mut self,
        value: Array2<f64>,
        parents: Vec<TensorId>,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tensor on tape");
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, parents, backward });
        id
    }

    /// Record a leaf tensor (parameter or constant input).
    pub fn input(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Vec::new(), None)
    }

    /// Scalar leaf as a `1x1` tensor.
    pub fn scalar_input(&mut self, value: f64) -> TensorId {
        self.input(Array2::from_elem((1, 1), value))
    }

    /// `A . B` for `A: m x k`, `B: k x n`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension mismatch");
        let out = av.dot(&bv);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.dot(&bv.t()), av.t().dot(g)])),
        )
    }

    /// `A . B^T` for `A: m x k`, `B: n x k`; the usual batch-times-weights shape.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dimension mismatch");
        let out = av.dot(&bv.t());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.dot(&bv), g.t().dot(&av)])),
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.value(a) + self.value(b);
        self.push(out, vec![a, b], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.value(a) - self.value(b);
        self.push(out, vec![a, b], Some(Box::new(|g| vec![g.clone(), -g])))
    }

    /// Add a `1xn` row vector to every row of an `m x n` tensor.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let rv = self.value(row).clone();
        assert_eq!(rv.nrows(), 1, "bias must be a row vector");
        assert_eq!(rv.ncols(), self.value(a).ncols(), "bias width mismatch");
        let out = self.value(a) + &rv;
        self.push(
            out,
            vec![a, row],
            Some(Box::new(|g| {
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), db]
            })),
        )
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let out = self.value(a) * k;
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * k])))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let y = self.value(a).mapv(f64::tanh);
        let y_saved = y.clone();
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g| vec![g * &y_saved.mapv(|t| 1.0 - t * t)])),
        )
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let (n1, n2) = (av.ncols(), bv.ncols());
        let mut out = Array2::zeros((av.nrows(), n1 + n2));
        out.slice_mut(ndarray::s![.., ..n1]).assign(av);
        out.slice_mut(ndarray::s![.., n1..]).assign(bv);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    g.slice(ndarray::s![.., ..n1]).to_owned(),
                    g.slice(ndarray::s![.., n1..]).to_owned(),
                ]
            })),
        )
    }

    /// Mean over all entries, as a `1x1` scalar.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let n = av.len() as f64;
        let (rows, cols) = av.dim();
        let out = Array2::from_elem((1, 1), av.sum() / n);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Array2::from_elem((rows, cols), g[[0, 0]] / n)]
            })),
        )
    }

    /// Mean over rows of the squared L2 row norm of `pred - target`:
    /// `(1/m) * sum_i ||p_i - t_i||^2`.
    pub fn mse_rows(&mut self, pred: TensorId, target: TensorId) -> TensorId {
        let diff = self.value(pred) - self.value(target);
        let m = diff.nrows() as f64;
        let out = Array2::from_elem((1, 1), diff.iter().map(|x| x * x).sum::<f64>() / m);
        self.push(
            out,
            vec![pred, target],
            Some(Box::new(move |g| {
                let dp = &diff * (2.0 * g[[0, 0]] / m);
                vec![dp.clone(), -dp]
            })),
        )
    }

    /// Backward sweep from a scalar root; returns gradients for every node
    /// reachable from it.
    pub fn backward(&self, root: TensorId) -> Gradients {
        let rv = self.value(root);
        assert_eq!(rv.dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(back) = &self.nodes[idx].backward {
                let contributions = back(&g);
                debug_assert_eq!(contributions.len(), self.nodes[idx].parents.len());
                for (pid, contrib) in self.nodes[idx].parents.iter().zip(contributions) {
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if `id` was reachable.
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a `1x1` tensor as a scalar (0 when unreachable).
    pub fn scalar(&self, id: TensorId) -> f64 {
        self.get(id).map_or(0.0, |g| g[[0, 0]])
    }
}
