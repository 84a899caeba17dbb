//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Row vectors (`1×n`) stand in for
//! vectors and `1×1` matrices for scalars. Operations append a node that keeps
//! its forward value and a closure mapping the output gradient to input
//! gradients; [`Graph::backward`] walks the tape in reverse.
//!
//! ```
//! use ndarray::array;
//! use reidmamba::autograd::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
//! let y = g.mul(x, x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap(), &array![[2.0, 4.0], [6.0, 8.0]]);
//! ```

mod ops;

use std::collections::HashMap;

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};

pub use ops::{silu, softplus};

/// Dense row-major matrix used for every tape value.
pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Mat,
    /// Forward values of the node's parents, in declaration order.
    pub inputs: Vec<&'a Mat>,
    /// Forward value of the node itself.
    pub output: &'a Mat,
    /// Which parents need a gradient at all.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Mat>>>;

struct Node {
    value: Mat,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` values held by all node outputs.
    pub fn stored_floats(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    /// A value that gradients flow into (but which is not a stored parameter).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// A value treated as constant by the backward sweep.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Leaf bound to a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_node(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: p.trainable,
            param: Some(id),
        });
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation node. `backward` receives the output gradient and
    /// must return one entry per parent (`None` for "no contribution").
    pub fn custom(&mut self, value: Mat, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Mat::ones(self.value(loss).raw_dim());
        self.backward_with(loss, seed)
    }

    /// Reverse sweep from `root` with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.dim(), self.nodes[p.0].value.dim(), "gradient shape");
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Leaves keep their gradient; intermediate nodes are consumed.
            if node.parents.is_empty() {
                grads[i] = Some(grad);
            }
        }
        Gradients { grads }
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| (id, grads.get_or_zeros(v, &self.nodes[v.0].value)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Parameter bound to `v`, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }
}
