use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Array;
use crate::error::{Error, Result};

/// Arithmetic precision of values recorded on a tape.
///
/// `F32` keeps storage in `f64` but rounds every recorded value to the
/// nearest `f32`, so results match single-precision storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn elem_bytes(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    /// Tolerance multiplier relative to the f64 thresholds.
    pub fn tolerance_scale(self) -> f64 {
        match self {
            Precision::F64 => 1.0,
            Precision::F32 => 1e4,
        }
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, in input order.
    fn backward(
        &self,
        grad: &Array,
        inputs: &[Rc<Array>],
        output: &Array,
    ) -> Result<Vec<Option<Array>>>;

    /// Collective ops must run their backward on every rank, even when no
    /// gradient reached them, so peers do not wait forever.
    fn is_collective(&self) -> bool {
        false
    }
}

struct Node {
    value: Rc<Array>,
    grad: Option<Array>,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Rc<dyn Backward>>,
}

struct TapeState {
    nodes: Vec<Node>,
    consumed: bool,
    precision: Precision,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// One tape per rank; it is `!Send` and never crosses rank boundaries.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeState>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape(Rc::new(RefCell::new(TapeState {
            nodes: Vec::new(),
            consumed: false,
            precision,
        })))
    }

    pub fn precision(&self) -> Precision {
        self.0.borrow().precision
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut value: Array, requires_grad: bool, inputs: Vec<usize>, op: Option<Rc<dyn Backward>>) -> Tensor {
        let mut st = self.0.borrow_mut();
        if st.precision == Precision::F32 {
            value.round_f32();
        }
        st.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            inputs,
            op,
        });
        Tensor {
            tape: self.clone(),
            id: st.nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub fn param(&self, value: Array) -> Tensor {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Array) -> Tensor {
        self.leaf(value, false)
    }

    /// Records the result of a custom op. The op is kept only if some input
    /// requires a gradient.
    pub fn record(&self, value: Array, inputs: &[&Tensor], op: impl Backward + 'static) -> Result<Tensor> {
        for t in inputs {
            if !Rc::ptr_eq(&t.tape.0, &self.0) {
                return Err(Error::invalid(op.name(), "inputs live on different tapes"));
            }
        }
        let requires_grad = {
            let st = self.0.borrow();
            inputs.iter().any(|t| st.nodes[t.id].requires_grad)
        };
        let op: Option<Rc<dyn Backward>> = if requires_grad { Some(Rc::new(op)) } else { None };
        Ok(self.push(
            value,
            requires_grad,
            inputs.iter().map(|t| t.id).collect(),
            op,
        ))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut st = self.0.borrow_mut();
        st.consumed = false;
        for n in &mut st.nodes {
            n.grad = None;
        }
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        {
            let mut st = self.0.borrow_mut();
            if st.consumed {
                return Err(Error::TapeConsumed);
            }
            let shape = st.nodes[loss].value.shape().to_vec();
            if st.nodes[loss].value.numel() != 1 {
                return Err(Error::NotScalar(shape));
            }
            st.consumed = true;
            st.nodes[loss].grad = Some(Array::ones(&shape));
        }
        let n = self.len();
        for id in (0..n).rev() {
            let (op, grad, inputs, values, output) = {
                let mut st = self.0.borrow_mut();
                let node = &mut st.nodes[id];
                let Some(op) = node.op.clone() else { continue };
                let grad = match node.grad.clone() {
                    Some(g) => g,
                    None if op.is_collective() => Array::zeros(node.value.shape()),
                    None => continue,
                };
                let inputs = node.inputs.clone();
                let output = node.value.clone();
                let values: Vec<Rc<Array>> =
                    inputs.iter().map(|&i| st.nodes[i].value.clone()).collect();
                (op, grad, inputs, values, output)
            };
            let grads = op.backward(&grad, &values, &output)?;
            let mut st = self.0.borrow_mut();
            for (&input, g) in inputs.iter().zip(grads) {
                let Some(mut g) = g else { continue };
                let node = &mut st.nodes[input];
                if !node.requires_grad {
                    continue;
                }
                if g.shape() != node.value.shape() {
                    return Err(Error::invalid(
                        op.name(),
                        format!(
                            "backward produced gradient of shape {:?} for input of shape {:?}",
                            g.shape(),
                            node.value.shape()
                        ),
                    ));
                }
                if st.precision == Precision::F32 {
                    g.round_f32();
                }
                let node = &mut st.nodes[input];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.0.borrow().nodes[self.id].value.clone()
    }

    /// Owned copy of the value, e.g. to hand back from a rank program.
    pub fn to_array(&self) -> Array {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.0.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.0.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Array> {
        self.tape.0.borrow().nodes[self.id].grad.clone()
    }

    /// Reverse pass from this scalar over the whole tape.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
