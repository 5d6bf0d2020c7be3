//! Fully-connected networks with ELU hidden activations.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::nn::error::{NnError, NnResult};
use crate::nn::optim::{ParamStore, TargetTracker};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

/// Output-layer activation. Hidden layers are always ELU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Anything a forward pass can read parameters from: a live [`ParamStore`]
/// or the frozen shadow of a [`TargetTracker`].
pub trait ParamLookup {
    fn lookup(&self, name: &str) -> NnResult<&Tensor>;
}

impl ParamLookup for ParamStore {
    fn lookup(&self, name: &str) -> NnResult<&Tensor> {
        self.get(name)
    }
}

impl ParamLookup for TargetTracker {
    fn lookup(&self, name: &str) -> NnResult<&Tensor> {
        self.get(name)
    }
}

/// Shape and naming of a dense net. The parameters themselves live in a
/// [`ParamStore`] under `{prefix}.w{i}` / `{prefix}.b{i}`, so the same
/// `DenseNet` value can run against online, target, or snapshot parameters.
#[derive(Clone, Debug)]
pub struct DenseNet {
    prefix: String,
    dims: Vec<usize>,
    out_act: Activation,
}

impl DenseNet {
    /// `dims` lists layer widths input-first, e.g. `[4, 128, 16]`. A
    /// two-entry list is a single affine layer (plus output activation),
    /// which is how the linear-encoder configuration is expressed.
    pub fn new(prefix: &str, dims: &[usize], out_act: Activation) -> Self {
        assert!(dims.len() >= 2, "a net needs at least input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "layer dims must be positive");
        DenseNet { prefix: prefix.to_string(), dims: dims.to_vec(), out_act }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layer_count())
            .flat_map(|l| [self.weight_name(l), self.bias_name(l)])
            .collect()
    }

    /// Create parameters in `store`: weights uniform in +-sqrt(1/fan_in),
    /// biases zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut w = Tensor::zeros(fan_out, fan_in);
            for x in w.data_mut() {
                *x = dist.sample(rng);
            }
            store.insert(&self.weight_name(l), w);
            store.insert(&self.bias_name(l), Tensor::zeros(1, fan_out));
        }
    }

    fn apply_out_act(&self, mut y: Tensor) -> Tensor {
        match self.out_act {
            Activation::Identity => y,
            Activation::Tanh => {
                for v in y.data_mut() {
                    *v = v.tanh();
                }
                y
            }
        }
    }

    /// Plain batched forward pass, one sample per row. No tape involved.
    pub fn forward_batch(&self, params: &impl ParamLookup, x: &Tensor) -> NnResult<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "{}: input has {} features, net expects {}",
                self.prefix,
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for l in 0..self.layer_count() {
            let w = params.lookup(&self.weight_name(l))?;
            let b = params.lookup(&self.bias_name(l))?;
            let mut y = h.matmul_nt(w);
            for r in 0..y.rows() {
                let bias = b.row(0);
                let row = y.row_mut(r);
                for (o, add) in row.iter_mut().zip(bias.iter()) {
                    *o += add;
                }
            }
            if l + 1 < self.layer_count() {
                for v in y.data_mut() {
                    if *v <= 0.0 {
                        *v = v.exp() - 1.0;
                    }
                }
                h = y;
            } else {
                h = self.apply_out_act(y);
            }
        }
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn forward_vec(&self, params: &impl ParamLookup, x: &[f64]) -> NnResult<Vec<f64>> {
        let out = self.forward_batch(params, &Tensor::row_vector(x))?;
        Ok(out.data().to_vec())
    }

    /// Forward pass on a tape with trainable parameters from `store`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> NnResult<NodeId> {
        self.forward_tape_inner(tape, x, |tape, name| tape.param(store, name))
    }

    /// Forward pass on a tape with parameters inserted as constants, so no
    /// gradient flows into them.
    pub fn forward_tape_frozen(
        &self,
        tape: &mut Tape,
        params: &impl ParamLookup,
        x: NodeId,
    ) -> NnResult<NodeId> {
        self.forward_tape_inner(tape, x, |tape, name| {
            Ok(tape.constant(params.lookup(name)?.clone()))
        })
    }

    fn forward_tape_inner(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mut fetch: impl FnMut(&mut Tape, &str) -> NnResult<NodeId>,
    ) -> NnResult<NodeId> {
        let mut h = x;
        for l in 0..self.layer_count() {
            let w = fetch(tape, &self.weight_name(l))?;
            let b = fetch(tape, &self.bias_name(l))?;
            let y = tape.affine(h, w, b)?;
            h = if l + 1 < self.layer_count() {
                tape.elu(y)
            } else {
                match self.out_act {
                    Activation::Identity => y,
                    Activation::Tanh => tape.tanh(y),
                }
            };
        }
        Ok(h)
    }
}
