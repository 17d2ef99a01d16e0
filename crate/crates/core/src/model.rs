//! Small fully connected probabilistic networks.
//!
//! Each layer owns one `(fan_in + 1) × fan_out` block whose last row is the
//! bias, so a layer computes `[h, 1] · W̄`. The flat parameter vector is the
//! row-major concatenation of these blocks: weights first, then the bias
//! row. The same layout is what K-FAC factors act on.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Node, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Unit-variance Gaussian; the NLL is `½ (f − y)²` with the constant dropped.
    Gaussian,
    /// Softmax over the output logits.
    Categorical,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Categorical => "categorical",
        })
    }
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Likelihood::Gaussian),
            "categorical" => Ok(Likelihood::Categorical),
            other => Err(Error::InvalidArgument(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Architecture of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

impl MlpSpec {
    /// 1-40-40-1 tanh regression network.
    pub fn sinusoid() -> Self {
        Self {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must list at least input and output widths, all positive: {:?}",
                self.layer_sizes
            )));
        }
        if self.likelihood == Likelihood::Categorical && self.output_dim() < 2 {
            return Err(Error::InvalidArgument(
                "categorical likelihood needs at least two output classes".into(),
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// `(fan_in + 1, fan_out)` for every layer.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1, w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Stable text form used for hashing and run metadata.
    pub fn canonical(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        format!(
            "layers={};activation={};likelihood={}",
            sizes.join(","),
            self.activation,
            self.likelihood
        )
    }

    /// 64-bit FNV-1a hash of [`MlpSpec::canonical`].
    pub fn hash64(&self) -> u64 {
        self.canonical().bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Fan-in scaled uniform initialization `U(−1/√fan_in, 1/√fan_in)` for
    /// weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut flat = Vec::with_capacity(self.param_count());
        for (rows, cols) in self.block_shapes() {
            let bound = 1.0 / ((rows - 1) as f64).sqrt();
            for _ in 0..rows * cols {
                flat.push(rng.random_range(-bound..bound));
            }
        }
        ParamVector::new(flat, self.block_shapes())
    }
}

/// Flat parameter vector with a per-layer block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    flat: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(flat: Vec<f64>, shapes: Vec<(usize, usize)>) -> Self {
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        assert_eq!(flat.len(), expected, "flat length does not match layout");
        Self { flat, shapes }
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(vec![0.0; self.flat.len()], self.shapes.clone())
    }

    pub fn filled_like(&self, v: f64) -> Self {
        Self::new(vec![v; self.flat.len()], self.shapes.clone())
    }

    pub fn from_blocks(blocks: &[Matrix]) -> Self {
        let shapes = blocks.iter().map(Matrix::shape).collect();
        let flat = blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect();
        Self { flat, shapes }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Start offset of each block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .scan(0, |off, (r, c)| {
                let start = *off;
                *off += r * c;
                Some(start)
            })
            .collect()
    }

    pub fn block(&self, i: usize) -> Matrix {
        let off = self.offsets()[i];
        let (r, c) = self.shapes[i];
        Matrix::from_vec(r, c, self.flat[off..off + r * c].to_vec())
    }

    pub fn blocks(&self) -> Vec<Matrix> {
        (0..self.shapes.len()).map(|i| self.block(i)).collect()
    }

    /// Flat index range of layer `i`'s weight matrix (`fan_in × fan_out`).
    pub fn weight_range(&self, i: usize) -> std::ops::Range<usize> {
        let off = self.offsets()[i];
        let (r, c) = self.shapes[i];
        off..off + (r - 1) * c
    }

    /// Flat index range of layer `i`'s bias (`fan_out`).
    pub fn bias_range(&self, i: usize) -> std::ops::Range<usize> {
        let off = self.offsets()[i];
        let (r, c) = self.shapes[i];
        off + (r - 1) * c..off + r * c
    }

    /// Leaves on `tape`, one per block.
    pub fn to_nodes<'t>(&self, tape: &'t Tape) -> Vec<Node<'t>> {
        self.blocks().into_iter().map(|b| tape.var(b)).collect()
    }

    /// Collects node values back into a vector with this layout.
    pub fn from_nodes(nodes: &[Node<'_>]) -> Self {
        let blocks: Vec<Matrix> = nodes.iter().map(|n| n.value().as_ref().clone()).collect();
        Self::from_blocks(&blocks)
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        assert_eq!(self.shapes, other.shapes, "layout mismatch");
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

/// Targets of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `n × out` real targets.
    Real(Matrix),
    /// Class indices.
    Class(Vec<usize>),
}

/// A batch of input/target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    /// `n × in` inputs, one example per row.
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Examples {
        let cols = self.inputs.cols();
        let inputs = Matrix::from_fn(indices.len(), cols, |i, j| self.inputs[(indices[i], j)]);
        let targets = match &self.targets {
            Targets::Real(t) => Targets::Real(Matrix::from_fn(indices.len(), t.cols(), |i, j| t[(indices[i], j)])),
            Targets::Class(c) => Targets::Class(indices.iter().map(|&i| c[i]).collect()),
        };
        Examples { inputs, targets }
    }
}

fn check_batch(spec: &MlpSpec, batch: &Examples) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    if batch.inputs.cols() != spec.input_dim() {
        return Err(Error::shape("batch inputs", spec.input_dim(), batch.inputs.cols()));
    }
    match (&batch.targets, spec.likelihood) {
        (Targets::Real(t), Likelihood::Gaussian) => {
            if t.shape() != (batch.len(), spec.output_dim()) {
                return Err(Error::shape(
                    "regression targets",
                    format!("{}x{}", batch.len(), spec.output_dim()),
                    format!("{}x{}", t.rows(), t.cols()),
                ));
            }
        }
        (Targets::Class(c), Likelihood::Categorical) => {
            if c.len() != batch.len() {
                return Err(Error::shape("class labels", batch.len(), c.len()));
            }
            if let Some(bad) = c.iter().find(|&&l| l >= spec.output_dim()) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {} classes",
                    spec.output_dim()
                )));
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "target kind does not match the model likelihood".into(),
            ))
        }
    }
    Ok(())
}

fn check_params(spec: &MlpSpec, shapes: &[(usize, usize)]) -> Result<()> {
    if shapes != spec.block_shapes().as_slice() {
        return Err(Error::shape(
            "parameter blocks",
            format!("{:?}", spec.block_shapes()),
            format!("{shapes:?}"),
        ));
    }
    Ok(())
}

/// Intermediate values of a forward pass, kept for curvature estimation.
pub struct Forward<'t> {
    /// Network output (regression prediction or logits), `n × out`.
    pub output: Node<'t>,
    /// Layer inputs with the constant 1 column appended, one per layer.
    pub layer_inputs: Vec<Node<'t>>,
    /// Pre-activations `[h, 1] · W̄`, one per layer.
    pub pre_activations: Vec<Node<'t>>,
}

/// Forward pass on the tape.
pub fn forward<'t>(spec: &MlpSpec, params: &[Node<'t>], inputs: Node<'t>) -> Result<Forward<'t>> {
    let shapes: Vec<(usize, usize)> = params.iter().map(Node::shape).collect();
    check_params(spec, &shapes)?;
    let last = params.len() - 1;
    let mut h = inputs;
    let mut layer_inputs = Vec::with_capacity(params.len());
    let mut pre_activations = Vec::with_capacity(params.len());
    for (l, w) in params.iter().enumerate() {
        let a = h.append_col(1.0);
        let z = a.matmul(*w);
        layer_inputs.push(a);
        pre_activations.push(z);
        h = if l == last {
            z
        } else {
            match spec.activation {
                Activation::Tanh => z.tanh(),
                Activation::Relu => z.relu(),
            }
        };
    }
    Ok(Forward {
        output: h,
        layer_inputs,
        pre_activations,
    })
}

/// Mean negative log-likelihood of `batch` given the network output.
pub fn nll_from_output<'t>(spec: &MlpSpec, output: Node<'t>, batch: &Examples) -> Node<'t> {
    let tape = output.tape();
    let n = batch.len() as f64;
    match (&batch.targets, spec.likelihood) {
        (Targets::Real(y), _) => {
            let r = output - tape.constant(y.clone());
            (r * r).sum().scale(0.5 / n)
        }
        (Targets::Class(labels), _) => {
            let onehot = one_hot(labels, spec.output_dim());
            (output.log_softmax() * tape.constant(onehot)).sum().scale(-1.0 / n)
        }
    }
}

/// Mean negative log-likelihood of `batch`, differentiable in `params`.
pub fn nll<'t>(spec: &MlpSpec, params: &[Node<'t>], batch: &Examples) -> Result<Node<'t>> {
    check_batch(spec, batch)?;
    let tape = params
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parameter blocks".into()))?
        .tape();
    let fwd = forward(spec, params, tape.constant(batch.inputs.clone()))?;
    Ok(nll_from_output(spec, fwd.output, batch))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = 1.0;
    }
    m
}

/// Network output on plain matrices, without recording a graph.
pub fn predict(spec: &MlpSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    check_params(spec, params.shapes())?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::shape("predict inputs", spec.input_dim(), inputs.cols()));
    }
    let blocks = params.blocks();
    let last = blocks.len() - 1;
    let mut h = inputs.clone();
    for (l, w) in blocks.iter().enumerate() {
        let a = Matrix::from_fn(
            h.rows(),
            h.cols() + 1,
            |i, j| if j < h.cols() { h[(i, j)] } else { 1.0 },
        );
        let z = a.matmul(w);
        h = if l == last {
            z
        } else {
            match spec.activation {
                Activation::Tanh => z.map(f64::tanh),
                Activation::Relu => z.map(|v| v.max(0.0)),
            }
        };
    }
    Ok(h)
}

/// Per-example negative log-likelihoods, without a graph.
pub fn nll_per_example(spec: &MlpSpec, params: &ParamVector, batch: &Examples) -> Result<Vec<f64>> {
    check_batch(spec, batch)?;
    let out = predict(spec, params, &batch.inputs)?;
    Ok(match &batch.targets {
        Targets::Real(y) => (0..batch.len())
            .map(|i| {
                0.5 * out
                    .row_slice(i)
                    .iter()
                    .zip(y.row_slice(i))
                    .map(|(f, t)| (f - t) * (f - t))
                    .sum::<f64>()
            })
            .collect(),
        Targets::Class(labels) => (0..batch.len())
            .map(|i| {
                let row = out.row_slice(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .collect(),
    })
}

/// Mean negative log-likelihood, without a graph.
pub fn nll_value(spec: &MlpSpec, params: &ParamVector, batch: &Examples) -> Result<f64> {
    let per = nll_per_example(spec, params, batch)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Fraction of examples whose arg-max logit equals the label.
pub fn accuracy(spec: &MlpSpec, params: &ParamVector, batch: &Examples) -> Result<f64> {
    check_batch(spec, batch)?;
    let Targets::Class(labels) = &batch.targets else {
        return Err(Error::InvalidArgument("accuracy needs class labels".into()));
    };
    let out = predict(spec, params, &batch.inputs)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(out.row_slice(*i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HBMLCKPT";

/// Writes `magic ‖ spec hash (u64 LE) ‖ length (u64 LE) ‖ f64 LE values`.
pub fn write_checkpoint<W: Write>(mut w: W, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    check_params(spec, params.shapes())?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&spec.hash64().to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, spec: &MlpSpec) -> Result<ParamVector> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let hash = u64::from_le_bytes(word);
    if hash != spec.hash64() {
        return Err(Error::Checkpoint(format!(
            "architecture hash {hash:#018x} does not match {} ({:#018x})",
            spec.canonical(),
            spec.hash64()
        )));
    }
    r.read_exact(&mut word)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let len = u64::from_le_bytes(word) as usize;
    if len != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "length {len} does not match parameter count {}",
            spec.param_count()
        )));
    }
    let mut flat = Vec::with_capacity(len);
    for i in 0..len {
        r.read_exact(&mut word)
            .map_err(|e| Error::Checkpoint(format!("truncated at value {i}: {e}")))?;
        flat.push(f64::from_le_bytes(word));
    }
    Ok(ParamVector::new(flat, spec.block_shapes()))
}
