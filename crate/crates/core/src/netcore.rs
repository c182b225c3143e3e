//! Network assembly, forward pass, loss and the dense reference backpropagation.
//!
//! Activations are carried as `features × batch` matrices, one column per sample. Conv
//! feature maps are flattened channel-major (`c·H·W + h·W + w`), so a flatten between a
//! conv stack and a dense head is a no-op.
//!
//! A final `Softmax` layer returns its pre-softmax scores from [`forward`]; the softmax is
//! fused with the cross-entropy in [`cross_entropy_loss`] and in the backward pass.

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvShape, PoolShape};
use crate::dlrt::LowRankFactors;
use crate::linalg::gemm;
use crate::rng::{derive_seed, gaussian_matrix_from, stream};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Matrix) {
        if self == Activation::Relu {
            x.map_inplace(|v| v.max(0.0));
        }
    }

    /// Multiplies `grad` by σ'(pre). ReLU'(0) = 0; softmax is handled by the loss.
    fn backprop(self, grad: &mut Matrix, pre: &Matrix) {
        if self == Activation::Relu {
            for (g, &a) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

/// The linear map of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Dense(Matrix),
    LowRank(LowRankFactors),
    /// Inference form `W = left · rightᵀ` with `left = U S` and `right = V`.
    Deploy { left: Matrix, right: Matrix },
}

impl Weight {
    pub fn n_out(&self) -> usize {
        match self {
            Weight::Dense(w) => w.rows(),
            Weight::LowRank(f) => f.u.rows(),
            Weight::Deploy { left, .. } => left.rows(),
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            Weight::Dense(w) => w.cols(),
            Weight::LowRank(f) => f.v.rows(),
            Weight::Deploy { right, .. } => right.rows(),
        }
    }

    /// `W x`; low-rank weights are applied as `U (S (Vᵀ x))`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Weight::Dense(w) => w.matmul(x).expect("conformable"),
            Weight::LowRank(f) => {
                let vx = f.v.t_matmul(x).expect("conformable");
                let svx = f.s.matmul(&vx).expect("conformable");
                f.u.matmul(&svx).expect("conformable")
            }
            Weight::Deploy { left, right } => left.matmul(&right.t_matmul(x).expect("conformable")).expect("conformable"),
        }
    }

    /// `Wᵀ g`, as `V (Sᵀ (Uᵀ g))` for low-rank weights.
    pub fn apply_transpose(&self, g: &Matrix) -> Matrix {
        match self {
            Weight::Dense(w) => w.t_matmul(g).expect("conformable"),
            Weight::LowRank(f) => {
                let ug = f.u.t_matmul(g).expect("conformable");
                let sug = f.s.t_matmul(&ug).expect("conformable");
                f.v.matmul(&sug).expect("conformable")
            }
            Weight::Deploy { left, right } => right.matmul(&left.t_matmul(g).expect("conformable")).expect("conformable"),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Weight::Dense(w) => w.clone(),
            Weight::LowRank(f) => f.effective_weight(),
            Weight::Deploy { left, right } => left.matmul_t(right).expect("conformable"),
        }
    }

    pub fn as_low_rank(&self) -> Option<&LowRankFactors> {
        match self {
            Weight::LowRank(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_low_rank_mut(&mut self) -> Option<&mut LowRankFactors> {
        match self {
            Weight::LowRank(f) => Some(f),
            _ => None,
        }
    }

    /// Rank of a factorized weight, `None` for dense ones.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Weight::Dense(_) => None,
            Weight::LowRank(f) => Some(f.rank()),
            Weight::Deploy { left, .. } => Some(left.cols()),
        }
    }

    /// Same map in deploy form; dense weights are returned unchanged.
    pub fn to_deploy(&self) -> Weight {
        match self {
            Weight::LowRank(f) => Weight::Deploy { left: f.deploy_factor(), right: f.v.clone() },
            other => other.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Weight::Dense(w) => w.is_finite(),
            Weight::LowRank(f) => f.u.is_finite() && f.s.is_finite() && f.v.is_finite(),
            Weight::Deploy { left, right } => left.is_finite() && right.is_finite(),
        }
    }
}

/// Weight, bias and activation shared by dense and convolutional layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Weight,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Affine {
    /// `W x + b` over the columns of `x`.
    pub fn pre_activation(&self, x: &Matrix) -> Matrix {
        let mut a = self.weight.apply(x);
        a.add_to_rows(&self.bias);
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Affine),
    Conv { shape: ConvShape, affine: Affine },
    MaxPool(PoolShape),
}

impl Layer {
    pub fn in_width(&self) -> usize {
        match self {
            Layer::Linear(a) => a.weight.n_in(),
            Layer::Conv { shape, .. } => shape.in_features(),
            Layer::MaxPool(p) => p.in_features(),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            Layer::Linear(a) => a.weight.n_out(),
            Layer::Conv { shape, .. } => shape.out_features(),
            Layer::MaxPool(p) => p.out_features(),
        }
    }

    pub fn affine(&self) -> Option<&Affine> {
        match self {
            Layer::Linear(a) | Layer::Conv { affine: a, .. } => Some(a),
            Layer::MaxPool(_) => None,
        }
    }

    pub fn affine_mut(&mut self) -> Option<&mut Affine> {
        match self {
            Layer::Linear(a) | Layer::Conv { affine: a, .. } => Some(a),
            Layer::MaxPool(_) => None,
        }
    }

    pub fn activation(&self) -> Activation {
        self.affine().map_or(Activation::Identity, |a| a.activation)
    }
}

/// Architecture description used to build (and rebuild) networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Linear {
        n_in: usize,
        n_out: usize,
        activation: Activation,
        #[serde(default)]
        low_rank: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rank: Option<usize>,
    },
    Conv {
        #[serde(flatten)]
        shape: ConvShape,
        activation: Activation,
        #[serde(default)]
        low_rank: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rank: Option<usize>,
    },
    MaxPool(PoolShape),
}

impl LayerSpec {
    pub fn linear(n_in: usize, n_out: usize, activation: Activation) -> Self {
        LayerSpec::Linear { n_in, n_out, activation, low_rank: false, rank: None }
    }

    /// Weight matrix dimensions `(n_out, n_in)` for parametrized layers.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Linear { n_in, n_out, .. } => Some((*n_out, *n_in)),
            LayerSpec::Conv { shape, .. } => Some((shape.filters, shape.patch_len())),
            LayerSpec::MaxPool(_) => None,
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(
            self,
            LayerSpec::Linear { low_rank: true, .. } | LayerSpec::Conv { low_rank: true, .. }
        )
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { rank, .. } | LayerSpec::Conv { rank, .. } => *rank,
            LayerSpec::MaxPool(_) => None,
        }
    }

    pub fn set_low_rank(&mut self, enabled: bool, initial_rank: Option<usize>) {
        match self {
            LayerSpec::Linear { low_rank, rank, .. } | LayerSpec::Conv { low_rank, rank, .. } => {
                *low_rank = enabled;
                *rank = initial_rank;
            }
            LayerSpec::MaxPool(_) => {}
        }
    }

    pub fn in_width(&self) -> usize {
        match self {
            LayerSpec::Linear { n_in, .. } => *n_in,
            LayerSpec::Conv { shape, .. } => shape.in_features(),
            LayerSpec::MaxPool(p) => p.in_features(),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            LayerSpec::Linear { n_out, .. } => *n_out,
            LayerSpec::Conv { shape, .. } => shape.out_features(),
            LayerSpec::MaxPool(p) => p.out_features(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Linear { activation, .. } | LayerSpec::Conv { activation, .. } => *activation,
            LayerSpec::MaxPool(_) => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Fully connected stack `widths[0] → widths[1] → …` with ReLU hidden layers and a
    /// softmax head. When `low_rank` is set every layer but the head is factorized.
    pub fn mlp(widths: &[usize], low_rank: bool) -> Self {
        let m = widths.len() - 1;
        let layers = (0..m)
            .map(|k| {
                let head = k == m - 1;
                LayerSpec::Linear {
                    n_in: widths[k],
                    n_out: widths[k + 1],
                    activation: if head { Activation::Softmax } else { Activation::Relu },
                    low_rank: low_rank && !head,
                    rank: None,
                }
            })
            .collect();
        NetworkSpec { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::in_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::out_width)
    }

    /// Indices of layers carrying a weight matrix.
    pub fn weight_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| l.weight_dims().is_some()).map(|(i, _)| i)
    }

    /// Sets initial ranks of the low-rank layers, in layer order.
    pub fn with_ranks(mut self, ranks: &[usize]) -> Result<Self> {
        let idx: Vec<usize> =
            self.layers.iter().enumerate().filter(|(_, l)| l.is_low_rank()).map(|(i, _)| i).collect();
        if idx.len() != ranks.len() {
            return Err(Error::invalid(format!(
                "{} ranks given for {} low-rank layers",
                ranks.len(),
                idx.len()
            )));
        }
        for (&i, &r) in idx.iter().zip(ranks) {
            let dims = self.layers[i].weight_dims().expect("weight layer");
            if r == 0 || r > dims.0.min(dims.1) {
                return Err(Error::invalid(format!(
                    "rank {r} for layer {i} outside [1, {}]",
                    dims.0.min(dims.1)
                )));
            }
            self.layers[i].set_low_rank(true, Some(r));
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::invalid(format!(
                    "layer {k} outputs {} features but layer {} expects {}",
                    pair[0].out_width(),
                    k + 1,
                    pair[1].in_width()
                )));
            }
        }
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            if l.activation() == Activation::Softmax && k != last {
                return Err(Error::invalid(format!("softmax on non-final layer {k}")));
            }
            if let LayerSpec::Conv { shape, .. } = l {
                shape.validate()?;
            }
            if let LayerSpec::MaxPool(p) = l {
                p.validate()?;
            }
        }
        Ok(())
    }
}

/// A built network: an ordered layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Seeded initialization. Dense weights are He-normal; low-rank layers are initialized
    /// by [`LowRankFactors::random`]. Biases start at zero.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (k, ls) in spec.layers.iter().enumerate() {
            let layer_seed = derive_seed(seed, k as u64);
            let layer = match ls {
                LayerSpec::MaxPool(p) => Layer::MaxPool(*p),
                _ => {
                    let (n_out, n_in) = ls.weight_dims().expect("weight layer");
                    let weight = if ls.is_low_rank() {
                        Weight::LowRank(LowRankFactors::random(n_out, n_in, ls.rank(), layer_seed)?)
                    } else {
                        let scale = (2.0 / n_in as f64).sqrt();
                        Weight::Dense(gaussian_matrix_from(n_out, n_in, &mut stream(layer_seed)).scaled(scale))
                    };
                    let affine = Affine { weight, bias: vec![0.0; n_out], activation: ls.activation() };
                    match ls {
                        LayerSpec::Conv { shape, .. } => Layer::Conv { shape: *shape, affine },
                        _ => Layer::Linear(affine),
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Network { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").out_width()
    }

    /// Architecture of this network, with current ranks recorded.
    pub fn spec(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::MaxPool(p) => LayerSpec::MaxPool(*p),
                Layer::Linear(a) => LayerSpec::Linear {
                    n_in: a.weight.n_in(),
                    n_out: a.weight.n_out(),
                    activation: a.activation,
                    low_rank: a.weight.rank().is_some(),
                    rank: a.weight.rank(),
                },
                Layer::Conv { shape, affine } => LayerSpec::Conv {
                    shape: *shape,
                    activation: affine.activation,
                    low_rank: affine.weight.rank().is_some(),
                    rank: affine.weight.rank(),
                },
            })
            .collect();
        NetworkSpec { layers }
    }

    /// Current rank of every low-rank layer, in layer order.
    pub fn ranks(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.affine().and_then(|a| a.weight.rank()))
            .collect()
    }

    pub fn low_rank_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&k| self.layers[k].affine().is_some_and(|a| a.weight.as_low_rank().is_some()))
            .collect()
    }

    /// Copy with every low-rank weight stored as `U S` and `V`.
    pub fn to_deploy(&self) -> Network {
        let mut net = self.clone();
        for layer in &mut net.layers {
            if let Some(a) = layer.affine_mut() {
                a.weight = a.weight.to_deploy();
            }
        }
        net
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.affine().is_none_or(|a| a.weight.is_finite() && a.bias.iter().all(|b| b.is_finite()))
        })
    }

    /// Validates layer chaining and softmax placement on a built network.
    pub fn validate(&self) -> Result<()> {
        self.spec().validate()
    }
}

/// A minibatch: one input column and one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.cols() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input columns but {} labels",
                inputs.cols(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// What a forward pass recorded for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// `z[0]` is the input; `z[k + 1]` is the output of layer `k`.
    pub z: Vec<Matrix>,
    /// Pre-activations of affine layers, in the layer's output layout.
    pub pre: Vec<Option<Matrix>>,
    /// Unfolded conv inputs (`C·J·K × batch·L`).
    pub cols: Vec<Option<Matrix>>,
    /// Source feature index of each pooled output, per sample.
    pub pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.z[0].cols()
    }

    /// The matrix an affine layer multiplied its weight into.
    pub fn affine_input(&self, k: usize) -> &Matrix {
        self.cols[k].as_ref().unwrap_or(&self.z[k])
    }

    pub fn logits(&self) -> &Matrix {
        self.z.last().expect("non-empty tape")
    }
}

/// Forward pass. Returns the final scores and, when `record` is set, the tape.
pub fn forward(net: &Network, inputs: &Matrix, record: bool) -> Result<(Matrix, Option<ForwardTape>)> {
    if inputs.rows() != net.input_width() {
        return Err(Error::invalid(format!(
            "input has {} features, network expects {}",
            inputs.rows(),
            net.input_width()
        )));
    }
    let n = net.layers.len();
    let mut tape = record.then(|| ForwardTape {
        z: Vec::with_capacity(n + 1),
        pre: Vec::with_capacity(n),
        cols: Vec::with_capacity(n),
        pool_argmax: Vec::with_capacity(n),
    });
    let mut x = inputs.clone();
    for layer in &net.layers {
        let (out, pre, cols, argmax) = match layer {
            Layer::Linear(a) => {
                let pre = a.pre_activation(&x);
                let mut z = pre.clone();
                a.activation.apply(&mut z);
                (z, Some(pre), None, None)
            }
            Layer::Conv { shape, affine } => {
                let unfolded = conv::unfold(&x, shape)?;
                let y = affine.pre_activation(&unfolded);
                let pre = conv::locations_to_features(&y, shape, x.cols());
                let mut z = pre.clone();
                affine.activation.apply(&mut z);
                (z, Some(pre), Some(unfolded), None)
            }
            Layer::MaxPool(p) => {
                let (z, idx) = conv::max_pool(&x, p)?;
                (z, None, None, Some(idx))
            }
        };
        if let Some(t) = tape.as_mut() {
            t.z.push(std::mem::replace(&mut x, out));
            t.pre.push(pre);
            t.cols.push(cols);
            t.pool_argmax.push(argmax);
        } else {
            x = out;
        }
    }
    if let Some(t) = tape.as_mut() {
        t.z.push(x.clone());
    }
    Ok((x, tape))
}

/// Column-wise softmax of a `classes × batch` score matrix.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let (c, b) = logits.shape();
    let mut p = Matrix::zeros(c, b);
    for j in 0..b {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (logits[(i, j)] - max).exp();
            p[(i, j)] = e;
            sum += e;
        }
        for i in 0..c {
            p[(i, j)] /= sum;
        }
    }
    p
}

fn check_labels(labels: &[usize], classes: usize, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::invalid(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean of `−log softmax(logits)[label]` over the batch, via log-sum-exp.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let (c, b) = logits.shape();
    check_labels(labels, c, b)?;
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|i| (logits[(i, j)] - max).exp()).sum::<f64>().ln();
        total += lse - logits[(y, j)];
    }
    Ok(total / b as f64)
}

/// Fraction of columns whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let (c, b) = logits.shape();
    if b == 0 {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(j, &y)| {
            let mut best = 0;
            for i in 1..c {
                if logits[(i, j)] > logits[(best, j)] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    correct as f64 / b as f64
}

pub fn predictions(logits: &Matrix) -> Vec<usize> {
    let (c, b) = logits.shape();
    (0..b)
        .map(|j| {
            let mut best = 0;
            for i in 1..c {
                if logits[(i, j)] > logits[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Backprop signals of one backward sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    /// ∂L/∂(pre-activation) of each affine layer, in affine layout (`n_out × columns`),
    /// already carrying the 1/batch factor of the mean loss.
    pub deltas: Vec<Option<Matrix>>,
    /// ∂L/∂input, when requested.
    pub input_grad: Option<Matrix>,
}

fn check_tape(net: &Network, tape: &ForwardTape, labels: &[usize]) -> Result<()> {
    let stale = || Error::invalid("forward tape does not match network");
    if tape.z.len() != net.layers.len() + 1 || tape.pre.len() != net.layers.len() {
        return Err(stale());
    }
    let b = tape.batch_size();
    for (k, layer) in net.layers.iter().enumerate() {
        if tape.z[k].shape() != (layer.in_width(), b) || tape.z[k + 1].shape() != (layer.out_width(), b) {
            return Err(stale());
        }
        if let Some(a) = layer.affine() {
            let input = tape.affine_input(k);
            let pre_ok = tape.pre[k].as_ref().is_some_and(|p| p.shape() == (layer.out_width(), b));
            if input.rows() != a.weight.n_in() || !pre_ok {
                return Err(stale());
            }
        }
    }
    check_labels(labels, net.output_width(), b)
}

/// Backward sweep from the fused softmax cross-entropy loss.
pub fn backward(net: &Network, tape: &ForwardTape, labels: &[usize], want_input_grad: bool) -> Result<Adjoints> {
    check_tape(net, tape, labels)?;
    let b = tape.batch_size();
    let mut g = softmax_columns(tape.logits());
    for (j, &y) in labels.iter().enumerate() {
        g[(y, j)] -= 1.0;
    }
    g.map_inplace(|v| v / b as f64);

    let mut deltas = vec![None; net.layers.len()];
    for (k, layer) in net.layers.iter().enumerate().rev() {
        let need_input = k > 0 || want_input_grad;
        match layer {
            Layer::Linear(a) => {
                a.activation.backprop(&mut g, tape.pre[k].as_ref().expect("checked"));
                if need_input {
                    let gin = a.weight.apply_transpose(&g);
                    deltas[k] = Some(std::mem::replace(&mut g, gin));
                } else {
                    deltas[k] = Some(std::mem::replace(&mut g, Matrix::zeros(0, 0)));
                }
            }
            Layer::Conv { shape, affine } => {
                affine.activation.backprop(&mut g, tape.pre[k].as_ref().expect("checked"));
                let delta = conv::features_to_locations(&g, shape, b);
                if need_input {
                    let gcols = affine.weight.apply_transpose(&delta);
                    g = conv::fold(&gcols, shape, b)?;
                }
                deltas[k] = Some(delta);
            }
            Layer::MaxPool(p) => {
                let idx = tape.pool_argmax[k].as_ref().ok_or_else(|| Error::invalid("missing pool record"))?;
                g = conv::max_pool_backward(&g, idx, p);
            }
        }
    }
    Ok(Adjoints { deltas, input_grad: want_input_grad.then_some(g) })
}

/// Gradient of the loss with respect to a full weight matrix and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// ∂W = δ·inputᵀ and ∂b = δ·1 for one affine layer.
pub fn dense_gradient(delta: &Matrix, input: &Matrix) -> DenseGradient {
    let mut w = Matrix::zeros(delta.rows(), input.rows());
    gemm(1.0, delta, false, input, true, 0.0, &mut w);
    DenseGradient { weight: w, bias: delta.row_sums() }
}

/// Exact mean-over-batch gradients with respect to every full weight matrix and bias.
/// Low-rank layers report the gradient of their effective weight `U S Vᵀ`.
pub fn dense_backprop(net: &Network, tape: &ForwardTape, labels: &[usize]) -> Result<Vec<Option<DenseGradient>>> {
    let adj = backward(net, tape, labels, false)?;
    Ok(adj
        .deltas
        .iter()
        .enumerate()
        .map(|(k, d)| d.as_ref().map(|d| dense_gradient(d, tape.affine_input(k))))
        .collect())
}

/// Loss and accuracy of a network on a batch, without recording a tape.
pub fn evaluate(net: &Network, batch: &Batch) -> Result<(f64, f64)> {
    let (logits, _) = forward(net, &batch.inputs, false)?;
    Ok((cross_entropy_loss(&logits, &batch.labels)?, accuracy(&logits, &batch.labels)))
}
