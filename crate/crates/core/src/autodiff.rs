//! Reverse-mode differentiation for chains of linear layers and pointwise
//! activations.
//!
//! Tapped linear layers emit a [`LayerTap`] on every backward pass: the layer
//! input `X` (n×l) and the gradient of the mean loss with respect to the
//! layer's pre-activation output `Y = W X` (m×l). The weight gradient is then
//! exactly `G · Xᵀ`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "none" | "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Mean over samples of `logsumexp(y) - y[class]`.
    SoftmaxCrossEntropy,
    /// Mean over samples of `½‖y − t‖²`.
    MeanSquaredError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCrossEntropy => "softmax_ce",
            LossKind::MeanSquaredError => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax_ce" | "cross_entropy" => Some(LossKind::SoftmaxCrossEntropy),
            "mse" => Some(LossKind::MeanSquaredError),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub tapped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Linear(LinearLayer),
    Activation(Activation),
}

/// A feed-forward chain `node₀ → node₁ → …` followed by a loss.
///
/// Linear layers are numbered in order of appearance, skipping activations;
/// that number is the `layer_id` used throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    nodes: Vec<Node>,
    loss: LossKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

/// Samples are columns of `inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        let l = inputs.cols();
        match &targets {
            Targets::Classes(c) if c.len() != l => {
                return Err(Error::shape("batch", format!("{} inputs but {} class labels", l, c.len())))
            }
            Targets::Values(t) if t.cols() != l => {
                return Err(Error::shape("batch", format!("{} inputs but {} target columns", l, t.cols())))
            }
            _ => {}
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Statistics captured at one tapped linear layer during backward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub layer_id: usize,
    /// Layer input, n×l.
    pub x: Matrix,
    /// Gradient of the loss with respect to the layer output, m×l.
    pub g: Matrix,
}

impl LayerTap {
    pub fn new(layer_id: usize, x: Matrix, g: Matrix) -> Result<Self> {
        if x.cols() != g.cols() {
            return Err(Error::shape("layer_tap", format!("X has {} columns, G has {}", x.cols(), g.cols())));
        }
        Ok(LayerTap { layer_id, x, g })
    }

    /// Number of samples (columns).
    pub fn columns(&self) -> usize {
        self.x.cols()
    }

    /// `G · Xᵀ`, the weight gradient this tap implies.
    pub fn weight_gradient(&self) -> Result<Matrix> {
        matmul_nt(&self.g, &self.x)
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input of each node, in node order.
    node_inputs: Vec<Matrix>,
    output: Matrix,
    targets: Targets,
    loss: f64,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One per linear layer, same shape as the weight.
    pub grads: Vec<Matrix>,
    /// One per tapped linear layer, in layer order.
    pub taps: Vec<LayerTap>,
}

impl Model {
    pub fn new(nodes: Vec<Node>, loss: LossKind) -> Result<Self> {
        let mut prev: Option<usize> = None;
        let mut linear_count = 0;
        for node in &nodes {
            if let Node::Linear(layer) = node {
                if let Some(p) = prev {
                    if layer.weight.cols() != p {
                        return Err(Error::shape(
                            "model",
                            format!(
                                "layer {} expects input {} but previous layer outputs {}",
                                linear_count,
                                layer.weight.cols(),
                                p
                            ),
                        ));
                    }
                }
                prev = Some(layer.weight.rows());
                linear_count += 1;
            }
        }
        if linear_count == 0 {
            return Err(Error::InvalidArgument("model needs at least one linear layer".into()));
        }
        Ok(Model { nodes, loss })
    }

    /// Multi-layer perceptron with `dims = [n₀, n₁, …, n_L]`, the given
    /// activation between linear layers, and Glorot-normal weights.
    pub fn mlp<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        loss: LossKind,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer dims {dims:?}")));
        }
        let mut nodes = Vec::new();
        for k in 0..dims.len() - 1 {
            let (n, m) = (dims[k], dims[k + 1]);
            let std = (2.0 / (n + m) as f64).sqrt();
            let weight = Matrix::random_normal(m, n, rng).scaled(std);
            nodes.push(Node::Linear(LinearLayer { weight, tapped: true }));
            if k + 2 < dims.len() && hidden != Activation::Identity {
                nodes.push(Node::Activation(hidden));
            }
        }
        Model::new(nodes, loss)
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Linear(l) => Some(l),
            Node::Activation(_) => None,
        })
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.nodes.iter_mut().filter_map(|n| match n {
            Node::Linear(l) => Some(l),
            Node::Activation(_) => None,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers().count()
    }

    pub fn layer(&self, id: usize) -> Result<&LinearLayer> {
        let count = self.layer_count();
        self.layers().nth(id).ok_or(Error::IndexOutOfRange { index: id, len: count })
    }

    pub fn weight(&self, id: usize) -> Result<&Matrix> {
        Ok(&self.layer(id)?.weight)
    }

    /// Replaces a layer weight; the shape must not change.
    pub fn set_weight(&mut self, id: usize, weight: Matrix) -> Result<()> {
        let count = self.layer_count();
        let layer = self.layers_mut().nth(id).ok_or(Error::IndexOutOfRange { index: id, len: count })?;
        if layer.weight.shape() != weight.shape() {
            return Err(Error::shape(
                "set_weight",
                format!("{:?} cannot replace {:?}", weight.shape(), layer.weight.shape()),
            ));
        }
        layer.weight = weight;
        Ok(())
    }

    /// Marks exactly the listed layers as tapped.
    pub fn set_tapped(&mut self, ids: &[usize]) -> Result<()> {
        let count = self.layer_count();
        if let Some(&bad) = ids.iter().find(|&&i| i >= count) {
            return Err(Error::IndexOutOfRange { index: bad, len: count });
        }
        for (k, layer) in self.layers_mut().enumerate() {
            layer.tapped = ids.contains(&k);
        }
        Ok(())
    }

    pub fn tapped_ids(&self) -> Vec<usize> {
        self.layers().enumerate().filter(|(_, l)| l.tapped).map(|(k, _)| k).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers().next().map_or(0, |l| l.weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers().last().map_or(0, |l| l.weight.rows())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.loss.hash(&mut h);
        for node in &self.nodes {
            match node {
                Node::Linear(l) => {
                    0u8.hash(&mut h);
                    l.weight.shape().hash(&mut h);
                    l.tapped.hash(&mut h);
                    for v in l.weight.as_slice() {
                        v.to_bits().hash(&mut h);
                    }
                }
                Node::Activation(a) => {
                    1u8.hash(&mut h);
                    a.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Loss only, without building a cache.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        forward(self, batch).map(|(loss, _)| loss)
    }

    /// Network output for the given inputs (m×l).
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let (out, _) = self.propagate(inputs)?;
        Ok(out)
    }

    fn propagate(&self, inputs: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        if inputs.rows() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("model expects {} input features, batch has {}", self.input_dim(), inputs.rows()),
            ));
        }
        let mut node_inputs = Vec::with_capacity(self.nodes.len());
        let mut current = inputs.clone();
        let mut layer_id = 0;
        for node in &self.nodes {
            let next = match node {
                Node::Linear(l) => {
                    let y = matmul(&l.weight, &current).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { layer: layer_id },
                        other => other,
                    })?;
                    layer_id += 1;
                    y
                }
                Node::Activation(a) => Matrix::from_fn(current.rows(), current.cols(), |i, j| a.apply(current[(i, j)])),
            };
            node_inputs.push(std::mem::replace(&mut current, next));
        }
        Ok((current, node_inputs))
    }
}

fn check_targets(model: &Model, batch: &Batch) -> Result<()> {
    let m = model.output_dim();
    match (&batch.targets, model.loss) {
        (Targets::Classes(c), LossKind::SoftmaxCrossEntropy) => {
            if let Some(&bad) = c.iter().find(|&&k| k >= m) {
                return Err(Error::InvalidArgument(format!("class index {bad} >= output dimension {m}")));
            }
        }
        (Targets::Values(t), LossKind::MeanSquaredError) => {
            if t.rows() != m {
                return Err(Error::shape("forward", format!("targets have {} rows, output has {}", t.rows(), m)));
            }
        }
        _ => return Err(Error::InvalidArgument("target kind does not match loss kind".into())),
    }
    Ok(())
}

fn log_sum_exp(col: &[f64]) -> f64 {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean loss and its gradient with respect to the network output.
fn loss_and_grad(out: &Matrix, targets: &Targets, kind: LossKind) -> (f64, Matrix) {
    let (m, l) = out.shape();
    let inv_l = 1.0 / l as f64;
    let mut grad = Matrix::zeros(m, l);
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
            for (j, &c) in classes.iter().enumerate() {
                let col = out.column(j);
                let lse = log_sum_exp(&col);
                total += lse - col[c];
                for i in 0..m {
                    let p = (col[i] - lse).exp();
                    grad[(i, j)] = (p - if i == c { 1.0 } else { 0.0 }) * inv_l;
                }
            }
        }
        (LossKind::MeanSquaredError, Targets::Values(t)) => {
            for j in 0..l {
                for i in 0..m {
                    let d = out[(i, j)] - t[(i, j)];
                    total += 0.5 * d * d;
                    grad[(i, j)] = d * inv_l;
                }
            }
        }
        _ => unreachable!("targets validated before loss evaluation"),
    }
    (total * inv_l, grad)
}

/// Runs the network on a batch, returning the mean loss and a cache.
pub fn forward(model: &Model, batch: &Batch) -> Result<(f64, ForwardCache)> {
    check_targets(model, batch)?;
    let (output, node_inputs) = model.propagate(&batch.inputs)?;
    let (loss, _) = loss_and_grad(&output, &batch.targets, model.loss);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { layer: model.layer_count() - 1 });
    }
    let cache = ForwardCache {
        fingerprint: model.fingerprint(),
        node_inputs,
        output,
        targets: batch.targets.clone(),
        loss,
    };
    Ok((loss, cache))
}

/// Gradients of the mean loss with respect to every linear weight, plus taps.
pub fn backward(model: &Model, cache: &ForwardCache) -> Result<Gradients> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache);
    }
    let (_, d_out) = loss_and_grad(&cache.output, &cache.targets, model.loss);
    backward_from_output_grad(model, cache, d_out)
}

/// Backward pass seeded with an arbitrary `∂L/∂output` (m×l).
pub fn backward_from_output_grad(model: &Model, cache: &ForwardCache, d_out: Matrix) -> Result<Gradients> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache);
    }
    if d_out.shape() != cache.output.shape() {
        return Err(Error::shape(
            "backward",
            format!("output gradient {:?} vs output {:?}", d_out.shape(), cache.output.shape()),
        ));
    }
    let layer_count = model.layer_count();
    let mut grads: Vec<Option<Matrix>> = vec![None; layer_count];
    let mut taps = Vec::new();
    let mut layer_id = layer_count;
    let mut delta = d_out;
    for (node, input) in model.nodes.iter().zip(&cache.node_inputs).rev() {
        match node {
            Node::Linear(l) => {
                layer_id -= 1;
                grads[layer_id] = Some(matmul_nt(&delta, input)?);
                let next = matmul_tn(&l.weight, &delta)?;
                if l.tapped {
                    taps.push(LayerTap { layer_id, x: input.clone(), g: delta });
                }
                delta = next;
            }
            Node::Activation(a) => {
                delta = Matrix::from_fn(delta.rows(), delta.cols(), |i, j| delta[(i, j)] * a.derivative(input[(i, j)]));
            }
        }
    }
    taps.reverse();
    Ok(Gradients { grads: grads.into_iter().map(|g| g.expect("every layer visited")).collect(), taps })
}

/// Central-difference gradient `(L(w+ε) − L(w−ε)) / 2ε` for every weight.
pub fn finite_diff_grad(model: &Model, batch: &Batch, eps: f64) -> Result<Vec<Matrix>> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.layer_count());
    for k in 0..model.layer_count() {
        let base = model.weight(k)?.clone();
        let mut grad = Matrix::zeros(base.rows(), base.cols());
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let mut w = base.clone();
                w[(i, j)] = base[(i, j)] + eps;
                probe.set_weight(k, w.clone())?;
                let plus = probe.loss(batch)?;
                w[(i, j)] = base[(i, j)] - eps;
                probe.set_weight(k, w)?;
                let minus = probe.loss(batch)?;
                grad[(i, j)] = (plus - minus) / (2.0 * eps);
            }
        }
        probe.set_weight(k, base)?;
        out.push(grad);
    }
    Ok(out)
}

/// One step of plain gradient descent on the layers flagged in
/// `trainable`. Returns the updated model and the loss before the update.
pub fn train_step(model: &Model, batch: &Batch, trainable: &[bool], lr: f64) -> Result<(Model, f64)> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
    }
    if trainable.len() != model.layer_count() {
        return Err(Error::shape(
            "train_step",
            format!("mask has {} entries for {} layers", trainable.len(), model.layer_count()),
        ));
    }
    let (loss, cache) = forward(model, batch)?;
    let grads = backward(model, &cache)?.grads;
    let mut updated = model.clone();
    if lr > 0.0 {
        for (k, grad) in grads.iter().enumerate() {
            if trainable[k] {
                let mut w = updated.weight(k)?.clone();
                w.axpy(-lr, grad)?;
                updated.set_weight(k, w)?;
            }
        }
    }
    Ok((updated, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: Matrix, loss: LossKind) -> Model {
        Model::new(vec![Node::Linear(LinearLayer { weight, tapped: true })], loss).unwrap()
    }

    #[test]
    fn mse_identity_is_zero() {
        let model = single(Matrix::identity(3), LossKind::MeanSquaredError);
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let batch = Batch::new(x.clone(), Targets::Values(x)).unwrap();
        assert_eq!(model.loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let model = single(Matrix::zeros(5, 2), LossKind::SoftmaxCrossEntropy);
        let batch = Batch::new(Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap(), Targets::Classes(vec![0, 4])).unwrap();
        assert!((model.loss(&batch).unwrap() - 5f64.ln()).abs() <= 1e-15);
    }

    #[test]
    fn two_layer_forward_matches_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::mlp(&[3, 4, 2], Activation::Tanh, LossKind::MeanSquaredError, &mut rng).unwrap();
        let x = Matrix::random_normal(3, 5, &mut rng);
        let t = Matrix::random_normal(2, 5, &mut rng);
        let batch = Batch::new(x.clone(), Targets::Values(t.clone())).unwrap();

        let (w1, w2) = (model.weight(0).unwrap(), model.weight(1).unwrap());
        let mut total = 0.0;
        for s in 0..5 {
            let mut h = [0.0; 4];
            for i in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += w1[(i, k)] * x[(k, s)];
                }
                h[i] = acc.tanh();
            }
            for i in 0..2 {
                let mut y = 0.0;
                for k in 0..4 {
                    y += w2[(i, k)] * h[k];
                }
                total += 0.5 * (y - t[(i, s)]).powi(2);
            }
        }
        assert!((model.loss(&batch).unwrap() - total / 5.0).abs() <= 1e-12);
    }

    #[test]
    fn sum_loss_hand_example() {
        let model = single(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), LossKind::MeanSquaredError);
        let x = Matrix::column_vector(&[1.0, 1.0]).unwrap();
        let batch = Batch::new(x, Targets::Values(Matrix::zeros(2, 1))).unwrap();
        let (_, cache) = forward(&model, &batch).unwrap();
        // loss = sum of outputs, so ∂L/∂Y = 1.
        let g = backward_from_output_grad(&model, &cache, Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.taps[0].g, Matrix::column_vector(&[1.0, 1.0]).unwrap());
        assert_eq!(g.grads[0], Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = single(Matrix::random_normal(2, 3, &mut rng), LossKind::SoftmaxCrossEntropy);
        let batch = Batch::new(Matrix::zeros(3, 4), Targets::Classes(vec![0, 1, 1, 0])).unwrap();
        let (_, cache) = forward(&model, &batch).unwrap();
        let g = backward(&model, &cache).unwrap();
        assert_eq!(g.grads[0].max_abs(), 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = single(Matrix::random_normal(2, 2, &mut rng), LossKind::MeanSquaredError);
        let batch = Batch::new(Matrix::random_normal(2, 3, &mut rng), Targets::Values(Matrix::zeros(2, 3))).unwrap();
        let (_, cache) = forward(&model, &batch).unwrap();
        model.set_weight(0, Matrix::identity(2)).unwrap();
        assert!(matches!(backward(&model, &cache), Err(Error::StaleCache)));
    }

    #[test]
    fn finite_diff_examples() {
        // L(w) = ½(w·1 − 0)², grad at w=2 is 2.
        let model = single(Matrix::from_vec(1, 1, vec![2.0]).unwrap(), LossKind::MeanSquaredError);
        let batch = Batch::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), Targets::Values(Matrix::zeros(1, 1))).unwrap();
        let g = finite_diff_grad(&model, &batch, 1e-5).unwrap();
        assert!((g[0][(0, 0)] - 2.0).abs() <= 1e-8);

        let model = single(Matrix::identity(2), LossKind::MeanSquaredError);
        let x = Matrix::from_rows(&[&[1.0, 0.5], &[-1.0, 2.0]]).unwrap();
        let batch = Batch::new(x.clone(), Targets::Values(x)).unwrap();
        let g = finite_diff_grad(&model, &batch, 1e-5).unwrap();
        assert!(g[0].max_abs() <= 1e-8);
        assert!(finite_diff_grad(&model, &batch, 0.0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::mlp(&[4, 5, 3], Activation::Tanh, LossKind::SoftmaxCrossEntropy, &mut rng).unwrap();
        let batch = Batch::new(Matrix::random_normal(4, 6, &mut rng), Targets::Classes(vec![0, 1, 2, 2, 1, 0])).unwrap();
        let (_, cache) = forward(&model, &batch).unwrap();
        let g = backward(&model, &cache).unwrap();
        let fd = finite_diff_grad(&model, &batch, 1e-5).unwrap();
        for (a, b) in g.grads.iter().zip(&fd) {
            let scale = a.max_abs().max(1e-8);
            assert!(a.max_abs_diff(b) / scale <= 1e-5);
        }
        for tap in &g.taps {
            assert!(tap.weight_gradient().unwrap().max_abs_diff(&g.grads[tap.layer_id]) <= 1e-12);
        }
    }

    #[test]
    fn untapped_layers_emit_no_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = Model::mlp(&[2, 3, 2], Activation::Relu, LossKind::MeanSquaredError, &mut rng).unwrap();
        model.set_tapped(&[1]).unwrap();
        let batch = Batch::new(Matrix::random_normal(2, 3, &mut rng), Targets::Values(Matrix::zeros(2, 3))).unwrap();
        let (_, cache) = forward(&model, &batch).unwrap();
        let g = backward(&model, &cache).unwrap();
        assert_eq!(g.taps.len(), 1);
        assert_eq!(g.taps[0].layer_id, 1);
        assert_eq!(g.grads.len(), 2);
    }

    #[test]
    fn train_step_masks_and_zero_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Model::mlp(&[3, 3, 2], Activation::Tanh, LossKind::MeanSquaredError, &mut rng).unwrap();
        let batch = Batch::new(Matrix::random_normal(3, 4, &mut rng), Targets::Values(Matrix::random_normal(2, 4, &mut rng))).unwrap();
        let (same, _) = train_step(&model, &batch, &[true, true], 0.0).unwrap();
        assert_eq!(same, model);
        let (stepped, _) = train_step(&model, &batch, &[false, true], 0.1).unwrap();
        assert_eq!(stepped.weight(0).unwrap(), model.weight(0).unwrap());
        assert_ne!(stepped.weight(1).unwrap(), model.weight(1).unwrap());
    }

    #[test]
    fn convex_least_squares_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::random_normal(3, 64, &mut rng);
        let w_star = Matrix::random_normal(2, 3, &mut rng);
        let t = matmul(&w_star, &x).unwrap();
        let batch = Batch::new(x, Targets::Values(t)).unwrap();
        let mut model = single(Matrix::zeros(2, 3), LossKind::MeanSquaredError);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let (next, loss) = train_step(&model, &batch, &[true], 0.1).unwrap();
            assert!(loss <= prev);
            prev = loss;
            model = next;
        }
        assert!(model.loss(&batch).unwrap() <= 1e-6);
        // Realizable targets: the least-squares optimum is W*.
        assert!(model.weight(0).unwrap().max_abs_diff(&w_star) <= 1e-3);
    }

    #[test]
    fn model_rejects_incompatible_dims() {
        let nodes = vec![
            Node::Linear(LinearLayer { weight: Matrix::zeros(3, 2), tapped: true }),
            Node::Linear(LinearLayer { weight: Matrix::zeros(2, 4), tapped: true }),
        ];
        assert!(matches!(Model::new(nodes, LossKind::MeanSquaredError), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bad_class_index_rejected() {
        let model = single(Matrix::zeros(2, 2), LossKind::SoftmaxCrossEntropy);
        let batch = Batch::new(Matrix::zeros(2, 1), Targets::Classes(vec![2])).unwrap();
        assert!(forward(&model, &batch).is_err());
    }
}
