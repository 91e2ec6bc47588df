//! Parameterised models: affine maps, single neurons, fully-connected networks
//! and one-dimensional linear regression.
//!
//! Every variant is stored as a chain of dense layers `σ(W z + b)`. The
//! variant tag only constrains the shape of that chain, so forward
//! evaluation, reverse-mode gradients and interval propagation share one
//! implementation.
//!
//! Parameter layout is fixed: layers in forward order, and within a layer the
//! weight matrix (row-major) followed by the bias vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("malformed model document: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Local derivative at pre-activation `z`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::None => 1.0,
        }
    }
}

/// Logistic function in the two-branch form that never overflows `exp`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Axis-aligned box `{x : lo <= x <= hi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxDoc", into = "BoxDoc")]
pub struct Hyperbox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxDoc {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<BoxDoc> for Hyperbox {
    type Error = ModelError;
    fn try_from(doc: BoxDoc) -> Result<Self> {
        Hyperbox::new(doc.lo, doc.hi)
    }
}

impl From<Hyperbox> for BoxDoc {
    fn from(b: Hyperbox) -> Self {
        BoxDoc { lo: b.lo, hi: b.hi }
    }
}

impl Hyperbox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(ModelError::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(ModelError::Invalid("box has zero dimensions".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l <= h) {
                return Err(ModelError::Invalid(format!(
                    "box bound {i}: lo {l} exceeds hi {h}"
                )));
            }
        }
        Ok(Hyperbox { lo, hi })
    }

    /// Degenerate box containing a single point.
    pub fn point(x: &[f64]) -> Self {
        Hyperbox {
            lo: x.to_vec(),
            hi: x.to_vec(),
        }
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn contains_box(&self, other: &Hyperbox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    /// Index of the widest dimension; the lowest index wins ties.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for i in 1..self.dim() {
            if self.width(i) > self.width(best) {
                best = i;
            }
        }
        best
    }

    /// Split along dimension `i` at its midpoint.
    pub fn bisect(&self, i: usize) -> (Hyperbox, Hyperbox) {
        let mid = 0.5 * (self.lo[i] + self.hi[i]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[i] = mid;
        right.lo[i] = mid;
        (left, right)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Number of distinct vertices (degenerate dimensions contribute a factor 1).
    pub fn vertex_count(&self) -> u128 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if l < h { 2u128 } else { 1 })
            .fold(1u128, |acc, k| acc.saturating_mul(k))
    }

    /// Vertices in ascending lexicographic order.
    pub fn vertices(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let free: Vec<usize> = (0..self.dim()).filter(|&i| self.lo[i] < self.hi[i]).collect();
        let count = 1u64 << free.len().min(63);
        (0..count).map(move |code| {
            let mut v = self.lo.clone();
            for (k, &dim) in free.iter().enumerate() {
                // First free dimension is the most significant bit.
                if code >> (free.len() - 1 - k) & 1 == 1 {
                    v[dim] = self.hi[dim];
                }
            }
            v
        })
    }
}

/// One dense layer `activation(W z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let rows = weights.len();
        if rows == 0 {
            return Err(ModelError::Invalid("layer has no rows".into()));
        }
        let cols = weights[0].len();
        if cols == 0 {
            return Err(ModelError::Invalid("layer has no columns".into()));
        }
        if let Some(bad) = weights.iter().find(|r| r.len() != cols) {
            return Err(ModelError::Dimension {
                expected: cols,
                got: bad.len(),
            });
        }
        Layer::from_flat(rows, cols, weights.concat(), bias, activation)
    }

    pub fn from_flat(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(ModelError::Dimension {
                expected: rows * cols,
                got: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(ModelError::Invalid(format!(
                "bias length {} does not match {} weight rows",
                bias.len(),
                rows
            )));
        }
        Ok(Layer {
            rows,
            cols,
            weights,
            bias,
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pre_activation(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let s: f64 = row.iter().zip(z).map(|(w, v)| w * v).sum();
            out.push(s + self.bias[r]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "affine")]
    Affine,
    #[serde(rename = "neuron")]
    Neuron,
    #[serde(rename = "fcnn")]
    Fcnn,
    #[serde(rename = "linreg1d")]
    LinReg1D,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Vec<ParamSlice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    layers: Vec<Layer>,
}

impl Model {
    pub fn affine(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        Model::from_layers(
            ModelKind::Affine,
            vec![Layer::new(weights, bias, Activation::None)?],
        )
    }

    pub fn neuron(w: Vec<f64>, b: f64, activation: Activation) -> Result<Self> {
        Model::from_layers(ModelKind::Neuron, vec![Layer::new(vec![w], vec![b], activation)?])
    }

    pub fn fcnn(layers: Vec<Layer>) -> Result<Self> {
        Model::from_layers(ModelKind::Fcnn, layers)
    }

    pub fn linreg1d(w: f64, b: f64) -> Self {
        Model {
            kind: ModelKind::LinReg1D,
            layers: vec![Layer {
                rows: 1,
                cols: 1,
                weights: vec![w],
                bias: vec![b],
                activation: Activation::None,
            }],
        }
    }

    /// Fully connected network with layer widths `dims`, hidden activation
    /// `hidden` and a linear output layer. Weights and biases are drawn
    /// uniformly from `±1/sqrt(fan_in)`.
    pub fn random_fcnn<R: rand::Rng + ?Sized>(
        rng: &mut R,
        dims: &[usize],
        hidden: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::Invalid("need at least two nonzero layer widths".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                let w = (0..d[1] * d[0]).map(|_| rng.gen_range(-bound..=bound)).collect();
                let b = (0..d[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
                let act = if i + 2 == dims.len() { Activation::None } else { hidden };
                Layer::from_flat(d[1], d[0], w, b, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Model::fcnn(layers)
    }

    pub fn from_layers(kind: ModelKind, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::Invalid("model has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(ModelError::Invalid(format!(
                    "layer {} expects {} inputs but layer {} produces {}",
                    i + 1,
                    pair[1].cols,
                    i,
                    pair[0].rows
                )));
            }
        }
        let single = layers.len() == 1;
        let first = &layers[0];
        match kind {
            ModelKind::Affine if !single || first.activation != Activation::None => {
                return Err(ModelError::Invalid(
                    "affine model must be a single layer without activation".into(),
                ));
            }
            ModelKind::Neuron
                if !single || first.rows != 1 || first.activation == Activation::None =>
            {
                return Err(ModelError::Invalid(
                    "neuron model must be one output with relu or sigmoid activation".into(),
                ));
            }
            ModelKind::LinReg1D
                if !single
                    || first.rows != 1
                    || first.cols != 1
                    || first.activation != Activation::None =>
            {
                return Err(ModelError::Invalid(
                    "linreg1d model must be a 1x1 layer without activation".into(),
                ));
            }
            _ => {}
        }
        Ok(Model { kind, layers })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    /// `(w, b)` of a 1-D linear regression model.
    pub fn as_linreg1d(&self) -> Option<(f64, f64)> {
        match self.kind {
            ModelKind::LinReg1D => Some((self.layers[0].weights[0], self.layers[0].bias[0])),
            _ => None,
        }
    }

    /// `(w, b, activation)` of a single neuron.
    pub fn as_neuron(&self) -> Option<(&[f64], f64, Activation)> {
        match self.kind {
            ModelKind::Neuron => {
                let l = &self.layers[0];
                Some((&l.weights, l.bias[0], l.activation))
            }
            _ => None,
        }
    }

    /// True when the output is an affine function of the input.
    pub fn is_affine_in_input(&self) -> bool {
        self.layers.iter().all(|l| l.activation == Activation::None)
    }

    /// True when, for a fixed input, the output is linear in the parameters.
    pub fn is_linear_in_params(&self) -> bool {
        self.layers.len() == 1 && self.layers[0].activation == Activation::None
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn param_layout(&self) -> Vec<ParamSlice> {
        let mut layout = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layout.push(ParamSlice {
                name: format!("layer{i}.weight"),
                shape: vec![l.rows, l.cols],
            });
            layout.push(ParamSlice {
                name: format!("layer{i}.bias"),
                shape: vec![l.rows],
            });
        }
        layout
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            values: self.param_vec(),
            layout: self.param_layout(),
        }
    }

    pub fn param_vec(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            theta.extend_from_slice(&l.weights);
            theta.extend_from_slice(&l.bias);
        }
        theta
    }

    /// A copy of this model carrying the parameter vector `theta`.
    pub fn with_params(&self, theta: &[f64]) -> Result<Model> {
        if theta.len() != self.param_count() {
            return Err(ModelError::Dimension {
                expected: self.param_count(),
                got: theta.len(),
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for l in &mut out.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&theta[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&theta[offset..offset + nb]);
            offset += nb;
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in &self.layers {
            l.pre_activation(&cur, &mut next);
            for v in next.iter_mut() {
                *v = l.activation.apply(*v);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Reverse-mode gradient of `upstreamᵀ N(x)` with respect to the parameters
    /// and the input.
    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(ModelError::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        // inputs[i] feeds layer i; pre[i] is its pre-activation.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut z = Vec::new();
            l.pre_activation(&cur, &mut z);
            let next: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(z);
        }

        let mut dtheta = vec![0.0; self.param_count()];
        let mut offset = self.param_count();
        let mut delta = upstream.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = delta
                .iter()
                .zip(&pre[i])
                .map(|(d, &z)| d * l.activation.derivative(z))
                .collect();
            offset -= l.param_count();
            let (dw, db) = dtheta[offset..offset + l.param_count()].split_at_mut(l.weights.len());
            for r in 0..l.rows {
                for c in 0..l.cols {
                    dw[r * l.cols + c] = dz[r] * inputs[i][c];
                }
                db[r] = dz[r];
            }
            let mut back = vec![0.0; l.cols];
            for r in 0..l.rows {
                let row = &l.weights[r * l.cols..(r + 1) * l.cols];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * dz[r];
                }
            }
            delta = back;
        }
        Ok((dtheta, delta))
    }

    /// Sound output bounds over an input box via interval arithmetic.
    pub fn interval_forward(&self, input: &Hyperbox) -> Result<Hyperbox> {
        self.interval_prefix(input, self.layers.len())
    }

    /// Interval bounds on the output of the first `depth` layers.
    pub fn interval_prefix(&self, input: &Hyperbox, depth: usize) -> Result<Hyperbox> {
        self.check_input(input.lo())?;
        if depth > self.layers.len() {
            return Err(ModelError::Invalid(format!(
                "depth {depth} exceeds {} layers",
                self.layers.len()
            )));
        }
        let mut lo = input.lo.clone();
        let mut hi = input.hi.clone();
        for l in &self.layers[..depth] {
            let mut nlo = Vec::with_capacity(l.rows);
            let mut nhi = Vec::with_capacity(l.rows);
            for r in 0..l.rows {
                let row = &l.weights[r * l.cols..(r + 1) * l.cols];
                let mut a = l.bias[r];
                let mut b = l.bias[r];
                let mut mag = l.bias[r].abs();
                for ((w, zl), zh) in row.iter().zip(&lo).zip(&hi) {
                    if *w >= 0.0 {
                        a += w * zl;
                        b += w * zh;
                    } else {
                        a += w * zh;
                        b += w * zl;
                    }
                    mag += w.abs() * zl.abs().max(zh.abs());
                }
                // Widen by a bound on the rounding error of either summation
                // order so the forward pass always lands inside.
                let slack = 2.0 * (l.cols + 2) as f64 * f64::EPSILON * mag + f64::MIN_POSITIVE;
                let (fa, fb) = (l.activation.apply(a - slack), l.activation.apply(b + slack));
                let out = 4.0 * f64::EPSILON;
                match l.activation {
                    Activation::Sigmoid => {
                        nlo.push(fa - out * fa.abs());
                        nhi.push(fb + out * fb.abs());
                    }
                    _ => {
                        nlo.push(fa);
                        nhi.push(fb);
                    }
                }
            }
            lo = nlo;
            hi = nhi;
        }
        Ok(Hyperbox { lo, hi })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDoc::from(self)).expect("model document serialises")
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let doc: ModelDoc =
            serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
        Model::try_from(doc)
    }
}

/// On-disk model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub kind: ModelKind,
    pub layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDoc {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl From<&Model> for ModelDoc {
    fn from(m: &Model) -> Self {
        ModelDoc {
            kind: m.kind,
            layers: m
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weights: l.weights.chunks(l.cols).map(<[f64]>::to_vec).collect(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
            meta: None,
        }
    }
}

impl TryFrom<ModelDoc> for Model {
    type Error = ModelError;
    fn try_from(doc: ModelDoc) -> Result<Model> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| Layer::new(l.weights, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        Model::from_layers(doc.kind, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_fcnn(rng: &mut ChaCha8Rng, dims: &[usize], act: Activation) -> Model {
        Model::random_fcnn(rng, dims, act).unwrap()
    }

    #[test]
    fn forward_examples() {
        let m = Model::affine(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(m.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        let n = Model::neuron(vec![1.0, -1.0], 0.0, Activation::Relu).unwrap();
        assert_eq!(n.forward(&[2.0, 3.0]).unwrap(), vec![0.0]);

        // ReLU([-θ; θ - x]) with θ = 2.
        let theta = 2.0;
        let lemma = Model::fcnn(vec![Layer::new(
            vec![vec![0.0], vec![-1.0]],
            vec![-theta, theta],
            Activation::Relu,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(lemma.forward(&[5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = Model::linreg1d(1.0, 0.0);
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(ModelError::Dimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn affine_input_gradient_is_transpose() {
        let m = Model::affine(vec![vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, -6.0]], vec![0.5, 1.0])
            .unwrap();
        let (_, dx) = m.grad(&[0.3, -0.2, 0.9], &[2.0, -1.0]).unwrap();
        assert_eq!(dx, vec![2.0 + 4.0, 4.0 - 5.0, 6.0 + 6.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        assert_eq!(Activation::Sigmoid.derivative(0.0), 0.25);
        let n = Model::neuron(vec![1.0], 0.0, Activation::Sigmoid).unwrap();
        let (dtheta, dx) = n.grad(&[0.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.25]);
        assert_eq!(dtheta, vec![0.0, 0.25]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(3.0) - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-16);
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let n = Model::neuron(vec![1.0], 0.0, Activation::Relu).unwrap();
        let (dtheta, dx) = n.grad(&[0.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(dtheta, vec![0.0, 0.0]);
    }

    #[test]
    fn interval_examples() {
        let m = Model::affine(vec![vec![1.0, -1.0]], vec![0.0]).unwrap();
        let out = m
            .interval_forward(&Hyperbox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap())
            .unwrap();
        // Bounds are widened outward by a few ulps.
        assert!(out.lo()[0] <= -1.0 && out.lo()[0] > -1.0 - 1e-14);
        assert!(out.hi()[0] >= 1.0 && out.hi()[0] < 1.0 + 1e-14);

        let relu =
            Model::fcnn(vec![Layer::new(vec![vec![1.0]], vec![0.0], Activation::Relu).unwrap()])
                .unwrap();
        let out = relu
            .interval_forward(&Hyperbox::new(vec![-1.0], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(out.lo()[0], 0.0);
        assert!(out.hi()[0] >= 1.0 && out.hi()[0] < 1.0 + 1e-14);
    }

    #[test]
    fn interval_contains_sampled_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_fcnn(&mut rng, &[2, 4, 2], Activation::Relu);
        let b = Hyperbox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let out = m.interval_forward(&b).unwrap();
        for _ in 0..10_000 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            assert!(out.contains(&m.forward(&x).unwrap()));
        }
    }

    #[test]
    fn vertices_are_lexicographic() {
        let b = Hyperbox::new(vec![0.0, 5.0, -1.0], vec![1.0, 5.0, 1.0]).unwrap();
        let v: Vec<_> = b.vertices().collect();
        assert_eq!(b.vertex_count(), 4);
        assert_eq!(
            v,
            vec![
                vec![0.0, 5.0, -1.0],
                vec![0.0, 5.0, 1.0],
                vec![1.0, 5.0, -1.0],
                vec![1.0, 5.0, 1.0]
            ]
        );
    }

    #[test]
    fn layout_matches_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_fcnn(&mut rng, &[3, 5, 4, 2], Activation::Sigmoid);
        let p = m.params();
        assert_eq!(p.layout.iter().map(ParamSlice::len).sum::<usize>(), p.values.len());
        assert_eq!(p.layout[0].shape, vec![5, 3]);
        assert_eq!(p.layout[1].name, "layer0.bias");
    }

    #[test]
    fn serialization_examples() {
        let m = Model::linreg1d(0.5, -1.0);
        let back = Model::from_json(&m.to_json()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(-100.0..100.0)];
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }

        let bad = r#"{"kind":"fcnn","layers":[{"weights":[[1.0,2.0],[3.0,4.0]],"bias":[1.0],"activation":"relu"}]}"#;
        assert!(matches!(Model::from_json(bad), Err(ModelError::Invalid(_))));
        assert!(matches!(Model::from_json("{"), Err(ModelError::Malformed(_))));

        let deep = random_fcnn(&mut rng, &[2, 3, 3, 1], Activation::Relu);
        let back = Model::from_json(&deep.to_json()).unwrap();
        let a = deep.param_vec();
        let b = back.param_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn kind_shape_rules_are_enforced() {
        assert!(Model::neuron(vec![1.0], 0.0, Activation::None).is_err());
        let two = vec![
            Layer::new(vec![vec![1.0]], vec![0.0], Activation::None).unwrap(),
            Layer::new(vec![vec![1.0]], vec![0.0], Activation::None).unwrap(),
        ];
        assert!(Model::from_layers(ModelKind::Affine, two.clone()).is_err());
        assert!(Model::fcnn(two).is_ok());
        let mismatch = vec![
            Layer::new(vec![vec![1.0], vec![2.0]], vec![0.0, 0.0], Activation::Relu).unwrap(),
            Layer::new(vec![vec![1.0, 1.0, 1.0]], vec![0.0], Activation::None).unwrap(),
        ];
        assert!(Model::fcnn(mismatch).is_err());
    }
}
