//! Linear and MLP classifiers stored as one flat parameter vector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of a fully connected classifier. Empty `hidden_dims` gives a
/// linear softmax model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Location of one layer's weights inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "every layer width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        Ok(())
    }

    /// Weight then bias for each layer, in order, each weight row-major
    /// `[fan_in, fan_out]`.
    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let l = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .last()
            .map_or(0, |l| l.bias_offset + l.fan_out)
    }
}

/// A classifier: its architecture and flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub theta: Vec<f64>,
}

pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; spec.param_count()];
    for l in spec.layers() {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        for w in &mut theta[l.weight_offset..l.bias_offset] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(ModelParams {
        spec: spec.clone(),
        theta,
    })
}

impl ModelParams {
    pub fn new(spec: ModelSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(Error::config(
                "theta",
                format!("expected {} parameters, got {}", spec.param_count(), theta.len()),
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(ModelParams { spec, theta })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn theta_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.theta.len()], self.theta.clone())
    }

    /// Logits without recording a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        let layers = self.spec.layers();
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            let w = Tensor::from_parts(
                vec![l.fan_in, l.fan_out],
                self.theta[l.weight_offset..l.bias_offset].to_vec(),
            );
            let b = &self.theta[l.bias_offset..l.bias_offset + l.fan_out];
            let mut z = tensor::matmul(&h, &w)?.into_data();
            for row in z.chunks_mut(l.fan_out) {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                    if i + 1 < layers.len() {
                        *v = v.max(0.0);
                    }
                }
            }
            h = Tensor::from_parts(vec![x.rows(), l.fan_out], z);
        }
        h.check_finite("forward_logits")?;
        Ok(h)
    }

    /// Copy with the output layer widened to `num_classes`. New output
    /// columns get a fresh uniform init and zero bias; existing weights are kept.
    pub fn grow_head(&self, num_classes: usize, seed: u64) -> Result<ModelParams> {
        let old = self.spec.num_classes;
        if num_classes < old {
            return Err(Error::config("num_classes", "head can only grow"));
        }
        if num_classes == old {
            return Ok(self.clone());
        }
        let spec = ModelSpec {
            num_classes,
            ..self.spec.clone()
        };
        let old_last = *self.spec.layers().last().expect("at least one layer");
        let mut theta = self.theta[..old_last.weight_offset].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (old_last.fan_in as f64).sqrt();
        for r in 0..old_last.fan_in {
            let row = &self.theta[old_last.weight_offset + r * old..old_last.weight_offset + (r + 1) * old];
            theta.extend_from_slice(row);
            for _ in old..num_classes {
                theta.push(rng.random_range(-bound..bound));
            }
        }
        theta.extend_from_slice(&self.theta[old_last.bias_offset..old_last.bias_offset + old]);
        theta.extend(std::iter::repeat_n(0.0, num_classes - old));
        ModelParams::new(spec, theta)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let m: ModelParams = serde_json::from_slice(&std::fs::read(path)?)?;
        ModelParams::new(m.spec, m.theta)
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_logits",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    Ok(())
}

/// Records the forward pass of `spec` with flat parameters `theta` on `x`.
pub fn forward_logits(tape: &mut Tape, spec: &ModelSpec, theta: Var, x: Var) -> Result<Var> {
    check_input(spec, tape.value(x))?;
    if tape.value(theta).len() != spec.param_count() {
        return Err(Error::ShapeMismatch {
            op: "forward_logits",
            lhs: tape.shape(theta).to_vec(),
            rhs: vec![spec.param_count()],
        });
    }
    let layers = spec.layers();
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let w = tape.slice(theta, l.weight_offset, &[l.fan_in, l.fan_out])?;
        let b = tape.slice(theta, l.bias_offset, &[l.fan_out])?;
        let z = tape.matmul(h, w)?;
        h = tape.add_row_bias(z, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Per-example training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// `0.5 * ||logits - onehot(y)||^2`, quadratic in the parameters of a linear model.
    SquaredError,
}

pub(crate) fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut d = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        d[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], d)
}

/// Loss of each row of `logits` against `labels`, as a `[B]` node.
pub fn per_example_loss(tape: &mut Tape, loss: Loss, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = match tape.shape(logits) {
        [b, k] => (*b, *k),
        s => {
            return Err(Error::ShapeMismatch {
                op: "loss",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    if b != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: vec![b, k],
            rhs: vec![labels.len()],
        });
    }
    let target = tape.constant(one_hot(labels, k)?)?;
    match loss {
        Loss::CrossEntropy => {
            let lp = tape.log_softmax(logits)?;
            let picked = tape.mul(lp, target)?;
            let s = tape.row_sum(picked)?;
            tape.scale(s, -1.0)
        }
        Loss::SquaredError => {
            let r = tape.sub(logits, target)?;
            let r2 = tape.mul(r, r)?;
            let s = tape.row_sum(r2)?;
            tape.scale(s, 0.5)
        }
    }
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = per_example_loss(tape, Loss::CrossEntropy, logits, labels)?;
    tape.mean(per)
}

/// Per-example loss values without a tape.
pub fn loss_values(loss: Loss, logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let k = logits.cols();
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: k,
        });
    }
    Ok(match loss {
        Loss::CrossEntropy => {
            let lp = tensor::log_softmax(logits)?;
            labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -lp.row(i)[y])
                .collect()
        }
        Loss::SquaredError => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                logits
                    .row(i)
                    .iter()
                    .enumerate()
                    .map(|(j, &z)| {
                        let t = if j == y { 1.0 } else { 0.0 };
                        0.5 * (z - t) * (z - t)
                    })
                    .sum()
            })
            .collect(),
    })
}

pub fn mean_loss(model: &ModelParams, loss: Loss, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let v = loss_values(loss, &model.logits(x)?, labels)?;
    if v.is_empty() {
        return Err(Error::Empty("loss over empty batch"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
pub fn accuracy(model: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy over empty dataset"));
    }
    let logits = model.logits(x)?;
    accuracy_of_logits(&logits, labels)
}

pub fn accuracy_of_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy over empty dataset"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = tensor::argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
