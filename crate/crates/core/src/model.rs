//! Dense feedforward stacks with hand-written backpropagation.
//!
//! Weights are stored `out_dim × in_dim`; a batch is `batch × in_dim`, so a
//! layer computes `z = x·Wᵀ + b`. Losses are means over the batch, and MSE is
//! additionally averaged over output coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`; relu'(0) is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::rejected(format!(
                "batch has {} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            inputs: self.inputs.select_rows(idx)?,
            targets: self.targets.select_rows(idx)?,
        })
    }

    pub fn head(&self, n: usize) -> Result<Batch> {
        Ok(Batch {
            inputs: self.inputs.take_rows(n)?,
            targets: self.targets.take_rows(n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelStack {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Option<Vec<f64>>>,
    loss: LossKind,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `layer_inputs[0]` is the batch input.
    pub layer_inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub output: Matrix,
    targets: Matrix,
    fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `∂L/∂W` per layer, shaped like the weight.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// `∂L/∂z` per layer (`batch × out_dim`).
    pub deltas: Vec<Matrix>,
}

impl ModelStack {
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: Vec<Matrix>,
        biases: Vec<Option<Vec<f64>>>,
        loss: LossKind,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::rejected("model needs at least one layer"));
        }
        if weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(Error::rejected("one weight and one bias slot per layer"));
        }
        for (i, spec) in layers.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::rejected(format!("layer {i} has a zero dimension")));
            }
            if i + 1 < layers.len() && spec.out_dim != layers[i + 1].in_dim {
                return Err(Error::rejected(format!(
                    "layer {i} out_dim {} does not feed layer {} in_dim {}",
                    spec.out_dim,
                    i + 1,
                    layers[i + 1].in_dim
                )));
            }
            if weights[i].shape() != (spec.out_dim, spec.in_dim) {
                return Err(Error::rejected(format!(
                    "layer {i} weight is {:?}, expected {:?}",
                    weights[i].shape(),
                    (spec.out_dim, spec.in_dim)
                )));
            }
            match (&biases[i], spec.has_bias) {
                (Some(b), true) if b.len() == spec.out_dim && b.iter().all(|v| v.is_finite()) => {}
                (None, false) => {}
                _ => return Err(Error::rejected(format!("layer {i} bias does not match spec"))),
            }
        }
        Ok(Self {
            layers,
            weights,
            biases,
            loss,
        })
    }

    /// Weights drawn N(0, 1/in_dim), biases zero.
    pub fn random(layers: Vec<LayerSpec>, loss: LossKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layers
            .iter()
            .map(|l| Matrix::random_normal(l.out_dim, l.in_dim, (1.0 / l.in_dim as f64).sqrt(), &mut rng))
            .collect();
        let biases = layers
            .iter()
            .map(|l| l.has_bias.then(|| vec![0.0; l.out_dim]))
            .collect();
        Self::new(layers, weights, biases, loss)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Option<Vec<f64>>] {
        &self.biases
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn set_weight(&mut self, layer: usize, w: Matrix) -> Result<()> {
        let slot = self
            .weights
            .get_mut(layer)
            .ok_or_else(|| Error::rejected(format!("no layer {layer}")))?;
        if slot.shape() != w.shape() {
            return Err(Error::rejected(format!(
                "layer {layer} weight is {:?}, got {:?}",
                slot.shape(),
                w.shape()
            )));
        }
        *slot = w;
        Ok(())
    }

    pub fn set_bias(&mut self, layer: usize, b: Vec<f64>) -> Result<()> {
        match self.biases.get_mut(layer) {
            Some(Some(slot)) if slot.len() == b.len() && b.iter().all(|v| v.is_finite()) => {
                *slot = b;
                Ok(())
            }
            _ => Err(Error::rejected(format!("layer {layer} has no bias of that length"))),
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over weight and bias bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for w in &self.weights {
            w.data().iter().copied().for_each(&mut feed);
        }
        for b in self.biases.iter().flatten() {
            b.iter().copied().for_each(&mut feed);
        }
        h
    }

    pub fn forward(&self, batch: &Batch) -> Result<(f64, ForwardCache)> {
        if batch.inputs.cols() != self.in_dim() {
            return Err(Error::rejected(format!(
                "batch input dim {} does not match model input dim {}",
                batch.inputs.cols(),
                self.in_dim()
            )));
        }
        if batch.targets.cols() != self.out_dim() {
            return Err(Error::rejected(format!(
                "target dim {} does not match model output dim {}",
                batch.targets.cols(),
                self.out_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = batch.inputs.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            let mut z = a.matmul_t(&self.weights[i])?;
            if let Some(b) = &self.biases[i] {
                z = Matrix::from_fn(z.rows(), z.cols(), |r, c| z[(r, c)] + b[c]);
            }
            let next = z.map(|v| spec.activation.apply(v));
            layer_inputs.push(a);
            pre_activations.push(z);
            a = next;
        }
        let loss = self.loss_value(&a, &batch.targets)?;
        Ok((
            loss,
            ForwardCache {
                layer_inputs,
                pre_activations,
                output: a,
                targets: batch.targets.clone(),
                fingerprint: self.fingerprint(),
            },
        ))
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.forward(batch)?.0)
    }

    fn loss_value(&self, output: &Matrix, targets: &Matrix) -> Result<f64> {
        let (n, d) = output.shape();
        let value = match self.loss {
            LossKind::Mse => {
                let diff = output.sub(targets)?;
                diff.data().iter().map(|v| v * v).sum::<f64>() / (n * d) as f64
            }
            LossKind::SoftmaxCrossEntropy => {
                let mut total = 0.0;
                for i in 0..n {
                    let row = output.row(i);
                    let lse = log_sum_exp(row);
                    for (k, &t) in targets.row(i).iter().enumerate() {
                        if t != 0.0 {
                            total -= t * (row[k] - lse);
                        }
                    }
                }
                total / n as f64
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("loss"))
        }
    }

    fn output_gradient(&self, cache: &ForwardCache) -> Result<Matrix> {
        let out = &cache.output;
        let (n, d) = out.shape();
        match self.loss {
            LossKind::Mse => Ok(out.sub(&cache.targets)?.scale(2.0 / (n * d) as f64)),
            LossKind::SoftmaxCrossEntropy => {
                let mut g = Matrix::zeros(n, d);
                for i in 0..n {
                    let row = out.row(i);
                    let lse = log_sum_exp(row);
                    let mass: f64 = cache.targets.row(i).iter().sum();
                    for k in 0..d {
                        let p = (row[k] - lse).exp();
                        g.set(i, k, (p * mass - cache.targets[(i, k)]) / n as f64);
                    }
                }
                Ok(g)
            }
        }
    }

    /// Exact gradients of the mean batch loss for the weights that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache) -> Result<Gradients> {
        if cache.pre_activations.len() != self.layers.len() || cache.fingerprint != self.fingerprint() {
            return Err(Error::rejected("forward cache does not belong to this model state"));
        }
        let nl = self.layers.len();
        let mut weights = vec![None; nl];
        let mut biases: Vec<Option<Vec<f64>>> = vec![None; nl];
        let mut deltas = vec![None; nl];
        let mut upstream = self.output_gradient(cache)?;
        for i in (0..nl).rev() {
            let act = self.layers[i].activation;
            let z = &cache.pre_activations[i];
            let delta = Matrix::from_fn(z.rows(), z.cols(), |r, c| upstream[(r, c)] * act.derivative(z[(r, c)]));
            weights[i] = Some(delta.t_matmul(&cache.layer_inputs[i])?);
            if self.layers[i].has_bias {
                biases[i] = Some((0..delta.cols()).map(|c| delta.column(c).iter().sum::<f64>()).collect());
            }
            if i > 0 {
                upstream = delta.matmul(&self.weights[i])?;
            }
            deltas[i] = Some(delta);
        }
        Ok(Gradients {
            weights: weights.into_iter().map(|w| w.expect("filled")).collect(),
            biases,
            deltas: deltas.into_iter().map(|d| d.expect("filled")).collect(),
        })
    }

    /// Loss and weight gradients in one call.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(f64, ForwardCache, Gradients)> {
        let (loss, cache) = self.forward(batch)?;
        let grads = self.backward(&cache)?;
        Ok((loss, cache, grads))
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Synthetic fine-tuning problem: a student at `w0` must learn a low-rank shift.
#[derive(Debug, Clone)]
pub struct TeacherStudentTask {
    pub data: Batch,
    pub w0: Matrix,
    pub w_target: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Output dimension of the adapted matrix.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    pub r_true: usize,
    pub num_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            m: 64,
            n: 64,
            r_true: 4,
            num_samples: 2048,
            noise_std: 0.0,
            seed: 0,
            activation: Activation::Identity,
        }
    }
}

/// `W_target = W0 + U·Vᵀ/√r_true` with standard-normal `U`, `V`; inputs are
/// N(0, I/n) so outputs have unit scale; `y = act(W_target·x) + noise`.
pub fn make_teacher_student_task(spec: &TaskSpec) -> Result<TeacherStudentTask> {
    let TaskSpec {
        m,
        n,
        r_true,
        num_samples,
        noise_std,
        seed,
        activation,
    } = *spec;
    if m == 0 || n == 0 || num_samples == 0 {
        return Err(Error::rejected("task dimensions and sample count must be positive"));
    }
    if r_true > m.min(n) {
        return Err(Error::rejected(format!("r_true {r_true} exceeds min({m}, {n})")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::rejected("noise_std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = Matrix::random_normal(m, n, (1.0 / n as f64).sqrt(), &mut rng);
    let w_target = if r_true == 0 {
        w0.clone()
    } else {
        let u = Matrix::random_normal(m, r_true, 1.0, &mut rng);
        let v = Matrix::random_normal(n, r_true, 1.0, &mut rng);
        w0.add(&u.matmul_t(&v)?.scale(1.0 / (r_true as f64).sqrt()))?
    };
    let inputs = Matrix::random_normal(num_samples, n, (1.0 / n as f64).sqrt(), &mut rng);
    let clean = inputs.matmul_t(&w_target)?.map(|v| activation.apply(v));
    let targets = if noise_std > 0.0 {
        Matrix::from_fn(num_samples, m, |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            clean[(i, j)] + noise_std * z
        })
    } else {
        clean
    };
    Ok(TeacherStudentTask {
        data: Batch::new(inputs, targets)?,
        w0,
        w_target,
        activation,
    })
}

impl TeacherStudentTask {
    /// Single-layer student holding `weight`, MSE head, no bias.
    pub fn student(&self, weight: Matrix) -> Result<ModelStack> {
        let (m, n) = self.w0.shape();
        ModelStack::new(
            vec![LayerSpec {
                in_dim: n,
                out_dim: m,
                activation: self.activation,
                has_bias: false,
            }],
            vec![weight],
            vec![None],
            LossKind::Mse,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::matrix::rel_diff;
    use rand::Rng;

    fn linear(m: usize, n: usize, w: Matrix) -> ModelStack {
        ModelStack::new(
            vec![LayerSpec {
                in_dim: n,
                out_dim: m,
                activation: Activation::Identity,
                has_bias: false,
            }],
            vec![w],
            vec![None],
            LossKind::Mse,
        )
        .unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let y = x.matmul_t(&w).unwrap();
        let model = linear(3, 4, w);
        assert_eq!(model.loss(&Batch::new(x, y).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_loss_is_mean_square_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let t = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let expected = t.frob_norm().powi(2) / 18.0;
        let model = linear(3, 4, Matrix::zeros(3, 4));
        let loss = model.loss(&Batch::new(x, t).unwrap()).unwrap();
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn linear_mse_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let x = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let t = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let model = linear(3, 4, w.clone());
        let (_, _, g) = model.loss_and_gradients(&Batch::new(x.clone(), t.clone()).unwrap()).unwrap();
        // (2 / (N·d)) · (XWᵀ − T)ᵀ X
        let resid = x.matmul_t(&w).unwrap().sub(&t).unwrap();
        let closed = resid.t_matmul(&x).unwrap().scale(2.0 / 21.0);
        assert!(rel_diff(&g.weights[0], &closed, 1e-300).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = linear(3, 4, Matrix::random_normal(3, 4, 1.0, &mut rng));
        let batch = Batch::new(Matrix::zeros(5, 4), Matrix::random_normal(5, 3, 1.0, &mut rng)).unwrap();
        let (_, _, g) = model.loss_and_gradients(&batch).unwrap();
        assert!(g.weights[0].is_zero());
    }

    /// Straight-line re-evaluation of a two-layer tanh→identity network.
    #[test]
    fn forward_matches_independent_evaluation() {
        let layers = vec![
            LayerSpec { in_dim: 5, out_dim: 4, activation: Activation::Tanh, has_bias: true },
            LayerSpec { in_dim: 4, out_dim: 3, activation: Activation::Identity, has_bias: false },
        ];
        let mut model = ModelStack::random(layers, LossKind::Mse, 9).unwrap();
        model.set_bias(0, vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let t = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let loss = model.loss(&Batch::new(x.clone(), t.clone()).unwrap()).unwrap();

        let (w1, w2) = (&model.weights()[0], &model.weights()[1]);
        let b1 = model.biases()[0].as_ref().unwrap();
        let mut acc = 0.0;
        for s in 0..6 {
            let mut h = [0.0; 4];
            for (o, hv) in h.iter_mut().enumerate() {
                let mut z = b1[o];
                for i in 0..5 {
                    z += w1[(o, i)] * x[(s, i)];
                }
                *hv = z.tanh();
            }
            for o in 0..3 {
                let mut y = 0.0;
                for (i, hv) in h.iter().enumerate() {
                    y += w2[(o, i)] * hv;
                }
                acc += (y - t[(s, o)]).powi(2);
            }
        }
        assert!((loss - acc / 18.0).abs() < 1e-12);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let layers = vec![LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Tanh, has_bias: false }];
        let mut model = ModelStack::random(layers, LossKind::Mse, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Batch::new(Matrix::random_normal(4, 3, 1.0, &mut rng), Matrix::random_normal(4, 2, 1.0, &mut rng)).unwrap();
        let (_, cache) = model.forward(&batch).unwrap();
        model.set_weight(0, Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(model.backward(&cache), Err(Error::Rejected(_))));
    }

    #[test]
    fn rejects_mismatched_dims() {
        let layers = vec![
            LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Relu, has_bias: false },
            LayerSpec { in_dim: 4, out_dim: 2, activation: Activation::Relu, has_bias: false },
        ];
        assert!(ModelStack::random(layers, LossKind::Mse, 0).is_err());
        let model = linear(2, 3, Matrix::zeros(2, 3));
        let bad = Batch::new(Matrix::zeros(2, 4), Matrix::zeros(2, 2)).unwrap();
        assert!(model.forward(&bad).is_err());
    }

    #[test]
    fn softmax_ce_gradient_on_identity_head() {
        let layers = vec![LayerSpec { in_dim: 4, out_dim: 3, activation: Activation::Identity, has_bias: true }];
        let model = ModelStack::random(layers, LossKind::SoftmaxCrossEntropy, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let t = Matrix::from_fn(5, 3, |i, j| if j == i % 3 { 1.0 } else { 0.0 });
        let batch = Batch::new(x, t).unwrap();
        let (loss, _, g) = model.loss_and_gradients(&batch).unwrap();
        assert!(loss > 0.0);
        let h = 1e-6;
        for (r, c) in [(0, 0), (1, 2), (2, 3)] {
            let mut plus = model.clone();
            let mut w = model.weights()[0].clone();
            w.set(r, c, w[(r, c)] + h);
            plus.set_weight(0, w.clone()).unwrap();
            let mut minus = model.clone();
            w.set(r, c, w[(r, c)] - 2.0 * h);
            minus.set_weight(0, w).unwrap();
            let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
            assert!((fd - g.weights[0][(r, c)]).abs() < 1e-8);
        }
    }

    #[test]
    fn teacher_student_properties() {
        let spec = TaskSpec { m: 12, n: 9, r_true: 3, num_samples: 20, noise_std: 0.0, seed: 5, activation: Activation::Identity };
        let task = make_teacher_student_task(&spec).unwrap();
        let student = task.student(task.w_target.clone()).unwrap();
        assert_eq!(student.loss(&task.data).unwrap(), 0.0);

        let again = make_teacher_student_task(&spec).unwrap();
        assert_eq!(again.data, task.data);
        assert_eq!(again.w_target, task.w_target);

        let degenerate = make_teacher_student_task(&TaskSpec { r_true: 0, ..spec }).unwrap();
        assert_eq!(degenerate.w_target, degenerate.w0);

        assert!(make_teacher_student_task(&TaskSpec { r_true: 10, ..spec }).is_err());
    }

    #[test]
    fn teacher_student_update_has_requested_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let r_true = rng.random_range(1..=6);
            let spec = TaskSpec { m: 16, n: 11, r_true, num_samples: 4, noise_std: 0.1, seed: rng.random(), activation: Activation::Tanh };
            let task = make_teacher_student_task(&spec).unwrap();
            let delta = task.w_target.sub(&task.w0).unwrap();
            let s = svd(&delta).unwrap();
            assert_eq!(s.s.iter().filter(|&&v| v > 1e-10).count(), r_true);
        }
    }
}
