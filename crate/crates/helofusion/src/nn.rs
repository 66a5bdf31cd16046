//! MLP building block, AdamW, and global-norm gradient clipping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Per-layer weights and biases of a multi-layer perceptron.
///
/// Weights are stored input-major: layer l maps a row vector of width
/// `widths[l]` to `widths[l+1]` via `x * W + b`. The activation is applied
/// after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
}

impl MlpParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(fan_in, fan_out, data));
            biases.push(Tensor::zeros(1, fan_out));
        }
        MlpParams {
            weights,
            biases,
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].rows
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().unwrap().cols
    }
}

/// Variable ids of one MLP's parameters bound onto a tape.
pub struct MlpBinding {
    pub weights: Vec<VarId>,
    pub biases: Vec<VarId>,
    pub activation: Activation,
}

pub fn bind_mlp(tape: &mut Tape, params: &MlpParams) -> MlpBinding {
    MlpBinding {
        weights: params.weights.iter().map(|w| tape.param(w.clone())).collect(),
        biases: params.biases.iter().map(|b| tape.param(b.clone())).collect(),
        activation: params.activation,
    }
}

/// Forward pass of an MLP over a batch of rows.
pub fn mlp_apply(tape: &mut Tape, mlp: &MlpBinding, x: VarId) -> Result<VarId> {
    let want = tape.value(mlp.weights[0]).rows;
    let got = tape.value(x).cols;
    if got != want {
        return Err(Error::Shape {
            op: "mlp_apply",
            lhs: tape.value(x).shape(),
            rhs: tape.value(mlp.weights[0]).shape(),
        });
    }
    let mut h = x;
    let last = mlp.weights.len() - 1;
    for l in 0..mlp.weights.len() {
        h = tape.matmul(h, mlp.weights[l])?;
        h = tape.add(h, mlp.biases[l])?;
        if l < last && mlp.activation == Activation::Relu {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// AdamW state: decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
        }
    }
}

/// One AdamW step over a flat parameter list. Weight decay is applied
/// directly to the parameters, not through the gradient.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.rows != p.rows || g.cols != p.cols {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..p.data.len() {
            p.data[k] *= 1.0 - state.lr * state.weight_decay;
            m.data[k] = state.beta1 * m.data[k] + (1.0 - state.beta1) * g.data[k];
            v.data[k] = state.beta2 * v.data[k] + (1.0 - state.beta2) * g.data[k] * g.data[k];
            let mhat = m.data[k] / bc1;
            let vhat = v.data[k] / bc2;
            p.data[k] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Validation("clip max_norm must be > 0".into()));
    }
    let sq: f64 = grads
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    // The relative slack keeps clip(clip(g)) bit-identical to clip(g): after
    // one rescale the recomputed norm can sit an ulp above max_norm.
    if norm > max_norm * (1.0 + 1e-12) {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_zero_weights_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = MlpParams::init(&[3, 2], Activation::Relu, &mut rng);
        for w in &mut p.weights {
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        p.biases[0] = Tensor::row(&[0.5, -1.5]);
        let mut tape = Tape::new();
        let b = bind_mlp(&mut tape, &p);
        let x = tape.leaf(Tensor::new(2, 3, vec![1.0; 6]));
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn mlp_identity_layer_passes_through() {
        let p = MlpParams {
            weights: vec![Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0])],
            biases: vec![Tensor::zeros(1, 2)],
            activation: Activation::Identity,
        };
        let mut tape = Tape::new();
        let b = bind_mlp(&mut tape, &p);
        let x = tape.leaf(Tensor::row(&[3.5, -2.25]));
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).data, vec![3.5, -2.25]);
    }

    #[test]
    fn mlp_relu_clamps_negative_preactivation() {
        // 1 -> 1 -> 1 with weight -1 then 1: relu kills the sign flip.
        let p = MlpParams {
            weights: vec![Tensor::scalar(-1.0), Tensor::scalar(1.0)],
            biases: vec![Tensor::zeros(1, 1), Tensor::zeros(1, 1)],
            activation: Activation::Relu,
        };
        let mut tape = Tape::new();
        let b = bind_mlp(&mut tape, &p);
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn mlp_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MlpParams::init(&[3, 2], Activation::Relu, &mut rng);
        let mut tape = Tape::new();
        let b = bind_mlp(&mut tape, &p);
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(
            mlp_apply(&mut tape, &b, x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adamw_first_step_bias_corrected() {
        let mut theta = Tensor::scalar(0.0);
        let mut state = OptimizerState::new(&[&theta], 0.1, 0.0);
        let grads = vec![Tensor::scalar(1.0)];
        adamw_step(&mut state, &mut [&mut theta], &grads).unwrap();
        // m_hat = v_hat = 1 after bias correction, so the step is -lr/(1+eps).
        assert!((theta.item() + 0.1).abs() < 1e-8, "theta={}", theta.item());
    }

    #[test]
    fn adamw_zero_grad_no_motion() {
        let mut theta = Tensor::row(&[1.0, -2.0]);
        let before = theta.clone();
        let mut state = OptimizerState::new(&[&theta], 0.1, 0.0);
        let grads = vec![Tensor::zeros(1, 2)];
        adamw_step(&mut state, &mut [&mut theta], &grads).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut theta = Tensor::scalar(2.0);
        let mut state = OptimizerState::new(&[&theta], 0.1, 0.5);
        let grads = vec![Tensor::scalar(0.0)];
        adamw_step(&mut state, &mut [&mut theta], &grads).unwrap();
        assert_eq!(theta.item(), 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn clip_scales_above_threshold() {
        let mut grads = vec![Tensor::row(&[3.0, 4.0])];
        clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((grads[0].data[0] - 0.6).abs() < 1e-15);
        assert!((grads[0].data[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_identity_below_threshold_and_idempotent() {
        let mut grads = vec![Tensor::row(&[3.0, 4.0])];
        clip_global_norm(&mut grads, 10.0).unwrap();
        assert_eq!(grads[0].data, vec![3.0, 4.0]);
        let mut once = vec![Tensor::row(&[30.0, 40.0])];
        clip_global_norm(&mut once, 7.0).unwrap();
        let twice = once.clone();
        let mut twice = twice;
        clip_global_norm(&mut twice, 7.0).unwrap();
        assert_eq!(once[0].data, twice[0].data);
    }

    #[test]
    fn clip_zero_grads_no_fault() {
        let mut grads = vec![Tensor::zeros(2, 2)];
        clip_global_norm(&mut grads, 1.0).unwrap();
        assert!(grads[0].data.iter().all(|v| *v == 0.0));
    }
}
