//! Small dense policy networks with manual forward and reverse passes:
//! a categorical phase policy (79 -> 8 logits) and a simplex mixture policy
//! (18 -> 8 Dirichlet concentrations), with exact score-function gradients,
//! first-order updates, and a bit-exact checkpoint format.

use crate::demand::WeightVector;
use crate::grid::NUM_PHASES;
use crate::obs::{TL_OBS_LEN, WCE_OBS_LEN};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Floor added to softplus outputs so Dirichlet concentrations stay positive.
pub const ALPHA_FLOOR: f64 = 1e-3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSPL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input length {found} does not match first layer input {expected}")]
    InputShape { expected: usize, found: usize },
    #[error("gradient length {found} does not match parameter count {expected}")]
    GradShape { expected: usize, found: usize },
    #[error("operation requires the {0} head")]
    WrongHead(&'static str),
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyHead {
    /// Raw logits over the eight phases.
    Categorical,
    /// softplus(logit) + 1e-3 concentrations of a Dirichlet over the
    /// eight scenario weights.
    Dirichlet,
}

impl PolicyHead {
    fn tag(self) -> u8 {
        match self {
            PolicyHead::Categorical => 0,
            PolicyHead::Dirichlet => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<PolicyHead> {
        match tag {
            0 => Some(PolicyHead::Categorical),
            1 => Some(PolicyHead::Dirichlet),
            _ => None,
        }
    }
}

/// Flat-parameter dense network with tanh hidden activations and a linear
/// output layer interpreted by `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePolicy {
    pub layer_shapes: Vec<(usize, usize)>,
    pub params: Vec<f64>,
    pub head: PolicyHead,
}

fn param_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(i, o)| i * o + o).sum()
}

fn stable_softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl DensePolicy {
    /// Fresh policy with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights.
    pub fn new<R: Rng>(head: PolicyHead, layer_dims: &[usize], rng: &mut R) -> DensePolicy {
        let layer_shapes: Vec<(usize, usize)> = layer_dims
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect();
        let mut params = Vec::with_capacity(param_count(&layer_shapes));
        for &(fan_in, fan_out) in &layer_shapes {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        DensePolicy {
            layer_shapes,
            params,
            head,
        }
    }

    /// All-zero parameters (uniform categorical / identical concentrations).
    pub fn zeros(head: PolicyHead, layer_dims: &[usize]) -> DensePolicy {
        let layer_shapes: Vec<(usize, usize)> =
            layer_dims.windows(2).map(|w| (w[0], w[1])).collect();
        DensePolicy {
            params: vec![0.0; param_count(&layer_shapes)],
            layer_shapes,
            head,
        }
    }

    /// The default phase-policy architecture.
    pub fn tl_policy<R: Rng>(hidden: &[usize], rng: &mut R) -> DensePolicy {
        let mut dims = vec![TL_OBS_LEN];
        dims.extend_from_slice(hidden);
        dims.push(NUM_PHASES);
        DensePolicy::new(PolicyHead::Categorical, &dims, rng)
    }

    /// The default mixture-policy architecture.
    pub fn wce_policy<R: Rng>(hidden: &[usize], rng: &mut R) -> DensePolicy {
        let mut dims = vec![WCE_OBS_LEN];
        dims.extend_from_slice(hidden);
        dims.push(crate::demand::NUM_SCENARIOS);
        DensePolicy::new(PolicyHead::Dirichlet, &dims, rng)
    }

    pub fn input_len(&self) -> usize {
        self.layer_shapes.first().map(|&(i, _)| i).unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.layer_shapes.last().map(|&(_, o)| o).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Affine + tanh stack, returning every layer's post-activation output
    /// (final layer linear). activations[0] is the input.
    fn forward_cached(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, PolicyError> {
        if x.len() != self.input_len() {
            return Err(PolicyError::InputShape {
                expected: self.input_len(),
                found: x.len(),
            });
        }
        let mut activations = vec![x.to_vec()];
        let mut offset = 0;
        let last = self.layer_shapes.len() - 1;
        for (l, &(fan_in, fan_out)) in self.layer_shapes.iter().enumerate() {
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = activations.last().expect("non-empty");
            let mut out = biases.to_vec();
            for (i, &xi) in input.iter().enumerate() {
                if xi != 0.0 {
                    let row = &weights[i * fan_out..(i + 1) * fan_out];
                    for (o, &w) in row.iter().enumerate() {
                        out[o] += xi * w;
                    }
                }
            }
            if l != last {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(activations)
    }

    /// Raw head output: logits for the categorical head, pre-softplus
    /// values for the Dirichlet head.
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward_cached(x)?.pop().expect("at least one layer"))
    }

    /// Head output: 8 logits or 8 positive Dirichlet concentrations.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let raw = self.forward_raw(x)?;
        Ok(match self.head {
            PolicyHead::Categorical => raw,
            PolicyHead::Dirichlet => raw
                .into_iter()
                .map(|z| stable_softplus(z) + ALPHA_FLOOR)
                .collect(),
        })
    }

    /// Sample a phase from the categorical head. Returns (action, logprob).
    pub fn sample_phase<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<(usize, f64), PolicyError> {
        if self.head != PolicyHead::Categorical {
            return Err(PolicyError::WrongHead("categorical"));
        }
        let logits = self.forward_raw(x)?;
        let lse = log_sum_exp(&logits);
        let u: f64 = rng.random_range(0.0..1.0);
        let mut cumulative = 0.0;
        let mut action = logits.len() - 1;
        for (a, &logit) in logits.iter().enumerate() {
            cumulative += (logit - lse).exp();
            if u < cumulative {
                action = a;
                break;
            }
        }
        Ok((action, logits[action] - lse))
    }

    /// Log-density of one phase under the categorical head.
    pub fn logprob_phase(&self, x: &[f64], action: usize) -> Result<f64, PolicyError> {
        if self.head != PolicyHead::Categorical {
            return Err(PolicyError::WrongHead("categorical"));
        }
        let logits = self.forward_raw(x)?;
        Ok(logits[action] - log_sum_exp(&logits))
    }

    /// Sample a weight vector from the Dirichlet head via normalized Gamma
    /// draws. Returns (weights, logprob).
    pub fn sample_weights<R: Rng>(
        &self,
        x: &[f64],
        rng: &mut R,
    ) -> Result<(WeightVector, f64), PolicyError> {
        if self.head != PolicyHead::Dirichlet {
            return Err(PolicyError::WrongHead("dirichlet"));
        }
        let alphas = self.forward(x)?;
        let mut draws = [0.0f64; crate::demand::NUM_SCENARIOS];
        for (k, &alpha) in alphas.iter().enumerate() {
            let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
            // Guard against underflow to exactly zero for tiny shapes.
            draws[k] = gamma.sample(rng).max(1e-300);
        }
        let total: f64 = draws.iter().sum();
        let mut w = [0.0f64; crate::demand::NUM_SCENARIOS];
        for k in 0..w.len() {
            w[k] = draws[k] / total;
        }
        // Pin the sum to exactly one within tolerance of the validator.
        w[7] = 1.0 - w[..7].iter().sum::<f64>();
        let weights = WeightVector::new(w)
            .expect("normalized gamma draws form a simplex point");
        let logprob = dirichlet_logpdf(&alphas, weights.values());
        Ok((weights, logprob))
    }

    /// Log-density of a weight vector under the Dirichlet head.
    pub fn logprob_weights(&self, x: &[f64], w: &WeightVector) -> Result<f64, PolicyError> {
        if self.head != PolicyHead::Dirichlet {
            return Err(PolicyError::WrongHead("dirichlet"));
        }
        let alphas = self.forward(x)?;
        Ok(dirichlet_logpdf(&alphas, w.values()))
    }

    /// Exact reverse-mode gradient of log pi(action | x) over the flat
    /// parameter vector.
    pub fn grad_logprob_phase(&self, x: &[f64], action: usize) -> Result<Vec<f64>, PolicyError> {
        if self.head != PolicyHead::Categorical {
            return Err(PolicyError::WrongHead("categorical"));
        }
        let activations = self.forward_cached(x)?;
        let logits = activations.last().expect("output layer");
        let lse = log_sum_exp(logits);
        let mut delta: Vec<f64> = logits.iter().map(|&z| -((z - lse).exp())).collect();
        delta[action] += 1.0;
        Ok(self.backprop(&activations, delta))
    }

    /// Combined update gradient for one categorical record:
    /// advantage * grad log pi(a|x) + entropy_coef * grad H(pi(.|x)),
    /// in a single reverse pass.
    pub fn grad_phase_objective(
        &self,
        x: &[f64],
        action: usize,
        advantage: f64,
        entropy_coef: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        if self.head != PolicyHead::Categorical {
            return Err(PolicyError::WrongHead("categorical"));
        }
        let activations = self.forward_cached(x)?;
        let logits = activations.last().expect("output layer");
        let lse = log_sum_exp(logits);
        let probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
        let entropy: f64 = -probs
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        let mut delta: Vec<f64> = probs.iter().map(|&p| -advantage * p).collect();
        delta[action] += advantage;
        if entropy_coef != 0.0 {
            for (d, &p) in delta.iter_mut().zip(probs.iter()) {
                if p > 0.0 {
                    // dH/dlogit_k = -p_k (ln p_k + H).
                    *d += entropy_coef * (-p * (p.ln() + entropy));
                }
            }
        }
        Ok(self.backprop(&activations, delta))
    }

    /// Exact reverse-mode gradient of log pi(w | x) over the flat
    /// parameter vector.
    pub fn grad_logprob_weights(
        &self,
        x: &[f64],
        w: &WeightVector,
    ) -> Result<Vec<f64>, PolicyError> {
        if self.head != PolicyHead::Dirichlet {
            return Err(PolicyError::WrongHead("dirichlet"));
        }
        let activations = self.forward_cached(x)?;
        let raw = activations.last().expect("output layer");
        let alphas: Vec<f64> = raw.iter().map(|&z| stable_softplus(z) + ALPHA_FLOOR).collect();
        let alpha_sum: f64 = alphas.iter().sum();
        let psi_sum = digamma(alpha_sum);
        let delta: Vec<f64> = raw
            .iter()
            .zip(alphas.iter())
            .zip(w.values().iter())
            .map(|((&z, &alpha), &wk)| (psi_sum - digamma(alpha) + wk.ln()) * sigmoid(z))
            .collect();
        Ok(self.backprop(&activations, delta))
    }

    /// Back-propagate an output-layer delta through the affine/tanh stack.
    fn backprop(&self, activations: &[Vec<f64>], mut delta: Vec<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(self.layer_shapes.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &self.layer_shapes {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        for l in (0..self.layer_shapes.len()).rev() {
            let (fan_in, fan_out) = self.layer_shapes[l];
            let offset = offsets[l];
            let input = &activations[l];
            for (i, &xi) in input.iter().enumerate() {
                let row = &mut grad[offset + i * fan_out..offset + (i + 1) * fan_out];
                for (o, g) in row.iter_mut().enumerate() {
                    *g = xi * delta[o];
                }
            }
            grad[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
                .copy_from_slice(&delta);
            if l > 0 {
                let weights = &self.params[offset..offset + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for (i, p) in prev.iter_mut().enumerate() {
                    let row = &weights[i * fan_out..(i + 1) * fan_out];
                    let mut acc = 0.0;
                    for (o, &w) in row.iter().enumerate() {
                        acc += w * delta[o];
                    }
                    // activations[l] is tanh(z); tanh' = 1 - tanh^2.
                    *p = acc * (1.0 - input[i] * input[i]);
                }
                delta = prev;
            }
        }
        grad
    }

    /// Plain gradient ascent: params += learning_rate * gradient.
    pub fn apply_update(&mut self, gradient: &[f64], learning_rate: f64) -> Result<(), PolicyError> {
        if gradient.len() != self.params.len() {
            return Err(PolicyError::GradShape {
                expected: self.params.len(),
                found: gradient.len(),
            });
        }
        for (p, g) in self.params.iter_mut().zip(gradient.iter()) {
            *p += learning_rate * g;
        }
        Ok(())
    }

    /// Write the checkpoint: magic, version, head tag, layer shapes, then
    /// the flat little-endian f64 parameter array.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let io_err = |source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(32 + self.params.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(self.head.tag());
        buf.extend_from_slice(&(self.layer_shapes.len() as u32).to_le_bytes());
        for &(fan_in, fan_out) in &self.layer_shapes {
            buf.extend_from_slice(&(fan_in as u32).to_le_bytes());
            buf.extend_from_slice(&(fan_out as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<DensePolicy, PolicyError> {
        let io_err = |source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PolicyError> {
            if at + n > bytes.len() {
                return Err(PolicyError::BadCheckpoint("truncated file".into()));
            }
            let slice = &bytes[at..at + n];
            at += n;
            Ok(slice)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(PolicyError::BadCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let head = PolicyHead::from_tag(take(1)?[0])
            .ok_or_else(|| PolicyError::BadCheckpoint("unknown head tag".into()))?;
        let n_layers = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut layer_shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let fan_out = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            layer_shapes.push((fan_in, fan_out));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if count != param_count(&layer_shapes) {
            return Err(PolicyError::BadCheckpoint(format!(
                "parameter count {count} does not match shapes"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if at != bytes.len() {
            return Err(PolicyError::BadCheckpoint("trailing bytes".into()));
        }
        Ok(DensePolicy {
            layer_shapes,
            params,
            head,
        })
    }
}

/// Dirichlet log-density at `w` with concentrations `alphas`.
pub fn dirichlet_logpdf(alphas: &[f64], w: &[f64]) -> f64 {
    let alpha_sum: f64 = alphas.iter().sum();
    let mut logp = ln_gamma(alpha_sum);
    for (&alpha, &wk) in alphas.iter().zip(w.iter()) {
        logp -= ln_gamma(alpha);
        logp += (alpha - 1.0) * wk.ln();
    }
    logp
}

/// Adaptive-moment ascent state, the optional alternative to plain ascent.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Ascent step: params move toward +gradient.
    pub fn step(
        &mut self,
        policy: &mut DensePolicy,
        gradient: &[f64],
        learning_rate: f64,
    ) -> Result<(), PolicyError> {
        if gradient.len() != policy.params.len() {
            return Err(PolicyError::GradShape {
                expected: policy.params.len(),
                found: gradient.len(),
            });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in gradient.iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / b1t;
            let v_hat = self.v[k] / b2t;
            policy.params[k] += learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Replay record for the phase policy: one (t, i) pair carrying the shared
/// team reward. `step` is the in-episode second, kept for the per-step
/// advantage baseline.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: [f64; TL_OBS_LEN],
    pub action: usize,
    pub reward: f64,
    pub next_obs: [f64; TL_OBS_LEN],
    pub step: u32,
    /// Discounted within-episode return-to-go from this step, filled at
    /// collection time.
    pub credit: f64,
}

/// Replay record for the mixture policy: one window. `step` is the window
/// index within the episode.
#[derive(Debug, Clone)]
pub struct WceTransition {
    pub obs: [f64; WCE_OBS_LEN],
    pub weights: WeightVector,
    pub reward: f64,
    pub next_obs: [f64; WCE_OBS_LEN],
    pub step: u32,
}
