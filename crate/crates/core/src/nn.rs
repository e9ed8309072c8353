//! Small dense networks with exact reverse-mode gradients, an Adam optimizer
//! and a central-difference gradient checker.
//!
//! Parameters live in one flat `Vec<f64>`. For each layer the weight matrix is
//! stored row-major (`n_out x n_in`) followed by its bias. When step
//! modulation is enabled, a per-step gain block (`T x h1`) and shift block
//! (`T x h1`) follow the layers; they act on the first hidden layer's
//! pre-activation as `u = z * (1 + gain[t]) + shift[t]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `u` and output `h`.
    #[inline]
    fn derivative(self, u: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Flat gradient aligned with a [`DenseNet`]'s parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    modulation_steps: Option<usize>,
    params: Vec<f64>,
}

struct Tape {
    /// Input to each layer (layer 0 input is the network input).
    inputs: Vec<Vec<f64>>,
    /// Post-modulation pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// First-layer pre-activation before modulation.
    z0: Vec<f64>,
    output: Vec<f64>,
}

pub fn param_count(sizes: &[usize], modulation_steps: Option<usize>) -> usize {
    let layers: usize = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    let modulation = match (modulation_steps, sizes.get(1)) {
        (Some(t), Some(&h)) => 2 * h * t,
        _ => 0,
    };
    layers + modulation
}

impl DenseNet {
    /// Zero-initialized network. `modulation_steps` enables per-step gain and
    /// shift on the first hidden layer, which must then exist.
    pub fn zeros(
        sizes: &[usize],
        activation: Activation,
        modulation_steps: Option<usize>,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::precondition(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        if let Some(t) = modulation_steps {
            if sizes.len() < 3 || t == 0 {
                return Err(Error::precondition(
                    "step modulation needs a hidden layer and at least one step",
                ));
            }
        }
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            activation,
            modulation_steps,
            params: vec![0.0; param_count(sizes, modulation_steps)],
        })
    }

    pub fn from_params(
        sizes: &[usize],
        activation: Activation,
        modulation_steps: Option<usize>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation, modulation_steps)?;
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                context: "network parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        net.params = params;
        Ok(net)
    }

    /// Xavier-uniform weights, zero biases, identity modulation. The output
    /// layer's weights are multiplied by `output_gain`.
    pub fn init_random<R: Rng + ?Sized>(&mut self, rng: &mut R, output_gain: f64) {
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
            for p in &mut self.params[offset..offset + n_in * n_out] {
                *p = gain * rng.random_range(-bound..bound);
            }
            offset += n_in * n_out;
            self.params[offset..offset + n_out].fill(0.0);
            offset += n_out;
        }
        self.params[offset..].fill(0.0);
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn modulation_steps(&self) -> Option<usize> {
        self.modulation_steps
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn modulation_offset(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn check_call(&self, input: &[f64], step: Option<usize>) -> Result<Option<usize>> {
        if input.len() != self.sizes[0] {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.sizes[0],
                got: input.len(),
            });
        }
        match (self.modulation_steps, step) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::precondition(
                "step-modulated network evaluated without a step",
            )),
            (Some(t), Some(s)) if s >= t => Err(Error::precondition(format!(
                "step {s} out of range for {t}-step modulation"
            ))),
            (Some(_), Some(s)) => Ok(Some(s)),
        }
    }

    fn run(&self, input: &[f64], step: Option<usize>) -> Tape {
        let n_layers = self.sizes.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers.saturating_sub(1)),
            z0: Vec::new(),
            output: Vec::new(),
        };
        let mut offset = 0;
        let mut h = input.to_vec();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let mut z: Vec<f64> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>();
            }
            let last = l + 1 == n_layers;
            if l == 0 && !last {
                tape.z0 = z.clone();
                if let Some(s) = step {
                    let base = self.modulation_offset();
                    let t = self.modulation_steps.unwrap();
                    let gain = &self.params[base + s * n_out..base + (s + 1) * n_out];
                    let shift =
                        &self.params[base + t * n_out + s * n_out..base + t * n_out + (s + 1) * n_out];
                    for ((zi, g), sh) in z.iter_mut().zip(gain).zip(shift) {
                        *zi = *zi * (1.0 + g) + sh;
                    }
                }
            }
            let next = if last {
                z.clone()
            } else {
                z.iter().map(|&u| self.activation.apply(u)).collect()
            };
            tape.inputs.push(std::mem::replace(&mut h, next));
            if !last {
                tape.pre.push(z);
            }
        }
        tape.output = h;
        tape
    }

    /// Evaluates the network. `step` is required exactly when the net carries
    /// step modulation (it is ignored otherwise).
    pub fn forward(&self, input: &[f64], step: Option<usize>) -> Result<Vec<f64>> {
        let step = self.check_call(input, step)?;
        let out = self.run(input, step).output;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(out)
    }

    /// Gradient of `<forward(input), cotangent>` with respect to every parameter.
    pub fn backward(
        &self,
        input: &[f64],
        step: Option<usize>,
        cotangent: &[f64],
    ) -> Result<GradVector> {
        let mut grad = GradVector::zeros(self.params.len());
        self.backward_into(input, step, cotangent, &mut grad)?;
        Ok(grad)
    }

    /// Like [`DenseNet::backward`], accumulating into `grad` and returning the
    /// forward output.
    pub fn backward_into(
        &self,
        input: &[f64],
        step: Option<usize>,
        cotangent: &[f64],
        grad: &mut GradVector,
    ) -> Result<Vec<f64>> {
        let step = self.check_call(input, step)?;
        if cotangent.len() != self.output_len() {
            return Err(Error::Dimension {
                context: "output cotangent",
                expected: self.output_len(),
                got: cotangent.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "gradient accumulator",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let tape = self.run(input, step);
        let n_layers = self.sizes.len() - 1;
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += (w[0] + 1) * w[1];
                Some(o)
            })
            .collect();

        let mut delta = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < n_layers {
                // delta currently holds d/d(hidden output); move to pre-activation.
                let u = &tape.pre[l];
                let h = &tape.inputs[l + 1];
                for i in 0..n_out {
                    delta[i] *= self.activation.derivative(u[i], h[i]);
                }
                if l == 0 {
                    if let Some(s) = step {
                        let base = self.modulation_offset();
                        let t = self.modulation_steps.unwrap();
                        for i in 0..n_out {
                            let g = self.params[base + s * n_out + i];
                            grad.0[base + s * n_out + i] += delta[i] * tape.z0[i];
                            grad.0[base + t * n_out + s * n_out + i] += delta[i];
                            delta[i] *= 1.0 + g;
                        }
                    }
                }
            }
            let off = offsets[l];
            let x = &tape.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad.0[off + o * n_in..off + (o + 1) * n_in];
                    for (gw, xi) in row.iter_mut().zip(x) {
                        *gw += d * xi;
                    }
                }
                grad.0[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wi;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(tape.output)
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        OptState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained a non-finite entry; nothing changed.
    SkippedNonFinite,
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grad: &GradVector, opt: &mut OptState) -> Result<StepOutcome> {
    if grad.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::Dimension {
            context: "adam step",
            expected: params.len(),
            got: grad.len().min(opt.m.len()).min(opt.v.len()),
        });
    }
    if !grad.is_finite() {
        log::warn!("adam step skipped: non-finite gradient");
        return Ok(StepOutcome::SkippedNonFinite);
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for i in 0..params.len() {
        let g = grad.0[i];
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        params[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(StepOutcome::Applied)
}

/// Scalar loss of the network output: returns the loss and its gradient with
/// respect to the output.
pub type OutputLoss<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Central-difference gradient of `loss(forward(input))` w.r.t. all parameters.
pub fn numeric_gradient(
    net: &DenseNet,
    input: &[f64],
    step: Option<usize>,
    loss: &OutputLoss<'_>,
    eps: f64,
) -> Result<GradVector> {
    let mut probe = net.clone();
    let mut out = vec![0.0; net.param_count()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let plus = loss(&probe.forward(input, step)?).0;
        probe.params[i] = orig - eps;
        let minus = loss(&probe.forward(input, step)?).0;
        probe.params[i] = orig;
        *g = (plus - minus) / (2.0 * eps);
    }
    Ok(GradVector(out))
}

/// Largest per-coordinate relative error of `analytic` against `numeric`.
/// Each coordinate is scaled by `max(|numeric_i|, 1e-3 * max|numeric|)` so that
/// near-zero entries of a large gradient do not dominate.
pub fn max_relative_error(analytic: &GradVector, numeric: &GradVector) -> f64 {
    let floor = (1e-3 * numeric.max_abs()).max(1e-12);
    analytic
        .0
        .iter()
        .zip(&numeric.0)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of `loss(forward(input))` with central
/// differences and returns the maximum relative error.
pub fn finite_diff_check(
    net: &DenseNet,
    input: &[f64],
    step: Option<usize>,
    loss: &OutputLoss<'_>,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::precondition(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let out = net.forward(input, step)?;
    let (_, cot) = loss(&out);
    let analytic = net.backward(input, step, &cot)?;
    let numeric = numeric_gradient(net, input, step, loss, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
