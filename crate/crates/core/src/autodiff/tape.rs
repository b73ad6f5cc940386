use super::kernels::{self, ConvGeom};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of training batches folded into the running statistics.
    pub tracked: u64,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            tracked: 0,
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.tracked > 0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
        bias: Var,
    },
    BalancedBce {
        prob: Var,
        label: Vec<f64>,
        beta: f64,
        batch: usize,
    },
    #[cfg(test)]
    BrokenDouble {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse iteration over the
/// node list is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Probabilities are clamped below this value before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it participates in differentiation when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.tensor.clone(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4().map_err(|_| {
            Error::Dimension(format!("conv2d weight must be [Cout,Cin,k,k], got {:?}", self.shape(weight)))
        })?;
        if kh != kw || kh == 0 {
            return Err(Error::Dimension(format!("conv2d kernel axes must be equal and >= 1, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d channel axis mismatch: input axis 1 has {cin}, weight axis 1 has {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d bias axis 0 must equal weight axis 0 ({cout}), got shape {:?}",
                    self.shape(b)
                )));
            }
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} exceeds padded input axes 2,3 ({}x{})",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let value = Tensor::new(vec![batch, cout, geom.oh, geom.ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::Dimension("maxpool window and stride must be >= 1".into()));
        }
        if dims[2] < k || dims[3] < k {
            return Err(Error::Dimension(format!(
                "maxpool window {k} larger than input axes 2,3 ({}x{})",
                dims[2], dims[3]
            )));
        }
        let (out, argmax, odims) = kernels::maxpool_forward(self.data(input), dims, k, stride);
        let value = Tensor::new(odims.to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Batch normalization over `(B, H, W)` per channel. Train mode updates
    /// `state` as `running = (1 - momentum) * running + momentum * batch`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let c = dims[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(Error::Dimension(format!(
                "batchnorm expects per-channel tensors of length {c} (input axis 1)"
            )));
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        match mode {
            Mode::Train => {
                if dims[0] * dims[2] * dims[3] < 2 {
                    return Err(Error::Dimension(
                        "batchnorm in train mode needs at least 2 values per channel".into(),
                    ));
                }
                let fwd = kernels::batchnorm_train_forward(
                    self.data(input),
                    dims,
                    self.data(gamma),
                    self.data(beta),
                    state.eps,
                );
                let m = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * fwd.mean[ch];
                    state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * fwd.var[ch];
                }
                state.tracked += 1;
                let value = Tensor::new(dims.to_vec(), fwd.output)?;
                Ok(self.push(
                    value,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        xhat: fwd.xhat,
                        inv_std: fwd.inv_std,
                    },
                    rg,
                ))
            }
            Mode::Eval => {
                if !state.is_initialized() {
                    return Err(Error::Uninitialized(
                        "batchnorm evaluated before any running statistics were collected".into(),
                    ));
                }
                let inv_std: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
                let plane = dims[2] * dims[3];
                let x = self.data(input);
                let (g, b) = (self.data(gamma), self.data(beta));
                let mut xhat = vec![0.0; x.len()];
                let mut out = vec![0.0; x.len()];
                for (i, (xv, (xh, o))) in x.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
                    let ch = (i / plane) % c;
                    *xh = (xv - state.running_mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + b[ch];
                }
                let value = Tensor::new(dims.to_vec(), out)?;
                Ok(self.push(
                    value,
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// Align-corners bilinear resampling to a larger (or equal) extent.
    pub fn upsample_bilinear(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        if target_h < dims[2] || target_w < dims[3] {
            return Err(Error::Dimension(format!(
                "upsample target {target_h}x{target_w} smaller than source {}x{}",
                dims[2], dims[3]
            )));
        }
        let out = kernels::upsample_forward(self.data(input), dims, target_h, target_w);
        let value = Tensor::new(vec![dims[0], dims[1], target_h, target_w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Upsample { input }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map preserves shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, kernels::sigmoid_scalar, Op::Sigmoid { input })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(0.0), Op::Relu { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, |v| v * factor, Op::Scale { input, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(input);
        self.push(Tensor::scalar(m), Op::Mean { input }, rg)
    }

    /// `Σ weights_i · input_i` against a constant weight vector.
    pub fn dot(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::Dimension(format!(
                "dot weights have {} elements, input has {}",
                weights.len(),
                self.value(input).numel()
            )));
        }
        let s = self.data(input).iter().zip(&weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }, rg))
    }

    /// `bias + Σ_m weights[m] · inputs[m]` over equally shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, bias: Var) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Dimension("weighted_sum needs at least one input".into()))?;
        let shape = self.shape(first).to_vec();
        if inputs.iter().any(|&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::Dimension("weighted_sum inputs differ in shape".into()));
        }
        if self.shape(weights) != [inputs.len()] || self.shape(bias) != [1] {
            return Err(Error::Dimension(format!(
                "weighted_sum expects {} weights and a scalar bias",
                inputs.len()
            )));
        }
        let bias_v = self.data(bias)[0];
        let mut out = vec![bias_v; shape.iter().product()];
        for (m, &v) in inputs.iter().enumerate() {
            let h = self.data(weights)[m];
            out.iter_mut().zip(self.data(v)).for_each(|(o, x)| *o += h * x);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(weights) || self.rg(bias) || inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                bias,
            },
            rg,
        ))
    }

    /// Class-balanced binary cross-entropy, summed over pixels and averaged
    /// over the leading batch axis.
    pub fn balanced_bce(&mut self, prob: Var, label: &Tensor, beta: f64) -> Result<Var> {
        let shape = self.shape(prob).to_vec();
        if label.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "label shape {:?} does not match prediction shape {shape:?}",
                label.shape()
            )));
        }
        if let Some(bad) = label.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input(format!("label contains non-binary value {bad}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Input(format!("beta {beta} outside [0, 1]")));
        }
        let batch = shape.first().copied().unwrap_or(1).max(1);
        let total: f64 = self
            .data(prob)
            .iter()
            .zip(label.data())
            .map(|(&p, &y)| {
                if y == 1.0 {
                    -beta * p.max(LOG_FLOOR).ln()
                } else {
                    -(1.0 - beta) * (1.0 - p).max(LOG_FLOOR).ln()
                }
            })
            .sum();
        let rg = self.rg(prob);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::BalancedBce {
                prob,
                label: label.data().to_vec(),
                beta,
                batch,
            },
            rg,
        ))
    }

    #[cfg(test)]
    pub(crate) fn broken_double(&mut self, input: Var) -> Var {
        self.unary(input, |v| 2.0 * v, Op::BrokenDouble { input })
    }

    /// Reverse sweep from a scalar root. Gradients from earlier sweeps are
    /// discarded; within one sweep contributions over multiple paths sum.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let g = f(self);
            self.accumulate(v, g);
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily move the op out so kernels can borrow node values.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(self.data(input), self.data(weight), g, &geom);
                self.accumulate(input, grads.input);
                self.accumulate(weight, grads.weight);
                if let Some(b) = bias {
                    self.accumulate(b, grads.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let input = *input;
                self.accumulate_with(input, |t| {
                    let mut d = vec![0.0; t.value(input).numel()];
                    for (&src, &go) in argmax.iter().zip(g) {
                        d[src] += go;
                    }
                    d
                });
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dims = self.value(*input).dims4().expect("recorded as 4-D");
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_train_backward(g, xhat, inv_std, self.data(*gamma), dims);
                self.accumulate(*input, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = self.value(*input).dims4().expect("recorded as 4-D");
                let plane = h * w;
                let gam = self.data(*gamma).to_vec();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..b * c * plane {
                    let ch = (i / plane) % c;
                    dx[i] = g[i] * gam[ch] * inv_std[ch];
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
                self.accumulate(*input, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            &Op::Upsample { input } => {
                let dims = self.value(input).dims4().expect("recorded as 4-D");
                let out = self.nodes[idx].value.dims4().expect("recorded as 4-D");
                self.accumulate_with(input, |_| kernels::upsample_backward(g, dims, out[2], out[3]));
            }
            &Op::Sigmoid { input } => {
                let d = self.nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, go)| go * s * (1.0 - s))
                    .collect();
                self.accumulate(input, d);
            }
            &Op::Relu { input } => {
                self.accumulate_with(input, |t| {
                    t.data(input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &go)| if x > 0.0 { go } else { 0.0 })
                        .collect()
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            &Op::Scale { input, factor } => {
                self.accumulate(input, g.iter().map(|v| v * factor).collect());
            }
            &Op::Sum { input } => {
                let n = self.value(input).numel();
                self.accumulate(input, vec![g[0]; n]);
            }
            &Op::Mean { input } => {
                let n = self.value(input).numel();
                self.accumulate(input, vec![g[0] / n as f64; n]);
            }
            Op::Dot { input, weights } => {
                self.accumulate(*input, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::WeightedSum { inputs, weights, bias } => {
                let h = self.data(*weights).to_vec();
                let dh: Vec<f64> = inputs
                    .iter()
                    .map(|&v| self.data(v).iter().zip(g).map(|(x, go)| x * go).sum())
                    .collect();
                for (m, &v) in inputs.iter().enumerate() {
                    self.accumulate(v, g.iter().map(|go| go * h[m]).collect());
                }
                self.accumulate(*weights, dh);
                self.accumulate(*bias, vec![g.iter().sum()]);
            }
            Op::BalancedBce {
                prob,
                label,
                beta,
                batch,
            } => {
                // The floor is treated as straight-through so saturated wrong
                // predictions still receive a gradient.
                let scale = g[0] / *batch as f64;
                let d = self
                    .data(*prob)
                    .iter()
                    .zip(label)
                    .map(|(&p, &y)| {
                        if y == 1.0 {
                            -scale * beta / p.max(LOG_FLOOR)
                        } else {
                            scale * (1.0 - beta) / (1.0 - p).max(LOG_FLOOR)
                        }
                    })
                    .collect();
                self.accumulate(*prob, d);
            }
            #[cfg(test)]
            &Op::BrokenDouble { input } => {
                // Deliberately wrong: the true derivative is 2.
                self.accumulate(input, g.to_vec());
            }
        }
        self.nodes[idx].op = op;
    }
}
