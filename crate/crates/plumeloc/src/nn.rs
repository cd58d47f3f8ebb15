//! Dense feed-forward networks with hand-rolled differentiation: reverse-mode
//! parameter gradients, analytic first and second input derivatives, and an
//! Adam optimizer.
//!
//! The engine covers exactly what the estimators need. Second derivatives are
//! propagated per input coordinate (the Hessian diagonal only), which is all a
//! Laplacian requires, and the same forward tape supports a reverse pass for
//! losses that depend on those derivatives. Batches are row-major: one sample
//! per row. Gradients returned by the reverse passes are sums over the batch.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative, recovered from the activation output rather than the
    /// pre-activation; every supported function permits this. ReLU uses
    /// derivative 0 at exactly zero pre-activation.
    fn prime_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn second_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    fn third_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * (1.0 - a * a) * (1.0 - 3.0 * a * a),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    /// Whether input-derivative propagation is defined for this function.
    pub fn twice_differentiable(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected relu, tanh, or identity)"
            ))),
        }
    }
}

/// One affine map plus activation. `weight` is `out_dim x in_dim`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::Dimension(format!(
                "layer bias length {} does not match weight rows {}",
                bias.len(),
                weight.nrows()
            )));
        }
        if let Some(bad) = weight.iter().chain(bias.iter()).find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite layer parameter {bad}"
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Fully connected network: an ordered stack of layers with chained dims.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    k,
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to output, e.g. `[2, 64, 64, 4]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in a fixed flat order: per layer, weight entries row-major,
    /// then bias. `set_params_flat` and `Gradients::flat` use the same order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if let Some(idx) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite parameter at flat index {idx}: {}",
                flat[idx]
            )));
        }
        let mut k = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// Evaluates the network on a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(format!("input view: {e}")))?;
        Ok(self.forward_batch(x)?.row(0).to_vec())
    }

    /// Evaluates the network on a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input_width(x.ncols())?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            a = z.mapv_into(|v| layer.activation.apply(v));
        }
        Ok(a)
    }

    /// Forward pass that records every layer's activations for `backward_tape`.
    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input_width(x.ncols())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let z = acts.last().unwrap().dot(&layer.weight.t()) + &layer.bias;
            acts.push(z.mapv_into(|v| layer.activation.apply(v)));
        }
        Ok(Tape { acts })
    }

    /// Reverse-mode gradients of `sum(upstream * output)` over the batch.
    ///
    /// Returns parameter gradients (summed over rows) and the gradient with
    /// respect to the input batch.
    pub fn backward_tape(
        &self,
        tape: &Tape,
        upstream: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let out = tape.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Dimension(format!(
                "upstream shape {:?} does not match output shape {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta: Array2<f64> = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act_out = &tape.acts[l + 1];
            delta.zip_mut_with(act_out, |d, &a| {
                *d *= layer.activation.prime_from_output(a);
            });
            grads.weights[l] = delta.t().dot(&tape.acts[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weight);
        }
        Ok((grads, delta))
    }

    /// Single-sample convenience wrapper around the taped reverse pass.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "upstream length {} does not match output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(format!("input view: {e}")))?;
        let tape = self.forward_tape(x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .map_err(|e| Error::Dimension(format!("upstream view: {e}")))?;
        let (grads, dx) = self.backward_tape(&tape, &up)?;
        Ok((grads, dx.row(0).to_vec()))
    }

    /// Forward pass that also propagates, per input coordinate, the first and
    /// pure second derivatives of every activation. Requires all activations
    /// twice differentiable.
    pub fn forward_with_input_derivs(&self, x: ArrayView2<'_, f64>) -> Result<DerivTape> {
        self.check_input_width(x.ncols())?;
        if let Some(bad) = self
            .layers
            .iter()
            .position(|l| !l.activation.twice_differentiable())
        {
            return Err(Error::UnsupportedActivation(format!(
                "layer {bad} uses {}, which has no second derivative; input \
                 derivatives need tanh or identity activations",
                self.layers[bad].activation.name()
            )));
        }
        let batch = x.nrows();
        let d = x.ncols();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        // Derivative blocks of the current activations w.r.t. each input
        // coordinate. Seeded with one-hot columns: d a0 / d x_i = e_i.
        let mut jac: Vec<Array2<f64>> = (0..d)
            .map(|i| {
                let mut m = Array2::zeros((batch, d));
                m.column_mut(i).fill(1.0);
                m
            })
            .collect();
        let mut hess: Vec<Array2<f64>> = (0..d).map(|_| Array2::zeros((batch, d))).collect();
        let mut pre_jac = Vec::with_capacity(self.layers.len());
        let mut pre_hess = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wt = layer.weight.t();
            let z = acts.last().unwrap().dot(&wt) + &layer.bias;
            let pz: Vec<Array2<f64>> = jac.iter().map(|p| p.dot(&wt)).collect();
            let qz: Vec<Array2<f64>> = hess.iter().map(|q| q.dot(&wt)).collect();
            let a = z.mapv_into(|v| layer.activation.apply(v));
            let s1 = a.mapv(|v| layer.activation.prime_from_output(v));
            let s2 = a.mapv(|v| layer.activation.second_from_output(v));
            // Chain rule per coordinate: p' = s1*pz, q' = s2*pz^2 + s1*qz.
            jac = pz.iter().map(|p| p * &s1).collect();
            hess = pz
                .iter()
                .zip(&qz)
                .map(|(p, q)| &(&s2 * &(p * p)) + &(&s1 * q))
                .collect();
            acts.push(a);
            pre_jac.push(pz);
            pre_hess.push(qz);
        }
        Ok(DerivTape {
            acts,
            pre_jac,
            pre_hess,
            out_jac: jac,
            out_hess: hess,
        })
    }

    /// Reverse pass through `forward_with_input_derivs`: parameter gradients
    /// of a scalar loss given its cotangents with respect to the output
    /// values, output first derivatives, and output second derivatives.
    ///
    /// Each cotangent array is `batch x output_dim`; the derivative cotangent
    /// slices hold one array per input coordinate. Gradients are summed over
    /// the batch.
    pub fn backward_input_derivs(
        &self,
        tape: &DerivTape,
        value_bar: &Array2<f64>,
        jac_bar: &[Array2<f64>],
        hess_bar: &[Array2<f64>],
    ) -> Result<Gradients> {
        let d = tape.input_dim();
        let out_shape = tape.value().dim();
        if value_bar.dim() != out_shape {
            return Err(Error::Dimension(format!(
                "value cotangent shape {:?} does not match output {:?}",
                value_bar.dim(),
                out_shape
            )));
        }
        if jac_bar.len() != d || hess_bar.len() != d {
            return Err(Error::Dimension(format!(
                "expected {d} derivative cotangent blocks, got {} and {}",
                jac_bar.len(),
                hess_bar.len()
            )));
        }
        for block in jac_bar.iter().chain(hess_bar.iter()) {
            if block.dim() != out_shape {
                return Err(Error::Dimension(format!(
                    "derivative cotangent shape {:?} does not match output {:?}",
                    block.dim(),
                    out_shape
                )));
            }
        }
        let mut grads = Gradients::zeros_like(self);
        let mut a_bar = value_bar.clone();
        let mut p_bar: Vec<Array2<f64>> = jac_bar.to_vec();
        let mut q_bar: Vec<Array2<f64>> = hess_bar.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let a_out = &tape.acts[l + 1];
            let s1 = a_out.mapv(|v| act.prime_from_output(v));
            let s2 = a_out.mapv(|v| act.second_from_output(v));
            let s3 = a_out.mapv(|v| act.third_from_output(v));
            let pz = &tape.pre_jac[l];
            let qz = &tape.pre_hess[l];
            // Reverse of a = s(z), p' = s1*pz, q' = s2*pz^2 + s1*qz.
            let mut z_bar = &a_bar * &s1;
            let mut pz_bar = Vec::with_capacity(d);
            let mut qz_bar = Vec::with_capacity(d);
            for i in 0..d {
                z_bar = z_bar + &(&(&p_bar[i] * &s2) * &pz[i]);
                z_bar = z_bar + &(&q_bar[i] * &(&(&s3 * &(&pz[i] * &pz[i])) + &(&s2 * &qz[i])));
                pz_bar.push(&(&p_bar[i] * &s1) + &(&(&q_bar[i] * &s2) * &(2.0 * &pz[i])));
                qz_bar.push(&q_bar[i] * &s1);
            }
            // Reverse of the affine maps z = a_in W^T + b, pz = p_in W^T,
            // qz = q_in W^T. Input-side derivative blocks are rebuilt from the
            // previous layer's stored pre-activation blocks.
            let a_in = &tape.acts[l];
            let mut w_grad = z_bar.t().dot(a_in);
            for i in 0..d {
                let (p_in, q_in) = tape.input_blocks(self, l, i);
                w_grad = w_grad + pz_bar[i].t().dot(&p_in) + qz_bar[i].t().dot(&q_in);
            }
            grads.weights[l] = w_grad;
            grads.biases[l] = z_bar.sum_axis(Axis(0));
            a_bar = z_bar.dot(&layer.weight);
            p_bar = pz_bar.iter().map(|m| m.dot(&layer.weight)).collect();
            q_bar = qz_bar.iter().map(|m| m.dot(&layer.weight)).collect();
        }
        Ok(grads)
    }

    /// First derivatives and pure second derivatives of every output with
    /// respect to every input coordinate, both `output_dim x input_dim`.
    pub fn input_derivatives(&self, input: &[f64]) -> Result<InputDerivatives> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(format!("input view: {e}")))?;
        let tape = self.forward_with_input_derivs(x)?;
        let n_out = self.output_dim();
        let d = input.len();
        let mut gradient = Array2::zeros((n_out, d));
        let mut hessian_diag = Array2::zeros((n_out, d));
        for i in 0..d {
            for o in 0..n_out {
                gradient[[o, i]] = tape.out_jac[i][[0, o]];
                hessian_diag[[o, i]] = tape.out_hess[i][[0, o]];
            }
        }
        Ok(InputDerivatives {
            value: tape.value().row(0).to_vec(),
            gradient,
            hessian_diag,
        })
    }

    pub fn to_checkpoint(
        &self,
        seed: u64,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Checkpoint {
        Checkpoint {
            dims: self.dims(),
            activations: self.activations(),
            parameters: self.params_flat(),
            seed,
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<DenseNet> {
        let mut net = zeros_net(&ck.dims, &ck.activations)?;
        net.set_params_flat(&ck.parameters)?;
        Ok(net)
    }

    fn check_input_width(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                got
            )));
        }
        Ok(())
    }
}

/// Activation record of one batched forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }

    pub fn batch_len(&self) -> usize {
        self.acts[0].nrows()
    }
}

/// Forward record of values plus per-coordinate first/second derivative
/// blocks, enough to evaluate derivative-dependent losses and to run their
/// reverse pass.
#[derive(Debug, Clone)]
pub struct DerivTape {
    acts: Vec<Array2<f64>>,
    /// `pre_jac[l][i]`: derivative of layer `l`'s pre-activation w.r.t. input
    /// coordinate `i`, shape `batch x out_dim(l)`.
    pre_jac: Vec<Vec<Array2<f64>>>,
    pre_hess: Vec<Vec<Array2<f64>>>,
    out_jac: Vec<Array2<f64>>,
    out_hess: Vec<Array2<f64>>,
}

impl DerivTape {
    pub fn value(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }

    /// One `batch x output_dim` array per input coordinate.
    pub fn jacobian(&self) -> &[Array2<f64>] {
        &self.out_jac
    }

    /// Pure second derivatives, same layout as `jacobian`.
    pub fn hessian_diag(&self) -> &[Array2<f64>] {
        &self.out_hess
    }

    pub fn input_dim(&self) -> usize {
        self.acts[0].ncols()
    }

    pub fn batch_len(&self) -> usize {
        self.acts[0].nrows()
    }

    /// Post-activation derivative blocks feeding layer `l`, rebuilt from the
    /// stored pre-activation blocks of layer `l - 1`.
    fn input_blocks(&self, net: &DenseNet, l: usize, i: usize) -> (Array2<f64>, Array2<f64>) {
        if l == 0 {
            let batch = self.batch_len();
            let d = self.input_dim();
            let mut p = Array2::zeros((batch, d));
            p.column_mut(i).fill(1.0);
            (p, Array2::zeros((batch, d)))
        } else {
            let act = net.layers[l - 1].activation;
            let a = &self.acts[l];
            let s1 = a.mapv(|v| act.prime_from_output(v));
            let s2 = a.mapv(|v| act.second_from_output(v));
            let pz = &self.pre_jac[l - 1][i];
            let qz = &self.pre_hess[l - 1][i];
            (&s1 * pz, &(&s2 * &(pz * pz)) + &(&s1 * qz))
        }
    }
}

/// Single-input derivative bundle returned by `input_derivatives`.
#[derive(Debug, Clone)]
pub struct InputDerivatives {
    pub value: Vec<f64>,
    /// `gradient[[o, i]]` = d output_o / d input_i.
    pub gradient: Array2<f64>,
    /// `hessian_diag[[o, i]]` = d^2 output_o / d input_i^2.
    pub hessian_diag: Array2<f64>,
}

/// Parameter gradients mirroring a network's layer shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    /// Flattened in the same order as `DenseNet::params_flat`.
    pub fn flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        flat
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            w.zip_mut_with(ow, |a, &b| *a += factor * b);
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            b.zip_mut_with(ob, |a, &v| *a += factor * v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    /// Fresh state with the standard moment constants (0.9, 0.999, 1e-8).
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    /// In-place update, the workhorse behind `adam_step`. Bias-corrected
    /// moments; the update is `-lr * m_hat / (sqrt(v_hat) + epsilon)`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer sized for {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite gradient at flat index {idx}: {}",
                grads[idx]
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Pure Adam update: returns new parameters and advanced state, leaving the
/// inputs untouched.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
) -> Result<(Vec<f64>, AdamState)> {
    let mut new_params = params.to_vec();
    let mut new_state = state.clone();
    new_state.apply(&mut new_params, grads)?;
    Ok((new_params, new_state))
}

/// Seeded network initialization: weights uniform in `+-1/sqrt(fan_in)`,
/// biases zero. Same seed, same parameters.
pub fn init_net(dims: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNet> {
    validate_shape(dims, activations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(activations.len());
    for (l, &act) in activations.iter().enumerate() {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let bound = 1.0 / (n_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weight = Array2::from_shape_fn((n_out, n_in), |_| dist.sample(&mut rng));
        layers.push(Layer::new(weight, Array1::zeros(n_out), act)?);
    }
    DenseNet::new(layers)
}

fn zeros_net(dims: &[usize], activations: &[Activation]) -> Result<DenseNet> {
    validate_shape(dims, activations)?;
    let layers = activations
        .iter()
        .enumerate()
        .map(|(l, &act)| {
            Layer::new(
                Array2::zeros((dims[l + 1], dims[l])),
                Array1::zeros(dims[l + 1]),
                act,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNet::new(layers)
}

fn validate_shape(dims: &[usize], activations: &[Activation]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least input and output dims, got {dims:?}"
        )));
    }
    if let Some(zero) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Config(format!("dims[{zero}] must be positive")));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::Config(format!(
            "{} dims describe {} layers but {} activations were given",
            dims.len(),
            dims.len() - 1,
            activations.len()
        )));
    }
    Ok(())
}

/// Serializable snapshot of a network plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Flattened in `params_flat` order.
    pub parameters: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = BufReader::new(File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        let expect: usize = ck
            .activations
            .iter()
            .enumerate()
            .map(|(l, _)| ck.dims[l] * ck.dims[l + 1] + ck.dims[l + 1])
            .sum();
        validate_shape(&ck.dims, &ck.activations)?;
        if ck.parameters.len() != expect {
            return Err(Error::Config(format!(
                "checkpoint dims {:?} imply {} parameters, file holds {}",
                ck.dims,
                expect,
                ck.parameters.len()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn single_layer(w: Array2<f64>, b: Array1<f64>, act: Activation) -> DenseNet {
        DenseNet::new(vec![Layer::new(w, b, act).unwrap()]).unwrap()
    }

    /// Central finite difference of `f` w.r.t. one flat parameter.
    fn fd_param(net: &DenseNet, idx: usize, h: f64, f: &dyn Fn(&DenseNet) -> f64) -> f64 {
        let base = net.params_flat();
        let mut plus = net.clone();
        let mut p = base.clone();
        p[idx] += h;
        plus.set_params_flat(&p).unwrap();
        let mut minus = net.clone();
        let mut m = base;
        m[idx] -= h;
        minus.set_params_flat(&m).unwrap();
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn assert_close_rel(analytic: f64, reference: f64, tol: f64, what: &str) {
        let denom = analytic.abs().max(reference.abs()).max(1e-4);
        assert!(
            (analytic - reference).abs() / denom <= tol,
            "{what}: analytic {analytic} vs reference {reference}"
        );
    }

    #[test]
    fn zero_weights_identity_activation_returns_bias() {
        let net = single_layer(
            Array2::zeros((2, 3)),
            arr1(&[0.5, -1.25]),
            Activation::Identity,
        );
        assert_eq!(net.forward(&[3.0, -7.0, 11.0]).unwrap(), vec![0.5, -1.25]);
    }

    #[test]
    fn identity_matrix_net_passes_input_through() {
        let net = single_layer(Array2::eye(3), Array1::zeros(3), Activation::Identity);
        let input = [0.25, -4.5, 1.0e-3];
        assert_eq!(net.forward(&input).unwrap(), input.to_vec());
    }

    #[test]
    fn two_three_two_tanh_matches_hand_composition() {
        let w1 = arr2(&[[0.3, -0.7], [0.5, 0.2], [-0.4, 0.9]]);
        let b1 = arr1(&[0.1, -0.2, 0.05]);
        let w2 = arr2(&[[0.8, -0.3, 0.5], [-0.6, 0.4, 0.7]]);
        let b2 = arr1(&[-0.05, 0.3]);
        let net = DenseNet::new(vec![
            Layer::new(w1.clone(), b1.clone(), Activation::Tanh).unwrap(),
            Layer::new(w2.clone(), b2.clone(), Activation::Tanh).unwrap(),
        ])
        .unwrap();
        let (x0, x1) = (0.6, -1.1);
        let h: Vec<f64> = (0..3)
            .map(|j| (w1[[j, 0]] * x0 + w1[[j, 1]] * x1 + b1[j]).tanh())
            .collect();
        let y: Vec<f64> = (0..2)
            .map(|k| (w2[[k, 0]] * h[0] + w2[[k, 1]] * h[1] + w2[[k, 2]] * h[2] + b2[k]).tanh())
            .collect();
        let out = net.forward(&[x0, x1]).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = init_net(&[3, 2], &[Activation::Tanh], 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let cases: [(&[usize], &[Activation], u64); 3] = [
            (
                &[2, 8, 8, 1],
                &[Activation::Tanh, Activation::Tanh, Activation::Identity],
                11,
            ),
            (&[3, 8, 4], &[Activation::Relu, Activation::Identity], 12),
            (
                &[4, 6, 6, 2],
                &[Activation::Tanh, Activation::Relu, Activation::Identity],
                13,
            ),
        ];
        for (dims, acts, seed) in cases {
            let net = init_net(dims, acts, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let dist = Uniform::new_inclusive(-1.5, 1.5);
            let x = Array2::from_shape_fn((4, dims[0]), |_| dist.sample(&mut rng));
            let up = Array2::from_shape_fn((4, *dims.last().unwrap()), |_| dist.sample(&mut rng));
            let tape = net.forward_tape(x.view()).unwrap();
            let (grads, _) = net.backward_tape(&tape, &up).unwrap();
            let flat = grads.flat();
            let loss = |n: &DenseNet| (&n.forward_batch(x.view()).unwrap() * &up).sum();
            let n_params = net.param_count();
            let stride = (n_params / 25).max(1);
            for idx in (0..n_params).step_by(stride) {
                let fd = fd_param(&net, idx, 1e-4, &loss);
                assert_close_rel(flat[idx], fd, 1e-5, &format!("dims {dims:?} param {idx}"));
            }
        }
    }

    #[test]
    fn relu_at_zero_preactivation_uses_zero_subgradient() {
        let net = single_layer(arr2(&[[1.0]]), arr1(&[0.0]), Activation::Relu);
        let (grads, dx) = net.backward(&[0.0], &[1.0]).unwrap();
        assert_eq!(grads.weights[0][[0, 0]], 0.0);
        assert_eq!(grads.biases[0][0], 0.0);
        assert_eq!(dx[0], 0.0);
    }

    #[test]
    fn linear_net_input_gradient_is_weight_transpose_times_upstream() {
        // Power-of-two entries keep every product and sum exact, so the
        // comparison can be bitwise regardless of accumulation order.
        let w = arr2(&[[1.0, -2.0, 0.5], [0.25, 8.0, -4.0]]);
        let net = single_layer(w.clone(), Array1::zeros(2), Activation::Identity);
        let upstream = [2.0, 0.5];
        let (_, dx) = net.backward(&[1.0, 2.0, 3.0], &upstream).unwrap();
        for i in 0..3 {
            let expect = w[[0, i]] * upstream[0] + w[[1, i]] * upstream[1];
            assert_eq!(dx[i], expect);
        }
    }

    #[test]
    fn tanh_net_input_derivatives_match_finite_differences() {
        let net = init_net(
            &[2, 16, 16, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            21,
        )
        .unwrap();
        let x = [0.35, -0.6];
        let derivs = net.input_derivatives(&x).unwrap();
        let h = 1e-4;
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd_grad = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert_close_rel(
                derivs.gradient[[0, i]],
                fd_grad,
                1e-4,
                &format!("grad x{i}"),
            );
            // Second derivatives against finite differences of the analytic
            // first derivatives.
            let jp = net.input_derivatives(&xp).unwrap().gradient[[0, i]];
            let jm = net.input_derivatives(&xm).unwrap().gradient[[0, i]];
            assert_close_rel(
                derivs.hessian_diag[[0, i]],
                (jp - jm) / (2.0 * h),
                1e-4,
                &format!("hess x{i}"),
            );
        }
    }

    #[test]
    fn constant_net_has_zero_input_derivatives() {
        let net = single_layer(Array2::zeros((1, 2)), arr1(&[0.9]), Activation::Tanh);
        let d = net.input_derivatives(&[0.4, -2.0]).unwrap();
        assert_eq!(d.gradient, Array2::<f64>::zeros((1, 2)));
        assert_eq!(d.hessian_diag, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn single_tanh_unit_matches_closed_form_derivatives() {
        let w = 0.7;
        let net = single_layer(arr2(&[[w]]), arr1(&[0.0]), Activation::Tanh);
        for &x in &[0.3, -1.2, 2.0] {
            let d = net.input_derivatives(&[x]).unwrap();
            let t = (w * x).tanh();
            assert_abs_diff_eq!(d.value[0], t, epsilon = 1e-12);
            assert_abs_diff_eq!(d.gradient[[0, 0]], w * (1.0 - t * t), epsilon = 1e-12);
            assert_abs_diff_eq!(
                d.hessian_diag[[0, 0]],
                -2.0 * w * w * t * (1.0 - t * t),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn relu_is_rejected_for_input_derivatives() {
        let net = init_net(&[2, 4, 1], &[Activation::Relu, Activation::Identity], 3).unwrap();
        assert!(matches!(
            net.input_derivatives(&[0.1, 0.2]),
            Err(Error::UnsupportedActivation(_))
        ));
    }

    #[test]
    fn derivative_loss_parameter_gradients_match_finite_differences() {
        // Loss mixing values, first and second input derivatives, the shape
        // every derivative-penalized training objective takes.
        let net = init_net(
            &[2, 8, 8, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            31,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dist = Uniform::new_inclusive(-0.8, 0.8);
        let x = Array2::from_shape_fn((6, 2), |_| dist.sample(&mut rng));
        let loss = |n: &DenseNet| {
            let tape = n.forward_with_input_derivs(x.view()).unwrap();
            let c = tape.value();
            let (jx, jy) = (&tape.jacobian()[0], &tape.jacobian()[1]);
            let (hx, hy) = (&tape.hessian_diag()[0], &tape.hessian_diag()[1]);
            (c * c).sum()
                + 0.5 * (jx * jx).sum()
                + 0.25 * (jy * jy).sum()
                + 0.1 * (hx * hx).sum()
                + 0.2 * (hy * hy).sum()
        };
        let tape = net.forward_with_input_derivs(x.view()).unwrap();
        let value_bar = tape.value().mapv(|v| 2.0 * v);
        let jac_bar: Vec<Array2<f64>> = vec![
            tape.jacobian()[0].mapv(|v| 2.0 * 0.5 * v),
            tape.jacobian()[1].mapv(|v| 2.0 * 0.25 * v),
        ];
        let hess_bar: Vec<Array2<f64>> = vec![
            tape.hessian_diag()[0].mapv(|v| 2.0 * 0.1 * v),
            tape.hessian_diag()[1].mapv(|v| 2.0 * 0.2 * v),
        ];
        let grads = net
            .backward_input_derivs(&tape, &value_bar, &jac_bar, &hess_bar)
            .unwrap();
        let flat = grads.flat();
        let n_params = net.param_count();
        let stride = (n_params / 30).max(1);
        for idx in (0..n_params).step_by(stride) {
            let fd = fd_param(&net, idx, 1e-4, &loss);
            assert_close_rel(flat[idx], fd, 1e-5, &format!("param {idx}"));
        }
    }

    #[test]
    fn derivative_tape_agrees_with_plain_forward() {
        let net = init_net(&[2, 6, 3], &[Activation::Tanh, Activation::Identity], 41).unwrap();
        let x = arr2(&[[0.2, -0.4], [1.1, 0.7]]);
        let tape = net.forward_with_input_derivs(x.view()).unwrap();
        let plain = net.forward_batch(x.view()).unwrap();
        assert_eq!(tape.value(), &plain);
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        let state = AdamState::new(1, 1e-3);
        let (params, state) = adam_step(&[1.0], &[1.0], &state).unwrap();
        // Bias correction cancels at t=1: m_hat = v_hat = 1 exactly.
        assert_eq!(params[0], 1.0 - 1e-3 / (1.0 + 1e-8));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let state = AdamState::new(3, 1e-2);
        let before = [0.5, -2.0, 7.25];
        let (params, state) = adam_step(&before, &[0.0; 3], &state).unwrap();
        assert_eq!(params, before.to_vec());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_matches_scalar_reference_over_100_steps() {
        // Independent textbook loop: bias-corrected moments, epsilon outside
        // the square root.
        let lr = 1e-3;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p_ref, mut m, mut v) = (0.7, 0.0, 0.0);
        let mut params = vec![0.7];
        let mut state = AdamState::new(1, lr);
        for k in 1..=100u32 {
            let g = (k as f64 * 0.37).sin() + 0.2;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(k as i32));
            let v_hat = v / (1.0 - b2.powi(k as i32));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            let (np, ns) = adam_step(&params, &[g], &state).unwrap();
            params = np;
            state = ns;
        }
        assert!((params[0] - p_ref).abs() < 1e-12);
    }

    #[test]
    fn adam_step_is_pure() {
        let mut state = AdamState::new(2, 1e-3);
        let mut params = vec![1.0, -1.0];
        // Advance into a nontrivial state first.
        for _ in 0..5 {
            let (np, ns) = adam_step(&params, &[0.3, -0.8], &state).unwrap();
            params = np;
            state = ns;
        }
        let (p1, s1) = adam_step(&params, &[0.1, 0.4], &state).unwrap();
        let (p2, s2) = adam_step(&params, &[0.1, 0.4], &state).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1.first_moments(), s2.first_moments());
        assert_eq!(s1.second_moments(), s2.second_moments());
        assert_eq!(s1.step_count(), s2.step_count());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let state = AdamState::new(2, 1e-3);
        let err = adam_step(&[1.0, 2.0], &[0.5, f64::NAN], &state).unwrap_err();
        match err {
            Error::InvalidArgument(msg) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn linear_regression_loss_decreases_monotonically() {
        // y = A x with a single identity layer: loss must fall every step
        // early in training.
        let a = arr2(&[[1.5, -0.5], [0.25, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = Uniform::new_inclusive(-1.0, 1.0);
        let x = Array2::from_shape_fn((16, 2), |_| dist.sample(&mut rng));
        let y = x.dot(&a.t());
        let mut net = init_net(&[2, 2], &[Activation::Identity], 7).unwrap();
        let mut state = AdamState::new(net.param_count(), 1e-3);
        let mut losses = Vec::new();
        for _ in 0..51 {
            let tape = net.forward_tape(x.view()).unwrap();
            let resid = tape.output() - &y;
            losses.push((&resid * &resid).sum() / 16.0);
            let upstream = resid.mapv(|r| 2.0 * r / 16.0);
            let (grads, _) = net.backward_tape(&tape, &upstream).unwrap();
            let mut params = net.params_flat();
            state.apply(&mut params, &grads.flat()).unwrap();
            net.set_params_flat(&params).unwrap();
        }
        for k in 0..50 {
            assert!(
                losses[k + 1] < losses[k],
                "loss rose at step {k}: {} -> {}",
                losses[k],
                losses[k + 1]
            );
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let dims = [4, 8, 2];
        let acts = [Activation::Tanh, Activation::Identity];
        let a = init_net(&dims, &acts, 42).unwrap();
        let b = init_net(&dims, &acts, 42).unwrap();
        let c = init_net(&dims, &acts, 43).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn init_accepts_reference_architectures() {
        let mlp = init_net(
            &[602, 256, 128, 64, 2],
            &[
                Activation::Relu,
                Activation::Relu,
                Activation::Relu,
                Activation::Identity,
            ],
            1,
        )
        .unwrap();
        assert_eq!(mlp.dims(), vec![602, 256, 128, 64, 2]);
        let field = init_net(
            &[3, 64, 64, 64, 1],
            &[
                Activation::Tanh,
                Activation::Tanh,
                Activation::Tanh,
                Activation::Identity,
            ],
            1,
        )
        .unwrap();
        assert_eq!(field.dims(), vec![3, 64, 64, 64, 1]);
        // Uniform bounds scale with fan-in and biases start at zero.
        for (net, fan_in) in [(&mlp, 602.0), (&field, 3.0)] {
            let bound = 1.0 / f64::sqrt(fan_in);
            assert!(net.layers()[0].weight.iter().all(|w| w.abs() <= bound));
            assert!(net.layers()[0].bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(matches!(init_net(&[3], &[], 0), Err(Error::Config(_))));
        assert!(matches!(
            init_net(&[3, 0, 2], &[Activation::Tanh, Activation::Tanh], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_net(&[3, 2], &[Activation::Tanh, Activation::Tanh], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let net = init_net(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], 77).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epochs".to_string(), serde_json::json!(150));
        meta.insert("lr".to_string(), serde_json::json!(1e-3));
        let ck = net.to_checkpoint(77, meta.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let rebuilt = DenseNet::from_checkpoint(&loaded).unwrap();
        assert_eq!(rebuilt.params_flat(), net.params_flat());
        let input = [0.3, -0.2, 0.9];
        assert_eq!(
            rebuilt.forward(&input).unwrap(),
            net.forward(&input).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_parameter_count_mismatch() {
        let net = init_net(&[2, 3], &[Activation::Tanh], 7).unwrap();
        let mut ck = net.to_checkpoint(7, BTreeMap::new());
        ck.parameters.pop();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let text = serde_json::to_string(&ck).unwrap();
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn batch_forward_matches_per_sample_forward() {
        let net = init_net(&[3, 7, 2], &[Activation::Relu, Activation::Identity], 19).unwrap();
        let x = arr2(&[[0.1, -0.5, 2.0], [1.4, 0.0, -0.3], [-2.0, 0.8, 0.6]]);
        let batch = net.forward_batch(x.view()).unwrap();
        for (r, row) in x.rows().into_iter().enumerate() {
            let single = net.forward(row.as_slice().unwrap()).unwrap();
            for (c, v) in single.iter().enumerate() {
                assert_relative_eq!(batch[[r, c]], v, max_relative = 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_stays_finite_and_deterministic(
            seed in 0u64..1000,
            width in 1usize..6,
            x0 in -10.0f64..10.0,
            x1 in -10.0f64..10.0,
        ) {
            let net = init_net(
                &[2, width, 1],
                &[Activation::Tanh, Activation::Identity],
                seed,
            ).unwrap();
            let a = net.forward(&[x0, x1]).unwrap();
            let b = net.forward(&[x0, x1]).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a[0].is_finite());
        }

        #[test]
        fn adam_purity_holds_for_random_gradients(
            g0 in -5.0f64..5.0,
            g1 in -5.0f64..5.0,
            lr in 1e-5f64..1e-1,
        ) {
            let state = AdamState::new(2, lr);
            let params = [0.4, -0.9];
            let (p1, s1) = adam_step(&params, &[g0, g1], &state).unwrap();
            let (p2, s2) = adam_step(&params, &[g0, g1], &state).unwrap();
            prop_assert_eq!(p1, p2);
            prop_assert_eq!(s1.step_count(), s2.step_count());
        }
    }
}
