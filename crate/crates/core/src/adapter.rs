//! The visual adapter: an identity-initialized linear map (optionally a
//! small ReLU MLP for depth ablations) applied to unit image embeddings,
//! together with its Adam optimizer state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, normalize_with_norm, Mat};

pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Mat>,
    pub second_moment: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            first_moment: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat], cfg: &AdamConfig) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardTrace {
    /// Input to each layer (`inputs[0]` is the query itself).
    inputs: Vec<Vec<f64>>,
    /// Raw adapter output `u`.
    pub output: Vec<f64>,
    /// `u / ||u||`.
    pub unit: Vec<f64>,
    pub output_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    layers: Vec<Mat>,
    adam: AdamState,
    /// Completed training epochs.
    pub epoch: u64,
    pub seed: u64,
}

impl Adapter {
    /// `depth` identity layers with fresh optimizer state.
    pub fn identity(dim: usize, depth: usize, seed: u64) -> Self {
        let depth = depth.max(1);
        let layers = vec![Mat::identity(dim); depth];
        let shapes: Vec<_> = layers.iter().map(Mat::shape).collect();
        Self {
            layers,
            adam: AdamState::new(&shapes),
            epoch: 0,
            seed,
        }
    }

    pub fn from_layers(layers: Vec<Mat>, seed: u64) -> Result<Self> {
        let shapes: Vec<_> = layers.iter().map(Mat::shape).collect();
        Self::from_parts(layers, AdamState::new(&shapes), 0, seed)
    }

    pub fn from_parts(layers: Vec<Mat>, adam: AdamState, epoch: u64, seed: u64) -> Result<Self> {
        if layers.is_empty() || layers.len() > MAX_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "adapter depth {} outside 1..={MAX_DEPTH}",
                layers.len()
            )));
        }
        let dim = layers[0].rows();
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != (dim, dim) {
                return Err(Error::DimensionMismatch(format!(
                    "adapter layer {i} is {:?}, expected {dim}x{dim}",
                    l.shape()
                )));
            }
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("adapter layer {i}")));
            }
        }
        let moments_ok = adam.first_moment.len() == layers.len()
            && adam.second_moment.len() == layers.len()
            && adam
                .first_moment
                .iter()
                .chain(&adam.second_moment)
                .all(|m| m.shape() == (dim, dim));
        if !moments_ok {
            return Err(Error::DimensionMismatch("Adam moments do not match adapter layers".into()));
        }
        Ok(Self {
            layers,
            adam,
            epoch,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// The first (for a linear adapter, the only) weight matrix.
    pub fn theta(&self) -> &Mat {
        &self.layers[0]
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn is_identity(&self) -> bool {
        let id = Mat::identity(self.dim());
        self.layers.iter().all(|l| *l == id)
    }

    pub fn zero_grads(&self) -> Vec<Mat> {
        self.layers.iter().map(|l| Mat::zeros(l.rows(), l.cols())).collect()
    }

    /// Raw output `H z` (ReLU between layers when depth > 1).
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(z)?.output)
    }

    /// Adapted unit embedding `g = H z / ||H z||`.
    pub fn embed(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(z)?.unit)
    }

    pub fn trace(&self, z: &[f64]) -> Result<ForwardTrace> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter dim {} applied to vector of length {}",
                self.dim(),
                z.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = z.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = matvec(layer, &h)?;
            if i + 1 < self.layers.len() {
                next.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            inputs.push(h);
            h = next;
        }
        let (unit, output_norm) = normalize_with_norm(&h)?;
        Ok(ForwardTrace {
            inputs,
            output: h,
            unit,
            output_norm,
        })
    }

    /// Accumulates `dL/dlayers` given `dL/dg` for the unit output of `trace`.
    pub fn backward(&self, trace: &ForwardTrace, grad_unit: &[f64], grads: &mut [Mat]) {
        // d(u/|u|)/du = (I - g g^T) / |u|
        let proj = dot(&trace.unit, grad_unit);
        let mut delta: Vec<f64> = grad_unit
            .iter()
            .zip(&trace.unit)
            .map(|(gu, g)| (gu - g * proj) / trace.output_norm)
            .collect();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            grads[l].add_outer(1.0, &delta, input);
            if l == 0 {
                break;
            }
            let layer = &self.layers[l];
            let mut back = vec![0.0; layer.cols()];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (b, &w) in back.iter_mut().zip(layer.row(r)) {
                    *b += w * d;
                }
            }
            // input to layer l is relu(pre-activation of layer l-1)
            for (b, &x) in back.iter_mut().zip(input) {
                if x <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }

    pub fn apply_adam(&mut self, grads: &[Mat], cfg: &AdamConfig) {
        self.adam.update(&mut self.layers, grads, cfg);
    }

    /// Copy with every layer multiplied by `factor`; optimizer state reset.
    pub fn scaled(&self, factor: f64) -> Adapter {
        let layers: Vec<Mat> = self.layers.iter().map(|l| l.scaled(factor)).collect();
        let shapes: Vec<_> = layers.iter().map(Mat::shape).collect();
        Adapter {
            layers,
            adam: AdamState::new(&shapes),
            epoch: self.epoch,
            seed: self.seed,
        }
    }
}
