//! Architecture manifest and learnable tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numeric::Tensor;
use crate::rng::{self, Stream};

/// How the per-layer jump contributions collapse into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpAggregation {
    Mean,
    Concat,
    Max,
}

/// Everything needed to rebuild parameter shapes; embedded in checkpoints
/// and validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: usize,
    pub relations: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub embedding_width: usize,
    /// Jump depth `d`: layers `N-d ..= N` contribute, clamped below at 1.
    pub jump_depth: usize,
    pub jump_aggregation: JumpAggregation,
    pub leaky_slope: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::InvalidArchitecture("layers must be >= 1".into()));
        }
        if self.relations == 0 || self.heads == 0 || self.embedding_width == 0 {
            return Err(ModelError::InvalidArchitecture(
                "relations, heads, and embedding width must be >= 1".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidArchitecture("feature_dim must be >= 1".into()));
        }
        if self.jump_depth > self.layers {
            return Err(ModelError::InvalidArchitecture(format!(
                "jump depth {} exceeds layer count {}",
                self.jump_depth, self.layers
            )));
        }
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return Err(ModelError::InvalidArchitecture(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Layers contributing jump terms; layer `n` reads activations `n - 1`,
    /// so the range is clamped at 1.
    pub fn jump_layers(&self) -> std::ops::RangeInclusive<usize> {
        let lo = self.layers.saturating_sub(self.jump_depth).max(1);
        lo..=self.layers
    }

    pub fn jump_layer_count(&self) -> usize {
        let r = self.jump_layers();
        r.end() - r.start() + 1
    }

    pub fn jump_width(&self) -> usize {
        match self.jump_aggregation {
            JumpAggregation::Mean | JumpAggregation::Max => self.embedding_width,
            JumpAggregation::Concat => self.embedding_width * self.jump_layer_count(),
        }
    }

    /// Width of the concatenated embedding fed to the classifier head.
    pub fn combined_width(&self) -> usize {
        self.embedding_width + self.jump_width()
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// Input projection, `feature_dim x width`.
    pub w_in: Tensor,
    /// Per-layer layer-norm affine parameters, each of length `width`.
    pub ln_gamma: Vec<Tensor>,
    pub ln_beta: Vec<Tensor>,
    /// Per layer, per relation weight matrix, `width x width`.
    pub weights: Vec<Vec<Tensor>>,
    /// Per layer, per relation, per head attention vector of length
    /// `2 * width` applied to the concatenated pair.
    pub att: Vec<Vec<Vec<Tensor>>>,
    /// Classifier head over the combined embedding.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Xavier-uniform init for projection, relation weights, and attention;
    /// identity-like layer norm; zero head so an untrained model predicts
    /// 0.5 everywhere.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let w = arch.embedding_width;
        let mut r = rng::derive(seed, Stream::ParamInit, 0);
        let mut xavier = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data).expect("sized by construction")
        };
        let w_in = xavier(arch.feature_dim, w, &mut r);
        let mut ln_gamma = Vec::new();
        let mut ln_beta = Vec::new();
        let mut weights = Vec::new();
        let mut att = Vec::new();
        for _ in 0..arch.layers {
            ln_gamma.push(Tensor::vector(vec![1.0; w]));
            ln_beta.push(Tensor::vector(vec![0.0; w]));
            let mut layer_w = Vec::new();
            let mut layer_a = Vec::new();
            for _ in 0..arch.relations {
                layer_w.push(xavier(w, w, &mut r));
                let mut heads = Vec::new();
                for _ in 0..arch.heads {
                    let bound = (6.0 / (2 * w + 1) as f64).sqrt();
                    let data: Vec<f64> =
                        (0..2 * w).map(|_| r.gen_range(-bound..bound)).collect();
                    heads.push(Tensor::vector(data));
                }
                layer_a.push(heads);
            }
            weights.push(layer_w);
            att.push(layer_a);
        }
        let head_w = Tensor::vector(vec![0.0; arch.combined_width()]);
        let head_b = Tensor::vector(vec![0.0]);
        Ok(Self {
            arch,
            w_in,
            ln_gamma,
            ln_beta,
            weights,
            att,
            head_w,
            head_b,
        })
    }

    /// All-zero parameters except unit layer-norm scales.
    pub fn zeros(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let w = arch.embedding_width;
        Ok(Self {
            w_in: Tensor::zeros(vec![arch.feature_dim, w]),
            ln_gamma: (0..arch.layers).map(|_| Tensor::vector(vec![1.0; w])).collect(),
            ln_beta: (0..arch.layers).map(|_| Tensor::vector(vec![0.0; w])).collect(),
            weights: (0..arch.layers)
                .map(|_| (0..arch.relations).map(|_| Tensor::zeros(vec![w, w])).collect())
                .collect(),
            att: (0..arch.layers)
                .map(|_| {
                    (0..arch.relations)
                        .map(|_| (0..arch.heads).map(|_| Tensor::zeros(vec![2 * w])).collect())
                        .collect()
                })
                .collect(),
            head_w: Tensor::zeros(vec![arch.combined_width()]),
            head_b: Tensor::zeros(vec![1]),
            arch,
        })
    }

    /// Stable name/tensor listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("w_in".to_string(), &self.w_in)];
        for n in 0..self.arch.layers {
            out.push((format!("layer{n}/ln_gamma"), &self.ln_gamma[n]));
            out.push((format!("layer{n}/ln_beta"), &self.ln_beta[n]));
            for r in 0..self.arch.relations {
                out.push((format!("layer{n}/rel{r}/weight"), &self.weights[n][r]));
                for m in 0..self.arch.heads {
                    out.push((format!("layer{n}/rel{r}/head{m}/att"), &self.att[n][r][m]));
                }
            }
        }
        out.push(("head/weight".to_string(), &self.head_w));
        out.push(("head/bias".to_string(), &self.head_b));
        out
    }

    /// Mutable variant of [`Self::named`]; identical names in identical
    /// order, which the optimizer relies on when pairing gradients.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("w_in".to_string(), &mut self.w_in)];
        let per_layer = self
            .ln_gamma
            .iter_mut()
            .zip(self.ln_beta.iter_mut())
            .zip(self.weights.iter_mut())
            .zip(self.att.iter_mut());
        for (n, (((gamma, beta), layer_w), layer_a)) in per_layer.enumerate() {
            out.push((format!("layer{n}/ln_gamma"), gamma));
            out.push((format!("layer{n}/ln_beta"), beta));
            for (r, (w, heads)) in layer_w.iter_mut().zip(layer_a.iter_mut()).enumerate() {
                out.push((format!("layer{n}/rel{r}/weight"), w));
                for (m, a) in heads.iter_mut().enumerate() {
                    out.push((format!("layer{n}/rel{r}/head{m}/att"), a));
                }
            }
        }
        out.push(("head/weight".to_string(), &mut self.head_w));
        out.push(("head/bias".to_string(), &mut self.head_b));
        out
    }

    /// Rebuild from named tensors, validating every shape against the
    /// architecture.
    pub fn from_named(
        arch: Architecture,
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let w = arch.embedding_width;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor, ModelError> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let w_in = take("w_in".to_string(), vec![arch.feature_dim, w])?;
        let mut ln_gamma = Vec::new();
        let mut ln_beta = Vec::new();
        let mut weights = Vec::new();
        let mut att = Vec::new();
        for n in 0..arch.layers {
            ln_gamma.push(take(format!("layer{n}/ln_gamma"), vec![w])?);
            ln_beta.push(take(format!("layer{n}/ln_beta"), vec![w])?);
            let mut layer_w = Vec::new();
            let mut layer_a = Vec::new();
            for r in 0..arch.relations {
                layer_w.push(take(format!("layer{n}/rel{r}/weight"), vec![w, w])?);
                let mut heads = Vec::new();
                for m in 0..arch.heads {
                    heads.push(take(format!("layer{n}/rel{r}/head{m}/att"), vec![2 * w])?);
                }
                layer_a.push(heads);
            }
            weights.push(layer_w);
            att.push(layer_a);
        }
        let head_w = take("head/weight".to_string(), vec![arch.combined_width()])?;
        let head_b = take("head/bias".to_string(), vec![1])?;
        Ok(Self {
            arch,
            w_in,
            ln_gamma,
            ln_beta,
            weights,
            att,
            head_w,
            head_b,
        })
    }
}
