//! Message-passing reference model with an energy head and a pairwise force head.
//!
//! ```text
//! h0_i      = embed[Z_i]
//! h(l+1)_i  = tanh(W_l h_i + U_l agg_{j in N(i)} h_j / (1 + d_ij) + b_l)
//! e         = sum_i mlp(hL_i)
//! F_i       = sum_{j in N(i)} m_ij (x_j - x_i),   m_ij = u . tanh(V (h_i + h_j) + c)
//! ```
//!
//! `m_ij = m_ji`, so forces over a symmetric edge list sum to zero, and only
//! distances and displacements enter, so outputs are translation invariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::MAX_Z;
use crate::scalar::Scalar;

mod loss;
mod network;

pub use loss::{mtl_loss, BatchForward, LossBreakdown, LossSums};
pub use network::{ForwardCache, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter vector has {got} entries, config needs {want}")]
    ParamCount { got: usize, want: usize },
    #[error("{field} = {value} outside admissible {admissible}")]
    OutOfRange { field: &'static str, value: String, admissible: &'static str },
}

/// Neighbor aggregation of the message-passing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "mean-agg")]
    Mean,
    #[serde(rename = "sum-agg")]
    Sum,
    #[serde(rename = "max-agg")]
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::Sum, Aggregation::Max];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean-agg",
            Aggregation::Sum => "sum-agg",
            Aggregation::Max => "max-agg",
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mpnn_kind: Aggregation,
    pub mpnn_layers: usize,
    pub mpnn_width: usize,
    pub fc_layers: usize,
    pub fc_width: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_energy: f64,
    pub alpha_forces: f64,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mpnn_kind: Aggregation::Mean,
            mpnn_layers: 2,
            mpnn_width: 100,
            fc_layers: 2,
            fc_width: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha_energy: 1.0,
            alpha_forces: 100.0,
            seed: 0,
        }
    }
}

/// Admissible hyperparameter sets of the search space.
pub mod bounds {
    pub const MPNN_LAYERS: (usize, usize) = (1, 6);
    pub const MPNN_WIDTH: (usize, usize) = (100, 2000);
    pub const FC_LAYERS: (usize, usize) = (2, 3);
    pub const FC_WIDTH: (usize, usize) = (300, 1000);
    pub const BATCH_SIZE: (usize, usize) = (16, 128);
}

impl ModelConfig {
    /// Structural checks every model must pass.
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |field: &'static str, v: usize| {
            if v == 0 {
                Err(ModelError::OutOfRange { field, value: v.to_string(), admissible: ">= 1" })
            } else {
                Ok(())
            }
        };
        positive("mpnn_layers", self.mpnn_layers)?;
        positive("mpnn_width", self.mpnn_width)?;
        positive("fc_width", self.fc_width)?;
        positive("batch_size", self.batch_size)?;
        if self.fc_layers < 2 {
            return Err(ModelError::OutOfRange {
                field: "fc_layers",
                value: self.fc_layers.to_string(),
                admissible: ">= 2",
            });
        }
        for (field, v) in [
            ("learning_rate", self.learning_rate),
            ("alpha_energy", self.alpha_energy),
            ("alpha_forces", self.alpha_forces),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::OutOfRange { field, value: v.to_string(), admissible: "> 0" });
            }
        }
        Ok(())
    }

    /// Checks the architecture against the hyperparameter search bounds.
    pub fn validate_search_bounds(&self) -> Result<(), ModelError> {
        self.validate()?;
        let check = |field: &'static str, v: usize, (lo, hi): (usize, usize), admissible: &'static str| {
            if v < lo || v > hi {
                Err(ModelError::OutOfRange { field, value: v.to_string(), admissible })
            } else {
                Ok(())
            }
        };
        check("mpnn_layers", self.mpnn_layers, bounds::MPNN_LAYERS, "{1..6}")?;
        check("mpnn_width", self.mpnn_width, bounds::MPNN_WIDTH, "{100..2000}")?;
        check("fc_layers", self.fc_layers, bounds::FC_LAYERS, "{2,3}")?;
        check("fc_width", self.fc_width, bounds::FC_WIDTH, "{300..1000}")?;
        check("batch_size", self.batch_size, bounds::BATCH_SIZE, "{16..128}")
    }
}

/// Closed-form parameter count:
/// `118H + L(2H^2 + H) + [HG + G + max(0, F-2)(G^2 + G) + (G + 1)] + (H^2 + 2H)`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (h, l, f, g) = (cfg.mpnn_width, cfg.mpnn_layers, cfg.fc_layers, cfg.fc_width);
    MAX_Z * h + l * (2 * h * h + h) + (h * g + g + f.saturating_sub(2) * (g * g + g) + (g + 1)) + (h * h + 2 * h)
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub width: usize,
    pub embedding: usize,
    /// `(W, U, b)` offsets per message-passing layer.
    pub layers: Vec<(usize, usize, usize)>,
    /// `(weight, bias, in, out)` per energy-head layer.
    pub head: Vec<(usize, usize, usize, usize)>,
    pub force_v: usize,
    pub force_c: usize,
    pub force_u: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let h = cfg.mpnn_width;
        let mut next = 0;
        let mut alloc = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let embedding = alloc(MAX_Z * h);
        let layers = (0..cfg.mpnn_layers).map(|_| (alloc(h * h), alloc(h * h), alloc(h))).collect();
        let mut dims = vec![h];
        dims.extend(std::iter::repeat(cfg.fc_width).take(cfg.fc_layers - 1));
        dims.push(1);
        let head = dims.windows(2).map(|w| (alloc(w[0] * w[1]), alloc(w[1]), w[0], w[1])).collect();
        let force_v = alloc(h * h);
        let force_c = alloc(h);
        let force_u = alloc(h);
        Self { width: h, embedding, layers, head, force_v, force_c, force_u, total: next }
    }
}

/// Model parameters as one flat vector, with the layout that indexes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
}

impl<T: Scalar> ReferenceModel<T> {
    /// Uniform(-1/sqrt(H), 1/sqrt(H)) for embeddings and matrices, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        let layout = ParamLayout::new(config);
        let mut params = vec![T::zero(); layout.total];
        let bound = 1.0 / (config.mpnn_width as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |start: usize, len: usize| {
            for p in &mut params[start..start + len] {
                *p = T::of(rng.gen_range(-bound..bound));
            }
        };
        let h = layout.width;
        fill(layout.embedding, MAX_Z * h);
        for &(w, u, _) in &layout.layers {
            fill(w, h * h);
            fill(u, h * h);
        }
        for &(w, _, i, o) in &layout.head {
            fill(w, i * o);
        }
        fill(layout.force_v, h * h);
        fill(layout.force_u, h);
        Self { config: config.clone(), layout, params }
    }

    pub fn from_params(config: &ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        let layout = ParamLayout::new(config);
        if params.len() != layout.total {
            return Err(ModelError::ParamCount { got: params.len(), want: layout.total });
        }
        Ok(Self { config: config.clone(), layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Scalar>(&self) -> ReferenceModel<U> {
        ReferenceModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }
}
