use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `x · sigmoid(x)`
    SmoothGated,
    Rectified,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SmoothGated => x / (1.0 + (-x).exp()),
            Activation::Rectified => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SmoothGated => {
                let sig = 1.0 / (1.0 + (-x).exp());
                sig * (1.0 + x * (1.0 - sig))
            }
            Activation::Rectified => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture of a dense feedforward network.
///
/// `layer_widths` lists the input width, every hidden width and the output
/// width. Hidden layers compute `act(film(norm(W h + b)))`, optionally with a
/// residual connection when input and output widths agree. The output layer is
/// a plain affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseNetSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub use_layer_norm: bool,
    pub use_skip: bool,
    /// One flag per hidden layer; empty means no FiLM conditioning.
    #[serde(default)]
    pub film_slots: Vec<bool>,
}

impl DenseNetSpec {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        DenseNetSpec {
            layer_widths,
            activation: Activation::SmoothGated,
            use_layer_norm: true,
            use_skip: true,
            film_slots: Vec::new(),
        }
    }

    pub fn with_film_on_all_hidden(mut self) -> Self {
        self.film_slots = vec![true; self.hidden_layers()];
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_widths.len() < 3 {
            return Err(NnError::InvalidSpec(
                "need an input, at least one hidden layer and an output".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec("layer widths must be positive".into()));
        }
        if !self.film_slots.is_empty() && self.film_slots.len() != self.hidden_layers() {
            return Err(NnError::InvalidSpec(format!(
                "film_slots has {} entries for {} hidden layers",
                self.film_slots.len(),
                self.hidden_layers()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// Number of affine layers (hidden + output).
    pub fn linear_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn has_film(&self) -> bool {
        self.film_slots.iter().any(|&f| f)
    }

    pub fn film_slot(&self, hidden: usize) -> bool {
        self.film_slots.get(hidden).copied().unwrap_or(false)
    }

    /// Whether hidden layer `hidden` carries a residual connection.
    pub fn skip_at(&self, hidden: usize) -> bool {
        self.use_skip && self.layer_widths[hidden] == self.layer_widths[hidden + 1]
    }

    /// Widths of the FiLM-conditioned hidden layers, in order.
    pub fn film_widths(&self) -> Vec<usize> {
        (0..self.hidden_layers())
            .filter(|&l| self.film_slot(l))
            .map(|l| self.layer_widths[l + 1])
            .collect()
    }

    /// Flattened FiLM length: `γ` and `δ` for each slotted layer.
    pub fn film_len(&self) -> usize {
        self.film_widths().iter().map(|w| 2 * w).sum()
    }
}
