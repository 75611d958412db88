//! The full set of learnable parameters.

use serde::{Deserialize, Serialize};

use crate::fields::FieldParams;
use crate::tonemap::{ToneCurve, WhiteBalance};

/// Radiance fields plus the tone-mapping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub fields: FieldParams,
    pub curve: ToneCurve,
    pub wb: WhiteBalance,
}

/// Gradient with one vector per parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGrad {
    pub fields: Vec<f64>,
    pub curve: Vec<f64>,
    pub wb: Vec<f64>,
}

impl Model {
    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            fields: vec![0.0; self.fields.weights().len()],
            curve: vec![0.0; self.curve.params().len()],
            wb: vec![0.0; self.wb.log_gains().len()],
        }
    }

    /// Parameter groups in a fixed order: fields, curve, white balance.
    pub fn groups(&self) -> [&[f64]; 3] {
        [self.fields.weights(), self.curve.params(), self.wb.log_gains()]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 3] {
        [self.fields.weights_mut(), self.curve.params_mut(), self.wb.log_gains_mut()]
    }

    /// Entries that the optimizer may change (frozen white balance excluded).
    pub fn trainable_masks(&self) -> [Vec<bool>; 3] {
        [
            vec![true; self.fields.weights().len()],
            vec![true; self.curve.params().len()],
            self.wb.trainable_mask(),
        ]
    }
}

impl ModelGrad {
    pub fn groups(&self) -> [&[f64]; 3] {
        [&self.fields, &self.curve, &self.wb]
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        for (a, b) in [(&mut self.fields, &other.fields), (&mut self.curve, &other.curve), (&mut self.wb, &other.wb)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
