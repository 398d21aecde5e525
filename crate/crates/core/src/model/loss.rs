use super::ModelError;
use crate::distance::euclidean;
use crate::tape::{Tape, Var};

/// Distances and hinge value of one triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletTerms {
    pub d_ap: f64,
    pub d_an: f64,
    pub loss: f64,
}

impl TripletTerms {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

/// `max(‖a − p‖ − ‖a − n‖ + margin, 0)` with unsquared Euclidean distances.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<TripletTerms, ModelError> {
    for v in [p, n] {
        if v.len() != a.len() {
            return Err(ModelError::Dimension {
                expected: a.len(),
                found: v.len(),
            });
        }
    }
    if !margin.is_finite() || [a, p, n].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(ModelError::NonFinite);
    }
    let d_ap = euclidean(a, p);
    let d_an = euclidean(a, n);
    Ok(TripletTerms {
        d_ap,
        d_an,
        loss: (d_ap - d_an + margin).max(0.0),
    })
}

/// Tape version over three `1×D` embedding nodes; returns the `1×1` loss.
pub fn triplet_loss_on_tape(tape: &mut Tape<'_>, a: Var, p: Var, n: Var, margin: f64) -> Var {
    let d_ap = tape.distance(a, p);
    let d_an = tape.distance(a, n);
    tape.hinge(d_ap, d_an, margin)
}
