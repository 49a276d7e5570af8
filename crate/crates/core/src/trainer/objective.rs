use std::rc::Rc;

use crate::autograd::{si_snr_loss_value, Var};
use crate::error::{Error, Result};
use crate::losses::{pit_from_matrix, SI_SNR_EPS};
use crate::model::{ForwardGraph, ForwardVars, Variant};
use crate::tensor::Scalar;

/// Scalar loss node plus its two logged components.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub loss: Var,
    /// Separation term: PIT sum for separators, SI-SNR loss for extractors.
    pub separation: Var,
    pub ce: Option<Var>,
}

/// Builds the variant's training objective on top of a forward pass.
///
/// Separators use the permutation with the lowest summed SI-SNR loss (picked
/// on values, so the gradient flows through the chosen pairing only). The
/// target-prediction variant adds cross-entropy against the stream that best
/// matches the target. Extractors score their single stream against the
/// target.
pub fn build_objective<T: Scalar>(
    fg: &mut ForwardGraph<T>,
    vars: &ForwardVars,
    references: &[Vec<T>],
    target_index: usize,
) -> Result<Objective> {
    let variant = fg.config().variant;
    if target_index >= references.len() {
        return Err(Error::invalid(format!(
            "target index {target_index} out of range for {} references",
            references.len()
        )));
    }
    if references.iter().any(|r| r.iter().all(|v| *v == T::zero())) {
        return Err(Error::DegenerateSignal("all-zero reference in training sample".into()));
    }
    let eps = T::lit(SI_SNR_EPS);
    if variant.is_extractor() {
        let r: Rc<[T]> = references[target_index].clone().into();
        let l = fg.graph.si_snr_loss(vars.streams[0], r, SI_SNR_EPS);
        return Ok(Objective {
            loss: l,
            separation: l,
            ce: None,
        });
    }
    let n = vars.streams.len();
    if references.len() != n {
        return Err(Error::invalid(format!("{} references for {n} streams", references.len())));
    }
    let matrix: Vec<Vec<f64>> = references
        .iter()
        .map(|r| {
            vars.streams
                .iter()
                .map(|&s| si_snr_loss_value(fg.graph.value(s).data(), r, eps).as_f64())
                .collect()
        })
        .collect();
    let pit = pit_from_matrix(&matrix)?;
    let mut terms = Vec::with_capacity(n);
    for (i, &j) in pit.permutation.iter().enumerate() {
        let r: Rc<[T]> = references[i].clone().into();
        terms.push(fg.graph.si_snr_loss(vars.streams[j], r, SI_SNR_EPS));
    }
    let cat = fg.graph.concat(&terms);
    let separation = fg.graph.sum(cat);
    if variant != Variant::ContSep {
        return Ok(Objective {
            loss: separation,
            separation,
            ce: None,
        });
    }
    let logits = vars
        .target_logits
        .ok_or_else(|| Error::InvalidState("target-prediction variant produced no logits".into()))?;
    // Label = stream closest to the target, lowest index on ties.
    let target = &references[target_index];
    let mut label = 0;
    let mut best = f64::INFINITY;
    for (i, &s) in vars.streams.iter().enumerate() {
        let l = si_snr_loss_value(fg.graph.value(s).data(), target, eps).as_f64();
        if l < best {
            best = l;
            label = i;
        }
    }
    let ce = fg.graph.cross_entropy(logits, label);
    let both = fg.graph.concat(&[separation, ce]);
    let loss = fg.graph.sum(both);
    Ok(Objective {
        loss,
        separation,
        ce: Some(ce),
    })
}
