//! Central-difference verification of the analytic backward pass.
//!
//! The numeric side uses only `forward_loss`, so it shares no code with the
//! gradient accumulation it is checking.

use super::backward::probe_group_gradient;
use super::forward::forward_loss;
use super::{ProbeError, ProbeModel, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    pub group_index: usize,
    pub group_name: String,
    pub step: f64,
    pub entries_checked: usize,
    /// max over entries of |analytic - central| / max(|analytic|, |central|);
    /// entries where both magnitudes sit below 1e-8 count as matching zeros.
    pub max_rel_error: f64,
    /// Entries whose two perturbed losses came back bitwise equal: the step
    /// is too small to move the loss there, so no error can be measured.
    pub degenerate_steps: usize,
}

/// Perturbs the listed `(row, col)` entries of one probed group by `±step`,
/// compares the central difference of the loss against the analytic
/// gradient, and restores every entry to its exact original bits.
pub fn finite_difference_check(
    model: &mut ProbeModel,
    trajectory: &Trajectory,
    group_index: usize,
    entries: &[(usize, usize)],
    step: f64,
) -> Result<FiniteDifferenceReport, ProbeError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(ProbeError::BadStep(step));
    }
    let Some((rows, cols)) = model.group_shape(group_index) else {
        return Err(ProbeError::BadGroupIndex {
            index: group_index,
            groups: model.num_groups(),
        });
    };
    let group_name = model.group_names()[group_index].clone();
    for &(row, col) in entries {
        if row >= rows || col >= cols {
            return Err(ProbeError::BadMatrixEntry {
                name: group_name,
                row,
                col,
                rows,
                cols,
            });
        }
    }

    let analytic = probe_group_gradient(model, trajectory, group_index)?;
    let mut max_rel_error = 0.0f64;
    let mut degenerate_steps = 0;
    for &(row, col) in entries {
        let idx = row * cols + col;
        let original = model.group(group_index).data[idx];

        model.group_mut(group_index).data[idx] = original + step;
        let plus = forward_loss(model, trajectory);
        model.group_mut(group_index).data[idx] = original - step;
        let minus = forward_loss(model, trajectory);
        model.group_mut(group_index).data[idx] = original;
        let (plus, minus) = (plus?, minus?);

        if plus.to_bits() == minus.to_bits() {
            log::warn!(
                "step {step} leaves the loss unmoved at ({row}, {col}) of {}",
                model.group_names()[group_index]
            );
            degenerate_steps += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs());
        if denom > 1e-8 {
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
        }
    }

    Ok(FiniteDifferenceReport {
        group_index,
        group_name: model.group_names()[group_index].clone(),
        step,
        entries_checked: entries.len(),
        max_rel_error,
        degenerate_steps,
    })
}

/// The `count` entries with the largest analytic gradient magnitude, as
/// `(row, col)` pairs. Central differences are best conditioned there.
pub fn largest_entries(gradient: &[f64], cols: usize, count: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..gradient.len()).collect();
    order.sort_by(|&a, &b| {
        gradient[b]
            .abs()
            .total_cmp(&gradient[a].abs())
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(count)
        .map(|idx| (idx / cols, idx % cols))
        .collect()
}
