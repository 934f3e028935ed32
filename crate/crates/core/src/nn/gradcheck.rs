use super::store::ParameterStore;
use super::tape::{Tape, Var};
use super::{NnError, Result, Tensor};

/// Norm floor, relative to `max(1, |loss|, largest analytic gradient norm)`,
/// below which gradients are compared in absolute terms. Central differences
/// carry roundoff proportional to the loss and its sensitivity, so a
/// structurally zero gradient only reads as zero up to that.
pub const FD_ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

fn checked_elements(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Compares reverse-mode gradients with central differences for every
/// trainable parameter and every input tensor. `f` records the loss on a
/// fresh tape given the input variables.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    inputs: &[Tensor],
    max_elements: usize,
    step: f64,
    f: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &ParameterStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParameterStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, store, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, store, &vars)?;
    let loss_value = tape.value(loss).data()[0].abs();
    let grads = tape.backward(loss)?;
    let mut param_grads: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, g) in grads.parameter_grads() {
        match &mut param_grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    let largest = param_grads
        .iter()
        .flatten()
        .map(Tensor::norm)
        .chain(vars.iter().filter_map(|v| grads.wrt(*v)).map(Tensor::norm))
        .fold(0.0, f64::max);
    let floor = FD_ABS_FLOOR * loss_value.max(largest).max(1.0);

    let mut report = Vec::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let len = store.get(id).value.len();
        let idx = checked_elements(len, max_elements);
        let full = param_grads[id.0].clone().unwrap_or_else(|| {
            let v = &store.get(id).value;
            Tensor::zeros(v.rows(), v.cols())
        });
        let analytic: Vec<f64> = idx.iter().map(|&i| full.data()[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        report.push(GradCheck {
            name,
            relative_error: relative_error(&analytic, &numeric, floor),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }

    let mut perturbed = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        let idx = checked_elements(inputs[k].len(), max_elements);
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + step;
            let up = eval(store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig - step;
            let down = eval(store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        report.push(GradCheck {
            name: format!("input{k}"),
            relative_error: relative_error(&analytic, &numeric, floor),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    if report.iter().any(|r| !r.relative_error.is_finite()) {
        return Err(NnError::NonFinite("gradient check".into()));
    }
    Ok(report)
}
