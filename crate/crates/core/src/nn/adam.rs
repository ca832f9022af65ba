use super::{GradSet, NnError, ParamSet, TrainingHyper};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One Adam update with bias correction.
///
/// Parameters whose gradient is identically zero are skipped entirely: their
/// values and moment state are left untouched.
pub fn adam_step(params: &mut ParamSet, grads: &GradSet, hyper: &TrainingHyper) -> Result<(), NnError> {
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        if grads.get(&name).is_none() {
            return Err(NnError::MissingGrad(name));
        }
    }
    let lr = hyper.learning_rate;
    for (name, g) in grads.iter() {
        let entry = params
            .entry_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        entry.value.same_shape(g, "adam_step")?;
        if g.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        entry.steps += 1;
        let t = entry.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let m = entry.first_moment.data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = entry.second_moment.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let (m, v) = (entry.first_moment.data(), entry.second_moment.data());
        let updates: Vec<f64> = m
            .iter()
            .zip(v)
            .map(|(mi, vi)| lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON))
            .collect();
        for (w, u) in entry.value.data_mut().iter_mut().zip(updates) {
            *w -= u;
        }
    }
    Ok(())
}
