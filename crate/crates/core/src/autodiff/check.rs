use super::{AutodiffError, Tape, Tensor};

/// Denominator floor for the relative error. Central differences at
/// `h = 1e-6` cannot resolve gradients much below this, so tensors whose
/// gradient is smaller everywhere are effectively compared in absolute terms.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Per input: `max|analytic - numeric| / max(max|analytic|, max|numeric|, SCALE_FLOOR)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks `build`'s gradients w.r.t. every input by central differences with
/// step `h`. `build` records a scalar-valued computation of the given leaves
/// on a fresh tape each call.
pub fn finite_difference_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], h: f64, build: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, AutodiffError>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let leaves = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| tape.constant(v.clone(), s))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut tape, &leaves)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|(v, s)| tape.param(v.clone(), s)).collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).map_or_else(|| vec![0.0; values[k].len()], <[f64]>::to_vec);
        let mut numeric = vec![0.0; values[k].len()];
        for i in 0..values[k].len() {
            let x = values[k][i];
            values[k][i] = x + h;
            let up = eval(&values)?;
            values[k][i] = x - h;
            let down = eval(&values)?;
            values[k][i] = x;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|x| x.abs()).fold(SCALE_FLOOR, f64::max);
        rel_errors.push(diff / scale);
    }
    Ok(GradCheck { rel_errors })
}
