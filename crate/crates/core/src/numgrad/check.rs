//! Central finite differences, used to validate recorded adjoints.

use super::{NumError, Tape, Tensor, Var};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

/// Compares tape gradients of a scalar function against central
/// differences, one input tensor at a time.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
        }
    }
}

impl GradCheck {
    /// Worst relative error across `inputs`. Every input is treated as
    /// differentiable regardless of its `requires_grad` flag.
    pub fn run(
        &self,
        inputs: &[Tensor],
        build: impl Fn(&Tape, &[Var]) -> Result<Var, NumError>,
    ) -> Result<f64, NumError> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.var(&t.clone().with_grad()))
            .collect();
        let loss = build(&tape, &vars)?;
        let grads = tape.gradients(loss)?;

        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.len()]);
            let eval = |x: &[f64]| -> f64 {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.var(&Tensor::new(t.shape(), x.to_vec()).expect("same shape"))
                        } else {
                            tape.var(t)
                        }
                    })
                    .collect();
                build(&tape, &vars)
                    .map(|l| tape.item(l))
                    .unwrap_or(f64::NAN)
            };
            let numeric = central_difference(eval, input.data(), self.step);
            worst = worst.max(relative_error(&analytic, &numeric, self.floor));
        }
        Ok(worst)
    }
}
