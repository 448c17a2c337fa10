//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamStore};

#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Largest relative error seen for each input, in input order.
    pub per_input_rel_error: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Number of coordinates compared.
    pub checked: usize,
    pub diagnostic: Option<String>,
}

/// Settings for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Compare at most this many randomly chosen coordinates per input.
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every input with the given step and tolerance.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradientReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck {
        step,
        tolerance,
        ..GradCheck::default()
    }
    .run(f, inputs)
}

impl GradCheck {
    pub fn sampled(max_coords_per_input: usize, seed: u64) -> Self {
        GradCheck {
            max_coords_per_input: Some(max_coords_per_input),
            seed,
            ..GradCheck::default()
        }
    }

    /// `f` must build a scalar from the given input variables.
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradientReport>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        ensure!(
            tape.value(out).len() == 1,
            "gradient_check needs a scalar-valued function"
        );
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        self.compare(&analytic, inputs, |vals| {
            let t = Tape::no_grad();
            let vs: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let o = f(&t, &vs)?;
            Ok(t.value(o).data()[0])
        })
    }

    /// Checks gradients with respect to every trainable entry of `store`,
    /// reported in the store's name order. `f` builds a scalar from a
    /// binding of the (possibly perturbed) store.
    pub fn run_params<F>(&self, f: F, store: &ParamStore<f64>) -> Result<GradientReport>
    where
        F: Fn(&Binding<f64>) -> Result<Var>,
    {
        let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).cloned()).collect::<Result<_>>()?;
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, true);
        let out = f(&bind)?;
        ensure!(
            tape.value(out).len() == 1,
            "gradient_check needs a scalar-valued function"
        );
        let grads = bind.gradients(&tape.backward(out)?);
        let analytic: Vec<Tensor<f64>> = names
            .iter()
            .zip(&inputs)
            .map(|(n, t)| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        self.compare(&analytic, &inputs, |vals| {
            let mut local = store.clone();
            for (name, v) in names.iter().zip(vals) {
                local.set(name, v.clone())?;
            }
            let t = Tape::no_grad();
            let o = f(&Binding::new(&t, &local, true))?;
            Ok(t.value(o).data()[0])
        })
    }

    fn compare(
        &self,
        analytic: &[Tensor<f64>],
        inputs: &[Tensor<f64>],
        eval: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    ) -> Result<GradientReport> {
        let mut report = GradientReport {
            per_input_rel_error: vec![0.0; inputs.len()],
            max_rel_error: 0.0,
            tolerance: self.tolerance,
            pass: true,
            checked: 0,
            diagnostic: None,
        };
        for (i, a) in analytic.iter().enumerate() {
            if let Some(pos) = a.data().iter().position(|v| !v.is_finite()) {
                report.pass = false;
                report.max_rel_error = f64::INFINITY;
                report.per_input_rel_error[i] = f64::INFINITY;
                report.diagnostic = Some(format!(
                    "non-finite analytic gradient for input {} at coordinate {}",
                    i, pos
                ));
                return Ok(report);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst: Option<(usize, usize, f64, f64)> = None;
        for (i, input) in inputs.iter().enumerate() {
            let n = input.len();
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            for c in coords {
                let mut vals = inputs.to_vec();
                let base = input.to_vec();
                let mut plus = base.clone();
                plus[c] += self.step;
                vals[i] = Tensor::new(input.shape(), plus)?;
                let fp = eval(&vals)?;
                let mut minus = base;
                minus[c] -= self.step;
                vals[i] = Tensor::new(input.shape(), minus)?;
                let fm = eval(&vals)?;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[i].data()[c];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.per_input_rel_error[i] {
                    report.per_input_rel_error[i] = err;
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    worst = Some((i, c, a, numeric));
                }
            }
        }
        report.pass = report.max_rel_error <= self.tolerance;
        if !report.pass {
            if let Some((i, c, a, num)) = worst {
                report.diagnostic = Some(format!(
                    "input {} coordinate {}: analytic {:e} vs finite difference {:e}",
                    i, c, a, num
                ));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = gradient_check(
            |t, v| Ok(t.sum_squares(v[0])),
            std::slice::from_ref(&x),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        let tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.sum_squares(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        // Forward is x², backward claims 3x.
        let report = gradient_check(
            |t, v| {
                let xv = t.value(v[0]);
                let y = xv.map(|a| a * a);
                let sq = t.custom(y, &[v[0]], move |g, _| {
                    vec![Some(g.zip_map(&xv, |gv, a| gv * 3.0 * a).unwrap())]
                });
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.diagnostic.is_some());
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_gradient_fails_with_diagnostic() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let report = gradient_check(
            |t, v| {
                let xv = t.value(v[0]);
                let y = t.custom(xv, &[v[0]], |g, _| vec![Some(g.map(|_| f64::NAN))]);
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn parameter_gradients_skip_buffers() {
        use crate::params::ParamKind;
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![0.5, -2.0]).unwrap(), ParamKind::Trainable);
        store.insert("b", Tensor::new(&[2], vec![1.0, 3.0]).unwrap(), ParamKind::Buffer);
        let check = GradCheck::default();
        let report = check
            .run_params(
                |bind| {
                    let t = bind.tape();
                    let w = bind.var("w")?;
                    let b = t.constant(bind.buffer("b")?.clone());
                    let p = t.mul(w, b)?;
                    Ok(t.sum_squares(p))
                },
                &store,
            )
            .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.per_input_rel_error.len(), 1);
        assert_eq!(report.checked, 2);
    }
}
