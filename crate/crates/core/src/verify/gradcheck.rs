//! Central finite-difference gradient checks at 64-bit.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries whose analytic and numeric magnitudes both fall below this
    /// are not compared.
    pub floor: f64,
}

impl GradCheckOptions {
    /// Single-primitive setting: `h = 1e-5`, relative error ≤ 1e-6.
    pub fn primitive() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-8,
        }
    }

    /// Composed-block setting: relative error ≤ 1e-4. Deep compositions
    /// carry more round-off, so the floor is higher.
    pub fn composed() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: String,
    pub compared: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.compared > 0
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<32} {} max rel err {:.2e} (tol {:.0e}, {} entries, worst {})",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.compared,
            self.worst
        )
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> Option<f64> {
    let scale = a.abs().max(n.abs());
    if scale <= floor {
        None
    } else {
        Some((a - n).abs() / scale)
    }
}

/// Compares the tape gradient of a scalar `loss` with central differences,
/// both for every element of `inputs` and every parameter in `params`.
pub fn check_gradients<F>(
    name: &str,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss(&ctx, &vars)?;
        let v = tape.value(l).item();
        Ok(v)
    };

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = loss(&ctx, &vars)?;
    let grads = tape.backward(l)?;
    let param_grads = grads.by_tag(params.len());

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::from("-"),
        compared: 0,
        tolerance: opts.tolerance,
    };
    let h = opts.step;
    let mut note = |label: String, a: f64, n: f64| {
        if let Some(e) = rel_err(a, n, opts.floor) {
            report.compared += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                report.worst = format!("{label} analytic {a:.6e} numeric {n:.6e}");
            }
        }
    };

    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(params, &work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(params, &work)?;
            work[k].data_mut()[i] = x0;
            note(format!("input{k}[{i}]"), analytic.data()[i], (fp - fm) / (2.0 * h));
        }
    }

    let mut pwork = params.clone();
    for id in params.ids() {
        let shape = params.get(id).shape().to_vec();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(&shape));
        for i in 0..analytic.numel() {
            let x0 = params.get(id).data()[i];
            pwork.get_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&pwork, inputs)?;
            pwork.get_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&pwork, inputs)?;
            pwork.get_mut(id).data_mut()[i] = x0;
            note(format!("{}[{i}]", params.name(id)), analytic.data()[i], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// every output element contributes a distinct gradient.
pub fn project<S: crate::Scalar>(tape: &Tape<S>, out: Var, seed: u64) -> Result<Var> {
    use rand::{Rng, SeedableRng};
    let shape = tape.shape(out);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| S::lit(rng.random_range(-1.0..1.0)));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}
