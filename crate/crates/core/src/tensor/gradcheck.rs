//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Elements whose perturbation crossed a nondifferentiable point (relu
    /// kink, pooling tie) and were skipped.
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.inputs.iter().map(|r| r.excluded.len()).sum()
    }
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Eval>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::checked();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check: graph must produce a scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok(Eval {
        loss: value.item(),
        signature: tape.branch_signature(),
    })
}

/// Compares analytic gradients of the scalar graph `f` against central
/// differences for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::Contract(format!("grad_check: step must be > 0, got {}", opts.step)));
    }
    if let Some(i) = inputs.iter().position(|t| !t.all_finite()) {
        return Err(TensorError::Contract(format!("grad_check: input {i} is not finite")));
    }

    let mut tape = Tape::checked();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_signature = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a parameter");
        let mut report = InputReport {
            input,
            checked: 0,
            excluded: Vec::new(),
            max_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for idx in 0..inputs[input].len() {
            let original = inputs[input].data()[idx];
            probe[input].data_mut()[idx] = original + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = original - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = original;

            if plus.signature != base_signature || minus.signature != base_signature {
                report.excluded.push(idx);
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_index = Some(idx);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
    })
}
