//! Scalar programs over named matrix inputs and the central-difference oracle
//! used to verify their tape derivatives.

use std::collections::BTreeMap;

use super::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Named inputs bound on a tape for one evaluation.
pub struct Bindings<'t> {
    vars: BTreeMap<&'t str, Var<'t>>,
}

impl<'t> Bindings<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("program has no input named {name:?}"))
    }
}

type Builder = dyn for<'t> Fn(&'t Tape, &Bindings<'t>) -> Var<'t>;

/// A scalar loss over named [`DenseMatrix`] inputs.
///
/// Every input is bound as a trainable leaf, so the derivative with respect
/// to any of them can be read back after one reverse sweep.
pub struct DifferentiableProgram {
    inputs: BTreeMap<String, DenseMatrix>,
    build: Box<Builder>,
}

impl DifferentiableProgram {
    pub fn new(build: impl for<'t> Fn(&'t Tape, &Bindings<'t>) -> Var<'t> + 'static) -> Self {
        Self {
            inputs: BTreeMap::new(),
            build: Box::new(build),
        }
    }

    pub fn with_input(mut self, name: impl Into<String>, value: DenseMatrix) -> Self {
        self.inputs.insert(name.into(), value);
        self
    }

    pub fn input(&self, name: &str) -> Option<&DenseMatrix> {
        self.inputs.get(name)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn run<'t>(&'t self, tape: &'t Tape, overrides: Option<(&str, &DenseMatrix)>) -> Bindings<'t> {
        let vars = self
            .inputs
            .iter()
            .map(|(name, value)| {
                let value = match overrides {
                    Some((n, v)) if n == name => v.clone(),
                    _ => value.clone(),
                };
                (name.as_str(), tape.param(value))
            })
            .collect();
        Bindings { vars }
    }

    fn evaluate_with(&self, overrides: Option<(&str, &DenseMatrix)>) -> f64 {
        let tape = Tape::new();
        let bindings = self.run(&tape, overrides);
        (self.build)(&tape, &bindings).scalar()
    }

    pub fn value(&self) -> f64 {
        self.evaluate_with(None)
    }

    /// Tape derivative of the scalar with respect to every entry of `name`.
    pub fn gradient(&self, name: &str) -> Result<DenseMatrix> {
        if !self.inputs.contains_key(name) {
            return Err(Error::invalid(
                "gradient",
                format!("unknown input {name:?}"),
            ));
        }
        let tape = Tape::new();
        let bindings = self.run(&tape, None);
        let loss = (self.build)(&tape, &bindings);
        let grads = tape.backward(loss);
        Ok(grads.wrt(bindings.get(name)))
    }
}

/// Central-difference estimate `(L(x+h) − L(x−h)) / 2h` for every entry of
/// input `name`.
pub fn finite_diff_grad(
    program: &DifferentiableProgram,
    name: &str,
    h: f64,
) -> Result<DenseMatrix> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(
            "finite_diff_grad",
            format!("step {h} must be positive"),
        ));
    }
    let base = program
        .input(name)
        .ok_or_else(|| Error::invalid("finite_diff_grad", format!("unknown input {name:?}")))?;
    let mut out = DenseMatrix::zeros(base.rows(), base.cols());
    let mut probe = base.clone();
    for index in 0..base.len() {
        let x = base.data()[index];
        probe.data_mut()[index] = x + h;
        let plus = program.evaluate_with(Some((name, &probe)));
        probe.data_mut()[index] = x - h;
        let minus = program.evaluate_with(Some((name, &probe)));
        probe.data_mut()[index] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                index,
                context: format!("finite_diff_grad on input {name:?}"),
            });
        }
        out.data_mut()[index] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub input: String,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_entry: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares the tape derivative of `name` with [`finite_diff_grad`].
pub fn check_gradient(program: &DifferentiableProgram, name: &str, h: f64) -> Result<GradCheck> {
    let analytic = program.gradient(name)?;
    let numeric = finite_diff_grad(program, name, h)?;
    let mut report = GradCheck {
        input: name.to_string(),
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_entry: 0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        if !a.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: format!("tape gradient of {name:?}"),
            });
        }
        let rel = relative_error(a, n);
        report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_entry = i;
        }
    }
    Ok(report)
}
