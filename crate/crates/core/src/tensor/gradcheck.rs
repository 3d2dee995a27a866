//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the backward pass: it re-runs the forward
//! build at perturbed inputs, so it is an independent oracle for every
//! operator's analytic gradient.

use ndarray::ArrayD;

use super::{Tape, Var};

/// Outcome of a gradient comparison.
#[derive(Debug)]
pub struct GradCheckError {
    pub input_index: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.input_index, self.element, self.analytic, self.numeric, self.rel_err
        )
    }
}

/// Deterministic contraction weights so non-scalar outputs reduce to a scalar
/// without hiding sign errors behind uniform weighting.
fn contraction_weights(len: usize) -> Vec<f64> {
    let mut state = 0x9e3779b97f4a7c15u64;
    (0..len)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // map to [0.25, 1.25) to keep weights bounded away from zero
            0.25 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn scalarize(build: &impl Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[ArrayD<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = contraction_weights(tape.val(out).len());
    tape.val(out).iter().zip(&w).map(|(&o, &wi)| o * wi).sum()
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must be a pure function of its inputs (fix any sampling noise
/// outside and pass it in as a constant input).
pub fn check_grads(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    inputs: &[ArrayD<f64>],
    eps: f64,
    rtol: f64,
    atol: f64,
) -> Result<(), GradCheckError> {
    // analytic
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = contraction_weights(tape.val(out).len());
    let wa = ArrayD::from_shape_vec(tape.val(out).raw_dim(), w).unwrap();
    let wv = tape.constant(wa);
    let prod = tape.mul(out, wv);
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| grads.get(*v).cloned().unwrap_or_else(|| ArrayD::zeros(a.raw_dim())))
        .collect();

    // numeric, one element at a time
    for (ii, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ii].as_slice_mut().unwrap()[ei] += eps;
            minus[ii].as_slice_mut().unwrap()[ei] -= eps;
            let fp = scalarize(&build, &plus);
            let fm = scalarize(&build, &minus);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ii].as_slice().unwrap()[ei];
            let denom = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            if err > atol + rtol * denom {
                return Err(GradCheckError {
                    input_index: ii,
                    element: ei,
                    analytic: a,
                    numeric,
                    rel_err: if denom > 0.0 { err / denom } else { err },
                });
            }
        }
    }
    Ok(())
}
