//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Checks a scalar function of one tensor at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        None,
        0,
    )?;
    Ok(report.max_rel_error)
}

fn evaluate<F>(f: &F, points: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Shape {
            op: "grad_check",
            lhs: v.shape().to_vec(),
            rhs: vec![1],
        });
    }
    if !v.data()[0].is_finite() {
        return Err(TensorError::NonFinite("grad_check"));
    }
    Ok((tape, vars, out))
}

/// Checks a scalar function of several tensors. With `max_coords_per_input`
/// set, a seeded random subset of coordinates of each input is probed.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    max_coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, points, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    let mut probe = points.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = points[t].numel();
        let coords: Vec<usize> = match max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let base = points[t].data()[c];
            probe[t].data_mut()[c] = base + step;
            let (tp, _, op) = evaluate(&f, &probe, false)?;
            let plus = tp.value(op).data()[0];
            probe[t].data_mut()[c] = base - step;
            let (tm, _, om) = evaluate(&f, &probe, false)?;
            let minus = tm.value(om).data()[0];
            probe[t].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad[c] - numeric).abs() / grad[c].abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: checked,
    })
}
