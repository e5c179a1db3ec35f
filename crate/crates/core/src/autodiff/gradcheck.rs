use super::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Compare reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)`
/// over every coordinate of every input.
pub fn finite_difference_check<F>(f: F, point: &[Grid<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, g)| (0..g.len()).map(move |j| (i, j)))
        .collect();
    finite_difference_check_at(f, point, eps, &coords)
}

/// Like [`finite_difference_check`] but only probes the listed
/// `(input, flat index)` coordinates.
pub fn finite_difference_check_at<F>(
    f: F,
    point: &[Grid<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(
            "finite_difference_check",
            "eps must be positive",
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .enumerate()
        .map(|(i, g)| tape.param(ParamId(i), g))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "finite_difference_check",
            format!("function must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    let ids: Vec<ParamId> = (0..point.len()).map(ParamId).collect();
    let grads = tape.backward(out, &Grid::scalar(1.0), &ids)?;

    let eval = |pts: &[Grid<f64>], input: usize, index: usize| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = pts
            .iter()
            .enumerate()
            .map(|(i, g)| t.param(ParamId(i), g))
            .collect();
        let v = match f(&mut t, &vs) {
            Ok(v) => t.value(v).item(),
            Err(Error::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinitePerturbation { input, index })
        }
    };

    let mut worst = 0.0f64;
    let mut pts = point.to_vec();
    for &(i, j) in coords {
        let orig = pts[i].data()[j];
        pts[i].data_mut()[j] = orig + eps;
        let plus = eval(&pts, i, j)?;
        pts[i].data_mut()[j] = orig - eps;
        let minus = eval(&pts, i, j)?;
        pts[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[&ParamId(i)].data()[j];
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
