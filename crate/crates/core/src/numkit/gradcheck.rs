use super::tape::{Tape, Var};
use super::tensor::{NumError, Tensor};

/// Relative error between an analytic and a numeric derivative.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the tape gradient of a scalar function against central finite
/// differences at every element of `x`; returns the max relative error.
///
/// The closure must rebuild the computation from scratch on the tape it is
/// given, so the numeric side never shares state with the analytic side.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let elems: Vec<usize> = (0..x.numel()).collect();
    grad_check_elems(f, x, &[h], &elems)
}

/// [`grad_check`] restricted to at most `max_elems` evenly spread elements.
///
/// Large parameter tensors would need two function evaluations per element;
/// a deterministic stride over the elements keeps end-to-end checks cheap
/// while still touching every region of the tensor.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    max_elems: usize,
) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let n = x.numel();
    let take = max_elems.max(1).min(n);
    let elems: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    grad_check_elems(f, x, &[h], &elems)
}

/// Multi-scale variant: each element's numeric derivative is taken at every
/// step in `hs` and the best agreement counts.
///
/// Deep compositions with kinked activations and max-pools have no single
/// good step size: a perturbation larger than an element's distance to the
/// nearest kink straddles it (error independent of `h`), while steps much
/// smaller than that lose precision on nearly flat directions (error
/// growing as `1/h`). Any `h` inside the element's smooth regime is a valid
/// independent oracle, so the per-element minimum over a small ladder is
/// the honest comparison.
pub fn grad_check_ladder<F>(
    f: F,
    x: &Tensor,
    hs: &[f64],
    max_elems: usize,
) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let n = x.numel();
    let take = max_elems.max(1).min(n);
    let elems: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    grad_check_elems(f, x, hs, &elems)
}

fn grad_check_elems<F>(f: F, x: &Tensor, hs: &[f64], elems: &[usize]) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(NumError::BadShape {
            op: "grad_check",
            shape: tape.value(out).shape().to_vec(),
            why: "checked function must return a scalar".into(),
        });
    }
    let analytic = tape.backward(out)?.get(xv, &tape);

    let eval = |t: &Tensor| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut max_err = 0.0_f64;
    for &i in elems {
        let mut elem_err = f64::INFINITY;
        for &h in hs {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            elem_err = elem_err.min(rel_err(analytic.data()[i], numeric));
        }
        max_err = max_err.max(elem_err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let x = Tensor::row(&[0.7, -1.3, 2.1, 0.4]);
        let err = grad_check(
            |tape, v| {
                let sq = tape.square(v)?;
                Ok(tape.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn softmax_row_sum_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.8, 1.2, 0.1, 0.9, -0.5]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sm = tape.softmax_rows(v)?;
                // Non-uniform weights keep the check from degenerating:
                // a plain row sum of softmax has an identically zero gradient.
                let w = tape.leaf(Tensor::new(
                    vec![2, 3],
                    vec![1.0, 2.0, -1.0, 0.5, -2.0, 1.5],
                )?);
                let weighted = tape.mul(sm, w)?;
                Ok(tape.mean_all(weighted))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn layer_norm_gradient() {
        let x = Tensor::new(
            vec![2, 4],
            vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 0.2, -0.4],
        )
        .unwrap();
        let err = grad_check(
            |tape, v| {
                let gain = tape.leaf(Tensor::row(&[1.2, 0.8, -0.5, 1.0]));
                let bias = tape.leaf(Tensor::row(&[0.1, -0.2, 0.3, 0.0]));
                let ln = tape.layer_norm(v, gain, bias)?;
                let w = tape.leaf(Tensor::new(
                    vec![2, 4],
                    vec![1.0, -1.0, 0.5, 2.0, -0.5, 1.5, 1.0, -2.0],
                )?);
                let weighted = tape.mul(ln, w)?;
                Ok(tape.mean_all(weighted))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn sampled_check_covers_strided_elements() {
        let x = Tensor::new(vec![4, 4], (0..16).map(|i| 0.1 * i as f64 - 0.8).collect())
            .unwrap();
        let err = grad_check_sampled(
            |tape, v| {
                let sq = tape.square(v)?;
                Ok(tape.mean_all(sq))
            },
            &x,
            1e-5,
            5,
        )
        .unwrap();
        assert!(err < 1e-7);
    }
}
