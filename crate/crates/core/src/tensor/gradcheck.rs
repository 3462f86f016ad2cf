use super::{Tape, Tensor, TensorError, Var};

fn check_eps(eps: f64) -> Result<(), TensorError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidEps(eps));
    }
    Ok(())
}

/// Max over elements of `|g_ad - g_fd| / max(1, |g_fd|)`, where `g_fd` is the
/// central difference of the scalar function `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    finite_diff_check_coords(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        None,
        eps,
    )
}

/// Multi-input form of [`finite_diff_check`]. `coords` lists
/// `(input, flat element)` pairs to probe; `None` probes every element of
/// every input.
pub fn finite_diff_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    check_eps(eps)?;
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::InvalidLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let up = eval(&probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let down = eval(&probe)?;
        probe[i].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::construct(shape, Init::Gaussian { mean: 0.0, std: 1.0, seed }).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let w = rand(&[3, 4], 1);
        let x = rand(&[3, 4], 2);
        let err = finite_diff_check(
            |tape, x| {
                let wv = tape.leaf(w.clone(), false);
                let y = tape.mul(x, wv)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn eps_guard() {
        let x = rand(&[2], 3);
        let f = |tape: &mut Tape, x: Var| Ok(tape.sum(x));
        assert_eq!(finite_diff_check(f, &x, 0.0), Err(TensorError::InvalidEps(0.0)));
        assert!(finite_diff_check(f, &x, 1e-2).is_err());
    }

    #[test]
    fn matmul_softmax_sum_composite() {
        let w = rand(&[4, 5], 5);
        let c = rand(&[3, 5], 6);
        let x = rand(&[3, 4], 7);
        let err = finite_diff_check(
            |tape, x| {
                let wv = tape.leaf(w.clone(), false);
                let cv = tape.leaf(c.clone(), false);
                let h = tape.matmul(x, wv)?;
                let p = tape.softmax_rows(h)?;
                let y = tape.mul(p, cv)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
