//! Finite-difference gradient checker.

use super::{Tape, Tensor4, Var};
use crate::error::{Error, Result};

/// Compare tape gradients of a scalar-valued function against central
/// differences over every coordinate of `x`. Returns the maximum relative
/// error, where the relative error at coordinate `i` is
/// `|g_tape - g_fd| / max(1, |g_tape|, |g_fd|)`.
pub fn gradient_check<F>(f: &F, x: &Tensor4, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.shape().numel()).collect();
    gradient_check_at(f, x, epsilon, &coords)
}

/// Same as [`gradient_check`] but restricted to the given coordinates, for
/// functions too large to probe exhaustively.
pub fn gradient_check_at<F>(f: &F, x: &Tensor4, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "gradient_check: epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }

    // analytic pass
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let vx = tape.leaf(&leaf);
    let loss = f(&mut tape, vx)?;
    if tape.shape(loss).numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient_check: function output must be scalar, found {}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(vx)
        .ok_or_else(|| Error::invalid("gradient_check: input received no gradient"))?
        .to_vec();

    let eval = |probe: &Tensor4| -> Result<f64> {
        let mut tape = Tape::new();
        let mut leaf = probe.clone();
        leaf.set_requires_grad(false);
        let v = tape.leaf(&leaf);
        let out = f(&mut tape, v)?;
        tape.scalar(out)
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + epsilon;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = original - epsilon;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = original;
        let fd = (f_plus - f_minus) / (2.0 * epsilon);
        let g = analytic[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::new(shape, data).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(Shape4::new(1, 2, 3, 3), &mut rng);
        let err = gradient_check(&|tape: &mut Tape, v| tape.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "linear check error {err}");
    }

    #[test]
    fn conv_relu_sum_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
        let weights = random_tensor(Shape4::new(3, 2, 3, 3), &mut rng);
        let bias = random_tensor(Shape4::new(1, 3, 1, 1), &mut rng);
        let f = move |tape: &mut Tape, v: Var| {
            let w = tape.leaf(&weights);
            let b = tape.leaf(&bias);
            let y = tape.conv2d(v, w, b, 1, 1)?;
            let r = tape.relu(y);
            tape.sum(r)
        };
        let err = gradient_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "conv/relu/sum chain error {err}");
    }

    #[test]
    fn first_stage_subnetwork_with_stage_loss() {
        // three 3x3 relu convs, a 1x1 relu conv, the 1x1 sigmoid head, then
        // the per-stage squared-error loss against a fixed target
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(Shape4::new(1, 3, 6, 6), &mut rng);
        let w0 = random_tensor(Shape4::new(4, 3, 3, 3), &mut rng);
        let w1 = random_tensor(Shape4::new(4, 4, 3, 3), &mut rng);
        let w2 = random_tensor(Shape4::new(4, 4, 3, 3), &mut rng);
        let w3 = random_tensor(Shape4::new(6, 4, 1, 1), &mut rng);
        let w4 = random_tensor(Shape4::new(1, 6, 1, 1), &mut rng);
        let biases: Vec<Tensor4> = [4, 4, 4, 6, 1]
            .iter()
            .map(|&c| random_tensor(Shape4::new(1, c, 1, 1), &mut rng))
            .collect();
        let target: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = Tensor4::new(Shape4::new(1, 1, 6, 6), target).unwrap();

        let f = move |tape: &mut Tape, v: Var| {
            let mut x = v;
            for (i, w) in [&w0, &w1, &w2].into_iter().enumerate() {
                let wv = tape.leaf(w);
                let bv = tape.leaf(&biases[i]);
                x = tape.conv2d(x, wv, bv, 1, 1)?;
                x = tape.relu(x);
            }
            let wv = tape.leaf(&w3);
            let bv = tape.leaf(&biases[3]);
            x = tape.conv2d(x, wv, bv, 1, 0)?;
            x = tape.relu(x);
            let wv = tape.leaf(&w4);
            let bv = tape.leaf(&biases[4]);
            x = tape.conv2d(x, wv, bv, 1, 0)?;
            x = tape.sigmoid(x);
            let t = tape.leaf(&target);
            tape.sum_squared_error(x, t)
        };
        let err = gradient_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "stage-1 subnetwork error {err}");
    }

    #[test]
    fn rejects_non_scalar_functions_and_bad_epsilon() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        let identity = |_: &mut Tape, v: Var| Ok(v);
        assert!(gradient_check(&identity, &x, 1e-5).is_err());
        let sum = |tape: &mut Tape, v: Var| tape.sum(v);
        assert!(gradient_check(&sum, &x, 1e-2).is_err());
        assert!(gradient_check(&sum, &x, 1e-8).is_err());
    }
}
