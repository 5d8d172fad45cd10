//! Central finite-difference gradient checking for tape gradients.

use crate::tensor::{Tape, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compare tape gradients of a scalar function against central finite
/// differences over every element of every parameter in `params`.
///
/// `f` must be deterministic: it is re-evaluated many times at perturbed
/// parameter values. Returns the maximum relative error, with the
/// denominator floored at 1e-6 so near-zero gradients compare absolutely.
pub fn grad_check(f: impl Fn(&Tape) -> Tensor, params: &[Tensor]) -> f64 {
    for p in params {
        assert!(p.all_finite(), "grad_check: non-finite parameter values");
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape);
    assert!(loss.all_finite(), "grad_check: non-finite loss");
    tape.backward(&loss);

    let mut max_err: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for idx in 0..p.numel() {
            let orig = p.item(idx);
            p.update_data(|d| d[idx] = orig + FD_STEP);
            let up = f(&Tape::no_grad()).value();
            p.update_data(|d| d[idx] = orig - FD_STEP);
            let down = f(&Tape::no_grad()).value();
            p.update_data(|d| d[idx] = orig);
            let fd = (up - down) / (2.0 * FD_STEP);
            assert!(fd.is_finite(), "grad_check: non-finite finite-difference value");
            let denom = analytic[idx].abs().max(fd.abs()).max(1e-6);
            let err = (analytic[idx] - fd).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_sum_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape| {
                let c = tape.matmul(&a, &b);
                tape.sum_all(&c)
            },
            &[a.clone(), b.clone()],
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let gamma = Tensor::uniform(vec![4], 0.5, 1.5, &mut rng);
        let beta = Tensor::uniform(vec![4], -0.5, 0.5, &mut rng);
        let cases: Vec<(&str, Box<dyn Fn(&Tape) -> Tensor>)> = vec![
            ("softmax", Box::new(|t: &Tape| {
                let p = t.softmax_rows(&x);
                let w = t.mul(&p, &y);
                t.sum_all(&w)
            })),
            ("layernorm", Box::new(|t: &Tape| {
                let l = t.layernorm_rows(&x, &gamma, &beta);
                let w = t.mul(&l, &y);
                t.sum_all(&w)
            })),
            ("gelu", Box::new(|t: &Tape| {
                let g = t.gelu(&x);
                t.sum_all(&g)
            })),
            ("mul_add_mean", Box::new(|t: &Tape| {
                let m = t.mul(&x, &y);
                let s = t.add(&m, &x);
                t.mean_all(&s)
            })),
            ("frobenius", Box::new(|t: &Tape| t.frobenius_norm(&x))),
            ("concat_slice", Box::new(|t: &Tape| {
                let c = t.concat_rows(&[&x, &y]);
                let s = t.slice_rows(&c, 1, 5);
                let sc = t.slice_cols(&s, 1, 3);
                t.sum_all(&sc)
            })),
        ];
        for (name, f) in &cases {
            let err = grad_check(f, &[x.clone(), y.clone(), gamma.clone(), beta.clone()]);
            assert!(err < 1e-5, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn cosine_and_cross_entropy_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Tensor::uniform(vec![5], -1.0, 1.0, &mut rng);
        let v = Tensor::uniform(vec![5], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |t| t.cosine_sim(&u, &v, crate::tensor::COSINE_EPS),
            &[u.clone(), v.clone()],
        );
        assert!(err < 1e-6, "cosine: {err}");

        let logits = Tensor::uniform(vec![1, 6], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |t| {
                let m = t.mask_outside(&logits, 2, 6);
                t.cross_entropy(&m, 3)
            },
            &[logits.clone()],
        );
        assert!(err < 1e-6, "masked cross entropy: {err}");
    }
}
