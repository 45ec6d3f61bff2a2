use crate::error::{Error, Result};
use crate::tensor::Var;

/// Part tokens from per-part spatial attention.
///
/// `att: [B, H, W, J]` logits, `feat: [B, H, W, C]`. Each part's logits are
/// softmaxed over the `H*W` positions and used to average the features.
/// Returns tokens `[B, J, C]` and the spatial weights `[B, H*W, J]`.
pub fn tokenize_hagt<'t>(att: Var<'t>, feat: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let a = att.shape();
    let f = feat.shape();
    if a.len() != 4 || f.len() != 4 || a[..3] != f[..3] {
        return Err(Error::shape("tokenize_hagt", &a, &f));
    }
    let (b, hw, j, c) = (a[0], a[1] * a[2], a[3], f[3]);
    let weights = att.reshape(&[b, hw, j])?.softmax(1)?;
    let tokens = weights.matmul_tn(feat.reshape(&[b, hw, c])?)?;
    Ok((tokens, weights))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::tensor::{grad_check_multi, Tape, Tensor};

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_the_spatial_mean() {
        let tape = Tape::new();
        let feat = randn(0, &[1, 4, 5, 3]);
        let (tok, _) = tokenize_hagt(tape.constant(Tensor::full([1, 4, 5, 2], 0.7)), tape.constant(feat.clone())).unwrap();
        let tok = tok.value();
        for c in 0..3 {
            let mean = feat.data().iter().skip(c).step_by(3).sum::<f64>() / 20.0;
            assert!((tok.at(&[0, 0, c]) - mean).abs() < 1e-14);
            assert!((tok.at(&[0, 1, c]) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_logit_picks_one_pixel() {
        let tape = Tape::new();
        let feat = randn(1, &[1, 3, 3, 4]);
        let mut att = vec![0.0; 9 * 2];
        att[(1 * 3 + 2) * 2 + 1] = 40.0;
        let att = Tensor::new(vec![1, 3, 3, 2], att).unwrap();
        let (tok, _) = tokenize_hagt(tape.constant(att), tape.constant(feat.clone())).unwrap();
        for c in 0..4 {
            assert!((tok.value().at(&[0, 1, c]) - feat.at(&[0, 1, 2, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_a_double_loop() {
        let (b, h, w, j, c) = (2, 3, 4, 5, 6);
        let att = randn(2, &[b, h, w, j]);
        let feat = randn(3, &[b, h, w, c]);
        let tape = Tape::new();
        let (tok, weights) = tokenize_hagt(tape.constant(att.clone()), tape.constant(feat.clone())).unwrap();
        for bi in 0..b {
            for p in 0..j {
                let mut z = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        z += att.at(&[bi, y, x, p]).exp();
                    }
                }
                let mut total = 0.0;
                for k in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            acc += att.at(&[bi, y, x, p]).exp() / z * feat.at(&[bi, y, x, k]);
                        }
                    }
                    assert!((tok.value().at(&[bi, p, k]) - acc).abs() < 1e-10);
                }
                for px in 0..h * w {
                    total += weights.value().at(&[bi, px, p]);
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_grids() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 3, 3, 2]));
        let f = tape.constant(Tensor::zeros([1, 3, 4, 2]));
        assert!(tokenize_hagt(a, f).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = grad_check_multi(
            |_, xs| Ok(tokenize_hagt(xs[0], xs[1])?.0.square().sum()),
            &[randn(4, &[2, 3, 3, 2]), randn(5, &[2, 3, 3, 4])],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}
