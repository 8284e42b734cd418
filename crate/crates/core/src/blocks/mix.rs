//! Appearance/motion mixing: channel concat to `2C`, then a per-token
//! linear map back to `C`.

use crate::numerics::{flops, ops, DenseArray, Rng};

use super::params::Linear;
use super::{BlockError, FeatureMap};

/// `2C → C` projection with bias.
pub type MixParams = Linear;

impl Linear {
    pub fn mixer(channels: usize, rng: &mut Rng) -> MixParams {
        Linear::init(2 * channels, channels, true, rng)
    }
}

/// Token-view mixing; returns the output and the concatenated input.
pub fn mix_tokens(
    appearance: &DenseArray,
    motion: &DenseArray,
    p: &MixParams,
) -> Result<(DenseArray, DenseArray), BlockError> {
    if appearance.shape() != motion.shape() {
        return Err(BlockError::Shape {
            what: "motion tokens".into(),
            expected: appearance.shape().to_vec(),
            actual: motion.shape().to_vec(),
        });
    }
    let cat = ops::concat_cols(appearance, motion)?;
    let y = {
        let _s = flops::scope("mix_proj");
        ops::matmul(&cat, &p.weight)?
    };
    let y = match &p.bias {
        Some(b) => {
            let _s = flops::scope("mix_bias");
            ops::add_row(&y, b)?
        }
        None => y,
    };
    Ok((y, cat))
}

pub fn mix(
    appearance: &FeatureMap,
    motion: &FeatureMap,
    p: &MixParams,
) -> Result<FeatureMap, BlockError> {
    if !appearance.same_shape(motion) {
        return Err(BlockError::Shape {
            what: "motion feature map".into(),
            expected: appearance.data().shape().to_vec(),
            actual: motion.data().shape().to_vec(),
        });
    }
    let (y, _) = mix_tokens(&appearance.tokens(), &motion.tokens(), p)?;
    FeatureMap::from_tokens(&y, appearance.height(), appearance.width())
}

/// Returns `(d_appearance, d_motion, param grads)` given the concatenated input.
pub fn mix_backward(
    cat: &DenseArray,
    p: &MixParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, DenseArray, MixParams), BlockError> {
    let c = d_out.cols();
    let grads = Linear {
        weight: ops::matmul(&ops::transpose(cat)?, d_out)?,
        bias: match p.bias {
            Some(_) => Some(ops::sum_rows(d_out)?),
            None => None,
        },
    };
    let d_cat = ops::matmul(d_out, &ops::transpose(&p.weight)?)?;
    Ok((
        ops::column_block(&d_cat, 0, c)?,
        ops::column_block(&d_cat, c, c)?,
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamSet;
    use crate::numerics::finite_diff;

    #[test]
    fn zero_motion_with_identity_first_half_returns_appearance() {
        let mut rng = Rng::new(1);
        let c = 3;
        let mut w = DenseArray::zeros(&[2 * c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        let p = Linear {
            weight: w,
            bias: Some(DenseArray::zeros(&[c])),
        };
        let app = FeatureMap::new(DenseArray::uniform(&[c, 2, 4], -1.0, 1.0, &mut rng)).unwrap();
        let mot = FeatureMap::zeros(c, 2, 4);
        let out = mix(&app, &mot, &p).unwrap();
        assert!(out.data().bit_eq(app.data()));
    }

    #[test]
    fn shape_contract_and_mismatch() {
        let mut rng = Rng::new(2);
        let p = Linear::mixer(4, &mut rng);
        let a = FeatureMap::new(DenseArray::uniform(&[4, 3, 5], -1.0, 1.0, &mut rng)).unwrap();
        let b = FeatureMap::new(DenseArray::uniform(&[4, 3, 5], -1.0, 1.0, &mut rng)).unwrap();
        assert_eq!(mix(&a, &b, &p).unwrap().data().shape(), &[4, 3, 5]);
        assert!(mix(&a, &FeatureMap::zeros(4, 5, 3), &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let c = 3;
        let p = Linear::mixer(c, &mut rng);
        let a = DenseArray::uniform(&[5, c], -1.0, 1.0, &mut rng);
        let m = DenseArray::uniform(&[5, c], -1.0, 1.0, &mut rng);
        let w = DenseArray::uniform(&[5, c], -1.0, 1.0, &mut rng);
        let loss = |y: &DenseArray| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let (_, cat) = mix_tokens(&a, &m, &p).unwrap();
        let (da, dm, dp) = mix_backward(&cat, &p, &w).unwrap();

        let num_a = finite_diff(|x| loss(&mix_tokens(x, &m, &p).unwrap().0), &a, 1e-5);
        let num_m = finite_diff(|x| loss(&mix_tokens(&a, x, &p).unwrap().0), &m, 1e-5);
        let flat = DenseArray::new(vec![p.num_scalars()], p.flatten()).unwrap();
        let num_p = finite_diff(
            |f| {
                let mut q = p.clone();
                q.assign_flat(f.data());
                loss(&mix_tokens(&a, &m, &q).unwrap().0)
            },
            &flat,
            1e-5,
        );
        let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
        for (x, y) in da.data().iter().zip(num_a.data()) {
            assert!(rel(*x, *y) < 1e-6);
        }
        for (x, y) in dm.data().iter().zip(num_m.data()) {
            assert!(rel(*x, *y) < 1e-6);
        }
        for (x, y) in dp.flatten().iter().zip(num_p.data()) {
            assert!(rel(*x, *y) < 1e-6);
        }
    }
}
