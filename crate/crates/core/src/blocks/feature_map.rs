use crate::numerics::{ops, DenseArray};

use super::BlockError;

/// A `C × H × W` stage feature. Its token view is the `N × C` matrix with
/// `N = H·W`, tokens ordered row-major over (H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: DenseArray,
}

impl FeatureMap {
    pub fn new(data: DenseArray) -> Result<Self, BlockError> {
        if data.rank() != 3 {
            return Err(BlockError::Shape {
                what: "feature map".into(),
                expected: vec![0, 0, 0],
                actual: data.shape().to_vec(),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: DenseArray::zeros(&[channels, height, width]),
        }
    }

    /// Builds a map from its `N × C` token view.
    pub fn from_tokens(tokens: &DenseArray, height: usize, width: usize) -> Result<Self, BlockError> {
        tokens.expect_rank("from_tokens", 2)?;
        if tokens.rows() != height * width {
            return Err(BlockError::Shape {
                what: "token count".into(),
                expected: vec![height * width],
                actual: vec![tokens.rows()],
            });
        }
        let c = tokens.cols();
        let data = ops::transpose(tokens)?.reshape(&[c, height, width])?;
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tokens_len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &DenseArray {
        &self.data
    }

    pub fn into_data(self) -> DenseArray {
        self.data
    }

    /// `N × C` token view: row `h·W + w` holds the channel vector at `(h, w)`.
    pub fn tokens(&self) -> DenseArray {
        let planar = self
            .data
            .reshape(&[self.channels(), self.tokens_len()])
            .expect("rank-3 data always reshapes to C × N");
        ops::transpose(&planar).expect("rank 2")
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.data.shape() == other.data.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn token_view_is_row_major_over_space() {
        let data = DenseArray::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let fm = FeatureMap::new(data).unwrap();
        let t = fm.tokens();
        assert_eq!(t.shape(), &[6, 2]);
        // token (h=1, w=2) is index 5; channel 0 value 5, channel 1 value 11.
        assert_eq!(t.row(5), &[5.0, 11.0]);
        assert_eq!(t.row(0), &[0.0, 6.0]);
    }

    #[test]
    fn token_round_trip() {
        let mut rng = Rng::new(2);
        let fm = FeatureMap::new(DenseArray::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng)).unwrap();
        let back = FeatureMap::from_tokens(&fm.tokens(), 4, 5).unwrap();
        assert!(back.data().bit_eq(fm.data()));
        assert!(FeatureMap::from_tokens(&fm.tokens(), 5, 5).is_err());
    }
}
