use crate::error::{shape_err, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Frozen two-layer image encoder: `gelu(x·W1 + b1)·W2 + b2`.
pub struct FrozenImageEncoder<T> {
    raw_dim: usize,
    d: usize,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

impl<T: Element> FrozenImageEncoder<T> {
    pub fn new(raw_dim: usize, d: usize, seed: u64) -> Self {
        FrozenImageEncoder {
            raw_dim,
            d,
            w1: rng::gaussian_tensor(seed, "image.w1", &[raw_dim, d], (1.0 / raw_dim as f64).sqrt()),
            b1: rng::gaussian_tensor(seed, "image.b1", &[d], 0.1),
            w2: rng::gaussian_tensor(seed, "image.w2", &[d, d], (1.0 / d as f64).sqrt()),
            b2: rng::gaussian_tensor(seed, "image.b2", &[d], 0.1),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Encode a batch `[B × raw_dim]` on `g`; weights enter as constants.
    pub fn encode<'g>(&self, g: &'g Graph<T>, raw: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = raw.shape();
        if shape.len() != 2 || shape[1] != self.raw_dim {
            return Err(shape_err!(
                "image encoder expects [B x {}], got {shape:?}",
                self.raw_dim
            ));
        }
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        raw.linear(w1, Some(b1))?.gelu()?.linear(w2, Some(b2))
    }

    /// Encode a batch without a caller-managed graph.
    pub fn encode_batch(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let out = self.encode(&g, g.constant(raw.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Encode a single `[raw_dim]` vector.
    pub fn encode_image(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        if raw.rank() != 1 {
            return Err(shape_err!("encode_image expects a vector, got {:?}", raw.shape()));
        }
        let n = raw.numel();
        let out = self.encode_batch(&raw.clone().reshape(&[1, n])?)?;
        out.reshape(&[self.d])
    }

    pub fn fingerprint(&self) -> u64 {
        super::text::fingerprint([&self.w1, &self.b1, &self.w2, &self.b2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_is_reproducible_bias_path() {
        let a = FrozenImageEncoder::<f64>::new(5, 4, 2);
        let b = FrozenImageEncoder::<f64>::new(5, 4, 2);
        let z = Tensor::zeros(&[5]);
        let out = a.encode_image(&z).unwrap();
        assert!(out.bit_eq(&b.encode_image(&z).unwrap()));
        assert!(out.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn single_coordinate_change_moves_output() {
        let enc = FrozenImageEncoder::<f64>::new(5, 4, 2);
        let x: Tensor<f64> = rng::gaussian_tensor(9, "x", &[5], 1.0);
        let mut y = x.clone();
        y.data_mut()[3] += 0.5;
        let fx = enc.encode_image(&x).unwrap();
        let fy = enc.encode_image(&y).unwrap();
        assert!(fx.data().iter().zip(fy.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn batch_matches_rows() {
        let enc = FrozenImageEncoder::<f64>::new(5, 4, 2);
        let x: Tensor<f64> = rng::gaussian_tensor(1, "x", &[3, 5], 1.0);
        let batch = enc.encode_batch(&x).unwrap();
        for i in 0..3 {
            let row = Tensor::new(vec![5], x.row(i).to_vec()).unwrap();
            let single = enc.encode_image(&row).unwrap();
            assert_eq!(batch.row(i), single.data());
        }
    }

    #[test]
    fn wrong_raw_dim_is_rejected() {
        let enc = FrozenImageEncoder::<f64>::new(5, 4, 2);
        let err = enc.encode_image(&Tensor::zeros(&[6])).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }
}
