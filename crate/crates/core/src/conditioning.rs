//! Text → 512-d unit-norm conditioning vectors.

use crate::error::{Error, Result};
use crate::tensor::{Fnv1a, NoiseStream};

pub const EMBEDDING_DIM: usize = 512;
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector(Vec<f32>);

impl ConditioningVector {
    /// Scales `values` to unit L2 norm. Fails on wrong dimension, non-finite or zero input.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Contract {
                what: "conditioning vector dimension".into(),
                expected: EMBEDDING_DIM.to_string(),
                found: values.len().to_string(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend("encoder produced non-finite values".into()));
        }
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Backend("encoder produced a zero vector".into()));
        }
        let out: Vec<f32> = values.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
        let v = ConditioningVector(out);
        let check = v.norm();
        if (check - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Backend(format!("normalized vector has norm {check}")));
        }
        Ok(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &ConditioningVector) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        dot / (self.norm() * other.norm())
    }
}

/// Produces raw embeddings; [`encode`] enforces dimension and normalization on top.
pub trait TextEncoder: Send + Sync {
    /// Identity and version, recorded in manifests.
    fn id(&self) -> String;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Deterministic stand-in: Gaussian vector seeded by the FNV-1a hash of the text bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubEncoder;

impl TextEncoder for StubEncoder {
    fn id(&self) -> String {
        format!("stub-fnv1a-gaussian/v1+{}", crate::tensor::NOISE_GENERATOR_ID)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut noise = NoiseStream::new(Fnv1a::hash(text.as_bytes()));
        let mut out = vec![0.0; EMBEDDING_DIM];
        noise.fill(&mut out);
        Ok(out)
    }
}

pub fn encode(encoder: &dyn TextEncoder, text: &str) -> Result<ConditioningVector> {
    if text.trim().is_empty() {
        return Err(Error::Input("cannot encode empty text".into()));
    }
    ConditioningVector::normalized(encoder.embed(text)?)
}

pub fn stub_encode(text: &str) -> Result<ConditioningVector> {
    encode(&StubEncoder, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stub_dimension_and_norm() {
        let v = stub_encode("sine wave is playing, A steady tone.").unwrap();
        assert_eq!(v.values().len(), 512);
        assert!((v.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn stub_is_deterministic() {
        assert_eq!(stub_encode("abc").unwrap(), stub_encode("abc").unwrap());
        assert_eq!(stub_encode("same").unwrap().cosine(&stub_encode("same").unwrap()), 1.0);
    }

    #[test]
    fn distinct_short_texts_are_nearly_orthogonal() {
        let c = stub_encode("a").unwrap().cosine(&stub_encode("b").unwrap());
        assert!(c.abs() < 0.5, "{c}");
    }

    #[test]
    fn random_text_pairs_stay_below_half() {
        // Random unit vectors in 512 dimensions have cosine with standard deviation
        // 1/sqrt(512) ~ 0.044, so 0.5 is more than 11 standard deviations out.
        let mut rng = NoiseStream::new(7);
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let len = 1 + (rng.next_standard().abs() * 10.0) as usize;
            let a: String = (0..len)
                .map(|j| char::from(b'a' + ((i * 7 + j * 13) % 26) as u8))
                .collect();
            let b = format!("{a}{}", i % 10);
            let c = stub_encode(&a).unwrap().cosine(&stub_encode(&b).unwrap());
            worst = worst.max(c.abs());
        }
        assert!(worst < 0.5, "worst |cos| {worst}");
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(stub_encode(""), Err(Error::Input(_))));
    }

    struct Wrong(usize, f32);
    impl TextEncoder for Wrong {
        fn id(&self) -> String {
            "wrong".into()
        }
        fn embed(&self, _: &str) -> Result<Vec<f32>> {
            Ok(vec![self.1; self.0])
        }
    }

    #[test]
    fn boundary_checks_adapters() {
        assert!(matches!(encode(&Wrong(511, 1.0), "x"), Err(Error::Contract { .. })));
        assert!(encode(&Wrong(512, f32::NAN), "x").is_err());
        assert!(encode(&Wrong(512, 0.0), "x").is_err());
        let v = encode(&Wrong(512, 3.0), "x").unwrap();
        assert!((v.norm() - 1.0).abs() <= 1e-6);
    }

    proptest! {
        #[test]
        fn every_text_maps_to_unit_vector(text in "\\PC{1,40}") {
            prop_assume!(!text.trim().is_empty());
            let v = stub_encode(&text).unwrap();
            prop_assert_eq!(v.values().len(), EMBEDDING_DIM);
            prop_assert!((v.norm() - 1.0).abs() <= 1e-6);
        }
    }
}
