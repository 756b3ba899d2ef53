//! Text generation behind one interface: the built-in byte-level LM, the
//! toy-world generators (see [`crate::toyworld`]) and an HTTP client for
//! external inference servers.

pub mod checkpoint;
pub mod http;
pub mod lm_train;
pub mod sampling;
pub mod tinylm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::GenError;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::seed_path;
use tinylm::{encode_with_bos, TinyLm, Token, BYTE_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
    pub stop: Vec<String>,
    pub seed: u64,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenRequest {
            prompt: prompt.into(),
            max_tokens: 384,
            temperature: 1.0,
            top_p: 0.9,
            n: 1,
            stop: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.n == 0 {
            return Err(GenError::InvalidRequest("n must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(GenError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidRequest(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenError::InvalidRequest(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub completions: Vec<Completion>,
}

impl GenResponse {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.completions.iter().map(|c| c.text.as_str())
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Produce exactly `req.n` completions.
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError>;

    /// Single completion convenience wrapper.
    fn complete(&self, req: &GenRequest) -> Result<String, GenError> {
        let mut r = req.clone();
        r.n = 1;
        let resp = self.generate(&r)?;
        Ok(resp
            .completions
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default())
    }
}

pub type SharedBackend = Arc<dyn Backend>;

/// Tokens sampled for one completion together with their log-probabilities
/// under the unmodified model distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTokens {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
    /// True when generation ended on EOS (or another special token).
    pub ended: bool,
}

/// Sampling controls for [`sample_tokens`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
}

/// Autoregressively sample from `lm` after `prompt` (which should start with BOS).
pub fn sample_tokens<S: Scalar>(
    lm: &TinyLm<S>,
    prompt: &[Token],
    params: SampleParams,
    stop: &[String],
    rng: &mut impl rand::Rng,
) -> SampledTokens {
    let max_seq = lm.config().max_seq;
    let budget = params.max_tokens.min(max_seq - 1);
    let keep = prompt.len().min(max_seq - budget);
    // Keep BOS and the most recent context when the prompt is too long.
    let context: Vec<Token> = if keep < prompt.len() {
        let mut c = vec![prompt[0]];
        c.extend_from_slice(&prompt[prompt.len() - (keep - 1)..]);
        c
    } else {
        prompt.to_vec()
    };
    let mut cache = lm.new_cache();
    let mut row = Vec::new();
    for &t in &context {
        row = lm.step(&mut cache, t);
    }
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut bytes = Vec::new();
    let mut ended = false;
    for _ in 0..budget {
        let lp: Vec<f64> = lm.step_logprobs(&row).iter().map(|x| x.as_f64()).collect();
        let tok = sampling::sample_token(&lp, params.top_p, params.temperature, rng);
        tokens.push(tok as Token);
        logprobs.push(lp[tok]);
        if tok >= BYTE_TOKENS {
            ended = true;
            break;
        }
        bytes.push(tok as u8);
        if let Some(cut) = stop_cut(&bytes, stop) {
            let drop = bytes.len() - cut;
            tokens.truncate(tokens.len() - drop);
            logprobs.truncate(logprobs.len() - drop);
            ended = true;
            break;
        }
        if cache.len() >= max_seq {
            break;
        }
        row = lm.step(&mut cache, tok as Token);
    }
    SampledTokens {
        tokens,
        logprobs,
        ended,
    }
}

fn stop_cut(bytes: &[u8], stop: &[String]) -> Option<usize> {
    stop.iter()
        .filter(|s| !s.is_empty() && bytes.ends_with(s.as_bytes()))
        .map(|s| bytes.len() - s.len())
        .min()
}

/// The built-in language model as a generation backend.
pub struct TinyLmBackend<S> {
    name: String,
    lm: Arc<TinyLm<S>>,
}

impl<S: Scalar> TinyLmBackend<S> {
    pub fn new(name: impl Into<String>, lm: Arc<TinyLm<S>>) -> Self {
        TinyLmBackend {
            name: name.into(),
            lm,
        }
    }

    pub fn model(&self) -> &TinyLm<S> {
        &self.lm
    }
}

impl<S: Scalar> Backend for TinyLmBackend<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        req.validate()?;
        let prompt = encode_with_bos(&req.prompt);
        let params = SampleParams {
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            top_p: req.top_p,
        };
        let completions = (0..req.n)
            .map(|i| {
                let mut rng = rng_for(req.seed, &seed_path![i]);
                let s = sample_tokens(&self.lm, &prompt, params, &req.stop, &mut rng);
                Completion {
                    text: tinylm::decode(&s.tokens),
                    token_logprobs: Some(s.logprobs),
                }
            })
            .collect();
        Ok(GenResponse { completions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tinylm::LmConfig;

    fn peaked_lm() -> TinyLm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lm = TinyLm::new(
            LmConfig {
                embed_dim: 8,
                hidden_dim: 16,
                max_seq: 64,
            },
            &mut rng,
        );
        lm.randomize_output_head(1.5, &mut rng);
        lm
    }

    fn backend() -> TinyLmBackend<f64> {
        TinyLmBackend::new("tiny", Arc::new(peaked_lm()))
    }

    #[test]
    fn greedy_ignores_seed() {
        let b = backend();
        let mut req = GenRequest::new("Human: hi\n\nAssistant: ");
        req.max_tokens = 12;
        req.temperature = 1e-6;
        req.seed = 1;
        let a = b.complete(&req).unwrap();
        req.seed = 99;
        assert_eq!(a, b.complete(&req).unwrap());
    }

    #[test]
    fn returns_n_completions_deterministically() {
        let b = backend();
        let mut req = GenRequest::new("abc");
        req.n = 5;
        req.max_tokens = 8;
        let r1 = b.generate(&req).unwrap();
        assert_eq!(r1.completions.len(), 5);
        assert_eq!(r1, b.generate(&req).unwrap());
    }

    #[test]
    fn rejects_invalid_requests() {
        let b = backend();
        let mut req = GenRequest::new("x");
        req.n = 0;
        assert!(b.generate(&req).is_err());
        let mut req = GenRequest::new("x");
        req.top_p = 0.0;
        assert!(b.generate(&req).is_err());
    }

    #[test]
    fn stop_string_never_returned() {
        let b = backend();
        let mut req = GenRequest::new("x");
        req.n = 200;
        req.max_tokens = 30;
        req.top_p = 1.0;
        // Frequent bytes make the stop string likely to be produced.
        let lp = b.model().step_logprobs(&{
            let mut c = b.model().new_cache();
            b.model().step(&mut c, tinylm::BOS)
        });
        let mut best: Vec<usize> = (0..256).collect();
        best.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]));
        let stop = String::from_utf8(vec![best[0] as u8]).unwrap_or_else(|_| "a".into());
        req.stop = vec![stop.clone(), "\nHuman:".into()];
        for c in b.generate(&req).unwrap().completions {
            assert!(!c.text.contains(&stop));
            assert!(!c.text.contains("\nHuman:"));
        }
    }
}
