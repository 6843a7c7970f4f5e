//! Next-token selection: vanilla sampling plus the two watermarked schemes.
//!
//! Greenlist shifts the logits of a secret token subset by delta before the
//! softmax. Exponential selection replaces sampling with the deterministic
//! argmax of r_v^(1/p_v) over the secret vector r. Both derive their per-step
//! randomness from the keyed window seed; vanilla sampling draws from a
//! session stream seeded independently of any key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keying::{
    derive_seed, hash_window_into, secret_vector, secret_vector_and_uniform, MasterKey,
    SecretVector,
};
use crate::rng::Xoshiro256StarStar;

/// Watermarking scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Vanilla,
    Greenlist,
    Exponential,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Vanilla => "vanilla",
            Scheme::Greenlist => "greenlist",
            Scheme::Exponential => "exponential",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Scheme::Vanilla),
            "greenlist" => Ok(Scheme::Greenlist),
            "exponential" => Ok(Scheme::Exponential),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Generation parameters shared by samplers and detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerParams {
    pub scheme: Scheme,
    /// Greenlist logit shift, >= 0.
    pub delta: f64,
    /// Greenlist fraction, in (0, 1).
    pub gamma: f64,
    /// Watermark context width: number of previous tokens hashed per step.
    pub h: usize,
    /// Softmax temperature, > 0.
    pub temperature: f64,
    /// Nucleus truncation mass, in (0, 1].
    pub top_p: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            scheme: Scheme::Exponential,
            delta: 2.0,
            gamma: 0.25,
            h: 2,
            temperature: 1.0,
            top_p: 0.95,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Raw model output for one step, with the softmax knobs attached.
#[derive(Debug, Clone)]
pub struct LogitVector {
    pub logits: Vec<f64>,
    pub temperature: f64,
    pub top_p: f64,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Self {
        Self {
            logits,
            temperature: 1.0,
            top_p: 1.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_top_p(mut self, top_p: f64) -> Self {
        self.top_p = top_p;
        self
    }
}

/// A probability vector: entries >= 0, summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Config("probability vector needs |V| >= 2".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "probability entries must be finite and >= 0, got {p}"
                )));
            }
            sum += p;
        }
        if sum == 0.0 {
            return Err(Error::DegenerateInput(
                "probability vector sums to zero".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateInput(format!(
                "probability vector sums to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A token sequence with prompt boundary and vocabulary metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub vocab_size: u32,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, prompt_len: usize, vocab_size: u32) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Config(format!(
                "prompt_len {} exceeds sequence length {}",
                prompt_len,
                tokens.len()
            )));
        }
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Config(format!(
                "token id {t} out of vocabulary (|V| = {vocab_size})"
            )));
        }
        Ok(Self {
            tokens,
            prompt_len,
            vocab_size,
        })
    }

    /// Tokens after the prompt.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Anything that can supply next-token logits for a context. Implemented by
/// the toy model and by external providers speaking the line protocol.
pub trait LogitProvider {
    fn vocab_size(&self) -> usize;
    fn next_logits(&mut self, context: &[u32]) -> Result<Vec<f64>>;
}

/// Temperature softmax followed by nucleus (top-p) truncation.
///
/// Keeps the smallest prefix of tokens, in descending-probability order with
/// ties broken by lower token id, whose cumulative mass reaches `top_p`; the
/// rest are zeroed and the prefix is renormalized.
pub fn softmax_with_nucleus(l: &LogitVector) -> Result<ProbVector> {
    if l.logits.len() < 2 {
        return Err(Error::Config("logit vector needs |V| >= 2".into()));
    }
    if !(l.temperature > 0.0) || !l.temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {}",
            l.temperature
        )));
    }
    if !(l.top_p > 0.0 && l.top_p <= 1.0) {
        return Err(Error::Config(format!(
            "top_p must lie in (0, 1], got {}",
            l.top_p
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for &x in &l.logits {
        if x.is_nan() || x == f64::INFINITY {
            return Err(Error::Domain(format!("logit {x} is not admissible")));
        }
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateInput("all logits are -inf".into()));
    }

    let inv_theta = 1.0 / l.temperature;
    let scaled_max = max * inv_theta;
    let mut probs: Vec<f64> = l
        .logits
        .iter()
        .map(|&x| (x * inv_theta - scaled_max).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }

    if l.top_p < 1.0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .expect("probabilities are never NaN")
                .then(a.cmp(&b))
        });
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (rank, &idx) in order.iter().enumerate() {
            cum += probs[idx];
            if cum >= l.top_p {
                keep = rank + 1;
                break;
            }
        }
        let mut truncated = vec![0.0; probs.len()];
        let mut mass = 0.0;
        for &idx in &order[..keep] {
            truncated[idx] = probs[idx];
            mass += probs[idx];
        }
        for p in &mut truncated {
            *p /= mass;
        }
        probs = truncated;
    }

    ProbVector::new(probs)
}

/// Add `delta` to the logits selected by `mask`, then softmax + nucleus.
pub fn greenlist_shift(l: &LogitVector, mask: &[bool], delta: f64) -> Result<ProbVector> {
    if mask.len() != l.logits.len() {
        return Err(Error::Config(format!(
            "mask length {} does not match |V| = {}",
            mask.len(),
            l.logits.len()
        )));
    }
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
    }
    let shifted = LogitVector {
        logits: l
            .logits
            .iter()
            .zip(mask)
            .map(|(&x, &green)| if green { x + delta } else { x })
            .collect(),
        temperature: l.temperature,
        top_p: l.top_p,
    };
    softmax_with_nucleus(&shifted)
}

/// Deterministic watermarked selection: argmax over v of r_v^(1/p_v),
/// computed as the argmin of -ln(r_v)/p_v. Tokens with p_v = 0 are never
/// selected; ties break toward the lowest token id.
pub fn exponential_select(p: &ProbVector, r: &SecretVector) -> Result<u32> {
    if r.dim() < p.len() {
        return Err(Error::Config(format!(
            "secret vector dimension {} below |V| = {}",
            r.dim(),
            p.len()
        )));
    }
    select_exponential_at(p.probs(), r.entries(), 0)
}

/// Selection reading r through a cyclic offset, so multi-bit generation can
/// avoid materializing each shifted vector.
pub(crate) fn select_exponential_at(probs: &[f64], entries: &[f64], offset: usize) -> Result<u32> {
    let d = entries.len();
    let mut best: Option<(u32, f64)> = None;
    for (v, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let r = entries[(v + offset) % d];
        let cost = -r.ln() / p;
        match best {
            Some((_, c)) if c <= cost => {}
            _ => best = Some((v as u32, cost)),
        }
    }
    best.map(|(v, _)| v)
        .ok_or_else(|| Error::DegenerateInput("no token has positive probability".into()))
}

/// Inverse-CDF draw over token ids in ascending order from one uniform.
pub(crate) fn multinomial_draw(probs: &[f64], u: f64) -> u32 {
    let mut cum = 0.0;
    let mut last_positive = 0u32;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i as u32;
            if cum > u {
                return i as u32;
            }
        }
    }
    last_positive
}

/// Autoregressive generation. The secret vector has dimension `dim` >= |V|
/// and is read through cyclic offset `message` (0 for zero-bit watermarking).
pub(crate) fn generate_at<P: LogitProvider + ?Sized>(
    model: &mut P,
    params: &SamplerParams,
    key: &MasterKey,
    prompt: &[u32],
    n: usize,
    sampling_seed: u64,
    dim: usize,
    message: usize,
) -> Result<TokenSequence> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("generation length must be >= 1".into()));
    }
    let vocab = model.vocab_size();
    if vocab < 2 {
        return Err(Error::Config("model vocabulary must have |V| >= 2".into()));
    }
    if dim < vocab {
        return Err(Error::Config(format!(
            "secret dimension {dim} below |V| = {vocab}"
        )));
    }
    if message >= dim {
        return Err(Error::Domain(format!(
            "message {message} out of range for dimension {dim}"
        )));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Config(format!(
            "prompt token {t} out of vocabulary (|V| = {vocab})"
        )));
    }

    let mut tokens = prompt.to_vec();
    let mut window = Vec::with_capacity(params.h);
    let mut session = Xoshiro256StarStar::from_seed(sampling_seed);

    for _ in 0..n {
        let logits = model.next_logits(&tokens)?;
        if logits.len() != vocab {
            return Err(Error::Source(format!(
                "provider returned {} logits for |V| = {vocab}",
                logits.len()
            )));
        }
        let lv = LogitVector {
            logits,
            temperature: params.temperature,
            top_p: params.top_p,
        };
        let tok = match params.scheme {
            Scheme::Vanilla => {
                let p = softmax_with_nucleus(&lv)?;
                multinomial_draw(p.probs(), session.next_unit())
            }
            Scheme::Exponential => {
                hash_window_into(&mut window, &tokens, params.h);
                let seed = derive_seed(key, params.h, &window)?;
                let r = secret_vector(seed, dim)?;
                let p = softmax_with_nucleus(&lv)?;
                select_exponential_at(p.probs(), r.entries(), message)?
            }
            Scheme::Greenlist => {
                hash_window_into(&mut window, &tokens, params.h);
                let seed = derive_seed(key, params.h, &window)?;
                let (r, u) = secret_vector_and_uniform(seed, dim)?;
                let entries = r.entries();
                let mask: Vec<bool> = (0..vocab)
                    .map(|v| entries[(v + message) % dim] < params.gamma)
                    .collect();
                let q = greenlist_shift(&lv, &mask, params.delta)?;
                multinomial_draw(q.probs(), u)
            }
        };
        tokens.push(tok);
    }

    TokenSequence::new(tokens, prompt.len(), vocab as u32)
}

/// Generate `n` tokens after `prompt` under `params`.
///
/// Exponential generation is fully deterministic given (key, prompt, model);
/// the greenlist multinomial draw consumes the keyed per-step stream and is
/// deterministic too. Only vanilla sampling uses `sampling_seed`.
pub fn generate<P: LogitProvider + ?Sized>(
    model: &mut P,
    params: &SamplerParams,
    key: &MasterKey,
    prompt: &[u32],
    n: usize,
    sampling_seed: u64,
) -> Result<TokenSequence> {
    let vocab = model.vocab_size();
    generate_at(model, params, key, prompt, n, sampling_seed, vocab.max(2), 0)
}
