//! Multi-bit watermarking: embed one of M messages by cyclically shifting the
//! per-step secret vector, and decode by scoring all shifts at once.
//!
//! The accumulation identity is the load-bearing contract here: component m of
//! [`score_all_messages`] equals, exactly, the zero-bit score recomputed with
//! [`shifted_vector`] applied at every step. Decoding picks the message with
//! the smallest p-value and corrects for multiplicity with 1 - (1 - p)^M.

use serde::{Deserialize, Serialize};

use crate::detectors::{
    for_each_admitted, pvalue_binomial, pvalue_gamma, DedupRule, ScoringContext,
};
use crate::error::{Error, Result};
use crate::keying::{derive_seed, secret_vector, MasterKey, SecretVector};
use crate::samplers::{generate_at, LogitProvider, SamplerParams, Scheme, TokenSequence};

/// Message space: M candidate messages decoded from d-dimensional secrets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSpace {
    num_messages: usize,
    dim: usize,
}

impl MessageSpace {
    /// Standard layout: d = max(M, |V|).
    pub fn for_vocab(num_messages: usize, vocab_size: usize) -> Result<Self> {
        Self::with_dim(num_messages, num_messages.max(vocab_size))
    }

    /// Explicit dimension; M may not exceed d.
    pub fn with_dim(num_messages: usize, dim: usize) -> Result<Self> {
        if num_messages == 0 {
            return Err(Error::Config("message space needs M >= 1".into()));
        }
        if num_messages > dim {
            return Err(Error::Config(format!(
                "M = {num_messages} exceeds secret dimension d = {dim}"
            )));
        }
        Ok(Self { num_messages, dim })
    }

    pub fn num_messages(&self) -> usize {
        self.num_messages
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Cyclic shift: entries[i] = r0[(i + m) mod d]. Message 0 is the identity.
pub fn shifted_vector(r0: &SecretVector, m: usize) -> Result<SecretVector> {
    let d = r0.dim();
    if m >= d {
        return Err(Error::Domain(format!(
            "shift {m} out of range for dimension {d}"
        )));
    }
    let entries = r0.entries();
    let shifted = (0..d).map(|i| entries[(i + m) % d]).collect();
    Ok(SecretVector::from_entries(shifted))
}

/// Watermarked generation carrying message `m`: every per-step secret vector
/// is the m-shift of the d-dimensional base vector, with only the first |V|
/// components consumed by sampling.
pub fn generate_multibit<P: LogitProvider + ?Sized>(
    model: &mut P,
    params: &SamplerParams,
    key: &MasterKey,
    prompt: &[u32],
    n: usize,
    space: &MessageSpace,
    message: usize,
    sampling_seed: u64,
) -> Result<TokenSequence> {
    if message >= space.num_messages {
        return Err(Error::Domain(format!(
            "message {message} out of range for M = {}",
            space.num_messages
        )));
    }
    if space.dim < model.vocab_size() {
        return Err(Error::Config(format!(
            "secret dimension {} below |V| = {}",
            space.dim,
            model.vocab_size()
        )));
    }
    generate_at(
        model,
        params,
        key,
        prompt,
        n,
        sampling_seed,
        space.dim,
        message,
    )
}

/// All M zero-bit scores in one pass over the text.
///
/// Per admitted position the componentwise score vector f(r(0)) is cyclically
/// shifted by the observed token and accumulated, so that output[m] equals the
/// zero-bit score computed with the m-shifted secret. f is -ln(1 - r) for the
/// exponential scheme and the greenlist indicator r < gamma otherwise.
/// Returns (score vector of length d, admitted count).
pub fn score_all_messages(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    space: &MessageSpace,
    dedup: DedupRule,
) -> Result<(Vec<f64>, usize)> {
    params.validate()?;
    let d = space.dim;
    let mut acc = vec![0.0f64; d];
    let mut failure = None;
    let mut ctx = ScoringContext::new(params.h);
    let gamma = params.gamma;
    let scheme = params.scheme;
    let admitted = for_each_admitted(seq, params.h, dedup, &mut ctx, |_, window, token| {
        if failure.is_some() {
            return;
        }
        let seed = match derive_seed(key, params.h, window) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let r0 = match secret_vector(seed, d) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let entries = r0.entries();
        let offset = token as usize % d;
        match scheme {
            Scheme::Exponential => {
                for (i, slot) in acc.iter_mut().enumerate() {
                    let r = entries[(i + offset) % d];
                    *slot += -(-r).ln_1p();
                }
            }
            Scheme::Greenlist => {
                for (i, slot) in acc.iter_mut().enumerate() {
                    if entries[(i + offset) % d] < gamma {
                        *slot += 1.0;
                    }
                }
            }
            Scheme::Vanilla => failure = Some(Error::Config(
                "multi-bit scoring needs a watermarked scheme".into(),
            )),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((acc, admitted))
}

/// Decoding result for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// Zero-bit scores for the first M messages.
    pub scores: Vec<f64>,
    pub per_message_pvalues: Vec<f64>,
    /// argmin of the per-message p-values, ties toward the lowest index.
    pub best_message: usize,
    /// Multiplicity-corrected significance 1 - (1 - p_best)^M.
    pub global_pvalue: f64,
    pub flagged: bool,
    pub fpr_target: f64,
    pub scored_tokens: usize,
    pub total_tokens: usize,
}

/// 1 - (1 - p)^M evaluated in log space.
pub fn global_pvalue(p: f64, m: usize) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    // ln(1 - p) is exact for tiny p via ln_1p.
    let log_complement = (-p).ln_1p();
    (-((m as f64) * log_complement).exp_m1()).clamp(0.0, 1.0)
}

/// Score all messages, test each, pick the best, and correct for multiplicity.
/// Flags the text when the global p-value is below `fpr_target`.
pub fn identify(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    space: &MessageSpace,
    fpr_target: f64,
    dedup: DedupRule,
) -> Result<IdentificationReport> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::Config(format!(
            "fpr target must lie in [0, 1], got {fpr_target}"
        )));
    }
    let (all_scores, scored) = score_all_messages(seq, key, params, space, dedup)?;
    if scored == 0 {
        return Err(Error::InsufficientData(
            "no positions admitted for scoring".into(),
        ));
    }
    let m = space.num_messages;
    let scores: Vec<f64> = all_scores[..m].to_vec();
    let per_message_pvalues: Vec<f64> = scores
        .iter()
        .map(|&s| match params.scheme {
            Scheme::Greenlist => pvalue_binomial(s.round() as u64, scored, params.gamma),
            _ => pvalue_gamma(s, scored),
        })
        .collect::<Result<_>>()?;
    let best_message = per_message_pvalues
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("p-values are never NaN"))
        .map(|(i, _)| i)
        .expect("message space is non-empty");
    let global = global_pvalue(per_message_pvalues[best_message], m);
    Ok(IdentificationReport {
        scores,
        per_message_pvalues,
        best_message,
        global_pvalue: global,
        flagged: global < fpr_target,
        fpr_target,
        scored_tokens: scored,
        total_tokens: seq.generated_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::WindowSeed;
    use crate::rng::Xoshiro256StarStar;
    use crate::samplers::generate;
    use crate::toylm::ToyModel;

    #[test]
    fn shifted_vector_definition_and_group_property() {
        let r0 = SecretVector::from_entries(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(shifted_vector(&r0, 0).unwrap(), r0);
        assert_eq!(
            shifted_vector(&r0, 1).unwrap().entries(),
            &[0.2, 0.3, 0.4, 0.1]
        );
        // Shift by m then by d - m is the identity.
        for m in 1..4 {
            let once = shifted_vector(&r0, m).unwrap();
            let back = shifted_vector(&once, 4 - m).unwrap();
            assert_eq!(back, r0);
        }
        assert!(shifted_vector(&r0, 4).is_err());
    }

    #[test]
    fn message_space_layout() {
        let s = MessageSpace::for_vocab(4, 16).unwrap();
        assert_eq!(s.dim(), 16);
        let s = MessageSpace::for_vocab(64, 16).unwrap();
        assert_eq!(s.dim(), 64);
        assert!(MessageSpace::with_dim(0, 4).is_err());
        assert!(MessageSpace::with_dim(5, 4).is_err());
    }

    #[test]
    fn message_zero_matches_zero_bit_generation() {
        let key = MasterKey::from_seed(21);
        let mut model = ToyModel::new(1, 16, 0.5, 7).unwrap();
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 1,
            ..SamplerParams::default()
        };
        // With d = |V| the m = 0 multibit path is byte-identical to generate.
        let space = MessageSpace::for_vocab(8, 16).unwrap();
        assert_eq!(space.dim(), 16);
        let a = generate_multibit(&mut model, &params, &key, &[1], 48, &space, 0, 5).unwrap();
        let b = generate(&mut model, &params, &key, &[1], 48, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn messages_differ_in_output() {
        // Distinct messages give distinct outputs; 1000 pairs, zero collisions.
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 1,
            ..SamplerParams::default()
        };
        let space = MessageSpace::for_vocab(16, 16).unwrap();
        let mut model = ToyModel::new(1, 16, 0.5, 3).unwrap();
        let mut rng = Xoshiro256StarStar::from_seed(17);
        let mut collisions = 0;
        for trial in 0..1000u64 {
            let key = MasterKey::from_seed(trial);
            let m1 = (rng.next_u64() % 16) as usize;
            let m2 = {
                let x = (rng.next_u64() % 15) as usize;
                if x >= m1 {
                    x + 1
                } else {
                    x
                }
            };
            let a = generate_multibit(&mut model, &params, &key, &[2], 32, &space, m1, 0).unwrap();
            let b = generate_multibit(&mut model, &params, &key, &[2], 32, &space, m2, 0).unwrap();
            if a == b {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn message_space_may_exceed_vocabulary() {
        // |V| = 16, M = 64, d = 64: generation stays well-defined.
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 1,
            ..SamplerParams::default()
        };
        let space = MessageSpace::for_vocab(64, 16).unwrap();
        let mut model = ToyModel::new(1, 16, 0.5, 9).unwrap();
        let key = MasterKey::from_seed(40);
        let seq =
            generate_multibit(&mut model, &params, &key, &[0], 32, &space, 63, 0).unwrap();
        assert_eq!(seq.generated_len(), 32);
    }

    #[test]
    fn single_position_accumulates_one_shifted_vector() {
        // With T' = 1 the score vector is exactly f(r0) shifted by the one
        // observed token; a constant r0 would make every component equal
        // (-ln(1-0.5) = ln 2 in the worked example).
        let key = MasterKey::from_seed(50);
        let seq = TokenSequence::new(vec![3], 0, 4).unwrap();
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 0,
            ..SamplerParams::default()
        };
        let space = MessageSpace::with_dim(4, 4).unwrap();
        let (acc, scored) =
            score_all_messages(&seq, &key, &params, &space, DedupRule::Tuple).unwrap();
        assert_eq!(scored, 1);
        let seed = derive_seed(&key, 0, &[]).unwrap();
        let r0 = secret_vector(seed, 4).unwrap();
        for (i, &got) in acc.iter().enumerate() {
            let want = -(1.0 - r0.entries()[(i + 3) % 4]).ln();
            assert!((got - want).abs() < 1e-15);
        }
        assert!((-(1.0 - 0.5f64).ln() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cyclic_accumulation_matches_naive_loop() {
        // The defining contract: output[m] == zero-bit score with the
        // m-shifted secret, componentwise to 1e-12, including d > |V|.
        let mut rng = Xoshiro256StarStar::from_seed(61);
        for &(d, vocab) in &[(4usize, 4u32), (64, 64), (300, 50), (64, 16)] {
            for scheme in [Scheme::Exponential, Scheme::Greenlist] {
                let key = MasterKey::from_seed(rng.next_u64());
                let params = SamplerParams {
                    scheme,
                    h: 2,
                    ..SamplerParams::default()
                };
                let tokens: Vec<u32> =
                    (0..32).map(|_| (rng.next_u64() % vocab as u64) as u32).collect();
                let seq = TokenSequence::new(tokens, 0, vocab).unwrap();
                let space = MessageSpace::with_dim(d, d).unwrap();
                let (fast, scored) =
                    score_all_messages(&seq, &key, &params, &space, DedupRule::Tuple).unwrap();
                assert!(scored > 0);

                // Naive M-loop oracle: rescore per message with shifted
                // secrets, reusing only public pieces.
                for m in 0..d {
                    let mut naive = 0.0f64;
                    let mut ctx = ScoringContext::new(params.h);
                    for_each_admitted(&seq, params.h, DedupRule::Tuple, &mut ctx, |_, window, token| {
                        let seed = derive_seed(&key, params.h, window).unwrap();
                        let r0 = secret_vector(seed, d).unwrap();
                        let shifted = shifted_vector(&r0, m).unwrap();
                        let r = shifted.entries()[token as usize];
                        naive += match scheme {
                            Scheme::Exponential => -(1.0 - r).ln(),
                            _ => (r < params.gamma) as u64 as f64,
                        };
                    });
                    assert!(
                        (fast[m] - naive).abs() <= 1e-12,
                        "d={d} vocab={vocab} m={m}: {} vs {naive}",
                        fast[m]
                    );
                }
            }
        }
    }

    #[test]
    fn global_pvalue_log_space() {
        assert_eq!(global_pvalue(0.3, 1), 0.3);
        assert_eq!(global_pvalue(0.0, 100), 0.0);
        assert_eq!(global_pvalue(1.0, 3), 1.0);
        // p = 1e-9, M = 1000: close to M p.
        let g = global_pvalue(1e-9, 1000);
        assert!((g - 9.999_995_005e-7).abs() < 1e-15, "{g}");
    }

    #[test]
    fn identify_reports_best_message() {
        let key = MasterKey::from_seed(77);
        let mut model = ToyModel::preset("medium", 33).unwrap();
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 2,
            temperature: 1.0,
            ..SamplerParams::default()
        };
        let space = MessageSpace::for_vocab(16, 64).unwrap();
        let mut correct = 0;
        let trials = 200;
        for trial in 0..trials {
            let message = (trial % 16) as usize;
            let seq = generate_multibit(
                &mut model,
                &params,
                &key,
                &[trial as u32 % 64],
                256,
                &space,
                message,
                trial,
            )
            .unwrap();
            let report =
                identify(&seq, &key, &params, &space, 1e-3, DedupRule::Tuple).unwrap();
            assert_eq!(report.scores.len(), 16);
            assert_eq!(report.per_message_pvalues.len(), 16);
            if report.best_message == message {
                correct += 1;
            }
        }
        // Decoding succeeds in at least 90% of 200 clean 256-token texts.
        assert!(correct * 10 >= trials * 9, "correct = {correct}/{trials}");
    }

    #[test]
    fn identify_single_message_reduces_to_detection() {
        let key = MasterKey::from_seed(14);
        let mut rng = Xoshiro256StarStar::from_seed(15);
        let tokens: Vec<u32> = (0..64).map(|_| (rng.next_u64() % 32) as u32).collect();
        let seq = TokenSequence::new(tokens, 0, 32).unwrap();
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 1,
            ..SamplerParams::default()
        };
        let space = MessageSpace::with_dim(1, 32).unwrap();
        let report = identify(&seq, &key, &params, &space, 0.5, DedupRule::Tuple).unwrap();
        assert_eq!(report.best_message, 0);
        assert_eq!(report.global_pvalue, report.per_message_pvalues[0]);
    }

    #[test]
    fn dedup_limits_contributions() {
        // All-identical repeated tuples: only the first position lands in the
        // accumulator.
        let key = MasterKey::from_seed(3);
        let seq = TokenSequence::new(vec![0; 16], 0, 8).unwrap();
        let params = SamplerParams {
            scheme: Scheme::Exponential,
            h: 1,
            ..SamplerParams::default()
        };
        let space = MessageSpace::with_dim(8, 8).unwrap();
        let (_, scored) =
            score_all_messages(&seq, &key, &params, &space, DedupRule::Tuple).unwrap();
        assert_eq!(scored, 1);
    }

    #[test]
    fn secret_vector_shift_identity_on_stream() {
        // Entry i of the shifted vector reads the same stream position as
        // entry (i + m) mod d of the base vector.
        let r0 = secret_vector(WindowSeed(5), 10).unwrap();
        let s = shifted_vector(&r0, 7).unwrap();
        for i in 0..10 {
            assert_eq!(s.entries()[i], r0.entries()[(i + 7) % 10]);
        }
    }
}
