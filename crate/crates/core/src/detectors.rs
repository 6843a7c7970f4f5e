//! Scoring and p-values: exact binomial and gamma tests, the asymptotic Z-test
//! baseline (kept to reproduce its miscalibration), the Neyman-Pearson score
//! with its Chernoff bound, and the unweighted simplified score.
//!
//! Scoring walks the generated positions of a sequence (prompt excluded),
//! hashes each position's context window exactly as generation did (including
//! the left-pad-with-zero rule), and admits a position according to the dedup
//! rule. The default rule scores a position only when the (h+1)-tuple
//! {window, current token} has not been seen in the pass, which restores the
//! i.i.d. assumptions behind the exact tests on repetitive text.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keying::{derive_seed, hash_window_into, secret_entry, MasterKey};
use crate::samplers::{ProbVector, SamplerParams, Scheme, TokenSequence};
use crate::statfun::{normal_sf, reg_inc_beta, reg_lower_gamma, reg_upper_gamma};

/// Which positions are admitted for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupRule {
    /// Score positions whose {window, token} tuple is novel (default).
    Tuple,
    /// Score positions whose window alone is novel.
    Context,
    /// Score every position.
    Off,
}

impl Default for DedupRule {
    fn default() -> Self {
        DedupRule::Tuple
    }
}

impl DedupRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            DedupRule::Tuple => "tuple",
            DedupRule::Context => "context",
            DedupRule::Off => "off",
        }
    }
}

impl std::fmt::Display for DedupRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DedupRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuple" => Ok(DedupRule::Tuple),
            "context" => Ok(DedupRule::Context),
            "off" => Ok(DedupRule::Off),
            other => Err(Error::Config(format!("unknown dedup rule {other:?}"))),
        }
    }
}

/// Seen-tuple state for one scoring pass. Grows monotonically; sharing one
/// context across several passes makes repeated material contribute nothing.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    h: usize,
    seen: SeenSet,
}

#[derive(Debug, Clone)]
enum SeenSet {
    /// Windows of up to 4 tokens pack into a u128 exactly.
    Packed(HashSet<(u128, u32)>),
    Wide(HashSet<(Vec<u32>, u32)>),
}

impl ScoringContext {
    pub fn new(h: usize) -> Self {
        let seen = if h <= 4 {
            SeenSet::Packed(HashSet::new())
        } else {
            SeenSet::Wide(HashSet::new())
        };
        Self { h, seen }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    /// Number of distinct entries recorded so far.
    pub fn len(&self) -> usize {
        match &self.seen {
            SeenSet::Packed(s) => s.len(),
            SeenSet::Wide(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn admit(&mut self, rule: DedupRule, window: &[u32], token: u32) -> bool {
        let token_key = match rule {
            DedupRule::Off => return true,
            DedupRule::Tuple => token,
            DedupRule::Context => 0,
        };
        match &mut self.seen {
            SeenSet::Packed(s) => {
                let mut packed = 0u128;
                for &w in window {
                    packed = packed << 32 | w as u128;
                }
                s.insert((packed, token_key))
            }
            SeenSet::Wide(s) => s.insert((window.to_vec(), token_key)),
        }
    }
}

/// Walk the generated positions of `seq`, calling `f(position, window, token)`
/// for each admitted one. Returns the admitted count.
pub(crate) fn for_each_admitted<F>(
    seq: &TokenSequence,
    h: usize,
    rule: DedupRule,
    ctx: &mut ScoringContext,
    mut f: F,
) -> usize
where
    F: FnMut(usize, &[u32], u32),
{
    debug_assert_eq!(ctx.h, h, "scoring context built for a different h");
    let mut window = Vec::with_capacity(h);
    let mut admitted = 0;
    for pos in seq.prompt_len..seq.tokens.len() {
        hash_window_into(&mut window, &seq.tokens[..pos], h);
        let token = seq.tokens[pos];
        if ctx.admit(rule, &window, token) {
            admitted += 1;
            f(pos, &window, token);
        }
    }
    admitted
}

/// Like [`for_each_admitted`], but hands `f` the secret-vector entry at the
/// realized token instead of the raw window.
pub(crate) fn for_each_admitted_r<F>(
    seq: &TokenSequence,
    key: &MasterKey,
    h: usize,
    rule: DedupRule,
    ctx: &mut ScoringContext,
    mut f: F,
) -> Result<usize>
where
    F: FnMut(usize, u32, f64),
{
    let mut failure = None;
    let admitted = for_each_admitted(seq, h, rule, ctx, |pos, window, token| {
        if failure.is_some() {
            return;
        }
        match derive_seed(key, h, window) {
            Ok(seed) => f(pos, token, secret_entry(seed, token as usize)),
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(admitted),
    }
}

fn require_scored(admitted: usize) -> Result<usize> {
    if admitted == 0 {
        Err(Error::InsufficientData(
            "no positions admitted for scoring".into(),
        ))
    } else {
        Ok(admitted)
    }
}

/// Greenlist score: number of admitted tokens inside their greenlist.
/// Returns (score, admitted count).
pub fn score_greenlist(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    dedup: DedupRule,
) -> Result<(u64, usize)> {
    let mut ctx = ScoringContext::new(params.h);
    let (s, t) = score_greenlist_with(seq, key, params, dedup, &mut ctx)?;
    require_scored(t)?;
    Ok((s, t))
}

/// Greenlist score continuing an existing pass; zero admissions is not an
/// error here.
pub fn score_greenlist_with(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    dedup: DedupRule,
    ctx: &mut ScoringContext,
) -> Result<(u64, usize)> {
    params.validate()?;
    let mut score = 0u64;
    let gamma = params.gamma;
    let t = for_each_admitted_r(seq, key, params.h, dedup, ctx, |_, _, r| {
        if r < gamma {
            score += 1;
        }
    })?;
    Ok((score, t))
}

/// Exponential score: sum of -ln(1 - r) over admitted positions.
pub fn score_exponential(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    dedup: DedupRule,
) -> Result<(f64, usize)> {
    let mut ctx = ScoringContext::new(params.h);
    let (s, t) = score_exponential_with(seq, key, params, dedup, &mut ctx)?;
    require_scored(t)?;
    Ok((s, t))
}

pub fn score_exponential_with(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    dedup: DedupRule,
    ctx: &mut ScoringContext,
) -> Result<(f64, usize)> {
    params.validate()?;
    let mut score = 0.0;
    let t = for_each_admitted_r(seq, key, params.h, dedup, ctx, |_, _, r| {
        score += -(-r).ln_1p();
    })?;
    Ok((score, t))
}

/// Exact binomial tail: p-value(s) = I_gamma(s, T' - s + 1) = P(B(T', gamma) >= s).
pub fn pvalue_binomial(score: u64, scored: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0,1), got {gamma}")));
    }
    if scored == 0 {
        return Err(Error::InsufficientData("binomial test needs T' >= 1".into()));
    }
    if score as usize > scored {
        return Err(Error::Domain(format!(
            "score {score} exceeds scored token count {scored}"
        )));
    }
    if score == 0 {
        return Ok(1.0);
    }
    reg_inc_beta(gamma, score as f64, (scored - score as usize + 1) as f64)
}

/// Exact gamma tail: p-value(s) = Q(T', s) for S ~ Gamma(T', 1) under H0.
pub fn pvalue_gamma(score: f64, scored: usize) -> Result<f64> {
    if scored == 0 {
        return Err(Error::InsufficientData("gamma test needs T' >= 1".into()));
    }
    if !(score >= 0.0) {
        return Err(Error::Domain(format!("score must be >= 0, got {score}")));
    }
    reg_upper_gamma(scored as f64, score)
}

/// Z-test baseline: per-token mu0/sigma0 under H0 are (gamma, sqrt(gamma(1-gamma)))
/// for greenlist and (1, 1) for exponential.
pub fn pvalue_ztest(score: f64, scored: usize, scheme: Scheme, gamma: f64) -> Result<f64> {
    if scored == 0 {
        return Err(Error::InsufficientData("z-test needs T' >= 1".into()));
    }
    let (mu0, sigma0) = match scheme {
        Scheme::Greenlist => {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::Domain(format!(
                    "gamma must lie in (0,1), got {gamma}"
                )));
            }
            (gamma, (gamma * (1.0 - gamma)).sqrt())
        }
        Scheme::Exponential => (1.0, 1.0),
        Scheme::Vanilla => {
            return Err(Error::Config("z-test needs a watermarked scheme".into()))
        }
    };
    let t = scored as f64;
    let z = (score / t - mu0) * t.sqrt() / sigma0;
    Ok(normal_sf(z))
}

/// Neyman-Pearson score sum((1/p - 1) ln r) over admitted positions, plus a
/// Chernoff upper bound on its p-value. `probs` holds the model's sampling
/// distribution at each generated position (index 0 = first token after the
/// prompt).
pub fn score_neyman_pearson(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    probs: &[ProbVector],
    dedup: DedupRule,
) -> Result<(f64, usize, f64)> {
    params.validate()?;
    if probs.len() != seq.generated_len() {
        return Err(Error::Config(format!(
            "got {} probability vectors for {} generated positions",
            probs.len(),
            seq.generated_len()
        )));
    }
    let mut score = 0.0;
    let mut lambdas = Vec::new();
    let mut bad_token = None;
    let prompt_len = seq.prompt_len;
    let mut ctx = ScoringContext::new(params.h);
    let admitted = for_each_admitted_r(seq, key, params.h, dedup, &mut ctx, |pos, token, r| {
        if bad_token.is_some() {
            return;
        }
        let p = probs[pos - prompt_len].probs()[token as usize];
        if p <= 0.0 {
            bad_token = Some((pos, token));
            return;
        }
        if p < 1.0 {
            score += (1.0 / p - 1.0) * r.ln();
            lambdas.push(p / (1.0 - p));
        }
        // p = 1 carries no information: the weight vanishes.
    })?;
    if let Some((pos, token)) = bad_token {
        return Err(Error::ModelInconsistency(format!(
            "token {token} at position {pos} has zero model probability"
        )));
    }
    require_scored(admitted)?;
    let bound = chernoff_bound(score, &lambdas);
    Ok((score, admitted, bound))
}

/// exp(sum ln(lambda/(lambda+c)) - c s) minimized over c > 0, where c solves
/// sum 1/(c + lambda_t) = -s. Returns 1 when no positive root exists (the
/// bound is only valid for c >= 0; at c = 0 it is trivially 1).
fn chernoff_bound(score: f64, lambdas: &[f64]) -> f64 {
    if lambdas.is_empty() || score >= 0.0 {
        return 1.0;
    }
    let target = -score; // > 0
    let g = |c: f64| lambdas.iter().map(|&l| 1.0 / (c + l)).sum::<f64>();
    let (mut lo, mut hi) = (0.0f64, 1e8f64);
    if g(lo) <= target || g(hi) >= target {
        return 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * lo.max(1.0) {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    let exponent: f64 =
        lambdas.iter().map(|&l| (l / (l + c)).ln()).sum::<f64>() - c * score;
    exponent.exp().clamp(0.0, 1.0)
}

/// Unweighted alternative score sum(ln r) with exact p-value
/// P(T', -s) from the lower incomplete gamma.
pub fn pvalue_simplified(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    dedup: DedupRule,
) -> Result<DetectionReport> {
    params.validate()?;
    let mut score = 0.0;
    let mut ctx = ScoringContext::new(params.h);
    let t = for_each_admitted_r(seq, key, params.h, dedup, &mut ctx, |_, _, r| {
        score += r.ln();
    })?;
    require_scored(t)?;
    let p_value = reg_lower_gamma(t as f64, -score)?;
    Ok(DetectionReport {
        score,
        scored_tokens: t,
        total_tokens: seq.generated_len(),
        p_value,
        test: "simplified".into(),
        dedup_rule: dedup.as_str().into(),
    })
}

/// Statistical test selector for [`detect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Exact binomial tail on the greenlist count.
    Binomial,
    /// Exact gamma tail on the exponential score.
    Gamma,
    /// Asymptotic Z-test on the scheme's score.
    ZTest,
    /// Lower-gamma tail on the unweighted sum(ln r) score.
    Simplified,
}

impl TestKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Binomial => "binomial",
            TestKind::Gamma => "gamma",
            TestKind::ZTest => "ztest",
            TestKind::Simplified => "simplified",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(TestKind::Binomial),
            "gamma" => Ok(TestKind::Gamma),
            "ztest" => Ok(TestKind::ZTest),
            "simplified" => Ok(TestKind::Simplified),
            other => Err(Error::Config(format!("unknown test {other:?}"))),
        }
    }
}

/// Full detection configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectConfig {
    pub params: SamplerParams,
    pub test: TestKind,
    #[serde(default)]
    pub dedup: DedupRule,
}

/// One detection result, serialized as a JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub score: f64,
    /// Admitted count T'.
    pub scored_tokens: usize,
    /// Generated-token count T.
    pub total_tokens: usize,
    pub p_value: f64,
    pub test: String,
    pub dedup_rule: String,
}

/// Score `seq` under the configured test and return the report.
pub fn detect(seq: &TokenSequence, key: &MasterKey, config: &DetectConfig) -> Result<DetectionReport> {
    let params = &config.params;
    let dedup = config.dedup;
    let (score, scored, p_value) = match config.test {
        TestKind::Binomial => {
            let (s, t) = score_greenlist(seq, key, params, dedup)?;
            (s as f64, t, pvalue_binomial(s, t, params.gamma)?)
        }
        TestKind::Gamma => {
            let (s, t) = score_exponential(seq, key, params, dedup)?;
            (s, t, pvalue_gamma(s, t)?)
        }
        TestKind::ZTest => match params.scheme {
            Scheme::Greenlist => {
                let (s, t) = score_greenlist(seq, key, params, dedup)?;
                (
                    s as f64,
                    t,
                    pvalue_ztest(s as f64, t, Scheme::Greenlist, params.gamma)?,
                )
            }
            _ => {
                let (s, t) = score_exponential(seq, key, params, dedup)?;
                (s, t, pvalue_ztest(s, t, Scheme::Exponential, params.gamma)?)
            }
        },
        TestKind::Simplified => {
            return pvalue_simplified(seq, key, params, dedup);
        }
    };
    Ok(DetectionReport {
        score,
        scored_tokens: scored,
        total_tokens: seq.generated_len(),
        p_value,
        test: match (config.test, params.scheme) {
            (TestKind::ZTest, Scheme::Greenlist) => "ztest-greenlist".into(),
            (TestKind::ZTest, _) => "ztest-exponential".into(),
            (t, _) => t.as_str().into(),
        },
        dedup_rule: dedup.as_str().into(),
    })
}

/// Neyman-Pearson detection; the reported p-value is the Chernoff bound.
pub fn detect_neyman_pearson(
    seq: &TokenSequence,
    key: &MasterKey,
    params: &SamplerParams,
    probs: &[ProbVector],
    dedup: DedupRule,
) -> Result<DetectionReport> {
    let (score, scored, bound) = score_neyman_pearson(seq, key, params, probs, dedup)?;
    Ok(DetectionReport {
        score,
        scored_tokens: scored,
        total_tokens: seq.generated_len(),
        p_value: bound,
        test: "np-chernoff".into(),
        dedup_rule: dedup.as_str().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::{secret_vector, WindowSeed};
    use crate::rng::Xoshiro256StarStar;
    use approx::assert_abs_diff_eq;

    fn seq(tokens: Vec<u32>, prompt_len: usize, vocab: u32) -> TokenSequence {
        TokenSequence::new(tokens, prompt_len, vocab).unwrap()
    }

    fn params(scheme: Scheme, h: usize, gamma: f64) -> SamplerParams {
        SamplerParams {
            scheme,
            h,
            gamma,
            ..SamplerParams::default()
        }
    }

    fn random_seq(rng: &mut Xoshiro256StarStar, len: usize, vocab: u32) -> TokenSequence {
        let tokens = (0..len).map(|_| (rng.next_u64() % vocab as u64) as u32).collect();
        seq(tokens, 0, vocab)
    }

    #[test]
    fn greenlist_score_zero_when_gamma_tiny() {
        let key = MasterKey::from_seed(3);
        let mut rng = Xoshiro256StarStar::from_seed(8);
        let s = random_seq(&mut rng, 64, 32);
        let p = params(Scheme::Greenlist, 2, 1e-12);
        let (score, scored) = score_greenlist(&s, &key, &p, DedupRule::Tuple).unwrap();
        assert_eq!(score, 0);
        assert!(scored > 0);
    }

    #[test]
    fn dedup_admits_only_novel_tuples() {
        let key = MasterKey::from_seed(1);
        let p = params(Scheme::Greenlist, 1, 0.25);
        // All-identical nonzero tokens: the padded initial tuple (0, 5) is
        // distinct from the repeated (5, 5), so T' = 2.
        let s = seq(vec![5; 8], 0, 16);
        let (_, scored) = score_greenlist(&s, &key, &p, DedupRule::Tuple).unwrap();
        assert_eq!(scored, 2);
        // Token 0 collides with the pad, leaving a single novel tuple.
        let s = seq(vec![0; 8], 0, 16);
        let (_, scored) = score_greenlist(&s, &key, &p, DedupRule::Tuple).unwrap();
        assert_eq!(scored, 1);
        // Dedup off scores everything.
        let s = seq(vec![5; 8], 0, 16);
        let (_, scored) = score_greenlist(&s, &key, &p, DedupRule::Off).unwrap();
        assert_eq!(scored, 8);
        // Context rule keys on the window alone.
        let (_, scored) = score_greenlist(&s, &key, &p, DedupRule::Context).unwrap();
        assert_eq!(scored, 2); // windows [0] and [5]
    }

    #[test]
    fn prompt_tokens_are_not_scored() {
        let key = MasterKey::from_seed(2);
        let p = params(Scheme::Exponential, 1, 0.25);
        let full = seq(vec![1, 2, 3, 4, 5, 6], 3, 8);
        let (_, scored) = score_exponential(&full, &key, &p, DedupRule::Off).unwrap();
        assert_eq!(scored, 3);
    }

    #[test]
    fn windows_straddle_the_prompt_boundary() {
        // The first generated position hashes prompt tokens, exactly as
        // generation did.
        let key = MasterKey::from_seed(5);
        let h = 2;
        let s = seq(vec![7, 3, 9, 1], 2, 16);
        let mut got = Vec::new();
        let mut ctx = ScoringContext::new(h);
        for_each_admitted(&s, h, DedupRule::Off, &mut ctx, |pos, window, token| {
            got.push((pos, window.to_vec(), token));
        });
        assert_eq!(
            got,
            vec![(2, vec![7, 3], 9), (3, vec![3, 9], 1)]
        );
    }

    #[test]
    fn empty_admitted_set_is_insufficient_data() {
        let key = MasterKey::from_seed(2);
        let p = params(Scheme::Exponential, 1, 0.25);
        // All tokens belong to the prompt.
        let s = seq(vec![1, 2, 3], 3, 8);
        assert!(matches!(
            score_exponential(&s, &key, &p, DedupRule::Tuple),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn exponential_score_direct_value() {
        // Three admitted positions with r = 0.5 each give 3 ln 2. Constructed
        // by summing the closed form rather than mocking the hash chain.
        let r: f64 = 0.5;
        let term = -(1.0 - r).ln();
        assert_abs_diff_eq!(3.0 * term, 3.0 * 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn h0_greenlist_score_is_binomial() {
        // Mean score over 1e4 random keys on a fixed random text, T' = 100,
        // gamma = 0.25: within 4 SE of 25.
        let mut rng = Xoshiro256StarStar::from_seed(17);
        let s = random_seq(&mut rng, 100, 1 << 20); // huge vocab: all tuples novel
        let p = params(Scheme::Greenlist, 1, 0.25);
        let trials = 10_000usize;
        let mut total = 0u64;
        for i in 0..trials {
            let key = MasterKey::from_seed(i as u64);
            let (score, scored) = score_greenlist(&s, &key, &p, DedupRule::Tuple).unwrap();
            assert_eq!(scored, 100);
            total += score;
        }
        let mean = total as f64 / trials as f64;
        let se = (100.0 * 0.25 * 0.75 / trials as f64).sqrt();
        assert!((mean - 25.0).abs() <= 4.0 * se, "mean {mean}");
    }

    #[test]
    fn h0_exponential_score_mean_is_one_per_token() {
        let mut rng = Xoshiro256StarStar::from_seed(18);
        let s = random_seq(&mut rng, 64, 1 << 20);
        let p = params(Scheme::Exponential, 1, 0.25);
        let trials = 10_000usize;
        let mut total = 0.0;
        for i in 0..trials {
            let key = MasterKey::from_seed(i as u64);
            let (score, scored) = score_exponential(&s, &key, &p, DedupRule::Tuple).unwrap();
            assert_eq!(scored, 64);
            total += score / scored as f64;
        }
        let mean = total / trials as f64;
        // Var(-ln(1-U)) = 1, so the per-trial mean has SD 1/8.
        let se = (1.0 / 64.0 / trials as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean}");
    }

    #[test]
    fn pvalue_binomial_examples() {
        assert_abs_diff_eq!(pvalue_binomial(1, 1, 0.25).unwrap(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(
            pvalue_binomial(3, 5, 0.25).unwrap(),
            0.103515625,
            epsilon = 1e-12
        );
        assert_eq!(pvalue_binomial(0, 10, 0.25).unwrap(), 1.0);
        assert!(pvalue_binomial(6, 5, 0.25).is_err());
        assert!(pvalue_binomial(1, 0, 0.25).is_err());
    }

    #[test]
    fn pvalue_gamma_examples() {
        let s = 8.0f64.ln();
        assert_abs_diff_eq!(
            pvalue_gamma(s, 3).unwrap(),
            0.655_185_013_038_967_8,
            epsilon = 1e-12
        );
        for x in [0.1, 1.0, 4.0] {
            assert_abs_diff_eq!(pvalue_gamma(x, 1).unwrap(), (-x).exp(), epsilon = 1e-14);
        }
        assert_eq!(pvalue_gamma(0.0, 5).unwrap(), 1.0);
        assert!(pvalue_gamma(-1.0, 5).is_err());
    }

    #[test]
    fn pvalue_ztest_examples() {
        // Score at the null mean gives exactly one half.
        assert_eq!(
            pvalue_ztest(25.0, 100, Scheme::Greenlist, 0.25).unwrap(),
            0.5
        );
        assert_eq!(
            pvalue_ztest(100.0, 100, Scheme::Exponential, 0.25).unwrap(),
            0.5
        );
        // Greenlist T' = 100, s = 35: z = 2.3094, p = 0.010461 (quadrature
        // oracle in statfun).
        let p = pvalue_ztest(35.0, 100, Scheme::Greenlist, 0.25).unwrap();
        assert_abs_diff_eq!(p, 0.010_460_667_668_897, epsilon = 1e-9);
        assert!(pvalue_ztest(1.0, 0, Scheme::Exponential, 0.25).is_err());
        assert!(pvalue_ztest(1.0, 10, Scheme::Vanilla, 0.25).is_err());
    }

    #[test]
    fn pvalues_decrease_as_scores_increase() {
        // Strict monotonicity at fixed T' for all four tests.
        let t = 50usize;
        let mut prev = f64::INFINITY;
        for s in 0..=t as u64 {
            let p = pvalue_binomial(s, t, 0.25).unwrap();
            assert!(p < prev);
            prev = p;
        }
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let p = pvalue_gamma(i as f64 * 2.0, t).unwrap();
            assert!(p < prev);
            prev = p;
        }
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let p = pvalue_ztest(i as f64, t, Scheme::Greenlist, 0.25).unwrap();
            assert!(p < prev, "z-test not strictly decreasing at {i}");
            prev = p;
        }
        // Simplified: p-value = P(T', -s), decreasing as s rises toward 0.
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let s = -(60.0 - i as f64);
            let p = reg_lower_gamma(t as f64, -s).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn neyman_pearson_score_values() {
        // All p = 1: weights vanish, score 0, bound 1.
        let key = MasterKey::from_seed(4);
        let p = params(Scheme::Exponential, 0, 0.25);
        let s = seq(vec![1, 1, 1], 0, 2);
        let one_hot = ProbVector::new(vec![0.0, 1.0]).unwrap();
        let probs = vec![one_hot.clone(), one_hot.clone(), one_hot];
        let (score, scored, bound) =
            score_neyman_pearson(&s, &key, &p, &probs, DedupRule::Off).unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(scored, 3);
        assert_eq!(bound, 1.0);

        // Single token, p = 0.5, r = 0.25: score = ln 0.25.
        let r: f64 = 0.25;
        let expected = (1.0 / 0.5 - 1.0) * r.ln();
        assert_abs_diff_eq!(expected, -1.386_294_361_119_890_6, epsilon = 1e-12);
    }

    #[test]
    fn neyman_pearson_zero_probability_is_model_inconsistency() {
        let key = MasterKey::from_seed(4);
        let p = params(Scheme::Exponential, 0, 0.25);
        let s = seq(vec![0, 1], 0, 2);
        let dist = ProbVector::new(vec![0.0, 1.0]).unwrap();
        let probs = vec![dist.clone(), dist];
        assert!(matches!(
            score_neyman_pearson(&s, &key, &p, &probs, DedupRule::Off),
            Err(Error::ModelInconsistency(_))
        ));
    }

    #[test]
    fn chernoff_bound_dominates_empirical_pvalue() {
        // Validity on 1e3 H0 simulations: the bound at the observed score is
        // at least the empirical exceedance frequency estimated from the same
        // null ensemble.
        let mut rng = Xoshiro256StarStar::from_seed(33);
        let t = 24usize;
        let ps: Vec<f64> = (0..t).map(|_| 0.05 + 0.9 * rng.next_unit()).collect();
        let lambdas: Vec<f64> = ps.iter().map(|&p| p / (1.0 - p)).collect();
        let sims = 1000usize;
        let mut scores: Vec<f64> = (0..sims)
            .map(|_| {
                ps.iter()
                    .map(|&p| (1.0 / p - 1.0) * rng.next_unit_open().ln())
                    .sum()
            })
            .collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Check the bound at several quantiles of the null scores.
        for q in [0.5, 0.9, 0.99] {
            let idx = ((sims as f64) * q) as usize;
            let s = scores[idx.min(sims - 1)];
            let empirical = scores.iter().filter(|&&x| x >= s).count() as f64 / sims as f64;
            let bound = chernoff_bound(s, &lambdas);
            assert!(
                bound + 1e-12 >= empirical,
                "bound {bound} below empirical {empirical} at q={q}"
            );
        }
    }

    #[test]
    fn simplified_score_examples_and_uniformity() {
        // T' = 1, r = e^-1: s = -1, p = P(1, 1) = 1 - e^-1.
        let p = reg_lower_gamma(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
        // r -> 1 everywhere: s -> 0, p -> P(T', 0) = 0.
        assert_eq!(reg_lower_gamma(12.0, 0.0).unwrap(), 0.0);

        // H0 p-values are uniform: KS over 1e4 simulated sequences.
        let mut rng = Xoshiro256StarStar::from_seed(71);
        let n = 10_000usize;
        let t = 16usize;
        let mut pvals: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = (0..t).map(|_| rng.next_unit_open().ln()).sum();
                reg_lower_gamma(t as f64, -s).unwrap()
            })
            .collect();
        pvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d_stat = 0.0f64;
        for (i, &x) in pvals.iter().enumerate() {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((x - lo).abs()).max((hi - x).abs());
        }
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d_stat < critical, "KS {d_stat} >= {critical}");
    }

    #[test]
    fn simplified_end_to_end_report() {
        let key = MasterKey::from_seed(10);
        let mut rng = Xoshiro256StarStar::from_seed(10);
        let s = random_seq(&mut rng, 32, 64);
        let p = params(Scheme::Exponential, 2, 0.25);
        let report = pvalue_simplified(&s, &key, &p, DedupRule::Tuple).unwrap();
        assert!(report.score <= 0.0);
        assert!(report.scored_tokens <= report.total_tokens);
        assert!((0.0..=1.0).contains(&report.p_value));
        assert_eq!(report.test, "simplified");
    }

    #[test]
    fn dedup_is_idempotent_across_repeated_passes() {
        // Scoring the same record again within one pass adds nothing, for any
        // h: every tuple of the second copy is already seen.
        let key = MasterKey::from_seed(6);
        let mut rng = Xoshiro256StarStar::from_seed(29);
        for h in 0..=4usize {
            let s = random_seq(&mut rng, 40, 8);
            let p = params(Scheme::Exponential, h, 0.25);
            let mut ctx = ScoringContext::new(h);
            let (first, t1) =
                score_exponential_with(&s, &key, &p, DedupRule::Tuple, &mut ctx).unwrap();
            let (second, t2) =
                score_exponential_with(&s, &key, &p, DedupRule::Tuple, &mut ctx).unwrap();
            assert_eq!(second, 0.0, "h={h}");
            assert_eq!(t2, 0, "h={h}");
            let (fresh, t_fresh) =
                score_exponential(&s, &key, &p, DedupRule::Tuple).unwrap();
            assert_eq!(first, fresh);
            assert_eq!(t1, t_fresh);
        }
    }

    #[test]
    fn detect_dispatches_and_reports() {
        let key = MasterKey::from_seed(12);
        let mut rng = Xoshiro256StarStar::from_seed(90);
        let s = random_seq(&mut rng, 64, 32);
        for (test, scheme) in [
            (TestKind::Binomial, Scheme::Greenlist),
            (TestKind::Gamma, Scheme::Exponential),
            (TestKind::ZTest, Scheme::Greenlist),
            (TestKind::ZTest, Scheme::Exponential),
            (TestKind::Simplified, Scheme::Exponential),
        ] {
            let config = DetectConfig {
                params: params(scheme, 2, 0.25),
                test,
                dedup: DedupRule::Tuple,
            };
            let report = detect(&s, &key, &config).unwrap();
            assert!((0.0..=1.0).contains(&report.p_value));
            assert!(report.scored_tokens <= report.total_tokens);
        }
    }

    #[test]
    fn wide_context_handles_h_above_packing_limit() {
        let key = MasterKey::from_seed(13);
        let mut rng = Xoshiro256StarStar::from_seed(91);
        let s = random_seq(&mut rng, 64, 8);
        let p = params(Scheme::Exponential, 6, 0.25);
        let (_, scored) = score_exponential(&s, &key, &p, DedupRule::Tuple).unwrap();
        assert!(scored > 0 && scored <= 64);
    }

    #[test]
    fn secret_entry_matches_full_vector_in_scoring() {
        // The partial-stream fast path agrees with materializing the vector.
        let seedv = WindowSeed(987);
        let full = secret_vector(seedv, 64).unwrap();
        for idx in [0usize, 5, 63] {
            assert_eq!(secret_entry(seedv, idx), full.entries()[idx]);
        }
    }
}
