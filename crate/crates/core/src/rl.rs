//! Rewards for sampled rationales, group-relative advantages and the
//! clipped policy objective.

use crate::attr::{AttributeMap, ParseFailure};
use crate::error::{Error, Result};
use crate::numeric::{cosine, Tape, Tensor, Var};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

/// Stabilizer added to the group standard deviation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardWeights {
    /// Weights of format, length, accuracy and quality.
    pub w: [f64; 4],
    pub alpha_q: f64,
    pub tau_q: f64,
    /// Longest rationale (in tokens) that still earns the length reward.
    pub lmax: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip: f64,
    pub group: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w: [0.5, 0.3, 1.0, 1.0],
            alpha_q: 0.2,
            tau_q: 4.0,
            lmax: 96,
            lambda1: 0.1,
            lambda2: 1.0,
            clip: 0.2,
            group: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBreakdown {
    pub format: f64,
    pub length: f64,
    pub accuracy: f64,
    pub quality: f64,
    pub composite: f64,
    pub advantage: f64,
}

impl RewardBreakdown {
    pub fn new(u: [f64; 4], w: &RewardWeights) -> Self {
        Self {
            format: u[0],
            length: u[1],
            accuracy: u[2],
            quality: u[3],
            composite: composite(u, w),
            advantage: 0.0,
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.format, self.length, self.accuracy, self.quality]
    }
}

pub fn reward_format(parsed: &std::result::Result<AttributeMap, ParseFailure>) -> f64 {
    if parsed.is_ok() {
        1.0
    } else {
        0.0
    }
}

/// One when the rationale has at most `lmax` tokens.
pub fn reward_length(tokens: usize, lmax: usize) -> f64 {
    if tokens <= lmax {
        1.0
    } else {
        0.0
    }
}

/// 1-based rank of `pool[pos]` by cosine similarity to `r`; ties favour the
/// positive.
pub fn rank_in_pool(r: &[f64], pool: &[Vec<f64>], pos: usize) -> Result<usize> {
    if pos >= pool.len() {
        return Err(Error::OutOfRange {
            what: "pool positive",
            index: pos,
            len: pool.len(),
        });
    }
    let target = cosine(r, &pool[pos]);
    Ok(1 + pool
        .iter()
        .enumerate()
        .filter(|&(j, c)| j != pos && cosine(r, c) > target)
        .count())
}

/// `1 − ln(rank)/ln(|pool|)`.
pub fn reward_accuracy(r: &[f64], pool: &[Vec<f64>], pos: usize) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "item pool needs at least 2 entries, got {}",
            pool.len()
        )));
    }
    let rank = rank_in_pool(r, pool, pos)?;
    Ok(accuracy_from_rank(rank, pool.len()))
}

pub fn accuracy_from_rank(rank: usize, pool: usize) -> f64 {
    1.0 - (rank as f64).ln() / (pool as f64).ln()
}

/// Scorer output plus a capped bonus for pairs beyond the label's count.
pub fn quality_value(s: f64, n_generated: usize, n_label: usize, alpha_q: f64, tau_q: f64) -> f64 {
    let extra = n_generated.saturating_sub(n_label) as f64;
    s + alpha_q * extra.min(tau_q)
}

/// Quality reward of a parsed rationale; zero when parsing failed.
pub fn reward_quality(
    parsed: Option<&AttributeMap>,
    label: &AttributeMap,
    scorer: &dyn QualityScorer,
    w: &RewardWeights,
) -> Result<f64> {
    let Some(g) = parsed else { return Ok(0.0) };
    let s = scorer.score(label, g)?.clamp(0.0, 1.0);
    Ok(quality_value(
        s,
        g.pair_count(),
        label.pair_count(),
        w.alpha_q,
        w.tau_q,
    ))
}

pub fn composite(u: [f64; 4], w: &RewardWeights) -> f64 {
    w.w[0] * u[0] + w.w[1] * u[1] + w.w[2] * u[2] + w.w[3] * u[3]
}

/// `(u − mean)/(std + ε)` with the population standard deviation.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    // the rounded mean of a constant group can differ from its members
    if rewards.iter().all(|&u| u == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|u| (u - mu) * (u - mu)).sum::<f64>() / n;
    let sd = var.sqrt() + STD_EPS;
    Ok(rewards.iter().map(|u| (u - mu) / sd).collect())
}

/// Clipped surrogate with one probability ratio per trajectory.
///
/// `token_lp` holds the current policy's log-probabilities of every sampled
/// token, trajectories stacked in order (`Σ lens × 1`); `old` holds the
/// log-probabilities recorded while sampling.
pub fn grpo_loss(
    tape: &mut Tape,
    token_lp: Var,
    old: &[Vec<f64>],
    adv: &[f64],
    clip: f64,
) -> Result<Var> {
    let g = old.len();
    if g == 0 || adv.len() != g {
        return Err(Error::InvalidArgument(format!(
            "{g} trajectories but {} advantages",
            adv.len()
        )));
    }
    let total: usize = old.iter().map(Vec::len).sum();
    let rows = tape.value(token_lp).rows();
    if rows != total || tape.value(token_lp).cols() != 1 {
        return Err(Error::InvalidArgument(format!(
            "re-scored {rows} tokens but {total} were sampled"
        )));
    }
    let mut sel = Tensor::zeros(&[g, total]);
    let mut row = 0;
    for (i, o) in old.iter().enumerate() {
        for _ in 0..o.len() {
            sel.row_slice_mut(i)[row] = 1.0;
            row += 1;
        }
    }
    let sel = tape.constant(sel);
    let new_sum = tape.matmul(sel, token_lp)?;
    let old_sum = Tensor::new(vec![g, 1], old.iter().map(|o| o.iter().sum()).collect())?;
    let old_sum = tape.constant(old_sum);
    let diff = tape.sub(new_sum, old_sum)?;
    let rho = tape.exp(diff);
    let a = tape.constant(Tensor::new(vec![g, 1], adv.to_vec())?);
    let plain = tape.mul(rho, a)?;
    let clipped = tape.clamp(rho, 1.0 - clip, 1.0 + clip);
    let clipped = tape.mul(clipped, a)?;
    let surrogate = tape.minimum(plain, clipped)?;
    let m = tape.mean(surrogate);
    Ok(tape.scale(m, -1.0))
}

/// Judges how well a generated rationale describes a product.
pub trait QualityScorer {
    /// A score in `[0, 1]`; callers clamp out-of-range values.
    fn score(&self, label: &AttributeMap, generated: &AttributeMap) -> Result<f64>;
}

/// F1 between generated and label `(key, value)` pairs.
#[derive(Clone, Copy, Debug, Default)]
pub struct F1Scorer;

impl QualityScorer for F1Scorer {
    fn score(&self, label: &AttributeMap, generated: &AttributeMap) -> Result<f64> {
        Ok(pair_f1(label, generated))
    }
}

pub fn pair_f1(label: &AttributeMap, generated: &AttributeMap) -> f64 {
    let l: BTreeSet<(&str, &str)> = label.kv_pairs().collect();
    let g: BTreeSet<(&str, &str)> = generated.kv_pairs().collect();
    let hit = l.intersection(&g).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / g.len() as f64;
    let r = hit / l.len() as f64;
    2.0 * p * r / (p + r)
}

/// Runs an executable per call. It receives the label and the generated
/// rationale as two `Key:v,v;Key:v` lines on stdin and must print one number.
#[derive(Clone, Debug)]
pub struct ExternalScorer {
    pub program: PathBuf,
}

impl QualityScorer for ExternalScorer {
    fn score(&self, label: &AttributeMap, generated: &AttributeMap) -> Result<f64> {
        let fail = |m: String| Error::Scorer(format!("{}: {m}", self.program.display()));
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(format!("{}\n{}\n", label.to_text(), generated.to_text()).as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| fail(format!("expected a number, got `{}`", text.trim())))?;
        if !v.is_finite() {
            return Err(fail(format!("non-finite score {v}")));
        }
        Ok(v.clamp(0.0, 1.0))
    }
}
