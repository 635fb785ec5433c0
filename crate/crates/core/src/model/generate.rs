//! Autoregressive decoding with cached keys and values.

use super::forward::{LayerCache, SeqInput};
use super::vocab::{TokenId, EMB, EOS};
use super::Model;
use crate::error::{Error, Result};
use crate::numeric::tape::log_softmax_row;
use crate::numeric::{Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Samples from `softmax(logits / temperature)`.
    Sample {
        temperature: f64,
    },
}

/// Tokens produced after a prompt. `logprobs[j]` is the log-probability of
/// `tokens[j]` under the decoding distribution (temperature-scaled when
/// sampling, plain softmax when greedy).
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    /// False when decoding stopped at the length limit.
    pub finished: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut c = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            c += p;
            if u < c {
                return i;
            }
        }
    }
    last
}

/// Picks a token from a logit row and returns it with its log-probability.
fn choose(row: &[f64], decoding: Decoding, rng: Option<&mut Rng>) -> (usize, f64) {
    match decoding {
        Decoding::Greedy => {
            let t = argmax(row);
            let (lse, _) = log_softmax_row(row);
            (t, row[t] - lse)
        }
        Decoding::Sample { temperature } => {
            let k = 1.0 / temperature;
            let scaled: Vec<f64> = row.iter().map(|v| v * k).collect();
            let (lse, probs) = log_softmax_row(&scaled);
            let t = draw(&probs, rng.expect("sampling needs an rng"));
            (t, scaled[t] - lse)
        }
    }
}

fn compact(
    caches: &[LayerCache],
    spans: &[(usize, usize)],
    keep: &[usize],
) -> (Vec<LayerCache>, Vec<(usize, usize)>) {
    let mut new_spans = Vec::with_capacity(keep.len());
    let mut row = 0;
    for &s in keep {
        new_spans.push((row, spans[s].1));
        row += spans[s].1;
    }
    let pick = |t: &Tensor| {
        let c = t.cols();
        let mut data = Vec::with_capacity(row * c);
        for &s in keep {
            let (st, len) = spans[s];
            data.extend_from_slice(&t.data()[st * c..(st + len) * c]);
        }
        Tensor::new(vec![row, c], data).expect("rows")
    };
    let caches = caches
        .iter()
        .map(|lc| LayerCache {
            k: pick(&lc.k),
            v: pick(&lc.v),
        })
        .collect();
    (caches, new_spans)
}

impl Model {
    /// Extends every prompt until it emits `<|emb|>` or `<eos>`, or until
    /// `max_new` tokens (bounded so that one forced `<|emb|>` still fits
    /// the context). `rngs` holds one stream per prompt when sampling.
    pub fn generate(
        &self,
        prompts: &[SeqInput],
        decoding: Decoding,
        max_new: usize,
        rngs: &mut [Rng],
    ) -> Result<Vec<Generation>> {
        if let Decoding::Sample { temperature } = decoding {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be > 0, got {temperature}"
                )));
            }
            if rngs.len() != prompts.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} rng streams for {} prompts",
                    rngs.len(),
                    prompts.len()
                )));
            }
        }
        let mut out: Vec<Generation> = prompts
            .iter()
            .map(|_| Generation {
                tokens: Vec::new(),
                logprobs: Vec::new(),
                finished: false,
            })
            .collect();
        if prompts.is_empty() {
            return Ok(out);
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, prompts)?;
        let budget: Vec<usize> = fwd
            .layout
            .iter()
            .map(|l| {
                if l.len + 1 > self.cfg.max_len {
                    Err(Error::ContextOverflow {
                        len: l.len + 1,
                        max: self.cfg.max_len,
                    })
                } else {
                    Ok(max_new.min(self.cfg.max_len - 1 - l.len))
                }
            })
            .collect::<Result<_>>()?;
        let lasts = fwd.layout.iter().map(|l| l.last()).collect();
        let logits = self.logits(&mut tape, fwd.hidden, lasts)?;
        let mut logits = tape.value(logits).clone();
        let mut caches: Vec<LayerCache> = fwd
            .keys
            .iter()
            .zip(&fwd.values)
            .map(|(&k, &v)| LayerCache {
                k: tape.value(k).clone(),
                v: tape.value(v).clone(),
            })
            .collect();
        let mut spans: Vec<(usize, usize)> = fwd.layout.iter().map(|l| (l.start, l.len)).collect();
        drop(tape);

        // slot s of the batch decodes prompt active[s]
        let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| budget[i] > 0).collect();
        if active.len() != prompts.len() {
            (caches, spans) = compact(&caches, &spans, &active);
            logits = gather(&logits, &active);
        }
        while !active.is_empty() {
            let mut next = Vec::with_capacity(active.len());
            for (slot, &i) in active.iter().enumerate() {
                let rng = match decoding {
                    Decoding::Sample { .. } => Some(&mut rngs[i]),
                    Decoding::Greedy => None,
                };
                let (t, lp) = choose(logits.row_slice(slot), decoding, rng);
                let g = &mut out[i];
                g.tokens.push(t as TokenId);
                g.logprobs.push(lp);
                if t as TokenId == EMB || t as TokenId == EOS {
                    g.finished = true;
                }
                next.push(t as TokenId);
            }
            let keep: Vec<usize> = (0..active.len())
                .filter(|&s| {
                    !out[active[s]].finished && out[active[s]].tokens.len() < budget[active[s]]
                })
                .collect();
            if keep.is_empty() {
                break;
            }
            if keep.len() != active.len() {
                (caches, spans) = compact(&caches, &spans, &keep);
            }
            let tokens: Vec<TokenId> = keep.iter().map(|&s| next[s]).collect();
            let positions: Vec<usize> = spans.iter().map(|&(_, len)| len).collect();
            active = keep.iter().map(|&s| active[s]).collect();
            let mut tape = Tape::new();
            let (hidden, new_caches) =
                self.step_cached(&mut tape, &tokens, &positions, &caches, &spans)?;
            let w = tape.param(&self.params, self.decoder.head);
            let lg = tape.matmul(hidden, w)?;
            logits = tape.value(lg).clone();
            caches = new_caches;
            let mut row = 0;
            for sp in spans.iter_mut() {
                *sp = (row, sp.1 + 1);
                row += sp.1;
            }
        }
        Ok(out)
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::new(vec![rows.len(), c], data).expect("rows")
}
