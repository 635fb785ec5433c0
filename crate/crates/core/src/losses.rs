//! Supervised objectives: rationale next-token prediction and
//! modality-specific contrastive alignment.

use crate::attr::{serialize, Dataset, Selector, Triplet};
use crate::error::{Error, Result};
use crate::model::vocab::EMB;
use crate::model::{Forward, Model, SeqInput, TokenId};
use crate::numeric::{Tape, Tensor, Var};

/// Additive mask for excluded contrastive candidates. Large enough that
/// `exp` underflows to exactly zero.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftWeights {
    pub w_img: f64,
    pub w_txt: f64,
    pub w_mm: f64,
    pub w_ntp: f64,
    pub temperature: f64,
}

impl Default for SftWeights {
    fn default() -> Self {
        Self {
            w_img: 1.0,
            w_txt: 0.3,
            w_mm: 0.1,
            w_ntp: 0.01,
            temperature: 0.07,
        }
    }
}

/// One model input together with the rationale it should produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Option<Tensor>,
    pub title: Option<Vec<TokenId>>,
    /// Teacher-forced tail ending in `<|emb|>`.
    pub target: Vec<TokenId>,
}

impl Sample {
    pub fn input(&self) -> SeqInput<'_> {
        SeqInput {
            patches: self.patches.as_ref(),
            title: self.title.as_deref(),
            tail: &self.target,
        }
    }
}

/// Query in three modalities, multimodal positive and hard negative.
#[derive(Clone, Debug, PartialEq)]
pub struct SftInstance {
    pub samples: [Sample; 5],
}

pub const Q_IMG: usize = 0;
pub const Q_TXT: usize = 1;
pub const Q_MM: usize = 2;
pub const POS: usize = 3;
pub const NEG: usize = 4;

/// Tail for a product view: its rationale when reasoning, else `<|emb|>`.
pub fn target_tokens(
    ds: &Dataset,
    attrs: &crate::attr::AttributeMap,
    reasoning: bool,
) -> Result<Vec<TokenId>> {
    if reasoning {
        serialize(attrs, &ds.vocab)
    } else {
        Ok(vec![EMB])
    }
}

impl SftInstance {
    pub fn from_triplet(ds: &Dataset, t: &Triplet, reasoning: bool) -> Result<Self> {
        let q = &t.query;
        let (p, n) = (ds.product(t.positive), ds.product(t.negative));
        let view =
            |patches: Option<&Tensor>, title: Option<&Vec<TokenId>>, attrs| -> Result<Sample> {
                Ok(Sample {
                    patches: patches.cloned(),
                    title: title.cloned(),
                    target: target_tokens(ds, attrs, reasoning)?,
                })
            };
        Ok(Self {
            samples: [
                view(Some(&q.patches), None, q.attrs(Selector::Image))?,
                view(None, Some(&q.title), q.attrs(Selector::Text))?,
                view(Some(&q.patches), Some(&q.title), &q.attrs_mm)?,
                view(Some(&p.patches), Some(&p.title), &p.attrs_mm)?,
                view(Some(&n.patches), Some(&n.title), &n.attrs_mm)?,
            ],
        })
    }
}

/// Contrastive loss of one normalized query against its positive and
/// negatives, with dot-product similarity.
pub fn infonce(r_q: &[f64], r_p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(r_q, r_p) / tau;
    let logits: Vec<f64> = negs.iter().map(|n| dot(r_q, n) / tau).collect();
    let m = logits.iter().copied().fold(pos, f64::max);
    let z = (pos - m).exp() + logits.iter().map(|l| (l - m).exp()).sum::<f64>();
    -(pos - m - z.ln())
}

/// Mean contrastive loss of each query row of `q` against candidate rows of
/// `cands`: row `i` scores `pos[i]` against `negs[i]`.
pub fn infonce_batch(
    tape: &mut Tape,
    q: Var,
    cands: Var,
    pos: &[usize],
    negs: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let (nq, nc) = (tape.value(q).rows(), tape.value(cands).rows());
    if pos.len() != nq || negs.len() != nq {
        return Err(Error::InvalidArgument(format!(
            "{nq} queries but {} positives and {} negative lists",
            pos.len(),
            negs.len()
        )));
    }
    let mut mask = Tensor::full(&[nq, nc], MASKED);
    for (i, (&p, ns)) in pos.iter().zip(negs).enumerate() {
        for &j in std::iter::once(&p).chain(ns) {
            if j >= nc {
                return Err(Error::OutOfRange {
                    what: "contrastive candidate",
                    index: j,
                    len: nc,
                });
            }
            let slot = &mut mask.row_slice_mut(i)[j];
            if *slot == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "candidate {j} listed twice for query {i}"
                )));
            }
            *slot = 0.0;
        }
    }
    let sims = tape.matmul_t(q, cands)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let mask = tape.constant(mask);
    let logits = tape.add(sims, mask)?;
    let lp = tape.log_softmax_pick(logits, pos.to_vec())?;
    let m = tape.mean(lp);
    Ok(tape.scale(m, -1.0))
}

/// Sum of rationale token negative log-likelihoods divided by the number of
/// instances.
pub fn ntp_loss(
    tape: &mut Tape,
    model: &Model,
    fwd: &Forward,
    seqs: &[SeqInput],
    instances: usize,
) -> Result<Var> {
    if instances == 0 {
        return Err(Error::InvalidArgument("no instances".into()));
    }
    if let Some(i) = seqs.iter().position(|s| s.tail.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "input {i} has no target rationale"
        )));
    }
    let (rows, targets) = Model::tail_targets(fwd, seqs);
    let logits = model.logits(tape, fwd.hidden, rows)?;
    let lp = tape.log_softmax_pick(logits, targets)?;
    let s = tape.sum(lp);
    Ok(tape.scale(s, -1.0 / instances as f64))
}

/// Weighted objective and its components.
#[derive(Clone, Copy, Debug)]
pub struct SftLoss {
    pub total: Var,
    pub img: f64,
    pub txt: f64,
    pub mm: f64,
    pub ntp: f64,
}

/// Query rows of modality `role` and candidate layout `[positives; negatives]`
/// for a batch embedded instance-major with five rows per instance.
pub(crate) fn contrastive_term(
    tape: &mut Tape,
    r: Var,
    role: usize,
    b: usize,
    cands: Var,
    tau: f64,
) -> Result<Var> {
    let q = tape.gather_rows(r, (0..b).map(|i| 5 * i + role).collect())?;
    let pos: Vec<usize> = (0..b).collect();
    let negs: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&j| j != i)
                .chain(std::iter::once(b + i))
                .collect()
        })
        .collect();
    infonce_batch(tape, q, cands, &pos, &negs, tau)
}

pub fn sft_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[SftInstance],
    w: &SftWeights,
) -> Result<SftLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = batch.len();
    let seqs: Vec<SeqInput> = batch
        .iter()
        .flat_map(|inst| inst.samples.iter().map(Sample::input))
        .collect();
    let fwd = model.forward(tape, &seqs)?;
    let ntp = ntp_loss(tape, model, &fwd, &seqs, b)?;
    let r = model.embed(tape, &fwd)?.r;
    let cand_rows = (0..b)
        .map(|i| 5 * i + POS)
        .chain((0..b).map(|i| 5 * i + NEG))
        .collect();
    let cands = tape.gather_rows(r, cand_rows)?;
    let l_img = contrastive_term(tape, r, Q_IMG, b, cands, w.temperature)?;
    let l_txt = contrastive_term(tape, r, Q_TXT, b, cands, w.temperature)?;
    let l_mm = contrastive_term(tape, r, Q_MM, b, cands, w.temperature)?;
    let parts = [
        (l_img, w.w_img),
        (l_txt, w.w_txt),
        (l_mm, w.w_mm),
        (ntp, w.w_ntp),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, k) in &parts[1..] {
        let t = tape.scale(v, k);
        total = tape.add(total, t)?;
    }
    Ok(SftLoss {
        total,
        img: tape.scalar(l_img),
        txt: tape.scalar(l_txt),
        mm: tape.scalar(l_mm),
        ntp: tape.scalar(ntp),
    })
}
