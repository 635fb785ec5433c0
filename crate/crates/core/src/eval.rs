//! Retrieval and embedding-based classification metrics, and the report
//! produced for a trained model on a dataset's test split.

use crate::attr::{Dataset, ProductRecord, Selector, Split};
use crate::error::{Error, Result};
use crate::model::vocab::{EMB, EOS};
use crate::model::{Decoding, Model, SeqInput, TokenId};
use crate::numeric::{cosine, Rng, Tape};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Embeds a batch of inputs, one row per input.
type EmbedFn<'a> = dyn FnMut(&[SeqInput]) -> Result<Vec<Vec<f64>>> + 'a;

/// 1-based rank of `cands[gold]` by cosine similarity to `q`; equal
/// similarities rank the lower index first.
pub fn gold_rank(q: &[f64], cands: &[&[f64]], gold: usize) -> usize {
    let g = cosine(q, cands[gold]);
    1 + cands
        .iter()
        .enumerate()
        .filter(|&(j, c)| {
            let s = cosine(q, c);
            s > g || (s == g && j < gold)
        })
        .count()
}

/// Fraction of queries whose gold candidate is among the `k` most similar,
/// for each `k` in `ks`.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    cands: &[Vec<f64>],
    gold: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    check_ks(ks, cands.len())?;
    if gold.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries but {} gold indices",
            queries.len(),
            gold.len()
        )));
    }
    let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
    let mut ranks = Vec::with_capacity(queries.len());
    for (q, &g) in queries.iter().zip(gold) {
        if g >= cands.len() {
            return Err(Error::OutOfRange {
                what: "gold candidate",
                index: g,
                len: cands.len(),
            });
        }
        ranks.push(gold_rank(q, &refs, g));
    }
    Ok(recall_from_ranks(&ranks, ks))
}

fn check_ks(ks: &[usize], n: usize) -> Result<()> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!("k={k} with {n} candidates")));
    }
    Ok(())
}

fn recall_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect()
}

/// Index of the most similar label for each item; ties go to the lower index.
pub fn nearest_labels(items: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<Vec<usize>> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 labels, got {}",
            labels.len()
        )));
    }
    Ok(items
        .iter()
        .map(|x| {
            let mut best = 0;
            let mut bs = cosine(x, &labels[0]);
            for (j, l) in labels.iter().enumerate().skip(1) {
                let s = cosine(x, l);
                if s > bs {
                    best = j;
                    bs = s;
                }
            }
            best
        })
        .collect())
}

/// Accuracy and macro-averaged precision, recall and F1. Classes without
/// predictions (or without gold items) score 0 for the undefined ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn class_metrics(pred: &[usize], gold: &[usize], n_labels: usize) -> Result<ClassMetrics> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= n_labels) {
        return Err(Error::OutOfRange {
            what: "class label",
            index: bad,
            len: n_labels,
        });
    }
    let mut tp = vec![0usize; n_labels];
    let mut n_pred = vec![0usize; n_labels];
    let mut n_gold = vec![0usize; n_labels];
    for (&p, &g) in pred.iter().zip(gold) {
        n_pred[p] += 1;
        n_gold[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..n_labels {
        let p = ratio(tp[c], n_pred[c]);
        let r = ratio(tp[c], n_gold[c]);
        ps += p;
        rs += r;
        fs += if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
    }
    let n = n_labels as f64;
    Ok(ClassMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / pred.len() as f64,
        precision: ps / n,
        recall: rs / n,
        f1: fs / n,
    })
}

/// Nearest-label predictions and their metrics.
pub fn classify(
    items: &[Vec<f64>],
    labels: &[Vec<f64>],
    gold: &[usize],
) -> Result<(Vec<usize>, ClassMetrics)> {
    let pred = nearest_labels(items, labels)?;
    let m = class_metrics(&pred, gold, labels.len())?;
    Ok((pred, m))
}

/// Embeddings and the rationales decoded on the way to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub rows: Vec<Vec<f64>>,
    /// Generated tokens per input, before any forced `<|emb|>`.
    pub rationales: Vec<Vec<TokenId>>,
}

/// Inputs embedded per chunk; bounds peak memory of a forward pass.
const CHUNK: usize = 32;

/// Greedily decodes a rationale for every input (unless `reasoning` is off)
/// and embeds the state at `<|emb|>`, which is appended when decoding ends
/// without it.
pub fn embed_corpus(model: &Model, inputs: &[SeqInput], reasoning: bool) -> Result<Embedded> {
    let mut out = Embedded {
        rows: Vec::with_capacity(inputs.len()),
        rationales: Vec::with_capacity(inputs.len()),
    };
    for chunk in inputs.chunks(CHUNK) {
        if let Some(s) = chunk.iter().find(|s| !s.tail.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "embedding inputs must not carry a tail, got {} tokens",
                s.tail.len()
            )));
        }
        let gens: Vec<Vec<TokenId>> = if reasoning {
            model
                .generate(chunk, Decoding::Greedy, model.cfg.max_len, &mut [])?
                .into_iter()
                .map(|g| g.tokens)
                .collect()
        } else {
            vec![Vec::new(); chunk.len()]
        };
        let tails: Vec<Vec<TokenId>> = gens.iter().map(|g| with_emb(g)).collect();
        let seqs: Vec<SeqInput> = chunk
            .iter()
            .zip(&tails)
            .map(|(s, t)| SeqInput { tail: t, ..*s })
            .collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &seqs)?;
        let r = model.embed(&mut tape, &fwd)?.r;
        let r = tape.value(r);
        out.rows
            .extend((0..r.rows()).map(|i| r.row_slice(i).to_vec()));
        out.rationales.extend(gens);
    }
    Ok(out)
}

/// Tail ending in `<|emb|>`: generation up to its first stop token, then the
/// representation token.
pub fn with_emb(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut t = tokens.to_vec();
    if t.last() == Some(&EOS) {
        t.pop();
    }
    if t.last() != Some(&EMB) {
        t.push(EMB);
    }
    t
}

/// Model input for a product view.
pub fn view_input(rec: &ProductRecord, sel: Selector) -> SeqInput<'_> {
    SeqInput {
        patches: sel.has_image().then_some(&rec.patches),
        title: sel.has_text().then_some(rec.title.as_slice()),
        tail: &[],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tasks {
    pub retrieval: bool,
    pub classify: bool,
    pub attr: bool,
}

impl Tasks {
    pub const ALL: Tasks = Tasks {
        retrieval: true,
        classify: true,
        attr: true,
    };

    /// Parses a comma-separated subset of `retrieval,classify,attr`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Tasks {
            retrieval: false,
            classify: false,
            attr: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "retrieval" => t.retrieval = true,
                "classify" => t.classify = true,
                "attr" => t.attr = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown eval task `{other}`"
                    )))
                }
            }
        }
        if !(t.retrieval || t.classify || t.attr) {
            return Err(Error::InvalidArgument("no eval tasks selected".into()));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub tasks: Tasks,
    /// Largest candidate pool per retrieval query.
    pub pool: usize,
    pub reasoning: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tasks: Tasks::ALL,
            pool: 64,
            reasoning: true,
            seed: 7,
        }
    }
}

pub const KS: [usize; 3] = [1, 5, 10];

/// Query modality and candidate modality of each retrieval direction.
pub const DIRECTIONS: [(&str, Selector, Selector); 5] = [
    ("i->mm", Selector::Image, Selector::Multimodal),
    ("t->mm", Selector::Text, Selector::Multimodal),
    ("mm->mm", Selector::Multimodal, Selector::Multimodal),
    ("i->t", Selector::Image, Selector::Text),
    ("t->i", Selector::Text, Selector::Image),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionResult {
    pub name: &'static str,
    pub recall: [f64; 3],
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub retrieval: Vec<DirectionResult>,
    pub pool: usize,
    pub classify: Option<(ClassMetrics, usize)>,
    /// Per non-category key, then the average over keys.
    pub attrs: Option<(Vec<(String, ClassMetrics)>, ClassMetrics)>,
    /// Share of decoded rationales that parse, over every embedded input.
    pub format_rate: f64,
}

impl EvalReport {
    pub fn direction(&self, name: &str) -> Option<&DirectionResult> {
        self.retrieval.iter().find(|d| d.name == name)
    }

    /// Fixed-order `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        if !self.retrieval.is_empty() {
            push_line(&mut s, "retrieval.pool", self.pool);
        }
        for d in &self.retrieval {
            push_line(&mut s, &format!("retrieval.{}.queries", d.name), d.queries);
            for (k, r) in KS.iter().zip(d.recall) {
                push_line(
                    &mut s,
                    &format!("retrieval.{}.R@{k}", d.name),
                    format!("{r:.6}"),
                );
            }
        }
        if let Some((m, n)) = &self.classify {
            push_line(&mut s, "classify.items", n);
            push_metrics(&mut s, "classify", m);
        }
        if let Some((keys, avg)) = &self.attrs {
            for (k, m) in keys {
                push_metrics(&mut s, &format!("attr.{k}"), m);
            }
            push_metrics(&mut s, "attr.mean", avg);
        }
        push_line(
            &mut s,
            "rationale.format_rate",
            format!("{:.6}", self.format_rate),
        );
        s
    }
}

fn push_line(s: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(s, "{key}={value}").expect("string write");
}

fn push_metrics(s: &mut String, prefix: &str, m: &ClassMetrics) {
    for (k, v) in [
        ("acc", m.accuracy),
        ("prec", m.precision),
        ("rec", m.recall),
        ("f1", m.f1),
    ] {
        push_line(s, &format!("{prefix}.{k}"), format!("{v:.6}"));
    }
}

/// Every product appearing in a test triplet, ascending by id.
fn test_candidates(ds: &Dataset) -> Vec<usize> {
    let set: BTreeSet<usize> = ds
        .triplets_in(Split::Test)
        .flat_map(|t| [t.positive, t.negative])
        .collect();
    set.into_iter().collect()
}

/// Candidate pool of one test query: positive, hard negative and a seeded
/// sample of other test candidates, in ascending id order.
fn query_pool(
    all: &[usize],
    positive: usize,
    negative: usize,
    cap: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut others: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&p| p != positive && p != negative)
        .collect();
    rng.shuffle(&mut others);
    let mut pool = vec![positive, negative];
    pool.extend(others.into_iter().take(cap.saturating_sub(2)));
    pool.sort_unstable();
    pool
}

pub fn evaluate(model: &Model, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.pool < 2 {
        return Err(Error::InvalidArgument(format!(
            "pool must hold at least 2 candidates, got {}",
            opts.pool
        )));
    }
    let mut parsed = 0usize;
    let mut decoded = 0usize;
    let mut embed = |inputs: &[SeqInput]| -> Result<Vec<Vec<f64>>> {
        let e = embed_corpus(model, inputs, opts.reasoning)?;
        if opts.reasoning {
            decoded += e.rationales.len();
            parsed += e
                .rationales
                .iter()
                .filter(|r| crate::attr::parse(&with_emb(r), &ds.vocab).is_ok())
                .count();
        }
        Ok(e.rows)
    };

    let mut report = EvalReport {
        retrieval: Vec::new(),
        pool: 0,
        classify: None,
        attrs: None,
        format_rate: 0.0,
    };

    let test_products: Vec<&ProductRecord> = ds
        .products
        .iter()
        .filter(|p| p.split == Split::Test)
        .collect();
    let product_mm = if opts.tasks.classify || opts.tasks.attr {
        let inputs: Vec<SeqInput> = test_products
            .iter()
            .map(|p| view_input(p, Selector::Multimodal))
            .collect();
        embed(&inputs)?
    } else {
        Vec::new()
    };

    if opts.tasks.retrieval {
        let triplets: Vec<_> = ds.triplets_in(Split::Test).collect();
        if triplets.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset has no test triplets".into(),
            ));
        }
        let cands = test_candidates(ds);
        let slot: std::collections::HashMap<usize, usize> =
            cands.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let pools: Vec<Vec<usize>> = triplets
            .iter()
            .map(|t| {
                let mut rng = Rng::derive_step(opts.seed, "eval.pool", t.idx as u64);
                query_pool(&cands, t.positive, t.negative, opts.pool, &mut rng)
            })
            .collect();
        report.pool = pools.iter().map(Vec::len).max().unwrap_or(0);
        let mut query_emb = std::collections::HashMap::new();
        let mut cand_emb = std::collections::HashMap::new();
        for sel in Selector::ALL {
            let q: Vec<SeqInput> = triplets.iter().map(|t| view_input(&t.query, sel)).collect();
            query_emb.insert(sel, embed(&q)?);
            let c: Vec<SeqInput> = cands
                .iter()
                .map(|&p| view_input(ds.product(p), sel))
                .collect();
            cand_emb.insert(sel, embed(&c)?);
        }
        for (name, qs, cs) in DIRECTIONS {
            let (qe, ce) = (&query_emb[&qs], &cand_emb[&cs]);
            let mut ranks = Vec::with_capacity(triplets.len());
            for ((t, pool), q) in triplets.iter().zip(&pools).zip(qe) {
                let rows: Vec<&[f64]> = pool.iter().map(|p| ce[slot[p]].as_slice()).collect();
                let gold = pool
                    .iter()
                    .position(|&p| p == t.positive)
                    .expect("positive in pool");
                ranks.push(gold_rank(q, &rows, gold));
            }
            check_ks(&KS, report.pool)?;
            let r = recall_from_ranks(&ranks, &KS);
            report.retrieval.push(DirectionResult {
                name,
                recall: [r[0], r[1], r[2]],
                queries: triplets.len(),
            });
        }
    }

    let label_embeddings = |key: usize, embed: &mut EmbedFn| {
        let ids: Vec<Vec<TokenId>> = ds
            .schema
            .key(key)
            .values
            .iter()
            .map(|v| ds.vocab.id(v).map(|t| vec![t]))
            .collect::<Result<_>>()?;
        let inputs: Vec<SeqInput> = ids
            .iter()
            .map(|t| SeqInput {
                patches: None,
                title: Some(t),
                tail: &[],
            })
            .collect();
        embed(&inputs)
    };
    if (opts.tasks.classify || opts.tasks.attr) && test_products.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no test products".into(),
        ));
    }
    if opts.tasks.classify {
        let labels = label_embeddings(0, &mut embed)?;
        let m = predict_attribute(
            &product_mm,
            &test_products,
            ds,
            &ds.schema.key(0).name,
            &labels,
        )?;
        report.classify = Some((m, test_products.len()));
    }
    if opts.tasks.attr {
        let mut per_key = Vec::new();
        for key in 1..ds.schema.num_keys() {
            let name = &ds.schema.key(key).name;
            let labels = label_embeddings(key, &mut embed)?;
            if labels.len() < 2 {
                continue;
            }
            per_key.push((
                name.clone(),
                predict_attribute(&product_mm, &test_products, ds, name, &labels)?,
            ));
        }
        if !per_key.is_empty() {
            let n = per_key.len() as f64;
            let mean =
                |f: fn(&ClassMetrics) -> f64| per_key.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
            let avg = ClassMetrics {
                accuracy: mean(|m| m.accuracy),
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
            };
            report.attrs = Some((per_key, avg));
        }
    }
    report.format_rate = if decoded == 0 {
        0.0
    } else {
        parsed as f64 / decoded as f64
    };
    Ok(report)
}

/// Nearest-value prediction of one attribute key for the given products.
pub fn predict_attribute(
    items: &[Vec<f64>],
    products: &[&ProductRecord],
    ds: &Dataset,
    key: &str,
    value_embeddings: &[Vec<f64>],
) -> Result<ClassMetrics> {
    let k = ds
        .schema
        .key_index(key)
        .ok_or_else(|| Error::InvalidArgument(format!("key `{key}` is not in the schema")))?;
    let values = &ds.schema.key(k).values;
    if value_embeddings.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} value embeddings for {} values of `{key}`",
            value_embeddings.len(),
            values.len()
        )));
    }
    let gold: Vec<usize> = products
        .iter()
        .map(|p| {
            let v = p
                .attrs_mm
                .get(key)
                .and_then(|vs| vs.first())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("product {} has no `{key}`", p.id))
                })?;
            Ok(values.iter().position(|x| x == v).expect("schema value"))
        })
        .collect::<Result<_>>()?;
    Ok(classify(items, value_embeddings, &gold)?.1)
}

#[cfg(test)]
mod tests;
