//! Optimization loops for the supervised stage and the joint
//! contrastive-plus-policy stage.
//!
//! Every step draws its batch and samples from streams keyed by the step
//! index, so a run resumed from a checkpoint (parameters plus optimizer
//! state) continues exactly as an uninterrupted one.

use crate::attr::{parse, Dataset, Split, Triplet};
use crate::error::{Error, Result};
use crate::eval::{view_input, with_emb};
use crate::losses::{infonce_batch, sft_loss, target_tokens, SftInstance, SftWeights};
use crate::model::{Decoding, Model, ModelConfig, SeqInput, TokenId};
use crate::numeric::{checkpoint, Adam, Rng, Tape, Tensor, Var};
use crate::rl::{
    advantages, grpo_loss, reward_accuracy, reward_format, reward_length, reward_quality,
    QualityScorer, RewardBreakdown, RewardWeights,
};
use std::path::{Path, PathBuf};

/// Path of the optimizer state stored next to a checkpoint.
pub fn opt_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

/// Writes parameters to `ckpt` and optimizer state to `<ckpt>.opt`.
pub fn save_state(model: &Model, opt: &Adam, ckpt: &Path) -> Result<()> {
    model.save(ckpt)?;
    checkpoint::save(&opt_path(ckpt), &opt.state(&model.params))
}

/// Loads a checkpoint and, when present, its optimizer state; otherwise the
/// optimizer starts fresh at step zero.
pub fn load_state(cfg: ModelConfig, ckpt: &Path, lr: f64) -> Result<(Model, Adam)> {
    let model = Model::load(cfg, ckpt)?;
    let op = opt_path(ckpt);
    let opt = if op.exists() {
        Adam::restore(&model.params, &checkpoint::load(&op)?, lr)?
    } else {
        Adam::new(&model.params, lr)
    };
    Ok((model, opt))
}

/// Learning rate at `step` of `total`: constant for the first 70%, then a
/// linear decay to a tenth of `base`.
pub fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    let knee = total as f64 * 0.7;
    let s = step as f64;
    if total == 0 || s <= knee {
        return base;
    }
    let frac = ((s - knee) / (total as f64 - knee)).min(1.0);
    base * (1.0 - 0.9 * frac)
}

/// `n` distinct indices below `len`, drawn from the stream for `step`.
fn draw_batch(seed: u64, label: &str, step: usize, len: usize, n: usize) -> Vec<usize> {
    let mut rng = Rng::derive_step(seed, label, step as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    let n = n.min(len);
    for i in 0..n {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub weights: SftWeights,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub reasoning: bool,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            weights: SftWeights::default(),
            batch_size: 8,
            lr: 2e-3,
            steps: 600,
            reasoning: true,
            seed: 7,
        }
    }
}

/// One supervised step's losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftRecord {
    pub step: usize,
    pub total: f64,
    pub img: f64,
    pub txt: f64,
    pub mm: f64,
    pub ntp: f64,
}

impl SftRecord {
    pub const HEADER: &'static str = "step\tL_total\tL_img\tL_txt\tL_mm\tL_ntp";

    pub fn line(&self) -> String {
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.step, self.total, self.img, self.txt, self.mm, self.ntp
        )
    }
}

fn train_triplets(ds: &Dataset) -> Result<Vec<&Triplet>> {
    let t: Vec<&Triplet> = ds.triplets_in(Split::Train).collect();
    if t.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no training triplets".into(),
        ));
    }
    Ok(t)
}

/// Runs supervised steps `opt.step .. cfg.steps`, calling `on_step` after
/// each update.
pub fn train_sft(
    model: &mut Model,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &SftConfig,
    on_step: &mut dyn FnMut(&SftRecord, &Model, &Adam) -> Result<()>,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("sft.batch_size must be positive".into()));
    }
    let triplets = train_triplets(ds)?;
    let instances: Vec<SftInstance> = triplets
        .iter()
        .map(|t| SftInstance::from_triplet(ds, t, cfg.reasoning))
        .collect::<Result<_>>()?;
    for step in opt.step as usize..cfg.steps {
        let pick = draw_batch(cfg.seed, "sft.batch", step, instances.len(), cfg.batch_size);
        let batch: Vec<SftInstance> = pick.iter().map(|&i| instances[i].clone()).collect();
        let mut tape = Tape::new();
        let l = sft_loss(&mut tape, model, &batch, &cfg.weights)?;
        let rec = SftRecord {
            step,
            total: tape.scalar(l.total),
            img: l.img,
            txt: l.txt,
            mm: l.mm,
            ntp: l.ntp,
        };
        if !rec.total.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss diverged at step {step}"
            )));
        }
        tape.backward(l.total, &mut model.params)?;
        drop(tape);
        opt.lr = lr_at(cfg.lr, step, cfg.steps);
        opt.step(&mut model.params);
        on_step(&rec, model, opt)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub weights: RewardWeights,
    /// Queries per step; their positives and negatives form the item pool.
    pub queries: usize,
    pub lr: f64,
    pub steps: usize,
    pub temperature: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub reasoning: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            queries: 4,
            lr: 2e-4,
            steps: 200,
            temperature: 1.0,
            tau: 0.07,
            reasoning: true,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlRecord {
    pub step: usize,
    pub total: f64,
    pub grpo: f64,
    pub infonce: f64,
    /// Means over the step's trajectories.
    pub composite: f64,
    pub format: f64,
    pub length: f64,
    pub accuracy: f64,
    pub quality: f64,
}

impl RlRecord {
    fn values(&self) -> [f64; 8] {
        [
            self.total,
            self.grpo,
            self.infonce,
            self.composite,
            self.format,
            self.length,
            self.accuracy,
            self.quality,
        ]
    }

    fn from_values(step: usize, v: [f64; 8]) -> Self {
        Self {
            step,
            total: v[0],
            grpo: v[1],
            infonce: v[2],
            composite: v[3],
            format: v[4],
            length: v[5],
            accuracy: v[6],
            quality: v[7],
        }
    }

    pub const HEADER: &'static str =
        "step\tL_total\tL_grpo\tL_infonce\tu_composite\tu_format\tu_length\tu_accuracy\tu_quality";

    pub fn line(&self) -> String {
        // adding zero turns a negative zero into a positive one
        let cols: Vec<String> = self
            .values()
            .iter()
            .map(|v| format!("{:.9}", v + 0.0))
            .collect();
        format!("{}\t{}", self.step, cols.join("\t"))
    }
}

/// A sampled rationale and what it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub embedding: Vec<f64>,
    pub reward: RewardBreakdown,
}

/// Result of one policy step.
#[derive(Clone, Debug)]
pub struct RlStep {
    pub record: RlRecord,
    pub trajectories: Vec<Trajectory>,
}

fn check_rl(cfg: &RlConfig) -> Result<()> {
    if cfg.weights.group < 2 {
        return Err(Error::Config("rl.G must be at least 2".into()));
    }
    if cfg.queries == 0 {
        return Err(Error::Config("rl.queries must be positive".into()));
    }
    Ok(())
}

/// Samples a group per query from `stream`, scores it and builds the joint
/// loss on `tape`.
fn rollout(
    tape: &mut Tape,
    model: &Model,
    ds: &Dataset,
    cfg: &RlConfig,
    scorer: &dyn QualityScorer,
    batch: &[&Triplet],
    stream: &str,
) -> Result<(Var, RlStep)> {
    let w = &cfg.weights;
    let b = batch.len();
    let g = w.group;

    let prompts: Vec<SeqInput> = batch
        .iter()
        .flat_map(|t| std::iter::repeat_n(view_input(&t.query, t.selector), g))
        .collect();
    let (tokens, old): (Vec<Vec<TokenId>>, Vec<Vec<f64>>) = if cfg.reasoning {
        let mut rngs: Vec<Rng> = (0..prompts.len())
            .map(|i| Rng::derive_step(cfg.seed, stream, i as u64))
            .collect();
        let gens = model.generate(
            &prompts,
            Decoding::Sample {
                temperature: cfg.temperature,
            },
            model.cfg.max_len,
            &mut rngs,
        )?;
        gens.into_iter().map(|x| (x.tokens, x.logprobs)).unzip()
    } else {
        (
            vec![Vec::new(); prompts.len()],
            vec![Vec::new(); prompts.len()],
        )
    };

    let tails: Vec<Vec<TokenId>> = tokens.iter().map(|t| with_emb(t)).collect();
    let item_tails: Vec<Vec<TokenId>> = batch
        .iter()
        .flat_map(|t| [t.positive, t.negative])
        .map(|id| target_tokens(ds, &ds.product(id).attrs_mm, cfg.reasoning))
        .collect::<Result<_>>()?;
    let mut seqs: Vec<SeqInput> = prompts
        .iter()
        .zip(&tails)
        .map(|(p, t)| SeqInput { tail: t, ..*p })
        .collect();
    for (k, t) in batch.iter().enumerate() {
        for (j, id) in [t.positive, t.negative].into_iter().enumerate() {
            let p = ds.product(id);
            seqs.push(SeqInput {
                patches: Some(&p.patches),
                title: Some(&p.title),
                tail: &item_tails[2 * k + j],
            });
        }
    }

    let fwd = model.forward(tape, &seqs)?;
    let r = model.embed(tape, &fwd)?.r;
    let n_traj = b * g;
    let traj_r = tape.gather_rows(r, (0..n_traj).collect())?;
    // candidates: positives first, then negatives
    let cand_rows = (0..b)
        .map(|k| n_traj + 2 * k)
        .chain((0..b).map(|k| n_traj + 2 * k + 1))
        .collect();
    let cands = tape.gather_rows(r, cand_rows)?;

    let r_val = tape.value(r).clone();
    let pool: Vec<Vec<f64>> = (0..2 * b)
        .map(|i| r_val.row_slice(n_traj + i).to_vec())
        .collect();
    let mut trajectories = Vec::with_capacity(n_traj);
    for (i, (toks, lp)) in tokens.iter().zip(&old).enumerate() {
        let q = batch[i / g];
        let label = q.query.attrs(q.selector);
        let parsed = parse(toks, &ds.vocab);
        let emb = r_val.row_slice(i).to_vec();
        let u = [
            reward_format(&parsed),
            reward_length(toks.len(), w.lmax),
            reward_accuracy(&emb, &pool, 2 * (i / g))?,
            reward_quality(parsed.as_ref().ok(), label, scorer, w)?,
        ];
        trajectories.push(Trajectory {
            tokens: toks.clone(),
            old_logprobs: lp.clone(),
            embedding: emb,
            reward: RewardBreakdown::new(u, w),
        });
    }
    let mut adv = Vec::with_capacity(n_traj);
    for group in trajectories.chunks(g) {
        let u: Vec<f64> = group.iter().map(|t| t.reward.composite).collect();
        adv.extend(advantages(&u)?);
    }
    for (t, a) in trajectories.iter_mut().zip(&adv) {
        t.reward.advantage = *a;
    }

    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for (l, toks) in fwd.layout.iter().zip(&tokens) {
        for (j, &t) in toks.iter().enumerate() {
            rows.push(l.tail_start + j - 1);
            targets.push(t as usize);
        }
    }
    let l_grpo = if rows.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let logits = model.logits(tape, fwd.hidden, rows)?;
        let logits = tape.scale(logits, 1.0 / cfg.temperature);
        let lp = tape.log_softmax_pick(logits, targets)?;
        grpo_loss(tape, lp, &old, &adv, w.clip)?
    };
    let pos: Vec<usize> = (0..n_traj).map(|i| i / g).collect();
    let negs: Vec<Vec<usize>> = pos
        .iter()
        .map(|&k| {
            (0..b)
                .filter(|&j| j != k)
                .chain(std::iter::once(b + k))
                .collect()
        })
        .collect();
    let l_nce = infonce_batch(tape, traj_r, cands, &pos, &negs, cfg.tau)?;
    let a = tape.scale(l_nce, w.lambda1);
    let c = tape.scale(l_grpo, w.lambda2);
    let total = tape.add(a, c)?;

    let mean = |f: fn(&RewardBreakdown) -> f64| {
        trajectories.iter().map(|t| f(&t.reward)).sum::<f64>() / n_traj as f64
    };
    let record = RlRecord {
        step: 0,
        total: tape.scalar(total),
        grpo: tape.scalar(l_grpo),
        infonce: tape.scalar(l_nce),
        composite: mean(|r| r.composite),
        format: mean(|r| r.format),
        length: mean(|r| r.length),
        accuracy: mean(|r| r.accuracy),
        quality: mean(|r| r.quality),
    };
    Ok((
        total,
        RlStep {
            record,
            trajectories,
        },
    ))
}

/// Samples, scores and applies one update; `opt.step` selects the batch.
pub fn rl_step(
    model: &mut Model,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &RlConfig,
    scorer: &dyn QualityScorer,
) -> Result<RlStep> {
    check_rl(cfg)?;
    let step = opt.step as usize;
    let triplets = train_triplets(ds)?;
    let pick = draw_batch(cfg.seed, "rl.batch", step, triplets.len(), cfg.queries);
    let batch: Vec<&Triplet> = pick.iter().map(|&i| triplets[i]).collect();
    let mut tape = Tape::new();
    let (total, out) = rollout(
        &mut tape,
        model,
        ds,
        cfg,
        scorer,
        &batch,
        &format!("rl.sample.{step}"),
    )?;
    let out = RlStep {
        record: RlRecord { step, ..out.record },
        ..out
    };
    if !out.record.total.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss diverged at step {step}"
        )));
    }
    tape.backward(total, &mut model.params)?;
    drop(tape);
    opt.lr = lr_at(cfg.lr, step, cfg.steps);
    opt.step(&mut model.params);
    Ok(out)
}

/// Mean rewards and losses over `rounds` fixed batches and sampling
/// streams, without updating the model. Comparable across checkpoints.
pub fn rl_probe(
    model: &Model,
    ds: &Dataset,
    cfg: &RlConfig,
    scorer: &dyn QualityScorer,
    rounds: usize,
) -> Result<RlRecord> {
    check_rl(cfg)?;
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "probe needs at least one round".into(),
        ));
    }
    let triplets = train_triplets(ds)?;
    let mut acc = [0.0; 8];
    for r in 0..rounds {
        let pick = draw_batch(cfg.seed, "rl.probe", r, triplets.len(), cfg.queries);
        let batch: Vec<&Triplet> = pick.iter().map(|&i| triplets[i]).collect();
        let mut tape = Tape::new();
        let (_, out) = rollout(
            &mut tape,
            model,
            ds,
            cfg,
            scorer,
            &batch,
            &format!("rl.probe.sample.{r}"),
        )?;
        for (a, v) in acc.iter_mut().zip(out.record.values()) {
            *a += v / rounds as f64;
        }
    }
    Ok(RlRecord::from_values(0, acc))
}

/// Runs policy steps `opt.step .. cfg.steps`.
pub fn train_rl(
    model: &mut Model,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &RlConfig,
    scorer: &dyn QualityScorer,
    on_step: &mut dyn FnMut(&RlRecord, &Model, &Adam) -> Result<()>,
) -> Result<()> {
    while (opt.step as usize) < cfg.steps {
        let s = rl_step(model, opt, ds, cfg, scorer)?;
        on_step(&s.record, model, opt)?;
    }
    Ok(())
}
