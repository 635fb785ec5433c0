//! Batched teacher-forced forward pass.
//!
//! Sequences are stacked row-wise. Each sequence is laid out as
//! `[image prefix (P rows)] <bos> [title] [tail]`, where the tail is the
//! rationale being scored or the prefix being extended. Attention is causal
//! within each sequence and never crosses sequences.

use super::{BlockParams, Model, TokenId};
use crate::error::{Error, Result};
use crate::fire::{self, FireParams};
use crate::fusion::{self, FusionInputs, FusionOutput};
use crate::model::vocab::BOS;
use crate::numeric::{AttnSeg, Tape, Tensor, Var};

/// One sequence to run.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub patches: Option<&'a Tensor>,
    pub title: Option<&'a [TokenId]>,
    pub tail: &'a [TokenId],
}

/// Absolute row ranges of one sequence inside a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub start: usize,
    pub len: usize,
    pub img: Option<(usize, usize)>,
    pub txt: Option<(usize, usize)>,
    pub tail_start: usize,
    /// Index among the batch's images.
    pub image: Option<usize>,
}

impl SeqLayout {
    pub fn last(&self) -> usize {
        self.start + self.len - 1
    }
}

/// Recorded forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layout: Vec<SeqLayout>,
    /// Final states after the output norm, `rows × d_model`.
    pub hidden: Var,
    /// Output of every decoder block.
    pub layers: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Keys and values of already processed positions for one decoder layer,
/// contiguous per sequence.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub k: Tensor,
    pub v: Tensor,
}

pub(crate) enum Attn<'a> {
    Full(Vec<AttnSeg>),
    /// One new row per sequence; `spans[s]` are sequence `s`'s rows in the
    /// caches.
    Cached {
        past: &'a [LayerCache],
        spans: &'a [(usize, usize)],
    },
}

struct Inject<'a> {
    maps: &'a [Var],
    patch_segs: Vec<(usize, usize)>,
    prefix: Vec<Option<usize>>,
}

impl Model {
    pub fn layout(&self, seqs: &[SeqInput]) -> Result<Vec<SeqLayout>> {
        let p = self.cfg.patches;
        let mut out = Vec::with_capacity(seqs.len());
        let (mut row, mut image) = (0, 0);
        for s in seqs {
            let start = row;
            let img = s.patches.map(|_| {
                let span = (row, p);
                row += p;
                span
            });
            row += 1; // <bos>
            let txt = match s.title {
                Some([]) => {
                    return Err(Error::InvalidArgument(
                        "text modality present with an empty title".into(),
                    ))
                }
                Some(t) => {
                    let span = (row, t.len());
                    row += t.len();
                    Some(span)
                }
                None => None,
            };
            let tail_start = row;
            row += s.tail.len();
            let len = row - start;
            if len > self.cfg.max_len {
                return Err(Error::ContextOverflow {
                    len,
                    max: self.cfg.max_len,
                });
            }
            out.push(SeqLayout {
                start,
                len,
                img,
                txt,
                tail_start,
                image: s.patches.map(|_| {
                    image += 1;
                    image - 1
                }),
            });
        }
        Ok(out)
    }

    /// Vision maps for stacked images: map 0 is the input projection, the
    /// last map is the final layer. Each map is `(images·P) × width`.
    pub fn encode_images(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Vec<Var>> {
        let (p, din) = (self.cfg.patches, self.cfg.patch_dim);
        let mut data = Vec::with_capacity(images.len() * p * din);
        for im in images {
            if im.shape() != [p, din] {
                return Err(Error::Shape {
                    op: "encode_image",
                    detail: format!("patch grid {:?}, expected [{p}, {din}]", im.shape()),
                });
            }
            data.extend_from_slice(im.data());
        }
        let ps = &self.params;
        let x = tape.constant(Tensor::new(vec![images.len() * p, din], data)?);
        let (w, b) = (
            tape.param(ps, self.vision.w_in),
            tape.param(ps, self.vision.b_in),
        );
        let x = tape.matmul(x, w)?;
        let mut x = tape.add_row(x, b)?;
        let mut maps = vec![x];
        let segs: Vec<(usize, usize)> = (0..images.len()).map(|i| (i * p, p)).collect();
        let owner: Vec<usize> = (0..images.len() * p).map(|r| r / p).collect();
        for layer in &self.vision.layers {
            let (w, mix, b) = (
                tape.param(ps, layer.w),
                tape.param(ps, layer.mix),
                tape.param(ps, layer.b),
            );
            let mean = tape.segment_mean(x, segs.clone())?;
            let mixed = tape.matmul(mean, mix)?;
            let mixed = tape.gather_rows(mixed, owner.clone())?;
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, mixed)?;
            let h = tape.add_row(h, b)?;
            let h = tape.tanh(h);
            x = tape.add(x, h)?;
            maps.push(x);
        }
        Ok(maps)
    }

    /// Plain-value per-layer maps of a single image.
    pub fn encode_image(&self, patches: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let maps = self.encode_images(&mut tape, &[patches])?;
        Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
    }

    /// Image-prefix rows after optional enhancement, `(images·P) × d_model`.
    fn image_prefix(&self, tape: &mut Tape, maps: &[Var]) -> Result<Var> {
        let last = *maps.last().expect("at least one map");
        let feats = match &self.fire {
            Some(fp) => {
                fire::enhance_patches(tape, &self.params, fp, &maps[..maps.len() - 1], last)?.0
            }
            None => last,
        };
        let (w, b) = (
            tape.param(&self.params, self.decoder.img_w),
            tape.param(&self.params, self.decoder.img_b),
        );
        let y = tape.matmul(feats, w)?;
        tape.add_row(y, b)
    }

    pub fn forward(&self, tape: &mut Tape, seqs: &[SeqInput]) -> Result<Forward> {
        let layout = self.layout(seqs)?;
        let images: Vec<&Tensor> = seqs.iter().filter_map(|s| s.patches).collect();
        let maps = if images.is_empty() {
            Vec::new()
        } else {
            self.encode_images(tape, &images)?
        };

        let total = layout.last().map_or(0, |l| l.start + l.len);
        let mut ids = Vec::new();
        let mut order = vec![0; total];
        let mut pos = vec![0; total];
        let mut prefix = vec![None; total];
        let n_img_rows = images.len() * self.cfg.patches;
        for (s, l) in seqs.iter().zip(&layout) {
            for (j, p) in pos[l.start..l.start + l.len].iter_mut().enumerate() {
                *p = j;
            }
            if let (Some((st, len)), Some(im)) = (l.img, l.image) {
                for j in 0..len {
                    order[st + j] = im * self.cfg.patches + j;
                    prefix[st + j] = Some(im);
                }
            }
            let first_tok = l.img.map_or(l.start, |(st, len)| st + len);
            let toks = std::iter::once(BOS)
                .chain(s.title.unwrap_or(&[]).iter().copied())
                .chain(s.tail.iter().copied());
            for (j, t) in toks.enumerate() {
                if t as usize >= self.cfg.vocab_size {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: t as usize,
                        len: self.cfg.vocab_size,
                    });
                }
                order[first_tok + j] = n_img_rows + ids.len();
                ids.push(t as usize);
            }
        }

        let ps = &self.params;
        let tok = tape.param(ps, self.decoder.tok);
        let tok_rows = tape.gather_rows(tok, ids)?;
        let stacked = if images.is_empty() {
            tok_rows
        } else {
            let img_rows = self.image_prefix(tape, &maps)?;
            tape.concat_rows(&[img_rows, tok_rows])?
        };
        let x = tape.gather_rows(stacked, order)?;
        let pe = tape.param(ps, self.decoder.pos);
        let pe = tape.gather_rows(pe, pos)?;
        let x = tape.add(x, pe)?;

        let segs = layout
            .iter()
            .map(|l| AttnSeg::causal(l.start, l.len))
            .collect();
        let inject = Inject {
            maps: &maps,
            patch_segs: (0..images.len())
                .map(|i| (i * self.cfg.patches, self.cfg.patches))
                .collect(),
            prefix,
        };
        let inject = (!images.is_empty()).then_some(inject);
        let (layers, keys, values) = self.run_blocks(tape, x, Attn::Full(segs), inject.as_ref())?;
        let hidden = self.final_norm(tape, *layers.last().expect("decoder has layers"))?;
        Ok(Forward {
            layout,
            hidden,
            layers,
            keys,
            values,
        })
    }

    pub(crate) fn final_norm(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (
            tape.param(&self.params, self.decoder.lnf_g),
            tape.param(&self.params, self.decoder.lnf_b),
        );
        tape.layer_norm(x, g, b)
    }

    /// Next-token logits for the given rows of `hidden`.
    pub fn logits(&self, tape: &mut Tape, hidden: Var, rows: Vec<usize>) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        let w = tape.param(&self.params, self.decoder.head);
        tape.matmul(h, w)
    }

    fn block(
        &self,
        tape: &mut Tape,
        bp: &BlockParams,
        x: Var,
        attn: &Attn,
        layer: usize,
    ) -> Result<(Var, Var, Var)> {
        let ps = &self.params;
        let p = |t: &mut Tape, id| t.param(ps, id);
        let (g1, b1) = (p(tape, bp.ln1_g), p(tape, bp.ln1_b));
        let a = tape.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (
            p(tape, bp.wq),
            p(tape, bp.wk),
            p(tape, bp.wv),
            p(tape, bp.wo),
        );
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let scale = 1.0 / (self.cfg.d_model as f64).sqrt();
        let (att, k_all, v_all) = match attn {
            Attn::Full(segs) => (tape.attention(q, k, v, segs.clone(), scale)?, k, v),
            Attn::Cached { past, spans } => {
                let n_new = spans.len();
                let past_rows = past[layer].k.rows();
                let mut order = Vec::with_capacity(past_rows + n_new);
                let mut segs = Vec::with_capacity(n_new);
                for (s, &(st, len)) in spans.iter().enumerate() {
                    segs.push(AttnSeg {
                        q_start: s,
                        q_len: 1,
                        k_start: order.len(),
                        k_len: len + 1,
                        offset: len,
                    });
                    order.extend(st..st + len);
                    order.push(past_rows + s);
                }
                let pk = tape.constant(past[layer].k.clone());
                let pv = tape.constant(past[layer].v.clone());
                let kc = tape.concat_rows(&[pk, k])?;
                let vc = tape.concat_rows(&[pv, v])?;
                let k_all = tape.gather_rows(kc, order.clone())?;
                let v_all = tape.gather_rows(vc, order)?;
                (tape.attention(q, k_all, v_all, segs, scale)?, k_all, v_all)
            }
        };
        let o = tape.matmul(att, wo)?;
        let x = tape.add(x, o)?;
        let (g2, b2) = (p(tape, bp.ln2_g), p(tape, bp.ln2_b));
        let h = tape.layer_norm(x, g2, b2)?;
        let (w1, fb1, w2, fb2) = (
            p(tape, bp.w1),
            p(tape, bp.b1),
            p(tape, bp.w2),
            p(tape, bp.b2),
        );
        let h = tape.matmul(h, w1)?;
        let h = tape.add_row(h, fb1)?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, fb2)?;
        Ok((tape.add(x, h)?, k_all, v_all))
    }

    fn run_blocks(
        &self,
        tape: &mut Tape,
        mut x: Var,
        attn: Attn,
        inject: Option<&Inject>,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let n = self.decoder.blocks.len();
        let (mut layers, mut keys, mut values) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut early = None;
        for (l, bp) in self.decoder.blocks.iter().enumerate() {
            let (y, k, v) = self.block(tape, bp, x, &attn, l)?;
            x = y;
            keys.push(k);
            values.push(v);
            if let Some(fp) = &self.fire {
                x = self.apply_fire(tape, fp, l, x, inject, &mut early)?;
            }
            layers.push(x);
        }
        Ok((layers, keys, values))
    }

    fn apply_fire(
        &self,
        tape: &mut Tape,
        fp: &FireParams,
        l: usize,
        mut x: Var,
        inject: Option<&Inject>,
        early: &mut Option<Var>,
    ) -> Result<Var> {
        if let Some(inj) = inject {
            for pair in fp.injections.iter().filter(|p| p.decoder_layer == l) {
                x = fire::inject_multiscale(
                    tape,
                    &self.params,
                    pair.proj,
                    inj.maps[pair.vision_map],
                    inj.patch_segs.clone(),
                    x,
                    inj.prefix.clone(),
                )?;
            }
        }
        if l == fp.early_layer {
            *early = Some(x);
        }
        if l == fp.deep_layer {
            let h_early = early.expect("early layer precedes deep layer");
            let alpha = tape.param(&self.params, fp.alpha);
            let w_r = tape.param(&self.params, fp.w_r);
            x = fire::long_range_residual(tape, alpha, w_r, h_early, x)?;
        }
        Ok(x)
    }

    /// Runs one new token per sequence against cached keys and values.
    /// Returns the final states of the new rows and the extended caches.
    pub(crate) fn step_cached(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        positions: &[usize],
        past: &[LayerCache],
        spans: &[(usize, usize)],
    ) -> Result<(Var, Vec<LayerCache>)> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad,
                len: self.cfg.vocab_size,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(Error::ContextOverflow {
                len: p + 1,
                max: self.cfg.max_len,
            });
        }
        let tok = tape.param(&self.params, self.decoder.tok);
        let x = tape.gather_rows(tok, ids)?;
        let pe = tape.param(&self.params, self.decoder.pos);
        let pe = tape.gather_rows(pe, positions.to_vec())?;
        let x = tape.add(x, pe)?;
        let (layers, keys, values) =
            self.run_blocks(tape, x, Attn::Cached { past, spans }, None)?;
        let hidden = self.final_norm(tape, *layers.last().expect("decoder has layers"))?;
        let caches = keys
            .iter()
            .zip(&values)
            .map(|(&k, &v)| LayerCache {
                k: tape.value(k).clone(),
                v: tape.value(v).clone(),
            })
            .collect();
        Ok((hidden, caches))
    }

    /// Pools image, text and last-position states of every sequence and
    /// fuses them into embeddings (`seqs × d_r`). The last position of each
    /// sequence must hold `<|emb|>`.
    pub fn embed(&self, tape: &mut Tape, fwd: &Forward) -> Result<FusionOutput> {
        let n = fwd.layout.len();
        let pick = |span: Option<(usize, usize)>, l: &SeqLayout| span.unwrap_or((l.start, 1));
        let img_segs = fwd.layout.iter().map(|l| pick(l.img, l)).collect();
        let txt_segs = fwd.layout.iter().map(|l| pick(l.txt, l)).collect();
        let h_img = tape.segment_mean(fwd.hidden, img_segs)?;
        let h_txt = tape.segment_mean(fwd.hidden, txt_segs)?;
        let h_last =
            tape.gather_rows(fwd.hidden, fwd.layout.iter().map(SeqLayout::last).collect())?;
        let inp = FusionInputs {
            h_img,
            h_txt,
            h_last,
            present_img: fwd.layout.iter().map(|l| l.img.is_some()).collect(),
            present_txt: fwd.layout.iter().map(|l| l.txt.is_some()).collect(),
        };
        debug_assert_eq!(inp.present_img.len(), n);
        fusion::fuse(tape, &self.params, &self.fusion, &inp)
    }

    /// Rows predicting each tail token and the tokens themselves.
    pub fn tail_targets(fwd: &Forward, seqs: &[SeqInput]) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (l, s) in fwd.layout.iter().zip(seqs) {
            for (j, &t) in s.tail.iter().enumerate() {
                rows.push(l.tail_start + j - 1);
                targets.push(t as usize);
            }
        }
        (rows, targets)
    }

    /// Next-token logits at the last position and every layer's state there.
    pub fn decode_step(&self, input: &SeqInput) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, std::slice::from_ref(input))?;
        let last = fwd.layout[0].last();
        let logits = self.logits(&mut tape, fwd.hidden, vec![last])?;
        let states = fwd
            .layers
            .iter()
            .map(|&v| tape.value(v).row_slice(last).to_vec())
            .collect();
        Ok((tape.value(logits).data().to_vec(), states))
    }

    /// Pooled states of one sequence whose last token is `<|emb|>`.
    pub fn bundle(&self, input: &SeqInput) -> Result<super::ModalityBundle> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, std::slice::from_ref(input))?;
        let l = &fwd.layout[0];
        let shift = |s: Option<(usize, usize)>| s.map(|(a, n)| (a - l.start, n));
        super::pool_modalities(
            tape.value(fwd.hidden),
            shift(l.img),
            shift(l.txt),
            l.last() - l.start,
        )
    }
}
