//! Multi-head modality fusion.
//!
//! The base representation (the `<|emb|>` state) is projected to `d_r` and
//! enriched with the projected image and text states, each scaled by a
//! presence score, admitted by a consistency gate, and weighted per head
//! subspace, plus their elementwise product. The result is L2-normalized.

use crate::error::Result;
use crate::model::config::FusionConfig;
use crate::model::ModalityBundle;
use crate::numeric::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SideParams {
    pub proj_img: ParamId,
    pub proj_txt: ParamId,
    /// `(3·d_r + 2) × 3H`; logits are ordered head-major `(i, t, mm)`.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub proj_base: ParamId,
    /// Absent when fusion is disabled.
    pub side: Option<SideParams>,
    pub heads: usize,
    pub dim: usize,
}

impl FusionParams {
    pub fn new(
        params: &mut ParamSet,
        cfg: &FusionConfig,
        d_model: usize,
        seed: u64,
    ) -> Result<Self> {
        let dim = cfg.dim;
        let proj_base = params.uniform("fusion.proj_base", &[d_model, dim], d_model, seed)?;
        let side = if cfg.enabled {
            Some(SideParams {
                proj_img: params.uniform("fusion.proj_img", &[d_model, dim], d_model, seed)?,
                proj_txt: params.uniform("fusion.proj_txt", &[d_model, dim], d_model, seed)?,
                gate_w: params.uniform(
                    "fusion.gate.w",
                    &[3 * dim + 2, 3 * cfg.heads],
                    3 * dim + 2,
                    seed,
                )?,
                gate_b: params.constant("fusion.gate.b", &[1, 3 * cfg.heads], 0.0)?,
            })
        } else {
            None
        };
        Ok(Self {
            proj_base,
            side,
            heads: cfg.heads,
            dim,
        })
    }
}

/// Row-batched inputs: `n × d_model` states; absent rows may hold anything.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    pub h_img: Var,
    pub h_txt: Var,
    pub h_last: Var,
    pub present_img: Vec<bool>,
    pub present_txt: Vec<bool>,
}

/// Per-row diagnostics, all `n × 1` except `alpha` (`n × 3H`).
#[derive(Clone, Copy, Debug)]
pub struct Diagnostics {
    pub s_i: Var,
    pub s_t: Var,
    pub g_i: Var,
    pub g_t: Var,
    pub alpha: Var,
    /// Fusion output before normalization.
    pub pre_norm: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub r: Var,
    pub diag: Option<Diagnostics>,
}

fn mask(flags: &[bool]) -> Tensor {
    Tensor::new(
        vec![flags.len(), 1],
        flags.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
    )
    .expect("len")
}

/// `sigmoid(‖h‖)` for present rows, exactly 0 for absent ones.
pub fn presence_scores(tape: &mut Tape, h: Var, present: &[bool]) -> Result<Var> {
    let n = tape.row_norm(h);
    let s = tape.sigmoid(n);
    let m = tape.constant(mask(present));
    tape.mul(s, m)
}

/// `max(0, cos(h'_a, h'_m))` per row.
pub fn consistency_gates(tape: &mut Tape, base: Var, side: Var) -> Result<Var> {
    let c = tape.row_cosine(base, side)?;
    Ok(tape.relu(c))
}

/// Per-head `(α_i, α_t, α_mm)` as sigmoid of a linear map, `n × 3H`.
#[allow(clippy::too_many_arguments)]
pub fn head_gates(
    tape: &mut Tape,
    params: &ParamSet,
    side: &SideParams,
    hp_i: Var,
    hp_t: Var,
    hp_a: Var,
    s_i: Var,
    s_t: Var,
) -> Result<Var> {
    let x = tape.concat_cols(&[hp_i, hp_t, hp_a, s_i, s_t])?;
    let (w, b) = (
        tape.param(params, side.gate_w),
        tape.param(params, side.gate_b),
    );
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    Ok(tape.sigmoid(z))
}

pub fn fuse(
    tape: &mut Tape,
    params: &ParamSet,
    fp: &FusionParams,
    inp: &FusionInputs,
) -> Result<FusionOutput> {
    let pb = tape.param(params, fp.proj_base);
    let hp_a = tape.matmul(inp.h_last, pb)?;
    let Some(side) = &fp.side else {
        return Ok(FusionOutput {
            r: tape.row_normalize(hp_a),
            diag: None,
        });
    };
    let s_i = presence_scores(tape, inp.h_img, &inp.present_img)?;
    let s_t = presence_scores(tape, inp.h_txt, &inp.present_txt)?;
    let hi = tape.mul_col(inp.h_img, s_i)?;
    let ht = tape.mul_col(inp.h_txt, s_t)?;
    let (pi, pt) = (
        tape.param(params, side.proj_img),
        tape.param(params, side.proj_txt),
    );
    let hp_i = tape.matmul(hi, pi)?;
    let hp_t = tape.matmul(ht, pt)?;
    let g_i = consistency_gates(tape, hp_a, hp_i)?;
    let g_t = consistency_gates(tape, hp_a, hp_t)?;
    let alpha = head_gates(tape, params, side, hp_i, hp_t, hp_a, s_i, s_t)?;

    let width = fp.dim / fp.heads;
    let mut expand = |k: usize| -> Result<Var> {
        let cols = (0..fp.heads).map(|h| 3 * h + k).collect();
        let a = tape.select_cols(alpha, cols)?;
        Ok(tape.repeat_cols(a, width))
    };
    let (a_i, a_t, a_mm) = (expand(0)?, expand(1)?, expand(2)?);
    let hp_mm = tape.mul(hp_i, hp_t)?;

    let c_i = tape.mul_col(a_i, g_i)?;
    let term_i = tape.mul(c_i, hp_i)?;
    let c_t = tape.mul_col(a_t, g_t)?;
    let term_t = tape.mul(c_t, hp_t)?;
    let term_mm = tape.mul(a_mm, hp_mm)?;
    let r = tape.add(hp_a, term_i)?;
    let r = tape.add(r, term_t)?;
    let pre_norm = tape.add(r, term_mm)?;
    Ok(FusionOutput {
        r: tape.row_normalize(pre_norm),
        diag: Some(Diagnostics {
            s_i,
            s_t,
            g_i,
            g_t,
            alpha,
            pre_norm,
        }),
    })
}

/// Plain-value result of fusing one bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub r: Vec<f64>,
    pub s_i: f64,
    pub s_t: f64,
    pub g_i: f64,
    pub g_t: f64,
    pub alpha_i: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub alpha_mm: Vec<f64>,
}

/// Fuses a single bundle outside of any training graph.
pub fn fuse_bundle(
    params: &ParamSet,
    fp: &FusionParams,
    b: &ModalityBundle,
) -> Result<FusedEmbedding> {
    let d = b.h_last.len();
    let zeros = vec![0.0; d];
    let mut tape = Tape::new();
    let h_img = tape.constant(Tensor::row(b.h_img.as_deref().unwrap_or(&zeros)));
    let h_txt = tape.constant(Tensor::row(b.h_txt.as_deref().unwrap_or(&zeros)));
    let h_last = tape.constant(Tensor::row(&b.h_last));
    let out = fuse(
        &mut tape,
        params,
        fp,
        &FusionInputs {
            h_img,
            h_txt,
            h_last,
            present_img: vec![b.h_img.is_some()],
            present_txt: vec![b.h_txt.is_some()],
        },
    )?;
    let r = tape.value(out.r).data().to_vec();
    let Some(dg) = out.diag else {
        return Ok(FusedEmbedding {
            r,
            s_i: 0.0,
            s_t: 0.0,
            g_i: 0.0,
            g_t: 0.0,
            alpha_i: vec![],
            alpha_t: vec![],
            alpha_mm: vec![],
        });
    };
    let a = tape.value(dg.alpha).data();
    let pick = |k: usize| (0..fp.heads).map(|h| a[3 * h + k]).collect();
    Ok(FusedEmbedding {
        s_i: tape.scalar(dg.s_i),
        s_t: tape.scalar(dg.s_t),
        g_i: tape.scalar(dg.g_i),
        g_t: tape.scalar(dg.g_t),
        alpha_i: pick(0),
        alpha_t: pick(1),
        alpha_mm: pick(2),
        r,
    })
}
