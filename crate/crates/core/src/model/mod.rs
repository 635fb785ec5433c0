//! The toy multimodal model: patch encoder, causal decoder, and the fusion
//! head that turns decoder states into a product embedding.

pub mod config;
mod forward;
mod generate;
pub mod vocab;

pub use config::{FireConfig, FusionConfig, ModelConfig};
pub use forward::{Forward, LayerCache, SeqInput, SeqLayout};
pub use generate::{Decoding, Generation};
pub use vocab::{TokenId, TokenKind, Vocab};

use crate::error::{Error, Result};
use crate::fire::FireParams;
use crate::fusion::FusionParams;
use crate::numeric::{checkpoint, ParamId, ParamSet, Tensor};

#[derive(Clone, Debug)]
pub struct VisionLayer {
    pub w: ParamId,
    pub mix: ParamId,
    pub b: ParamId,
}

/// Input projection (map 0) followed by residual layers that combine a
/// per-patch transform with the mean over the image's patches.
#[derive(Clone, Debug)]
pub struct VisionParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub layers: Vec<VisionLayer>,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub tok: ParamId,
    pub pos: ParamId,
    pub img_w: ParamId,
    pub img_b: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head: ParamId,
}

/// Pooled states feeding the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub h_img: Option<Vec<f64>>,
    pub h_txt: Option<Vec<f64>>,
    pub h_last: Vec<f64>,
}

impl ModalityBundle {
    pub fn present_img(&self) -> bool {
        self.h_img.is_some()
    }

    pub fn present_txt(&self) -> bool {
        self.h_txt.is_some()
    }
}

/// Means over the image and text spans and the state at `emb_pos`, all
/// taken from `hidden` (`positions × d`).
pub fn pool_modalities(
    hidden: &Tensor,
    img: Option<(usize, usize)>,
    txt: Option<(usize, usize)>,
    emb_pos: usize,
) -> Result<ModalityBundle> {
    let n = hidden.rows();
    if emb_pos >= n {
        return Err(Error::OutOfRange {
            what: "emb position",
            index: emb_pos,
            len: n,
        });
    }
    let mean = |span: Option<(usize, usize)>, what: &str| -> Result<Option<Vec<f64>>> {
        let Some((s, l)) = span else { return Ok(None) };
        if l == 0 {
            return Err(Error::InvalidArgument(format!("{what} span is empty")));
        }
        if s + l > emb_pos {
            return Err(Error::InvalidArgument(format!(
                "{what} span must end before the emb position"
            )));
        }
        let mut m = vec![0.0; hidden.cols()];
        for r in s..s + l {
            for (a, b) in m.iter_mut().zip(hidden.row_slice(r)) {
                *a += b;
            }
        }
        Ok(Some(m.into_iter().map(|v| v / l as f64).collect()))
    };
    if let (Some((a, al)), Some((b, bl))) = (img, txt) {
        if a < b + bl && b < a + al {
            return Err(Error::InvalidArgument(
                "image and text spans overlap".into(),
            ));
        }
    }
    Ok(ModalityBundle {
        h_img: mean(img, "image")?,
        h_txt: mean(txt, "text")?,
        h_last: hidden.row_slice(emb_pos).to_vec(),
    })
}

/// All trainable state plus the handles that address it.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub vision: VisionParams,
    pub decoder: DecoderParams,
    pub fire: Option<FireParams>,
    pub fusion: FusionParams,
}

impl Model {
    /// Fresh model; every tensor is drawn from a stream keyed by its name.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let mut ps = ParamSet::new();
        let (din, dv, d, f) = (cfg.patch_dim, cfg.vision_width, cfg.d_model, cfg.ffn);

        let w_in = ps.uniform("vis.in.w", &[din, dv], din, s)?;
        let b_in = ps.constant("vis.in.b", &[1, dv], 0.0)?;
        let mut layers = Vec::new();
        for l in 1..=cfg.vision_layers {
            layers.push(VisionLayer {
                w: ps.uniform(&format!("vis.{l}.w"), &[dv, dv], dv, s)?,
                mix: ps.uniform(&format!("vis.{l}.mix"), &[dv, dv], dv, s)?,
                b: ps.constant(&format!("vis.{l}.b"), &[1, dv], 0.0)?,
            });
        }
        let vision = VisionParams { w_in, b_in, layers };

        let tok = ps.uniform("dec.tok", &[cfg.vocab_size, d], cfg.vocab_size, s)?;
        let pos = ps.uniform("dec.pos", &[cfg.max_len, d], cfg.max_len, s)?;
        let img_w = ps.uniform("dec.img.w", &[dv, d], dv, s)?;
        let img_b = ps.constant("dec.img.b", &[1, d], 0.0)?;
        let mut blocks = Vec::new();
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            blocks.push(BlockParams {
                ln1_g: ps.constant(&format!("{p}.ln1.g"), &[1, d], 1.0)?,
                ln1_b: ps.constant(&format!("{p}.ln1.b"), &[1, d], 0.0)?,
                wq: ps.uniform(&format!("{p}.wq"), &[d, d], d, s)?,
                wk: ps.uniform(&format!("{p}.wk"), &[d, d], d, s)?,
                wv: ps.uniform(&format!("{p}.wv"), &[d, d], d, s)?,
                wo: ps.uniform(&format!("{p}.wo"), &[d, d], d, s)?,
                ln2_g: ps.constant(&format!("{p}.ln2.g"), &[1, d], 1.0)?,
                ln2_b: ps.constant(&format!("{p}.ln2.b"), &[1, d], 0.0)?,
                w1: ps.uniform(&format!("{p}.ff.w1"), &[d, f], d, s)?,
                b1: ps.constant(&format!("{p}.ff.b1"), &[1, f], 0.0)?,
                w2: ps.uniform(&format!("{p}.ff.w2"), &[f, d], f, s)?,
                b2: ps.constant(&format!("{p}.ff.b2"), &[1, d], 0.0)?,
            });
        }
        let decoder = DecoderParams {
            tok,
            pos,
            img_w,
            img_b,
            blocks,
            lnf_g: ps.constant("dec.lnf.g", &[1, d], 1.0)?,
            lnf_b: ps.constant("dec.lnf.b", &[1, d], 0.0)?,
            head: ps.uniform("dec.head", &[d, cfg.vocab_size], d, s)?,
        };

        let fire = if cfg.fire.enabled {
            Some(FireParams::new(
                &mut ps,
                &cfg.fire,
                cfg.vision_layers + 1,
                dv,
                d,
                s,
            )?)
        } else {
            None
        };
        let fusion = FusionParams::new(&mut ps, &cfg.fusion, d, s)?;
        Ok(Self {
            cfg,
            params: ps,
            vision,
            decoder,
            fire,
            fusion,
        })
    }

    /// Model with parameter values taken from a checkpoint file.
    pub fn load(cfg: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        let stored = checkpoint::load(path)?;
        m.params.load_from(&stored)?;
        let extra: Vec<&str> = stored
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| m.params.id(n).is_none())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has parameters this configuration does not use: {}",
                extra.join(", ")
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.params)
    }
}

#[cfg(test)]
pub(crate) mod tests;
