//! Fine-grained residual enhancement of visual features.
//!
//! Three pieces: per-patch gated residuals from intermediate vision maps into
//! the final map, injection of pooled vision maps into early decoder layers
//! at the image-prefix positions, and a scaled residual from an early decoder
//! state into a deep one.

use crate::error::{shape_err, Result};
use crate::model::config::FireConfig;
use crate::numeric::{ParamId, ParamSet, Tape, Var};

/// Two-layer gate `2D → D → 1` (tanh hidden) for one intermediate map.
#[derive(Clone, Debug)]
pub struct GateMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Injection {
    pub vision_map: usize,
    pub decoder_layer: usize,
    pub proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct FireParams {
    pub gates: Vec<GateMlp>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub injections: Vec<Injection>,
    pub alpha: ParamId,
    pub w_r: ParamId,
    pub early_layer: usize,
    pub deep_layer: usize,
}

impl FireParams {
    /// One gate per intermediate map (`n_maps − 1` of them).
    pub fn new(
        params: &mut ParamSet,
        cfg: &FireConfig,
        n_maps: usize,
        width: usize,
        d_model: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut gates = Vec::new();
        for m in 0..n_maps.saturating_sub(1) {
            let p = format!("fire.gate.{m}");
            gates.push(GateMlp {
                w1: params.uniform(&format!("{p}.w1"), &[2 * width, width], 2 * width, seed)?,
                b1: params.constant(&format!("{p}.b1"), &[1, width], 0.0)?,
                w2: params.uniform(&format!("{p}.w2"), &[width, 1], width, seed)?,
                b2: params.constant(&format!("{p}.b2"), &[1, 1], 0.0)?,
            });
        }
        let ln_gain = params.constant("fire.ln.g", &[1, width], 1.0)?;
        let ln_bias = params.constant("fire.ln.b", &[1, width], 0.0)?;
        let mut injections = Vec::new();
        for &(v, l) in &cfg.injection_pairs {
            injections.push(Injection {
                vision_map: v,
                decoder_layer: l,
                proj: params.uniform(
                    &format!("fire.inj.{v}.{l}"),
                    &[width, d_model],
                    width,
                    seed,
                )?,
            });
        }
        Ok(Self {
            gates,
            ln_gain,
            ln_bias,
            injections,
            alpha: params.constant("fire.alpha", &[1, 1], 0.0)?,
            w_r: params.uniform("fire.wr", &[d_model, d_model], d_model, seed)?,
            early_layer: cfg.early_layer,
            deep_layer: cfg.deep_layer,
        })
    }
}

/// Gate-weighted sum of intermediate maps added to the final map, then
/// layer-normalized. Returns the enhanced map and each map's `rows × 1`
/// gate column.
pub fn enhance_patches(
    tape: &mut Tape,
    params: &ParamSet,
    fp: &FireParams,
    intermediates: &[Var],
    last: Var,
) -> Result<(Var, Vec<Var>)> {
    if intermediates.len() != fp.gates.len() {
        return Err(shape_err(
            "enhance_patches",
            format!("{} maps for {} gates", intermediates.len(), fp.gates.len()),
        ));
    }
    let mut acc = last;
    let mut lambdas = Vec::with_capacity(intermediates.len());
    for (&xm, g) in intermediates.iter().zip(&fp.gates) {
        if tape.value(xm).shape() != tape.value(last).shape() {
            return Err(shape_err(
                "enhance_patches",
                format!(
                    "{:?} vs final {:?}",
                    tape.value(xm).shape(),
                    tape.value(last).shape()
                ),
            ));
        }
        let cat = tape.concat_cols(&[xm, last])?;
        let (w1, b1, w2, b2) = (
            tape.param(params, g.w1),
            tape.param(params, g.b1),
            tape.param(params, g.w2),
            tape.param(params, g.b2),
        );
        let h = tape.matmul(cat, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let pre = tape.matmul(h, w2)?;
        let pre = tape.add_row(pre, b2)?;
        let lambda = tape.sigmoid(pre);
        let gated = tape.mul_col(xm, lambda)?;
        acc = tape.add(acc, gated)?;
        lambdas.push(lambda);
    }
    let (g, b) = (
        tape.param(params, fp.ln_gain),
        tape.param(params, fp.ln_bias),
    );
    Ok((tape.layer_norm(acc, g, b)?, lambdas))
}

/// Adds `mean_p(map · proj)` of each image to that image's prefix rows of
/// `state`. `patch_segs[i]` are image `i`'s rows in `map`; `prefix[r]` names
/// the image owning decoder row `r`, if any.
pub fn inject_multiscale(
    tape: &mut Tape,
    params: &ParamSet,
    proj: ParamId,
    map: Var,
    patch_segs: Vec<(usize, usize)>,
    state: Var,
    prefix: Vec<Option<usize>>,
) -> Result<Var> {
    let w = tape.param(params, proj);
    let projected = tape.matmul(map, w)?;
    let pooled = tape.segment_mean(projected, patch_segs)?;
    tape.scatter_add_rows(state, pooled, prefix)
}

/// `h_deep + α · h_early W_r`.
pub fn long_range_residual(
    tape: &mut Tape,
    alpha: Var,
    w_r: Var,
    h_early: Var,
    h_deep: Var,
) -> Result<Var> {
    let r = tape.matmul(h_early, w_r)?;
    let r = tape.mul_scalar(r, alpha)?;
    tape.add(h_deep, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tests::check_grads;
    use crate::numeric::{Rng, Tensor};

    fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn setup(n_maps: usize, width: usize) -> (ParamSet, FireParams) {
        let mut ps = ParamSet::new();
        let fp = FireParams::new(&mut ps, &FireConfig::default(), n_maps, width, 6, 3).unwrap();
        (ps, fp)
    }

    fn set(ps: &mut ParamSet, id: ParamId, v: f64) {
        ps.get_mut(id).value.data_mut().fill(v);
    }

    fn ln_plain(x: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let c = x.cols();
        let xv = t.constant(x.clone());
        let g = t.constant(Tensor::full(&[1, c], 1.0));
        let b = t.constant(Tensor::zeros(&[1, c]));
        let y = t.layer_norm(xv, g, b).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn closed_gates_reduce_to_layer_norm_of_final() {
        let (mut ps, fp) = setup(4, 5);
        for g in &fp.gates {
            set(&mut ps, g.b2, -50.0);
        }
        let mut rng = Rng::new(1);
        let maps: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, 3, 5)).collect();
        let mut t = Tape::new();
        let vs: Vec<Var> = maps.iter().map(|m| t.constant(m.clone())).collect();
        let (out, lambdas) = enhance_patches(&mut t, &ps, &fp, &vs[..3], vs[3]).unwrap();
        assert!(t.value(out).max_abs_diff(&ln_plain(&maps[3])) <= 1e-8);
        for l in lambdas {
            assert!(t.value(l).data().iter().all(|&x| x > 0.0 && x < 1e-15));
        }
    }

    #[test]
    fn open_gate_with_equal_maps_doubles_final() {
        let (mut ps, fp) = setup(2, 4);
        set(&mut ps, fp.gates[0].b2, 50.0);
        let x = rand_t(&mut Rng::new(2), 3, 4);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let (out, _) = enhance_patches(&mut t, &ps, &fp, &[v], v).unwrap();
        let want = ln_plain(&x.map(|a| 2.0 * a));
        assert!(t.value(out).max_abs_diff(&want) <= 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (ps, fp) = setup(2, 4);
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let b = t.constant(Tensor::zeros(&[2, 4]));
        assert!(enhance_patches(&mut t, &ps, &fp, &[b], a).is_err());
        assert!(enhance_patches(&mut t, &ps, &fp, &[], a).is_err());
    }

    #[test]
    fn gates_stay_inside_unit_interval() {
        let (ps, fp) = setup(3, 4);
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let vs: Vec<Var> = (0..3)
            .map(|_| t.constant(rand_t(&mut rng, 5, 4).map(|v| 3.0 * v)))
            .collect();
        let (_, lambdas) = enhance_patches(&mut t, &ps, &fp, &vs[..2], vs[2]).unwrap();
        for l in lambdas {
            assert!(t.value(l).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn enhance_grad_matches_fd() {
        for s in 0..10 {
            let (mut ps, fp) = setup(3, 3);
            let mut rng = Rng::new(40 + s);
            // gate parameters enter the check as constants-turned-inputs
            for g in &fp.gates {
                for id in [g.w1, g.b1, g.w2, g.b2] {
                    let p = ps.get_mut(id);
                    let n = p.value.len();
                    p.value = Tensor::new(
                        p.value.shape().to_vec(),
                        (0..n).map(|_| rng.normal()).collect(),
                    )
                    .unwrap();
                }
            }
            let inputs = [
                rand_t(&mut rng, 4, 3),
                rand_t(&mut rng, 4, 3),
                rand_t(&mut rng, 4, 3),
            ];
            check_grads(
                &inputs,
                |t, v| {
                    let (out, _) = enhance_patches(t, &ps, &fp, &v[..2], v[2]).unwrap();
                    probe(t, out, s)
                },
                1e-4,
            );
            // and the gate weights themselves
            let w = ps.value(fp.gates[0].w1).clone();
            let base = ps.clone();
            let f = |probe_w: &Tensor| {
                let mut p2 = base.clone();
                p2.get_mut(fp.gates[0].w1).value = probe_w.clone();
                let mut t = Tape::new();
                let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                let (out, _) = enhance_patches(&mut t, &p2, &fp, &v[..2], v[2]).unwrap();
                let l = probe(&mut t, out, s);
                t.scalar(l)
            };
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let (out, _) = enhance_patches(&mut t, &ps, &fp, &v[..2], v[2]).unwrap();
            let l = probe(&mut t, out, s);
            ps.zero_grads();
            t.backward(l, &mut ps).unwrap();
            let num = crate::numeric::fd_grad(f, &w, 1e-5);
            let err = crate::numeric::max_rel_err(&ps.get(fp.gates[0].w1).grad, &num, 1e-3);
            assert!(err <= 1e-4, "gate weight rel err {err:e}");
        }
    }

    fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
        let shape = t.value(x).shape().to_vec();
        let mut rng = Rng::new(seed + 1000);
        let w = Tensor::new(
            shape.clone(),
            (0..shape.iter().product()).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let w = t.constant(w);
        let m = t.mul(x, w).unwrap();
        t.sum(m)
    }

    #[test]
    fn zero_projector_leaves_state_unchanged() {
        let (mut ps, fp) = setup(4, 3);
        let inj = fp.injections[0].proj;
        set(&mut ps, inj, 0.0);
        let mut rng = Rng::new(5);
        let state = rand_t(&mut rng, 6, 6);
        let mut t = Tape::new();
        let m = t.constant(rand_t(&mut rng, 4, 3));
        let s = t.constant(state.clone());
        let out = inject_multiscale(
            &mut t,
            &ps,
            inj,
            m,
            vec![(0, 4)],
            s,
            vec![Some(0), Some(0), None, None, None, None],
        )
        .unwrap();
        assert_eq!(t.value(out), &state);
    }

    #[test]
    fn injection_touches_prefix_rows_only() {
        let (ps, fp) = setup(4, 3);
        let inj = fp.injections[0].proj;
        let mut rng = Rng::new(6);
        let state = rand_t(&mut rng, 5, 6);
        let mut t = Tape::new();
        let m = t.constant(rand_t(&mut rng, 2, 3));
        let s = t.constant(state.clone());
        let out = inject_multiscale(
            &mut t,
            &ps,
            inj,
            m,
            vec![(0, 2)],
            s,
            vec![Some(0), Some(0), None, None, None],
        )
        .unwrap();
        let o = t.value(out);
        let delta = |r: usize| -> Vec<f64> {
            o.row_slice(r)
                .iter()
                .zip(state.row_slice(r))
                .map(|(a, b)| a - b)
                .collect()
        };
        let (d0, d1) = (delta(0), delta(1));
        assert!(d0.iter().any(|&d| d.abs() > 1e-6));
        assert!(d0.iter().zip(&d1).all(|(a, b)| (a - b).abs() < 1e-12));
        for r in 2..5 {
            assert_eq!(o.row_slice(r), state.row_slice(r));
        }
    }

    #[test]
    fn long_range_identities() {
        let mut rng = Rng::new(7);
        let (he, hd) = (rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 4));
        let mut t = Tape::new();
        let (e, d) = (t.constant(he.clone()), t.constant(hd.clone()));
        let w = t.constant(rand_t(&mut rng, 4, 4));
        let zero = t.constant(Tensor::scalar(0.0));
        let out = long_range_residual(&mut t, zero, w, e, d).unwrap();
        assert_eq!(t.value(out), &hd);

        let one = t.constant(Tensor::scalar(1.0));
        let eye = t.constant(Tensor::eye(4));
        let out = long_range_residual(&mut t, one, eye, e, d).unwrap();
        let want: Vec<f64> = hd
            .data()
            .iter()
            .zip(he.data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(t.value(out).data(), &want[..]);
    }

    #[test]
    fn long_range_grad_matches_fd() {
        for s in 0..10 {
            let mut rng = Rng::new(70 + s);
            let inputs = [
                Tensor::scalar(rng.normal()),
                rand_t(&mut rng, 4, 4),
                rand_t(&mut rng, 3, 4),
                rand_t(&mut rng, 3, 4),
            ];
            check_grads(
                &inputs,
                |t, v| {
                    let out = long_range_residual(t, v[0], v[1], v[2], v[3]).unwrap();
                    probe(t, out, s)
                },
                1e-5,
            );
        }
    }
}
