use super::vocab::{EMB, THINK_OPEN};
use super::*;
use crate::attr::Schema;
use crate::numeric::{Rng, Tape, Tensor};

pub(crate) fn tiny_config() -> ModelConfig {
    let vocab = Vocab::from_schema(&Schema::default_schema()).unwrap();
    ModelConfig {
        vocab_size: vocab.len(),
        patches: 4,
        patch_dim: 6,
        vision_width: 8,
        vision_layers: 4,
        d_model: 16,
        dec_layers: 6,
        ffn: 24,
        max_len: 40,
        fusion: FusionConfig {
            enabled: true,
            heads: 4,
            dim: 16,
        },
        ..ModelConfig::default()
    }
}

fn patches(rng: &mut Rng, cfg: &ModelConfig) -> Tensor {
    let n = cfg.patches * cfg.patch_dim;
    Tensor::new(
        vec![cfg.patches, cfg.patch_dim],
        (0..n).map(|_| rng.normal()).collect(),
    )
    .unwrap()
}

#[test]
fn vision_maps_follow_depth() {
    let mut cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let x = patches(&mut Rng::new(1), &cfg);
    let maps = m.encode_image(&x).unwrap();
    assert_eq!(maps.len(), 5);
    assert!(maps.iter().all(|t| t.shape() == [4, 8]));
    assert_eq!(maps, m.encode_image(&x).unwrap());

    cfg.vision_layers = 0;
    cfg.fire.injection_pairs = vec![(0, 1)];
    let m0 = Model::new(cfg.clone()).unwrap();
    assert_eq!(m0.encode_image(&x).unwrap().len(), 1);
}

#[test]
fn wrong_patch_grid_rejected() {
    let cfg = tiny_config();
    let m = Model::new(cfg).unwrap();
    let bad = Tensor::zeros(&[5, 6]);
    assert!(m.encode_image(&bad).is_err());
}

#[test]
fn suffix_never_changes_earlier_logits() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let mut rng = Rng::new(2);
    let img = patches(&mut rng, &cfg);
    let title = [20, 31];
    let tail: Vec<TokenId> = (0..8).map(|_| 9 + rng.below(50) as TokenId).collect();
    let mut tape = Tape::new();
    let seq = SeqInput {
        patches: Some(&img),
        title: Some(&title),
        tail: &tail,
    };
    let fwd = m.forward(&mut tape, &[seq]).unwrap();
    let rows: Vec<usize> = (0..fwd.layout[0].len).collect();
    let full = m.logits(&mut tape, fwd.hidden, rows).unwrap();
    let full = tape.value(full).clone();
    for cut in 0..tail.len() {
        let mut perturbed = tail[..cut].to_vec();
        perturbed.extend((cut..tail.len()).map(|_| 9 + rng.below(50) as TokenId));
        let mut t2 = Tape::new();
        let s2 = SeqInput {
            tail: &perturbed,
            ..seq
        };
        let f2 = m.forward(&mut t2, &[s2]).unwrap();
        let upto = fwd.layout[0].tail_start + cut;
        let l2 = m.logits(&mut t2, f2.hidden, (0..upto).collect()).unwrap();
        for r in 0..upto {
            assert_eq!(
                t2.value(l2).row_slice(r),
                full.row_slice(r),
                "cut {cut} row {r}"
            );
        }
    }
}

#[test]
fn batching_does_not_change_results() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let mut rng = Rng::new(3);
    let (a, b) = (patches(&mut rng, &cfg), patches(&mut rng, &cfg));
    let tail = [THINK_OPEN, 9, 6, 30, 4, EMB];
    let seqs = [
        SeqInput {
            patches: Some(&a),
            title: None,
            tail: &tail,
        },
        SeqInput {
            patches: None,
            title: Some(&[40, 41]),
            tail: &tail[..3],
        },
        SeqInput {
            patches: Some(&b),
            title: Some(&[22]),
            tail: &tail,
        },
    ];
    let mut t = Tape::new();
    let fwd = m.forward(&mut t, &seqs).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let mut t1 = Tape::new();
        let f1 = m.forward(&mut t1, std::slice::from_ref(s)).unwrap();
        let l = &fwd.layout[i];
        for r in 0..l.len {
            assert_eq!(
                t.value(fwd.hidden).row_slice(l.start + r),
                t1.value(f1.hidden).row_slice(r)
            );
        }
    }
}

#[test]
fn decode_step_exposes_every_layer() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let (logits, states) = m
        .decode_step(&SeqInput {
            patches: None,
            title: Some(&[12]),
            tail: &[THINK_OPEN],
        })
        .unwrap();
    assert_eq!(logits.len(), cfg.vocab_size);
    assert_eq!(states.len(), cfg.dec_layers);
    assert!(states.iter().all(|s| s.len() == cfg.d_model));
}

#[test]
fn context_overflow_rejected() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let tail = vec![9; cfg.max_len];
    let r = m.decode_step(&SeqInput {
        patches: None,
        title: None,
        tail: &tail,
    });
    assert!(matches!(r, Err(crate::Error::ContextOverflow { .. })));
}

#[test]
fn pooling_examples() {
    let h = Tensor::from_rows(&[
        vec![1.0, 2.0],
        vec![3.0, 6.0],
        vec![5.0, 0.0],
        vec![7.0, 7.0],
    ])
    .unwrap();
    let b = pool_modalities(&h, Some((0, 2)), Some((2, 1)), 3).unwrap();
    assert_eq!(b.h_img, Some(vec![2.0, 4.0]));
    assert_eq!(b.h_txt, Some(vec![5.0, 0.0]));
    assert_eq!(b.h_last, vec![7.0, 7.0]);
    let b = pool_modalities(&h, None, Some((1, 1)), 3).unwrap();
    assert!(!b.present_img() && b.h_img.is_none());
    assert!(pool_modalities(&h, Some((0, 0)), None, 3).is_err());
    assert!(pool_modalities(&h, Some((0, 2)), Some((1, 1)), 3).is_err());
    assert!(pool_modalities(&h, Some((0, 4)), None, 3).is_err());
}

#[test]
fn pooled_span_is_mean_of_states() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let img = patches(&mut Rng::new(4), &cfg);
    let input = SeqInput {
        patches: Some(&img),
        title: Some(&[15, 33, 47]),
        tail: &[EMB],
    };
    let b = m.bundle(&input).unwrap();
    let mut t = Tape::new();
    let fwd = m.forward(&mut t, &[input]).unwrap();
    let h = t.value(fwd.hidden);
    let (s, l) = fwd.layout[0].txt.unwrap();
    let mut want = vec![0.0; cfg.d_model];
    for r in s..s + l {
        for (w, v) in want.iter_mut().zip(h.row_slice(r)) {
            *w += v / l as f64;
        }
    }
    let got = b.h_txt.unwrap();
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(b.h_last, h.row_slice(fwd.layout[0].last()));
}

fn rescore(m: &Model, prompt: &SeqInput, tokens: &[TokenId], temperature: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let seq = SeqInput {
        tail: tokens,
        ..*prompt
    };
    let fwd = m.forward(&mut tape, &[seq]).unwrap();
    let (rows, targets) = Model::tail_targets(&fwd, &[seq]);
    let lg = m.logits(&mut tape, fwd.hidden, rows).unwrap();
    let lg = tape.scale(lg, 1.0 / temperature);
    let lp = tape.log_softmax_pick(lg, targets).unwrap();
    tape.value(lp).data().to_vec()
}

#[test]
fn sampled_logprobs_rescore_identically() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let mut rng = Rng::new(5);
    let imgs: Vec<Tensor> = (0..3).map(|_| patches(&mut rng, &cfg)).collect();
    let prompts = [
        SeqInput {
            patches: Some(&imgs[0]),
            title: None,
            tail: &[],
        },
        SeqInput {
            patches: None,
            title: Some(&[20, 30]),
            tail: &[],
        },
        SeqInput {
            patches: Some(&imgs[1]),
            title: Some(&[25]),
            tail: &[THINK_OPEN],
        },
    ];
    let mut rngs: Vec<Rng> = (0..3).map(|i| Rng::derive_step(9, "gen", i)).collect();
    let gens = m
        .generate(
            &prompts,
            Decoding::Sample { temperature: 0.8 },
            12,
            &mut rngs,
        )
        .unwrap();
    for (p, g) in prompts.iter().zip(&gens) {
        assert!(!g.tokens.is_empty() && g.tokens.len() <= 12);
        let mut full = p.tail.to_vec();
        full.extend(&g.tokens);
        let lp = rescore(&m, p, &full, 0.8);
        let lp = &lp[p.tail.len()..];
        for (a, b) in lp.iter().zip(&g.logprobs) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn near_zero_temperature_is_greedy() {
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    let img = patches(&mut Rng::new(6), &cfg);
    let prompt = [SeqInput {
        patches: Some(&img),
        title: Some(&[33]),
        tail: &[],
    }];
    let greedy = m.generate(&prompt, Decoding::Greedy, 15, &mut []).unwrap();
    let cold = m
        .generate(
            &prompt,
            Decoding::Sample { temperature: 1e-6 },
            15,
            &mut [Rng::new(1)],
        )
        .unwrap();
    assert_eq!(greedy[0].tokens, cold[0].tokens);
}

#[test]
fn flat_policy_samples_differ_across_seeds() {
    let cfg = tiny_config();
    let mut m = Model::new(cfg.clone()).unwrap();
    let head = m.decoder.head;
    m.params.get_mut(head).value.data_mut().fill(0.0);
    let prompt = [SeqInput {
        patches: None,
        title: Some(&[33]),
        tail: &[],
    }];
    let draw = |seed: u64| -> Vec<Vec<TokenId>> {
        (0..20)
            .map(|i| {
                let mut r = [Rng::derive_step(seed, "draw", i)];
                m.generate(&prompt, Decoding::Sample { temperature: 1.0 }, 10, &mut r)
                    .unwrap()[0]
                    .tokens
                    .clone()
            })
            .collect()
    };
    let (a, b) = (draw(1), draw(2));
    assert_ne!(a, b);
    assert_eq!(a, draw(1));
}

#[test]
fn generation_respects_context_limit() {
    let mut cfg = tiny_config();
    cfg.max_len = 12;
    let m = Model::new(cfg.clone()).unwrap();
    let img = patches(&mut Rng::new(7), &cfg);
    let prompt = [SeqInput {
        patches: Some(&img),
        title: Some(&[33, 34]),
        tail: &[],
    }];
    let g = m.generate(&prompt, Decoding::Greedy, 100, &mut []).unwrap();
    assert!(g[0].tokens.len() <= 12 - 1 - 7);
}

#[test]
fn fire_free_build_shares_every_other_tensor() {
    let cfg = tiny_config();
    let with = Model::new(cfg.clone()).unwrap();
    let mut off = cfg.clone();
    off.fire.enabled = false;
    let without = Model::new(off).unwrap();
    assert!(without.params.iter().all(|p| !p.name.starts_with("fire.")));
    for p in without.params.iter() {
        assert_eq!(
            with.params.by_name(&p.name).unwrap().value,
            p.value,
            "{}",
            p.name
        );
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = tiny_config();
    let m = Model::new(cfg.clone()).unwrap();
    m.save(&path).unwrap();
    let back = Model::load(cfg.clone(), &path).unwrap();
    assert_eq!(back.params, m.params);
    let mut off = cfg;
    off.fire.enabled = false;
    assert!(Model::load(off, &path).is_err());
}
