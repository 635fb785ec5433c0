use super::*;
use crate::attr::data::gen_universe;
use crate::attr::GenConfig;
use crate::losses::tests::tiny_dataset;
use crate::model::tests::tiny_config;

fn rand_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect()
}

/// Sorts every candidate and reads off the gold position.
fn brute_recall(q: &[Vec<f64>], c: &[Vec<f64>], gold: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (qi, &g) in q.iter().zip(gold) {
        let mut order: Vec<(f64, usize)> = c
            .iter()
            .enumerate()
            .map(|(j, cj)| (cosine(qi, cj), j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if order[..k].iter().any(|&(_, j)| j == g) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

#[test]
fn recall_matches_brute_force() {
    for trial in 0..20 {
        let mut rng = Rng::new(trial);
        let q = rand_rows(&mut rng, 100, 6);
        let mut c = rand_rows(&mut rng, 100, 6);
        // exact duplicates exercise the tie rule
        c[7] = c[3].clone();
        c[50] = c[3].iter().map(|x| 2.0 * x).collect();
        let gold: Vec<usize> = (0..100).map(|_| rng.below(100)).collect();
        let r = recall_at_k(&q, &c, &gold, &KS).unwrap();
        for (k, v) in KS.iter().zip(&r) {
            assert_eq!(*v, brute_recall(&q, &c, &gold, *k));
        }
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }
}

#[test]
fn recall_examples() {
    let mut rng = Rng::new(1);
    let x = rand_rows(&mut rng, 30, 8);
    let gold: Vec<usize> = (0..30).collect();
    assert_eq!(recall_at_k(&x, &x, &gold, &[1]).unwrap(), vec![1.0]);

    let q = vec![vec![1.0, 0.0]; 5];
    let c: Vec<Vec<f64>> = (0..100).map(|j| vec![1.0, 0.01 * j as f64]).collect();
    assert_eq!(recall_at_k(&q, &c, &[99; 5], &[10]).unwrap(), vec![0.0]);
    assert!(recall_at_k(&q, &c, &[99; 5], &[101]).is_err());
    assert!(recall_at_k(&q, &c, &[100; 5], &[1]).is_err());

    let tied = vec![vec![1.0, 0.0]; 4];
    assert_eq!(
        recall_at_k(&q[..1], &tied, &[2], &[2, 3]).unwrap(),
        vec![0.0, 1.0]
    );
}

fn brute_classify(items: &[Vec<f64>], labels: &[Vec<f64>]) -> Vec<usize> {
    items
        .iter()
        .map(|x| {
            let sims: Vec<f64> = labels.iter().map(|l| cosine(x, l)).collect();
            let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&s| s == top).unwrap()
        })
        .collect()
}

#[test]
fn classify_matches_brute_force() {
    for trial in 0..20 {
        let mut rng = Rng::new(100 + trial);
        let items = rand_rows(&mut rng, 100, 5);
        let labels = rand_rows(&mut rng, 7, 5);
        let gold: Vec<usize> = (0..100).map(|_| rng.below(7)).collect();
        let (pred, m) = classify(&items, &labels, &gold).unwrap();
        assert_eq!(pred, brute_classify(&items, &labels));
        let acc = pred.iter().zip(&gold).filter(|(a, b)| a == b).count() as f64 / 100.0;
        assert_eq!(m.accuracy, acc);
    }
}

#[test]
fn macro_metrics_hand_worked() {
    // confusion (rows gold, cols pred): [[2,1,0],[0,1,1],[1,0,2]]
    let gold = [0, 0, 0, 1, 1, 2, 2, 2];
    let pred = [0, 0, 1, 1, 2, 0, 2, 2];
    let m = class_metrics(&pred, &gold, 3).unwrap();
    let p = [2.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0];
    let r = [2.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0];
    let f: Vec<f64> = (0..3).map(|i| 2.0 * p[i] * r[i] / (p[i] + r[i])).collect();
    assert!((m.accuracy - 5.0 / 8.0).abs() < 1e-15);
    assert!((m.precision - p.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert!((m.recall - r.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert!((m.f1 - f.iter().sum::<f64>() / 3.0).abs() < 1e-15);

    let perfect = class_metrics(&gold, &gold, 3).unwrap();
    assert_eq!(
        perfect,
        ClassMetrics {
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0
        }
    );

    let single = class_metrics(&[1; 5], &[1; 5], 3).unwrap();
    assert_eq!(single.accuracy, 1.0);
    assert!((single.precision - 1.0 / 3.0).abs() < 1e-15);
    assert!((single.f1 - 1.0 / 3.0).abs() < 1e-15);
    assert!(class_metrics(&[3], &[0], 3).is_err());
    assert!(nearest_labels(&[vec![1.0]], &[vec![1.0]]).is_err());
}

#[test]
fn attribute_prediction() {
    let schema = crate::attr::Schema::default_schema();
    let cfg = GenConfig {
        products: 1000,
        ..GenConfig::default()
    };
    let ds = Dataset {
        vocab: crate::model::Vocab::from_schema(&schema).unwrap(),
        products: gen_universe(&schema, &cfg).unwrap(),
        triplets: Vec::new(),
        schema,
    };
    let products: Vec<&ProductRecord> = ds.products.iter().collect();
    let key = ds.schema.key_index("Material").unwrap();
    let values = &ds.schema.key(key).values;
    let onehot = |i: usize| {
        (0..values.len())
            .map(|j| if i == j { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let items: Vec<Vec<f64>> = products
        .iter()
        .map(|p| {
            onehot(
                values
                    .iter()
                    .position(|v| v == &p.attrs_mm.get("Material").unwrap()[0])
                    .unwrap(),
            )
        })
        .collect();
    let labels: Vec<Vec<f64>> = (0..values.len()).map(onehot).collect();
    let m = predict_attribute(&items, &products, &ds, "Material", &labels).unwrap();
    assert_eq!(m.accuracy, 1.0);

    let mut rng = Rng::new(9);
    let items = rand_rows(&mut rng, 1000, 16);
    let labels = rand_rows(&mut rng, values.len(), 16);
    let m = predict_attribute(&items, &products, &ds, "Material", &labels).unwrap();
    let p = 1.0 / values.len() as f64;
    let sd = (p * (1.0 - p) / 1000.0).sqrt();
    assert!((m.accuracy - p).abs() <= 3.0 * sd, "{}", m.accuracy);
    assert!(predict_attribute(&items, &products, &ds, "Size", &labels).is_err());
}

#[test]
fn embeddings_are_deterministic_unit_rows() {
    let ds = tiny_dataset(20);
    let m = Model::new(tiny_config()).unwrap();
    let p = &ds.products[0];
    let inputs = [
        view_input(p, Selector::Multimodal),
        view_input(p, Selector::Multimodal),
        view_input(p, Selector::Image),
        view_input(p, Selector::Text),
    ];
    let e = embed_corpus(&m, &inputs, true).unwrap();
    assert_eq!(e.rows.len(), 4);
    assert_eq!(e.rows[0], e.rows[1]);
    for r in &e.rows {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert_eq!(e, embed_corpus(&m, &inputs, true).unwrap());

    let mut other = p.clone();
    other.title = vec![ds.vocab.id("Red").unwrap(), ds.vocab.id("Silk").unwrap()];
    let img = embed_corpus(&m, &[view_input(&other, Selector::Image)], true).unwrap();
    assert_eq!(img.rows[0], e.rows[2]);
    let short = embed_corpus(&m, &inputs[..1], false).unwrap();
    assert!(short.rationales[0].is_empty());
}

#[test]
fn forced_representation_token() {
    assert_eq!(with_emb(&[]), vec![EMB]);
    assert_eq!(with_emb(&[9, EMB]), vec![9, EMB]);
    assert_eq!(with_emb(&[9, EOS]), vec![9, EMB]);
    assert_eq!(with_emb(&[9, 10]), vec![9, 10, EMB]);
}

#[test]
fn report_covers_every_task_and_is_stable() {
    let ds = tiny_dataset(30);
    let mut cfg = tiny_config();
    cfg.max_len = 24;
    let m = Model::new(cfg).unwrap();
    let opts = EvalOptions {
        pool: 12,
        ..EvalOptions::default()
    };
    let rep = evaluate(&m, &ds, &opts).unwrap();
    assert_eq!(rep.retrieval.len(), 5);
    for d in &rep.retrieval {
        assert!(d.recall[0] <= d.recall[1] && d.recall[1] <= d.recall[2]);
        assert!(d.recall.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    assert_eq!(rep.pool, 12);
    assert!(rep.classify.is_some());
    assert_eq!(
        rep.attrs.as_ref().unwrap().0.len(),
        ds.schema.num_keys() - 1
    );
    let text = rep.render();
    for key in ["i->mm", "t->mm", "mm->mm", "i->t", "t->i"] {
        assert!(text.contains(&format!("retrieval.{key}.R@10=")));
    }
    assert!(text.contains("classify.f1=") && text.contains("attr.mean.acc="));
    assert_eq!(text, evaluate(&m, &ds, &opts).unwrap().render());

    let only = EvalOptions {
        tasks: Tasks::parse("classify").unwrap(),
        ..opts
    };
    let rep = evaluate(&m, &ds, &only).unwrap();
    assert!(rep.retrieval.is_empty() && rep.attrs.is_none());
    assert!(Tasks::parse("retrieval,bogus").is_err());
    assert!(Tasks::parse("").is_err());
}

#[test]
fn query_pools_hold_positive_and_negative() {
    let all: Vec<usize> = (0..40).collect();
    let mut rng = Rng::new(11);
    for i in 0..40 {
        let p = query_pool(&all, i, (i + 1) % 40, 10, &mut rng);
        assert_eq!(p.len(), 10);
        assert!(p.contains(&i) && p.contains(&((i + 1) % 40)));
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }
    assert_eq!(query_pool(&all, 3, 4, 100, &mut rng), all);
}
