use cm3_core::autodiff::Param;
use cm3_core::fusion::{FusionConfig, FusionMode};
use cm3_core::graphs::{build_interaction_graph, build_item_item_graph};
use cm3_core::model::{
    forward, init_params, mine_preferences, score, top_k, Checkpoint, ModelConfig, ModelInputs,
};
use cm3_core::numerics::{DenseMatrix, Rng};

fn config(mode: FusionMode, normalize: bool) -> ModelConfig {
    ModelConfig {
        d: 3,
        hidden_dim: 5,
        leaky_slope: 0.01,
        modalities: vec!["a".into(), "b".into()],
        input_dims: vec![4, 2],
        n_users: 4,
        n_items: 6,
        layers_ui: 2,
        layers_ii: 1,
        knn_k: 2,
        normalize,
        fusion: FusionConfig {
            mode,
            ..FusionConfig::default()
        },
    }
}

fn inputs(rng: &mut Rng) -> ModelInputs {
    let fa = DenseMatrix::from_fn(6, 4, |_, _| rng.normal());
    let fb = DenseMatrix::from_fn(6, 2, |_, _| rng.normal());
    let edges = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 4), (3, 0), (3, 4)];
    ModelInputs {
        interactions: build_interaction_graph(&edges, 4, 6).unwrap(),
        item_graph: build_item_item_graph(&[&fa, &fb], 2, None).unwrap(),
        features: vec![fa, fb],
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn slerp(a: &[f64], b: &[f64], l: f64) -> Vec<f64> {
    let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    let th = c.acos();
    let (wa, wb) = ((l * th).sin() / th.sin(), ((1.0 - l) * th).sin() / th.sin());
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// The full forward pass recomputed row by row with dense matrices.
fn oracle(p: &cm3_core::model::ModelParams, inp: &ModelInputs, cfg: &ModelConfig, lambda: f64) -> (DenseMatrix, DenseMatrix) {
    let mut blocks = Vec::new();
    for (m, x) in inp.features.iter().enumerate() {
        let pr = &p.projectors[m];
        let mut h = x.matmul(&pr.w1.value);
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                let v = h.get(r, c) + pr.b1.value.get(0, c);
                h.set(r, c, if v > 0.0 { v } else { 0.01 * v });
            }
        }
        let z = h.matmul(&pr.w2.value);
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|r| normalize(z.row(r))).collect();
        blocks.push(rows);
    }
    let n = cfg.n_items;
    let mut x0 = Vec::new();
    for i in 0..n {
        let mut row = Vec::new();
        for b in &blocks {
            row.extend_from_slice(&b[i]);
        }
        match cfg.fusion.mode {
            FusionMode::Slerp => row.extend(slerp(&blocks[1][i], &blocks[0][i], lambda)),
            FusionMode::Linear => row.extend(blocks[1][i].iter().zip(&blocks[0][i]).map(|(a, b)| lambda * a + (1.0 - lambda) * b)),
            FusionMode::None => {}
        }
        x0.push(row);
    }
    let x0 = DenseMatrix::from_rows(&x0).unwrap();
    let a = inp.interactions.bipartite_adjacency().to_dense();
    let (nu, ni) = (cfg.n_users, cfg.n_items);
    let r = DenseMatrix::from_fn(nu, ni, |u, i| a.get(u, nu + i));
    let (mut e, mut x) = (p.users.value.clone(), x0.clone());
    let (mut es, mut xs) = (e.clone(), x.clone());
    for _ in 0..cfg.layers_ui {
        let en = r.matmul(&x);
        let xn = r.transpose().matmul(&e);
        es = es.add(&en);
        xs = xs.add(&xn);
        e = en;
        x = xn;
    }
    let d = cfg.d;
    let users = DenseMatrix::from_fn(nu, es.cols(), |u, c| es.get(u, c) * p.preferences.value.get(u, c / d));
    let s = inp.item_graph.matrix().to_dense();
    let items = s.matmul(&xs).add(&xs);
    if cfg.normalize {
        let nr = |m: &DenseMatrix| DenseMatrix::from_rows(&(0..m.rows()).map(|r| normalize(m.row(r))).collect::<Vec<_>>()).unwrap();
        (nr(&users), nr(&items))
    } else {
        (users, items)
    }
}

#[test]
fn forward_matches_dense_oracle() {
    for (mode, normalize) in [(FusionMode::Slerp, true), (FusionMode::Linear, false), (FusionMode::None, true)] {
        let mut rng = Rng::new(3);
        let cfg = config(mode, normalize);
        let inp = inputs(&mut rng);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        p.preferences = Param::new("preferences", DenseMatrix::from_fn(4, cfg.segments(), |_, _| rng.uniform_range(0.5, 1.5)));
        let rep = forward(&p, &inp, &cfg, 0.3).unwrap();
        let (u, i) = oracle(&p, &inp, &cfg, 0.3);
        assert!(rep.users.max_abs_diff(&u) < 1e-10, "{mode}");
        assert!(rep.items.max_abs_diff(&i) < 1e-10, "{mode}");
        assert_eq!(rep.items.cols(), cfg.width());
    }
}

#[test]
fn checkpoint_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4);
    let cfg = config(FusionMode::Slerp, true);
    let inp = inputs(&mut rng);
    let p = init_params(&cfg, &mut rng).unwrap();
    let ck = Checkpoint {
        config: cfg.clone(),
        params: p.clone(),
        meta: serde_json::json!({}),
    };
    let path = dir.path().join("m.cm3c");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(forward(&back.params, &inp, &back.config, 0.5).unwrap(), forward(&p, &inp, &cfg, 0.5).unwrap());
}

#[test]
fn top_k_matches_brute_force() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let users = DenseMatrix::from_fn(5, 3, |_, _| rng.normal());
        // rounded values produce ties
        let items = DenseMatrix::from_fn(6, 3, |_, _| (rng.normal() * 2.0).round() / 2.0);
        for u in 0..5 {
            let exclude: Vec<usize> = (0..6).filter(|_| rng.uniform() < 0.3).collect();
            let mut all: Vec<(f64, usize)> = (0..6)
                .filter(|i| !exclude.contains(i))
                .map(|i| ((0..3).map(|c| users.get(u, c) * items.get(i, c)).sum(), i))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in 1..=6 {
                let want: Vec<usize> = all.iter().take(k).map(|p| p.1).collect();
                assert_eq!(top_k(&users, &items, u, k, &exclude).unwrap(), want);
            }
            for i in 0..6 {
                let s: f64 = (0..3).map(|c| users.get(u, c) * items.get(i, c)).sum();
                assert!((score(&users, &items, u, i).unwrap() - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ranking_ignores_positive_user_rescaling() {
    let mut rng = Rng::new(6);
    let users = DenseMatrix::from_fn(4, 5, |_, _| rng.normal());
    let items = DenseMatrix::from_fn(20, 5, |_, _| rng.normal());
    let scaled = DenseMatrix::from_fn(4, 5, |r, c| users.get(r, c) * (r as f64 + 0.5) * 3.0);
    for u in 0..4 {
        assert_eq!(top_k(&users, &items, u, 20, &[]).unwrap(), top_k(&scaled, &items, u, 20, &[]).unwrap());
    }
}

#[test]
fn mine_preferences_matches_loop() {
    let mut rng = Rng::new(7);
    let e = DenseMatrix::from_fn(3, 6, |_, _| rng.normal());
    let w = DenseMatrix::from_fn(3, 3, |_, _| rng.normal());
    let got = mine_preferences(&e, &w).unwrap();
    for u in 0..3 {
        for c in 0..6 {
            assert_eq!(got.get(u, c), e.get(u, c) * w.get(u, c / 2));
        }
    }
    assert_eq!(mine_preferences(&e, &DenseMatrix::filled(3, 3, 1.0)).unwrap(), e);
    assert!(mine_preferences(&e, &DenseMatrix::filled(3, 4, 1.0)).is_err());
}

#[test]
fn two_by_two_with_hand_set_weights() {
    let cfg = ModelConfig {
        d: 2,
        hidden_dim: 2,
        input_dims: vec![2, 2],
        n_users: 2,
        n_items: 2,
        knn_k: 1,
        ..config(FusionMode::Slerp, true)
    };
    let fa = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let fb = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let inp = ModelInputs {
        interactions: build_interaction_graph(&[(0, 0), (1, 0), (1, 1)], 2, 2).unwrap(),
        item_graph: build_item_item_graph(&[&fa, &fb], 1, None).unwrap(),
        features: vec![fa, fb],
    };
    let mut p = init_params(&cfg, &mut Rng::new(0)).unwrap();
    for pr in &mut p.projectors {
        pr.w1.value = DenseMatrix::identity(2);
        pr.b1.value = DenseMatrix::from_rows(&[vec![0.0, -0.5]]).unwrap();
        pr.w2.value = DenseMatrix::identity(2);
    }
    p.users.value = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], vec![0.0, 1.0, 1.0, 0.0, -0.5, 0.5]]).unwrap();
    p.preferences.value = DenseMatrix::from_rows(&[vec![1.0, 2.0, 1.0], vec![0.5, 1.0, 1.0]]).unwrap();
    // modality a: rows (1, -0.005) and (0, 1.5) normalize to
    // (0.99999, -0.005) and (0, 1); modality b: (0, 1) and (1, 0.5)/|.|
    let rep = forward(&p, &inp, &cfg, 0.5).unwrap();
    let (u, i) = oracle(&p, &inp, &cfg, 0.5);
    assert!(rep.users.max_abs_diff(&u) < 1e-12);
    assert!(rep.items.max_abs_diff(&i) < 1e-12);
    // item-item graph: each item is the other's only neighbour, so S = [[0,1],[1,0]]
    let s = inp.item_graph.matrix().to_dense();
    assert_eq!(s, DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
}
