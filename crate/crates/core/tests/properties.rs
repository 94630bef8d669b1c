use dmf_core::fusion::{Modality, PatchGrid, TranslatorInput};
use dmf_core::losses::{id_loss, pairwise_sq_dist, triplet_loss_batch_hard, TripletBatch};
use dmf_core::model::{FusionModel, ModelConfig, ModelShape};
use dmf_core::numerics::layers::{
    batch_norm_train, batch_norm_train_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows, softmax_rows_backward,
};
use dmf_core::numerics::{sgd_step, DenseArray, LrSchedule, ParamStore, ScheduleKind};
use dmf_core::retrieval_eval::{compute_cmc_map, rank, FeatureRow, FeatureSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(out: &DenseArray, c: &DenseArray) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` in every coordinate of `x`.
fn numeric_grad(x: &DenseArray, mut f: impl FnMut(&DenseArray) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        assert!(rel < 1e-4 || (a - n).abs() < 1e-9, "{what}[{i}]: analytic {a}, numeric {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_gradients(m in 1usize..5, a in 1usize..6, b in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut rng, &[m, a]);
        let w = random_array(&mut rng, &[a, b]);
        let bias = random_array(&mut rng, &[b]);
        let c = random_array(&mut rng, &[m, b]);
        let mut dw = vec![0.0; a * b];
        let mut db = vec![0.0; b];
        let dx = linear_backward(&x, &w, &c, &mut dw, Some(&mut db));
        assert_close(dx.data(), &numeric_grad(&x, |x| weighted_sum(&linear(x, &w, Some(&bias)).unwrap(), &c)), "dx");
        assert_close(&dw, &numeric_grad(&w, |w| weighted_sum(&linear(&x, w, Some(&bias)).unwrap(), &c)), "dw");
        assert_close(&db, &numeric_grad(&bias, |bb| weighted_sum(&linear(&x, &w, Some(bb)).unwrap(), &c)), "db");
    }

    #[test]
    fn layer_norm_gradients(m in 1usize..4, d in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut rng, &[m, d]);
        let g = random_array(&mut rng, &[d]);
        let beta = random_array(&mut rng, &[d]);
        let c = random_array(&mut rng, &[m, d]);
        let (_, cache) = layer_norm(&x, &g, &beta, 1e-5).unwrap();
        let mut dg = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let dx = layer_norm_backward(&cache, &g, &c, &mut dg, &mut dbeta);
        let f = |x: &DenseArray, g: &DenseArray, b: &DenseArray| weighted_sum(&layer_norm(x, g, b, 1e-5).unwrap().0, &c);
        assert_close(dx.data(), &numeric_grad(&x, |x| f(x, &g, &beta)), "dx");
        assert_close(&dg, &numeric_grad(&g, |g| f(&x, g, &beta)), "dgamma");
        assert_close(&dbeta, &numeric_grad(&beta, |b| f(&x, &g, b)), "dbeta");
    }

    #[test]
    fn batch_norm_gradients(b in 2usize..6, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut rng, &[b, d]);
        let g = random_array(&mut rng, &[d]);
        let beta = random_array(&mut rng, &[d]);
        let c = random_array(&mut rng, &[b, d]);
        let (_, cache, _, _) = batch_norm_train(&x, &g, &beta, 1e-5).unwrap();
        let mut dg = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let dx = batch_norm_train_backward(&cache, &g, &c, &mut dg, &mut dbeta);
        let f = |x: &DenseArray, g: &DenseArray, bb: &DenseArray| weighted_sum(&batch_norm_train(x, g, bb, 1e-5).unwrap().0, &c);
        assert_close(dx.data(), &numeric_grad(&x, |x| f(x, &g, &beta)), "dx");
        assert_close(&dg, &numeric_grad(&g, |g| f(&x, g, &beta)), "dgamma");
        assert_close(&dbeta, &numeric_grad(&beta, |bb| f(&x, &g, bb)), "dbeta");
    }

    #[test]
    fn softmax_gradients(m in 1usize..4, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut rng, &[m, n]);
        let c = random_array(&mut rng, &[m, n]);
        let dx = softmax_rows_backward(&softmax_rows(&x), &c);
        assert_close(dx.data(), &numeric_grad(&x, |x| weighted_sum(&softmax_rows(x), &c)), "dx");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..9), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let n = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
        let x = DenseArray::from_rows(&rows).unwrap();
        let y = softmax_rows(&x);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += shift);
        let ys = softmax_rows(&shifted);
        for r in 0..y.rows() {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
            for (a, b) in y.row(r).iter().zip(ys.row(r)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cosine_schedule_closed_form(base in 1e-4f64..1.0, total in 1usize..2000) {
        let s = LrSchedule { base_lr: base, total_iters: total, kind: ScheduleKind::Cosine };
        prop_assert_eq!(s.lr(0), base);
        prop_assert!(s.lr(total).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = s.lr(t);
            let expect = base * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0;
            prop_assert!((lr - expect).abs() <= 1e-15);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn sgd_descends_convex_quadratic(curv in 0.1f64..10.0, start in -5.0f64..5.0, frac in 0.05f64..0.95) {
        let mut store = ParamStore::new();
        let w = store.insert("w", DenseArray::from_vec(&[1], vec![start]).unwrap(), true, false).unwrap();
        let frozen = store.insert("f", DenseArray::from_vec(&[1], vec![start]).unwrap(), false, false).unwrap();
        let lr = frac * 2.0 / curv;
        let mut loss = 0.5 * curv * start * start;
        for _ in 0..20 {
            let v = store.value(w).data()[0];
            store.entry_mut(w).grad.data_mut()[0] = curv * v;
            store.entry_mut(frozen).grad.data_mut()[0] = 5.0;
            sgd_step(&mut store, lr, 0.0, 0.0).unwrap();
            let v = store.value(w).data()[0];
            let next = 0.5 * curv * v * v;
            prop_assert!(next <= loss);
            loss = next;
        }
        prop_assert_eq!(store.value(frozen).data()[0].to_bits(), start.to_bits());
    }

    #[test]
    fn pairwise_distances_are_symmetric_and_translation_invariant(
        b in 2usize..8, d in 1usize..6, seed in any::<u64>(), t in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_array(&mut rng, &[b, d]);
        let dist = pairwise_sq_dist(&f);
        let mut moved = f.clone();
        moved.data_mut().iter_mut().for_each(|v| *v += t);
        let dm = pairwise_sq_dist(&moved);
        for i in 0..b {
            prop_assert_eq!(dist.get2(i, i), 0.0);
            for j in 0..b {
                prop_assert_eq!(dist.get2(i, j).to_bits(), dist.get2(j, i).to_bits());
                prop_assert!(dist.get2(i, j) >= 0.0);
                prop_assert!((dist.get2(i, j) - dm.get2(i, j)).abs() <= 1e-12 * (1.0 + dist.get2(i, j)));
            }
        }
    }

    #[test]
    fn triplet_loss_is_permutation_invariant(p in 2usize..5, k in 2usize..4, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = p * k;
        let f = random_array(&mut rng, &[b, d]);
        let labels: Vec<u32> = (0..b).map(|i| (i / k) as u32 * 3 + 1).collect();
        let loss = triplet_loss_batch_hard(&TripletBatch::new(f.clone(), labels.clone(), Modality::Image).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.row(i).to_vec()).collect();
        let pl: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = triplet_loss_batch_hard(&TripletBatch::new(DenseArray::from_rows(&rows).unwrap(), pl, Modality::Image).unwrap()).unwrap();
        prop_assert!((loss - permuted).abs() <= 1e-12);
    }

    #[test]
    fn id_loss_is_shift_invariant(b in 1usize..5, m in 2usize..7, seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_array(&mut rng, &[b, m]);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let mut shifted = logits.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += c);
        let a = id_loss(&logits, &labels, 0.0).unwrap();
        let s = id_loss(&shifted, &labels, 0.0).unwrap();
        prop_assert!((a - s).abs() < 1e-12);
    }
}

fn feature_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, ids: u32, cams: u32) -> FeatureSet {
    FeatureSet {
        rows: (0..n)
            .map(|_| FeatureRow {
                identity_id: rng.random_range(0..ids),
                camera_id: rng.random_range(0..cams),
                domain_id: 0,
                feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cmc_is_monotone_and_map_bounded(seed in any::<u64>(), nq in 1usize..10, ng in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = feature_set(&mut rng, nq, 3, 5, 3);
        let g = feature_set(&mut rng, ng, 3, 5, 3);
        let m = compute_cmc_map(&rank(&q, &g).unwrap(), &q, &g, 20);
        for w in m.cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!((0.0..=1.0).contains(&m.map));
        prop_assert_eq!(m.evaluated + m.dropped, nq);
    }

    #[test]
    fn metrics_ignore_gallery_order_and_scale(seed in any::<u64>(), nq in 1usize..8, ng in 2usize..50, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = feature_set(&mut rng, nq, 4, 4, 3);
        let g = feature_set(&mut rng, ng, 4, 4, 3);
        let base = compute_cmc_map(&rank(&q, &g).unwrap(), &q, &g, 10);

        let mut perm: Vec<usize> = (0..ng).collect();
        for i in (1..ng).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let gp = FeatureSet { rows: perm.iter().map(|&i| g.rows[i].clone()).collect() };
        let permuted = compute_cmc_map(&rank(&q, &gp).unwrap(), &q, &gp, 10);
        prop_assert!((base.map - permuted.map).abs() <= 1e-12);
        prop_assert_eq!(&base.cmc, &permuted.cmc);

        let scale = |s: &FeatureSet| FeatureSet {
            rows: s.rows.iter().map(|r| FeatureRow { feature: r.feature.iter().map(|v| v * c).collect(), ..r.clone() }).collect(),
        };
        let (qs, gs) = (scale(&q), scale(&g));
        let rs = rank(&qs, &gs).unwrap();
        let r0 = rank(&q, &g).unwrap();
        prop_assert_eq!(&rs, &r0);
        let scaled = compute_cmc_map(&rs, &qs, &gs, 10);
        prop_assert_eq!(scaled.map.to_bits(), base.map.to_bits());
    }
}

fn tiny_model() -> (FusionModel, ParamStore) {
    let cfg = ModelConfig {
        patch_height: 4,
        patch_width: 4,
        image_dim: 8,
        text_dim: 8,
        transformer: dmf_core::backbone::TransformerConfig {
            depth: 1,
            heads: 2,
            model_dim: 8,
            mlp_ratio: 2,
            ..Default::default()
        },
        init_std: 0.3,
        ..Default::default()
    };
    let shape = ModelShape {
        image_height: 24,
        image_width: 12,
        channels: 3,
        vocab: 40,
        num_classes: 3,
    };
    FusionModel::init(&cfg, &shape, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn grid_from(rng: &mut ChaCha8Rng) -> PatchGrid {
    let px = DenseArray::from_vec(&[24, 12, 3], (0..24 * 12 * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
    dmf_core::fusion::split_pixels(&px, 4, 4).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_patch_changes_one_row(seed in any::<u64>(), which in 0usize..18) {
        let (model, store) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = grid_from(&mut rng);
        let mut b = a.clone();
        b.patches.row_mut(which).iter_mut().for_each(|v| *v = 1.0 - *v);
        let sa = model.translate(&store, &TranslatorInput::Patches(&a), 0).unwrap();
        let sb = model.translate(&store, &TranslatorInput::Patches(&b), 0).unwrap();
        for r in 0..sa.tokens.rows() {
            prop_assert_eq!(sa.tokens.row(r) != sb.tokens.row(r), r == which + 1);
        }
    }

    #[test]
    fn one_word_changes_one_row(seed in any::<u64>(), which in 0usize..6) {
        let (model, store) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..6).map(|_| rng.random_range(1..40)).collect();
        let mut b = a.clone();
        b[which] = if a[which] == 39 { 1 } else { a[which] + 1 };
        let sa = model.translate(&store, &TranslatorInput::Tokens(&a), 0).unwrap();
        let sb = model.translate(&store, &TranslatorInput::Tokens(&b), 0).unwrap();
        prop_assert_eq!(sa.tokens.shape(), &[19, 8][..]);
        for r in 0..sa.tokens.rows() {
            prop_assert_eq!(sa.tokens.row(r) != sb.tokens.row(r), r == which + 1);
        }
    }

    #[test]
    fn position_lives_only_in_the_position_embedding(seed in any::<u64>()) {
        let (model, mut store) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = grid_from(&mut rng);
        let n = grid.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let before = model.translate(&store, &TranslatorInput::Patches(&grid), 0).unwrap();
        let mut permuted = grid.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.patches.row_mut(dst).copy_from_slice(grid.patches.row(src));
        }
        let pos = store.by_path("image.pos").unwrap().value.clone();
        let mut pos_perm = pos.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pos_perm.row_mut(dst + 1).copy_from_slice(pos.row(src + 1));
        }
        store.by_path_mut("image.pos").unwrap().value = pos_perm;
        let after = model.translate(&store, &TranslatorInput::Patches(&permuted), 0).unwrap();
        prop_assert_eq!(before.tokens.row(0), after.tokens.row(0));
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(before.tokens.row(src + 1), after.tokens.row(dst + 1));
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in any::<u64>()) {
        let (model, store) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids: Vec<PatchGrid> = (0..3).map(|_| grid_from(&mut rng)).collect();
        let inputs: Vec<_> = grids.iter().map(TranslatorInput::Patches).collect();
        let a = model.embed(&store, &inputs).unwrap();
        let b = model.embed(&store, &inputs).unwrap();
        prop_assert_eq!(a.data(), b.data());
        for r in 0..a.rows() {
            prop_assert!((a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
    }
}
