//! Production kernels against scalar-loop references written in this file
//! or in `verify::oracles`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bginet_core::data::{render_comparison_map, FN_COLOR, FP_COLOR, TN_COLOR, TP_COLOR};
use bginet_core::loss::{dice_loss, focal_loss, total_loss, LossConfig};
use bginet_core::verify::{max_abs_diff, naive_interact, naive_project};
use bginet_core::{
    affinity, change_head, confusion, encode_vertices, inter_affinity, interact, project, qkv_transform, reproject,
    soft_assign, ChangeHead, FeatureMap, InteractionParams, Phase, ProjectionParams,
};

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * scale
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::new(Array3::from_shape_simple_fn((d, h, w), || normal(rng, 1.0)), 16)
}

fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ProjectionParams<f64> {
    let mut p = ProjectionParams::new(k, d, rng);
    p.scale_logits.value.mapv_inplace(|_| normal(rng, 0.5));
    p
}

fn rows(x: &FeatureMap<f64>) -> Vec<Vec<f64>> {
    x.to_pixel_rows().outer_iter().map(|r| r.to_vec()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn projection_matches_loop_oracle_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (k, d) = (rng.gen_range(1..=4), rng.gen_range(1..=8));
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let x = random_map(&mut rng, d, h, w);
        let params = random_params(&mut rng, k, d);
        let fast = project(&x, &params).unwrap();
        let slow = naive_project(&rows(&x), &params);
        worst = worst
            .max(max_abs_diff(&fast.assignment, &slow.assignment))
            .max(max_abs_diff(&fast.vertex_features, &slow.vertex_features))
            .max(max_abs_diff(&fast.affinity, &slow.affinity));
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

#[test]
fn soft_assign_and_vertex_encoding_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_map(&mut rng, 4, 3, 3);
    let params = random_params(&mut rng, 3, 4);
    let q = soft_assign(&x, &params).unwrap();
    assert!(max_abs_diff(&q, &naive_project(&rows(&x), &params).assignment) <= 1e-6);

    let x = random_map(&mut rng, 8, 4, 4);
    let params = random_params(&mut rng, 4, 8);
    let q = soft_assign(&x, &params).unwrap();
    let z = encode_vertices(&x, &q, &params).unwrap().features;
    assert!(max_abs_diff(&z, &naive_project(&rows(&x), &params).vertex_features) <= 1e-6);
}

#[test]
fn affinity_of_unit_rows_is_a_cosine_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut z = Array2::from_shape_simple_fn((5, 6), || normal(&mut rng, 1.0));
    for mut row in z.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let a = affinity(&z);
    for i in 0..5 {
        for j in 0..5 {
            let dot: f64 = (0..6).map(|c| z[[i, c]] * z[[j, c]]).sum();
            assert!((a[[i, j]] - dot).abs() <= 1e-6);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a[[i, j]]));
        }
        assert!((a[[i, i]] - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn interaction_matches_loop_oracle_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(1..=4);
        let d = 2 * rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let x1 = random_map(&mut rng, d, h, w);
        let x2 = random_map(&mut rng, d, x1.height(), x1.width());
        let proj = random_params(&mut rng, k, d);
        let mut params = InteractionParams::<f64>::new(d, &mut rng).unwrap();
        params.randomize_biases(&mut rng);
        let (g1, g2) = (project(&x1, &proj).unwrap(), project(&x2, &proj).unwrap());
        let (o1, o2) = interact(&g1, &g2, &params).unwrap();
        let as_mat = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (n1, n2) = naive_interact(&as_mat(&g1.vertex_features), &as_mat(&g2.vertex_features), &params);
        worst = worst.max(max_abs_diff(&o1, &n1)).max(max_abs_diff(&o2, &n2));
    }
    assert!(worst <= 1e-5, "max deviation {worst:e}");
}

trait RandomBiases {
    fn randomize_biases(&mut self, rng: &mut ChaCha8Rng);
}

impl RandomBiases for InteractionParams<f64> {
    fn randomize_biases(&mut self, rng: &mut ChaCha8Rng) {
        for a in [
            &mut self.query_1,
            &mut self.query_2,
            &mut self.key_1,
            &mut self.key_2,
            &mut self.value_1,
            &mut self.value_2,
        ] {
            a.bias.value.mapv_inplace(|_| normal(rng, 0.3));
        }
    }
}

#[test]
fn interaction_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = InteractionParams::<f64>::new(4, &mut rng).unwrap();
    let zeros = vec![vec![0.0; 4]; 3];
    let (a, b) = naive_interact(&zeros, &zeros, &params);
    assert!(a.iter().chain(&b).flatten().all(|&v| v == 0.0));

    let mut sym = params.clone();
    sym.query_2 = sym.query_1.clone();
    sym.key_2 = sym.key_1.clone();
    sym.value_2 = sym.value_1.clone();
    sym.gcn_2 = sym.gcn_1.clone();
    let z: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| normal(&mut rng, 1.0)).collect()).collect();
    let (a, b) = naive_interact(&z, &z, &sym);
    assert_eq!(a, b);
}

#[test]
fn qkv_matches_matrix_multiply_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = InteractionParams::<f64>::new(4, &mut rng).unwrap();
    params.randomize_biases(&mut rng);
    let z = Array2::from_shape_simple_fn((3, 4), || normal(&mut rng, 1.0));
    for (phase, (qa, ka, va)) in [
        (Phase::First, (&params.query_1, &params.key_1, &params.value_1)),
        (Phase::Second, (&params.query_2, &params.key_2, &params.value_2)),
    ] {
        let (q, k, v) = qkv_transform(&z, &params, phase).unwrap();
        for (out, aff) in [(&q, qa), (&k, ka), (&v, va)] {
            let w = aff.weight_view();
            for r in 0..3 {
                for o in 0..aff.output_dim() {
                    let mut s = aff.bias.value[o];
                    for i in 0..4 {
                        s += w[[o, i]] * z[[r, i]];
                    }
                    assert!((out[[r, o]] - s).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn inter_affinity_is_softmax_of_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let zq = Array2::from_shape_simple_fn((3, 4), || normal(&mut rng, 1.0));
    let zk = Array2::from_shape_simple_fn((3, 4), || normal(&mut rng, 1.0));
    let a = inter_affinity(&zq, &zk).unwrap();
    for i in 0..3 {
        let scores: Vec<f64> = (0..3).map(|j| (0..4).map(|c| zq[[i, c]] * zk[[j, c]]).sum()).collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            assert!((a[[i, j]] - scores[j].exp() / total).abs() <= 1e-6);
        }
    }
}

#[test]
fn reprojection_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random_map(&mut rng, 5, 3, 3);
    let q = Array2::from_shape_simple_fn((9, 2), || rng.gen::<f64>());
    let zt = Array2::from_shape_simple_fn((2, 5), || normal(&mut rng, 1.0));
    let out = reproject(&q, &zt, &x).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            for c in 0..5 {
                let p = i * 3 + j;
                let want = x.data[[c, i, j]] + q[[p, 0]] * zt[[0, c]] + q[[p, 1]] * zt[[1, c]];
                assert!((out.data[[c, i, j]] - want).abs() <= 1e-6);
            }
        }
    }
}

fn bilinear_sample(low: &Array2<f64>, y: usize, x: usize, scale: usize) -> f64 {
    let coord = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        (lo, (lo + 1).min(n - 1), src - lo as f64)
    };
    let (y0, y1, fy) = coord(y, low.nrows());
    let (x0, x1, fx) = coord(x, low.ncols());
    let top = low[[y0, x0]] * (1.0 - fx) + low[[y0, x1]] * fx;
    let bottom = low[[y1, x0]] * (1.0 - fx) + low[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[test]
fn change_head_matches_conv_and_bilinear_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (x1, x2) = (random_map(&mut rng, 6, 4, 4), random_map(&mut rng, 6, 4, 4));
    let mut head = ChangeHead::<f64>::new(6, &mut rng);
    head.bias.value[0] = 0.3;
    let map = change_head(&x1, &x2, &head).unwrap();
    assert_eq!(map.dim(), (64, 64));
    let low = Array2::from_shape_fn((4, 4), |(i, j)| {
        head.bias.value[0] + (0..6).map(|c| head.weight.value[c] * (x1.data[[c, i, j]] - x2.data[[c, i, j]]).abs()).sum::<f64>()
    });
    for y in 0..64 {
        for x in 0..64 {
            let want = bilinear_sample(&low, y, x, 16);
            assert!((map.logits[[y, x]] - want).abs() <= 1e-5, "({y},{x})");
            assert!((map.probabilities[[y, x]] - sigmoid(want)).abs() <= 1e-5);
        }
    }
}

#[test]
fn focal_at_one_half_matches_loop() {
    let cfg = LossConfig::default();
    let prob = Array2::from_elem((4, 4), 0.5);
    let gt = Array2::from_shape_fn((4, 4), |(i, _)| u8::from(i < 2));
    let mut sum = 0.0;
    for &g in gt.iter() {
        let alpha_t = if g == 1 { cfg.alpha } else { 1.0 - cfg.alpha };
        sum += -alpha_t * 0.5f64.powf(cfg.gamma) * 0.5f64.ln();
    }
    let want = sum / 16.0;
    assert!((focal_loss(prob.view(), gt.view(), &cfg).unwrap() - want).abs() < 1e-12);
}

fn dice_oracle(prob: &Array2<f64>, gt: &Array2<u8>, eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (p, &g) in prob.iter().zip(gt.iter()) {
        inter += p * g as f64;
        sp += p;
        sg += g as f64;
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

fn focal_oracle(prob: &Array2<f64>, gt: &Array2<u8>, cfg: &LossConfig) -> f64 {
    let mut sum = 0.0;
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        let (pt, a) = if g == 1 { (p, cfg.alpha) } else { (1.0 - p, 1.0 - cfg.alpha) };
        sum += -a * (1.0 - pt).powf(cfg.gamma) * pt.ln();
    }
    sum / prob.len() as f64
}

#[test]
fn dice_and_total_loss_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = LossConfig::default();
    let gt = Array2::from_shape_fn((6, 6), |(i, j)| u8::from((i + 2 * j) % 3 == 0));
    for _ in 0..5 {
        let logits = Array2::from_shape_simple_fn((6, 6), || normal(&mut rng, 2.0));
        let prob = logits.mapv(sigmoid);
        let d = dice_loss(prob.view(), gt.view(), &cfg).unwrap();
        assert!((d - dice_oracle(&prob, &gt, cfg.epsilon)).abs() <= 1e-9);
        let want = cfg.lambda1 * focal_oracle(&prob, &gt, &cfg) + cfg.lambda2 * dice_oracle(&prob, &gt, cfg.epsilon);
        assert!((total_loss(logits.view(), gt.view(), &cfg).unwrap() - want).abs() <= 1e-9);
    }
}

#[test]
fn confusion_matches_hand_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let prob = Array2::from_shape_simple_fn((8, 8), || rng.gen::<f64>());
    let gt = Array2::from_shape_simple_fn((8, 8), || u8::from(rng.gen_bool(0.4)));
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        match (p >= 0.5, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let c = confusion(prob.view(), gt.view(), 0.5).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
}

#[test]
fn comparison_map_colors() {
    let pred = ndarray::array![[1u8, 1], [0, 0]];
    let gt = ndarray::array![[1u8, 0], [1, 0]];
    let img = render_comparison_map(pred.view(), gt.view()).unwrap();
    let px = |i, j| [img[[i, j, 0]], img[[i, j, 1]], img[[i, j, 2]]];
    assert_eq!(px(0, 0), [255, 255, 0]);
    assert_eq!(px(0, 1), [255, 0, 0]);
    assert_eq!(px(1, 0), [0, 0, 255]);
    assert_eq!(px(1, 1), [0, 0, 0]);
    assert_eq!((TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR), ([255, 255, 0], [255, 0, 0], [0, 0, 255], [0, 0, 0]));
    let all = ndarray::Array2::<u8>::ones((3, 3));
    assert!(render_comparison_map(all.view(), all.view()).unwrap().outer_iter().all(|r| r
        .outer_iter()
        .all(|p| p.to_vec() == [255, 255, 0])));
    let zero = ndarray::Array2::<u8>::zeros((3, 3));
    assert!(render_comparison_map(zero.view(), all.view()).unwrap().outer_iter().all(|r| r
        .outer_iter()
        .all(|p| p.to_vec() == [0, 0, 255])));
}
