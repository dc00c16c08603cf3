use proptest::prelude::*;

use tcve::diffusion::{ddim_invert_step, ddim_step, guided_eps};
use tcve::io::{decode_checkpoint, decode_ppm, encode_checkpoint, encode_ppm};
use tcve::metrics::frame_consistency_of;
use tcve::params::{ParamBuilder, ParamStore};
use tcve::rng::RngState;
use tcve::spatial::{f_spa, f_spa_inv, StageId};
use tcve::stu::{temporal_attention, Stu, StuAblation, StuGeometry};
use tcve::stubs::{decode_video, encode_video, PixelVideo};
use tcve::temporal::{f_tem, f_tem_inv, TemporalUnet, TemporalUnetConfig};
use tcve::tensor::softmax;
use tcve::Tensor;

fn shape5() -> impl Strategy<Value = [usize; 5]> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_map(|(a, b, c, d, e)| [a, b, c, d, e])
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..20.0) {
        let x = RngState::new(seed).normal_tensor::<f64>(&[rows, cols]).scale(scale);
        let y = softmax(&x, 1).unwrap();
        for (r, logits) in y.data().chunks(cols).zip(x.data().chunks(cols)) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let spread = logits.iter().cloned().fold(f64::MIN, f64::max) - logits.iter().cloned().fold(f64::MAX, f64::min);
            if cols == 1 {
                prop_assert_eq!(r[0], 1.0);
            } else if spread < 30.0 {
                // Wider spreads push entries within rounding of 0 or 1.
                prop_assert!(r.iter().all(|&v| v > 0.0 && v < 1.0), "{r:?}");
            } else {
                prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)), "{r:?}");
            }
        }
    }

    #[test]
    fn permute_then_inverse_is_identity((shape, order) in shape5().prop_flat_map(|s| (Just(s), permutation(5))), seed in any::<u64>()) {
        let x = RngState::new(seed).normal_tensor::<f32>(&shape);
        let back = x.permute(&order).unwrap().permute(&inverse(&order)).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn folds_invert_exactly(shape in shape5(), seed in any::<u64>()) {
        let x = RngState::new(seed).normal_tensor::<f64>(&shape);
        let [b, _, _, h, w] = shape;
        let spa = f_spa_inv(&f_spa(&x).unwrap(), b).unwrap();
        let tem = f_tem_inv(&f_tem(&x).unwrap(), b, h, w).unwrap();
        prop_assert_eq!(spa.data(), x.data());
        prop_assert_eq!(tem.data(), x.data());
        let flat = x.reshape(&[shape.iter().product()]).unwrap().reshape(&shape).unwrap();
        prop_assert_eq!(flat.data(), x.data());
    }

    #[test]
    fn rng_is_reproducible(seed in any::<u64>(), label in any::<u64>(), n in 1usize..64) {
        let a = RngState::new(seed).split(label).normal_vec(n, 1.0);
        let b = RngState::new(seed).split(label).normal_vec(n, 1.0);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ddim_steps_compose_to_identity(z in -4.0f64..4.0, e in -4.0f64..4.0, a in 1e-4f64..0.9999, b in 1e-4f64..0.9999) {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        let zt = Tensor::<f64>::from_f64(&[1], &[z]).unwrap();
        let eps = Tensor::<f64>::from_f64(&[1], &[e]).unwrap();
        // invert then step, and step then invert
        let up = ddim_invert_step(&zt, &eps, hi, lo).unwrap();
        let back = ddim_step(&up, &eps, lo, hi).unwrap().item().unwrap();
        let down = ddim_step(&zt, &eps, lo, hi).unwrap();
        let again = ddim_invert_step(&down, &eps, hi, lo).unwrap().item().unwrap();
        let scale = z.abs() + e.abs() * (hi / lo).sqrt();
        prop_assert!((back - z).abs() <= 1e-13 * scale, "{back} vs {z}");
        prop_assert!((again - z).abs() <= 1e-13 * scale, "{again} vs {z}");
    }

    #[test]
    fn unit_guidance_is_conditional(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let c = rng.normal_tensor::<f32>(&[2, 3, 4]);
        let u = rng.normal_tensor::<f32>(&[2, 3, 4]);
        let g = guided_eps(&c, &u, 1.0).unwrap();
        prop_assert_eq!(g.data(), c.data());
    }

    #[test]
    fn codec_round_trip_exact(f in 1usize..4, hh in 1usize..4, ww in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut rng = RngState::new(seed);
        let data: Vec<f32> = (0..3 * f * h * w).map(|_| rng.uniform() as f32).collect();
        let v = PixelVideo::new([1, 3, f, h, w], data).unwrap();
        let z: Tensor<f64> = encode_video(&v).unwrap();
        prop_assert_eq!(decode_video(&z).unwrap(), v);
    }

    #[test]
    fn frame_consistency_ignores_order((n, order) in (2usize..9).prop_flat_map(|n| (Just(n), permutation(n))), seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let e: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(16, 1.0)).collect();
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| e[i].clone()).collect();
        prop_assert_eq!(frame_consistency_of(&e).unwrap(), frame_consistency_of(&shuffled).unwrap());
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5)) {
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            let n = s.iter().product();
            store.insert(&format!("t{i}.w"), s, rng.normal_vec(n, 3.0).into_iter().map(|v| v as f32).collect(), i % 2 == 0).unwrap();
        }
        let bytes = encode_checkpoint(&store);
        let back: ParamStore<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn ppm_round_trip(h in 1usize..6, w in 1usize..6, bytes in prop::collection::vec(any::<u8>(), 75)) {
        let frame: Vec<f32> = (0..3 * h * w).map(|i| bytes[i % bytes.len()] as f32 / 255.0).collect();
        let enc = encode_ppm(&frame, h, w).unwrap();
        prop_assert_eq!(decode_ppm(&enc).unwrap(), (frame, h, w));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn temporal_down_stage_ledger(levels in 2usize..4, n in 1usize..5, mult in 1usize..4, c in 1usize..5, seed in any::<u64>()) {
        let cfg = TemporalUnetConfig { levels, time_dim: 8, ..TemporalUnetConfig::default() };
        let f = cfg.frame_divisor() * mult;
        let mut store = ParamStore::<f64>::new();
        let unet = TemporalUnet::new(&mut ParamBuilder::new(&mut store, RngState::new(seed), true, "temporal"), &cfg, c).unwrap();
        prop_assert!(store.iter().all(|p| p.trainable));
        let bind = store.bind(false);
        let t_emb = unet.time_embedding(&bind, 3).unwrap();
        let mut x = RngState::new(seed ^ 1).normal_tensor::<f64>(&[n, c, f]);
        for k in 0..levels - 1 {
            let (ck, fk) = (x.shape()[1], x.shape()[2]);
            let (_, out) = unet.down_stage(k, &bind, &x, &t_emb).unwrap();
            prop_assert_eq!(out.shape(), &[n, 2 * ck, fk / 2][..]);
            x = out;
        }
    }

    #[test]
    fn temporal_unet_keeps_rows_apart(rows in 2usize..6, seed in any::<u64>()) {
        let cfg = TemporalUnetConfig { time_dim: 8, ..TemporalUnetConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let unet = TemporalUnet::new(&mut ParamBuilder::new(&mut store, RngState::new(seed), true, "temporal"), &cfg, 3).unwrap();
        let bind = store.bind(false);
        let x = RngState::new(seed ^ 2).normal_tensor::<f64>(&[rows, 3, 4]);
        let order: Vec<usize> = (0..rows).rev().collect();
        let permute_rows = |t: &Tensor<f64>| {
            let row = t.numel() / rows;
            let data: Vec<f64> = order.iter().flat_map(|&r| t.data()[r * row..(r + 1) * row].to_vec()).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let a = unet.forward(&bind, &permute_rows(&x), 5).unwrap();
        let b = unet.forward(&bind, &x, 5).unwrap();
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            prop_assert_eq!(ia, ib);
            let expect = permute_rows(tb);
            prop_assert_eq!(ta.data(), expect.data());
        }
    }

    #[test]
    fn stu_attention_frame_equivariant(order in permutation(4), seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rng.normal_tensor::<f64>(&[1, 3, 4, 2, 2]);
        let w: Vec<Tensor<f64>> = (0..3).map(|_| rng.normal_tensor(&[3, 3])).collect();
        let frames = |t: &Tensor<f64>| {
            let parts: Vec<Tensor<f64>> = (0..4).map(|i| {
                let d: Vec<f64> = (0..3).flat_map(|c| t.data()[(c * 4 + order[i]) * 4..(c * 4 + order[i] + 1) * 4].to_vec()).collect();
                Tensor::from_vec(&[1, 3, 1, 2, 2], d).unwrap()
            }).collect();
            tcve::tensor::concat(&parts, 2).unwrap()
        };
        let a = temporal_attention(&frames(&x), &w[0], &w[1], &w[2]).unwrap();
        let b = frames(&temporal_attention(&x, &w[0], &w[1], &w[2]).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn stu_output_matches_spatial_shape(ct in 1usize..5, ck in 1usize..5, f in 1usize..4, hk in 1usize..4, flags in any::<(bool, bool, bool)>()) {
        let ablation = StuAblation { enabled: flags.0, use_temporal_attention: flags.1, use_conv3d: flags.2 };
        let mut store = ParamStore::<f64>::new();
        let geometry = StuGeometry { temporal_channels: ct, spatial_channels: ck };
        let unit = Stu::new(&mut ParamBuilder::new(&mut store, RngState::new(1), true, "stu"), StageId::Mid, geometry, 0.1, ablation).unwrap();
        if !flags.0 {
            prop_assert!(store.iter().all(|p| p.name.contains(".proj.")));
        }
        let mut rng = RngState::new(2);
        let x_spa = rng.normal_tensor::<f64>(&[f, ck, hk, hk]);
        let x_tem = rng.normal_tensor::<f64>(&[9, ct, f + 1]);
        let out = unit.forward(&store.bind(false), &x_spa, &x_tem, (1, 3, 3)).unwrap();
        prop_assert_eq!(out.shape(), x_spa.shape());
    }
}
