use super::*;
use crate::tensor::grad_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk() -> (FmtEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = FmtEncoder::new(FmtConfig::default(), &mut store, &mut rng).unwrap();
    (enc, store)
}

fn random_obs(c: &FmtConfig, rng: &mut ChaCha8Rng) -> Observation {
    Observation {
        images: (0..2 * c.t_img * c.image_len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        ft: (0..c.ft_raw_len * FT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn rows(t: &Tape<f64>, v: Var) -> Vec<Vec<f64>> {
    let d = *t.shape(v).last().unwrap();
    t.value(v).data().chunks(d).map(|r| r.to_vec()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_image_gives_identical_tokens() {
    let (enc, s) = desk();
    let c = enc.config.clone();
    let obs = Observation { images: vec![0.0; 2 * c.t_img * c.image_len()], ft: vec![0.0; c.ft_raw_len * FT_DIM] };
    let mut t = Tape::new();
    let v = enc.tokenize_images(&mut t, &s, &[&obs, &obs]).unwrap();
    assert_eq!(t.shape(v), &[2, 2, c.t_img, c.tokens_per_image(), c.d]);
    let r = rows(&t, v);
    assert!(r.iter().all(|row| max_diff(row, &r[0]) == 0.0));
}

#[test]
fn wrong_channel_count_is_a_shape_error() {
    let (enc, s) = desk();
    let obs = Observation { images: vec![0.0; 2 * 2 * 32 * 32 * 3], ft: vec![0.0; 96] };
    let mut t = Tape::new();
    let err = enc.tokenize_images(&mut t, &s, &[&obs]).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "tokenize_images", .. }));
}

#[test]
fn patch_order_matters_after_spatial_embedding() {
    let (enc, s) = desk();
    let c = enc.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = random_obs(&c, &mut rng);
    // swap patch (0,0) with patch (1,1) in the first image
    let mut swapped = obs.clone();
    for y in 0..c.patch {
        for x in 0..c.patch {
            let a = y * c.image_size + x;
            let b = (y + c.patch) * c.image_size + x + c.patch;
            swapped.images.swap(a, b);
        }
    }
    let mut t = Tape::new();
    let va = enc.tokenize_images(&mut t, &s, &[&obs]).unwrap();
    let vb = enc.tokenize_images(&mut t, &s, &[&swapped]).unwrap();
    let (ra, rb) = (rows(&t, va), rows(&t, vb));
    let l1 = c.image_size / c.patch + 1;
    assert!(max_diff(&ra[0], &rb[l1]) < 1e-12, "before embedding the tokens are only permuted");
    let (ea, _) = enc.apply_embeddings(&mut t, &s, va, None).unwrap();
    let (eb, _) = enc.apply_embeddings(&mut t, &s, vb, None).unwrap();
    let (ra, rb) = (rows(&t, ea), rows(&t, eb));
    assert!(max_diff(&ra[0], &rb[l1]) > 1e-4);
}

#[test]
fn zero_wrench_gives_fixed_tokens_and_ramp_reversal_differs() {
    let (enc, s) = desk();
    let c = enc.config.clone();
    let zero = Observation { images: vec![0.0; 2 * c.t_img * c.image_len()], ft: vec![0.0; c.ft_raw_len * FT_DIM] };
    let mut t = Tape::new();
    let a = enc.encode_ft(&mut t, &s, &[&zero]).unwrap();
    let b = enc.encode_ft(&mut t, &s, &[&zero]).unwrap();
    assert_eq!(t.shape(a), &[1, c.t_ft, c.d]);
    assert_eq!(t.value(a), t.value(b));

    let ramp: Vec<f32> = (0..c.ft_raw_len).flat_map(|i| [i as f32 / 8.0; FT_DIM]).collect();
    let rev: Vec<f32> = (0..c.ft_raw_len).rev().flat_map(|i| [i as f32 / 8.0; FT_DIM]).collect();
    let fwd_obs = Observation { ft: ramp, ..zero.clone() };
    let rev_obs = Observation { ft: rev, ..zero };
    let f = enc.encode_ft(&mut t, &s, &[&fwd_obs]).unwrap();
    let r = enc.encode_ft(&mut t, &s, &[&rev_obs]).unwrap();
    assert!(t.value(f).max_abs_diff(t.value(r)) > 1e-4);
}

fn zero_tables(enc: &FmtEncoder, s: &mut ParamStore<f64>) {
    let mut ids = vec![enc.tables.spatial];
    ids.extend(enc.tables.freq);
    if let Some((a, b, c)) = enc.tables.modality {
        ids.extend([a, b, c]);
    }
    for id in ids {
        s.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn zero_tables_leave_tokens_unchanged() {
    let (enc, mut s) = desk();
    zero_tables(&enc, &mut s);
    let c = enc.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = random_obs(&c, &mut rng);
    let mut t = Tape::new();
    let v = enc.tokenize_images(&mut t, &s, &[&obs]).unwrap();
    let f = enc.encode_ft(&mut t, &s, &[&obs]).unwrap();
    let (ve, fe) = enc.apply_embeddings(&mut t, &s, v, Some(f)).unwrap();
    assert_eq!(t.value(ve).data(), t.value(v).data());
    assert_eq!(t.value(fe.unwrap()).data(), t.value(f).data());
}

#[test]
fn frame_rows_get_first_and_last_frequency_rows() {
    let (enc, mut s) = desk();
    zero_tables(&enc, &mut s);
    let c = enc.config.clone();
    let freq = enc.tables.freq.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in s.get_mut(freq).data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let table = s.get(freq).clone();
    let mut t = Tape::new();
    let zeros = t.constant(Tensor::zeros(&[1, 2, c.t_img, c.tokens_per_image(), c.d]));
    let (ve, _) = enc.apply_embeddings(&mut t, &s, zeros, None).unwrap();
    let r = rows(&t, ve);
    let l = c.tokens_per_image();
    for cam in 0..2 {
        assert_eq!(r[cam * 2 * l], table.row(0));
        assert_eq!(r[cam * 2 * l + l + 3], table.row(c.t_ft - 1));
    }
}

#[test]
fn identical_tokens_at_different_positions_differ_after_embedding() {
    let (enc, s) = desk();
    let c = enc.config.clone();
    let mut t = Tape::new();
    let zeros = t.constant(Tensor::zeros(&[1, 2, c.t_img, c.tokens_per_image(), c.d]));
    let (ve, _) = enc.apply_embeddings(&mut t, &s, zeros, None).unwrap();
    let r = rows(&t, ve);
    for (i, j) in [(0, 1), (0, c.tokens_per_image()), (0, 2 * c.tokens_per_image())] {
        assert!(max_diff(&r[i], &r[j]) > 1e-4, "tokens {i} and {j}");
    }
}

fn identity_block(d: usize) -> (CrossAttentionBlock, ParamStore<f64>) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut block = CrossAttentionBlock::new(&mut s, "x", d, 1, &mut rng).unwrap();
    block.pre_norm = false;
    block.residual = false;
    for attn in [block.img_from_ft, block.ft_from_img] {
        for lin in [attn.q, attn.k, attn.v, attn.o] {
            let w = s.get_mut(lin.w).data_mut();
            w.fill(0.0);
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
        }
    }
    (block, s)
}

#[test]
fn single_ft_token_is_copied_to_every_visual_row() {
    let (block, s) = identity_block(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let img = t.constant(Tensor::from_fn(&[1, 6, 4], |_| rng.random_range(-1.0..1.0)));
    let ft_tok = Tensor::from_fn(&[1, 1, 4], |_| rng.random_range(-1.0..1.0));
    let ft = t.constant(ft_tok.clone());
    let (out, _) = block.forward(&mut t, &s, img, ft).unwrap();
    for row in rows(&t, out) {
        assert!(max_diff(&row, ft_tok.data()) < 1e-12);
    }
}

#[test]
fn attention_weights_are_normalized_and_key_order_is_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let block = CrossAttentionBlock::new(&mut s, "x", 16, 4, &mut rng).unwrap();
    let img_t = Tensor::from_fn(&[2, 10, 16], |_| rng.random_range(-1.0..1.0));
    let ft_t = Tensor::from_fn(&[2, 5, 16], |_| rng.random_range(-1.0..1.0));
    let perm = [3, 0, 4, 1, 2];
    let mut ft_p = ft_t.clone();
    for b in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..16 {
                ft_p.data_mut()[(b * 5 + dst) * 16 + j] = ft_t.data()[(b * 5 + src) * 16 + j];
            }
        }
    }
    let mut t = Tape::new();
    let img = t.constant(img_t);
    let ft = t.constant(ft_t);
    let ftp = t.constant(ft_p);
    let (a, _, wi, wf) = block.forward_with_weights(&mut t, &s, img, ft).unwrap();
    for w in [wi, wf] {
        for row in rows(&t, w) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let (b, _) = block.forward(&mut t, &s, img, ftp).unwrap();
    assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
}

#[test]
fn cross_attention_block_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let block = CrossAttentionBlock::new(&mut s, "x", 8, 2, &mut rng).unwrap();
    s.add("img", Tensor::from_fn(&[2, 5, 8], |_| rng.random_range(-1.0..1.0))).unwrap();
    s.add("ft", Tensor::from_fn(&[2, 3, 8], |_| rng.random_range(-1.0..1.0))).unwrap();
    let wi = Tensor::from_fn(&[2, 5, 8], |_| rng.random_range(-1.0..1.0));
    let wf = Tensor::from_fn(&[2, 3, 8], |_| rng.random_range(-1.0..1.0));
    let r = grad_check(
        &s,
        |t, s| {
            let img = t.param(s, s.id("img")?);
            let ft = t.param(s, s.id("ft")?);
            let (a, b) = block.forward(t, s, img, ft)?;
            let (wi, wf) = (t.constant(wi.clone()), t.constant(wf.clone()));
            let (a, b) = (t.mul(a, wi)?, t.mul(b, wf)?);
            let (a, b) = (t.sum(a)?, t.sum(b)?);
            t.add(a, b)
        },
        1e-5,
        30,
        1,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    assert!(r.zero_grad_params.is_empty(), "{r:?}");
}

#[test]
fn fused_sequence_shape_order_and_normalization() {
    let (enc, s) = desk();
    let c = enc.config.clone();
    assert_eq!(c.obs_tokens(), 72);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = random_obs(&c, &mut rng);
    let mut t = Tape::new();
    let out = enc.encode(&mut t, &s, &[&obs, &obs]).unwrap();
    assert_eq!(t.shape(out), &[2, 72, c.d]);
    for row in rows(&t, out) {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3);
    }

    let img = t.constant(Tensor::from_fn(&[1, 64, c.d], |_| rng.random_range(-1.0..1.0)));
    let ft_a = t.constant(Tensor::from_fn(&[1, 8, c.d], |_| rng.random_range(-1.0..1.0)));
    let ft_b = t.constant(Tensor::from_fn(&[1, 8, c.d], |_| rng.random_range(-1.0..1.0)));
    let fa = enc.fuse_observation(&mut t, &s, img, Some(ft_a)).unwrap();
    let fb = enc.fuse_observation(&mut t, &s, img, Some(ft_b)).unwrap();
    let (ra, rb) = (rows(&t, fa), rows(&t, fb));
    for i in 0..64 {
        assert_eq!(ra[i], rb[i]);
    }
    for i in 64..72 {
        assert!(max_diff(&ra[i], &rb[i]) > 1e-6);
    }
}

#[test]
fn ablation_flags_keep_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = FmtConfig::default();
    let obs = random_obs(&base, &mut rng);
    for cfg in [
        FmtConfig { freq_embed: false, ..base.clone() },
        FmtConfig { modality_embed: false, ..base.clone() },
        FmtConfig { cross_attention: false, ..base.clone() },
        FmtConfig { freq_embed: false, modality_embed: false, cross_attention: false, ..base.clone() },
    ] {
        let mut s = ParamStore::<f32>::new();
        let enc = FmtEncoder::new(cfg, &mut s, &mut rng).unwrap();
        let mut t = Tape::new();
        let out = enc.encode(&mut t, &s, &[&obs]).unwrap();
        assert_eq!(t.shape(out), &[1, 72, 64]);
    }
    let mut s = ParamStore::<f32>::new();
    let enc = FmtEncoder::new(FmtConfig { use_ft: false, ..base }, &mut s, &mut rng).unwrap();
    let obs = Observation { ft: Vec::new(), ..obs };
    let mut t = Tape::new();
    let out = enc.encode(&mut t, &s, &[&obs]).unwrap();
    assert_eq!(t.shape(out), &[1, 64, 64]);
}

#[test]
fn invalid_config_is_rejected() {
    let mut s = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(FmtEncoder::new(FmtConfig { heads: 5, ..Default::default() }, &mut s, &mut rng).is_err());
    assert!(FmtEncoder::new(FmtConfig { ft_raw_len: 12, ..Default::default() }, &mut s, &mut rng).is_err());
}

#[test]
fn square_pad_resize_keeps_square_images_and_centers_padding() {
    let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
    assert_eq!(square_pad_resize(&img, 4, 4, 1, 4), img);
    let wide = vec![1.0; 2 * 4];
    let out = square_pad_resize(&wide, 2, 4, 1, 4);
    assert_eq!(&out[0..4], &[0.0; 4]);
    assert_eq!(&out[4..12], &[1.0; 8]);
    assert_eq!(&out[12..16], &[0.0; 4]);
}
