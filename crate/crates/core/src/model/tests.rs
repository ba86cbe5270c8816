use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::Session;
use super::quant::uniform_noise;
use super::*;
use crate::tensor::{AttentionSpec, Tape};
use crate::tokenizer::PAD;

fn cfg(family: Family, backbone: Backbone) -> ModelConfig {
    let mut c = ModelConfig::new(family, backbone, 40, 16, 2, 12);
    c.n_heads = if backbone == Backbone::Mixer { 1 } else { 2 };
    c.d_e = 4;
    c
}

fn window(seed: u64, seq: usize, vocab: u32, pads: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..seq).map(|i| if i < pads { PAD } else { rng.random_range(3..vocab) }).collect()
}

fn logits<T: Scalar>(m: &Model<T>, toks: &[u32], batch: usize, opts: &ForwardOpts<'_>) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape, false);
    let b = Batch::new(toks, batch, toks.len() / batch).unwrap();
    let out = m.forward(&mut tape, &bound, &b, opts).unwrap();
    (tape.value(out.logits).to_f64_vec(), out.targets)
}

fn mean_loss(m: &Model<f32>, toks: &[u32], batch: usize) -> f64 {
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape, false);
    let b = Batch::new(toks, batch, toks.len() / batch).unwrap();
    let out = m.forward(&mut tape, &bound, &b, &ForwardOpts::default()).unwrap();
    let ce = tape.cross_entropy(out.logits, &out.targets).unwrap();
    let n = out.targets.iter().flatten().count() as f64;
    let s = tape.sum(ce);
    tape.value(s).data()[0] as f64 / n
}

fn all_configs() -> Vec<ModelConfig> {
    let mut v = Vec::new();
    for bb in [Backbone::Transformer, Backbone::Mixer] {
        v.push(cfg(Family::Causal, bb));
        for intro in Introduction::ALL {
            let mut c = cfg(Family::Eem, bb);
            c.introduction = *intro;
            v.push(c);
        }
        for un in Unroll::ALL {
            let mut c = cfg(Family::Autoencoder, bb);
            c.unroll = *un;
            v.push(c);
        }
        v.push(cfg(Family::SecondOrder, bb));
    }
    v
}

#[test]
fn init_loss_near_uniform() {
    for c in all_configs().into_iter().filter(|c| c.family != Family::SecondOrder) {
        let m = Model::<f32>::new(c.clone(), 3).unwrap();
        let toks: Vec<u32> = (0..4).flat_map(|s| window(s, 12, 40, 1)).collect();
        let l = mean_loss(&m, &toks, 4);
        let lnv = (c.vocab as f64).ln();
        assert!((l - lnv).abs() / lnv < 0.05, "{:?} {:?}: {l} vs {lnv}", c.family, c.backbone);
    }
}

#[test]
fn output_shapes() {
    for c in all_configs() {
        let m = Model::<f32>::new(c.clone(), 1).unwrap();
        let toks = window(1, c.n_ctx, 40, 2);
        let mut tape = Tape::inference();
        let bound = m.bind(&mut tape, false);
        let out = m.forward(&mut tape, &bound, &Batch::single(&toks).unwrap(), &ForwardOpts::default()).unwrap();
        let width = if c.family == Family::SecondOrder { 1 } else { c.vocab };
        assert_eq!(tape.shape(out.logits), &[c.n_ctx, width]);
        if c.family == Family::SecondOrder {
            assert!(tape.value(out.logits).data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn token_concat_decoder_has_one_extra_position() {
    let mut c = cfg(Family::Eem, Backbone::Mixer);
    c.introduction = Introduction::TokenConcat;
    let m = Model::<f32>::new(c.clone(), 1).unwrap();
    assert_eq!(m.param("dec.0.conv").unwrap().shape(), &[1, c.n_ctx + 1, c.n_ctx + 1, 1]);
    assert_eq!(m.param("enc.0.conv").unwrap().shape(), &[1, c.n_ctx, c.n_ctx, 1]);
}

#[test]
fn family_mismatch_is_an_error() {
    let m = Model::<f32>::new(cfg(Family::Causal, Backbone::Transformer), 1).unwrap();
    let toks = window(1, 12, 40, 1);
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape, false);
    let b = Batch::single(&toks).unwrap();
    assert!(matches!(m.forward_eem(&mut tape, &bound, &b, &ForwardOpts::default()), Err(Error::Family(_))));
}

#[test]
fn causal_models_are_bitwise_causal() {
    for bb in [Backbone::Transformer, Backbone::Mixer] {
        let mut c = cfg(Family::Causal, bb);
        c.n_ctx = 32;
        c.kernel = if bb == Backbone::Mixer { 3 } else { 1 };
        let m = Model::<f32>::new(c.clone(), 5).unwrap();
        let base = window(2, 32, 40, 3);
        let (ref_logits, _) = logits(&m, &base, 1, &ForwardOpts::default());
        for j in 3..32 {
            let mut t = base.clone();
            t[j] = if t[j] == 3 { 4 } else { 3 };
            let (l, _) = logits(&m, &t, 1, &ForwardOpts::default());
            assert_eq!(&l[..j * c.vocab], &ref_logits[..j * c.vocab], "{bb} position {j}");
            assert_ne!(&l[j * c.vocab..(j + 1) * c.vocab], &ref_logits[j * c.vocab..(j + 1) * c.vocab]);
        }
    }
}

#[test]
fn eem_sees_the_future_through_the_embedding() {
    for bb in [Backbone::Transformer, Backbone::Mixer] {
        for intro in Introduction::ALL {
            let mut c = cfg(Family::Eem, bb);
            c.introduction = *intro;
            let m = Model::<f32>::new(c.clone(), 5).unwrap();
            let base = window(2, 12, 40, 1);
            let (a, _) = logits(&m, &base, 1, &ForwardOpts::default());
            let mut t = base.clone();
            t[11] = if t[11] == 3 { 4 } else { 3 };
            let (b, _) = logits(&m, &t, 1, &ForwardOpts::default());
            assert_ne!(&a[..c.vocab], &b[..c.vocab], "{bb} {intro}");
            // Occluded: no path from the future remains.
            let occ = ForwardOpts {
                occlude: true,
                ..Default::default()
            };
            let (a, _) = logits(&m, &base, 1, &occ);
            let (b, _) = logits(&m, &t, 1, &occ);
            assert_eq!(&a[..11 * c.vocab], &b[..11 * c.vocab], "{bb} {intro} occluded");
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn mixer_parameter_formula() {
    for (heads, d, ctx) in [(1, 16, 12), (2, 16, 12), (4, 32, 9)] {
        let mut c = ModelConfig::new(Family::Causal, Backbone::Mixer, 30, d, 3, ctx);
        c.n_heads = heads;
        let m = Model::<f32>::new(c.clone(), 0).unwrap();
        for l in 0..3 {
            let mut p = m.param(&format!("dec.{l}.conv")).unwrap().numel();
            if heads > 1 {
                p += m.param(&format!("dec.{l}.conv_in")).unwrap().numel() + m.param(&format!("dec.{l}.conv_out")).unwrap().numel();
                assert_eq!(p, heads * ctx * ctx + 2 * d * d);
            } else {
                assert_eq!(p, c.kernel * ctx * ctx);
            }
        }
    }
    let mut c = ModelConfig::new(Family::Causal, Backbone::Mixer, 30, 16, 1, 10);
    c.kernel = 3;
    let m = Model::<f32>::new(c, 0).unwrap();
    assert_eq!(m.param("dec.0.conv").unwrap().numel(), 3 * 100);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for c in all_configs() {
        let m = Model::<f32>::new(c.clone(), 9).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let toks = window(4, c.n_ctx, 40, 2);
        assert_eq!(logits(&m, &toks, 1, &ForwardOpts::default()).0, logits(&back, &toks, 1, &ForwardOpts::default()).0);
        assert_eq!(back.checksum(), m.checksum());
    }
}

#[test]
fn incremental_session_matches_full_forward() {
    for c in all_configs().into_iter().filter(|c| matches!(c.family, Family::Causal | Family::Eem)) {
        for kernel in [1, 3] {
            let mut c = c.clone();
            if c.backbone == Backbone::Transformer && kernel == 3 {
                continue;
            }
            c.kernel = kernel;
            let m = Model::<f32>::new(c.clone(), 11).unwrap();
            let toks = window(6, c.n_ctx, 40, 3);
            let (full, _) = logits(&m, &toks, 1, &ForwardOpts::default());
            let emb = (c.family == Family::Eem).then(|| m.embed(&toks, 1).unwrap());
            let mut s = Session::new(&m, emb.as_deref()).unwrap();
            for (i, &t) in toks.iter().enumerate() {
                let inc = s.step(t).unwrap();
                for (a, b) in inc.iter().zip(&full[i * c.vocab..(i + 1) * c.vocab]) {
                    assert!((*a as f64 - b).abs() < 1e-4, "{:?} {} {}: {a} vs {b}", c.family, c.backbone, c.introduction);
                }
            }
        }
    }
}

#[test]
fn repeat_embedding_degeneracy_survives_query_key_rotation() {
    let mut c = cfg(Family::Autoencoder, Backbone::Transformer);
    c.rotary = false;
    c.unroll = Unroll::Repeat;
    let m = Model::<f32>::new(c.clone(), 2).unwrap();
    let toks = window(3, 12, 40, 1);
    let (l, _) = logits(&m, &toks, 1, &ForwardOpts::default());
    let v = c.vocab;
    for i in 1..12 {
        for j in 0..v {
            assert!((l[i * v + j] - l[j]).abs() < 1e-5);
        }
    }
    // Rotating queries and keys only reweights identical values.
    c.rotary = true;
    let m = Model::<f32>::new(c, 2).unwrap();
    let (l, _) = logits(&m, &toks, 1, &ForwardOpts::default());
    let spread = (1..12).flat_map(|i| (0..v).map(move |j| (i, j))).map(|(i, j)| (l[i * v + j] - l[j]).abs()).fold(0.0, f64::max);
    eprintln!("rotary spread {spread:e}");
    assert!(spread < 1e-5, "{spread}");
}

#[test]
fn attention_single_token_returns_value_projection() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::from_f64(vec![1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap());
    let k = tape.constant(Tensor::from_f64(vec![1, 4], &[1.0, 1.0, -1.0, 0.0]).unwrap());
    let v = tape.constant(Tensor::from_f64(vec![1, 4], &[7.0, -2.0, 0.25, 1.0]).unwrap());
    let spec = AttentionSpec {
        batch: 1,
        seq: 1,
        heads: 2,
        causal: true,
        ..Default::default()
    };
    let o = tape.attention(q, k, v, &spec).unwrap();
    assert_eq!(tape.value(o).data(), &[7.0, -2.0, 0.25, 1.0]);
}

#[test]
fn attention_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, h, dk) = (5, 2, 3);
    let d = h * dk;
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.5..1.5)).collect() };
    let (q, k, v) = (r(t * d), r(t * d), r(t * d));
    for causal in [false, true] {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(Tensor::new(vec![t, d], q.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![t, d], k.clone()).unwrap());
        let c = tape.constant(Tensor::new(vec![t, d], v.clone()).unwrap());
        let spec = AttentionSpec {
            batch: 1,
            seq: t,
            heads: h,
            causal,
            ..Default::default()
        };
        let o = tape.attention(a, b, c, &spec).unwrap();
        let got = tape.value(o).data();
        for i in 0..t {
            for hh in 0..h {
                let js: Vec<usize> = (0..t).filter(|&j| !causal || j <= i).collect();
                let s: Vec<f64> = js
                    .iter()
                    .map(|&j| (0..dk).map(|x| q[i * d + hh * dk + x] * k[j * d + hh * dk + x]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for x in 0..dk {
                    let want: f64 = js.iter().zip(&s).map(|(&j, sj)| sj.exp() / z * v[j * d + hh * dk + x]).sum();
                    assert!((got[i * d + hh * dk + x] - want).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn identical_rows_without_rotary_give_identical_attention_rows() {
    let row = [0.4, -0.2, 1.1, 0.3];
    let data: Vec<f64> = row.iter().copied().cycle().take(6 * 4).collect();
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::new(vec![6, 4], data).unwrap());
    let spec = AttentionSpec {
        batch: 1,
        seq: 6,
        heads: 2,
        causal: true,
        ..Default::default()
    };
    let o = tape.attention(x, x, x, &spec).unwrap();
    let out = tape.value(o);
    for i in 1..6 {
        for j in 0..4 {
            assert!((out.get2(i, j) - out.get2(0, j)).abs() < 1e-5);
        }
    }
}

#[test]
fn bottleneck_noise_is_bounded_and_train_only() {
    let mut c = cfg(Family::Eem, Backbone::Transformer);
    c.qat_q = 0.25;
    c.noise_site = NoiseSite::In;
    let m = Model::<f32>::new(c.clone(), 2).unwrap();
    let toks = window(1, 12, 40, 1);
    let emb = |train: bool, seed: u64| {
        let mut tape = Tape::inference();
        let bound = m.bind(&mut tape, false);
        let o = ForwardOpts {
            train,
            seed,
            ..Default::default()
        };
        let e = m.encode_embedding(&mut tape, &bound, &Batch::single(&toks).unwrap(), &o).unwrap();
        tape.value(e).to_f64_vec()
    };
    let clean = emb(false, 1);
    assert_eq!(clean, emb(false, 2));
    let noisy = emb(true, 1);
    assert_ne!(noisy, clean);
    for (a, b) in noisy.iter().zip(&clean) {
        assert!((a - b).abs() <= 0.25 + 1e-6);
    }
    c.qat_q = 0.0;
    let m0 = Model::<f32>::new(c, 2).unwrap();
    let mut tape = Tape::inference();
    let bound = m0.bind(&mut tape, false);
    let o = ForwardOpts {
        train: true,
        ..Default::default()
    };
    let e = m0.encode_embedding(&mut tape, &bound, &Batch::single(&toks).unwrap(), &o).unwrap();
    assert_eq!(tape.value(e).to_f64_vec(), clean);
}

#[test]
fn injected_noise_has_zero_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = 0.25;
    let n = 100_000;
    let xs = uniform_noise(&mut rng, n, q);
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sigma = q / 3f64.sqrt();
    assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");
    assert!(xs.iter().all(|x| x.abs() <= q));
}

