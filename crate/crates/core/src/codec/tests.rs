use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Backbone, Introduction, ModelConfig};

fn doc(seed: u64, n: usize, vocab: u32) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Skewed so the model's predictions matter.
    (0..n).map(|_| 3 + (rng.random_range(0.0f64..1.0).powi(3) * (vocab - 3) as f64) as u32).collect()
}

fn model(family: Family, backbone: Backbone, seed: u64) -> Model<f32> {
    let mut c = ModelConfig::new(family, backbone, 40, 16, 2, 12);
    if backbone == Backbone::Transformer {
        c.n_heads = 2;
    }
    c.d_e = 4;
    Model::new(c, seed).unwrap()
}

#[test]
fn header_round_trip() {
    let h = Header {
        mode: Mode::Eem,
        quant: Some(QuantFormat::E5m2),
        model_checksum: 1,
        tokenizer_checksum: u64::MAX,
        token_count: 77,
        token_checksum: 0xdead_beef,
        n_ctx: 256,
        d_e: 64,
        payload_bits: 512,
        body_bits: 12345,
    };
    assert_eq!(Header::parse(&h.to_bytes()).unwrap(), h);
    let mut b = h.to_bytes();
    b[0] = b'X';
    assert!(Header::parse(&b).is_err());
    assert!(Header::parse(&b[..10]).is_err());
}

#[test]
fn uniform_model_spends_log_v_bits() {
    let mut c = ModelConfig::new(Family::Causal, Backbone::Transformer, 259, 16, 1, 64);
    c.n_heads = 2;
    let mut m = Model::new(c, 1).unwrap();
    m.param_mut("lm_head").unwrap().data_mut().fill(0.0);
    let codec = Codec::new(&m, 0).unwrap();
    let tokens = doc(2, 1000, 259);
    let e = codec.encode(&tokens).unwrap();
    let rel = (e.stats.body_bits as f64 - 8000.0).abs() / 8000.0;
    assert!(rel < 0.005, "{} bits", e.stats.body_bits);
    assert_eq!(codec.decode(&e.bytes).unwrap(), tokens);
    // Byte tokens over ASCII: one token per byte.
    let r = measure_bpb(&codec, std::slice::from_ref(&tokens), tokens.len() as u64, false).unwrap();
    assert!((r.achieved_bpb - 8.0).abs() / 8.0 < 0.005, "{}", r.achieved_bpb);
}

#[test]
fn round_trips_every_family_backbone_and_format() {
    let mut seed = 0;
    for backbone in [Backbone::Transformer, Backbone::Mixer] {
        for family in [Family::Causal, Family::Eem] {
            for len in [1, 11, 12, 50] {
                seed += 1;
                let m = model(family, backbone, seed);
                let tokens = doc(seed, len, 40);
                let formats: &[QuantFormat] = if family == Family::Eem { &QuantFormat::ALL } else { &[QuantFormat::E4m3] };
                for &q in formats {
                    let codec = Codec::new(&m, 9).unwrap().with_quant(q);
                    let e = codec.encode(&tokens).unwrap();
                    assert_eq!(codec.decode(&e.bytes).unwrap(), tokens, "{backbone} {family} {len} {q}");
                    let over = e.stats.body_overhead();
                    assert!((0.0..=64.0).contains(&over), "{over}");
                    assert!(e.stats.body_bits as f64 >= e.stats.coded_bits);
                    assert_eq!(e.stats.payload_bits, e.stats.windows * codec.embedding_bits());
                }
            }
        }
    }
}

#[test]
fn eem_payload_is_exactly_np_bp_per_window() {
    let m = model(Family::Eem, Backbone::Transformer, 3);
    let codec = Codec::new(&m, 0).unwrap();
    let e = codec.encode(&doc(4, 100, 40)).unwrap();
    // 100 tokens over windows of 11.
    assert_eq!(e.stats.windows, 10);
    assert_eq!(e.stats.payload_bits, 10 * 4 * 8);
}

#[test]
fn empty_input_is_header_only() {
    for family in [Family::Causal, Family::Eem] {
        let m = model(family, Backbone::Transformer, 5);
        let codec = Codec::new(&m, 0).unwrap();
        let e = codec.encode(&[]).unwrap();
        assert_eq!(e.bytes.len(), HEADER_BYTES);
        assert_eq!(codec.decode(&e.bytes).unwrap(), Vec::<u32>::new());
    }
}

#[test]
fn single_bit_flips_never_decode_silently() {
    for family in [Family::Causal, Family::Eem] {
        let m = model(family, Backbone::Transformer, 6);
        let codec = Codec::new(&m, 0).unwrap();
        let tokens = doc(7, 40, 40);
        let e = codec.encode(&tokens).unwrap();
        for bit in 0..e.bytes.len() * 8 {
            let mut b = e.bytes.clone();
            b[bit / 8] ^= 0x80 >> (bit % 8);
            if let Ok(t) = codec.decode(&b) {
                assert_eq!(t, tokens, "bit {bit} decoded to different tokens");
            }
        }
    }
}

#[test]
fn damaged_or_foreign_streams_are_rejected() {
    let m = model(Family::Causal, Backbone::Transformer, 8);
    let codec = Codec::new(&m, 42).unwrap();
    let tokens = doc(9, 60, 40);
    let e = codec.encode(&tokens).unwrap();
    let cut = codec.decode(&e.bytes[..e.bytes.len() - 1]).unwrap_err();
    assert!(matches!(cut, Error::Format { .. }), "{cut}");
    let mut long = e.bytes.clone();
    long.push(0);
    assert!(codec.decode(&long).is_err());
    let other = model(Family::Causal, Backbone::Transformer, 10);
    assert!(matches!(Codec::new(&other, 42).unwrap().decode(&e.bytes), Err(Error::Checksum(_))));
    assert!(matches!(Codec::new(&m, 43).unwrap().decode(&e.bytes), Err(Error::Checksum(_))));
    assert!(codec.encode(&[3, PAD, 4]).is_err());
    assert!(codec.encode(&[3, 40]).is_err());
}

#[test]
fn codec_matches_analytic_accounting() {
    let m = model(Family::Eem, Backbone::Mixer, 11);
    let codec = Codec::new(&m, 0).unwrap();
    let docs: Vec<Vec<u32>> = (0..4).map(|i| doc(20 + i, 300, 40)).collect();
    let r = measure_bpb(&codec, &docs, 3000, true).unwrap();
    assert!(r.verified);
    assert!(r.relative_gap < 0.01, "{}", r.relative_gap);
    assert!(r.analytic.consistency_error() < 1e-9);
}

#[test]
fn rejects_other_families() {
    let mut c = ModelConfig::new(Family::Autoencoder, Backbone::Transformer, 40, 16, 1, 12);
    c.n_heads = 2;
    c.introduction = Introduction::EmbedProject;
    assert!(Codec::new(&Model::new(c, 1).unwrap(), 0).is_err());
}
