//! Finite-difference audit of every tape operation and every assembled
//! model block, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Backbone, Batch, Bound, Family, ForwardOpts, Introduction, Model, ModelConfig, Unroll};
use crate::error::Result;
use crate::tensor::gradcheck::{GradCheck, GradReport};
use crate::tensor::{AttentionSpec, ConvSpec, Tape, Tensor, Var};
use crate::tokenizer::PAD;

/// One audited case.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradReport,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random projection to a scalar so every output coordinate carries gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Probe<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks each tape operation on small random inputs.
pub fn operation_cases(check: &GradCheck) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut case = |name: String, inputs: &[Tensor<f64>], f: Probe<'_>| -> Result<()> {
        let report = check.run(inputs, f)?;
        out.push(GradCase { name, report });
        Ok(())
    };
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = randn(if ta { &[4, 3] } else { &[3, 4] }, 1);
        let b = randn(if tb { &[2, 4] } else { &[4, 2] }, 2);
        case(format!("matmul ta={ta} tb={tb}"), &[a, b], &|t, v| {
            let y = t.matmul_t(v[0], v[1], ta, tb)?;
            project(t, y, 9)
        })?;
    }
    case("add sub mul add_row scale silu softplus".into(), &[randn(&[3, 4], 1), randn(&[3, 4], 2), randn(&[4], 3)], &|t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let r = t.add_row(m, v[2])?;
        let k = t.scale(r, 0.7);
        let s1 = t.silu(k);
        let s2 = t.softplus(s1);
        project(t, s2, 4)
    })?;
    case("rmsnorm".into(), &[randn(&[3, 6], 1), randn(&[6], 2)], &|t, v| {
        let y = t.rmsnorm(v[0], v[1], 1e-5)?;
        project(t, y, 5)
    })?;
    case("rotary".into(), &[randn(&[6, 8], 1)], &|t, v| {
        let y = t.rotary(v[0], 2, 3)?;
        project(t, y, 6)
    })?;
    let mask = [false, true, true, true, true, false, true, true];
    for causal in [true, false] {
        for masked in [false, true] {
            let ins = [randn(&[8, 6], 1), randn(&[8, 6], 2), randn(&[8, 6], 3)];
            case(format!("attention causal={causal} key_mask={masked}"), &ins, &|t, v| {
                let spec = AttentionSpec {
                    batch: 2,
                    seq: 4,
                    heads: 2,
                    causal,
                    key_mask: masked.then_some(&mask[..]),
                    dropout: None,
                };
                let y = t.attention(v[0], v[1], v[2], &spec)?;
                project(t, y, 7)
            })?;
        }
    }
    case("attention dropout".into(), &[randn(&[4, 4], 1), randn(&[4, 4], 2), randn(&[4, 4], 3)], &|t, v| {
        let spec = AttentionSpec {
            batch: 1,
            seq: 4,
            heads: 1,
            causal: true,
            key_mask: None,
            dropout: Some((0.3, 11)),
        };
        let y = t.attention(v[0], v[1], v[2], &spec)?;
        project(t, y, 7)
    })?;
    let conv_mask = [true, true, false, true, true, true, true, true];
    for kernel in [1, 3] {
        for (heads, causal) in [(1, true), (2, true), (2, false)] {
            let ins = [randn(&[8, 6], 1), randn(&[heads, 5, 5, kernel], 2)];
            case(format!("seq_conv kernel={kernel} heads={heads} causal={causal}"), &ins, &|t, v| {
                let spec = ConvSpec {
                    batch: 2,
                    seq: 4,
                    heads,
                    kernel,
                    causal,
                    key_mask: Some(&conv_mask),
                };
                let y = t.seq_conv(v[0], v[1], &spec)?;
                project(t, y, 8)
            })?;
        }
    }
    case("gather concat reshape".into(), &[randn(&[5, 3], 1), randn(&[2, 3], 2)], &|t, v| {
        let g = t.gather_rows(v[0], &[4, 0, 4, 2])?;
        let r = t.concat_rows(v[1], g)?;
        let c = t.concat_cols(r, r)?;
        let s = t.reshape(c, vec![6, 2, 3])?;
        project(t, s, 3)
    })?;
    for axis in 0..3 {
        case(format!("softmax axis={axis}"), &[randn(&[2, 3, 4], 1)], &|t, v| {
            let y = t.softmax(v[0], axis)?;
            project(t, y, 2)
        })?;
    }
    let target = [0.5, 3.0, -1.0, 2.0];
    case("cross_entropy abs_diff mean".into(), &[randn(&[4, 5], 1)], &|t, v| {
        let l = t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])?;
        let d = t.abs_diff(l, &target)?;
        Ok(t.mean(d))
    })?;
    Ok(out)
}

/// Small configurations spanning every family, backbone, introduction and
/// unroll mode.
pub fn block_configs() -> Vec<ModelConfig> {
    let base = |family, backbone| {
        let mut c = ModelConfig::new(family, backbone, 11, 8, 1, 6);
        c.d_enc = 8;
        c.d_e = 3;
        c.slice = 4;
        c.n_enc_layers = 1;
        c.n_heads = 2;
        c.kernel = if backbone == Backbone::Mixer { 3 } else { 1 };
        c
    };
    let mut v = Vec::new();
    for bb in [Backbone::Transformer, Backbone::Mixer] {
        v.push(base(Family::Causal, bb));
        for intro in Introduction::ALL {
            let mut c = base(Family::Eem, bb);
            c.introduction = *intro;
            v.push(c);
        }
        for un in Unroll::ALL {
            let mut c = base(Family::Autoencoder, bb);
            c.unroll = *un;
            v.push(c);
        }
        v.push(base(Family::SecondOrder, bb));
    }
    v
}

fn block_case(check: &GradCheck, c: &ModelConfig, train: bool) -> Result<GradCase> {
    let m = Model::<f64>::new(c.clone(), 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let toks: Vec<u32> = (0..2 * c.n_ctx).map(|i| if i % c.n_ctx <= i / c.n_ctx { PAD } else { rng.random_range(3..c.vocab as u32) }).collect();
    let so_targets: Vec<f64> = (0..toks.len()).map(|i| (i % 5) as f64 * 0.4).collect();
    let opts = ForwardOpts {
        train,
        seed: 21,
        ..Default::default()
    };
    let report = check.run(m.params(), |tape, vars| {
        let bound = Bound(vars.to_vec());
        let b = Batch::new(&toks, 2, c.n_ctx)?;
        let out = m.forward(tape, &bound, &b, &opts)?;
        if c.family == Family::SecondOrder {
            let rows: Vec<usize> = out.targets.iter().enumerate().filter_map(|(r, t)| t.map(|_| r)).collect();
            let tgt: Vec<f64> = out.targets.iter().flatten().map(|&p| so_targets[p]).collect();
            let p = tape.gather_rows(out.logits, &rows)?;
            let d = tape.abs_diff(p, &tgt)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        } else {
            let ce = tape.cross_entropy(out.logits, &out.targets)?;
            Ok(tape.mean(ce))
        }
    })?;
    let mut name = format!("{} {}", c.family, c.backbone);
    match c.family {
        Family::Eem => name += &format!(" {}", c.introduction),
        Family::Autoencoder => name += &format!(" {}", c.unroll),
        _ => {}
    }
    if train {
        name += &format!(" train dropout={} q={} {}", c.dropout, c.qat_q, c.noise_site);
    }
    Ok(GradCase { name, report })
}

/// Checks every assembled model over all parameters, plus training-mode
/// passes with dropout and bottleneck noise.
pub fn block_cases(check: &GradCheck) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for c in block_configs() {
        out.push(block_case(check, &c, false)?);
        if c.family == Family::Causal || (c.family == Family::Eem && c.introduction == Introduction::TokenConcat) {
            let mut t = c.clone();
            t.dropout = 0.2;
            if t.family == Family::Eem {
                t.qat_q = 0.25;
            }
            out.push(block_case(check, &t, true)?);
        }
    }
    Ok(out)
}

/// Settings of the full audit: central differences with step 1e-5 and a
/// 1e-4 relative tolerance, compared absolutely below 1e-2. At step 1e-4
/// the O(h^2) truncation term alone reaches 3e-4 on a few embedding
/// coordinates.
pub fn suite_check() -> GradCheck {
    GradCheck {
        step: 1e-5,
        tol: 1e-4,
        floor: 1e-2,
        max_coords: 300,
    }
}

/// Operations followed by blocks.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let check = suite_check();
    let mut v = operation_cases(&check)?;
    v.extend(block_cases(&check)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_pass() {
        for c in operation_cases(&suite_check()).unwrap() {
            assert!(c.report.passes(1.0, 1e-4), "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn blocks_pass() {
        let cases = block_cases(&suite_check()).unwrap();
        assert_eq!(cases.len(), block_configs().len() + 4);
        for c in cases {
            eprintln!("{:<48} max_rel {:.2e}", c.name, c.report.max_rel);
            assert!(c.report.passes(1.0, 1e-4), "{}: {:?}", c.name, c.report);
        }
    }
}
