//! Central-difference checks of every differentiable op against the 64-bit
//! references. Shared by the gradient tests and the acceptance run.

use super::*;
use echat_core::data::{synth_speech, EmotionLabel, Tokenizer, EOS};
use echat_core::decoder::{decoder_loss, Stage};
use echat_core::model::{EChatModel, ModelConfig};
use echat_core::nn::{
    transformer_block, AttentionConfig, Graph, ParamStore, Tensor, TransformerBlock, Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MAX_COORDS: usize = 60;

pub const CASES: [(&str, fn()); 8] = [
    ("matmul, add, mul", matmul_add_mul),
    ("gelu, softmax", gelu_and_softmax),
    ("layer norm", layer_norm_grads),
    ("attention", attention_grads),
    ("structural ops", structural_ops),
    ("cross entropy", cross_entropy_grads),
    ("transformer block", transformer_block_params),
    ("full model", full_model_stage_losses),
];

/// Checks `build` (the crate's op, on requires-grad inputs) against
/// `reference` (64-bit, on the same inputs) for a random linear functional
/// of the output. Returns the worst relative error over all inputs.
fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    reference: &dyn Fn(&[M]) -> M,
) -> f64 {
    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let out_t = g.tensor(out);
    let proj = random_tensor(rng, out_t.shape(), 1.0);
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let base: Vec<M> = inputs.iter().map(M::from_tensor).collect();
    let fwd = reference(&base);
    let fwd_scale = fwd.d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (a, b) in out_t.data().iter().zip(&fwd.d) {
        assert!(
            (*a as f64 - b).abs() <= 1e-4 * fwd_scale,
            "forward mismatch {a} vs {b}"
        );
    }
    let objective = |ms: &[M]| -> f64 {
        reference(ms)
            .d
            .iter()
            .zip(proj.data())
            .map(|(o, &p)| o * p as f64)
            .sum()
    };

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic_all = grads.wrt(*v).expect("input reached by the loss");
        let mut coords: Vec<usize> = (0..base[k].d.len()).collect();
        coords.shuffle(rng);
        coords.truncate(MAX_COORDS);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &c in &coords {
            let mut plus = base.clone();
            plus[k].d[c] += EPS;
            let mut minus = base.clone();
            minus[k].d[c] -= EPS;
            numeric.push((objective(&plus) - objective(&minus)) / (2.0 * EPS));
            analytic.push(analytic_all[c] as f64);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn sweep(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = case(&mut rng);
        assert!(err < TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

pub fn matmul_add_mul() {
    sweep("matmul", |rng| {
        let ins = [
            random_tensor(rng, &[3, 4], 1.0),
            random_tensor(rng, &[4, 5], 1.0),
        ];
        check(rng, &ins, &|g, v| g.matmul(v[0], v[1]).unwrap(), &|m| {
            matmul(&m[0], &m[1])
        })
    });
    sweep("add", |rng| {
        let ins = [
            random_tensor(rng, &[2, 3], 1.0),
            random_tensor(rng, &[2, 3], 1.0),
        ];
        check(rng, &ins, &|g, v| g.add(v[0], v[1]).unwrap(), &|m| {
            add(&m[0], &m[1])
        })
    });
    sweep("add_row", |rng| {
        let ins = [
            random_tensor(rng, &[4, 3], 1.0),
            random_tensor(rng, &[3], 1.0),
        ];
        check(rng, &ins, &|g, v| g.add_row(v[0], v[1]).unwrap(), &|m| {
            add_row(&m[0], &m[1])
        })
    });
    sweep("mul", |rng| {
        let ins = [
            random_tensor(rng, &[2, 3], 1.0),
            random_tensor(rng, &[2, 3], 1.0),
        ];
        check(rng, &ins, &|g, v| g.mul(v[0], v[1]).unwrap(), &|m| {
            M::new(
                2,
                3,
                m[0].d.iter().zip(&m[1].d).map(|(a, b)| a * b).collect(),
            )
        })
    });
    sweep("scale and sum", |rng| {
        let ins = [random_tensor(rng, &[3, 3], 1.0)];
        check(
            rng,
            &ins,
            &|g, v| {
                let s = g.scale(v[0], -0.7);
                g.sum(s)
            },
            &|m| M::new(1, 1, vec![-0.7 * m[0].d.iter().sum::<f64>()]),
        )
    });
}

pub fn gelu_and_softmax() {
    sweep("gelu", |rng| {
        let ins = [random_tensor(rng, &[4, 5], 3.0)];
        check(rng, &ins, &|g, v| g.gelu(v[0]), &|m| map(&m[0], gelu))
    });
    sweep("softmax rows", |rng| {
        let ins = [random_tensor(rng, &[3, 6], 2.0)];
        check(rng, &ins, &|g, v| g.softmax(v[0], 1).unwrap(), &|m| {
            softmax_rows(&m[0])
        })
    });
    sweep("softmax cols", |rng| {
        let ins = [random_tensor(rng, &[5, 2], 2.0)];
        check(rng, &ins, &|g, v| g.softmax(v[0], 0).unwrap(), &|m| {
            softmax_cols(&m[0])
        })
    });
    sweep("softmax vector", |rng| {
        let ins = [random_tensor(rng, &[4], 2.0)];
        check(rng, &ins, &|g, v| g.softmax(v[0], 0).unwrap(), &|m| {
            M::new(1, 4, softmax(&m[0].d))
        })
    });
}

pub fn layer_norm_grads() {
    sweep("layer_norm", |rng| {
        let ins = [
            random_tensor(rng, &[3, 8], 2.0),
            random_tensor(rng, &[8], 1.5),
            random_tensor(rng, &[8], 1.0),
        ];
        check(
            rng,
            &ins,
            &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            &|m| layer_norm(&m[0], &m[1], &m[2], 1e-5),
        )
    });
}

pub fn attention_grads() {
    sweep("attention", |rng| {
        let ins = [
            random_tensor(rng, &[3, 8], 1.0),
            random_tensor(rng, &[5, 8], 1.0),
            random_tensor(rng, &[5, 8], 1.0),
        ];
        check(
            rng,
            &ins,
            &|g, v| g.attention(v[0], v[1], v[2], 2, None).unwrap(),
            &|m| attention(&m[0], &m[1], &m[2], 2, None),
        )
    });
    sweep("causal attention", |rng| {
        let ins = [
            random_tensor(rng, &[4, 6], 1.0),
            random_tensor(rng, &[4, 6], 1.0),
            random_tensor(rng, &[4, 6], 1.0),
        ];
        let mask = causal(4);
        check(
            rng,
            &ins,
            &|g, v| g.attention(v[0], v[1], v[2], 3, Some(&mask)).unwrap(),
            &|m| attention(&m[0], &m[1], &m[2], 3, Some(&mask)),
        )
    });
}

pub fn structural_ops() {
    sweep("unfold", |rng| {
        let ins = [random_tensor(rng, &[7, 3], 1.0)];
        check(rng, &ins, &|g, v| g.unfold(v[0], 3, 2).unwrap(), &|m| {
            unfold(&m[0], 3, 2)
        })
    });
    sweep("concat_rows", |rng| {
        let ins = [
            random_tensor(rng, &[1, 3], 1.0),
            random_tensor(rng, &[2, 3], 1.0),
        ];
        check(
            rng,
            &ins,
            &|g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap(),
            &|m| concat_rows(&[m[0].clone(), m[1].clone(), m[0].clone()]),
        )
    });
    sweep("slice_rows", |rng| {
        let ins = [random_tensor(rng, &[5, 2], 1.0)];
        check(rng, &ins, &|g, v| g.slice_rows(v[0], 1, 3).unwrap(), &|m| {
            M::new(3, 2, m[0].d[2..8].to_vec())
        })
    });
    sweep("gather_rows", |rng| {
        let ins = [random_tensor(rng, &[6, 3], 1.0)];
        let ids = [4, 0, 4, 2];
        check(
            rng,
            &ins,
            &|g, v| g.gather_rows(v[0], &ids).unwrap(),
            &|m| gather_rows(&m[0], &ids),
        )
    });
    sweep("mean_rows", |rng| {
        let ins = [random_tensor(rng, &[5, 4], 1.0)];
        check(rng, &ins, &|g, v| g.mean_rows(v[0]).unwrap(), &|m| {
            mean_rows(&m[0])
        })
    });
    sweep("weighted_sum", |rng| {
        let ins = [
            random_tensor(rng, &[2, 3], 1.0),
            random_tensor(rng, &[2, 3], 1.0),
            random_tensor(rng, &[2, 3], 1.0),
            random_tensor(rng, &[3], 1.0),
        ];
        check(
            rng,
            &ins,
            &|g, v| g.weighted_sum(&v[..3], v[3]).unwrap(),
            &|m| weighted_sum(&m[..3], &m[3].d),
        )
    });
}

pub fn cross_entropy_grads() {
    sweep("cross_entropy", |rng| {
        let ins = [random_tensor(rng, &[5, 7], 3.0)];
        let targets = [2, usize::MAX, 6, 0, usize::MAX];
        check(
            rng,
            &ins,
            &|g, v| g.cross_entropy(v[0], &targets, usize::MAX).unwrap(),
            &|m| M::new(1, 1, vec![cross_entropy(&m[0], &targets, usize::MAX)]),
        )
    });
}

/// Gradient of a scalar model loss with respect to sampled parameter
/// coordinates, compared with central differences of a 64-bit reference.
fn check_params(
    rng: &mut ChaCha8Rng,
    store: &ParamStore,
    loss: &dyn Fn(&mut Graph) -> Var,
    reference: &dyn Fn(&Params) -> f64,
    per_param: usize,
) -> f64 {
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    let base = params_from_store(store);
    let f32_loss = g.value(l)[0] as f64;
    let ref_loss = reference(&base);
    assert!(
        (f32_loss - ref_loss).abs() < 1e-4 * ref_loss.abs().max(1.0),
        "forward mismatch {f32_loss} vs {ref_loss}"
    );
    let grads = g.backward(l).unwrap().into_param_grads();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (id, grad) in &grads {
        let name = store.name(*id).to_string();
        let mut coords: Vec<usize> = (0..grad.len()).collect();
        coords.shuffle(rng);
        for &c in coords.iter().take(per_param) {
            let mut plus = base.clone();
            plus.get_mut(&name).unwrap().d[c] += EPS;
            let mut minus = base.clone();
            minus.get_mut(&name).unwrap().d[c] -= EPS;
            numeric.push((reference(&plus) - reference(&minus)) / (2.0 * EPS));
            analytic.push(grad[c] as f64);
        }
    }
    assert!(!analytic.is_empty());
    rel_err(&analytic, &numeric)
}

pub fn transformer_block_params() {
    sweep("transformer_block", |rng| {
        let causal_mask = rng.gen_bool(0.5);
        let cfg = AttentionConfig {
            model_dim: 8,
            num_heads: 2,
            ff_dim: 12,
            causal: causal_mask,
        };
        let mut store = ParamStore::new();
        let block_p = TransformerBlock::new(&mut store, "b", &cfg, rng);
        // non-trivial norms so their gradients are exercised
        for (_, name, _) in store
            .iter()
            .map(|(i, n, p)| (i, n.to_string(), p.clone()))
            .collect::<Vec<_>>()
        {
            if name.contains("norm") {
                let t = random_tensor(rng, &[8], 0.5);
                let p = store.by_name_mut(&name).unwrap();
                p.value
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        let x = random_tensor(rng, &[5, 8], 1.0);
        let proj = random_tensor(rng, &[5, 8], 1.0);
        let xm = M::from_tensor(&x);
        let pm = M::from_tensor(&proj);
        check_params(
            rng,
            &store,
            &|g| {
                let xv = g.constant(x.clone());
                let y = transformer_block(g, xv, &block_p, &cfg).unwrap();
                let r = g.constant(proj.clone());
                let p = g.mul(y, r).unwrap();
                g.sum(p)
            },
            &|p| {
                block(p, "b", &xm, 2, causal_mask)
                    .d
                    .iter()
                    .zip(&pm.d)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            12,
        )
    });
}

fn tiny_model(seed: u64) -> (EChatModel, RefModel) {
    let cfg = ModelConfig::tiny();
    let mut m = EChatModel::new(cfg, seed).unwrap();
    // move the layer-weight logits and norms off their symmetric init
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names: Vec<String> = m.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        if name.contains("weights") || name.contains("norm") {
            let p = m.store.by_name_mut(&name).unwrap();
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    }
    let r = RefModel {
        enc_layers: cfg.encoder.num_layers,
        enc_heads: cfg.encoder.num_heads,
        conv_layers: cfg.encoder.conv_layers,
        conv_stride: cfg.encoder.conv_stride,
        conn_layers: cfg.connector.num_layers,
        conn_heads: cfg.connector.num_heads,
        dec_layers: cfg.decoder.num_layers,
        dec_heads: cfg.decoder.num_heads,
    };
    (m, r)
}

pub fn full_model_stage_losses() {
    for (stage, alpha) in [(Stage::Stage1, 0.0), (Stage::Stage2, 0.3)] {
        sweep("full model", |rng| {
            let seed = rng.gen_range(0..1000);
            let (m, reference) = tiny_model(seed);
            let emotion = EmotionLabel::ALL[rng.gen_range(0..5)];
            let speech = synth_speech("hey yo", emotion, 3).unwrap();
            let sm = M::from_tensor(&speech.to_tensor());
            let prompt = Tokenizer.encode_lossy("say");
            let mut targets = Tokenizer.encode("hey").unwrap();
            targets.push(EOS);
            let label = (stage == Stage::Stage2).then_some(emotion.id());
            check_params(
                rng,
                &m.store,
                &|g| {
                    let prefix = m.prefix(g, stage, &speech).unwrap();
                    let inp = m.assemble(g, stage, &prefix, &prompt, &targets).unwrap();
                    let logits = m.decoder.decoder_forward(g, &inp).unwrap();
                    let l_dec = decoder_loss(g, logits, &inp).unwrap();
                    let mut total = g.scale(l_dec, (1.0 - alpha) as f32);
                    if let (Some(el), Some(y)) = (prefix.emotion_logits, label) {
                        let l_emo = g.cross_entropy(el, &[y], usize::MAX).unwrap();
                        let e = g.scale(l_emo, alpha as f32);
                        total = g.add(total, e).unwrap();
                    }
                    total
                },
                &|p| reference.loss(p, &sm, &prompt, &targets, label, alpha),
                2,
            )
        });
    }
}
