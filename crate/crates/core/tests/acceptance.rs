//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- gradient oracle`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use mceend::checkpoint::Checkpoint;
use mceend::eda::{compute_attractors, compute_posteriors, EdaParams};
use mceend::encoders::{
    co_attention_block, count_activations, encode_session, spatio_temporal_block, transformer_block,
    CoAttentionBlock, CoAttentionOutput, ModelConfig, SpatioTemporalBlock, TransformerBlock, Variant,
};
use mceend::features::{FeatureConfig, ModelInput, SessionFeatures};
use mceend::model::{forward, measure_memory, random_input, Model};
use mceend::nn::{
    co_attention_weights_packed, feed_forward, frontend, grouped_self_attention, layer_norm,
    multi_head_attention, multi_head_co_attention, pack_channels, residual_norm, Attention,
    FeedForward, LayerNorm, Linear, QueryKey, ValueOut,
};
use mceend::params::{Binding, ParamSpec, ParamStore};
use mceend::pit::pit_loss;
use mceend::scoring::{der, DecodeConfig, Segment};
use mceend::simulate::{session_seed, simulate_session, SessionSpec};
use mceend::tape::{grad_check, GradCheckReport};
use mceend::trainer::{
    evaluate, freeze_set, noam_lr, train, AdamState, EvalSession, FreezePolicy, TrainConfig, TrainItem,
    TrainMode, TrainState,
};
use mceend::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL_PRIMITIVE: f64 = 1e-4;
const TOL_END_TO_END: f64 = 1e-3;
const INSTANCES: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Random weights with non-trivial biases and layer-norm affines.
fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut s = ParamStore::init(specs, &mut rng(seed)).unwrap();
    let names: Vec<String> = s.names().map(String::from).collect();
    let mut r = rng(seed ^ 0x5eed);
    for n in names {
        let t = s.get_mut(&n).unwrap();
        if t.ndim() == 1 {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(-1.0..1.0));
        }
    }
    s
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(x), &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

// ---------------------------------------------------------------- gradients

#[derive(Default)]
struct GradTally {
    rows: Vec<(String, usize, f64, bool)>,
}

impl GradTally {
    fn add(&mut self, name: &str, reports: Vec<GradCheckReport>, tol: f64) {
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let ok = reports.iter().all(|r| r.passed) && reports.len() as u64 >= INSTANCES;
        println!("    {name:<28} {:>2} instances  max rel err {worst:.2e}  (tol {tol:.0e})", reports.len());
        self.rows.push((name.into(), reports.len(), worst, ok));
    }
}

/// Checks a tape function of plain inputs.
fn check_inputs(
    tally: &mut GradTally,
    name: &str,
    tol: f64,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let reports = (0..INSTANCES)
        .map(|i| {
            let inputs = make(&mut rng(1000 + i));
            grad_check(|t, v| { let y = f(t, v)?; weighted_sum(t, y, 77 + i) }, &inputs, STEP, tol).unwrap()
        })
        .collect();
    tally.add(name, reports, tol);
}

/// Checks a function of bound parameters plus extra inputs, perturbing both.
fn check_params(
    tally: &mut GradTally,
    name: &str,
    tol: f64,
    specs: &[ParamSpec],
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>,
) {
    let reports = (0..INSTANCES)
        .map(|i| {
            let store = random_store(specs, 2000 + i);
            let names: Vec<String> = store.names().map(String::from).collect();
            let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
            inputs.extend(make(&mut rng(3000 + i)));
            let np = names.len();
            grad_check(
                |t, v| {
                    let b = Binding::from_vars(names.iter().cloned().zip(v[..np].iter().copied()));
                    let y = f(t, &b, &v[np..])?;
                    weighted_sum(t, y, 88 + i)
                },
                &inputs,
                STEP,
                tol,
            )
            .unwrap()
        })
        .collect();
    tally.add(name, reports, tol);
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        input_dim: 6,
        multi_input_dim: 3,
        d_model: 8,
        d_multi: 4,
        heads: 2,
        ff_dim: 12,
        ff_dim_multi: 6,
        blocks: 1,
        speakers: 2,
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut g = GradTally::default();
    let p = TOL_PRIMITIVE;
    let m = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| vec![uniform(shape, r)];
    let m2 = |a: &'static [usize], b: &'static [usize]| move |r: &mut ChaCha8Rng| vec![uniform(a, r), uniform(b, r)];

    check_inputs(&mut g, "matmul", p, m2(&[3, 4], &[4, 5]), |t, v| t.matmul(v[0], v[1]));
    check_inputs(&mut g, "bmm", p, m2(&[2, 3, 4], &[2, 4, 3]), |t, v| t.bmm(v[0], v[1]));
    check_inputs(&mut g, "add", p, m2(&[3, 4], &[3, 4]), |t, v| t.add(v[0], v[1]));
    check_inputs(&mut g, "add_bias", p, m2(&[3, 4], &[3]), |t, v| t.add_bias(v[0], v[1]));
    check_inputs(&mut g, "mul", p, m2(&[3, 4], &[3, 4]), |t, v| t.mul(v[0], v[1]));
    check_inputs(&mut g, "scale", p, m(&[3, 4]), |t, v| Ok(t.scale(v[0], -1.7)));
    check_inputs(&mut g, "add_scalar", p, m(&[3, 4]), |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check_inputs(&mut g, "sigmoid", p, m(&[3, 4]), |t, v| Ok(t.sigmoid(v[0])));
    check_inputs(&mut g, "tanh", p, m(&[3, 4]), |t, v| Ok(t.tanh(v[0])));
    check_inputs(&mut g, "relu", p, m(&[3, 4]), |t, v| Ok(t.relu(v[0])));
    check_inputs(
        &mut g,
        "log",
        p,
        |r| vec![Tensor::from_fn(&[3, 4], |_| r.gen_range(0.2..2.0))],
        |t, v| t.log(v[0]),
    );
    check_inputs(
        &mut g,
        "clamp",
        p,
        // Keep entries away from the bounds.
        |r| vec![Tensor::from_fn(&[3, 4], |i| if i % 3 == 0 { r.gen_range(0.7..1.0) } else { r.gen_range(-0.4..0.4) })],
        |t, v| Ok(t.clamp(v[0], -0.5, 0.5)),
    );
    check_inputs(&mut g, "sum", p, m(&[3, 4]), |t, v| Ok(t.sum(v[0])));
    check_inputs(&mut g, "softmax_columns", p, m(&[4, 5]), |t, v| t.softmax_columns(v[0]));
    check_inputs(
        &mut g,
        "layer_norm (tape)",
        p,
        |r| vec![uniform(&[5, 4], r), uniform(&[5], r), uniform(&[5], r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check_inputs(&mut g, "concat_rows", p, m2(&[2, 4], &[3, 4]), |t, v| t.concat_rows(&[v[0], v[1]]));
    check_inputs(&mut g, "concat_cols", p, m2(&[3, 2], &[3, 4]), |t, v| t.concat_cols(&[v[0], v[1]]));
    check_inputs(&mut g, "mean", p, m2(&[3, 4], &[3, 4]), |t, v| t.mean(&[v[0], v[1]]));
    check_inputs(&mut g, "transpose", p, m(&[3, 4]), |t, v| t.transpose(v[0]));
    check_inputs(&mut g, "slice_rows", p, m(&[5, 4]), |t, v| t.slice_rows(v[0], 1, 4));
    check_inputs(&mut g, "slice_cols", p, m(&[3, 5]), |t, v| t.slice_cols(v[0], 2, 5));
    check_inputs(&mut g, "permute_cols", p, m(&[3, 4]), |t, v| t.permute_cols(v[0], &[2, 0, 3, 1]));
    check_inputs(&mut g, "to_groups", p, m(&[3, 6]), |t, v| t.to_groups(v[0], 3));
    check_inputs(&mut g, "from_groups", p, m(&[3, 2, 4]), |t, v| t.from_groups(v[0]));
    check_inputs(&mut g, "reshape", p, m(&[3, 4]), |t, v| t.reshape(v[0], &[2, 6]));

    check_params(&mut g, "linear", p, &Linear::specs("l", 3, 5), m(&[5, 4]), |t, b, v| {
        Linear::bind(b, "l")?.forward(t, v[0])
    });
    check_params(&mut g, "layer_norm", p, &LayerNorm::specs("ln", 5), m(&[5, 4]), |t, b, v| {
        layer_norm(t, v[0], &LayerNorm::bind(b, "ln")?)
    });
    check_params(&mut g, "residual_norm", p, &LayerNorm::specs("ln", 5), m2(&[5, 4], &[5, 4]), |t, b, v| {
        residual_norm(t, v[0], v[1], &LayerNorm::bind(b, "ln")?)
    });
    let fe_specs = [Linear::specs("p", 4, 6), LayerNorm::specs("ln", 4)].concat();
    check_params(&mut g, "frontend", p, &fe_specs, m(&[6, 5]), |t, b, v| {
        frontend(t, v[0], &Linear::bind(b, "p")?, &LayerNorm::bind(b, "ln")?)
    });
    check_params(&mut g, "feed_forward", p, &FeedForward::specs("f", 4, 7), m(&[4, 5]), |t, b, v| {
        feed_forward(t, v[0], &FeedForward::bind(b, "f")?)
    });
    check_params(&mut g, "multi_head_attention", p, &Attention::specs("a", 4, 4), m2(&[4, 5], &[4, 3]), |t, b, v| {
        multi_head_attention(t, v[0], v[1], v[1], &Attention::bind(b, "a", 2)?)
    });
    check_params(&mut g, "grouped_self_attention", p, &Attention::specs("a", 4, 4), m(&[4, 6]), |t, b, v| {
        grouped_self_attention(t, v[0], &Attention::bind(b, "a", 2)?, 3)
    });
    let mca_specs = [QueryKey::specs("th", 4), ValueOut::specs("ph", 6)].concat();
    check_params(
        &mut g,
        "multi_head_co_attention",
        p,
        &mca_specs,
        |r| {
            let mut xs: Vec<Tensor> = (0..3).map(|_| uniform(&[4, 5], r)).collect();
            xs.push(uniform(&[6, 5], r));
            xs
        },
        |t, b, v| {
            let qk = QueryKey::bind(b, "th")?;
            let vo = ValueOut::bind(b, "ph")?;
            multi_head_co_attention(t, &v[..3], &v[..3], v[3], &qk, &vo, 2)
        },
    );

    let e2e = TOL_END_TO_END;
    let tr = tiny_config(Variant::Transformer);
    check_params(&mut g, "transformer block", e2e, &tr.encoder_specs(), m(&[8, 5]), |t, b, v| {
        transformer_block(t, v[0], &TransformerBlock::bind(b, "blocks.0", 2)?)
    });
    let st = tiny_config(Variant::SpatioTemporal);
    for is_final in [false, true] {
        let name = if is_final { "spatio-temporal block, final" } else { "spatio-temporal block" };
        check_params(&mut g, name, e2e, &st.encoder_specs(), m(&[8, 12]), move |t, b, v| {
            spatio_temporal_block(t, v[0], 3, &SpatioTemporalBlock::bind(b, "blocks.0", 2)?, is_final)
        });
    }
    let co = tiny_config(Variant::CoAttention);
    for is_final in [false, true] {
        let name = if is_final { "co-attention block, final" } else { "co-attention block" };
        check_params(&mut g, name, e2e, &co.encoder_specs(), m2(&[8, 4], &[4, 12]), move |t, b, v| {
            match co_attention_block(t, v[0], v[1], 3, &CoAttentionBlock::bind(b, "blocks.0", 2)?, is_final)? {
                CoAttentionOutput::Hidden { e, p } => {
                    let e = t.sum(e);
                    let p = weighted_sum(t, p, 5)?;
                    let s = t.add(e, p)?;
                    Ok(s)
                }
                CoAttentionOutput::Final(out) => Ok(out),
            }
        });
    }
    check_params(&mut g, "EDA head", e2e, &EdaParams::specs(4), m(&[4, 6]), |t, b, v| {
        let eda = EdaParams::bind(b)?;
        let a = compute_attractors::<ChaCha8Rng>(t, v[0], &eda, 3, None)?;
        compute_posteriors(t, a, v[0])
    });
    let reports = (0..INSTANCES)
        .map(|i| {
            let mut r = rng(4000 + i);
            let s = [2, 3, 4][i as usize % 3];
            let labels = Tensor::from_fn(&[s, 7], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
            let logits = uniform(&[s, 7], &mut r);
            grad_check(
                |t, v| {
                    let y = t.sigmoid(v[0]);
                    Ok(pit_loss(t, y, &labels)?.0)
                },
                &[logits],
                STEP,
                e2e,
            )
            .unwrap()
        })
        .collect();
    g.add("pit_loss", reports, e2e);
    for variant in [Variant::SpatioTemporal, Variant::CoAttention] {
        let config = ModelConfig { blocks: 2, ..tiny_config(variant) };
        let specs = Model::specs(&config);
        let name = format!("{} model + pit", variant.name());
        check_params(&mut g, &name, e2e, &specs, |_| vec![], move |t, b, _| {
            let input = random_input(&config, 6, 2, &mut rng(9));
            let out = forward::<ChaCha8Rng>(t, b, &config, &input, None)?;
            let labels = Tensor::from_fn(&[2, 6], |i| (i % 3 == 0) as u8 as f64);
            Ok(pit_loss(t, out.posteriors, &labels)?.0)
        });
    }

    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<&str> = g.rows.iter().filter(|r| !r.3).map(|r| r.0.as_str()).collect();
    let pass = failed.is_empty() && secs < 300.0;
    let detail = if failed.is_empty() {
        format!("{} checks x {INSTANCES} instances in {secs:.1}s", g.rows.len())
    } else {
        format!("failing: {} ({secs:.1}s)", failed.join(", "))
    };
    outcome(pass, detail)
}

// --------------------------------------------------------- invariance

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        input_dim: 12,
        multi_input_dim: 5,
        d_model: 8,
        d_multi: 4,
        heads: 2,
        ff_dim: 16,
        ff_dim_multi: 8,
        blocks: 2,
        speakers: 2,
    }
}

fn embeddings(model: &Model, input: &ModelInput) -> Tensor {
    let mut tape = Tape::new();
    let frozen: BTreeSet<String> = model.params.names().map(String::from).collect();
    let b = Binding::bind(&mut tape, &model.params, &frozen);
    let e = encode_session(&mut tape, &b, &model.config, input).unwrap();
    tape.value(e).clone()
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in all_permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn channel_invariance() -> Outcome {
    let mut worst_model = 0.0f64;
    for variant in [Variant::SpatioTemporal, Variant::CoAttention] {
        let config = small_config(variant);
        let model = Model::from_params(config.clone(), random_store(&Model::specs(&config), 11)).unwrap();
        let input = random_input(&config, 20, 3, &mut rng(12));
        let e0 = embeddings(&model, &input);
        let y0 = model.infer(&input).unwrap();
        for perm in all_permutations(3) {
            let reordered = input.reorder_channels(&perm);
            worst_model = worst_model
                .max(embeddings(&model, &reordered).max_abs_diff(&e0))
                .max(model.infer(&reordered).unwrap().max_abs_diff(&y0));
        }
    }

    let specs = [QueryKey::specs("th", 6), ValueOut::specs("ph", 6)].concat();
    let store = random_store(&specs, 13);
    let mut r = rng(14);
    let xs: Vec<Tensor> = (0..3).map(|_| uniform(&[6, 9], &mut r)).collect();
    let weights = |order: &[usize]| -> Vec<Tensor> {
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &store, &BTreeSet::new());
        let qk = QueryKey::bind(&b, "th").unwrap();
        let vars: Vec<Var> = order.iter().map(|&c| tape.constant(xs[c].clone())).collect();
        let packed = pack_channels(&mut tape, &vars).unwrap();
        let w = co_attention_weights_packed(&mut tape, packed, packed, 3, &qk, 3).unwrap();
        w.heads.iter().map(|&h| tape.value(h).clone()).collect()
    };
    let w0 = weights(&[0, 1, 2]);
    let mut worst_weights = 0.0f64;
    for perm in all_permutations(3) {
        for (a, b) in weights(&perm).iter().zip(&w0) {
            worst_weights = worst_weights.max(a.max_abs_diff(b));
        }
    }

    let mut worst_single = 0.0f64;
    for seed in 0..10 {
        let store = random_store(&Attention::specs("a", 6, 6), 20 + seed);
        let mut r = rng(40 + seed);
        let (q, k, v) = (uniform(&[6, 7], &mut r), uniform(&[6, 5], &mut r), uniform(&[6, 5], &mut r));
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &store, &BTreeSet::new());
        let attn = Attention::bind(&b, "a", 3).unwrap();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let ma = multi_head_attention(&mut tape, qv, kv, vv, &attn).unwrap();
        let mca = multi_head_co_attention(&mut tape, &[qv], &[kv], vv, &attn.qk, &attn.vo, 3).unwrap();
        worst_single = worst_single.max(tape.value(ma).max_abs_diff(tape.value(mca)));
    }

    let pass = worst_model <= 1e-9 && worst_weights <= 1e-10 && worst_single <= 1e-12;
    outcome(
        pass,
        format!(
            "C=3, 6 orders: E/posteriors {worst_model:.1e} (<=1e-9), MCA weights {worst_weights:.1e} (<=1e-10), MCA(C=1) vs MA {worst_single:.1e} (<=1e-12)"
        ),
    )
}

// --------------------------------------------------------- oracles

/// Loop-based projection `W x + b`.
fn affine(store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let w = store.get(&format!("{prefix}.w")).unwrap();
    let b = store.get(&format!("{prefix}.b")).unwrap();
    let mut out = Tensor::zeros(&[w.rows(), x.cols()]);
    for i in 0..w.rows() {
        for t in 0..x.cols() {
            let mut acc = b.data()[i];
            for j in 0..w.cols() {
                acc += w.get(i, j) * x.get(j, t);
            }
            out.set(i, t, acc);
        }
    }
    out
}

/// Co-attention by loops; one query/key channel gives plain MA.
fn loop_co_attention(
    store: &ParamStore,
    theta: &str,
    phi: &str,
    qs: &[Tensor],
    ks: &[Tensor],
    v: &Tensor,
    heads: usize,
) -> Tensor {
    let c = qs.len();
    let qp: Vec<Tensor> = qs.iter().map(|q| affine(store, &format!("{theta}.q"), q)).collect();
    let kp: Vec<Tensor> = ks.iter().map(|k| affine(store, &format!("{theta}.k"), k)).collect();
    let vp = affine(store, &format!("{phi}.v"), v);
    let d_k = qs[0].rows();
    let (tq, tk) = (qs[0].cols(), ks[0].cols());
    let dh = d_k / heads;
    let dv = vp.rows() / heads;
    let scale = ((c * d_k) as f64 / heads as f64).sqrt();
    let mut mixed = Tensor::zeros(&[vp.rows(), tq]);
    for h in 0..heads {
        for t in 0..tq {
            let logits: Vec<f64> = (0..tk)
                .map(|u| {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        for r in 0..dh {
                            dot += qp[ch].get(h * dh + r, t) * kp[ch].get(h * dh + r, u);
                        }
                    }
                    dot / scale
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for r in 0..dv {
                let mut acc = 0.0;
                for u in 0..tk {
                    acc += vp.get(h * dv + r, u) * ex[u] / z;
                }
                mixed.set(h * dv + r, t, acc);
            }
        }
    }
    affine(store, &format!("{phi}.o"), &mixed)
}

/// Binary cross entropy summed row by row, scaled by `−1/(S·T)`.
fn bce_oracle(y: &Tensor, labels: &Tensor, perm: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (s, &ls) in perm.iter().enumerate() {
        for t in 0..y.cols() {
            let p = y.get(s, t);
            let l = labels.get(ls, t);
            acc += l * p.ln() + (1.0 - l) * (1.0 - p).ln();
        }
    }
    acc * (-1.0 / y.numel() as f64)
}

/// Segments on an integer millisecond grid.
#[derive(Clone)]
struct MsSeg {
    speaker: usize,
    on: i64,
    off: i64,
}

/// Error and speech counts in 10 ms frames: frame `i` is active when its
/// center `10i + 5` ms lies in `[on, off)`; frames within the collar of a
/// reference boundary are skipped; speakers are mapped to maximize matches.
fn der_oracle(reference: &[MsSeg], hypothesis: &[MsSeg], collar_ms: i64) -> (i64, i64) {
    let end = reference.iter().chain(hypothesis).map(|s| s.off).max().unwrap_or(0);
    let frames = (end / 10 + 200) as usize;
    let spk = |segs: &[MsSeg]| segs.iter().map(|s| s.speaker + 1).max().unwrap_or(0);
    let (nr, nh) = (spk(reference), spk(hypothesis));
    let active = |segs: &[MsSeg], n: usize| {
        let mut a = vec![vec![false; frames]; n];
        for s in segs {
            for (i, x) in a[s.speaker].iter_mut().enumerate() {
                let c = 10 * i as i64 + 5;
                *x |= c >= s.on && c < s.off;
            }
        }
        a
    };
    let (r, h) = (active(reference, nr), active(hypothesis, nh));
    let scored: Vec<bool> = (0..frames)
        .map(|i| {
            let c = 10 * i as i64 + 5;
            reference.iter().all(|s| (c - s.on).abs() >= collar_ms && (c - s.off).abs() >= collar_ms)
                || collar_ms == 0
        })
        .collect();
    let n = nr.max(nh);
    let mut best: Option<(i64, i64)> = None;
    // Every assignment of hypothesis speakers to distinct reference slots.
    for perm in all_permutations(n) {
        let (mut errors, mut speech) = (0i64, 0i64);
        for i in (0..frames).filter(|&i| scored[i]) {
            let ref_on = |k: usize| k < nr && r[k][i];
            let hyp_on = |k: usize| k < nh && h[k][i];
            let a = (0..n).filter(|&k| ref_on(k)).count() as i64;
            let b = (0..n).filter(|&k| hyp_on(k)).count() as i64;
            let matched = (0..n).filter(|&k| hyp_on(k) && ref_on(perm[k])).count() as i64;
            errors += a.max(b) - matched;
            speech += a;
        }
        if best.is_none_or(|(e, _)| errors < e) {
            best = Some((errors, speech));
        }
    }
    best.unwrap()
}

fn random_ms_segments(r: &mut ChaCha8Rng, speakers: usize) -> Vec<MsSeg> {
    // No boundary may fall on a frame center (5 ms remainder).
    let off_center = |x: i64| if x % 10 == 5 { x + 1 } else { x };
    let mut out = Vec::new();
    for speaker in 0..speakers {
        let mut t = 0i64;
        for _ in 0..r.gen_range(0..5) {
            let on = off_center(t + r.gen_range(0..1500));
            let off = off_center(on + r.gen_range(1..2000));
            out.push(MsSeg { speaker, on, off });
            t = off + 10;
        }
    }
    out
}

fn to_segments(segs: &[MsSeg], prefix: &str) -> Vec<Segment> {
    segs.iter()
        .map(|s| Segment::new("x", &format!("{prefix}{}", s.speaker), s.on as f64 / 1000.0, s.off as f64 / 1000.0).unwrap())
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut problems = Vec::new();

    let mut pit_cases = 0;
    for s in [2usize, 3, 4] {
        for i in 0..10 {
            let mut r = rng(500 + 10 * s as u64 + i);
            let t = 9;
            let y = Tensor::from_fn(&[s, t], |_| r.gen_range(0.02..0.98));
            let labels = Tensor::from_fn(&[s, t], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            let (mut best_v, mut best_p) = (f64::INFINITY, vec![]);
            for p in all_permutations(s) {
                let v = bce_oracle(&y, &labels, &p);
                if v < best_v {
                    (best_v, best_p) = (v, p);
                }
            }
            let mut tape = Tape::new();
            let yv = tape.constant(y.clone());
            let (loss, perm) = pit_loss(&mut tape, yv, &labels).unwrap();
            let got = tape.value(loss).data()[0];
            if perm != best_p || got != best_v {
                problems.push(format!("pit S={s}: {got} vs {best_v}"));
            }
            pit_cases += 1;
        }
    }

    let mut worst_attn = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(600 + seed);
        let store = random_store(&Attention::specs("a", 6, 4), 700 + seed);
        let (q, k, v) = (uniform(&[6, 5], &mut r), uniform(&[6, 7], &mut r), uniform(&[4, 7], &mut r));
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &store, &BTreeSet::new());
        let attn = Attention::bind(&b, "a", 2).unwrap();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let ma = multi_head_attention(&mut tape, qv, kv, vv, &attn).unwrap();
        let oracle = loop_co_attention(&store, "a.theta", "a.phi", &[q], &[k], &v, 2);
        worst_attn = worst_attn.max(tape.value(ma).max_abs_diff(&oracle));

        let c = 1 + seed as usize % 4;
        let qs: Vec<Tensor> = (0..c).map(|_| uniform(&[6, 5], &mut r)).collect();
        let ks: Vec<Tensor> = (0..c).map(|_| uniform(&[6, 7], &mut r)).collect();
        let qvs: Vec<Var> = qs.iter().map(|x| tape.constant(x.clone())).collect();
        let kvs: Vec<Var> = ks.iter().map(|x| tape.constant(x.clone())).collect();
        let mca = multi_head_co_attention(&mut tape, &qvs, &kvs, vv, &attn.qk, &attn.vo, 2).unwrap();
        let oracle = loop_co_attention(&store, "a.theta", "a.phi", &qs, &ks, &v, 2);
        worst_attn = worst_attn.max(tape.value(mca).max_abs_diff(&oracle));
    }
    if worst_attn > 1e-10 {
        problems.push(format!("attention oracle diff {worst_attn:.2e}"));
    }

    let hand = der(
        &[Segment::new("x", "A", 0.0, 1.0).unwrap()],
        &[Segment::new("x", "h0", 0.0, 0.5).unwrap()],
        0.25,
    )
    .unwrap();
    if hand.der != 0.5 {
        problems.push(format!("hand case DER {}", hand.der));
    }
    let mut der_sets = 0;
    let mut r = rng(800);
    while der_sets < 50 {
        let (nr, nh) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let reference = random_ms_segments(&mut r, nr);
        let hypothesis = random_ms_segments(&mut r, nh);
        if reference.is_empty() {
            continue;
        }
        let collar_ms = [0i64, 50, 250][der_sets % 3];
        let got = der(&to_segments(&reference, "r"), &to_segments(&hypothesis, "h"), collar_ms as f64 / 1000.0).unwrap();
        let (errors, speech) = der_oracle(&reference, &hypothesis, collar_ms);
        let frames = |x: f64| (x / 0.01).round() as i64;
        let expect = if speech > 0 { errors as f64 / speech as f64 } else if errors > 0 { 1.0 } else { 0.0 };
        if frames(got.errors()) != errors || frames(got.scored_speech) != speech || (got.der - expect).abs() > 1e-12 {
            problems.push(format!(
                "DER set {der_sets}: {} / {} frames vs oracle {errors} / {speech}",
                frames(got.errors()),
                frames(got.scored_speech)
            ));
        }
        der_sets += 1;
    }

    let detail = if problems.is_empty() {
        format!(
            "{pit_cases} PIT cases exact, attention max diff {worst_attn:.1e} (<=1e-10), {der_sets} DER sets + hand case 0.5"
        )
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

// --------------------------------------------------------- optimizer

fn scheduler_optimizer() -> Outcome {
    let mut problems = Vec::new();
    let (d, warmup) = (256usize, 100_000u64);
    for step in [1u64, 1_000, 100_000, 1_000_000] {
        let s = step as f64;
        let direct = (1.0 / (d as f64).sqrt()) * (1.0 / s.sqrt()).min(s / (warmup as f64).powf(1.5));
        let got = noam_lr(step, d, warmup, 1.0).unwrap();
        if (got - direct).abs() > 1e-12 {
            problems.push(format!("noam step {step}: {got} vs {direct}"));
        }
    }

    // One Adam step from zero moments: m = 0.1 g, v = 0.001 g², bias
    // corrections 0.1 and 0.001, so the update is lr · g / (|g| + eps).
    let mut params = ParamStore::new();
    params.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
    let g = [0.5, -0.1, 0.0];
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(g.to_vec()))]);
    let lr = 0.01;
    AdamState::new().step(&mut params, &grads, &BTreeSet::new(), lr).unwrap();
    let expect: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(g)
        .map(|(p, g): (&f64, f64)| {
            let m = 0.1 * g / 0.1;
            let v = 0.001 * g * g / (1.0 - 0.999);
            p - lr * m / (v.sqrt() + 1e-8)
        })
        .collect();
    let got = params.get("w").unwrap().data().to_vec();
    if got.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-12) {
        problems.push(format!("adam {got:?} vs {expect:?}"));
    }
    let detail = if problems.is_empty() {
        "noam at 1, 1e3, 1e5, 1e6 within 1e-12; Adam step matches".to_string()
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

// --------------------------------------------------------- memory

fn memory_accounting() -> Outcome {
    let full = ModelConfig::default();
    let slope = |variant: Variant| {
        let c = ModelConfig { variant, ..full.clone() };
        let a = count_activations(&c, 500, 1).per_channel_embeddings_per_block as f64;
        let b = count_activations(&c, 500, 8).per_channel_embeddings_per_block as f64;
        (b - a) / 7.0
    };
    let ratio = slope(Variant::CoAttention) / slope(Variant::SpatioTemporal);

    // The dims and chunk length the desk-scale experiments train with.
    let desk = desk_model(Variant::CoAttention);
    let frames = 500;
    let mut rows = Vec::new();
    let mut ordered = true;
    for c in [2usize, 4, 8] {
        let st = measure_memory(&desk.clone().with_variant(Variant::SpatioTemporal), frames, c, 0).unwrap();
        let co = measure_memory(&desk.clone().with_variant(Variant::CoAttention), frames, c, 0).unwrap();
        let holds = st.peak_bytes > co.peak_bytes;
        ordered &= holds;
        rows.push(format!(
            "C={c} {:.1}/{:.1} MB{}",
            st.peak_bytes as f64 / 1e6,
            co.peak_bytes as f64 / 1e6,
            if holds { "" } else { " (reversed)" }
        ));
    }
    outcome(
        (ratio - 0.25).abs() < 1e-12 && ordered,
        format!(
            "slope ratio {ratio:.4} (need 0.25); peak spatio-temporal/co-attention at D=64, D'=16, N=2, T={frames}: {}",
            rows.join(", ")
        ),
    )
}

// --------------------------------------------------------- experiments

fn features() -> FeatureConfig {
    FeatureConfig::default()
}

fn simulate(spec: &SessionSpec, count: usize, seed: u64, channels: Option<usize>) -> Vec<(TrainItem, EvalSession)> {
    let fc = features();
    (0..count)
        .map(|i| {
            let s = SessionSpec {
                seed: session_seed(seed, i),
                ..spec.clone()
            };
            let sess = simulate_session(&format!("s{seed}-{i}"), &s).unwrap();
            let waves = &sess.channels[..channels.unwrap_or(sess.channels.len())];
            let f = SessionFeatures::extract(waves, &fc).unwrap();
            let refs = sess.truth.segments(&sess.id);
            let item = TrainItem::new(&sess.id, f.clone(), &refs, spec.speakers, fc.frame_period()).unwrap();
            (item, EvalSession { id: sess.id.clone(), features: f, reference: refs })
        })
        .collect()
}

fn desk_model(variant: Variant) -> ModelConfig {
    let fc = features();
    ModelConfig {
        variant,
        input_dim: fc.spliced_dim(),
        multi_input_dim: fc.n_mels,
        d_model: 64,
        d_multi: 16,
        heads: 2,
        ff_dim: 256,
        ff_dim_multi: 64,
        blocks: 2,
        speakers: 2,
    }
}

fn der_percent(model: &Model, sessions: &[EvalSession], channels: usize) -> f64 {
    100.0 * evaluate(model, sessions, channels, &DecodeConfig::default(), features().frame_period())
        .unwrap()
        .aggregate
        .der
}

/// Trains in rounds of `every` steps until `stop` returns true or the step
/// budget runs out. Returns the steps taken.
fn train_until(state: &mut TrainState, items: &[TrainItem], cfg: &TrainConfig, budget: u64, every: u64, mut stop: impl FnMut(&Model, u64) -> bool) -> u64 {
    let mut done = 0;
    while done < budget {
        done = (done + every).min(budget);
        train(state, items, &TrainConfig { max_steps: Some(done), ..cfg.clone() }, None).unwrap();
        if stop(&state.model, done) {
            break;
        }
    }
    done
}

struct Shared {
    overfit_model: Option<Model>,
}

fn overfit(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let spec = SessionSpec {
        channels: 2,
        duration: 60.0,
        ..SessionSpec::default()
    };
    let data = simulate(&spec, 8, 3, None);
    let (items, evals): (Vec<_>, Vec<_>) = data.into_iter().unzip();
    let mut state = TrainState::new(Model::init(desk_model(Variant::CoAttention), 3).unwrap());
    let cfg = TrainConfig {
        chunk_frames: 600,
        batch_size: 4,
        warmup: 200,
        epochs: usize::MAX,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut last = f64::NAN;
    let steps = train_until(&mut state, &items, &cfg, 2000, 100, |m, step| {
        last = der_percent(m, &evals, 2);
        println!("    step {step}: training DER {last:.2}%");
        last < 5.0
    });
    let secs = t0.elapsed().as_secs_f64();
    shared.overfit_model = Some(state.model);
    outcome(
        last < 5.0 && secs < 900.0,
        format!("training DER {last:.2}% after {steps} steps in {secs:.0}s (need <5% within 2000 steps, 900s)"),
    )
}

fn channel_count_independence(shared: &mut Shared) -> Outcome {
    let model = match shared.overfit_model.take() {
        Some(m) => m,
        None => Model::init(desk_model(Variant::CoAttention), 3).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&model).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    let before = loaded.params.clone();
    let spec = SessionSpec {
        channels: 8,
        duration: 20.0,
        ..SessionSpec::default()
    };
    let (_, eval) = simulate(&spec, 1, 99, None).pop().unwrap();
    let mut rows = Vec::new();
    let mut ok = true;
    for c in [1usize, 2, 4, 8] {
        let ids: Vec<usize> = (0..c).collect();
        let input = eval.features.model_input(Variant::CoAttention, &ids, 0..eval.features.frames()).unwrap();
        match loaded.infer(&input) {
            Ok(y) => {
                ok &= y.is_finite() && y.shape() == [2, eval.features.frames()];
                rows.push(format!("C={c} ok"));
            }
            Err(e) => {
                ok = false;
                rows.push(format!("C={c} {e}"));
            }
        }
    }
    ok &= loaded.params == before;
    outcome(ok, format!("{}; parameters unchanged", rows.join(", ")))
}

const SPATIAL_SEEDS: [u64; 3] = [0, 1, 2];
const SPATIAL_STEPS: u64 = 800;

struct SpatialRun {
    seed: u64,
    model: Model,
    eval: Vec<EvalSession>,
    single_channel_items: Vec<TrainItem>,
}

fn spatial_spec() -> SessionSpec {
    SessionSpec {
        channels: 4,
        identical_voice: true,
        ..SessionSpec::default()
    }
}

fn spatial_utilization(runs: &mut Vec<SpatialRun>) -> Outcome {
    let t0 = Instant::now();
    let train_spec = SessionSpec { duration: 30.0, ..spatial_spec() };
    let mut gains = Vec::new();
    let mut hybrid_gains = Vec::new();
    for seed in SPATIAL_SEEDS {
        let items: Vec<TrainItem> = simulate(&train_spec, 40, 100 + seed, None).into_iter().map(|x| x.0).collect();
        let eval: Vec<EvalSession> = simulate(&spatial_spec(), 20, 200 + seed, None).into_iter().map(|x| x.1).collect();
        let hybrid_spec = SessionSpec { hybrid: true, ..spatial_spec() };
        let hybrid: Vec<EvalSession> = simulate(&hybrid_spec, 20, 300 + seed, None).into_iter().map(|x| x.1).collect();
        let mut state = TrainState::new(Model::init(desk_model(Variant::CoAttention), seed).unwrap());
        let cfg = TrainConfig {
            chunk_frames: 500,
            batch_size: 8,
            warmup: 200,
            noam_scale: 2.0,
            epochs: usize::MAX,
            seed,
            ..TrainConfig::default()
        };
        train_until(&mut state, &items, &cfg, SPATIAL_STEPS, SPATIAL_STEPS, |_, _| false);
        let (d4, d1) = (der_percent(&state.model, &eval, 4), der_percent(&state.model, &eval, 1));
        let (h4, h1) = (der_percent(&state.model, &hybrid, 4), der_percent(&state.model, &hybrid, 1));
        println!("    seed {seed}: identical-voice 4ch {d4:.1}% 1ch {d1:.1}%; hybrid 4ch {h4:.1}% 1ch {h1:.1}%");
        gains.push(d1 - d4);
        hybrid_gains.push(h1 - h4);
        let single_channel_items = simulate(&train_spec, 40, 100 + seed, Some(1)).into_iter().map(|x| x.0).collect();
        runs.push(SpatialRun { seed, model: state.model, eval, single_channel_items });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (gain, hybrid_gain) = (mean(&gains), mean(&hybrid_gains));
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        gain >= 15.0 && hybrid_gain < 5.0 && secs < 3600.0,
        format!(
            "4ch advantage {gain:.1} points (need >=15), hybrid advantage {hybrid_gain:.1} (need <5), {secs:.0}s"
        ),
    )
}

fn adaptation_freeze(runs: &[SpatialRun]) -> Outcome {
    if runs.is_empty() {
        return outcome(false, "needs the spatial-utilization models; run it in the same invocation");
    }
    let mut ok = true;
    let mut rows = Vec::new();
    for run in runs {
        let frozen = freeze_set(&run.model.config, FreezePolicy::ChannelInvariant);
        let before_der = der_percent(&run.model, &run.eval, 4);
        let mut state = TrainState::new(run.model.clone());
        let cfg = TrainConfig {
            mode: TrainMode::Adapt,
            freeze_policy: FreezePolicy::ChannelInvariant,
            chunk_frames: 500,
            batch_size: 8,
            epochs: usize::MAX,
            max_steps: Some(100),
            seed: run.seed,
            ..TrainConfig::default()
        };
        train(&mut state, &run.single_channel_items, &cfg, None).unwrap();
        let identical = frozen
            .iter()
            .all(|n| run.model.params.get(n).map(Tensor::data) == state.model.params.get(n).map(Tensor::data));
        let changed = run
            .model
            .params
            .iter()
            .any(|(n, t)| !frozen.contains(n) && state.model.params.get(n).unwrap() != t);
        let after_der = der_percent(&state.model, &run.eval, 4);
        let fine = identical && changed && !frozen.is_empty() && after_der - before_der <= 5.0;
        ok &= fine;
        rows.push(format!(
            "seed {}: {} frozen tensors {}, 4ch DER {before_der:.1}% -> {after_der:.1}%",
            run.seed,
            frozen.len(),
            if identical { "bit-identical" } else { "CHANGED" }
        ));
    }
    outcome(ok, rows.join("; "))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let mut shared = Shared { overfit_model: None };
    let mut runs = Vec::new();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |key: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(key) {
            println!("{key} ...");
            let o = f();
            println!("{} {key}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((key, o));
        }
    };
    run("gradient suite", &mut gradient_suite);
    run("channel invariance", &mut channel_invariance);
    run("oracle equivalence", &mut oracle_equivalence);
    run("scheduler and optimizer", &mut scheduler_optimizer);
    run("memory accounting", &mut memory_accounting);
    run("overfit", &mut || overfit(&mut shared));
    run("channel-count independence", &mut || channel_count_independence(&mut shared));
    run("spatial utilization", &mut || spatial_utilization(&mut runs));
    run("adaptation freeze", &mut || adaptation_freeze(&runs));

    println!();
    println!("acceptance summary");
    for (key, o) in &results {
        println!("{} {key}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("{passed}/{} criteria pass", results.len());
}
