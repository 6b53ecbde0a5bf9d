//! Encoder-decoder attractors and speech-activity posteriors.
//!
//! An LSTM reads the frame embeddings; its final state seeds a second LSTM
//! that is stepped once per speaker on zero input. The decoder's hidden
//! states are the attractors.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Binding, Init, ParamSpec};
use crate::tape::{Tape, Var};

/// One LSTM cell, gates stacked `[input; forget; cell; output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    /// `4d × d`; `None` for a cell that only ever sees zero input.
    pub w_ih: Option<Var>,
    pub w_hh: Var,
    pub b: Var,
}

impl LstmCell {
    pub fn specs(prefix: &str, dim: usize, with_input: bool) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        if with_input {
            s.push(ParamSpec::matrix(format!("{prefix}.w_ih"), 4 * dim, dim));
        }
        s.push(ParamSpec::matrix(format!("{prefix}.w_hh"), 4 * dim, dim));
        s.push(ParamSpec::new(format!("{prefix}.b"), &[4 * dim], Init::Zeros));
        s
    }

    pub fn bind(b: &Binding, prefix: &str, with_input: bool) -> Result<Self> {
        Ok(LstmCell {
            w_ih: if with_input {
                Some(b.var(&format!("{prefix}.w_ih"))?)
            } else {
                None
            },
            w_hh: b.var(&format!("{prefix}.w_hh"))?,
            b: b.var(&format!("{prefix}.b"))?,
        })
    }

    /// One step from `(h, c)` given precomputed input contribution
    /// `x_gates: 4d × 1` (or none for zero input).
    fn step(&self, tape: &mut Tape, x_gates: Option<Var>, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = tape.shape(h)[0];
        let mut z = tape.matmul(self.w_hh, h)?;
        if let Some(x) = x_gates {
            z = tape.add(z, x)?;
        }
        let z = tape.add_bias(z, self.b)?;
        let gate = |tape: &mut Tape, k: usize| tape.slice_rows(z, k * d, (k + 1) * d);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let g = gate(tape, 2)?;
        let g = tape.tanh(g);
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EdaParams {
    pub encoder: LstmCell,
    pub decoder: LstmCell,
}

impl EdaParams {
    pub fn specs(dim: usize) -> Vec<ParamSpec> {
        [LstmCell::specs("eda.encoder", dim, true), LstmCell::specs("eda.decoder", dim, false)]
            .concat()
    }

    pub fn bind(b: &Binding) -> Result<Self> {
        Ok(EdaParams {
            encoder: LstmCell::bind(b, "eda.encoder", true)?,
            decoder: LstmCell::bind(b, "eda.decoder", false)?,
        })
    }
}

/// Attractors `B: d × S` from embeddings `E: d × T`. With `shuffle`, frames
/// are fed to the encoder in a random order.
pub fn compute_attractors<R: Rng + ?Sized>(
    tape: &mut Tape,
    e: Var,
    p: &EdaParams,
    speakers: usize,
    shuffle: Option<&mut R>,
) -> Result<Var> {
    let [d, frames] = tape.shape(e)[..] else {
        return Err(shape_err!("embeddings must be 2-D, got {:?}", tape.shape(e)));
    };
    if speakers == 0 {
        return Err(shape_err!("at least one attractor is required"));
    }
    let e = match shuffle {
        Some(rng) => {
            let mut order: Vec<usize> = (0..frames).collect();
            order.shuffle(rng);
            tape.permute_cols(e, &order)?
        }
        None => e,
    };
    let w_ih = p.encoder.w_ih.ok_or_else(|| shape_err!("encoder cell needs input weights"))?;
    let x_gates = tape.matmul(w_ih, e)?;
    let mut h = tape.constant(crate::Tensor::zeros(&[d, 1]));
    let mut c = h;
    for t in 0..frames {
        let x = tape.slice_cols(x_gates, t, t + 1)?;
        (h, c) = p.encoder.step(tape, Some(x), h, c)?;
    }
    let mut columns = Vec::with_capacity(speakers);
    for _ in 0..speakers {
        (h, c) = p.decoder.step(tape, None, h, c)?;
        columns.push(h);
    }
    tape.concat_cols(&columns)
}

/// `Y = σ(BᵀE)`, `S × T`.
pub fn compute_posteriors(tape: &mut Tape, b: Var, e: Var) -> Result<Var> {
    if tape.shape(b)[0] != tape.shape(e)[0] {
        return Err(shape_err!(
            "attractors {:?} and embeddings {:?} disagree",
            tape.shape(b),
            tape.shape(e)
        ));
    }
    let bt = tape.transpose(b)?;
    let logits = tape.matmul(bt, e)?;
    Ok(tape.sigmoid(logits))
}
