use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `U` (input_dim x hidden), `W` (hidden x hidden) and bias `b` (1 x hidden)
/// for one gate: `act(x U + h W + b)`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

/// Gate tensors of one LSTM direction. `z` is the gate applied to the
/// candidate cell, `f` the gate applied to the previous cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub z: GateParams,
    pub f: GateParams,
    pub o: GateParams,
    pub c: GateParams,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut gate = |name: &str, store: &mut ParamStore| -> Result<GateParams> {
            Ok(GateParams {
                input: store.add(
                    format!("{prefix}.u_{name}"),
                    Tensor::glorot(input_dim, hidden_dim, rng),
                )?,
                hidden: store.add(
                    format!("{prefix}.w_{name}"),
                    Tensor::glorot(hidden_dim, hidden_dim, rng),
                )?,
                bias: store.add(format!("{prefix}.b_{name}"), Tensor::zeros(&[1, hidden_dim]))?,
            })
        };
        Ok(LstmParams {
            z: gate("z", store)?,
            f: gate("f", store)?,
            o: gate("o", store)?,
            c: gate("c", store)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn ids(&self) -> [ParamId; 12] {
        let g = [self.z, self.f, self.o, self.c];
        let mut out = [self.z.input; 12];
        for (i, gp) in g.iter().enumerate() {
            out[3 * i] = gp.input;
            out[3 * i + 1] = gp.hidden;
            out[3 * i + 2] = gp.bias;
        }
        out
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        LstmState {
            h: g.zeros(batch, self.hidden_dim),
            c: g.zeros(batch, self.hidden_dim),
        }
    }
}

fn gate_pre(g: &mut Graph, store: &ParamStore, x: Var, h: Var, p: &GateParams) -> Result<Var> {
    let u = g.param(store, p.input)?;
    let w = g.param(store, p.hidden)?;
    let b = g.param(store, p.bias)?;
    let xu = g.matmul(x, u)?;
    let hw = g.matmul(h, w)?;
    let s = g.add(xu, hw)?;
    g.add_row(s, b)
}

/// One LSTM step over a batch of rows:
///
/// ```text
/// z = σ(x U_z + h W_z + b_z)   f = σ(x U_f + h W_f + b_f)   o = σ(x U_o + h W_o + b_o)
/// ĉ = tanh(x U_c + h W_c + b_c)
/// c = f ∘ c_prev + z ∘ ĉ
/// h = tanh(c) ∘ o
/// ```
pub fn lstm_cell(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prev: &LstmState,
    p: &LstmParams,
) -> Result<LstmState> {
    let (n, k) = g.shape(x);
    if k != p.input_dim || g.shape(prev.h) != (n, p.hidden_dim) || g.shape(prev.c) != (n, p.hidden_dim) {
        return Err(Error::Shape(format!(
            "lstm_cell: input {n}x{k}, h {:?}, c {:?}, expected input dim {} hidden {}",
            g.shape(prev.h),
            g.shape(prev.c),
            p.input_dim,
            p.hidden_dim
        )));
    }
    let zp = gate_pre(g, store, x, prev.h, &p.z)?;
    let z = g.sigmoid(zp)?;
    let fp = gate_pre(g, store, x, prev.h, &p.f)?;
    let f = g.sigmoid(fp)?;
    let op = gate_pre(g, store, x, prev.h, &p.o)?;
    let o = g.sigmoid(op)?;
    let cp = gate_pre(g, store, x, prev.h, &p.c)?;
    let cand = g.tanh(cp)?;

    let carry = g.mul(f, prev.c)?;
    let write = g.mul(z, cand)?;
    let c = g.add(carry, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(tc, o)?;
    Ok(LstmState { h, c })
}

/// Runs `fwd` left to right and `bwd` right to left over `seq`, returning the
/// per-position concatenation `[h_fwd | h_bwd]` (width `2 * hidden`).
pub fn bilstm_encode(
    g: &mut Graph,
    store: &ParamStore,
    seq: &[Var],
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<Vec<Var>> {
    let first = *seq
        .first()
        .ok_or_else(|| Error::Shape("bilstm_encode of an empty sequence".into()))?;
    let n = g.shape(first).0;

    let mut state = fwd.zero_state(g, n);
    let mut forward = Vec::with_capacity(seq.len());
    for &x in seq {
        state = lstm_cell(g, store, x, &state, fwd)?;
        forward.push(state.h);
    }

    let mut state = bwd.zero_state(g, n);
    let mut backward = vec![forward[0]; seq.len()];
    for (i, &x) in seq.iter().enumerate().rev() {
        state = lstm_cell(g, store, x, &state, bwd)?;
        backward[i] = state.h;
    }

    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat_cols(&[f, b]))
        .collect()
}

/// Mean over positions of the BiLSTM outputs.
pub fn bilstm_mean(
    g: &mut Graph,
    store: &ParamStore,
    seq: &[Var],
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<Var> {
    let outs = bilstm_encode(g, store, seq, fwd, bwd)?;
    let mut acc = outs[0];
    for &o in &outs[1..] {
        acc = g.add(acc, o)?;
    }
    g.scale(acc, 1.0 / outs.len() as f64)
}
