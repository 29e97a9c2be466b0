use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Weights of one LSTM layer (no peepholes).
///
/// Gate blocks are laid out along the columns in the order input, forget,
/// candidate, output: `w_input: [in, 4H]`, `w_hidden: [H, 4H]`, `bias: [4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero bias except forget gate = 1.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let fan_in = (input_size + hidden_size) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w_input = Tensor::uniform(&[input_size, 4 * hidden_size], bound, rng);
        let w_hidden = Tensor::uniform(&[hidden_size, 4 * hidden_size], bound, rng);
        let mut bias = Tensor::zeros(&[4 * hidden_size]);
        for b in &mut bias.data_mut()[hidden_size..2 * hidden_size] {
            *b = 1.0;
        }
        LstmParams {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmParams {
            w_input: Tensor::zeros(&[input_size, 4 * hidden_size]),
            w_hidden: Tensor::zeros(&[hidden_size, 4 * hidden_size]),
            bias: Tensor::zeros(&[4 * hidden_size]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LstmVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LstmVars {
            w_input: leaf(&self.w_input),
            w_hidden: leaf(&self.w_hidden),
            bias: leaf(&self.bias),
            hidden_size: self.hidden_size(),
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden_size: usize,
}

/// Applies the gate nonlinearities to pre-activations `[B, 4H]`.
fn gates(tape: &mut Tape, pre: Var, c_prev: Option<Var>, hidden: usize) -> Result<(Var, Var)> {
    let h = hidden;
    let i_pre = tape.slice_cols(pre, 0, h)?;
    let f_pre = tape.slice_cols(pre, h, 2 * h)?;
    let g_pre = tape.slice_cols(pre, 2 * h, 3 * h)?;
    let o_pre = tape.slice_cols(pre, 3 * h, 4 * h)?;
    let i = tape.sigmoid(i_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let ig = tape.mul(i, g)?;
    let c = match c_prev {
        Some(c_prev) => {
            let f = tape.sigmoid(f_pre);
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// One LSTM step for a batch: `x: [B, in]`, `h_prev`, `c_prev: [B, H]`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    params: &LstmVars,
) -> Result<(Var, Var)> {
    let hidden = params.hidden_size;
    for state in [h_prev, c_prev] {
        let s = tape.value(state);
        if s.rank() != 2 || s.shape()[1] != hidden || s.shape()[0] != tape.value(x).rows() {
            return Err(Error::Dimension {
                op: "lstm_cell",
                left: s.shape().to_vec(),
                right: vec![tape.value(x).rows(), hidden],
            });
        }
    }
    let xw = tape.matmul(x, params.w_input)?;
    let hw = tape.matmul(h_prev, params.w_hidden)?;
    let sum = tape.add(xw, hw)?;
    let pre = tape.add_bias(sum, params.bias)?;
    gates(tape, pre, Some(c_prev), hidden)
}

/// Runs a layer over a whole sequence.
///
/// `inputs` is `[T * B, in]` with the rows of step `t` at `t*B..(t+1)*B`.
/// Returns `[T * B, H]` in the same time-major row order. With `reverse`
/// the recurrence runs from the last step to the first. Both sides start
/// from zero hidden and cell states.
pub fn lstm_layer(
    tape: &mut Tape,
    inputs: Var,
    steps: usize,
    batch: usize,
    params: &LstmVars,
    reverse: bool,
) -> Result<Var> {
    let rows = tape.value(inputs).rows();
    if rows != steps * batch {
        return Err(Error::Dimension {
            op: "lstm_layer",
            left: tape.value(inputs).shape().to_vec(),
            right: vec![steps, batch],
        });
    }
    let hidden = params.hidden_size;
    let xw = tape.matmul(inputs, params.w_input)?;
    let xwb = tape.add_bias(xw, params.bias)?;

    let mut outputs: Vec<Option<Var>> = vec![None; steps];
    let mut state: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let step_in = tape.slice_rows(xwb, t * batch, (t + 1) * batch)?;
        let (h, c) = match state {
            Some((h_prev, c_prev)) => {
                let hw = tape.matmul(h_prev, params.w_hidden)?;
                let pre = tape.add(step_in, hw)?;
                gates(tape, pre, Some(c_prev), hidden)?
            }
            None => gates(tape, step_in, None, hidden)?,
        };
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
    tape.concat_rows(&outputs)
}
