//! LSTM cell: parameters and a single differentiable step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights for one LSTM cell. Gate order along the packed 4·hidden axis is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    /// [input_size, 4·hidden]
    pub w_ih: Tensor,
    /// [hidden, 4·hidden]
    pub w_hh: Tensor,
    /// [4·hidden]
    pub bias: Tensor,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCellParams {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        LstmCellParams {
            w_ih: Tensor::uniform_init(&[input_size, 4 * hidden_size], input_size, rng),
            w_hh: Tensor::uniform_init(&[hidden_size, 4 * hidden_size], hidden_size, rng),
            bias: Tensor::uniform_init(&[4 * hidden_size], hidden_size, rng),
            input_size,
            hidden_size,
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str) -> BoundLstm {
        BoundLstm {
            w_ih: binder.bind(tape, &format!("{prefix}.w_ih"), &self.w_ih),
            w_hh: binder.bind(tape, &format!("{prefix}.w_hh"), &self.w_hh),
            bias: binder.bind(tape, &format!("{prefix}.bias"), &self.bias),
            hidden_size: self.hidden_size,
            input_size: self.input_size,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w_ih"), &self.w_ih);
        f(&format!("{prefix}.w_hh"), &self.w_hh);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w_ih"), &mut self.w_ih);
        f(&format!("{prefix}.w_hh"), &mut self.w_hh);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Cell parameters bound onto a tape.
#[derive(Clone, Copy)]
pub struct BoundLstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden_size: usize,
    pub input_size: usize,
}

/// One step: x [B,I], h and c [B,H] → (h', c').
pub fn lstm_step(tape: &mut Tape, p: &BoundLstm, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hs = p.hidden_size;
    let check = |t: Var, cols: usize, what: &str| -> Result<()> {
        let s = tape.shape(t);
        if s.len() != 2 || s[1] != cols {
            return Err(Error::dimension(
                "lstm_step",
                format!("{what} has shape {s:?}, expected [batch, {cols}]"),
            ));
        }
        Ok(())
    };
    check(x, p.input_size, "input")?;
    check(h, hs, "hidden state")?;
    check(c, hs, "cell state")?;

    let gi = tape.matmul(x, p.w_ih)?;
    let gh = tape.matmul(h, p.w_hh)?;
    let pre = tape.add(gi, gh)?;
    let gates = tape.add_bias(pre, p.bias)?;

    let i_gate = tape.slice_cols(gates, 0, hs)?;
    let f_gate = tape.slice_cols(gates, hs, hs)?;
    let g_cand = tape.slice_cols(gates, 2 * hs, hs)?;
    let o_gate = tape.slice_cols(gates, 3 * hs, hs)?;

    let i = tape.sigmoid(i_gate);
    let f = tape.sigmoid(f_gate);
    let g = tape.tanh(g_cand);
    let o = tape.sigmoid(o_gate);

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tanh_c = tape.tanh(c_next);
    let h_next = tape.mul(o, tanh_c)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(input: usize, hidden: usize) -> LstmCellParams {
        LstmCellParams {
            w_ih: Tensor::zeros(&[input, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
            input_size: input,
            hidden_size: hidden,
        }
    }

    #[test]
    fn zero_params_zero_state_gives_zero_outputs() {
        let params = zero_params(3, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bound = params.bind(&mut tape, &mut binder, "cell");
        let x = tape.constant(vec![0.4, -1.2, 2.0], vec![1, 3]).unwrap();
        let h = tape.zeros(&[1, 2]);
        let c = tape.zeros(&[1, 2]);
        let (h1, c1) = lstm_step(&mut tape, &bound, x, h, c).unwrap();
        assert!(tape.value(h1).iter().all(|&v| v == 0.0));
        assert!(tape.value(c1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steps_thread_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LstmCellParams::init(2, 3, &mut rng);
        let x1_data = vec![0.3, -0.8];
        let x2_data = vec![1.1, 0.2];

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bound = params.bind(&mut tape, &mut binder, "cell");
        let x1 = tape.constant(x1_data.clone(), vec![1, 2]).unwrap();
        let x2 = tape.constant(x2_data.clone(), vec![1, 2]).unwrap();
        let h0 = tape.zeros(&[1, 3]);
        let c0 = tape.zeros(&[1, 3]);
        let (h1, c1) = lstm_step(&mut tape, &bound, x1, h0, c0).unwrap();
        let (h2, _) = lstm_step(&mut tape, &bound, x2, h1, c1).unwrap();
        let chained = tape.value(h2).to_vec();

        // Re-run the second step on a fresh tape seeded with step-1 state.
        let h1_vals = tape.value(h1).to_vec();
        let c1_vals = tape.value(c1).to_vec();
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new();
        let bound2 = params.bind(&mut tape2, &mut binder2, "cell");
        let x2b = tape2.constant(x2_data, vec![1, 2]).unwrap();
        let h1b = tape2.constant(h1_vals, vec![1, 3]).unwrap();
        let c1b = tape2.constant(c1_vals, vec![1, 3]).unwrap();
        let (h2b, _) = lstm_step(&mut tape2, &bound2, x2b, h1b, c1b).unwrap();
        assert_eq!(chained, tape2.value(h2b));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let params = zero_params(3, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bound = params.bind(&mut tape, &mut binder, "cell");
        let x = tape.zeros(&[1, 4]);
        let h = tape.zeros(&[1, 2]);
        let c = tape.zeros(&[1, 2]);
        assert!(matches!(
            lstm_step(&mut tape, &bound, x, h, c),
            Err(Error::Dimension { .. })
        ));
    }
}
