//! Attentional encoder-decoder: a bidirectional LSTM encoder over the
//! pooled feature sequence and a unidirectional LSTM decoder with additive
//! attention that emits alphabet symbols until EOS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Binder, LinearLayer};
use crate::lstm::{lstm_step, BoundLstm, LstmCellParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Recognition alphabet: ten digits, 26 case-insensitive letters, EOS last.
pub struct Alphabet;

impl Alphabet {
    pub const SIZE: usize = 37;
    pub const EOS: usize = 36;
    /// Virtual start-of-sequence index used only for the decoder's
    /// previous-symbol input at step 0.
    pub const START: usize = 37;

    pub fn index_of(c: char) -> Option<usize> {
        let c = c.to_ascii_lowercase();
        match c {
            '0'..='9' => Some(c as usize - '0' as usize),
            'a'..='z' => Some(10 + c as usize - 'a' as usize),
            _ => None,
        }
    }

    pub fn char_at(i: usize) -> Option<char> {
        match i {
            0..=9 => Some((b'0' + i as u8) as char),
            10..=35 => Some((b'a' + (i - 10) as u8) as char),
            _ => None,
        }
    }

    /// Case-folds and encodes a label (no EOS appended).
    pub fn encode(s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| {
                Alphabet::index_of(c)
                    .ok_or_else(|| Error::Data(format!("symbol {c:?} outside alphabet")))
            })
            .collect()
    }

    /// Decodes up to (and excluding) the first EOS.
    pub fn decode(ids: &[usize]) -> String {
        ids.iter().take_while(|&&i| i != Alphabet::EOS).filter_map(|&i| Alphabet::char_at(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrevSymbolRepr {
    /// Learned embedding of the given width (default 64).
    Embedding { dim: usize },
    /// Fixed one-hot encoding over symbols plus the start token.
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderInit {
    /// h₀ = [forward final state ‖ backward final state].
    ConcatFinal,
    /// h₀ = the encoder output row at the last time step.
    LastStep,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Seq2SeqConfig {
    /// Encoder hidden width per direction.
    pub enc_hidden: usize,
    /// Decoder hidden width; must equal 2·enc_hidden for the state hand-off.
    pub dec_hidden: usize,
    /// Attention energy inner width.
    pub attn_dim: usize,
    pub prev_symbol: PrevSymbolRepr,
    pub decoder_init: DecoderInit,
    /// Hard cap on decoded length; targets are padded to this many tokens.
    pub max_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            enc_hidden: 256,
            dec_hidden: 512,
            attn_dim: 256,
            prev_symbol: PrevSymbolRepr::Embedding { dim: 64 },
            decoder_init: DecoderInit::ConcatFinal,
            max_len: 64,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dec_hidden != 2 * self.enc_hidden {
            return Err(Error::Config(format!(
                "dec_hidden ({}) must equal 2·enc_hidden ({})",
                self.dec_hidden,
                2 * self.enc_hidden
            )));
        }
        if self.attn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("attn_dim and max_len must be positive".into()));
        }
        if let PrevSymbolRepr::Embedding { dim } = self.prev_symbol {
            if dim == 0 {
                return Err(Error::Config("embedding dim must be positive".into()));
            }
        }
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        match self.prev_symbol {
            PrevSymbolRepr::Embedding { dim } => dim,
            PrevSymbolRepr::OneHot => Alphabet::SIZE + 1,
        }
    }
}

/// Encoder output: per-step concatenated bidirectional states plus the
/// concatenated final states of both directions.
pub struct EncoderOutput {
    /// [M, 2·enc_hidden]
    pub h: Var,
    /// [1, 2·enc_hidden]
    pub final_state: Var,
    pub m: usize,
}

/// Greedy decoding result.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Emitted indices, EOS-terminated unless truncated at max_len.
    pub symbols: Vec<usize>,
    /// One probability row over the alphabet per emitted step.
    pub prob_rows: Vec<Vec<f64>>,
    /// One attention row over the M markers per emitted step.
    pub attention: Vec<Vec<f64>>,
}

impl DecodeResult {
    pub fn text(&self) -> String {
        Alphabet::decode(&self.symbols)
    }
}

/// Teacher-forced decoding output kept on the tape for the loss.
pub struct TeacherForced {
    /// [T, 37] softmax rows.
    pub prob_rows: Var,
    /// [T] probabilities of the true symbols.
    pub true_probs: Var,
    /// Attention rows per step (values, not tracked).
    pub attention: Vec<Vec<f64>>,
}

/// Encoder, attention and decoder parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    enc_fw: LstmCellParams,
    enc_bw: LstmCellParams,
    /// [dec_hidden, attn_dim]
    attn_s: Tensor,
    /// [2·enc_hidden, attn_dim]
    attn_h: Tensor,
    /// [attn_dim, 1]
    attn_v: Tensor,
    dec: LstmCellParams,
    /// [38, dim]; the extra row is the learned start embedding.
    embed: Option<Tensor>,
    out: LinearLayer,
}

struct DecoderCtx {
    h: Var,
    h_proj: Var,
    m: usize,
    dec: BoundLstm,
}

#[derive(Clone, Copy)]
struct DecoderState {
    h: Var,
    c: Var,
}

impl Seq2Seq {
    pub fn init(config: Seq2SeqConfig, feature_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let eh = config.enc_hidden;
        let dh = config.dec_hidden;
        let ad = config.attn_dim;
        let ed = config.embed_dim();
        let embed = match config.prev_symbol {
            PrevSymbolRepr::Embedding { dim } => {
                Some(Tensor::uniform_init(&[Alphabet::SIZE + 1, dim], dim, rng))
            }
            PrevSymbolRepr::OneHot => None,
        };
        Ok(Seq2Seq {
            enc_fw: LstmCellParams::init(feature_channels, eh, rng),
            enc_bw: LstmCellParams::init(feature_channels, eh, rng),
            attn_s: Tensor::uniform_init(&[dh, ad], dh, rng),
            attn_h: Tensor::uniform_init(&[2 * eh, ad], 2 * eh, rng),
            attn_v: Tensor::uniform_init(&[ad, 1], ad, rng),
            dec: LstmCellParams::init(ed + 2 * eh, dh, rng),
            embed,
            out: LinearLayer::init(dh, Alphabet::SIZE, true, rng),
            config,
        })
    }

    /// Runs both LSTM directions over the [M, C] sequence.
    pub fn encode(&self, tape: &mut Tape, b: &mut Binder, seq: Var) -> Result<EncoderOutput> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 2 || shape[1] != self.enc_fw.input_size {
            return Err(Error::dimension(
                "encode",
                format!("sequence {shape:?}, expected [M, {}]", self.enc_fw.input_size),
            ));
        }
        let m = shape[0];
        let eh = self.config.enc_hidden;
        let fw = self.enc_fw.bind(tape, b, "encoder.fw");
        let bw = self.enc_bw.bind(tape, b, "encoder.bw");

        let mut fw_out = Vec::with_capacity(m);
        let mut h = tape.zeros(&[1, eh]);
        let mut c = tape.zeros(&[1, eh]);
        for t in 0..m {
            let x = tape.select_rows(seq, &[t])?;
            let (nh, nc) = lstm_step(tape, &fw, x, h, c)?;
            h = nh;
            c = nc;
            fw_out.push(h);
        }
        let fw_final = h;

        let mut bw_out = vec![None; m];
        let mut h = tape.zeros(&[1, eh]);
        let mut c = tape.zeros(&[1, eh]);
        for t in (0..m).rev() {
            let x = tape.select_rows(seq, &[t])?;
            let (nh, nc) = lstm_step(tape, &bw, x, h, c)?;
            h = nh;
            c = nc;
            bw_out[t] = Some(h);
        }
        let bw_final = h;

        let rows: Vec<Var> = fw_out
            .iter()
            .zip(&bw_out)
            .map(|(&f, bo)| tape.concat_cols(f, bo.unwrap()))
            .collect::<Result<_>>()?;
        let h_all = tape.concat_rows(&rows)?;
        let final_state = match self.config.decoder_init {
            DecoderInit::ConcatFinal => tape.concat_cols(fw_final, bw_final)?,
            DecoderInit::LastStep => tape.select_rows(h_all, &[m - 1])?,
        };
        Ok(EncoderOutput { h: h_all, final_state, m })
    }

    fn decoder_ctx(&self, tape: &mut Tape, b: &mut Binder, enc: &EncoderOutput) -> Result<DecoderCtx> {
        let w_h = b.bind(tape, "attn.w_h", &self.attn_h);
        // Projecting H once: the per-step energy only adds the state term.
        let h_proj = tape.matmul(enc.h, w_h)?;
        Ok(DecoderCtx {
            h: enc.h,
            h_proj,
            m: enc.m,
            dec: self.dec.bind(tape, b, "decoder.cell"),
        })
    }

    /// Additive attention: e_j = v·tanh(W_s·s + W_h·h_j), normalized over j.
    /// Returns (context [1, 2·enc_hidden], alpha [1, M]).
    fn attend(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        ctx: &DecoderCtx,
        s_prev: Var,
    ) -> Result<(Var, Var)> {
        let w_s = b.bind(tape, "attn.w_s", &self.attn_s);
        let v = b.bind(tape, "attn.v", &self.attn_v);
        let proj_s = tape.matmul(s_prev, w_s)?;
        let proj_s_flat = tape.reshape(proj_s, &[self.config.attn_dim])?;
        let pre = tape.add_bias(ctx.h_proj, proj_s_flat)?;
        let act = tape.tanh(pre);
        let e = tape.matmul(act, v)?;
        let e_row = tape.reshape(e, &[1, ctx.m])?;
        let alpha = tape.softmax(e_row, 1)?;
        let context = tape.matmul(alpha, ctx.h)?;
        Ok((context, alpha))
    }

    fn prev_symbol_input(&self, tape: &mut Tape, b: &mut Binder, symbol: usize) -> Result<Var> {
        match self.config.prev_symbol {
            PrevSymbolRepr::Embedding { .. } => {
                let table = b.bind(tape, "decoder.embed", self.embed.as_ref().unwrap());
                tape.select_rows(table, &[symbol])
            }
            PrevSymbolRepr::OneHot => {
                let dim = Alphabet::SIZE + 1;
                let mut row = vec![0.0; dim];
                row[symbol] = 1.0;
                tape.constant(row, vec![1, dim])
            }
        }
    }

    /// One decoder step from the previous state and symbol: attends, runs
    /// the LSTM on [prev-symbol embedding ‖ context], projects to logits.
    fn decode_step(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        ctx: &DecoderCtx,
        state: DecoderState,
        y_prev: usize,
    ) -> Result<(Var, Var, DecoderState)> {
        let (context, alpha) = self.attend(tape, b, ctx, state.h)?;
        let emb = self.prev_symbol_input(tape, b, y_prev)?;
        let x = tape.concat_cols(emb, context)?;
        let (h, c) = lstm_step(tape, &ctx.dec, x, state.h, state.c)?;
        let logits = self.out.forward(tape, b, "decoder.out", h)?;
        Ok((logits, alpha, DecoderState { h, c }))
    }

    fn initial_state(&self, tape: &mut Tape, enc: &EncoderOutput) -> DecoderState {
        DecoderState { h: enc.final_state, c: tape.zeros(&[1, self.config.dec_hidden]) }
    }

    /// Greedy argmax decoding until EOS or the length cap.
    pub fn decode_greedy(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        enc: &EncoderOutput,
    ) -> Result<DecodeResult> {
        let ctx = self.decoder_ctx(tape, b, enc)?;
        let mut state = self.initial_state(tape, enc);
        let mut y_prev = Alphabet::START;
        let mut symbols = Vec::new();
        let mut prob_rows = Vec::new();
        let mut attention = Vec::new();
        for _ in 0..self.config.max_len {
            let (logits, alpha, next) = self.decode_step(tape, b, &ctx, state, y_prev)?;
            state = next;
            let probs = tape.softmax(logits, 1)?;
            let row = tape.value(probs).to_vec();
            let (best, _) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty row");
            prob_rows.push(row);
            attention.push(tape.value(alpha).to_vec());
            symbols.push(best);
            if best == Alphabet::EOS {
                break;
            }
            y_prev = best;
        }
        Ok(DecodeResult { symbols, prob_rows, attention })
    }

    /// Decodes feeding ground-truth previous symbols; `target` must be
    /// EOS-terminated and at most max_len long.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        enc: &EncoderOutput,
        target: &[usize],
    ) -> Result<TeacherForced> {
        if target.is_empty() || *target.last().unwrap() != Alphabet::EOS {
            return Err(Error::Data("teacher forcing target must end with EOS".into()));
        }
        if target.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "target length {} exceeds max_len {}",
                target.len(),
                self.config.max_len
            )));
        }
        if target.iter().any(|&t| t >= Alphabet::SIZE) {
            return Err(Error::Data("target symbol outside alphabet".into()));
        }
        let ctx = self.decoder_ctx(tape, b, enc)?;
        let mut state = self.initial_state(tape, enc);
        let mut logit_rows = Vec::with_capacity(target.len());
        let mut attention = Vec::with_capacity(target.len());
        for (t, _) in target.iter().enumerate() {
            let y_prev = if t == 0 { Alphabet::START } else { target[t - 1] };
            let (logits, alpha, next) = self.decode_step(tape, b, &ctx, state, y_prev)?;
            state = next;
            logit_rows.push(logits);
            attention.push(tape.value(alpha).to_vec());
        }
        let logits = tape.concat_rows(&logit_rows)?;
        let prob_rows = tape.softmax(logits, 1)?;
        let true_probs = tape.gather_cols(prob_rows, target)?;
        Ok(TeacherForced { prob_rows, true_probs, attention })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc_fw.visit("encoder.fw", f);
        self.enc_bw.visit("encoder.bw", f);
        f("attn.w_s", &self.attn_s);
        f("attn.w_h", &self.attn_h);
        f("attn.v", &self.attn_v);
        self.dec.visit("decoder.cell", f);
        if let Some(e) = &self.embed {
            f("decoder.embed", e);
        }
        self.out.visit("decoder.out", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc_fw.visit_mut("encoder.fw", f);
        self.enc_bw.visit_mut("encoder.bw", f);
        f("attn.w_s", &mut self.attn_s);
        f("attn.w_h", &mut self.attn_h);
        f("attn.v", &mut self.attn_v);
        self.dec.visit_mut("decoder.cell", f);
        if let Some(e) = &mut self.embed {
            f("decoder.embed", e);
        }
        self.out.visit_mut("decoder.out", f);
    }

    /// Copies the forward encoder weights into the backward cell (test
    /// support for the direction-symmetry property).
    #[doc(hidden)]
    pub fn tie_encoder_directions(&mut self) {
        self.enc_bw = self.enc_fw.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> Seq2SeqConfig {
        Seq2SeqConfig {
            enc_hidden: 5,
            dec_hidden: 10,
            attn_dim: 4,
            prev_symbol: PrevSymbolRepr::Embedding { dim: 3 },
            decoder_init: DecoderInit::ConcatFinal,
            max_len: 64,
        }
    }

    #[test]
    fn alphabet_layout() {
        assert_eq!(Alphabet::SIZE, 37);
        assert_eq!(Alphabet::index_of('0'), Some(0));
        assert_eq!(Alphabet::index_of('z'), Some(35));
        assert_eq!(Alphabet::index_of('Z'), Some(35));
        assert_eq!(Alphabet::index_of('!'), None);
        assert_eq!(Alphabet::decode(&[10, 11, 36, 12]), "ab");
        assert_eq!(Alphabet::encode("Ab9").unwrap(), vec![10, 11, 9]);
        assert!(Alphabet::encode("a b").is_err());
    }

    #[test]
    fn encoder_output_shapes_default_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s2s = Seq2Seq::init(Seq2SeqConfig::default(), 32, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let seq = tape.zeros(&[36, 32]);
        let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
        assert_eq!(tape.shape(enc.h), &[36, 512]);
        assert_eq!(tape.shape(enc.final_state), &[1, 512]);
    }

    #[test]
    fn reversed_input_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        s2s.tie_encoder_directions();
        let m = 6;
        let data: Vec<f64> = (0..m * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect();
        let mut rev = vec![0.0; m * 4];
        for t in 0..m {
            rev[t * 4..(t + 1) * 4].copy_from_slice(&data[(m - 1 - t) * 4..(m - t) * 4]);
        }
        let run = |input: Vec<f64>| {
            let mut tape = Tape::new();
            let mut b = Binder::new();
            let seq = tape.constant(input, vec![m, 4]).unwrap();
            let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
            tape.value(enc.h).to_vec()
        };
        let h_orig = run(data);
        let h_rev = run(rev);
        let eh = 5;
        // forward outputs of the reversed input == reversed backward outputs
        for t in 0..m {
            for j in 0..eh {
                let fw_rev = h_rev[t * 2 * eh + j];
                let bw_orig = h_orig[(m - 1 - t) * 2 * eh + eh + j];
                assert!((fw_rev - bw_orig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_normalize_and_single_step_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let seq_t = Tensor::uniform_init(&[1, 4], 1, &mut rng);
        let seq = tape.leaf(&seq_t);
        let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
        let ctx = s2s.decoder_ctx(&mut tape, &mut b, &enc).unwrap();
        let state = s2s.initial_state(&mut tape, &enc);
        let (context, alpha) = s2s.attend(&mut tape, &mut b, &ctx, state.h).unwrap();
        // M = 1: alpha = [1.0], context = h_1
        assert_eq!(tape.value(alpha), &[1.0]);
        let h_row = tape.value(enc.h).to_vec();
        for (c, h) in tape.value(context).iter().zip(&h_row) {
            assert!((c - h).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_encoder_rows_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new();
        // hand-built encoder output with every h_j identical
        let row: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 0.11).collect();
        let m = 5;
        let data: Vec<f64> = row.iter().cycle().take(m * 10).cloned().collect();
        let h = tape.constant(data, vec![m, 10]).unwrap();
        let final_state = tape.constant(row.clone(), vec![1, 10]).unwrap();
        let enc = EncoderOutput { h, final_state, m };
        let ctx = s2s.decoder_ctx(&mut tape, &mut b, &enc).unwrap();
        let state = s2s.initial_state(&mut tape, &enc);
        let (context, alpha) = s2s.attend(&mut tape, &mut b, &ctx, state.h).unwrap();
        for &a in tape.value(alpha) {
            assert!((a - 1.0 / m as f64).abs() < 1e-12);
        }
        for (c, h) in tape.value(context).iter().zip(&row) {
            assert!((c - h).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_decode_terminates_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        let seq_t = Tensor::uniform_init(&[7, 4], 1, &mut rng).with_requires_grad(false);
        let run = || {
            let mut tape = Tape::new();
            let mut b = Binder::new();
            let seq = tape.leaf(&seq_t);
            let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
            s2s.decode_greedy(&mut tape, &mut b, &enc).unwrap()
        };
        let r1 = run();
        let r2 = run();
        assert!(r1.symbols.len() <= 64);
        assert_eq!(r1.symbols, r2.symbols);
        for row in &r1.prob_rows {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(row.len(), Alphabet::SIZE);
        }
        for row in &r1.attention {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_forced_length_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let seq_t = Tensor::uniform_init(&[5, 4], 1, &mut rng);
        let seq = tape.leaf(&seq_t);
        let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
        let target = vec![3, 11, 25, Alphabet::EOS];
        let tf = s2s.decode_teacher_forced(&mut tape, &mut b, &enc, &target).unwrap();
        assert_eq!(tape.shape(tf.prob_rows), &[4, Alphabet::SIZE]);
        assert_eq!(tape.shape(tf.true_probs), &[4]);
        for row in tape.value(tf.prob_rows).chunks(Alphabet::SIZE) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn teacher_forced_rejects_bad_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s2s = Seq2Seq::init(small_config(), 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let seq = tape.zeros(&[3, 4]);
        let enc = s2s.encode(&mut tape, &mut b, seq).unwrap();
        // missing EOS
        assert!(s2s.decode_teacher_forced(&mut tape, &mut b, &enc, &[1, 2]).is_err());
        // out-of-alphabet symbol
        assert!(s2s
            .decode_teacher_forced(&mut tape, &mut b, &enc, &[40, Alphabet::EOS])
            .is_err());
    }

    #[test]
    fn config_rejects_mismatched_decoder_width() {
        let cfg = Seq2SeqConfig { dec_hidden: 100, ..small_config() };
        assert!(cfg.validate().is_err());
    }
}
