//! Word capsules: trainable embeddings followed by a bidirectional LSTM.

use rand::Rng;

use crate::init::xavier_uniform;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Result, Tensor, TensorError, Var};

/// One LSTM direction. Gates are packed `[input, forget, output, cell]`
/// along the `4·hidden` axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub word_dim: usize,
    pub hidden_dim: usize,
}

fn lstm_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_input"),
        format!("{prefix}.w_hidden"),
        format!("{prefix}.bias"),
    ]
}

impl LstmParams {
    fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let [wi, wh, b] = lstm_names(prefix);
        let fan_in = input_dim + hidden_dim;
        let fan_out = 4 * hidden_dim;
        let w_input = params.add(wi, xavier_uniform(&[input_dim, fan_out], fan_in, fan_out, rng));
        let w_hidden = params.add(wh, xavier_uniform(&[hidden_dim, fan_out], fan_in, fan_out, rng));
        let mut bias = Tensor::zeros(&[fan_out]);
        // forget gate starts open
        bias.data_mut()[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|v| *v = F::one());
        let bias = params.add(b, bias);
        Self {
            w_input,
            w_hidden,
            bias,
        }
    }

    fn attach<F: Real>(params: &ParamSet<F>, prefix: &str) -> Option<Self> {
        let [wi, wh, b] = lstm_names(prefix);
        Some(Self {
            w_input: params.find(&wi)?,
            w_hidden: params.find(&wh)?,
            bias: params.find(&b)?,
        })
    }
}

impl Encoder {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        vocab_size: usize,
        word_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = params.add(
            "embedding",
            xavier_uniform(&[vocab_size, word_dim], vocab_size, word_dim, rng),
        );
        let forward = LstmParams::register(params, "lstm_fw", word_dim, hidden_dim, rng);
        let backward = LstmParams::register(params, "lstm_bw", word_dim, hidden_dim, rng);
        Self {
            embedding,
            forward,
            backward,
            word_dim,
            hidden_dim,
        }
    }

    /// Looks up previously registered parameters by name.
    pub fn attach<F: Real>(params: &ParamSet<F>) -> Option<Self> {
        let embedding = params.find("embedding")?;
        let forward = LstmParams::attach(params, "lstm_fw")?;
        let backward = LstmParams::attach(params, "lstm_bw")?;
        let word_dim = params.get(embedding).shape()[1];
        let hidden_dim = params.get(forward.w_hidden).shape()[0];
        Some(Self {
            embedding,
            forward,
            backward,
            word_dim,
            hidden_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        for d in [self.forward, self.backward] {
            ids.extend([d.w_input, d.w_hidden, d.bias]);
        }
        ids
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// `T×D_W` embedding rows for a token index sequence.
    pub fn embed<F: Real>(&self, g: &mut Graph<'_, F>, tokens: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        g.gather(table, tokens)
    }

    /// Context-aware hidden states `H` (`T×2D_H`): forward state at `t`
    /// concatenated with backward state at `t`, both starting from zero.
    pub fn bilstm<F: Real>(&self, g: &mut Graph<'_, F>, embedded: Var) -> Result<Var> {
        let steps = g.shape(embedded)[0];
        if steps == 0 {
            return Err(TensorError::Empty { op: "bilstm" });
        }
        let fw = self.run_direction(g, embedded, self.forward, (0..steps).collect())?;
        let bw = self.run_direction(g, embedded, self.backward, (0..steps).rev().collect())?;
        let fw = g.stack_rows(&fw)?;
        let bw = g.stack_rows(&bw)?;
        g.concat_cols(&[fw, bw])
    }

    /// Hidden states by position, visiting positions in `order`.
    fn run_direction<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        embedded: Var,
        lstm: LstmParams,
        order: Vec<usize>,
    ) -> Result<Vec<Var>> {
        let hd = self.hidden_dim;
        let w_input = g.param(lstm.w_input);
        let w_hidden = g.param(lstm.w_hidden);
        let bias = g.param(lstm.bias);
        let projected = g.matmul(embedded, w_input)?;
        let projected = g.add_bias(projected, bias)?;

        let mut states = vec![None; order.len()];
        let mut prev: Option<(Var, Var)> = None;
        for t in order {
            let mut z = g.row(projected, t)?;
            if let Some((h, _)) = prev {
                let rec = g.matmul(h, w_hidden)?;
                z = g.add(z, rec)?;
            }
            let i = g.slice_cols(z, 0, hd)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(z, hd, hd)?;
            let f = g.sigmoid(f);
            let o = g.slice_cols(z, 2 * hd, hd)?;
            let o = g.sigmoid(o);
            let cand = g.slice_cols(z, 3 * hd, hd)?;
            let cand = g.tanh(cand);
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = prev {
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let squashed = g.tanh(c);
            let h = g.mul(o, squashed)?;
            states[t] = Some(h);
            prev = Some((h, c));
        }
        Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
    }

    /// Embeds and encodes `tokens`, with optional dropout on `H`.
    pub fn encode<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        dropout_rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let e = self.embed(g, tokens)?;
        let h = self.bilstm(g, e)?;
        match rng {
            Some(rng) => dropout(g, h, dropout_rate, true, rng),
            None => Ok(h),
        }
    }
}

/// Inverted dropout: in training, zero each entry with probability `rate`
/// and scale survivors by `1/(1-rate)`. Identity otherwise.
pub fn dropout<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid("dropout rate must be in [0, 1)"));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { F::zero() })
        .collect();
    g.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{param_grad_check, Gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, wd: usize, hd: usize, seed: u64) -> (ParamSet<f64>, Encoder) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::register(&mut params, vocab, wd, hd, &mut rng);
        (params, enc)
    }

    #[test]
    fn shapes_and_single_step() {
        let (params, enc) = setup(6, 3, 2, 1);
        let mut g = Graph::new(&params);
        let e = enc.embed(&mut g, &[4]).unwrap();
        let h = enc.bilstm(&mut g, e).unwrap();
        assert_eq!(g.shape(h), &[1, 4]);
        let e = enc.embed(&mut g, &[4, 2, 5, 2]).unwrap();
        let h = enc.bilstm(&mut g, e).unwrap();
        assert_eq!(g.shape(h), &[4, 4]);
        assert_eq!(enc.output_dim(), 4);
        assert!(enc.embed(&mut g, &[6]).is_err());
    }

    #[test]
    fn repeated_tokens_share_rows() {
        let (params, enc) = setup(6, 3, 2, 2);
        let mut g = Graph::new(&params);
        let e = enc.embed(&mut g, &[3, 1, 3]).unwrap();
        let v = g.value(e);
        assert_eq!(&v[0..3], &v[6..9]);
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let (mut params, enc) = setup(5, 3, 2, 3);
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&params);
        let e = enc.embed(&mut g, &[1, 2, 3]).unwrap();
        let h = enc.bilstm(&mut g, e).unwrap();
        assert!(g.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_swaps_directions() {
        let (params, enc) = setup(8, 3, 2, 4);
        let tokens = [2, 7, 5, 3];
        let mut g = Graph::new(&params);
        let h = enc.encode::<f64, ChaCha8Rng>(&mut g, &tokens, 0.2, None).unwrap();
        let h = g.tensor(h);

        let swapped = Encoder {
            forward: enc.backward,
            backward: enc.forward,
            ..enc
        };
        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();
        let mut g2 = Graph::new(&params);
        let h2 = swapped
            .encode::<f64, ChaCha8Rng>(&mut g2, &reversed, 0.2, None)
            .unwrap();
        let h2 = g2.tensor(h2);
        let n = tokens.len();
        for s in 0..n {
            let orig = h.row(n - 1 - s);
            let row = h2.row(s);
            assert_eq!(&row[..2], &orig[2..]);
            assert_eq!(&row[2..], &orig[..2]);
        }
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let (params, enc) = setup(8, 3, 2, 5);
        let run = || {
            let mut g = Graph::new(&params);
            let h = enc.encode::<f64, ChaCha8Rng>(&mut g, &[1, 4, 6], 0.2, None).unwrap();
            g.tensor(h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_identities() {
        let params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new(&params);
        let n = 100_000;
        let x = g.constant(Tensor::vector(vec![1.0; n]));
        let y = dropout(&mut g, x, 0.2, true, &mut rng).unwrap();
        let mean = g.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.2).abs() < 0.01);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (params, enc) = setup(7, 3, 2, 6);
        let tokens = [2, 5, 2, 6];
        let loss = |ps: &ParamSet<f64>, grads: Option<&mut Gradients<f64>>| -> Result<f64> {
            let mut g = Graph::new(ps);
            let h = enc.encode::<f64, ChaCha8Rng>(&mut g, &tokens, 0.0, None)?;
            let w: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.4).collect();
            let w = g.constant(Tensor::new(vec![4, 4], w).unwrap());
            let y = g.mul(h, w)?;
            let y = g.tanh(y);
            let s = g.sum(y);
            if let Some(grads) = grads {
                g.backward(s, grads)?;
            }
            Ok(g.scalar(s))
        };
        let report = param_grad_check(&params, loss, 1e-5).unwrap();
        for r in &report {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
        // rows of unused tokens stay exactly zero
        let mut grads = Gradients::zeros_like(&params);
        loss(&params, Some(&mut grads)).unwrap();
        let emb = grads.get(enc.embedding);
        assert!(emb[0..3].iter().all(|&v| v == 0.0));
        assert!(emb[6..9].iter().any(|&v| v != 0.0));
    }
}
