//! The unimodal transformer encoder: multi-head attention with relative key
//! embeddings, position-wise feed-forward blocks, post-normalized residual
//! layers, [CLS] aggregation and the inner/outer two-stage scheme.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward-pass context: the tape being recorded, the parameters it reads,
/// and (in training mode) the dropout generator.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    rng: Option<&'a mut ChaCha8Rng>,
    dropout: f64,
    eps: T,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Inference mode: dropout is the identity.
    pub fn eval(store: &'a ParamStore<T>, cfg: &ModelConfig) -> Self {
        Self {
            tape: Tape::new(),
            store,
            rng: None,
            dropout: cfg.dropout,
            eps: T::lit(cfg.layernorm_eps),
        }
    }

    pub fn train(store: &'a ParamStore<T>, cfg: &ModelConfig, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            rng: Some(rng),
            dropout: cfg.dropout,
            eps: T::lit(cfg.layernorm_eps),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.tape.constant(value)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    fn layernorm(&mut self, x: Var, ln: &LayerNormWeights) -> Result<Var> {
        let g = self.param(ln.gamma);
        let b = self.param(ln.beta);
        self.tape.layernorm(x, g, b, self.eps)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_row(y, bv)
    }
}

/// Parameter factory with a seeded generator.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-normal matrix.
    pub fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let t = Tensor::randn(&[rows, cols], std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn embedding(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[len]))
    }

    pub fn ones(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::ones(&[len]))
    }
}

/// Per-head query/key/value projections and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub d_k: usize,
}

/// Result of one attention application; `probs` and `logits` are per head.
pub struct AttentionOutput {
    pub output: Var,
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

impl AttentionWeights {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut heads = |kind: &str, width: usize| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|h| init.matrix(format!("{prefix}.{kind}.{h}"), d, width))
                .collect()
        };
        let query = heads("wq", cfg.d_k);
        let key = heads("wk", cfg.d_k);
        let value = heads("wv", cfg.d_u);
        let output = init.matrix(format!("{prefix}.wo"), cfg.heads * cfg.d_u, d);
        Self {
            query,
            key,
            value,
            output,
            d_k: cfg.d_k,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::with_capacity(3 * self.query.len() + 1);
        v.extend(&self.query);
        v.extend(&self.key);
        v.extend(&self.value);
        v.push(self.output);
        v
    }

    /// Multi-head attention of `queries` over `keys_values` (`[B,S,d]` each).
    ///
    /// With a relative table `[2R+1, d_k]`, the embedding for offset `j - i`
    /// is added to key `j` when query `i` attends, so the logit becomes
    /// `(k_j + r_{j-i}) · q_i / √d_k`. Only valid when queries and keys are
    /// the same sequence.
    pub fn attend<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        queries: Var,
        keys_values: Var,
        rel_table: Option<Var>,
    ) -> Result<AttentionOutput> {
        let scale = T::one() / T::from_usize_lossy(self.d_k).sqrt();
        let mut heads = Vec::with_capacity(self.query.len());
        let mut logits_all = Vec::with_capacity(self.query.len());
        let mut probs_all = Vec::with_capacity(self.query.len());
        for h in 0..self.query.len() {
            let wq = s.param(self.query[h]);
            let wk = s.param(self.key[h]);
            let wv = s.param(self.value[h]);
            let q = s.tape.matmul(queries, wq)?;
            let k = s.tape.matmul(keys_values, wk)?;
            let v = s.tape.matmul(keys_values, wv)?;
            let mut logits = s.tape.matmul_t(q, k)?;
            if let Some(table) = rel_table {
                let per_offset = s.tape.matmul_t(q, table)?;
                let bias = s.tape.rel_gather(per_offset)?;
                logits = s.tape.add(logits, bias)?;
            }
            let logits = s.tape.scale(logits, scale)?;
            let probs = s.tape.softmax(logits)?;
            let dropped = s.dropout(probs)?;
            heads.push(s.tape.matmul(dropped, v)?);
            logits_all.push(logits);
            probs_all.push(probs);
        }
        let concat = if heads.len() == 1 { heads[0] } else { s.tape.concat_last(&heads)? };
        let wo = s.param(self.output);
        let output = s.tape.matmul(concat, wo)?;
        Ok(AttentionOutput {
            output,
            logits: logits_all,
            probs: probs_all,
        })
    }
}

/// Self-attention with relative key embeddings: `x` is `[B,S,d]`, `S ≤ R+1`.
pub fn self_attention<T: Scalar>(s: &mut Session<'_, T>, x: Var, weights: &AttentionWeights, rel_table: Var) -> Result<Var> {
    Ok(weights.attend(s, x, x, Some(rel_table))?.output)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) -> Self {
        Self {
            gamma: init.ones(format!("{prefix}.gamma"), d),
            beta: init.zeros(format!("{prefix}.beta"), d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardWeights {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            w1: init.matrix(format!("{prefix}.w1"), d_in, d_hidden),
            b1: init.zeros(format!("{prefix}.b1"), d_hidden),
            w2: init.matrix(format!("{prefix}.w2"), d_hidden, d_out),
            b2: init.zeros(format!("{prefix}.b2"), d_out),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// `max(0, x·W1 + b1)·W2 + b2` at every position (dropout on the hidden layer).
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = s.linear(x, self.w1, self.b1)?;
        let h = s.tape.relu(h)?;
        let h = s.dropout(h)?;
        s.linear(h, self.w2, self.b2)
    }
}

/// One post-normalized layer: `LN(x + SA(x))` then `LN(z + FF(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attention: AttentionWeights,
    pub attention_norm: LayerNormWeights,
    pub feed_forward: FeedForwardWeights,
    pub feed_forward_norm: LayerNormWeights,
}

impl EncoderLayer {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            attention: AttentionWeights::init(init, &format!("{prefix}.sa"), cfg),
            attention_norm: LayerNormWeights::init(init, &format!("{prefix}.sa_ln"), cfg.d_model),
            feed_forward: FeedForwardWeights::init(init, &format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, cfg.d_model),
            feed_forward_norm: LayerNormWeights::init(init, &format!("{prefix}.ff_ln"), cfg.d_model),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attention.ids();
        v.extend([self.attention_norm.gamma, self.attention_norm.beta]);
        v.extend(self.feed_forward.ids());
        v.extend([self.feed_forward_norm.gamma, self.feed_forward_norm.beta]);
        v
    }

    pub fn attention_sublayer<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, rel_table: Var) -> Result<Var> {
        let a = self_attention(s, x, &self.attention, rel_table)?;
        let r = s.tape.add(x, a)?;
        s.layernorm(r, &self.attention_norm)
    }

    pub fn feed_forward_sublayer<T: Scalar>(&self, s: &mut Session<'_, T>, z: Var) -> Result<Var> {
        let f = self.feed_forward.forward(s, z)?;
        let r = s.tape.add(z, f)?;
        s.layernorm(r, &self.feed_forward_norm)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, rel_table: Var) -> Result<Var> {
        let z = self.attention_sublayer(s, x, rel_table)?;
        self.feed_forward_sublayer(s, z)
    }
}

/// Cross-attention sublayer placed between self-attention and feed-forward
/// in multimodal layers: `LN(z + CA(z | other))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossLayer {
    pub attention: AttentionWeights,
    pub norm: LayerNormWeights,
}

impl CrossLayer {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            attention: AttentionWeights::init(init, &format!("{prefix}.ca"), cfg),
            norm: LayerNormWeights::init(init, &format!("{prefix}.ca_ln"), cfg.d_model),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attention.ids();
        v.extend([self.norm.gamma, self.norm.beta]);
        v
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, z: Var, other: Var) -> Result<Var> {
        let c = cross_attention(s, z, other, &self.attention)?;
        let r = s.tape.add(z, c)?;
        s.layernorm(r, &self.norm)
    }
}

/// Queries from `x_self` (`[B,S2,d]`), keys and values from `x_other`
/// (`[B,S1,d]`); softmax runs over the other sequence.
pub fn cross_attention<T: Scalar>(s: &mut Session<'_, T>, x_self: Var, x_other: Var, weights: &AttentionWeights) -> Result<Var> {
    let (qs, ks) = (s.tape.shape(x_self).to_vec(), s.tape.shape(x_other).to_vec());
    if qs.len() != ks.len() || qs[..qs.len() - 2] != ks[..ks.len() - 2] || qs[qs.len() - 1] != ks[ks.len() - 1] {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    Ok(weights.attend(s, x_self, x_other, None)?.output)
}

/// A stack of layers sharing one relative-position table.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<EncoderLayer>,
    pub rel_table: ParamId,
    /// Longest sequence the table covers; offsets span `±(max_len - 1)`.
    pub max_len: usize,
}

impl Block {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig, layers: usize, max_len: usize) -> Self {
        let layers = (0..layers)
            .map(|i| EncoderLayer::init(init, &format!("{prefix}.{i}"), cfg))
            .collect();
        let rel_table = init.embedding(format!("{prefix}.rel"), &[2 * max_len - 1, cfg.d_k], 0.02);
        Self {
            layers,
            rel_table,
            max_len,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.layers.iter().flat_map(EncoderLayer::ids).collect();
        v.push(self.rel_table);
        v
    }

    fn check_len(&self, s: &Session<'_, impl Scalar>, x: Var) -> Result<()> {
        let shape = s.tape.shape(x);
        let len = shape[shape.len() - 2];
        if len > self.max_len {
            return Err(Error::Shape {
                op: "encoder block (sequence longer than relative table)",
                lhs: shape.to_vec(),
                rhs: vec![self.max_len],
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.check_len(s, x)?;
        let table = s.param(self.rel_table);
        self.layers.iter().try_fold(x, |h, layer| layer.forward(s, h, table))
    }

    /// Same layers with a cross-attention sublayer after each self-attention.
    pub fn forward_cross<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, cross: &[CrossLayer], other: Var) -> Result<Var> {
        self.check_len(s, x)?;
        debug_assert_eq!(cross.len(), self.layers.len());
        let table = s.param(self.rel_table);
        let mut h = x;
        for (layer, ca) in self.layers.iter().zip(cross) {
            let z = layer.attention_sublayer(s, h, table)?;
            let c = ca.forward(s, z, other)?;
            h = layer.feed_forward_sublayer(s, c)?;
        }
        Ok(h)
    }
}

/// Intermediate states of one unimodal pass over `L` windows.
#[derive(Clone, Copy, Debug)]
pub struct UnimodalStates {
    /// `[L, T+1, d]` projected frames with [CLS] in front.
    pub tokens: Var,
    /// `[L, T+1, d]` inner-block output.
    pub inner_states: Var,
    /// `[L, d]` inner [CLS] outputs.
    pub summaries: Var,
    /// `[L, d]` outer-block output.
    pub outer_states: Var,
}

/// Input projection, [CLS] embedding, inner and outer blocks of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalEncoder {
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub cls: ParamId,
    pub inner: Block,
    pub outer: Block,
    pub frames: usize,
    pub features: usize,
    pub d_model: usize,
}

impl UnimodalEncoder {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            input_weight: init.matrix(format!("{prefix}.input.w"), cfg.features, cfg.d_model),
            input_bias: init.zeros(format!("{prefix}.input.b"), cfg.d_model),
            cls: init.embedding(format!("{prefix}.cls"), &[cfg.d_model], 0.02),
            inner: Block::init(init, &format!("{prefix}.inner"), cfg, cfg.inner_layers, cfg.frames + 1),
            outer: Block::init(init, &format!("{prefix}.outer"), cfg, cfg.outer_layers, cfg.max_windows),
            frames: cfg.frames,
            features: cfg.features,
            d_model: cfg.d_model,
        }
    }

    /// Self-attention and feed-forward parameters (the set a multimodal
    /// branch shares with this encoder).
    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut v = self.inner.ids();
        v.extend(self.outer.ids());
        v
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.input_weight, self.input_bias, self.cls];
        v.extend(self.shared_ids());
        v
    }

    fn check_windows<T: Scalar>(&self, s: &Session<'_, T>, windows: Var) -> Result<usize> {
        let shape = s.tape.shape(windows);
        if shape.len() != 3 || shape[1] != self.frames || shape[2] != self.features {
            return Err(Error::Shape {
                op: "unimodal encoder input",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), self.frames, self.features],
            });
        }
        Ok(shape[0])
    }

    /// `[L,T,D]` frames → `[L,T+1,d]` tokens.
    pub fn tokens<T: Scalar>(&self, s: &mut Session<'_, T>, windows: Var) -> Result<Var> {
        self.check_windows(s, windows)?;
        let proj = s.linear(windows, self.input_weight, self.input_bias)?;
        let cls = s.param(self.cls);
        s.tape.prepend_row(proj, cls)
    }

    /// Inner block over each window; returns `([L,d]` summaries, `[L,T+1,d]` states).
    pub fn inner_encode<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var) -> Result<(Var, Var)> {
        let states = self.inner.forward(s, tokens)?;
        let summary = s.tape.select_row(states, 0)?;
        Ok((summary, states))
    }

    /// Outer block across windows: `[L,d]` → `[L,d]`, `L ≤ max_windows`.
    pub fn outer_encode<T: Scalar>(&self, s: &mut Session<'_, T>, summaries: Var) -> Result<Var> {
        let shape = s.tape.shape(summaries).to_vec();
        if shape.len() != 2 || shape[0] > self.outer.max_len {
            return Err(Error::Shape {
                op: "outer_encode",
                lhs: shape,
                rhs: vec![self.outer.max_len, self.d_model],
            });
        }
        let seq = s.tape.reshape(summaries, &[1, shape[0], shape[1]])?;
        let out = self.outer.forward(s, seq)?;
        s.tape.reshape(out, &shape)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, windows: Var) -> Result<UnimodalStates> {
        let tokens = self.tokens(s, windows)?;
        let (summaries, inner_states) = self.inner_encode(s, tokens)?;
        let outer_states = self.outer_encode(s, summaries)?;
        Ok(UnimodalStates {
            tokens,
            inner_states,
            summaries,
            outer_states,
        })
    }
}

/// Two-layer MLP `d_model → d_ff → classes` with dropout on the hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorHead(pub FeedForwardWeights);

impl PredictorHead {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        Self(FeedForwardWeights::init(init, prefix, cfg.d_model, cfg.d_ff, cfg.classes))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.0.ids()
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, states: Var) -> Result<Var> {
        self.0.forward(s, states)
    }
}
