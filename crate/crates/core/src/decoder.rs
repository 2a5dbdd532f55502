//! LSTM caption decoder with attention.
//!
//! Every tape-level function works on a batch: hidden states are `[B × n]`,
//! features are stacked as `[B·F × r]`. Parameter names are stable strings
//! (`decoder/E_w`, `attention/W_M0`, …) and double as checkpoint keys.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, AttentionParams, AttentionVars, ProjectedFeatures};
use crate::autodiff::rng::streams;
use crate::autodiff::{read_checkpoint, write_checkpoint, ParamId, ParamKind, ParameterSet, SeedTree, Tape, Tensor, Var};
use crate::corpus::FeatureMap;
use crate::error::{Error, Result};
use crate::radix::TokenCodec;
use crate::scalar::Scalar;
use crate::trainer::xavier_init;

pub const E_W: &str = "decoder/E_w";
pub const E_O: &str = "decoder/E_o";
pub const E_O_BIAS: &str = "decoder/E_o_bias";
pub const E_O_ADAPTER: &str = "decoder/E_o_adapter";
pub const W_I: &str = "decoder/W_I";
pub const INIT_LN_GAIN: &str = "decoder/init_ln_gain";
pub const INIT_LN_BIAS: &str = "decoder/init_ln_bias";
pub const LSTM_KERNEL: &str = "decoder/lstm_kernel";
pub const LSTM_BIAS: &str = "decoder/lstm_bias";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub state_size: usize,
    pub word_size: usize,
    pub image_embed_size: usize,
    pub encoded_vocab_size: usize,
    pub attention: AttentionConfig,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_size == 0 || self.word_size == 0 || self.image_embed_size == 0 || self.encoded_vocab_size == 0 {
            return Err(Error::Config("decoder sizes must be >= 1".into()));
        }
        if self.attention.state_size != self.state_size {
            return Err(Error::Config(format!(
                "attention state size {} != decoder state size {}",
                self.attention.state_size, self.state_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.attention.validate()
    }

    pub fn context_dim(&self) -> usize {
        self.attention.context_dim()
    }

    fn has_adapter(&self) -> bool {
        self.tie_embeddings && self.word_size != self.state_size
    }
}

/// Every parameter of a decoder, in allocation order.
pub fn decoder_param_shapes(cfg: &DecoderConfig) -> Result<Vec<(&'static str, Vec<usize>, ParamKind)>> {
    cfg.attention.validate()?;
    let (n, m, z, v) = (cfg.state_size, cfg.word_size, cfg.image_embed_size, cfg.encoded_vocab_size);
    let mut shapes = vec![(E_W, vec![m, v], ParamKind::Weight)];
    if !cfg.tie_embeddings {
        shapes.push((E_O, vec![v, n], ParamKind::Weight));
    } else if cfg.has_adapter() {
        shapes.push((E_O_ADAPTER, vec![n, m], ParamKind::Weight));
    }
    shapes.extend([
        (E_O_BIAS, vec![v], ParamKind::Affine),
        (INIT_LN_GAIN, vec![z], ParamKind::Affine),
        (INIT_LN_BIAS, vec![z], ParamKind::Affine),
        (W_I, vec![n, z], ParamKind::Weight),
        (LSTM_KERNEL, vec![4 * n, m + cfg.context_dim() + n], ParamKind::Weight),
        (LSTM_BIAS, vec![4 * n], ParamKind::Affine),
    ]);
    shapes.extend(attention::attention_param_shapes(&cfg.attention)?);
    Ok(shapes)
}

/// Parameter counts per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Input and output embeddings, output bias and tying adapter.
    pub embeddings: usize,
    pub recurrent: usize,
    pub attention: usize,
    /// `W_I`.
    pub init: usize,
    /// Layer-norm gain and bias on the image embedding.
    pub norms: usize,
    pub total: usize,
}

pub fn count_decoder_params(cfg: &DecoderConfig) -> Result<ParamBreakdown> {
    let mut b = ParamBreakdown {
        embeddings: 0,
        recurrent: 0,
        attention: 0,
        init: 0,
        norms: 0,
        total: 0,
    };
    for (name, shape, _) in decoder_param_shapes(cfg)? {
        let c: usize = shape.iter().product();
        let group = match name {
            E_W | E_O | E_O_BIAS | E_O_ADAPTER => &mut b.embeddings,
            LSTM_KERNEL | LSTM_BIAS => &mut b.recurrent,
            W_I => &mut b.init,
            INIT_LN_GAIN | INIT_LN_BIAS => &mut b.norms,
            _ => &mut b.attention,
        };
        *group += c;
        b.total += c;
    }
    Ok(b)
}

/// Handles of the decoder weights.
#[derive(Debug, Clone, Copy)]
pub struct ModelParams {
    pub e_w: ParamId,
    pub e_o: Option<ParamId>,
    pub e_o_adapter: Option<ParamId>,
    pub e_o_bias: ParamId,
    pub w_i: ParamId,
    pub init_ln_gain: ParamId,
    pub init_ln_bias: ParamId,
    pub lstm_kernel: ParamId,
    pub lstm_bias: ParamId,
    pub attention: AttentionParams,
}

impl ModelParams {
    fn find<T: Scalar>(set: &ParameterSet<T>, cfg: &DecoderConfig) -> Result<Self> {
        let get = |n: &str| set.id(n).ok_or_else(|| Error::Config(format!("missing parameter {n}")));
        Ok(ModelParams {
            e_w: get(E_W)?,
            e_o: if cfg.tie_embeddings { None } else { Some(get(E_O)?) },
            e_o_adapter: if cfg.has_adapter() { Some(get(E_O_ADAPTER)?) } else { None },
            e_o_bias: get(E_O_BIAS)?,
            w_i: get(W_I)?,
            init_ln_gain: get(INIT_LN_GAIN)?,
            init_ln_bias: get(INIT_LN_BIAS)?,
            lstm_kernel: get(LSTM_KERNEL)?,
            lstm_bias: get(LSTM_BIAS)?,
            attention: AttentionParams::find(set, &cfg.attention)?,
        })
    }
}

/// Configuration stored next to a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub codec: TokenCodec,
}

/// A decoder with its weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: DecoderConfig,
    pub codec: TokenCodec,
    pub params: ParameterSet<T>,
    pub ids: ModelParams,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation: Xavier for weight matrices, zero biases,
    /// unit layer-norm gains, forget-gate bias 1.
    pub fn new(cfg: DecoderConfig, codec: TokenCodec, seed: u64) -> Result<Self> {
        let tree = SeedTree::new(seed);
        Self::build(cfg, codec, |i, shape, kind| match kind {
            ParamKind::Weight => xavier_init(shape, &mut tree.stream(&[streams::INIT, i as u64])),
            ParamKind::Affine => Tensor::zeros(shape),
        })
    }

    /// All weights zero (gains one, forget bias one).
    pub fn zeros(cfg: DecoderConfig, codec: TokenCodec) -> Result<Self> {
        Self::build(cfg, codec, |_, shape, _| Tensor::zeros(shape))
    }

    fn build<F>(cfg: DecoderConfig, codec: TokenCodec, mut init: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], ParamKind) -> Tensor<T>,
    {
        cfg.validate()?;
        check_codec(&cfg, &codec)?;
        let n = cfg.state_size;
        let mut set = ParameterSet::new();
        for (i, (name, shape, kind)) in decoder_param_shapes(&cfg)?.into_iter().enumerate() {
            let mut t = init(i, &shape, kind);
            match name {
                INIT_LN_GAIN | attention::LN_GAIN => t = Tensor::full(&shape, T::one()),
                LSTM_BIAS => t.data_mut()[n..2 * n].iter_mut().for_each(|b| *b = T::one()),
                _ => {}
            }
            set.add(name, kind, t)?;
        }
        let ids = ModelParams::find(&set, &cfg)?;
        Ok(Model {
            cfg,
            codec,
            params: set,
            ids,
        })
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(cfg: DecoderConfig, codec: TokenCodec, params: ParameterSet<T>) -> Result<Self> {
        cfg.validate()?;
        check_codec(&cfg, &codec)?;
        let shapes = decoder_param_shapes(&cfg)?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &shapes {
            let p = params
                .by_name(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
        }
        let ids = ModelParams::find(&params, &cfg)?;
        Ok(Model { cfg, codec, params, ids })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            decoder: self.cfg,
            codec: self.codec,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            codec: self.codec,
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    /// Named tensors in allocation order.
    pub fn tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Writes `path` plus a JSON sidecar with the configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.tensors())?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config())?;
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let tensors = read_checkpoint::<T>(path)?;
        let mut set = ParameterSet::new();
        let kinds: Vec<_> = decoder_param_shapes(&cfg.decoder)?;
        for (name, value) in tensors {
            let kind = kinds
                .iter()
                .find(|(n, _, _)| *n == name)
                .map(|(_, _, k)| *k)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name} in {}", path.display())))?;
            set.add(&name, kind, value)?;
        }
        Model::from_params(cfg.decoder, cfg.codec, set)
    }
}

/// `model.ckpt` → `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn check_codec(cfg: &DecoderConfig, codec: &TokenCodec) -> Result<()> {
    if codec.encoded_vocab_size() != cfg.encoded_vocab_size {
        return Err(Error::Config(format!(
            "codec has {} symbols but the decoder expects {}",
            codec.encoded_vocab_size(),
            cfg.encoded_vocab_size
        )));
    }
    Ok(())
}

/// Model weights loaded on one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    e_w: Var,
    e_o: Option<Var>,
    e_o_adapter: Option<Var>,
    e_o_bias: Var,
    w_i: Var,
    init_ln_gain: Var,
    init_ln_bias: Var,
    lstm_kernel: Var,
    lstm_bias: Var,
    pub attention: AttentionVars,
    /// Weight-kind parameters, for the L2 term.
    weights: Vec<Var>,
}

impl ModelVars {
    pub fn load<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>) -> Self {
        let set = &model.params;
        let p = &model.ids;
        let attention = AttentionVars::load(tape, set, &p.attention);
        let weights = set
            .ids()
            .filter(|&id| set.get(id).kind == ParamKind::Weight)
            .map(|id| tape.param(set, id))
            .collect();
        ModelVars {
            e_w: tape.param(set, p.e_w),
            e_o: p.e_o.map(|id| tape.param(set, id)),
            e_o_adapter: p.e_o_adapter.map(|id| tape.param(set, id)),
            e_o_bias: tape.param(set, p.e_o_bias),
            w_i: tape.param(set, p.w_i),
            init_ln_gain: tape.param(set, p.init_ln_gain),
            init_ln_bias: tape.param(set, p.init_ln_bias),
            lstm_kernel: tape.param(set, p.lstm_kernel),
            lstm_bias: tape.param(set, p.lstm_bias),
            attention,
            weights,
        }
    }
}

/// Image embedding used to seed the decoder: the mean feature vector.
pub fn image_embedding(fm: &FeatureMap) -> Vec<f32> {
    let (f, r) = (fm.locations(), fm.channels());
    let mut out = vec![0.0f32; r];
    for j in 0..f {
        for (o, v) in out.iter_mut().zip(fm.location(j)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= f as f32);
    out
}

/// Batched LSTM state, `[B × n]` each.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub cell: Var,
}

/// `h = W_I · tanh(LN(embed))`, `cell = 0`. `embed` is `[B × z]`.
pub fn init_state<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, embed: Var, cfg: &DecoderConfig) -> Result<DecoderState> {
    let (b, z) = (tape.value(embed).rows(), tape.value(embed).cols());
    if z != cfg.image_embed_size || tape.value(embed).rank() != 2 {
        return Err(Error::dim(
            "init_state",
            format!("image embedding {:?}, expected width {}", tape.value(embed).shape(), cfg.image_embed_size),
        ));
    }
    let normed = tape.layer_norm(embed, vars.init_ln_gain, vars.init_ln_bias, 1)?;
    let act = tape.tanh(normed)?;
    let h = tape.matmul_t(act, vars.w_i)?;
    let cell = tape.leaf(Tensor::zeros(&[b, cfg.state_size]));
    Ok(DecoderState { h, cell })
}

/// Source of dropout masks; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut (dyn RngCore + 'static)>;

/// Output of one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[B × V_e]`
    pub logits: Var,
    pub state: DecoderState,
    /// `[B·F × g]`
    pub alpha: Var,
}

pub fn step<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    state: DecoderState,
    prev_tokens: &[usize],
    projected: &ProjectedFeatures,
    cfg: &DecoderConfig,
    mut dropout: DropoutRng<'_>,
) -> Result<StepOutput> {
    if let Some(&bad) = prev_tokens.iter().find(|&&t| t >= cfg.encoded_vocab_size) {
        return Err(Error::Range(format!(
            "token {bad} outside encoded vocabulary of {}",
            cfg.encoded_vocab_size
        )));
    }
    if prev_tokens.len() != projected.batch {
        return Err(Error::dim(
            "step",
            format!("{} tokens for a batch of {}", prev_tokens.len(), projected.batch),
        ));
    }
    let n = cfg.state_size;
    let rate = cfg.dropout_rate;
    let read = attention::attend(tape, projected, state.h, &vars.attention, &cfg.attention)?;
    let emb = tape.embedding(vars.e_w, prev_tokens)?;
    let mut x = tape.concat_cols(&[emb, read.context])?;
    if let Some(rng) = dropout.as_deref_mut() {
        x = tape.dropout(x, rate, true, rng)?;
    }
    let input = tape.concat_cols(&[x, state.h])?;
    let pre = tape.matmul_t(input, vars.lstm_kernel)?;
    let pre = tape.add_row(pre, vars.lstm_bias)?;
    let gates = tape.split_cols(pre, &[n, n, n, n])?;
    let i = tape.sigmoid(gates[0])?;
    let f = tape.sigmoid(gates[1])?;
    let g = tape.tanh(gates[2])?;
    let o = tape.sigmoid(gates[3])?;
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell)?;
    let h = tape.mul(o, squashed)?;
    let mut out = h;
    if let Some(rng) = dropout {
        out = tape.dropout(out, rate, true, rng)?;
    }
    let logits = output_logits(tape, vars, out)?;
    Ok(StepOutput {
        logits,
        state: DecoderState { h, cell },
        alpha: read.alpha,
    })
}

fn output_logits<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, h: Var) -> Result<Var> {
    let raw = match (vars.e_o, vars.e_o_adapter) {
        (Some(e_o), _) => tape.matmul_t(h, e_o)?,
        (None, Some(adapter)) => {
            let down = tape.matmul(h, adapter)?;
            tape.matmul(down, vars.e_w)?
        }
        (None, None) => tape.matmul(h, vars.e_w)?,
    };
    tape.add_row(raw, vars.e_o_bias)
}

/// Teacher-forcing input: feature maps and framed token sequences.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B·F × r]`
    pub features: Tensor<T>,
    /// `[B × z]`
    pub embeds: Tensor<T>,
    pub locations: usize,
    /// GO … EOS, padded to a common length.
    pub tokens: Vec<Vec<usize>>,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    /// Sequences are padded with their own last token.
    pub fn new(maps: &[&FeatureMap], sequences: Vec<Vec<usize>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if maps.len() != sequences.len() {
            return Err(Error::Argument(format!(
                "{} feature maps for {} sequences",
                maps.len(),
                sequences.len()
            )));
        }
        let (f, r) = (maps[0].locations(), maps[0].channels());
        let mut feats = Vec::with_capacity(maps.len() * f * r);
        let mut embeds = Vec::with_capacity(maps.len() * r);
        for fm in maps {
            if fm.locations() != f || fm.channels() != r {
                return Err(Error::dim(
                    "batch",
                    format!("feature map {}×{} in a batch of {f}×{r}", fm.locations(), fm.channels()),
                ));
            }
            feats.extend(fm.data().iter().map(|&v| T::of_f32(v)));
            embeds.extend(image_embedding(fm).into_iter().map(T::of_f32));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::Argument(format!("sequence {i} is shorter than GO, EOS")));
        }
        let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
        let mut batch = Batch {
            features: Tensor::from_vec(&[maps.len() * f, r], feats)?,
            embeds: Tensor::from_vec(&[maps.len(), r], embeds)?,
            locations: f,
            tokens: sequences,
            lengths,
        };
        let longest = batch.lengths.iter().copied().max().unwrap_or(0);
        batch.pad_to(longest);
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Extends every sequence to `len` tokens with padding that is masked out.
    pub fn pad_to(&mut self, len: usize) {
        for seq in &mut self.tokens {
            let last = *seq.last().expect("sequences are non-empty");
            while seq.len() < len {
                seq.push(last);
            }
        }
    }

    fn steps(&self) -> usize {
        self.tokens[0].len() - 1
    }
}

/// Loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub nll: Var,
    pub attn_reg: Var,
    pub l2: Var,
}

/// Scalar values of [`LossParts`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub nll: f64,
    pub attn_reg: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        LossValues {
            total: v(self.total),
            nll: v(self.nll),
            attn_reg: v(self.attn_reg),
            l2: v(self.l2),
        }
    }
}

/// `λ · Σ ‖W‖²` over the given weights.
pub fn l2_penalty<T: Scalar>(tape: &mut Tape<T>, weights: &[Var], lambda: f64) -> Result<Var> {
    let mut acc = tape.leaf(Tensor::scalar(T::zero()));
    for &w in weights {
        let s = tape.sum_squares(w)?;
        acc = tape.add(acc, s)?;
    }
    tape.scale(acc, T::of(lambda))
}

/// `(1/g) Σ_h Σ_j (1 − Σ_t α_tj^(h))²`, averaged over `batch` images, for an
/// accumulated `[B·F × g]` attention sum.
pub fn attention_penalty<T: Scalar>(tape: &mut Tape<T>, summed: Var, heads: usize, batch: usize) -> Result<Var> {
    let neg = tape.scale(summed, -T::one())?;
    let gap = tape.add_scalar(neg, T::one())?;
    let sq = tape.sum_squares(gap)?;
    tape.scale(sq, T::one() / T::of((heads * batch) as f64))
}

/// Negative log-likelihood plus attention and L2 regularisers.
pub fn teacher_forced_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    batch: &Batch<T>,
    lambda: f64,
    mut dropout: DropoutRng<'_>,
) -> Result<LossParts> {
    if batch.size() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Argument(format!("weight decay must be >= 0, got {lambda}")));
    }
    let cfg = &model.cfg;
    if let Some(&tok) = batch.tokens.iter().flatten().find(|&&t| t >= cfg.encoded_vocab_size) {
        return Err(Error::Range(format!(
            "token {tok} outside vocabulary of {}",
            cfg.encoded_vocab_size
        )));
    }
    let b = batch.size();
    let f = batch.locations;
    let vars = ModelVars::load(tape, model);
    let feats = tape.leaf(batch.features.clone());
    let embeds = tape.leaf(batch.embeds.clone());
    let projected = attention::precompute_projection(tape, feats, f, &vars.attention, &cfg.attention)?;
    let mut state = init_state(tape, &vars, embeds, cfg)?;

    let mut nll_terms = Vec::with_capacity(batch.steps());
    let mut attn_sum: Option<Var> = None;
    for t in 0..batch.steps() {
        let prev: Vec<usize> = batch.tokens.iter().map(|s| s[t]).collect();
        let target: Vec<usize> = batch.tokens.iter().map(|s| s[t + 1]).collect();
        let mask: Vec<T> = batch
            .lengths
            .iter()
            .map(|&len| if t + 1 < len { T::one() } else { T::zero() })
            .collect();
        let out = step(tape, &vars, state, &prev, &projected, cfg, dropout.as_deref_mut())?;
        state = out.state;

        let logp = tape.log_softmax(out.logits)?;
        let picked = tape.pick(logp, &target)?;
        let mask_var = tape.leaf(Tensor::from_vec(&[b], mask.clone())?);
        let masked = tape.mul(picked, mask_var)?;
        nll_terms.push(tape.sum(masked)?);

        let loc_mask: Vec<T> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, f)).collect();
        let weighted = tape.scale_rows(out.alpha, &loc_mask)?;
        attn_sum = Some(match attn_sum {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }

    let mut log_lik = nll_terms[0];
    for &term in &nll_terms[1..] {
        log_lik = tape.add(log_lik, term)?;
    }
    let nll = tape.scale(log_lik, -T::one() / T::of(b as f64))?;
    let attn_sum = attn_sum.expect("at least one step");
    let attn_reg = attention_penalty(tape, attn_sum, cfg.attention.heads, b)?;
    let l2 = l2_penalty(tape, &vars.weights, lambda)?;
    let partial = tape.add(nll, attn_reg)?;
    let total = tape.add(partial, l2)?;
    Ok(LossParts { total, nll, attn_reg, l2 })
}
