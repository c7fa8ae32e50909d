//! Global, local, and relation encoders for both media types.
//!
//! Text runs through a character-level conv stack into an LSTM; the global
//! branch mean-pools the hidden sequence while the local and relation
//! branches pool it with learned softmax attention. Images arrive as
//! precomputed feature vectors; region pairs are concatenated into relation
//! candidates. Every branch ends in a projection into the common space.

use rand::Rng;

use crate::config::{ConvSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::params::NamedParams;
use crate::tensor::{Tape, Tensor};
use crate::text::TextInstance;

/// Temporal max pooling geometry used after flagged conv layers.
pub const POOL_WIDTH: usize = 3;
pub const POOL_STRIDE: usize = 3;

/// Precomputed image features: one global vector plus an ordered list of
/// region vectors sharing a single dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInstance {
    pub global_feat: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
}

impl ImageInstance {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::InvalidArgument("image must have at least one region".into()));
        }
        let dim = self.regions[0].len();
        if self.regions.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(
                "all region vectors must share one dimensionality".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct ConvLayer {
    /// `[out_ch, in_ch, width]`
    pub kernels: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub pool: bool,
}

/// Gate and cell weights for one LSTM: `W` maps the input frame, `U` the
/// previous hidden state, `b` is the bias; suffixes i/f/o/u are the input,
/// forget, output gates and the cell update.
#[derive(Clone)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub w_u: Tensor,
    pub u_u: Tensor,
    pub b_u: Tensor,
}

impl LstmParams {
    pub fn hidden_dim(&self) -> usize {
        self.u_i.shape()[0]
    }
}

/// Feed-forward attention: scores = v^T tanh(W H).
#[derive(Clone)]
pub struct AttentionParams {
    pub w: Tensor,
    pub v: Tensor,
}

/// Linear head into the common space.
#[derive(Clone)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone)]
pub struct TextBranch {
    pub conv: Vec<ConvLayer>,
    pub lstm: LstmParams,
    /// Present on the local and relation branches only.
    pub attn: Option<AttentionParams>,
    pub head: Projection,
}

/// All trainable parameters of the two encoders.
pub struct EncoderParams {
    pub text_global: TextBranch,
    pub text_local: TextBranch,
    pub text_relation: TextBranch,
    pub img_global_head: Projection,
    pub img_local_head: Projection,
    pub img_relation_head: Projection,
    pub share_text_trunk: bool,
    pub projection_tanh: bool,
}

/// Weight initializer: Xavier-uniform from a seeded generator for training,
/// all-zero for rebuilding a structure that is immediately overwritten from
/// a snapshot.
trait ParamInit {
    fn weight(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor>;
}

struct XavierInit<'a, R: Rng>(&'a mut R);

impl<R: Rng> ParamInit for XavierInit<'_, R> {
    fn weight(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.0.gen_range(-bound..bound)).collect();
        Tensor::param(data, shape)
    }
}

struct ZeroInit;

impl ParamInit for ZeroInit {
    fn weight(&mut self, shape: &[usize], _fan_in: usize, _fan_out: usize) -> Result<Tensor> {
        zeros_param(shape)
    }
}

fn zeros_param(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(vec![0.0; n], shape)
}

fn init_conv_stack(init: &mut impl ParamInit, specs: &[ConvSpec], in_ch: usize) -> Result<Vec<ConvLayer>> {
    let mut layers = Vec::with_capacity(specs.len());
    let mut ch = in_ch;
    for spec in specs {
        let kernels = init.weight(
            &[spec.kernels, ch, spec.width],
            ch * spec.width,
            spec.kernels * spec.width,
        )?;
        let bias = zeros_param(&[spec.kernels])?;
        layers.push(ConvLayer { kernels, bias, pool: spec.pool });
        ch = spec.kernels;
    }
    Ok(layers)
}

fn init_lstm(init: &mut impl ParamInit, input_dim: usize, hidden: usize) -> Result<LstmParams> {
    Ok(LstmParams {
        w_i: init.weight(&[hidden, input_dim], input_dim, hidden)?,
        u_i: init.weight(&[hidden, hidden], hidden, hidden)?,
        b_i: zeros_param(&[hidden])?,
        w_f: init.weight(&[hidden, input_dim], input_dim, hidden)?,
        u_f: init.weight(&[hidden, hidden], hidden, hidden)?,
        b_f: zeros_param(&[hidden])?,
        w_o: init.weight(&[hidden, input_dim], input_dim, hidden)?,
        u_o: init.weight(&[hidden, hidden], hidden, hidden)?,
        b_o: zeros_param(&[hidden])?,
        w_u: init.weight(&[hidden, input_dim], input_dim, hidden)?,
        u_u: init.weight(&[hidden, hidden], hidden, hidden)?,
        b_u: zeros_param(&[hidden])?,
    })
}

fn init_projection(init: &mut impl ParamInit, in_dim: usize, out_dim: usize) -> Result<Projection> {
    Ok(Projection {
        weight: init.weight(&[out_dim, in_dim], in_dim, out_dim)?,
        bias: zeros_param(&[out_dim])?,
    })
}

fn init_text_branch(
    init: &mut impl ParamInit,
    cfg: &ModelConfig,
    with_attention: bool,
) -> Result<TextBranch> {
    let alphabet_size = cfg.alphabet.chars().count();
    let conv = init_conv_stack(init, &cfg.conv_stack, alphabet_size)?;
    let feat = cfg.conv_stack.last().map(|c| c.kernels).unwrap_or(alphabet_size);
    let lstm = init_lstm(init, feat, cfg.lstm_hidden)?;
    let attn = if with_attention {
        Some(AttentionParams {
            w: init.weight(&[cfg.attn_dim, cfg.lstm_hidden], cfg.lstm_hidden, cfg.attn_dim)?,
            v: init.weight(&[cfg.attn_dim], cfg.attn_dim, 1)?,
        })
    } else {
        None
    };
    let head = init_projection(init, cfg.lstm_hidden, cfg.common_dim)?;
    Ok(TextBranch { conv, lstm, attn, head })
}

impl EncoderParams {
    /// Seeded initialization: weights uniform in ±sqrt(6/(fan_in+fan_out)),
    /// biases zero. The three text branches get independent parameters
    /// unless `share_text_trunk` reuses the global Char-CNN + LSTM.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<EncoderParams> {
        Self::build(cfg, &mut XavierInit(rng))
    }

    /// All-zero parameters with the configured structure; pair with
    /// [`crate::params::NamedParams::restore`] to rebuild from a snapshot.
    pub fn zeros(cfg: &ModelConfig) -> Result<EncoderParams> {
        Self::build(cfg, &mut ZeroInit)
    }

    fn build(cfg: &ModelConfig, init: &mut impl ParamInit) -> Result<EncoderParams> {
        let text_global = init_text_branch(init, cfg, false)?;
        let mut text_local = init_text_branch(init, cfg, true)?;
        let mut text_relation = init_text_branch(init, cfg, true)?;
        if cfg.share_text_trunk {
            text_local.conv = text_global.conv.clone();
            text_local.lstm = text_global.lstm.clone();
            text_relation.conv = text_global.conv.clone();
            text_relation.lstm = text_global.lstm.clone();
        }
        Ok(EncoderParams {
            text_global,
            text_local,
            text_relation,
            img_global_head: init_projection(init, cfg.feature_dim, cfg.common_dim)?,
            img_local_head: init_projection(init, cfg.feature_dim, cfg.common_dim)?,
            img_relation_head: init_projection(init, 2 * cfg.feature_dim, cfg.common_dim)?,
            share_text_trunk: cfg.share_text_trunk,
            projection_tanh: cfg.projection_tanh,
        })
    }

    /// Every trainable tensor under a stable dotted name. Shared trunks are
    /// registered once, under the owning branch's name.
    pub fn named(&self) -> NamedParams {
        let mut p = NamedParams::new();
        let branch = |p: &mut NamedParams, prefix: &str, b: &TextBranch| {
            for (i, layer) in b.conv.iter().enumerate() {
                p.push(format!("{prefix}.conv{i}.kernels"), &layer.kernels);
                p.push(format!("{prefix}.conv{i}.bias"), &layer.bias);
            }
            let l = &b.lstm;
            for (name, t) in [
                ("w_i", &l.w_i),
                ("u_i", &l.u_i),
                ("b_i", &l.b_i),
                ("w_f", &l.w_f),
                ("u_f", &l.u_f),
                ("b_f", &l.b_f),
                ("w_o", &l.w_o),
                ("u_o", &l.u_o),
                ("b_o", &l.b_o),
                ("w_u", &l.w_u),
                ("u_u", &l.u_u),
                ("b_u", &l.b_u),
            ] {
                p.push(format!("{prefix}.lstm.{name}"), t);
            }
            if let Some(a) = &b.attn {
                p.push(format!("{prefix}.attn.w"), &a.w);
                p.push(format!("{prefix}.attn.v"), &a.v);
            }
            p.push(format!("{prefix}.head.weight"), &b.head.weight);
            p.push(format!("{prefix}.head.bias"), &b.head.bias);
        };
        branch(&mut p, "text_global", &self.text_global);
        branch(&mut p, "text_local", &self.text_local);
        branch(&mut p, "text_relation", &self.text_relation);
        for (name, head) in [
            ("image.global_head", &self.img_global_head),
            ("image.local_head", &self.img_local_head),
            ("image.relation_head", &self.img_relation_head),
        ] {
            p.push(format!("{name}.weight"), &head.weight);
            p.push(format!("{name}.bias"), &head.bias);
        }
        p
    }
}

/// Per-instance common-space vectors. Text bundles carry exactly one local
/// and one relation vector plus their attention weights; image bundles
/// carry n locals and n(n-1) relations.
pub struct EmbeddingBundle {
    pub global: Tensor,
    pub locals: Vec<Tensor>,
    pub relations: Vec<Tensor>,
    pub attn_local: Option<Vec<f64>>,
    pub attn_relation: Option<Vec<f64>>,
    /// Set when an image has fewer than two regions and therefore no
    /// relation candidates.
    pub relations_disabled: bool,
}

/// Detached plain-data view of a bundle, used for scoring and export.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BundleValues {
    pub global: Vec<f64>,
    pub locals: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn_local: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn_relation: Option<Vec<f64>>,
    pub relations_disabled: bool,
}

impl EmbeddingBundle {
    pub fn values(&self) -> BundleValues {
        BundleValues {
            global: self.global.data(),
            locals: self.locals.iter().map(|t| t.data()).collect(),
            relations: self.relations.iter().map(|t| t.data()).collect(),
            attn_local: self.attn_local.clone(),
            attn_relation: self.attn_relation.clone(),
            relations_disabled: self.relations_disabled,
        }
    }
}

/// Smallest input length the stack accepts (every conv window and pooling
/// window must fit at least once).
pub fn min_input_len(stack: &[ConvLayer]) -> usize {
    let mut required = 1usize;
    for layer in stack.iter().rev() {
        if layer.pool {
            // valid pooling: out = (n - POOL_WIDTH)/POOL_STRIDE + 1 >= required
            required = POOL_STRIDE * (required - 1) + POOL_WIDTH;
        }
        let width = layer.kernels.shape()[2];
        required = required + width - 1;
    }
    required
}

/// Conv stack forward: valid-mode stride-1 convolution, max(0, x)
/// activation, temporal max pooling (width 3, stride 3) after flagged
/// layers. Input `[alphabet, L]`, output `[feat, m]`.
pub fn char_cnn_forward(tape: &mut Tape, onehot: &Tensor, stack: &[ConvLayer]) -> Result<Tensor> {
    let len = onehot.shape()[1];
    let min_len = min_input_len(stack);
    if len < min_len {
        return Err(Error::SequenceTooShort { len, min_len });
    }
    let mut x = onehot.clone();
    for layer in stack {
        x = tape.conv1d(&x, &layer.kernels, &layer.bias)?;
        x = tape.max_zero(&x)?;
        if layer.pool {
            x = tape.maxpool1d(&x, POOL_WIDTH, POOL_STRIDE)?;
        }
    }
    Ok(x)
}

/// Number of frames the stack produces for an input of length `len`.
pub fn output_frames(stack: &[ConvSpec], len: usize) -> Result<usize> {
    let mut n = len;
    for spec in stack {
        if n < spec.width {
            return Err(Error::SequenceTooShort { len, min_len: spec.width });
        }
        n = n - spec.width + 1;
        if spec.pool {
            if n < POOL_WIDTH {
                return Err(Error::SequenceTooShort { len, min_len: POOL_WIDTH });
            }
            n = (n - POOL_WIDTH) / POOL_STRIDE + 1;
        }
    }
    Ok(n)
}

/// Recurrent pass over the frame sequence `[feat, m]`; returns the m hidden
/// state vectors. Gates use the sigmoid of `W x_t + U h_(t-1) + b`; the cell
/// accumulates through the forget/input gates and the hidden state is the
/// output gate times tanh of the cell.
pub fn lstm_forward(
    tape: &mut Tape,
    frames: &Tensor,
    lstm: &LstmParams,
    h0: &Tensor,
    c0: &Tensor,
) -> Result<Vec<Tensor>> {
    let fs = frames.shape();
    if fs.len() != 2 {
        return Err(Error::InvalidOperand {
            op: "lstm_forward",
            msg: format!("expected [feat, m] frames, got {fs:?}"),
        });
    }
    let m = fs[1];
    let hidden = lstm.hidden_dim();
    if h0.shape() != vec![hidden] || c0.shape() != vec![hidden] {
        return Err(Error::ShapeMismatch { op: "lstm_forward", lhs: vec![hidden], rhs: h0.shape() });
    }
    let mut h = h0.clone();
    let mut c = c0.clone();
    let mut hs = Vec::with_capacity(m);
    for t in 0..m {
        let x_t = tape.col_slice(frames, t)?;
        let gate = |tape: &mut Tape, w: &Tensor, u: &Tensor, b: &Tensor| -> Result<Tensor> {
            let wx = tape.matmul(w, &x_t)?;
            let uh = tape.matmul(u, &h)?;
            let s = tape.add(&wx, &uh)?;
            tape.add(&s, b)
        };
        let i_t = {
            let z = gate(tape, &lstm.w_i, &lstm.u_i, &lstm.b_i)?;
            tape.sigmoid(&z)?
        };
        let f_t = {
            let z = gate(tape, &lstm.w_f, &lstm.u_f, &lstm.b_f)?;
            tape.sigmoid(&z)?
        };
        let o_t = {
            let z = gate(tape, &lstm.w_o, &lstm.u_o, &lstm.b_o)?;
            tape.sigmoid(&z)?
        };
        let u_t = {
            let z = gate(tape, &lstm.w_u, &lstm.u_u, &lstm.b_u)?;
            tape.tanh(&z)?
        };
        let keep = tape.mul(&c, &f_t)?;
        let write = tape.mul(&u_t, &i_t)?;
        c = tape.add(&keep, &write)?;
        let c_act = tape.tanh(&c)?;
        h = tape.mul(&o_t, &c_act)?;
        hs.push(h.clone());
    }
    Ok(hs)
}

/// Elementwise mean of the hidden sequence.
pub fn mean_pool(tape: &mut Tape, hidden: &[Tensor]) -> Result<Tensor> {
    if hidden.is_empty() {
        return Err(Error::InvalidOperand { op: "mean_pool", msg: "empty sequence".into() });
    }
    let refs: Vec<&Tensor> = hidden.iter().collect();
    let h = tape.stack_cols(&refs)?;
    tape.mean_cols(&h)
}

/// Attention pooling: weights a = softmax(v^T tanh(W H)), output
/// (1/m) * sum_k a_k h_k. Returns the pooled vector and the weights.
pub fn attention_pool(
    tape: &mut Tape,
    hidden: &[Tensor],
    attn: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    if hidden.is_empty() {
        return Err(Error::InvalidOperand { op: "attention_pool", msg: "empty sequence".into() });
    }
    let m = hidden.len();
    let refs: Vec<&Tensor> = hidden.iter().collect();
    let h = tape.stack_cols(&refs)?;
    let pre = tape.matmul(&attn.w, &h)?;
    let mapped = tape.tanh(&pre)?;
    let scores = tape.matmul(&attn.v, &mapped)?;
    let weights = tape.softmax(&scores)?;
    let pooled = tape.matmul(&h, &weights)?;
    let out = tape.scale(&pooled, 1.0 / m as f64)?;
    Ok((out, weights))
}

/// Linear map into the common space, with an optional tanh.
pub fn project(tape: &mut Tape, v: &Tensor, head: &Projection, tanh: bool) -> Result<Tensor> {
    let wx = tape.matmul(&head.weight, v)?;
    let y = tape.add(&wx, &head.bias)?;
    if tanh {
        tape.tanh(&y)
    } else {
        Ok(y)
    }
}

/// All ordered pairs (j, k), j != k, enumerated j-major; each candidate is
/// the concatenation of region j and region k. Fewer than two regions
/// yields an empty list with the disabled flag set.
pub fn build_relations(tape: &mut Tape, regions: &[Tensor]) -> Result<(Vec<Tensor>, bool)> {
    let n = regions.len();
    if n < 2 {
        return Ok((Vec::new(), true));
    }
    let mut out = Vec::with_capacity(n * (n - 1));
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            out.push(tape.concat(&[&regions[j], &regions[k]])?);
        }
    }
    Ok((out, false))
}

fn encode_text_branch(
    tape: &mut Tape,
    onehot: &Tensor,
    branch: &TextBranch,
    projection_tanh: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let frames = char_cnn_forward(tape, onehot, &branch.conv)?;
    let hidden = branch.lstm.hidden_dim();
    let h0 = Tensor::zeros(&[hidden]);
    let c0 = Tensor::zeros(&[hidden]);
    let hs = lstm_forward(tape, &frames, &branch.lstm, &h0, &c0)?;
    match &branch.attn {
        Some(attn) => {
            let (pooled, weights) = attention_pool(tape, &hs, attn)?;
            let v = project(tape, &pooled, &branch.head, projection_tanh)?;
            Ok((v, Some(weights.data())))
        }
        None => {
            let pooled = mean_pool(tape, &hs)?;
            let v = project(tape, &pooled, &branch.head, projection_tanh)?;
            Ok((v, None))
        }
    }
}

/// Encode a text instance through all three branches.
pub fn encode_text(
    tape: &mut Tape,
    text: &TextInstance,
    params: &EncoderParams,
) -> Result<EmbeddingBundle> {
    let (global, _) = encode_text_branch(tape, &text.onehot, &params.text_global, params.projection_tanh)?;
    let (local, attn_local) =
        encode_text_branch(tape, &text.onehot, &params.text_local, params.projection_tanh)?;
    let (relation, attn_relation) =
        encode_text_branch(tape, &text.onehot, &params.text_relation, params.projection_tanh)?;
    Ok(EmbeddingBundle {
        global,
        locals: vec![local],
        relations: vec![relation],
        attn_local,
        attn_relation,
        relations_disabled: false,
    })
}

/// Encode an image instance: project the global feature, each region, and
/// each ordered region-pair concatenation into the common space.
pub fn encode_image(
    tape: &mut Tape,
    image: &ImageInstance,
    params: &EncoderParams,
) -> Result<EmbeddingBundle> {
    image.validate()?;
    let global_feat = Tensor::new(image.global_feat.clone(), &[image.global_feat.len()])?;
    let global = project(tape, &global_feat, &params.img_global_head, params.projection_tanh)?;
    let region_tensors: Vec<Tensor> = image
        .regions
        .iter()
        .map(|r| Tensor::new(r.clone(), &[r.len()]))
        .collect::<Result<_>>()?;
    let locals: Vec<Tensor> = region_tensors
        .iter()
        .map(|r| project(tape, r, &params.img_local_head, params.projection_tanh))
        .collect::<Result<_>>()?;
    let (candidates, disabled) = build_relations(tape, &region_tensors)?;
    let relations: Vec<Tensor> = candidates
        .iter()
        .map(|c| project(tape, c, &params.img_relation_head, params.projection_tanh))
        .collect::<Result<_>>()?;
    Ok(EmbeddingBundle {
        global,
        locals,
        relations,
        attn_local: None,
        attn_relation: None,
        relations_disabled: disabled,
    })
}
