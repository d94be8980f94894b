//! Input embeddings and context encoders.
//!
//! [`EmbeddingBank`] concatenates one row per table for every token.
//! [`Encoder`] maps the `[n, D]` embedding matrix to `[n, d]` context states
//! with a Bi-LSTM, a vanilla Transformer, or the adapted Transformer whose
//! attention logits carry direction- and distance-aware relative terms.

use std::fmt;
use std::io::BufRead;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamRegistry, Tensor, Var};
use crate::error::{Error, Result};
use crate::synextract::Vocab;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    BiLstm,
    Transformer,
    Adapted,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::BiLstm => "bilstm",
            EncoderKind::Transformer => "transformer",
            EncoderKind::Adapted => "adapted",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bilstm" | "lstm" => Ok(EncoderKind::BiLstm),
            "transformer" => Ok(EncoderKind::Transformer),
            "adapted" | "adapted-transformer" => Ok(EncoderKind::Adapted),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Adapted,
            layers: 2,
            hidden: 128,
            heads: 8,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("encoder hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.kind != EncoderKind::BiLstm
            && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
                let hint = if self.hidden == 128 && self.heads == 12 {
                    " (128 hidden units with 12 heads is the published setting, but 128 is \
                     not divisible by 12; use 8 heads)"
                } else {
                    ""
                };
                return Err(Error::Config(format!(
                    "hidden size {} is not divisible by {} heads{hint}",
                    self.hidden, self.heads
                )));
            }
        Ok(())
    }
}

/// One word embedding table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab: Vocab,
    pub param: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingBank {
    pub tables: Vec<EmbeddingTable>,
}

impl EmbeddingBank {
    /// Adds a randomly initialized trainable table over `vocab`.
    pub fn add_random<R: Rng>(
        &mut self,
        params: &mut ParamRegistry,
        name: &str,
        vocab: Vocab,
        dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        let param = params.register_normal(
            format!("emb.{name}"),
            vocab.len(),
            dim,
            EMBEDDING_INIT_STD,
            rng,
        )?;
        self.tables.push(EmbeddingTable {
            name: name.to_string(),
            vocab,
            param,
            dim,
        });
        Ok(())
    }

    /// Adds a frozen table from static vectors. The `<unk>` row is zero.
    pub fn add_static(
        &mut self,
        params: &mut ParamRegistry,
        name: &str,
        vocab: Vocab,
        vectors: Tensor,
    ) -> Result<()> {
        let dim = vectors.cols();
        if vectors.rows() != vocab.len() {
            return Err(Error::Shape {
                op: "static embeddings",
                left: vectors.shape().to_vec(),
                right: vec![vocab.len()],
            });
        }
        let param = params.register(format!("emb.{name}"), vectors)?;
        params.set_frozen(param, true);
        self.tables.push(EmbeddingTable {
            name: name.to_string(),
            vocab,
            param,
            dim,
        });
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.tables.iter().map(|t| t.dim).sum()
    }

    /// `[n, D]` matrix: row `i` is the concatenation of every table's row
    /// for token `i`, in table order.
    pub fn embed(&self, g: &mut Graph, params: &ParamRegistry, surfaces: &[&str]) -> Result<Var> {
        if self.tables.is_empty() {
            return Err(Error::Config("embedding bank has no tables".into()));
        }
        let parts = self
            .tables
            .iter()
            .map(|t| {
                let ids: Vec<usize> = surfaces.iter().map(|s| t.vocab.id(s)).collect();
                g.lookup(params, t.param, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts)
        }
    }
}

/// Reads word2vec-style text vectors (`surface v1 ... vd`). The dimension
/// comes from the first line; a `count dim` header line is skipped.
pub fn load_static_vectors<R: BufRead>(reader: R) -> Result<(Vocab, Tensor)> {
    let mut vocab = Vocab::default();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(Error::Format {
                line: lineno + 1,
                msg: format!("expected {d} values, found {}", values.len()),
            });
        }
        if vocab.get(fields[0]).is_some() {
            continue;
        }
        vocab.insert(fields[0].to_string());
        rows.push(values);
    }
    let d = dim.ok_or_else(|| Error::Empty("no vectors in embedding file".into()))?;
    let mut data = vec![0.0; d];
    for r in rows {
        data.extend(r);
    }
    let t = Tensor::matrix(vocab.len(), d, data)?;
    Ok((vocab, t))
}

/// Attention knobs that distinguish the two Transformer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionStyle {
    /// Add content–position and bias terms over signed distance.
    pub relative: bool,
    /// Divide content logits by `sqrt(d_head)`.
    pub scaled: bool,
    /// Add sinusoidal absolute positions to the input.
    pub absolute_positions: bool,
}

impl AttentionStyle {
    pub fn for_kind(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Adapted => AttentionStyle {
                relative: true,
                scaled: false,
                absolute_positions: false,
            },
            _ => AttentionStyle {
                relative: false,
                scaled: true,
                absolute_positions: true,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(params: &mut ParamRegistry, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: params.register_glorot(format!("{name}.w"), output, input, rng)?,
            b: params.register_zeros(format!("{name}.b"), &[output])?,
        })
    }

    fn apply(&self, g: &mut Graph, params: &ParamRegistry, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let y = g.matmul_t(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(params: &mut ParamRegistry, name: &str, d: usize) -> Result<Self> {
        let gain = params.register(format!("{name}.g"), Tensor::vector(vec![1.0; d]))?;
        let bias = params.register_zeros(format!("{name}.b"), &[d])?;
        Ok(Norm { gain, bias })
    }

    fn apply(&self, g: &mut Graph, params: &ParamRegistry, x: Var) -> Result<Var> {
        let gain = g.param(params, self.gain);
        let bias = g.param(params, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    /// Projection of the sinusoidal distance table (relative style only).
    rel: Option<ParamId>,
    /// Per-head content bias `[heads, d_head]`.
    u: Option<ParamId>,
    /// Per-head position bias `[heads, d_head]`.
    pos_bias: Option<ParamId>,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct LstmDirection {
    input: Linear,
    recurrent: ParamId,
}

#[derive(Debug, Clone)]
struct LstmLayer {
    fwd: LstmDirection,
    bwd: LstmDirection,
    proj: Linear,
}

#[derive(Debug, Clone)]
enum Layers {
    Lstm(Vec<LstmLayer>),
    Attention(Vec<AttentionLayer>),
}

/// Attention tensors of one head, kept for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub logits: Var,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub style: AttentionStyle,
    input_proj: Option<Linear>,
    layers: Layers,
}

/// Sinusoidal table: row `r` encodes position `r as f64 + offset`.
fn sinusoid(rows: usize, d: usize, offset: f64) -> Vec<f64> {
    let mut data = vec![0.0; rows * d];
    for r in 0..rows {
        let p = r as f64 + offset;
        for k in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            data[r * d + k] = if k % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
        }
    }
    data
}

impl Encoder {
    /// Registers encoder parameters under `enc.` and returns the encoder.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        input_dim: usize,
        params: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Encoder> {
        config.validate()?;
        let d = config.hidden;
        let style = AttentionStyle::for_kind(config.kind);
        let layers = match config.kind {
            EncoderKind::BiLstm => {
                let mut layers = Vec::new();
                for l in 0..config.layers {
                    let input = if l == 0 { input_dim } else { d };
                    let mut dir = |name: &str, params: &mut ParamRegistry| -> Result<LstmDirection> {
                        Ok(LstmDirection {
                            input: Linear::new(params, &format!("enc.l{l}.{name}.ih"), input, 4 * d, rng)?,
                            recurrent: params.register_glorot(format!("enc.l{l}.{name}.hh"), 4 * d, d, rng)?,
                        })
                    };
                    let fwd = dir("fwd", params)?;
                    let bwd = dir("bwd", params)?;
                    let proj = Linear::new(params, &format!("enc.l{l}.proj"), 2 * d, d, rng)?;
                    layers.push(LstmLayer { fwd, bwd, proj });
                }
                Layers::Lstm(layers)
            }
            EncoderKind::Transformer | EncoderKind::Adapted => {
                let dh = d / config.heads;
                let mut layers = Vec::new();
                for l in 0..config.layers {
                    let p = format!("enc.l{l}");
                    let relative = config.kind == EncoderKind::Adapted;
                    layers.push(AttentionLayer {
                        q: Linear::new(params, &format!("{p}.q"), d, d, rng)?,
                        k: Linear::new(params, &format!("{p}.k"), d, d, rng)?,
                        v: Linear::new(params, &format!("{p}.v"), d, d, rng)?,
                        out: Linear::new(params, &format!("{p}.o"), d, d, rng)?,
                        rel: if relative {
                            Some(params.register_glorot(format!("{p}.rel"), d, d, rng)?)
                        } else {
                            None
                        },
                        u: if relative {
                            Some(params.register_zeros(format!("{p}.u"), &[config.heads, dh])?)
                        } else {
                            None
                        },
                        pos_bias: if relative {
                            Some(params.register_zeros(format!("{p}.vb"), &[config.heads, dh])?)
                        } else {
                            None
                        },
                        norm1: Norm::new(params, &format!("{p}.ln1"), d)?,
                        ff1: Linear::new(params, &format!("{p}.ff1"), d, 2 * d, rng)?,
                        ff2: Linear::new(params, &format!("{p}.ff2"), 2 * d, d, rng)?,
                        norm2: Norm::new(params, &format!("{p}.ln2"), d)?,
                    });
                }
                Layers::Attention(layers)
            }
        };
        let input_proj = match config.kind {
            EncoderKind::BiLstm => None,
            _ => Some(Linear::new(params, "enc.in", input_dim, d, rng)?),
        };
        Ok(Encoder {
            config,
            style,
            input_proj,
            layers,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Context states `[n, d]` for embeddings `[n, D]`.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        embeddings: Var,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        Ok(self.encode_traced(g, params, embeddings, dropout)?.0)
    }

    /// Like [`Encoder::encode`], also returning per-head attention traces.
    pub fn encode_traced<R: Rng>(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        embeddings: Var,
        mut dropout: Option<&mut R>,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        let n = g.value(embeddings).rows();
        if n == 0 {
            return Err(Error::Empty("cannot encode an empty sentence".into()));
        }
        let rate = self.config.dropout;
        let drop = |g: &mut Graph, x: Var, rng: &mut Option<&mut R>| -> Result<Var> {
            match rng {
                Some(r) => g.dropout(x, rate, *r),
                None => Ok(x),
            }
        };
        let mut traces = Vec::new();
        match &self.layers {
            Layers::Lstm(layers) => {
                let mut x = embeddings;
                for layer in layers {
                    let (f, b) = self.lstm_directions(g, params, layer, x)?;
                    let cat = g.concat(&[f, b])?;
                    x = layer.proj.apply(g, params, cat)?;
                    x = drop(g, x, &mut dropout)?;
                }
                Ok((x, traces))
            }
            Layers::Attention(layers) => {
                let proj = self.input_proj.as_ref().expect("attention encoders project input");
                let mut x = proj.apply(g, params, embeddings)?;
                if self.style.absolute_positions {
                    let pe = Tensor::matrix(n, self.hidden(), sinusoid(n, self.hidden(), 0.0))?;
                    let pe = g.constant(pe);
                    x = g.add(x, pe)?;
                }
                for (l, layer) in layers.iter().enumerate() {
                    let att = self.attention(g, params, layer, l, x, &mut traces)?;
                    let att = drop(g, att, &mut dropout)?;
                    let res = g.add(x, att)?;
                    let x1 = layer.norm1.apply(g, params, res)?;
                    let h = layer.ff1.apply(g, params, x1)?;
                    let h = g.relu(h);
                    let h = layer.ff2.apply(g, params, h)?;
                    let h = drop(g, h, &mut dropout)?;
                    let res = g.add(x1, h)?;
                    x = layer.norm2.apply(g, params, res)?;
                }
                Ok((x, traces))
            }
        }
    }

    fn attention(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        layer: &AttentionLayer,
        index: usize,
        x: Var,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let d = self.hidden();
        let heads = self.config.heads;
        let dh = d / heads;
        let q = layer.q.apply(g, params, x)?;
        let k = layer.k.apply(g, params, x)?;
        let v = layer.v.apply(g, params, x)?;

        // Projected distance table; row r is signed distance r - (n - 1).
        let rel = match (self.style.relative, layer.rel) {
            (true, Some(w)) => {
                let table = Tensor::matrix(2 * n - 1, d, sinusoid(2 * n - 1, d, -(n as f64 - 1.0)))?;
                let table = g.constant(table);
                let w = g.param(params, w);
                Some(g.matmul_t(table, w)?)
            }
            _ => None,
        };
        let shifted: Rc<Vec<usize>> = Rc::new(
            (0..n)
                .flat_map(|i| (0..n).map(move |j| i * (2 * n - 1) + i + n - 1 - j))
                .collect(),
        );
        let by_distance: Rc<Vec<usize>> =
            Rc::new((0..n).flat_map(|i| (0..n).map(move |j| i + n - 1 - j)).collect());
        let by_column: Rc<Vec<usize>> = Rc::new((0..n).flat_map(|_| 0..n).collect());

        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut logits = g.matmul_t(qh, kh)?;
            if self.style.scaled {
                logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            }
            if let Some(rel) = rel {
                let rh = g.slice_cols(rel, h * dh, dh)?;
                // content–position: q_i · r_{i-j}
                let qr = g.matmul_t(qh, rh)?;
                let qr = g.gather(qr, shifted.clone(), vec![n, n])?;
                // content bias: u · k_j
                let u = g.param(params, layer.u.expect("relative layer"));
                let uh = g.row(u, h)?;
                let uk = g.matmul_t(uh, kh)?;
                let uk = g.gather(uk, by_column.clone(), vec![n, n])?;
                // position bias: v · r_{i-j}
                let vb = g.param(params, layer.pos_bias.expect("relative layer"));
                let vbh = g.row(vb, h)?;
                let vr = g.matmul_t(vbh, rh)?;
                let vr = g.gather(vr, by_distance.clone(), vec![n, n])?;
                logits = g.add(logits, qr)?;
                logits = g.add(logits, uk)?;
                logits = g.add(logits, vr)?;
            }
            let weights = g.softmax(logits);
            traces.push(AttentionTrace {
                layer: index,
                head: h,
                logits,
                weights,
            });
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        layer.out.apply(g, params, cat)
    }

    fn lstm_directions(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        layer: &LstmLayer,
        x: Var,
    ) -> Result<(Var, Var)> {
        let f = self.lstm_pass(g, params, &layer.fwd, x, false)?;
        let b = self.lstm_pass(g, params, &layer.bwd, x, true)?;
        Ok((f, b))
    }

    /// Forward and backward hidden sequences `[n, d]` of Bi-LSTM layer `layer`.
    pub fn bilstm_directions(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        layer: usize,
        x: Var,
    ) -> Result<(Var, Var)> {
        match &self.layers {
            Layers::Lstm(layers) => self.lstm_directions(g, params, &layers[layer], x),
            Layers::Attention(_) => Err(Error::Config("not a Bi-LSTM encoder".into())),
        }
    }

    fn lstm_pass(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        dir: &LstmDirection,
        x: Var,
        reverse: bool,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let d = self.hidden();
        let gates_x = dir.input.apply(g, params, x)?;
        let whh = g.param(params, dir.recurrent);
        let mut h = g.constant(Tensor::zeros(&[1, d]));
        let mut c = g.constant(Tensor::zeros(&[1, d]));
        let mut outs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let gx = g.row(gates_x, t)?;
            let gh = g.matmul_t(h, whh)?;
            let z = g.add(gx, gh)?;
            let zi = g.slice_cols(z, 0, d)?;
            let zf = g.slice_cols(z, d, d)?;
            let zg = g.slice_cols(z, 2 * d, d)?;
            let zo = g.slice_cols(z, 3 * d, d)?;
            let (i, f, cand, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            outs[t] = h;
        }
        g.stack_rows(&outs)
    }
}
