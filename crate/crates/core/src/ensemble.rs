//! Syntax fusion on top of the context states `H [n, d]`.
//!
//! Every operation runs over all tokens of a sentence at once. Per-type
//! memories are flattened with offsets (see [`IdMemory`]), so token `i`
//! attends over entries `offsets[i]..offsets[i + 1]`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamRegistry, Var};
use crate::encoder::EMBEDDING_INIT_STD;
use crate::error::{Error, Result};
use crate::synextract::{IdMemory, SyntaxType, SyntaxVocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    Dc,
    Sa,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Dc => "dc",
            Fusion::Sa => "sa",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Fusion::None),
            "dc" => Ok(Fusion::Dc),
            "sa" => Ok(Fusion::Sa),
            other => Err(Error::Config(format!("unknown fusion `{other}`"))),
        }
    }
}

/// Key and value tables of one syntax type, both `[|vocab|, d]`.
#[derive(Debug, Clone, Copy)]
pub struct KvmnParams {
    pub ty: SyntaxType,
    pub keys: ParamId,
    pub values: ParamId,
}

impl KvmnParams {
    pub fn register<R: Rng>(
        params: &mut ParamRegistry,
        vocab: &SyntaxVocab,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ty = vocab.ty;
        Ok(KvmnParams {
            ty,
            keys: params.register_normal(format!("kvmn.{ty}.keys"), vocab.keys.len(), d, EMBEDDING_INIT_STD, rng)?,
            values: params.register_normal(format!("kvmn.{ty}.values"), vocab.values.len(), d, EMBEDDING_INIT_STD, rng)?,
        })
    }
}

/// `W_q [1, 2d]` and scalar `b_q` of one type.
#[derive(Debug, Clone, Copy)]
pub struct SyntaxAttnParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl SyntaxAttnParams {
    pub fn register<R: Rng>(params: &mut ParamRegistry, ty: SyntaxType, d: usize, rng: &mut R) -> Result<Self> {
        Ok(SyntaxAttnParams {
            w: params.register_glorot(format!("sa.{ty}.w"), 1, 2 * d, rng)?,
            b: params.register_zeros(format!("sa.{ty}.b"), &[1])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
}

impl GateParams {
    pub fn register<R: Rng>(params: &mut ParamRegistry, d: usize, rng: &mut R) -> Result<Self> {
        Ok(GateParams {
            w_h: params.register_glorot("gate.wh", d, d, rng)?,
            w_s: params.register_glorot("gate.ws", d, d, rng)?,
            b: params.register_zeros("gate.b", &[d])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KvmnOutput {
    /// `[n, d]` weighted value sums.
    pub s: Var,
    /// `[M, 1]` entry weights, segmented by the memory offsets.
    pub p: Var,
}

/// Memory attention: `p = softmax_j(h_i · k_ij)`, `s_i = Σ_j p_ij v_ij`.
pub fn kvmn_forward(
    g: &mut Graph,
    params: &ParamRegistry,
    h: Var,
    memory: &IdMemory,
    kp: &KvmnParams,
) -> Result<KvmnOutput> {
    let (n, d) = (g.value(h).rows(), g.value(h).cols());
    if memory.num_tokens() != n {
        return Err(Error::Shape {
            op: "kvmn",
            left: vec![n, d],
            right: vec![memory.num_tokens()],
        });
    }
    if (0..n).any(|i| memory.entries(i).is_empty()) {
        return Err(Error::Empty(format!("{} memory has a token without entries", kp.ty)));
    }
    let keys = g.lookup(params, kp.keys, &memory.key_ids)?;
    let values = g.lookup(params, kp.values, &memory.value_ids)?;
    if g.value(keys).cols() != d {
        return Err(Error::Shape {
            op: "kvmn keys",
            left: g.value(keys).shape().to_vec(),
            right: vec![n, d],
        });
    }
    let m = memory.key_ids.len();
    let index: Vec<usize> = (0..n)
        .flat_map(|i| memory.entries(i).flat_map(move |_| i * d..(i + 1) * d))
        .collect();
    let hrep = g.gather(h, Rc::new(index), vec![m, d])?;
    let logits = g.row_dot(hrep, keys)?;
    let offsets = Rc::new(memory.offsets.clone());
    let p = g.segment_softmax(logits, offsets.clone())?;
    let s = g.segment_sum(p, values, offsets)?;
    Ok(KvmnOutput { s, p })
}

/// Concatenates the per-type summaries in the given order.
pub fn direct_concat(g: &mut Graph, summaries: &[Var]) -> Result<Var> {
    match summaries {
        [] => Err(Error::Config("direct concatenation needs a syntax type".into())),
        [one] => Ok(*one),
        many => g.concat(many),
    }
}

/// Attention across types: `q_c = σ(W_q^c (h ⊕ s_c) + b_q^c)`, `a = softmax(q)`,
/// `s = Σ_c a_c s_c`. Returns `(s [n, d], a [n, |C|])`.
pub fn syntax_attention(
    g: &mut Graph,
    params: &ParamRegistry,
    h: Var,
    summaries: &[Var],
    attn: &[SyntaxAttnParams],
) -> Result<(Var, Var)> {
    if summaries.is_empty() || summaries.len() != attn.len() {
        return Err(Error::Config(format!(
            "syntax attention over {} summaries with {} parameter sets",
            summaries.len(),
            attn.len()
        )));
    }
    let mut qs = Vec::with_capacity(summaries.len());
    for (&s, sp) in summaries.iter().zip(attn) {
        let x = g.concat(&[h, s])?;
        let w = g.param(params, sp.w);
        let b = g.param(params, sp.b);
        let z = g.matmul_t(x, w)?;
        let z = g.add_bias(z, b)?;
        qs.push(g.sigmoid(z));
    }
    let q = if qs.len() == 1 { qs[0] } else { g.concat(&qs)? };
    let a = g.softmax(q);
    let mut total = None;
    for (c, &s) in summaries.iter().enumerate() {
        let ac = g.slice_cols(a, c, 1)?;
        let part = g.scale_rows(s, ac)?;
        total = Some(match total {
            None => part,
            Some(t) => g.add(t, part)?,
        });
    }
    Ok((total.expect("non-empty"), a))
}

/// `r = σ(h W_hᵀ + s W_sᵀ + b)`, `o = (r ∘ h) ⊕ ((1 − r) ∘ s)`.
/// Returns `(o [n, 2d], r [n, d])`.
pub fn gate_fuse(g: &mut Graph, params: &ParamRegistry, h: Var, s: Var, gp: &GateParams) -> Result<(Var, Var)> {
    if g.shape(h) != g.shape(s) {
        return Err(Error::Shape {
            op: "gate",
            left: g.shape(h).to_vec(),
            right: g.shape(s).to_vec(),
        });
    }
    let wh = g.param(params, gp.w_h);
    let ws = g.param(params, gp.w_s);
    let b = g.param(params, gp.b);
    let zh = g.matmul_t(h, wh)?;
    let zs = g.matmul_t(s, ws)?;
    let z = g.add(zh, zs)?;
    let z = g.add_bias(z, b)?;
    let r = g.sigmoid(z);
    let rh = g.mul(r, h)?;
    let keep = g.one_minus(r);
    let rs = g.mul(keep, s)?;
    let o = g.concat(&[rh, rs])?;
    Ok((o, r))
}

/// `u = o W_oᵀ` with `W_o [d_out, d_in]`.
pub fn project(g: &mut Graph, params: &ParamRegistry, o: Var, w_o: ParamId) -> Result<Var> {
    let w = g.param(params, w_o);
    g.matmul_t(o, w)
}

/// Parameters and wiring of the whole fusion block.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub fusion: Fusion,
    pub kvmn: Vec<KvmnParams>,
    pub attn: Vec<SyntaxAttnParams>,
    pub gate: Option<GateParams>,
    pub hidden: usize,
}

/// Fused representation plus everything kept for inspection.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub o: Var,
    pub p: Vec<(SyntaxType, Var)>,
    pub a: Option<Var>,
    pub r: Option<Var>,
}

impl Ensemble {
    /// Registers parameters for `vocabs` (one per active type, in order).
    pub fn new<R: Rng>(
        params: &mut ParamRegistry,
        fusion: Fusion,
        gate: bool,
        vocabs: &[SyntaxVocab],
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match (fusion, vocabs.is_empty(), gate) {
            (Fusion::None, false, _) => {
                return Err(Error::Config("fusion=none takes no syntax types".into()))
            }
            (Fusion::Dc | Fusion::Sa, true, _) => {
                return Err(Error::Config(format!("fusion={fusion} needs at least one syntax type")))
            }
            (Fusion::None | Fusion::Dc, _, true) => {
                return Err(Error::Config("the gate requires fusion=sa".into()))
            }
            _ => {}
        }
        let kvmn = vocabs
            .iter()
            .map(|v| KvmnParams::register(params, v, d, rng))
            .collect::<Result<Vec<_>>>()?;
        let attn = if fusion == Fusion::Sa {
            kvmn.iter()
                .map(|k| SyntaxAttnParams::register(params, k.ty, d, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let gate = if gate { Some(GateParams::register(params, d, rng)?) } else { None };
        Ok(Ensemble {
            fusion,
            kvmn,
            attn,
            gate,
            hidden: d,
        })
    }

    pub fn types(&self) -> Vec<SyntaxType> {
        self.kvmn.iter().map(|k| k.ty).collect()
    }

    /// Width of the fused output fed to the projection.
    pub fn output_dim(&self) -> usize {
        let d = self.hidden;
        match self.fusion {
            Fusion::None => d,
            Fusion::Dc => d * (1 + self.kvmn.len()),
            Fusion::Sa => 2 * d,
        }
    }

    /// `memories[c]` belongs to the `c`-th active type.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamRegistry,
        h: Var,
        memories: &[&IdMemory],
    ) -> Result<EnsembleOutput> {
        if memories.len() != self.kvmn.len() {
            return Err(Error::Config(format!(
                "{} memories for {} syntax types",
                memories.len(),
                self.kvmn.len()
            )));
        }
        let mut p = Vec::new();
        let mut summaries = Vec::new();
        for (kp, mem) in self.kvmn.iter().zip(memories) {
            let out = kvmn_forward(g, params, h, mem, kp)?;
            p.push((kp.ty, out.p));
            summaries.push(out.s);
        }
        let (o, a, r) = match self.fusion {
            Fusion::None => (h, None, None),
            Fusion::Dc => {
                let s = direct_concat(g, &summaries)?;
                (g.concat(&[h, s])?, None, None)
            }
            Fusion::Sa => {
                let (s, a) = syntax_attention(g, params, h, &summaries, &self.attn)?;
                match &self.gate {
                    Some(gp) => {
                        let (o, r) = gate_fuse(g, params, h, s, gp)?;
                        (o, Some(a), Some(r))
                    }
                    None => (g.concat(&[h, s])?, Some(a), None),
                }
            }
        };
        Ok(EnsembleOutput { o, p, a, r })
    }
}
