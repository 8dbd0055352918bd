//! Pre-activation transformer encoder stack.
//!
//! The same stack runs over two axes: across the features of one time step
//! (masked pretraining, no positional embeddings, dense attention) and
//! across the time steps of one stay (downstream prediction, learned
//! positional embeddings, causal attention).
//!
//! Per block: `x + Attn(LN(x))` then `x + FFN(LN(x))`, with no final
//! layer norm. Attention is scaled dot-product over `heads` slices of the
//! embedding dimension; the FFN is `GELU(x W1) W2` with width
//! `ffn_mult * m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform_init, Binding, ParamStore};
use crate::tensor::{MaskKind, NodeId, Tape, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_seq: usize,
}

impl EncoderConfig {
    pub fn new(depth: usize, heads: usize, dim: usize, max_seq: usize) -> Self {
        EncoderConfig {
            depth,
            heads,
            dim,
            ffn_mult: 4,
            dropout: 0.0,
            max_seq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config(format!("depth {} must be >= 1", self.depth)));
        }
        if self.heads < 1 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim < 2 || self.ffn_mult < 1 || self.max_seq < 1 {
            return Err(Error::Config(format!(
                "bad encoder dims: dim {}, ffn_mult {}, max_seq {}",
                self.dim, self.ffn_mult, self.max_seq
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(format!(
                "dropout {} not supported; regularization is early stopping",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Graph node ids for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_shift: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_shift: NodeId,
}

/// Graph node ids for a full encoder.
#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub layers: Vec<LayerIds>,
    pub pos: Option<NodeId>,
}

/// Encoder parameters living inside a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub prefix: String,
    pub config: EncoderConfig,
    pub positions: bool,
}

const LAYER_FIELDS: [&str; 10] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2", "ln1.gain", "ln1.shift",
    "ln2.gain", "ln2.shift",
];

impl Encoder {
    fn name(prefix: &str, layer: usize, field: &str) -> String {
        format!("{prefix}l{layer}.{field}")
    }

    fn pos_name(prefix: &str) -> String {
        format!("{prefix}pos")
    }

    /// Create encoder parameters in `store`. Projections are uniform on
    /// `(-1/sqrt(fan_in), +1/sqrt(fan_in))`, layer norms start at identity,
    /// and the positional table (when `positions`) matches the projection
    /// scale.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        positions: bool,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let m = config.dim;
        let hidden = config.ffn_mult * m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mb = 1.0 / (m as f64).sqrt();
        let hb = 1.0 / (hidden as f64).sqrt();
        for l in 0..config.depth {
            for field in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                store.add(&Self::name(prefix, l, field), uniform_init(vec![m, m], mb, &mut rng))?;
            }
            store.add(
                &Self::name(prefix, l, "ffn.w1"),
                uniform_init(vec![m, hidden], mb, &mut rng),
            )?;
            store.add(
                &Self::name(prefix, l, "ffn.w2"),
                uniform_init(vec![hidden, m], hb, &mut rng),
            )?;
            for field in ["ln1.gain", "ln2.gain"] {
                store.add(
                    &Self::name(prefix, l, field),
                    Tensor::from_vec(vec![m], vec![1.0; m])?,
                )?;
            }
            for field in ["ln1.shift", "ln2.shift"] {
                store.add(&Self::name(prefix, l, field), Tensor::zeros(vec![m]))?;
            }
        }
        if positions {
            store.add(
                &Self::pos_name(prefix),
                uniform_init(vec![config.max_seq, m], mb, &mut rng),
            )?;
        }
        Ok(Encoder {
            prefix: prefix.to_string(),
            config,
            positions,
        })
    }

    /// Rebuild the handle over parameters already present in `store`,
    /// verifying every expected tensor exists with the right shape.
    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        config: EncoderConfig,
        positions: bool,
    ) -> Result<Self> {
        config.validate()?;
        let m = config.dim;
        let hidden = config.ffn_mult * m;
        for l in 0..config.depth {
            for field in LAYER_FIELDS {
                let expect: &[usize] = match field {
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => &[m, m],
                    "ffn.w1" => &[m, hidden],
                    "ffn.w2" => &[hidden, m],
                    _ => &[m],
                };
                let t = store.get(&Self::name(prefix, l, field))?;
                if t.shape() != expect {
                    return Err(Error::Shape(format!(
                        "{} has shape {:?}, expected {:?}",
                        Self::name(prefix, l, field),
                        t.shape(),
                        expect
                    )));
                }
            }
        }
        if positions {
            let t = store.get(&Self::pos_name(prefix))?;
            if t.shape() != [config.max_seq, m] {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected [{}, {}]",
                    Self::pos_name(prefix),
                    t.shape(),
                    config.max_seq,
                    m
                )));
            }
        }
        Ok(Encoder {
            prefix: prefix.to_string(),
            config,
            positions,
        })
    }

    /// Resolve all parameter node ids through a binding.
    pub fn ids(&self, store: &ParamStore, binding: &Binding) -> EncoderIds {
        let layers = (0..self.config.depth)
            .map(|l| LayerIds {
                wq: binding.id(store, &Self::name(&self.prefix, l, "attn.wq")),
                wk: binding.id(store, &Self::name(&self.prefix, l, "attn.wk")),
                wv: binding.id(store, &Self::name(&self.prefix, l, "attn.wv")),
                wo: binding.id(store, &Self::name(&self.prefix, l, "attn.wo")),
                w1: binding.id(store, &Self::name(&self.prefix, l, "ffn.w1")),
                w2: binding.id(store, &Self::name(&self.prefix, l, "ffn.w2")),
                ln1_gain: binding.id(store, &Self::name(&self.prefix, l, "ln1.gain")),
                ln1_shift: binding.id(store, &Self::name(&self.prefix, l, "ln1.shift")),
                ln2_gain: binding.id(store, &Self::name(&self.prefix, l, "ln2.gain")),
                ln2_shift: binding.id(store, &Self::name(&self.prefix, l, "ln2.shift")),
            })
            .collect();
        let pos = self
            .positions
            .then(|| binding.id(store, &Self::pos_name(&self.prefix)));
        EncoderIds { layers, pos }
    }

    /// Encode one sequence of shape `[L, m]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        x: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let rows = tape.value(x).rows_cols().0;
        let ids = self.ids(store, binding);
        encode_graph(tape, &ids, &self.config, x, &[rows], causal)
    }

    /// Encode several independent sequences stacked along axis 0. Linear
    /// layers run on the stacked matrix; attention never crosses segment
    /// boundaries.
    pub fn encode_segments(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        x: NodeId,
        seg_lens: &[usize],
        causal: bool,
    ) -> Result<NodeId> {
        let ids = self.ids(store, binding);
        encode_graph(tape, &ids, &self.config, x, seg_lens, causal)
    }

    /// Add learned position vectors to rows `0..L` of one sequence.
    pub fn add_positions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let rows = tape.value(x).rows_cols().0;
        self.add_positions_segments(tape, store, binding, x, &[rows])
    }

    /// Positional add for stacked segments: each segment restarts at
    /// position 0.
    pub fn add_positions_segments(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        x: NodeId,
        seg_lens: &[usize],
    ) -> Result<NodeId> {
        if !self.positions {
            return Err(Error::Contract(format!(
                "encoder '{}' has no positional table",
                self.prefix
            )));
        }
        let pos = binding.id(store, &Self::pos_name(&self.prefix));
        let mut parts = Vec::with_capacity(seg_lens.len());
        for &len in seg_lens {
            if len > self.config.max_seq {
                return Err(Error::Config(format!(
                    "sequence length {len} exceeds max_seq {}",
                    self.config.max_seq
                )));
            }
            parts.push(if len == self.config.max_seq {
                pos
            } else {
                tape.slice(pos, 0, 0, len)?
            });
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        };
        tape.add(x, stacked)
    }
}

/// Scaled dot-product attention over one segment, all heads.
fn attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let m = tape.value(q).rows_cols().1;
    let hd = m / heads;
    let mask = if causal { MaskKind::Causal } else { MaskKind::Dense };
    let inv = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * hd, hd)?,
                tape.slice(k, 1, h * hd, hd)?,
                tape.slice(v, 1, h * hd, hd)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, inv)?;
        let weights = tape.softmax(scaled, mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Build the full encoder graph over stacked segments.
pub fn encode_graph(
    tape: &mut Tape,
    ids: &EncoderIds,
    config: &EncoderConfig,
    x: NodeId,
    seg_lens: &[usize],
    causal: bool,
) -> Result<NodeId> {
    let (rows, cols) = tape.value(x).rows_cols();
    if cols != config.dim {
        return Err(Error::Shape(format!(
            "input width {cols} does not match encoder dim {}",
            config.dim
        )));
    }
    if seg_lens.is_empty() || seg_lens.iter().any(|&l| l == 0) {
        return Err(Error::Shape("empty segment".into()));
    }
    if seg_lens.iter().sum::<usize>() != rows {
        return Err(Error::Shape(format!(
            "segment lengths sum to {}, input has {rows} rows",
            seg_lens.iter().sum::<usize>()
        )));
    }
    for &len in seg_lens {
        if len > config.max_seq {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds max_seq {}",
                config.max_seq
            )));
        }
    }
    let mut h = x;
    for layer in &ids.layers {
        let n1 = tape.layer_norm(h, layer.ln1_gain, layer.ln1_shift, LN_EPS)?;
        let q = tape.matmul(n1, layer.wq)?;
        let k = tape.matmul(n1, layer.wk)?;
        let v = tape.matmul(n1, layer.wv)?;
        let mut outs = Vec::with_capacity(seg_lens.len());
        let mut off = 0;
        for &len in seg_lens {
            let (qs, ks, vs) = if seg_lens.len() == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 0, off, len)?,
                    tape.slice(k, 0, off, len)?,
                    tape.slice(v, 0, off, len)?,
                )
            };
            outs.push(attention(tape, qs, ks, vs, config.heads, causal)?);
            off += len;
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 0)?
        };
        let proj = tape.matmul(cat, layer.wo)?;
        h = tape.add(h, proj)?;
        let n2 = tape.layer_norm(h, layer.ln2_gain, layer.ln2_shift, LN_EPS)?;
        let f1 = tape.matmul(n2, layer.w1)?;
        let act = tape.gelu(f1)?;
        let f2 = tape.matmul(act, layer.w2)?;
        h = tape.add(h, f2)?;
    }
    Ok(h)
}
