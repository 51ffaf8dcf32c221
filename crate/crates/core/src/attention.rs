//! Self-attention with a learned relative position bias over a mixed sequence
//! of non-visual tokens (class, meta) followed by a square grid of vision tokens.
//!
//! Scores are `softmax(q·kᵀ/√d_h + B)·v`. For two vision tokens, `B` is looked
//! up from a per-head table indexed by their 2-D offset; every pair that
//! involves a non-visual token uses a single shared scalar per head, since
//! those tokens have no spatial position.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::shape_str;

pub const LN_EPS: f64 = 1e-5;

/// Number of entries in the relative offset table of an `m × m` grid.
pub fn relative_table_len(m: usize) -> usize {
    (2 * m - 1) * (2 * m - 1)
}

/// Row-major `m² × m²` matrix whose entry `(i, j)` is the table slot for the
/// offset between grid cells `i` and `j`.
pub fn build_relative_index(m: usize) -> Vec<usize> {
    assert!(m >= 1, "grid side must be positive");
    let n = m * m;
    let side = 2 * m - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / m, i % m);
        for j in 0..n {
            let (rj, cj) = (j / m, j % m);
            let dr = ri + m - 1 - rj;
            let dc = ci + m - 1 - cj;
            out.push(dr * side + dc);
        }
    }
    out
}

/// Order and counts of the tokens in a sequence: class tokens, then meta
/// tokens, then `grid²` vision tokens in row-major grid order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_class: usize,
    pub n_meta: usize,
    pub grid: usize,
}

impl TokenLayout {
    pub fn new(n_class: usize, n_meta: usize, grid: usize) -> Self {
        TokenLayout {
            n_class,
            n_meta,
            grid,
        }
    }

    /// Count of non-visual tokens.
    pub fn n_extra(&self) -> usize {
        self.n_class + self.n_meta
    }

    pub fn n_vision(&self) -> usize {
        self.grid * self.grid
    }

    pub fn len(&self) -> usize {
        self.n_extra() + self.n_vision()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn meta_start(&self) -> usize {
        self.n_class
    }

    pub fn vision_start(&self) -> usize {
        self.n_extra()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[layout.len() × d]`
    pub tokens: Var,
    pub layout: TokenLayout,
}

impl TokenSequence {
    pub fn new(tape: &Tape, tokens: Var, layout: TokenLayout) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[0] != layout.len() {
            return Err(Error::shape(
                "token_sequence",
                format!("tokens {} do not match layout {:?}", shape_str(s), layout),
            ));
        }
        Ok(TokenSequence { tokens, layout })
    }

    pub fn width(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[1]
    }
}

/// Learned relative position bias of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct RelPosBias {
    /// `[heads × (2M−1)²]`
    pub table: Var,
    /// `[heads]`, used for every pair involving a non-visual token.
    pub shared: Var,
    pub grid: usize,
    pub heads: usize,
}

impl RelPosBias {
    pub fn new(tape: &Tape, table: Var, shared: Var, grid: usize) -> Result<Self> {
        let heads = tape.shape(shared).first().copied().unwrap_or(0);
        if tape.shape(shared).len() != 1
            || tape.shape(table) != [heads, relative_table_len(grid)]
        {
            return Err(Error::shape(
                "relative_bias",
                format!(
                    "table {} / shared {} inconsistent with grid {grid}",
                    shape_str(tape.shape(table)),
                    shape_str(tape.shape(shared))
                ),
            ));
        }
        Ok(RelPosBias {
            table,
            shared,
            grid,
            heads,
        })
    }
}

/// Full per-head bias `[heads × T × T]` for `T = M² + n_extra` tokens laid out
/// as non-visual tokens first, then the grid.
pub fn assemble_bias(tape: &mut Tape, rpb: &RelPosBias, n_extra: usize) -> Result<Var> {
    let m = rpb.grid;
    let table_len = relative_table_len(m);
    let total = m * m + n_extra;
    let rel = build_relative_index(m);
    let flat_table = tape.reshape(rpb.table, &[rpb.heads * table_len])?;
    let source = tape.concat(&[flat_table, rpb.shared], 0)?;
    let shared_base = rpb.heads * table_len;
    let mut indices = Vec::with_capacity(rpb.heads * total * total);
    for h in 0..rpb.heads {
        for i in 0..total {
            for j in 0..total {
                let idx = if i >= n_extra && j >= n_extra {
                    let vi = i - n_extra;
                    let vj = j - n_extra;
                    h * table_len + rel[vi * m * m + vj]
                } else {
                    shared_base + h
                };
                indices.push(idx);
            }
        }
    }
    tape.gather(source, indices, &[rpb.heads, total, total])
}

/// `softmax(q·kᵀ/√d_h + bias)·v` for one head.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Var) -> Result<Var> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if sq.len() != 2 || sq != sk || sv.len() != 2 || sv[0] != sq[0] {
        return Err(Error::shape(
            "attention",
            format!(
                "q {}, k {}, v {} must share token count and head width",
                shape_str(&sq),
                shape_str(&sk),
                shape_str(&sv)
            ),
        ));
    }
    if tape.shape(bias) != [sq[0], sq[0]] {
        return Err(Error::shape(
            "attention",
            format!(
                "bias {} does not match score matrix [{}×{}]",
                shape_str(tape.shape(bias)),
                sq[0],
                sq[0]
            ),
        ));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq[1] as f64).sqrt())?;
    let scores = tape.add(scores, bias)?;
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

/// Query/key/value/output projections of one attention layer. Weights are
/// `[d_in × d_out]` and multiply token rows from the right.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
    pub heads: usize,
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.bias_last(y, b)
}

pub fn multi_head_attention(
    tape: &mut Tape,
    z: &TokenSequence,
    w: &AttentionWeights,
    rpb: &RelPosBias,
) -> Result<Var> {
    let d = z.width(tape);
    if w.heads == 0 || d % w.heads != 0 {
        return Err(Error::Config(format!(
            "token width {d} is not divisible by {} heads",
            w.heads
        )));
    }
    if rpb.heads != w.heads || rpb.grid != z.layout.grid {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "bias has {} heads over a {}-grid, layout {:?} with {} heads",
                rpb.heads, rpb.grid, z.layout, w.heads
            ),
        ));
    }
    let total = z.layout.len();
    let dh = d / w.heads;
    let q = linear(tape, z.tokens, w.q)?;
    let k = linear(tape, z.tokens, w.k)?;
    let v = linear(tape, z.tokens, w.v)?;
    let bias = assemble_bias(tape, rpb, z.layout.n_extra())?;
    let bias = tape.reshape(bias, &[w.heads * total, total])?;
    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let bh = tape.narrow(bias, 0, h * total, total)?;
        heads.push(attention(tape, qh, kh, vh, bh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    linear(tape, merged, w.proj)
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: (Var, Var),
    pub attn: AttentionWeights,
    pub rpb: RelPosBias,
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl BlockParams {
    /// Binds the parameters stored under `prefix` (e.g. `s3.block0`).
    pub fn bind(
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        heads: usize,
        grid: usize,
    ) -> Result<Self> {
        let mut p = |suffix: &str| tape.param(store, &format!("{prefix}.{suffix}"));
        let norm1 = (p("norm1.gamma")?, p("norm1.beta")?);
        let q = (p("attn.q.weight")?, p("attn.q.bias")?);
        let k = (p("attn.k.weight")?, p("attn.k.bias")?);
        let v = (p("attn.v.weight")?, p("attn.v.bias")?);
        let proj = (p("attn.proj.weight")?, p("attn.proj.bias")?);
        let table = p("attn.rel_bias_table")?;
        let shared = p("attn.shared_bias")?;
        let norm2 = (p("norm2.gamma")?, p("norm2.beta")?);
        let fc1 = (p("mlp.fc1.weight")?, p("mlp.fc1.bias")?);
        let fc2 = (p("mlp.fc2.weight")?, p("mlp.fc2.bias")?);
        let rpb = RelPosBias::new(tape, table, shared, grid)?;
        if rpb.heads != heads {
            return Err(Error::Config(format!(
                "{prefix}: bias table has {} heads, expected {heads}",
                rpb.heads
            )));
        }
        Ok(BlockParams {
            norm1,
            attn: AttentionWeights {
                q,
                k,
                v,
                proj,
                heads,
            },
            rpb,
            norm2,
            fc1,
            fc2,
        })
    }

    /// Hidden width of the MLP.
    pub fn mlp_hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.fc1.0)[1]
    }
}

/// `z' = MSA(LN(z)) + z`, then `z'' = MLP(LN(z')) + z'`.
pub fn relative_transformer_block(
    tape: &mut Tape,
    z: &TokenSequence,
    p: &BlockParams,
) -> Result<TokenSequence> {
    let normed = tape.layer_norm(z.tokens, p.norm1.0, p.norm1.1, LN_EPS)?;
    let normed = TokenSequence {
        tokens: normed,
        layout: z.layout,
    };
    let attended = multi_head_attention(tape, &normed, &p.attn, &p.rpb)?;
    let mid = tape.add(attended, z.tokens)?;
    let normed = tape.layer_norm(mid, p.norm2.0, p.norm2.1, LN_EPS)?;
    let hidden = linear(tape, normed, p.fc1)?;
    let hidden = tape.gelu(hidden)?;
    let out = linear(tape, hidden, p.fc2)?;
    let out = tape.add(out, mid)?;
    TokenSequence::new(tape, out, z.layout)
}
