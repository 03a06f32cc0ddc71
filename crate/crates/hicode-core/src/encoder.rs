//! Document encoding: embedding lookup, code-ontology embeddings, multi-filter
//! convolution with parallel residual blocks, and column concatenation.

use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

/// Sizes of the document encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Word-vector width.
    pub d_e: usize,
    /// One convolution per kernel width; all widths must be odd.
    pub kernel_widths: Vec<usize>,
    /// Convolution feature width.
    pub d_c: usize,
    /// Residual-block output width.
    pub d_r: usize,
}

impl EncoderConfig {
    /// The full-scale configuration.
    pub fn standard() -> Self {
        EncoderConfig { d_e: 100, kernel_widths: vec![3, 5, 9, 15, 19, 25], d_c: 100, d_r: 50 }
    }

    /// Concatenated output width: one `d_r` block per filter.
    pub fn d_res(&self) -> usize {
        self.kernel_widths.len() * self.d_r
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_widths.is_empty() {
            return Err(Error::Config("encoder needs at least one kernel".into()));
        }
        if let Some(&w) = self.kernel_widths.iter().find(|&&w| w % 2 == 0) {
            return Err(Error::Config(format!("kernel widths must be odd, got {w}")));
        }
        if self.d_e == 0 || self.d_c == 0 || self.d_r == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Tape handles for one filter's convolution and residual block.
#[derive(Debug, Clone, Copy)]
pub struct FilterNodes {
    pub width: usize,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub res_w1: NodeId,
    pub res_b1: NodeId,
    pub res_w2: NodeId,
    pub res_b2: NodeId,
    pub res_w3: NodeId,
    pub res_b3: NodeId,
}

/// Look up embedding rows for a token sequence: `n×d_e`.
pub fn embed_document(tape: &mut Tape, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
    tape.embed_rows(table, tokens)
}

/// Mean descriptor embedding per code: `|L^t|×d_e`. Recomputed on the tape so
/// gradients reach the embedding matrix.
pub fn ontology_embed(
    tape: &mut Tape,
    table: NodeId,
    descriptor_tokens: &[Vec<usize>],
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(descriptor_tokens.len());
    for (i, toks) in descriptor_tokens.iter().enumerate() {
        if toks.is_empty() {
            return Err(Error::Config(format!("code {i}: empty descriptor after fallback")));
        }
        let gathered = tape.embed_rows(table, toks)?;
        rows.push(tape.mean_rows(gathered));
    }
    tape.concat_rows(&rows)
}

/// Zero out padded rows so stacked convolutions see the same zero padding an
/// unpadded run would. A no-op (no node inserted) when every row is valid.
fn zero_padded_rows(tape: &mut Tape, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    if mask.iter().all(|&v| v) {
        return Ok(x);
    }
    let (n, d) = tape.shape(x);
    if mask.len() != n {
        return Err(Error::Dimension(format!("mask length {} vs {n} rows", mask.len())));
    }
    let mut data = vec![0.0; n * d];
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            data[i * d..(i + 1) * d].fill(1.0);
        }
    }
    let m = tape.constant(n, d, data);
    tape.mul(x, m)
}

/// One multi-filter convolution: `tanh(conv(x) + bias)`.
pub fn conv_filter(tape: &mut Tape, x: NodeId, f: &FilterNodes, mask: &[bool]) -> Result<NodeId> {
    let c = tape.conv1d_same(x, f.conv_w, f.width)?;
    let cb = tape.add_row_broadcast(c, f.conv_b)?;
    let out = tape.tanh(cb);
    // This output feeds further convolutions; keep its pad rows zero.
    zero_padded_rows(tape, out, mask)
}

/// The residual block: a two-conv main branch and a 1×1 shortcut, activation
/// only on the first conv and on the sum.
pub fn residual_block(tape: &mut Tape, xk: NodeId, f: &FilterNodes, mask: &[bool]) -> Result<NodeId> {
    let c1 = tape.conv1d_same(xk, f.res_w1, f.width)?;
    let c1b = tape.add_row_broadcast(c1, f.res_b1)?;
    let x1 = tape.tanh(c1b);
    let x1 = zero_padded_rows(tape, x1, mask)?;

    let c2 = tape.conv1d_same(x1, f.res_w2, f.width)?;
    let x2 = tape.add_row_broadcast(c2, f.res_b2)?;

    let c3 = tape.conv1d_same(xk, f.res_w3, 1)?;
    let x3 = tape.add_row_broadcast(c3, f.res_b3)?;

    // Pad rows of the sum are never read across positions: attention masks
    // them out downstream, so no further zeroing is needed here.
    let s = tape.add(x2, x3)?;
    Ok(tape.tanh(s))
}

/// Full feature extraction: every filter's conv + residual block, blocks
/// concatenated by columns in filter order → `n×d_res`.
pub fn encode(tape: &mut Tape, x: NodeId, filters: &[FilterNodes], mask: &[bool]) -> Result<NodeId> {
    let mut blocks = Vec::with_capacity(filters.len());
    for f in filters {
        let xk = conv_filter(tape, x, f, mask)?;
        blocks.push(residual_block(tape, xk, f, mask)?);
    }
    tape.concat_cols(&blocks)
}
