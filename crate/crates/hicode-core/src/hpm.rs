//! Hierarchical prediction: per level a Multi Attention Unit (ontology-guided
//! plus code-specific attention), a Code Predicting Unit (shared linear +
//! sigmoid over the dependency-augmented summary), and a Dependency Passing
//! Unit (gate carrying the level's predictions down to the next level).

use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

/// Tape handles for one level's parameters. The ontology-attention projection
/// takes `d_q` rows (the code-representation width: GCN output, or raw
/// ontology embedding width when the GCN is bypassed). Levels other than the
/// last carry a dependency gate.
#[derive(Debug, Clone, Copy)]
pub struct LevelNodes {
    /// `d_q×d_res` projection feeding the ontology-guided attention.
    pub attn_onto_w: NodeId,
    /// `d_q×1` column bias.
    pub attn_onto_b: NodeId,
    /// `d_a×d_res` projection feeding the code-specific attention.
    pub attn_code_w: NodeId,
    /// `d_a×1` column bias.
    pub attn_code_b: NodeId,
    /// `|L^t|×d_a` learned per-code query rows.
    pub attn_query: NodeId,
    /// `(d_dep+2·d_res)×1` shared scorer.
    pub cls_w: NodeId,
    /// `1×1` scorer bias.
    pub cls_b: NodeId,
    /// `((|L^t|+d_dep)×d_dep, 1×d_dep)` gate weights, absent at the last level.
    pub dpu: Option<(NodeId, NodeId)>,
}

/// One level's forward outputs.
#[derive(Debug, Clone)]
pub struct LevelForward {
    /// `|L^t|×1` probabilities, strictly inside (0,1).
    pub probs: NodeId,
    /// Dependency vector `1×d_dep` passed to the next level.
    pub dep: NodeId,
    /// Ontology-guided attention rows (diagnostics copy), `|L^t|×n`.
    pub att_onto: Vec<f64>,
    /// Code-specific attention rows (diagnostics copy), `|L^t|×n`.
    pub att_code: Vec<f64>,
}

/// Dual attention over the encoded document.
///
/// Returns the per-code summary `R^t: |L^t|×2d_res` plus both attention
/// matrices. `mask` marks valid (non-padded) positions; padded columns get
/// exactly zero attention mass.
pub fn mau_forward(
    tape: &mut Tape,
    xres: NodeId,
    xres_t: NodeId,
    codes_rep: NodeId,
    lvl: &LevelNodes,
    mask: &[bool],
) -> Result<(NodeId, NodeId, NodeId)> {
    let d_q = tape.shape(lvl.attn_onto_w).0;
    if tape.shape(codes_rep).1 != d_q {
        return Err(Error::Config(format!(
            "code representation width {} does not match attention projection {d_q}",
            tape.shape(codes_rep).1
        )));
    }
    // Ontology-guided path.
    let proj = tape.matmul(lvl.attn_onto_w, xres_t)?;
    let proj_b = tape.add_col_broadcast(proj, lvl.attn_onto_b)?;
    let o1 = tape.tanh(proj_b);
    let logits1 = tape.matmul(codes_rep, o1)?;
    let att_onto = tape.softmax_rows_masked(logits1, mask)?;
    let x_onto = tape.matmul(att_onto, xres)?;

    // Code-specific path.
    let proj2 = tape.matmul(lvl.attn_code_w, xres_t)?;
    let proj2_b = tape.add_col_broadcast(proj2, lvl.attn_code_b)?;
    let o2 = tape.tanh(proj2_b);
    let logits2 = tape.matmul(lvl.attn_query, o2)?;
    let att_code = tape.softmax_rows_masked(logits2, mask)?;
    let x_code = tape.matmul(att_code, xres)?;

    let r = tape.concat_cols(&[x_onto, x_code])?;
    Ok((r, att_onto, att_code))
}

/// Score every code: `sigmoid([broadcast(c_prev) ‖ R^t] · W_y + b)`.
///
/// The scorer weights are shared across the level's codes; discrimination
/// comes entirely from the per-code rows of `R^t`.
pub fn cpu_forward(
    tape: &mut Tape,
    r: NodeId,
    c_prev: NodeId,
    cls_w: NodeId,
    cls_b: NodeId,
) -> Result<NodeId> {
    let rows = tape.shape(r).0;
    let c_b = tape.broadcast_rows(c_prev, rows)?;
    let x_cls = tape.concat_cols(&[c_b, r])?;
    let logits = tape.matmul(x_cls, cls_w)?;
    let biased = tape.add_row_broadcast(logits, cls_b)?;
    Ok(tape.sigmoid(biased))
}

/// Gate the level's predictions into the next level's dependency vector:
/// `c^t = sigmoid([Ỹᵀ ‖ c^{t−1}] · W + b)`.
pub fn dpu_forward(
    tape: &mut Tape,
    probs: NodeId,
    c_prev: NodeId,
    dpu_w: NodeId,
    dpu_b: NodeId,
) -> Result<NodeId> {
    let y_t = tape.transpose(probs);
    let z = tape.concat_cols(&[y_t, c_prev])?;
    let gated = tape.matmul(z, dpu_w)?;
    let biased = tape.add_row_broadcast(gated, dpu_b)?;
    Ok(tape.sigmoid(biased))
}

/// Per-level override of the dependency chain (intervention testing).
#[derive(Debug, Clone, Default)]
pub struct DepOverride {
    /// When set, level t's outgoing dependency is replaced by this constant.
    pub forced: Vec<Option<Vec<f64>>>,
}

/// Run the full level chain in order, threading the dependency vector.
///
/// `code_reps[t-1]` is the level's code representation; `dep_width` is the
/// dependency vector width (the initial dependency is a zero vector of that
/// width). With `use_dpu` false every level sees a zero dependency, which
/// makes the levels independent.
#[allow(clippy::too_many_arguments)]
pub fn hpl_forward(
    tape: &mut Tape,
    xres: NodeId,
    code_reps: &[NodeId],
    levels: &[LevelNodes],
    mask: &[bool],
    dep_width: usize,
    use_dpu: bool,
    overrides: Option<&DepOverride>,
) -> Result<Vec<LevelForward>> {
    if code_reps.len() != levels.len() {
        return Err(Error::Config(format!(
            "{} code representations for {} levels",
            code_reps.len(),
            levels.len()
        )));
    }
    let xres_t = tape.transpose(xres);
    let mut c_prev = tape.zeros_const(1, dep_width);
    let mut out = Vec::with_capacity(levels.len());
    for (t0, (lvl, &rep)) in levels.iter().zip(code_reps).enumerate() {
        let (r, att_onto, att_code) = mau_forward(tape, xres, xres_t, rep, lvl, mask)?;
        let probs = cpu_forward(tape, r, c_prev, lvl.cls_w, lvl.cls_b)?;

        let forced = overrides.and_then(|o| o.forced.get(t0)).and_then(|f| f.clone());
        let dep = if let Some(values) = forced {
            if values.len() != dep_width {
                return Err(Error::Config(format!(
                    "dependency override at level {} has width {}, want {dep_width}",
                    t0 + 1,
                    values.len()
                )));
            }
            tape.constant(1, dep_width, values)
        } else if use_dpu {
            match lvl.dpu {
                Some((w, b)) => dpu_forward(tape, probs, c_prev, w, b)?,
                None => tape.zeros_const(1, dep_width),
            }
        } else {
            tape.zeros_const(1, dep_width)
        };

        out.push(LevelForward {
            probs,
            dep,
            att_onto: tape.value(att_onto).to_vec(),
            att_code: tape.value(att_code).to_vec(),
        });
        c_prev = dep;
    }
    Ok(out)
}

/// Joint loss: binary cross-entropy summed over codes and levels.
pub fn loss_sum(tape: &mut Tape, levels: &[LevelForward], targets: &[Vec<f64>]) -> Result<NodeId> {
    if levels.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} level outputs vs {} target sets",
            levels.len(),
            targets.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (lvl, t) in levels.iter().zip(targets) {
        let l = tape.bce_sum(lvl.probs, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Contract("loss over zero levels".into()))
}
