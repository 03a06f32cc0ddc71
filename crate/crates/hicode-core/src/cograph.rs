//! Per-level code co-occurrence graphs and their normalized propagation
//! matrices.
//!
//! Edge weights follow the row-normalized co-count rule: `e(i,j)` is the
//! number of records whose level-t label set contains both codes, divided by
//! the total co-count of code i. The propagation matrix adds self-loops and
//! applies symmetric degree normalization; because the raw weight matrix is
//! asymmetric, it is symmetrized first (averaging by default).

use crate::hierarchy::{CodeId, Hierarchy};
use crate::corpus::Record;
use crate::parallel;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// How to symmetrize the row-normalized weight matrix before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymMode {
    /// `A = (E + Eᵀ) / 2`
    #[default]
    Avg,
    /// `A[i][j] = max(E[i][j], E[j][i])`
    Max,
    /// Use `E` as-is; the propagation matrix is then not symmetric.
    None,
}

impl std::str::FromStr for SymMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<SymMode> {
        match s {
            "avg" => Ok(SymMode::Avg),
            "max" => Ok(SymMode::Max),
            "none" => Ok(SymMode::None),
            other => Err(Error::Config(format!("unknown symmetrization mode {other:?}"))),
        }
    }
}

/// Co-occurrence graph of one hierarchy level.
#[derive(Debug, Clone)]
pub struct CoGraph {
    pub level: usize,
    /// Node order; matches the hierarchy's level order.
    pub codes: Vec<CodeId>,
    /// Row-normalized directed weights `e(i,j)`, zero diagonal.
    pub weights: Vec<f64>,
    /// Symmetrized adjacency.
    pub adjacency: Vec<f64>,
    /// `D̃^{-1/2} (A+I) D̃^{-1/2}`.
    pub propagation: Vec<f64>,
}

impl CoGraph {
    pub fn node_count(&self) -> usize {
        self.codes.len()
    }

    /// TSV rows `level<TAB>code_i<TAB>code_j<TAB>e_ij` for nonzero weights.
    pub fn export_tsv(&self) -> String {
        let k = self.codes.len();
        let mut out = String::new();
        for i in 0..k {
            for j in 0..k {
                let w = self.weights[i * k + j];
                if w != 0.0 {
                    out.push_str(&format!(
                        "{}\t{}\t{}\t{}\n",
                        self.level, self.codes[i], self.codes[j], w
                    ));
                }
            }
        }
        out
    }

    /// Rebuild from exported rows plus the owning hierarchy level.
    pub fn from_tsv(text: &str, h: &Hierarchy, level: usize, sym: SymMode) -> Result<CoGraph> {
        let codes = h.level(level).to_vec();
        let index: BTreeMap<&CodeId, usize> = codes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let k = codes.len();
        let mut weights = vec![0.0; k * k];
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("cograph line {}: want 4 fields", lineno + 1)));
            }
            let row_level: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("cograph line {}: bad level", lineno + 1)))?;
            if row_level != level {
                continue;
            }
            let ci = crate::hierarchy::normalize_code(fields[1], None)?;
            let cj = crate::hierarchy::normalize_code(fields[2], None)?;
            let w: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Parse(format!("cograph line {}: bad weight", lineno + 1)))?;
            let (i, j) = match (index.get(&ci), index.get(&cj)) {
                (Some(&i), Some(&j)) => (i, j),
                _ => {
                    return Err(Error::Parse(format!(
                        "cograph line {}: code not in hierarchy level {level}",
                        lineno + 1
                    )))
                }
            };
            weights[i * k + j] = w;
        }
        finish_graph(level, codes, weights, sym)
    }
}

/// Count level-t label pairs over the corpus and assemble the graph.
pub fn build_cograph(
    records: &[Record],
    h: &Hierarchy,
    level: usize,
    sym: SymMode,
) -> Result<CoGraph> {
    build_cograph_impl(records, h, level, sym, false)
}

/// Sequential twin of [`build_cograph`] (bench baseline).
pub fn build_cograph_seq(
    records: &[Record],
    h: &Hierarchy,
    level: usize,
    sym: SymMode,
) -> Result<CoGraph> {
    build_cograph_impl(records, h, level, sym, true)
}

fn build_cograph_impl(
    records: &[Record],
    h: &Hierarchy,
    level: usize,
    sym: SymMode,
    force_seq: bool,
) -> Result<CoGraph> {
    if level == 0 || level > h.depth() {
        return Err(Error::Config(format!(
            "co-graph level {level} out of range 1..={}",
            h.depth()
        )));
    }
    if records.is_empty() {
        return Err(Error::Ingestion("co-graph needs a nonempty corpus".into()));
    }
    let codes = h.level(level).to_vec();
    let index: BTreeMap<&CodeId, usize> = codes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let k = codes.len();

    // Per-record level-t index sets, then an ordered sequential reduce.
    let per_record = |r: &Record| -> Result<Vec<usize>> {
        let expanded = h.expand_labels(&r.gold)?;
        Ok(expanded[level - 1].iter().map(|c| index[c]).collect())
    };
    let sets: Vec<Result<Vec<usize>>> = if force_seq {
        parallel::ordered_map_seq(records, per_record)
    } else {
        parallel::ordered_map(records, per_record)
    };

    let mut counts = vec![0u64; k * k];
    for set in sets {
        let set = set?;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                counts[i * k + j] += 1;
                counts[j * k + i] += 1;
            }
        }
    }

    let mut weights = vec![0.0; k * k];
    for i in 0..k {
        let total: u64 = counts[i * k..(i + 1) * k].iter().sum();
        if total > 0 {
            for j in 0..k {
                weights[i * k + j] = counts[i * k + j] as f64 / total as f64;
            }
        }
    }
    finish_graph(level, codes, weights, sym)
}

fn finish_graph(level: usize, codes: Vec<CodeId>, weights: Vec<f64>, sym: SymMode) -> Result<CoGraph> {
    let k = codes.len();
    let mut adjacency = vec![0.0; k * k];
    match sym {
        SymMode::Avg => {
            for i in 0..k {
                for j in 0..k {
                    adjacency[i * k + j] = (weights[i * k + j] + weights[j * k + i]) / 2.0;
                }
            }
        }
        SymMode::Max => {
            for i in 0..k {
                for j in 0..k {
                    adjacency[i * k + j] = weights[i * k + j].max(weights[j * k + i]);
                }
            }
        }
        SymMode::None => adjacency.copy_from_slice(&weights),
    }
    let propagation = match sym {
        SymMode::None => normalize_unchecked(&adjacency, k),
        _ => normalize(&adjacency, k)?,
    };
    Ok(CoGraph { level, codes, weights, adjacency, propagation })
}

/// `P = D̃^{-1/2} (A + I) D̃^{-1/2}` for a symmetric nonnegative adjacency.
pub fn normalize(a: &[f64], k: usize) -> Result<Vec<f64>> {
    if a.len() != k * k {
        return Err(Error::Dimension(format!("adjacency length {} != {k}²", a.len())));
    }
    for i in 0..k {
        for j in (i + 1)..k {
            if (a[i * k + j] - a[j * k + i]).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "adjacency is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    if a.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("adjacency has negative entries".into()));
    }
    Ok(normalize_unchecked(a, k))
}

fn normalize_unchecked(a: &[f64], k: usize) -> Vec<f64> {
    // Ã = A + I; D̃_ii = Σ_j Ã_ij; P = D̃^{-1/2} Ã D̃^{-1/2}.
    let mut tilde = a.to_vec();
    for i in 0..k {
        tilde[i * k + i] += 1.0;
    }
    let deg_inv_sqrt: Vec<f64> = (0..k)
        .map(|i| {
            let d: f64 = tilde[i * k..(i + 1) * k].iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    let mut p = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            p[i * k + j] = deg_inv_sqrt[i] * tilde[i * k + j] * deg_inv_sqrt[j];
        }
    }
    p
}
