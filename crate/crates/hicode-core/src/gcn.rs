//! Graph convolution over the co-occurrence propagation matrix.

use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GcnConfig {
    /// Hidden layers; every layer reuses the same propagation matrix.
    pub layers: usize,
    /// Hidden width.
    pub d_g: usize,
}

impl GcnConfig {
    pub fn standard() -> Self {
        GcnConfig { layers: 1, d_g: 300 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_g == 0 {
            return Err(Error::Config("GCN hidden size must be positive".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!("GCN layers must be 1..=3, got {}", self.layers)));
        }
        Ok(())
    }
}

/// `H ← relu(P · H · W + b)` per layer; the last layer's output represents
/// the codes.
pub fn forward(
    tape: &mut Tape,
    prop: NodeId,
    h0: NodeId,
    weights: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    let (pk, pk2) = tape.shape(prop);
    let hk = tape.shape(h0).0;
    if pk != pk2 || pk != hk {
        return Err(Error::Dimension(format!(
            "propagation {pk}×{pk2} does not match {hk} feature rows"
        )));
    }
    let mut h = h0;
    for &(w, b) in weights {
        let ph = tape.matmul(prop, h)?;
        let phw = tape.matmul(ph, w)?;
        let biased = tape.add_row_broadcast(phw, b)?;
        h = tape.relu(biased);
    }
    Ok(h)
}
