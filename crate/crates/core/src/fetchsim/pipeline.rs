use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer decode and compute times of a layer-wise fetch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCheck {
    pub t_decode: Vec<f64>,
    pub t_comp: Vec<f64>,
    /// Layers already resident before compute starts.
    pub l_buf: usize,
}

impl PipelineCheck {
    pub fn new(t_decode: Vec<f64>, t_comp: Vec<f64>, l_buf: usize) -> Result<Self> {
        if t_decode.len() != t_comp.len() {
            return Err(Error::invalid("decode and compute lists differ in length"));
        }
        if l_buf > t_decode.len() {
            return Err(Error::invalid("buffered layers exceed the layer count"));
        }
        if t_decode.iter().chain(&t_comp).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("layer times must be finite and non-negative"));
        }
        Ok(PipelineCheck { t_decode, t_comp, l_buf })
    }

    pub fn l_total(&self) -> usize {
        self.t_decode.len()
    }
}

/// Whether every unbuffered layer `k` is decoded before layer `k - 1` finishes
/// computing: `sum(t_decode[..k]) <= sum(t_comp[..k-1])` for `k` in `l_buf+1..=L`.
pub fn check_nonblocking(pc: &PipelineCheck) -> bool {
    let mut dec = 0.0;
    let mut comp = 0.0;
    for k in 1..=pc.l_total() {
        dec += pc.t_decode[k - 1];
        if k > pc.l_buf && dec > comp {
            return false;
        }
        comp += pc.t_comp[k - 1];
    }
    true
}
