//! Additive quantization of a single layer.
//!
//! A weight tensor is cut into groups of `g` weights; each group is stored as
//! `M` byte-sized codes and reconstructed as the sum of the selected entries
//! of `M` codebooks with `2^n` rows each.

mod calib;
mod gram;
mod kmeans;
mod search;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{dim_err, Error, Result};
use crate::nn::LayerKind;
use crate::tensor::Tensor;

pub use calib::{
    beam_search_codes, calibrate_layer, calibrate_layer_warm, codebook_gradient,
    codebook_objective, init_codebooks, update_codebooks, CalibConfig,
};
pub use gram::{calib_objective, collect_grams, layer_objective, Gram};
pub use kmeans::{kmeans, nearest};
pub(crate) use search::{entry_norms, search_group, GroupMetric};

/// Index bits per code.
pub const N_BITS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each output row is cut into consecutive chunks; the last chunk of a row
    /// is zero padded.
    RowChunks,
    /// The flattened tensor is cut into consecutive chunks that may straddle
    /// filters; the last chunk of the tensor is zero padded.
    Flat,
}

/// Mapping between groups and weight coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub shape: Vec<usize>,
    pub g: usize,
    pub grouping: Grouping,
    pub n_groups: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], g: usize, grouping: Grouping) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || g == 0 {
            return dim_err(format!("cannot group shape {shape:?} with g={g}"));
        }
        let numel: usize = shape.iter().product();
        let n_groups = match grouping {
            Grouping::RowChunks => shape[0] * (numel / shape[0]).div_ceil(g),
            Grouping::Flat => numel.div_ceil(g),
        };
        Ok(Self {
            shape: shape.to_vec(),
            g,
            grouping,
            n_groups,
        })
    }

    /// Kernel-aware default: one group per 3x3 filter slice, else rows of 8.
    pub fn for_kind(kind: LayerKind, shape: &[usize]) -> Result<Self> {
        let g = if kind == LayerKind::Conv3x3 { 9 } else { 8 };
        Self::new(shape, g, Grouping::RowChunks)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Output rows of the `[rows, row_len]` matrix view.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn row_len(&self) -> usize {
        self.numel() / self.shape[0]
    }

    pub fn pad_slots(&self) -> usize {
        self.n_groups * self.g - self.numel()
    }

    /// Flat weight index of slot `s` of group `i`, or `None` for a pad slot.
    pub fn slot(&self, i: usize, s: usize) -> Option<usize> {
        match self.grouping {
            Grouping::RowChunks => {
                let d = self.row_len();
                let per_row = d.div_ceil(self.g);
                let col = (i % per_row) * self.g + s;
                (col < d).then(|| (i / per_row) * d + col)
            }
            Grouping::Flat => {
                let k = i * self.g + s;
                (k < self.numel()).then_some(k)
            }
        }
    }

    /// `[N, g]` matrix of groups, pad slots zero.
    pub fn gather(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != self.shape.as_slice() {
            return dim_err(format!("layout for {:?} given {:?}", self.shape, w.shape()));
        }
        let g = self.g;
        Ok(Tensor::from_fn(&[self.n_groups, g], |k| {
            self.slot(k / g, k % g).map_or(0.0, |f| w.data()[f])
        }))
    }

    /// Inverse of [`gather`](Self::gather); pad slots are dropped.
    pub fn scatter(&self, groups: &Tensor) -> Result<Tensor> {
        if groups.shape() != [self.n_groups, self.g] {
            return dim_err(format!(
                "scatter expects [{}, {}], got {:?}",
                self.n_groups,
                self.g,
                groups.shape()
            ));
        }
        let mut out = vec![0.0f32; self.numel()];
        for i in 0..self.n_groups {
            for s in 0..self.g {
                if let Some(f) = self.slot(i, s) {
                    out[f] = groups.data()[i * self.g + s];
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Kernel-aware grouping of a layer's weights.
pub fn group_weights(w: &Tensor, kind: LayerKind) -> Result<(GroupLayout, Tensor)> {
    let layout = GroupLayout::for_kind(kind, w.shape())?;
    let groups = layout.gather(w)?;
    Ok((layout, groups))
}

/// One additively quantized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub id: String,
    pub kind: LayerKind,
    pub layout: GroupLayout,
    pub n_bits: u32,
    /// `M` tensors of shape `[2^n, g]`.
    pub codebooks: Vec<Tensor>,
    /// Row-major `[N, M]`.
    pub codes: Vec<u8>,
    /// Calibration objective after initialisation and after each accepted round.
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerSidecar {
    layer_id: String,
    kind: LayerKind,
    g: usize,
    #[serde(rename = "M")]
    m: usize,
    n: u32,
    layout: GroupLayout,
    pad_spec: usize,
    objective_history: Vec<f64>,
}

impl QuantizedLayer {
    pub fn new(
        id: &str,
        kind: LayerKind,
        layout: GroupLayout,
        n_bits: u32,
        codebooks: Vec<Tensor>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        let q = Self {
            id: id.to_string(),
            kind,
            layout,
            n_bits,
            codebooks,
            codes,
            history: Vec::new(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bits == 0 || self.n_bits > 8 {
            return Err(Error::Validation(format!(
                "{} index bits unsupported",
                self.n_bits
            )));
        }
        if self.codebooks.is_empty() {
            return Err(Error::Validation("at least one codebook required".into()));
        }
        let k = self.k();
        for cb in &self.codebooks {
            if cb.shape() != [k, self.layout.g] {
                return dim_err(format!(
                    "codebook {:?}, expected [{k}, {}]",
                    cb.shape(),
                    self.layout.g
                ));
            }
            if !cb.all_finite() {
                return Err(Error::Validation("non-finite codebook entry".into()));
            }
        }
        if self.codes.len() != self.layout.n_groups * self.m() {
            return dim_err(format!(
                "{} codes for {} groups x {} codebooks",
                self.codes.len(),
                self.layout.n_groups,
                self.m()
            ));
        }
        if let Some(c) = self.codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Validation(format!(
                "code {c} out of range for {k} entries"
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.codebooks.len()
    }

    pub fn k(&self) -> usize {
        1 << self.n_bits
    }

    pub fn n_groups(&self) -> usize {
        self.layout.n_groups
    }

    pub fn code(&self, i: usize, m: usize) -> usize {
        self.codes[i * self.m() + m] as usize
    }

    pub fn group_codes(&self, i: usize) -> &[u8] {
        let m = self.m();
        &self.codes[i * m..(i + 1) * m]
    }

    /// Reconstructed group `i`, summed over codebooks in order.
    pub fn group(&self, i: usize, out: &mut [f32]) {
        let g = self.layout.g;
        out.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..self.m() {
            let c = self.code(i, m);
            let row = &self.codebooks[m].data()[c * g..(c + 1) * g];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }

    /// `[N, g]` reconstructed groups.
    pub fn reconstruct_groups(&self) -> Tensor {
        let g = self.layout.g;
        let mut data = vec![0.0f32; self.n_groups() * g];
        for (i, chunk) in data.chunks_mut(g).enumerate() {
            self.group(i, chunk);
        }
        Tensor::new(vec![self.n_groups(), g], data).expect("group shape")
    }

    /// Dense weight tensor in the original shape.
    pub fn reconstruct(&self) -> Tensor {
        self.layout
            .scatter(&self.reconstruct_groups())
            .expect("layout shape")
    }

    pub fn code_bits(&self) -> u64 {
        (self.n_groups() * self.m()) as u64 * self.n_bits as u64
    }

    pub fn codebook_bits(&self) -> u64 {
        (self.m() * self.k() * self.layout.g * 32) as u64
    }

    /// `N·M·n + M·2^n·g·32`, always recomputed.
    pub fn bits_total(&self) -> u64 {
        self.code_bits() + self.codebook_bits()
    }

    pub fn objective(&self) -> Option<f64> {
        self.history.last().copied()
    }

    /// Writes `path` (codes and codebooks) and a `.json` sidecar beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.put_u8("codes", vec![self.n_groups(), self.m()], self.codes.clone())?;
        for (m, cb) in self.codebooks.iter().enumerate() {
            c.put_tensor(&format!("codebook.{m}"), cb);
        }
        c.save(path)?;
        let side = LayerSidecar {
            layer_id: self.id.clone(),
            kind: self.kind,
            g: self.layout.g,
            m: self.m(),
            n: self.n_bits,
            layout: self.layout.clone(),
            pad_spec: self.layout.pad_slots(),
            objective_history: self.history.clone(),
        };
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&side)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: LayerSidecar =
            serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let c = Container::load(path)?;
        let (_, codes) = c.u8s("codes")?;
        let codebooks = (0..side.m)
            .map(|m| c.tensor(&format!("codebook.{m}")))
            .collect::<Result<Vec<_>>>()?;
        let mut q = Self::new(
            &side.layer_id,
            side.kind,
            side.layout,
            side.n,
            codebooks,
            codes.to_vec(),
        )?;
        q.history = side.objective_history;
        Ok(q)
    }
}
