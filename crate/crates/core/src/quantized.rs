//! A whole model with some layers additively quantized.
//!
//! The dense model keeps every quantized layer's weights equal to the
//! reconstruction from its codes and codebooks, so the ordinary forward and
//! backward passes apply. On disk the dense weights of quantized layers are
//! left out: a directory holds `base.aqt` (remaining parameters and the baked
//! time-embedding table), one container per quantized layer under `layers/`,
//! and `quantized.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::act_usq::ActQuantizer;
use crate::aq::QuantizedLayer;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::lut::LutHooks;
use crate::nn::{ForwardHooks, HookChain, ToyUNet, Trace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub model: ToyUNet,
    pub layers: BTreeMap<usize, QuantizedLayer>,
    pub act: Option<ActQuantizer>,
    /// Route kernel-aware 3x3 layers through the lookup-table kernel.
    pub use_lut: bool,
    lut: LutHooks,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitsSummary {
    pub quantized_weights: u64,
    pub code_bits: u64,
    pub codebook_bits: u64,
    /// Code bits per quantized weight.
    pub bits_per_weight: f64,
    /// Code and codebook bits per quantized weight.
    pub bits_per_weight_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub id: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub g: usize,
    pub n_bits: u32,
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub layers: Vec<LayerEntry>,
    pub act_quant: Option<ActQuantizer>,
    pub summary: BitsSummary,
}

impl QuantizedModel {
    /// Copies `base`, bakes its time embedding if needed and installs the
    /// reconstructed weights of `layers`.
    pub fn new(
        base: &ToyUNet,
        layers: BTreeMap<usize, QuantizedLayer>,
        act: Option<ActQuantizer>,
    ) -> Result<Self> {
        let mut model = base.clone();
        if model.time_lut().is_none() {
            let lut = model.bake_time_embedding(model.config().schedule.t)?;
            model.install_time_lut(lut)?;
        }
        let mut q = Self {
            model,
            layers,
            act,
            use_lut: false,
            lut: LutHooks::default(),
        };
        for (&l, ql) in &q.layers {
            let spec = q
                .model
                .specs()
                .get(l)
                .ok_or_else(|| Error::Validation(format!("no layer {l}")))?;
            if spec.id != ql.id || spec.weight_shape() != ql.layout.shape {
                return Err(Error::Validation(format!(
                    "quantized layer {} does not fit layer {}",
                    ql.id, spec.id
                )));
            }
        }
        q.sync_all()?;
        Ok(q)
    }

    /// Refreshes dense weights (and lookup tables) from codes and codebooks.
    pub fn sync_all(&mut self) -> Result<()> {
        for (&l, q) in &self.layers {
            self.model.set_weight(l, q.reconstruct())?;
        }
        self.lut = LutHooks::new(self.layers.iter().map(|(&l, q)| (l, q.clone())));
        Ok(())
    }

    pub fn sync_layer(&mut self, l: usize) -> Result<()> {
        let q = &self.layers[&l];
        self.model.set_weight(l, q.reconstruct())?;
        if self.lut.layers.contains_key(&l) {
            self.lut.layers.insert(l, q.clone());
        }
        Ok(())
    }

    pub fn summary(&self) -> BitsSummary {
        let n: u64 = self.layers.values().map(|q| q.layout.numel() as u64).sum();
        let code: u64 = self.layers.values().map(QuantizedLayer::code_bits).sum();
        let cb: u64 = self
            .layers
            .values()
            .map(QuantizedLayer::codebook_bits)
            .sum();
        let per = |b: u64| if n == 0 { 0.0 } else { b as f64 / n as f64 };
        BitsSummary {
            quantized_weights: n,
            code_bits: code,
            codebook_bits: cb,
            bits_per_weight: per(code),
            bits_per_weight_total: per(code + cb),
        }
    }

    fn with_hooks<R>(&self, f: impl FnOnce(Option<&dyn ForwardHooks<f32>>) -> R) -> R {
        let mut chain: Vec<&dyn ForwardHooks<f32>> = Vec::new();
        if let Some(a) = &self.act {
            chain.push(a);
        }
        if self.use_lut {
            chain.push(&self.lut);
        }
        if chain.is_empty() {
            f(None)
        } else {
            let h = HookChain(chain);
            f(Some(&h))
        }
    }

    pub fn forward_traced(&self, x: &Tensor, t: usize, cls: Option<usize>) -> Result<Trace> {
        self.with_hooks(|h| self.model.forward_traced(x, t, cls, h))
    }

    pub fn forward(
        &self,
        x: &Tensor,
        t: usize,
        cls: Option<usize>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let tr = self.forward_traced(x, t, cls)?;
        Ok((tr.output, tr.features))
    }

    pub fn manifest(&self) -> QuantizedManifest {
        QuantizedManifest {
            layers: self
                .layers
                .iter()
                .map(|(&index, q)| LayerEntry {
                    index,
                    id: q.id.clone(),
                    m: q.m(),
                    g: q.layout.g,
                    n_bits: q.n_bits,
                    objective: q.objective(),
                })
                .collect(),
            act_quant: self.act.clone(),
            summary: self.summary(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("layers"))?;
        let mut base = self.model.clone();
        for &l in self.layers.keys() {
            let shape = base.weight(l).shape().to_vec();
            base.set_weight(l, Tensor::zeros(&shape))?;
        }
        base.save(&dir.join("base.aqt"), true)?;
        for q in self.layers.values() {
            q.save(&dir.join("layers").join(format!("{}.aqt", q.id)))?;
        }
        std::fs::write(
            dir.join("quantized.json"),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: QuantizedManifest =
            serde_json::from_slice(&std::fs::read(dir.join("quantized.json"))?)?;
        let base = ToyUNet::load(&dir.join("base.aqt"))?;
        let mut layers = BTreeMap::new();
        for e in &m.layers {
            let q = QuantizedLayer::load(&dir.join("layers").join(format!("{}.aqt", e.id)))?;
            if q.id != e.id || q.m() != e.m {
                return Err(Error::Format(format!(
                    "layer file {} disagrees with the manifest",
                    e.id
                )));
            }
            layers.insert(e.index, q);
        }
        Self::new(&base, layers, m.act_quant)
    }

    /// Returns true when `dir` looks like a saved quantized model.
    pub fn is_saved_at(dir: &Path) -> bool {
        dir.join("quantized.json").is_file()
    }
}

impl Denoiser for QuantizedModel {
    fn predict(&self, x_t: &Tensor, t: usize, cls: Option<usize>) -> Result<Tensor> {
        Ok(self.forward_traced(x_t, t, cls)?.output)
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.model.config().sample_shape()
    }
}
