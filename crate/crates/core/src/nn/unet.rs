use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::ops::*;
use super::{layer, ForwardHooks, LayerKind, LayerSpec, ModelConfig, TimeEmbedLUT};
use crate::container::Container;
use crate::diffusion::{Denoiser, ScheduleConfig};
use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of the toy U-Net. Every mutation bumps a version counter so
/// that a [`Trace`] recorded before the change is rejected by `backward`.
#[derive(Debug)]
pub struct ToyUNet<T: Scalar = f32> {
    config: ModelConfig,
    specs: Vec<LayerSpec>,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    class_embed: Tensor<T>,
    time_lut: Option<TimeEmbedLUT<T>>,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for ToyUNet<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            specs: self.specs.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            class_embed: self.class_embed.clone(),
            time_lut: self.time_lut.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> PartialEq for ToyUNet<T> {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.weights == o.weights
            && self.biases == o.biases
            && self.class_embed == o.class_embed
            && self.time_lut == o.time_lut
    }
}

/// Everything `backward` needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    tag: (u64, u64),
    pub output: Tensor<T>,
    pub features: Vec<Tensor<T>>,
    /// Input actually consumed by each layer (after any hook).
    inputs: Vec<Option<Tensor<T>>>,
    /// Pre-activation of layers followed by SiLU.
    pre: Vec<Option<Tensor<T>>>,
    sinus: Tensor<T>,
    emb: Tensor<T>,
    temb_pre: Option<Tensor<T>>,
    class_row: usize,
}

/// Parameter gradients, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T = f32> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub class_embed: Tensor<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(m: &ToyUNet<T>) -> Self {
        Self {
            weights: m.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: m.biases.iter().map(|b| Tensor::zeros(b.shape())).collect(),
            class_embed: Tensor::zeros(m.class_embed.shape()),
        }
    }

    pub fn add_assign(&mut self, o: &Self) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&o.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&o.biases) {
            a.add_assign(b)?;
        }
        self.class_embed.add_assign(&o.class_embed)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.weights
            .iter()
            .chain(&self.biases)
            .chain(std::iter::once(&self.class_embed))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(std::iter::once(&mut self.class_embed))
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    blocks: Vec<LayerSpec>,
    #[serde(rename = "T")]
    t: usize,
    schedule: ScheduleConfig,
    config: ModelConfig,
    time_lut: bool,
}

impl<T: Scalar> Trace<T> {
    /// Input consumed by layer `i` during this pass, if the layer ran.
    pub fn layer_input(&self, i: usize) -> Option<&Tensor<T>> {
        self.inputs.get(i).and_then(Option::as_ref)
    }
}

struct BlockOut<T> {
    out: Tensor<T>,
}

impl<T: Scalar> ToyUNet<T> {
    /// He-initialised weights, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let specs = config.layers();
        let mut weights = Vec::with_capacity(specs.len());
        for s in &specs {
            let fan_in = s.weight_count() / s.c_out;
            let gain = match (s.kind, s.id.as_str()) {
                (_, "conv_out") => 0.1,
                (LayerKind::Linear, _) => 1.0,
                _ => 2.0,
            };
            weights.push(Tensor::randn(
                &s.weight_shape(),
                (gain / fan_in as f64).sqrt(),
                rng,
            ));
        }
        let biases = specs.iter().map(|s| Tensor::zeros(&[s.c_out])).collect();
        let class_embed = Tensor::randn(&[config.n_classes + 1, config.emb_dim], 1.0, rng);
        Ok(Self::from_parts(
            config.clone(),
            specs,
            weights,
            biases,
            class_embed,
        ))
    }

    /// All parameters zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.layers();
        let weights = specs
            .iter()
            .map(|s| Tensor::zeros(&s.weight_shape()))
            .collect();
        let biases = specs.iter().map(|s| Tensor::zeros(&[s.c_out])).collect();
        let class_embed = Tensor::zeros(&[config.n_classes + 1, config.emb_dim]);
        Ok(Self::from_parts(
            config.clone(),
            specs,
            weights,
            biases,
            class_embed,
        ))
    }

    fn from_parts(
        config: ModelConfig,
        specs: Vec<LayerSpec>,
        weights: Vec<Tensor<T>>,
        biases: Vec<Tensor<T>>,
        class_embed: Tensor<T>,
    ) -> Self {
        Self {
            config,
            specs,
            weights,
            biases,
            class_embed,
            time_lut: None,
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ToyUNet<U> {
        let mut m = ToyUNet::from_parts(
            self.config.clone(),
            self.specs.clone(),
            self.weights.iter().map(Tensor::cast).collect(),
            self.biases.iter().map(Tensor::cast).collect(),
            self.class_embed.cast(),
        );
        m.time_lut = self.time_lut.as_ref().map(|l| TimeEmbedLUT {
            table: l.table.cast(),
        });
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.id == id)
    }

    pub fn quantizable_layers(&self) -> Vec<usize> {
        (0..self.specs.len())
            .filter(|&i| self.specs[i].quantizable)
            .collect()
    }

    pub fn weight(&self, i: usize) -> &Tensor<T> {
        &self.weights[i]
    }

    pub fn bias(&self, i: usize) -> &Tensor<T> {
        &self.biases[i]
    }

    pub fn class_embed(&self) -> &Tensor<T> {
        &self.class_embed
    }

    pub fn time_lut(&self) -> Option<&TimeEmbedLUT<T>> {
        self.time_lut.as_ref()
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.weights[i]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.biases[i]
    }

    pub fn class_embed_mut(&mut self) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.class_embed
    }

    pub fn set_weight(&mut self, i: usize, w: Tensor<T>) -> Result<()> {
        if w.shape() != self.weights[i].shape() {
            return dim_err(format!(
                "layer {}: weight {:?} for shape {:?}",
                self.specs[i].id,
                w.shape(),
                self.weights[i].shape()
            ));
        }
        self.version += 1;
        self.weights[i] = w;
        Ok(())
    }

    /// Every parameter tensor paired with its gradient, in a fixed order.
    pub fn params_with_grads<'a>(
        &'a mut self,
        grads: &'a Grads<T>,
    ) -> impl Iterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>)> {
        self.version += 1;
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(std::iter::once(&mut self.class_embed))
            .zip(grads.tensors())
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::len)
            .sum::<usize>()
            + self.class_embed.len()
    }

    /// Output of the live time-embedding layer for timestep `t`.
    pub fn time_embed_live(&self, t: usize) -> Result<Tensor<T>> {
        let s = sinusoidal(t, self.config.emb_dim);
        let i = layer::TIME_EMBED;
        Ok(silu_t(&linear_forward(
            &s,
            &self.weights[i],
            &self.biases[i],
        )?))
    }

    /// Precompute the time-embedding output for `t_total` timesteps.
    pub fn bake_time_embedding(&self, t_total: usize) -> Result<TimeEmbedLUT<T>> {
        let e = self.config.emb_dim;
        let mut data = Vec::with_capacity(t_total * e);
        for t in 0..t_total {
            data.extend_from_slice(self.time_embed_live(t)?.data());
        }
        Ok(TimeEmbedLUT {
            table: Tensor::new(vec![t_total, e], data)?,
        })
    }

    /// Route future forwards through a baked table instead of the live layer.
    pub fn install_time_lut(&mut self, lut: TimeEmbedLUT<T>) -> Result<()> {
        let t = self.config.schedule.t;
        if lut.table.shape() != [t, self.config.emb_dim] {
            return dim_err(format!("time LUT {:?} for T={t}", lut.table.shape()));
        }
        self.version += 1;
        self.time_lut = Some(lut);
        Ok(())
    }

    pub fn remove_time_lut(&mut self) {
        self.version += 1;
        self.time_lut = None;
    }

    fn class_row(&self, cls: Option<usize>) -> Result<usize> {
        match cls {
            None => Ok(self.config.n_classes),
            Some(c) if c < self.config.n_classes => Ok(c),
            Some(c) => Err(Error::Range(format!(
                "class {c} outside [0, {})",
                self.config.n_classes
            ))),
        }
    }

    /// Noise prediction and block features.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: usize,
        cls: Option<usize>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let tr = self.forward_traced(x, t, cls, None)?;
        Ok((tr.output, tr.features))
    }

    /// Forward pass keeping what `backward` needs.
    pub fn forward_traced(
        &self,
        x: &Tensor<T>,
        t: usize,
        cls: Option<usize>,
        hooks: Option<&dyn ForwardHooks<T>>,
    ) -> Result<Trace<T>> {
        let t_total = self.config.schedule.t;
        if t >= t_total {
            return Err(Error::Range(format!("timestep {t} outside [0, {t_total})")));
        }
        if x.shape() != self.config.sample_shape().as_slice() {
            return dim_err(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                self.config.sample_shape()
            ));
        }
        let class_row = self.class_row(cls)?;
        let n = self.specs.len();
        let mut tr = Trace {
            tag: (self.id, self.version),
            output: Tensor::zeros(&[1]),
            features: Vec::with_capacity(layer::FEATURES),
            inputs: vec![None; n],
            pre: vec![None; n],
            sinus: sinusoidal(t, self.config.emb_dim),
            emb: Tensor::zeros(&[1]),
            temb_pre: None,
            class_row,
        };
        let et = match &self.time_lut {
            Some(lut) => lut.row(t),
            None => {
                let i = layer::TIME_EMBED;
                let p = linear_forward(&tr.sinus, &self.weights[i], &self.biases[i])?;
                let e = silu_t(&p);
                tr.temb_pre = Some(p);
                e
            }
        };
        let e = self.config.emb_dim;
        let row = &self.class_embed.data()[class_row * e..(class_row + 1) * e];
        tr.emb = Tensor::new(
            vec![e],
            et.data().iter().zip(row).map(|(&a, &b)| a + b).collect(),
        )?;

        let h0 = self.conv(layer::CONV_IN, x, t, hooks, &mut tr)?;
        let s1 = self.down_block(layer::DOWN1, &h0, t, hooks, &mut tr)?.out;
        let s2 = self
            .down_block(layer::DOWN2, &avg_pool2(&s1)?, t, hooks, &mut tr)?
            .out;
        let m = self
            .down_block(layer::MID, &avg_pool2(&s2)?, t, hooks, &mut tr)?
            .out;
        let o2 = self.up_block(layer::UP2, &m, &s2, t, hooks, &mut tr)?.out;
        let o1 = self.up_block(layer::UP1, &o2, &s1, t, hooks, &mut tr)?.out;
        tr.output = self.conv(layer::CONV_OUT, &o1, t, hooks, &mut tr)?;
        tr.features = vec![s1, s2, m, o2, o1];
        Ok(tr)
    }

    fn conv(
        &self,
        i: usize,
        x: &Tensor<T>,
        t: usize,
        hooks: Option<&dyn ForwardHooks<T>>,
        tr: &mut Trace<T>,
    ) -> Result<Tensor<T>> {
        let xin = hooks
            .and_then(|h| h.layer_input(i, t, x))
            .unwrap_or_else(|| x.clone());
        let y = match hooks.and_then(|h| h.conv(i, &xin)) {
            Some(y) => {
                let mut y = y?;
                add_channel_bias(&mut y, self.biases[i].data())?;
                y
            }
            None => conv_forward(&xin, &self.weights[i], &self.biases[i])?,
        };
        tr.inputs[i] = Some(xin);
        Ok(y)
    }

    fn shift(&self, i: usize, tr: &mut Trace<T>) -> Result<Tensor<T>> {
        tr.inputs[i] = Some(tr.emb.clone());
        linear_forward(&tr.emb, &self.weights[i], &self.biases[i])
    }

    fn down_block(
        &self,
        [c1, c2, tb]: [usize; 3],
        x: &Tensor<T>,
        t: usize,
        hooks: Option<&dyn ForwardHooks<T>>,
        tr: &mut Trace<T>,
    ) -> Result<BlockOut<T>> {
        let shift = self.shift(tb, tr)?;
        let mut p1 = self.conv(c1, x, t, hooks, tr)?;
        add_channel_bias(&mut p1, shift.data())?;
        let h1 = silu_t(&p1);
        tr.pre[c1] = Some(p1);
        let p2 = self.conv(c2, &h1, t, hooks, tr)?;
        let out = silu_t(&p2);
        tr.pre[c2] = Some(p2);
        Ok(BlockOut { out })
    }

    fn up_block(
        &self,
        [mg, cv, tb]: [usize; 3],
        x: &Tensor<T>,
        skip: &Tensor<T>,
        t: usize,
        hooks: Option<&dyn ForwardHooks<T>>,
        tr: &mut Trace<T>,
    ) -> Result<BlockOut<T>> {
        let cat = concat(&upsample2(x)?, skip)?;
        let pm = self.conv(mg, &cat, t, hooks, tr)?;
        let hm = silu_t(&pm);
        tr.pre[mg] = Some(pm);
        let shift = self.shift(tb, tr)?;
        let mut pc = self.conv(cv, &hm, t, hooks, tr)?;
        add_channel_bias(&mut pc, shift.data())?;
        let out = silu_t(&pc);
        tr.pre[cv] = Some(pc);
        Ok(BlockOut { out })
    }

    /// Parameter gradients of a scalar loss given its gradient with respect to
    /// the output and (optionally) to each block feature.
    pub fn backward(
        &self,
        tr: &Trace<T>,
        d_out: &Tensor<T>,
        d_features: Option<&[Tensor<T>]>,
    ) -> Result<Grads<T>> {
        if tr.tag != (self.id, self.version) {
            return Err(Error::Consistency(
                "activation trace was recorded on a different model state".into(),
            ));
        }
        if d_out.shape() != tr.output.shape() {
            return dim_err("backward: output gradient shape");
        }
        if let Some(df) = d_features {
            if df.len() != tr.features.len()
                || df
                    .iter()
                    .zip(&tr.features)
                    .any(|(a, b)| a.shape() != b.shape())
            {
                return dim_err("backward: feature gradient shapes");
            }
        }
        let feat = |l: usize, g: &mut Tensor<T>| -> Result<()> {
            if let Some(df) = d_features {
                g.add_assign(&df[l])?;
            }
            Ok(())
        };
        let mut g = Grads::zeros_like(self);
        let mut d_emb = Tensor::<T>::zeros(&[self.config.emb_dim]);

        let mut d_o1 = self.conv_back(layer::CONV_OUT, tr, d_out, &mut g)?;
        feat(4, &mut d_o1)?;
        let (mut d_o2, d_s1_skip) = self.up_back(layer::UP1, tr, &d_o1, &mut g, &mut d_emb)?;
        feat(3, &mut d_o2)?;
        let (mut d_m, d_s2_skip) = self.up_back(layer::UP2, tr, &d_o2, &mut g, &mut d_emb)?;
        feat(2, &mut d_m)?;
        let d_p2 = self.down_back(layer::MID, tr, &d_m, &mut g, &mut d_emb)?;
        let mut d_s2 = avg_pool2_back(&d_p2)?;
        d_s2.add_assign(&d_s2_skip)?;
        feat(1, &mut d_s2)?;
        let d_p1 = self.down_back(layer::DOWN2, tr, &d_s2, &mut g, &mut d_emb)?;
        let mut d_s1 = avg_pool2_back(&d_p1)?;
        d_s1.add_assign(&d_s1_skip)?;
        feat(0, &mut d_s1)?;
        let d_h0 = self.down_back(layer::DOWN1, tr, &d_s1, &mut g, &mut d_emb)?;
        self.conv_back(layer::CONV_IN, tr, &d_h0, &mut g)?;

        let e = self.config.emb_dim;
        let row = tr.class_row;
        for (a, &b) in g.class_embed.data_mut()[row * e..(row + 1) * e]
            .iter_mut()
            .zip(d_emb.data())
        {
            *a += b;
        }
        if let Some(pre) = &tr.temb_pre {
            let d_pre = silu_back(pre, &d_emb);
            let i = layer::TIME_EMBED;
            let lg = linear_backward(&tr.sinus, &self.weights[i], &d_pre)?;
            g.weights[i] = lg.dw;
            g.biases[i] = lg.db;
        }
        Ok(g)
    }

    fn input<'a>(&self, tr: &'a Trace<T>, i: usize) -> Result<&'a Tensor<T>> {
        tr.inputs[i]
            .as_ref()
            .ok_or_else(|| Error::Consistency(format!("no saved input for layer {i}")))
    }

    fn pre<'a>(&self, tr: &'a Trace<T>, i: usize) -> Result<&'a Tensor<T>> {
        tr.pre[i]
            .as_ref()
            .ok_or_else(|| Error::Consistency(format!("no saved pre-activation for layer {i}")))
    }

    fn conv_back(
        &self,
        i: usize,
        tr: &Trace<T>,
        dy: &Tensor<T>,
        g: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let cg = conv_backward(self.input(tr, i)?, &self.weights[i], dy)?;
        g.weights[i] = cg.dw;
        g.biases[i] = cg.db;
        Ok(cg.dx)
    }

    fn shift_back(
        &self,
        i: usize,
        tr: &Trace<T>,
        d_pre: &Tensor<T>,
        g: &mut Grads<T>,
        d_emb: &mut Tensor<T>,
    ) -> Result<()> {
        let d_shift = channel_sums(d_pre)?;
        let lg = linear_backward(self.input(tr, i)?, &self.weights[i], &d_shift)?;
        g.weights[i] = lg.dw;
        g.biases[i] = lg.db;
        d_emb.add_assign(&lg.dv)
    }

    fn down_back(
        &self,
        [c1, c2, tb]: [usize; 3],
        tr: &Trace<T>,
        d_out: &Tensor<T>,
        g: &mut Grads<T>,
        d_emb: &mut Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d_p2 = silu_back(self.pre(tr, c2)?, d_out);
        let d_h1 = self.conv_back(c2, tr, &d_p2, g)?;
        let d_p1 = silu_back(self.pre(tr, c1)?, &d_h1);
        self.shift_back(tb, tr, &d_p1, g, d_emb)?;
        self.conv_back(c1, tr, &d_p1, g)
    }

    /// Returns gradients for the block input and for the skip tensor.
    fn up_back(
        &self,
        [mg, cv, tb]: [usize; 3],
        tr: &Trace<T>,
        d_out: &Tensor<T>,
        g: &mut Grads<T>,
        d_emb: &mut Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let d_pc = silu_back(self.pre(tr, cv)?, d_out);
        self.shift_back(tb, tr, &d_pc, g, d_emb)?;
        let d_hm = self.conv_back(cv, tr, &d_pc, g)?;
        let d_pm = silu_back(self.pre(tr, mg)?, &d_hm);
        let d_cat = self.conv_back(mg, tr, &d_pm, g)?;
        let c_up = self.specs[mg].c_in - self.skip_channels(mg);
        let (d_up, d_skip) = split(&d_cat, c_up)?;
        Ok((upsample2_back(&d_up)?, d_skip))
    }

    fn skip_channels(&self, merge: usize) -> usize {
        if merge == layer::UP2[0] {
            self.config.channels[1]
        } else {
            self.config.channels[0]
        }
    }
}

impl ToyUNet<f32> {
    /// Writes the parameters to `path` (AQT1) and the topology sidecar next to
    /// it with a `.json` extension. With a baked time LUT the live
    /// time-embedding weights can be left out.
    pub fn save(&self, path: &Path, include_time_embed: bool) -> Result<()> {
        let mut c = Container::new();
        for (i, s) in self.specs.iter().enumerate() {
            if i == layer::TIME_EMBED && !include_time_embed && self.time_lut.is_some() {
                continue;
            }
            c.put_tensor(&format!("{}.weight", s.id), &self.weights[i]);
            c.put_tensor(&format!("{}.bias", s.id), &self.biases[i]);
        }
        c.put_tensor("class_embed", &self.class_embed);
        if let Some(l) = &self.time_lut {
            c.put_tensor("time_lut", &l.table);
        }
        c.save(path)?;
        std::fs::write(path.with_extension("json"), self.sidecar_json()?)?;
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Sidecar {
            blocks: self.specs.clone(),
            t: self.config.schedule.t,
            schedule: self.config.schedule,
            config: self.config.clone(),
            time_lut: self.time_lut.is_some(),
        })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let c = Container::load(path)?;
        let mut m = Self::zeros(&side.config)?;
        if m.specs != side.blocks {
            return Err(Error::Format(
                "sidecar blocks do not match the configured topology".into(),
            ));
        }
        if c.contains("time_lut") {
            m.install_time_lut(TimeEmbedLUT {
                table: c.tensor("time_lut")?,
            })?;
        }
        for i in 0..m.specs.len() {
            let id = m.specs[i].id.clone();
            let wname = format!("{id}.weight");
            if i == layer::TIME_EMBED && !c.contains(&wname) && m.time_lut.is_some() {
                continue;
            }
            m.set_weight(i, c.tensor(&wname)?)?;
            let b = c.tensor(&format!("{id}.bias"))?;
            if b.shape() != m.biases[i].shape() {
                return dim_err(format!("layer {id}: bias shape {:?}", b.shape()));
            }
            m.biases[i] = b;
        }
        let ce = c.tensor("class_embed")?;
        if ce.shape() != m.class_embed.shape() {
            return dim_err("class_embed shape");
        }
        m.class_embed = ce;
        Ok(m)
    }
}

impl Denoiser for ToyUNet<f32> {
    fn predict(&self, x_t: &Tensor, t: usize, cls: Option<usize>) -> Result<Tensor> {
        Ok(self.forward_traced(x_t, t, cls, None)?.output)
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.config.sample_shape()
    }
}
