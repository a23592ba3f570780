//! Teacher denoising trajectories saved as distillation and calibration data.
//!
//! A store holds the model input `x_t` of every sampler step of every
//! trajectory, in denoising order, together with its timestep, class,
//! trajectory id and step index.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffusion::{ddim_sample, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_traj: usize,
    /// Sampler steps per trajectory.
    #[serde(rename = "T")]
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    pub class_histogram: Vec<usize>,
    pub records: usize,
    /// Length of the underlying noise schedule.
    pub schedule_t: usize,
    /// Class index meaning "unconditional", present when guidance needs
    /// unconditional replays (`cfg_scale != 1`).
    pub null_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub x_t: Tensor,
    pub t: usize,
    pub cls: usize,
    pub traj_id: usize,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore {
    pub manifest: Manifest,
    records: Vec<Record>,
}

impl TrajectoryStore {
    pub fn new(manifest: Manifest, records: Vec<Record>) -> Result<Self> {
        let s = Self { manifest, records };
        s.validate()?;
        Ok(s)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn trajectory(&self, id: usize) -> &[Record] {
        let s = self.manifest.steps;
        &self.records[id * s..(id + 1) * s]
    }

    /// Distinct timesteps in denoising order.
    pub fn timesteps(&self) -> Vec<usize> {
        if self.records.is_empty() {
            return Vec::new();
        }
        self.trajectory(0).iter().map(|r| r.t).collect()
    }

    /// Record indices at timestep `t`, in trajectory order.
    pub fn indices_at(&self, t: usize) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].t == t)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.records.len() != m.n_traj * m.steps || m.records != self.records.len() {
            return Err(Error::Validation(format!(
                "{} records for {} trajectories of {} steps",
                self.records.len(),
                m.n_traj,
                m.steps
            )));
        }
        for id in 0..m.n_traj {
            let tr = self.trajectory(id);
            for (k, r) in tr.iter().enumerate() {
                if r.traj_id != id || r.step_index != k || r.cls != tr[0].cls {
                    return Err(Error::Validation(format!(
                        "trajectory {id} record {k} inconsistent"
                    )));
                }
                if k > 0 && r.t >= tr[k - 1].t {
                    return Err(Error::Validation(format!(
                        "trajectory {id} not descending in t"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        if let Some(first) = self.records.first() {
            let mut shape = vec![self.records.len()];
            shape.extend_from_slice(first.x_t.shape());
            let data: Vec<f32> = self
                .records
                .iter()
                .flat_map(|r| r.x_t.data().iter().copied())
                .collect();
            c.put_tensor("x", &Tensor::new(shape, data)?);
        }
        let col =
            |f: fn(&Record) -> usize| self.records.iter().map(|r| f(r) as u32).collect::<Vec<_>>();
        let n = vec![self.records.len()];
        c.put_u32("t", n.clone(), col(|r| r.t))?;
        c.put_u32("cls", n.clone(), col(|r| r.cls))?;
        c.put_u32("traj_id", n.clone(), col(|r| r.traj_id))?;
        c.put_u32("step_index", n, col(|r| r.step_index))?;
        Ok(c)
    }

    /// Writes `path` and the manifest as `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)?;
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let c = Container::load(path)?;
        let x = c.tensor("x")?;
        let per: usize = x.shape()[1..].iter().product();
        let (_, t) = c.u32s("t")?;
        let (_, cls) = c.u32s("cls")?;
        let (_, traj) = c.u32s("traj_id")?;
        let (_, step) = c.u32s("step_index")?;
        let records = (0..x.shape()[0])
            .map(|i| {
                Ok(Record {
                    x_t: Tensor::new(
                        x.shape()[1..].to_vec(),
                        x.data()[i * per..(i + 1) * per].to_vec(),
                    )?,
                    t: t[i] as usize,
                    cls: cls[i] as usize,
                    traj_id: traj[i] as usize,
                    step_index: step[i] as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, records)
    }
}

/// Runs `n_traj` guided DDIM trajectories of `steps` steps, classes drawn
/// uniformly. Trajectories use independent RNG streams and run in parallel.
/// The store is written to `path` before returning when one is given.
#[allow(clippy::too_many_arguments)]
pub fn generate_trajectories(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    n_traj: usize,
    steps: usize,
    cfg_scale: f32,
    n_classes: usize,
    seed: u64,
    path: Option<&Path>,
) -> Result<TrajectoryStore> {
    if n_traj == 0 {
        return Err(Error::Validation("at least one trajectory required".into()));
    }
    let root = SeededRng::new(seed);
    let mut class_rng = root.derive(1);
    let classes: Vec<usize> = (0..n_traj).map(|_| class_rng.below(n_classes)).collect();
    let runs = (0..n_traj)
        .into_par_iter()
        .map(|id| {
            let mut rng = root.derive(1000 + id as u64);
            let (_, inputs) =
                ddim_sample(model, sched, steps, Some(classes[id]), cfg_scale, &mut rng)?;
            Ok(inputs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(n_traj * steps);
    for (id, inputs) in runs.into_iter().enumerate() {
        for (k, (t, x)) in inputs.into_iter().enumerate() {
            records.push(Record {
                x_t: x,
                t,
                cls: classes[id],
                traj_id: id,
                step_index: k,
            });
        }
    }
    let mut hist = vec![0; n_classes];
    classes.iter().for_each(|&c| hist[c] += 1);
    let store = TrajectoryStore::new(
        Manifest {
            n_traj,
            steps,
            cfg_scale,
            seed,
            class_histogram: hist,
            records: records.len(),
            schedule_t: sched.len(),
            null_class: (cfg_scale != 1.0).then_some(n_classes),
        },
        records,
    )?;
    if let Some(p) = path {
        store.save(p)?;
    }
    Ok(store)
}

/// Model inputs for Stage-1 calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet {
    pub x: Vec<Tensor>,
    pub t: Vec<usize>,
    pub cls: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibManifest {
    pub count: usize,
    pub steps: usize,
    pub seed: u64,
    pub t_histogram: BTreeMap<usize, usize>,
}

impl CalibSet {
    /// The first `n` records of `store` in trajectory-major order, so each
    /// sampler timestep appears `⌊n/steps⌋` or `⌈n/steps⌉` times.
    pub fn from_store(store: &TrajectoryStore, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation(
                "calibration set size must be positive".into(),
            ));
        }
        if n > store.len() {
            return Err(Error::Validation(format!(
                "{n} inputs requested from {} records",
                store.len()
            )));
        }
        let r = &store.records()[..n];
        Ok(Self {
            x: r.iter().map(|r| r.x_t.clone()).collect(),
            t: r.iter().map(|r| r.t).collect(),
            cls: r.iter().map(|r| r.cls).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `(x_t, t, class)` triples.
    pub fn inputs(&self) -> Vec<(Tensor, usize, Option<usize>)> {
        (0..self.len())
            .map(|i| (self.x[i].clone(), self.t[i], Some(self.cls[i])))
            .collect()
    }

    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        self.t.iter().for_each(|&t| *h.entry(t).or_insert(0) += 1);
        h
    }

    pub fn save(&self, path: &Path, steps: usize, seed: u64) -> Result<()> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(self.x[0].shape());
        let mut c = Container::new();
        c.put_tensor(
            "x",
            &Tensor::new(
                shape,
                self.x
                    .iter()
                    .flat_map(|x| x.data().iter().copied())
                    .collect(),
            )?,
        );
        c.put_u32(
            "t",
            vec![self.len()],
            self.t.iter().map(|&v| v as u32).collect(),
        )?;
        c.put_u32(
            "cls",
            vec![self.len()],
            self.cls.iter().map(|&v| v as u32).collect(),
        )?;
        c.save(path)?;
        let m = CalibManifest {
            count: self.len(),
            steps,
            seed,
            t_histogram: self.histogram(),
        };
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let x = c.tensor("x")?;
        let per: usize = x.shape()[1..].iter().product();
        let xs = (0..x.shape()[0])
            .map(|i| {
                Tensor::new(
                    x.shape()[1..].to_vec(),
                    x.data()[i * per..(i + 1) * per].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: xs,
            t: c.u32s("t")?.1.iter().map(|&v| v as usize).collect(),
            cls: c.u32s("cls")?.1.iter().map(|&v| v as usize).collect(),
        })
    }
}
