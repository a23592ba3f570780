//! One function per subcommand. Each writes its artifact and the effective
//! configuration next to it, and holds a lock on the output directory while
//! writing.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aquant::act_usq::ActQuantizer;
use aquant::aq::{collect_grams, QuantizedLayer};
use aquant::container::Container;
use aquant::diffusion::{ddim_sample, Denoiser, NoiseSchedule};
use aquant::distill::{run_distillation, write_log_csv, Sample};
use aquant::greedy::{build_table, calibrate_ladder, greedy_solve};
use aquant::lut::{breakpoint_cout, flops_lut, BreakpointReport};
use aquant::nn::{train_teacher, LayerKind, ToyUNet};
use aquant::quantized::{BitsSummary, QuantizedModel};
use aquant::trajectory::{generate_trajectories, CalibSet, TrajectoryStore};
use aquant::{SeededRng, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stage, MixedPrecision, PipelineConfig};

/// Exclusive writer lock on a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "{} is locked by another writer (remove {} if stale)",
                    dir.display(),
                    path.display()
                )
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn parent(p: &Path) -> PathBuf {
    p.parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn require(p: &Path, what: &str) -> Result<()> {
    if !p.exists() {
        bail!("{what} not found at {}", p.display());
    }
    Ok(())
}

fn load_teacher(cfg: &PipelineConfig) -> Result<ToyUNet> {
    let p = cfg.teacher_path();
    require(&p, "teacher checkpoint")?;
    ToyUNet::load(&p).with_context(|| format!("loading teacher {}", p.display()))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Trains the teacher; writes the checkpoint and its training-loss CSV.
pub fn cmd_train_teacher(cfg: &PipelineConfig) -> Result<PathBuf> {
    let path = cfg.teacher_path();
    let dir = parent(&path);
    let _lock = DirLock::acquire(&dir)?;
    let (model, report) = train_teacher(&cfg.model, &cfg.teacher, cfg.stage_seed(stage::TEACHER))?;
    model.save(&path, true)?;
    let mut w = csv::Writer::from_path(dir.join("train_loss.csv"))?;
    for (step, &loss) in report.losses.iter().enumerate() {
        w.serialize(LossRow { step, loss })?;
    }
    w.flush()?;
    std::fs::write(
        dir.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    cfg.write_beside(&dir)?;
    log::info!(
        "teacher held-out MSE {:.5} -> {:.5}",
        report.initial_heldout,
        report.final_heldout
    );
    Ok(path)
}

/// Collects Stage-1 calibration inputs from teacher sampling runs, evenly
/// across the sampler's timesteps.
pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<PathBuf> {
    let c = &cfg.calib;
    if c.size == 0 {
        bail!("calibration set size must be positive");
    }
    let teacher = load_teacher(cfg)?;
    let path = cfg.calib_path();
    let dir = parent(&path);
    let _lock = DirLock::acquire(&dir)?;
    let sched = NoiseSchedule::from_config(&cfg.model.schedule)?;
    let seed = cfg.stage_seed(stage::CALIB);
    let n_traj = c.size.div_ceil(c.steps);
    let store = generate_trajectories(
        &teacher,
        &sched,
        n_traj,
        c.steps,
        c.cfg_scale,
        cfg.model.n_classes,
        seed,
        None,
    )?;
    let set = CalibSet::from_store(&store, c.size)?;
    set.save(&path, c.steps, seed)?;
    cfg.write_beside(&dir)?;
    Ok(path)
}

/// Draws the distillation trajectories from the teacher.
pub fn cmd_gen_trajectories(cfg: &PipelineConfig) -> Result<PathBuf> {
    let teacher = load_teacher(cfg)?;
    let path = cfg.trajectories_path();
    let dir = parent(&path);
    let _lock = DirLock::acquire(&dir)?;
    let sched = NoiseSchedule::from_config(&cfg.model.schedule)?;
    let t = &cfg.trajectories;
    generate_trajectories(
        &teacher,
        &sched,
        t.n_traj,
        t.steps,
        t.cfg_scale,
        cfg.model.n_classes,
        cfg.stage_seed(stage::TRAJECTORIES),
        Some(&path),
    )?;
    cfg.write_beside(&dir)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub mode: String,
    /// Codebook count per layer id.
    pub m: BTreeMap<String, usize>,
    pub budget_bits: Option<u64>,
    pub total_bits: u64,
    /// Summed layer sensitivities of the chosen allocation.
    pub total_cost: Option<f64>,
}

fn every_nth<T: Clone>(v: &[T], n: usize) -> Vec<T> {
    let step = v.len().div_ceil(n.max(1)).max(1);
    v.iter().step_by(step).take(n).cloned().collect()
}

/// Stage 1: calibrates every quantizable layer and writes the quantized model.
pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<PathBuf> {
    let teacher = load_teacher(cfg)?;
    let cpath = cfg.calib_path();
    require(&cpath, "calibration set")?;
    let calib = CalibSet::load(&cpath)?;
    let inputs = calib.inputs();
    let dir = cfg.quantized_dir();
    let _lock = DirLock::acquire(&dir)?;
    let layers = teacher.quantizable_layers();
    let grams = collect_grams(&teacher, &inputs, &layers)?;
    let s1 = &cfg.stage1;
    let seed = cfg.stage_seed(stage::QUANTIZE);
    let (chosen, report): (Vec<QuantizedLayer>, _) = match s1.mixed_precision {
        MixedPrecision::Uniform(m) => {
            let ladders = calibrate_ladder(&teacher, &grams, &layers, m, &s1.calib, seed)?;
            let chosen: Vec<_> = ladders
                .into_iter()
                .map(|mut r| r.swap_remove(m - 1))
                .collect();
            let report = AllocationReport {
                mode: s1.mixed_precision.to_string(),
                m: chosen.iter().map(|q| (q.id.clone(), q.m())).collect(),
                budget_bits: None,
                total_bits: chosen.iter().map(QuantizedLayer::bits_total).sum(),
                total_cost: None,
            };
            (chosen, report)
        }
        MixedPrecision::Greedy => {
            let ladders = calibrate_ladder(&teacher, &grams, &layers, s1.m_max, &s1.calib, seed)?;
            let probe = every_nth(&inputs, s1.probe);
            let table = build_table(&teacher, &layers, &ladders, &probe)?;
            let budget = table.uniform_bits(s1.budget_m - 1);
            let alloc = greedy_solve(&table, budget)?;
            let levels = table.levels(&alloc)?;
            let chosen: Vec<_> = ladders
                .into_iter()
                .zip(&levels)
                .map(|(mut r, &j)| r.swap_remove(j))
                .collect();
            let report = AllocationReport {
                mode: s1.mixed_precision.to_string(),
                m: chosen.iter().map(|q| (q.id.clone(), q.m())).collect(),
                budget_bits: Some(budget),
                total_bits: alloc.total_bits,
                total_cost: Some(alloc.total_cost),
            };
            std::fs::write(
                dir.join("sensitivity.json"),
                serde_json::to_string_pretty(&table)?,
            )?;
            (chosen, report)
        }
    };
    let act = if cfg.act_quant.enabled {
        Some(ActQuantizer::calibrate(
            &teacher,
            &inputs,
            &layers,
            cfg.act_quant.bits,
            cfg.act_quant.signed,
        )?)
    } else {
        None
    };
    let qm = QuantizedModel::new(&teacher, layers.iter().copied().zip(chosen).collect(), act)?;
    qm.save(&dir)?;
    std::fs::write(
        dir.join("allocation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    cfg.write_beside(&dir)?;
    let s = qm.summary();
    log::info!(
        "{} bits/weight in codes, {:.3} with codebooks",
        s.bits_per_weight,
        s.bits_per_weight_total
    );
    Ok(dir)
}

/// Stage 2: distils the Stage-1 model against the teacher.
pub fn cmd_distill(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg.student_dir();
    let prev = dir.join("config.json");
    if prev.exists() {
        let old = PipelineConfig::load_json(&prev)?;
        if old != *cfg {
            bail!(
                "{} holds a student distilled with a different configuration; remove it or choose another paths.student",
                dir.display()
            );
        }
    }
    let teacher = load_teacher(cfg)?;
    let qdir = cfg.quantized_dir();
    if !QuantizedModel::is_saved_at(&qdir) {
        bail!("Stage-1 model not found at {}", qdir.display());
    }
    let tpath = cfg.trajectories_path();
    require(&tpath, "trajectory store")?;
    let mut student = QuantizedModel::load(&qdir)?;
    let store = TrajectoryStore::load(&tpath)?;
    let _lock = DirLock::acquire(&dir)?;
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = cfg.stage_seed(stage::DISTILL);
    let report = match run_distillation(&teacher, &mut student, &store, &dcfg, None) {
        Ok(r) => r,
        Err(e) => {
            let diag = serde_json::json!({ "error": e.to_string(), "config": cfg });
            std::fs::write(
                dir.join("failure.json"),
                serde_json::to_string_pretty(&diag)?,
            )?;
            return Err(e.into());
        }
    };
    student.save(&dir)?;
    write_log_csv(&dir.join("distill_log.csv"), &report.log)?;
    let meta = serde_json::json!({
        "alpha": report.alpha,
        "groups_changed": report.groups_changed,
        "profile": report.profile,
    });
    std::fs::write(
        dir.join("distill.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    cfg.write_beside(&dir)?;
    Ok(dir)
}

/// A full-precision checkpoint or a quantized model directory.
pub enum Model {
    Full(ToyUNet),
    Quantized(Box<QuantizedModel>),
}

impl Model {
    pub fn load(path: &Path, use_lut: bool) -> Result<Self> {
        if QuantizedModel::is_saved_at(path) {
            let mut q = QuantizedModel::load(path)?;
            q.use_lut = use_lut;
            Ok(Self::Quantized(Box::new(q)))
        } else if path.is_file() {
            Ok(Self::Full(ToyUNet::load(path)?))
        } else {
            bail!("no model at {}", path.display())
        }
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Self::Full(m) => m,
            Self::Quantized(q) => q.as_ref(),
        }
    }

    pub fn network(&self) -> &ToyUNet {
        match self {
            Self::Full(m) => m,
            Self::Quantized(q) => &q.model,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub model: PathBuf,
    pub classes: Vec<usize>,
    pub reference: Option<PathBuf>,
    /// Per-sample MSE against the reference model's sample from the same noise.
    pub mse: Option<Vec<f64>>,
}

fn draw(model: &dyn Denoiser, cfg: &PipelineConfig, classes: &[usize]) -> Result<Vec<Tensor>> {
    let sched = NoiseSchedule::from_config(&cfg.model.schedule)?;
    let root = SeededRng::new(cfg.stage_seed(stage::SAMPLE));
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut rng = root.derive(i as u64);
            Ok(ddim_sample(
                model,
                &sched,
                cfg.sampler.steps,
                Some(c),
                cfg.sampler.cfg_scale,
                &mut rng,
            )?
            .0)
        })
        .collect()
}

/// Samples from `model`; writes the tensors, a PNG grid and a report.
pub fn cmd_sample(
    cfg: &PipelineConfig,
    model: &Path,
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let m = Model::load(model, cfg.sampler.use_lut)?;
    let out = out.map_or_else(
        || {
            let name = model
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned());
            cfg.out_dir.join("samples").join(name)
        },
        Path::to_path_buf,
    );
    let _lock = DirLock::acquire(&out)?;
    let classes: Vec<usize> = (0..cfg.sampler.n_samples)
        .map(|i| i % cfg.model.n_classes)
        .collect();
    let samples = draw(m.denoiser(), cfg, &classes)?;
    let mut c = Container::new();
    for (i, s) in samples.iter().enumerate() {
        c.put_tensor(&format!("sample.{i}"), s);
    }
    c.save(out.join("samples.aqt"))?;
    save_grid(&samples, &out.join("grid.png"))?;
    let mse = match reference {
        Some(r) => {
            let rm = Model::load(r, cfg.sampler.use_lut)?;
            let rs = draw(rm.denoiser(), cfg, &classes)?;
            Some(
                samples
                    .iter()
                    .zip(&rs)
                    .map(|(a, b)| a.mse(b))
                    .collect::<aquant::Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let report = SampleReport {
        model: model.to_path_buf(),
        classes,
        reference: reference.map(Path::to_path_buf),
        mse,
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    cfg.write_beside(&out)?;
    Ok(out)
}

/// Tiles the first three channels of each `[C, H, W]` sample as RGB, values
/// in [-1, 1] mapped to [0, 255].
pub fn save_grid(samples: &[Tensor], path: &Path) -> Result<()> {
    let Some(first) = samples.first() else {
        bail!("no samples to tile");
    };
    let (c, h, w) = match first.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!("samples of shape {s:?} cannot be tiled"),
    };
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    let rows = samples.len().div_ceil(cols);
    let mut img = image::RgbImage::new((cols * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32);
    for (i, s) in samples.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|ch| {
                    let v = if ch < c {
                        s.data()[(ch * h + y) * w + x]
                    } else {
                        0.0
                    };
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                });
                img.put_pixel((c0 + x) as u32, (r0 + y) as u32, image::Rgb(px));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub standard_flops: u64,
    pub lut_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub layers: Vec<LayerFlops>,
    pub standard_flops: u64,
    pub lut_flops: u64,
    pub savings_fraction: f64,
    pub breakpoints: Vec<BreakpointReport>,
}

/// FLOPs of every kernel-aware 3x3 layer, standard against lookup-table
/// convolution.
pub fn flops_summary(q: &QuantizedModel) -> Result<FlopsSummary> {
    let net = &q.model;
    let x = Tensor::zeros(&net.config().sample_shape());
    let trace = net.forward_traced(&x, 0, None, None)?;
    let mut layers = Vec::new();
    for (&l, ql) in &q.layers {
        if ql.kind != LayerKind::Conv3x3 || ql.layout.g != 9 {
            continue;
        }
        let input = trace
            .layer_input(l)
            .context("layer input missing from trace")?;
        let [c_in, h, w] = input.shape() else {
            bail!("unexpected input shape {:?}", input.shape());
        };
        let (c_in, h, w) = (*c_in, *h, *w);
        let c_out = ql.layout.shape[0];
        let r = flops_lut(
            c_out as u64,
            c_in as u64,
            h as u64,
            w as u64,
            3,
            3,
            ql.m() as u64,
            ql.n_bits,
        );
        layers.push(LayerFlops {
            id: ql.id.clone(),
            c_in,
            c_out,
            h,
            w,
            m: ql.m(),
            standard_flops: r.standard_flops,
            lut_flops: r.lut_flops,
        });
    }
    let standard: u64 = layers.iter().map(|l| l.standard_flops).sum();
    let lut: u64 = layers.iter().map(|l| l.lut_flops).sum();
    Ok(FlopsSummary {
        layers,
        standard_flops: standard,
        lut_flops: lut,
        savings_fraction: if standard == 0 {
            0.0
        } else {
            1.0 - lut as f64 / standard as f64
        },
        breakpoints: vec![],
    })
}

/// As [`flops_summary`], plus the break-even output-channel counts of a 3x3
/// kernel for 1..=4 codebooks.
pub fn cmd_flops(model: &Path) -> Result<FlopsSummary> {
    if !QuantizedModel::is_saved_at(model) {
        bail!("{} is not a quantized model directory", model.display());
    }
    let q = QuantizedModel::load(model)?;
    let mut f = flops_summary(&q)?;
    let k = q
        .layers
        .values()
        .next()
        .map_or(aquant::aq::N_BITS, |l| l.n_bits);
    f.breakpoints = (1..=4).map(|m| breakpoint_cout(m, k, 3, 3)).collect();
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerObjective {
    pub id: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub path: PathBuf,
    pub quantized: bool,
    pub bits: Option<BitsSummary>,
    pub layers: Vec<LayerObjective>,
    /// Mean per-element output MSE against the teacher on calibration inputs.
    pub probe_mse: Option<f64>,
    pub standard_flops: Option<u64>,
    pub lut_flops: Option<u64>,
    pub savings_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelReport>,
}

pub const REPORT_PROBES: usize = 128;

fn probe_set(cfg: &PipelineConfig) -> Result<Option<Vec<Sample>>> {
    let p = cfg.calib_path();
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(every_nth(
        &CalibSet::load(&p)?.inputs(),
        REPORT_PROBES,
    )))
}

/// Bits, objectives, teacher agreement and FLOPs for each model.
pub fn cmd_report(cfg: &PipelineConfig, models: &[PathBuf]) -> Result<Report> {
    if models.is_empty() {
        bail!("report needs at least one model");
    }
    let teacher = cfg
        .teacher_path()
        .exists()
        .then(|| load_teacher(cfg))
        .transpose()?;
    let probe = probe_set(cfg)?;
    let mut out = Vec::with_capacity(models.len());
    for path in models {
        let m = Model::load(path, false)?;
        let probe_mse = match (&teacher, &probe) {
            (Some(t), Some(p)) => Some(probe_mse_of(t, m.denoiser(), p)?),
            _ => None,
        };
        let mut r = ModelReport {
            path: path.clone(),
            quantized: false,
            bits: None,
            layers: vec![],
            probe_mse,
            standard_flops: None,
            lut_flops: None,
            savings_fraction: None,
        };
        if let Model::Quantized(q) = &m {
            let f = flops_summary(q)?;
            r.quantized = true;
            r.bits = Some(q.summary());
            r.layers = q
                .layers
                .values()
                .map(|l| LayerObjective {
                    id: l.id.clone(),
                    m: l.m(),
                    objective: l.objective(),
                })
                .collect();
            r.standard_flops = Some(f.standard_flops);
            r.lut_flops = Some(f.lut_flops);
            r.savings_fraction = Some(f.savings_fraction);
        }
        out.push(r);
    }
    Ok(Report { models: out })
}

fn probe_mse_of(teacher: &ToyUNet, model: &dyn Denoiser, probe: &[Sample]) -> Result<f64> {
    let per = probe
        .par_iter()
        .map(|(x, t, c)| {
            teacher
                .forward(x, *t, *c)?
                .0
                .mse(&model.predict(x, *t, *c)?)
        })
        .collect::<aquant::Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}
