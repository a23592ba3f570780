//! One line per acceptance criterion, `PASS` or `FAIL` with the measured
//! numbers. Lines go straight to stdout so they show even when the harness
//! captures output.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use aquant::aq::*;
use aquant::diffusion::NoiseSchedule;
use aquant::distill::*;
use aquant::greedy::*;
use aquant::lut::*;
use aquant::nn::*;
use aquant::quantized::QuantizedModel;
use aquant::tensor::conv2d_direct;
use aquant::trajectory::*;
use aquant::{SeededRng, Tensor};
use aquant_cli::*;

type Outcome = (bool, String);

fn criterion(n: usize, name: &str, body: impl FnOnce() -> Outcome) {
    let (ok, detail) = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{}", line.trim_end());
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sq_dist(b).unwrap().sqrt() / b.sum_sq().sqrt().max(1e-30)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Teacher, trajectories and a stage-one model shared by the model-level
/// criteria.
struct Toy {
    teacher: ToyUNet,
    store: TrajectoryStore,
    heldout: TrajectoryStore,
    layers: Vec<usize>,
    grams: Vec<Gram>,
    ladders: Vec<Vec<QuantizedLayer>>,
    q1: QuantizedModel,
}

const CALIB_SIZE: usize = 512;
const TRAJ_STEPS: usize = 25;
const CFG_SCALE: f32 = 7.5;

fn toy() -> &'static Toy {
    static T: OnceLock<Toy> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = ModelConfig::default();
        let (teacher, _) = train_teacher(&cfg, &TeacherConfig::default(), 10).unwrap();
        let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
        let gen = |n, seed| {
            generate_trajectories(
                &teacher,
                &sched,
                n,
                TRAJ_STEPS,
                CFG_SCALE,
                cfg.n_classes,
                seed,
                None,
            )
            .unwrap()
        };
        let store = gen(64, 10);
        let heldout = gen(16, 11);
        let cs = CalibSet::from_store(&store, CALIB_SIZE).unwrap();
        let layers = teacher.quantizable_layers();
        let grams = collect_grams(&teacher, &cs.inputs(), &layers).unwrap();
        let ladders =
            calibrate_ladder(&teacher, &grams, &layers, 2, &CalibConfig::default(), 10).unwrap();
        let m1: BTreeMap<_, _> = layers
            .iter()
            .zip(&ladders)
            .map(|(&l, r)| (l, r[0].clone()))
            .collect();
        let q1 = QuantizedModel::new(&teacher, m1, None).unwrap();
        Toy {
            teacher,
            store,
            heldout,
            layers,
            grams,
            ladders,
            q1,
        }
    })
}

fn random_conv_layer(c_out: usize, c_in: usize, m: usize, rng: &mut SeededRng) -> QuantizedLayer {
    let layout = GroupLayout::for_kind(LayerKind::Conv3x3, &[c_out, c_in, 3, 3]).unwrap();
    let codebooks = (0..m).map(|_| Tensor::randn(&[256, 9], 0.3, rng)).collect();
    let codes = (0..layout.n_groups * m)
        .map(|_| rng.below(256) as u8)
        .collect();
    QuantizedLayer::new("conv", LayerKind::Conv3x3, layout, 8, codebooks, codes).unwrap()
}

#[test]
fn c01_kernel_equivalence() {
    criterion(
        1,
        "lookup-table kernel equals reconstruct + direct conv",
        || {
            let mut rng = SeededRng::new(1);
            let mut worst = 0.0f64;
            let n = 60;
            for _ in 0..n {
                let (ci, co) = (1 + rng.below(12), 1 + rng.below(12));
                let (h, w) = (1 + rng.below(10), 1 + rng.below(10));
                let m = 1 + rng.below(4);
                let q = random_conv_layer(co, ci, m, &mut rng);
                let x = Tensor::randn(&[ci, h, w], 1.0, &mut rng);
                let a = lut_conv_forward(&x, &q).unwrap();
                let b = conv2d_direct(&x, &q.reconstruct(), 1).unwrap();
                worst = worst.max(rel_err(&a, &b));
            }
            (
                worst <= 1e-5,
                format!("{n} configs, worst relative error {worst:.2e}"),
            )
        },
    );
}

#[test]
fn c02_flops_fidelity() {
    criterion(
        2,
        "instrumented operation counts equal the FLOPs formula",
        || {
            let mut rng = SeededRng::new(2);
            let mut mismatches = 0;
            let n = 16;
            for _ in 0..n {
                let (ci, co) = (1 + rng.below(10), 1 + rng.below(10));
                let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
                let m = 1 + rng.below(4);
                let q = random_conv_layer(co, ci, m, &mut rng);
                let x = Tensor::randn(&[ci, h, w], 1.0, &mut rng);
                let (_, c) = lut_conv_forward_counted(&x, &q).unwrap();
                let f = flops_lut(co as u64, ci as u64, h as u64, w as u64, 3, 3, m as u64, 8);
                if c.multiplications != f.multiplications || c.additions != f.additions {
                    mismatches += 1;
                }
            }
            let mut lines = Vec::new();
            let mut consistent = true;
            for m in 1..=4 {
                let b = breakpoint_cout(m, 8, 3, 3);
                let c = b.numeric.unwrap();
                let below = |c: u64| {
                    let r = flops_lut(c, 1, 1, 1, 3, 3, m, 8);
                    r.lut_flops < r.standard_flops
                };
                consistent &= below(c) && (c == 1 || !below(c - 1));
                let predicted = b.closed_form.floor() as u64 + 1;
                consistent &= b.discrepancy.is_some() == (predicted != c);
                lines.push(format!(
                    "M={m} numeric {c} closed form {:.1}{}",
                    b.closed_form,
                    if b.discrepancy.is_some() {
                        " flagged"
                    } else {
                        ""
                    }
                ));
            }
            (
                mismatches == 0 && consistent,
                format!(
                    "{n} configs, {mismatches} mismatches; break-even {}",
                    lines.join(", ")
                ),
            )
        },
    );
}

#[test]
fn c03_calibration_soundness() {
    criterion(
        3,
        "calibration monotone, exact when representable, warm start monotone",
        || {
            let t = toy();
            let mut rising = 0;
            let mut warm_worse = 0;
            let mut small_worst = 0.0f64;
            let mut small = 0;
            for ((&l, ladder), gram) in t.layers.iter().zip(&t.ladders).zip(&t.grams) {
                for q in ladder {
                    rising += q.history.windows(2).filter(|w| w[1] > w[0]).count();
                }
                if ladder[1].objective().unwrap() > ladder[0].objective().unwrap() {
                    warm_worse += 1;
                }
                let spec = &t.teacher.specs()[l];
                if ladder[0].n_groups() <= 256 {
                    small += 1;
                    small_worst = small_worst.max(ladder[0].objective().unwrap());
                }
                // The same layer rebuilt from 200 distinct groups.
                let layout = GroupLayout::for_kind(spec.kind, &spec.weight_shape()).unwrap();
                let mut rng = SeededRng::new(l as u64);
                let distinct = Tensor::randn(&[200, layout.g], 0.1, &mut rng);
                let groups = Tensor::from_fn(&[layout.n_groups, layout.g], |k| {
                    let (i, s) = (k / layout.g, k % layout.g);
                    distinct.data()[(i % 200) * layout.g + s]
                });
                let w = layout.scatter(&groups).unwrap();
                let q = calibrate_layer(
                    &spec.id,
                    spec.kind,
                    &w,
                    gram,
                    1,
                    &CalibConfig::default(),
                    &mut rng,
                )
                .unwrap();
                small_worst = small_worst.max(q.objective().unwrap());
                small += 1;
            }
            (
                rising == 0 && warm_worse == 0 && small_worst <= 1e-10,
                format!(
                    "{} layers: {rising} rising rounds, {warm_worse} warm starts worse, \
                 worst objective over {small} representable layers {small_worst:.1e}",
                    t.layers.len()
                ),
            )
        },
    );
}

/// Per-weight MSE of one-codebook k-means quantization with group size `g`,
/// given `code_bits` bits of codes for the whole tensor.
fn kaq_mse(w: &Tensor, g: usize, code_bits: f64, rng: &mut SeededRng) -> f64 {
    let grouping = if g == 9 {
        Grouping::RowChunks
    } else {
        Grouping::Flat
    };
    let layout = GroupLayout::new(w.shape(), g, grouping).unwrap();
    let groups = layout.gather(w).unwrap();
    let k = (code_bits / layout.n_groups as f64).exp2().ceil() as usize;
    let (cent, assign) = kmeans(&groups, k.min(layout.n_groups), 25, rng);
    let recon = Tensor::from_fn(&[layout.n_groups, g], |i| {
        cent.data()[assign[i / g] * g + i % g]
    });
    layout.scatter(&recon).unwrap().mse(w).unwrap()
}

#[test]
fn c04_kernel_aware_grouping() {
    criterion(
        4,
        "nine-weight groups beat eight and ten at equal bits",
        || {
            let mut rng = SeededRng::new(4);
            let (mut m8, mut m9, mut m10) = (vec![], vec![], vec![]);
            for _ in 0..11 {
                let (co, ci) = (28 + rng.below(13), 28 + rng.below(13));
                let patterns: Tensor = Tensor::randn(&[16, 9], 1.0 / 3.0, &mut rng);
                let mut w = Tensor::zeros(&[co, ci, 3, 3]);
                for f in 0..co * ci {
                    let p = rng.below(16);
                    let s = rng.normal_f64() as f32;
                    for k in 0..9 {
                        w.data_mut()[f * 9 + k] =
                            s * patterns.data()[p * 9 + k] + 0.01 * rng.normal_f64() as f32;
                    }
                }
                let bits = (co * ci) as f64 * 8.0;
                m8.push(kaq_mse(&w, 8, bits, &mut rng));
                m9.push(kaq_mse(&w, 9, bits, &mut rng));
                m10.push(kaq_mse(&w, 10, bits, &mut rng));
            }
            let (a, b, c) = (median(m8), median(m9), median(m10));
            (
                b < a && b < c,
                format!("median per-weight MSE g=8 {a:.3e}, g=9 {b:.3e}, g=10 {c:.3e}"),
            )
        },
    );
}

fn random_table(n: usize, unit: u64, rng: &mut SeededRng) -> SensitivityTable {
    let mut delta = Vec::new();
    let mut size = Vec::new();
    for _ in 0..n {
        let mut d = rng.uniform_range(0.1, 2.0) as f64;
        let mut s = unit * (4 + rng.below(40) as u64);
        let (mut dr, mut sr) = (vec![], vec![]);
        for _ in 0..4 {
            dr.push(d);
            sr.push(s);
            d *= rng.uniform_range(0.1, 0.9) as f64;
            s += unit * (4 + rng.below(40) as u64);
        }
        delta.push(dr);
        size.push(sr);
    }
    SensitivityTable {
        layers: (0..n).map(|i| format!("l{i}")).collect(),
        ms: vec![1, 2, 3, 4],
        delta,
        size_bits: size,
        full_bits: vec![u64::MAX / 64; n],
    }
}

fn exhaustive(t: &SensitivityTable, budget: u64) -> f64 {
    let n = t.len();
    let mut best = f64::INFINITY;
    for code in 0..4usize.pow(n as u32) {
        let level: Vec<usize> = (0..n).map(|i| code / 4usize.pow(i as u32) % 4).collect();
        let bits: u64 = (0..n).map(|i| t.size_bits[i][level[i]]).sum();
        if bits <= budget {
            best = best.min((0..n).map(|i| t.delta[i][level[i]]).sum());
        }
    }
    best
}

#[test]
fn c05_greedy_quality() {
    criterion(
        5,
        "greedy allocation within budget and near the exact optimum",
        || {
            let unit = 1024;
            let mut rng = SeededRng::new(5);
            let mut over = 0;
            let mut ratios = Vec::new();
            for _ in 0..100 {
                let t = random_table(6, unit, &mut rng);
                let (lo, hi) = (t.min_bits(), t.uniform_bits(3));
                let budget = lo + (rng.uniform_f64() * (hi - lo) as f64) as u64;
                let g = greedy_solve(&t, budget).unwrap();
                let d = dp_solve(&t, budget, unit).unwrap();
                over += usize::from(g.total_bits > budget || d.total_bits > budget);
                ratios.push(if d.total_cost > 0.0 {
                    g.total_cost / d.total_cost
                } else {
                    1.0
                });
            }
            let mut dp_wrong = 0;
            for n in 1..=4 {
                for _ in 0..25 {
                    let t = random_table(n, unit, &mut rng);
                    let (lo, hi) = (t.min_bits(), t.uniform_bits(3));
                    let budget = lo + (rng.uniform_f64() * (hi - lo) as f64) as u64;
                    let d = dp_solve(&t, budget, unit).unwrap();
                    dp_wrong += usize::from((d.total_cost - exhaustive(&t, budget)).abs() > 1e-12);
                }
            }
            let worst = ratios.iter().cloned().fold(1.0, f64::max);
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            (
                over == 0
                    && dp_wrong == 0
                    && worst <= 1.25
                    && ratios.iter().all(|&r| r >= 1.0 - 1e-12),
                format!(
                "100 tables: {over} over budget, greedy/optimum worst {worst:.4} mean {mean:.4}; \
                 exact solver vs enumeration: {dp_wrong}/100 differ"
            ),
            )
        },
    );
}

fn fd_check(fd: f64, an: f64) -> f64 {
    if (fd - an).abs() < 1e-10 {
        0.0
    } else {
        (fd - an).abs() / fd.abs().max(an.abs())
    }
}

#[test]
fn c06_gradient_correctness() {
    criterion(6, "analytic gradients match central differences", || {
        let eps = 1e-3;
        let mut worst = 0.0f64;
        let mut checked = 0;
        // Model parameters under loss ½‖out‖² + ½‖features‖².
        let mut rng = SeededRng::new(6);
        let mut m: ToyUNet<f64> = ToyUNet::<f32>::init(&ModelConfig::default(), &mut rng)
            .unwrap()
            .cast();
        let x = Tensor::<f64>::randn(&[4, 8, 8], 1.0, &mut rng);
        let (t, cls) = (137, Some(1));
        let loss = |m: &ToyUNet<f64>| {
            let (o, f) = m.forward(&x, t, cls).unwrap();
            (o.sum_sq() + f.iter().map(Tensor::sum_sq).sum::<f64>()) / 2.0
        };
        let tr = m.forward_traced(&x, t, cls, None).unwrap();
        let g = m.backward(&tr, &tr.output, Some(&tr.features)).unwrap();
        for i in 0..m.specs().len() {
            let n = m.weight(i).len();
            for k in [0, n / 3, n / 2, n - 1] {
                let orig = m.weight(i).data()[k];
                m.weight_mut(i).data_mut()[k] = orig + eps;
                let fp = loss(&m);
                m.weight_mut(i).data_mut()[k] = orig - eps;
                let fm = loss(&m);
                m.weight_mut(i).data_mut()[k] = orig;
                worst = worst.max(fd_check((fp - fm) / (2.0 * eps), g.weights[i].data()[k]));
                checked += 1;
            }
            let k = m.bias(i).len() / 2;
            let orig = m.bias(i).data()[k];
            m.bias_mut(i).data_mut()[k] = orig + eps;
            let fp = loss(&m);
            m.bias_mut(i).data_mut()[k] = orig - eps;
            let fm = loss(&m);
            m.bias_mut(i).data_mut()[k] = orig;
            worst = worst.max(fd_check((fp - fm) / (2.0 * eps), g.biases[i].data()[k]));
            checked += 1;
        }
        let k = m.class_embed().shape()[1] + 3;
        let orig = m.class_embed().data()[k];
        m.class_embed_mut().data_mut()[k] = orig + eps;
        let fp = loss(&m);
        m.class_embed_mut().data_mut()[k] = orig - eps;
        let fm = loss(&m);
        worst = worst.max(fd_check((fp - fm) / (2.0 * eps), g.class_embed.data()[k]));
        checked += 1;

        // Calibration objective with respect to codebook entries.
        let w = Tensor::randn(&[6, 4, 3, 3], 0.5, &mut rng);
        let acts = Tensor::randn(&[36, 50], 1.0, &mut rng);
        let gram = Gram::from_activations(&acts).unwrap();
        let cc = CalibConfig {
            n_bits: 3,
            max_rounds: 2,
            ..Default::default()
        };
        let q = calibrate_layer("c", LayerKind::Conv3x3, &w, &gram, 2, &cc, &mut rng).unwrap();
        let cbs: Vec<Tensor<f64>> = q.codebooks.iter().map(Tensor::cast).collect();
        let cg = codebook_gradient(&w, &q.layout, &q.codes, &cbs, &gram).unwrap();
        for mi in 0..2 {
            for k in 0..cbs[mi].len() {
                let mut p = cbs.clone();
                p[mi].data_mut()[k] += eps;
                let fp = codebook_objective(&w, &q.layout, &q.codes, &p, &gram).unwrap();
                p[mi].data_mut()[k] -= 2.0 * eps;
                let fm = codebook_objective(&w, &q.layout, &q.codes, &p, &gram).unwrap();
                worst = worst.max(fd_check((fp - fm) / (2.0 * eps), cg[mi].data()[k]));
                checked += 1;
            }
        }

        // Distillation loss with respect to student outputs and features.
        let mk = |s: &[usize], rng: &mut SeededRng| Tensor::<f64>::randn(s, 1.0, rng);
        let b = 3;
        let to: Vec<_> = (0..b).map(|_| mk(&[4, 8, 8], &mut rng)).collect();
        let so: Vec<_> = (0..b).map(|_| mk(&[4, 8, 8], &mut rng)).collect();
        let tf: Vec<_> = (0..b)
            .map(|_| vec![mk(&[16, 8, 8], &mut rng), mk(&[32, 4, 4], &mut rng)])
            .collect();
        let sf: Vec<_> = (0..b)
            .map(|_| vec![mk(&[16, 8, 8], &mut rng), mk(&[32, 4, 4], &mut rng)])
            .collect();
        let div = [0.7, 3.0, 12.0];
        let l = distill_loss(&to, &so, &tf, &sf, 0.3, &div).unwrap();
        let dl = |so: &[Tensor<f64>], sf: &[Vec<Tensor<f64>>]| {
            distill_loss(&to, so, &tf, sf, 0.3, &div).unwrap().loss
        };
        for i in 0..b {
            for k in [0, 100, 255] {
                let mut p = so.clone();
                p[i].data_mut()[k] += eps;
                let mut q = so.clone();
                q[i].data_mut()[k] -= eps;
                let fd = (dl(&p, &sf) - dl(&q, &sf)) / (2.0 * eps);
                worst = worst.max(fd_check(fd, l.d_out[i].data()[k]));
                checked += 1;
            }
            for j in 0..2 {
                let mut p = sf.clone();
                p[i][j].data_mut()[7] += eps;
                let mut q = sf.clone();
                q[i][j].data_mut()[7] -= eps;
                let fd = (dl(&so, &p) - dl(&so, &q)) / (2.0 * eps);
                worst = worst.max(fd_check(fd, l.d_feats[i][j].data()[7]));
                checked += 1;
            }
        }
        (
            worst <= 1e-4,
            format!("{checked} coordinates, worst relative error {worst:.2e}"),
        )
    });
}

/// Post-stage-one to post-distillation ratio of held-out probe error that
/// must be reached.
const DISTILL_FACTOR: f64 = 0.5;

#[test]
fn c07_distillation_efficacy() {
    criterion(
        7,
        "distillation at least halves held-out probe error",
        || {
            let t = toy();
            let probe: Vec<Sample> = t
                .heldout
                .records()
                .iter()
                .map(|r| (r.x_t.clone(), r.t, Some(r.cls)))
                .collect();
            let before = probe_mse(&t.teacher, &t.q1, &probe).unwrap();
            let cfg = DistillConfig {
                steps: 2000,
                ..Default::default()
            };
            let mut s = t.q1.clone();
            let r = run_distillation(&t.teacher, &mut s, &t.store, &cfg, None).unwrap();
            let after = probe_mse(&t.teacher, &s, &probe).unwrap();
            let ratio = after / before;
            (
            ratio <= DISTILL_FACTOR,
            format!(
                "probe MSE {before:.3e} -> {after:.3e}, ratio {ratio:.3} (target {DISTILL_FACTOR}), \
                 {} codes changed",
                r.groups_changed
            ),
        )
        },
    );
}

#[test]
fn c08_momentum_invalidation() {
    criterion(
        8,
        "momentum invalidation under trajectory-aware sampling",
        || {
            let t = toy();
            let cfg = t.teacher.config();
            let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
            let probe: Vec<Sample> = t
                .store
                .records()
                .iter()
                .step_by(7)
                .take(200)
                .map(|r| (r.x_t.clone(), r.t, Some(r.cls)))
                .collect();
            let prof = compute_timestep_profile(&t.teacher, &t.q1, &t.store, 8).unwrap();
            let loss = |m: &QuantizedModel| {
                probe
                    .iter()
                    .map(|(x, tt, c)| {
                        let a = t.teacher.forward(x, *tt, *c).unwrap().0;
                        let b = m.forward(x, *tt, *c).unwrap().0;
                        a.sq_dist(&b).unwrap() / prof.divisor(*tt)
                    })
                    .sum::<f64>()
                    / probe.len() as f64
            };
            let baseline = loss(&t.q1);
            let epochs = 5;
            let mut curves: [Vec<Vec<f64>>; 2] = [vec![], vec![]];
            for seed in 0..5u64 {
                let store = generate_trajectories(
                    &t.teacher,
                    &sched,
                    32,
                    TRAJ_STEPS,
                    CFG_SCALE,
                    cfg.n_classes,
                    100 + seed,
                    None,
                )
                .unwrap();
                for (slot, inv) in [true, false].into_iter().enumerate() {
                    let dc = DistillConfig {
                        strategy: Strategy::TrajectoryAware,
                        steps: TRAJ_STEPS * epochs,
                        batch_size: 32,
                        invalidate_momentum: inv,
                        seed: 100 + seed,
                        ..Default::default()
                    };
                    let mut s = t.q1.clone();
                    let mut v = Vec::new();
                    let mut hook = |_: usize, m: &QuantizedModel| {
                        v.push(loss(m));
                        Ok(())
                    };
                    run_distillation(&t.teacher, &mut s, &store, &dc, Some(&mut hook)).unwrap();
                    curves[slot].push(v);
                }
            }
            let med = |c: &Vec<Vec<f64>>| -> Vec<f64> {
                (0..epochs)
                    .map(|e| median(c.iter().map(|v| v[e]).collect()))
                    .collect()
            };
            let (inv, no) = (med(&curves[0]), med(&curves[1]));
            let not_worse = inv.iter().zip(&no).all(|(a, b)| a <= b);
            let below = inv[..3].iter().any(|&l| l < baseline);
            let fmt = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x:.3}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            (
                not_worse && below,
                format!(
                    "baseline {baseline:.3}; median per epoch with invalidation [{}], without [{}]",
                    fmt(&inv),
                    fmt(&no)
                ),
            )
        },
    );
}

#[test]
fn c09_loss_normalization() {
    criterion(
        9,
        "normalized per-timestep loss near one at the start",
        || {
            let t = toy();
            let prof = compute_timestep_profile(&t.teacher, &t.q1, &t.store, 8).unwrap();
            let mut ratios = Vec::new();
            for &tt in &t.heldout.timesteps() {
                let samples: Vec<Sample> = t
                    .heldout
                    .indices_at(tt)
                    .into_iter()
                    .flat_map(|i| replays(&t.heldout, i))
                    .collect();
                let l: f64 = samples
                    .iter()
                    .map(|(x, tt, c)| {
                        let a = t.teacher.forward(x, *tt, *c).unwrap().0;
                        let b = t.q1.forward(x, *tt, *c).unwrap().0;
                        a.sq_dist(&b).unwrap()
                    })
                    .sum::<f64>()
                    / samples.len() as f64;
                ratios.push(l / prof.divisor(tt));
            }
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            (
                !prof.degenerate && lo >= 0.5 && hi <= 2.0,
                format!(
                    "{} timesteps, normalized loss in [{lo:.3}, {hi:.3}]",
                    ratios.len()
                ),
            )
        },
    );
}

fn run_pipeline(out: &Path) -> PathBuf {
    let sets: Vec<String> = [
        "teacher.steps=400",
        "calib.size=256",
        "trajectories.n_traj=16",
        "distill.steps=300",
        "sampler.n_samples=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("out_dir={}", serde_json::to_string(out).unwrap())])
    .collect();
    let cfg = PipelineConfig::resolve(None, None, &sets).unwrap();
    cmd_train_teacher(&cfg).unwrap();
    cmd_calibrate(&cfg).unwrap();
    cmd_quantize(&cfg).unwrap();
    cmd_gen_trajectories(&cfg).unwrap();
    cmd_distill(&cfg).unwrap();
    cmd_sample(&cfg, &cfg.student_dir(), Some(&cfg.teacher_path()), None).unwrap();
    cfg.out_dir
}

fn tree(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            tree(&p, root, out);
        } else {
            let mut bytes = std::fs::read(&p).unwrap();
            if p.extension().is_some_and(|e| e == "json") {
                let r = root.to_str().unwrap();
                bytes = String::from_utf8(bytes)
                    .unwrap()
                    .replace(r, "<out>")
                    .into_bytes();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
}

#[test]
fn c10_determinism() {
    criterion(
        10,
        "whole pipeline twice with one seed is byte identical",
        || {
            let dir = tempfile::tempdir().unwrap();
            let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
            let ra = run_pipeline(&dir.path().join("a"));
            let rb = run_pipeline(&dir.path().join("b"));
            tree(&ra, &ra, &mut a);
            tree(&rb, &rb, &mut b);
            let differ: Vec<_> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            let logs = ["teacher/train_loss.csv", "student/distill_log.csv"]
                .iter()
                .all(|p| a.contains_key(Path::new(p)));
            (
                differ.is_empty() && logs,
                format!("{} files compared, differing: {differ:?}", a.len()),
            )
        },
    );
}
