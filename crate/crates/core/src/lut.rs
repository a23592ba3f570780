//! Lookup-table convolution for additively quantized 3x3 layers.
//!
//! Because convolution is linear in the kernel, the output channel `i` of a
//! layer with filters `W[i,j] = Σ_m C_m[code(i,j,m)]` is
//! `Σ_j Σ_m (x_j * C_m[code(i,j,m)])`. Phase 1 convolves every input channel
//! with every codebook entry once; phase 2 gathers the partial results
//! selected by the codes. The kernel is a reference implementation that can
//! count its own multiplications and additions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aq::{Grouping, QuantizedLayer};
use crate::error::{dim_err, Error, Result};
use crate::nn::{ForwardHooks, LayerKind};
use crate::tensor::Tensor;

/// Receives one event per scalar arithmetic operation.
pub trait OpCounter: Default + Send {
    fn mul(&mut self);
    fn add(&mut self);
    fn merge(&mut self, other: Self);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn mul(&mut self) {}
    #[inline(always)]
    fn add(&mut self) {}
    fn merge(&mut self, _: Self) {}
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub multiplications: u64,
    pub additions: u64,
}

impl OpCounter for OpCounts {
    fn mul(&mut self) {
        self.multiplications += 1;
    }
    fn add(&mut self) {
        self.additions += 1;
    }
    fn merge(&mut self, o: Self) {
        self.multiplications += o.multiplications;
        self.additions += o.additions;
    }
}

fn check_layout(q: &QuantizedLayer) -> Result<()> {
    let l = &q.layout;
    if q.kind != LayerKind::Conv3x3
        || l.g != 9
        || l.grouping != Grouping::RowChunks
        || l.shape.len() != 4
    {
        return Err(Error::Unsupported(format!(
            "lookup-table convolution needs a kernel-aware 3x3 layout, layer {} is {:?} g={} {:?}",
            q.id, q.kind, l.g, l.grouping
        )));
    }
    Ok(())
}

/// Same-padded 3x3 convolution of one channel with one kernel. Every output
/// pixel costs 9 multiplications and 8 additions, padding taps included.
fn conv_plane<C: OpCounter>(
    x: &[f32],
    h: usize,
    w: usize,
    k: &[f32],
    out: &mut [f32],
    ctr: &mut C,
) {
    for oy in 0..h {
        for ox in 0..w {
            let mut acc = 0.0f32;
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy + ky) as isize - 1;
                    let ix = (ox + kx) as isize - 1;
                    let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        0.0
                    } else {
                        x[iy as usize * w + ix as usize]
                    };
                    let p = k[ky * 3 + kx] * v;
                    ctr.mul();
                    if ky == 0 && kx == 0 {
                        acc = p;
                    } else {
                        acc += p;
                        ctr.add();
                    }
                }
            }
            out[oy * w + ox] = acc;
        }
    }
}

fn lut_conv_impl<C: OpCounter>(input: &Tensor, q: &QuantizedLayer) -> Result<(Tensor, C)> {
    check_layout(q)?;
    let [c_in, h, w] = input.dims3("lookup-table conv input")?;
    let (c_out, wc_in) = (q.layout.shape[0], q.layout.shape[1]);
    if wc_in != c_in {
        return dim_err(format!(
            "layer {} expects {wc_in} input channels, got {c_in}",
            q.id
        ));
    }
    let (m_books, k) = (q.m(), q.k());
    let hw = h * w;
    // P[m][c][j] as one buffer, (m, c, j)-major.
    let mut p = vec![0.0f32; m_books * k * c_in * hw];
    let c1 = p
        .par_chunks_mut(hw)
        .enumerate()
        .map(|(idx, out)| {
            let (mc, j) = (idx / c_in, idx % c_in);
            let (m, c) = (mc / k, mc % k);
            let kernel = &q.codebooks[m].data()[c * 9..(c + 1) * 9];
            let mut ctr = C::default();
            conv_plane(
                &input.data()[j * hw..(j + 1) * hw],
                h,
                w,
                kernel,
                out,
                &mut ctr,
            );
            ctr
        })
        .reduce(C::default, |mut a, b| {
            a.merge(b);
            a
        });
    let mut y = vec![0.0f32; c_out * hw];
    let c2 = y
        .par_chunks_mut(hw)
        .enumerate()
        .map(|(i, out)| {
            let mut ctr = C::default();
            for j in 0..c_in {
                let gi = i * c_in + j;
                for m in 0..m_books {
                    let base = ((m * k + q.code(gi, m)) * c_in + j) * hw;
                    for (o, &v) in out.iter_mut().zip(&p[base..base + hw]) {
                        *o += v;
                        ctr.add();
                    }
                }
            }
            ctr
        })
        .reduce(C::default, |mut a, b| {
            a.merge(b);
            a
        });
    let mut ctr = c1;
    ctr.merge(c2);
    Ok((Tensor::new(vec![c_out, h, w], y)?, ctr))
}

/// `[C_in, h, w] -> [C_out, h, w]`, bias excluded.
pub fn lut_conv_forward(input: &Tensor, q: &QuantizedLayer) -> Result<Tensor> {
    Ok(lut_conv_impl::<NoCount>(input, q)?.0)
}

/// As [`lut_conv_forward`], also returning the operations performed.
pub fn lut_conv_forward_counted(input: &Tensor, q: &QuantizedLayer) -> Result<(Tensor, OpCounts)> {
    lut_conv_impl::<OpCounts>(input, q)
}

/// FLOPs of a plain non-batched convolution: one multiply and one add per
/// kernel tap per output element.
pub fn flops_standard(c_out: u64, c_in: u64, h: u64, w: u64, h1: u64, w1: u64) -> u64 {
    c_out * c_in * h * w * h1 * w1 * 2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub standard_flops: u64,
    pub lut_flops: u64,
    pub multiplications: u64,
    pub additions: u64,
    pub savings_fraction: f64,
}

/// Operation counts of the lookup-table path with `m` codebooks of `2^k`
/// entries.
#[allow(clippy::too_many_arguments)]
pub fn flops_lut(
    c_out: u64,
    c_in: u64,
    h: u64,
    w: u64,
    h1: u64,
    w1: u64,
    m: u64,
    k: u32,
) -> FlopsReport {
    let e = m << k;
    let multiplications = e * c_in * h * w * h1 * w1;
    let additions = e * c_in * h * w * (h1 * w1 - 1) + m * c_out * c_in * h * w;
    let standard_flops = flops_standard(c_out, c_in, h, w, h1, w1);
    let lut_flops = multiplications + additions;
    FlopsReport {
        standard_flops,
        lut_flops,
        multiplications,
        additions,
        savings_fraction: 1.0 - lut_flops as f64 / standard_flops as f64,
    }
}

pub const BREAKPOINT_SEARCH_LIMIT: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakpointReport {
    pub m: u64,
    pub k: u32,
    /// Smallest `C_out` with strictly fewer lookup-table FLOPs, or `None`
    /// when there is no crossover up to [`BREAKPOINT_SEARCH_LIMIT`].
    pub numeric: Option<u64>,
    /// `9(2^k − 1)M / (18 − M)`.
    pub closed_form: f64,
    /// Set whenever the closed form does not predict `numeric`, i.e. the
    /// smallest integer strictly above it differs.
    pub discrepancy: Option<String>,
}

/// Numeric crossover search. Both counts scale with `C_in·h·w`, so one
/// input channel and one pixel suffice.
pub fn breakpoint_cout(m: u64, k: u32, h1: u64, w1: u64) -> BreakpointReport {
    let numeric = (1..=BREAKPOINT_SEARCH_LIMIT).find(|&c| {
        let r = flops_lut(c, 1, 1, 1, h1, w1, m, k);
        r.lut_flops < r.standard_flops
    });
    let closed_form = 9.0 * ((1u64 << k) - 1) as f64 * m as f64 / (18.0 - m as f64);
    let predicted =
        (closed_form >= 0.0 && closed_form.is_finite()).then(|| closed_form.floor() as u64 + 1);
    let discrepancy = (predicted != numeric).then(|| {
        format!(
            "M={m} k={k}: numeric breakpoint {} vs closed form {closed_form:.3} (predicts {})",
            numeric.map_or("none".into(), |c| c.to_string()),
            predicted.map_or("none".into(), |c| c.to_string()),
        )
    });
    if let Some(d) = &discrepancy {
        log::warn!("{d}");
    }
    BreakpointReport {
        m,
        k,
        numeric,
        closed_form,
        discrepancy,
    }
}

/// Routes kernel-aware 3x3 layers through the lookup-table kernel; other
/// layers fall back to the model's own (reconstructed) weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LutHooks {
    pub layers: BTreeMap<usize, QuantizedLayer>,
}

impl LutHooks {
    pub fn new(layers: impl IntoIterator<Item = (usize, QuantizedLayer)>) -> Self {
        Self {
            layers: layers
                .into_iter()
                .filter(|(_, q)| check_layout(q).is_ok())
                .collect(),
        }
    }
}

impl ForwardHooks<f32> for LutHooks {
    fn conv(&self, layer: usize, x: &Tensor) -> Option<Result<Tensor>> {
        self.layers.get(&layer).map(|q| lut_conv_forward(x, q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aq::GroupLayout;
    use crate::rng::SeededRng;
    use crate::tensor::conv2d_direct;

    fn random_layer(
        c_in: usize,
        c_out: usize,
        m: usize,
        n_bits: u32,
        rng: &mut SeededRng,
    ) -> QuantizedLayer {
        let layout = GroupLayout::for_kind(LayerKind::Conv3x3, &[c_out, c_in, 3, 3]).unwrap();
        let k = 1usize << n_bits;
        let cbs = (0..m).map(|_| Tensor::randn(&[k, 9], 1.0, rng)).collect();
        let codes = (0..layout.n_groups * m)
            .map(|_| rng.below(k) as u8)
            .collect();
        QuantizedLayer::new("l", LayerKind::Conv3x3, layout, n_bits, cbs, codes).unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.sq_dist(b).unwrap().sqrt() / b.sum_sq().sqrt().max(1e-30)
    }

    #[test]
    fn matches_reconstruct_then_direct_conv() {
        let mut rng = SeededRng::new(1);
        let q = random_layer(3, 8, 2, 4, &mut rng);
        let x = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
        let want = conv2d_direct(&x, &q.reconstruct(), 1).unwrap();
        let got = lut_conv_forward(&x, &q).unwrap();
        assert!(rel_err(&got, &want) < 1e-5);
    }

    #[test]
    fn shared_code_gives_identical_channels() {
        let mut rng = SeededRng::new(2);
        let mut q = random_layer(2, 4, 1, 3, &mut rng);
        q.codes.iter_mut().for_each(|c| *c = 5);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let y = lut_conv_forward(&x, &q).unwrap();
        let plane = 16;
        for i in 1..4 {
            assert_eq!(&y.data()[i * plane..(i + 1) * plane], &y.data()[..plane]);
        }
        let shared = Tensor::new(vec![1, 2, 3, 3], q.reconstruct().data()[..18].to_vec()).unwrap();
        let want = conv2d_direct(&x, &shared, 1).unwrap();
        assert!(
            rel_err(
                &Tensor::new(vec![1, 4, 4], y.data()[..plane].to_vec()).unwrap(),
                &want
            ) < 1e-6
        );
    }

    #[test]
    fn single_output_single_entry_is_one_direct_conv() {
        let mut rng = SeededRng::new(3);
        let mut q = random_layer(1, 1, 1, 1, &mut rng);
        q.codes = vec![0];
        let x = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
        let want = conv2d_direct(&x, &q.reconstruct(), 1).unwrap();
        assert_eq!(lut_conv_forward(&x, &q).unwrap(), want);
    }

    #[test]
    fn non_kernel_aware_layouts_rejected() {
        let layout = GroupLayout::new(&[2, 2, 3, 3], 8, Grouping::RowChunks).unwrap();
        let q = QuantizedLayer::new(
            "l",
            LayerKind::Conv3x3,
            layout.clone(),
            2,
            vec![Tensor::zeros(&[4, 8])],
            vec![0; layout.n_groups],
        )
        .unwrap();
        assert!(matches!(
            lut_conv_forward(&Tensor::zeros(&[2, 3, 3]), &q),
            Err(Error::Unsupported(_))
        ));
        let layout = GroupLayout::new(&[4, 16], 8, Grouping::RowChunks).unwrap();
        let q = QuantizedLayer::new(
            "l",
            LayerKind::Linear,
            layout,
            2,
            vec![Tensor::zeros(&[4, 8])],
            vec![0; 8],
        )
        .unwrap();
        assert!(lut_conv_forward(&Tensor::zeros(&[2, 3, 3]), &q).is_err());
    }

    #[test]
    fn counted_operations_match_formula() {
        let mut rng = SeededRng::new(4);
        for (c_in, c_out, h, w, m, n) in
            [(1, 1, 1, 1, 1, 1), (3, 8, 5, 6, 2, 4), (4, 2, 7, 3, 3, 2)]
        {
            let q = random_layer(c_in, c_out, m, n, &mut rng);
            let x = Tensor::randn(&[c_in, h, w], 1.0, &mut rng);
            let (_, got) = lut_conv_forward_counted(&x, &q).unwrap();
            let r = flops_lut(
                c_out as u64,
                c_in as u64,
                h as u64,
                w as u64,
                3,
                3,
                m as u64,
                n,
            );
            assert_eq!(got.multiplications, r.multiplications);
            assert_eq!(got.additions, r.additions);
        }
    }

    #[test]
    fn standard_flops_examples() {
        assert_eq!(flops_standard(1, 1, 1, 1, 1, 1), 2);
        assert_eq!(flops_standard(64, 32, 16, 16, 3, 3), 9_437_184);
        assert_eq!(flops_standard(128, 32, 16, 16, 3, 3), 2 * 9_437_184);
    }

    #[test]
    fn lut_formula_instances() {
        let r = flops_lut(7, 3, 4, 5, 3, 3, 1, 0);
        assert_eq!(r.multiplications, 3 * 4 * 5 * 9);
        assert_eq!(r.multiplications + r.additions, r.lut_flops);
        assert_eq!(r.savings_fraction > 0.0, r.lut_flops < r.standard_flops);
        // Only the gather term depends on C_out.
        let a = flops_lut(10, 3, 4, 5, 3, 3, 2, 4);
        let b = flops_lut(11, 3, 4, 5, 3, 3, 2, 4);
        assert_eq!(a.multiplications, b.multiplications);
        assert_eq!(b.additions - a.additions, 2 * 3 * 4 * 5);
    }

    #[test]
    fn breakpoint_grows_with_codebook_size() {
        for m in 1..=4 {
            let bps: Vec<u64> = (0..=8)
                .map(|k| breakpoint_cout(m, k, 3, 3).numeric.unwrap())
                .collect();
            assert!(bps.windows(2).all(|p| p[1] > p[0]), "{bps:?}");
        }
    }

    #[test]
    fn breakpoint_single_entry_and_reported_discrepancy() {
        let r = breakpoint_cout(1, 0, 3, 3);
        // With one shared entry a single output channel ties (18 vs 18), so
        // the lookup path is strictly cheaper only from two channels on.
        assert_eq!(r.numeric, Some(2));
        assert_eq!(r.closed_form, 0.0);
        assert!(r.discrepancy.is_some());
        // Itemized counts give C_out > 17·M·2^k / (18 − M).
        let r = breakpoint_cout(2, 8, 3, 3);
        assert_eq!(r.numeric, Some(17 * 2 * 256 / 16 + 1));
        assert!(r.discrepancy.is_some());
        assert_eq!(breakpoint_cout(18, 1, 3, 3).numeric, None);
    }

    #[test]
    fn hook_replaces_conv_product() {
        let cfg = crate::nn::ModelConfig::default();
        let mut rng = SeededRng::new(5);
        let mut model = crate::nn::ToyUNet::init(&cfg, &mut rng).unwrap();
        let i = crate::nn::layer::DOWN1[0];
        let s = &model.specs()[i];
        let q = random_layer(s.c_in, s.c_out, 2, 3, &mut rng);
        model.set_weight(i, q.reconstruct()).unwrap();
        let hooks = LutHooks::new([(i, q)]);
        let x = Tensor::randn(&cfg.sample_shape(), 1.0, &mut rng);
        let a = model.forward(&x, 10, Some(0)).unwrap().0;
        let b = model
            .forward_traced(&x, 10, Some(0), Some(&hooks))
            .unwrap()
            .output;
        assert!(rel_err(&b, &a) < 1e-5);
    }
}
