//! Beam search for the codes of a single group under a quadratic objective
//! `f(u) = uᵀHu − 2uᵀb`, where `u` is the sum of the selected entries.

use std::cmp::Ordering;

/// `H` of one group together with `cᵀHc` for every codebook entry.
pub(crate) struct GroupMetric<'a> {
    pub h: &'a [f64],
    pub chc: &'a [Vec<f64>],
}

pub(crate) fn entry_norms(h: &[f64], cb: &[Vec<f64>], g: usize) -> Vec<Vec<f64>> {
    cb.iter()
        .map(|c| c.chunks(g).map(|e| quad(h, e, e, g)).collect())
        .collect()
}

/// `xᵀHy`
pub(crate) fn quad(h: &[f64], x: &[f64], y: &[f64], g: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..g {
        if x[i] == 0.0 {
            continue;
        }
        let row = &h[i * g..(i + 1) * g];
        s += x[i] * row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

pub(crate) fn objective(h: &[f64], b: &[f64], u: &[f64], g: usize) -> f64 {
    quad(h, u, u, g) - 2.0 * u.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

fn recon(cb: &[Vec<f64>], codes: &[u8], g: usize) -> Vec<f64> {
    let mut u = vec![0.0; g];
    for (m, &c) in codes.iter().enumerate() {
        let e = &cb[m][c as usize * g..(c as usize + 1) * g];
        u.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    u
}

/// Best code tuple found by a width-`beam` search that sweeps the codebooks
/// in order, trying every entry of the current codebook for every beam
/// member. Equal scores prefer the lexicographically smaller tuple.
pub(crate) fn search_group(
    cb: &[Vec<f64>],
    g: usize,
    metric: &GroupMetric,
    b: &[f64],
    current: &[u8],
    beam: usize,
) -> Vec<u8> {
    let h = metric.h;
    let k = cb[0].len() / g;
    let mut beams: Vec<Vec<u8>> = vec![current.to_vec()];
    for m in 0..cb.len() {
        // (score, beam index, entry)
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(beams.len() * k);
        for (bi, codes) in beams.iter().enumerate() {
            let mut r = recon(cb, codes, g);
            let old = &cb[m][codes[m] as usize * g..(codes[m] as usize + 1) * g];
            r.iter_mut().zip(old).for_each(|(a, o)| *a -= o);
            let mut v = vec![0.0; g];
            for i in 0..g {
                v[i] = h[i * g..(i + 1) * g]
                    .iter()
                    .zip(&r)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
                    - b[i];
            }
            let base = objective(h, b, &r, g);
            for e in 0..k {
                let c = &cb[m][e * g..(e + 1) * g];
                let s = base
                    + 2.0 * c.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>()
                    + metric.chc[m][e];
                cands.push((s, bi, e));
            }
        }
        let code_at = |&(_, bi, e): &(f64, usize, usize), j: usize| -> u8 {
            if j == m {
                e as u8
            } else {
                beams[bi][j]
            }
        };
        let width = current.len();
        let lex = |a: &(f64, usize, usize), b: &(f64, usize, usize)| -> Ordering {
            for j in 0..width {
                match code_at(a, j).cmp(&code_at(b, j)) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            Ordering::Equal
        };
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lex(a, b)));
        let mut next: Vec<Vec<u8>> = Vec::with_capacity(beam);
        for c in &cands {
            let codes: Vec<u8> = (0..width).map(|j| code_at(c, j)).collect();
            if !next.contains(&codes) {
                next.push(codes);
                if next.len() == beam {
                    break;
                }
            }
        }
        beams = next;
    }
    beams.swap_remove(0)
}
