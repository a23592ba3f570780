//! Plain-text tables for reports.

use std::fmt::Write as _;

use crate::commands::{FlopsSummary, Report};

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn report_table(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:>9} {:>9} {:>12} {:>12} {:>12} {:>8}",
        "model", "bits/w", "total", "probe_mse", "std_flops", "lut_flops", "saving"
    );
    for m in &r.models {
        let _ = writeln!(
            s,
            "{:<32} {:>9} {:>9} {:>12} {:>12} {:>12} {:>8}",
            m.path.display().to_string(),
            opt(m.bits.map(|b| format!("{:.3}", b.bits_per_weight))),
            opt(m.bits.map(|b| format!("{:.3}", b.bits_per_weight_total))),
            opt(m.probe_mse.map(|v| format!("{v:.3e}"))),
            opt(m.standard_flops),
            opt(m.lut_flops),
            opt(m.savings_fraction.map(|v| format!("{:.2}%", 100.0 * v))),
        );
        for l in &m.layers {
            let _ = writeln!(
                s,
                "  {:<30} M={} objective {}",
                l.id,
                l.m,
                opt(l.objective.map(|v| format!("{v:.4e}")))
            );
        }
    }
    s
}

pub fn flops_table(f: &FlopsSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>5} {:>5} {:>7} {:>3} {:>12} {:>12}",
        "layer", "c_in", "c_out", "hxw", "M", "standard", "lut"
    );
    for l in &f.layers {
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>5} {:>7} {:>3} {:>12} {:>12}",
            l.id,
            l.c_in,
            l.c_out,
            format!("{}x{}", l.h, l.w),
            l.m,
            l.standard_flops,
            l.lut_flops
        );
    }
    let _ = writeln!(
        s,
        "total standard {} lut {} saving {:.2}%",
        f.standard_flops,
        f.lut_flops,
        100.0 * f.savings_fraction
    );
    for b in &f.breakpoints {
        let _ = writeln!(
            s,
            "break-even M={} k={}: numeric {} closed form {:.3}{}",
            b.m,
            b.k,
            opt(b.numeric),
            b.closed_form,
            if b.discrepancy.is_some() {
                " [disagree]"
            } else {
                ""
            }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::{LayerObjective, ModelReport};
    use std::path::PathBuf;

    fn report() -> Report {
        Report {
            models: vec![ModelReport {
                path: PathBuf::from("q"),
                quantized: true,
                bits: None,
                layers: vec![LayerObjective {
                    id: "mid.conv1".into(),
                    m: 2,
                    objective: Some(0.5),
                }],
                probe_mse: Some(1e-3),
                standard_flops: Some(100),
                lut_flops: Some(90),
                savings_fraction: Some(0.1),
            }],
        }
    }

    #[test]
    fn table_has_header_and_one_row_per_model_and_layer() {
        let t = report_table(&report());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("model"));
        assert!(lines[1].contains("10.00%"));
        assert!(lines[2].contains("mid.conv1") && lines[2].contains("M=2"));
    }

    #[test]
    fn missing_values_print_as_dash() {
        let mut r = report();
        r.models[0].probe_mse = None;
        assert!(report_table(&r).lines().nth(1).unwrap().contains(" - "));
    }

    #[test]
    fn json_report_round_trips() {
        let r = report();
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&j).unwrap(), r);
    }
}
