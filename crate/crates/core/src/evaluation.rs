//! Mask quality metrics: mean size, size/distortion and size/oracle-size
//! correlations, and coverage of the distortion constraint.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::TripletDataset;
use crate::distortion::DistortionSpec;
use crate::error::{invalid, Error, Result};
use crate::tensor::Mask;

/// Sample Pearson correlation, `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(invalid(format!("correlation of {} and {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid("correlation needs at least two values"));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Ok(None);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Fraction of records whose masked distortion is at most `alpha`.
/// `masks` follows the dataset's id order.
pub fn coverage(test: &TripletDataset, masks: &[Mask], d: &DistortionSpec, alpha: f64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty { what: "test split" });
    }
    if masks.len() != test.len() {
        return Err(invalid(format!("{} masks for {} records", masks.len(), test.len())));
    }
    let mut hits = 0usize;
    for (r, m) in test.iter().zip(masks) {
        if d.masked(m, &r.y, &r.y_hat)? <= alpha {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Linearly interpolated empirical quantile at position `q (n - 1)`.
pub fn threshold_from_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty { what: "distortion sample" });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Mean with a 95% normal-approximation interval.
pub fn mean_ci(values: &[f64]) -> (f64, [f64; 2]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, [mean, mean]);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.959963984540054 * (var / n).sqrt();
    (mean, [mean - half, mean + half])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mean_size: f64,
    pub size_ci95: [f64; 2],
    pub corr_size_distortion: Option<f64>,
    pub corr_size_opt: Option<f64>,
    pub coverage: f64,
    pub alpha: f64,
    pub beta: f64,
    pub distortion_id: String,
    pub sample_count: usize,
    pub correlation: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// The calibrated masks of one method over the test split, in id order.
#[derive(Debug, Clone)]
pub struct MethodMasks {
    pub method: String,
    pub masks: Vec<Mask>,
}

pub fn evaluate(
    test: &TripletDataset,
    methods: &[MethodMasks],
    opt_sizes: Option<&[f64]>,
    d: &DistortionSpec,
    alpha: f64,
    beta: f64,
) -> Result<Vec<EvalReport>> {
    if test.is_empty() {
        return Err(Error::Empty { what: "test split" });
    }
    let distortions = test
        .iter()
        .map(|r| d.distance(&r.y, &r.y_hat))
        .collect::<Result<Vec<_>>>()?;
    if let Some(o) = opt_sizes {
        if o.len() != test.len() {
            return Err(invalid(format!("{} oracle sizes for {} records", o.len(), test.len())));
        }
    }
    methods
        .iter()
        .map(|mm| {
            let sizes: Vec<f64> = mm.masks.iter().map(Mask::size).collect();
            let cov = coverage(test, &mm.masks, d, alpha)?;
            let (mean, ci) = mean_ci(&sizes);
            let mut notes = Vec::new();
            let corr_d = if sizes.len() >= 2 { pearson(&sizes, &distortions)? } else { None };
            if corr_d.is_none() {
                notes.push("C(M,D) undefined: zero variance".to_string());
            }
            let corr_opt = match opt_sizes {
                Some(o) if sizes.len() >= 2 => pearson(&sizes, o)?,
                Some(_) => None,
                None => {
                    notes.push("oracle masks missing: C(M,M_opt) not computed".to_string());
                    None
                }
            };
            if mm.method == "quantile" {
                notes.push("interval widths normalized by the per-image maximum".to_string());
            }
            Ok(EvalReport {
                method: mm.method.clone(),
                mean_size: mean,
                size_ci95: ci,
                corr_size_distortion: corr_d,
                corr_size_opt: corr_opt,
                coverage: cov,
                alpha,
                beta,
                distortion_id: d.id(),
                sample_count: sizes.len(),
                correlation: "pearson".into(),
                notes,
            })
        })
        .collect()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "method,mean_size,ci_low,ci_high,corr_size_distortion,corr_size_opt,coverage,alpha,beta,distortion,samples\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.mean_size,
            r.size_ci95[0],
            r.size_ci95[1],
            opt_cell(r.corr_size_distortion),
            opt_cell(r.corr_size_opt),
            r.coverage,
            r.alpha,
            r.beta,
            r.distortion_id,
            r.sample_count
        );
    }
    out
}

pub fn reports_to_json(reports: &[EvalReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)? + "\n")
}

pub fn reports_from_json(text: &str) -> Result<Vec<EvalReport>> {
    Ok(serde_json::from_str(text)?)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"320\" viewBox=\"0 0 420 320\">\n\
         <rect width=\"420\" height=\"320\" fill=\"white\"/>\n\
         <text x=\"210\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"50\" y1=\"280\" x2=\"400\" y2=\"280\" stroke=\"black\"/>\n\
         <line x1=\"50\" y1=\"280\" x2=\"50\" y2=\"40\" stroke=\"black\"/>\n{body}</svg>\n"
    )
}

/// Overlaid mask-size histograms on `[0, 1]`, one outline per method.
pub fn svg_histogram(title: &str, series: &[(&str, &[f64])], bins: usize) -> String {
    let bins = bins.max(1);
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0; bins];
            for &x in v.iter() {
                c[((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let bw = 350.0 / bins as f64;
    let mut body = String::new();
    for (k, ((name, _), c)) in series.iter().zip(&counts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        for (b, &n) in c.iter().enumerate() {
            let y = 280.0 - 240.0 * n as f64 / top;
            let _ = write!(pts, "{:.1},{:.1} {:.1},{:.1} ", 50.0 + b as f64 * bw, y, 50.0 + (b + 1) as f64 * bw, y);
        }
        let _ = writeln!(body, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.trim_end());
        let _ = writeln!(
            body,
            "<text x=\"300\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>",
            50 + 14 * k
        );
    }
    let _ = writeln!(body, "<text x=\"225\" y=\"305\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">mask size</text>");
    svg_frame(title, &body)
}

/// Scatter of `ys` against `xs`, both assumed in `[0, 1]`.
pub fn svg_scatter(title: &str, xs: &[f64], ys: &[f64], x_label: &str, y_label: &str) -> String {
    let mut body = String::new();
    for (x, y) in xs.iter().zip(ys) {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            50.0 + 350.0 * x.clamp(0.0, 1.0),
            280.0 - 240.0 * y.clamp(0.0, 1.0),
            PALETTE[0]
        );
    }
    let _ = writeln!(body, "<text x=\"225\" y=\"305\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{x_label}</text>");
    let _ = writeln!(
        body,
        "<text x=\"15\" y=\"160\" transform=\"rotate(-90 15 160)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{y_label}</text>"
    );
    svg_frame(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, TripletRecord};
    use crate::tensor::{Image, Shape};
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[2.0; 4], &a).unwrap(), None);
        assert!(pearson(&a, &a[..3]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((threshold_from_quantile(&v, 0.1).unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(threshold_from_quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(threshold_from_quantile(&[0.3; 7], 0.4).unwrap(), 0.3);
        assert!(threshold_from_quantile(&[], 0.1).is_err());
    }

    fn tiny_test_set() -> TripletDataset {
        (0..4)
            .map(|i| {
                let s = Shape::flat(3);
                let y = Image::filled(s, 0.1 * (i + 1) as f64);
                TripletRecord::new(format!("t{i}"), y.clone(), Image::zeros(s), y, Split::Test).unwrap()
            })
            .collect()
    }

    #[test]
    fn coverage_examples() {
        let ds = tiny_test_set();
        let s = Shape::flat(3);
        let zeros = vec![Mask::zeros(s); 4];
        assert_eq!(coverage(&ds, &zeros, &DistortionSpec::L1, 0.0).unwrap(), 1.0);
        let ones = vec![Mask::ones(s); 4];
        assert_eq!(coverage(&ds, &ones, &DistortionSpec::L1, 1.25).unwrap(), 1.0);
        assert_eq!(coverage(&ds, &ones, &DistortionSpec::L1, 0.65).unwrap(), 0.5);
        assert!(coverage(&TripletDataset::default(), &[], &DistortionSpec::L1, 0.1).is_err());
    }

    #[test]
    fn uniform_masks_have_undefined_correlation() {
        let ds = tiny_test_set();
        let s = Shape::flat(3);
        let methods = [MethodMasks {
            method: "ones".into(),
            masks: vec![Mask::filled(s, 0.4); 4],
        }];
        let r = &evaluate(&ds, &methods, None, &DistortionSpec::L1, 0.5, 0.9).unwrap()[0];
        assert_eq!(r.corr_size_distortion, None);
        assert_eq!(r.corr_size_opt, None);
        assert!(r.notes.iter().any(|n| n.contains("oracle")));
        assert!((r.mean_size - 0.6).abs() < 1e-12);
        let text = reports_to_json(std::slice::from_ref(r)).unwrap();
        assert_eq!(reports_from_json(&text).unwrap()[0], *r);
        let csv = reports_to_csv(std::slice::from_ref(r));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("ones,0.6"));
    }

    #[test]
    fn correlated_sizes() {
        let ds = tiny_test_set();
        let s = Shape::flat(3);
        let masks: Vec<Mask> = (0..4).map(|i| Mask::filled(s, 1.0 - 0.2 * i as f64)).collect();
        let opt: Vec<f64> = masks.iter().map(Mask::size).collect();
        let methods = [MethodMasks { method: "ours".into(), masks }];
        let r = &evaluate(&ds, &methods, Some(&opt), &DistortionSpec::L1, 10.0, 0.9).unwrap()[0];
        assert!((r.corr_size_distortion.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.corr_size_opt.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn svg_outputs_are_documents() {
        let a = [0.1, 0.2, 0.25, 0.9];
        let h = svg_histogram("sizes", &[("ours", &a[..]), ("uni", &a[..])], 10);
        assert!(h.starts_with("<svg") && h.trim_end().ends_with("</svg>"));
        assert_eq!(h.matches("<polyline").count(), 2);
        let s = svg_scatter("ours vs opt", &a, &a, "opt", "ours");
        assert_eq!(s.matches("<circle").count(), 4);
    }

    proptest! {
        #[test]
        fn pearson_is_bounded(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Some(c) = pearson(&a, &b).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn threshold_lies_between_extremes(v in prop::collection::vec(-5.0f64..5.0, 1..30), q in 0.0f64..=1.0) {
            let t = threshold_from_quantile(&v, q).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= t && t <= hi);
        }
    }
}
