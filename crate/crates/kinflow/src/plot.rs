//! Hand-written SVG: energy curves with interquartile bands and KPE box
//! summaries per stratum. Output depends only on the inputs; coordinates
//! are printed with fixed precision so re-renders are byte-identical.

use std::fmt::Write;

use kinflow_core::synthdata::{LabeledDataset, Stratum};
use kinflow_core::Error as CoreError;

use crate::error::Result;
use crate::formats::Trace;

const W: f64 = 960.0;
const H: f64 = 420.0;
const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 300.0;
const TOP: f64 = 50.0;
const LEFTS: [f64; 2] = [70.0, 550.0];
const POWER_FLOOR: f64 = 1e-12;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and quartiles across trajectories at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
}

impl Band {
    pub fn argmax_mean(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mean.iter().enumerate() {
            if m > self.mean[best] {
                best = i;
            }
        }
        best
    }
}

fn band(
    traces: &[Trace],
    x: impl Fn(&Trace) -> &[f64],
    y: impl Fn(&Trace) -> &[f64],
) -> Result<Band> {
    let first = traces
        .first()
        .ok_or_else(|| CoreError::InvalidArgument("no traces to plot".into()))?;
    let xs = x(first).to_vec();
    if traces.iter().any(|t| x(t) != xs.as_slice() || y(t).len() != xs.len()) {
        return Err(CoreError::InvalidArgument("traces do not share one time grid".into()).into());
    }
    let n = traces.len() as f64;
    let mut b = Band {
        mean: Vec::with_capacity(xs.len()),
        q1: Vec::with_capacity(xs.len()),
        q3: Vec::with_capacity(xs.len()),
        x: xs,
    };
    let mut col = Vec::with_capacity(traces.len());
    for j in 0..b.x.len() {
        col.clear();
        col.extend(traces.iter().map(|t| y(t)[j]));
        b.mean.push(col.iter().sum::<f64>() / n);
        col.sort_by(f64::total_cmp);
        b.q1.push(quantile(&col, 0.25));
        b.q3.push(quantile(&col, 0.75));
    }
    Ok(b)
}

pub fn cumulative_band(traces: &[Trace]) -> Result<Band> {
    band(traces, |t| &t.times, |t| &t.cum_kpe)
}

pub fn power_band(traces: &[Trace]) -> Result<Band> {
    band(traces, |t| &t.eval_times, |t| &t.power)
}

/// A labelled set of traces drawn in one colour.
#[derive(Debug, Clone)]
pub struct Series<'a> {
    pub label: &'a str,
    pub traces: &'a [Trace],
}

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn polyline(xs: &Axis, ys: &Axis, x: &[f64], y: &[f64]) -> String {
    let mut s = String::new();
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        let _ = write!(s, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, xs.map(*a), ys.map(*b));
    }
    s
}

fn band_path(xs: &Axis, ys: &Axis, x: &[f64], lo: &[f64], hi: &[f64]) -> String {
    let mut s = polyline(xs, ys, x, hi);
    for (a, b) in x.iter().zip(lo).rev() {
        let _ = write!(s, " L{:.2},{:.2}", xs.map(*a), ys.map(*b));
    }
    s.push_str(" Z");
    s
}

fn frame(out: &mut String, left: f64, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{TOP:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="#333"/>"##
    );
    let cx = left + PANEL_W / 2.0;
    let _ = writeln!(out, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{title}</text>"#, TOP - 12.0);
    let _ = writeln!(
        out,
        r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#,
        TOP + PANEL_H + 38.0
    );
    let cy = TOP + PANEL_H / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{cy:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {cy:.2})">{ylabel}</text>"#,
        left - 50.0,
        left - 50.0
    );
}

fn ticks(out: &mut String, xs: &Axis, ys: &Axis, left: f64, ylabels: &[(f64, String)]) {
    for k in 0..=5 {
        let v = xs.lo + (xs.hi - xs.lo) * k as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#,
            xs.map(v),
            TOP + PANEL_H + 16.0
        );
    }
    for (v, label) in ylabels {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            left - 6.0,
            ys.map(*v) + 4.0
        );
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, "<title>{title}</title>");
    s
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let x = LEFTS[0] + 130.0 * i as f64;
        let y = H - 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="14" height="10" fill="{}"/><text x="{:.2}" y="{y:.2}">{l}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Left: cumulative KPE. Right: instantaneous power on a log10 axis. Each
/// series is its mean curve over an interquartile band.
pub fn energy_svg(title: &str, series: &[Series<'_>]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.traces.is_empty()) {
        return Err(CoreError::InvalidArgument("empty trace set".into()).into());
    }
    let mut cum = Vec::new();
    let mut pow = Vec::new();
    for s in series {
        cum.push(cumulative_band(s.traces)?);
        let mut b = power_band(s.traces)?;
        for v in b.mean.iter_mut().chain(&mut b.q1).chain(&mut b.q3) {
            *v = v.max(POWER_FLOOR).log10();
        }
        pow.push(b);
    }
    let range = |bs: &[Band], f: fn(&Band) -> (&Vec<f64>, &Vec<f64>)| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for b in bs {
            let (a, c) = f(b);
            for v in a.iter().chain(c) {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        (lo, hi)
    };
    let (_, cum_hi) = range(&cum, |b| (&b.q3, &b.mean));
    let (p_lo, _) = range(&pow, |b| (&b.q1, &b.mean));
    let (_, p_hi) = range(&pow, |b| (&b.q3, &b.mean));
    let (p_lo, p_hi) = (p_lo.floor(), p_hi.ceil().max(p_lo.floor() + 1.0));

    let mut out = header(&escape(title));
    let labels: Vec<&str> = series.iter().map(|s| s.label).collect();
    for (panel, left) in LEFTS.iter().enumerate() {
        let xs = Axis::new(0.0, 1.0, *left, left + PANEL_W);
        let (ys, bands, ylabels): (Axis, &[Band], Vec<(f64, String)>) = if panel == 0 {
            let ys = Axis::new(0.0, cum_hi.max(1e-12), TOP + PANEL_H, TOP);
            let l = (0..=4)
                .map(|k| {
                    let v = ys.hi * k as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect();
            (ys, &cum, l)
        } else {
            let l = (p_lo as i64..=p_hi as i64).map(|e| (e as f64, format!("1e{e}")));
            (Axis::new(p_lo, p_hi, TOP + PANEL_H, TOP), &pow, l.collect())
        };
        let (title, ylabel) = if panel == 0 {
            ("cumulative kinetic energy", "KPE(t)")
        } else {
            ("instantaneous power", "|v|^2")
        };
        frame(&mut out, *left, title, "t", ylabel);
        ticks(&mut out, &xs, &ys, *left, &ylabels);
        for (i, b) in bands.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<path d="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
                band_path(&xs, &ys, &b.x, &b.q1, &b.q3)
            );
            let _ = writeln!(
                out,
                r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
                polyline(&xs, &ys, &b.x, &b.mean)
            );
        }
    }
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Min, quartiles and max of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

impl BoxStats {
    pub fn new(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            n: v.len(),
        })
    }
}

/// KPE of each trace grouped by the stratum of its endpoint's nearest
/// training point, in [`Stratum::ALL`] order; empty strata are dropped.
pub fn kpe_by_stratum(traces: &[Trace], data: &LabeledDataset) -> Result<Vec<(Stratum, BoxStats)>> {
    let mut groups: Vec<(Stratum, Vec<f64>)> = Stratum::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for t in traces {
        let i = data
            .nearest(&t.endpoint())
            .ok_or_else(|| CoreError::InvalidArgument("empty training set".into()))?;
        let kpe = *t.cum_kpe.last().expect("a trace has at least one grid point");
        groups
            .iter_mut()
            .find(|(s, _)| *s == data.strata[i])
            .expect("every stratum is listed")
            .1
            .push(kpe);
    }
    Ok(groups
        .into_iter()
        .filter_map(|(s, v)| BoxStats::new(&v).map(|b| (s, b)))
        .collect())
}

/// Box summaries of KPE per stratum, one box per (series, stratum), on a
/// log10 axis.
pub fn strata_svg(title: &str, series: &[Series<'_>], data: &LabeledDataset) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.traces.is_empty()) {
        return Err(CoreError::InvalidArgument("empty trace set".into()).into());
    }
    let groups: Vec<Vec<(Stratum, BoxStats)>> = series
        .iter()
        .map(|s| kpe_by_stratum(s.traces, data))
        .collect::<Result<_>>()?;
    let strata: Vec<Stratum> = Stratum::ALL
        .into_iter()
        .filter(|st| groups.iter().any(|g| g.iter().any(|(s, _)| s == st)))
        .collect();
    let lg = |v: f64| v.max(POWER_FLOOR).log10();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, b) in groups.iter().flatten() {
        lo = lo.min(lg(b.min));
        hi = hi.max(lg(b.max));
    }
    let (lo, hi) = (lo.floor(), hi.ceil().max(lo.floor() + 1.0));
    let left = LEFTS[0];
    let width = W - 2.0 * left;
    let ys = Axis::new(lo, hi, TOP + PANEL_H, TOP);
    let mut out = header(&escape(title));
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{TOP:.2}" width="{width:.2}" height="{PANEL_H:.2}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">KPE by endpoint stratum</text>"#,
        left + width / 2.0,
        TOP - 12.0
    );
    for e in lo as i64..=hi as i64 {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#,
            left - 6.0,
            ys.map(e as f64) + 4.0
        );
    }
    let slot = width / strata.len() as f64;
    let bw = (slot * 0.7 / series.len() as f64).min(60.0);
    for (k, st) in strata.iter().enumerate() {
        let x0 = left + slot * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{st}</text>"#,
            x0 + slot / 2.0,
            TOP + PANEL_H + 16.0
        );
        for (i, g) in groups.iter().enumerate() {
            let Some((_, b)) = g.iter().find(|(s, _)| s == st) else {
                continue;
            };
            let c = PALETTE[i % PALETTE.len()];
            let x = x0 + slot * 0.15 + bw * i as f64;
            let mid = x + bw / 2.0;
            let _ = writeln!(
                out,
                r#"<line x1="{mid:.2}" y1="{:.2}" x2="{mid:.2}" y2="{:.2}" stroke="{c}"/>"#,
                ys.map(lg(b.min)),
                ys.map(lg(b.max))
            );
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
                x + 2.0,
                ys.map(lg(b.q3)),
                bw - 4.0,
                ys.map(lg(b.q1)) - ys.map(lg(b.q3))
            );
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{c}" stroke-width="2"/>"#,
                x + 2.0,
                ys.map(lg(b.median)),
                x + bw - 2.0,
                ys.map(lg(b.median))
            );
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kinflow_core::efm::EfmField;
    use kinflow_core::field::FnField;
    use kinflow_core::sampler::{sample_batch, SolverConfig, SolverMethod, EFM_DELTA_CUT};
    use kinflow_core::synthdata::{generate, DatasetKind};

    fn traces<F: kinflow_core::VelocityField>(f: &F, cfg: &SolverConfig, m: usize) -> Vec<Trace> {
        sample_batch(f, m, cfg, 0.6)
            .unwrap()
            .trajectories
            .iter()
            .map(Trace::from_trajectory)
            .collect()
    }

    #[test]
    fn constant_velocity_cumulative_curve_is_linear() {
        let f = FnField::new(2, |_: &[f64], _t, o: &mut [f64]| {
            o[0] = 3.0;
            o[1] = -4.0;
        });
        let tr = traces(&f, &SolverConfig::default(), 1);
        let b = cumulative_band(&tr).unwrap();
        for (t, y) in b.x.iter().zip(&b.mean) {
            assert!((y - 12.5 * t).abs() < 1e-12, "{t} {y}");
        }
        assert_eq!(b.q1, b.mean);
    }

    #[test]
    fn efm_power_peaks_at_last_grid_point() {
        let data = generate(DatasetKind::DenseSparse, 200, 1).unwrap();
        let f = EfmField::from_points(&data.points, Some(100)).unwrap();
        let cfg = SolverConfig {
            method: SolverMethod::Midpoint,
            steps: 100,
            delta_cut: EFM_DELTA_CUT,
            seed: 0,
        };
        let b = power_band(&traces(&f, &cfg, 50)).unwrap();
        assert_eq!(b.argmax_mean(), b.x.len() - 1);
    }

    #[test]
    fn rendering_is_deterministic_and_rejects_empty_input() {
        let data = generate(DatasetKind::DenseSparse, 60, 1).unwrap();
        let f = EfmField::from_points(&data.points, None).unwrap();
        let cfg = SolverConfig {
            steps: 30,
            delta_cut: EFM_DELTA_CUT,
            ..SolverConfig::default()
        };
        let tr = traces(&f, &cfg, 30);
        let s = [Series { label: "efm", traces: &tr }];
        let a = energy_svg("x", &s).unwrap();
        assert_eq!(a, energy_svg("x", &s).unwrap());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        let b = strata_svg("x", &s, &data).unwrap();
        assert_eq!(b, strata_svg("x", &s, &data).unwrap());
        let empty = [Series { label: "none", traces: &[] }];
        for e in [energy_svg("x", &empty).unwrap_err(), strata_svg("x", &empty, &data).unwrap_err()] {
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.5), 2.5);
        let b = BoxStats::new(&[5.0, 1.0, 3.0]).unwrap();
        assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(BoxStats::new(&[]).is_none());
    }
}
