//! Verification metrics: VRMSE, band-split relative power-spectrum error,
//! spread-skill ratio, lead-time aggregation and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Field;
use crate::spectral::{signed_freq, Fft2};
use crate::{Error, Result};

pub const VRMSE_EPS: f64 = 1e-6;
pub const SPECTRUM_FLOOR: f64 = 1e-12;
pub const SKILL_FLOOR: f64 = 1e-12;

/// `sqrt(<(u - v)^2> / (<(u - <u>)^2> + eps))`.
pub fn vrmse(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Invalid(format!("vrmse on lengths {} and {}", u.len(), v.len())));
    }
    let n = u.len() as f64;
    let mean = u.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = u.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let mse = u.iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    Ok((mse / (var + VRMSE_EPS)).sqrt())
}

/// Per-channel VRMSE averaged over channels.
pub fn vrmse_field(u: &Field, v: &Field) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::Invalid(format!("vrmse_field shapes {:?} vs {:?}", u.shape(), v.shape())));
    }
    let c = u.channels();
    let mut acc = 0.0;
    for ch in 0..c {
        acc += vrmse(u.channel(ch), v.channel(ch))?;
    }
    Ok(acc / c as f64)
}

/// Isotropic power spectrum. `bins[k - 1]` holds the power of wavenumbers with
/// `k - 1/2 <= |k| < k + 1/2` for `k = 1..=N/2`. The mean mode and the corner
/// modes beyond `N/2 + 1/2` are reported separately so that
/// `sum(bins) + dc + corner = N^2 <u^2>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<f64>,
    pub dc: f64,
    pub corner: f64,
}

impl Spectrum {
    pub fn k_max(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum::<f64>() + self.dc + self.corner
    }
}

/// Spectrum of a row-major `[h, w]` grid; non-square grids are zero-padded to square.
pub fn isotropic_spectrum(u: &[f32], h: usize, w: usize) -> Result<Spectrum> {
    if u.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("spectrum of {} values on a {h}x{w} grid", u.len())));
    }
    let n = h.max(w);
    let padded;
    let grid = if h == w {
        u
    } else {
        let mut p = vec![0.0f32; n * n];
        for y in 0..h {
            p[y * n..y * n + w].copy_from_slice(&u[y * w..(y + 1) * w]);
        }
        padded = p;
        &padded[..]
    };
    let fft = Fft2::new(n, n);
    let coeffs = fft.forward_real(grid);
    let norm = (n * n) as f64;
    let k_max = n / 2;
    let mut bins = vec![0.0f64; k_max];
    let (mut dc, mut corner) = (0.0, 0.0);
    for ky in 0..n {
        for kx in 0..n {
            let p = coeffs[ky * n + kx].norm_sqr() / norm;
            let (fy, fx) = (signed_freq(ky, n) as f64, signed_freq(kx, n) as f64);
            let k = (fy * fy + fx * fx).sqrt().round() as usize;
            if k == 0 {
                dc += p;
            } else if k <= k_max {
                bins[k - 1] += p;
            } else {
                corner += p;
            }
        }
    }
    Ok(Spectrum { bins, dc, corner })
}

/// Log-spaced band edges `k_max^(1/3)` and `k_max^(2/3)`.
pub fn band_edges(k_max: usize) -> (f64, f64) {
    let k = k_max as f64;
    (k.powf(1.0 / 3.0), k.powf(2.0 / 3.0))
}

/// Band of integer wavenumber `k` (0 = low, 1 = mid, 2 = high).
pub fn band_of(k: usize, k_max: usize) -> usize {
    let (a, b) = band_edges(k_max);
    let k = k as f64;
    if k <= a {
        0
    } else if k <= b {
        1
    } else {
        2
    }
}

/// RMSE of `p_v / p_u - 1` per band, averaging over integer bins; `p_u` is floored at 1e-12.
pub fn spectrum_band_rmse(pu: &[f64], pv: &[f64]) -> Result<[f64; 3]> {
    if pu.len() != pv.len() || pu.is_empty() {
        return Err(Error::Invalid(format!("spectra of lengths {} and {}", pu.len(), pv.len())));
    }
    let k_max = pu.len();
    let mut sum = [0.0f64; 3];
    let mut count = [0usize; 3];
    for k in 1..=k_max {
        let b = band_of(k, k_max);
        let r = pv[k - 1] / pu[k - 1].max(SPECTRUM_FLOOR) - 1.0;
        sum[b] += r * r;
        count[b] += 1;
    }
    Ok(std::array::from_fn(|b| if count[b] == 0 { 0.0 } else { (sum[b] / count[b] as f64).sqrt() }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpreadSkill {
    pub skill: f64,
    pub spread: f64,
    /// `sqrt((K + 1) / K) * spread / skill`; `None` when `K < 2` or skill vanishes.
    pub ratio: Option<f64>,
}

/// Skill (RMSE of the ensemble mean) and spread (root spatial mean of the unbiased ensemble variance).
pub fn spread_skill(truth: &[f32], members: &[&[f32]]) -> Result<SpreadSkill> {
    let k = members.len();
    if k == 0 || members.iter().any(|m| m.len() != truth.len()) || truth.is_empty() {
        return Err(Error::Invalid("spread_skill needs equally sized, non-empty members".into()));
    }
    let n = truth.len() as f64;
    let (mut se, mut var) = (0.0f64, 0.0f64);
    for i in 0..truth.len() {
        let mean = members.iter().map(|m| m[i] as f64).sum::<f64>() / k as f64;
        se += (mean - truth[i] as f64).powi(2);
        if k > 1 {
            var += members.iter().map(|m| (m[i] as f64 - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        }
    }
    let skill = (se / n).sqrt();
    let spread = (var / n).sqrt();
    let ratio = (k > 1 && skill >= SKILL_FLOOR).then(|| ((k + 1) as f64 / k as f64).sqrt() * spread / skill);
    Ok(SpreadSkill { skill, spread, ratio })
}

/// Metrics of one field (channel) at one lead time, for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub field: String,
    pub lead_time: usize,
    /// VRMSE of the ensemble mean.
    pub vrmse: f64,
    /// Relative spectrum error per band, averaged over members.
    pub ps: [f64; 3],
    pub skill: f64,
    pub spread: f64,
    pub ssr: Option<f64>,
}

/// Compares an ensemble of predicted states against the truth, channel by channel.
pub fn evaluate_frame(truth: &Field, members: &[&Field], names: &[String], lead_time: usize) -> Result<Vec<FrameMetrics>> {
    let [c, h, w] = truth.shape();
    if members.is_empty() || members.iter().any(|m| m.shape() != truth.shape()) {
        return Err(Error::Invalid("ensemble members must match the truth's shape".into()));
    }
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let u = truth.channel(ch);
        let vs: Vec<&[f32]> = members.iter().map(|m| m.channel(ch)).collect();
        let k = vs.len() as f64;
        let mean: Vec<f32> = (0..u.len()).map(|i| (vs.iter().map(|v| v[i] as f64).sum::<f64>() / k) as f32).collect();
        let pu = isotropic_spectrum(u, h, w)?;
        let mut ps = [0.0; 3];
        for v in &vs {
            let pv = isotropic_spectrum(v, h, w)?;
            let b = spectrum_band_rmse(&pu.bins, &pv.bins)?;
            for j in 0..3 {
                ps[j] += b[j] / k;
            }
        }
        let ss = spread_skill(u, &vs)?;
        out.push(FrameMetrics {
            field: names.get(ch).cloned().unwrap_or_else(|| format!("c{ch}")),
            lead_time,
            vrmse: vrmse(u, &mean)?,
            ps,
            skill: ss.skill,
            spread: ss.spread,
            ssr: ss.ratio,
        });
    }
    Ok(out)
}

/// One CSV row: per emulator, compression, field and lead time (or horizon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub emulator: String,
    pub compression: String,
    pub field: String,
    /// Lead-time index, or a horizon label such as `1:10`.
    pub lead_time: String,
    pub vrmse: f64,
    pub ps_low: f64,
    pub ps_mid: f64,
    pub ps_high: f64,
    pub skill: f64,
    pub spread: f64,
    pub ssr: Option<f64>,
}

pub const CSV_HEADER: &str = "emulator,compression,field,lead_time,vrmse,ps_low,ps_mid,ps_high,skill,spread,ssr";

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.emulator,
            self.compression,
            self.field,
            self.lead_time,
            fmt(self.vrmse),
            fmt(self.ps_low),
            fmt(self.ps_mid),
            fmt(self.ps_high),
            fmt(self.skill),
            fmt(self.spread),
            self.ssr.map(fmt).unwrap_or_default()
        )
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    vals: [f64; 6],
    ssr_n: usize,
    ssr: f64,
}

impl Acc {
    fn push(&mut self, m: &FrameMetrics) {
        self.n += 1;
        for (a, v) in self.vals.iter_mut().zip([m.vrmse, m.ps[0], m.ps[1], m.ps[2], m.skill, m.spread]) {
            *a += v;
        }
        if let Some(r) = m.ssr {
            self.ssr += r;
            self.ssr_n += 1;
        }
    }

    fn row(&self, emulator: &str, compression: &str, field: &str, lead: String) -> MetricRow {
        let n = self.n.max(1) as f64;
        let v = self.vals.map(|x| x / n);
        MetricRow {
            emulator: emulator.into(),
            compression: compression.into(),
            field: field.into(),
            lead_time: lead,
            vrmse: v[0],
            ps_low: v[1],
            ps_mid: v[2],
            ps_high: v[3],
            skill: v[4],
            spread: v[5],
            ssr: (self.ssr_n > 0).then(|| self.ssr / self.ssr_n as f64),
        }
    }
}

/// Averages over trajectories per (field, lead time), over channels into the
/// `all` field, and over each inclusive lead-time window `a:b`.
pub fn aggregate(
    emulator: &str,
    compression: &str,
    stream: &[FrameMetrics],
    horizons: &[(usize, usize)],
) -> Vec<MetricRow> {
    let mut per: BTreeMap<(String, usize), Acc> = BTreeMap::new();
    let mut all: BTreeMap<usize, Acc> = BTreeMap::new();
    for m in stream {
        per.entry((m.field.clone(), m.lead_time)).or_default().push(m);
        all.entry(m.lead_time).or_default().push(m);
    }
    let mut rows = Vec::new();
    let mut fields: Vec<String> = per.keys().map(|k| k.0.clone()).collect();
    fields.dedup();
    let mut emit = |field: &str, pick: &dyn Fn(&FrameMetrics) -> bool, table: &BTreeMap<usize, &Acc>| {
        for (&lead, acc) in table {
            rows.push(acc.row(emulator, compression, field, lead.to_string()));
        }
        for &(a, b) in horizons {
            let mut acc = Acc::default();
            stream.iter().filter(|m| pick(m) && (a..=b).contains(&m.lead_time)).for_each(|m| acc.push(m));
            if acc.n > 0 {
                rows.push(acc.row(emulator, compression, field, format!("{a}:{b}")));
            }
        }
    };
    for f in &fields {
        let table: BTreeMap<usize, &Acc> = per.iter().filter(|(k, _)| &k.0 == f).map(|(k, v)| (k.1, v)).collect();
        emit(f, &|m: &FrameMetrics| &m.field == f, &table);
    }
    let table: BTreeMap<usize, &Acc> = all.iter().map(|(k, v)| (*k, v)).collect();
    emit("all", &|_: &FrameMetrics| true, &table);
    rows
}

pub fn write_csv(path: &Path, rows: &[MetricRow], provenance: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(p) = provenance {
        writeln!(out, "# config {p}").unwrap();
    }
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(out, "{}", r.to_csv()).unwrap();
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads rows back; returns the provenance line (if any) and the rows.
pub fn read_csv(path: &Path) -> Result<(Option<String>, Vec<MetricRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut prov = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(p) = line.strip_prefix("# config ") {
            prov = Some(p.to_string());
            continue;
        }
        if line == CSV_HEADER || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(Error::format(path, format!("line {}: expected 11 columns, got {}", i + 1, cols.len())));
        }
        let num = |j: usize| -> Result<f64> {
            cols[j].parse().map_err(|_| Error::format(path, format!("line {}: bad number {:?}", i + 1, cols[j])))
        };
        rows.push(MetricRow {
            emulator: cols[0].into(),
            compression: cols[1].into(),
            field: cols[2].into(),
            lead_time: cols[3].into(),
            vrmse: num(4)?,
            ps_low: num(5)?,
            ps_mid: num(6)?,
            ps_high: num(7)?,
            skill: num(8)?,
            spread: num(9)?,
            ssr: if cols[10].is_empty() { None } else { Some(num(10)?) },
        });
    }
    Ok((prov, rows))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Line plot of one metric against lead time, one series per (emulator, compression).
pub fn svg_plot(rows: &[MetricRow], metric: &str, field: &str) -> Result<String> {
    let value = |r: &MetricRow| -> Option<f64> {
        match metric {
            "vrmse" => Some(r.vrmse),
            "ps_low" => Some(r.ps_low),
            "ps_mid" => Some(r.ps_mid),
            "ps_high" => Some(r.ps_high),
            "skill" => Some(r.skill),
            "spread" => Some(r.spread),
            "ssr" => r.ssr,
            _ => None,
        }
    };
    if !["vrmse", "ps_low", "ps_mid", "ps_high", "skill", "spread", "ssr"].contains(&metric) {
        return Err(Error::Invalid(format!("unknown metric {metric}")));
    }
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.field == field) {
        if let (Ok(lead), Some(v)) = (r.lead_time.parse::<f64>(), value(r)) {
            series.entry((r.emulator.clone(), r.compression.clone())).or_default().push((lead, v));
        }
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.values().flatten();
    let xmax = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let ymax = pts.map(|p| p.1).filter(|v| v.is_finite()).fold(1e-12, f64::max) * 1.05;
    let sx = |x: f64| m + (x / xmax) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y / ymax) * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">lead time</text>"#, w / 2.0, h - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{metric} ({field})</text>"#, h / 2.0, h / 2.0).unwrap();
    writeln!(s, r#"<text x="{m}" y="{}" text-anchor="end">0</text>"#, h - m + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.3}</text>"#, m - 4.0, m + 4.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xmax}</text>"#, w - m, h - m + 14.0).unwrap();
    for (i, ((emu, comp), points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{emu} {comp}</text>"#, w - m - 120.0, m + 14.0 * (i as f64 + 1.0)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
