//! Overlap and surface-distance metrics for binary masks, and the CSV report.
//!
//! Surfaces are foreground voxels with a background face neighbor (the grid
//! border counts as background). Surface distances are Euclidean in mm
//! between voxel centers, computed with an exact anisotropic distance
//! transform restricted to the bounding box of both surfaces.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

fn check_grid(pred: &LabelVolume, reference: &LabelVolume) -> Result<()> {
    let close = pred
        .spacing()
        .iter()
        .zip(reference.spacing())
        .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()));
    if !pred.same_grid(reference) || !close {
        return Err(Error::Usage(format!(
            "masks are on different grids: {:?}/{:?} vs {:?}/{:?}",
            pred.dims(),
            pred.spacing(),
            reference.dims(),
            reference.spacing()
        )));
    }
    Ok(())
}

/// `(|P|, |R|, |P ∩ R|)` over nonzero voxels.
fn counts(pred: &LabelVolume, reference: &LabelVolume) -> Result<(usize, usize, usize)> {
    check_grid(pred, reference)?;
    let (mut p, mut r, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        let (a, b) = (a != 0, b != 0);
        p += usize::from(a);
        r += usize::from(b);
        both += usize::from(a && b);
    }
    Ok((p, r, both))
}

/// `2|P ∩ R| / (|P| + |R|)`; 1 when both are empty.
pub fn dice(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let (p, r, both) = counts(pred, reference)?;
    Ok(if p + r == 0 { 1.0 } else { 2.0 * both as f64 / (p + r) as f64 })
}

/// `1 - |P ∩ R| / |P ∪ R|`; 0 when both are empty.
pub fn voe(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let (p, r, both) = counts(pred, reference)?;
    let union = p + r - both;
    Ok(if union == 0 { 0.0 } else { 1.0 - both as f64 / union as f64 })
}

/// Signed `(|P| - |R|) / |R|`.
pub fn rvd(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let (p, r, _) = counts(pred, reference)?;
    if r == 0 {
        return Err(Error::Data("relative volume difference is undefined for an empty reference".into()));
    }
    Ok((p as f64 - r as f64) / r as f64)
}

/// Foreground voxels with at least one background (or out-of-grid) face neighbor.
pub fn surface_voxels(mask: &LabelVolume) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.dims();
    let on = |x: usize, y: usize, z: usize| mask.get(x, y, z) != 0;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !on(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && y > 0
                    && z > 0
                    && x + 1 < nx
                    && y + 1 < ny
                    && z + 1 < nz
                    && on(x - 1, y, z)
                    && on(x + 1, y, z)
                    && on(x, y - 1, z)
                    && on(x, y + 1, z)
                    && on(x, y, z - 1)
                    && on(x, y, z + 1);
                if !interior {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform along a line with sample spacing
/// `s`: `out[p] = min_q s² (p - q)² + f[q]`, skipping infinite samples.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    let s2 = s * s;
    v.clear();
    zb.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if x <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && zb[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Squared mm distance from every voxel of a `dims` box to the nearest site.
fn squared_edt(dims: [usize; 3], spacing: [f64; 3], sites: impl Iterator<Item = [usize; 3]>) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut g = vec![f64::INFINITY; nx * ny * nz];
    for [x, y, z] in sites {
        g[idx(x, y, z)] = 0.0;
    }
    let mut v = Vec::new();
    let mut zb = Vec::new();
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut res = vec![0.0; longest];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for b in 0..o2 {
            for a in 0..o1 {
                let at = |t: usize| match axis {
                    0 => idx(t, a, b),
                    1 => idx(a, t, b),
                    _ => idx(a, b, t),
                };
                for t in 0..n {
                    line[t] = g[at(t)];
                }
                edt_1d(&line[..n], spacing[axis], &mut res[..n], &mut v, &mut zb);
                for t in 0..n {
                    g[at(t)] = res[t];
                }
            }
        }
    }
    g
}

/// Distances (mm) from each voxel of `from` to the nearest voxel of `to`.
fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for p in from.iter().chain(to) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let dims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let local = |p: &[usize; 3]| -> [usize; 3] { std::array::from_fn(|a| p[a] - lo[a]) };
    let g = squared_edt(dims, spacing, to.iter().map(local));
    from.iter()
        .map(|p| {
            let [x, y, z] = local(p);
            g[x + dims[0] * (y + dims[1] * z)].sqrt()
        })
        .collect()
}

fn symmetric_distances(pred: &LabelVolume, reference: &LabelVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid(pred, reference)?;
    let sp = surface_voxels(pred);
    let sr = surface_voxels(reference);
    if sp.is_empty() || sr.is_empty() {
        return Err(Error::Data("undefined surface distance: a mask is empty".into()));
    }
    let spacing = pred.spacing();
    Ok((directed_distances(&sp, &sr, spacing), directed_distances(&sr, &sp, spacing)))
}

/// Average symmetric surface distance in mm.
pub fn assd(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let (a, b) = symmetric_distances(pred, reference)?;
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64)
}

/// Maximum symmetric surface distance (surface Hausdorff distance) in mm.
pub fn mssd(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let (a, b) = symmetric_distances(pred, reference)?;
    Ok(a.iter().chain(&b).fold(0.0, |m, &d| m.max(d)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseReport {
    pub dice: f64,
    pub voe: f64,
    pub rvd: f64,
    pub assd_mm: f64,
    pub mssd_mm: f64,
}

impl CaseReport {
    fn values(&self) -> [f64; 5] {
        [self.dice, self.voe, self.rvd, self.assd_mm, self.mssd_mm]
    }
}

pub fn evaluate_case(pred: &LabelVolume, reference: &LabelVolume) -> Result<CaseReport> {
    let (a, b) = symmetric_distances(pred, reference)?;
    Ok(CaseReport {
        dice: dice(pred, reference)?,
        voe: voe(pred, reference)?,
        rvd: rvd(pred, reference)?,
        assd_mm: (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64,
        mssd_mm: a.iter().chain(&b).fold(0.0, |m, &d| m.max(d)),
    })
}

/// Arithmetic mean of each metric.
pub fn aggregate(reports: &[CaseReport]) -> Result<CaseReport> {
    if reports.is_empty() {
        return Err(Error::Data("cannot aggregate an empty list of reports".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&CaseReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(CaseReport {
        dice: mean(|r| r.dice),
        voe: mean(|r| r.voe),
        rvd: mean(|r| r.rvd),
        assd_mm: mean(|r| r.assd_mm),
        mssd_mm: mean(|r| r.mssd_mm),
    })
}

/// Six significant digits, `%g` style: fixed notation for exponents in
/// `[-5, 6)`, scientific otherwise, trailing zeros removed.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..6).contains(&exp) {
        trim(&format!("{:.*}", (5 - exp).max(0) as usize, x))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub const CSV_HEADER: [&str; 6] = ["case", "dice", "voe", "rvd", "assd_mm", "mssd_mm"];

/// Writes one row per case and a final `mean` row.
pub fn write_report_csv(out: impl Write, rows: &[(String, CaseReport)]) -> Result<()> {
    let reports: Vec<CaseReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = aggregate(&reports)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (name, r) in rows.iter().map(|(n, r)| (n.as_str(), r)).chain([("mean", &mean)]) {
        let mut rec = vec![name.to_string()];
        rec.extend(r.values().iter().map(|&v| format_sig(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report written by [`write_report_csv`]; the `mean` row, if
/// present, is returned like any other row.
pub fn read_report_csv(input: impl Read) -> Result<Vec<(String, CaseReport)>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Data(format!("reading CSV header: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Data(format!(
            "unexpected CSV header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("reading CSV row {}: {e}", line + 1)))?;
        let mut v = [0.0; 5];
        for (slot, field) in v.iter_mut().zip(rec.iter().skip(1)) {
            *slot = field
                .parse()
                .map_err(|_| Error::Data(format!("row {}: bad number {field:?}", line + 1)))?;
        }
        if rec.len() != 6 {
            return Err(Error::Data(format!("row {}: expected 6 fields, got {}", line + 1, rec.len())));
        }
        rows.push((
            rec[0].to_string(),
            CaseReport {
                dice: v[0],
                voe: v[1],
                rvd: v[2],
                assd_mm: v[3],
                mssd_mm: v[4],
            },
        ));
    }
    Ok(rows)
}
