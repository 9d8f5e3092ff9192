//! Dynamic functional-connectivity construction.
//!
//! A subject's T x R time-series matrix is cut into sliding windows; each
//! window yields a Pearson correlation matrix, a matrix of two-sided
//! t-test p-values, a BH-FDR significance mask, and finally the weighted
//! adjacency A = B (Hadamard) C.
//!
//! # Graph cache format (`DGS1`)
//!
//! ```text
//! magic  4 bytes  b"DGS1"
//! R      u32 LE   regions
//! S      u32 LE   windows
//! A      S dense RxR f64 LE matrices, row-major
//! B      S bit-packed RxR masks, row-major bits, LSB first,
//!        ceil(R*R/8) bytes per window
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Sliding-window schedule over a length-T series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub width: usize,
    pub step: usize,
    pub starts: Vec<usize>,
}

impl WindowPlan {
    /// Derive as many windows as the series admits:
    /// count = floor((T - width)/step) + 1.
    pub fn auto(t: usize, width: usize, step: usize) -> Result<Self> {
        if width < 2 || step < 1 {
            return Err(Error::contract("sliding_windows", "need width >= 2 and step >= 1"));
        }
        if t < width {
            return Err(Error::InsufficientData(format!(
                "series length {} shorter than window width {}",
                t, width
            )));
        }
        let count = (t - width) / step + 1;
        Ok(WindowPlan { width, step, starts: (0..count).map(|k| k * step).collect() })
    }

    /// Fixed window count; errors when the series cannot host it.
    pub fn fixed(t: usize, width: usize, step: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::contract("sliding_windows", "count must be >= 1"));
        }
        let needed = width + (count - 1) * step;
        if t < needed {
            return Err(Error::InsufficientData(format!(
                "series length {} cannot host {} windows of width {} and step {} (needs {})",
                t, count, width, step, needed
            )));
        }
        let plan = Self::auto(t, width, step)?;
        Ok(WindowPlan { width, step, starts: plan.starts[..count].to_vec() })
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Inclusive index of the last timepoint any window touches.
    pub fn last_used_timepoint(&self) -> usize {
        self.starts.last().map_or(0, |s| s + self.width - 1)
    }
}

/// Convenience matching the width-130 / step-20 default schedule.
pub fn sliding_windows(t: usize, width: usize, step: usize) -> Result<WindowPlan> {
    WindowPlan::auto(t, width, step)
}

/// Symmetric Pearson matrix for one window, diagonal exactly 1.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub values: Tensor,
    pub window_index: usize,
}

/// Pearson correlations between the columns of a T_w x R window.
///
/// Columns are standardized first and the correlation computed as the inner
/// product of z-scores; the result is symmetrized and the diagonal pinned
/// to exactly 1.
pub fn pearson_matrix(window: &Tensor, window_index: usize) -> Result<CorrelationMatrix> {
    let (n, r) = window.shape();
    if n < 3 {
        return Err(Error::InsufficientData(format!("pearson needs >= 3 timepoints, got {}", n)));
    }
    // Standardize each column with population moments.
    let mut z = Tensor::zeros(n, r);
    for j in 0..r {
        let mut mean = 0.0;
        for i in 0..n {
            mean += window.get(i, j);
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = window.get(i, j) - mean;
            var += d * d;
        }
        if var == 0.0 {
            return Err(Error::DegenerateSeries { region: j, window: window_index });
        }
        let inv = 1.0 / var.sqrt();
        for i in 0..n {
            z.set(i, j, (window.get(i, j) - mean) * inv);
        }
    }
    let mut corr = Tensor::zeros(r, r);
    crate::numerics::tensor::dgemm_into(&z, &z, &mut corr, true, false, 1.0, 0.0);
    // Clamp rounding spill, symmetrize, and pin the diagonal.
    for i in 0..r {
        for j in 0..i {
            let v = 0.5 * (corr.get(i, j) + corr.get(j, i));
            let v = v.clamp(-1.0, 1.0);
            corr.set(i, j, v);
            corr.set(j, i, v);
        }
        corr.set(i, i, 1.0);
    }
    Ok(CorrelationMatrix { values: corr, window_index })
}

/// Two-sided p-value of Pearson r at sample size n, from the t statistic
/// with n-2 degrees of freedom through the regularized incomplete beta:
/// p = I_{nu/(nu + t^2)}(nu/2, 1/2).
pub fn correlation_pvalue(r: f64, n: usize) -> Result<f64> {
    if n < 4 {
        return Err(Error::InsufficientData(format!("p-value needs n >= 4, got {}", n)));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::contract("correlation_pvalue", format!("|r| must be <= 1, got {}", r)));
    }
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let nu = (n - 2) as f64;
    // Guard against catastrophic cancellation for |r| near 1.
    let one_minus_r2 = (1.0 - r * r).max(1e-15);
    let t2 = r * r * nu / one_minus_r2;
    let x = nu / (nu + t2);
    Ok(statrs::function::beta::beta_reg(nu / 2.0, 0.5, x))
}

/// Upper-triangle p-values for a correlation matrix; diagonal and lower
/// triangle are set to zero and are not part of the test family.
pub fn correlation_pvalues(corr: &CorrelationMatrix, n: usize) -> Result<Tensor> {
    let r = corr.values.rows();
    let mut p = Tensor::zeros(r, r);
    for i in 0..r {
        for j in (i + 1)..r {
            p.set(i, j, correlation_pvalue(corr.values.get(i, j), n)?);
        }
    }
    Ok(p)
}

/// Benjamini-Hochberg step-up over a flat list of p-values at level `q`:
/// find the largest k with p_(k) <= k q / m and reject everything at or
/// below p_(k). Returns one rejection flag per input.
pub fn bh_reject(pvals: &[f64], q: f64) -> Result<Vec<bool>> {
    if pvals.is_empty() {
        return Err(Error::contract("bh_fdr_mask", "empty p-value list"));
    }
    if !(0.0..1.0).contains(&q) || q == 0.0 {
        return Err(Error::contract("bh_fdr_mask", format!("q must be in (0,1), got {}", q)));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut cutoff: Option<f64> = None;
    for (rank, &ix) in order.iter().enumerate().rev() {
        let k = rank + 1;
        if pvals[ix] <= k as f64 * q / m as f64 {
            cutoff = Some(pvals[ix]);
            break;
        }
    }
    Ok(match cutoff {
        Some(c) => pvals.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    })
}

/// BH-FDR mask over the upper-triangle tests of an RxR p-value matrix.
/// The mask is symmetric with unit diagonal (self-loops are retained but
/// never enter the test family).
pub fn bh_fdr_mask(pvalues: &Tensor, q: f64) -> Result<Tensor> {
    let r = pvalues.rows();
    let mut flat = Vec::with_capacity(r * (r - 1) / 2);
    for i in 0..r {
        for j in (i + 1)..r {
            flat.push(pvalues.get(i, j));
        }
    }
    let reject = bh_reject(&flat, q)?;
    let mut mask = Tensor::zeros(r, r);
    let mut ix = 0;
    for i in 0..r {
        mask.set(i, i, 1.0);
        for j in (i + 1)..r {
            if reject[ix] {
                mask.set(i, j, 1.0);
                mask.set(j, i, 1.0);
            }
            ix += 1;
        }
    }
    Ok(mask)
}

/// Ordered sequence of masked adjacencies for one subject.
#[derive(Debug, Clone)]
pub struct DynamicGraphSequence {
    pub adjacencies: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub plan: WindowPlan,
}

impl DynamicGraphSequence {
    pub fn regions(&self) -> usize {
        self.adjacencies.first().map_or(0, Tensor::rows)
    }
}

/// Full per-window pipeline: pearson -> p-values -> BH mask -> A = B . C.
pub fn build_dynamic_graphs(series: &Tensor, plan: &WindowPlan, q: f64) -> Result<DynamicGraphSequence> {
    let (t, r) = series.shape();
    if plan.last_used_timepoint() >= t {
        return Err(Error::InsufficientData(format!(
            "plan needs {} timepoints, series has {}",
            plan.last_used_timepoint() + 1,
            t
        )));
    }
    let mut adjacencies = Vec::with_capacity(plan.count());
    let mut masks = Vec::with_capacity(plan.count());
    for (w, &start) in plan.starts.iter().enumerate() {
        let mut window = Tensor::zeros(plan.width, r);
        for i in 0..plan.width {
            for j in 0..r {
                window.set(i, j, series.get(start + i, j));
            }
        }
        let corr = pearson_matrix(&window, w)?;
        let pvals = correlation_pvalues(&corr, plan.width)?;
        let mask = bh_fdr_mask(&pvals, q)?;
        let mut adj = Tensor::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                adj.set(i, j, mask.get(i, j) * corr.values.get(i, j));
            }
        }
        adjacencies.push(adj);
        masks.push(mask);
    }
    Ok(DynamicGraphSequence { adjacencies, masks, plan: plan.clone() })
}

/// Single "static" graph over the whole series, as one full-length window.
pub fn build_static_graph(series: &Tensor, q: f64) -> Result<DynamicGraphSequence> {
    let t = series.rows();
    let plan = WindowPlan::auto(t, t, 1)?;
    build_dynamic_graphs(series, &plan, q)
}

// ── DGS1 cache ───────────────────────────────────────────────────────

pub fn write_graph_cache<W: Write>(seq: &DynamicGraphSequence, mut w: W) -> std::io::Result<()> {
    let r = seq.regions();
    w.write_all(b"DGS1")?;
    w.write_all(&(r as u32).to_le_bytes())?;
    w.write_all(&(seq.adjacencies.len() as u32).to_le_bytes())?;
    for a in &seq.adjacencies {
        for v in a.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for b in &seq.masks {
        let mut packed = vec![0u8; (r * r).div_ceil(8)];
        for (bit, v) in b.data().iter().enumerate() {
            if *v != 0.0 {
                packed[bit / 8] |= 1 << (bit % 8);
            }
        }
        w.write_all(&packed)?;
    }
    Ok(())
}

pub fn read_graph_cache<R: Read>(mut rdr: R) -> Result<DynamicGraphSequence> {
    let mut magic = [0u8; 4];
    rdr.read_exact(&mut magic).map_err(|_| Error::parse("graph cache", "truncated magic"))?;
    if &magic != b"DGS1" {
        return Err(Error::parse("graph cache", "bad magic"));
    }
    let mut buf4 = [0u8; 4];
    rdr.read_exact(&mut buf4).map_err(|_| Error::parse("graph cache", "truncated header"))?;
    let r = u32::from_le_bytes(buf4) as usize;
    rdr.read_exact(&mut buf4).map_err(|_| Error::parse("graph cache", "truncated header"))?;
    let s = u32::from_le_bytes(buf4) as usize;
    if r == 0 || s == 0 || r > 4096 || s > 4096 {
        return Err(Error::parse("graph cache", format!("implausible dimensions R={} S={}", r, s)));
    }
    let mut adjacencies = Vec::with_capacity(s);
    for _ in 0..s {
        let mut data = vec![0.0f64; r * r];
        for v in &mut data {
            let mut b = [0u8; 8];
            rdr.read_exact(&mut b).map_err(|_| Error::parse("graph cache", "truncated matrix"))?;
            *v = f64::from_le_bytes(b);
        }
        adjacencies.push(Tensor::from_vec(r, r, data)?);
    }
    let mut masks = Vec::with_capacity(s);
    for _ in 0..s {
        let mut packed = vec![0u8; (r * r).div_ceil(8)];
        rdr.read_exact(&mut packed).map_err(|_| Error::parse("graph cache", "truncated mask"))?;
        let mut data = vec![0.0f64; r * r];
        for (bit, v) in data.iter_mut().enumerate() {
            if packed[bit / 8] & (1 << (bit % 8)) != 0 {
                *v = 1.0;
            }
        }
        masks.push(Tensor::from_vec(r, r, data)?);
    }
    // The plan is not persisted; reconstruct a placeholder schedule that
    // preserves only the window count.
    let plan = WindowPlan { width: 0, step: 0, starts: vec![0; s] };
    Ok(DynamicGraphSequence { adjacencies, masks, plan })
}

/// Shared read-only handles for the per-window adjacencies.
pub fn shared_adjacencies(seq: &DynamicGraphSequence) -> Vec<Arc<Tensor>> {
    seq.adjacencies.iter().cloned().map(Arc::new).collect()
}
