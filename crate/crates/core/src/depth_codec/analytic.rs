//! Training-free decoder with the same affine code-manifold structure as the
//! learned one: an interpolated prior from the sparse points plus a fixed set
//! of smooth cosine modes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::{CodecError, ConditioningSet, LinearDecoder};
use crate::geometry::ProximityParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticParams {
    pub proximity: ProximityParams,
    /// Proximity change per unit code along each mode (peak value).
    pub amplitude: f64,
    /// Uncertainty floor.
    pub beta0: f64,
    /// Uncertainty growth per pixel of distance to the nearest sparse point.
    pub beta1: f64,
    /// Number of nearest sparse points blended per pixel.
    pub neighbors: usize,
}

impl Default for AnalyticParams {
    fn default() -> Self {
        Self { proximity: ProximityParams::default(), amplitude: 0.1, beta0: 0.05, beta1: 0.002, neighbors: 8 }
    }
}

/// Frequencies `(kx, ky)` of the first `n` cosine modes, lowest first.
pub(crate) fn mode_frequencies(width: usize, height: usize, n: usize) -> Vec<(usize, usize)> {
    let mut modes = Vec::new();
    let side = (n as f64).sqrt().ceil() as usize * 2 + 2;
    for ky in 0..side.min(height) {
        for kx in 0..side.min(width) {
            modes.push((kx, ky));
        }
    }
    let key = |&(kx, ky): &(usize, usize)| (kx as f64 / width as f64).powi(2) + (ky as f64 / height as f64).powi(2);
    modes.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
    modes.truncate(n);
    modes
}

fn build_cosine_basis(width: usize, height: usize, n: usize, amplitude: f64) -> Vec<f64> {
    let modes = mode_frequencies(width, height, n);
    let cu: Vec<Vec<f64>> = modes
        .iter()
        .map(|&(kx, _)| {
            (0..width)
                .map(|u| (std::f64::consts::PI * kx as f64 * (u as f64 + 0.5) / width as f64).cos())
                .collect()
        })
        .collect();
    let cv: Vec<Vec<f64>> = modes
        .iter()
        .map(|&(_, ky)| {
            (0..height)
                .map(|v| (std::f64::consts::PI * ky as f64 * (v as f64 + 0.5) / height as f64).cos())
                .collect()
        })
        .collect();
    let mut basis = vec![0.0; width * height * n];
    for v in 0..height {
        for u in 0..width {
            let row = &mut basis[(v * width + u) * n..(v * width + u + 1) * n];
            for k in 0..n {
                row[k] = amplitude * cu[k][u] * cv[k][v];
            }
        }
    }
    basis
}

type BasisKey = (usize, usize, usize, u64);

/// Cosine basis shared between all decoders with the same shape.
pub(crate) fn cosine_basis(width: usize, height: usize, n: usize, amplitude: f64) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<BasisKey, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (width, height, n, amplitude.to_bits());
    let mut guard = cache.lock().expect("basis cache poisoned");
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(build_cosine_basis(width, height, n, amplitude)))
        .clone()
}

struct SparsePoint {
    u: f64,
    v: f64,
    prox: f64,
    confidence: f64,
}

/// Uniform bucket grid for k-nearest-neighbour queries over sparse points.
struct PointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointGrid {
    fn new(points: &[SparsePoint], width: usize, height: usize, cell: usize) -> Self {
        let cols = width.div_ceil(cell);
        let rows = height.div_ceil(cell);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let cx = ((p.u / cell as f64) as usize).min(cols - 1);
            let cy = ((p.v / cell as f64) as usize).min(rows - 1);
            buckets[cy * cols + cx].push(i);
        }
        Self { cell: cell as f64, cols, rows, buckets }
    }

    /// Fills `out` with the `k` nearest points as `(squared distance, index)`,
    /// sorted ascending.
    fn knn(&self, points: &[SparsePoint], u: f64, v: f64, k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        let cx = ((u / self.cell) as usize).min(self.cols - 1) as isize;
        let cy = ((v / self.cell) as usize).min(self.rows - 1) as isize;
        let max_ring = self.cols.max(self.rows) as isize;
        for ring in 0..=max_ring {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let (gx, gy) = (cx + dx, cy + dy);
                    if gx < 0 || gy < 0 || gx >= self.cols as isize || gy >= self.rows as isize {
                        continue;
                    }
                    for &i in &self.buckets[gy as usize * self.cols + gx as usize] {
                        let p = &points[i];
                        let d2 = (p.u - u).powi(2) + (p.v - v).powi(2);
                        if out.len() < k {
                            out.push((d2, i));
                            out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        } else if d2 < out[k - 1].0 || (d2 == out[k - 1].0 && i < out[k - 1].1) {
                            out[k - 1] = (d2, i);
                            out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        }
                    }
                }
            }
            // Every cell of the next ring is at least `ring * cell` away.
            let reach = ring as f64 * self.cell;
            if out.len() == k.min(points.len()) && out.last().is_some_and(|l| l.0 <= reach * reach) {
                break;
            }
        }
    }
}

/// Builds the analytic decoder for one keyframe.
///
/// The prior proximity map is an inverse-distance-weighted blend of the `k`
/// nearest sparse proximities, each weight scaled by `1 / (1 + rep_error)`.
/// The code adds `code_size` cosine modes. Uncertainty grows linearly with
/// the distance to the nearest sparse point.
pub fn analytic_decoder(
    cond: &ConditioningSet,
    code_size: usize,
    params: &AnalyticParams,
) -> Result<LinearDecoder, CodecError> {
    let (width, height) = (cond.width(), cond.height());
    let points: Vec<SparsePoint> = cond
        .sparse_points()
        .into_iter()
        .map(|(u, v, d, r)| SparsePoint {
            u: u as f64,
            v: v as f64,
            prox: params.proximity.a / (params.proximity.a + d),
            confidence: 1.0 / (1.0 + r),
        })
        .collect();
    if points.len() < 3 {
        return Err(CodecError::InsufficientConditioning(points.len()));
    }
    let k = params.neighbors.max(1).min(points.len());
    let grid = PointGrid::new(&points, width, height, 16);

    let mut prior = vec![0.0; width * height];
    let mut uncertainty = vec![0.0; width * height];
    let mut nn = Vec::with_capacity(k);
    for v in 0..height {
        for u in 0..width {
            let (uf, vf) = (u as f64, v as f64);
            grid.knn(&points, uf, vf, k, &mut nn);
            let mut num = 0.0;
            let mut den = 0.0;
            for &(d2, i) in &nn {
                let w = points[i].confidence / (d2 + 1e-9);
                num += w * points[i].prox;
                den += w;
            }
            let idx = v * width + u;
            prior[idx] = num / den;
            uncertainty[idx] = params.beta0 + params.beta1 * nn[0].0.sqrt();
        }
    }
    let basis = cosine_basis(width, height, code_size, params.amplitude);
    LinearDecoder::new(width, height, code_size, params.proximity, prior, basis, uncertainty)
}
