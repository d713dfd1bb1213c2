//! Log-density grids over 2D models.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::write_atomic;
use crate::flows::chain::FlowChain;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    /// `[x_min, x_max, y_min, y_max]`
    pub bounds: [f64; 4],
    pub resolution: usize,
    /// Row-major: `values[iy * resolution + ix]`. Failed cells hold `-inf`.
    pub values: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl DensityGrid {
    pub fn cell_size(&self) -> (f64, f64) {
        let [x0, x1, y0, y1] = self.bounds;
        ((x1 - x0) / self.resolution as f64, (y1 - y0) / self.resolution as f64)
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let (dx, dy) = self.cell_size();
        [self.bounds[0] + (ix as f64 + 0.5) * dx, self.bounds[2] + (iy as f64 + 0.5) * dy]
    }

    /// Midpoint-rule integral of `exp(values)`.
    pub fn integral(&self) -> f64 {
        let (dx, dy) = self.cell_size();
        self.values.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum::<f64>() * dx * dy
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    /// For each mode, the density-weighted centroid of the cells in its
    /// nearest-mode region that reach at least half of the region's peak.
    pub fn mode_centroids(&self, modes: &[Vec<f64>]) -> Vec<[f64; 2]> {
        let n = self.resolution;
        let nearest = |p: [f64; 2]| {
            (0..modes.len())
                .min_by(|&a, &b| {
                    let da = (p[0] - modes[a][0]).powi(2) + (p[1] - modes[a][1]).powi(2);
                    let db = (p[0] - modes[b][0]).powi(2) + (p[1] - modes[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0)
        };
        let mut peak = vec![f64::NEG_INFINITY; modes.len()];
        let mut owner = vec![0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let k = nearest(self.center(ix, iy));
                owner[iy * n + ix] = k;
                peak[k] = peak[k].max(self.values[iy * n + ix]);
            }
        }
        let mut acc = vec![[0.0f64; 3]; modes.len()];
        for iy in 0..n {
            for ix in 0..n {
                let idx = iy * n + ix;
                let k = owner[idx];
                let v = self.values[idx];
                if v.is_finite() && v >= peak[k] - std::f64::consts::LN_2 {
                    let w = (v - peak[k]).exp();
                    let c = self.center(ix, iy);
                    acc[k][0] += w * c[0];
                    acc[k][1] += w * c[1];
                    acc[k][2] += w;
                }
            }
        }
        acc.iter().map(|a| if a[2] > 0.0 { [a[0] / a[2], a[1] / a[2]] } else { [f64::NAN; 2] }).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 72);
        out.push_str("x,y,logp\n");
        let n = self.resolution;
        for iy in 0..n {
            for ix in 0..n {
                let [x, y] = self.center(ix, iy);
                out.push_str(&format!("{x:.16e},{y:.16e},{:.16e}\n", self.values[iy * n + ix]));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |f| f.write_all(self.to_csv().as_bytes()))
    }
}

/// Evaluates `log p` at every cell center. Cells whose evaluation fails are
/// flagged and hold `-inf`; the grid is always completed.
pub fn density_grid(chain: &FlowChain, bounds: [f64; 4], resolution: usize) -> Result<DensityGrid> {
    if chain.dim != 2 {
        return Err(Error::InvalidArgument(format!("density grids need a 2D model, got {}D", chain.dim)));
    }
    if resolution == 0 || !(bounds[0] < bounds[1]) || !(bounds[2] < bounds[3]) {
        return Err(Error::InvalidArgument("grid bounds must be increasing and resolution positive".into()));
    }
    let mut grid = DensityGrid {
        bounds,
        resolution,
        values: vec![0.0; resolution * resolution],
        flagged: vec![false; resolution * resolution],
    };
    let prep = chain.prepare()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(resolution);
    let rows_per = resolution.div_ceil(threads);
    let centers: Vec<Vec<[f64; 2]>> =
        (0..resolution).map(|iy| (0..resolution).map(|ix| grid.center(ix, iy)).collect()).collect();
    let prep = &prep;
    std::thread::scope(|scope| {
        for (chunk_vals, (chunk_flags, chunk_centers)) in grid
            .values
            .chunks_mut(rows_per * resolution)
            .zip(grid.flagged.chunks_mut(rows_per * resolution).zip(centers.chunks(rows_per)))
        {
            scope.spawn(move || {
                for (i, c) in chunk_centers.iter().flatten().enumerate() {
                    match chain.forward_one(prep, c, false) {
                        Ok(out) if out.logp.is_finite() => chunk_vals[i] = out.logp,
                        _ => {
                            chunk_vals[i] = f64::NEG_INFINITY;
                            chunk_flags[i] = true;
                        }
                    }
                }
            });
        }
    });
    Ok(grid)
}
