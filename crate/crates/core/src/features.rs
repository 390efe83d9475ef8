use crate::error::{Error, Result};

/// Per-cell feature vectors on a `grid_w x grid_h` lattice.
///
/// Row-major over cells, channels contiguous within a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_w: usize,
    grid_h: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(grid_w: usize, grid_h: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || channels == 0 {
            return Err(Error::InvalidConfig(vec![format!(
                "feature grid dimensions must be positive, got {grid_w}x{grid_h}x{channels}"
            )]));
        }
        if values.len() != grid_w * grid_h * channels {
            return Err(Error::DimensionMismatch {
                what: "feature grid values",
                expected: grid_w * grid_h * channels,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange {
                name: "feature",
                value: f64::NAN,
                range: "finite values",
            });
        }
        Ok(Self {
            grid_w,
            grid_h,
            channels,
            values,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cell(&self, index: usize) -> &[f32] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }

    /// Channel-wise concatenation of two grids of the same lattice.
    pub fn concat(&self, other: &FeatureGrid) -> Result<FeatureGrid> {
        if (self.grid_w, self.grid_h) != (other.grid_w, other.grid_h) {
            return Err(Error::DimensionMismatch {
                what: "feature grid cells",
                expected: self.cells(),
                actual: other.cells(),
            });
        }
        let channels = self.channels + other.channels;
        let mut values = Vec::with_capacity(self.cells() * channels);
        for c in 0..self.cells() {
            values.extend_from_slice(self.cell(c));
            values.extend_from_slice(other.cell(c));
        }
        FeatureGrid::new(self.grid_w, self.grid_h, channels, values)
    }

    /// Per-channel mean and (biased) variance over all cells of `grids`.
    pub fn channel_stats<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> (Vec<f64>, Vec<f64>) {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for g in grids {
            if sum.is_empty() {
                sum = vec![0.0; g.channels];
                sum_sq = vec![0.0; g.channels];
            }
            for c in 0..g.cells() {
                for (k, &v) in g.cell(c).iter().enumerate() {
                    let v = f64::from(v);
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
            n += g.cells();
        }
        if n == 0 {
            return (sum, sum_sq);
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        (mean, var)
    }
}
