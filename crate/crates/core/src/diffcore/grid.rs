use crate::error::{Error, Result};

/// Dense `rows x cols x channels` block stored as contiguous channel planes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature grid dims must be positive, got {rows}x{cols}x{channels}"
            )));
        }
        if data.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![value; rows * cols * channels],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    /// Builds a grid from `f(row, col, channel)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for c in 0..channels {
            for r in 0..rows {
                for k in 0..cols {
                    data.push(f(r, k, c));
                }
            }
        }
        Self {
            rows,
            cols,
            channels,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape() == (1, 1, 1)
    }

    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (channel * self.rows + row) * self.cols + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[channel * n..(channel + 1) * n]
    }

    /// The scalar value of a `1x1x1` grid.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &FeatureGrid) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureGrid) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &FeatureGrid, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Copies channels `start..start + len` into a new grid.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<FeatureGrid> {
        if len == 0 || start + len > self.channels {
            return Err(Error::ShapeMismatch(format!(
                "channel slice {start}..{} of {} channels",
                start + len,
                self.channels
            )));
        }
        let n = self.plane_len();
        FeatureGrid::new(
            self.rows,
            self.cols,
            len,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }
}
