use crate::error::{Error, Result};

/// Row-major `n x dim` block of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("points need dim >= 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            crate::error::check_dim(dim, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows `[start, end)` as a new block.
    pub fn slice_rows(&self, start: usize, end: usize) -> Points {
        Points {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn mean_and_covariance(&self) -> (Vec<f64>, Vec<f64>) {
        crate::stats::mean_and_covariance(&self.data, self.dim)
    }
}

impl Points {
    /// CSV with header `x0,x1,...` and one row per point.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for r in self.rows() {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`Points::to_csv`] output; lines starting with `#` are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let dim = header.split(',').count();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            let before = data.len();
            for cell in line.split(',') {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad number {cell:?}", i + 1)))?;
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::Parse(format!("row {} has {} cells, header has {dim}", i + 1, data.len() - before)));
            }
        }
        Self::new(dim, data)
    }
}
