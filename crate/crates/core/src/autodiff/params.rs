use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Result};

/// One named block of the flat parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size()
    }
}

/// Maps flat parameter storage onto model weights. Segments are contiguous
/// and appear in offset order.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment right after the last one.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.len();
        self.segments.push(Segment {
            name: name.into(),
            shape,
            offset,
        });
        self.segments.len() - 1
    }

    pub fn with_segment(mut self, name: impl Into<String>, shape: Vec<usize>) -> Self {
        self.push(name, shape);
        self
    }

    /// A single unnamed segment of `n` scalars.
    pub fn flat(n: usize) -> Self {
        Self::new().with_segment("theta", vec![n])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.size())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The optimization state: flat parameters plus the layout describing them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(data: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(dim_err(format!(
                "parameter data has {} entries, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { data, layout })
    }

    /// Single-segment parameters, convenient for analytic objectives.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(data.len()));
        Self { data, layout }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment_data(&self, idx: usize) -> &[f64] {
        &self.data[self.layout.segment(idx).range()]
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.layout.clone())
    }

    /// Hex SHA-256 over the little-endian bytes of every entry.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A gradient or update direction in the layout of some `ParameterVector`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl FlatGradient {
    pub fn new(data: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(dim_err(format!(
                "gradient data has {} entries, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(data.len()));
        Self { data, layout }
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &FlatGradient) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scaled(&self, s: f64) -> FlatGradient {
        FlatGradient {
            data: self.data.iter().map(|v| v * s).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &FlatGradient, b: f64) -> Result<FlatGradient> {
        check_layouts(&self.layout, &other.layout)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(FlatGradient {
            data,
            layout: self.layout.clone(),
        })
    }
}

pub(crate) fn check_layouts(a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(dim_err(format!(
            "layout mismatch: {} vs {} parameters",
            a.len(),
            b.len()
        )))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `params - eta * direction`, leaving `params` untouched.
pub fn axpy_update(
    params: &ParameterVector,
    direction: &FlatGradient,
    eta: f64,
) -> Result<ParameterVector> {
    check_layouts(&params.layout, &direction.layout)?;
    if !eta.is_finite() {
        return Err(crate::error::arg_err(format!("step size {eta} is not finite")));
    }
    let data = params
        .data
        .iter()
        .zip(&direction.data)
        .map(|(p, d)| p - eta * d)
        .collect();
    Ok(ParameterVector {
        data,
        layout: params.layout.clone(),
    })
}
