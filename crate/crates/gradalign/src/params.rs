//! Flat parameter vectors with a named-segment layout.

use serde::{Deserialize, Serialize};

/// Maps named parameter groups to disjoint index ranges covering [0, len).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl ParamLayout {
    pub fn new() -> ParamLayout {
        ParamLayout { segments: Vec::new() }
    }

    /// Appends a segment right after the current end and returns its range.
    pub fn push(&mut self, name: &str, shape: &[usize]) -> std::ops::Range<usize> {
        let start = self.total_len();
        let len = shape.iter().product();
        self.segments.push(Segment {
            name: name.to_string(),
            start,
            len,
            shape: shape.to_vec(),
        });
        start..start + len
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

impl Default for ParamLayout {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> ParamVector {
        assert_eq!(values.len(), layout.total_len(), "layout does not cover values");
        ParamVector { values, layout }
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, name: &str) -> &[f64] {
        let s = self.layout.segment(name).unwrap_or_else(|| panic!("no segment {name}"));
        &self.values[s.start..s.start + s.len]
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.values.len(), other.values.len());
        ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Fixed-order mean of several vectors with identical layouts.
    pub fn mean(vectors: &[ParamVector]) -> ParamVector {
        assert!(!vectors.is_empty());
        let mut out = vectors[0].zeros_like();
        for v in vectors {
            out.axpy(1.0, v);
        }
        out.scale(1.0 / vectors.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_segments_are_disjoint_and_cover() {
        let mut layout = ParamLayout::new();
        let r1 = layout.push("w1", &[3, 4]);
        let r2 = layout.push("b1", &[4]);
        assert_eq!(r1, 0..12);
        assert_eq!(r2, 12..16);
        assert_eq!(layout.total_len(), 16);
        assert_eq!(layout.segment("b1").unwrap().start, 12);
    }

    #[test]
    fn mean_is_fixed_order() {
        let mut layout = ParamLayout::new();
        layout.push("w", &[2]);
        let a = ParamVector::new(vec![1.0, 2.0], layout.clone());
        let b = ParamVector::new(vec![3.0, 4.0], layout);
        let m = ParamVector::mean(&[a, b]);
        assert_eq!(m.values, vec![2.0, 3.0]);
    }
}
