use std::fmt;

use serde::{Deserialize, Serialize};

/// Row-major dimensions of a tape value. Rank 1 or 2 is all the model needs.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Panics if any dimension is zero or the rank is outside 1..=2.
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(
            (1..=2).contains(&dims.len()),
            "shape rank must be 1 or 2, got {dims:?}"
        );
        assert!(dims.iter().all(|&d| d > 0), "shape dims must be positive, got {dims:?}");
        Shape(dims)
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn vector(n: usize) -> Self {
        Shape::new(vec![n])
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Leading dimension; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.0.len() == 2 {
            self.0[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.0.last().expect("non-empty shape")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", dims.join("x"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_is_product_of_dims() {
        assert_eq!(Shape::matrix(3, 4).numel(), 12);
        assert_eq!(Shape::vector(5).numel(), 5);
        assert!(Shape::scalar().is_scalar());
        assert_eq!(Shape::matrix(2, 3).to_string(), "[2x3]");
    }

    #[test]
    #[should_panic]
    fn zero_dimension_rejected() {
        Shape::matrix(0, 3);
    }
}
