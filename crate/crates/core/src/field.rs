//! Dense displacement fields.

use crate::error::{Error, Result};
use crate::tensor::{transpose2d, Tensor};

/// Grid a flow field lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// The encoder grid at `1/d` of the input.
    Grid(usize),
    Full,
}

/// Per-pixel `(u, v)` displacement in pixels of its own grid; `u` grows
/// rightward and `v` downward. Stored `H×W×2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    values: Tensor,
    resolution: Resolution,
}

impl FlowField {
    pub fn new(values: Tensor, resolution: Resolution) -> Result<Self> {
        let &[_, _, 2] = values.shape() else {
            return Err(Error::shape("FlowField", "H×W×2", values.shape()));
        };
        if !values.is_finite() {
            return Err(Error::invalid("FlowField", "non-finite flow value"));
        }
        Ok(FlowField { values, resolution })
    }

    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Result<Self> {
        Self::new(Tensor::zeros([height, width, 2])?, resolution)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32, resolution: Resolution) -> Result<Self> {
        let t = Tensor::from_fn([height, width, 2], |i| if i % 2 == 0 { u } else { v })?;
        Self::new(t, resolution)
    }

    /// From component planes `2×H×W`.
    pub fn from_planes(planes: &Tensor, resolution: Resolution) -> Result<Self> {
        let &[2, h, w] = planes.shape() else {
            return Err(Error::shape("FlowField::from_planes", "2×H×W", planes.shape()));
        };
        let flat = planes.clone().reshape([2, h * w])?;
        Self::new(transpose2d(&flat)?.reshape([h, w, 2])?, resolution)
    }

    /// Component planes `2×H×W`.
    pub fn to_planes(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let flat = self.values.clone().reshape([h * w, 2]).expect("H×W×2");
        transpose2d(&flat).expect("matrix").reshape([2, h, w]).expect("2×H×W")
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }

    pub fn uv(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width() + x);
        (self.values.data()[i], self.values.data()[i + 1])
    }

    pub(crate) fn same_grid(&self, other: &FlowField, op: &'static str) -> Result<()> {
        if self.values.shape() != other.values.shape() || self.resolution != other.resolution {
            return Err(Error::invalid(
                op,
                format!(
                    "grid mismatch: {:?} at {:?} vs {:?} at {:?}",
                    self.values.shape(),
                    self.resolution,
                    other.values.shape(),
                    other.resolution
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_round_trip() {
        let planes = Tensor::from_fn([2, 3, 4], |i| i as f32).unwrap();
        let f = FlowField::from_planes(&planes, Resolution::Full).unwrap();
        assert_eq!(f.uv(1, 2), (6.0, 18.0));
        assert_eq!(f.to_planes(), planes);
    }

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(FlowField::new(Tensor::zeros([3, 3, 3]).unwrap(), Resolution::Full).is_err());
        let nan = Tensor::full([1, 1, 2], f32::NAN).unwrap();
        assert!(FlowField::new(nan, Resolution::Full).is_err());
    }
}
