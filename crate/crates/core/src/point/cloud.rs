use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

/// Coordinates in meters with optional colors in `[0, 1]` and per-point
/// class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl PointCloud {
    pub fn new(
        coords: Vec<Point3>,
        colors: Option<Vec<Point3>>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let cloud = Self {
            coords,
            colors,
            labels,
            num_classes,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::Input("point cloud is empty".into()));
        }
        if let Some(bad) = self.coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input(format!("point {bad} has non-finite coordinates")));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(Error::Input(format!("{} colors for {n} points", colors.len())));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Input(format!("{} labels for {n} points", labels.len())));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
                return Err(Error::Input(format!(
                    "point {i} has label {l} but only {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input("point cloud has no labels".into()))
    }

    /// Per-point input features: `xyz` (`d_in = 3`) or `xyz+rgb` (`d_in = 6`).
    pub fn features<T: Scalar>(&self, d_in: usize) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(self.len() * d_in);
        match d_in {
            3 => {
                for p in &self.coords {
                    data.extend(p.iter().map(|&v| T::lit(v)));
                }
            }
            6 => {
                let colors = self
                    .colors
                    .as_ref()
                    .ok_or_else(|| Error::Input("6-D features need colors".into()))?;
                for (p, c) in self.coords.iter().zip(colors) {
                    data.extend(p.iter().chain(c).map(|&v| T::lit(v)));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "input feature width must be 3 or 6, got {other}"
                )))
            }
        }
        Tensor::new(vec![self.len(), d_in], data)
    }

    /// Sub-cloud of the listed points, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}
