use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("point cloud must be a rank-2 matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
    #[error("point cloud is empty")]
    Empty,
}

/// Which side of the transport problem a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// An `N × d` point cloud, optionally tagged with the condition value it was
/// drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBatch {
    points: Tensor,
    condition: Option<Vec<f64>>,
    side: Side,
}

impl ParticleBatch {
    pub fn new(points: Tensor, condition: Option<Vec<f64>>, side: Side) -> Result<Self, BatchError> {
        if points.shape().len() != 2 {
            return Err(BatchError::NotMatrix(points.shape().to_vec()));
        }
        if points.rows() == 0 {
            return Err(BatchError::Empty);
        }
        if !points.is_finite() {
            return Err(BatchError::NonFinite);
        }
        Ok(Self {
            points,
            condition,
            side,
        })
    }

    pub fn source(points: Tensor) -> Result<Self, BatchError> {
        Self::new(points, None, Side::Source)
    }

    pub fn target(points: Tensor) -> Result<Self, BatchError> {
        Self::new(points, None, Side::Target)
    }

    pub fn with_condition(mut self, condition: Option<Vec<f64>>) -> Self {
        self.condition = condition;
        self
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn into_points(self) -> Tensor {
        self.points
    }

    pub fn condition(&self) -> Option<&[f64]> {
        self.condition.as_deref()
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Network input: the points with the condition value appended to every
    /// row.
    pub fn network_input(&self) -> Tensor {
        append_condition(&self.points, self.condition())
    }
}

/// Appends `condition` as trailing columns of every row of `points`.
pub fn append_condition(points: &Tensor, condition: Option<&[f64]>) -> Tensor {
    match condition {
        None | Some([]) => points.clone(),
        Some(c) => {
            let n = points.rows();
            let tail = Tensor::matrix(n, c.len(), c.iter().copied().cycle().take(n * c.len()).collect())
                .expect("condition block shape");
            points.concat_cols(&tail).expect("row counts agree")
        }
    }
}
