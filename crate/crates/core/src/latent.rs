//! Structured gaze latents: one one-hot `H x W` grid per timestep.
//!
//! Grids are stored flattened as `[T, H*W]` with cell `h * W + w`.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default cap on `(H*W)^T` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentDims {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("latent dims must be positive, got {t}x{h}x{w}")));
        }
        Ok(LatentDims { t, h, w })
    }

    /// Cells per timestep.
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Size of the per-coordinate sweep, `T*H*W`.
    pub fn total(&self) -> usize {
        self.t * self.cells()
    }

    /// `(H*W)^T`, saturating at `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        (0..self.t).fold(1u128, |acc, _| acc.saturating_mul(self.cells() as u128))
    }

    pub fn cell_of(&self, h: usize, w: usize) -> usize {
        h * self.w + w
    }

    pub fn coord_of(&self, cell: usize) -> (usize, usize) {
        (cell / self.w, cell % self.w)
    }
}

/// Selected cell per timestep.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatentIndex {
    cells: Vec<usize>,
}

impl LatentIndex {
    pub fn from_cells(cells: Vec<usize>, dims: LatentDims) -> Result<Self> {
        if cells.len() != dims.t {
            return Err(Error::Data(format!(
                "latent index has {} timesteps, expected {}",
                cells.len(),
                dims.t
            )));
        }
        if let Some(&c) = cells.iter().find(|&&c| c >= dims.cells()) {
            return Err(Error::Data(format!(
                "cell {c} out of range for {}x{} grid",
                dims.h, dims.w
            )));
        }
        Ok(LatentIndex { cells })
    }

    pub fn from_coords(coords: &[(usize, usize)], dims: LatentDims) -> Result<Self> {
        if let Some(&(h, w)) = coords.iter().find(|&&(h, w)| h >= dims.h || w >= dims.w) {
            return Err(Error::Data(format!(
                "coordinate ({h}, {w}) out of range for {}x{} grid",
                dims.h, dims.w
            )));
        }
        let cells = coords.iter().map(|&(h, w)| dims.cell_of(h, w)).collect();
        LatentIndex::from_cells(cells, dims)
    }

    /// Unchecked constructor for callers that produced the cells from a
    /// validated argmax.
    pub(crate) fn from_cells_unchecked(cells: Vec<usize>) -> Self {
        LatentIndex { cells }
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn coords(&self, dims: LatentDims) -> Vec<(usize, usize)> {
        self.cells.iter().map(|&c| dims.coord_of(c)).collect()
    }

    /// Copy with coordinate `t` replaced by `cell`.
    pub fn with_cell(&self, t: usize, cell: usize) -> Self {
        let mut cells = self.cells.clone();
        cells[t] = cell;
        LatentIndex { cells }
    }

    /// `[[t, h, w], ...]` trace used in dataset and prediction files.
    pub fn to_trace(&self, dims: LatentDims) -> Vec<[usize; 3]> {
        self.cells
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let (h, w) = dims.coord_of(c);
                [t, h, w]
            })
            .collect()
    }

    pub fn from_trace(trace: &[[usize; 3]], dims: LatentDims) -> Result<Self> {
        let mut coords = vec![None; dims.t];
        for &[t, h, w] in trace {
            let slot = coords
                .get_mut(t)
                .ok_or_else(|| Error::Data(format!("trace timestep {t} out of range")))?;
            if slot.replace((h, w)).is_some() {
                return Err(Error::Data(format!("trace repeats timestep {t}")));
            }
        }
        let coords: Option<Vec<_>> = coords.into_iter().collect();
        let coords = coords.ok_or_else(|| Error::Data("trace is missing timesteps".into()))?;
        LatentIndex::from_coords(&coords, dims)
    }
}

/// A latent carrying both its index view and its one-hot `[T, H*W]` view.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeLatent<S = f64> {
    dims: LatentDims,
    index: LatentIndex,
    onehot: Tensor<S>,
}

impl<S: Scalar> GazeLatent<S> {
    pub fn dims(&self) -> LatentDims {
        self.dims
    }

    pub fn index(&self) -> &LatentIndex {
        &self.index
    }

    pub fn onehot(&self) -> &Tensor<S> {
        &self.onehot
    }

    /// Inverse of [`onehot_encode`].
    pub fn decode(&self) -> LatentIndex {
        self.index.clone()
    }
}

pub fn onehot_encode<S: Scalar>(index: &LatentIndex, dims: LatentDims) -> Result<GazeLatent<S>> {
    let index = LatentIndex::from_cells(index.cells.clone(), dims)?;
    Ok(GazeLatent {
        dims,
        onehot: onehot_tensor(&index, dims),
        index,
    })
}

pub(crate) fn onehot_tensor<S: Scalar>(index: &LatentIndex, dims: LatentDims) -> Tensor<S> {
    let mut data = vec![S::zero(); dims.total()];
    for (t, &c) in index.cells.iter().enumerate() {
        data[t * dims.cells() + c] = S::one();
    }
    Tensor::from_parts(vec![dims.t, dims.cells()], data)
}

/// Recovers the index of a one-hot `[T, H*W]` tensor.
pub fn onehot_decode<S: Scalar>(onehot: &Tensor<S>, dims: LatentDims) -> Result<LatentIndex> {
    if onehot.shape() != [dims.t, dims.cells()] {
        return Err(Error::shape("onehot-decode", format!("{:?}", onehot.shape())));
    }
    let mut cells = Vec::with_capacity(dims.t);
    for row in onehot.data().chunks(dims.cells()) {
        let hot: Vec<usize> = (0..row.len()).filter(|&i| row[i] == S::one()).collect();
        let others_zero = row.iter().all(|&v| v == S::one() || v == S::zero());
        if hot.len() != 1 || !others_zero {
            return Err(Error::Data("grid is not one-hot".into()));
        }
        cells.push(hot[0]);
    }
    LatentIndex::from_cells(cells, dims)
}

/// Every structured configuration in lexicographic order of the per-timestep
/// cells (timestep 0 most significant).
pub struct Enumeration {
    dims: LatentDims,
    next: Option<Vec<usize>>,
}

impl Iterator for Enumeration {
    type Item = LatentIndex;

    fn next(&mut self) -> Option<LatentIndex> {
        let cur = self.next.take()?;
        let mut succ = cur.clone();
        let mut t = self.dims.t;
        let advanced = loop {
            if t == 0 {
                break false;
            }
            t -= 1;
            succ[t] += 1;
            if succ[t] < self.dims.cells() {
                break true;
            }
            succ[t] = 0;
        };
        if advanced {
            self.next = Some(succ);
        }
        Some(LatentIndex { cells: cur })
    }
}

pub fn enumerate_latents(dims: LatentDims, cap: u64) -> Result<Enumeration> {
    let cardinality = dims.cardinality();
    if cardinality > cap as u128 {
        return Err(Error::Capacity { cardinality, cap });
    }
    Ok(Enumeration {
        dims,
        next: Some(vec![0; dims.t]),
    })
}

/// Coordinate-sweep variants of `base`: `variants[t][cell]` equals `base`
/// with timestep `t` moved to `cell`.
pub fn lowdim_variants(base: &LatentIndex, dims: LatentDims) -> Result<Vec<Vec<LatentIndex>>> {
    let base = LatentIndex::from_cells(base.cells.clone(), dims)?;
    Ok((0..dims.t)
        .map(|t| (0..dims.cells()).map(|c| base.with_cell(t, c)).collect())
        .collect())
}
