//! Tiled multi-dimensional tensors: grid partitioning, tile coordinate
//! math, gather/scatter between tiled and dense layouts, and the binary
//! checkpoint format.
//!
//! Layout is row-major everywhere: tiles are stored in row-major grid
//! order, and elements within a tile are row-major over the tile's own
//! dims. Boundary tiles carry the remainder sizes.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::runtime::{Fill, Runtime, TileHandle};

const TENSOR_MAGIC: &[u8; 4] = b"TLT1";
const DTYPE_F32: u8 = 0;

/// A logical tensor partitioned into a grid of tiles.
#[derive(Clone, Debug)]
pub struct TiledTensor {
    shape: Vec<usize>,
    tile_shape: Vec<usize>,
    grid: Vec<usize>,
    tiles: Vec<TileHandle>,
}

impl TiledTensor {
    /// Registers a grid of tiles covering `shape`, partitioned by
    /// `tile_shape` (clamped per-dim to the tensor extent).
    pub fn new(
        rt: &mut Runtime,
        shape: &[usize],
        tile_shape: &[usize],
        fill: Fill,
    ) -> Result<Self> {
        if shape.is_empty() || shape.len() != tile_shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} vs tile shape {tile_shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) || tile_shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero dimension in shape {shape:?} / tile {tile_shape:?}"
            )));
        }
        let tile_shape: Vec<usize> = shape
            .iter()
            .zip(tile_shape)
            .map(|(&d, &t)| t.min(d))
            .collect();
        let grid: Vec<usize> = shape
            .iter()
            .zip(&tile_shape)
            .map(|(&d, &t)| d.div_ceil(t))
            .collect();
        let count: usize = grid.iter().product();
        let mut tiles = Vec::with_capacity(count);
        for linear in 0..count {
            let coord = coord_of(linear, &grid);
            let dims = tile_dims_at(&coord, shape, &tile_shape);
            let elems: usize = dims.iter().product();
            // Per-tile fills derive a distinct seed so the whole tensor
            // is reproducible without two tiles sharing a stream.
            let tile_fill = match fill {
                Fill::Normal { mean, std, seed } => Fill::Normal {
                    mean,
                    std,
                    seed: mix_seed(seed, linear as u64),
                },
                other => other,
            };
            tiles.push(rt.register_tile(4 * elems as u64, tile_fill)?);
        }
        Ok(TiledTensor {
            shape: shape.to_vec(),
            tile_shape,
            grid,
            tiles,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn tile_shape(&self) -> &[usize] {
        &self.tile_shape
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Total element count of the logical tensor.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles(&self) -> &[TileHandle] {
        &self.tiles
    }

    pub fn nbytes(&self) -> u64 {
        self.tiles.iter().map(|t| t.nbytes).sum()
    }

    pub fn handle_at(&self, coord: &[usize]) -> TileHandle {
        self.tiles[linear_of(coord, &self.grid)]
    }

    pub fn handle_linear(&self, linear: usize) -> TileHandle {
        self.tiles[linear]
    }

    /// Grid coordinate of the tile with the given linear index.
    pub fn tile_coord(&self, linear: usize) -> Vec<usize> {
        coord_of(linear, &self.grid)
    }

    /// Actual dims of a tile (boundary tiles are smaller).
    pub fn tile_dims(&self, coord: &[usize]) -> Vec<usize> {
        tile_dims_at(coord, &self.shape, &self.tile_shape)
    }

    /// Global element offsets of a tile's first element.
    pub fn tile_origin(&self, coord: &[usize]) -> Vec<usize> {
        coord
            .iter()
            .zip(&self.tile_shape)
            .map(|(&c, &t)| c * t)
            .collect()
    }

    /// Iterates (linear index, grid coord, tile dims, handle).
    pub fn iter_tiles(
        &self,
    ) -> impl Iterator<Item = (usize, Vec<usize>, Vec<usize>, TileHandle)> + '_ {
        (0..self.tiles.len()).map(move |i| {
            let coord = self.tile_coord(i);
            let dims = self.tile_dims(&coord);
            (i, coord, dims, self.tiles[i])
        })
    }

    /// Gathers the committed tile data into one row-major dense array.
    pub fn to_dense(&self, rt: &Runtime) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; self.len()];
        for (_, coord, dims, handle) in self.iter_tiles() {
            let data = rt.read_tile(handle)?;
            let origin = self.tile_origin(&coord);
            scatter_block(&mut out, &self.shape, &data, &dims, &origin);
        }
        Ok(out)
    }

    /// Builds a tiled tensor from a dense row-major array.
    pub fn from_dense(
        rt: &mut Runtime,
        data: &[f32],
        shape: &[usize],
        tile_shape: &[usize],
    ) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "dense data has {} elements, shape {shape:?} wants {expected}",
                data.len()
            )));
        }
        let t = TiledTensor::new(rt, shape, tile_shape, Fill::Zeros)?;
        t.store_dense(rt, data)?;
        Ok(t)
    }

    /// Overwrites all tiles from a dense array (idle runtime only).
    pub fn store_dense(&self, rt: &mut Runtime, data: &[f32]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "dense data has {} elements, tensor holds {}",
                data.len(),
                self.len()
            )));
        }
        for (_, coord, dims, handle) in self.iter_tiles() {
            let origin = self.tile_origin(&coord);
            let block = gather_block(data, &self.shape, &dims, &origin);
            rt.write_tile(handle, &block)?;
        }
        Ok(())
    }

    /// Serializes header plus tiles in grid order, little-endian.
    pub fn save(&self, rt: &Runtime, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.ndim() as u32).to_le_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &d in &self.tile_shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &h in &self.tiles {
            let data = rt.read_tile(h)?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads data saved by [`TiledTensor::save`] into this tensor. The
    /// stored shape and tiling must match, since tiles are laid out in
    /// grid order.
    pub fn load(&self, rt: &mut Runtime, r: &mut impl Read) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Checkpoint("bad tensor magic".into()));
        }
        let ndim = read_u32(r)? as usize;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {}", dtype[0])));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let tile_shape: Vec<usize> = (0..ndim)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<_>>()?;
        if shape != self.shape || tile_shape != self.tile_shape {
            return Err(Error::Checkpoint(format!(
                "stored tensor is {shape:?}/{tile_shape:?}, expected {:?}/{:?}",
                self.shape, self.tile_shape
            )));
        }
        for &h in &self.tiles {
            let mut buf = vec![0.0f32; h.elems()];
            let mut raw = [0u8; 4];
            for v in buf.iter_mut() {
                r.read_exact(&mut raw)?;
                *v = f32::from_le_bytes(raw);
            }
            rt.write_tile(h, &buf)?;
        }
        Ok(())
    }
}

/// A parameter tensor paired with its gradient, tiled identically.
#[derive(Clone, Debug)]
pub struct TensorGradPair {
    pub value: TiledTensor,
    pub grad: TiledTensor,
}

impl TensorGradPair {
    pub fn new(
        rt: &mut Runtime,
        shape: &[usize],
        tile_shape: &[usize],
        fill: Fill,
    ) -> Result<Self> {
        let value = TiledTensor::new(rt, shape, tile_shape, fill)?;
        let grad = TiledTensor::new(rt, shape, tile_shape, Fill::Zeros)?;
        Ok(TensorGradPair { value, grad })
    }

    /// Wraps an existing value tensor (shared/tied parameters).
    pub fn from_value(rt: &mut Runtime, value: TiledTensor) -> Result<Self> {
        let grad = TiledTensor::new(rt, value.shape(), value.tile_shape(), Fill::Zeros)?;
        Ok(TensorGradPair { value, grad })
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over (seed, index).
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn coord_of(mut linear: usize, grid: &[usize]) -> Vec<usize> {
    let mut coord = vec![0; grid.len()];
    for i in (0..grid.len()).rev() {
        coord[i] = linear % grid[i];
        linear /= grid[i];
    }
    coord
}

pub(crate) fn linear_of(coord: &[usize], grid: &[usize]) -> usize {
    let mut linear = 0;
    for (c, g) in coord.iter().zip(grid) {
        debug_assert!(c < g);
        linear = linear * g + c;
    }
    linear
}

fn tile_dims_at(coord: &[usize], shape: &[usize], tile_shape: &[usize]) -> Vec<usize> {
    coord
        .iter()
        .zip(shape)
        .zip(tile_shape)
        .map(|((&c, &d), &t)| t.min(d - c * t))
        .collect()
}

/// Copies a row-major block into the dense array at `origin`.
fn scatter_block(
    dense: &mut [f32],
    shape: &[usize],
    block: &[f32],
    dims: &[usize],
    origin: &[usize],
) {
    let mut idx = vec![0usize; dims.len()];
    for v in block {
        let mut off = 0;
        for k in 0..dims.len() {
            off = off * shape[k] + origin[k] + idx[k];
        }
        dense[off] = *v;
        advance(&mut idx, dims);
    }
}

/// Extracts a row-major block from the dense array at `origin`.
fn gather_block(dense: &[f32], shape: &[usize], dims: &[usize], origin: &[usize]) -> Vec<f32> {
    let count: usize = dims.iter().product();
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..count {
        let mut off = 0;
        for k in 0..dims.len() {
            off = off * shape[k] + origin[k] + idx[k];
        }
        out.push(dense[off]);
        advance(&mut idx, dims);
    }
    out
}

fn advance(idx: &mut [usize], dims: &[usize]) {
    for i in (0..dims.len()).rev() {
        idx[i] += 1;
        if idx[i] < dims[i] {
            return;
        }
        idx[i] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::Topology;
    use crate::runtime::{AccessMode, RunOptions};

    fn rt() -> Runtime {
        Runtime::new(Topology::cpu_only(2), RunOptions::default()).unwrap()
    }

    #[test]
    fn even_partition_produces_the_expected_grid() {
        let mut rt = rt();
        let t = TiledTensor::new(&mut rt, &[4, 4], &[2, 2], Fill::Zeros).unwrap();
        assert_eq!(t.grid(), &[2, 2]);
        assert_eq!(t.tile_count(), 4);
        for (_, coord, dims, h) in t.iter_tiles() {
            assert_eq!(dims, vec![2, 2]);
            assert_eq!(h.elems(), 4);
            assert!(coord[0] < 2 && coord[1] < 2);
        }
    }

    #[test]
    fn boundary_tiles_carry_remainders() {
        let mut rt = rt();
        let t = TiledTensor::new(&mut rt, &[5, 3], &[2, 3], Fill::Zeros).unwrap();
        assert_eq!(t.grid(), &[3, 1]);
        assert_eq!(t.tile_dims(&[2, 0]), vec![1, 3]);
        let total: usize = t
            .iter_tiles()
            .map(|(_, _, dims, _)| dims.iter().product::<usize>())
            .sum();
        assert_eq!(total, 15, "tile elements add up to the tensor size");
    }

    #[test]
    fn oversized_tile_shapes_are_clamped() {
        let mut rt = rt();
        let t = TiledTensor::new(&mut rt, &[3, 4], &[10, 10], Fill::Zeros).unwrap();
        assert_eq!(t.grid(), &[1, 1]);
        assert_eq!(t.tile_shape(), &[3, 4]);
    }

    #[test]
    fn zero_dims_are_rejected() {
        let mut rt = rt();
        assert!(TiledTensor::new(&mut rt, &[0, 4], &[2, 2], Fill::Zeros).is_err());
        assert!(TiledTensor::new(&mut rt, &[4, 4], &[2, 0], Fill::Zeros).is_err());
    }

    #[test]
    fn seeded_fill_is_identical_across_tensors() {
        let mut rt = rt();
        let fill = Fill::Normal {
            mean: 0.0,
            std: 1.0,
            seed: 7,
        };
        let a = TiledTensor::new(&mut rt, &[6, 5], &[4, 2], fill).unwrap();
        let b = TiledTensor::new(&mut rt, &[6, 5], &[4, 2], fill).unwrap();
        assert_eq!(a.to_dense(&rt).unwrap(), b.to_dense(&rt).unwrap());
    }

    #[test]
    fn dense_round_trip_is_identity() {
        let mut rt = rt();
        let shape = [7, 5, 3];
        let data: Vec<f32> = (0..105).map(|i| i as f32 * 0.5 - 20.0).collect();
        let t = TiledTensor::from_dense(&mut rt, &data, &shape, &[3, 2, 2]).unwrap();
        assert_eq!(t.to_dense(&rt).unwrap(), data);
    }

    #[test]
    fn from_dense_identity_matrix_lands_on_diagonal_tiles() {
        let mut rt = rt();
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let t = TiledTensor::from_dense(&mut rt, &eye, &[3, 3], &[1, 1]).unwrap();
        for (_, coord, _, h) in t.iter_tiles() {
            let v = rt.read_tile(h).unwrap()[0];
            assert_eq!(v, if coord[0] == coord[1] { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn to_dense_reads_committed_task_output() {
        let mut rt = rt();
        let t = TiledTensor::new(&mut rt, &[4, 4], &[2, 2], Fill::Zeros).unwrap();
        for (i, _, _, h) in t.iter_tiles() {
            let c = i as f32;
            rt.submit("fill", 4, vec![(h, AccessMode::Write)], move |ctx| {
                ctx.write(0).fill(c);
                Ok(())
            })
            .unwrap();
        }
        rt.wait_all().unwrap();
        let dense = t.to_dense(&rt).unwrap();
        // Tile (1,1) covers the bottom-right 2x2 block.
        assert_eq!(dense[15], 3.0);
        assert_eq!(dense[0], 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_bytes() {
        let mut rt = rt();
        let fill = Fill::Normal {
            mean: 0.5,
            std: 2.0,
            seed: 3,
        };
        let t = TiledTensor::new(&mut rt, &[5, 4], &[2, 3], fill).unwrap();
        let before = t.to_dense(&rt).unwrap();
        let mut buf = Vec::new();
        t.save(&rt, &mut buf).unwrap();
        let u = TiledTensor::new(&mut rt, &[5, 4], &[2, 3], Fill::Zeros).unwrap();
        u.load(&mut rt, &mut buf.as_slice()).unwrap();
        assert_eq!(u.to_dense(&rt).unwrap(), before);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_detected() {
        let mut rt = rt();
        let t = TiledTensor::new(&mut rt, &[4, 4], &[2, 2], Fill::Const(1.0)).unwrap();
        let mut buf = Vec::new();
        t.save(&rt, &mut buf).unwrap();
        let u = TiledTensor::new(&mut rt, &[4, 5], &[2, 2], Fill::Zeros).unwrap();
        assert!(u.load(&mut rt, &mut buf.as_slice()).is_err());
    }
}
