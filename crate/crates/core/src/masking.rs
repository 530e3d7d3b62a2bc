//! Grid masking: a square patch filled with the image's mean brightness is
//! placed at each cell of a regular grid. Corner placements are positives
//! for the anchor, the remaining (or only the central) placements negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Grid cell as `(row, col)`.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Every cell that is not a corner.
    #[default]
    AllNonCorner,
    /// Only the inner `(n−2)²` cells.
    CenterOnly,
}

/// Value written into the patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// One mean per channel.
    #[default]
    PerChannel,
    /// One mean over all channels.
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub image_size: usize,
    pub patch_size: usize,
    /// Cells per side.
    pub grid_n: usize,
    /// Pixel offset of each grid row (and column).
    pub offsets: Vec<usize>,
    /// All cells, row-major.
    pub positions: Vec<Cell>,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub corner_cells: [Cell; 4],
    pub negative_cells: Vec<Cell>,
    pub fill: FillMode,
}

/// Non-overlapping grid with `image_size / patch_size` cells per side.
pub fn make_grid(image_size: usize, patch_size: usize, mode: NegativeMode) -> Result<MaskGrid> {
    if patch_size == 0 || image_size % patch_size != 0 {
        return Err(Error::config(
            "patch_size",
            format!("{patch_size} does not divide image size {image_size}"),
        ));
    }
    make_grid_spread(image_size, patch_size, image_size / patch_size, mode)
}

/// `grid_n × grid_n` placements spread evenly from edge to edge; patches
/// overlap when `grid_n · patch_size > image_size`. With `grid_n =
/// image_size / patch_size` this is [`make_grid`].
pub fn make_grid_spread(image_size: usize, patch_size: usize, grid_n: usize, mode: NegativeMode) -> Result<MaskGrid> {
    if patch_size == 0 || patch_size > image_size {
        return Err(Error::config(
            "patch_size",
            format!("{patch_size} does not fit image size {image_size}"),
        ));
    }
    // Two cells per side leave nothing besides the corners.
    if grid_n < 3 {
        return Err(Error::config(
            "patch_size",
            format!("a {grid_n}×{grid_n} grid has no cells besides the corners"),
        ));
    }
    let n = grid_n;
    let span = image_size - patch_size;
    let offsets = (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1)).collect();
    let positions: Vec<Cell> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    let corner_cells = [(0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)];
    let negative_cells = positions
        .iter()
        .copied()
        .filter(|cell| match mode {
            NegativeMode::AllNonCorner => !corner_cells.contains(cell),
            NegativeMode::CenterOnly => (1..n - 1).contains(&cell.0) && (1..n - 1).contains(&cell.1),
        })
        .collect();
    Ok(MaskGrid {
        image_size,
        patch_size,
        grid_n: n,
        offsets,
        positions,
        corner_cells,
        negative_cells,
        fill: FillMode::PerChannel,
    })
}

impl MaskGrid {
    pub fn with_fill(mut self, fill: FillMode) -> Self {
        self.fill = fill;
        self
    }

    /// Patch values for `x [C×H×W]` under the grid's fill mode.
    pub fn fill_values<T: Scalar>(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let [c, _, _] = self.check_image(x)?;
        let means = channel_means(x.data(), c);
        Ok(match self.fill {
            FillMode::PerChannel => means.iter().map(|&m| T::from_f64(m)).collect(),
            FillMode::Global => vec![T::from_f64(means.iter().sum::<f64>() / c as f64); c],
        })
    }

    fn check_image<T: Scalar>(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        match *x.shape() {
            [c, h, w] if h == self.image_size && w == self.image_size => Ok([c, h, w]),
            ref s => Err(Error::InvalidInput(format!(
                "expected an image [C×{0}×{0}], got {s:?}",
                self.image_size
            ))),
        }
    }

    fn check_cell(&self, cell: Cell) -> Result<()> {
        if cell.0 >= self.grid_n || cell.1 >= self.grid_n {
            return Err(Error::InvalidInput(format!(
                "cell {cell:?} outside the {0}×{0} grid",
                self.grid_n
            )));
        }
        Ok(())
    }
}

fn channel_means<T: Scalar>(x: &[T], c: usize) -> Vec<f64> {
    let plane = x.len() / c;
    x.chunks_exact(plane)
        .map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
        .collect()
}

/// Writes `fill[ch]` into the patch of `cell` in every channel of `out`.
fn paint<T: Scalar>(out: &mut [T], grid: &MaskGrid, cell: Cell, fill: &[T]) {
    let (s, p) = (grid.image_size, grid.patch_size);
    let (y0, x0) = (grid.offsets[cell.0], grid.offsets[cell.1]);
    for (plane, &v) in out.chunks_exact_mut(s * s).zip(fill) {
        for y in y0..y0 + p {
            plane[y * s + x0..][..p].fill(v);
        }
    }
}

/// Copy of `x [C×H×W]` with the patch at `cell` set to the image mean.
pub fn mask_image<T: Scalar>(x: &Tensor<T>, cell: Cell, grid: &MaskGrid) -> Result<Tensor<T>> {
    let fill = grid.fill_values(x)?;
    mask_with(x, cell, grid, &fill)
}

/// [`mask_image`] with precomputed patch values, one per channel.
pub fn mask_with<T: Scalar>(x: &Tensor<T>, cell: Cell, grid: &MaskGrid, fill: &[T]) -> Result<Tensor<T>> {
    let [c, _, _] = grid.check_image(x)?;
    grid.check_cell(cell)?;
    if fill.len() != c {
        return Err(Error::InvalidInput(format!("{} fill values for {c} channels", fill.len())));
    }
    let mut out = x.clone();
    paint(out.data_mut(), grid, cell, fill);
    Ok(out)
}

/// One anchor with its corner-masked positives and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletImages<T> {
    pub anchor: Tensor<T>,
    pub positives: Vec<Tensor<T>>,
    pub negatives: Vec<Tensor<T>>,
}

pub fn build_triplets<T: Scalar>(x: &Tensor<T>, grid: &MaskGrid) -> Result<TripletImages<T>> {
    let fill = grid.fill_values(x)?;
    let masked = |cells: &[Cell]| -> Result<Vec<Tensor<T>>> { cells.iter().map(|&c| mask_with(x, c, grid, &fill)).collect() };
    Ok(TripletImages {
        anchor: x.clone(),
        positives: masked(&grid.corner_cells)?,
        negatives: masked(&grid.negative_cells)?,
    })
}

/// Triplets for a batch `[A×C×H×W]`, laid out for a single encoder pass:
/// `[A·4×C×H×W]` positives and `[A·N×C×H×W]` negatives, grouped by anchor.
pub fn triplet_batch<T: Scalar>(anchors: &Tensor<T>, grid: &MaskGrid) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = anchors.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::InvalidInput(format!("expected an image batch [A×C×H×W], got {shape:?}")));
    }
    let a = shape[0];
    let image = anchors.numel() / a;
    let mut pos = Vec::with_capacity(a * 4 * image);
    let mut neg = Vec::with_capacity(a * grid.negative_cells.len() * image);
    for i in 0..a {
        let x = Tensor::new(shape[1..].to_vec(), anchors.data()[i * image..(i + 1) * image].to_vec())?;
        let fill = grid.fill_values(&x)?;
        for (cells, out) in [(&grid.corner_cells[..], &mut pos), (&grid.negative_cells[..], &mut neg)] {
            for &cell in cells {
                let start = out.len();
                out.extend_from_slice(x.data());
                paint(&mut out[start..], grid, cell, &fill);
            }
        }
    }
    let batch = |n: usize, data: Vec<T>| {
        let mut s = shape.to_vec();
        s[0] = n;
        Tensor::new(s, data)
    };
    Ok((batch(a * 4, pos)?, batch(a * grid.negative_cells.len(), neg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, s, s], |_| rng.random_range(-1.0..1.0))
    }

    fn changed(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<usize> {
        a.data().iter().zip(b.data()).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect()
    }

    #[test]
    fn grid_sizes() {
        let g = make_grid(64, 16, NegativeMode::AllNonCorner).unwrap();
        assert_eq!((g.positions.len(), g.corner_cells.len(), g.negative_cells.len()), (16, 4, 12));
        let g = make_grid(64, 16, NegativeMode::CenterOnly).unwrap();
        assert_eq!(g.negative_cells, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        let g = make_grid(32, 8, NegativeMode::AllNonCorner).unwrap();
        assert_eq!((g.positions.len(), g.negative_cells.len()), (16, 12));
        assert!(g.negative_cells.iter().all(|c| !g.corner_cells.contains(c)));
        assert!(make_grid(64, 24, NegativeMode::AllNonCorner).is_err());
        assert!(make_grid(64, 32, NegativeMode::AllNonCorner).is_err());
        assert!(make_grid(64, 0, NegativeMode::CenterOnly).is_err());
        assert_eq!(g.offsets, vec![0, 8, 16, 24]);
    }

    #[test]
    fn spread_grid_overlaps_large_patches() {
        let g = make_grid_spread(64, 32, 4, NegativeMode::AllNonCorner).unwrap();
        assert_eq!(g.offsets, vec![0, 11, 21, 32]);
        assert_eq!(g.negative_cells.len(), 12);
        let x = random_image(1, 64, 9);
        let m = mask_image(&x, (3, 3), &g).unwrap();
        assert_eq!(changed(&x, &m).len(), 32 * 32);
        assert_eq!(*changed(&x, &m).last().unwrap(), 64 * 64 - 1);
        assert_eq!(make_grid_spread(32, 8, 4, NegativeMode::CenterOnly).unwrap(), make_grid(32, 8, NegativeMode::CenterOnly).unwrap());
        assert!(make_grid_spread(32, 40, 4, NegativeMode::CenterOnly).is_err());
    }

    #[test]
    fn constant_image_is_unchanged() {
        let g = make_grid(16, 4, NegativeMode::AllNonCorner).unwrap();
        let x = Tensor::full(&[3, 16, 16], 0.25f64);
        for &cell in &g.positions {
            assert_eq!(mask_image(&x, cell, &g).unwrap(), x);
        }
    }

    #[test]
    fn top_left_patch_geometry() {
        let g = make_grid(64, 16, NegativeMode::AllNonCorner).unwrap();
        let x = random_image(1, 64, 1);
        let m = mask_image(&x, (0, 0), &g).unwrap();
        let expect: Vec<usize> = (0..16).flat_map(|y| (0..16).map(move |c| y * 64 + c)).collect();
        assert_eq!(changed(&x, &m), expect);
        assert!(mask_image(&x, (4, 0), &g).is_err());
        assert!(mask_image(&random_image(1, 32, 2), (0, 0), &g).is_err());
    }

    #[test]
    fn patch_holds_channel_mean() {
        let g = make_grid(32, 8, NegativeMode::AllNonCorner).unwrap();
        let x = random_image(3, 32, 3);
        let m = mask_image(&x, (2, 1), &g).unwrap();
        for ch in 0..3 {
            let plane = &x.data()[ch * 1024..(ch + 1) * 1024];
            let mean = plane.iter().sum::<f64>() / 1024.0;
            let patch: Vec<f64> = (16..24).flat_map(|y| (8..16).map(move |c| (y, c))).map(|(y, c)| m.data()[ch * 1024 + y * 32 + c]).collect();
            let pm = patch.iter().sum::<f64>() / patch.len() as f64;
            assert!((pm - mean).abs() < 1e-6);
            assert!(patch.iter().all(|&v| v == patch[0]));
        }
        let global = g.clone().with_fill(FillMode::Global);
        let mg = mask_image(&x, (0, 0), &global).unwrap();
        let all = x.data().iter().sum::<f64>() / x.numel() as f64;
        assert!((0..3).all(|ch| (mg.data()[ch * 1024] - all).abs() < 1e-12));
    }

    #[test]
    fn triplet_counts_and_differences() {
        let g = make_grid(64, 16, NegativeMode::AllNonCorner).unwrap();
        let x = random_image(2, 64, 4);
        let before = x.clone();
        let t = build_triplets(&x, &g).unwrap();
        assert_eq!(x, before);
        assert_eq!(t.anchor, x);
        assert_eq!((t.positives.len(), t.negatives.len()), (4, 12));
        for p in &t.positives {
            assert_eq!(changed(&x, p).len(), 2 * 16 * 16);
        }
    }

    #[test]
    fn patches_tile_the_image() {
        let g = make_grid(32, 8, NegativeMode::AllNonCorner).unwrap();
        let mut cover = vec![0u32; 32 * 32];
        for &cell in &g.positions {
            let mut canvas = vec![0.0f64; 32 * 32];
            paint(&mut canvas, &g, cell, &[1.0]);
            for (c, v) in cover.iter_mut().zip(&canvas) {
                *c += *v as u32;
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn batch_layout_matches_single_triplets() {
        let g = make_grid(16, 4, NegativeMode::CenterOnly).unwrap();
        let xs = [random_image(1, 16, 5), random_image(1, 16, 6)];
        let batch = Tensor::stack(&[&xs[0], &xs[1]]).unwrap();
        let (pos, neg) = triplet_batch(&batch, &g).unwrap();
        assert_eq!(pos.shape(), &[8, 1, 16, 16]);
        assert_eq!(neg.shape(), &[8, 1, 16, 16]);
        for (i, x) in xs.iter().enumerate() {
            let t = build_triplets(x, &g).unwrap();
            for (j, p) in t.positives.iter().enumerate() {
                assert_eq!(pos.row(i * 4 + j).data(), p.data());
            }
            for (j, n) in t.negatives.iter().enumerate() {
                assert_eq!(neg.row(i * 4 + j).data(), n.data());
            }
        }
    }

    proptest! {
        #[test]
        fn masking_with_fixed_fill_is_idempotent(seed in any::<u64>(), r in 0usize..4, c in 0usize..4) {
            let g = make_grid(16, 4, NegativeMode::AllNonCorner).unwrap();
            let x = random_image(3, 16, seed);
            let fill = g.fill_values(&x).unwrap();
            let once = mask_with(&x, (r, c), &g, &fill).unwrap();
            let twice = mask_with(&once, (r, c), &g, &fill).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn masked_pixels_stay_inside_patch(seed in any::<u64>(), r in 0usize..4, c in 0usize..4) {
            let g = make_grid(16, 4, NegativeMode::AllNonCorner).unwrap();
            let x = random_image(1, 16, seed);
            let m = mask_image(&x, (r, c), &g).unwrap();
            for i in changed(&x, &m) {
                let (y, col) = (i / 16, i % 16);
                prop_assert!(y / 4 == r && col / 4 == c);
            }
        }
    }
}
