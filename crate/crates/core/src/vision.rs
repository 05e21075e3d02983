//! Image patches and the dense region graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{ParamId, Tensor};

/// Flattened `P×P×C` patches of a zero-padded image, row-major over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `(rows·cols) × (P·P·C)`
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// A grid holding no patches, for text-only inputs.
    pub fn empty(patch_size: usize, channels: usize) -> Self {
        let dim = patch_size * patch_size * channels;
        Self {
            rows: 0,
            cols: 0,
            patch_size,
            channels,
            patches: Tensor::new(vec![0, dim], vec![]).expect("empty"),
        }
    }
}

/// Splits an `H×W×C` image into `P×P` patches after zero-padding the bottom
/// and right edges to multiples of `P`.
pub fn patchify(image: &Tensor, p: usize) -> Result<PatchGrid> {
    let s = image.shape();
    if s.len() != 3 || s.contains(&0) || p == 0 {
        return Err(Error::dim("patchify", s, &[p]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let rows = h.div_ceil(p);
    let cols = w.div_ceil(p);
    let dim = p * p * c;
    let mut data = vec![0.0; rows * cols * dim];
    for pr in 0..rows {
        for pc in 0..cols {
            let base = (pr * cols + pc) * dim;
            for y in 0..p {
                for x in 0..p {
                    let (iy, ix) = (pr * p + y, pc * p + x);
                    if iy >= h || ix >= w {
                        continue;
                    }
                    for ch in 0..c {
                        data[base + (y * p + x) * c + ch] = image.data()[(iy * w + ix) * c + ch];
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_size: p,
        channels: c,
        patches: Tensor::new(vec![rows * cols, dim], data)?,
    })
}

/// Multiplies every patch row by the projection `W_p: (P·P·C)×d`.
pub fn patch_project(tape: &mut Tape, grid: &PatchGrid, w_p: ParamId) -> Result<Var> {
    let w = tape.store().get(w_p).value.shape().to_vec();
    if w.len() != 2 || w[0] != grid.patch_dim() {
        return Err(Error::dim("patch_project", grid.patches.shape(), &w));
    }
    let patches = tape.constant(grid.patches.clone());
    let w = tape.param(w_p);
    tape.matmul(patches, w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Full,
    Grid4,
}

/// `Full` connects every pair of patches; `Grid4` connects 4-neighbours on a
/// `rows×cols` lattice.
pub fn build_dense_region_graph(n: usize, connectivity: Connectivity, grid: Option<(usize, usize)>) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Config("dense region graph needs at least one patch".into()));
    }
    match connectivity {
        Connectivity::Full => Ok(Graph::complete(n)),
        Connectivity::Grid4 => {
            let (rows, cols) = grid.ok_or_else(|| Error::Config("grid4 needs a grid shape".into()))?;
            if rows * cols != n {
                return Err(Error::Config(format!(
                    "grid {rows}×{cols} does not hold {n} patches"
                )));
            }
            let mut g = Graph::new(n, false);
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    if c + 1 < cols {
                        g.add_edge(i, i + 1, None)?;
                    }
                    if r + 1 < rows {
                        g.add_edge(i, i + cols, None)?;
                    }
                }
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{graph_to_mask, SelfLoops};
    use crate::tensor::{ParamStore, Parameter};

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    /// Reassembles the padded image from its patches.
    fn unpatchify(g: &PatchGrid) -> Tensor {
        let p = g.patch_size;
        let (h, w, c) = (g.rows * p, g.cols * p, g.channels);
        let mut out = vec![0.0; h * w * c];
        for pr in 0..g.rows {
            for pc in 0..g.cols {
                let row = g.patches.row(pr * g.cols + pc);
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            out[((pr * p + y) * w + pc * p + x) * c + ch] = row[(y * p + x) * c + ch];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![h, w, c], out).unwrap()
    }

    #[test]
    fn square_image_patch_count() {
        let g = patchify(&ramp(8, 8, 1), 4).unwrap();
        assert_eq!(g.patches.shape(), &[4, 16]);
    }

    #[test]
    fn padding_rows_are_zero() {
        let img = ramp(6, 4, 1);
        let g = patchify(&img, 4).unwrap();
        assert_eq!((g.rows, g.cols), (2, 1));
        let second = g.patches.row(1);
        // rows 4..6 of the image, then two zero rows
        assert_eq!(&second[..8], &img.data()[16..24]);
        assert!(second[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_image_patch() {
        let img = ramp(4, 4, 2);
        let g = patchify(&img, 4).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.patches.data(), img.data());
    }

    #[test]
    fn unpatchify_inverts_padded_image() {
        for (h, w, c, p) in [(6, 4, 1, 4), (5, 7, 3, 2), (8, 8, 1, 8), (3, 9, 2, 4)] {
            let img = ramp(h, w, c);
            let back = unpatchify(&patchify(&img, p).unwrap());
            let s = back.shape();
            for y in 0..s[0] {
                for x in 0..s[1] {
                    for ch in 0..c {
                        let v = back.data()[(y * s[1] + x) * c + ch];
                        let e = if y < h && x < w { img.data()[(y * w + x) * c + ch] } else { 0.0 };
                        assert_eq!(v, e);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_projection() {
        let g = patchify(&ramp(4, 4, 1), 2).unwrap();
        let mut store = ParamStore::new();
        let w = store.add(Parameter::new("w_p", Tensor::identity(4)));
        let mut tape = Tape::new(&store);
        let out = patch_project(&mut tape, &g, w).unwrap();
        assert_eq!(tape.value(out).data(), g.patches.data());
    }

    #[test]
    fn projection_dimension_mismatch() {
        let g = patchify(&ramp(4, 4, 1), 2).unwrap();
        let mut store = ParamStore::new();
        let w = store.add(Parameter::new("w_p", Tensor::zeros(&[5, 3])));
        let mut tape = Tape::new(&store);
        assert!(matches!(patch_project(&mut tape, &g, w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dense_region_graph_variants() {
        let full = graph_to_mask(&build_dense_region_graph(4, Connectivity::Full, None).unwrap(), SelfLoops::Open);
        assert_eq!(full.blocked_count(), 0);
        let one = graph_to_mask(&build_dense_region_graph(1, Connectivity::Full, None).unwrap(), SelfLoops::Open);
        assert_eq!(one.size(), 1);
        assert_eq!(one.blocked_count(), 0);

        let g = build_dense_region_graph(4, Connectivity::Grid4, Some((2, 2))).unwrap();
        for i in 0..4 {
            let deg = (0..4).filter(|&j| j != i && g.has_edge(i, j)).count();
            assert_eq!(deg, 2);
        }
        let m = graph_to_mask(&g, SelfLoops::Open);
        assert!(!m.is_open(0, 3));
        assert!(build_dense_region_graph(4, Connectivity::Grid4, Some((3, 2))).is_err());
    }
}
