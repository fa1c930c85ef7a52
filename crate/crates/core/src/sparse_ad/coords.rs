//! Coordinate sets of sparse tensors and the kernel maps ("rulebooks")
//! connecting them.

use std::ops::Range;

use rustc_hash::FxHashMap;

use crate::geometry::VoxelCoord;

/// Sorted, duplicate-free voxel coordinates at one pyramid level.
///
/// Coordinates are stored in level units: a coordinate `c` covers base
/// voxels `[c * stride, (c + 1) * stride)` along each axis.
#[derive(Debug, Clone)]
pub struct CoordSet {
    coords: Vec<VoxelCoord>,
    index: FxHashMap<u64, u32>,
    stride: [u32; 3],
    theta_bins: u32,
    theta_wrap: bool,
    batch_ranges: Vec<Range<usize>>,
}

fn key(c: &VoxelCoord) -> u64 {
    let axis = |v: i32| ((v as i64 + 32768) as u64) & 0xFFFF;
    ((c.batch_index as u64) << 48) | (axis(c.i_rho) << 32) | (axis(c.i_theta) << 16) | axis(c.i_z)
}

/// Pairs `(input_row, output_row)` per kernel tap.
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub taps: Vec<Vec<(u32, u32)>>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Rulebook {
    pub fn num_pairs(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

impl CoordSet {
    /// Builds a base-level set from (possibly unsorted, duplicated) voxels.
    pub fn from_voxels(
        mut coords: Vec<VoxelCoord>,
        theta_bins: u32,
        theta_wrap: bool,
        batch_size: usize,
    ) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self::from_sorted(coords, [1, 1, 1], theta_bins, theta_wrap, batch_size)
    }

    fn from_sorted(
        coords: Vec<VoxelCoord>,
        stride: [u32; 3],
        theta_bins: u32,
        theta_wrap: bool,
        batch_size: usize,
    ) -> Self {
        let mut index = FxHashMap::default();
        index.reserve(coords.len());
        for (i, c) in coords.iter().enumerate() {
            debug_assert!(c.i_rho.abs() < 32768 && c.i_z.abs() < 32768);
            index.insert(key(c), i as u32);
        }
        let mut batch_ranges = Vec::with_capacity(batch_size);
        let mut start = 0;
        for b in 0..batch_size as u32 {
            let end = start + coords[start..].iter().take_while(|c| c.batch_index == b).count();
            batch_ranges.push(start..end);
            start = end;
        }
        assert_eq!(start, coords.len(), "batch index out of range");
        Self {
            coords,
            index,
            stride,
            theta_bins,
            theta_wrap,
            batch_ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn stride(&self) -> [u32; 3] {
        self.stride
    }

    pub fn theta_bins(&self) -> u32 {
        self.theta_bins
    }

    pub fn theta_wrap(&self) -> bool {
        self.theta_wrap
    }

    pub fn batch_size(&self) -> usize {
        self.batch_ranges.len()
    }

    pub fn batch_range(&self, b: usize) -> Range<usize> {
        self.batch_ranges[b].clone()
    }

    pub fn batch_ranges(&self) -> &[Range<usize>] {
        &self.batch_ranges
    }

    pub fn lookup(&self, c: &VoxelCoord) -> Option<u32> {
        self.index.get(&key(c)).copied()
    }

    fn shifted(&self, c: &VoxelCoord, d: [i32; 3]) -> Option<VoxelCoord> {
        let mut t = c.i_theta + d[1];
        if self.theta_wrap {
            t = t.rem_euclid(self.theta_bins as i32);
        }
        Some(VoxelCoord::new(c.batch_index, c.i_rho + d[0], t, c.i_z + d[2]))
    }

    /// Coordinate set one level down, dividing each axis by `factors`.
    pub fn downsample(&self, factors: [u32; 3]) -> CoordSet {
        assert!(
            self.theta_bins % factors[1] == 0,
            "theta bin count {} not divisible by {}",
            self.theta_bins,
            factors[1]
        );
        let mut coarse: Vec<VoxelCoord> = self.coords.iter().map(|c| parent(c, factors)).collect();
        coarse.sort_unstable();
        coarse.dedup();
        let stride = [
            self.stride[0] * factors[0],
            self.stride[1] * factors[1],
            self.stride[2] * factors[2],
        ];
        Self::from_sorted(
            coarse,
            stride,
            self.theta_bins / factors[1],
            self.theta_wrap,
            self.batch_size(),
        )
    }

    /// Kernel map of a stride-1 convolution with an odd cubic kernel. Output
    /// coordinates equal the input coordinates; tap order is
    /// `(d_rho, d_theta, d_z)` nested, each from `-r` to `r`.
    pub fn conv_rulebook(&self, kernel: usize) -> Rulebook {
        assert!(kernel % 2 == 1, "stride-1 kernels must be odd");
        let r = (kernel / 2) as i32;
        let mut taps = Vec::with_capacity(kernel.pow(3));
        for dr in -r..=r {
            for dt in -r..=r {
                for dz in -r..=r {
                    let mut pairs = Vec::new();
                    for (out_row, c) in self.coords.iter().enumerate() {
                        if let Some(n) = self.shifted(c, [dr, dt, dz]) {
                            if let Some(in_row) = self.lookup(&n) {
                                pairs.push((in_row, out_row as u32));
                            }
                        }
                    }
                    taps.push(pairs);
                }
            }
        }
        Rulebook {
            taps,
            n_in: self.len(),
            n_out: self.len(),
        }
    }
}

/// Coarse-level coordinate containing `c`.
pub fn parent(c: &VoxelCoord, factors: [u32; 3]) -> VoxelCoord {
    VoxelCoord::new(
        c.batch_index,
        c.i_rho.div_euclid(factors[0] as i32),
        c.i_theta.div_euclid(factors[1] as i32),
        c.i_z.div_euclid(factors[2] as i32),
    )
}

/// Tap of a 2×2×2 kernel addressed by the child offset inside its parent.
fn child_tap(c: &VoxelCoord, p: &VoxelCoord, factors: [u32; 3]) -> usize {
    let d = [
        c.i_rho - p.i_rho * factors[0] as i32,
        c.i_theta - p.i_theta * factors[1] as i32,
        c.i_z - p.i_z * factors[2] as i32,
    ];
    (d[0] * 4 + d[1] * 2 + d[2]) as usize
}

/// Strided (2×2×2) convolution map from `fine` onto `coarse`, which must be
/// `fine.downsample(factors)`.
pub fn down_rulebook(fine: &CoordSet, coarse: &CoordSet, factors: [u32; 3]) -> Rulebook {
    let mut taps = vec![Vec::new(); 8];
    for (in_row, c) in fine.coords.iter().enumerate() {
        let p = parent(c, factors);
        let out_row = coarse.lookup(&p).expect("coarse set must cover the fine set");
        taps[child_tap(c, &p, factors)].push((in_row as u32, out_row));
    }
    Rulebook {
        taps,
        n_in: fine.len(),
        n_out: coarse.len(),
    }
}

/// Transposed strided convolution map from `coarse` onto exactly the
/// coordinates of `fine`. Each fine row reads its parent through the tap
/// given by its offset, so this is the transpose of [`down_rulebook`].
pub fn up_rulebook(coarse: &CoordSet, fine: &CoordSet, factors: [u32; 3]) -> Rulebook {
    let mut taps = vec![Vec::new(); 8];
    for (out_row, c) in fine.coords.iter().enumerate() {
        let p = parent(c, factors);
        if let Some(in_row) = coarse.lookup(&p) {
            taps[child_tap(c, &p, factors)].push((in_row, out_row as u32));
        }
    }
    Rulebook {
        taps,
        n_in: coarse.len(),
        n_out: fine.len(),
    }
}
