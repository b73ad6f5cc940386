//! Thresholding, 3D hole filling and lung component selection.

use std::collections::VecDeque;

use crate::data::{linear_index, Dims, MaskVolume, Spacing};
use crate::error::{Error, Result};

/// Volume ratio at or above which only the largest component is kept.
pub const LUNG_RATIO_LIMIT: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Vec<f64>,
}

impl ProbabilityVolume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != voxels.len() {
            return Err(Error::Dimension(format!("dims {dims:?} do not match {} voxels", voxels.len())));
        }
        if let Some(p) = voxels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("probability {p} outside [0, 1]")));
        }
        Ok(ProbabilityVolume { dims, spacing, voxels })
    }
}

/// `1` where `p >= t`.
pub fn threshold(pv: &ProbabilityVolume, t: f64) -> Result<MaskVolume> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("threshold {t} must lie in (0, 1)")));
    }
    let voxels = pv.voxels.iter().map(|&p| u8::from(p >= t)).collect();
    MaskVolume::new(pv.dims, pv.spacing, voxels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Per voxel: 0 for background, else the component label `1..=C`.
    pub labels: Vec<u32>,
    /// Voxel count of component `c + 1`, non-increasing.
    pub sizes: Vec<usize>,
    pub volumes_mm3: Vec<f64>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Smaller index as root so each root is its set's minimum index.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Foreground components under 26-connectivity, labelled by descending
/// size with ties going to the component whose first voxel comes first.
pub fn connected_components(mask: &MaskVolume) -> Components {
    let [nx, ny, nz] = mask.dims;
    let n = mask.voxels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    // Half of the 26-neighbourhood: offsets that precede the voxel in scan order.
    let back: Vec<(isize, isize, isize)> = (-1..=1)
        .flat_map(|dz| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| (dx, dy, dz))))
        .filter(|&(dx, dy, dz)| (dz, dy, dx) < (0, 0, 0))
        .collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = linear_index(mask.dims, x, y, z);
                if mask.voxels[i] == 0 {
                    continue;
                }
                for &(dx, dy, dz) in &back {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let j = linear_index(mask.dims, qx as usize, qy as usize, qz as usize);
                    if mask.voxels[j] != 0 {
                        union(&mut parent, i, j);
                    }
                }
            }
        }
    }
    // Roots are minimum indices, so (size desc, root asc) is the label order.
    let mut size = vec![0usize; n];
    for i in 0..n {
        if mask.voxels[i] != 0 {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    let mut roots: Vec<usize> = (0..n).filter(|&i| size[i] > 0).collect();
    roots.sort_by(|&a, &b| size[b].cmp(&size[a]).then(a.cmp(&b)));
    let mut label_of = vec![0u32; n];
    for (l, &r) in roots.iter().enumerate() {
        label_of[r] = l as u32 + 1;
    }
    let labels = (0..n)
        .map(|i| if mask.voxels[i] != 0 { label_of[find(&mut parent, i)] } else { 0 })
        .collect();
    let sizes: Vec<usize> = roots.iter().map(|&r| size[r]).collect();
    let voxel = mask.voxel_volume_mm3();
    Components {
        labels,
        volumes_mm3: sizes.iter().map(|&s| s as f64 * voxel).collect(),
        sizes,
    }
}

fn neighbours6(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

fn on_border(dims: Dims, i: usize) -> bool {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
    x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz
}

/// Sets every background voxel not 6-connected to the volume border.
pub fn fill_holes(mask: &MaskVolume) -> MaskVolume {
    let n = mask.voxels.len();
    let mut outside = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n)
        .filter(|&i| mask.voxels[i] == 0 && on_border(mask.dims, i))
        .collect();
    for &i in &queue {
        outside[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours6(mask.dims, i) {
            if mask.voxels[j] == 0 && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    MaskVolume {
        dims: mask.dims,
        spacing: mask.spacing,
        voxels: outside.iter().map(|&o| u8::from(!o)).collect(),
    }
}

/// Fills holes, then keeps the two largest components when their volume
/// ratio is below 5 and only the largest otherwise.
pub fn keep_lungs(mask: &MaskVolume) -> MaskVolume {
    let filled = fill_holes(mask);
    let comps = connected_components(&filled);
    let keep = match comps.sizes.as_slice() {
        [] => 0,
        [_] => 1,
        [a, b, ..] => {
            if (*a as f64) / (*b as f64) < LUNG_RATIO_LIMIT {
                2
            } else {
                1
            }
        }
    };
    MaskVolume {
        dims: filled.dims,
        spacing: filled.spacing,
        voxels: comps.labels.iter().map(|&l| u8::from(l != 0 && l as usize <= keep)).collect(),
    }
}

/// Candidate thresholds `0.05, 0.10, …, 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (1..20).map(|i| f64::from(i) / 20.0).collect()
}
