//! Synthetic terrain maps standing in for aerial imagery.
//!
//! A map is a `k x k` grid of terrain classes grown from random walks, so
//! neighbouring tiles tend to share a class. Each tile is rendered as an
//! `8 x 8` RGB patch of its class colour plus uniform pixel noise, and its true
//! travel cost comes from a fixed class table.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{derive, seeded};
use crate::tensor::Tensor;

/// Side length of the square patch rendered for each tile.
pub const TILE_PX: usize = 8;
/// Travel cost per terrain class.
pub const CLASS_COSTS: [f32; 5] = [1.0, 2.0, 4.0, 7.0, 9.0];
/// Base RGB colour per terrain class.
pub const CLASS_COLORS: [[f32; 3]; 5] = [
    [0.45, 0.75, 0.35],
    [0.85, 0.80, 0.50],
    [0.20, 0.45, 0.20],
    [0.55, 0.55, 0.55],
    [0.20, 0.35, 0.80],
];
/// Half-width of the uniform per-pixel noise.
pub const NOISE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub k: usize,
    pub num_classes: usize,
    /// Row-major class labels in `[0, num_classes)`.
    pub classes: Vec<u8>,
}

impl TileGrid {
    /// Fraction of 4-adjacent tile pairs that share a class.
    pub fn same_class_adjacency(&self) -> f64 {
        let k = self.k;
        let (mut same, mut total) = (0usize, 0usize);
        for r in 0..k {
            for c in 0..k {
                let i = r * k + c;
                if c + 1 < k {
                    total += 1;
                    same += (self.classes[i] == self.classes[i + 1]) as usize;
                }
                if r + 1 < k {
                    total += 1;
                    same += (self.classes[i] == self.classes[i + k]) as usize;
                }
            }
        }
        same as f64 / total.max(1) as f64
    }
}

/// One example: the full image `z`, the true costs `theta` and, for
/// generated data, the terrain grid behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `[k*8, k*8, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[k*k]` per-tile travel costs.
    pub theta: Tensor,
    pub grid: Option<TileGrid>,
}

impl Instance {
    pub fn k(&self) -> usize {
        self.image.shape()[0] / TILE_PX
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub k: usize,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

/// Grows a terrain map from random-walk blobs.
///
/// Each blob picks a class and an unpainted start tile and paints the
/// unpainted tiles along a 4-neighbour random walk; leftover tiles copy the
/// class of a random painted neighbour until the grid is full.
pub fn generate_map(seed: u64, k: usize, num_classes: usize) -> Result<TileGrid> {
    if k < 2 {
        return Err(invalid(alloc::format!("map side k must be >= 2, got {k}")));
    }
    if !(2..=CLASS_COSTS.len()).contains(&num_classes) {
        return Err(invalid(alloc::format!(
            "num_classes must be in 2..={}, got {num_classes}",
            CLASS_COSTS.len()
        )));
    }
    const UNSET: u8 = u8::MAX;
    let n = k * k;
    let mut rng = seeded(seed);
    let mut classes = vec![UNSET; n];
    let blobs = num_classes.max(n / 6);
    let mean_len = (n / blobs).max(1);
    for _ in 0..blobs {
        let unset: Vec<usize> = (0..n).filter(|&i| classes[i] == UNSET).collect();
        if unset.is_empty() {
            break;
        }
        let class = rng.random_range(0..num_classes) as u8;
        let mut cur = unset[rng.random_range(0..unset.len())];
        let steps = rng.random_range(mean_len..=2 * mean_len);
        for _ in 0..steps {
            if classes[cur] == UNSET {
                classes[cur] = class;
            }
            let (r, c) = (cur / k, cur % k);
            let mut options = [usize::MAX; 4];
            let mut m = 0;
            if r > 0 {
                options[m] = cur - k;
                m += 1;
            }
            if r + 1 < k {
                options[m] = cur + k;
                m += 1;
            }
            if c > 0 {
                options[m] = cur - 1;
                m += 1;
            }
            if c + 1 < k {
                options[m] = cur + 1;
                m += 1;
            }
            cur = options[rng.random_range(0..m)];
        }
    }
    loop {
        let frontier: Vec<usize> = (0..n)
            .filter(|&i| classes[i] == UNSET)
            .filter(|&i| painted_neighbors(&classes, k, i).next().is_some())
            .collect();
        if frontier.is_empty() {
            break;
        }
        for i in frontier {
            let nbrs: Vec<u8> = painted_neighbors(&classes, k, i).collect();
            if !nbrs.is_empty() {
                classes[i] = nbrs[rng.random_range(0..nbrs.len())];
            }
        }
    }
    Ok(TileGrid {
        k,
        num_classes,
        classes,
    })
}

fn painted_neighbors(classes: &[u8], k: usize, i: usize) -> impl Iterator<Item = u8> + '_ {
    let (r, c) = (i / k, i % k);
    let cand = [
        (r > 0).then(|| i - k),
        (r + 1 < k).then(|| i + k),
        (c > 0).then(|| i - 1),
        (c + 1 < k).then(|| i + 1),
    ];
    cand.into_iter()
        .flatten()
        .map(move |j| classes[j])
        .filter(|&v| v != u8::MAX)
}

/// Renders `grid` into an image and looks up the true tile costs.
pub fn render_instance(grid: &TileGrid, seed: u64) -> Result<Instance> {
    let k = grid.k;
    if grid.classes.len() != k * k || grid.classes.iter().any(|&c| c as usize >= grid.num_classes.min(CLASS_COSTS.len())) {
        return Err(invalid("render: malformed tile grid"));
    }
    let side = k * TILE_PX;
    let mut rng = seeded(seed);
    let mut image = vec![0.0f32; side * side * 3];
    for r in 0..k {
        for c in 0..k {
            let color = CLASS_COLORS[grid.classes[r * k + c] as usize];
            for py in 0..TILE_PX {
                for px in 0..TILE_PX {
                    let base = ((r * TILE_PX + py) * side + c * TILE_PX + px) * 3;
                    for ch in 0..3 {
                        let noise = rng.random_range(-NOISE..=NOISE);
                        image[base + ch] = (color[ch] + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let theta = grid.classes.iter().map(|&c| CLASS_COSTS[c as usize]).collect();
    Ok(Instance {
        image: Tensor::new(vec![side, side, 3], image)?,
        theta: Tensor::from_vec(theta),
        grid: Some(grid.clone()),
    })
}

/// Instance `index` of `split`; fully determined by the dataset seed.
pub fn generate_instance(cfg: &DatasetConfig, split: Split, index: usize) -> Result<Instance> {
    let s = derive(derive(cfg.seed, split.stream()), index as u64);
    let grid = generate_map(derive(s, 0), cfg.k, cfg.num_classes)?;
    render_instance(&grid, derive(s, 1))
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    if cfg.train == 0 || cfg.val == 0 || cfg.test == 0 {
        return Err(invalid("dataset split sizes must be >= 1"));
    }
    let make = |split: Split, count: usize| -> Result<Vec<Instance>> {
        (0..count).map(|i| generate_instance(cfg, split, i)).collect()
    };
    Ok(DatasetSplit {
        train: make(Split::Train, cfg.train)?,
        val: make(Split::Val, cfg.val)?,
        test: make(Split::Test, cfg.test)?,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_are_deterministic_and_seed_dependent() {
        let a = generate_map(0, 12, 5).unwrap();
        assert_eq!(a, generate_map(0, 12, 5).unwrap());
        assert_ne!(a, generate_map(1, 12, 5).unwrap());
        let small = generate_map(0, 2, 2).unwrap();
        assert_eq!(small.classes.len(), 4);
        assert!(small.classes.iter().all(|&c| c < 2));
    }

    #[test]
    fn rejects_degenerate_maps() {
        assert!(generate_map(0, 1, 5).is_err());
        assert!(generate_map(0, 4, 1).is_err());
        assert!(generate_map(0, 4, 6).is_err());
    }

    #[test]
    fn maps_are_spatially_correlated() {
        let mut observed = 0.0;
        let mut iid = 0.0;
        for seed in 0..200 {
            let g = generate_map(seed, 6, 5).unwrap();
            observed += g.same_class_adjacency();
            let mut counts = [0f64; 5];
            for &c in &g.classes {
                counts[c as usize] += 1.0;
            }
            iid += counts.iter().map(|c| (c / 36.0).powi(2)).sum::<f64>();
        }
        assert!(observed > iid * 1.3, "adjacency {observed} vs iid {iid}");
    }

    #[test]
    fn render_shapes_and_costs() {
        let g = generate_map(3, 12, 5).unwrap();
        let inst = render_instance(&g, 9).unwrap();
        assert_eq!(inst.image.shape(), &[96, 96, 3]);
        assert_eq!(inst.k(), 12);
        assert!(inst.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (t, c) in inst.theta.data().iter().zip(&g.classes) {
            assert_eq!(*t, CLASS_COSTS[*c as usize]);
        }
        assert_eq!(inst, render_instance(&g, 9).unwrap());

        let flat = TileGrid {
            k: 3,
            num_classes: 5,
            classes: vec![0; 9],
        };
        let inst = render_instance(&flat, 0).unwrap();
        assert!(inst.theta.data().iter().all(|&t| t == 1.0));
    }

    #[test]
    fn class_costs_injective_positive_and_spanning() {
        for (i, a) in CLASS_COSTS.iter().enumerate() {
            assert!(*a > 0.0);
            for b in &CLASS_COSTS[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(CLASS_COSTS.iter().cloned().fold(f32::MAX, f32::min), 1.0);
        assert_eq!(CLASS_COSTS.iter().cloned().fold(f32::MIN, f32::max), 9.0);
    }

    #[test]
    fn class_colours_separated_beyond_noise() {
        for i in 0..5 {
            for j in i + 1..5 {
                let d: f32 = (0..3)
                    .map(|c| (CLASS_COLORS[i][c] - CLASS_COLORS[j][c]).powi(2))
                    .sum::<f32>()
                    .sqrt();
                assert!(d > 2.0 * NOISE, "classes {i} {j}: {d}");
            }
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = DatasetConfig {
            k: 4,
            num_classes: 5,
            train: 3,
            val: 2,
            test: 2,
            seed: 5,
        };
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (3, 2, 2));
        assert_ne!(a.train[0], a.val[0]);
    }
}
