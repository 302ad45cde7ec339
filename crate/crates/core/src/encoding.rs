//! Scene contraction and the multi-resolution hash-grid encoding.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec3;

/// A point inside the open ball of radius 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractedPoint(Vec3);

impl ContractedPoint {
    pub fn new(p: Vec3) -> Result<Self> {
        if p.iter().all(|v| v.is_finite()) && p.norm() < 2.0 {
            Ok(Self(p))
        } else {
            Err(Error::input(format!("{:?} is not inside the radius-2 ball", p.as_slice())))
        }
    }

    pub fn value(&self) -> &Vec3 {
        &self.0
    }
}

/// Identity on the unit ball, `(2 - 1/|x|) x/|x|` outside.
pub fn contract(x: &Vec3) -> Result<ContractedPoint> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::input("contract: non-finite input"));
    }
    Ok(ContractedPoint(contract_unchecked(x)))
}

pub(crate) fn contract_unchecked(x: &Vec3) -> Vec3 {
    let r = x.norm();
    if r <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / r) / r)
    }
}

/// Jacobian of [`contract`]; symmetric.
pub fn contract_jacobian(x: &Vec3) -> Matrix3<f64> {
    let r = x.norm();
    if r <= 1.0 {
        return Matrix3::identity();
    }
    // contract(x) = g(r) x with g(r) = 2/r - 1/r^2
    let g = 2.0 / r - 1.0 / (r * r);
    let dg = -2.0 / (r * r) + 2.0 / (r * r * r);
    Matrix3::identity() * g + (x * x.transpose()) * (dg / r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub log2_table_size: u32,
    pub features_per_level: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            max_resolution: 256,
            log2_table_size: 16,
            features_per_level: 2,
        }
    }
}

impl HashGridConfig {
    pub fn resolutions(&self) -> Result<Vec<usize>> {
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::Config("hash grid needs levels, features and resolution".into()));
        }
        if self.log2_table_size > 28 {
            return Err(Error::Config("hash table too large".into()));
        }
        let res: Vec<usize> = if self.levels == 1 {
            vec![self.base_resolution]
        } else {
            let growth = (self.max_resolution as f64 / self.base_resolution as f64).powf(1.0 / (self.levels - 1) as f64);
            (0..self.levels)
                .map(|l| (self.base_resolution as f64 * growth.powi(l as i32)).round() as usize)
                .collect()
        };
        if res.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("hash grid resolutions must strictly increase, got {res:?}")));
        }
        Ok(res)
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Corner indices and trilinear weights of one point at one level.
#[derive(Clone, Copy, Debug, Default)]
pub struct LevelSample {
    pub idx: [u32; 8],
    pub w: [f64; 8],
    pub frac: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
    table_size: usize,
    /// `levels x table_size x features`, level-major.
    pub params: Vec<f64>,
}

impl HashGrid {
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        for v in grid.params.iter_mut() {
            *v = rng.random_range(-1e-4..1e-4);
        }
        Ok(grid)
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        let resolutions = config.resolutions()?;
        let table_size = 1usize << config.log2_table_size;
        let dense = resolutions.iter().map(|&r| (r + 1).pow(3) <= table_size).collect();
        let params = vec![0.0; config.levels * table_size * config.features_per_level];
        Ok(Self {
            config,
            resolutions,
            dense,
            table_size,
            params,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn features(&self) -> usize {
        self.config.features_per_level
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn is_dense(&self, level: usize) -> bool {
        self.dense[level]
    }

    /// Table slot of integer vertex `cell` at `level`: row-major when the
    /// level's vertex lattice fits the table, XOR-of-products hash otherwise.
    pub fn hash_index(&self, level: usize, cell: [u32; 3]) -> Result<usize> {
        if level >= self.config.levels {
            return Err(Error::input(format!(
                "level {level} out of range for {} levels",
                self.config.levels
            )));
        }
        Ok(self.index_unchecked(level, cell))
    }

    #[inline]
    fn index_unchecked(&self, level: usize, cell: [u32; 3]) -> usize {
        if self.dense[level] {
            let side = self.resolutions[level] + 1;
            cell[0] as usize + side * (cell[1] as usize + side * cell[2] as usize)
        } else {
            let h = (cell[0] as u64).wrapping_mul(PRIMES[0])
                ^ (cell[1] as u64).wrapping_mul(PRIMES[1])
                ^ (cell[2] as u64).wrapping_mul(PRIMES[2]);
            (h as usize) & (self.table_size - 1)
        }
    }

    /// Offset of the first feature of `slot` at `level` in `params`.
    #[inline]
    pub fn param_offset(&self, level: usize, slot: usize) -> usize {
        (level * self.table_size + slot) * self.config.features_per_level
    }

    #[inline]
    pub fn locate(&self, level: usize, p: &Vec3) -> LevelSample {
        let res = self.resolutions[level];
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] + 2.0) * 0.25 * res as f64).clamp(0.0, res as f64);
            let i = (g.floor() as usize).min(res - 1);
            base[a] = i as u32;
            frac[a] = g - i as f64;
        }
        let mut s = LevelSample {
            frac,
            ..Default::default()
        };
        for c in 0..8 {
            let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut cell = base;
            for a in 0..3 {
                if bit[a] == 1 {
                    w *= frac[a];
                    cell[a] += 1;
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            s.idx[c] = self.index_unchecked(level, cell) as u32;
            s.w[c] = w;
        }
        s
    }

    /// Encodes one contracted point, writing `levels * features` values to
    /// `out` and the per-level interpolation records to `records`.
    pub fn encode_into(&self, p: &Vec3, out: &mut [f64], records: &mut [LevelSample]) {
        let f = self.config.features_per_level;
        for l in 0..self.config.levels {
            let s = self.locate(l, p);
            let o = &mut out[l * f..(l + 1) * f];
            o.fill(0.0);
            for c in 0..8 {
                let off = self.param_offset(l, s.idx[c] as usize);
                for j in 0..f {
                    o[j] += s.w[c] * self.params[off + j];
                }
            }
            records[l] = s;
        }
    }

    pub fn encode(&self, p: &ContractedPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        let mut rec = vec![LevelSample::default(); self.levels()];
        self.encode_into(p.value(), &mut out, &mut rec);
        out
    }

    /// Scatters `upstream` (d loss / d features) into the dense table gradient.
    pub fn accumulate_table_grad(&self, records: &[LevelSample], upstream: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_level;
        for (l, s) in records.iter().enumerate() {
            let up = &upstream[l * f..(l + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            for c in 0..8 {
                let off = self.param_offset(l, s.idx[c] as usize);
                for j in 0..f {
                    grad[off + j] += s.w[c] * up[j];
                }
            }
        }
    }

    /// Gradient with respect to the contracted point.
    pub fn point_grad(&self, records: &[LevelSample], upstream: &[f64]) -> Vec3 {
        let f = self.config.features_per_level;
        let mut g = Vec3::zeros();
        for (l, s) in records.iter().enumerate() {
            let up = &upstream[l * f..(l + 1) * f];
            let scale = 0.25 * self.resolutions[l] as f64;
            for c in 0..8 {
                let off = self.param_offset(l, s.idx[c] as usize);
                let dot: f64 = (0..f).map(|j| up[j] * self.params[off + j]).sum();
                if dot == 0.0 {
                    continue;
                }
                let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                for a in 0..3 {
                    let mut dw = if bit[a] == 1 { 1.0 } else { -1.0 };
                    for b in 0..3 {
                        if b != a {
                            dw *= if bit[b] == 1 { s.frac[b] } else { 1.0 - s.frac[b] };
                        }
                    }
                    g[a] += dw * dot * scale;
                }
            }
        }
        g
    }

    /// Adjoint of `encode(contract(x))`: sparse table gradient as
    /// `(param index, value)` pairs and the gradient with respect to `x`.
    pub fn encode_grad(&self, x: &Vec3, upstream: &[f64]) -> Result<(Vec<(usize, f64)>, Vec3)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream has {} entries, encoding has {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let p = contract(x)?;
        let mut out = vec![0.0; self.output_dim()];
        let mut rec = vec![LevelSample::default(); self.levels()];
        self.encode_into(p.value(), &mut out, &mut rec);
        let f = self.features();
        let mut sparse = Vec::new();
        for (l, s) in rec.iter().enumerate() {
            for c in 0..8 {
                let off = self.param_offset(l, s.idx[c] as usize);
                for j in 0..f {
                    let v = s.w[c] * upstream[l * f + j];
                    if v != 0.0 {
                        sparse.push((off + j, v));
                    }
                }
            }
        }
        let gp = self.point_grad(&rec, upstream);
        Ok((sparse, contract_jacobian(x) * gp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            base_resolution: 4,
            max_resolution: 32,
            log2_table_size: 10,
            features_per_level: 2,
        }
    }

    fn random_grid(config: HashGridConfig, seed: u64) -> HashGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = HashGrid::zeros(config).unwrap();
        for v in g.params.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn contract_examples() {
        assert_eq!(*contract(&Vec3::zeros()).unwrap().value(), Vec3::zeros());
        assert_eq!(*contract(&Vec3::new(0.5, 0.0, 0.0)).unwrap().value(), Vec3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(
            *contract(&Vec3::new(10.0, 0.0, 0.0)).unwrap().value(),
            Vec3::new(1.9, 0.0, 0.0),
            epsilon = 1e-15
        );
        assert!(contract(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn contract_jacobian_matches_differences() {
        for x in [Vec3::new(0.3, -0.2, 0.1), Vec3::new(2.0, -1.5, 0.7), Vec3::new(-9.0, 4.0, 1.0)] {
            let j = contract_jacobian(&x);
            let h = 1e-6;
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let d = (contract_unchecked(&(x + e)) - contract_unchecked(&(x - e))) / (2.0 * h);
                for b in 0..3 {
                    assert_relative_eq!(d[b], j[(b, a)], epsilon = 1e-8);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn contract_is_bounded_and_norm_monotone(
            x in prop::array::uniform3(-1e6f64..1e6),
            s in 1.0f64..10.0,
        ) {
            let x = Vec3::from(x);
            let c = contract(&x).unwrap();
            prop_assert!(c.value().norm() < 2.0);
            if x.norm() <= 1.0 {
                prop_assert_eq!(*c.value(), x);
            }
            let y = x * s;
            prop_assert!(contract(&y).unwrap().value().norm() >= c.value().norm() - 1e-12);
        }

        #[test]
        fn encode_is_linear_in_tables(p in prop::array::uniform3(-1.1f64..1.1), sa in 0u64..100, sb in 100u64..200) {
            let a = random_grid(small_config(), sa);
            let b = random_grid(small_config(), sb);
            let mut sum = a.clone();
            for (s, v) in sum.params.iter_mut().zip(&b.params) {
                *s += v;
            }
            let p = ContractedPoint::new(Vec3::from(p)).unwrap();
            let (ea, eb, es) = (a.encode(&p), b.encode(&p), sum.encode(&p));
            for i in 0..es.len() {
                prop_assert!((es[i] - ea[i] - eb[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_resolutions_are_geometric() {
        let res = HashGridConfig::default().resolutions().unwrap();
        assert_eq!(res.len(), 8);
        assert_eq!(res[0], 16);
        assert_eq!(res[7], 256);
    }

    #[test]
    fn zero_cell_hashes_to_zero_on_every_level() {
        let g = HashGrid::zeros(HashGridConfig::default()).unwrap();
        for l in 0..g.levels() {
            assert_eq!(g.hash_index(l, [0, 0, 0]).unwrap(), 0);
            assert_eq!(g.hash_index(l, [3, 9, 27]).unwrap(), g.hash_index(l, [3, 9, 27]).unwrap());
        }
        assert!(g.hash_index(8, [0, 0, 0]).is_err());
        assert!(g.is_dense(0) && !g.is_dense(7));
    }

    #[test]
    fn dense_levels_are_collision_free() {
        let g = HashGrid::zeros(HashGridConfig::default()).unwrap();
        for l in (0..g.levels()).filter(|&l| g.is_dense(l)) {
            let side = g.resolutions()[l] as u32 + 1;
            let mut seen = vec![false; g.table_size()];
            for z in 0..side {
                for y in 0..side {
                    for x in 0..side {
                        let i = g.hash_index(l, [x, y, z]).unwrap();
                        assert!(!seen[i], "collision at level {l}");
                        seen[i] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn vertex_query_returns_stored_feature() {
        let g = random_grid(small_config(), 3);
        // p = 0 maps to grid coordinate res/2, a vertex at every (even) resolution.
        let p = ContractedPoint::new(Vec3::zeros()).unwrap();
        let e = g.encode(&p);
        for (l, &res) in g.resolutions().iter().enumerate() {
            let v = (res / 2) as u32;
            let off = g.param_offset(l, g.hash_index(l, [v, v, v]).unwrap());
            assert_eq!(&e[l * 2..l * 2 + 2], &g.params[off..off + 2]);
        }
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let g = HashGrid::zeros(small_config()).unwrap();
        let e = g.encode(&ContractedPoint::new(Vec3::new(0.3, -1.2, 0.9)).unwrap());
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_centre_is_mean_of_corners() {
        let g = random_grid(small_config(), 5);
        // Level 0 has resolution 4: cell (1,2,0) spans grid coords [1,2]x[2,3]x[0,1].
        let gc = Vec3::new(1.5, 2.5, 0.5);
        let p = gc.map(|v| v / 4.0 * 4.0 - 2.0);
        let e = g.encode(&ContractedPoint::new(p).unwrap());
        let mut mean = [0.0; 2];
        for c in 0..8u32 {
            let cell = [1 + (c & 1), 2 + ((c >> 1) & 1), (c >> 2) & 1];
            let off = g.param_offset(0, g.hash_index(0, cell).unwrap());
            for j in 0..2 {
                mean[j] += g.params[off + j] / 8.0;
            }
        }
        assert_relative_eq!(e[0], mean[0], epsilon = 1e-14);
        assert_relative_eq!(e[1], mean[1], epsilon = 1e-14);
    }

    #[test]
    fn encode_is_continuous_across_faces() {
        let g = random_grid(HashGridConfig::default(), 9);
        // Grid coordinate 8 at level 0 (res 16) is a face between cells 7 and 8.
        let face = 8.0 / 16.0 * 4.0 - 2.0;
        let lo = g.encode(&ContractedPoint::new(Vec3::new(face - 1e-13, 0.1, 0.2)).unwrap());
        let hi = g.encode(&ContractedPoint::new(Vec3::new(face + 1e-13, 0.1, 0.2)).unwrap());
        for (a, b) in lo.iter().zip(&hi) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = random_grid(small_config(), 1);
        let (tables, point) = g.encode_grad(&Vec3::new(0.2, 0.4, -0.3), &[0.0; 8]).unwrap();
        assert!(tables.is_empty());
        assert_eq!(point, Vec3::zeros());
        assert!(matches!(g.encode_grad(&Vec3::zeros(), &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn vertex_aligned_gradient_hits_one_entry_per_level() {
        let g = random_grid(small_config(), 2);
        let up = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let (tables, _) = g.encode_grad(&Vec3::zeros(), &up).unwrap();
        assert_eq!(tables.len(), 4);
        assert!(tables.iter().all(|&(_, v)| v == 1.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn encode_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = random_grid(HashGridConfig::default(), 4);
        let h = 1e-5;
        for _ in 0..20 {
            // Mix of points inside and outside the unit ball.
            let x = Vec3::new(
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
            );
            let up: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |g: &HashGrid, x: &Vec3| -> f64 {
                let e = g.encode(&contract(x).unwrap());
                e.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let (tables, gx) = g.encode_grad(&x, &up).unwrap();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let fd = (loss(&g, &(x + e)) - loss(&g, &(x - e))) / (2.0 * h);
                assert!(rel_err(gx[a], fd) < 1e-4, "point grad {a}: {} vs {fd}", gx[a]);
            }
            for &(i, v) in tables.iter().take(6) {
                let keep = g.params[i];
                g.params[i] = keep + h;
                let lp = loss(&g, &x);
                g.params[i] = keep - h;
                let lm = loss(&g, &x);
                g.params[i] = keep;
                // Hash collisions can merge several contributions into one slot.
                let total: f64 = tables.iter().filter(|t| t.0 == i).map(|t| t.1).sum();
                assert!(rel_err(total, (lp - lm) / (2.0 * h)) < 1e-4, "table grad {v}");
            }
        }
    }
}
