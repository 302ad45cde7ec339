//! Training objectives and their gradients with respect to direct inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, Vec3};

/// Weights of the total objective. The smoothness term is folded into the
/// cycle group: `cycle * (L_cyc + smooth * L_smooth)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub static_rgb: f64,
    pub dynamic_rgb: f64,
    pub optical: f64,
    pub cycle: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            static_rgb: 1.0,
            dynamic_rgb: 1.0,
            optical: 0.1,
            cycle: 1.0,
            smooth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.static_rgb, self.dynamic_rgb, self.optical, self.cycle, self.smooth];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub static_rgb: f64,
    pub dynamic_rgb: f64,
    pub optical: f64,
    pub cycle: f64,
    pub smooth: f64,
}

pub fn loss_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.static_rgb * c.static_rgb + w.dynamic_rgb * c.dynamic_rgb + w.optical * c.optical + w.cycle * (c.cycle + w.smooth * c.smooth)
}

type Rgb = [f64; 3];

/// `sum_i |(C_i - C_gt_i)(1 - M_i)|^2` and its gradient with respect to `C`.
pub fn loss_static(pred: &[Rgb], gt: &[Rgb], mask: &[u8]) -> Result<(f64, Vec<Rgb>)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::shape("static loss inputs differ in length"));
    }
    if let Some(m) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::input(format!("mask value {m} is not binary")));
    }
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; pred.len()];
    for i in 0..pred.len() {
        if mask[i] == 1 {
            continue;
        }
        for c in 0..3 {
            let r = pred[i][c] - gt[i][c];
            loss += r * r;
            grad[i][c] = 2.0 * r;
        }
    }
    Ok((loss, grad))
}

/// Sum over the three times of the unit of squared color errors.
pub fn loss_dynamic(pred: &[Vec<Rgb>], gt: &[Vec<Rgb>]) -> Result<(f64, Vec<Vec<Rgb>>)> {
    if pred.len() != 3 || gt.len() != 3 {
        return Err(Error::input(format!(
            "dynamic loss needs renders at t-1, t, t+1; got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(3);
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::shape("dynamic loss inputs differ in length"));
        }
        let mut grad = vec![[0.0; 3]; p.len()];
        for i in 0..p.len() {
            for c in 0..3 {
                let r = p[i][c] - g[i][c];
                loss += r * r;
                grad[i][c] = 2.0 * r;
            }
        }
        grads.push(grad);
    }
    Ok((loss, grads))
}

/// Pinhole projection to continuous pixel coordinates.
pub fn project(x: &Vec3, camera: &Camera) -> Result<[f64; 2]> {
    camera.project(x)
}

/// Gradients of [`loss_optical`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalGrad {
    pub x_hat: Vec<Vec3>,
    pub s_fw: Vec<Vec3>,
    pub s_bw: Vec<Vec3>,
}

/// L1 distance between projected scene flow and 2D flow labels, both
/// directions: `|phi(x + s) - phi(x) - f_gt|_1`. Rays whose points project
/// behind their camera contribute nothing.
pub fn loss_optical(
    cameras: &[&Camera],
    x_hat: &[Vec3],
    s_fw: &[Vec3],
    s_bw: &[Vec3],
    gt_fw: &[[f64; 2]],
    gt_bw: &[[f64; 2]],
) -> Result<(f64, OpticalGrad)> {
    let n = x_hat.len();
    if [cameras.len(), s_fw.len(), s_bw.len(), gt_fw.len(), gt_bw.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::shape("optical flow loss inputs differ in length"));
    }
    if s_fw.iter().chain(s_bw).any(|s| !s.iter().all(|v| v.is_finite())) {
        return Err(Error::input("non-finite scene flow"));
    }
    let mut loss = 0.0;
    let mut g = OpticalGrad {
        x_hat: vec![Vec3::zeros(); n],
        s_fw: vec![Vec3::zeros(); n],
        s_bw: vec![Vec3::zeros(); n],
    };
    for i in 0..n {
        let Ok((base, jb)) = cameras[i].project_with_jacobian(&x_hat[i]) else {
            continue;
        };
        for (s, gt, gs) in [(&s_fw[i], &gt_fw[i], &mut g.s_fw[i]), (&s_bw[i], &gt_bw[i], &mut g.s_bw[i])] {
            let Ok((moved, jm)) = cameras[i].project_with_jacobian(&(x_hat[i] + s)) else {
                continue;
            };
            for r in 0..2 {
                let res = moved[r] - base[r] - gt[r];
                loss += res.abs();
                let sign = if res > 0.0 {
                    1.0
                } else if res < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let jm_r = Vec3::from(jm[r]);
                let jb_r = Vec3::from(jb[r]);
                *gs += jm_r * sign;
                g.x_hat[i] += (jm_r - jb_r) * sign;
            }
        }
    }
    Ok((loss, g))
}

/// Gradients of [`loss_cycle`], one per input array.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGrad {
    pub s_fw: Vec<Vec3>,
    pub s_bw_next: Vec<Vec3>,
    pub s_bw: Vec<Vec3>,
    pub s_fw_prev: Vec<Vec3>,
}

/// `sum |s_fw + s_bw(x + s_fw, t+1)|^2 + |s_bw + s_fw(x + s_bw, t-1)|^2`,
/// with the warped flows passed in as `s_bw_next` and `s_fw_prev`.
pub fn loss_cycle(s_fw: &[Vec3], s_bw_next: &[Vec3], s_bw: &[Vec3], s_fw_prev: &[Vec3]) -> Result<(f64, CycleGrad)> {
    let n = s_fw.len();
    if [s_bw_next.len(), s_bw.len(), s_fw_prev.len()].iter().any(|&l| l != n) {
        return Err(Error::shape("cycle loss inputs differ in length"));
    }
    let mut loss = 0.0;
    let mut g = CycleGrad {
        s_fw: vec![Vec3::zeros(); n],
        s_bw_next: vec![Vec3::zeros(); n],
        s_bw: vec![Vec3::zeros(); n],
        s_fw_prev: vec![Vec3::zeros(); n],
    };
    for i in 0..n {
        let a = s_fw[i] + s_bw_next[i];
        let b = s_bw[i] + s_fw_prev[i];
        loss += a.norm_squared() + b.norm_squared();
        g.s_fw[i] = a * 2.0;
        g.s_bw_next[i] = a * 2.0;
        g.s_bw[i] = b * 2.0;
        g.s_fw_prev[i] = b * 2.0;
    }
    Ok((loss, g))
}

/// `sum |s_k - s_{k+1}|^2` over adjacent samples of each ray; `flows` holds
/// `per_ray` consecutive samples per ray.
pub fn loss_smooth(flows: &[Vec3], per_ray: usize) -> Result<(f64, Vec<Vec3>)> {
    if per_ray == 0 || flows.len() % per_ray != 0 {
        return Err(Error::shape(format!(
            "{} flow samples do not split into rays of {per_ray}",
            flows.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); flows.len()];
    for r in 0..flows.len() / per_ray {
        let base = r * per_ray;
        for k in base..base + per_ray - 1 {
            let d = flows[k] - flows[k + 1];
            loss += d.norm_squared();
            grad[k] += d * 2.0;
            grad[k + 1] -= d * 2.0;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera {
            id: "c".into(),
            agent_id: "a".into(),
            rotation: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            translation: Vec3::new(0.0, 0.0, 1.0),
            intrinsics: Intrinsics {
                fx: 50.0,
                fy: 40.0,
                cx: 32.0,
                cy: 24.0,
            },
            width: 64,
            height: 48,
        }
    }

    #[test]
    fn static_loss_cases() {
        let gt = vec![[0.2, 0.3, 0.4]; 3];
        assert_eq!(loss_static(&gt, &gt, &[0, 0, 0]).unwrap().0, 0.0);
        let off = vec![[0.9; 3]; 3];
        let (l, g) = loss_static(&off, &gt, &[1, 1, 1]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|r| *r == [0.0; 3]));
        let (l, _) = loss_static(&[[0.3, 0.3, 0.4]], &[[0.2, 0.3, 0.4]], &[0]).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(matches!(loss_static(&off, &gt, &[0, 2, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn dynamic_loss_counts_terms() {
        let p = 5;
        let e = 0.05;
        let gt: Vec<Vec<Rgb>> = (0..3).map(|_| vec![[0.5; 3]; p]).collect();
        let pred: Vec<Vec<Rgb>> = (0..3).map(|_| vec![[0.5 + e; 3]; p]).collect();
        assert_eq!(loss_dynamic(&gt, &gt).unwrap().0, 0.0);
        let (l, _) = loss_dynamic(&pred, &gt).unwrap();
        assert!((l - 3.0 * p as f64 * 3.0 * e * e).abs() < 1e-14);
        assert!(matches!(loss_dynamic(&pred[..2], &gt[..2]), Err(Error::Input(_))));
    }

    #[test]
    fn projection_cases() {
        let cam = camera();
        // Forward is world +x; right is world -y; down is world -z.
        assert_eq!(project(&Vec3::new(5.0, 0.0, 1.0), &cam).unwrap(), [32.0, 24.0]);
        let near = project(&Vec3::new(2.0, -0.5, 1.0), &cam).unwrap();
        let far = project(&Vec3::new(4.0, -0.5, 1.0), &cam).unwrap();
        assert!(((far[0] - 32.0) - 0.5 * (near[0] - 32.0)).abs() < 1e-12);
        // Camera coordinates (0.5, -0.3, 2): u = 50*0.25 + 32, v = 40*(-0.15) + 24.
        let uv = project(&Vec3::new(2.0, -0.5, 1.3), &cam).unwrap();
        assert!((uv[0] - 44.5).abs() < 1e-12 && (uv[1] - 18.0).abs() < 1e-12);
        assert!(project(&Vec3::new(-1.0, 0.0, 1.0), &cam).is_err());
    }

    #[test]
    fn optical_loss_cases() {
        let cam = camera();
        let x = vec![Vec3::new(10.0, 0.0, 1.0)];
        let zero = vec![Vec3::zeros()];
        let (l, _) = loss_optical(&[&cam], &x, &zero, &zero, &[[0.0; 2]], &[[0.0; 2]]).unwrap();
        assert_eq!(l, 0.0);
        // Lateral motion of 0.2 m at depth 10 with fx = 50 moves 1 px (to the left).
        let v = Vec3::new(0.0, 0.2, 0.0);
        let gt_fw = [[-1.0, 0.0]];
        let gt_bw = [[1.0, 0.0]];
        let (l, _) = loss_optical(&[&cam], &x, &[v], &[-v], &gt_fw, &gt_bw).unwrap();
        assert!(l < 1e-12);
        let (l, _) = loss_optical(&[&cam], &x, &zero, &zero, &gt_fw, &[[0.0; 2]]).unwrap();
        assert!((l - 50.0 * 0.2 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_cases() {
        let v = Vec3::new(0.3, -0.1, 0.2);
        let n = 4;
        let fw = vec![v; n];
        let bw = vec![-v; n];
        assert!(loss_cycle(&fw, &bw, &bw, &fw).unwrap().0.abs() < 1e-12);
        let z = vec![Vec3::zeros(); n];
        assert_eq!(loss_cycle(&z, &z, &z, &z).unwrap().0, 0.0);
        let (l, _) = loss_cycle(&fw, &z, &z, &fw).unwrap();
        assert!((l - 2.0 * n as f64 * v.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn smooth_loss_cases() {
        let c = vec![Vec3::new(1.0, 2.0, 3.0); 8];
        assert_eq!(loss_smooth(&c, 4).unwrap().0, 0.0);
        let mut one = vec![Vec3::zeros(); 4];
        one[2] = Vec3::new(0.0, 0.5, 0.0);
        // Differs from both neighbours inside a 4-sample ray.
        assert!((loss_smooth(&one, 4).unwrap().0 - 2.0 * 0.25).abs() < 1e-15);
        let (k, h, m) = (16usize, 0.25, Vec3::new(0.2, -0.1, 0.4));
        let lin: Vec<Vec3> = (0..k).map(|i| m * (i as f64 * h)).collect();
        let (l, _) = loss_smooth(&lin, k).unwrap();
        assert!((l - (k - 1) as f64 * (m * h).norm_squared()).abs() < 1e-12);
        assert!(loss_smooth(&lin, 5).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let ones = LossComponents {
            static_rgb: 1.0,
            dynamic_rgb: 1.0,
            optical: 1.0,
            cycle: 1.0,
            smooth: 0.0,
        };
        assert!((loss_total(&ones, &w) - 3.1).abs() < 1e-15);
        assert_eq!(loss_total(&LossComponents::default(), &w), 0.0);
        let c = LossComponents { optical: 2.5, ..ones };
        let w2 = LossWeights { optical: 0.2, ..w };
        assert!((loss_total(&c, &w2) - loss_total(&c, &w) - 2.5 * 0.1).abs() < 1e-14);
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
    }

    #[test]
    fn optical_gradient_matches_differences() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let mut x: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.random_range(4.0..9.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)))
            .collect();
        let rv = |rng: &mut ChaCha8Rng| {
            Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )
        };
        let mut fw: Vec<Vec3> = (0..n).map(|_| rv(&mut rng)).collect();
        let mut bw: Vec<Vec3> = (0..n).map(|_| rv(&mut rng)).collect();
        let gf: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let gb: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let cams = vec![&cam; n];
        let (_, g) = loss_optical(&cams, &x, &fw, &bw, &gf, &gb).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                for which in 0..3 {
                    let buf = match which {
                        0 => &mut x,
                        1 => &mut fw,
                        _ => &mut bw,
                    };
                    buf[i][a] += h;
                    let p = loss_optical(&cams, &x, &fw, &bw, &gf, &gb).unwrap().0;
                    let buf = match which {
                        0 => &mut x,
                        1 => &mut fw,
                        _ => &mut bw,
                    };
                    buf[i][a] -= 2.0 * h;
                    let m = loss_optical(&cams, &x, &fw, &bw, &gf, &gb).unwrap().0;
                    let buf = match which {
                        0 => &mut x,
                        1 => &mut fw,
                        _ => &mut bw,
                    };
                    buf[i][a] += h;
                    let an = [g.x_hat[i][a], g.s_fw[i][a], g.s_bw[i][a]][which];
                    assert!(rel(an, (p - m) / (2.0 * h)) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn quadratic_loss_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let mut arrs: Vec<Vec<Vec3>> = (0..4)
            .map(|_| (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
            .collect();
        let (_, g) = loss_cycle(&arrs[0], &arrs[1], &arrs[2], &arrs[3]).unwrap();
        let grads = [&g.s_fw, &g.s_bw_next, &g.s_bw, &g.s_fw_prev];
        let h = 1e-6;
        for w in 0..4 {
            for i in 0..n {
                for a in 0..3 {
                    arrs[w][i][a] += h;
                    let p = loss_cycle(&arrs[0], &arrs[1], &arrs[2], &arrs[3]).unwrap().0;
                    arrs[w][i][a] -= 2.0 * h;
                    let m = loss_cycle(&arrs[0], &arrs[1], &arrs[2], &arrs[3]).unwrap().0;
                    arrs[w][i][a] += h;
                    assert!(rel(grads[w][i][a], (p - m) / (2.0 * h)) < 1e-6);
                }
            }
        }
        let mut f = arrs[0].clone();
        f.extend(arrs[1].clone());
        let (_, gs) = loss_smooth(&f, 5).unwrap();
        for i in 0..f.len() {
            for a in 0..3 {
                f[i][a] += h;
                let p = loss_smooth(&f, 5).unwrap().0;
                f[i][a] -= 2.0 * h;
                let m = loss_smooth(&f, 5).unwrap().0;
                f[i][a] += h;
                assert!(rel(gs[i][a], (p - m) / (2.0 * h)) < 1e-6);
            }
        }
        let pred: Vec<Rgb> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let gt: Vec<Rgb> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mask = [0, 1, 0, 0, 1];
        let (_, g) = loss_static(&pred, &gt, &mask).unwrap();
        let mut p2 = pred.clone();
        for i in 0..n {
            for c in 0..3 {
                p2[i][c] += h;
                let lp = loss_static(&p2, &gt, &mask).unwrap().0;
                p2[i][c] -= 2.0 * h;
                let lm = loss_static(&p2, &gt, &mask).unwrap().0;
                p2[i][c] += h;
                let fd = (lp - lm) / (2.0 * h);
                assert!((g[i][c] - fd).abs() < 1e-7);
            }
        }
    }
}
