//! 1-D altitude Gaussians: overlap test and sequential precision fusion.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl Gaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        let g = Gaussian { mu, sigma };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.sigma.is_finite() {
            return Err(Error::NonFinite(format!("gaussian ({}, {})", self.mu, self.sigma)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Degenerate(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Product-of-Gaussians update. Symmetric in its arguments bit for bit.
    pub fn fuse(&self, other: &Gaussian) -> Gaussian {
        let (va, vb) = (self.sigma * self.sigma, other.sigma * other.sigma);
        let sum = va + vb;
        Gaussian {
            mu: (vb * self.mu + va * other.mu) / sum,
            sigma: (va * vb / sum).sqrt(),
        }
    }
}

/// One traversable surface in a cell column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceLayer {
    pub mu: f64,
    pub sigma: f64,
    pub n_obs: u32,
    /// 1-based layer label, dense and increasing with altitude.
    pub label: u32,
    /// Occupancy log-odds accumulated from the 2D grids; negative = free.
    pub occupancy: f32,
}

impl SurfaceLayer {
    pub fn from_observation(g: Gaussian, label: u32) -> Self {
        SurfaceLayer {
            mu: g.mu,
            sigma: g.sigma,
            n_obs: 1,
            label,
            occupancy: 0.0,
        }
    }

    pub fn gaussian(&self) -> Gaussian {
        Gaussian {
            mu: self.mu,
            sigma: self.sigma,
        }
    }
}

/// Folds one more observation into a layer.
pub fn fuse_layer(layer: &SurfaceLayer, obs: &Gaussian) -> Result<SurfaceLayer> {
    obs.validate()?;
    layer.gaussian().validate()?;
    let g = layer.gaussian().fuse(obs);
    Ok(SurfaceLayer {
        mu: g.mu,
        sigma: g.sigma,
        n_obs: layer.n_obs + 1,
        ..*layer
    })
}

/// ln of the (unnormalized) density of N(mu, sigma) at x, without the √2π.
fn log_normal(x: f64, g: &Gaussian) -> f64 {
    let z = (x - g.mu) / g.sigma;
    -g.sigma.ln() - 0.5 * z * z
}

fn log_mixture(x: f64, a: &Gaussian, b: &Gaussian) -> f64 {
    let (la, lb) = (log_normal(x, a), log_normal(x, b));
    let m = la.max(lb);
    m + ((la - m).exp() + (lb - m).exp()).ln()
}

/// Ratio of the equal-weight mixture density at its saddle to the density at
/// the lower of its two modes; 1 when the mixture is unimodal.
pub fn overlap_rate(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    g1.validate()?;
    g2.validate()?;
    let (a, b) = if g1.mu <= g2.mu { (g1, g2) } else { (g2, g1) };
    let span = b.mu - a.mu;
    if span == 0.0 {
        return Ok(1.0);
    }
    // Sufficient condition for a unimodal two-component mixture (any
    // weights); skips the root search for the common near-duplicate case.
    let (va, vb) = (a.sigma * a.sigma, b.sigma * b.sigma);
    if span * span < 27.0 * va * vb / (4.0 * (va + vb)) {
        return Ok(1.0);
    }
    // Critical points of the mixture all lie in (a.mu, b.mu), where they are
    // the roots of h. h runs from -inf to +inf; one root means one mode.
    let h = |x: f64| {
        let (da, db) = (x - a.mu, b.mu - x);
        da.ln() - db.ln() - 3.0 * a.sigma.ln() + 3.0 * b.sigma.ln() - 0.5 * (da / a.sigma).powi(2)
            + 0.5 * (db / b.sigma).powi(2)
    };
    let mut us: Vec<f64> = (1..2048).map(|i| i as f64 / 2048.0).collect();
    for k in 4..=60 {
        let u = 10f64.powf(-(k as f64) / 4.0);
        us.push(u);
        us.push(1.0 - u);
    }
    us.sort_by(|x, y| x.total_cmp(y));
    us.dedup();
    let xs: Vec<f64> = us
        .iter()
        .map(|u| a.mu + span * u)
        .filter(|&x| x > a.mu && x < b.mu)
        .collect();
    // The endpoints evaluate to -inf / +inf, which brackets modes that sit
    // closer to a mean than any interior sample.
    let xs: Vec<f64> = std::iter::once(a.mu).chain(xs).chain(std::iter::once(b.mu)).collect();
    let hs: Vec<f64> = xs.iter().map(|&x| h(x)).collect();

    let mut roots = Vec::new();
    for i in 1..xs.len() {
        if hs[i - 1] == 0.0 {
            roots.push(xs[i - 1]);
        } else if hs[i - 1].signum() != hs[i].signum() && hs[i] != 0.0 {
            let (mut lo, mut hi) = (xs[i - 1], xs[i]);
            let s_lo = hs[i - 1].signum();
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if h(mid).signum() == s_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
    }
    if roots.len() < 3 {
        return Ok(1.0);
    }
    let (m1, s, m2) = (roots[0], roots[1], roots[2]);
    let low_mode = log_mixture(m1, a, b).min(log_mixture(m2, a, b));
    Ok((log_mixture(s, a, b) - low_mode).exp().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn g(mu: f64, sigma: f64) -> Gaussian {
        Gaussian::new(mu, sigma).unwrap()
    }

    /// Dense scan of the mixture density on [mu1, mu2] at the given step.
    pub(crate) fn scanned_overlap(a: &Gaussian, b: &Gaussian, step: f64) -> f64 {
        let (a, b) = if a.mu <= b.mu { (a, b) } else { (b, a) };
        let pdf = |x: f64| {
            let n = |g: &Gaussian| (-0.5 * ((x - g.mu) / g.sigma).powi(2)).exp() / g.sigma;
            n(a) + n(b)
        };
        let n = ((b.mu - a.mu) / step).ceil() as usize;
        let ys: Vec<f64> = (0..=n).map(|i| pdf((a.mu + i as f64 * step).min(b.mu))).collect();
        let mut maxima = Vec::new();
        let mut minima = Vec::new();
        for i in 0..ys.len() {
            let l = if i == 0 { f64::NEG_INFINITY } else { ys[i - 1] };
            let r = if i + 1 == ys.len() {
                f64::NEG_INFINITY
            } else {
                ys[i + 1]
            };
            if ys[i] >= l && ys[i] > r || ys[i] > l && ys[i] >= r {
                maxima.push(ys[i]);
            }
            if i > 0 && i + 1 < ys.len() && ys[i] < l && ys[i] <= r {
                minima.push(ys[i]);
            }
        }
        if maxima.len() < 2 || minima.is_empty() {
            return 1.0;
        }
        minima[0] / maxima[0].min(maxima[1])
    }

    #[test]
    fn overlap_reference_values() {
        assert_eq!(overlap_rate(&g(1.0, 0.3), &g(1.0, 0.3)).unwrap(), 1.0);
        assert!(overlap_rate(&g(0.0, 1.0), &g(100.0, 1.0)).unwrap() < 1e-6);
        let r = overlap_rate(&g(0.0, 1.0), &g(4.0, 1.0)).unwrap();
        assert!((r - 0.2706).abs() < 5e-5, "{r}");
        assert!((r - scanned_overlap(&g(0.0, 1.0), &g(4.0, 1.0), 1e-4)).abs() < 1e-6);
        // Two sigma apart: unimodal, so fully overlapped.
        assert_eq!(overlap_rate(&g(0.0, 1.0), &g(2.0, 1.0)).unwrap(), 1.0);
        assert!(overlap_rate(&Gaussian { mu: 0.0, sigma: 0.0 }, &g(1.0, 1.0)).is_err());
        assert!(overlap_rate(
            &g(0.0, 1.0),
            &Gaussian {
                mu: f64::NAN,
                sigma: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn overlap_matches_dense_scan_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = g(rng.random_range(-5.0..5.0), rng.random_range(0.05..2.0));
            let b = g(rng.random_range(-5.0..5.0), rng.random_range(0.05..2.0));
            let got = overlap_rate(&a, &b).unwrap();
            let want = scanned_overlap(&a, &b, 1e-4);
            assert!((got - want).abs() <= 1e-3, "{a:?} {b:?}: {got} vs {want}");
        }
    }

    #[test]
    fn fusion_reference_values() {
        let f = g(1.0, 0.2).fuse(&g(1.0, 0.2));
        assert_eq!(f.mu, 1.0);
        assert!((f.sigma - 0.2 / 2f64.sqrt()).abs() < 1e-15);
        let f = g(0.0, 1.0).fuse(&g(2.0, 1.0));
        assert_eq!(f.mu, 1.0);
        assert!((f.sigma - 0.5f64.sqrt()).abs() < 1e-15);
        let f = g(0.0, 1000.0).fuse(&g(3.0, 0.1));
        assert!((f.mu - 3.0).abs() < 1e-4 && (f.sigma - 0.1).abs() < 1e-4);
    }

    #[test]
    fn fuse_layer_rejects_zero_sigma_and_counts() {
        let l = SurfaceLayer::from_observation(g(0.0, 0.5), 1);
        assert!(fuse_layer(&l, &Gaussian { mu: 0.0, sigma: 0.0 }).is_err());
        let l2 = fuse_layer(&l, &g(0.2, 0.5)).unwrap();
        assert_eq!(l2.n_obs, 2);
        assert!(l2.sigma < l.sigma);
    }

    proptest! {
        #[test]
        fn fuse_is_exactly_symmetric(
            m1 in -50.0..50.0f64, s1 in 0.01..10.0f64, m2 in -50.0..50.0f64, s2 in 0.01..10.0f64,
        ) {
            prop_assert_eq!(g(m1, s1).fuse(&g(m2, s2)), g(m2, s2).fuse(&g(m1, s1)));
        }

        #[test]
        fn sequential_fusion_equals_batch(obs in prop::collection::vec((-10.0..10.0f64, 0.05..3.0f64), 1..60)) {
            let mut layer = SurfaceLayer::from_observation(g(obs[0].0, obs[0].1), 1);
            for &(m, s) in &obs[1..] {
                let next = fuse_layer(&layer, &g(m, s)).unwrap();
                prop_assert!(next.sigma <= layer.sigma);
                layer = next;
            }
            let w: f64 = obs.iter().map(|(_, s)| 1.0 / (s * s)).sum();
            let mu: f64 = obs.iter().map(|(m, s)| m / (s * s)).sum::<f64>() / w;
            prop_assert!((layer.mu - mu).abs() <= 1e-9);
            prop_assert!((layer.sigma - (1.0 / w).sqrt()).abs() <= 1e-9);
            prop_assert_eq!(layer.n_obs as usize, obs.len());
        }

        #[test]
        fn overlap_is_a_symmetric_ratio(
            m1 in -5.0..5.0f64, s1 in 0.05..2.0f64, m2 in -5.0..5.0f64, s2 in 0.05..2.0f64,
        ) {
            let r = overlap_rate(&g(m1, s1), &g(m2, s2)).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, overlap_rate(&g(m2, s2), &g(m1, s1)).unwrap());
        }
    }
}
