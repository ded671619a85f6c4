use serde::{Deserialize, Serialize};

use super::gap::orthonormal_rows;
use crate::data::{CompositionSpace, Pair, Split, SplitTag, World};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Parameters of the synthetic compositional benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub n_attrs: usize,
    pub n_objs: usize,
    /// Joint embedding width of the encoders used with this world.
    pub d: usize,
    pub raw_dim: usize,
    /// Width of each per-primitive latent code.
    pub latent_dim: usize,
    pub samples_per_pair: usize,
    /// Per-coordinate standard deviation of intra-class noise.
    pub noise: f64,
    /// Norm of the shared offset added to every class mean.
    pub gap: f64,
    pub unseen_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_attrs: 8,
            n_objs: 8,
            d: 64,
            raw_dim: 96,
            latent_dim: 16,
            samples_per_pair: 30,
            noise: 0.3,
            gap: 2.0,
            unseen_frac: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_attrs == 0 || self.n_objs == 0 || self.n_attrs * self.n_objs < 4 {
            return bad(format!(
                "need at least 4 compositions, got {} x {}",
                self.n_attrs, self.n_objs
            ));
        }
        if !(self.unseen_frac > 0.0 && self.unseen_frac < 1.0) {
            return bad(format!("unseen_frac must lie in (0, 1), got {}", self.unseen_frac));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return bad(format!("gap must be finite and >= 0, got {}", self.gap));
        }
        if self.d == 0 || self.latent_dim == 0 {
            return bad("d and latent_dim must be positive".into());
        }
        if self.raw_dim <= 2 * self.latent_dim {
            return bad(format!(
                "raw_dim {} must exceed twice latent_dim {} to leave room for the gap direction",
                self.raw_dim, self.latent_dim
            ));
        }
        if self.samples_per_pair < 5 {
            return bad(format!(
                "samples_per_pair must be at least 5 so every split gets data, got {}",
                self.samples_per_pair
            ));
        }
        Ok(())
    }

    pub fn n_unseen(&self) -> usize {
        (self.unseen_frac * (self.n_attrs * self.n_objs) as f64).round() as usize
    }
}

/// Noise-free geometry of a generated world.
#[derive(Debug, Clone)]
pub struct WorldGeometry {
    /// Class means `[|A|·|O| × raw_dim]`, attribute-major, gap offset included.
    pub class_means: Tensor<f64>,
    /// Orthonormal basis of the span reachable from the latent codes.
    pub semantic_basis: Tensor<f64>,
    /// Unit gap direction, orthogonal to `semantic_basis`.
    pub gap_direction: Vec<f64>,
}

impl WorldGeometry {
    pub fn class_mean(&self, p: Pair, n_objs: usize) -> &[f64] {
        self.class_means.row(p.flat(n_objs))
    }
}

/// Pick the unseen pairs, keeping a cover of every primitive among the seen ones.
fn choose_unseen(cfg: &SyntheticWorldConfig) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let (na, no) = (cfg.n_attrs, cfg.n_objs);
    let total = na * no;
    let n_unseen = cfg.n_unseen();
    if n_unseen == 0 {
        return Err(Error::InfeasibleSplit(format!(
            "unseen_frac {} of {total} compositions rounds to zero unseen pairs",
            cfg.unseen_frac
        )));
    }
    if total - n_unseen < na.max(no) {
        return Err(Error::InfeasibleSplit(format!(
            "{n_unseen} unseen of {total} compositions leaves some attribute or object without a seen pair"
        )));
    }
    let mut r = rng::stream(cfg.seed, "world.split");
    let pa = rng::permutation(&mut r, na);
    let po = rng::permutation(&mut r, no);
    let mut protected = vec![false; total];
    for t in 0..na.max(no) {
        protected[Pair(pa[t % na], po[t % no]).flat(no)] = true;
    }
    let free: Vec<usize> = (0..total).filter(|&f| !protected[f]).collect();
    let order = rng::permutation(&mut r, free.len());
    let mut unseen_flag = vec![false; total];
    for &k in order.iter().take(n_unseen) {
        unseen_flag[free[k]] = true;
    }
    let pair = |f: usize| Pair(f / no, f % no);
    let seen = (0..total).filter(|&f| !unseen_flag[f]).map(pair).collect();
    let unseen = (0..total).filter(|&f| unseen_flag[f]).map(pair).collect();
    Ok((seen, unseen))
}

pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<(World, WorldGeometry)> {
    cfg.validate()?;
    let (seen, unseen) = choose_unseen(cfg)?;
    let space = CompositionSpace::with_counts(cfg.n_attrs, cfg.n_objs, seen, unseen)?;
    let (na, no, k, raw) = (cfg.n_attrs, cfg.n_objs, cfg.latent_dim, cfg.raw_dim);
    let s = cfg.seed;

    let ua: Tensor<f64> = rng::gaussian_tensor(s, "world.u_a", &[na, k], 1.0);
    let uo: Tensor<f64> = rng::gaussian_tensor(s, "world.u_o", &[no, k], 1.0);
    let mix: Tensor<f64> = rng::gaussian_tensor(s, "world.mix", &[2 * k, raw], (1.0 / (2 * k) as f64).sqrt());
    let basis = orthonormal_rows(&mix);

    let mut dir: Vec<f64> = rng::gaussian_tensor::<f64>(s, "world.gap", &[raw], 1.0).into_data();
    for _ in 0..2 {
        for q in 0..basis.rows() {
            let row = basis.row(q);
            let c: f64 = dir.iter().zip(row).map(|(a, b)| a * b).sum();
            dir.iter_mut().zip(row).for_each(|(x, b)| *x -= c * b);
        }
    }
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= n);

    let mut means = Vec::with_capacity(na * no * raw);
    for i in 0..na {
        for j in 0..no {
            let code: Vec<f64> = ua.row(i).iter().chain(uo.row(j)).copied().collect();
            for c in 0..raw {
                let mut acc = 0.0;
                for (r, &u) in code.iter().enumerate() {
                    acc += u * mix.row(r)[c];
                }
                means.push(acc + cfg.gap * dir[c]);
            }
        }
    }
    let class_means = Tensor::new(vec![na * no, raw], means)?;

    let mut rows: [Vec<f32>; 3] = Default::default();
    let mut labels: [Vec<Pair>; 3] = Default::default();
    let m = cfg.samples_per_pair;
    for i in 0..na {
        for j in 0..no {
            let p = Pair(i, j);
            let f = p.flat(no);
            let seen = space.is_seen(p);
            if !seen && !space.unseen().contains(&p) {
                continue;
            }
            let mu = class_means.row(f);
            let mut noise = rng::stream_indexed(s, "world.noise", f as u64);
            let samples: Vec<Vec<f32>> = (0..m)
                .map(|_| mu.iter().map(|&x| (x + cfg.noise * rng::gaussian(&mut noise)) as f32).collect())
                .collect();
            let order = rng::permutation(&mut rng::stream_indexed(s, "world.assign", f as u64), m);
            let bounds = if seen {
                let tr = ((0.6 * m as f64).round() as usize).max(1);
                let va = (0.2 * m as f64).round() as usize;
                [tr, tr + va]
            } else {
                [0, m / 2]
            };
            for (rank, &idx) in order.iter().enumerate() {
                let split = if rank < bounds[0] {
                    0
                } else if rank < bounds[1] {
                    1
                } else {
                    2
                };
                rows[split].extend_from_slice(&samples[idx]);
                labels[split].push(p);
            }
        }
    }
    let [tr, va, te] = rows;
    let [ltr, lva, lte] = labels;
    let mk = |tag, data: Vec<f32>, labels: Vec<Pair>| -> Result<Split> {
        Ok(Split {
            tag,
            features: Tensor::new(vec![labels.len(), raw], data)?,
            labels,
        })
    };
    let world = World {
        space,
        config: *cfg,
        train: mk(SplitTag::Train, tr, ltr)?,
        val: mk(SplitTag::Val, va, lva)?,
        test: mk(SplitTag::Test, te, lte)?,
    };
    world.validate()?;
    let geometry = WorldGeometry {
        class_means,
        semantic_basis: basis,
        gap_direction: dir,
    };
    Ok((world, geometry))
}
