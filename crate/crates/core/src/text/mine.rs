//! Neural lower bound on mutual information (Donsker-Varadhan form).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use ulbsc_autodiff::{Adam, Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Linear;

/// Smallest batch the estimator accepts.
pub const MIN_BATCH: usize = 16;

/// Statistics network `f_T(z, z_hat)`: a two-hidden-layer ReLU MLP on scalar pairs.
#[derive(Clone, Debug)]
pub struct MineNet<T: Scalar = f32> {
    store: ParamStore<T>,
    layers: [Linear; 3],
}

impl<T: Scalar> MineNet<T> {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::new(&mut store, "mine.l1", 2, hidden, &mut rng),
            Linear::new(&mut store, "mine.l2", hidden, hidden, &mut rng),
            Linear::new(&mut store, "mine.l3", hidden, 1, &mut rng),
        ];
        MineNet { store, layers }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Scores of `[n, 2]` pairs, shape `[n, 1]`.
    pub fn scores(&self, g: &mut Graph<T>, p: &Bound, pairs: Var) -> ulbsc_autodiff::Result<Var> {
        let h = self.layers[0].forward(g, p, pairs)?;
        let h = g.relu(h)?;
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        self.layers[2].forward(g, p, h)
    }

    /// `mean f_T(joint) - log mean exp f_T(marginal)` for columns `z`, `z_hat`
    /// of shape `[n, 1]`; the marginal pairs `z` with `z_hat` permuted by `perm`.
    pub fn bound_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var, z_hat: Var, perm: &[usize]) -> Result<Var> {
        let n = g.shape(z)[0];
        if n < MIN_BATCH {
            return Err(Error::Tensor(ulbsc_autodiff::Error::Contract(format!(
                "mutual information needs at least {MIN_BATCH} pairs, got {n}"
            ))));
        }
        let joint = g.concat(z, z_hat)?;
        let shuffled = g.gather(z_hat, perm, &[n, 1])?;
        let marginal = g.concat(z, shuffled)?;
        let tj = self.scores(g, p, joint)?;
        let tm = self.scores(g, p, marginal)?;
        let a = g.mean(tj)?;
        let b = g.log_mean_exp(tm)?;
        Ok(g.sub(a, b)?)
    }
}

fn column<T: Scalar>(g: &mut Graph<T>, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64([v.len(), 1], v)?)?)
}

/// Estimate of `I(z; z_hat)` in nats from paired samples, without training.
pub fn mi_estimate<T: Scalar>(z: &[f64], z_hat: &[f64], mine: &MineNet<T>, seed: u64) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::invalid("mi_estimate", format!("{} vs {} samples", z.len(), z_hat.len())));
    }
    let mut g = Graph::new();
    let p = g.bind(mine.store(), false)?;
    let zv = column(&mut g, z)?;
    let zh = column(&mut g, z_hat)?;
    let perm = permutation(z.len(), &mut ChaCha8Rng::seed_from_u64(seed));
    let mi = mine.bound_graph(&mut g, &p, zv, zh, &perm)?;
    Ok(g.value(mi).data()[0].as_f64())
}

pub(crate) fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// One gradient-ascent step of the bound; returns the batch estimate.
pub(crate) fn ascend<T: Scalar>(
    mine: &mut MineNet<T>,
    opt: &mut Adam<T>,
    z: &[f64],
    z_hat: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(mine.store(), true)?;
    let zv = column(&mut g, z)?;
    let zh = column(&mut g, z_hat)?;
    let perm = permutation(z.len(), rng);
    let mi = mine.bound_graph(&mut g, &p, zv, zh, &perm)?;
    let value = g.value(mi).data()[0].as_f64();
    let loss = g.scale(mi, T::from_f64(-1.0))?;
    let grads = g.backward(loss)?;
    mine.store.zero_grad();
    mine.store.accumulate(&grads);
    opt.step(&mut mine.store)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMiConfig {
    pub rho: f64,
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Fresh pairs used for the final estimate.
    pub eval_pairs: usize,
    pub seed: u64,
}

impl Default for GaussianMiConfig {
    fn default() -> Self {
        GaussianMiConfig {
            rho: 0.9,
            hidden: 64,
            batch: 512,
            steps: 3000,
            lr: 1e-3,
            eval_pairs: 50_000,
            seed: 0,
        }
    }
}

/// Unit-variance Gaussian pairs with correlation `rho`.
pub fn correlated_pairs(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            (x, rho * x + s * e)
        })
        .unzip()
}

/// `-0.5 ln(1 - rho^2)`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Trains a fresh statistics network on correlated Gaussians and returns
/// the estimate on held-out pairs along with the trained network.
pub fn train_gaussian_mine(cfg: &GaussianMiConfig) -> Result<(f64, MineNet<f32>)> {
    if !(cfg.rho > -1.0 && cfg.rho < 1.0) {
        return Err(Error::invalid("rho", format!("{} outside (-1, 1)", cfg.rho)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mine = MineNet::<f32>::new(cfg.hidden, cfg.seed);
    let mut opt = Adam::new(mine.store(), cfg.lr);
    for _ in 0..cfg.steps {
        let (z, zh) = correlated_pairs(cfg.batch, cfg.rho, &mut rng);
        ascend(&mut mine, &mut opt, &z, &zh, &mut rng)?;
    }
    rng.set_stream(1);
    let (z, zh) = correlated_pairs(cfg.eval_pairs, cfg.rho, &mut rng);
    let est = mi_estimate(&z, &zh, &mine, cfg.seed.wrapping_add(1))?;
    Ok((est, mine))
}
