//! Exact and sampled Shapley values, and the Shap-CAM saliency map.
//!
//! Exact values enumerate all `2^n` coalitions with the combinatorial weight
//! `s!(n-s-1)!/n!`. The sampler draws uniform permutations and averages each
//! player's marginal contribution along the prefix chain, at a cost of
//! `n + 1` worth evaluations per permutation.
//!
//! Permutation `p` is shuffled from its own ChaCha8 stream (`seed`, stream
//! `p`), and marginals are folded into the estimate in permutation order, so
//! results do not depend on how many workers evaluate them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkSplit;
use crate::tensor::{self, Tensor};
use crate::worth::{BaselineMode, Coalition, CoalitionGame, Game, ScoreOracle, TailOracle};

pub const DEFAULT_EXACT_LIMIT: usize = 16;
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Permutations evaluated between two folds into the running estimate.
const CHUNK: usize = 256;

/// Coalitions scored per `worth_batch` call during exact enumeration.
const EXACT_BATCH: usize = 4096;

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] + (k as f64).ln();
    }
    out
}

/// Shapley values by subset enumeration, refusing games above
/// [`DEFAULT_EXACT_LIMIT`] players.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<Vec<f64>> {
    exact_shapley_with_limit(game, DEFAULT_EXACT_LIMIT)
}

pub fn exact_shapley_with_limit<G: CoalitionGame + ?Sized>(game: &G, limit: usize) -> Result<Vec<f64>> {
    let n = game.num_players();
    if n > limit || n > 30 {
        return Err(Error::ExactLimit { players: n, limit });
    }
    if n == 0 {
        return Ok(vec![]);
    }
    let total = 1usize << n;
    let mut worth = Vec::with_capacity(total);
    for start in (0..total).step_by(EXACT_BATCH) {
        let end = (start + EXACT_BATCH).min(total);
        let coalitions: Vec<Coalition> = (start..end).map(|m| Coalition::from_mask(n, m as u64)).collect();
        worth.extend(game.worth_batch(&coalitions)?);
    }

    let lf = ln_factorials(n);
    let weights: Vec<f64> = (0..n)
        .map(|s| (lf[s] + lf[n - s - 1] - lf[n]).exp())
        .collect();
    Ok((0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..total)
                .filter(|m| m & bit == 0)
                .map(|m| weights[m.count_ones() as usize] * (worth[m | bit] - worth[m]))
                .sum()
        })
        .collect())
}

/// One sampled order and each player's marginal contribution along it.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSample {
    pub order: Vec<usize>,
    /// Indexed by player, not by position in `order`.
    pub marginals: Vec<f64>,
}

/// Walks the prefix chain of `order`, recording `f(Pre ∪ {i}) − f(Pre)`.
pub fn marginals_along<G: CoalitionGame + ?Sized>(game: &G, order: Vec<usize>) -> Result<PermutationSample> {
    let n = game.num_players();
    if order.len() != n {
        return Err(Error::shape("permutation", format!("order of length {} for {n} players", order.len())));
    }
    let mut seen = vec![false; n];
    for &k in &order {
        if k >= n || std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidValue(format!("order is not a permutation of 0..{n}")));
        }
    }
    let chain = game.worth_chain(&order)?;
    let mut marginals = vec![0.0; n];
    for (pos, &player) in order.iter().enumerate() {
        marginals[player] = chain[pos + 1] - chain[pos];
    }
    Ok(PermutationSample { order, marginals })
}

/// The `index`-th permutation drawn under `seed`.
pub fn permutation(seed: u64, index: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Running per-player mean and variance of observed marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    sums: Vec<f64>,
    means: Vec<f64>,
    m2: Vec<f64>,
    count: usize,
    pub seed: u64,
}

impl ShapleyEstimate {
    pub fn new(players: usize, seed: u64) -> Self {
        Self {
            sums: vec![0.0; players],
            means: vec![0.0; players],
            m2: vec![0.0; players],
            count: 0,
            seed,
        }
    }

    pub fn push(&mut self, sample: &PermutationSample) {
        self.count += 1;
        let m = self.count as f64;
        for (i, &x) in sample.marginals.iter().enumerate() {
            self.sums[i] += x;
            let delta = x - self.means[i];
            self.means[i] += delta / m;
            self.m2[i] += delta * (x - self.means[i]);
        }
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    /// Per-player mean marginal contribution.
    pub fn values(&self) -> Vec<f64> {
        let m = self.count.max(1) as f64;
        self.sums.iter().map(|s| s / m).collect()
    }

    /// Unbiased per-player variance of the marginals; needs two samples.
    pub fn variances(&self) -> Option<Vec<f64>> {
        (self.count >= 2).then(|| {
            let d = (self.count - 1) as f64;
            self.m2.iter().map(|v| v / d).collect()
        })
    }

    /// Standard error of each player's mean; needs two samples.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let m = self.count as f64;
        self.variances()
            .map(|v| v.into_iter().map(|x| (x / m).sqrt()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub samples: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            workers: 0,
        }
    }
}

/// Permutation-sampling Shapley estimator.
pub fn sample_shapley<G: CoalitionGame + ?Sized>(game: &G, config: &SamplerConfig) -> Result<ShapleyEstimate> {
    if config.samples == 0 {
        return Err(Error::InvalidValue("sample count must be at least 1".into()));
    }
    let pool = (config.workers > 0)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::InvalidValue(format!("thread pool: {e}")))
        })
        .transpose()?;
    let n = game.num_players();
    let mut estimate = ShapleyEstimate::new(n, config.seed);
    for start in (0..config.samples).step_by(CHUNK) {
        let end = (start + CHUNK).min(config.samples);
        let evaluate = || -> Vec<Result<PermutationSample>> {
            (start..end)
                .into_par_iter()
                .map(|p| marginals_along(game, permutation(config.seed, p as u64, n)))
                .collect()
        };
        let chunk = match &pool {
            Some(pool) => pool.install(evaluate),
            None => evaluate(),
        };
        for sample in chunk {
            match sample {
                Ok(s) => estimate.push(&s),
                Err(e) => {
                    return Err(Error::SamplingAborted {
                        completed: estimate.sample_count(),
                        requested: config.samples,
                        source: Box::new(e),
                    })
                }
            }
        }
    }
    Ok(estimate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    ShapCam,
    ScoreCam,
    Rise,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ShapCam, Method::ScoreCam, Method::Rise, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ShapCam => "shapcam",
            Method::ScoreCam => "scorecam",
            Method::Rise => "rise",
            Method::Random => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    /// Score-CAM channel weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_weights: Option<Vec<f64>>,
    /// Method settings not covered above (RISE mask parameters and so on).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub settings: Option<serde_json::Value>,
}

/// Raw per-position attribution scores, row-major over `height × width`.
///
/// Values are stored unrectified; metrics and rendering decide how to treat
/// negative scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub method: Method,
    pub target_class: usize,
    #[serde(default)]
    pub meta: SaliencyMeta,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, method: Method, target_class: usize) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "saliency",
                format!("{} values for a {height}x{width} grid", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
            method,
            target_class,
            meta: SaliencyMeta::default(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("saliency grid is valid")
    }

    /// Bilinear resize to `height × width`, keeping provenance.
    pub fn upsample(&self, height: usize, width: usize) -> Result<SaliencyMap> {
        let resized = tensor::bilinear_resize(&self.to_tensor(), height, width)?;
        Ok(SaliencyMap {
            height,
            width,
            values: resized.into_data(),
            method: self.method,
            target_class: self.target_class,
            meta: self.meta.clone(),
        })
    }

    pub fn rectified(&self) -> SaliencyMap {
        let mut out = self.clone();
        for v in &mut out.values {
            *v = v.max(0.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapCamConfig {
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub baseline: BaselineMode,
    /// Enumerate all coalitions instead of sampling.
    pub exact: bool,
    pub exact_limit: usize,
}

impl Default for ShapCamConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            workers: 0,
            baseline: BaselineMode::PerChannel,
            exact: false,
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

/// Shap-CAM for an image through an in-process network.
pub fn shap_cam(net: &NetworkSplit, image: &Tensor, target_class: usize, config: &ShapCamConfig) -> Result<SaliencyMap> {
    let feature_map = net.forward_head(image)?;
    shap_cam_from_map(&TailOracle(net), feature_map, target_class, config)
}

/// Shap-CAM for a precomputed feature map scored by any oracle.
pub fn shap_cam_from_map(
    oracle: &dyn ScoreOracle,
    feature_map: Tensor,
    target_class: usize,
    config: &ShapCamConfig,
) -> Result<SaliencyMap> {
    let game = Game::new(feature_map, target_class, oracle, config.baseline)?;
    let players = game.players();
    let mut meta = SaliencyMeta {
        baseline: Some(config.baseline),
        ..Default::default()
    };
    let values = if config.exact {
        meta.mode = Some("exact".into());
        exact_shapley_with_limit(&game, config.exact_limit)?
    } else {
        let estimate = sample_shapley(
            &game,
            &SamplerConfig {
                samples: config.samples,
                seed: config.seed,
                workers: config.workers,
            },
        )?;
        meta.mode = Some("sampled".into());
        meta.samples = Some(estimate.sample_count());
        meta.seed = Some(config.seed);
        meta.std_errors = estimate.standard_errors();
        estimate.values()
    };
    let mut map = SaliencyMap::new(players.height, players.width, values, Method::ShapCam, target_class)?;
    map.meta = meta;
    Ok(map)
}
