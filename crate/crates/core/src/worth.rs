//! The cooperative game over feature-map positions.
//!
//! Players are the `h × w` spatial positions of the last-conv feature map.
//! A coalition keeps its positions' activations (all channels) and replaces
//! every other position with the baseline; the worth of the coalition is the
//! oracle's probability for the target class on the masked map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkSplit;
use crate::tensor::Tensor;

/// Scores a tensor for one class. Implementations must be deterministic.
pub trait ScoreOracle: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Shape of the tensors this oracle accepts.
    fn input_shape(&self) -> Vec<usize>;

    fn score(&self, input: &Tensor, class: usize) -> Result<f64>;

    /// Scores many tensors, preserving order. A failure reports the index of
    /// the failing element.
    fn score_batch(&self, inputs: &[Tensor], class: usize) -> Result<Vec<f64>> {
        inputs
            .iter()
            .enumerate()
            .map(|(index, x)| {
                self.score(x, class).map_err(|e| Error::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

impl<T: ScoreOracle + ?Sized> ScoreOracle for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_shape(&self) -> Vec<usize> {
        (**self).input_shape()
    }
    fn score(&self, input: &Tensor, class: usize) -> Result<f64> {
        (**self).score(input, class)
    }
    fn score_batch(&self, inputs: &[Tensor], class: usize) -> Result<Vec<f64>> {
        (**self).score_batch(inputs, class)
    }
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    Ok(())
}

/// In-process backend that scores feature maps with the network's tail.
#[derive(Debug, Clone, Copy)]
pub struct TailOracle<'a>(pub &'a NetworkSplit);

impl ScoreOracle for TailOracle<'_> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.0.feature_shape().to_vec()
    }

    fn score(&self, input: &Tensor, class: usize) -> Result<f64> {
        check_class(class, self.0.num_classes())?;
        Ok(self.0.forward_tail(input)?[class])
    }

    fn score_batch(&self, inputs: &[Tensor], class: usize) -> Result<Vec<f64>> {
        check_class(class, self.0.num_classes())?;
        Ok(self
            .0
            .forward_tail_batch(inputs)?
            .into_iter()
            .map(|p| p[class])
            .collect())
    }
}

/// In-process backend that scores whole images with the full network.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOracle<'a>(pub &'a NetworkSplit);

impl ScoreOracle for NetworkOracle<'_> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape().to_vec()
    }

    fn score(&self, input: &Tensor, class: usize) -> Result<f64> {
        check_class(class, self.0.num_classes())?;
        Ok(self.0.forward(input)?[class])
    }

    fn score_batch(&self, inputs: &[Tensor], class: usize) -> Result<Vec<f64>> {
        check_class(class, self.0.num_classes())?;
        Ok(self
            .0
            .forward_batch(inputs)?
            .into_iter()
            .map(|p| p[class])
            .collect())
    }
}

/// The `h × w` grid of players; index `k` is position `(k / w, k % w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerSet {
    pub height: usize,
    pub width: usize,
}

impl PlayerSet {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("player set", "grid must be at least 1x1"));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.width + j
    }

    pub fn position(&self, k: usize) -> (usize, usize) {
        (k / self.width, k % self.width)
    }
}

/// A subset of players stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    players: usize,
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(players: usize) -> Self {
        Self {
            players,
            words: vec![0; players.div_ceil(64)],
        }
    }

    pub fn full(players: usize) -> Self {
        let mut c = Self::empty(players);
        for k in 0..players {
            c.insert(k);
        }
        c
    }

    pub fn from_indices(players: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Self::empty(players);
        for k in members {
            c.insert(k);
        }
        c
    }

    /// Coalition whose members are the set bits of `mask` (n ≤ 64).
    pub fn from_mask(players: usize, mask: u64) -> Self {
        assert!(players <= 64, "mask coalitions support at most 64 players");
        let mut c = Self::empty(players);
        if players > 0 {
            let keep = if players == 64 { u64::MAX } else { (1u64 << players) - 1 };
            c.words[0] = mask & keep;
        }
        c
    }

    pub fn num_players(&self) -> usize {
        self.players
    }

    pub fn insert(&mut self, k: usize) {
        assert!(k < self.players, "player {k} outside 0..{}", self.players);
        self.words[k / 64] |= 1 << (k % 64);
    }

    pub fn remove(&mut self, k: usize) {
        assert!(k < self.players, "player {k} outside 0..{}", self.players);
        self.words[k / 64] &= !(1 << (k % 64));
    }

    pub fn contains(&self, k: usize) -> bool {
        k < self.players && self.words[k / 64] & (1 << (k % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.players).filter(|&k| self.contains(k))
    }

    /// Low 64 bits of the membership bitset.
    pub fn mask(&self) -> u64 {
        self.words.first().copied().unwrap_or(0)
    }
}

/// A transferable-utility game over `num_players()` players.
pub trait CoalitionGame: Sync {
    fn num_players(&self) -> usize;

    fn worth(&self, coalition: &Coalition) -> Result<f64>;

    fn worth_batch(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        coalitions
            .iter()
            .enumerate()
            .map(|(index, c)| {
                self.worth(c).map_err(|e| Error::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Worth of every prefix of `order`: `n + 1` values starting with the
    /// empty coalition and ending with the full one.
    fn worth_chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut current = Coalition::empty(self.num_players());
        let mut prefixes = Vec::with_capacity(order.len() + 1);
        prefixes.push(current.clone());
        for &k in order {
            current.insert(k);
            prefixes.push(current.clone());
        }
        self.worth_batch(&prefixes)
    }
}

/// A game given by an explicit worth for each of the `2^n` coalitions,
/// indexed by membership bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    players: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(players: usize, values: Vec<f64>) -> Result<Self> {
        if players > 24 {
            return Err(Error::InvalidValue(format!("table game with {players} players is too large")));
        }
        if values.len() != 1 << players {
            return Err(Error::shape(
                "table game",
                format!("{players} players need {} values, got {}", 1usize << players, values.len()),
            ));
        }
        Ok(Self { players, values })
    }

    pub fn from_fn(players: usize, f: impl Fn(u64) -> f64) -> Result<Self> {
        Self::new(players, (0..1u64 << players).map(f).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `a·self + b·other` over the same players.
    pub fn combine(&self, a: f64, other: &TableGame, b: f64) -> Result<Self> {
        if self.players != other.players {
            return Err(Error::shape("table game", "player counts differ"));
        }
        Self::new(
            self.players,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }
}

impl CoalitionGame for TableGame {
    fn num_players(&self) -> usize {
        self.players
    }

    fn worth(&self, coalition: &Coalition) -> Result<f64> {
        if coalition.num_players() != self.players {
            return Err(Error::shape("worth", "coalition sized for a different game"));
        }
        Ok(self.values[coalition.mask() as usize])
    }
}

/// Replacement value for absent players.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Spatial mean of each channel.
    #[default]
    PerChannel,
    /// One scalar: mean over every value of the map.
    Global,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-channel" => Ok(Self::PerChannel),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidValue(format!("unknown baseline mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerChannel => "per-channel",
            Self::Global => "global",
        })
    }
}

/// Per-channel baseline values for `feature_map` under `mode`.
pub fn baseline_values(feature_map: &Tensor, mode: BaselineMode) -> Result<Vec<f64>> {
    let (c, h, w) = feature_map.chw()?;
    let per_channel: Vec<f64> = feature_map
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    Ok(match mode {
        BaselineMode::PerChannel => per_channel,
        BaselineMode::Global => {
            let mean = feature_map.data().iter().sum::<f64>() / feature_map.len() as f64;
            vec![mean; c]
        }
    })
}

/// The game `(P, Y^c)` built from one feature map.
pub struct Game<'o> {
    feature_map: Tensor,
    baseline: Vec<f64>,
    baseline_mode: BaselineMode,
    target_class: usize,
    players: PlayerSet,
    oracle: &'o dyn ScoreOracle,
}

impl std::fmt::Debug for Game<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Game")
            .field("shape", &self.feature_map.shape())
            .field("baseline", &self.baseline)
            .field("target_class", &self.target_class)
            .finish()
    }
}

/// Builds the game with the default per-channel baseline.
pub fn make_game<'o>(
    feature_map: Tensor,
    target_class: usize,
    oracle: &'o dyn ScoreOracle,
) -> Result<Game<'o>> {
    Game::new(feature_map, target_class, oracle, BaselineMode::PerChannel)
}

impl<'o> Game<'o> {
    pub fn new(
        feature_map: Tensor,
        target_class: usize,
        oracle: &'o dyn ScoreOracle,
        baseline_mode: BaselineMode,
    ) -> Result<Self> {
        let (_, h, w) = feature_map.chw()?;
        check_class(target_class, oracle.num_classes())?;
        let expected = oracle.input_shape();
        if feature_map.shape() != expected.as_slice() {
            return Err(Error::shape(
                "make_game",
                format!("feature map {:?} != oracle input {expected:?}", feature_map.shape()),
            ));
        }
        let baseline = baseline_values(&feature_map, baseline_mode)?;
        Ok(Self {
            players: PlayerSet::new(h, w)?,
            feature_map,
            baseline,
            baseline_mode,
            target_class,
            oracle,
        })
    }

    pub fn feature_map(&self) -> &Tensor {
        &self.feature_map
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    pub fn baseline_mode(&self) -> BaselineMode {
        self.baseline_mode
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn players(&self) -> PlayerSet {
        self.players
    }

    fn baseline_map(&self) -> Tensor {
        let (c, h, w) = self.feature_map.chw().unwrap();
        let mut data = Vec::with_capacity(c * h * w);
        for &b in &self.baseline {
            data.extend(std::iter::repeat_n(b, h * w));
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    /// Copies every channel of player `k` from the original map into `map`.
    fn restore_player(&self, map: &mut Tensor, k: usize) {
        let area = self.players.len();
        let src = self.feature_map.data();
        let dst = map.data_mut();
        for ch in 0..self.baseline.len() {
            dst[ch * area + k] = src[ch * area + k];
        }
    }

    fn check_coalition(&self, coalition: &Coalition) -> Result<()> {
        if coalition.num_players() != self.players.len() {
            return Err(Error::shape(
                "mask_map",
                format!(
                    "coalition over {} players, game has {}",
                    coalition.num_players(),
                    self.players.len()
                ),
            ));
        }
        Ok(())
    }

    /// Original activations at members of `coalition`, baseline elsewhere.
    pub fn mask_map(&self, coalition: &Coalition) -> Result<Tensor> {
        self.check_coalition(coalition)?;
        let mut map = self.baseline_map();
        for k in coalition.members() {
            self.restore_player(&mut map, k);
        }
        Ok(map)
    }
}

impl CoalitionGame for Game<'_> {
    fn num_players(&self) -> usize {
        self.players.len()
    }

    fn worth(&self, coalition: &Coalition) -> Result<f64> {
        let map = self.mask_map(coalition)?;
        self.oracle.score(&map, self.target_class)
    }

    fn worth_batch(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        let maps = coalitions
            .iter()
            .map(|c| self.mask_map(c))
            .collect::<Result<Vec<_>>>()?;
        self.oracle.score_batch(&maps, self.target_class)
    }

    /// Builds the prefix maps incrementally, one restored column per step.
    fn worth_chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut map = self.baseline_map();
        let mut maps = Vec::with_capacity(order.len() + 1);
        maps.push(map.clone());
        for &k in order {
            if k >= self.players.len() {
                return Err(Error::shape("worth_chain", format!("player {k} out of range")));
            }
            self.restore_player(&mut map, k);
            maps.push(map.clone());
        }
        self.oracle.score_batch(&maps, self.target_class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Sums the map values and reports `sigmoid(sum)` for class 0.
    struct SumOracle {
        shape: Vec<usize>,
        calls: AtomicUsize,
    }

    impl SumOracle {
        fn new(shape: &[usize]) -> Self {
            Self {
                shape: shape.to_vec(),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ScoreOracle for SumOracle {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_shape(&self) -> Vec<usize> {
            self.shape.clone()
        }
        fn score(&self, input: &Tensor, class: usize) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            if input.data().iter().any(|&v| v < -100.0) {
                return Err(Error::Oracle("poisoned".into()));
            }
            let p = 1.0 / (1.0 + (-input.data().iter().sum::<f64>()).exp());
            Ok(if class == 0 { p } else { 1.0 - p })
        }
    }

    fn map(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn baselines_are_per_channel_means() {
        let o = SumOracle::new(&[1, 2, 2]);
        let g = make_game(map(vec![1, 2, 2], vec![1., 2., 3., 4.]), 0, &o).unwrap();
        assert_eq!(g.baseline(), &[2.5]);

        let o2 = SumOracle::new(&[2, 1, 2]);
        let g = make_game(map(vec![2, 1, 2], vec![0.5, 1.5, -1.0, 0.0]), 0, &o2).unwrap();
        assert_eq!(g.baseline(), &[1.0, -0.5]);

        let g = Game::new(map(vec![2, 1, 2], vec![0.5, 1.5, -1.0, 0.0]), 0, &o2, BaselineMode::Global)
            .unwrap();
        assert_eq!(g.baseline(), &[0.25, 0.25]);
    }

    #[test]
    fn constant_map_masks_to_itself() {
        let o = SumOracle::new(&[2, 2, 3]);
        let a = Tensor::filled(vec![2, 2, 3], 0.75);
        let g = make_game(a.clone(), 1, &o).unwrap();
        assert_eq!(g.baseline(), &[0.75, 0.75]);
        for mask in 0..64u64 {
            let c = Coalition::from_mask(6, mask);
            assert_eq!(g.mask_map(&c).unwrap(), a);
        }
        let w0 = g.worth(&Coalition::empty(6)).unwrap();
        for mask in 0..64u64 {
            assert_eq!(g.worth(&Coalition::from_mask(6, mask)).unwrap(), w0);
        }
    }

    #[test]
    fn invalid_class_rejected() {
        let o = SumOracle::new(&[1, 1, 1]);
        let err = make_game(Tensor::zeros(vec![1, 1, 1]), 2, &o).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { class: 2, classes: 2 }));
    }

    #[test]
    fn mask_map_examples() {
        let o = SumOracle::new(&[1, 2, 2]);
        let a = map(vec![1, 2, 2], vec![1., 2., 3., 4.]);
        let g = make_game(a.clone(), 0, &o).unwrap();
        assert_eq!(g.mask_map(&Coalition::full(4)).unwrap(), a);
        assert_eq!(g.mask_map(&Coalition::empty(4)).unwrap().data(), &[2.5; 4]);
        let s = Coalition::from_indices(4, [0]);
        assert_eq!(g.mask_map(&s).unwrap().data(), &[1., 2.5, 2.5, 2.5]);
        assert!(g.mask_map(&Coalition::empty(5)).is_err());
    }

    #[test]
    fn flipping_one_bit_changes_one_column() {
        let o = SumOracle::new(&[3, 2, 2]);
        let a = map(vec![3, 2, 2], (0..12).map(|v| v as f64 * 1.5 - 4.0).collect());
        let g = make_game(a, 0, &o).unwrap();
        for mask in 0..16u64 {
            let base = g.mask_map(&Coalition::from_mask(4, mask)).unwrap();
            assert_eq!(g.mask_map(&Coalition::from_mask(4, mask)).unwrap(), base);
            for k in 0..4 {
                let flipped = g.mask_map(&Coalition::from_mask(4, mask ^ (1 << k))).unwrap();
                for (idx, (x, y)) in base.data().iter().zip(flipped.data()).enumerate() {
                    if idx % 4 != k {
                        assert_eq!(x, y);
                    }
                }
            }
        }
    }

    #[test]
    fn worth_batch_matches_sequential_and_reports_index() {
        let o = SumOracle::new(&[2, 2, 2]);
        let a = map(vec![2, 2, 2], vec![0.1, -0.3, 0.7, 0.2, 1.0, 0.0, -0.5, 0.4]);
        let g = make_game(a, 0, &o).unwrap();
        assert!(g.worth_batch(&[]).unwrap().is_empty());

        let full = Coalition::full(4);
        let empty = Coalition::empty(4);
        assert_eq!(
            g.worth_batch(&[full.clone(), empty.clone()]).unwrap(),
            vec![g.worth(&full).unwrap(), g.worth(&empty).unwrap()]
        );

        let coalitions: Vec<_> = (0..16u64).map(|m| Coalition::from_mask(4, m * 7 % 16)).collect();
        let batch = g.worth_batch(&coalitions).unwrap();
        for (c, w) in coalitions.iter().zip(batch) {
            assert_eq!(g.worth(c).unwrap(), w);
        }

        let chain = g.worth_chain(&[2, 0, 3, 1]).unwrap();
        let expected: Vec<f64> = [vec![], vec![2], vec![2, 0], vec![2, 0, 3], vec![2, 0, 3, 1]]
            .into_iter()
            .map(|m| g.worth(&Coalition::from_indices(4, m)).unwrap())
            .collect();
        assert_eq!(chain, expected);

        let bad = SumOracle::new(&[1, 1, 2]);
        let g = make_game(map(vec![1, 1, 2], vec![-500.0, 500.0]), 0, &bad).unwrap();
        let err = g
            .worth_batch(&[Coalition::empty(2), Coalition::full(2)])
            .unwrap_err();
        assert!(matches!(err, Error::Batch { index: 1, .. }), "{err}");
        assert!(err.is_oracle_failure());
    }

    #[test]
    fn coalition_bitset_over_64_players() {
        let mut c = Coalition::empty(130);
        c.insert(0);
        c.insert(129);
        c.insert(64);
        assert!(c.contains(129) && c.contains(64) && !c.contains(63));
        assert_eq!(c.len(), 3);
        c.remove(64);
        assert_eq!(c.members().collect::<Vec<_>>(), vec![0, 129]);
        assert_eq!(Coalition::full(130).len(), 130);
    }

    #[test]
    fn table_game_linear_combination() {
        let f = TableGame::from_fn(2, |m| m as f64).unwrap();
        let g = TableGame::from_fn(2, |m| (m * m) as f64).unwrap();
        let h = f.combine(2.0, &g, -1.0).unwrap();
        assert_eq!(h.values(), &[0.0, 1.0, 0.0, -3.0]);
        assert!(TableGame::new(2, vec![0.0; 3]).is_err());
    }
}
