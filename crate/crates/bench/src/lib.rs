//! Shared fixtures for the criterion benches.

use shapcam::worth::{make_game, Game, TailOracle};
use shapcam::{toynet, NetworkSplit, Tensor};

/// Toynet with its fixed image, feature map and top-1 class.
pub struct Fixture {
    pub net: NetworkSplit,
    pub image: Tensor,
    pub feature_map: Tensor,
    pub class: usize,
}

impl Fixture {
    pub fn toynet() -> Self {
        let net = toynet::load().expect("bundled toynet loads");
        let image = toynet::fixed_image();
        let feature_map = net.forward_head(&image).expect("fixed image fits toynet");
        let class = toynet::top1(&net.forward(&image).expect("forward"));
        Self {
            net,
            image,
            feature_map,
            class,
        }
    }

    pub fn oracle(&self) -> TailOracle<'_> {
        TailOracle(&self.net)
    }

    pub fn game<'o>(&self, oracle: &'o TailOracle<'o>) -> Game<'o> {
        make_game(self.feature_map.clone(), self.class, oracle).expect("game builds")
    }
}
