use proptest::prelude::*;
use shapcam::shapley::ShapCamConfig;
use shapcam::worth::{Coalition, CoalitionGame, Game, TailOracle};
use shapcam::{load_model, shap_cam, toynet, BaselineMode, Tensor, WeightBundle};

#[test]
fn split_is_exact_over_100_images() {
    let net = toynet::load().unwrap();
    for k in 0..100 {
        let image = toynet::planted_image(5, k).image;
        let split = net.forward_tail(&net.forward_head(&image).unwrap()).unwrap();
        assert_eq!(split, net.forward(&image).unwrap(), "image {k}");
    }
}

#[test]
fn batch_matches_single() {
    let net = toynet::load().unwrap();
    let images: Vec<Tensor> = (0..17).map(|k| toynet::planted_image(6, k).image).collect();
    let batch = net.forward_batch(&images).unwrap();
    for (x, b) in images.iter().zip(&batch) {
        assert_eq!(&net.forward(x).unwrap(), b);
    }
    let maps: Vec<Tensor> = images.iter().map(|x| net.forward_head(x).unwrap()).collect();
    let tails = net.forward_tail_batch(&maps).unwrap();
    assert_eq!(tails, batch);
}

#[test]
fn weights_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let net = toynet::load().unwrap();
    let spec_path = dir.path().join("toynet.toml");
    let weights_path = dir.path().join("toynet.weights");
    std::fs::write(&spec_path, net.spec().to_text()).unwrap();
    std::fs::write(&weights_path, net.to_bundle().to_bytes()).unwrap();
    let bytes = std::fs::read(&weights_path).unwrap();
    assert_eq!(bytes, toynet::WEIGHTS);
    let reloaded = load_model(&std::fs::read_to_string(&spec_path).unwrap(), &bytes).unwrap();
    let image = toynet::fixed_image();
    assert_eq!(reloaded.forward(&image).unwrap(), net.forward(&image).unwrap());
    assert_eq!(WeightBundle::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn global_baseline_is_selectable() {
    let net = toynet::load().unwrap();
    let fm = net.forward_head(&toynet::fixed_image()).unwrap();
    let oracle = TailOracle(&net);
    let per = Game::new(fm.clone(), 0, &oracle, BaselineMode::PerChannel).unwrap();
    let glob = Game::new(fm, 0, &oracle, BaselineMode::Global).unwrap();
    let empty = Coalition::empty(9);
    assert_ne!(per.worth(&empty).unwrap(), glob.worth(&empty).unwrap());
    let full = Coalition::full(9);
    assert_eq!(per.worth(&full).unwrap(), glob.worth(&full).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_are_a_distribution(seed in 0u64..1000, index in 0u64..1000) {
        let net = toynet::load().unwrap();
        let p = net.forward(&toynet::planted_image(seed, index).image).unwrap();
        prop_assert_eq!(p.len(), 10);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn shap_cam_sums_to_worth_gap(seed in 0u64..1000, samples in 1usize..200) {
        let net = toynet::load().unwrap();
        let image = toynet::planted_image(seed, 0).image;
        let class = toynet::top1(&net.forward(&image).unwrap());
        let cfg = ShapCamConfig { samples, seed, ..Default::default() };
        let map = shap_cam(&net, &image, class, &cfg).unwrap();
        let fm = net.forward_head(&image).unwrap();
        let oracle = TailOracle(&net);
        let game = Game::new(fm, class, &oracle, BaselineMode::PerChannel).unwrap();
        let gap = game.worth(&Coalition::full(9)).unwrap() - game.worth(&Coalition::empty(9)).unwrap();
        prop_assert!((map.values.iter().sum::<f64>() - gap).abs() < 1e-12);
    }
}
