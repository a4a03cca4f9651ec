//! Backend resolution: an in-process model, adapter processes, or both.

use std::path::Path;

use shapcam::baselines::{random_saliency, rise, score_cam_from, RiseConfig};
use shapcam::imageio::{load_image, preprocess};
use shapcam::protocol::read_feature_map;
use shapcam::shapley::{shap_cam_from_map, ShapCamConfig};
use shapcam::tensor::bilinear_resize;
use shapcam::{load_model, Error, ExternalOracle, Method, NetworkOracle, NetworkSplit, SaliencyMap, ScoreOracle, TailOracle, Tensor};

use crate::args::{ModelArgs, Preprocess, RiseArgs, SamplingArgs};
use crate::error::CliError;

pub struct Engine {
    pub net: Option<NetworkSplit>,
    pub feature_oracle: Option<ExternalOracle>,
    pub input_oracle: Option<ExternalOracle>,
    pub preprocess: Preprocess,
}

impl Engine {
    pub fn from_args(args: &ModelArgs) -> Result<Self, CliError> {
        let net = match (&args.model, &args.weights) {
            (Some(model), Some(weights)) => {
                let spec = std::fs::read_to_string(model)?;
                let bytes = std::fs::read(weights)?;
                Some(load_model(&spec, &bytes)?)
            }
            (Some(_), None) => return Err(CliError::usage("--model needs --weights")),
            (None, Some(_)) => return Err(CliError::usage("--weights needs --model")),
            (None, None) => None,
        };
        if net.is_none() && args.oracle_cmd.is_none() && args.input_oracle_cmd.is_none() {
            return Err(CliError::usage(
                "missing --weights: give --model/--weights or an --oracle-cmd/--input-oracle-cmd",
            ));
        }
        let feature_oracle = args.oracle_cmd.as_deref().map(ExternalOracle::spawn).transpose()?;
        let input_oracle = args.input_oracle_cmd.as_deref().map(ExternalOracle::spawn).transpose()?;
        Ok(Self {
            net,
            feature_oracle,
            input_oracle,
            preprocess: args.preprocess,
        })
    }

    /// Scores feature maps; an adapter takes precedence over the local tail.
    pub fn feature_scorer(&self) -> Option<Box<dyn ScoreOracle + '_>> {
        if let Some(o) = &self.feature_oracle {
            return Some(Box::new(o));
        }
        self.net.as_ref().map(|n| Box::new(TailOracle(n)) as Box<dyn ScoreOracle>)
    }

    /// Scores input images.
    pub fn input_scorer(&self) -> Option<Box<dyn ScoreOracle + '_>> {
        if let Some(o) = &self.input_oracle {
            return Some(Box::new(o));
        }
        self.net.as_ref().map(|n| Box::new(NetworkOracle(n)) as Box<dyn ScoreOracle>)
    }

    fn input_shape(&self) -> Option<Vec<usize>> {
        if let Some(n) = &self.net {
            return Some(n.input_shape().to_vec());
        }
        self.input_oracle.as_ref().map(|o| o.hello().map_shape.clone())
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.net.as_ref().map(|n| n.name().to_string()),
            "split_after": self.net.as_ref().and_then(|n| n.head().last().map(|l| l.name.clone())),
            "feature_oracle": self.feature_oracle.as_ref().map(|o| o.hello().clone()),
            "input_oracle": self.input_oracle.as_ref().map(|o| o.hello().clone()),
        })
    }

    /// Loads an image and brings it to the network input.
    pub fn load_input(&self, path: &Path) -> Result<Tensor, CliError> {
        let raw = load_image(path)?;
        self.prepare(raw)
    }

    pub fn prepare(&self, raw: Tensor) -> Result<Tensor, CliError> {
        let image = match self.preprocess {
            Preprocess::Imagenet => preprocess(&raw)?,
            Preprocess::None => raw,
            Preprocess::Resize => match self.input_shape() {
                Some(shape) if shape.len() == 3 && shape[1..] != raw.shape()[1..] => {
                    bilinear_resize(&raw, shape[1], shape[2])?
                }
                _ => raw,
            },
        };
        if let Some(shape) = self.input_shape() {
            if image.shape() != shape.as_slice() {
                return Err(Error::InvalidValue(format!(
                    "image shape {:?} does not match model input {:?}",
                    image.shape(),
                    shape
                ))
                .into());
            }
        }
        Ok(image)
    }

    /// Feature map from a file, else from the local head.
    pub fn feature_map(&self, image: Option<&Tensor>, file: Option<&Path>) -> Result<Tensor, CliError> {
        if let Some(path) = file {
            return Ok(read_feature_map(&std::fs::read_to_string(path)?)?);
        }
        match (&self.net, image) {
            (Some(net), Some(image)) => Ok(net.forward_head(image)?),
            (None, _) => Err(CliError::usage("an adapter run needs --feature-map (or a feature_map annotation)")),
            (_, None) => Err(CliError::usage("need --image or --feature-map")),
        }
    }

    /// Top-1 class of the image, or of the feature map when only that is known.
    pub fn top1(&self, image: Option<&Tensor>, feature_map: Option<&Tensor>) -> Result<usize, CliError> {
        let (scorer, x) = match (image, self.input_scorer(), feature_map, self.feature_scorer()) {
            (Some(img), Some(s), _, _) => (s, img),
            (_, _, Some(fm), Some(s)) => (s, fm),
            _ => return Err(CliError::usage("cannot pick a default class; pass --class")),
        };
        let probs = (0..scorer.num_classes())
            .map(|c| scorer.score(x, c))
            .collect::<shapcam::Result<Vec<f64>>>()?;
        Ok(shapcam::toynet::top1(&probs))
    }
}

pub struct MethodSettings {
    pub shapcam: ShapCamConfig,
    pub rise: RiseConfig,
}

impl MethodSettings {
    pub fn new(sampling: &SamplingArgs, rise: &RiseArgs, seed: u64) -> Self {
        Self {
            shapcam: ShapCamConfig {
                samples: sampling.samples,
                seed,
                workers: sampling.workers,
                baseline: sampling.baseline,
                exact: sampling.exact,
                ..Default::default()
            },
            rise: RiseConfig {
                masks: rise.rise_masks,
                grid: rise.rise_grid,
                keep_prob: rise.rise_keep_prob,
                seed,
            },
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = Self {
            shapcam: self.shapcam,
            rise: self.rise,
        };
        s.shapcam.seed = seed;
        s.rise.seed = seed;
        s
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "shapcam": self.shapcam,
            "rise": self.rise,
            "scorecam": {"normalization": "per-channel min-max after bilinear upsampling", "channels": "all"},
        })
    }
}

/// One saliency map by `method`.
pub fn saliency(
    engine: &Engine,
    method: Method,
    image: Option<&Tensor>,
    feature_map: Option<&Tensor>,
    class: usize,
    settings: &MethodSettings,
) -> Result<SaliencyMap, CliError> {
    let need_image = || image.ok_or_else(|| CliError::usage(format!("{method} needs an input image")));
    let need_map = || feature_map.ok_or_else(|| CliError::usage(format!("{method} needs a feature map")));
    let need_input_scorer = || {
        engine
            .input_scorer()
            .ok_or_else(|| CliError::usage(format!("{method} needs a model or --input-oracle-cmd")))
    };
    let map = match method {
        Method::ShapCam => {
            let scorer = engine
                .feature_scorer()
                .ok_or_else(|| CliError::usage("shapcam needs a model or --oracle-cmd"))?;
            shap_cam_from_map(scorer.as_ref(), need_map()?.clone(), class, &settings.shapcam)?
        }
        Method::ScoreCam => score_cam_from(need_input_scorer()?.as_ref(), need_image()?, need_map()?, class)?,
        Method::Rise => rise(need_input_scorer()?.as_ref(), need_image()?, class, &settings.rise)?,
        Method::Random => {
            let (h, w) = match (image, feature_map) {
                (Some(x), _) | (None, Some(x)) => {
                    let (_, h, w) = x.chw()?;
                    (h, w)
                }
                (None, None) => return Err(CliError::usage("random needs an image or feature map")),
            };
            let mut m = random_saliency(h, w, settings.shapcam.seed)?;
            m.target_class = class;
            m
        }
    };
    Ok(map)
}
