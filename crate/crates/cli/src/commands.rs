use std::fs;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde_json::json;
use shapcam::imageio::{load_image, render_overlay, save_image};
use shapcam::protocol::{feature_map_json, serve, HelloReply, PROTOCOL_VERSION};
use shapcam::shapley::{exact_shapley_with_limit, sample_shapley, DEFAULT_EXACT_LIMIT};
use shapcam::worth::{Coalition, CoalitionGame, Game};
use shapcam::{load_model, toynet, Method, SaliencyMap, SamplerConfig};

use crate::args::{AdapterArgs, ExplainArgs, GameDebugArgs, Split, SynthArgs, WriteToynetArgs};
use crate::engine::{saliency, Engine, MethodSettings};
use crate::error::CliError;
use crate::manifest::Run;

pub fn init_workers(workers: usize) {
    if workers > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

/// Row-major grid, one line per row, shortest round-trip formatting.
pub fn saliency_csv(map: &SaliencyMap) -> String {
    let mut out = String::new();
    for i in 0..map.height {
        let row: Vec<String> = (0..map.width).map(|j| format!("{}", map.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn explain(a: &ExplainArgs, argv: Vec<String>) -> Result<(), CliError> {
    init_workers(a.sampling.workers);
    let run = Run::start("explain", argv, a.sampling.seed);
    let engine = Engine::from_args(&a.model)?;
    let raw = a.image.as_deref().map(load_image).transpose()?;
    let image = raw.clone().map(|r| engine.prepare(r)).transpose()?;
    let needs_map = matches!(a.method, Method::ShapCam | Method::ScoreCam);
    let feature_map = if needs_map || a.feature_map.is_some() {
        Some(engine.feature_map(image.as_ref(), a.feature_map.as_deref())?)
    } else {
        None
    };
    if image.is_none() && feature_map.is_none() {
        return Err(CliError::usage("need --image or --feature-map"));
    }
    let class = match a.class {
        Some(c) => c,
        None => engine.top1(image.as_ref(), feature_map.as_ref())?,
    };
    let settings = MethodSettings::new(&a.sampling, &a.rise, run.seed);
    let t0 = Instant::now();
    let map = saliency(&engine, a.method, image.as_ref(), feature_map.as_ref(), class, &settings)?;
    let saliency_ms = t0.elapsed().as_secs_f64() * 1e3;

    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("saliency.csv"), saliency_csv(&map))?;
    fs::write(a.out_dir.join("saliency.json"), serde_json::to_string(&map)? + "\n")?;
    let mut outputs = vec!["saliency.csv", "saliency.json"];
    if let Some(raw) = &raw {
        render_overlay(raw, &map, &a.out_dir.join("overlay.png"))?;
        outputs.push("overlay.png");
    }
    outputs.push("manifest.json");
    let mode = map.meta.mode.clone().unwrap_or_else(|| "single".into());
    run.write(
        &a.out_dir,
        json!({ "args": a, "methods": settings.describe(), "engine": engine.describe() }),
        json!({
            "method": a.method,
            "mode": mode,
            "target_class": class,
            "grid": [map.height, map.width],
        }),
        json!({ "saliency": saliency_ms }),
        &outputs,
    )?;
    println!(
        "{}",
        json!({ "out_dir": a.out_dir, "method": a.method, "mode": mode, "target_class": class })
    );
    Ok(())
}

pub fn game_debug(a: &GameDebugArgs, argv: Vec<String>) -> Result<(), CliError> {
    init_workers(a.sampling.workers);
    let run = Run::start("game-debug", argv, a.sampling.seed);
    let engine = Engine::from_args(&a.model)?;
    let image = a.image.as_deref().map(|p| engine.load_input(p)).transpose()?;
    let feature_map = engine.feature_map(image.as_ref(), a.feature_map.as_deref())?;
    let class = match a.class {
        Some(c) => c,
        None => engine.top1(None, Some(&feature_map))?,
    };
    let scorer = engine
        .feature_scorer()
        .ok_or_else(|| CliError::usage("game-debug needs a model or --oracle-cmd"))?;
    let game = Game::new(feature_map, class, scorer.as_ref(), a.sampling.baseline)?;
    let n = game.num_players();
    let worth_empty = game.worth(&Coalition::empty(n))?;
    let worth_full = game.worth(&Coalition::full(n))?;
    let gap = worth_full - worth_empty;
    let residual = |v: &[f64]| (v.iter().sum::<f64>() - gap).abs();

    let exact = if a.sampling.exact {
        let v = exact_shapley_with_limit(&game, DEFAULT_EXACT_LIMIT)?;
        Some(json!({ "values": v, "efficiency_residual": residual(&v) }))
    } else {
        None
    };
    let sampled = if a.sampling.samples > 0 {
        let est = sample_shapley(
            &game,
            &SamplerConfig {
                samples: a.sampling.samples,
                seed: run.seed,
                workers: a.sampling.workers,
            },
        )?;
        let v = est.values();
        Some(json!({
            "samples": est.sample_count(),
            "seed": run.seed,
            "values": v,
            "std_errors": est.standard_errors(),
            "efficiency_residual": residual(&v),
        }))
    } else {
        None
    };
    let players = game.players();
    let dump = json!({
        "schema_version": 1,
        "players": n,
        "grid": [players.height, players.width],
        "target_class": class,
        "baseline": game.baseline_mode(),
        "baseline_values": game.baseline(),
        "worth_empty": worth_empty,
        "worth_full": worth_full,
        "exact": exact,
        "sampled": sampled,
        "seed_source": run.seed_source,
    });
    let text = serde_json::to_string_pretty(&dump)? + "\n";
    match &a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn adapter(a: &AdapterArgs) -> Result<(), CliError> {
    let net = match (&a.model, &a.weights) {
        (Some(m), Some(w)) => load_model(&fs::read_to_string(m)?, &fs::read(w)?)?,
        _ => toynet::load()?,
    };
    let (map_shape, split_layer) = match a.split {
        Split::Head => (
            net.feature_shape().to_vec(),
            net.head().last().map(|l| l.name.clone()).unwrap_or_default(),
        ),
        Split::Input => (net.input_shape().to_vec(), "input".to_string()),
    };
    let hello = HelloReply {
        version: PROTOCOL_VERSION,
        classes: net.num_classes(),
        map_shape,
        split_layer: Some(split_layer),
    };
    let served = AtomicU64::new(0);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(stdin.lock(), BufWriter::new(stdout.lock()), &hello, |x, class| {
        let count = served.fetch_add(1, Ordering::SeqCst);
        if a.fail_after.is_some_and(|limit| count >= limit) {
            return Err("adapter configured to fail".into());
        }
        let probs = match a.split {
            Split::Head => net.forward_tail(x),
            Split::Input => net.forward(x),
        }
        .map_err(|e| e.to_string())?;
        Ok(probs[class])
    })?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let net = toynet::load()?;
    fs::create_dir_all(&a.out_dir)?;
    let mut lines = BufWriter::new(fs::File::create(a.out_dir.join("annotations.jsonl"))?);
    for k in 0..a.count {
        let p = toynet::planted_image(a.seed, k);
        let name = format!("image_{k:03}.ppm");
        save_image(&a.out_dir.join(&name), &p.image)?;
        // labels and maps come from the image as written, after 8-bit quantization
        let stored = load_image(&a.out_dir.join(&name))?;
        let class = toynet::top1(&net.forward(&stored)?);
        let mut ann = json!({
            "image": name,
            "class": class,
            "bbox": [p.bbox.x0, p.bbox.y0, p.bbox.x1, p.bbox.y1],
            "texture": p.texture,
        });
        if a.feature_maps {
            let fm_name = format!("image_{k:03}.fm.json");
            fs::write(a.out_dir.join(&fm_name), feature_map_json(&net.forward_head(&stored)?))?;
            ann["feature_map"] = json!(fm_name);
        }
        writeln!(lines, "{ann}")?;
    }
    lines.flush()?;
    Ok(())
}

pub fn write_toynet(a: &WriteToynetArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("toynet.toml"), toynet::SPEC_TOML)?;
    fs::write(a.out_dir.join("toynet.weights"), toynet::WEIGHTS)?;
    Ok(())
}
