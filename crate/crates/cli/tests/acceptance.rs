//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapcam::baselines::random_saliency;
use shapcam::eval::{self, deletion_curve, insertion_curve};
use shapcam::shapley::{exact_shapley, sample_shapley, ShapCamConfig};
use shapcam::worth::{make_game, Coalition, CoalitionGame, TableGame, TailOracle};
use shapcam::{shap_cam, toynet, Method, NetworkOracle, NetworkSplit, Report, SaliencyMap, SamplerConfig};

const BIN: &str = env!("CARGO_BIN_EXE_shapcam");

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The toynet game of planted image `(seed, index)` as a full worth table.
fn toynet_table(net: &NetworkSplit, seed: u64, index: u64) -> TableGame {
    let image = toynet::planted_image(seed, index).image;
    let class = toynet::top1(&net.forward(&image).unwrap());
    let oracle = TailOracle(net);
    let game = make_game(net.forward_head(&image).unwrap(), class, &oracle).unwrap();
    TableGame::from_fn(9, |mask| game.worth(&Coalition::from_mask(9, mask)).unwrap()).unwrap()
}

fn exact_vs_sampled(net: &NetworkSplit) -> Outcome {
    let t0 = Instant::now();
    let image = toynet::fixed_image();
    let class = toynet::top1(&net.forward(&image).unwrap());
    let oracle = TailOracle(net);
    let game = make_game(net.forward_head(&image).unwrap(), class, &oracle).unwrap();
    let exact = exact_shapley(&game).unwrap();
    let (mut within, mut total) = (0, 0);
    for seed in 0..10 {
        let est = sample_shapley(
            &game,
            &SamplerConfig {
                samples: 5000,
                seed,
                workers: 0,
            },
        )
        .unwrap();
        let se = est.standard_errors().unwrap();
        for ((v, e), s) in est.values().iter().zip(&exact).zip(&se) {
            total += 1;
            if (v - e).abs() <= 3.0 * s {
                within += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let share = within as f64 / total as f64;
    check(
        share >= 0.95 && secs < 60.0,
        format!("{within}/{total} players within 3 SE ({:.1}%), {secs:.2} s", 100.0 * share),
    )
}

fn swap_players(mask: u64, i: usize, j: usize) -> u64 {
    let (bi, bj) = (mask >> i & 1, mask >> j & 1);
    (mask & !(1 << i) & !(1 << j)) | bi << j | bj << i
}

fn axioms(net: &NetworkSplit) -> Outcome {
    let mut worst = [0.0f64; 4];
    for index in 0..5 {
        let v = toynet_table(net, 77, index);
        let w = toynet_table(net, 78, index);
        let values = v.values();
        let sh = exact_shapley(&v).unwrap();
        worst[0] = worst[0].max((sh.iter().sum::<f64>() - (values[511] - values[0])).abs());

        let k = index as usize;
        let clear = !(1u64 << k);
        let null = TableGame::from_fn(9, |m| values[(m & clear) as usize]).unwrap();
        worst[1] = worst[1].max(exact_shapley(&null).unwrap()[k].abs());

        let (i, j) = (k, (k + 4) % 9);
        let sym = TableGame::from_fn(9, |m| 0.5 * (values[m as usize] + values[swap_players(m, i, j) as usize])).unwrap();
        let s = exact_shapley(&sym).unwrap();
        worst[2] = worst[2].max((s[i] - s[j]).abs());

        let (a, b) = (0.7, -1.9);
        let combo = exact_shapley(&v.combine(a, &w, b).unwrap()).unwrap();
        let sw = exact_shapley(&w).unwrap();
        for p in 0..9 {
            worst[3] = worst[3].max((combo[p] - (a * sh[p] + b * sw[p])).abs());
        }
    }
    check(
        worst[0] <= 1e-9 && worst[1] <= 1e-12 && worst[2] <= 1e-9 && worst[3] <= 1e-9,
        format!(
            "efficiency {:.1e}, null {:.1e}, symmetry {:.1e}, linearity {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Average marginal contribution over all n! orders (Heap's algorithm).
fn permutation_average(game: &TableGame, n: usize) -> Vec<f64> {
    let v = game.values();
    let mut acc = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut count = 0usize;
    let mut visit = |order: &[usize]| {
        let mut mask = 0usize;
        for &p in order {
            acc[p] += v[mask | 1 << p] - v[mask];
            mask |= 1 << p;
        }
        count += 1;
    };
    let mut c = vec![0; n];
    visit(&order);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            visit(&order);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    acc.into_iter().map(|a| a / count as f64).collect()
}

fn formulation_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut games = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 1..=6 {
        for _ in 0..50 {
            let values: Vec<f64> = (0..1 << n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let game = TableGame::new(n, values).unwrap();
            let sub = exact_shapley(&game).unwrap();
            let perm = permutation_average(&game, n);
            for (a, b) in sub.iter().zip(&perm) {
                worst = worst.max((a - b).abs());
            }
            games += 1;
        }
    }
    check(worst <= 1e-9, format!("{games} games with n <= 6, max difference {worst:.1e}"))
}

fn telescoping(net: &NetworkSplit) -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for index in 0..3 {
        let image = toynet::planted_image(91, index).image;
        let class = toynet::top1(&net.forward(&image).unwrap());
        let oracle = TailOracle(net);
        let game = make_game(net.forward_head(&image).unwrap(), class, &oracle).unwrap();
        let gap = game.worth(&Coalition::full(9)).unwrap() - game.worth(&Coalition::empty(9)).unwrap();
        for samples in [1, 2, 7, 100, 1000] {
            for seed in 0..8 {
                let est = sample_shapley(&game, &SamplerConfig { samples, seed, workers: 0 }).unwrap();
                worst = worst.max((est.values().iter().sum::<f64>() - gap).abs());
                runs += 1;
            }
        }
    }
    check(worst <= 1e-12, format!("{runs} runs, max |sum - gap| {worst:.1e}"))
}

fn determinism(net: &NetworkSplit) -> Outcome {
    let image = toynet::fixed_image();
    let class = toynet::top1(&net.forward(&image).unwrap());
    let oracle = TailOracle(net);
    let game = make_game(net.forward_head(&image).unwrap(), class, &oracle).unwrap();
    let runs: Vec<_> = [1, 4, 8]
        .iter()
        .map(|&workers| {
            sample_shapley(
                &game,
                &SamplerConfig {
                    samples: 3001,
                    seed: 12,
                    workers,
                },
            )
            .unwrap()
        })
        .collect();
    let same = runs.iter().all(|r| {
        r.values().iter().map(|v| v.to_bits()).eq(runs[0].values().iter().map(|v| v.to_bits()))
            && r.standard_errors() == runs[0].standard_errors()
    });
    check(same, "3001 permutations, workers 1/4/8 bit-identical".into())
}

fn metric_units(net: &NetworkSplit) -> Outcome {
    let drop = eval::average_drop(&[(0.8, 0.6)]).unwrap().value;
    let inc = eval::average_increase(&[(0.3, 0.3), (0.5, 0.5)]).unwrap();
    let uniform = SaliencyMap::new(4, 4, vec![1.0; 16], Method::Random, 0).unwrap();
    let prop = eval::pointing_proportion(&uniform, &shapcam::BBox::from_array([0, 0, 2, 2])).unwrap();
    let image = toynet::fixed_image();
    let s = random_saliency(24, 24, 1).unwrap();
    let oracle = NetworkOracle(net);
    let del = deletion_curve(&oracle, &image, &s, 3).unwrap();
    let ins = insertion_curve(&oracle, &image, &s, 3).unwrap();
    let a = SaliencyMap::new(1, 2, vec![0.2, 0.4], Method::Random, 0).unwrap();
    let mut b = a.clone();
    b.values[0] += 1.0;
    let loss = eval::student_loss(0.5, &a, &b, 1.0).unwrap();
    let ok = (drop - 25.0).abs() < 1e-12
        && inc == 0.0
        && (prop - 0.25).abs() < 1e-12
        && del.points[0] == ins.points[100]
        && (loss - 1.5).abs() < 1e-12;
    check(
        ok,
        format!(
            "drop {drop}, increase {inc}, proportion {prop}, del[0]-ins[100] {:.1e}, loss {loss}",
            del.points[0] - ins.points[100]
        ),
    )
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn ordering_quality(net: &NetworkSplit) -> Outcome {
    let t0 = Instant::now();
    let images = 50;
    let oracle = NetworkOracle(net);
    let planted: Vec<_> = (0..images).map(|k| toynet::planted_image(1000, k).image).collect();
    let classes: Vec<usize> = planted.iter().map(|x| toynet::top1(&net.forward(x).unwrap())).collect();
    // per seed: mean deletion / insertion AUC of shapcam and random
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut sums = [0.0; 4];
        for (k, (x, &c)) in planted.iter().zip(&classes).enumerate() {
            let cfg = ShapCamConfig {
                samples: 10_000,
                seed: seed * 1000 + k as u64,
                ..Default::default()
            };
            let shap = shap_cam(net, x, c, &cfg).unwrap();
            let rand = random_saliency(24, 24, seed * 1000 + k as u64).unwrap();
            sums[0] += deletion_curve(&oracle, x, &shap, c).unwrap().auc;
            sums[1] += deletion_curve(&oracle, x, &rand, c).unwrap().auc;
            sums[2] += insertion_curve(&oracle, x, &shap, c).unwrap().auc;
            sums[3] += insertion_curve(&oracle, x, &rand, c).unwrap().auc;
        }
        rows.push(sums.map(|s| s / images as f64));
    }
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let diff = |a: usize, b: usize| rows.iter().map(|r| r[a] - r[b]).collect::<Vec<f64>>();
    let (del_margin, del_sd) = mean_std(&diff(1, 0));
    let (ins_margin, ins_sd) = mean_std(&diff(2, 3));
    // the spread bound is the largest 3-seed sd among the inputs to each margin
    let del_bound = del_sd.max(mean_std(&col(0)).1).max(mean_std(&col(1)).1);
    let ins_bound = ins_sd.max(mean_std(&col(2)).1).max(mean_std(&col(3)).1);
    check(
        del_margin > del_bound && ins_margin > ins_bound,
        format!(
            "deletion shapcam {:.4} vs random {:.4} (margin {del_margin:.4} > sd {del_bound:.4}); \
             insertion shapcam {:.4} vs random {:.4} (margin {ins_margin:.4} > sd {ins_bound:.4}); {:.1} s",
            mean_std(&col(0)).0,
            mean_std(&col(1)).0,
            mean_std(&col(2)).0,
            mean_std(&col(3)).0,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn adapter_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |rel: &str| dir.path().join(rel).display().to_string();
    run_bin(&["synth", "--out-dir", &p("data"), "--count", "5", "--seed", "31", "--feature-maps"])?;
    let head = format!("{BIN} adapter --split head");
    let input = format!("{BIN} adapter --split input");
    run_bin(&[
        "compare",
        "--oracle-cmd",
        &head,
        "--input-oracle-cmd",
        &input,
        "--annotations",
        &p("data/annotations.jsonl"),
        "--samples",
        "1000",
        "--rise-masks",
        "500",
        "--seed",
        "8",
        "--out-dir",
        &p("report"),
    ])?;
    let text = std::fs::read_to_string(Path::new(&p("report")).join("report.json")).map_err(|e| e.to_string())?;
    let report: Report = serde_json::from_str(&text).map_err(|e| format!("report does not parse: {e}"))?;
    report.validate().map_err(|v| v.join("; "))?;
    let complete = report.records.len() == 5
        && report.summary.len() == Method::ALL.len()
        && report.records.iter().all(|r| {
            r.methods.values().all(|m| {
                m.drop_pct.is_some()
                    && m.increase_flag.is_some()
                    && m.deletion_auc.is_some()
                    && m.insertion_auc.is_some()
                    && m.proportion.is_some()
            })
        });
    check(
        complete,
        format!(
            "{} images x {} methods through both adapters, report valid",
            report.records.len(),
            report.summary.len()
        ),
    )
}

fn main() {
    let net = toynet::load().unwrap();
    let criteria: Vec<Criterion<'_>> = vec![
        ("exact-vs-sampled agreement", Box::new(|| exact_vs_sampled(&net))),
        ("axiom suite", Box::new(|| axioms(&net))),
        ("formulation equivalence", Box::new(formulation_equivalence)),
        ("telescoping identity", Box::new(|| telescoping(&net))),
        ("deterministic parallelism", Box::new(|| determinism(&net))),
        ("metric unit checks", Box::new(|| metric_units(&net))),
        ("ordering quality on synthetic data", Box::new(|| ordering_quality(&net))),
        ("full protocol via oracle adapter", Box::new(adapter_protocol)),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
