//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero if any criterion fails or overruns its time budget.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use shiftprobe::config::{DataSource, EncoderKind, ExperimentConfig};
use shiftprobe::encoders::{Embedding, EmbeddingSet, Encoder, Origin, PsdEncoder};
use shiftprobe::metrics::{auc, mae, summarize_condition, EvaluationRow, ScoredRecording};
use shiftprobe::par;
use shiftprobe::pipeline::{encode_recordings, run, shift_and_preprocess};
use shiftprobe::shifts::{
    apply_broadband_noise, apply_impedance_noise, apply_quantization, NoiseKey, ShiftSpec, QUANTIZATION_DIGITS,
};
use shiftprobe::signal::PreprocessConfig;
use shiftprobe::synth::{synth_generate, SyntheticSpec};
use shiftprobe::topology::{
    build_graph, delaunay_exact_2d, gabriel_graph, integrity_score, quality, GraphMethod, IntegrityConfig, Vertex,
};
use shiftprobe::training::{
    loss_smooth_l1, AdamConfig, Architecture, Layer, Masks, Network, OutputMap, Regime, SgdCyclicConfig, Task, Tensor,
};
use shiftprobe::uncertainty::{
    aggregate_recording, exact_dropout_moments, mc_mean, mc_var, mcd_predict, mcd_prefix, McdConfig, McdPredictionSet,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn vertex(origin: Origin, i: usize) -> Vertex {
    Vertex {
        origin,
        recording_id: format!("r{i}"),
        epoch_index: 0,
    }
}

fn criterion_1() -> Check {
    let mut r = rng(1);
    let pts = Array2::from_shape_fn((40, 3), |_| normal(&mut r));
    let homo = build_graph(
        &pts,
        (0..40).map(|i| vertex(Origin::Z, i)).collect(),
        GraphMethod::Gabriel,
        0,
    )
    .map_err(e2s)?;
    let q0 = quality(&homo).map_err(e2s)?;
    ensure(q0 == 0.0, format!("all-Z graph gave q = {q0}"))?;

    // Collinear points: the Gabriel graph is the path, so alternating tags
    // make every edge heterogeneous.
    let line = Array2::from_shape_fn((9, 2), |(i, j)| if j == 0 { i as f64 * 1.5 } else { 0.0 });
    let tags = (0..9)
        .map(|i| vertex(if i % 2 == 0 { Origin::Z } else { Origin::ZShifted }, i))
        .collect();
    let hetero = build_graph(&line, tags, GraphMethod::Gabriel, 0).map_err(e2s)?;
    let q1 = quality(&hetero).map_err(e2s)?;
    ensure(q1 == 1.0, format!("alternating path gave q = {q1}"))?;
    Ok(format!("q = {q0} and q = {q1} on {} edges", hetero.edges.len()))
}

fn gaussian_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
    let mut r = rng(seed);
    let mut set = EmbeddingSet::new("gauss", d);
    for i in 0..n {
        set.push(Embedding {
            vector: (0..d).map(|_| normal(&mut r)).collect(),
            origin: Origin::Z,
            recording_id: format!("r{i:04}"),
            epoch_index: 0,
        })
        .expect("finite");
    }
    set
}

fn criterion_2() -> Check {
    let mut parts = Vec::new();
    for d in [2, 10] {
        let mut qs = Vec::new();
        for seed in 0..5 {
            let set = gaussian_set(400, d, 100 + seed);
            let cfg = IntegrityConfig {
                seed,
                ..IntegrityConfig::default()
            };
            let r = integrity_score(&set, &set, &ShiftSpec::NoShift, &cfg).map_err(e2s)?;
            ensure(
                r.n_z == 200 && r.n_zt == 200,
                format!("halves of {} and {}", r.n_z, r.n_zt),
            )?;
            qs.push(r.q);
        }
        let mean = qs.iter().sum::<f64>() / qs.len() as f64;
        ensure(
            (0.4..=0.6).contains(&mean),
            format!("d = {d}: mean q {mean:.4} outside [0.4, 0.6]"),
        )?;
        parts.push(format!("d={d} mean q {mean:.4}"));
    }
    Ok(parts.join(", "))
}

fn criterion_3() -> Check {
    let pre = PreprocessConfig::default();
    let sigmas = [0.001, 0.01, 0.1];
    let mut lines = Vec::new();
    for seed in 0..5 {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let raw = synth_generate(&spec).map_err(e2s)?;
        let clean = shift_and_preprocess(&raw, &ShiftSpec::NoShift, &pre).map_err(e2s)?;
        let epoch = &clean[0].epochs[0].data;
        let psd = PsdEncoder::standard(pre.target_fs, epoch.ncols()).map_err(e2s)?;
        let z = encode_recordings(&psd as &dyn Encoder, &clean, Origin::Z).map_err(e2s)?;
        let cfg = IntegrityConfig {
            seed,
            ..IntegrityConfig::default()
        };
        let mut qs = Vec::new();
        for sigma in sigmas {
            let shift = ShiftSpec::BroadbandNoise { sigma, seed };
            let shifted = shift_and_preprocess(&raw, &shift, &pre).map_err(e2s)?;
            let zt = encode_recordings(&psd as &dyn Encoder, &shifted, Origin::ZShifted).map_err(e2s)?;
            qs.push(integrity_score(&z, &zt, &shift, &cfg).map_err(e2s)?.q);
        }
        let shown = format!("seed {seed}: {:.3}/{:.3}/{:.3}", qs[0], qs[1], qs[2]);
        ensure(
            qs.windows(2).all(|w| w[1] <= w[0]),
            format!("not non-increasing, {shown}"),
        )?;
        ensure(qs[2] <= 0.15, format!("q(0.1) above 0.15, {shown}"))?;
        lines.push(shown);
    }
    Ok(lines.join("; "))
}

fn random_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng(seed);
    (0..n).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect()
}

/// Whether some circle through `u` and `v` has no other point strictly
/// inside. Centres lie on the bisector `m + t n`; each other point bounds `t`
/// from one side.
fn empty_circle_exists(p: &[[f64; 2]], u: usize, v: usize) -> bool {
    let (a, b) = (p[u], p[v]);
    let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let n = [-(b[1] - a[1]), b[0] - a[0]];
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (w, pw) in p.iter().enumerate() {
        if w == u || w == v {
            continue;
        }
        let d = [pw[0] - a[0], pw[1] - a[1]];
        let aw = (pw[0] * pw[0] + pw[1] * pw[1]) - (a[0] * a[0] + a[1] * a[1]) - 2.0 * (m[0] * d[0] + m[1] * d[1]);
        let bw = n[0] * d[0] + n[1] * d[1];
        if bw > 0.0 {
            hi = hi.min(aw / (2.0 * bw));
        } else if bw < 0.0 {
            lo = lo.max(aw / (2.0 * bw));
        } else if aw < 0.0 {
            return false;
        }
    }
    lo < hi
}

fn hull_size(p: &[[f64; 2]]) -> usize {
    let mut pts = p.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull.len()
}

fn criterion_4() -> Check {
    let mut checked = 0;
    for seed in 0..20 {
        let p = random_points(50, 400 + seed);
        let del: BTreeSet<(usize, usize)> = delaunay_exact_2d(&p).map_err(e2s)?.into_iter().collect();
        for &(u, v) in &del {
            ensure(
                empty_circle_exists(&p, u, v),
                format!("instance {seed}: edge ({u}, {v}) has no empty circle"),
            )?;
        }
        let missing = (0..50)
            .flat_map(|u| (u + 1..50).map(move |v| (u, v)))
            .filter(|e| !del.contains(e) && empty_circle_exists(&p, e.0, e.1))
            .count();
        ensure(
            missing == 0,
            format!("instance {seed}: {missing} Delaunay edges missing"),
        )?;
        let expected = 3 * 50 - 3 - hull_size(&p);
        ensure(
            del.len() == expected,
            format!("instance {seed}: {} edges, expected {expected}", del.len()),
        )?;
        let arr = Array2::from_shape_fn((50, 2), |(i, j)| p[i][j]);
        let outside = gabriel_graph(&arr).into_iter().filter(|e| !del.contains(e)).count();
        ensure(
            outside == 0,
            format!("instance {seed}: {outside} Gabriel edges outside Delaunay"),
        )?;
        checked += del.len();
    }
    Ok(format!("{checked} Delaunay edges verified, Gabriel subset holds"))
}

fn stacks() -> Vec<(&'static str, Vec<usize>, Vec<Layer>)> {
    let lin = |inputs, outputs| Layer::Linear { inputs, outputs };
    let tconv = Layer::TemporalConv { filters: 2, kernel: 5 };
    let sconv = Layer::SpatialConv {
        outputs: 2,
        filters: 2,
        channels: 3,
    };
    vec![
        ("linear", vec![6], vec![lin(6, 4), lin(4, 1)]),
        ("tanh", vec![6], vec![lin(6, 5), Layer::Tanh, lin(5, 1)]),
        ("relu", vec![6], vec![lin(6, 5), Layer::Relu, lin(5, 1)]),
        (
            "dropout",
            vec![6],
            vec![lin(6, 5), Layer::Tanh, Layer::Dropout { p: 0.3 }, lin(5, 1)],
        ),
        (
            "temporal_conv",
            vec![3, 20],
            vec![tconv.clone(), Layer::Flatten, lin(96, 1)],
        ),
        (
            "spatial_conv",
            vec![3, 20],
            vec![tconv.clone(), sconv.clone(), Layer::Flatten, lin(32, 1)],
        ),
        (
            "square_pool_log",
            vec![3, 20],
            vec![
                tconv,
                sconv,
                Layer::Square,
                Layer::MeanPool { window: 4, stride: 2 },
                Layer::SafeLog { floor: 1e-6 },
                Layer::Flatten,
                lin(14, 1),
            ],
        ),
    ]
}

fn criterion_5() -> Check {
    const H: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, shape, layers) in stacks() {
        let mut layer_worst: f64 = 0.0;
        for seed in 0..10u64 {
            let arch = Architecture::Custom {
                input_shape: shape.clone(),
                layers: layers.clone(),
                head_start: 0,
            };
            let mut net = Network::new(arch, seed).map_err(e2s)?;
            net.output = OutputMap::Affine {
                offset: 0.0,
                scale: 1.0,
            };
            let mut r = rng(500 + seed);
            let n: usize = shape.iter().product();
            let x = Tensor::new(shape.clone(), (0..n).map(|_| normal(&mut r)).collect()).map_err(e2s)?;
            let key = [seed, 7];
            let masks = Masks::Keyed {
                seed: 3,
                key: &key,
                rate: None,
            };
            // A target far below the output keeps smooth L1 in its linear
            // part, so the loss gradient equals the output gradient.
            let mut grads = net.zero_grads();
            net.accumulate_grad(&x, -1e3, 0, masks, &mut grads).map_err(e2s)?;
            for (k, g) in grads.iter().enumerate() {
                for (j, &analytic) in g.iter().enumerate() {
                    let orig = net.params.tensors[k].tensor.data()[j];
                    net.params.tensors[k].tensor.data_mut()[j] = orig + H;
                    let up = net.raw_from(&x, 0, masks).map_err(e2s)?;
                    net.params.tensors[k].tensor.data_mut()[j] = orig - H;
                    let down = net.raw_from(&x, 0, masks).map_err(e2s)?;
                    net.params.tensors[k].tensor.data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * H);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    layer_worst = layer_worst.max(rel);
                }
            }
        }
        ensure(
            layer_worst <= 1e-4,
            format!("{name}: max relative error {layer_worst:.3e}"),
        )?;
        worst = worst.max(layer_worst);
        parts.push(format!("{name} {layer_worst:.1e}"));
    }
    Ok(format!("max relative error {worst:.2e} ({})", parts.join(", ")))
}

fn criterion_6() -> Check {
    let arch = Architecture::Custom {
        input_shape: vec![3],
        layers: vec![Layer::Dropout { p: 0.5 }, Layer::Linear { inputs: 3, outputs: 1 }],
        head_start: 0,
    };
    let net = Network::new(arch, 17).map_err(e2s)?;
    let x = [0.8, -1.3, 2.1];
    let w = net
        .params
        .get("1.linear.weight")
        .ok_or("missing weight")?
        .data()
        .to_vec();
    let b = net.params.get("1.linear.bias").ok_or("missing bias")?.data()[0];

    let outcomes: Vec<f64> = (0u32..8)
        .map(|bits| {
            let z = b
                + (0..3)
                    .filter(|u| bits >> u & 1 == 1)
                    .map(|u| 2.0 * w[u] * x[u])
                    .sum::<f64>();
            net.output.apply(z)
        })
        .collect();
    let mu = outcomes.iter().sum::<f64>() / 8.0;
    let var = outcomes.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / 8.0;
    let mu4 = outcomes.iter().map(|y| (y - mu).powi(4)).sum::<f64>() / 8.0;

    let input = mcd_prefix(&net, Regime::Full, &Tensor::vector(x.to_vec()), 0).map_err(e2s)?;
    let (emu, evar) = exact_dropout_moments(&net, &input, 0.5).map_err(e2s)?;
    ensure(
        (emu - mu).abs() < 1e-12 && (evar - var).abs() < 1e-12,
        "exact enumeration disagrees with the oracle",
    )?;

    let t = 10_000usize;
    let cfg = McdConfig {
        repeats: t,
        rate: 0.5,
        seed: 5,
        ..McdConfig::default()
    };
    let set = mcd_predict(&net, Task::Grade, &input, "probe", &cfg).map_err(e2s)?;
    let (m, v) = (mc_mean(&set), mc_var(&set));
    let se_mean = (var / t as f64).sqrt();
    let se_var = ((mu4 - var * var) / t as f64).sqrt();
    ensure(
        (m - mu).abs() <= 3.0 * se_mean,
        format!("mean {m:.6} vs {mu:.6}, se {se_mean:.2e}"),
    )?;
    ensure(
        (v - var).abs() <= 3.0 * se_var,
        format!("variance {v:.6} vs {var:.6}, se {se_var:.2e}"),
    )?;
    Ok(format!(
        "mean {m:.5} vs {mu:.5} ({:.2} se), variance {v:.5} vs {var:.5} ({:.2} se)",
        (m - mu).abs() / se_mean,
        (v - var).abs() / se_var
    ))
}

fn criterion_7() -> Check {
    let sgd = SgdCyclicConfig::default();
    let adam = AdamConfig::default();
    let cases = [
        ("cyclic lr step 0", sgd.lr_at_step(0), 1e-5),
        ("cyclic lr step 2000", sgd.lr_at_step(2000), 1e-2),
        ("cyclic lr step 6000", sgd.lr_at_step(6000), 5.005e-3),
        ("adam lr epoch 30", adam.lr_at_epoch(30), 5e-4),
        ("smooth L1 e=0.5", loss_smooth_l1(0.5, 0.0, 1.0), 0.125),
        ("smooth L1 e=2", loss_smooth_l1(2.0, 0.0, 1.0), 1.5),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() <= 1e-12, format!("{name}: {got} != {want}"))?;
    }
    Ok(format!("{} golden values", cases.len()))
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice_wins += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

fn criterion_8() -> Check {
    let mut r = rng(8);
    for k in 0..100 {
        let n = r.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..30) as f64 * 0.25).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).map_err(e2s)?;
        let want = brute_auc(&scores, &labels);
        ensure(got == want, format!("instance {k}: auc {got} != pair count {want}"))?;
    }

    let a: Vec<f64> = (0..50).map(|_| normal(&mut r) * 10.0).collect();
    let b: Vec<f64> = (0..50).map(|_| normal(&mut r) * 10.0).collect();
    let c: Vec<f64> = (0..50).map(|_| normal(&mut r) * 10.0).collect();
    let m = |x: &[f64], y: &[f64]| mae(x, y).map_err(e2s);
    ensure(m(&a, &b)? == m(&b, &a)?, "MAE not symmetric")?;
    ensure(m(&a, &a)? == 0.0, "MAE of identical vectors not zero")?;
    ensure(m(&a, &c)? <= m(&a, &b)? + m(&b, &c)? + 1e-12, "MAE triangle inequality")?;
    let perm: Vec<usize> = (0..50).rev().collect();
    let (pa, pb): (Vec<f64>, Vec<f64>) = perm.iter().map(|&i| (a[i], b[i])).unzip();
    ensure(
        (m(&pa, &pb)? - m(&a, &b)?).abs() <= 1e-12,
        "MAE not permutation invariant",
    )?;
    ensure(m(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])? == 3.0, "MAE example")?;

    let epochs: Vec<McdPredictionSet> = (0..4)
        .map(|e| McdPredictionSet {
            input_id: format!("rec#{e}"),
            task: Task::Grade,
            predictions: (0..20).map(|_| r.random::<f64>()).collect(),
        })
        .collect();
    let agg = aggregate_recording("rec", &epochs).map_err(e2s)?;
    let mean_of_means = epochs.iter().map(mc_mean).sum::<f64>() / 4.0;
    ensure(
        (mc_mean(&agg) - mean_of_means).abs() <= 1e-12,
        "aggregate mean differs from mean of epoch means",
    )?;
    let single = aggregate_recording("rec", &epochs[..1]).map_err(e2s)?;
    ensure(
        single.predictions == epochs[0].predictions,
        "single-epoch aggregate changed the predictions",
    )?;

    let recordings: Vec<ScoredRecording> = (0..10)
        .map(|i| ScoredRecording {
            predictions: McdPredictionSet {
                input_id: format!("r{i}"),
                task: Task::Grade,
                predictions: vec![0.05 + 0.09 * i as f64; 20],
            },
            target: if i % 3 == 0 { 1.0 } else { 0.0 },
        })
        .collect();
    let row = summarize_condition("A", &ShiftSpec::NoShift, "det", Task::Grade, &recordings, 0.5).map_err(e2s)?;
    ensure(
        row.auc_sd == Some(0.0),
        format!("deterministic model auc_sd {:?}", row.auc_sd),
    )?;
    ensure(row.sd == 0.0, "deterministic model has non-zero prediction sd")?;
    Ok("100 AUC instances exact; MAE and aggregation identities hold".into())
}

fn pipeline_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        encoders: vec![EncoderKind::NeuralFull, EncoderKind::Psde],
        tasks: vec![Task::Grade],
        shifts: vec![
            ShiftSpec::NoShift,
            ShiftSpec::Quantization { digits: 12 },
            ShiftSpec::BroadbandNoise { sigma: 0.1, seed: 0 },
        ],
        export_graphs: false,
        data: DataSource::Synthetic(SyntheticSpec {
            n_recordings: 100,
            ..SyntheticSpec::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 40;
    cfg.train.patience = 10;
    cfg
}

fn row<'a>(rows: &'a [EvaluationRow], shift: &ShiftSpec, encoder: &str) -> Result<&'a EvaluationRow, String> {
    rows.iter()
        .find(|r| r.dataset == "A" && &r.shift == shift && r.encoder == encoder)
        .ok_or_else(|| format!("no {encoder} row for {shift}"))
}

fn criterion_9(dir: &Path) -> Check {
    let out = par::with_jobs(Some(1), || run(&pipeline_config(), dir)).map_err(e2s)?;
    let clean = row(&out.rows, &ShiftSpec::NoShift, "neural_full")?;
    let noisy = row(
        &out.rows,
        &ShiftSpec::BroadbandNoise { sigma: 0.1, seed: 0 },
        "neural_full",
    )?;
    let (a0, a1) = (clean.auc.unwrap_or(f64::NAN), noisy.auc.unwrap_or(f64::NAN));
    let (p0, p1) = (clean.phi_mean.unwrap_or(f64::NAN), noisy.phi_mean.unwrap_or(f64::NAN));
    ensure(a0 >= 0.9, format!("clean AUC {a0:.3} below 0.9"))?;
    ensure(
        a0 - a1 >= 0.05,
        format!("AUC drop {:.3} below 0.05 ({a0:.3} -> {a1:.3})", a0 - a1),
    )?;
    ensure(p1 < p0, format!("agreement did not decrease ({p0:.3} -> {p1:.3})"))?;
    for encoder in ["neural_full", "psde"] {
        let (c, q) = (
            row(&out.rows, &ShiftSpec::NoShift, encoder)?,
            row(&out.rows, &ShiftSpec::Quantization { digits: 12 }, encoder)?,
        );
        let fmt = |r: &EvaluationRow| {
            [
                r.auc,
                r.auc_sd,
                r.auc_of_mean,
                r.phi_median,
                r.phi_mean,
                r.phi_raw_mean,
                Some(r.sd),
            ]
            .map(|v| format!("{:.3}", v.unwrap_or(f64::NAN)))
        };
        ensure(
            fmt(c) == fmt(q),
            format!("{encoder}: QP(12) row {:?} differs from baseline {:?}", fmt(q), fmt(c)),
        )?;
    }
    Ok(format!(
        "AUC {a0:.3} -> {a1:.3}, agreement {p0:.3} -> {p1:.3}, QP(12) matches baseline"
    ))
}

fn criterion_10() -> Check {
    let fs = 128.0;
    let n = 60 * 128;
    let zeros = Array2::zeros((4, n));
    let diff = apply_impedance_noise(
        &zeros,
        1.0,
        3,
        fs,
        NoiseKey {
            recording_id: "r",
            epoch_index: 0,
        },
    )
    .map_err(e2s)?;
    let cutoff_bins = (1.5 / (fs / n as f64)).ceil() as usize;
    let mut worst: f64 = 1.0;
    for row in diff.rows() {
        let total: f64 = row.iter().map(|v| v * v).sum::<f64>() * n as f64;
        let low: f64 = (0..cutoff_bins)
            .map(|k| {
                let w = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let (re, im) = row.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                    (re + v * (w * t as f64).cos(), im - v * (w * t as f64).sin())
                });
                let p = re * re + im * im;
                if k == 0 {
                    p
                } else {
                    2.0 * p
                }
            })
            .sum();
        worst = worst.min(low / total);
    }
    ensure(
        worst >= 0.95,
        format!("only {:.2}% of impedance noise power below 1.5 Hz", worst * 100.0),
    )?;

    let mut r = rng(10);
    let x = Array2::from_shape_fn((8, 2000), |_| normal(&mut r) * 50.0);
    for &d in QUANTIZATION_DIGITS.iter().chain(&[0, 3]) {
        let once = apply_quantization(&x, d);
        ensure(
            apply_quantization(&once, d) == once,
            format!("quantization at {d} digits not idempotent"),
        )?;
    }

    let sigma = 0.3;
    let bn = apply_broadband_noise(
        &Array2::zeros((1, 100_000)),
        sigma,
        4,
        NoiseKey {
            recording_id: "r",
            epoch_index: 0,
        },
    );
    let mean = bn.mean().unwrap_or(f64::NAN);
    let var = bn.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bn.len() - 1) as f64;
    let rel = (var / (sigma * sigma) - 1.0).abs();
    ensure(
        rel <= 0.05,
        format!("broadband noise variance off by {:.2}%", rel * 100.0),
    )?;
    Ok(format!(
        "{:.2}% of impedance power below 1.5 Hz, quantization idempotent, noise variance within {:.2}%",
        worst * 100.0,
        rel * 100.0
    ))
}

fn criterion_11(first: &Path, second: &Path) -> Check {
    par::with_jobs(Some(2), || run(&pipeline_config(), second)).map_err(e2s)?;
    let a = std::fs::read(first.join("report.jsonl")).map_err(e2s)?;
    let b = std::fs::read(second.join("report.jsonl")).map_err(e2s)?;
    ensure(!a.is_empty() && a == b, "report.jsonl differs between 1 and 2 workers")?;
    Ok(format!(
        "report.jsonl identical ({} bytes) with 1 and 2 workers",
        a.len()
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let (run_a, run_b) = (tmp.path().join("jobs1"), tmp.path().join("jobs2"));
    let criteria: Vec<(u32, Duration, Box<dyn FnOnce() -> Check + '_>)> = vec![
        (1, Duration::from_secs(1), Box::new(criterion_1)),
        (2, Duration::from_secs(30), Box::new(criterion_2)),
        (3, Duration::from_secs(300), Box::new(criterion_3)),
        (4, Duration::from_secs(60), Box::new(criterion_4)),
        (5, Duration::from_secs(60), Box::new(criterion_5)),
        (6, Duration::from_secs(10), Box::new(criterion_6)),
        (7, Duration::from_secs(1), Box::new(criterion_7)),
        (8, Duration::from_secs(10), Box::new(criterion_8)),
        (9, Duration::from_secs(600), Box::new(|| criterion_9(&run_a))),
        (10, Duration::from_secs(30), Box::new(criterion_10)),
        (11, Duration::from_secs(1200), Box::new(|| criterion_11(&run_a, &run_b))),
    ];
    let mut failed = 0;
    for (id, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("criterion {id}: PASS ({elapsed:.1?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id}: FAIL ({elapsed:.1?}) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
