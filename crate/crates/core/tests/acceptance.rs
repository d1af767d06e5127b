use std::fs;
use std::io::Write;
use std::path::Path;

use gfcnn::arch::{ArchSpec, Model, REFERENCE_ARCHS};
use gfcnn::cli::{cmd_convert, cmd_params, cmd_synth, cmd_train, ConvertArgs, SchemaArgs, SynthArgs, TrainArgs};
use gfcnn::datapipe::{build_dataset, gen_synthetic, window_to_pixels, NormStats, Run, SeriesSet, SynthConfig, WindowedDataset};
use gfcnn::eval::{confusion, fdr, EvalReport};
use gfcnn::exec::Execution;
use gfcnn::gradcheck::{check_params, grad_check, Coord};
use gfcnn::layers::Mode;
use gfcnn::seed;
use gfcnn::tensor::{ParamId, Tensor};
use gfcnn::train::{batch_loss, dataset_tensors, predict_classes, train, HyperParams};
use rand::RngExt;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} criterion {id} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
}

#[test]
fn criterion_1_parameter_counts() {
    let expected = [
        (347_880, 358_890),
        (644_720, 657_730),
        (1_292_336, 1_305_346),
        (1_653_744, 1_666_754),
        (2_518_192, 2_531_202),
        (3_331_312, 3_344_322),
    ];
    let mut mismatches = Vec::new();
    for (k, ((cnn, gf), (e_cnn, e_gf))) in REFERENCE_ARCHS.iter().zip(expected).enumerate() {
        for (arch, want) in [(cnn, e_cnn), (gf, e_gf)] {
            let out = cmd_params(arch, (50, 20), 20).unwrap();
            let total: usize = out
                .lines()
                .find_map(|l| l.strip_prefix("total "))
                .unwrap()
                .replace(',', "")
                .parse()
                .unwrap();
            if total != want {
                mismatches.push(format!("model #{} {arch}: {total} != {want}", k + 1));
            }
        }
    }
    let ok = mismatches.is_empty();
    report(1, "parameter counts", ok, &format!("12 architectures, mismatches {mismatches:?}"));
    assert!(ok);
}

fn random_tensor(shape: &[usize], rng: &mut seed::SeedRng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = seed::rng(21);
    let mut out = Vec::new();
    let all = |params: &[Tensor<f64>]| -> Vec<Coord> {
        params.iter().enumerate().flat_map(|(p, t)| (0..t.len()).map(move |i| (ParamId(p), i))).collect()
    };
    let weights = random_tensor(&[7], &mut rng);

    let mut p = vec![random_tensor(&[2, 6, 5], &mut rng), random_tensor(&[3, 2, 3, 3], &mut rng), random_tensor(&[3], &mut rng)];
    let coords = all(&p);
    let w = Tensor::new([3 * 4 * 3], (0..36).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let r = check_params(
        &mut p,
        |t| {
            let x = t.param(ParamId(0))?;
            let k = t.param(ParamId(1))?;
            let b = t.param(ParamId(2))?;
            let y = t.conv2d(x, k, b)?;
            let f = t.flatten(y)?;
            let c = t.constant(w.clone());
            let m = t.mul(f, c)?;
            t.sum(m)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    out.push(("conv2d", r.max_rel_error));

    let mut p = vec![random_tensor(&[2, 5, 7], &mut rng)];
    let coords = all(&p);
    let w = Tensor::new([2 * 2 * 3], (0..12).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
    let r = check_params(
        &mut p,
        |t| {
            let x = t.param(ParamId(0))?;
            let y = t.max_pool(x, 2, 2)?;
            let f = t.flatten(y)?;
            let c = t.constant(w.clone());
            let m = t.mul(f, c)?;
            t.sum(m)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    out.push(("max_pool", r.max_rel_error));

    let mut p = vec![random_tensor(&[1, 4], &mut rng), random_tensor(&[4, 7], &mut rng), random_tensor(&[3], &mut rng)];
    let coords = all(&p);
    let r = check_params(
        &mut p,
        |t| {
            let x = t.param(ParamId(0))?;
            let m = t.param(ParamId(1))?;
            let y = t.matmul(x, m)?;
            let y = t.reshape(y, &[7])?;
            let y = t.relu(y)?;
            let g = t.param(ParamId(2))?;
            let g = t.relu(g)?;
            let h = t.concat(&[g, y])?;
            let c = t.constant(Tensor::new([10], weights.data().iter().chain(&[0.5, -1.0, 2.0]).copied().collect()).unwrap());
            let h = t.mul(h, c)?;
            t.sum(h)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    out.push(("matmul/relu/concat", r.max_rel_error));

    let mut p = vec![random_tensor(&[6], &mut rng)];
    let coords = all(&p);
    let r = check_params(&mut p, |t| {
            let z = t.param(ParamId(0))?;
            Ok(t.softmax_cross_entropy(z, 4)?.0)
        }, &coords, 1e-5).unwrap();
    out.push(("softmax cross-entropy", r.max_rel_error));
    out
}

#[test]
fn criterion_2_gradient_check() {
    let arch = ArchSpec::parse(REFERENCE_ARCHS[0].1, (50, 20), 20).unwrap();
    let mut model = Model::<f64>::build(&arch, 5).unwrap();
    let mut rng = seed::rng(6);
    let image = Tensor::new([50, 20], (0..1000).map(|_| rng.random::<f64>()).collect()).unwrap();
    let r = grad_check(&mut model, &image, 7, 1e-5, 240, 9).unwrap();
    let model_ok = r.checked >= 200 && r.max_rel_error < 1e-4;
    let prims = primitive_errors();
    let prim_ok = prims.iter().all(|&(_, e)| e < 1e-6);
    report(
        2,
        "gradient check",
        model_ok && prim_ok,
        &format!(
            "GF-CNN #1 f64: {} checked, {} kinks skipped, max rel err {:.2e}; primitives {}",
            r.checked,
            r.skipped_kinks,
            r.max_rel_error,
            prims.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    );
    assert!(model_ok && prim_ok);
}

/// Direct-loop forward pass of a `C(k)-P(r,c)[-G(g)]-F(h)*` network.
fn oracle_logits(model: &Model<f64>, image: &Tensor<f64>, pool: (usize, usize), global: bool) -> Vec<f64> {
    let p = model.params();
    let (n, w) = model.arch().input;
    let x = image.data();
    let (kernel, bias) = (p[0].data(), p[1].data());
    let k = p[1].len();
    let (h1, w1) = (n - 2, w - 2);
    let mut conv = vec![0.0; k * h1 * w1];
    for c in 0..k {
        for i in 0..h1 {
            for j in 0..w1 {
                let mut s = bias[c];
                for di in 0..3 {
                    for dj in 0..3 {
                        s += kernel[c * 9 + di * 3 + dj] * x[(i + di) * w + j + dj];
                    }
                }
                conv[(c * h1 + i) * w1 + j] = s.max(0.0);
            }
        }
    }
    let (h2, w2) = (h1 / pool.0, w1 / pool.1);
    let mut feats = Vec::new();
    for c in 0..k {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut m = f64::NEG_INFINITY;
                for a in 0..pool.0 {
                    for b in 0..pool.1 {
                        m = m.max(conv[(c * h1 + i * pool.0 + a) * w1 + j * pool.1 + b]);
                    }
                }
                feats.push(m);
            }
        }
    }
    let dense = |input: &[f64], wt: &[f64], b: &[f64], relu: bool| -> Vec<f64> {
        (0..b.len())
            .map(|o| {
                let z = b[o] + input.iter().enumerate().map(|(i, v)| v * wt[i * b.len() + o]).sum::<f64>();
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    };
    let mut next = 2;
    if global {
        feats.extend(dense(x, p[2].data(), p[3].data(), true));
        next = 4;
    }
    let hidden = dense(&feats, p[next].data(), p[next + 1].data(), true);
    dense(&hidden, p[next + 2].data(), p[next + 3].data(), false)
}

fn oracle_loss(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut rng = seed::rng(33);
    let mut worst_loss = 0.0f64;
    let mut count_mismatch = 0usize;
    for instance in 0..1000u64 {
        let n = rng.random_range(4..9);
        let w = rng.random_range(4..9);
        let classes = rng.random_range(2..6);
        let pool = (rng.random_range(1..3), rng.random_range(1..3));
        let global = rng.random::<bool>();
        let arch = format!(
            "C({})-P({},{}){}-F({})*",
            rng.random_range(1..4),
            pool.1,
            pool.0,
            if global { format!("-G({})", rng.random_range(1..4)) } else { String::new() },
            rng.random_range(2..6)
        );
        let spec = ArchSpec::parse(&arch, (n, w), classes).unwrap();
        let mut model = Model::<f64>::build(&spec, instance).unwrap();
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        model.set_mode(Mode::Eval);
        let batch_len = rng.random_range(1..6);
        let images: Vec<Tensor<f64>> = (0..batch_len)
            .map(|_| Tensor::new([n, w], (0..n * w).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let labels: Vec<usize> = (0..batch_len).map(|_| rng.random_range(0..classes)).collect();
        let batch: Vec<_> = images.iter().zip(labels.iter().copied()).collect();
        let got = batch_loss(&model, &batch).unwrap();
        let want = images.iter().zip(&labels).map(|(im, &l)| oracle_loss(&oracle_logits(&model, im, pool, global), l)).sum::<f64>() / batch_len as f64;
        worst_loss = worst_loss.max((got - want).abs());

        let total = rng.random_range(1..60);
        let truth: Vec<usize> = (0..total).map(|_| rng.random_range(0..classes)).collect();
        let preds: Vec<usize> = (0..total).map(|_| rng.random_range(0..classes)).collect();
        let cm = confusion(&preds, &truth, classes).unwrap();
        for a in 0..classes {
            for b in 0..classes {
                let tally = truth.iter().zip(&preds).filter(|&(&t, &p)| t == a && p == b).count() as u64;
                count_mismatch += (cm.get(a, b) != tally) as usize;
            }
            let in_class = truth.iter().filter(|&&t| t == a).count();
            let hits = truth.iter().zip(&preds).filter(|&(&t, &p)| t == a && p == a).count();
            let want = (in_class > 0).then(|| hits as f64 / in_class as f64);
            count_mismatch += (fdr(&cm, a) != want) as usize;
        }
    }
    let ok = worst_loss <= 1e-9 && count_mismatch == 0;
    report(3, "oracle equivalence", ok, &format!("1000 instances, max loss diff {worst_loss:.2e}, count/fdr mismatches {count_mismatch}"));
    assert!(ok);
}

fn convert_count(dir: &Path, runs: usize, samples: usize, classes: usize) -> usize {
    let csv = dir.join(format!("s{samples}.csv"));
    let synth = SynthArgs {
        out: csv.clone(),
        variables: 3,
        classes,
        runs,
        samples,
        coupling: 1.0,
        noise: 1.0,
        white: 0.1,
        ar: 0.5,
        pairs: 1,
        no_shift: false,
        seed: 1,
    };
    cmd_synth(&synth).unwrap();
    let out = dir.join(format!("s{samples}.gfim"));
    let args = ConvertArgs {
        csv,
        schema: SchemaArgs::default(),
        stats: None,
        stats_out: Some(dir.join(format!("s{samples}.stats"))),
        window: 20,
        classes: Some(classes),
        out: out.clone(),
    };
    cmd_convert(&args, Execution::Parallel).unwrap();
    WindowedDataset::load(&out).unwrap().len()
}

#[test]
fn criterion_4_pipeline_regime() {
    let dir = tempfile::tempdir().unwrap();
    let train = convert_count(dir.path(), 40, 480, 20);
    let test = convert_count(dir.path(), 7, 800, 20);
    let ok = train == 19_200 && test == 5_600;
    report(4, "pipeline regime", ok, &format!("480x40x20 -> {train} images, 800x7x20 -> {test} images"));
    assert!(ok);
}

#[test]
fn criterion_5_pixel_properties() {
    let mut rng = seed::rng(55);
    let mut failures = Vec::new();
    for case in 0..10_000 {
        let len = rng.random_range(1..200);
        let base: f64 = rng.random_range(-1e6..1e6);
        let values: Vec<f64> = match case % 5 {
            0 => vec![base; len],
            1 => (0..len).map(|_| -rng.random_range(0.0..1e3)).collect(),
            2 => (0..len).map(|_| base + rng.random_range(0.0..1.0) * 1e-9).collect(),
            3 => (0..len).map(|_| rng.random_range(-1.0..1.0) * 1e-300).collect(),
            _ => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0).collect(),
        };
        let px = window_to_pixels(&values);
        let constant = values.iter().all(|&v| v == values[0]);
        let lo = *px.iter().min().unwrap();
        let hi = *px.iter().max().unwrap();
        let range_ok = if constant { hi == 0 } else { lo == 0 && hi == 255 };
        let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(-10.0..10.0));
        let affine = if case % 5 == 4 || case % 5 == 1 {
            window_to_pixels(&values.iter().map(|v| a * v + b).collect::<Vec<_>>()) == px
        } else {
            window_to_pixels(&values.iter().map(|v| 4.0 * v).collect::<Vec<_>>()) == px
        };
        if px.len() != len || !range_ok || !affine {
            failures.push(case);
        }
    }
    let ok = failures.is_empty();
    report(5, "pixel properties", ok, &format!("10000 windows, failures {}", failures.len()));
    assert!(ok, "failing cases {failures:?}");
}

/// Long-range-coupling set with no mean shifts: each class is one long run
/// whose first 500 windows train and last 125 test.
fn coupling_sets(data_seed: u64) -> (WindowedDataset, WindowedDataset) {
    let (w, train_windows, test_windows) = (20, 500, 125);
    let cfg = SynthConfig {
        n: 6,
        classes: 4,
        runs_per_class: 1,
        samples_per_run: (train_windows + test_windows) * w,
        coupling: 1.0,
        noise: 1.0,
        white: 0.0,
        ar: 0.95,
        pairs: 3,
        shift: false,
    };
    let series = gen_synthetic(&cfg, data_seed).unwrap();
    let cut = train_windows * w * cfg.n;
    let split = |range: std::ops::Range<usize>| {
        let runs = series.runs().iter().map(|r| Run { samples: r.samples[range.clone()].to_vec(), ..r.clone() }).collect();
        SeriesSet::new(series.variable_names.clone(), runs).unwrap()
    };
    let len = cfg.samples_per_run * cfg.n;
    let (tr, te) = (split(0..cut), split(cut..len));
    let stats = NormStats::compute(&tr).unwrap();
    (
        build_dataset(&tr, &stats, w, cfg.classes, Execution::Parallel).unwrap(),
        build_dataset(&te, &stats, w, cfg.classes, Execution::Parallel).unwrap(),
    )
}

#[test]
fn criterion_6_global_feature_advantage() {
    let (tr, te) = coupling_sets(2026);
    assert_eq!((tr.len(), te.len()), (2000, 500));
    let test_inputs = dataset_tensors::<f32>(&te).unwrap();
    let (cnn, gf) = REFERENCE_ARCHS[0];
    let mut means = Vec::new();
    for arch in [cnn, gf] {
        let spec = ArchSpec::parse(arch, (tr.n, tr.w), tr.classes).unwrap();
        let mut scores = Vec::new();
        for s in 0..5 {
            let hp = HyperParams { epochs: 10, seed: s, ..HyperParams::default() };
            let (model, _) = train(Model::<f32>::build(&spec, s).unwrap(), &tr, &hp, None, Execution::Parallel).unwrap();
            let preds = predict_classes(&model, &test_inputs, Execution::Parallel).unwrap();
            scores.push(EvalReport::new(&preds, &te.labels(), te.classes, Vec::new()).unwrap().macro_fdr);
        }
        let _ = writeln!(std::io::stdout(), "  {arch}: macro-FDR {scores:.4?}");
        means.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    let gap = means[1] - means[0];
    let ok = gap >= 0.03;
    report(6, "global-feature advantage", ok, &format!("CNN {:.4}, GF-CNN {:.4}, gap {gap:+.4} (need >= 0.03)", means[0], means[1]));
    assert!(ok);
}

#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let synth = SynthArgs {
        out: csv.clone(),
        variables: 8,
        classes: 3,
        runs: 2,
        samples: 200,
        coupling: 1.0,
        noise: 1.0,
        white: 0.1,
        ar: 0.5,
        pairs: 1,
        no_shift: false,
        seed: 4,
    };
    cmd_synth(&synth).unwrap();
    let data = dir.path().join("d.gfim");
    cmd_convert(
        &ConvertArgs {
            csv,
            schema: SchemaArgs::default(),
            stats: None,
            stats_out: Some(dir.path().join("d.stats")),
            window: 10,
            classes: None,
            out: data.clone(),
        },
        Execution::Parallel,
    )
    .unwrap();
    let run = |tag: &str| {
        let mut args = TrainArgs::new(&data, "C(4)-P(2)-G(5)-F(16)*", dir.path().join(format!("{tag}.gfm")));
        args.epochs = 3;
        args.batch_size = 16;
        args.seed = 11;
        args.history = Some(dir.path().join(format!("{tag}.hist")));
        cmd_train(&args, Execution::Parallel).unwrap();
        ["gfm", "gfm.bin", "hist"].map(|ext| fs::read(dir.path().join(format!("{tag}.{ext}"))).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let manifest_a = String::from_utf8(a[0].clone()).unwrap().replace("a.gfm.bin", "x");
    let manifest_b = String::from_utf8(b[0].clone()).unwrap().replace("b.gfm.bin", "x");
    let ok = manifest_a == manifest_b && a[1] == b[1] && a[2] == b[2];
    report(7, "determinism", ok, &format!("model blob {} bytes, history {} bytes, identical {ok}", a[1].len(), a[2].len()));
    assert!(ok);
}
