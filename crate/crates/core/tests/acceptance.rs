//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion. Exits nonzero
//! if any attainable criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use provnet_core::ingest::{parse_frame_index, select_pframe_triplets, PictType, Split};
use provnet_core::metrics::{binary_auc, format_cell, ConfusionMatrix, EvalReport};
use provnet_core::models::{FreezeScope, MultiFrameNet, StreamConfig, StreamNet};
use provnet_core::pipeline::{load_split_data, run_ingest, IngestConfig};
use provnet_core::preprocess::{gaussian_residual, hpf_s5a, patch_grid, FramePlane, PatchKind, S5A_KERNEL, S5A_SCALE};
use provnet_core::synth::{generate_dataset, GenConfig};
use provnet_core::train::{train_multiframe, train_stream, transfer_retrain, TrainConfig};
use provnet_engine::layers::{Conv2d, Linear, Pool2d};
use provnet_engine::{grad_check, grad_check_cross_entropy, softmax, Layer, LayerSpec, Mode, PoolKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn random_tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn engine_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = [0.0f64; 4];
    const CASES: usize = 50;

    for case in 0..CASES {
        let (c, o, k) = (rng.gen_range(1..4), rng.gen_range(1..5), [1, 3, 5][case % 3]);
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2));
        let (h, w) = (rng.gen_range(k..=14), rng.gen_range(k..=14));
        let spec = LayerSpec::Conv2d {
            in_channels: c,
            out_channels: o,
            kernel: k,
            stride,
            padding: pad,
        };
        let Layer::Conv2d::<f64>(mut conv) = spec.build("c", &mut rng) else { unreachable!() };
        conv.bias.value = random_tensor([1, o, 1, 1], &mut rng);
        let x = random_tensor([2, c, h, w], &mut rng);
        let y = Conv2d::forward(&mut conv, &x).unwrap();
        let [_, _, oh, ow] = y.dims();
        for n in 0..2 {
            for oc in 0..o {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias.value.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (yy * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at(n, ic, iy as usize, ix as usize) * conv.weight.value.at(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                        worst[0] = worst[0].max(rel_err(y.at(n, oc, yy, xx), acc));
                    }
                }
            }
        }
    }

    for case in 0..CASES {
        let kind = if case % 2 == 0 { PoolKind::Max } else { PoolKind::Avg };
        let dims = [rng.gen_range(1..3), rng.gen_range(1..4), 2 * rng.gen_range(1..8), 2 * rng.gen_range(1..8)];
        let x = random_tensor(dims, &mut rng);
        let Layer::Pool::<f64>(mut pool) = (LayerSpec::Pool { kind, window: 2 }).build("p", &mut rng) else {
            unreachable!()
        };
        let y = Pool2d::forward(&mut pool, &x).unwrap();
        for n in 0..dims[0] {
            for ch in 0..dims[1] {
                for yy in 0..dims[2] / 2 {
                    for xx in 0..dims[3] / 2 {
                        let v = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(a, b)| x.at(n, ch, 2 * yy + a, 2 * xx + b));
                        let expected = match kind {
                            PoolKind::Max => v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                            PoolKind::Avg => v.iter().sum::<f64>() / 4.0,
                        };
                        worst[1] = worst[1].max(rel_err(y.at(n, ch, yy, xx), expected));
                    }
                }
            }
        }
    }

    for _ in 0..CASES {
        let (n, fi, fo) = (rng.gen_range(1..6), rng.gen_range(1..20), rng.gen_range(1..10));
        let Layer::Linear::<f64>(mut lin) = (LayerSpec::Linear {
            in_features: fi,
            out_features: fo,
        })
        .build("fc", &mut rng) else {
            unreachable!()
        };
        lin.bias.value = random_tensor([1, fo, 1, 1], &mut rng);
        let x = random_tensor([n, fi, 1, 1], &mut rng);
        let y = Linear::forward(&mut lin, &x).unwrap();
        for r in 0..n {
            for o in 0..fo {
                let mut acc = lin.bias.value.data()[o];
                for i in 0..fi {
                    acc += x.data()[r * fi + i] * lin.weight.value.data()[o * fi + i];
                }
                worst[2] = worst[2].max(rel_err(y.data()[r * fo + o], acc));
            }
        }
    }

    for _ in 0..CASES {
        let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..8));
        let logits: Tensor<f64> = Tensor::from_fn([n, c, 1, 1], |_, _, _, _| rng.gen_range(-5.0..5.0));
        let p = softmax(&logits);
        for r in 0..n {
            let row = &logits.data()[r * c..(r + 1) * c];
            for i in 0..c {
                let expected = 1.0 / row.iter().map(|x| (x - row[i]).exp()).sum::<f64>();
                worst[3] = worst[3].max(rel_err(p.data()[r * c + i], expected));
            }
        }
    }

    let grads: Vec<(LayerSpec, [usize; 4], f64)> = vec![
        (LayerSpec::conv_same(2, 3, 3), [1, 2, 6, 6], 1e-3),
        (LayerSpec::conv_same(1, 2, 5), [2, 1, 6, 6], 1e-3),
        (LayerSpec::BatchNorm2d { channels: 3 }, [2, 3, 4, 4], 1e-3),
        (LayerSpec::Relu, [2, 3, 4, 4], 1e-3),
        (LayerSpec::Pool { kind: PoolKind::Max, window: 2 }, [2, 2, 6, 6], 1e-3),
        (LayerSpec::Pool { kind: PoolKind::Avg, window: 2 }, [2, 2, 6, 6], 1e-3),
        (LayerSpec::GlobalAvgPool, [2, 3, 4, 4], 1e-3),
        (LayerSpec::Flatten, [2, 3, 2, 2], 1e-3),
        (LayerSpec::Linear { in_features: 5, out_features: 4 }, [3, 5, 1, 1], 1e-6),
    ];
    let mut grad_ok = true;
    let mut grad_worst = 0.0f64;
    for (spec, shape, tol) in &grads {
        let r = grad_check(spec, *shape, 21).unwrap();
        grad_ok &= r.max_relative_error <= *tol;
        grad_worst = grad_worst.max(r.max_relative_error);
    }
    let ce = grad_check_cross_entropy(4, 3, 22).unwrap();
    grad_ok &= ce.max_relative_error <= 1e-3;

    let elapsed = start.elapsed();
    let forward_ok = worst.iter().all(|&w| w <= 1e-10);
    outcome(
        forward_ok && grad_ok && elapsed < Duration::from_secs(120),
        format!(
            "conv/pool/linear/softmax worst rel err {:.1e}/{:.1e}/{:.1e}/{:.1e} over {CASES} cases each; \
             grad_check worst {grad_worst:.1e} across {} layers + loss; {:.1?}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            grads.len(),
            elapsed
        ),
    )
}

fn preprocessing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut ok = true;
    for c in [0.0, 1.0, 128.0, 255.0, -37.25, 1e6 / 3.0] {
        let p = FramePlane::filled(23, 17, c);
        ok &= hpf_s5a(&p).unwrap().data.iter().all(|&v| v == 0.0);
        ok &= gaussian_residual(&p).unwrap().data.iter().all(|&v| v == 0.0);
    }
    let const_ok = ok;

    let mut lin_worst = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(5..40), rng.gen_range(5..40));
        let a = FramePlane::from_fn(w, h, |_, _| rng.gen_range(0.0..255.0));
        let b = FramePlane::from_fn(w, h, |_, _| rng.gen_range(0.0..255.0));
        let (s, t) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix = FramePlane::from_fn(w, h, |x, y| s * a.at(x, y) + t * b.at(x, y));
        for f in [hpf_s5a, gaussian_residual] {
            let (fa, fb, fm) = (f(&a).unwrap(), f(&b).unwrap(), f(&mix).unwrap());
            for i in 0..w * h {
                let e = s * fa.data[i] + t * fb.data[i];
                lin_worst = lin_worst.max((fm.data[i] - e).abs() / e.abs().max(1.0));
            }
        }
    }

    let mut impulse = FramePlane::filled(9, 9, 0.0);
    impulse.data[40] = 1.0;
    let r = hpf_s5a(&impulse).unwrap();
    let mut impulse_ok = true;
    for y in 0..9 {
        for x in 0..9 {
            let k = if (2..7).contains(&x) && (2..7).contains(&y) {
                S5A_KERNEL[y - 2][x - 2] * S5A_SCALE
            } else {
                0.0
            };
            impulse_ok &= r.at(x, y) == k;
        }
    }

    let mut crop_ok = true;
    let mut sweeps = 0usize;
    for w in 255..=1921 {
        for h in 255..=1921 {
            crop_ok &= patch_grid(w, h, 256).len() == (w / 256) * (h / 256);
            sweeps += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        const_ok && lin_worst <= 1e-9 && impulse_ok && crop_ok && elapsed < Duration::from_secs(60),
        format!(
            "constants→0 {const_ok}; linearity worst {lin_worst:.1e}; impulse=kernel {impulse_ok}; \
             crop counts over {sweeps} sizes {crop_ok}; {elapsed:.1?}"
        ),
    )
}

fn shape_contract() -> Outcome {
    let start = Instant::now();
    let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut agree = true;
    let mut widths = Vec::new();
    let mut nets = Vec::new();
    for cfg in [StreamConfig::indnet(&names), StreamConfig::prednet(&names)] {
        let mut net = StreamNet::new(cfg.clone(), 1).unwrap();
        let symbolic = net.shape_trace(1).unwrap();
        let x = Tensor::from_fn(cfg.input_dims(1), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let (_, actual) = net.forward_trace(&x, Mode::Eval).unwrap();
        agree &= symbolic == actual;
        let feature = symbolic
            .iter()
            .find(|(n, _)| n == "flatten" || n == "gap")
            .map(|(_, d)| d[1] * d[2] * d[3])
            .unwrap();
        widths.push(feature);
        nets.push(net);
    }
    let pred = nets.pop().unwrap();
    let ind = nets.pop().unwrap();
    let multi = MultiFrameNet::new(ind, pred, &[512], 2).unwrap();
    let elapsed = start.elapsed();
    let pass = agree
        && widths == [4096, 256]
        && multi.concat_width() == 4352
        && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "Ind-Net flatten {}, Pred-Net feature {}, concat {}; symbolic == actual at every layer: {agree}; {elapsed:.1?}",
            widths[0],
            widths[1],
            multi.concat_width()
        ),
    )
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let labels: Vec<usize> = (0..600).map(|_| rng.gen_range(0..3)).collect();
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|_| {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
        .collect();
    let names: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
    let r = EvalReport::from_scores(&names, &probs, &labels, None).unwrap();
    let class_counts: Vec<usize> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let rows_ok = r.confusion.row_sums() == class_counts;
    let acc_ok = (r.accuracy - r.confusion.trace() as f64 / r.confusion.total() as f64).abs() < 1e-15;

    let perfect = binary_auc(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[false, false, false, true, true, true]);
    let n = 3000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let random_auc = binary_auc(&scores, &pos).unwrap();

    let table = ConfusionMatrix {
        counts: vec![vec![1238, 31, 15], vec![20, 1161, 31], vec![32, 49, 1172]],
    };
    let text = table.render(&["YT".to_string(), "WA".to_string(), "SC".to_string()]);
    let cell_ok = format_cell(1238, 1284) == "1238 (96.41%)" && text.contains("1238 (96.41%)");
    let pass = rows_ok && acc_ok && perfect == Some(1.0) && (random_auc - 0.5).abs() <= 0.05 && cell_ok;
    outcome(
        pass,
        format!(
            "row sums {rows_ok}; accuracy=trace/total {acc_ok}; separated AUC {:?}; random AUC {random_auc:.4} at n={n}; \
             cell \"1238 (96.41%)\" {cell_ok}",
            perfect
        ),
    )
}

fn ingest_protocol(root: &std::path::Path) -> Outcome {
    let data = root.join("ingest");
    let cfg = GenConfig {
        videos_per_class: 8,
        gops_per_video: 3,
        p_frames_per_gop: 7,
        width: 64,
        height: 64,
        seed: 7,
        ..GenConfig::default()
    };
    generate_dataset(&cfg, &data).unwrap();
    let ingest_cfg = IngestConfig {
        patch_size: 32,
        seed: 3,
        ..IngestConfig::default()
    };
    let hashes: Vec<String> = (0..3)
        .map(|k| {
            run_ingest(
                &data.join("sidecar.csv"),
                &data.join("labels.csv"),
                &root.join(format!("ingest_out{k}")),
                &ingest_cfg,
            )
            .unwrap()
            .manifest
            .sha256()
        })
        .collect();
    let m = provnet_core::ingest::Manifest::load(&root.join("ingest_out0/manifest.jsonl")).unwrap();
    let sets: Vec<BTreeSet<&str>> = Split::ALL.iter().map(|&s| m.videos(s)).collect();
    let disjoint = sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]);

    // mixed GOP layout with B-frames, including the I P P | I P P P boundary case
    let mut side = String::from("video_id,frame_index,pict_type,width,height,frame_path\n");
    let layout = "IPPIPPPIPBPPPPPPPIPP";
    for (i, t) in layout.chars().enumerate() {
        side += &format!("v,{i},{t},64,64,f{i}.png\n");
    }
    let idx = parse_frame_index(side.as_bytes()).unwrap();
    let mut straddle_free = true;
    let mut triplets = 0;
    for stride in 1..=3 {
        for t in select_pframe_triplets(&idx.records, stride).unwrap() {
            triplets += 1;
            let (lo, hi) = (t.frames[0].frame_index as usize, t.frames[2].frame_index as usize);
            straddle_free &= !layout[lo..=hi].contains('I');
            straddle_free &= t.frames.iter().all(|f| f.pict_type == PictType::P);
        }
    }
    let hashes_equal = hashes.iter().all(|h| *h == hashes[0]);
    outcome(
        disjoint && straddle_free && hashes_equal,
        format!(
            "video sets disjoint {disjoint}; {triplets} triplets, none straddle a GOP {straddle_free}; \
             manifest sha256 equal across 3 runs {hashes_equal} ({}…)",
            &hashes[0][..12]
        ),
    )
}

struct Learned {
    learn: Outcome,
    freeze: Outcome,
}

fn learnability_and_freeze(root: &std::path::Path) -> Learned {
    let start = Instant::now();
    let data = root.join("learn");
    let gen = GenConfig {
        p_frames_per_gop: 3,
        ..GenConfig::default()
    };
    generate_dataset(&gen, &data).unwrap();
    let summary = run_ingest(
        &data.join("sidecar.csv"),
        &data.join("labels.csv"),
        &data.join("store"),
        &IngestConfig {
            patch_size: 64,
            ..IngestConfig::default()
        },
    )
    .unwrap();
    let store = data.join("store");
    let i_total = summary.manifest.entries.iter().filter(|e| e.kind == PatchKind::I).count();
    let names = summary.manifest.class_names().to_vec();
    let i_data = load_split_data(&summary.manifest, &store, PatchKind::I).unwrap();
    let p_data = load_split_data(&summary.manifest, &store, PatchKind::P).unwrap();

    let cfg = TrainConfig {
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let mut ind = StreamNet::new(StreamConfig::indnet_reduced(&names), 1).unwrap();
    let (ind_fit, _) = train_stream(&mut ind, &i_data, &cfg).unwrap();
    let mut pred = StreamNet::new(StreamConfig::prednet_reduced(&names), 2).unwrap();
    let (pred_fit, _) = train_stream(&mut pred, &p_data, &cfg).unwrap();

    // freeze contract on the trained Ind-Net: one transfer epoch, twice
    let one = TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..cfg
    };
    let transfer = |net: &StreamNet| {
        let mut net = net.clone();
        let head_before = net.head_hash();
        let out = transfer_retrain(&mut net, FreezeScope::ConvBlocks, &names, &i_data, &one).unwrap();
        let ck = out.fit.checkpoint(String::from("transfer"), one.seed);
        let mut ck = ck;
        ck.tensors = net.export_state();
        (out, head_before != net.head_hash(), ck.to_bytes())
    };
    let (t1, head_moved, bytes1) = transfer(&ind);
    let (_, _, bytes2) = transfer(&ind);
    let backbone_same = t1.backbone_hash_before == t1.backbone_hash_after;
    let identical = bytes1 == bytes2;
    let freeze = outcome(
        backbone_same && head_moved && identical,
        format!(
            "backbone hash unchanged {backbone_same}; head changed {head_moved}; rerun checkpoint byte-identical {identical} ({} bytes)",
            bytes1.len()
        ),
    );

    let mut multi = MultiFrameNet::new(ind, pred, &[64], 3).unwrap();
    let multi_out = train_multiframe(&mut multi, &i_data, &p_data, &cfg).unwrap();

    let (a_ind, a_pred, a_multi) = (ind_fit.best_val_acc, pred_fit.best_val_acc, multi_out.fit.best_val_acc);
    let elapsed = start.elapsed();
    let pass = a_ind >= 0.85
        && a_pred >= 0.70
        && a_multi >= a_ind.max(a_pred) - 0.02
        && i_total >= 2000
        && elapsed < Duration::from_secs(45 * 60);
    let learn = outcome(
        pass,
        format!(
            "{i_total} I-patches at 64x64; val acc Ind {a_ind:.4} (epoch {}), Pred {a_pred:.4} (epoch {}), \
             Multi {a_multi:.4} (epoch {}); {elapsed:.1?}",
            ind_fit.best_epoch, pred_fit.best_epoch, multi_out.fit.best_epoch
        ),
    );
    Learned { learn, freeze }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut lines: Vec<(String, Option<Outcome>)> = Vec::new();
    lines.push((
        "published-number reproduction".into(),
        None,
    ));
    lines.push(("engine oracle suite".into(), Some(engine_oracles())));
    lines.push(("preprocessing suite".into(), Some(preprocessing())));
    lines.push(("shape contract".into(), Some(shape_contract())));
    let learned = learnability_and_freeze(tmp.path());
    lines.push(("freeze contract".into(), Some(learned.freeze)));
    lines.push(("end-to-end learnability".into(), Some(learned.learn)));
    lines.push(("metrics correctness".into(), Some(metrics())));
    lines.push(("ingest protocol".into(), Some(ingest_protocol(tmp.path()))));

    let mut failed = 0;
    println!();
    for (name, o) in &lines {
        match o {
            None => println!(
                "[FAIL] {name}: out of reach (needs the original multi-platform video corpus and GPU-scale training); \
                 covered by the substituted suites below"
            ),
            Some(o) => {
                println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                if !o.pass {
                    failed += 1;
                }
            }
        }
    }
    println!();
    if failed > 0 {
        println!("{failed} attainable criteria failed");
        std::process::exit(1);
    }
}
