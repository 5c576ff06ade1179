//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use thtd_core::autograd::Graph;
use thtd_core::dataset::Dataset;
use thtd_core::decoder::{build_schedule, Variant};
use thtd_core::encoder::EncoderConfig;
use thtd_core::gradcheck::{model_check, run_all, MODEL_TOLERANCE};
use thtd_core::io::{Checkpoint, DynTensor, TensorBundle};
use thtd_core::metrics::{auc_judd, cc_metric, nss, shuffled_auc, shuffled_negatives, sim, FixationRecord, SaliencyMap};
use thtd_core::model::{Model, ModelConfig};
use thtd_core::objectives::{cc_loss, kl_loss};
use thtd_core::pipeline::{evaluate_dataset, infer_video, resume, train, TrainConfig, TrainOutcome, TrainState};
use thtd_core::synth::{generate, SyntheticSpec};
use thtd_core::Tensor;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fmt_err(e: thtd_core::Error) -> String {
    e.to_string()
}

fn shape_contract() -> Verdict {
    let paper = ModelConfig::paper();
    let enc = &paper.encoder;
    let want = [[96, 16, 56, 96], [192, 16, 28, 48], [384, 16, 14, 24], [768, 16, 7, 12]];
    ensure(enc.stage_shapes() == want, format!("pyramid {:?}", enc.stage_shapes()))?;
    ensure(paper.fused_shape() == [192, 16, 56, 96], format!("fused {:?}", paper.fused_shape()))?;
    let sched = paper.schedule().map_err(fmt_err)?;
    let out = sched.output_shape().map_err(fmt_err)?;
    ensure(out == [1, 1, 224, 384], format!("decoder output {out:?}"))?;
    let time: Vec<usize> = sched.trace().map_err(fmt_err)?.iter().map(|d| d[1]).collect();
    ensure(time == [16, 16, 8, 8, 4, 4, 2, 2, 1, 1], format!("temporal trace {time:?}"))?;

    // The dry run must agree with real forwards; one at T = 32 and C = 96.
    let mid = ModelConfig {
        encoder: EncoderConfig {
            height: 64,
            width: 96,
            window: [8, 4, 12],
            depths: [1, 1, 1, 1],
            ..EncoderConfig::paper()
        },
        variant: Variant::Baseline,
    };
    for cfg in [ModelConfig::toy(), mid] {
        let e = &cfg.encoder;
        let model = Model::<f32>::new(cfg.clone(), 0).map_err(fmt_err)?;
        let clip = Tensor::<f32>::full(vec![e.frames, e.height, e.width, 3], 0.5);
        let mut g = Graph::new();
        let f = model.forward(&mut g, &clip, false).map_err(fmt_err)?;
        for (s, &v) in f.features.levels.iter().enumerate() {
            ensure(g.shape(v)[1..] == e.stage_shapes()[s], format!("level {s}: {:?}", g.shape(v)))?;
        }
        ensure(g.shape(f.fused)[1..] == cfg.fused_shape(), "fused shape disagrees with dry run")?;
        ensure(g.shape(f.saliency) == [e.height, e.width], "saliency shape disagrees with dry run")?;
    }
    Ok("paper pyramid, fused tensor, decoder output and trace exact; real forwards agree".into())
}

fn gradient_suite() -> Verdict {
    let outcomes = run_all(10).map_err(fmt_err)?;
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} ({:.2e})", o.name, o.max_rel_error))
        .collect();
    ensure(failed.is_empty(), format!("failing suites: {}", failed.join(", ")))?;
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let (mut model_worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for seed in 1..4 {
        let r = model_check(seed, 2).map_err(fmt_err)?;
        model_worst = model_worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped;
    }
    ensure(
        model_worst <= MODEL_TOLERANCE,
        format!("toy model max relative error {model_worst:.2e}"),
    )?;
    Ok(format!(
        "{} suites × 10 seeds, worst {worst:.2e}; toy model seeds 1-3 worst {model_worst:.2e} over {checked} probes ({skipped} kink probes screened)",
        outcomes.len(),
    ))
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let s = Tensor::new(vec![8, 8], (0..64).map(|_| rng.random::<f64>()).collect()).map_err(fmt_err)?;
        worst = worst.max((cc_loss(&s, &s).map_err(fmt_err)? + 1.0).abs());
        worst = worst.max(kl_loss(&s, &s).map_err(fmt_err)?.abs());
    }
    ensure(worst <= 1e-9, format!("identity error {worst:.2e}"))?;
    let uniform = Tensor::<f64>::full(vec![4, 4], 1.0);
    let mut delta = Tensor::<f64>::zeros(vec![4, 4]);
    delta.data_mut()[9] = 1.0;
    let kl = kl_loss(&uniform, &delta).map_err(fmt_err)?;
    ensure((kl - 16f64.ln()).abs() <= 1e-6, format!("KL(δ‖uniform) = {kl}"))?;
    Ok(format!("identities within {worst:.1e}; KL(δ‖uniform) = {kl:.9}"))
}

fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0).sum()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (16, 16);
    let mut worst: f64 = 0.0;
    let fixations = |rng: &mut ChaCha8Rng, frame| {
        let k = rng.random_range(1..=20);
        FixationRecord::new(frame, h, w, (0..k).map(|_| (rng.random_range(0..h), rng.random_range(0..w))).collect())
            .unwrap()
    };
    for i in 0..200u64 {
        let s = SaliencyMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).map_err(fmt_err)?;
        let g = SaliencyMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).map_err(fmt_err)?;
        let fix = fixations(&mut rng, 0);
        let others: Vec<_> = (1..4).map(|f| fixations(&mut rng, f)).collect();

        let fixated: HashSet<_> = fix.points.iter().copied().collect();
        let pos: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
        let neg: Vec<f64> = (0..h * w).filter(|i| !fixated.contains(&(i / w, i % w))).map(|i| s.data[i]).collect();
        let aj = auc_judd(&s, &fix).map_err(fmt_err)?;
        ensure(aj == brute_force_auc(&pos, &neg), format!("map {i}: AUC-J {aj}"))?;

        let negs: Vec<f64> = shuffled_negatives(&fix, &others, i).map_err(fmt_err)?.iter().map(|&(r, c)| s.at(r, c)).collect();
        let sa = shuffled_auc(&s, &fix, &others, i).map_err(fmt_err)?;
        ensure(sa == brute_force_auc(&pos, &negs), format!("map {i}: S-AUC {sa}"))?;

        let n = (h * w) as f64;
        let (ms, mg) = (s.data.iter().sum::<f64>() / n, g.data.iter().sum::<f64>() / n);
        let vs = s.data.iter().map(|v| (v - ms).powi(2)).sum::<f64>();
        let vg = g.data.iter().map(|v| (v - mg).powi(2)).sum::<f64>();
        let cov: f64 = s.data.iter().zip(&g.data).map(|(a, b)| (a - ms) * (b - mg)).sum();
        worst = worst.max((cc_metric(&s, &g).map_err(fmt_err)? - cov / (vs * vg).sqrt()).abs());
        let (ss, gs) = (ms * n, mg * n);
        let want_sim: f64 = s.data.iter().zip(&g.data).map(|(a, b)| (a / ss).min(b / gs)).sum();
        worst = worst.max((sim(&s, &g).map_err(fmt_err)? - want_sim).abs());
        let sd = (vs / n).sqrt();
        let want_nss = pos.iter().map(|v| (v - ms) / sd).sum::<f64>() / pos.len() as f64;
        worst = worst.max((nss(&s, &fix).map_err(fmt_err)? - want_nss).abs());
    }
    ensure(worst <= 1e-10, format!("CC/SIM/NSS deviation {worst:.2e}"))?;
    Ok(format!("200 maps: AUC-J and S-AUC exact; CC/SIM/NSS within {worst:.1e}"))
}

struct Overfit {
    data: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    baseline: TrainOutcome<f32>,
    baseline_time: Duration,
}

fn overfit_setup() -> Result<Overfit, String> {
    let data = generate(&SyntheticSpec::toy()).map_err(fmt_err)?.0;
    let val = generate(&SyntheticSpec {
        videos: 2,
        seed: 1,
        ..SyntheticSpec::toy()
    })
    .map_err(fmt_err)?
    .0;
    let cfg = TrainConfig::toy();
    let start = Instant::now();
    let model = Model::<f32>::new(ModelConfig::toy(), cfg.seed).map_err(fmt_err)?;
    let baseline = train(model, &data, &val, &cfg).map_err(fmt_err)?;
    Ok(Overfit {
        data,
        val,
        cfg,
        baseline,
        baseline_time: start.elapsed(),
    })
}

fn toy_overfit(o: &Overfit) -> Verdict {
    let report = evaluate_dataset(&o.baseline.best_model(), &o.data, o.cfg.seed).map_err(fmt_err)?;
    let cc = report.aggregate.cc.ok_or("no CC scored")?;
    let nss = report.aggregate.nss.ok_or("no NSS scored")?;
    let iters = o.baseline.state.iteration;
    let secs = o.baseline_time.as_secs_f64();
    let detail = format!("CC {cc:.4}, NSS {nss:.3} after {iters} iterations in {secs:.0} s");
    ensure(iters <= 2000, format!("{iters} iterations"))?;
    ensure(cc >= 0.8 && nss >= 1.5, detail.clone())?;
    ensure(secs <= 900.0, format!("{detail}; over the 15 min budget"))?;
    Ok(detail)
}

fn ablation_direction(o: &Overfit) -> Verdict {
    let count = |v| build_schedule(&EncoderConfig::toy(), v).map(|s| s.parameter_count()).map_err(fmt_err);
    let (base, mobile, double) = (count(Variant::Baseline)?, count(Variant::Mobilenet)?, count(Variant::Double)?);
    ensure(mobile < base && double > base, format!("params mobilenet {mobile}, baseline {base}, double {double}"))?;
    let real = Model::<f32>::new(ModelConfig::toy(), 0).map_err(fmt_err)?.decoder_parameter_count();
    ensure(real == base, format!("allocated {real} vs analytic {base}"))?;

    let model = Model::<f32>::new(ModelConfig::toy().with_variant(Variant::HalfTemporal), o.cfg.seed).map_err(fmt_err)?;
    let half = train(model, &o.data, &o.val, &o.cfg).map_err(fmt_err)?;
    let cc_of = |out: &TrainOutcome<f32>| -> Result<f64, String> {
        evaluate_dataset(&out.best_model(), &o.data, o.cfg.seed)
            .map_err(fmt_err)?
            .aggregate
            .cc
            .ok_or_else(|| "no CC scored".to_string())
    };
    let (cb, ch) = (cc_of(&o.baseline)?, cc_of(&half)?);
    let detail = format!(
        "CC baseline {cb:.4} vs half_temporal {ch:.4}; params mobilenet {mobile} < baseline {base} < double {double}"
    );
    ensure(ch < cb, detail.clone())?;
    Ok(detail)
}

fn sliding_window() -> Verdict {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            frames: 32,
            ..EncoderConfig::toy()
        },
        variant: Variant::Baseline,
    };
    let model = Model::<f32>::new(cfg, 0).map_err(fmt_err)?;
    let video = generate(&SyntheticSpec {
        videos: 1,
        frames: 40,
        ..SyntheticSpec::toy()
    })
    .map_err(fmt_err)?
    .0;
    let mut seen = Vec::new();
    let maps = infer_video(&model, &video.videos[0].frames, |w| seen.push(w.clone())).map_err(fmt_err)?;
    ensure(maps.len() == 40, format!("{} maps", maps.len()))?;
    for (t, w) in seen.iter().enumerate() {
        ensure(w.target == t && w.indices.len() == 32 && w.indices[31] == t, format!("window {t}: {w:?}"))?;
        ensure(w.reversed == (t <= 30), format!("frame {t} reversed = {}", w.reversed))?;
        if !w.reversed {
            ensure(w.indices == (t - 31..=t).collect::<Vec<_>>(), format!("frame {t} indices"))?;
        }
    }
    ensure(seen[0].indices == (0..32).rev().collect::<Vec<_>>(), "frame 0 window")?;

    let still = Tensor::<f32>::full(vec![40, 32, 64, 3], 0.6);
    let maps = infer_video(&model, &still, |_| {}).map_err(fmt_err)?;
    let spread = maps
        .iter()
        .flat_map(|m| m.data.iter().zip(&maps[0].data).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    ensure(spread <= 1e-6, format!("static video spread {spread:.2e}"))?;
    Ok(format!("40 maps; frames 0-30 reversed, 31-39 forward; static spread {spread:.1e}"))
}

fn serialization() -> Verdict {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let bundle_path = dir.path().join("tensors.json");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t64 = Tensor::new(vec![3, 5, 7], (0..105).map(|_| rng.random::<f64>() - 0.5).collect()).map_err(fmt_err)?;
    let t32: Tensor<f32> = t64.cast();
    let bundle = TensorBundle::new().with("a", DynTensor::F64(t64)).with("b", DynTensor::F32(t32));
    bundle.save(&bundle_path).map_err(fmt_err)?;
    ensure(TensorBundle::load(&bundle_path).map_err(fmt_err)? == bundle, "tensor bundle round trip")?;

    let data = generate(&SyntheticSpec {
        videos: 2,
        frames: 10,
        ..SyntheticSpec::toy()
    })
    .map_err(fmt_err)?
    .0;
    let half = TrainConfig {
        max_iters: 10,
        val_every: 4,
        ..TrainConfig::toy()
    };
    let full = TrainConfig { max_iters: 20, ..half.clone() };
    let fresh = || Model::<f32>::new(ModelConfig::toy(), 3).map_err(fmt_err);
    let straight = train(fresh()?, &data, &data, &full).map_err(fmt_err)?;

    let first = train(fresh()?, &data, &data, &half).map_err(fmt_err)?;
    let ckpt_path = dir.path().join("ckpt.json");
    let ckpt = Checkpoint::new(&first.model, &half, first.state.clone());
    ckpt.save(&ckpt_path).map_err(fmt_err)?;
    let loaded = Checkpoint::<f32>::load(&ckpt_path).map_err(fmt_err)?;
    ensure(loaded == ckpt, "checkpoint round trip")?;
    let model = loaded.current_model(Some(&ModelConfig::toy())).map_err(fmt_err)?;
    let state: TrainState<f32> = loaded.state;
    let second = resume(model, state, &data, &data, &full).map_err(fmt_err)?;

    let bits = |rows: &[thtd_core::pipeline::LogRow]| {
        rows.iter()
            .map(|r| (r.iteration, r.total.to_bits(), r.cc_term.to_bits(), r.val_total.map(f64::to_bits)))
            .collect::<Vec<_>>()
    };
    ensure(bits(&second.log) == bits(&straight.log[10..]), "resumed log differs from the uninterrupted run")?;
    ensure(second.model.params.tensors() == straight.model.params.tensors(), "resumed weights differ")?;
    ensure(second.state == straight.state, "resumed optimiser state differs")?;
    Ok("bundle and checkpoint round trips exact; resumed iterations 11-20 bit-identical".into())
}

fn main() {
    let started = Instant::now();
    let (mut total, mut failed) = (0, 0);
    let mut run = |name: &str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let verdict = f();
        let took = t.elapsed().as_secs_f64();
        total += 1;
        match verdict {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{took:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{took:.1} s]");
            }
        }
    };
    run("1 shape contract", &shape_contract);
    run("2 gradient suite", &gradient_suite);
    run("3 loss identities", &loss_identities);
    run("4 metric oracles", &metric_oracles);
    // Criteria 5 and 6 share the baseline training run.
    let overfit = overfit_setup();
    let shared = |f: fn(&Overfit) -> Verdict| -> Verdict {
        match &overfit {
            Ok(o) => f(o),
            Err(e) => Err(format!("baseline training failed: {e}")),
        }
    };
    run("5 toy overfit", &|| shared(toy_overfit));
    run("6 ablation directionality", &|| shared(ablation_direction));
    run("7 sliding windows", &sliding_window);
    run("8 serialization", &serialization);

    println!(
        "acceptance: {} of {total} criteria passed in {:.0} s",
        total - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
