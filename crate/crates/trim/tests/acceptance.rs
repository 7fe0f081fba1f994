//! Acceptance checks. Every test prints one `PASS` or `FAIL` line to
//! stderr (visible without `--nocapture`) and then asserts the outcome.
//!
//! Run with `cargo test --release -p trim --test acceptance`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use trim::commands;
use trim::config::{JudgeKind, Mode, RunConfig, ScalingAxis};
use trim::experiments;
use trim::pipeline::{run_prompt, Judge, RunSpec};
use trim_core::cost::tr_flops_ratio;
use trim_core::dataset::{BalancedPairSet, PairSample, BIN_COUNT};
use trim_core::decode::{decode_splats, SplatSet};
use trim_core::denoiser::{DenoiserConfig, ToyDenoiser, VelocityField};
use trim_core::latent::{sample_noise, trajectory_noise, GridShape, LatentGrid, TokenSequence};
use trim_core::mask::{border_region, merge_tokens, pad_tokens, InstanceMask, MaskSchedule};
use trim_core::reduction::{reduced_inference, tournament, ReductionPlan, ScoreOracle};
use trim_core::render::{correct_opacity, footprints, render, standard_cameras, Camera};
use trim_core::rng::Rng;
use trim_core::sampler::{euler_sampler, StepHook, StepLog};
use trim_core::selector::{pairwise_accuracy, train, SelectorArch, SelectorModel, Variant};
use trim_core::synth::generate_prompts;

fn report(id: &str, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{verdict} [{id}] {name}: {detail}");
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset(name: &str, output: &str) -> RunConfig {
    let path = workspace_root().join("configs").join(name);
    let mut cfg = RunConfig::load(Some(&path), &[]).expect("preset loads");
    cfg.output_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(output);
    std::fs::create_dir_all(&cfg.output_dir).unwrap();
    cfg
}

/// Returns zero velocity: every step is a no-op, so only the call
/// structure is exercised.
struct Still(DenoiserConfig);

impl VelocityField for Still {
    fn config(&self) -> &DenoiserConfig {
        &self.0
    }

    fn velocity(&self, tokens: &TokenSequence, _t: usize, _prompt: &[f64]) -> trim_core::Result<TokenSequence> {
        tokens.with_data(vec![0.0; tokens.data().len()])
    }
}

#[test]
fn c01_step_count_formula() {
    let started = std::time::Instant::now();
    let grid = GridShape::new(11, 2, 2);
    let cams = standard_cameras(4);
    let mut runs = 0;
    let mut mismatches = 0;
    for steps in 4..=32 {
        let field = Still(DenoiserConfig {
            steps,
            grid,
            ..DenoiserConfig::default()
        });
        for n in 1..=8 {
            for t in 1..steps {
                let plan = ReductionPlan::new(n, steps, t, 0).unwrap();
                let oracle = ScoreOracle {
                    scores: (0..n).map(|i| ((i * 7) % 5) as f64).collect(),
                };
                let run = reduced_inference(&plan, &oracle, &field, 0, &[0.0; 16], None, &cams).unwrap();
                runs += 1;
                if run.ledger.denoiser_calls != n * steps - (n - 1) * t {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 60.0;
    report(
        "1",
        "step count NT-(N-1)t",
        pass,
        &format!("{runs} runs, {mismatches} mismatches, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn c02_tr_flops_ratio() {
    let computed = tr_flops_ratio(8, 28, 14);
    let reference = 110.07 / 195.68;
    let rel = (computed - reference).abs() / reference;

    let cfg = preset("desk.toml", "c02");
    let field = ToyDenoiser::new(cfg.denoiser.build()).unwrap();
    let prompt = &generate_prompts(1, 5, field.config().grid).unwrap()[0];
    let cams = standard_cameras(32);
    let t = field.config().steps / 2;
    let run = |mode| {
        let spec = RunSpec {
            mode,
            candidates: 8,
            reduce_at: t,
            first_seed: 0,
        };
        run_prompt(&field, prompt, &cams, &spec, None, Some(Judge::Oracle)).unwrap()
    };
    let measured = run(Mode::Tr).cost.flops as f64 / run(Mode::Baseline).cost.flops as f64;
    let pass = (computed - 0.5625).abs() < 1e-12 && rel < 1e-3 && (measured - computed).abs() < 1e-12;
    report(
        "2",
        "TR FLOPs ratio",
        pass,
        &format!("formula {computed:.6}, measured {measured:.6}, reference {reference:.6}, rel err {rel:.2e}"),
    );
    assert!(pass);
}

#[test]
fn c03_post_denoising_calls() {
    let cfg = preset("desk.toml", "c03");
    let field = ToyDenoiser::new(cfg.denoiser.build()).unwrap();
    let prompt = &generate_prompts(1, 9, field.config().grid).unwrap()[0];
    let cams = standard_cameras(32);
    let masking = cfg.masking().unwrap();
    let mut detail = Vec::new();
    let mut pass = true;
    for n in [2, 4, 8] {
        for mode in Mode::ALL {
            let spec = RunSpec {
                mode,
                candidates: n,
                reduce_at: field.config().steps / 2,
                first_seed: 0,
            };
            let o = run_prompt(&field, prompt, &cams, &spec, Some(&masking), Some(Judge::Oracle)).unwrap();
            let expect = if mode.reduces() { 1 } else { n };
            let ok = o.cost.decode_calls == expect && o.cost.render_calls == expect;
            pass &= ok;
            if n == 8 {
                detail.push(format!(
                    "{} {}/{}",
                    mode.name(),
                    o.cost.decode_calls,
                    o.cost.render_calls
                ));
            }
        }
    }
    report(
        "3",
        "decode/render calls",
        pass,
        &format!("N=8 decode/render: {}", detail.join(", ")),
    );
    assert!(pass);
}

#[test]
fn c04_scheduler_region_counts() {
    let counts: Vec<usize> = [2, 4, 6, 8].iter().map(|&w| border_region(16, 16, w).count()).collect();
    let schedule = MaskSchedule::default_for(28, GridShape::default()).unwrap();
    let pass = counts == [112, 192, 240, 256] && schedule.widths == [2, 4, 6, 8];
    report("4", "eligible cells per phase", pass, &format!("{counts:?}"));
    assert!(pass);
}

/// Routes every step through merge and pad with an empty mask.
struct EmptyMaskStep;

impl StepHook for EmptyMaskStep {
    fn velocity(
        &mut self,
        field: &dyn VelocityField,
        z: &LatentGrid,
        t: usize,
        prompt: &[f64],
    ) -> trim_core::Result<(LatentGrid, usize)> {
        let s = z.shape();
        let mask = InstanceMask::empty(s.height, s.width);
        let seq = merge_tokens(z, &mask)?;
        let v = field.velocity(&seq, t, prompt)?;
        Ok((pad_tokens(&v, &mask, s)?, seq.len()))
    }
}

#[test]
fn c05_merge_pad_roundtrip() {
    let mut rng = Rng::new(55);
    let mut failures = 0;
    for i in 0..1000 {
        let (h, w) = (1 + rng.below(16), 1 + rng.below(16));
        let shape = GridShape::new(11, h, w);
        let z = sample_noise(1000 + i, shape);
        let p = rng.uniform();
        let cells = (0..h * w).map(|_| rng.uniform() < p).collect();
        let mask = InstanceMask::from_cells(h, w, cells).unwrap();
        let back = pad_tokens(&merge_tokens(&z, &mask).unwrap(), &mask, shape).unwrap();
        let ok = (0..shape.cells()).all(|k| {
            let (r, c) = shape.cell(k);
            mask.get(r, c) || back.token(k) == z.token(k)
        });
        failures += usize::from(!ok);
    }

    let field = ToyDenoiser::new(DenoiserConfig::default()).unwrap();
    let prompt = &generate_prompts(1, 4, field.config().grid).unwrap()[0];
    let cams = standard_cameras(32);
    let noise = trajectory_noise(prompt.id, 3, field.config().grid);
    let plain = euler_sampler(&field, noise.clone(), &prompt.embedding, None, &mut StepLog::default()).unwrap();
    let mut hook = EmptyMaskStep;
    let masked = euler_sampler(
        &field,
        noise,
        &prompt.embedding,
        Some(&mut hook),
        &mut StepLog::default(),
    )
    .unwrap();
    let states_equal = plain
        .iter()
        .zip(&masked)
        .all(|(a, b)| a.latent.data() == b.latent.data());
    let render_of = |z: &LatentGrid| render(&decode_splats(z).unwrap(), &cams).unwrap();
    let images_equal = render_of(&plain.last().unwrap().latent) == render_of(&masked.last().unwrap().latent);

    let pass = failures == 0 && states_equal && images_equal;
    report(
        "5",
        "merge/pad roundtrip",
        pass,
        &format!(
            "1000 pairs, {failures} foreground mismatches; empty-mask run bit-identical: {}",
            states_equal && images_equal
        ),
    );
    assert!(pass);
}

/// Pixels reached by the footprint of any primitive selected by `pick`.
fn coverage(splats: &SplatSet, camera: &Camera, pick: impl Fn(usize) -> bool) -> Vec<bool> {
    let mut covered = vec![false; camera.width * camera.height];
    for (i, fp) in footprints(splats, camera).iter().enumerate() {
        if !pick(i) {
            continue;
        }
        if let Some((r0, r1, c0, c1)) = fp.bounds(camera.width, camera.height) {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    covered[r * camera.width + c] |= fp.covers(r, c);
                }
            }
        }
    }
    covered
}

#[test]
fn c06_opacity_correction() {
    let cams = standard_cameras(48);
    let shape = GridShape::default();
    let mut rng = Rng::new(66);
    let mut max_bg_alpha: f64 = 0.0;
    let mut max_fg_change: f64 = 0.0;
    let mut fg_pixels = 0usize;
    for case in 0..20 {
        let mut z = sample_noise(600 + case, shape);
        z.data_mut().iter_mut().for_each(|v| *v *= 0.8);
        let mut splats = decode_splats(&z).unwrap();
        let p = rng.uniform_in(0.2, 0.8);
        let cells: Vec<bool> = (0..shape.cells()).map(|_| rng.uniform() < p).collect();
        let mask = InstanceMask::from_cells(shape.height, shape.width, cells.clone()).unwrap();
        for (prim, &bg) in splats.primitives.iter_mut().zip(&cells) {
            if bg {
                prim.opacity = rng.uniform() * 1e-3;
            }
        }
        let corrected = correct_opacity(&splats, &mask).unwrap();
        let before = render(&splats, &cams).unwrap();
        let after = render(&corrected, &cams).unwrap();
        for (v, cam) in cams.iter().enumerate() {
            let fg = coverage(&splats, cam, |i| !cells[i]);
            let bg = coverage(&splats, cam, |i| cells[i]);
            for k in 0..fg.len() {
                if !fg[k] {
                    max_bg_alpha = max_bg_alpha.max(after[v].pixels[k][3]);
                } else if !bg[k] {
                    fg_pixels += 1;
                    for ch in 0..4 {
                        let d = (after[v].pixels[k][ch] - before[v].pixels[k][ch]).abs();
                        max_fg_change = max_fg_change.max(d);
                    }
                }
            }
        }
    }
    let pass = max_bg_alpha <= 1e-9 && max_fg_change <= 1e-6 && fg_pixels > 0;
    report(
        "6",
        "opacity correction",
        pass,
        &format!("max alpha off foreground {max_bg_alpha:.1e}, max change on {fg_pixels} foreground pixels {max_fg_change:.1e}"),
    );
    assert!(pass);
}

fn gradient_check(variant: Variant) -> f64 {
    let grid = GridShape::new(3, 5, 4);
    let latents: Vec<LatentGrid> = (0..4).map(|s| sample_noise(300 + s, grid)).collect();
    let pair = |first, second, a, b| PairSample {
        prompt: 0,
        first,
        second,
        score_first: a,
        score_second: b,
    };
    let pairs = vec![pair(0, 1, 0.8, 0.3), pair(2, 3, 0.2, 0.6), pair(3, 1, 0.5, 0.45)];
    let set = BalancedPairSet {
        grid,
        latents,
        embeddings: vec![(0..6).map(|i| 0.2 * i as f64 - 0.5).collect()],
        train: pairs.clone(),
        test: pairs.clone(),
        split_ratio: 0.7,
        quota: 0,
        test_quota: 0,
        train_shortfall: [0; BIN_COUNT],
        test_shortfall: [0; BIN_COUNT],
        seed: 0,
    };
    let arch = SelectorArch::from_variant(variant, grid, 6).with_hidden(6);
    let mut model = SelectorModel::new(arch, 17).unwrap();
    // Offset zero biases so no ReLU input sits exactly on its kink.
    for p in model.params_mut() {
        if p.value.iter().all(|b| *b == 0.0) {
            p.value
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| *b = 0.04 * (i % 5) as f64 - 0.07);
        }
    }
    model.zero_grad();
    model.accumulate_batch(&set, &pairs).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let orig = model.params()[pi].value[i];
            model.params_mut()[pi].value[i] = orig + h;
            let up = model.mean_loss(&set, &pairs).unwrap();
            model.params_mut()[pi].value[i] = orig - h;
            let down = model.mean_loss(&set, &pairs).unwrap();
            model.params_mut()[pi].value[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale < 1e-8 {
                continue;
            }
            worst = worst.max((g - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn c07a_selector_gradients() {
    let results: Vec<(Variant, f64)> = Variant::ALL.iter().map(|&v| (v, gradient_check(v))).collect();
    let pass = results.iter().all(|(_, e)| *e < 1e-3);
    let detail: Vec<String> = results.iter().map(|(v, e)| format!("{} {e:.1e}", v.name())).collect();
    report("7a", "finite-difference gradients", pass, &detail.join(", "));
    assert!(pass);
}

struct Desk {
    cfg: RunConfig,
    set: BalancedPairSet,
    conv: SelectorModel,
    fc: SelectorModel,
    seconds: f64,
}

/// Data synthesis, pair building and selector training on the desk preset,
/// shared by the selector and diversity checks.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let started = std::time::Instant::now();
        let cfg = preset("desk.toml", "desk");
        commands::synth_data(&cfg).unwrap();
        let set = commands::build_pair_set(&cfg).unwrap();
        let conv = commands::train_selector(&cfg).unwrap();
        let mut fc = SelectorModel::new(
            SelectorArch::from_variant(Variant::Fc2, set.grid, set.embeddings[0].len())
                .with_hidden(cfg.selector.hidden),
            cfg.selector.init_seed,
        )
        .unwrap();
        train(&mut fc, &set, &cfg.train.build()).unwrap();
        Desk {
            cfg,
            set,
            conv,
            fc,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

/// Smallest test count for a gap bin to qualify as the top bin.
const TOP_BIN_MIN: usize = 30;

#[test]
fn c07b_selector_accuracy() {
    let d = desk();
    let total = d.set.train.len() + d.set.test.len();
    let acc = pairwise_accuracy(&d.conv, &d.set, &d.set.test).unwrap();
    let top = acc.top_bin(TOP_BIN_MIN);
    let top_acc = top.map_or(f64::NAN, |b| acc.bin(b));
    let pass = total >= 2000 && acc.overall() >= 0.70 && top_acc >= 0.85 && d.seconds < 600.0;
    report(
        "7b",
        "Conv1-FC2 held-out accuracy",
        pass,
        &format!(
            "{total} pairs, overall {:.3}, top bin {} ({} pairs) {top_acc:.3}, {:.0}s",
            acc.overall(),
            top.map_or("-".into(), |b| b.to_string()),
            top.map_or(0, |b| acc.bin_total[b]),
            d.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn c07c_conv_beats_fc() {
    let d = desk();
    let conv = pairwise_accuracy(&d.conv, &d.set, &d.set.test).unwrap().overall();
    let fc = pairwise_accuracy(&d.fc, &d.set, &d.set.test).unwrap().overall();
    let pass = conv >= fc + 0.05;
    report(
        "7c",
        "Conv1-FC2 vs FC2",
        pass,
        &format!(
            "Conv1-FC2 {conv:.3}, FC2 {fc:.3}, gap {:.1} points",
            100.0 * (conv - fc)
        ),
    );
    assert!(pass);
}

#[test]
fn c08_tournament_oracle() {
    let mut rng = Rng::new(88);
    let latents: Vec<LatentGrid> = (0..16).map(|_| LatentGrid::zeros(GridShape::new(1, 1, 1))).collect();
    let mut wrong = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(16);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let best = (0..n).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let out = tournament(&latents[..n], &ScoreOracle { scores }, &[]).unwrap();
        wrong += usize::from(out.winner != best || out.comparisons != n - 1);
    }
    let pass = wrong == 0;
    report(
        "8",
        "tournament with oracle",
        pass,
        &format!("200 score vectors, {wrong} wrong winners"),
    );
    assert!(pass);
}

#[test]
fn c09_scaling_curve() {
    let cfg = preset("desk.toml", "c09");
    let prompts = commands::eval_prompts(&cfg, 100).unwrap();
    let rows = experiments::scaling(
        &cfg.denoiser.build(),
        ScalingAxis::Trajectories,
        &[1, 2, 4, 8],
        cfg.reduce_at(),
        &prompts,
        &standard_cameras(cfg.data.image_size),
        JudgeKind::Oracle,
        None,
    )
    .unwrap();
    let pass = rows
        .windows(2)
        .all(|w| w[1].score_mean >= w[0].score_mean - w[0].score_std);
    let monotone = rows.windows(2).all(|w| w[1].score_mean >= w[0].score_mean);
    let curve: Vec<String> = rows
        .iter()
        .map(|r| format!("N={} {:.3}+-{:.3}", r.value, r.score_mean, r.score_std))
        .collect();
    report(
        "9",
        "scaling with oracle",
        pass,
        &format!("{}; strictly non-decreasing: {monotone}", curve.join(", ")),
    );
    assert!(pass);
}

#[test]
fn c10_diversity_shift() {
    let d = desk();
    let cfg = &d.cfg;
    let field = ToyDenoiser::new(cfg.denoiser.build()).unwrap();
    let prompts = commands::eval_prompts(cfg, 30).unwrap();
    let r = experiments::diversity(
        &field,
        &prompts,
        &standard_cameras(cfg.data.image_size),
        8,
        8,
        cfg.reduce_at(),
        JudgeKind::Selector,
        Some(&d.conv),
    )
    .unwrap();
    let pass = r.reduced.score_mean > r.plain.score_mean
        && r.reduced.score_std <= r.plain.score_std
        && r.max_not_increased >= 0.70;
    report(
        "10",
        "diversity shift under TR",
        pass,
        &format!(
            "score {:.3}->{:.3}, std {:.3}->{:.3}, chamfer max kept in {:.0}% of prompts",
            r.plain.score_mean,
            r.reduced.score_mean,
            r.plain.score_std,
            r.reduced.score_std,
            100.0 * r.max_not_increased
        ),
    );
    assert!(pass);
}

#[test]
fn c11_masked_throughput() {
    let cfg = preset("default.toml", "c11");
    let field = ToyDenoiser::new(cfg.denoiser.build()).unwrap();
    let prompts = commands::eval_prompts(&cfg, 4).unwrap();
    let r = experiments::bench(&field, &cfg.masking().unwrap(), &prompts, 5, 1).unwrap();
    let pass = r.max_foreground_fraction <= 0.5 && r.speedup() >= 1.2;
    report(
        "11",
        "masked step throughput",
        pass,
        &format!(
            "{:.1} vs {:.1} steps/s ({:.2}x), foreground at most {:.0}%",
            r.masked_steps_per_second,
            r.unmasked_steps_per_second,
            r.speedup(),
            100.0 * r.max_foreground_fraction
        ),
    );
    assert!(pass);
}
