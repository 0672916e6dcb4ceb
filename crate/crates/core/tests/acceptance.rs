//! The nine acceptance criteria, run in sequence so the timed ones are not
//! competing for the CPU. Each prints one `[PASS]`/`[FAIL]` line straight to
//! stdout; the test fails if any criterion does.

use std::io::Write;
use std::time::{Duration, Instant};

use predictive_cir::alignment::GATE;
use predictive_cir::encoder::{FrozenDualEncoder, ToyDualEncoder};
use predictive_cir::params::normal_matrix;
use predictive_cir::retrieval::{Template, TemplateKind};
use predictive_cir::train::{overfit_run, Checkpoint, OverfitOutcome, TrainConfig, Trainer};
use predictive_cir::verify::{crop_sweep, gate_zero_violations, grad_check, oracle_suite, GradCheckConfig};
use predictive_cir::view_forge::{synth_dataset, CropConfig, SynthConfig};
use predictive_cir::model::PredictiveMapper;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn report(&mut self, id: usize, name: &str, passed: bool, detail: String) {
        let mark = if passed { "PASS" } else { "FAIL" };
        // Written to the process stdout so the line survives output capture.
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{mark}] {id}. {name}: {detail}").unwrap();
        out.flush().unwrap();
        if !passed {
            self.failed.push(id);
        }
    }
}

fn gradient_fidelity(t: &mut Tally) {
    let report = grad_check(&GradCheckConfig::default()).unwrap();
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .unwrap();
    let fast = report.elapsed < Duration::from_secs(60);
    t.report(
        1,
        "gradient fidelity",
        report.max_rel_error < 1e-4 && report.prompt_rel_error < 1e-4 && fast,
        format!(
            "{} groups, max rel err {:.2e} (`{}`), prompt JVP {:.2e}, {:.1}s",
            report.groups.len(),
            report.max_rel_error,
            worst.name,
            report.prompt_rel_error,
            report.elapsed.as_secs_f64()
        ),
    );
}

fn loss_and_metric_oracles(t: &mut Tally) {
    let r = oracle_suite(100, 50, 0).unwrap();
    t.report(
        2,
        "loss oracles",
        r.instances == 100
            && r.contrastive_max_error <= 1e-10
            && r.prediction_max_error <= 1e-10
            && r.tau_limit_error <= 1e-6,
        format!(
            "contrastive {:.1e}, prediction {:.1e} over {} instances; |L(tau->0) - 2 log B| {:.1e}",
            r.contrastive_max_error, r.prediction_max_error, r.instances, r.tau_limit_error
        ),
    );
    gate_zero(t);
    crop_geometry(t);
    t.report(
        5,
        "metric oracles",
        r.mismatches() == 0,
        format!(
            "{} galleries of 50: recall {} / mAP {} mismatches, {} monotonicity violations",
            r.instances, r.recall_mismatches, r.map_mismatches, r.monotonicity_violations
        ),
    );
}

/// Fusion-level samples, plus the whole mapper: with the gate closed,
/// perturbing every parameter upstream of the predicted branch leaves `S*`
/// bit-for-bit unchanged.
fn gate_zero(t: &mut Tally) {
    let fusion = gate_zero_violations(500, 0).unwrap();
    let config = TrainConfig::toy();
    let mut mapper = PredictiveMapper::new(config.model().unwrap(), 3).unwrap();
    let encoder = ToyDualEncoder::toy(0);
    let pair = &synth_dataset(1, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(2))[0];
    let reference = encoder.encode_image_any(&pair.image).unwrap();
    let action = encoder.encode_text(&pair.caption).unwrap().cls;
    let block = mapper.config.query_block.clone();
    let before = mapper.map_pseudo_token(&reference, &action, &block).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perturbed = 0;
    for (name, entry) in mapper.params.iter_mut() {
        if name != GATE && !name.starts_with("fusion.source_map") {
            let (r, c) = entry.value.dim();
            entry.value += &normal_matrix(r, c, 1.0, &mut rng);
            perturbed += 1;
        }
    }
    let after = mapper.map_pseudo_token(&reference, &action, &block).unwrap();
    let model_ok = mapper.gate_value() == 0.0 && before.0 == after.0;
    t.report(
        3,
        "gate-zero identity",
        fusion == 0 && model_ok,
        format!(
            "{fusion} of 500 fusion samples differ; mapper token {} after perturbing {perturbed} tensors",
            if model_ok { "bitwise unchanged" } else { "changed" }
        ),
    );
}

fn crop_geometry(t: &mut Tally) {
    let cfg = CropConfig::default();
    let ranges_ok = cfg.scale == (0.2, 0.25) && cfg.aspect == (0.75, 1.5);
    let s = crop_sweep(10_000, &cfg, (32, 256), 0).unwrap();
    t.report(
        4,
        "crop geometry",
        ranges_ok && s.samples == 10_000 && s.passed(),
        format!(
            "{} crops at s {:?}, r {:?}: {} area-law, {} containment, {} range violations",
            s.samples, cfg.scale, cfg.aspect, s.area_law_violations, s.containment_violations, s.range_violations
        ),
    );
}

fn toy(seed: u64, variant: Option<&str>) -> OverfitOutcome {
    let mut c = TrainConfig::toy();
    c.seed = seed;
    if let Some(v) = variant {
        c.apply_override(&format!("{v}=true")).unwrap();
    }
    overfit_run(&c, 32).unwrap()
}

fn overfit_sanity(t: &mut Tally, full: &OverfitOutcome) {
    let ratio = full.prediction_ratio();
    let r1 = full.recall_at_1();
    let steps = full.metrics.len();
    t.report(
        6,
        "overfit sanity",
        steps == 300 && ratio <= 0.1 && r1 >= 0.9 && full.elapsed < Duration::from_secs(300),
        format!(
            "{steps} steps, L_pred {:.3} -> {:.3} ({:.1}%), R@1 {r1:.3} on 32 composites, {:.0}s",
            full.initial_prediction,
            full.final_prediction,
            100.0 * ratio,
            full.elapsed.as_secs_f64()
        ),
    );
}

fn ablations(t: &mut Tally, full_seed0: &OverfitOutcome) {
    let fulls: Vec<f64> = std::iter::once(full_seed0.recall_at_1())
        .chain((1..3).map(|s| toy(s, None).recall_at_1()))
        .collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in ["no_action", "no_crop", "no_gate"] {
        let ablated: Vec<f64> = (0..3).map(|s| toy(s, Some(variant)).recall_at_1()).collect();
        let wins = fulls.iter().zip(&ablated).filter(|(f, a)| f >= a).count();
        ok &= wins >= 2;
        let pairs: Vec<String> = fulls.iter().zip(&ablated).map(|(f, a)| format!("{f:.3}/{a:.3}")).collect();
        parts.push(format!("{variant} {wins}/3 [{}]", pairs.join(" ")));
    }
    t.report(7, "ablation directionality", ok, format!("full/ablated R@1: {}", parts.join("; ")));
}

fn determinism(t: &mut Tally, full: &OverfitOutcome) {
    let again = toy(full_seed(), None);
    let bits = |o: &OverfitOutcome| -> Vec<u64> {
        o.metrics
            .iter()
            .flat_map(|m| [m.prediction, m.alignment, m.total, m.gate_value, m.lr, m.grad_norm])
            .map(f64::to_bits)
            .collect()
    };
    let logs_equal = bits(full) == bits(&again) && full.metrics.len() == again.metrics.len();

    let mut cfg = TrainConfig::toy();
    cfg.max_steps = 5;
    let pairs = synth_dataset(8, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
    let encoder = predictive_cir::train::build_encoder(&cfg).unwrap();
    let mut trainer = Trainer::new(cfg, encoder.clone(), pairs.clone()).unwrap();
    for _ in 0..5 {
        trainer.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    trainer.save_checkpoint(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut forward_equal = true;
    for p in &pairs {
        let reference = encoder.encode_image_any(&p.image).unwrap();
        let action = encoder.encode_text(&p.caption).unwrap().cls;
        let block = trainer.mapper().config.query_block.clone();
        let a = trainer.mapper().map_pseudo_token(&reference, &action, &block).unwrap();
        let b = loaded.mapper.map_pseudo_token(&reference, &action, &block).unwrap();
        forward_equal &= a.0.iter().zip(b.0.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    t.report(
        8,
        "determinism and persistence",
        logs_equal && forward_equal,
        format!(
            "{} logged steps {}; checkpoint forward on {} items {}",
            full.metrics.len(),
            if logs_equal { "bitwise equal across runs" } else { "differ across runs" },
            pairs.len(),
            if forward_equal { "bitwise equal after reload" } else { "differs after reload" }
        ),
    );
}

fn full_seed() -> u64 {
    TrainConfig::toy().seed
}

fn prompt_fidelity(t: &mut Tally) {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let cases = [
        (TemplateKind::DomainConversion, s(&["cartoon"]), "", "a cartoon of [*]"),
        (TemplateKind::ObjectComposition, s(&["cat", "dog"]), "", "a photo of [*], [cat] and [dog]"),
        (
            TemplateKind::ObjectComposition,
            s(&["cat", "dog", "ball"]),
            "",
            "a photo of [*], [cat] and [dog], and [ball]",
        ),
        (
            TemplateKind::SentenceManipulation,
            vec![],
            "is a red dress",
            "a photo of [*], is a red dress",
        ),
    ];
    let mut wrong = Vec::new();
    for (kind, slots, text, want) in &cases {
        let got = Template::from_parts(*kind, slots, text).unwrap().render();
        if got != *want {
            wrong.push(format!("{got:?} != {want:?}"));
        }
    }
    t.report(
        9,
        "prompt fidelity",
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} prompts render exactly", cases.len())
        } else {
            wrong.join("; ")
        },
    );
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut t = Tally { failed: Vec::new() };
    writeln!(std::io::stdout().lock()).unwrap();
    gradient_fidelity(&mut t);
    loss_and_metric_oracles(&mut t);
    let full = toy(full_seed(), None);
    overfit_sanity(&mut t, &full);
    ablations(&mut t, &full);
    determinism(&mut t, &full);
    prompt_fidelity(&mut t);
    writeln!(std::io::stdout().lock(), "acceptance finished in {:.0}s", start.elapsed().as_secs_f64()).unwrap();
    assert!(t.failed.is_empty(), "failed criteria: {:?}", t.failed);
}
