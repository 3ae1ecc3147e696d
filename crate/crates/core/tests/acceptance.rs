//! One pass/fail line per acceptance criterion.
//!
//! Each test writes its verdict straight to stderr (bypassing the test
//! harness capture) so the lines show up in a normal `cargo test` run.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stepsnet::blocks::{BlockKind, Init, ResidualStack, SeqContext};
use stepsnet::costing::{allocate_depths, body_flops, mirrored_flops, mirrored_params, model_cost, width_schedule, body_params};
use stepsnet::gradcheck::{suite, SUITE_TOLERANCE};
use stepsnet::harness::ablation::{ablation_sweep, SweepKind};
use stepsnet::harness::data::{make_task, unigram_perplexity};
use stepsnet::harness::{train, TaskId, TrainConfig};
use stepsnet::network::{InputSpec, Inputs, Network, NetworkSpec, Readout};
use stepsnet::params::Parameters;
use stepsnet::presets::{network_preset, preset, Preset};
use stepsnet::probe::{decompose_normalized, monte_carlo_gamma, shortcut_ratio_trace, variance_oracle};
use stepsnet::steps::{mirrored_channel_map, MirroredStepsModel, Path, StepsConfig, StepsModel};
use stepsnet::Tensor;

fn verdict(id: u32, ok: bool, detail: impl AsRef<str>) {
    let line = format!("criterion {id:>2}: {} | {}\n", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {}", detail.as_ref());
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got / want - 1.0).abs() <= rel
}

// ---------------------------------------------------------------------------
// 1. Cost model against the published table.

struct Row {
    name: &'static str,
    layers: u64,
    params: f64,
    params_tol: f64,
    flops: f64,
    flops_tol: f64,
}

const TABLE1: &[Row] = &[
    Row { name: "deit-t", layers: 62, params: 5.7e6, params_tol: 0.02, flops: 1.3e9, flops_tol: 0.06 },
    Row { name: "deit-s", layers: 62, params: 22.1e6, params_tol: 0.02, flops: 4.6e9, flops_tol: 0.03 },
    Row { name: "deit-b", layers: 62, params: 86.6e6, params_tol: 0.02, flops: 17.6e9, flops_tol: 0.02 },
    Row { name: "steps-deit-t", layers: 122, params: 5.7e6, params_tol: 0.03, flops: 1.3e9, flops_tol: 0.06 },
    Row { name: "steps-deit-s", layers: 122, params: 22.1e6, params_tol: 0.03, flops: 4.7e9, flops_tol: 0.03 },
];

const HIERARCHICAL_LAYERS: &[(&str, usize)] = &[("steps-swin-t", 135), ("steps-swin-s", 195), ("steps-swin-b", 195)];

#[test]
fn criterion_01_cost_model_matches_table() {
    let mut ok = true;
    let mut notes = Vec::new();
    for r in TABLE1 {
        let c = model_cost(&network_preset(r.name).unwrap()).unwrap();
        let good = c.layers_total == r.layers
            && within(c.params_total as f64, r.params, r.params_tol)
            && within(c.flops_total as f64, r.flops, r.flops_tol);
        ok &= good;
        notes.push(format!(
            "{} {}L {:.2}M {:.3}G{}",
            r.name,
            c.layers_total,
            c.params_total as f64 / 1e6,
            c.flops_total as f64 / 1e9,
            if good { "" } else { " (off)" }
        ));
    }
    for &(name, layers) in HIERARCHICAL_LAYERS {
        let Preset::Hierarchical(h) = preset(name).unwrap() else { panic!("{name}") };
        ok &= h.layers() == layers;
        notes.push(format!("{name} {}L", h.layers()));
    }
    verdict(1, ok, notes.join(", "));
}

// ---------------------------------------------------------------------------
// 2. Width and depth schedules.

#[test]
fn criterion_02_schedules_exact() {
    let a = width_schedule(384, 3).unwrap();
    let b = width_schedule(768, 3).unwrap();
    let d = allocate_depths(12, 3).unwrap();
    let ok = a == [192, 272, 384] && b == [384, 544, 768] && d == [12, 6, 6];
    verdict(2, ok, format!("widths(384,3)={a:?} widths(768,3)={b:?} depths(12,3)={d:?}"));
}

// ---------------------------------------------------------------------------
// 3. Normalized decomposition identity.

const DECOMPOSITION_TOL: f64 = 1e-10;

#[test]
fn criterion_03_decomposition_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let c = rng.random_range(2..64);
        let z0 = Tensor::<f64>::randn(&[n, c], rng.random_range(0.1..3.0), &mut rng);
        let r = Tensor::<f64>::randn(&[n, c], rng.random_range(0.0..3.0), &mut rng);
        let eps = if rng.random_bool(0.5) { 0.0 } else { 1e-6 };
        worst = worst.max(decompose_normalized(&z0, &r, eps).unwrap().reconstruction_error);
    }
    verdict(3, worst < DECOMPOSITION_TOL, format!("max reconstruction error {worst:.3e} over 100 draws (< {DECOMPOSITION_TOL:e})"));
}

// ---------------------------------------------------------------------------
// 4. Finite-difference gradient suite.

const GRADCHECK_SECONDS: f64 = 60.0;

#[test]
fn criterion_04_gradient_suite() {
    let t = Instant::now();
    let cases = suite(4).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<_> = cases.iter().filter(|c| !c.report.passes(SUITE_TOLERANCE)).map(|c| c.name).collect();
    let has_block = cases.iter().any(|c| c.name == "transformer_block");
    let ok = failing.is_empty() && has_block && secs < GRADCHECK_SECONDS;
    verdict(
        4,
        ok,
        format!("{} cases, max rel err {worst:.2e} (< {SUITE_TOLERANCE:e}), {secs:.1}s, failing {failing:?}", cases.len()),
    );
}

// ---------------------------------------------------------------------------
// 5. One-step equivalence and zero-branch identities.

#[test]
fn criterion_05_degeneracy() {
    let mut identical = 0;
    for draw in 0..20u64 {
        let kind = if draw % 2 == 0 { BlockKind::Transformer } else { BlockKind::Mlp };
        let (width, heads) = (8, 2);
        let depth = 1 + (draw as usize % 4);
        let init = Init { std: 0.2, ..Init::default() };
        let stack = ResidualStack::<f64>::new(kind, width, depth, heads, &init, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        let cfg = StepsConfig::residual(kind, width, depth, heads);
        let steps = StepsModel::<f64>::new(cfg, &init, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        let x = Tensor::<f64>::randn(&[6, width], 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + draw));
        let ctx = SeqContext::new(3, draw % 3 == 0);
        let same_params = stack.flat_values() == steps.flat_values();
        if same_params && stack.apply(&x, &ctx).unwrap().bit_eq(&steps.apply(&x, &ctx).unwrap()) {
            identical += 1;
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let zero = Init::zero_branches();
    let x = Tensor::<f64>::randn(&[8, 24], 1.0, &mut r);
    let ctx = SeqContext::new(4, false);
    let stack = ResidualStack::<f64>::new(BlockKind::Transformer, 24, 10, 3, &zero, &mut r).unwrap();
    let cfg = StepsConfig::from_step_widths(BlockKind::Transformer, &[8, 16, 24], &[4, 3, 3], &[2, 2, 3]).unwrap();
    let steps = StepsModel::<f64>::new(cfg, &zero, &mut r).unwrap();
    let stack_id = stack.apply(&x, &ctx).unwrap().bit_eq(&x);
    let steps_id = steps.apply(&x, &ctx).unwrap().bit_eq(&x);
    let g1 = shortcut_ratio_trace(&stack, &x, &ctx).unwrap().gammas();
    let g2 = shortcut_ratio_trace(&steps, &x, &ctx).unwrap().gammas();
    let unit = g1.iter().chain(&g2).all(|&g| g == 1.0);
    let ok = identical == 20 && stack_id && steps_id && unit && g1.len() == 10 && g2.len() == 10;
    verdict(
        5,
        ok,
        format!("{identical}/20 bit-identical draws; zero-branch identity stack={stack_id} steps={steps_id}; gamma==1 on {} blocks: {unit}", g1.len() + g2.len()),
    );
}

// ---------------------------------------------------------------------------
// 6. Monte-Carlo variance oracle.

const ORACLE_REL_TOL: f64 = 0.02;
const ORACLE_DEPTH: usize = 64;

#[test]
fn criterion_06_variance_oracle() {
    // 100 tokens x 1000 channels = 1e5 samples per layer.
    let mc = monte_carlo_gamma(ORACLE_DEPTH, 1.0, 100, 1000, 6).unwrap();
    let oracle = variance_oracle(ORACLE_DEPTH, 1.0);
    let worst = mc.iter().zip(&oracle).map(|(m, o)| (m / o - 1.0).abs()).fold(0.0, f64::max);
    let exact = oracle.iter().enumerate().all(|(i, &o)| (o - 1.0 / ((i + 2) as f64).sqrt()).abs() < 1e-15);
    verdict(
        6,
        worst < ORACLE_REL_TOL && exact,
        format!("max relative deviation {worst:.4} over l=1..{ORACLE_DEPTH} (< {ORACLE_REL_TOL})"),
    );
}

// ---------------------------------------------------------------------------
// 7. Shortcut ratio at initialization, residual vs steps.

const FIG3_SEEDS: u64 = 5;
const FIG3_TOKENS: usize = 32;
const FIG3_SECONDS: f64 = 300.0;

#[test]
fn criterion_07_steps_keep_shortcut_higher() {
    let t = Instant::now();
    let residual_cfg = StepsConfig::residual(BlockKind::Transformer, 48, 96, 6);
    let widths = width_schedule(64, 3).unwrap();
    let depths = allocate_depths(48, 3).unwrap();
    let steps_cfg = StepsConfig::from_step_widths(BlockKind::Transformer, &widths, &depths, &[4, 6, 8]).unwrap();
    let n = FIG3_TOKENS as u64;
    let ratio = body_flops(&steps_cfg, n).total() as f64 / body_flops(&residual_cfg, n).total() as f64;
    let ctx = SeqContext::new(FIG3_TOKENS, false);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..FIG3_SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let res = StepsModel::<f64>::new(residual_cfg.clone(), &Init::default(), &mut r).unwrap();
        let st = StepsModel::<f64>::new(steps_cfg.clone(), &Init::default(), &mut r).unwrap();
        let x = Tensor::<f64>::randn(&[FIG3_TOKENS, 64], 1.0, &mut r);
        let x48 = Tensor::new(vec![FIG3_TOKENS, 48], x.data().chunks(64).flat_map(|row| row[..48].to_vec()).collect()).unwrap();
        let a = shortcut_ratio_trace(&res, &x48, &ctx).unwrap().first_quarter_mean();
        let b = shortcut_ratio_trace(&st, &x, &ctx).unwrap().first_quarter_mean();
        wins += usize::from(b > a);
        pairs.push(format!("{a:.4}/{b:.4}"));
    }
    let secs = t.elapsed().as_secs_f64();
    let matched = (ratio - 1.0).abs() <= 0.1;
    verdict(
        7,
        wins == FIG3_SEEDS as usize && secs < FIG3_SECONDS && matched,
        format!(
            "first-quarter mean gamma residual/steps per seed [{}]; steps higher on {wins}/{FIG3_SEEDS}; FLOP ratio {ratio:.3}; {secs:.1}s",
            pairs.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Instrumented MAC counter against the cost model.

fn random_spec<R: Rng>(rng: &mut R) -> NetworkSpec {
    loop {
        let kind = if rng.random_bool(0.5) { BlockKind::Transformer } else { BlockKind::Mlp };
        let steps = rng.random_range(1..=3);
        let mut widths = Vec::new();
        let mut w = 0;
        for _ in 0..steps {
            w += 4 * rng.random_range(1..=3);
            widths.push(w);
        }
        let depths: Vec<usize> = (0..steps).map(|_| rng.random_range(0..=2)).collect();
        let heads: Vec<usize> = match kind {
            BlockKind::Transformer => widths.iter().map(|&w| if rng.random_bool(0.5) { 2 } else { w / 4 }).collect(),
            BlockKind::Mlp => Vec::new(),
        };
        let cls = rng.random_bool(0.5);
        let spec = NetworkSpec {
            body: StepsConfig::from_step_widths(kind, &widths, &depths, &heads).unwrap(),
            input: if rng.random_bool(0.5) {
                InputSpec::Features { dim: rng.random_range(1..6) }
            } else {
                InputSpec::Tokens { vocab: rng.random_range(2..9) }
            },
            tokens: rng.random_range(1..6),
            cls_token: cls,
            pos_embed: rng.random_bool(0.5),
            causal: kind == BlockKind::Transformer && rng.random_bool(0.5),
            classes: rng.random_range(2..6),
            readout: if cls && rng.random_bool(0.5) { Readout::Cls } else { Readout::PerToken },
            extra_layers: None,
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

#[test]
fn criterion_08_mac_counter_matches_cost_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = 0;
    let mut params_exact = 0;
    let batch = 3;
    for _ in 0..10 {
        let spec = random_spec(&mut rng);
        let net = Network::<f64>::new(spec.clone(), &Init::default(), &mut rng).unwrap();
        let macs = match spec.input {
            InputSpec::Features { dim } => {
                let x = Tensor::<f64>::randn(&[batch * spec.tokens, dim], 1.0, &mut rng);
                net.count_macs(Inputs::Features(&x)).unwrap()
            }
            InputSpec::Tokens { vocab } => {
                let ids: Vec<usize> = (0..batch * spec.tokens).map(|_| rng.random_range(0..vocab)).collect();
                net.count_macs(Inputs::Tokens(&ids)).unwrap()
            }
        };
        let cost = model_cost(&spec).unwrap();
        exact += usize::from(macs == batch as u64 * cost.flops_total);
        params_exact += usize::from(net.param_count() as u64 == cost.params_total);
    }
    let mut live_presets = 0;
    for name in ["deit-t", "steps-deit-t"] {
        let spec = network_preset(name).unwrap();
        let net = Network::<f32>::new(spec.clone(), &Init::default(), &mut rng).unwrap();
        live_presets += usize::from(net.param_count() as u64 == model_cost(&spec).unwrap().params_total);
    }
    verdict(
        8,
        exact == 10 && params_exact == 10 && live_presets == 2,
        format!("MACs exact on {exact}/10 random configs; live parameter counts exact on {params_exact}/10 configs and {live_presets}/2 presets"),
    );
}

// ---------------------------------------------------------------------------
// 9. Mirrored design.

#[test]
fn criterion_09_mirrored_design() {
    let mut same_cost = 0;
    let names = ["steps-deit-t", "steps-deit-s", "steps-deit-b-302", "toy-lm-steps2", "toy-mlp-steps3"];
    for name in names {
        let spec = network_preset(name).unwrap();
        let m = spec.body.mirrored();
        let n = spec.seq_len() as u64;
        let ok = mirrored_params(&m) == body_params(&spec.body) && mirrored_flops(&m, n) == body_flops(&spec.body, n);
        same_cost += usize::from(ok);
    }

    let mut r = ChaCha8Rng::seed_from_u64(9);
    let cfg = StepsConfig::from_step_widths(BlockKind::Transformer, &[8, 16, 24], &[2, 1, 1], &[2, 2, 3]).unwrap();
    let live = StepsModel::<f64>::new(cfg.clone(), &Init::default(), &mut r).unwrap();
    let mirrored_live = MirroredStepsModel::<f64>::new(cfg.mirrored(), &Init::default(), &mut r).unwrap();
    let live_params = live.param_count() == mirrored_live.param_count();

    let widths = cfg.mirrored().widths.clone();
    let ident = MirroredStepsModel::<f64>::new(cfg.mirrored(), &Init::zero_branches(), &mut r).unwrap();
    let x = Tensor::<f64>::randn(&[5, 24], 1.0, &mut r);
    let y = ident.apply(&x, &SeqContext::new(5, false)).unwrap();
    let map = mirrored_channel_map(&widths);
    let mut sorted = map.clone();
    sorted.sort_unstable();
    let bijection = sorted == (0..24).collect::<Vec<_>>();
    let moved = (0..5).all(|row| map.iter().enumerate().all(|(j, &src)| y.row(row)[j] == x.row(row)[src]));
    verdict(
        9,
        same_cost == names.len() && live_params && bijection && moved,
        format!(
            "params+FLOPs equal on {same_cost}/{} configs; live params equal {live_params}; identity mirrored model is a channel bijection {}",
            names.len(),
            bijection && moved
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Desk-scale training.

const SPIRAL_STEPS: usize = 2000;
const SPIRAL_LOSS: f64 = 0.05;
const SPIRAL_SECONDS: f64 = 180.0;
const CHARLM_STEPS: usize = 300;
const CHARLM_STEP_BUDGET: usize = 5000;
const MASK_SEEDS: u64 = 3;

fn spiral_config(name: &str, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(TaskId::Spiral2, network_preset(name).unwrap(), SPIRAL_STEPS, 64);
    cfg.optimizer.lr = 2e-3;
    cfg.eval_every = 500;
    cfg.seed = seed;
    cfg
}

#[test]
fn criterion_10_desk_scale_training() {
    let t = Instant::now();
    let res = train(&spiral_config("toy-mlp-residual", 0)).unwrap();
    let steps3 = train(&spiral_config("toy-mlp-steps3", 0)).unwrap();
    let spiral_secs = t.elapsed().as_secs_f64();
    let (res_best, st_best) = (res.best_loss().unwrap(), steps3.best_loss().unwrap());
    let spiral_ok = res_best < SPIRAL_LOSS && st_best < SPIRAL_LOSS && spiral_secs < SPIRAL_SECONDS;

    let spec = stepsnet::presets::toy_lm(&[32, 48], &[2, 1], &[4, 4], 128, 64).unwrap();
    let mut lm = TrainConfig::new(TaskId::Charlm, spec, CHARLM_STEPS, 8);
    lm.optimizer.lr = 3e-3;
    lm.eval_every = 100;
    let baseline = unigram_perplexity(&make_task(TaskId::Charlm, 0).unwrap()).unwrap();
    let lm_rec = train(&lm).unwrap();
    let best_ppl = lm_rec.samples.iter().filter_map(|s| s.eval_metric).fold(f64::INFINITY, f64::min);
    let lm_ok = best_ppl < baseline && CHARLM_STEPS <= CHARLM_STEP_BUDGET;

    let mut k0_exact = true;
    let mut direction = 0;
    let mut cells = Vec::new();
    for seed in 0..MASK_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = spiral_config("toy-mlp-steps3", seed);
        cfg.output_dir = Some(dir.path().to_path_buf());
        let rec = train(&cfg).unwrap();
        let report = ablation_sweep(SweepKind::MaskTable6, &cfg, rec.checkpoint.as_deref()).unwrap();
        let d1 = cfg.model.body.slice_widths[0];
        for path in [Path::Slow, Path::Fast] {
            k0_exact &= report.mask_row(path, 0).unwrap().metric == rec.last_eval().unwrap();
        }
        let slow = report.mask_row(Path::Slow, d1).unwrap().metric;
        let fast = report.mask_row(Path::Fast, d1).unwrap().metric;
        direction += usize::from(slow <= fast);
        cells.push(format!("{slow:.2}<={fast:.2}"));
    }
    let mask_ok = k0_exact && direction == MASK_SEEDS as usize;
    verdict(
        10,
        spiral_ok && lm_ok && mask_ok,
        format!(
            "spiral2 best loss residual {res_best:.4} steps3 {st_best:.4} (< {SPIRAL_LOSS}) in {spiral_secs:.0}s; \
             charlm ppl {best_ppl:.2} vs unigram {baseline:.2} after {CHARLM_STEPS} steps; \
             mask k=0 exact {k0_exact}; slow-vs-fast accuracy with all {} slow channels masked [{}] on {direction}/{MASK_SEEDS} seeds",
            spiral_config("toy-mlp-steps3", 0).model.body.slice_widths[0],
            cells.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Reproducibility.

#[test]
fn criterion_11_byte_identical_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csv = Vec::new();
    let mut ck = Vec::new();
    for d in &dirs {
        let spec = stepsnet::presets::toy_lm(&[16, 24], &[1, 1], &[2, 2], 128, 64).unwrap();
        let mut cfg = TrainConfig::new(TaskId::Charlm, spec, 20, 4);
        cfg.seed = 11;
        cfg.eval_every = 10;
        cfg.output_dir = Some(d.path().to_path_buf());
        train(&cfg).unwrap();
        csv.push(std::fs::read(d.path().join("run.csv")).unwrap());
        ck.push(std::fs::read(d.path().join("checkpoint.ssnc")).unwrap());
    }
    let ok = csv[0] == csv[1] && ck[0] == ck[1] && !ck[0].is_empty();
    verdict(11, ok, format!("run.csv identical {}, checkpoint identical {} ({} bytes)", csv[0] == csv[1], ck[0] == ck[1], ck[0].len()));
}
