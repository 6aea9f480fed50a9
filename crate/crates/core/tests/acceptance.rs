//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dirmlab::assign::{AssignContext, AttributeGroup, GroupSet, Phase, SwitchState};
use dirmlab::geometry::{rotated_iou_bev, Box7};
use dirmlab::metrics::EvalReport;
use dirmlab::model::nn::{channel_max, gate_product, sigmoid};
use dirmlab::model::{iou_label, HeadParams, HeadShape, IqpMode, Region};
use dirmlab::runner::{evaluate_model, generate_dataset, train_model, ExecOptions, RunConfig};
use dirmlab::scene::{generate_frames, Pixel, SceneConfig};
use dirmlab::tensor::Tensor3;

use common::gradcheck::{bce_max_rel_err, focal_max_rel_err, head_max_rel_err, l1_max_rel_err, MAX_REL_ERR};
use common::{monte_carlo_iou_bev, random_box_pair};

const GEOMETRY_PAIRS: usize = 1000;
/// Stratified grid side; `n^2 = 10^6` samples per pair.
const GEOMETRY_GRID: usize = 1000;
const GEOMETRY_TOL: f64 = 2e-3;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(60);
const SQUARE_IOU: f64 = 0.707107;
const SQUARE_TOL: f64 = 1e-6;

const GRADIENT_BUDGET: Duration = Duration::from_secs(30);

const ASSIGN_FRAMES: usize = 100;
const ASSIGN_SAMPLES: usize = 4;

const RUN_BUDGET: Duration = Duration::from_secs(120);

/// Directional benchmark criteria that do not hold on the committed
/// benchmark. They still run and print FAIL; only a failure outside this
/// list fails the target.
const KNOWN_FAILING: [usize; 3] = [6, 7, 8];

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, title: &'static str, pass: bool, detail: String) -> Verdict {
    let v = Verdict {
        id,
        title,
        pass,
        detail,
    };
    println!(
        "criterion {} {}: {} ({})",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.title,
        v.detail
    );
    v
}

fn geometry_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut worst = 0.0f64;
    for _ in 0..GEOMETRY_PAIRS {
        let (a, b) = random_box_pair(&mut rng);
        let exact = rotated_iou_bev(&a, &b);
        worst = worst.max((exact - monte_carlo_iou_bev(&a, &b, GEOMETRY_GRID, &mut rng)).abs());
    }
    let square = |t| Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, t);
    let diag = rotated_iou_bev(&square(0.0), &square(FRAC_PI_4));
    let elapsed = start.elapsed();
    verdict(
        1,
        "rotated IoU against a sampling oracle",
        worst < GEOMETRY_TOL && (diag - SQUARE_IOU).abs() < SQUARE_TOL && elapsed < GEOMETRY_BUDGET,
        format!(
            "{GEOMETRY_PAIRS} pairs, max |exact - sampled| {worst:.2e} < {GEOMETRY_TOL:.0e}; \
             45-degree square {diag:.7}; {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut seed = 100;
    for iqp in [IqpMode::Off, IqpMode::V1, IqpMode::V2] {
        for region in [Region::Dense, Region::sparse(vec![0, 5, 6, 15])] {
            worst = worst.max(head_max_rel_err(iqp, region, seed));
            seed += 1;
        }
    }
    for s in 0..3 {
        worst = worst
            .max(focal_max_rel_err(s))
            .max(bce_max_rel_err(s))
            .max(l1_max_rel_err(s));
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "finite-difference gradient checks",
        worst < MAX_REL_ERR && elapsed < GRADIENT_BUDGET,
        format!(
            "heads off/v1/v2 dense and sparse plus focal, BCE, L1; max relative error {worst:.2e} < {MAX_REL_ERR:.0e}; {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn pseudo_quality(gt: usize, p: Pixel) -> f64 {
    let h = (gt as u64 + 7).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((p.i as u64) << 20 | p.j as u64);
    (h % 1000) as f64 / 1000.0
}

fn assignment_invariants() -> Verdict {
    let cfg = SceneConfig::default();
    let frames = generate_frames(&cfg, 31, 0, ASSIGN_FRAMES);
    let mut failures = Vec::new();
    let mut long_range = 0usize;
    let mut switch = SwitchState::new(0.55, ASSIGN_SAMPLES, 0.9);
    let mut went_dynamic = false;
    for f in &frames {
        let ctx = AssignContext::new(f, &cfg.grid);
        let fixed = SwitchState {
            phase: Phase::Static,
            ..switch
        };
        let dynamic = SwitchState {
            phase: Phase::Dynamic,
            ..switch
        };
        let plans = [
            ctx.dar_static(GroupSet::only_center(), ASSIGN_SAMPLES),
            ctx.dar_dynamic(GroupSet::only_center(), ASSIGN_SAMPLES, &pseudo_quality),
            ctx.dar_switch(GroupSet::only_center(), &fixed, &pseudo_quality),
            ctx.dar_switch(GroupSet::only_center(), &dynamic, &pseudo_quality),
        ];
        for plan in &plans {
            for gt in &plan.gts {
                for g in [AttributeGroup::Z, AttributeGroup::Lwh, AttributeGroup::Theta] {
                    let s = gt.group(g);
                    if s.len() != 1 || s[0].pixel != gt.center {
                        failures.push(format!("frame {}: {} not single-center", f.frame_id, g.name()));
                    }
                }
                for s in gt.group(AttributeGroup::Xy) {
                    let d = s.target[0].abs().max(s.target[1].abs());
                    if s.pixel != gt.center {
                        long_range += 1;
                        if d <= 0.5 {
                            failures.push(format!("frame {}: non-center offset {d}", f.frame_id));
                        }
                    }
                }
            }
        }
        if ctx.multipos(0) != ctx.baseline() {
            failures.push(format!("frame {}: multipos(0) differs from baseline", f.frame_id));
        }
        for g in AttributeGroup::ALL {
            if plans[2].num_samples(g) != plans[3].num_samples(g) {
                failures.push(format!("frame {}: {} sample count changes across phases", f.frame_id, g.name()));
            }
        }
        // Drive the switch with this frame's center quality.
        let centers: Vec<f64> = ctx.gts.iter().enumerate().map(|(k, g)| pseudo_quality(k, g.center)).collect();
        if !centers.is_empty() {
            let next = switch.update(centers.iter().sum::<f64>() / centers.len() as f64 + 0.3);
            if went_dynamic && next.phase != Phase::Dynamic {
                failures.push(format!("frame {}: switch left the dynamic phase", f.frame_id));
            }
            went_dynamic |= next.phase == Phase::Dynamic;
            switch = next;
        }
    }
    if long_range == 0 {
        failures.push("no non-center samples were produced".into());
    }
    if !went_dynamic {
        failures.push("the switch never reached the dynamic phase".into());
    }
    verdict(
        3,
        "assignment invariants",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{ASSIGN_FRAMES} frames, {long_range} non-center samples checked")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

fn closed_form_checks() -> Verdict {
    let mut failures = Vec::new();
    let t = Tensor3::from_fn(3, 3, 3, |c, i, j| ((c * 7 + i * 3 + j) % 5) as f64 - 2.0);
    let (m, _) = channel_max(&t);
    for k in 0..9 {
        let expect = (0..3).map(|c| t.at_flat(c, k)).fold(f64::NEG_INFINITY, f64::max);
        if m.at_flat(0, k) != expect {
            failures.push(format!("channel max at {k}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = HeadShape {
        in_channels: 4,
        hidden: 4,
        num_classes: 3,
        iqp: IqpMode::V2,
    };
    let mut params = HeadParams::init(shape, &mut rng);
    let obj = params.obj.as_mut().expect("v2 has an objectness branch");
    obj.conv2.weight.iter_mut().for_each(|w| *w = 0.0);
    obj.conv2.bias.iter_mut().for_each(|b| *b = 0.0);
    let x = Tensor3::from_fn(4, 4, 4, |c, i, j| (c as f64 - 1.5) * 0.7 + i as f64 * 0.3 - j as f64 * 0.2);
    let (out, _) = params.forward(&x, &Region::Dense).expect("shapes agree");
    let gate = out.gate.expect("v2 gates the iou branch");
    let gated = gate_product(&gate, &x);
    if sigmoid(0.0) != 0.5 || gated.data.iter().zip(&x.data).any(|(g, v)| *g != 0.5 * v) {
        failures.push("zero objectness logit does not give 0.5 * X".into());
    }

    for (iou, label) in [(0.8, 0.6), (0.5, 0.0), (0.0, -1.0)] {
        if (iou_label(iou) - label).abs() > f64::EPSILON {
            failures.push(format!("encode({iou}) = {}", iou_label(iou)));
        }
    }
    verdict(
        4,
        "closed-form checks of channel max, gating and quality encoding",
        failures.is_empty(),
        if failures.is_empty() {
            "channel max, 0.5 * X gate, encode 0.8 -> 0.6 / 0.5 -> 0 / 0 -> -1".into()
        } else {
            failures.join("; ")
        },
    )
}

/// Per-cell seed results of the benchmark matrix.
struct Benchmark {
    reports: BTreeMap<String, Vec<EvalReport>>,
    slowest: Duration,
    failures: Vec<String>,
}

impl Benchmark {
    fn mean(&self, cell: &str, metric: impl Fn(&EvalReport) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self.reports.get(cell).into_iter().flatten().filter_map(metric).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    fn map(&self, cell: &str) -> f64 {
        self.mean(cell, |r| r.map)
    }
}

fn benchmark_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.conf");
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_benchmark() -> Benchmark {
    let cfg = benchmark_config();
    let (train, eval) = generate_dataset(&cfg).expect("benchmark dataset");
    let opts = ExecOptions::default();
    let mut reports: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut slowest = Duration::ZERO;
    let mut failures = Vec::new();
    for (cell, overrides) in &cfg.cells {
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let outcome = cfg.cell_config(overrides, seed).and_then(|c| {
                let t = train_model(&c, &train, opts)?;
                evaluate_model(&c, &t.params, &eval, opts)
            });
            let elapsed = start.elapsed();
            slowest = slowest.max(elapsed);
            match outcome {
                Ok((r, _)) => {
                    println!(
                        "  {cell:<15} seed {seed}: mAP {:.4} vehicle AP {:.4} MRPE {:.1} mse_low {:.4} ({:.1} s)",
                        r.map.unwrap_or(f64::NAN),
                        r.ap[0].unwrap_or(f64::NAN),
                        r.mrpe.unwrap_or(f64::NAN),
                        r.mse_low.unwrap_or(f64::NAN),
                        elapsed.as_secs_f64()
                    );
                    reports.entry(cell.clone()).or_default().push(r);
                }
                Err(e) => failures.push(format!("{cell} seed {seed}: {e}")),
            }
        }
    }
    Benchmark {
        reports,
        slowest,
        failures,
    }
}

fn runs_ok(b: &Benchmark) -> bool {
    b.failures.is_empty() && b.slowest < RUN_BUDGET
}

fn run_note(b: &Benchmark) -> String {
    let mut s = format!("slowest run {:.1} s < {} s", b.slowest.as_secs_f64(), RUN_BUDGET.as_secs());
    if let Some(f) = b.failures.first() {
        s.push_str(&format!("; failed run {f}"));
    }
    s
}

fn sample_ablation(b: &Benchmark) -> Verdict {
    let vehicle = |c: &str| b.mean(c, |r| r.ap[0]);
    let multipos = vehicle("multipos");
    let dar_beats = ["static", "dynamic", "switch"].iter().all(|c| vehicle(c) > multipos);
    let switch_ge_static = b.map("switch") >= b.map("static");
    verdict(
        5,
        "sample assignment ablation",
        switch_ge_static && dar_beats && runs_ok(b),
        format!(
            "mAP switch {:.4} >= static {:.4}; vehicle AP static {:.4} dynamic {:.4} switch {:.4} > multipos {multipos:.4}; {}",
            b.map("switch"),
            b.map("static"),
            vehicle("static"),
            vehicle("dynamic"),
            vehicle("switch"),
            run_note(b)
        ),
    )
}

fn quality_ablation(b: &Benchmark) -> Verdict {
    let (v2, v1, off) = (b.map("switch"), b.map("switch_v1"), b.map("switch_off"));
    let mse_v2 = b.mean("switch", |r| r.mse_low);
    let mse_direct = b.mean("switch_off_iou", |r| r.mse_low);
    verdict(
        6,
        "quality prediction ablation",
        v2 >= v1 && v1 > off && mse_v2 < mse_direct,
        format!(
            "mAP v2 {v2:.4} >= v1 {v1:.4} > off {off:.4}; mse_low v2 {mse_v2:.4} < direct {mse_direct:.4}"
        ),
    )
}

fn center_error(b: &Benchmark) -> Verdict {
    let full = b.mean("switch", |r| r.mrpe);
    let base = b.mean("baseline_off", |r| r.mrpe);
    verdict(
        7,
        "center offset error",
        full < base,
        format!("MRPE switch+v2 {full:.2}% < baseline {base:.2}%"),
    )
}

fn component_ablation(b: &Benchmark) -> Verdict {
    let a = b.map("baseline_off");
    let bb = b.map("switch_off");
    let c = b.map("baseline_v2");
    let d = b.map("switch");
    verdict(
        8,
        "component ablation",
        d >= bb && d >= c && bb >= a && c >= a,
        format!("mAP (d) {d:.4} >= (b) {bb:.4}, (c) {c:.4} >= (a) {a:.4}"),
    )
}

const REPRO_CONFIG: &str = "\
grid_height = 24
grid_width = 24
cell = 1.0
channels = 6
hidden = 6
min_objects = 1
max_objects = 3
train_frames = 6
eval_frames = 4
epochs = 2
batch_size = 3
seeds = 0,1
cell.base = strategy=baseline iqp=off train_iou=false
cell.full = strategy=switch iqp=v2
";

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dirmlab"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "run.conf", "--serial"])
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    std::fs::write(dir.join("run.conf"), REPRO_CONFIG).map_err(|e| e.to_string())?;
    run_cli(dir, &["gen", "--out", "data"])?;
    run_cli(dir, &["train", "--data", "data", "--out", "model"])?;
    run_cli(dir, &["eval", "--data", "data", "--out", "model"])?;
    run_cli(dir, &["ablate", "--out", "ablation"])?;
    run_cli(dir, &["diag", "--data", "data", "--out", "diag", "--oracle", "--checkpoint", "m=model/model.json"])?;
    let mut files = BTreeMap::new();
    for sub in ["data", "model", "ablation", "diag"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub))
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        entries.sort();
        for p in entries {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            files.insert(p.strip_prefix(dir).expect("under dir").to_path_buf(), bytes);
        }
    }
    Ok(files)
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let result = pipeline(a.path()).and_then(|x| pipeline(b.path()).map(|y| (x, y)));
    let (pass, detail) = match result {
        Ok((x, y)) => {
            let differing: Vec<String> = x
                .iter()
                .filter(|(k, v)| y.get(*k) != Some(*v))
                .map(|(k, _)| k.display().to_string())
                .collect();
            let pass = differing.is_empty() && x.len() == y.len() && !x.is_empty();
            let detail = if pass {
                format!("{} output files identical across two serial runs", x.len())
            } else {
                format!("differing files: {}", differing.join(", "))
            };
            (pass, detail)
        }
        Err(e) => (false, e),
    };
    verdict(9, "serial re-runs are bit-exact", pass, detail)
}

fn main() -> ExitCode {
    let mut verdicts = vec![
        geometry_oracle(),
        gradient_suite(),
        assignment_invariants(),
        closed_form_checks(),
    ];
    println!("benchmark matrix (configs/benchmark.conf):");
    let bench = run_benchmark();
    verdicts.push(sample_ablation(&bench));
    verdicts.push(quality_ablation(&bench));
    verdicts.push(center_error(&bench));
    verdicts.push(component_ablation(&bench));
    verdicts.push(determinism());

    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed} of {} criteria passed", verdicts.len());
    let known = labels(&verdicts, |v| !v.pass && KNOWN_FAILING.contains(&v.id));
    if !known.is_empty() {
        println!("known failures: {known}");
    }
    let fixed = labels(&verdicts, |v| v.pass && KNOWN_FAILING.contains(&v.id));
    if !fixed.is_empty() {
        println!("now passing, drop from KNOWN_FAILING: {fixed}");
    }
    let unexpected = labels(&verdicts, |v| !v.pass && !KNOWN_FAILING.contains(&v.id));
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {unexpected}");
        ExitCode::FAILURE
    }
}

fn labels(verdicts: &[Verdict], keep: impl Fn(&Verdict) -> bool) -> String {
    let v: Vec<String> = verdicts
        .iter()
        .filter(|v| keep(v))
        .map(|v| format!("{} ({})", v.id, v.title))
        .collect();
    v.join(", ")
}
