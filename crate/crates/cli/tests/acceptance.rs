//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! criterion fails.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ropetp_cli::commands::{self, EvalReport};
use ropetp_cli::gradcheck::{run_suite, standard_cases};
use ropetp_cli::RunConfig;
use ropetp_core::body::BodyTemplate;
use ropetp_core::camera::{project, rasterize_part_masks, PartMask, WeakPerspectiveCam};
use ropetp_core::diffusion::{
    build_schedule, ddim_step, ddpm_step, foot_contacts, predict_x0, q_sample, sample, traj_loss, FootTarget, ScheduleKind, TrajDataset,
    DEFAULT_V_THRESH, FEET,
};
use ropetp_core::hierarchy::{default_partition, Level};
use ropetp_core::metrics::{mpjpe, mpvpe, pa_mpjpe, procrustes_align, w_mpjpe, wa_mpjpe, yaw};
use ropetp_core::rope::RopeVariant;
use ropetp_core::synth::{gen_locomotion, GaitSpec, SceneRecord, SceneSpec};
use ropetp_core::{Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let results = run_suite(&standard_cases(), 10, 2024, 1e-5);
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!("{} checks, worst {} at {:.2e}, {secs:.1} s, failures {failed:?}", results.len(), worst.name, worst.max_rel_error),
    )
}

fn diffusion_algebra() -> Outcome {
    let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identity: f64 = 0.0;
    for t in 1..=1000 {
        let r0 = randn(&mut rng, &[60, 3]);
        let eps = randn(&mut rng, &[60, 3]);
        let rt = q_sample(&r0, t, &eps, &s).unwrap();
        identity = identity.max(predict_x0(&rt, t, &eps, &s).unwrap().max_abs_diff(&r0));
    }
    let r0 = randn(&mut rng, &[4, 60, 3]);
    let mut recover: f64 = 0.0;
    for steps in [1, 10, 100] {
        let out = sample(|_, _| Ok(r0.clone()), &[4, 60, 3], steps, &s, steps as u64).unwrap();
        recover = recover.max(out.max_abs_diff(&r0));
    }
    // one reverse step from a fixed state: ancestral vs DDIM with matching variance
    let t = 100;
    let (rt, e) = (Tensor::vector(vec![0.8]), Tensor::vector(vec![0.5]));
    let sigma = s.beta(t).sqrt();
    let draws = 100_000;
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..draws {
        a += ddpm_step(&rt, t, &e, &s, &randn(&mut rng, &[1])).unwrap().item();
        b += ddim_step(&rt, t, t - 1, &e, &s, sigma, Some(&randn(&mut rng, &[1]))).unwrap().item();
    }
    let gap = ((a - b) / draws as f64).abs();
    outcome(
        identity < 1e-12 && recover < 1e-8 && gap < 1e-2,
        format!("x0 identity {identity:.1e}, oracle DDIM {recover:.1e}, MC mean gap {gap:.1e}"),
    )
}

fn report(dir: &Path) -> EvalReport {
    EvalReport::load(dir).unwrap()
}

fn trajectory_prior(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let mut cfg = RunConfig::with_seed(1);
    cfg.out = root.join("traj");
    cfg.gen.scenes = 1;
    cfg.gen.held_out_scenes = 1;
    commands::gen_data(&cfg).unwrap();
    commands::train_traj(&cfg, false).unwrap();
    let mut uncond = cfg.clone();
    uncond.traj.train.conditioned = false;
    commands::train_traj(&uncond, false).unwrap();
    commands::sample(&cfg).unwrap();
    commands::eval(&cfg).unwrap();
    let r = report(&cfg.out);
    let (model, base, abl) = (r.trajectory["traj"].wa_mpjpe, r.trajectory["mean_baseline"].wa_mpjpe, r.trajectory["traj_uncond"].wa_mpjpe);
    let secs = t0.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let budget = 900.0 * 4.0 / cores as f64;
    outcome(
        model <= 0.7 * base && model <= 0.8 * abl && secs < budget,
        format!(
            "WA-MPJPE {model:.1} mm vs mean path {base:.1} ({:.0}% lower) and unconditional {abl:.1} ({:.0}% lower), {secs:.0} s of {budget:.0} s budget on {cores} cores",
            100.0 * (1.0 - model / base),
            100.0 * (1.0 - model / abl)
        ),
    )
}

/// Full and Indep-only regressors under quarter-area occluders, per seed.
fn occlusion_direction(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let mut lines = vec![];
    let mut pass = true;
    for seed in 0..5 {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.out = root.join(format!("occ{seed}"));
        cfg.gen.sequences = 2;
        cfg.gen.held_out_sequences = 0;
        cfg.rope.train.model.width = 64;
        cfg.rope.train.model.icl_dim = 64;
        commands::gen_data(&cfg).unwrap();
        commands::train_rope(&cfg, false).unwrap();
        let mut indep = cfg.clone();
        indep.rope.train.model.variant = RopeVariant::IndepOnly;
        commands::train_rope(&indep, false).unwrap();
        commands::sample(&cfg).unwrap();
        commands::eval(&cfg).unwrap();
        let r = report(&cfg.out);
        let (full, ind) = (&r.regression["rope"], &r.regression["rope_indep"]);
        let (df, di) = (full.degradation.unwrap(), ind.degradation.unwrap());
        pass &= df <= 0.75 * di;
        lines.push(format!(
            "seed {seed}: {:.1}->{:.1} vs {:.1}->{:.1}",
            full.mpjpe,
            full.occluded_mpjpe.unwrap(),
            ind.mpjpe,
            ind.occluded_mpjpe.unwrap()
        ));
    }
    outcome(pass, format!("MPJPE clean->occluded, full vs indep: {}; {:.0} s", lines.join(", "), t0.elapsed().as_secs_f64()))
}

fn rows(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn from_rows(shape: &[usize], pts: &[Vector3<f64>]) -> Tensor {
    Tensor::new(shape.to_vec(), pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap()
}

/// Residual of the best scale and translation for a fixed rotation.
fn residual_for(r: &Matrix3<f64>, p: &[Vector3<f64>], g: &[Vector3<f64>]) -> f64 {
    let n = p.len() as f64;
    let pm = p.iter().sum::<Vector3<f64>>() / n;
    let gm = g.iter().sum::<Vector3<f64>>() / n;
    let rp: Vec<Vector3<f64>> = p.iter().map(|x| r * (x - pm)).collect();
    let num: f64 = rp.iter().zip(g).map(|(a, b)| a.dot(&(b - gm))).sum();
    let den: f64 = rp.iter().map(|a| a.norm_squared()).sum();
    let s = (num / den).max(0.0);
    rp.iter().zip(g).map(|(a, b)| (s * a - (b - gm)).norm_squared()).sum()
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..4);
        let pred = randn(&mut rng, &[n, 24, 3]);
        let gt = randn(&mut rng, &[n, 24, 3]);
        ordered += (pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap()) as usize;
    }

    // local grid about each axis of the fitted rotation
    let step = 0.01f64.to_radians();
    let mut local_ok = true;
    for _ in 0..5 {
        let p = rows(&randn(&mut rng, &[24, 3]));
        let truth = Rotation3::from_scaled_axis(Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0).into_inner();
        let g: Vec<Vector3<f64>> =
            p.iter().map(|x| 1.3 * (truth * x) + Vector3::new(0.5, -1.0, 2.0) + 0.05 * rows(&randn(&mut rng, &[1, 3]))[0]).collect();
        let fit = procrustes_align(&from_rows(&[24, 3], &p), &from_rows(&[24, 3], &g)).unwrap();
        let base = residual_for(&fit.r, &p, &g);
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let (mut best_k, mut best) = (0i32, f64::INFINITY);
            for k in -200i32..=200 {
                let r = Rotation3::from_scaled_axis(axis * (k as f64 * step)).into_inner() * fit.r;
                let c = residual_for(&r, &p, &g);
                if c < best {
                    (best_k, best) = (k, c);
                }
            }
            local_ok &= best_k.abs() <= 1 && base <= best + 1e-12;
        }
    }

    // planar body: the optimum is a pure yaw, searched over the full circle
    let mut yaw_gap: f64 = 0.0;
    for _ in 0..5 {
        let p: Vec<Vector3<f64>> = (0..24).map(|_| Vector3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0))).collect();
        let psi = rng.random_range(-3.0..3.0);
        let g: Vec<Vector3<f64>> = p
            .iter()
            .map(|x| 0.8 * (yaw(psi) * x) + Vector3::new(rng.random_range(-0.03..0.03), 0.0, rng.random_range(-0.03..0.03)))
            .collect();
        let fit = procrustes_align(&from_rows(&[24, 3], &p), &from_rows(&[24, 3], &g)).unwrap();
        let (mut best_psi, mut best) = (0.0, f64::INFINITY);
        for k in 0..36_000 {
            let a = k as f64 * step - std::f64::consts::PI;
            let c = residual_for(&yaw(a), &p, &g);
            if c < best {
                (best_psi, best) = (a, c);
            }
        }
        let delta = Rotation3::from_matrix_unchecked(fit.r.transpose() * yaw(best_psi)).angle();
        yaw_gap = yaw_gap.max(delta.to_degrees());
    }

    // transformed copies
    let gt = randn(&mut rng, &[6, 24, 3]);
    let mut zeros = vec![mpjpe(&gt, &gt).unwrap(), mpvpe(&gt, &gt).unwrap()];
    let sim = Rotation3::from_scaled_axis(Vector3::new(0.3, -1.2, 0.8)).into_inner();
    let pts = rows(&gt);
    zeros.push(
        pa_mpjpe(&from_rows(&[6, 24, 3], &pts.iter().map(|x| 2.5 * (sim * x) + Vector3::new(3.0, 1.0, -2.0)).collect::<Vec<_>>()), &gt)
            .unwrap(),
    );
    let moved = from_rows(&[6, 24, 3], &pts.iter().map(|x| yaw(2.2) * x + Vector3::new(-4.0, 0.5, 1.0)).collect::<Vec<_>>());
    zeros.push(w_mpjpe(&moved, &gt).unwrap().mm);
    zeros.push(wa_mpjpe(&moved, &gt).unwrap().mm);
    let worst_zero = zeros.iter().cloned().fold(0.0, f64::max);

    outcome(
        ordered == 1000 && local_ok && yaw_gap <= 0.01 && worst_zero < 1e-9,
        format!("PA <= MPJPE in {ordered}/1000, local grid optimum at fit: {local_ok}, yaw grid gap {yaw_gap:.4} deg, largest copy error {worst_zero:.1e} mm"),
    )
}

/// Per-pixel scan over every vertex.
fn brute_mask(uv: &Tensor, depth: &[f64], part: &[usize], h: usize, w: usize) -> PartMask {
    let mut labels = vec![0u16; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(f64, usize)> = None;
            for k in 0..depth.len() {
                let (u, v) = (uv.data()[2 * k], uv.data()[2 * k + 1]);
                let inside =
                    u >= j as f64 / w as f64 && u < (j + 1) as f64 / w as f64 && v >= i as f64 / h as f64 && v < (i + 1) as f64 / h as f64;
                if inside && best.is_none_or(|(d, _)| depth[k] < d) {
                    best = Some((depth[k], k));
                }
            }
            if let Some((_, k)) = best {
                labels[i * w + j] = part[k] as u16 + 1;
            }
        }
    }
    PartMask { h, w, labels }
}

fn rasterizer_exactness() -> Outcome {
    let body = BodyTemplate::procedural(768).unwrap();
    let table = default_partition();
    let joint = body.vertex_joint();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut equal = 0;
    for i in 0..100 {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let spec = SceneSpec { h, w, ..SceneSpec::default() };
        let rec = SceneRecord::sample(&spec, 99, i, &table);
        let out = body.forward_params(&rec.params).unwrap();
        let uv = project(&out.vertices, &WeakPerspectiveCam::from_tensor(&rec.params.cam).unwrap()).unwrap();
        let depth: Vec<f64> = out.vertices.data().chunks(3).map(|p| -p[2]).collect();
        let level = Level::ALL[i as usize % 4];
        let part: Vec<usize> = joint.iter().map(|&j| table.part_of(level, j)).collect();
        let fast = rasterize_part_masks(&uv, &depth, &part, h, w, level.part_count()).unwrap();
        equal += (fast == brute_mask(&uv, &depth, &part, h, w)) as usize;
    }
    outcome(equal == 100, format!("{equal}/100 scenes identical"))
}

fn foot_contacts_check() -> Outcome {
    let body = BodyTemplate::procedural(192).unwrap();
    let mut agree = [0usize; 2];
    let mut total = [0usize; 2];
    let mut foot_loss: f64 = 0.0;
    for seed in 0..20u64 {
        let default = GaitSpec { seed, frames: 120 + 7 * seed as usize, cadence: 0.8 + 0.03 * seed as f64, ..GaitSpec::default() };
        for (k, spec) in [default, GaitSpec::random(seed, 60, 30.0)].into_iter().enumerate() {
            let s = gen_locomotion(&spec, &body).unwrap();
            let labels = s.contacts.clone().unwrap();
            let found = foot_contacts(&s.joint_heights(&FEET), 2, DEFAULT_V_THRESH).unwrap();
            for (a, b) in found.iter().zip(&labels) {
                for f in 0..2 {
                    agree[k] += (a[f] == b[f]) as usize;
                    total[k] += 1;
                }
            }
            let n = s.frames();
            let d = TrajDataset::new(std::slice::from_ref(&s), FootTarget::Feet, DEFAULT_V_THRESH).unwrap();
            let gate: Vec<f64> = labels.iter().flatten().map(|&c| c as u8 as f64).collect();
            let tape = Tape::new();
            let l = traj_loss(
                tape.constant(d.r(&[0])),
                tape.constant(d.r(&[0])),
                tape.constant(d.offsets(&[0])),
                tape.constant(Tensor::new(vec![1, n - 1, 2], gate).unwrap()),
                0.1,
                1.0,
            )
            .unwrap();
            foot_loss = foot_loss.max(l.foot.value().item());
        }
    }
    let rate = |k: usize| agree[k] as f64 / total[k] as f64;
    outcome(
        rate(0) >= 0.95 && foot_loss < 1e-9,
        format!(
            "agreement {:.2}% on default specs ({:.2}% on randomised ones), max pinned L_foot {foot_loss:.1e}",
            100.0 * rate(0),
            100.0 * rate(1)
        ),
    )
}

const SMALL: &str = r#"
seed = 21
template_vertices = 192
[gen]
sequences = 6
held_out_sequences = 3
frames = 10
scenes = 6
held_out_scenes = 3
[gen.scene]
h = 8
w = 8
c = 32
[traj]
steps = 3
[traj.train]
batch = 3
diffusion_steps = 40
denoiser = { layers = 2, width = 16, heads = 2 }
[rope]
steps = 3
[rope.train]
batch = 3
model = { channels = 32, width = 16, heads = 2, icl_dim = 16, head_hidden = 16 }
[sample]
ddim_steps = 4
occluders = [{ top = 0, left = 0, height = 4, width = 4 }]
[occmap]
occluder = [4, 4]
stride = 2
"#;

fn determinism(root: &Path) -> Outcome {
    let run = |dir: &str| {
        let mut cfg = RunConfig::from_toml(SMALL).unwrap();
        cfg.out = root.join(dir);
        commands::gen_data(&cfg).unwrap();
        commands::train_traj(&cfg, false).unwrap();
        commands::train_rope(&cfg, false).unwrap();
        commands::sample(&cfg).unwrap();
        commands::eval(&cfg).unwrap();
        commands::occmap(&cfg).unwrap();
        commands::gradcheck(&cfg.out, cfg.seed, &mut std::io::sink()).unwrap();
        cfg.out
    };
    let (a, b) = (run("det_a"), run("det_b"));
    let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let differing: Vec<&String> =
        names.iter().filter(|n| *n != "manifest.json").filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok()).collect();
    outcome(differing.is_empty() && names.len() > 10, format!("{} files compared, differing {differing:?}", names.len() - 1))
}

fn main() {
    ropetp_cli::tune_allocator();
    let root = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("diffusion algebra", Box::new(diffusion_algebra)),
        ("trajectory prior", Box::new(|| trajectory_prior(root.path()))),
        ("occlusion robustness", Box::new(|| occlusion_direction(root.path()))),
        ("metric correctness", Box::new(metric_correctness)),
        ("rasterizer exactness", Box::new(rasterizer_exactness)),
        ("foot contacts", Box::new(foot_contacts_check)),
        ("determinism", Box::new(|| determinism(root.path()))),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let o = run();
        failed += !o.pass as usize;
        let mark = if o.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stdout(), "acceptance {} {name}: {mark} ({})", i + 1, o.detail);
    }
    if failed > 0 {
        let _ = writeln!(std::io::stdout(), "acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}
