use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ropetp_core::body::diff::{body_forward, rot6d_to_rotmat};
use ropetp_core::body::{BodyParams, BodyTemplate};
use ropetp_core::camera::{project_var, PartMask};
use ropetp_core::diffusion::{traj_loss, Denoiser, DenoiserConfig};
use ropetp_core::hierarchy::{default_partition, expand_to_joints, Level};
use ropetp_core::nn::{ParamStore, SelfAttention};
use ropetp_core::rope::{init_rope, rope_loss, tokenize_hagt, LabelBatch, RopeConfig, RopeLossConfig, SceneLabels};
use ropetp_core::tensor::grad_check_multi;
use ropetp_core::{Result, Tape, Tensor, Var};

pub type CaseFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// Where random check points are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Real,
    /// `0.5 + |z|`.
    Positive,
    /// `sign(z) (0.1 + |z|)`, clear of a kink at zero.
    AwayFromZero,
}

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub f: CaseFn,
}

impl GradCase {
    pub fn new(name: &str, inputs: Vec<(Vec<usize>, Domain)>, f: CaseFn) -> Self {
        GradCase { name: name.into(), inputs, f }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub points: usize,
    pub coordinates: usize,
    pub passed: bool,
    pub error: Option<String>,
}

/// Fixed weights for reducing a tensor output to a scalar.
fn probe(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|k| (0.7 * k as f64 + 0.3).sin()).collect()).expect("probe shape")
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            match domain {
                Domain::Real => z,
                Domain::Positive => 0.5 + z.abs(),
                Domain::AwayFromZero => z.signum() * (0.1 + z.abs()),
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("draw shape")
}

pub fn run_case(case: &GradCase, points: usize, seed: u64, tol: f64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = CaseResult { name: case.name.clone(), max_rel_error: 0.0, points, coordinates: 0, passed: true, error: None };
    for _ in 0..points {
        let xs: Vec<Tensor> = case.inputs.iter().map(|(s, d)| draw(&mut rng, s, *d)).collect();
        let report = grad_check_multi(
            |tape, vars| {
                let out = (case.f)(tape, vars)?;
                if out.shape().is_empty() {
                    return Ok(out);
                }
                Ok(out.mul(tape.constant(probe(&out.shape())))?.sum())
            },
            &xs,
            1e-6,
        );
        match report {
            Ok(r) => {
                result.max_rel_error = result.max_rel_error.max(r.max_rel_error);
                result.coordinates += r.coordinates;
            }
            Err(e) => {
                result.error = Some(e.to_string());
                result.passed = false;
                return result;
            }
        }
    }
    result.passed = result.max_rel_error < tol;
    result
}

pub fn run_suite(cases: &[GradCase], points: usize, seed: u64, tol: f64) -> Vec<CaseResult> {
    cases.iter().enumerate().map(|(i, c)| run_case(c, points, seed.wrapping_add(i as u64), tol)).collect()
}

pub fn report_csv(results: &[CaseResult]) -> String {
    let mut s = String::from("op,max_rel_error,points,coordinates,pass\n");
    for r in results {
        let _ = writeln!(s, "{},{:e},{},{},{}", r.name, r.max_rel_error, r.points, r.coordinates, r.passed);
    }
    s
}

fn unary(name: &str, shape: &[usize], domain: Domain, f: for<'t> fn(Var<'t>) -> Result<Var<'t>>) -> GradCase {
    GradCase::new(name, vec![(shape.to_vec(), domain)], Box::new(move |_, x| f(x[0])))
}

fn binary(name: &str, a: &[usize], b: &[usize], db: Domain, f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> GradCase {
    GradCase::new(name, vec![(a.to_vec(), Domain::Real), (b.to_vec(), db)], Box::new(move |_, x| f(x[0], x[1])))
}

use Domain::{AwayFromZero, Positive, Real};

/// Every differentiable op plus the two training losses end to end.
pub fn standard_cases() -> Vec<GradCase> {
    let mut cases = vec![
        binary("add", &[3, 4], &[4], Real, |a, b| a.add(b)),
        binary("sub", &[2, 3], &[2, 3], Real, |a, b| a.sub(b)),
        binary("mul", &[2, 1, 3], &[4, 3], Real, |a, b| a.mul(b)),
        binary("div", &[3, 2], &[3, 2], Positive, |a, b| a.div(b)),
        unary("scale", &[5], Real, |a| Ok(a.scale(-1.7))),
        unary("neg", &[5], Real, |a| Ok(a.neg())),
        unary("add_scalar", &[5], Real, |a| Ok(a.add_scalar(0.4))),
        unary("square", &[2, 3], Real, |a| Ok(a.square())),
        unary("exp", &[2, 3], Real, |a| Ok(a.exp())),
        unary("log", &[2, 3], Positive, |a| Ok(a.log())),
        unary("sqrt", &[2, 3], Positive, |a| Ok(a.sqrt())),
        unary("tanh", &[2, 3], Real, |a| Ok(a.tanh())),
        unary("gelu", &[2, 3], Real, |a| Ok(a.gelu())),
        unary("relu", &[2, 3], AwayFromZero, |a| Ok(a.relu())),
        unary("sum", &[2, 3], Real, |a| Ok(a.sum().square())),
        unary("mean", &[2, 3], Real, |a| Ok(a.mean().square())),
        unary("sum_axis", &[2, 3, 4], Real, |a| Ok(a.sum_axis(1)?.square())),
        unary("mean_axis", &[2, 3, 4], Real, |a| Ok(a.mean_axis(2)?.square())),
        unary("softmax", &[2, 5], Real, |a| a.softmax(1)),
        unary("log_softmax", &[3, 4], Real, |a| a.log_softmax(1)),
        GradCase::new(
            "layer_norm",
            vec![(vec![3, 6], Real), (vec![6], Real), (vec![6], Real)],
            Box::new(|_, x| x[0].layer_norm(x[1], x[2], 1e-5)),
        ),
        unary("huber", &[4, 3], AwayFromZero, |a| a.scale(1.5).huber(1.0)),
        binary("concat", &[2, 3], &[2, 2], Real, |a, b| Ok(Var::concat(&[a, b], 1)?.square())),
        unary("slice", &[3, 5], Real, |a| Ok(a.slice(1, 1, 3)?.square())),
        unary("reshape", &[2, 6], Real, |a| Ok(a.reshape(&[3, 4])?.exp())),
        unary("permute", &[2, 3, 4], Real, |a| Ok(a.permute(&[2, 0, 1])?.square())),
        unary("transpose", &[3, 4], Real, |a| Ok(a.transpose()?.square())),
        unary("index_select", &[4, 3], Real, |a| Ok(a.index_select(0, &[3, 0, 0, 2])?.square())),
        binary("matmul", &[2, 3, 4], &[4, 5], Real, |a, b| a.matmul(b)),
        binary("matmul_nt", &[2, 3, 4], &[2, 5, 4], Real, |a, b| a.matmul_nt(b)),
        binary("matmul_tn", &[2, 4, 3], &[2, 4, 5], Real, |a, b| a.matmul_tn(b)),
        unary("norm_last", &[4, 3], Real, |a| a.norm_last()),
        unary("rot6d_to_rotmat", &[3, 6], Real, rot6d_to_rotmat),
        binary("project_var", &[2, 5, 3], &[2, 3], Real, project_var),
        binary("tokenize_hagt", &[1, 3, 3, 4], &[1, 3, 3, 5], Real, |a, f| Ok(tokenize_hagt(a, f)?.0)),
        unary("expand_to_joints", &[2, 11, 3], Real, |a| Ok(expand_to_joints(a, Level::Inter, &default_partition())?.square())),
    ];
    cases.push(attention_case());
    cases.push(body_case());
    cases.push(traj_case());
    cases.push(rope_case());
    cases
}

fn attention_case() -> GradCase {
    let mut store = ParamStore::new();
    let attn = SelfAttention::new(&mut store, "attn", 8, 2, &mut ChaCha8Rng::seed_from_u64(1)).expect("attention");
    GradCase::new(
        "self_attention",
        vec![(vec![2, 5, 8], Real), (vec![8, 8], Real)],
        Box::new(move |tape, x| {
            let mut p = store.bind(tape, false);
            p.replace(attn.q.w, x[1]);
            attn.forward(&p, x[0])
        }),
    )
}

fn body_case() -> GradCase {
    let template = BodyTemplate::procedural(192).expect("template");
    GradCase::new(
        "body_forward",
        vec![(vec![24, 6], Real), (vec![10], Real)],
        Box::new(move |_, x| {
            let out = body_forward(&template, x[0], x[1])?;
            out.joints.sum_axis(0)?.add(out.vertices.mean_axis(0)?)
        }),
    )
}

/// Denoiser prediction scored by the Huber and foot terms.
fn traj_case() -> GradCase {
    let mut store = ParamStore::new();
    let cfg = DenoiserConfig { layers: 2, heads: 2, width: 8, ..DenoiserConfig::default() };
    let model = Denoiser::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).expect("denoiser");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r0 = draw(&mut rng, &[2, 5, 3], Real);
    let offsets = draw(&mut rng, &[2, 5, 2, 3], Real);
    let contacts = Tensor::new(vec![2, 4, 2], (0..16).map(|k| (k % 3 == 0) as u8 as f64).collect()).expect("contacts");
    GradCase::new(
        "traj_loss_end_to_end",
        vec![(vec![2, 5, 3], Real), (vec![2, 5, 24, 3], Real), (vec![8, 3], Real)],
        Box::new(move |tape, x| {
            let mut p = store.bind(tape, false);
            p.replace(model.out.w, x[2]);
            let c = model.encode_condition(&p, x[1])?;
            let x0 = model.forward(&p, x[0], &[17, 480], c)?;
            Ok(traj_loss(x0, tape.constant(r0.clone()), tape.constant(offsets.clone()), tape.constant(contacts.clone()), 0.1, 1.0)?.total)
        }),
    )
}

/// Tiny network on a 4x4 scene with random supervision.
fn rope_case() -> GradCase {
    let template = BodyTemplate::procedural(192).expect("template");
    let table = default_partition();
    let cfg = RopeConfig { channels: 8, width: 8, heads: 2, icl_dim: 8, head_hidden: 8, ..RopeConfig::default() };
    let (net, store) = init_rope(cfg, 4).expect("rope");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (4, 4);
    let masks = Level::ALL.map(|l| PartMask { h, w, labels: (0..h * w).map(|k| ((k * 7 + 3) % (l.part_count() + 1)) as u16).collect() });
    let labels = SceneLabels {
        params: BodyParams {
            theta: draw(&mut rng, &[24, 6], Real),
            beta: draw(&mut rng, &[10], Real),
            cam: Tensor::vector(vec![0.8, 0.1, -0.2]),
        },
        joints3d: draw(&mut rng, &[24, 3], Real),
        joints2d: draw(&mut rng, &[24, 2], Real),
        masks,
    };
    let batch = LabelBatch::new(&[&labels]).expect("labels");
    let fixed_att = Level::ALL.map(|l| draw(&mut rng, &[1, h, w, l.part_count()], Real));
    let fixed_feat = Level::ALL.map(|_| draw(&mut rng, &[1, h, w, 8], Real));
    GradCase::new(
        "rope_loss_end_to_end",
        vec![(vec![1, h, w, 24], Real), (vec![1, h, w, 1], Real), (vec![1, h, w, 8], Real)],
        Box::new(move |tape, x| {
            let p = store.bind(tape, false);
            let c = |t: &Tensor| tape.constant(t.clone());
            let att = [x[0], c(&fixed_att[1]), c(&fixed_att[2]), x[1]];
            let feat = [c(&fixed_feat[0]), c(&fixed_feat[1]), x[2], c(&fixed_feat[3])];
            let out = net.forward(&p, &table, &att, &feat)?;
            Ok(rope_loss(&out, &batch, &template, 0, &RopeLossConfig::default())?.total)
        }),
    )
}
