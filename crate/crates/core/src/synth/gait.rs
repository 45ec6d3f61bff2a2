use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::kinematics::{axis_angle, forward_kinematics_from_rest};
use crate::body::{rotmat_to_rot6d, BodyTemplate, LEFT_ANKLE, NUM_JOINTS, RIGHT_ANKLE, ROT6D_IDENTITY};
use crate::diffusion::MotionSequence;
use crate::error::{Error, Result};
use crate::metrics::yaw;
use crate::tensor::Tensor;

/// Fraction of a gait cycle each foot spends planted.
pub const STANCE_FRACTION: f64 = 0.6;
/// Peak ankle lift during swing, metres.
pub const SWING_HEIGHT: f64 = 0.1;
const MAX_STRIDE: f64 = 1.5;
const REACH: f64 = 0.95;

const HIPS: [usize; 2] = [1, 2];
const KNEES: [usize; 2] = [4, 5];
const ANKLES: [usize; 2] = [LEFT_ANKLE, RIGHT_ANKLE];
const SHOULDERS: [usize; 2] = [16, 17];
const ELBOWS: [usize; 2] = [18, 19];

/// Yaw rate (rad/s) that holds from `from_frame` until the next turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub from_frame: usize,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitSpec {
    /// Distance covered per gait cycle, metres.
    pub stride: f64,
    /// Gait cycles per second.
    pub cadence: f64,
    pub fps: f64,
    pub frames: usize,
    /// Initial heading; 0 walks towards +z.
    pub initial_yaw: f64,
    pub turns: Vec<Turn>,
    pub seed: u64,
}

impl Default for GaitSpec {
    fn default() -> Self {
        GaitSpec { stride: 0.6, cadence: 1.0, fps: 30.0, frames: 60, initial_yaw: 0.0, turns: vec![], seed: 0 }
    }
}

impl GaitSpec {
    /// Randomised walking spec for dataset generation.
    pub fn random(seed: u64, frames: usize, fps: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let n_turns = rng.random_range(0..3usize);
        let mut turns: Vec<Turn> =
            (0..n_turns).map(|_| Turn { from_frame: rng.random_range(0..frames.max(1)), yaw_rate: rng.random_range(-0.8..0.8) }).collect();
        turns.sort_by_key(|t| t.from_frame);
        GaitSpec {
            stride: rng.random_range(0.5..1.2),
            cadence: rng.random_range(0.8..1.3),
            fps,
            frames,
            initial_yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            turns,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("GaitSpec", msg));
        if !(0.0..=MAX_STRIDE).contains(&self.stride) {
            return bad(format!("stride must lie in [0, {MAX_STRIDE}], got {}", self.stride));
        }
        if !(self.cadence > 0.0 && self.cadence.is_finite()) {
            return bad(format!("cadence must be positive, got {}", self.cadence));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.frames < 2 {
            return bad(format!("at least two frames are needed, got {}", self.frames));
        }
        if !self.initial_yaw.is_finite() || self.turns.iter().any(|t| !t.yaw_rate.is_finite()) {
            return bad("heading must be finite".into());
        }
        if self.turns.windows(2).any(|w| w[0].from_frame > w[1].from_frame) {
            return bad("turns must be sorted by frame".into());
        }
        Ok(())
    }

    fn speed(&self) -> f64 {
        self.stride * self.cadence
    }
}

/// Root path on the ground plane: constant speed along a piecewise
/// constant yaw rate. Straight before time 0.
struct Heading {
    speed: f64,
    yaw0: f64,
    knots: Vec<(f64, f64)>,
}

impl Heading {
    fn new(spec: &GaitSpec) -> Self {
        Heading {
            speed: spec.speed(),
            yaw0: spec.initial_yaw,
            knots: spec.turns.iter().map(|t| (t.from_frame as f64 / spec.fps, t.yaw_rate)).collect(),
        }
    }

    /// `(yaw, x, z)` at time `t`.
    fn at(&self, t: f64) -> (f64, f64, f64) {
        let v = self.speed;
        if t <= 0.0 {
            let (s, c) = self.yaw0.sin_cos();
            return (self.yaw0, v * t * s, v * t * c);
        }
        let (mut psi, mut x, mut z) = (self.yaw0, 0.0, 0.0);
        let (mut now, mut rate) = (0.0, 0.0);
        let advance = |psi: &mut f64, x: &mut f64, z: &mut f64, rate: f64, dt: f64| {
            if dt <= 0.0 {
                return;
            }
            let next = *psi + rate * dt;
            if rate == 0.0 {
                *x += v * dt * psi.sin();
                *z += v * dt * psi.cos();
            } else {
                *x += v / rate * (psi.cos() - next.cos());
                *z += v / rate * (next.sin() - psi.sin());
            }
            *psi = next;
        };
        for &(tau, w) in &self.knots {
            if tau >= t {
                break;
            }
            advance(&mut psi, &mut x, &mut z, rate, tau - now);
            now = now.max(tau);
            rate = w;
        }
        advance(&mut psi, &mut x, &mut z, rate, t - now);
        (psi, x, z)
    }
}

struct Skeleton {
    rest: Tensor,
    pelvis: Vector3<f64>,
    hip: [Vector3<f64>; 2],
    thigh: [Vector3<f64>; 2],
    shin: [Vector3<f64>; 2],
    ankle_height: f64,
    ankle_lateral: [f64; 2],
}

impl Skeleton {
    fn new(body: &BodyTemplate) -> Self {
        let rest = body.rest_joints();
        let at = |j: usize| Vector3::new(rest.at(&[j, 0]), rest.at(&[j, 1]), rest.at(&[j, 2]));
        let pelvis = at(0);
        Skeleton {
            hip: HIPS.map(|h| at(h) - pelvis),
            thigh: [0, 1].map(|s| at(KNEES[s]) - at(HIPS[s])),
            shin: [0, 1].map(|s| at(ANKLES[s]) - at(KNEES[s])),
            ankle_height: (at(ANKLES[0]).y + at(ANKLES[1]).y) / 2.0,
            ankle_lateral: ANKLES.map(|a| at(a).x - pelvis.x),
            pelvis,
            rest,
        }
    }

    /// Pelvis height that keeps the planted foot reachable at both ends of
    /// the stance.
    fn pelvis_height(&self, stride: f64) -> f64 {
        let excursion = STANCE_FRACTION * stride / 2.0;
        let leg = self.thigh[0].norm() + self.shin[0].norm();
        let dx = (self.ankle_lateral[0] - self.hip[0].x).abs();
        let drop = ((REACH * leg).powi(2) - excursion.powi(2) - dx * dx).max(0.0).sqrt();
        (self.ankle_height + drop - self.hip[0].y).min(self.pelvis.y)
    }
}

fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::rotation_between(a, b).unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)).into_inner()
}

/// Global hip and knee rotations placing the ankle at `target`, knee bent
/// towards `forward`. Out-of-reach targets leave the leg straight.
fn leg_ik(
    hip: Vector3<f64>,
    target: Vector3<f64>,
    forward: Vector3<f64>,
    base: &Matrix3<f64>,
    thigh: &Vector3<f64>,
    shin: &Vector3<f64>,
) -> (Matrix3<f64>, Matrix3<f64>) {
    let (l1, l2) = (thigh.norm(), shin.norm());
    let d = target - hip;
    let dist = d.norm().clamp((l1 - l2).abs() + 1e-9, l1 + l2);
    let u = d / d.norm();
    let side = forward - u * forward.dot(&u);
    let w = side / side.norm();
    let a = (l1 * l1 - l2 * l2 + dist * dist) / (2.0 * dist);
    let h = (l1 * l1 - a * a).max(0.0).sqrt();
    let knee = hip + u * a + w * h;
    let g_hip = rotation_between(&(base * thigh), &(knee - hip)) * base;
    let g_knee = rotation_between(&(g_hip * shin), &(hip + u * dist - knee)) * g_hip;
    (g_hip, g_knee)
}

/// Foot placement for stance `k` of one side: ankle position and yaw.
struct Pin {
    ankle: Vector3<f64>,
    yaw: f64,
}

/// Walks the template along the heading set by `initial_yaw` and `turns` with analytically planted
/// feet.
///
/// Frame `i` samples time `(i + 1) / fps`, so the clip covers `N / fps`
/// seconds of motion starting from the origin. Contact row `i` is set when
/// the foot stays planted from frame `i` to frame `i + 1`.
pub fn gen_locomotion(spec: &GaitSpec, body: &BodyTemplate) -> Result<MotionSequence> {
    spec.validate()?;
    let sk = Skeleton::new(body);
    let heading = Heading::new(spec);
    let walking = spec.stride > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase0: f64 = if walking { rng.random_range(0.0..1.0) } else { 0.0 };
    let arm_swing: f64 = rng.random_range(0.15..0.45);
    let arm_drop: f64 = rng.random_range(1.2..1.4);
    let elbow: f64 = rng.random_range(0.1..0.4);
    let pelvis_y = sk.pelvis_height(spec.stride);
    let offsets = [phase0, phase0 + 0.5];

    let ground = |t: f64| {
        let (psi, x, z) = if walking { heading.at(t) } else { heading.at(0.0) };
        (psi, Vector3::new(x, pelvis_y, z))
    };
    let pin = |side: usize, k: f64| {
        let t_mid = (k + STANCE_FRACTION / 2.0 - offsets[side]) / spec.cadence;
        let (psi, root) = if walking { ground(t_mid) } else { ground(0.0) };
        let lateral = yaw(psi) * Vector3::new(sk.ankle_lateral[side], 0.0, 0.0);
        Pin { ankle: Vector3::new(root.x + lateral.x, sk.ankle_height, root.z + lateral.z), yaw: psi }
    };
    // (stance index, true when planted, swing progress)
    let phase = |side: usize, t: f64| -> (f64, bool, f64) {
        if !walking {
            return (0.0, true, 0.0);
        }
        let c = spec.cadence * t + offsets[side];
        let k = c.floor();
        let f = c - k;
        if f < STANCE_FRACTION {
            (k, true, 0.0)
        } else {
            (k, false, (f - STANCE_FRACTION) / (1.0 - STANCE_FRACTION))
        }
    };

    let n = spec.frames;
    let mut r = Vec::with_capacity(n * 3);
    let mut p = Vec::with_capacity(n * NUM_JOINTS * 3);
    let mut stance = Vec::with_capacity(n);
    for i in 0..n {
        let t = (i + 1) as f64 / spec.fps;
        let (psi, root) = ground(t);
        let base = yaw(psi);
        let forward = base * Vector3::z();
        let mut globals = vec![None; NUM_JOINTS];
        globals[0] = Some(base);
        let mut planted = [(0.0, false); 2];
        for side in 0..2 {
            let (k, down, s) = phase(side, t);
            planted[side] = (k, down);
            let (target, foot_yaw) = if down {
                let q = pin(side, k);
                (q.ankle, q.yaw)
            } else {
                let (a, b) = (pin(side, k), pin(side, k + 1.0));
                let mut at = a.ankle + (b.ankle - a.ankle) * s;
                at.y += SWING_HEIGHT * (1.0 - (2.0 * s - 1.0).abs());
                (at, a.yaw + (b.yaw - a.yaw) * s)
            };
            let hip = root + base * sk.hip[side];
            let (g_hip, g_knee) = leg_ik(hip, target, forward, &base, &sk.thigh[side], &sk.shin[side]);
            globals[HIPS[side]] = Some(g_hip);
            globals[KNEES[side]] = Some(g_knee);
            globals[ANKLES[side]] = Some(yaw(foot_yaw));
        }
        stance.push(planted);

        let mut theta = ROT6D_IDENTITY.repeat(NUM_JOINTS);
        let mut set = |j: usize, m: &Matrix3<f64>| theta[j * 6..j * 6 + 6].copy_from_slice(&rotmat_to_rot6d(m));
        set(0, &base);
        for side in 0..2 {
            let g = |j: usize| globals[j].expect("leg joints set");
            set(HIPS[side], &(base.transpose() * g(HIPS[side])));
            set(KNEES[side], &(g(HIPS[side]).transpose() * g(KNEES[side])));
            set(ANKLES[side], &(g(KNEES[side]).transpose() * g(ANKLES[side])));
            let sign = if side == 0 { 1.0 } else { -1.0 };
            let swing = if walking { sign * arm_swing * (std::f64::consts::TAU * (spec.cadence * t + phase0)).sin() } else { 0.0 };
            let shoulder = axis_angle(&Vector3::x(), swing) * axis_angle(&Vector3::z(), -sign * arm_drop);
            set(SHOULDERS[side], &shoulder);
            set(ELBOWS[side], &axis_angle(&Vector3::y(), sign * elbow));
        }
        let theta = Tensor::new(vec![NUM_JOINTS, 6], theta)?;
        let world = forward_kinematics_from_rest(&body.parents, body.order(), &sk.rest, &theta)?;
        // FK puts the root at its rest position; shift it to the path
        let shift = root - sk.pelvis;
        r.extend_from_slice(root.as_slice());
        for tr in &world {
            let q = tr.t + shift - root;
            p.extend_from_slice(q.as_slice());
        }
    }
    let contacts = stance.windows(2).map(|w| [0, 1].map(|s| w[0][s].1 && w[1][s].1 && w[0][s].0 == w[1][s].0)).collect();
    MotionSequence::new(spec.fps, Tensor::new(vec![n, 3], r)?, Tensor::new(vec![n, NUM_JOINTS, 3], p)?, Some(contacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{LEFT_FOOT, RIGHT_FOOT};

    fn body() -> BodyTemplate {
        BodyTemplate::procedural(192).unwrap()
    }

    #[test]
    fn zero_stride_is_static_and_planted() {
        let spec = GaitSpec { stride: 0.0, frames: 40, turns: vec![Turn { from_frame: 5, yaw_rate: 1.0 }], ..GaitSpec::default() };
        let m = gen_locomotion(&spec, &body()).unwrap();
        let w = m.world_joints();
        for f in 1..40 {
            for k in 0..72 {
                assert_eq!(w.data()[f * 72 + k], w.data()[k]);
            }
        }
        assert!(m.contacts.unwrap().iter().all(|c| c[0] && c[1]));
    }

    #[test]
    fn straight_walk_covers_speed_times_duration() {
        let spec = GaitSpec { stride: 0.6, cadence: 1.0, fps: 30.0, frames: 300, ..GaitSpec::default() };
        let m = gen_locomotion(&spec, &body()).unwrap();
        let last = [m.r.at(&[299, 0]), m.r.at(&[299, 2])];
        // heading +z from the origin
        assert!((last[1] - 6.0).abs() < 1e-9, "{last:?}");
        assert!(last[0].abs() < 1e-12);
    }

    #[test]
    fn turning_path_matches_stepwise_integration() {
        let spec = GaitSpec {
            stride: 1.0,
            cadence: 1.0,
            fps: 30.0,
            frames: 90,
            initial_yaw: 0.3,
            turns: vec![Turn { from_frame: 20, yaw_rate: 0.7 }, Turn { from_frame: 50, yaw_rate: -0.4 }],
            seed: 0,
        };
        let m = gen_locomotion(&spec, &body()).unwrap();
        // Euler integration with a fine step
        let steps_per_frame = 20000;
        let dt = 1.0 / (30.0 * steps_per_frame as f64);
        let (mut psi, mut x, mut z) = (0.3f64, 0.0, 0.0);
        for i in 0..90 {
            for s in 0..steps_per_frame {
                let t = (i * steps_per_frame + s) as f64 * dt;
                let rate = if t >= 50.0 / 30.0 {
                    -0.4
                } else if t >= 20.0 / 30.0 {
                    0.7
                } else {
                    0.0
                };
                let mid = psi + rate * dt / 2.0;
                x += dt * mid.sin();
                z += dt * mid.cos();
                psi += rate * dt;
            }
            assert!((m.r.at(&[i, 0]) - x).abs() < 1e-8 && (m.r.at(&[i, 2]) - z).abs() < 1e-8, "frame {i}");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let spec = GaitSpec::random(11, 60, 30.0);
        assert_eq!(gen_locomotion(&spec, &body()).unwrap(), gen_locomotion(&spec, &body()).unwrap());
        let other = GaitSpec::random(12, 60, 30.0);
        assert_ne!(gen_locomotion(&other, &body()).unwrap(), gen_locomotion(&spec, &body()).unwrap());
    }

    #[test]
    fn labelled_contacts_keep_the_foot_still() {
        let b = body();
        let mut planted_rows = 0;
        for seed in 0..20 {
            let m = gen_locomotion(&GaitSpec::random(seed, 90, 30.0), &b).unwrap();
            let w = m.world_joints();
            for (i, c) in m.contacts.as_ref().unwrap().iter().enumerate() {
                for (side, joints) in [[LEFT_ANKLE, LEFT_FOOT], [RIGHT_ANKLE, RIGHT_FOOT]].iter().enumerate() {
                    if !c[side] {
                        continue;
                    }
                    planted_rows += 1;
                    for &j in joints {
                        for a in 0..3 {
                            let d = (w.at(&[i + 1, j, a]) - w.at(&[i, j, a])).abs();
                            assert!(d < 1e-9, "seed {seed} frame {i} joint {j}: {d}");
                        }
                    }
                }
            }
        }
        assert!(planted_rows > 1000);
    }

    #[test]
    fn swing_lifts_the_foot() {
        let m = gen_locomotion(&GaitSpec::default(), &body()).unwrap();
        let heights = m.joint_heights(&[LEFT_ANKLE]);
        let ground = heights.iter().cloned().fold(f64::INFINITY, f64::min);
        let peak = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(peak - ground > 0.05);
        assert!(m.contacts.unwrap().iter().any(|c| !c[0]));
    }

    #[test]
    fn bones_keep_their_length() {
        let b = body();
        let rest = b.rest_joints();
        let m = gen_locomotion(&GaitSpec::random(3, 30, 30.0), &b).unwrap();
        for f in 0..30 {
            for j in 1..NUM_JOINTS {
                let par = b.parents[j].unwrap();
                let len = |t: &Tensor, a: &[usize], c: &[usize]| {
                    (0..3).map(|k| (t.at(&[a[0], a[1], k]) - t.at(&[c[0], c[1], k])).powi(2)).sum::<f64>().sqrt()
                };
                let want = (0..3).map(|k| (rest.at(&[j, k]) - rest.at(&[par, k])).powi(2)).sum::<f64>().sqrt();
                assert!((len(&m.p, &[f, j], &[f, par]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        for spec in [
            GaitSpec { frames: 1, ..GaitSpec::default() },
            GaitSpec { cadence: 0.0, ..GaitSpec::default() },
            GaitSpec { stride: -0.1, ..GaitSpec::default() },
            GaitSpec { stride: 3.0, ..GaitSpec::default() },
        ] {
            assert!(gen_locomotion(&spec, &body()).is_err());
        }
    }
}
