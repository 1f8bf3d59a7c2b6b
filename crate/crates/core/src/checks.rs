//! Self-checks behind the `check` command: binning against a scalar
//! reference, incremental motion features against batch recomputation,
//! analytic gradients against central differences and closed-form values.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{appearance_backward, encode_appearance, encode_appearance_train, point_descriptor, MlpParams};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{partition, relative, transform_cloud, GridConfig, GridIndex, MosClass, PoseSE3};
use crate::motion::{filter_residual, MotionFeatures, WindowState};
use crate::netcore::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use crate::netcore::{
    amcm_backward, amcm_forward, coattention_gate, coattention_gate_backward, motion_guided_attention,
    motion_guided_attention_backward, ring_conv2d, ring_conv2d_backward, softmax, AmcmParams, Conv2d,
    ParamSet, Tensor,
};
use crate::objective::{lovasz_softmax, softmax_classes, weighted_ce, ClassStats, ConfusionCounts};
use crate::synth::{
    generate, oracle_motion_features, standard_grid, BoxObject, EgoSpec, RandomObjects, SceneSpec,
    TrajectoryKind, LABEL_MOVING,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Motion,
    Gradients,
    Loss,
    All,
}

impl Suite {
    pub const EACH: [Suite; 4] = [Suite::Geometry, Suite::Motion, Suite::Gradients, Suite::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Geometry => "geometry",
            Suite::Motion => "motion",
            Suite::Gradients => "gradients",
            Suite::Loss => "loss",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "geometry" => Suite::Geometry,
            "motion" => Suite::Motion,
            "gradients" => Suite::Gradients,
            "loss" => Suite::Loss,
            "all" => Suite::All,
            other => {
                return Err(Error::config(
                    "suite",
                    format!("unknown suite `{other}` (geometry, motion, gradients, loss, all)"),
                ))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub bound: Bound,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn at_most(suite: Suite, name: &str, measured: f64, limit: f64, detail: String) -> Self {
        CheckResult {
            suite,
            name: name.to_string(),
            measured,
            limit,
            bound: Bound::AtMost,
            passed: measured <= limit,
            detail,
        }
    }

    pub fn at_least(suite: Suite, name: &str, measured: f64, limit: f64, detail: String) -> Self {
        CheckResult {
            suite,
            name: name.to_string(),
            measured,
            limit,
            bound: Bound::AtLeast,
            passed: measured >= limit,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{} {}/{}: {:.3e} {op} {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.limit
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    /// Random draws per gradient check.
    pub seeds: u64,
    pub geometry_trials: usize,
    pub geometry_points: usize,
    /// Synthetic scenes per motion check.
    pub motion_scenes: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seeds: 50,
            geometry_trials: 20,
            geometry_points: 10_000,
            motion_scenes: 3,
        }
    }
}

pub fn run(suite: Suite, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Geometry => Ok(geometry_suite(opts)),
        Suite::Motion => motion_suite(opts),
        Suite::Gradients => gradient_suite(opts),
        Suite::Loss => loss_suite(),
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run(s, opts)?);
            }
            Ok(out)
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------- geometry

/// Scalar reference binning: scans every bin for the half-open edge interval
/// holding the value; the upper limit itself belongs to the last bin.
pub fn reference_cell(p: &Point, cfg: &GridConfig) -> Option<GridIndex> {
    let rho = p.x.hypot(p.y);
    let theta = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x)
    };
    let u = scan_bins(rho, cfg.rho_min, cfg.rho_max, cfg.radial_bins)?;
    let v = scan_bins(theta, cfg.theta_min, cfg.theta_max, cfg.angular_bins)?;
    Some(GridIndex { u, v })
}

fn scan_bins(value: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if value.is_nan() || value < lo || value > hi {
        return None;
    }
    let off = value - lo;
    let range = hi - lo;
    (0..n).find(|&b| {
        let a = range * b as f64 / n as f64;
        let z = range * (b + 1) as f64 / n as f64;
        off >= a && (off < z || b + 1 == n)
    })
}

fn random_grid(rng: &mut ChaCha8Rng) -> GridConfig {
    let full = rng.random_bool(0.5);
    let (theta_min, theta_max) = if full {
        (-PI, PI)
    } else {
        let a = rng.random_range(-PI..0.0);
        (a, rng.random_range(a + 0.1..PI))
    };
    let rho_min = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..5.0) };
    GridConfig {
        angular_bins: rng.random_range(1..=720),
        radial_bins: rng.random_range(1..=600),
        rho_min,
        rho_max: rho_min + rng.random_range(1.0..80.0),
        theta_min,
        theta_max,
        ..GridConfig::default()
    }
}

/// Uniform points around the grid plus points placed on bin edges and a few
/// fixed edge cases (origin, the ±π seam, the outer radius).
pub fn random_probe_cloud(cfg: &GridConfig, n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let reach = cfg.rho_max * 1.1;
    let mut points = vec![
        Point::new(0.0, 0.0, 0.0),
        Point::new(-1.0, 0.0, 0.0),
        Point::new(-1.0, -0.0, 0.0),
        Point::new(cfg.rho_max, 0.0, 0.0),
        Point::new(cfg.rho_min, 0.0, 0.0),
        Point::new(0.0, -cfg.rho_max, 0.0),
    ];
    while points.len() < n {
        let z = rng.random_range(-3.0..1.0);
        if rng.random_bool(0.125) {
            let u = rng.random_range(0..=cfg.radial_bins);
            let v = rng.random_range(0..=cfg.angular_bins);
            let rho = cfg.rho_min + cfg.rho_edge(u);
            let theta = cfg.theta_min + cfg.theta_edge(v);
            points.push(Point::new(rho * theta.cos(), rho * theta.sin(), z));
        } else {
            points.push(Point::new(
                rng.random_range(-reach..reach),
                rng.random_range(-reach..reach),
                z,
            ));
        }
    }
    points.truncate(n);
    PointCloud::new(points, 0)
}

/// Partition mismatches against [`reference_cell`] and disjoint-cover
/// violations over `trials` random grids of `points` points each.
pub fn partition_against_reference(trials: usize, points: usize, seed: u64) -> (usize, usize) {
    let mut mismatches = 0;
    let mut cover = 0;
    for t in 0..trials {
        let mut rng = rng_for(seed, t as u64);
        let cfg = random_grid(&mut rng);
        let cloud = random_probe_cloud(&cfg, points, &mut rng);
        let part = partition(&cloud, &cfg);
        mismatches += cloud
            .points
            .iter()
            .zip(part.assignment())
            .filter(|(p, a)| reference_cell(p, &cfg) != **a)
            .count();

        let mut seen = vec![0u32; cloud.len()];
        for c in 0..cfg.cells() {
            for &i in part.cell_flat(c) {
                seen[i as usize] += 1;
                let g = part.assignment()[i as usize];
                if g.map(|g| cfg.flat(g)) != Some(c) {
                    cover += 1;
                }
            }
        }
        for i in part.out_of_range() {
            seen[i] += 1;
            if part.assignment()[i].is_some() {
                cover += 1;
            }
        }
        cover += seen.iter().filter(|&&s| s != 1).count();
    }
    (mismatches, cover)
}

fn geometry_suite(opts: &CheckOptions) -> Vec<CheckResult> {
    let (mismatches, cover) = partition_against_reference(opts.geometry_trials, opts.geometry_points, 0);
    let detail = format!("{} trials x {} points", opts.geometry_trials, opts.geometry_points);
    vec![
        CheckResult::at_most(Suite::Geometry, "partition_vs_reference", mismatches as f64, 0.0, detail.clone()),
        CheckResult::at_most(Suite::Geometry, "disjoint_cover", cover as f64, 0.0, detail),
    ]
}

// ------------------------------------------------------------------ motion

/// Comparison of streamed features against [`oracle_motion_features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub frames_compared: usize,
    pub max_abs_diff: f64,
    /// Emissions that did not arrive exactly `N − 1` pushes after their frame.
    pub delay_violations: usize,
}

pub fn streamed_features(clouds: &[PointCloud], poses: &[PoseSE3], cfg: &GridConfig) -> Result<Vec<(usize, MotionFeatures)>> {
    let mut state = WindowState::new(cfg.clone())?;
    let mut out = Vec::new();
    for (push, (c, p)) in clouds.iter().zip(poses).enumerate() {
        if let Some(f) = state.push_frame(c.clone(), *p)? {
            out.push((push, f));
        }
    }
    Ok(out)
}

pub fn compare_with_oracle(clouds: &[PointCloud], poses: &[PoseSE3], cfg: &GridConfig) -> Result<OracleReport> {
    let n = cfg.window;
    let emitted = streamed_features(clouds, poses, cfg)?;
    let mut report = OracleReport {
        frames_compared: 0,
        max_abs_diff: 0.0,
        delay_violations: 0,
    };
    let expected = clouds.len().saturating_sub(n.saturating_sub(1));
    report.delay_violations += emitted.len().abs_diff(expected);
    for (push, f) in &emitted {
        let j = clouds
            .iter()
            .position(|c| c.frame_index == f.frame_index)
            .ok_or_else(|| Error::Shape(format!("emitted unknown frame {}", f.frame_index)))?;
        if *push != j + n - 1 {
            report.delay_violations += 1;
        }
        let oracle = oracle_motion_features(clouds, poses, cfg, j)?;
        let diff = f
            .data
            .iter()
            .zip(&oracle.data)
            .map(|(a, b)| if a.to_bits() == b.to_bits() { 0.0 } else { (a - b).abs().max(f64::MIN_POSITIVE) })
            .fold(0.0, f64::max);
        report.max_abs_diff = report.max_abs_diff.max(diff);
        report.frames_compared += 1;
    }
    Ok(report)
}

/// Largest change of any feature value when every world pose is premultiplied
/// by `transform`.
pub fn ego_invariance(clouds: &[PointCloud], poses: &[PoseSE3], cfg: &GridConfig, transform: &PoseSE3) -> Result<f64> {
    let moved: Vec<PoseSE3> = poses.iter().map(|p| transform.compose(p)).collect();
    let a = streamed_features(clouds, poses, cfg)?;
    let b = streamed_features(clouds, &moved, cfg)?;
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    Ok(a.iter()
        .zip(&b)
        .flat_map(|((_, x), (_, y))| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

/// Disagreements between [`filter_residual`] and `keep` over raw residuals
/// 0..=5 in steps of 0.01 and both counts in 0..=10.
pub fn filter_table_mismatches(cfg: &GridConfig, keep: impl Fn(f64, u32, u32) -> bool) -> usize {
    let mut bad = 0;
    for i in 0..=500 {
        let raw = i as f64 / 100.0;
        for a in 0..=10 {
            for b in 0..=10 {
                let expected = if keep(raw, a, b) { raw } else { 0.0 };
                if filter_residual(raw, a, b, cfg).to_bits() != expected.to_bits() {
                    bad += 1;
                }
            }
        }
    }
    bad
}

fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
    let axis = nalgebra::Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-PI..PI);
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    let t = nalgebra::Vector3::new(
        rng.random_range(-500.0..500.0),
        rng.random_range(-500.0..500.0),
        rng.random_range(-50.0..50.0),
    );
    PoseSE3::from_parts(*r.matrix(), t)
}

fn small_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        frames: 14,
        ego: EgoSpec {
            kind: TrajectoryKind::Arc,
            speed: 0.5,
            yaw_rate: 0.02,
        },
        ground_points: 3_000,
        random_objects: RandomObjects { moving: 2, parked: 1 },
        ..SceneSpec::default()
    }
}

fn split_frames(frames: Vec<crate::synth::SynthFrame>) -> (Vec<PointCloud>, Vec<PoseSE3>, Vec<Vec<u32>>) {
    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    let mut labels = Vec::new();
    for f in frames {
        clouds.push(f.cloud);
        poses.push(f.pose);
        labels.push(f.labels);
    }
    (clouds, poses, labels)
}

/// Outcome of [`moving_box_residuals`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingBoxReport {
    pub height: f64,
    pub newly_occupied: usize,
    /// Smallest channel-0 residual over the newly occupied cells.
    pub min_residual: f64,
}

/// One box of random height moving across the sensor's view at one cell or
/// more per half window, ego parked, static lattice ground. A cell counts as
/// newly occupied for frame `j` when the box roof shows in it during the
/// newer window, the box was absent from it in the first newer frame and in
/// the whole older window, and both windows hold enough in-band points for
/// the filter to keep it.
pub fn moving_box_residuals(seed: u64, cfg: &GridConfig) -> Result<MovingBoxReport> {
    let mut rng = rng_for(seed, 7);
    let height = rng.random_range(cfg.d_min.max(1.0)..cfg.d_max.min(2.0));
    let radius = rng.random_range(10.0..16.0);
    let phi = rng.random_range(-PI..PI);
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let speed = rng.random_range(0.4..0.6);
    let velocity = [-phi.sin() * speed * dir, phi.cos() * speed * dir];
    let spec = SceneSpec {
        seed,
        frames: 16,
        ego: EgoSpec {
            kind: TrajectoryKind::Line,
            speed: 0.0,
            yaw_rate: 0.0,
        },
        ground_spacing: Some(0.25),
        max_range: 25.0,
        objects: vec![BoxObject {
            size: [rng.random_range(3.5..4.5), rng.random_range(1.6..2.0)],
            height,
            position: [radius * phi.cos(), radius * phi.sin()],
            yaw: velocity[1].atan2(velocity[0]),
            velocity,
        }],
        ..SceneSpec::default()
    };
    let roof = spec.ground_z + height - 5.0 * spec.noise_sigma;
    let (clouds, poses, labels) = split_frames(generate(&spec)?);
    let n = cfg.window;
    let half = cfg.half_window();
    let cells = cfg.cells();
    let mut report = MovingBoxReport {
        height,
        newly_occupied: 0,
        min_residual: f64::INFINITY,
    };
    for (push, f) in streamed_features(&clouds, &poses, cfg)? {
        let j = push + 1 - n;
        if j + 1 < n {
            continue;
        }
        // Per frame of both windows, aligned to j: box present, roof present, in-band count.
        let mut per_frame = Vec::with_capacity(n);
        for fr in j + 1 - n..=j {
            let aligned = transform_cloud(&clouds[fr], &relative(&poses, j, fr)?);
            let mut cell = vec![(false, false, 0u32); cells];
            for ((p, g), &l) in aligned.points.iter().zip(partition(&aligned, cfg).assignment()).zip(&labels[fr]) {
                let Some(g) = g else { continue };
                let e = &mut cell[cfg.flat(*g)];
                if cfg.z_min < p.z && p.z < cfg.z_max {
                    e.2 += 1;
                }
                if l == LABEL_MOVING {
                    e.0 = true;
                    e.1 |= p.z >= roof;
                }
            }
            per_frame.push(cell);
        }
        let (older, newer) = per_frame.split_at(n - half);
        for c in 0..cells {
            let roof_new = newer.iter().any(|fr| fr[c].1);
            let absent = !newer[0][c].0 && older.iter().all(|fr| !fr[c].0);
            let count = |w: &[Vec<(bool, bool, u32)>]| w.iter().map(|fr| fr[c].2).sum::<u32>();
            if roof_new && absent && count(newer) >= cfg.min_points && count(older) >= cfg.min_points {
                report.newly_occupied += 1;
                report.min_residual = report.min_residual.min(f.channel(0)[c]);
            }
        }
    }
    Ok(report)
}

/// Largest feature magnitude in a noise-free scene of parked boxes on
/// lattice ground seen from a moving ego.
pub fn parked_scene_max_feature(seed: u64, cfg: &GridConfig) -> Result<f64> {
    let spec = SceneSpec {
        seed,
        frames: 16,
        ground_spacing: Some(0.3),
        max_range: 30.0,
        // Planar jitter moves single returns across cell borders from frame
        // to frame, which no filter setting can hide.
        noise_sigma: 0.0,
        random_objects: RandomObjects { moving: 0, parked: 3 },
        ..SceneSpec::default()
    };
    let (clouds, poses, _) = split_frames(generate(&spec)?);
    Ok(streamed_features(&clouds, &poses, cfg)?
        .iter()
        .flat_map(|(_, f)| f.data.iter().map(|v| v.abs()))
        .fold(0.0, f64::max))
}

fn motion_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let cfg = standard_grid();
    let scenes = opts.motion_scenes;
    let detail = format!("{scenes} scenes");
    let mut diff: f64 = 0.0;
    let mut delays = 0;
    let mut invariance: f64 = 0.0;
    let mut box_ratio = f64::INFINITY;
    let mut cells = 0;
    let mut parked: f64 = 0.0;
    for seed in 0..scenes {
        let (clouds, poses, _) = split_frames(generate(&small_scene(seed))?);
        let r = compare_with_oracle(&clouds, &poses, &cfg)?;
        diff = diff.max(r.max_abs_diff);
        delays += r.delay_violations;
        invariance = invariance.max(ego_invariance(&clouds, &poses, &cfg, &random_pose(&mut rng_for(seed, 3)))?);
        let b = moving_box_residuals(seed, &cfg)?;
        cells += b.newly_occupied;
        box_ratio = box_ratio.min(if b.newly_occupied == 0 { 0.0 } else { b.min_residual / b.height });
        parked = parked.max(parked_scene_max_feature(seed, &cfg)?);
    }
    let table = filter_table_mismatches(&cfg, |raw, a, b| {
        a >= cfg.min_points && b >= cfg.min_points && raw >= cfg.d_min && raw <= cfg.d_max
    });
    Ok(vec![
        CheckResult::at_most(Suite::Motion, "window_vs_oracle", diff, 0.0, detail.clone()),
        CheckResult::at_most(Suite::Motion, "emission_delay", delays as f64, 0.0, detail.clone()),
        CheckResult::at_most(Suite::Motion, "filter_table", table as f64, 0.0, "501 x 11 x 11 entries".into()),
        CheckResult::at_most(Suite::Motion, "ego_invariance", invariance, 1e-9, detail.clone()),
        CheckResult::at_least(
            Suite::Motion,
            "moving_box_residual_over_height",
            box_ratio,
            0.5,
            format!("{cells} newly occupied cells"),
        ),
        CheckResult::at_most(Suite::Motion, "parked_scene_features", parked, 0.0, detail),
    ])
}

// --------------------------------------------------------------- gradients

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_conv(c_out: usize, c_in: usize, kh: usize, kw: usize, scale: f64, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d {
        weight: random_tensor(&[c_out, c_in, kh, kw], scale, rng),
        bias: random_tensor(&[c_out], scale, rng),
    }
}

fn random_amcm(c_a: usize, c_m: usize, rng: &mut ChaCha8Rng) -> AmcmParams {
    AmcmParams {
        gate: random_conv(2, c_a + c_m, 3, 3, 0.3, rng),
        spatial: random_conv(1, c_m, 1, 1, 0.8, rng),
        channel: random_conv(c_a, c_a, 1, 1, 0.8, rng),
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn input_error(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut probe = x.clone();
    let numeric = central_difference(
        |v| {
            probe.data_mut().copy_from_slice(v);
            f(&probe)
        },
        x.data(),
        DEFAULT_STEP,
    );
    relative_error(analytic.data(), &numeric)
}

/// Worst per-tensor relative error of `grads` against central differences.
fn param_error<P: ParamSet + Clone>(params: &P, grads: &P, f: impl Fn(&P) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ti in 0..params.tensors().len() {
        let x = params.tensors()[ti].data().to_vec();
        let mut probe = params.clone();
        let numeric = central_difference(
            |v| {
                probe.tensors_mut()[ti].data_mut().copy_from_slice(v);
                f(&probe)
            },
            &x,
            DEFAULT_STEP,
        );
        worst = worst.max(relative_error(grads.tensors()[ti].data(), &numeric));
    }
    worst
}

struct Worst {
    error: f64,
    seed: u64,
}

impl Worst {
    fn new() -> Self {
        Worst { error: 0.0, seed: 0 }
    }

    fn update(&mut self, error: f64, seed: u64) {
        if !(error <= self.error) {
            self.error = error;
            self.seed = seed;
        }
    }

    fn result(&self, name: &str, limit: f64, seeds: u64) -> CheckResult {
        CheckResult::at_most(
            Suite::Gradients,
            name,
            self.error,
            limit,
            format!("{seeds} seeds, worst seed {}", self.seed),
        )
    }
}

fn ring_conv_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 11);
    let (c_in, c_out, kh, kw) = [(2, 2, 3, 3), (3, 6, 3, 3), (2, 5, 1, 1), (2, 3, 3, 5)][seed as usize % 4];
    let x = random_tensor(&[c_in, 4, 6], 1.0, &mut rng);
    let conv = random_conv(c_out, c_in, kh, kw, 1.0, &mut rng);
    let r = random_tensor(&[c_out, 4, 6], 1.0, &mut rng);
    let g = ring_conv2d_backward(&x, &conv.weight, &r)?;
    let loss = |x: &Tensor, c: &Conv2d| dot(&r, &ring_conv2d(x, &c.weight, &c.bias).expect("shapes fixed"));
    let grads = Conv2d {
        weight: g.weight,
        bias: g.bias,
    };
    Ok(input_error(&x, &g.input, |x| loss(x, &conv)).max(param_error(&conv, &grads, |c| loss(&x, c))))
}

fn gate_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 12);
    let fa = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let fm = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let p = random_amcm(2, 2, &mut rng);
    let ra = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let rm = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let loss = |fa: &Tensor, fm: &Tensor, p: &AmcmParams| {
        let g = coattention_gate(fa, fm, p).expect("shapes fixed");
        dot(&ra, &g.gated_a) + dot(&rm, &g.gated_m)
    };
    let fwd = coattention_gate(&fa, &fm, &p)?;
    let g = coattention_gate_backward(&fwd, &ra, &rm, &p)?;
    let e_gate = param_error(&p.gate, &g.gate, |c| {
        loss(&fa, &fm, &AmcmParams { gate: c.clone(), ..p.clone() })
    });
    Ok(input_error(&fa, &g.appearance, |x| loss(x, &fm, &p))
        .max(input_error(&fm, &g.motion, |x| loss(&fa, x, &p)))
        .max(e_gate))
}

fn attention_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 13);
    let ga = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let gm = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let p = random_amcm(2, 2, &mut rng);
    let r = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let loss = |ga: &Tensor, gm: &Tensor, p: &AmcmParams| {
        dot(&r, &motion_guided_attention(ga, gm, p).expect("shapes fixed").output)
    };
    let fwd = motion_guided_attention(&ga, &gm, &p)?;
    let g = motion_guided_attention_backward(&fwd, &r, &p)?;
    let e_spatial = param_error(&p.spatial, &g.spatial, |c| {
        loss(&ga, &gm, &AmcmParams { spatial: c.clone(), ..p.clone() })
    });
    let e_channel = param_error(&p.channel, &g.channel, |c| {
        loss(&ga, &gm, &AmcmParams { channel: c.clone(), ..p.clone() })
    });
    Ok(input_error(&ga, &g.gated_a, |x| loss(x, &gm, &p))
        .max(input_error(&gm, &g.gated_m, |x| loss(&ga, x, &p)))
        .max(e_spatial)
        .max(e_channel))
}

fn amcm_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 14);
    let c_a = 2 + seed as usize % 2;
    let fa = random_tensor(&[c_a, 4, 6], 1.0, &mut rng);
    let fm = random_tensor(&[2, 4, 6], 1.0, &mut rng);
    let p = random_amcm(c_a, 2, &mut rng);
    let r = random_tensor(&[c_a, 4, 6], 1.0, &mut rng);
    let loss = |fa: &Tensor, fm: &Tensor, p: &AmcmParams| {
        dot(&r, amcm_forward(fa, fm, p).expect("shapes fixed").output())
    };
    let fwd = amcm_forward(&fa, &fm, &p)?;
    let g = amcm_backward(&fwd, &r, &p)?;
    Ok(input_error(&fa, &g.appearance, |x| loss(x, &fm, &p))
        .max(input_error(&fm, &g.motion, |x| loss(&fa, x, &p)))
        .max(param_error(&p, &g.params, |q| loss(&fa, &fm, q))))
}

fn random_labels(pixels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    (0..pixels)
        .map(|_| {
            if rng.random_bool(0.15) {
                None
            } else {
                Some(rng.random_range(0..classes))
            }
        })
        .collect()
}

fn weighted_ce_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 15);
    let classes = 2 + seed as usize % 2;
    let logits = random_tensor(&[classes, 3, 3], 2.0, &mut rng);
    let labels = random_labels(9, classes, &mut rng);
    let counts: Vec<u64> = (0..classes).map(|_| rng.random_range(1..1000)).collect();
    let stats = ClassStats::from_counts(&counts)?;
    let (_, g) = weighted_ce(&logits, &labels, &stats)?;
    Ok(input_error(&logits, &g, |z| weighted_ce(z, &labels, &stats).expect("shapes fixed").0))
}

fn lovasz_of_logits(z: &Tensor, labels: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let probs = softmax_classes(z);
    let (loss, gp) = lovasz_softmax(&probs, labels)?;
    let classes = z.shape()[0];
    let pixels = z.len() / classes;
    let s = probs.data();
    let mut grad = Tensor::zeros(z.shape());
    for p in 0..pixels {
        let inner: f64 = (0..classes).map(|c| s[c * pixels + p] * gp.data()[c * pixels + p]).sum();
        for c in 0..classes {
            let i = c * pixels + p;
            grad.data_mut()[i] = s[i] * (gp.data()[i] - inner);
        }
    }
    Ok((loss, grad))
}

// Smallest gap between sorted per-class errors; a central difference that
// straddles a reordering measures the wrong slope.
fn lovasz_min_gap(z: &Tensor, labels: &[Option<usize>]) -> f64 {
    let probs = softmax_classes(z);
    let classes = z.shape()[0];
    let pixels = z.len() / classes;
    let mut gap = f64::INFINITY;
    for c in 0..classes {
        let mut errors: Vec<f64> = (0..pixels)
            .filter_map(|p| {
                labels[p].map(|l| {
                    let x = probs.data()[c * pixels + p];
                    if l == c {
                        1.0 - x
                    } else {
                        x
                    }
                })
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        for w in errors.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

fn lovasz_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 16);
    let classes = 2 + seed as usize % 2;
    let (logits, labels) = loop {
        let z = random_tensor(&[classes, 3, 3], 2.0, &mut rng);
        let l = random_labels(9, classes, &mut rng);
        if lovasz_min_gap(&z, &l) > 1e-3 {
            break (z, l);
        }
    };
    let (_, g) = lovasz_of_logits(&logits, &labels)?;
    Ok(input_error(&logits, &g, |z| lovasz_of_logits(z, &labels).expect("shapes fixed").0))
}

// Pre-activations of every hidden unit for one input.
fn hidden_preactivations(params: &MlpParams, input: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = match &params.input_scale {
        Some(s) => input.iter().zip(s).map(|(a, b)| a * b).collect(),
        None => input.to_vec(),
    };
    let mut pre = Vec::new();
    for l in &params.layers[..params.layers.len() - 1] {
        let (d_out, d_in) = (l.d_out(), l.d_in());
        let w = l.weight.data();
        let z: Vec<f64> = (0..d_out)
            .map(|o| l.bias.data()[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
            .collect();
        pre.extend(&z);
        x = z.iter().map(|v| v.max(0.0)).collect();
    }
    pre
}

fn appearance_error(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 17);
    let cfg = GridConfig {
        angular_bins: 4,
        radial_bins: 6,
        rho_min: 0.0,
        rho_max: 10.0,
        ..GridConfig::default()
    };
    let (cloud, part, params) = loop {
        let points: Vec<Point> = (0..40)
            .map(|_| {
                let rho: f64 = rng.random_range(0.5..10.0);
                let theta: f64 = rng.random_range(-PI..PI);
                Point::new(rho * theta.cos(), rho * theta.sin(), rng.random_range(-2.0..1.0))
            })
            .collect();
        let cloud = PointCloud::new(points, 0);
        let part = partition(&cloud, &cfg);
        let mut params = MlpParams::init(&[7, 6, 3], &mut rng);
        for l in &mut params.layers {
            l.bias = random_tensor(&[l.d_out()], 0.5, &mut rng);
        }
        if seed % 2 == 1 {
            params.input_scale = Some((0..7).map(|_| rng.random_range(0.05..1.0)).collect());
        }
        let descriptors: Vec<Option<[f64; 7]>> = cloud
            .points
            .iter()
            .zip(part.assignment())
            .map(|(p, g)| g.map(|g| point_descriptor(p, g, &cfg)))
            .collect();
        let relu_margin = descriptors
            .iter()
            .flatten()
            .flat_map(|d| hidden_preactivations(&params, d))
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min);
        let mut pool_margin = f64::INFINITY;
        for c in 0..cfg.cells() {
            let outs: Vec<Vec<f64>> = part
                .cell_flat(c)
                .iter()
                .map(|&i| params.forward(descriptors[i as usize].as_ref().expect("in range")))
                .collect();
            for k in 0..params.out_dim() {
                let mut v: Vec<f64> = outs.iter().map(|o| o[k]).collect();
                v.sort_by(|a, b| b.total_cmp(a));
                if v.len() > 1 {
                    pool_margin = pool_margin.min(v[0] - v[1]);
                }
            }
        }
        if relu_margin > 1e-3 && pool_margin > 1e-3 {
            break (cloud, part, params);
        }
    };
    let r = random_tensor(&[3, cfg.angular_bins, cfg.radial_bins], 1.0, &mut rng);
    let (_, cache) = encode_appearance_train(&part, &cloud, &params, &cfg)?;
    let grads = appearance_backward(&cache, &params, &r)?;
    Ok(param_error(&params, &grads, |q| {
        dot(&r, &encode_appearance(&part, &cloud, q, &cfg).expect("shapes fixed").features)
    }))
}

type ErrorFn = fn(u64) -> Result<f64>;

/// Names and error functions of the gradient checks, with their limits.
pub const GRADIENT_CHECKS: [(&str, ErrorFn, f64); 7] = [
    ("ring_conv2d", ring_conv_error, 1e-5),
    ("coattention_gate", gate_error, 1e-5),
    ("motion_guided_attention", attention_error, 1e-5),
    ("amcm", amcm_error, 1e-5),
    ("weighted_ce", weighted_ce_error, 1e-5),
    ("lovasz_softmax", lovasz_error, 1e-4),
    ("appearance_encoder", appearance_error, 1e-5),
];

/// Closed-form AMCM checks: zero parameters give `0.75·F_a`, gate scores stay
/// in (0, 1), channel weights sum to `C_a`.
pub fn amcm_closed_forms(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut zero: f64 = 0.0;
    let mut outside = 0usize;
    let mut sum: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, 18);
        let c_a = rng.random_range(1..=4);
        let c_m = rng.random_range(1..=4);
        let fa = random_tensor(&[c_a, 5, 7], 3.0, &mut rng);
        let fm = random_tensor(&[c_m, 5, 7], 3.0, &mut rng);
        let out = amcm_forward(&fa, &fm, &AmcmParams::zeros(c_a, c_m))?;
        zero = zero.max(out.output().max_abs_diff(&fa.scale(0.75)));

        let mut p = random_amcm(c_a, c_m, &mut rng);
        p.gate = random_conv(2, c_a + c_m, 3, 3, 4.0, &mut rng);
        let out = amcm_forward(&fa, &fm, &p)?;
        let aux = out.aux();
        for g in [aux.g_a, aux.g_m] {
            if !(g > 0.0 && g < 1.0) {
                outside += 1;
            }
        }
        sum = sum.max((aux.channel_weights.iter().sum::<f64>() - c_a as f64).abs());
    }
    let detail = format!("{seeds} seeds");
    Ok(vec![
        CheckResult::at_most(Suite::Gradients, "amcm_zero_params_is_0.75_fa", zero, 1e-12, detail.clone()),
        CheckResult::at_most(Suite::Gradients, "gate_scores_in_open_unit", outside as f64, 0.0, detail.clone()),
        CheckResult::at_most(Suite::Gradients, "channel_weights_sum_to_c_a", sum, 1e-12, detail),
    ])
}

fn gradient_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f, limit) in GRADIENT_CHECKS {
        let mut worst = Worst::new();
        for seed in 0..opts.seeds {
            worst.update(f(seed)?, seed);
        }
        out.push(worst.result(name, limit, opts.seeds));
    }
    out.extend(amcm_closed_forms(opts.seeds)?);
    Ok(out)
}

// -------------------------------------------------------------------- loss

pub fn loss_suite() -> Result<Vec<CheckResult>> {
    let stats = ClassStats::new(vec![0.25, 0.75])?;
    let logits = Tensor::from_vec(&[2, 1], vec![0.3, 0.3])?;
    let (ce, _) = weighted_ce(&logits, &[Some(0)], &stats)?;
    let probs = Tensor::from_vec(&[2, 1], vec![0.7, 0.3])?;
    let (lovasz, _) = lovasz_softmax(&probs, &[Some(1)])?;
    let counts = ConfusionCounts {
        tp: 3,
        fp: 1,
        fn_: 0,
        tn: 10,
    };
    let s = softmax(&[1000.0, -1000.0, 0.0]);
    let mut acc = ConfusionCounts::default();
    crate::objective::accumulate(
        &mut acc,
        &[MosClass::Moving, MosClass::Static, MosClass::Moving],
        &[Some(MosClass::Moving), Some(MosClass::Moving), None],
    )?;
    Ok(vec![
        CheckResult::at_most(Suite::Loss, "weighted_ce_example", (ce - 1.386294).abs(), 1e-6, format!("{ce:.9}")),
        CheckResult::at_most(Suite::Loss, "lovasz_single_pixel", (lovasz - 0.7).abs(), 0.0, format!("{lovasz}")),
        CheckResult::at_most(Suite::Loss, "iou_example", (counts.iou() - 0.75).abs(), 0.0, format!("{}", counts.iou())),
        CheckResult::at_most(
            Suite::Loss,
            "iou_ignores_unlabeled",
            (acc.iou() - 0.5).abs(),
            0.0,
            format!("{acc:?}"),
        ),
        CheckResult::at_most(
            Suite::Loss,
            "softmax_extreme_logits",
            (s.iter().sum::<f64>() - 1.0).abs() + s.iter().filter(|v| !v.is_finite()).count() as f64,
            1e-15,
            String::new(),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckOptions {
        CheckOptions {
            seeds: 4,
            geometry_trials: 2,
            geometry_points: 2_000,
            motion_scenes: 1,
        }
    }

    #[test]
    fn reference_matches_edge_cases() {
        let cfg = GridConfig {
            angular_bins: 4,
            radial_bins: 5,
            rho_max: 10.0,
            ..GridConfig::default()
        };
        assert_eq!(reference_cell(&Point::new(0.0, 0.0, 0.0), &cfg), Some(GridIndex { u: 0, v: 2 }));
        assert_eq!(reference_cell(&Point::new(-1.0, 0.0, 0.0), &cfg), Some(GridIndex { u: 0, v: 3 }));
        assert_eq!(reference_cell(&Point::new(-1.0, -0.0, 0.0), &cfg), Some(GridIndex { u: 0, v: 0 }));
        assert_eq!(reference_cell(&Point::new(10.0, 0.0, 0.0), &cfg).map(|g| g.u), Some(4));
        assert_eq!(reference_cell(&Point::new(10.5, 0.0, 0.0), &cfg), None);
    }

    #[test]
    fn quick_suites_pass() {
        for suite in [Suite::Geometry, Suite::Gradients, Suite::Loss] {
            for r in run(suite, &quick()).unwrap() {
                assert!(r.passed, "{r}");
            }
        }
    }

    #[test]
    fn injected_fault_names_ring_conv() {
        crate::netcore::conv::inject_backward_fault(1e-3);
        let results = gradient_suite(&quick());
        crate::netcore::conv::inject_backward_fault(0.0);
        let failed: Vec<String> = results.unwrap().into_iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"ring_conv2d".to_string()), "{failed:?}");
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("speed".parse::<Suite>().is_err());
    }

    #[test]
    fn display_marks_outcome() {
        let r = CheckResult::at_most(Suite::Loss, "x", 2.0, 1.0, String::new());
        assert!(r.to_string().starts_with("FAIL loss/x"));
    }
}
