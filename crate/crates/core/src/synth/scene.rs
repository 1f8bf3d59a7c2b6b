use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::par::{self, Exec};

/// Raw label codes written for synthetic points (SemanticKITTI numbering).
pub const LABEL_GROUND: u32 = 40;
pub const LABEL_PARKED: u32 = 10;
pub const LABEL_MOVING: u32 = 252;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    #[default]
    Line,
    Arc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EgoSpec {
    pub kind: TrajectoryKind,
    /// Meters per frame.
    pub speed: f64,
    /// Radians per frame, arcs only.
    pub yaw_rate: f64,
}

/// An upright box resting on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    /// Footprint length and width in meters.
    pub size: [f64; 2],
    pub height: f64,
    /// World position of the footprint center at frame 0.
    pub position: [f64; 2],
    pub yaw: f64,
    /// World velocity in meters per frame. Zero means parked.
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl BoxObject {
    pub fn is_moving(&self) -> bool {
        self.velocity[0].hypot(self.velocity[1]) > 0.0
    }

    pub fn center_at(&self, frame: usize) -> [f64; 2] {
        let t = frame as f64;
        [
            self.position[0] + self.velocity[0] * t,
            self.position[1] + self.velocity[1] * t,
        ]
    }

    fn contains_xy(&self, frame: usize, x: f64, y: f64) -> bool {
        let [cx, cy] = self.center_at(frame);
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0
    }

    /// Surface lattice in the box frame (origin at footprint center, z up
    /// from the ground), top face and four sides.
    fn surface(&self, spacing: f64) -> Vec<[f64; 3]> {
        let [l, w] = self.size;
        let h = self.height;
        let n = |len: f64| ((len / spacing).ceil() as usize).max(1);
        let (nl, nw, nh) = (n(l), n(w), n(h));
        let at = |i: usize, k: usize, len: f64| ((i as f64 + 0.5) / k as f64 - 0.5) * len;
        let mut pts = Vec::new();
        for i in 0..nl {
            for j in 0..nw {
                pts.push([at(i, nl, l), at(j, nw, w), h]);
            }
        }
        for k in 0..nh {
            let z = (k as f64 + 0.5) / nh as f64 * h;
            for i in 0..nl {
                pts.push([at(i, nl, l), -w / 2.0, z]);
                pts.push([at(i, nl, l), w / 2.0, z]);
            }
            for j in 0..nw {
                pts.push([-l / 2.0, at(j, nw, w), z]);
                pts.push([l / 2.0, at(j, nw, w), z]);
            }
        }
        pts
    }
}

/// Randomly placed objects drawn from the scene seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RandomObjects {
    pub moving: usize,
    pub parked: usize,
}

/// A synthetic sequence: flat ground, box objects and an ego trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub ego: EgoSpec,
    pub ground_z: f64,
    /// Ground returns per frame, drawn uniformly in ρ and θ around the ego.
    pub ground_points: usize,
    /// When set, the ground is instead a fixed world lattice with this pitch,
    /// so every frame sees the same static ground points.
    pub ground_spacing: Option<f64>,
    pub ground_rho_min: f64,
    /// Sensor range; ground is sampled out to here and objects must stay inside.
    pub max_range: f64,
    /// Lattice pitch of object surface samples.
    pub object_spacing: f64,
    /// Per-coordinate Gaussian noise on every point.
    pub noise_sigma: f64,
    /// Gaussian noise on reported poses (x, y in meters, yaw in radians).
    pub pose_noise: f64,
    pub objects: Vec<BoxObject>,
    pub random_objects: RandomObjects,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 24,
            ego: EgoSpec {
                kind: TrajectoryKind::Line,
                speed: 0.5,
                yaw_rate: 0.0,
            },
            ground_z: -1.7,
            ground_points: 9_000,
            ground_spacing: None,
            ground_rho_min: 2.0,
            max_range: 40.0,
            object_spacing: 0.2,
            noise_sigma: 0.01,
            pose_noise: 0.0,
            objects: Vec::new(),
            random_objects: RandomObjects::default(),
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scene(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// True ego pose at `frame`.
    pub fn ego_pose(&self, frame: usize) -> PoseSE3 {
        let t = frame as f64;
        match self.ego.kind {
            TrajectoryKind::Line => PoseSE3::translation(self.ego.speed * t, 0.0, 0.0),
            TrajectoryKind::Arc => {
                let yaw = self.ego.yaw_rate * t;
                if self.ego.yaw_rate == 0.0 {
                    return PoseSE3::translation(self.ego.speed * t, 0.0, 0.0);
                }
                let r = self.ego.speed / self.ego.yaw_rate;
                PoseSE3::planar(r * yaw.sin(), r * (1.0 - yaw.cos()), 0.0, yaw)
            }
        }
    }

    /// Explicit objects followed by the seeded random ones.
    pub fn all_objects(&self) -> Vec<BoxObject> {
        let mut objs = self.objects.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let wanted = self.random_objects.moving + self.random_objects.parked;
        let mut attempts = 0;
        let mut placed = 0;
        while placed < wanted && attempts < 10_000 {
            attempts += 1;
            let moving = placed < self.random_objects.moving;
            let rho = rng.random_range(6.0..self.max_range * 0.55);
            let theta = rng.random_range(-PI..PI);
            let yaw = rng.random_range(-PI..PI);
            let speed = if moving { rng.random_range(0.6..1.2) } else { 0.0 };
            let obj = BoxObject {
                size: [rng.random_range(3.5..5.0), rng.random_range(1.6..2.1)],
                height: rng.random_range(1.2..2.0),
                position: [rho * theta.cos(), rho * theta.sin()],
                yaw,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
            };
            let fits = (0..self.frames).all(|f| {
                let [x, y] = obj.center_at(f);
                let ego = self.ego_pose(f).translation_vector();
                (x - ego.x).hypot(y - ego.y) < self.max_range * 0.8
                    && (x - ego.x).hypot(y - ego.y) > 5.0
                    && objs.iter().all(|o| {
                        let [ox, oy] = o.center_at(f);
                        (x - ox).hypot(y - oy) > 7.0
                    })
            });
            if fits {
                objs.push(obj);
                placed += 1;
            }
        }
        objs
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || self.pose_noise < 0.0 {
            return Err(Error::Scene("noise must be non-negative".into()));
        }
        if !(self.max_range > self.ground_rho_min && self.ground_rho_min >= 0.0) {
            return Err(Error::Scene("max_range must exceed ground_rho_min".into()));
        }
        if self.ground_spacing.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::Scene("ground_spacing must be positive".into()));
        }
        if self.object_spacing <= 0.0 {
            return Err(Error::Scene("object_spacing must be positive".into()));
        }
        for (i, o) in self.all_objects().iter().enumerate() {
            if o.size.iter().any(|s| *s <= 0.0) || o.height <= 0.0 {
                return Err(Error::Scene(format!("object {i} has non-positive size")));
            }
            for f in 0..self.frames {
                let [x, y] = o.center_at(f);
                let ego = self.ego_pose(f).translation_vector();
                if (x - ego.x).hypot(y - ego.y) >= self.max_range {
                    return Err(Error::Scene(format!(
                        "object {i} leaves sensor range at frame {f}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One generated frame: sensor-frame cloud, reported world pose, raw labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub cloud: PointCloud,
    pub pose: PoseSE3,
    pub labels: Vec<u32>,
}

pub fn generate(spec: &SceneSpec) -> Result<Vec<SynthFrame>> {
    generate_with(Exec::default(), spec)
}

pub fn generate_with(exec: Exec, spec: &SceneSpec) -> Result<Vec<SynthFrame>> {
    spec.validate()?;
    let objects = spec.all_objects();
    let surfaces: Vec<Vec<[f64; 3]>> = objects
        .iter()
        .map(|o| o.surface(spec.object_spacing))
        .collect();
    let frames = par::map_range(exec, spec.frames, |f| {
        generate_frame(spec, &objects, &surfaces, f)
    });
    Ok(frames)
}

fn generate_frame(
    spec: &SceneSpec,
    objects: &[BoxObject],
    surfaces: &[Vec<[f64; 3]>],
    f: usize,
) -> SynthFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(f as u64);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let jitter = |rng: &mut ChaCha8Rng| {
        if spec.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };
    let ego = spec.ego_pose(f);
    let to_sensor = ego.inverse();
    let mut points = Vec::with_capacity(spec.ground_points + surfaces.iter().map(Vec::len).sum::<usize>());
    let mut labels = Vec::with_capacity(points.capacity());

    let on_object = |x: f64, y: f64| objects.iter().any(|o| o.contains_xy(f, x, y));
    if let Some(pitch) = spec.ground_spacing {
        let c = ego.translation_vector();
        let r = spec.max_range;
        let span = |lo: f64, hi: f64| (lo / pitch).floor() as i64..=(hi / pitch).ceil() as i64;
        for i in span(c.x - r, c.x + r) {
            for k in span(c.y - r, c.y + r) {
                let (x, y) = (i as f64 * pitch, k as f64 * pitch);
                let local = to_sensor.apply(&Point::new(x, y, spec.ground_z));
                let rho = local.x.hypot(local.y);
                if rho < spec.ground_rho_min || rho >= r || on_object(x, y) {
                    continue;
                }
                let dz = jitter(&mut rng);
                points.push(Point::new(local.x, local.y, local.z + dz));
                labels.push(LABEL_GROUND);
            }
        }
    } else {
        for _ in 0..spec.ground_points {
            let rho = rng.random_range(spec.ground_rho_min..spec.max_range);
            let theta = rng.random_range(-PI..PI);
            let local = Point::new(rho * theta.cos(), rho * theta.sin(), spec.ground_z);
            let world = ego.apply(&local);
            if on_object(world.x, world.y) {
                continue;
            }
            let dz = jitter(&mut rng);
            points.push(Point::new(local.x, local.y, local.z + dz));
            labels.push(LABEL_GROUND);
        }
    }

    for (o, surface) in objects.iter().zip(surfaces) {
        let [cx, cy] = o.center_at(f);
        let pose = PoseSE3::planar(cx, cy, spec.ground_z, o.yaw);
        let label = if o.is_moving() { LABEL_MOVING } else { LABEL_PARKED };
        for s in surface {
            let world = pose.apply(&Point::new(s[0], s[1], s[2]));
            let p = to_sensor.apply(&world);
            let (dx, dy, dz) = (jitter(&mut rng), jitter(&mut rng), jitter(&mut rng));
            points.push(Point::new(p.x + dx, p.y + dy, p.z + dz));
            labels.push(label);
        }
    }

    let reported = if spec.pose_noise > 0.0 {
        let n = Normal::new(0.0, spec.pose_noise).unwrap();
        let (dx, dy, dyaw) = (n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        ego.compose(&PoseSE3::planar(dx, dy, 0.0, dyaw))
    } else {
        ego
    };

    SynthFrame {
        cloud: PointCloud::new(points, f as u64),
        pose: reported,
        labels,
    }
}
