//! Per-cell appearance features: a point-wise MLP followed by a max-pool over
//! the points of each polar cell, plus training-time augmentation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, GridConfig, GridIndex, Partition, PoseSE3};
use crate::netcore::linalg::{gemm, view};
use crate::netcore::{ParamSet, Tensor};
use crate::par::{self, Exec};

pub const DESCRIPTOR_DIM: usize = 7;

/// `(x, y, z, ρ, θ, ρ − ρ_c, θ − θ_c)` with `(ρ_c, θ_c)` the center of `g`.
pub fn point_descriptor(p: &Point, g: GridIndex, cfg: &GridConfig) -> [f64; DESCRIPTOR_DIM] {
    let pp = cart_to_polar(p);
    let (rc, tc) = cfg.cell_center(g);
    [p.x, p.y, p.z, pp.rho, pp.theta, pp.rho - rc, pp.theta - tc]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `d_out × d_in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Point-wise MLP. ReLU between layers, none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    /// Disabling the nonlinearity makes the MLP affine; used in tests.
    pub activation: bool,
    /// Fixed per-input multipliers applied before the first layer; not trained.
    pub input_scale: Option<Vec<f64>>,
}

impl MlpParams {
    /// He-uniform weights, zero biases. `dims = [d_in, hidden.., d_out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = (6.0 / d[0] as f64).sqrt();
                Dense {
                    weight: Tensor::from_fn(&[d[1], d[0]], |_| rng.random_range(-bound..bound)),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        MlpParams {
            layers,
            activation: true,
            input_scale: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            activation: self.activation,
            input_scale: self.input_scale.clone(),
        }
    }

    /// Square identity layer of size `dim`.
    pub fn identity(dim: usize) -> Self {
        MlpParams {
            layers: vec![Dense {
                weight: Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 }),
                bias: Tensor::zeros(&[dim]),
            }],
            activation: false,
            input_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Shape("MLP has no layers".into()))?;
        if first.d_in() != DESCRIPTOR_DIM {
            return Err(Error::Shape(format!(
                "first layer takes {} inputs, descriptors have {DESCRIPTOR_DIM}",
                first.d_in()
            )));
        }
        for pair in self.layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        if let Some(s) = &self.input_scale {
            if s.len() != DESCRIPTOR_DIM {
                return Err(Error::Shape(format!(
                    "{} input scales for {DESCRIPTOR_DIM} inputs",
                    s.len()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != [l.d_out()] {
                return Err(Error::Shape("bias length differs from layer width".into()));
            }
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::d_out)
    }

    /// Runs `n` points through the MLP at once. `inputs` is `n × d_in`
    /// row-major. Returns the (scaled) input of every layer plus the output.
    fn forward_batch(&self, inputs: &[f64], n: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(match &self.input_scale {
            Some(s) => inputs
                .chunks(s.len())
                .flat_map(|row| row.iter().zip(s).map(|(x, k)| x * k))
                .collect(),
            None => inputs.to_vec(),
        });
        for (li, l) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let (d_out, d_in) = (l.d_out(), l.d_in());
            let mut y: Vec<f64> = (0..n).flat_map(|_| l.bias.data().iter().copied()).collect();
            gemm(&mut y, view(x, n, d_in, false), view(l.weight.data(), d_out, d_in, true), 1.0);
            if li + 1 < self.layers.len() && self.activation {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_batch(input, 1).pop().unwrap()
    }

    /// Accumulates parameter gradients for a batch given `d_output`
    /// (`n × d_out`) and the activations from [`MlpParams::forward_batch`].
    fn backward_batch(&self, acts: &[Vec<f64>], d_output: Vec<f64>, n: usize, grads: &mut MlpParams) {
        let mut d = d_output;
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let x = &acts[li];
            let (d_out, d_in) = (l.d_out(), l.d_in());
            let g = &mut grads.layers[li];
            gemm(g.weight.data_mut(), view(&d, n, d_out, true), view(x, n, d_in, false), 1.0);
            for row in d.chunks(d_out) {
                for (b, v) in g.bias.data_mut().iter_mut().zip(row) {
                    *b += v;
                }
            }
            if li == 0 {
                break;
            }
            let mut dx = vec![0.0; n * d_in];
            gemm(&mut dx, view(&d, n, d_out, false), view(l.weight.data(), d_out, d_in, false), 0.0);
            // x is the post-activation input of layer li.
            if self.activation {
                for (dxi, &xi) in dx.iter_mut().zip(x) {
                    if xi <= 0.0 {
                        *dxi = 0.0;
                    }
                }
            }
            d = dx;
        }
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// `C_a × h × w` max-pooled features of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeatures {
    pub features: Tensor,
    pub frame_index: u64,
}

// Points go through the MLP in fixed-size blocks; the block size, not the
// executor, decides the arithmetic, so both executors agree exactly.
const BLOCK: usize = 2048;

/// Activations kept for the backward pass of [`encode_appearance_train`].
#[derive(Debug, Clone)]
pub struct AppearanceCache {
    /// Per block of in-range points: layer activations, row-major.
    blocks: Vec<Vec<Vec<f64>>>,
    /// In-range point row of the winning point per `(channel, cell)`, or `u32::MAX`.
    argmax: Vec<u32>,
    rows: usize,
    cells: usize,
    channels: usize,
}

fn check_inputs(part: &Partition, cloud: &PointCloud, params: &MlpParams, cfg: &GridConfig) -> Result<()> {
    params.validate()?;
    if part.point_count() != cloud.len() {
        return Err(Error::Shape(format!(
            "partition covers {} points, cloud has {}",
            part.point_count(),
            cloud.len()
        )));
    }
    if (part.angular_bins, part.radial_bins) != (cfg.angular_bins, cfg.radial_bins) {
        return Err(Error::Shape("partition grid differs from config".into()));
    }
    Ok(())
}

fn encode(
    part: &Partition,
    cloud: &PointCloud,
    params: &MlpParams,
    cfg: &GridConfig,
    exec: Exec,
) -> Result<(AppearanceFeatures, AppearanceCache)> {
    check_inputs(part, cloud, params, cfg)?;
    let in_range: Vec<(u32, GridIndex)> = part
        .assignment()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i as u32, g)))
        .collect();
    let chunks: Vec<&[(u32, GridIndex)]> = in_range.chunks(BLOCK).collect();
    let blocks: Vec<Vec<Vec<f64>>> = par::map(exec, &chunks, |chunk| {
        let inputs: Vec<f64> = chunk
            .iter()
            .flat_map(|&(i, g)| point_descriptor(&cloud.points[i as usize], g, cfg))
            .collect();
        params.forward_batch(&inputs, chunk.len())
    });
    let mut row_of = vec![u32::MAX; cloud.len()];
    for (row, (i, _)) in in_range.iter().enumerate() {
        row_of[*i as usize] = row as u32;
    }
    let channels = params.out_dim();
    let output = |row: u32| -> &[f64] {
        let r = row as usize;
        let out = blocks[r / BLOCK].last().unwrap();
        &out[(r % BLOCK) * channels..(r % BLOCK + 1) * channels]
    };
    let cells = cfg.cells();
    let mut features = Tensor::zeros(&[channels, cfg.angular_bins, cfg.radial_bins]);
    let mut argmax = vec![u32::MAX; channels * cells];
    let out = features.data_mut();
    for cell in 0..cells {
        let members = part.cell_flat(cell);
        if members.is_empty() {
            continue;
        }
        for c in 0..channels {
            let mut best = u32::MAX;
            let mut best_v = f64::NEG_INFINITY;
            for &m in members {
                let row = row_of[m as usize];
                let v = output(row)[c];
                if v > best_v {
                    best_v = v;
                    best = row;
                }
            }
            out[c * cells + cell] = best_v;
            argmax[c * cells + cell] = best;
        }
    }
    Ok((
        AppearanceFeatures {
            features,
            frame_index: part.frame_index,
        },
        AppearanceCache {
            blocks,
            argmax,
            rows: in_range.len(),
            cells,
            channels,
        },
    ))
}

/// Max-pooled MLP features per cell; empty cells hold zeros.
pub fn encode_appearance(
    part: &Partition,
    cloud: &PointCloud,
    params: &MlpParams,
    cfg: &GridConfig,
) -> Result<AppearanceFeatures> {
    encode_appearance_with(Exec::default(), part, cloud, params, cfg)
}

pub fn encode_appearance_with(
    exec: Exec,
    part: &Partition,
    cloud: &PointCloud,
    params: &MlpParams,
    cfg: &GridConfig,
) -> Result<AppearanceFeatures> {
    Ok(encode(part, cloud, params, cfg, exec)?.0)
}

/// Forward pass that also keeps what [`appearance_backward`] needs.
pub fn encode_appearance_train(
    part: &Partition,
    cloud: &PointCloud,
    params: &MlpParams,
    cfg: &GridConfig,
) -> Result<(AppearanceFeatures, AppearanceCache)> {
    encode(part, cloud, params, cfg, Exec::default())
}

/// Parameter gradients given the upstream gradient of the pooled features.
/// Ties in the max-pool go to the earliest point.
pub fn appearance_backward(
    cache: &AppearanceCache,
    params: &MlpParams,
    d_features: &Tensor,
) -> Result<MlpParams> {
    if d_features.len() != cache.channels * cache.cells {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, features have {}",
            d_features.len(),
            cache.channels * cache.cells
        )));
    }
    let mut d_rows = vec![0.0; cache.rows * cache.channels];
    let g = d_features.data();
    for (k, &row) in cache.argmax.iter().enumerate() {
        if row != u32::MAX {
            d_rows[row as usize * cache.channels + k / cache.cells] += g[k];
        }
    }
    let mut grads = params.zeros_like();
    for (b, acts) in cache.blocks.iter().enumerate() {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(cache.rows);
        let d = d_rows[lo * cache.channels..hi * cache.channels].to_vec();
        params.backward_batch(acts, d, hi - lo, &mut grads);
    }
    Ok(grads)
}

/// Sampled augmentation: optional mirror across the x axis (y → −y), then a
/// rotation about z, then a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle: f64,
    pub shift: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Rotation is uniform in `[−max_rotation, max_rotation)`.
    pub max_rotation: f64,
    /// Each translation component is uniform in `[−max_shift, max_shift]`.
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            max_rotation: PI,
            max_shift: 0.5,
        }
    }
}

impl AugmentDraw {
    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random_bool(cfg.flip_probability);
        let angle = if cfg.max_rotation > 0.0 {
            rng.random_range(-cfg.max_rotation..cfg.max_rotation)
        } else {
            0.0
        };
        let mut shift = [0.0; 3];
        if cfg.max_shift > 0.0 {
            for s in &mut shift {
                *s = rng.random_range(-cfg.max_shift..=cfg.max_shift);
            }
        }
        AugmentDraw { flip, angle, shift }
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let rigid = PoseSE3::planar(self.shift[0], self.shift[1], self.shift[2], self.angle);
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| {
                    let p = if self.flip { Point { y: -p.y, ..*p } } else { *p };
                    rigid.apply(&p)
                })
                .collect(),
            frame_index: cloud.frame_index,
        }
    }
}

/// Deterministic augmentation of `cloud` under `seed`.
pub fn augment(cloud: &PointCloud, seed: u64, cfg: &AugmentConfig) -> PointCloud {
    AugmentDraw::sample(seed, cfg).apply(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::partition;

    fn cfg() -> GridConfig {
        GridConfig {
            angular_bins: 8,
            radial_bins: 5,
            rho_max: 10.0,
            ..GridConfig::default()
        }
    }

    #[test]
    fn descriptor_at_center_and_origin() {
        let cfg = cfg();
        let g = GridIndex { u: 2, v: 3 };
        let (rc, tc) = cfg.cell_center(g);
        let p = Point::new(rc * tc.cos(), rc * tc.sin(), 0.5);
        let d = point_descriptor(&p, g, &cfg);
        assert!(d[5].abs() < 1e-12 && d[6].abs() < 1e-12);
        let pp = cart_to_polar(&p);
        assert_eq!((d[3], d[4]), (pp.rho, pp.theta));

        let g0 = GridIndex { u: 0, v: 4 };
        let (rc, tc) = cfg.cell_center(g0);
        let d = point_descriptor(&Point::new(0.0, 0.0, 0.0), g0, &cfg);
        assert_eq!(d, [0.0, 0.0, 0.0, 0.0, 0.0, -rc, -tc]);
    }

    #[test]
    fn identity_mlp_pools_descriptors() {
        let cfg = cfg();
        let cloud = PointCloud::new(vec![Point::new(3.1, 0.2, -1.0), Point::new(3.3, 0.25, 0.5)], 0);
        let part = partition(&cloud, &cfg);
        let g = part.assignment()[0].unwrap();
        assert_eq!(part.assignment()[1], Some(g));
        let feats = encode_appearance(&part, &cloud, &MlpParams::identity(7), &cfg).unwrap();
        let d0 = point_descriptor(&cloud.points[0], g, &cfg);
        let d1 = point_descriptor(&cloud.points[1], g, &cfg);
        let cell = cfg.flat(g);
        for c in 0..7 {
            assert_eq!(feats.features.plane(c)[cell], d0[c].max(d1[c]));
        }
        let other = (cell + 1) % cfg.cells();
        assert!((0..7).all(|c| feats.features.plane(c)[other] == 0.0));
    }

    #[test]
    fn pooled_features_ignore_point_order() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MlpParams::init(&[7, 16, 8], &mut rng);
        let pts: Vec<Point> = (0..40)
            .map(|_| Point::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-2.0..1.0)))
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = PointCloud::new(pts, 0);
        let b = PointCloud::new(rev, 0);
        let fa = encode_appearance(&partition(&a, &cfg), &a, &params, &cfg).unwrap();
        let fb = encode_appearance(&partition(&b, &cfg), &b, &params, &cfg).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn dimension_checks() {
        let cfg = cfg();
        let cloud = PointCloud::new(vec![Point::new(1.0, 1.0, 0.0)], 0);
        let part = partition(&cloud, &cfg);
        let bad = MlpParams::identity(5);
        assert!(encode_appearance(&part, &cloud, &bad, &cfg).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut broken = MlpParams::init(&[7, 4, 3], &mut rng);
        broken.layers[1].weight = Tensor::zeros(&[3, 5]);
        assert!(encode_appearance(&part, &cloud, &broken, &cfg).is_err());
    }

    #[test]
    fn augmentation_is_deterministic_and_rigid() {
        let cloud = PointCloud::new(
            vec![Point::new(1.0, 2.0, 0.0), Point::new(-3.0, 0.5, 1.0), Point::new(4.0, -4.0, -1.5)],
            2,
        );
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&cloud, 17, &cfg), augment(&cloud, 17, &cfg));

        let flip = AugmentDraw {
            flip: true,
            angle: 0.0,
            shift: [0.0; 3],
        };
        let twice = flip.apply(&flip.apply(&cloud));
        for (a, b) in twice.points.iter().zip(&cloud.points) {
            assert!(a.distance(b) < 1e-12);
        }

        let rot = AugmentDraw {
            flip: false,
            angle: 2.1,
            shift: [0.0; 3],
        };
        let r = rot.apply(&cloud);
        for i in 0..3 {
            for j in 0..3 {
                let d0 = cloud.points[i].distance(&cloud.points[j]);
                let d1 = r.points[i].distance(&r.points[j]);
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampled_ranges() {
        let cfg = AugmentConfig::default();
        let mut flips = 0;
        for seed in 0..400 {
            let d = AugmentDraw::sample(seed, &cfg);
            flips += d.flip as usize;
            assert!((-PI..PI).contains(&d.angle));
            assert!(d.shift.iter().all(|s| s.abs() <= 0.5));
        }
        assert!((120..280).contains(&flips));
    }
}
