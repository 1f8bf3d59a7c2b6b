//! A small dual-branch network trained end to end on synthetic data.
//!
//! Appearance: point MLP, cell max-pool, two 3×3 ring convs. Motion: two 3×3
//! ring convs over the residual channels. One AMCM fuses the branches and a
//! 1×1 head scores static/moving per cell.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{appearance_backward, encode_appearance_train, AppearanceCache, MlpParams, DESCRIPTOR_DIM};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{back_project, partition_with, ClassMap, GridConfig, MosClass, Partition, PoseSE3};
use crate::ingest::LabelMap;
use crate::motion::WindowState;
use crate::netcore::{
    amcm_backward, amcm_forward, relu, relu_backward, ring_conv2d_backward, AmcmForward, AmcmParams, Conv2d,
    ParamSet, Sgd, Tensor,
};
use crate::objective::{accumulate, total_loss, ClassStats, ConfusionCounts};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Width of both branches and of the fused features.
    pub channels: usize,
    /// Hidden width of the point MLP.
    pub hidden: usize,
    /// When false the motion input is replaced by zeros.
    pub use_motion: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            epochs: 20,
            lr: 0.02,
            lr_decay: 0.99,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            channels: 16,
            hidden: 32,
            use_motion: true,
        }
    }
}

impl ToyConfig {
    /// Reads the `[train]` table of a config document; absent means defaults.
    pub fn from_document(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let cfg: ToyConfig = match table.get("train") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::config("train", e.message().to_string()))?,
            None => ToyConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::config("train", "batch_size, channels and hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub mlp: MlpParams,
    pub app1: Conv2d,
    pub app2: Conv2d,
    pub mot1: Conv2d,
    pub mot2: Conv2d,
    pub amcm: AmcmParams,
    pub head: Conv2d,
}

fn he_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    let bound = (6.0 / (c_in * k * k) as f64).sqrt();
    Conv2d {
        weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound)),
        bias: Tensor::zeros(&[c_out]),
    }
}

impl ToyModel {
    pub fn init(cfg: &ToyConfig, grid: &GridConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let mut mlp = MlpParams::init(&[DESCRIPTOR_DIM, cfg.hidden, c], &mut rng);
        // Inputs brought to order one. Absolute x, y and θ are dropped so the
        // encoder cannot memorize where objects sat in the training scenes.
        let r = grid.rho_max.max(1.0);
        let z = (grid.z_max - grid.z_min).max(1e-3);
        let cell_rho = (grid.rho_max - grid.rho_min) / grid.radial_bins as f64;
        let cell_theta = (grid.theta_max - grid.theta_min) / grid.angular_bins as f64;
        mlp.input_scale = Some(vec![0.0, 0.0, 1.0 / z, 1.0 / r, 0.0, 1.0 / cell_rho, 1.0 / cell_theta]);
        let m = grid.window;
        ToyModel {
            mlp,
            app1: he_conv(c, c, 3, &mut rng),
            app2: he_conv(c, c, 3, &mut rng),
            mot1: he_conv(c, m.max(1), 3, &mut rng),
            mot2: he_conv(c, c, 3, &mut rng),
            amcm: AmcmParams {
                gate: he_conv(2, 2 * c, 3, &mut rng),
                spatial: he_conv(1, c, 1, &mut rng),
                channel: he_conv(c, c, 1, &mut rng),
            },
            head: he_conv(2, c, 1, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &ToyModel) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl ParamSet for ToyModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.mlp.tensors();
        for c in [&self.app1, &self.app2, &self.mot1, &self.mot2] {
            v.extend(c.tensors());
        }
        v.extend(self.amcm.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.mlp.tensors_mut();
        for c in [&mut self.app1, &mut self.app2, &mut self.mot1, &mut self.mot2] {
            v.extend(c.tensors_mut());
        }
        v.extend(self.amcm.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

/// One training or evaluation frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub partition: Partition,
    /// `N × h × w` complete motion features.
    pub motion: Tensor,
    /// Majority label per cell; `None` for cells without labeled points.
    pub cell_labels: Vec<Option<usize>>,
    pub point_labels: Vec<Option<MosClass>>,
}

/// Builds one sample per completed frame of a labeled sequence.
pub fn build_samples(
    clouds: &[PointCloud],
    poses: &[PoseSE3],
    labels: &[Vec<u32>],
    grid: &GridConfig,
    map: &LabelMap,
    exec: Exec,
) -> Result<Vec<Sample>> {
    if clouds.len() != poses.len() || clouds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} clouds, {} poses, {} label files",
            clouds.len(),
            poses.len(),
            labels.len()
        )));
    }
    let mut ws = WindowState::new(grid.clone())?.with_exec(exec);
    let mut feats = Vec::new();
    for (cloud, pose) in clouds.iter().zip(poses) {
        if let Some(f) = ws.push_frame(cloud.clone(), *pose)? {
            feats.push(f);
        }
    }
    let cells = grid.cells();
    feats
        .into_iter()
        .map(|f| {
            let j = clouds
                .iter()
                .position(|c| c.frame_index == f.frame_index)
                .expect("emitted frame came from this sequence");
            let cloud = clouds[j].clone();
            if labels[j].len() != cloud.len() {
                return Err(Error::LabelMismatch {
                    labels: labels[j].len(),
                    points: cloud.len(),
                });
            }
            let partition = partition_with(&cloud, grid, exec);
            let point_labels: Vec<Option<MosClass>> =
                labels[j].iter().map(|&l| map.classify(l).mos()).collect();
            let mut votes = vec![[0u32; 2]; cells];
            for (a, l) in partition.assignment().iter().zip(&point_labels) {
                if let (Some(g), Some(l)) = (a, l) {
                    votes[grid.flat(*g)][l.index()] += 1;
                }
            }
            let cell_labels = votes
                .iter()
                .map(|v| match v {
                    [0, 0] => None,
                    [s, m] if m > s => Some(MosClass::Moving.index()),
                    _ => Some(MosClass::Static.index()),
                })
                .collect();
            let motion = Tensor::from_vec(&[f.channels, grid.angular_bins, grid.radial_bins], f.data)?;
            Ok(Sample {
                cloud,
                partition,
                motion,
                cell_labels,
                point_labels,
            })
        })
        .collect()
}

/// Cell-label class frequencies over a set of samples.
pub fn class_stats(samples: &[Sample]) -> Result<ClassStats> {
    let mut counts = [0u64; 2];
    for s in samples {
        for l in s.cell_labels.iter().flatten() {
            counts[*l] += 1;
        }
    }
    ClassStats::from_counts(&counts)
}

struct Forward {
    app_cache: AppearanceCache,
    x_a: Tensor,
    z_a1: Tensor,
    a1: Tensor,
    z_a2: Tensor,
    x_m: Tensor,
    z_m1: Tensor,
    m1: Tensor,
    z_m2: Tensor,
    fused: AmcmForward,
    logits: Tensor,
}

fn forward(model: &ToyModel, s: &Sample, grid: &GridConfig, use_motion: bool) -> Result<Forward> {
    let (app, app_cache) = encode_appearance_train(&s.partition, &s.cloud, &model.mlp, grid)?;
    let x_a = app.features;
    let z_a1 = model.app1.forward(&x_a)?;
    let a1 = relu(&z_a1);
    let z_a2 = model.app2.forward(&a1)?;
    let a2 = relu(&z_a2);
    let x_m = if use_motion {
        s.motion.clone()
    } else {
        Tensor::zeros(s.motion.shape())
    };
    let z_m1 = model.mot1.forward(&x_m)?;
    let m1 = relu(&z_m1);
    let z_m2 = model.mot2.forward(&m1)?;
    let m2 = relu(&z_m2);
    let fused = amcm_forward(&a2, &m2, &model.amcm)?;
    let logits = model.head.forward(fused.output())?;
    Ok(Forward {
        app_cache,
        x_a,
        z_a1,
        a1,
        z_a2,
        x_m,
        z_m1,
        m1,
        z_m2,
        fused,
        logits,
    })
}

fn backward(model: &ToyModel, f: &Forward, d_logits: &Tensor) -> Result<ToyModel> {
    let head = ring_conv2d_backward(f.fused.output(), &model.head.weight, d_logits)?;
    let fused = amcm_backward(&f.fused, &head.input, &model.amcm)?;

    let d_z_a2 = relu_backward(&f.z_a2, &fused.appearance);
    let app2 = ring_conv2d_backward(&f.a1, &model.app2.weight, &d_z_a2)?;
    let d_z_a1 = relu_backward(&f.z_a1, &app2.input);
    let app1 = ring_conv2d_backward(&f.x_a, &model.app1.weight, &d_z_a1)?;
    let mlp = appearance_backward(&f.app_cache, &model.mlp, &app1.input)?;

    let d_z_m2 = relu_backward(&f.z_m2, &fused.motion);
    let mot2 = ring_conv2d_backward(&f.m1, &model.mot2.weight, &d_z_m2)?;
    let d_z_m1 = relu_backward(&f.z_m1, &mot2.input);
    let mot1 = ring_conv2d_backward(&f.x_m, &model.mot1.weight, &d_z_m1)?;

    let conv = |g: crate::netcore::ConvGrads| Conv2d {
        weight: g.weight,
        bias: g.bias,
    };
    Ok(ToyModel {
        mlp,
        app1: conv(app1),
        app2: conv(app2),
        mot1: conv(mot1),
        mot2: conv(mot2),
        amcm: fused.params,
        head: conv(head),
    })
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grad(
    model: &ToyModel,
    s: &Sample,
    grid: &GridConfig,
    stats: &ClassStats,
    use_motion: bool,
) -> Result<(f64, ToyModel)> {
    let f = forward(model, s, grid, use_motion)?;
    let (loss, d_logits) = total_loss(&f.logits, &s.cell_labels, stats)?;
    Ok((loss, backward(model, &f, &d_logits)?))
}

/// Per-cell classes from the logits.
pub fn predict_cells(model: &ToyModel, s: &Sample, grid: &GridConfig, use_motion: bool) -> Result<ClassMap> {
    let f = forward(model, s, grid, use_motion)?;
    let cells = grid.cells();
    let l = f.logits.data();
    Ok(ClassMap {
        angular_bins: grid.angular_bins,
        radial_bins: grid.radial_bins,
        classes: (0..cells)
            .map(|c| {
                if l[cells + c] > l[c] {
                    MosClass::Moving
                } else {
                    MosClass::Static
                }
            })
            .collect(),
    })
}

/// Point-level moving-class confusion over `samples`.
pub fn evaluate(
    model: &ToyModel,
    samples: &[Sample],
    grid: &GridConfig,
    use_motion: bool,
    exec: Exec,
) -> Result<ConfusionCounts> {
    let per = par::map(exec, samples, |s| -> Result<ConfusionCounts> {
        let cells = predict_cells(model, s, grid, use_motion)?;
        let pred = back_project(&cells, &s.partition)?;
        let mut c = ConfusionCounts::default();
        accumulate(&mut c, &pred, &s.point_labels)?;
        Ok(c)
    });
    per.into_iter()
        .try_fold(ConfusionCounts::default(), |acc, c| Ok(acc + c?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: ToyModel,
    pub history: Vec<EpochStats>,
}

/// Trains a fresh model on `train` and scores `val` after every epoch.
pub fn toy_train(
    train: &[Sample],
    val: &[Sample],
    grid: &GridConfig,
    cfg: &ToyConfig,
    exec: Exec,
) -> Result<ToyRun> {
    cfg.validate()?;
    grid.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientFrames { need: 1, have: 0 });
    }
    let stats = class_stats(train)?;
    let mut model = ToyModel::init(cfg, grid);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = crate::netcore::lr_at_epoch(cfg.lr, cfg.lr_decay, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = par::map(exec, batch, |&i| loss_and_grad(&model, &train[i], grid, &stats, cfg.use_motion));
            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                grad.add_assign(&g);
            }
            if !batch_loss.is_finite() || !grad.tensors().iter().all(|t| t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grad)?;
            epoch_loss += batch_loss;
        }
        let counts = evaluate(&model, val, grid, cfg.use_motion, exec)?;
        let stats = EpochStats {
            epoch,
            lr: opt.lr,
            train_loss: epoch_loss / train.len() as f64,
            val_iou: counts.iou(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val IoU {:.4} (tp {} fp {} fn {})",
            stats.train_loss,
            stats.val_iou,
            counts.tp,
            counts.fp,
            counts.fn_
        );
        history.push(stats);
    }
    Ok(ToyRun { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::{central_difference, relative_error};
    use crate::synth::scene::{generate, BoxObject, EgoSpec, SceneSpec};

    fn grid() -> GridConfig {
        GridConfig {
            angular_bins: 12,
            radial_bins: 10,
            rho_max: 25.0,
            window: 4,
            min_points: 2,
            ..GridConfig::default()
        }
    }

    fn samples(velocity: [f64; 2]) -> Vec<Sample> {
        let spec = SceneSpec {
            frames: 6,
            ground_points: 600,
            max_range: 25.0,
            object_spacing: 0.4,
            ego: EgoSpec {
                speed: 0.3,
                ..EgoSpec::default()
            },
            objects: vec![BoxObject {
                size: [4.0, 2.0],
                height: 1.5,
                position: [8.0, 3.0],
                yaw: 0.0,
                velocity,
            }],
            ..SceneSpec::default()
        };
        let seq = generate(&spec).unwrap();
        let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
        let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
        let labels: Vec<_> = seq.iter().map(|f| f.labels.clone()).collect();
        build_samples(&clouds, &poses, &labels, &grid(), &LabelMap::default(), Exec::Sequential).unwrap()
    }

    fn small_cfg() -> ToyConfig {
        ToyConfig {
            channels: 3,
            hidden: 4,
            epochs: 2,
            batch_size: 2,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn one_sample_per_completed_frame() {
        let s = samples([0.8, 0.0]);
        assert_eq!(s.len(), 3);
        assert!(s[0].cell_labels.iter().any(|l| *l == Some(1)));
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let s = &samples([0.8, 0.0])[1];
        let g = grid();
        let model = ToyModel::init(&small_cfg(), &g);
        let stats = ClassStats::new(vec![0.7, 0.3]).unwrap();
        let (_, grad) = loss_and_grad(&model, s, &g, &stats, true).unwrap();
        // Spot-check the head, a motion conv and the AMCM gate.
        for idx in [model.mlp.tensors().len() + 6, model.mlp.tensors().len() + 4] {
            let x = model.tensors()[idx].data().to_vec();
            let f = |v: &[f64]| {
                let mut m = model.clone();
                m.tensors_mut()[idx].data_mut().copy_from_slice(v);
                let (l, _) = loss_and_grad(&m, s, &g, &stats, true).unwrap();
                l
            };
            let numeric = central_difference(f, &x, 1e-5);
            let analytic = grad.tensors()[idx].data().to_vec();
            let e = relative_error(&analytic, &numeric);
            // The Lovász term is piecewise smooth, hence the looser bound.
            assert!(e < 1e-4, "tensor {idx}: {e}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = samples([0.8, 0.0]);
        let g = grid();
        let a = toy_train(&s[..2], &s[2..], &g, &small_cfg(), Exec::Parallel).unwrap();
        let b = toy_train(&s[..2], &s[2..], &g, &small_cfg(), Exec::Sequential).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn static_only_scenes_score_one() {
        let s = samples([0.0, 0.0]);
        let cfg = ToyConfig {
            epochs: 20,
            ..small_cfg()
        };
        let run = toy_train(&s[..2], &s[2..], &grid(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(run.history.last().unwrap().val_iou, 1.0);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let s = samples([0.8, 0.0]);
        let cfg = ToyConfig {
            lr: 1e200,
            epochs: 3,
            ..small_cfg()
        };
        assert!(matches!(
            toy_train(&s, &s, &grid(), &cfg, Exec::Sequential),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn train_section_is_read() {
        let cfg = ToyConfig::from_document("window = 8\n[train]\nepochs = 5\nlr = 0.02\n").unwrap();
        assert_eq!((cfg.epochs, cfg.lr), (5, 0.02));
        assert!(ToyConfig::from_document("[train]\nbogus = 1\n").is_err());
    }
}
