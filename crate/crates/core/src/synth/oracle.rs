//! Batch recomputations used as equality oracles for the incremental code.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, grid_index, relative, transform_cloud, GridConfig, PoseSE3};
use crate::motion::{FeatureMode, MotionFeatures};

/// Recomputes the complete motion features of frame `j` from scratch.
///
/// Channel `k` is the state after frame `j + k` arrived: the newer window
/// holds frames `j+k−N/2+1 ..= j+k`, the older `j+k−N+1 ..= j+k−N/2`
/// (frames before 0 are absent), both realigned to pose `j`.
pub fn oracle_motion_features(
    clouds: &[PointCloud],
    poses: &[PoseSE3],
    cfg: &GridConfig,
    j: usize,
) -> Result<MotionFeatures> {
    cfg.validate()?;
    if clouds.len() != poses.len() {
        return Err(Error::Shape(format!(
            "{} clouds but {} poses",
            clouds.len(),
            poses.len()
        )));
    }
    let n = cfg.window;
    let half = n / 2;
    if j + n > clouds.len() || (n == 0 && j >= clouds.len()) {
        return Err(Error::InsufficientFrames {
            need: j + n.max(1),
            have: clouds.len(),
        });
    }
    let cells = cfg.cells();
    let mut data = vec![0.0; n * cells];
    for k in 0..n {
        let t = j + k;
        let window = |lo: isize, hi: isize| -> Result<Vec<PointCloud>> {
            (lo.max(0)..=hi)
                .map(|f| Ok(transform_cloud(&clouds[f as usize], &relative(poses, j, f as usize)?)))
                .collect()
        };
        let t = t as isize;
        let newer = window(t - half as isize + 1, t)?;
        let older = window(t - n as isize + 1, t - half as isize)?;
        let (hn, cn) = heights(&newer, cfg);
        let (ho, co) = heights(&older, cfg);
        let out = &mut data[k * cells..(k + 1) * cells];
        for c in 0..cells {
            let (Some(a), Some(b)) = (hn[c], ho[c]) else {
                continue;
            };
            let raw = if k < half { a - b } else { b - a };
            let keep = cn[c] >= cfg.min_points
                && co[c] >= cfg.min_points
                && raw >= cfg.d_min
                && raw <= cfg.d_max;
            if keep {
                out[c] = raw;
            }
        }
    }
    Ok(MotionFeatures {
        angular_bins: cfg.angular_bins,
        radial_bins: cfg.radial_bins,
        channels: n,
        data,
        frame_index: clouds[j].frame_index,
        mode: FeatureMode::Complete,
    })
}

/// Per-cell height range and in-band count, by explicit per-point scanning.
fn heights(clouds: &[PointCloud], cfg: &GridConfig) -> (Vec<Option<f64>>, Vec<u32>) {
    let cells = cfg.cells();
    let mut range: Vec<Option<(f64, f64)>> = vec![None; cells];
    let mut count = vec![0u32; cells];
    for p in clouds.iter().flat_map(|c| &c.points) {
        if p.z <= cfg.z_min || p.z >= cfg.z_max {
            continue;
        }
        let Some(g) = grid_index(&cart_to_polar(p), cfg) else {
            continue;
        };
        let c = g.v * cfg.radial_bins + g.u;
        count[c] += 1;
        range[c] = Some(match range[c] {
            None => (p.z, p.z),
            Some((lo, hi)) => (lo.min(p.z), hi.max(p.z)),
        });
    }
    (range.into_iter().map(|r| r.map(|(lo, hi)| hi - lo)).collect(), count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::WindowState;
    use crate::synth::scene::{generate, BoxObject, EgoSpec, SceneSpec, TrajectoryKind};

    fn cfg() -> GridConfig {
        GridConfig {
            angular_bins: 32,
            radial_bins: 32,
            rho_max: 40.0,
            window: 4,
            ..GridConfig::default()
        }
    }

    fn spec() -> SceneSpec {
        SceneSpec {
            frames: 9,
            ground_points: 3000,
            ego: EgoSpec {
                kind: TrajectoryKind::Arc,
                speed: 0.7,
                yaw_rate: 0.02,
            },
            objects: vec![BoxObject {
                size: [4.0, 2.0],
                height: 1.5,
                position: [10.0, 4.0],
                yaw: 0.3,
                velocity: [0.8, 0.2],
            }],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn matches_incremental_windows() {
        let seq = generate(&spec()).unwrap();
        let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
        let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
        let mut ws = WindowState::new(cfg()).unwrap();
        let mut emitted = 0;
        for (i, f) in seq.iter().enumerate() {
            if let Some(feat) = ws.push_frame(f.cloud.clone(), f.pose).unwrap() {
                let j = feat.frame_index as usize;
                assert_eq!(j + 3, i);
                let oracle = oracle_motion_features(&clouds, &poses, &cfg(), j).unwrap();
                assert_eq!(feat.data, oracle.data);
                emitted += 1;
            }
        }
        assert_eq!(emitted, 6);
        assert!(ws.delay_free_features().is_ok());
    }

    #[test]
    fn needs_the_full_window() {
        let seq = generate(&spec()).unwrap();
        let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
        let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
        assert!(oracle_motion_features(&clouds, &poses, &cfg(), 5).is_ok());
        assert!(matches!(
            oracle_motion_features(&clouds, &poses, &cfg(), 6),
            Err(Error::InsufficientFrames { .. })
        ));
    }

    #[test]
    fn static_scene_gives_zero() {
        let mut s = spec();
        s.objects[0].velocity = [0.0, 0.0];
        s.ego.speed = 0.0;
        let seq = generate(&s).unwrap();
        let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
        let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
        let f = oracle_motion_features(&clouds, &poses, &cfg(), 2).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }
}
