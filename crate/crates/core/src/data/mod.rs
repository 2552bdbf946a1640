//! Environment datasets: generation, transformation, and client partitioning.

pub mod container;
pub mod idx;
pub mod stain;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::model::Sample;
use crate::rng::substream;

/// How a sample's feature vector is colored when staining is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StainMode {
    None,
    /// Recolor pixels above half of the maximum intensity.
    Foreground,
    /// Recolor pixels at or below half of the maximum intensity.
    Background,
    /// Recolor every pixel.
    Both,
}

/// Spatial structure of the feature vector, used by [`rotate_env`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    /// No rotatable structure.
    Flat,
    /// Features are a row-major image.
    Image { rows: usize, cols: usize },
    /// Rotation acts on the plane spanned by two designated coordinates.
    Plane { a: usize, b: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvMeta {
    /// Scheduled label/spurious-feature correlation in `[-1, 1]`.
    pub spurious_corr: f64,
    /// Total rotation applied so far, in degrees.
    pub rotation_deg: f64,
    pub stain_mode: StainMode,
    pub palette_size: usize,
}

impl Default for EnvMeta {
    fn default() -> Self {
        EnvMeta {
            spurious_corr: 0.0,
            rotation_deg: 0.0,
            stain_mode: StainMode::None,
            palette_size: 0,
        }
    }
}

/// One environment's samples plus the knobs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDataset {
    pub env_id: usize,
    pub samples: Vec<Sample>,
    pub meta: EnvMeta,
    pub shape: FeatureShape,
}

/// Assignment of clients to environments plus the held-out environment.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    /// client id -> env id; ids are unique by construction.
    pub client_env_map: BTreeMap<usize, usize>,
    pub holdout_env: usize,
    /// Fraction of each client's samples that become training data; the
    /// rest is the client's in-distribution test split.
    pub train_fraction: f64,
}

/// One client's local data after partitioning.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub client_id: usize,
    pub env_id: usize,
    pub train: Vec<Sample>,
    pub id_test: Vec<Sample>,
}

/// Rotates every sample of an environment by `angle_deg` counterclockwise.
///
/// Image-shaped features are resampled with nearest-neighbor lookup around
/// the image center (out-of-frame sources become 0); plane-shaped features
/// rotate the two designated coordinates exactly. `meta.rotation_deg`
/// accumulates.
pub fn rotate_env(data: &EnvDataset, angle_deg: f64) -> Result<EnvDataset> {
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut out = data.clone();
    out.meta.rotation_deg += angle_deg;
    match data.shape {
        FeatureShape::Flat => {
            return Err(CoreError::Domain(
                "environment has no rotatable structure (flat features)".into(),
            ))
        }
        FeatureShape::Image { rows, cols } => {
            if rows != cols {
                return Err(CoreError::Domain(format!(
                    "image rotation needs square images, got {rows}x{cols}"
                )));
            }
            let c = (rows as f64 - 1.0) / 2.0;
            for (si, s) in out.samples.iter_mut().enumerate() {
                if s.x.len() != rows * cols {
                    return Err(CoreError::DimensionMismatch(format!(
                        "sample {si} has {} features, expected {rows}x{cols} image",
                        s.x.len()
                    )));
                }
                let src = s.x.clone();
                for r in 0..rows {
                    for q in 0..cols {
                        // Inverse map: where did this output pixel come from.
                        let dy = r as f64 - c;
                        let dx = q as f64 - c;
                        let sy = cos * dy + sin * dx + c;
                        let sx = -sin * dy + cos * dx + c;
                        let (ri, qi) = (sy.round(), sx.round());
                        s.x[r * cols + q] = if ri >= 0.0
                            && qi >= 0.0
                            && (ri as usize) < rows
                            && (qi as usize) < cols
                        {
                            src[ri as usize * cols + qi as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        FeatureShape::Plane { a, b } => {
            for (si, s) in out.samples.iter_mut().enumerate() {
                if a >= s.x.len() || b >= s.x.len() {
                    return Err(CoreError::DimensionMismatch(format!(
                        "sample {si} has {} features, rotation plane is ({a}, {b})",
                        s.x.len()
                    )));
                }
                let (xa, xb) = (s.x[a], s.x[b]);
                s.x[a] = cos * xa - sin * xb;
                s.x[b] = sin * xa + cos * xb;
            }
        }
    }
    Ok(out)
}

/// Splits environments into per-client train / in-distribution test sets and
/// the full held-out environment.
///
/// Clients mapped to the same environment receive disjoint shuffled shares;
/// no sample lands in more than one split. The shuffle for environment `e`
/// draws from the `partition/env<e>` stream of `seed`.
pub fn partition_clients(
    envs: &[EnvDataset],
    plan: &PartitionPlan,
    seed: u64,
) -> Result<(Vec<ClientData>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&plan.train_fraction) {
        return Err(CoreError::Plan(format!(
            "train_fraction must be in [0, 1], got {}",
            plan.train_fraction
        )));
    }
    let env_index: BTreeMap<usize, usize> = envs
        .iter()
        .enumerate()
        .map(|(i, e)| (e.env_id, i))
        .collect();
    if env_index.len() != envs.len() {
        return Err(CoreError::Plan("duplicate env ids".into()));
    }
    if !env_index.contains_key(&plan.holdout_env) {
        return Err(CoreError::Plan(format!(
            "holdout env {} does not exist",
            plan.holdout_env
        )));
    }
    let mut by_env: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&client, &env) in &plan.client_env_map {
        if env == plan.holdout_env {
            return Err(CoreError::Plan(format!(
                "client {client} is mapped to the holdout env {env}"
            )));
        }
        if !env_index.contains_key(&env) {
            return Err(CoreError::Plan(format!(
                "client {client} is mapped to nonexistent env {env}"
            )));
        }
        by_env.entry(env).or_default().push(client);
    }
    let mut clients = Vec::with_capacity(plan.client_env_map.len());
    for (&env_id, client_ids) in &by_env {
        let env = &envs[env_index[&env_id]];
        let mut order: Vec<usize> = (0..env.samples.len()).collect();
        order.shuffle(&mut substream(seed, &format!("partition/env{env_id}")));
        let k = client_ids.len();
        let base = order.len() / k;
        let rem = order.len() % k;
        let mut cursor = 0;
        for (ci, &client_id) in client_ids.iter().enumerate() {
            let share = base + usize::from(ci < rem);
            let idx = &order[cursor..cursor + share];
            cursor += share;
            let n_train = (plan.train_fraction * share as f64 + 0.5).floor() as usize;
            let take = |slice: &[usize]| -> Vec<Sample> {
                slice.iter().map(|&i| env.samples[i].clone()).collect()
            };
            clients.push(ClientData {
                client_id,
                env_id,
                train: take(&idx[..n_train]),
                id_test: take(&idx[n_train..]),
            });
        }
    }
    clients.sort_by_key(|c| c.client_id);
    let ood_test = envs[env_index[&plan.holdout_env]].samples.clone();
    Ok((clients, ood_test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Target;

    fn plane_env(n: usize) -> EnvDataset {
        EnvDataset {
            env_id: 0,
            samples: (0..n)
                .map(|i| Sample::class(vec![i as f64, 1.0, -1.0], i % 2))
                .collect(),
            meta: EnvMeta::default(),
            shape: FeatureShape::Plane { a: 0, b: 1 },
        }
    }

    #[test]
    fn plane_rotation_is_exact_on_quarter_turns() {
        let env = plane_env(3);
        let rot = rotate_env(&env, 90.0).unwrap();
        for (orig, r) in env.samples.iter().zip(&rot.samples) {
            assert!((r.x[0] - -orig.x[1]).abs() < 1e-12);
            assert!((r.x[1] - orig.x[0]).abs() < 1e-12);
            assert_eq!(r.x[2], orig.x[2]);
        }
        assert_eq!(rot.meta.rotation_deg, 90.0);
        let back = rotate_env(&rot, 270.0).unwrap();
        for (orig, b) in env.samples.iter().zip(&back.samples) {
            assert!((b.x[0] - orig.x[0]).abs() < 1e-12);
            assert!((b.x[1] - orig.x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn image_rotation_half_turn_twice_is_identity() {
        let env = EnvDataset {
            env_id: 1,
            samples: vec![Sample::class((0..64).map(|i| i as f64 / 64.0).collect(), 0)],
            meta: EnvMeta::default(),
            shape: FeatureShape::Image { rows: 8, cols: 8 },
        };
        let once = rotate_env(&env, 180.0).unwrap();
        assert_ne!(once.samples[0].x, env.samples[0].x);
        let twice = rotate_env(&once, 180.0).unwrap();
        for (a, b) in env.samples[0].x.iter().zip(&twice.samples[0].x) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = rotate_env(&env, 0.0).unwrap();
        assert_eq!(zero.samples[0].x, env.samples[0].x);
    }

    #[test]
    fn flat_and_non_square_rotations_are_rejected() {
        let mut env = plane_env(1);
        env.shape = FeatureShape::Flat;
        assert!(matches!(rotate_env(&env, 15.0), Err(CoreError::Domain(_))));
        env.shape = FeatureShape::Image { rows: 1, cols: 3 };
        assert!(matches!(rotate_env(&env, 15.0), Err(CoreError::Domain(_))));
    }

    fn four_envs(n: usize) -> Vec<EnvDataset> {
        (0..4)
            .map(|e| EnvDataset {
                env_id: e,
                samples: (0..n)
                    .map(|i| Sample::class(vec![e as f64, i as f64], i % 2))
                    .collect(),
                meta: EnvMeta::default(),
                shape: FeatureShape::Flat,
            })
            .collect()
    }

    #[test]
    fn partition_is_disjoint_and_holdout_is_whole() {
        let envs = four_envs(20);
        let plan = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 0), (1, 1), (2, 2), (3, 0)]),
            holdout_env: 3,
            train_fraction: 0.9,
        };
        let (clients, ood) = partition_clients(&envs, &plan, 5).unwrap();
        assert_eq!(ood.len(), 20);
        assert_eq!(clients.len(), 4);
        assert_eq!(clients.iter().map(|c| c.client_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        // Clients 0 and 3 share env 0: each gets 10 samples, split 9/1.
        for c in [&clients[0], &clients[3]] {
            assert_eq!(c.train.len(), 9);
            assert_eq!(c.id_test.len(), 1);
        }
        // Disjointness within the shared env, using the unique second feature.
        let mut seen: Vec<u64> = clients[0]
            .train
            .iter()
            .chain(&clients[0].id_test)
            .chain(clients[3].train.iter())
            .chain(&clients[3].id_test)
            .map(|s| s.x[1].to_bits())
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn partition_full_train_fraction_leaves_no_id_test() {
        let envs = four_envs(10);
        let plan = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 1)]),
            holdout_env: 3,
            train_fraction: 1.0,
        };
        let (clients, _) = partition_clients(&envs, &plan, 9).unwrap();
        assert_eq!(clients[0].train.len(), 10);
        assert!(clients[0].id_test.is_empty());
    }

    #[test]
    fn partition_rejects_bad_plans() {
        let envs = four_envs(10);
        let holdout_client = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 3)]),
            holdout_env: 3,
            train_fraction: 0.9,
        };
        assert!(matches!(
            partition_clients(&envs, &holdout_client, 1),
            Err(CoreError::Plan(_))
        ));
        let missing_env = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 9)]),
            holdout_env: 3,
            train_fraction: 0.9,
        };
        assert!(matches!(
            partition_clients(&envs, &missing_env, 1),
            Err(CoreError::Plan(_))
        ));
        let missing_holdout = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 0)]),
            holdout_env: 11,
            train_fraction: 0.9,
        };
        assert!(matches!(
            partition_clients(&envs, &missing_holdout, 1),
            Err(CoreError::Plan(_))
        ));
    }

    #[test]
    fn partition_is_deterministic_per_seed() {
        let envs = four_envs(30);
        let plan = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 0), (1, 0), (2, 1)]),
            holdout_env: 3,
            train_fraction: 0.8,
        };
        let (a, _) = partition_clients(&envs, &plan, 42).unwrap();
        let (b, _) = partition_clients(&envs, &plan, 42).unwrap();
        let (c, _) = partition_clients(&envs, &plan, 43).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.id_test, y.id_test);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.train != y.train));
    }

    #[test]
    fn sample_targets_survive_partition() {
        let envs = four_envs(10);
        let plan = PartitionPlan {
            client_env_map: BTreeMap::from([(0, 2)]),
            holdout_env: 3,
            train_fraction: 0.5,
        };
        let (clients, _) = partition_clients(&envs, &plan, 3).unwrap();
        for s in clients[0].train.iter().chain(&clients[0].id_test) {
            assert!(matches!(s.y, Target::Class(c) if c < 2));
        }
    }
}
