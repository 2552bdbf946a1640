//! Maps a validated config onto engine inputs: environment datasets, the
//! client cohort, and the federated run configuration.

use fedinv_core::data::container::load_container;
use fedinv_core::data::idx::{load_idx, RawImages};
use fedinv_core::data::stain::colorize_with_map;
use fedinv_core::data::synth::{
    apply_label_noise, gen_digit_images, gen_quadratic_ensemble, gen_synthetic_envs,
};
use fedinv_core::data::{
    partition_clients, rotate_env, EnvDataset, EnvMeta, FeatureShape, PartitionPlan, StainMode,
};
use fedinv_core::error::{CoreError, Result};
use fedinv_core::penalty::PenaltyConfig;
use fedinv_core::rng::derive_seed;
use fedinv_core::sim::{
    Behavior, Client, ClientSpec, Cohort, FedConfig, InitScheme, PretrainConfig,
};

use crate::config::ExperimentConfig;

fn parse_stain_mode(name: &str) -> Result<StainMode> {
    match name {
        "none" => Ok(StainMode::None),
        "foreground" => Ok(StainMode::Foreground),
        "background" => Ok(StainMode::Background),
        "both" => Ok(StainMode::Both),
        other => Err(CoreError::Domain(format!("unknown stain mode {other:?}"))),
    }
}

fn image_slice(corpus: &RawImages, start: usize, n: usize) -> RawImages {
    let px = corpus.rows * corpus.cols;
    RawImages {
        rows: corpus.rows,
        cols: corpus.cols,
        pixels: corpus.pixels[start * px..(start + n) * px].to_vec(),
        labels: corpus.labels[start..start + n].to_vec(),
    }
}

/// Generates or loads the experiment's environments. Training environments
/// come first; for `stained-images` the held-out test environment is
/// appended with env id `num_envs`.
pub fn build_envs(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<EnvDataset>> {
    let d = &cfg.data;
    match d.kind.as_str() {
        "synthetic" => gen_synthetic_envs(
            d.num_envs.unwrap(),
            d.n_per_env.unwrap(),
            d.d_inv.unwrap(),
            d.d_spur.unwrap(),
            d.corr_schedule.as_ref().unwrap(),
            d.flip_test.unwrap_or(false),
            seed,
        ),
        "quadratic" => {
            let ensemble = gen_quadratic_ensemble(
                cfg.clients.count,
                d.dim.unwrap(),
                (d.curv_min.unwrap_or(0.5), d.curv_max.unwrap_or(1.5)),
                d.center_scale.unwrap_or(1.0),
                seed,
            )?;
            Ok(ensemble
                .iter()
                .enumerate()
                .map(|(i, q)| EnvDataset {
                    env_id: i,
                    samples: q.samples(),
                    meta: EnvMeta::default(),
                    shape: FeatureShape::Flat,
                })
                .collect())
        }
        "stained-images" => {
            let k = d.num_envs.unwrap();
            let n = d.n_per_env.unwrap();
            let total = (k + 1) * n;
            let palette = d.palette.unwrap_or(10);
            let shift = d.test_color_shift.unwrap_or(1);
            let mode = parse_stain_mode(d.stain_mode.as_deref().unwrap())?;
            let mut corpus = match (&d.images, &d.labels) {
                (Some(ip), Some(lp)) => {
                    let c = load_idx(ip, lp)?;
                    if c.len() < total {
                        return Err(CoreError::Domain(format!(
                            "image corpus holds {} samples, {} environments need {total}",
                            c.len(),
                            k + 1
                        )));
                    }
                    c
                }
                _ => gen_digit_images(
                    total,
                    d.image_rows.unwrap_or(8),
                    d.image_cols.unwrap_or(8),
                    d.pixel_noise.unwrap_or(0.05),
                    seed,
                )?,
            };
            apply_label_noise(&mut corpus, 10, d.label_noise.unwrap_or(0.0), seed)?;
            let corr_schedule = d.corr_schedule.as_ref().unwrap();
            let mut envs = Vec::with_capacity(k + 1);
            for e in 0..=k {
                let chunk = image_slice(&corpus, e * n, n);
                let (corr, map): (f64, Vec<usize>) = if e < k {
                    (corr_schedule[e], (0..10).map(|l| l % palette).collect())
                } else {
                    (
                        d.test_corr.unwrap_or(0.9),
                        (0..10).map(|l| (l + shift) % palette).collect(),
                    )
                };
                let mut env = colorize_with_map(
                    &chunk,
                    mode,
                    palette,
                    corr,
                    &map,
                    derive_seed(seed, &format!("stain-env/{e}")),
                )?;
                env.env_id = e;
                envs.push(env);
            }
            Ok(envs)
        }
        "container" => load_container(d.path.as_ref().unwrap()),
        other => Err(CoreError::Domain(format!("unknown data kind {other:?}"))),
    }
}

fn behavior_for(cfg: &ExperimentConfig, id: usize) -> Behavior {
    cfg.clients
        .overrides
        .iter()
        .find(|o| o.id == id)
        .and_then(|o| o.to_behavior())
        .unwrap_or(Behavior::Normal)
}

fn weight_override(cfg: &ExperimentConfig, id: usize) -> Option<usize> {
    cfg.clients
        .overrides
        .iter()
        .find(|o| o.id == id)
        .and_then(|o| o.weight_n)
}

/// Builds the cohort and engine configuration for one run. `seed` is the
/// effective experiment seed and `threads` the effective worker count, both
/// after command-line and environment overrides.
pub fn build(cfg: &ExperimentConfig, seed: u64, threads: usize) -> Result<(Cohort, FedConfig)> {
    let envs = build_envs(cfg, seed)?;
    let count = cfg.clients.count;

    let (mut raw_clients, ood_test) = if cfg.data.kind == "quadratic" {
        let clients = envs
            .iter()
            .map(|e| (e.env_id, e.samples.clone(), e.samples.clone()))
            .collect::<Vec<_>>();
        (clients, Vec::new())
    } else {
        let holdout = if cfg.data.kind == "stained-images" {
            cfg.data.num_envs.unwrap()
        } else {
            cfg.data.holdout_env.unwrap()
        };
        let train_envs: Vec<usize> = envs
            .iter()
            .map(|e| e.env_id)
            .filter(|e| *e != holdout)
            .collect();
        if train_envs.is_empty() {
            return Err(CoreError::Plan("no training environments remain".into()));
        }
        let env_of = |i: usize| match &cfg.data.env_map {
            Some(map) => map[i],
            None => train_envs[i % train_envs.len()],
        };
        let plan = PartitionPlan {
            client_env_map: (0..count).map(|i| (i, env_of(i))).collect(),
            holdout_env: holdout,
            train_fraction: cfg.data.train_fraction.unwrap_or(0.9),
        };
        let (data, ood) = partition_clients(&envs, &plan, seed)?;
        (
            data.into_iter()
                .map(|c| (c.env_id, c.train, c.id_test))
                .collect(),
            ood,
        )
    };

    let env_by_id: std::collections::BTreeMap<usize, &EnvDataset> =
        envs.iter().map(|e| (e.env_id, e)).collect();
    let mut clients = Vec::with_capacity(raw_clients.len());
    for (id, (env_id, mut train, mut id_test)) in raw_clients.drain(..).enumerate() {
        let behavior = behavior_for(cfg, id);
        if let Behavior::HeterogeneousEnv { rotation_deg } = behavior {
            let src = env_by_id[&env_id];
            let rotate = |samples: Vec<_>| -> Result<Vec<_>> {
                let tmp = EnvDataset {
                    env_id,
                    samples,
                    meta: src.meta,
                    shape: src.shape,
                };
                Ok(rotate_env(&tmp, rotation_deg)?.samples)
            };
            train = rotate(train)?;
            if !id_test.is_empty() {
                id_test = rotate(id_test)?;
            }
        }
        let weight = weight_override(cfg, id).unwrap_or(train.len().max(1));
        clients.push(Client {
            spec: ClientSpec::new(id, weight, behavior)?,
            train,
            id_test,
        });
    }

    let spec = cfg.model.to_spec().map_err(CoreError::Contract)?;
    if let Some(s) = clients.iter().flat_map(|c| c.train.first()).next() {
        if s.x.len() != spec.arch.input_dim() {
            return Err(CoreError::DimensionMismatch(format!(
                "data provides {} features, model.input_dim is {}",
                s.x.len(),
                spec.arch.input_dim()
            )));
        }
    }

    let s = &cfg.schedule;
    let mut fed = FedConfig::new(spec, s.eta, s.t);
    fed.penalty = PenaltyConfig::new(s.lambda)?;
    fed.eval_every = s.eval_every;
    fed.pretrain = s.pretrain.enabled.then_some(PretrainConfig {
        probe_rounds: s.pretrain.k,
        epsilon_exit: s.pretrain.epsilon_exit,
    });
    fed.contribution_l = s.contribution_l;
    fed.init = match s.init.as_str() {
        "zeros" => InitScheme::Zeros,
        _ => InitScheme::ScaledNormal {
            scale: s.init_scale,
        },
    };
    fed.seed = seed;
    fed.checkpoint_every = cfg.outputs.checkpoint_every;
    fed.threads = threads;
    Ok((Cohort { clients, ood_test }, fed))
}
