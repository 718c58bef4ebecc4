//! Shared fixtures for the criterion benches.

use prefclust_core::btl::{generate_offline_data, generate_population, PopulationConfig};
use prefclust_core::clustering::ClusterParams;
use prefclust_core::offline::{GammaPolicy, OfflineConfig, PolicySearch};
use prefclust_core::{FeatureMap, MleConfig, Population, UserDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub population: Population,
    pub features: FeatureMap,
    pub data: Vec<UserDataset>,
}

/// `users` users in 8 clusters (or fewer), 20 contexts × 10 actions.
pub fn fixture(users: usize, dim: usize, budget: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let population = generate_population(
        &PopulationConfig {
            users,
            clusters: users.min(8),
            dim,
            ..Default::default()
        },
        &mut rng,
    )
    .expect("valid population");
    let features = FeatureMap::random(20, 10, dim, 0.0, &mut rng).expect("valid feature map");
    let data = generate_offline_data(&population, Some(&features), budget, 8.0, &mut rng).expect("valid data");
    Fixture {
        population,
        features,
        data,
    }
}

pub fn offline_config(users: usize, gamma_hat: f64) -> OfflineConfig {
    let mut cluster = ClusterParams::new(1.0, 0.1, gamma_hat, users).expect("valid cluster params");
    cluster.radius_scale = 0.05;
    OfflineConfig {
        mle: MleConfig::default(),
        cluster,
        gamma_policy: GammaPolicy::Fixed,
        search: PolicySearch::Coordinate,
    }
}
