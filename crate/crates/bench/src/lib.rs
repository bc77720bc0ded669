//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kappa_sphere::latency::{BenchConfig, StandInNetwork};
use kappa_sphere::synth::generate_scene;
use kappa_sphere::{DescriptorBank, HeadParams, SceneConfig, Split};

pub struct ForwardFixture {
    pub network: StandInNetwork,
    pub head: HeadParams,
    pub image: Vec<f64>,
}

pub fn forward_fixture(cfg: &BenchConfig) -> ForwardFixture {
    let network = StandInNetwork::new(cfg).expect("valid bench config");
    let head = HeadParams::init(cfg.head_variant, network.feature_shape(), cfg.hidden, 50.0, cfg.seed)
        .expect("valid head");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = (0..cfg.input_channels * cfg.input_side * cfg.input_side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    ForwardFixture { network, head, image }
}

/// Query and database banks of a default-shaped scene with
/// `images_per_class` images per place.
pub fn retrieval_fixture(images_per_class: usize, seed: u64) -> (DescriptorBank, DescriptorBank) {
    let ds = generate_scene(&SceneConfig {
        images_per_class,
        seed,
        ..SceneConfig::default()
    })
    .expect("valid scene");
    (ds.split_bank(Split::Query), ds.split_bank(Split::Database))
}
