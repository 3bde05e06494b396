//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::encoder::{random_image, ParameterStore};
use reid_core::imaging::ImageBuffer;
use reid_core::model::{init_model, ModelConfig};
use reid_core::trainer::step_rng;
use reid_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    step_rng(seed, 0)
}

/// Toy model parameters plus `batch` random images at the model's input size.
pub fn toy_batch(batch: usize) -> (ModelConfig, ParameterStore<f32>, Vec<ImageBuffer>, Vec<usize>) {
    let mut cfg = reid_core::config::TrainConfig::toy().model;
    cfg.encoder.n_cameras = 4;
    cfg.heads.num_classes = 10;
    let params = init_model(&cfg, 0).expect("toy model");
    let mut r = rng(1);
    let images = (0..batch)
        .map(|_| random_image(cfg.encoder.height, cfg.encoder.width, &mut r))
        .collect();
    let cams = (0..batch).map(|i| i % 4).collect();
    (cfg, params, images, cams)
}

/// Random retrieval problem: distances plus id and camera labels.
pub struct EvalFixture {
    pub dist: Tensor<f64>,
    pub qid: Vec<i64>,
    pub qcam: Vec<usize>,
    pub gid: Vec<i64>,
    pub gcam: Vec<usize>,
    pub qjunk: Vec<bool>,
    pub gjunk: Vec<bool>,
}

pub fn eval_fixture(q: usize, g: usize, ids: i64) -> EvalFixture {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    EvalFixture {
        dist: Tensor::from_vec(q, g, (0..q * g).map(|_| r.random::<f64>()).collect()),
        qid: (0..q).map(|_| r.random_range(0..ids)).collect(),
        qcam: (0..q).map(|_| r.random_range(0..6)).collect(),
        gid: (0..g).map(|_| r.random_range(0..ids)).collect(),
        gcam: (0..g).map(|_| r.random_range(0..6)).collect(),
        qjunk: vec![false; q],
        gjunk: vec![false; g],
    }
}
