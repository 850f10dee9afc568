#![allow(dead_code)]

use cavit::init::trunc_normal;
use cavit::model::{Model, ModelConfig};
use cavit::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Real>(dims: &[usize], std: f64, seed: u64) -> Tensor<T> {
    trunc_normal(dims, std, &mut rng(seed)).unwrap()
}

/// Model whose every parameter, norms included, is redrawn with `std`.
pub fn random_model<T: Real>(cfg: &ModelConfig, std: f64, seed: u64) -> Model<T> {
    let mut m = Model::<T>::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let names: Vec<String> = m.params().names().map(str::to_string).collect();
    for n in names {
        let dims = m.params().get(&n).unwrap().dims().to_vec();
        let t = trunc_normal(&dims, std, &mut r).unwrap();
        m.params_mut().set(&n, t).unwrap();
    }
    m
}

pub fn images<T: Real>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    randn(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], 1.0, seed)
}

/// Run the CLI in-process; returns (exit code, stdout, stderr).
pub fn cli(args: &[&str], seed_env: Option<&str>) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cavit").chain(args.iter().copied());
    let code = cavit::cli::run(argv, seed_env, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}
