//! Throwaway timing probe.
use std::time::Instant;
use rand::SeedableRng;
use swl_core::harness::{build_model, init_params, RunConfig};
use swl_core::numcore::finite_diff_check;
use swl_core::synth::{gen_dataset, SceneSpec, Task};

fn main() {
    let cfg = RunConfig::default_for(Task::Ssl);
    let scene = SceneSpec::easy(1, 5);
    let model = build_model(&cfg, &scene).unwrap();
    let eps = gen_dataset(&scene, Task::Ssl, 1).unwrap();
    let inputs = model.bind_episode(&eps[0]).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let params = init_params(&model, &mut rng);
    let t0 = Instant::now();
    let err = finite_diff_check(&model.graph, model.loss, &params, &inputs, 1e-5).unwrap();
    println!("err {err:.3e} wall {:?}", t0.elapsed());
    swl_core::numcore::exec_dump_op_time();
}
