//! End-to-end acceptance suite. Each test covers one release criterion and
//! prints a single `criterion N (...): pass` line on success; a failed
//! assertion marks the criterion as failed. Run with
//! `cargo test --test acceptance -- --nocapture --test-threads 1`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swl_core::decoder::{declare_dense_head, dense_decode, init_dense_head};
use swl_core::encoder::{encode, init_encoder_params, spatial_features, EncoderConfig};
use swl_core::geom::{
    great_circle_angle, make_grid, rotation_between, sphere_nms, UnitQuaternion, UnitVec3,
};
use swl_core::harness::{
    average_precision, build_model, eval_behavior, eval_mae, eval_map_fov, eval_spherical_map,
    evaluate, forward_episode, init_params, run_ablation, train, Axis, DecoderKind, RunConfig,
    TaskModel, TaskOutput, SPHERICAL_MAP_RADII_DEG,
};
use swl_core::numcore::{checkpoint, finite_diff_check, Executor, Inputs, ParamStore};
use swl_core::synth::{gen_dataset, Episode, SceneSpec, Task};
use swl_core::tokens::{assemble, make_cls_tokens, BehaviorKind, Modality, TokenPart};
use swl_core::warp::{
    head_dir_to_fov, pixel_to_sphere, sample_pano_at_fov, sphere_to_pano, warp_fov_to_pano,
    CameraModel, Image, Pose,
};

/// Criteria with runtime bounds must not share the CPU with sibling tests,
/// so every criterion takes this lock for its whole duration.
static GATE: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(n: usize, what: &str) {
    println!("criterion {n} ({what}): pass");
}

fn rand_dir(rng: &mut ChaCha8Rng) -> UnitVec3 {
    loop {
        let (x, y, z): (f64, f64, f64) = (
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if let Ok(v) = UnitVec3::normalize(x, y, z) {
            if (x * x + y * y + z * z) > 1e-3 {
                return v;
            }
        }
    }
}

// --- criterion 1: gradient correctness on the full model ---

#[test]
fn criterion_01_gradient_correctness() {
    let _gate = gate();
    let cfg = RunConfig::default_for(Task::Ssl);
    let scene = SceneSpec::easy(1, 5);
    let model = build_model(&cfg, &scene).unwrap();
    assert_eq!(model.cfg.layers, 2);
    assert_eq!(model.cfg.d_model, 32);
    assert_eq!(model.cfg.heads, 4);
    let n_tokens = model.tokens.len();
    assert!(
        (80..=100).contains(&n_tokens),
        "expected ~90 tokens, got {n_tokens}"
    );
    let eps = gen_dataset(&scene, Task::Ssl, 1).unwrap();
    let inputs = model.bind_episode(&eps[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = init_params(&model, &mut rng);
    let t0 = Instant::now();
    let err = finite_diff_check(&model.graph, model.loss, &params, &inputs, 1e-5).unwrap();
    let elapsed = t0.elapsed();
    assert!(err <= 1e-4, "max relative gradient error {err:.3e}");
    assert!(
        elapsed.as_secs_f64() <= 60.0,
        "finite-difference check took {elapsed:?}"
    );
    pass(1, "gradient correctness");
}

// --- criterion 2: world-locking invariance ---

#[test]
fn criterion_02_world_locking_invariance() {
    let _gate = gate();
    // A fixed world direction seen under 100 random poses must land on the
    // same panorama cell no matter the pose the pixel was observed from.
    let cam = CameraModel::new(90.0, 60.0, 960, 720).unwrap();
    let radius = 128.0;
    let g = UnitVec3::FORWARD;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let left = UnitVec3::normalize(0.0, 1.0, 0.0).unwrap();
    for _ in 0..100 {
        let yaw = UnitQuaternion::from_axis_angle(UnitVec3::UP, rng.gen_range(-0.4..0.4));
        let pitch = UnitQuaternion::from_axis_angle(left, rng.gen_range(-0.25..0.25));
        let roll = UnitQuaternion::from_axis_angle(UnitVec3::FORWARD, rng.gen_range(-0.15..0.15));
        let pose = Pose::from_rotation(yaw.mul(&pitch).mul(&roll));
        // Head-frame view of g, quantized to the nearest pixel, then mapped
        // back to world and onto the panorama.
        let d = pose.rotation.conjugate().rotate(g).unwrap();
        let (fi, fj) = head_dir_to_fov(&d, &cam).expect("direction stays in frustum");
        let (i, j) = (fi.round() as usize, fj.round() as usize);
        let ray = pixel_to_sphere(i, j, &cam, &pose).unwrap();
        coords.push(sphere_to_pano(&ray, radius));
    }
    let (mx, my) = (
        coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64,
        coords.iter().map(|c| c.1).sum::<f64>() / coords.len() as f64,
    );
    let spread = coords
        .iter()
        .map(|c| ((c.0 - mx).powi(2) + (c.1 - my).powi(2)).sqrt())
        .fold(0.0, f64::max);
    assert!(spread <= 1.0, "panorama spread {spread:.3} px");

    // FOV -> panorama -> FOV on a smooth image.
    let cam = CameraModel::new(90.0, 60.0, 64, 48).unwrap();
    let mut frame = Image::new(48, 64, 1);
    for i in 0..48 {
        for j in 0..64 {
            let v = 0.5
                + 0.25 * (2.0 * std::f64::consts::PI * i as f64 / 48.0).sin()
                + 0.25 * (2.0 * std::f64::consts::PI * j as f64 / 64.0).cos();
            frame.set(i, j, 0, v);
        }
    }
    let pose = Pose::from_rotation(
        UnitQuaternion::from_axis_angle(UnitVec3::UP, 0.5)
            .mul(&UnitQuaternion::from_axis_angle(left, 0.2)),
    );
    let pano = warp_fov_to_pano(&frame, &cam, &pose, radius).unwrap();
    let (back, mask) = sample_pano_at_fov(&pano, &cam, &pose).unwrap();
    let (mut se, mut n) = (0.0, 0usize);
    for i in 5..43 {
        // interior 80% crop
        for j in 7..57 {
            assert!(mask[i * 64 + j], "interior pixel ({i}, {j}) not covered");
            let d = back.get(i, j, 0) - frame.get(i, j, 0);
            se += d * d;
            n += 1;
        }
    }
    let psnr = -10.0 * (se / n as f64).log10();
    assert!(psnr >= 30.0, "round-trip PSNR {psnr:.2} dB");
    pass(2, "world-locking invariance");
}

// --- criterion 3: pose ablation ordering on source localization ---

#[test]
fn criterion_03_pose_ablation_localization() {
    let _gate = gate();
    let t0 = Instant::now();
    let mut cfg = RunConfig::default_for(Task::Ssl);
    cfg.grid_rows = 4;
    cfg.grid_cols = 8;
    cfg.lr = 3e-3;
    cfg.epochs = 4;
    cfg.nms_radius_deg = 30.0;
    let scene = SceneSpec::easy(1, 0);
    let seeds = [1u64, 2, 3];
    let rep = run_ablation(&cfg, Axis::Pose, &scene, 2000, 500, &seeds).unwrap();
    println!("{}", rep.to_table());
    for &s in &seeds {
        let with = rep.value("with_pose", s, "mae_gp").unwrap();
        let without = rep.value("without_pose", s, "mae_gp").unwrap();
        assert!(
            with <= 0.7 * without,
            "seed {s}: with pose {with:.2} vs without {without:.2}"
        );
    }
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() <= 20.0 * 60.0,
        "pose ablation took {elapsed:?}"
    );
    pass(3, "pose ablation ordering on localization");
}

// --- criterion 4: pose ablation ordering on box scoring ---

#[test]
fn criterion_04_pose_ablation_boxes() {
    let _gate = gate();
    let mut cfg = RunConfig::default_for(Task::Asl);
    // World-frame grid output so the pose cannot reach the prediction
    // through the readout path.
    cfg.decoder = DecoderKind::SparseGrid;
    cfg.lr = 3e-3;
    cfg.epochs = 3;
    let scene = SceneSpec::easy(2, 0);
    let seeds = [1u64, 2, 3];
    let rep = run_ablation(&cfg, Axis::Pose, &scene, 800, 300, &seeds).unwrap();
    println!("{}", rep.to_table());
    for &s in &seeds {
        let with = rep.value("with_pose", s, "map").unwrap();
        let without = rep.value("without_pose", s, "map").unwrap();
        assert!(with > without, "seed {s}: {with:.4} vs {without:.4}");
        assert!(with >= 0.90, "seed {s}: mAP with pose {with:.4}");
    }
    pass(4, "pose ablation ordering on box scoring");
}

// --- criterion 5: modality ordering ---

#[test]
fn criterion_05_modality_ordering() {
    let _gate = gate();
    let mut cfg = RunConfig::default_for(Task::Asl);
    cfg.lr = 3e-3;
    cfg.epochs = 3;
    let scene = SceneSpec::easy(2, 0);
    let seeds = [1u64, 2];
    let rep = run_ablation(&cfg, Axis::Modality, &scene, 600, 300, &seeds).unwrap();
    println!("{}", rep.to_table());
    for &s in &seeds {
        let mono = rep.value("a_mono", s, "map").unwrap();
        let mono_v = rep.value("a_mono+v", s, "map").unwrap();
        let multi_v = rep.value("a_multi+v", s, "map").unwrap();
        assert!(
            multi_v > mono_v,
            "seed {s}: multi-channel {multi_v:.4} vs mono {mono_v:.4}"
        );
        assert!(mono_v >= mono, "seed {s}: +visual {mono_v:.4} vs {mono:.4}");
    }
    pass(5, "modality ordering");
}

// --- criterion 6: horizontal decoding ---

#[test]
fn criterion_06_horizontal_decoding() {
    let _gate = gate();
    let mut cfg = RunConfig::default_for(Task::Ssl);
    cfg.grid_rows = 5;
    cfg.grid_cols = 12;
    cfg.lr = 3e-3;
    cfg.epochs = 4;
    cfg.nms_radius_deg = 30.0;
    let mut scene = SceneSpec::easy(1, 0);
    scene.equatorial_sources = true;
    let rep = run_ablation(&cfg, Axis::Horizontal, &scene, 1500, 400, &[1]).unwrap();
    println!("{}", rep.to_table());
    let grid = rep.value("sparse_grid", 1, "mae_gp").unwrap();
    let horiz = rep.value("horizontal", 1, "mae_gp").unwrap();
    // 5x fewer CLS tokens: 5*12 anchors vs one equator row of 12.
    assert!(
        horiz <= 1.25 * grid,
        "horizontal {horiz:.2} vs sparse grid {grid:.2}"
    );
    pass(6, "horizontal decoding");
}

// --- criterion 7: metric oracle equivalence ---

fn oracle_ap(scored: &[(f64, bool)], total_pos: usize) -> f64 {
    // Quadratic selection sort; ties break toward the lower index.
    let n = scored.len();
    let mut used = vec![false; n];
    let (mut tp, mut ap) = (0usize, 0.0);
    for rank in 0..n {
        let mut best = usize::MAX;
        for i in 0..n {
            if !used[i] && (best == usize::MAX || scored[i].0 > scored[best].0) {
                best = i;
            }
        }
        used[best] = true;
        if scored[best].1 {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / total_pos as f64
}

fn oracle_nms(dirs: &[UnitVec3], scores: &[f64], k: usize, radius_deg: f64) -> Vec<usize> {
    let mut suppressed = vec![false; dirs.len()];
    let mut picked = Vec::new();
    while picked.len() < k {
        let mut best = usize::MAX;
        for i in 0..dirs.len() {
            if !suppressed[i] && (best == usize::MAX || scores[i] > scores[best]) {
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        picked.push(best);
        for i in 0..dirs.len() {
            if great_circle_angle(&dirs[best], &dirs[i]) <= radius_deg {
                suppressed[i] = true;
            }
        }
    }
    picked
}

/// Peaks of one sparse-grid episode, reconstructed from the output node with
/// the oracle NMS.
fn oracle_peaks(model: &TaskModel, exec: &Executor, k: usize) -> Vec<(UnitVec3, f64)> {
    let TaskOutput::SparseGrid(node) = &model.output else {
        panic!("oracle expects the sparse-grid output");
    };
    let scores = exec.value(*node).data().to_vec();
    oracle_nms(&model.grid.directions, &scores, k, model.cfg.nms_radius_deg)
        .into_iter()
        .map(|i| (model.grid.directions[i], scores[i]))
        .collect()
}

fn oracle_mae(model: &TaskModel, exec: &Executor, ep: &Episode) -> (f64, f64, usize, usize) {
    let gts = ep.active_dirs();
    let peaks = oracle_peaks(model, exec, gts.len());
    let mut gp = (0.0, 0usize);
    for gt in &gts {
        let best = peaks
            .iter()
            .map(|(p, _)| great_circle_angle(p, gt))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            gp = (gp.0 + best, gp.1 + 1);
        }
    }
    let mut pg = (0.0, 0usize);
    for (p, _) in &peaks {
        let best = gts
            .iter()
            .map(|gt| great_circle_angle(p, gt))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            pg = (pg.0 + best, pg.1 + 1);
        }
    }
    (gp.0, pg.0, gp.1, pg.1)
}

/// Greedy score-descending matching and AP for one radius, written
/// independently of the library implementation.
fn oracle_spherical_ap(
    per_ep: &[(Vec<(UnitVec3, f64)>, Vec<UnitVec3>)],
    radius: f64,
) -> f64 {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut total_pos = 0;
    for (peaks, gts) in per_ep {
        total_pos += gts.len();
        let mut order: Vec<usize> = (0..peaks.len()).collect();
        order.sort_by(|&a, &b| peaks[b].1.partial_cmp(&peaks[a].1).unwrap().then(a.cmp(&b)));
        let mut taken = vec![false; gts.len()];
        for pi in order {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let a = great_circle_angle(&peaks[pi].0, gt);
                if a <= radius && best.map_or(true, |(_, b)| a < b) {
                    best = Some((gi, a));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                scored.push((peaks[pi].1, true));
            } else {
                scored.push((peaks[pi].1, false));
            }
        }
    }
    oracle_ap(&scored, total_pos)
}

#[test]
fn criterion_07_metric_oracles() {
    let _gate = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Average precision on random scored lists, including tied scores.
    for _ in 0..300 {
        let n = rng.gen_range(1..=20);
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| ((rng.gen_range(0..8) as f64) / 4.0, rng.gen_bool(0.5)))
            .collect();
        let total_pos = scored.iter().filter(|(_, p)| *p).count().max(1);
        let got = average_precision(&scored, total_pos).unwrap();
        let want = oracle_ap(&scored, total_pos);
        assert!((got - want).abs() <= 1e-12, "AP {got} vs oracle {want}");
    }

    // Sphere NMS against the quadratic oracle.
    for _ in 0..300 {
        let n = rng.gen_range(1..=20);
        let dirs: Vec<UnitVec3> = (0..n).map(|_| rand_dir(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 5.0).collect();
        let k = rng.gen_range(1..=4);
        let radius = rng.gen_range(5.0..90.0);
        let got = sphere_nms(&dirs, &scores, k, radius).unwrap();
        let want = oracle_nms(&dirs, &scores, k, radius);
        assert_eq!(got.indices, want);
        assert_eq!(got.underflow, want.len() < k);
    }

    // Model-level metrics on single-episode instances (<= 20 candidates,
    // <= 2 sources), random untrained parameters.
    let mut cfg = RunConfig::default_for(Task::Ssl);
    cfg.grid_rows = 3;
    cfg.grid_cols = 6;
    let scene = SceneSpec::easy(2, 3);
    let model = build_model(&cfg, &scene).unwrap();
    let params = init_params(&model, &mut rng);
    let episodes = gen_dataset(&scene, Task::Ssl, 220).unwrap();
    let mut exec = Executor::new(&model.graph);
    let mut trials = 0;
    let mut per_ep: Vec<(Vec<(UnitVec3, f64)>, Vec<UnitVec3>)> = Vec::new();
    for ep in &episodes {
        if ep.active_dirs().is_empty() {
            continue;
        }
        let (gp, pg) = eval_mae(&model, &params, std::slice::from_ref(ep)).unwrap();
        forward_episode(&model, &mut exec, &params, ep).unwrap();
        let (gp_sum, pg_sum, gp_n, pg_n) = oracle_mae(&model, &exec, ep);
        assert!((gp - gp_sum / gp_n as f64).abs() <= 1e-12);
        assert!((pg - pg_sum / pg_n as f64).abs() <= 1e-12);
        per_ep.push((oracle_peaks(&model, &exec, model.cfg.peaks_k), ep.active_dirs()));
        trials += 1;
    }
    assert!(trials >= 200, "only {trials} usable episodes");
    let got = eval_spherical_map(&model, &params, &episodes, &SPHERICAL_MAP_RADII_DEG).unwrap();
    for (radius, ap) in got {
        let want = oracle_spherical_ap(&per_ep, radius);
        assert!(
            (ap - want).abs() <= 1e-12,
            "spherical AP at {radius}: {ap} vs oracle {want}"
        );
    }

    // Box mAP on the world-frame grid output against the oracle AP over
    // nearest-cell scores.
    let mut cfg = RunConfig::default_for(Task::Asl);
    cfg.decoder = DecoderKind::SparseGrid;
    cfg.grid_rows = 3;
    cfg.grid_cols = 6;
    let scene = SceneSpec::easy(2, 11);
    let model = build_model(&cfg, &scene).unwrap();
    let params = init_params(&model, &mut rng);
    let episodes = gen_dataset(&scene, Task::Asl, 60).unwrap();
    let mut exec = Executor::new(&model.graph);
    let mut scored = Vec::new();
    for ep in &episodes {
        if ep.boxes.is_empty() {
            continue;
        }
        forward_episode(&model, &mut exec, &params, ep).unwrap();
        let TaskOutput::SparseGrid(node) = &model.output else {
            unreachable!()
        };
        let logits = exec.value(*node).data().to_vec();
        for b in &ep.boxes {
            let target = model.box_direction(ep, b).unwrap();
            let mut best = 0;
            for (i, d) in model.grid.directions.iter().enumerate() {
                if great_circle_angle(d, &target)
                    < great_circle_angle(&model.grid.directions[best], &target)
                {
                    best = i;
                }
            }
            scored.push((logits[best], ep.sources[b.source].active[0]));
        }
    }
    let total_pos = scored.iter().filter(|(_, p)| *p).count();
    let got = eval_map_fov(&model, &params, &episodes).unwrap();
    let want = oracle_ap(&scored, total_pos);
    assert!((got - want).abs() <= 1e-12, "box mAP {got} vs oracle {want}");
    pass(7, "metric oracle equivalence");
}

// --- criterion 8: structural invariants ---

fn invariant_tokens(g: &mut swl_core::numcore::Graph, d: usize) -> swl_core::tokens::TokenSet {
    let grid = make_grid(2, 4).unwrap();
    let wc = g.param("tok.cls.w", &[d, 3]);
    let bc = g.param("tok.cls.b", &[d]);
    let cls = make_cls_tokens(g, &grid, wc, bc).unwrap();
    let audio_sem = g.input("audio_sem", &[3, d]);
    let audio = TokenPart {
        semantics: audio_sem,
        positions: vec![
            UnitVec3::from_lat_lon_deg(20.0, 40.0),
            UnitVec3::from_lat_lon_deg(-10.0, -60.0),
            UnitVec3::from_lat_lon_deg(5.0, 170.0),
        ],
        modality: Modality::Audio,
    };
    assemble(g, cls, Some(audio), None, None).unwrap()
}

#[test]
fn criterion_08_structural_invariants() {
    let _gate = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 16;

    // Attention rows sum to one; modality layer-norm statistics hold
    // pre-affine for every modality range.
    let mut g = swl_core::numcore::Graph::new();
    let cfg = EncoderConfig::default_desk(d, 2, 2);
    let ts = invariant_tokens(&mut g, d);
    let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
    let mut params = ParamStore::new();
    params.init_normal("tok.cls.w", &[d, 3], 0.5, &mut rng);
    params.init_normal("tok.cls.b", &[d], 0.5, &mut rng);
    init_encoder_params(&mut params, "enc", &cfg, &[Modality::Cls, Modality::Audio], &mut rng);
    let mut inputs = Inputs::new();
    let audio: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    inputs.insert(
        "audio_sem".into(),
        swl_core::numcore::Array::from_vec(&[3, d], audio).unwrap(),
    );
    inputs.insert("enc.spatial".into(), spatial_features(&ts.positions));
    let mut exec = Executor::new(&g);
    exec.forward(&g, &params, &inputs).unwrap();
    let _ = out;
    let n = ts.len();
    assert_eq!(trace.attention.len(), 4);
    for a in &trace.attention {
        for row in exec.value(*a).data().chunks(n) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "attention row sum {s}");
        }
    }
    for ln in &trace.post_ln {
        let v = exec.value(*ln);
        for row in v.data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            assert!(mu.abs() <= 1e-9, "layer-norm mean {mu}");
            assert!((var - 1.0).abs() <= 1e-6, "layer-norm var {var}");
        }
    }

    // The pairwise feature, normalized, is the rotation carrying p_i to p_j.
    for _ in 0..200 {
        let (pi, pj) = (rand_dir(&mut rng), rand_dir(&mut rng));
        let q = rotation_between(&pi, &pj);
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if norm < 1e-6 {
            continue; // antipodal: the feature degenerates to zero by design
        }
        let u = UnitQuaternion::normalize(q[0], q[1], q[2], q[3]).unwrap();
        let r = u.rotate(pi).unwrap();
        let dist =
            ((r.x - pj.x).powi(2) + (r.y - pj.y).powi(2) + (r.z - pj.z).powi(2)).sqrt();
        assert!(dist <= 1e-9, "rotated direction off by {dist:.3e}");
    }

    // Dense decoding commutes exactly with circular longitude shifts.
    let (rows, cols, dc) = (3, 6, 8);
    let mut g = swl_core::numcore::Graph::new();
    let x = g.input("cls", &[rows * cols, dc]);
    let head = declare_dense_head(&mut g, "dec", dc, 12);
    let map = dense_decode(&mut g, x, rows, cols, &head).unwrap();
    let mut params = ParamStore::new();
    init_dense_head(&mut params, "dec", dc, 12, &mut rng);
    let base: Vec<f64> = (0..rows * cols * dc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut shifted = vec![0.0; base.len()];
    for r in 0..rows {
        for c in 0..cols {
            let src = (r * cols + (c + cols - 1) % cols) * dc;
            let dst = (r * cols + c) * dc;
            shifted[dst..dst + dc].copy_from_slice(&base[src..src + dc]);
        }
    }
    let run = |data: Vec<f64>| {
        let mut inputs = Inputs::new();
        inputs.insert(
            "cls".into(),
            swl_core::numcore::Array::from_vec(&[rows * cols, dc], data).unwrap(),
        );
        let mut exec = Executor::new(&g);
        exec.forward(&g, &params, &inputs).unwrap();
        exec.value(map).data().to_vec()
    };
    let (out_base, out_shift) = (run(base), run(shifted));
    let (mh, mw) = (4 * rows, 4 * cols);
    for r in 0..mh {
        for c in 0..mw {
            let want = out_base[r * mw + (c + mw - 4) % mw];
            let got = out_shift[r * mw + c];
            assert_eq!(
                want.to_bits(),
                got.to_bits(),
                "shift equivariance at ({r}, {c})"
            );
        }
    }

    // Checkpoint round trip is bit-exact.
    let mut store = ParamStore::new();
    store.init_normal("a.w", &[7, 3], 1.7, &mut rng);
    store.init_normal("b", &[11], 0.3, &mut rng);
    let mut buf = Vec::new();
    checkpoint::write(&store, &mut buf).unwrap();
    let mut r = std::io::BufReader::new(buf.as_slice());
    let back = checkpoint::read(&mut r).unwrap();
    for (name, arr) in store.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(arr.shape(), b.shape());
        for (x, y) in arr.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    pass(8, "structural invariants");
}

// --- criterion 9: behavior anticipation smoke (soft) ---

#[test]
fn criterion_09_behavior_smoke() {
    let _gate = gate();
    let mut cfg = RunConfig::default_for(Task::Behavior);
    cfg.lr = 3e-3;
    cfg.epochs = 3;
    let scene = SceneSpec::easy(1, 0);
    let mut joint_wins = 0;
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let mut train_scene = scene.clone();
        train_scene.seed = seed * 2 + 1;
        let mut eval_scene = scene.clone();
        eval_scene.seed = seed * 2 + 0x5eed_0000_0000_0001;
        let train_eps = gen_dataset(&train_scene, Task::Behavior, 300).unwrap();
        let eval_eps = gen_dataset(&eval_scene, Task::Behavior, 150).unwrap();

        let mut joint_cfg = cfg.clone();
        joint_cfg.seed = seed;
        let model = build_model(&joint_cfg, &scene).unwrap();
        let out = train(&model, &train_eps).unwrap();
        assert!(!out.aborted, "joint training aborted on seed {seed}");
        let rows = eval_behavior(&model, &out.params, &eval_eps).unwrap();
        assert_eq!(rows.len(), 9, "expected the full 3x3 table");
        println!(
            "seed {seed} joint:\n{}",
            swl_core::harness::behavior_table(&rows)
        );
        let joint_mean = rows.iter().map(|(_, _, v)| *v).sum::<f64>() / rows.len() as f64;

        let mut single_sum = 0.0;
        for kind in BehaviorKind::ALL {
            let mut c = cfg.clone();
            c.seed = seed;
            c.behavior_targets = vec![kind];
            let m = build_model(&c, &scene).unwrap();
            let o = train(&m, &train_eps).unwrap();
            let r = eval_behavior(&m, &o.params, &eval_eps).unwrap();
            single_sum += r.iter().map(|(_, _, v)| *v).sum::<f64>() / r.len() as f64;
        }
        let single_mean = single_sum / 3.0;
        println!("seed {seed}: joint {joint_mean:.2} vs single {single_mean:.2}");
        if joint_mean <= single_mean {
            joint_wins += 1;
        }
    }
    if joint_wins < 2 {
        // Soft criterion: record the shortfall without failing the build.
        println!(
            "note: joint training matched or beat single-task means on only \
             {joint_wins} of {} seeds (soft criterion)",
            seeds.len()
        );
    }
    pass(9, "behavior anticipation smoke");
}

// --- criterion 10: determinism ---

#[test]
fn criterion_10_determinism() {
    let _gate = gate();
    let mut cfg = RunConfig::default_for(Task::Ssl);
    cfg.grid_rows = 3;
    cfg.grid_cols = 6;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.seed = 4;
    let scene = SceneSpec::easy(1, 12);
    let train_eps = gen_dataset(&scene, Task::Ssl, 30).unwrap();
    let mut es = scene.clone();
    es.seed = 13;
    let eval_eps = gen_dataset(&es, Task::Ssl, 20).unwrap();

    let model = build_model(&cfg, &scene).unwrap();
    let a = train(&model, &train_eps).unwrap();
    let b = train(&model, &train_eps).unwrap();
    let names: Vec<&String> = a.params.iter().map(|(n, _)| n).collect();
    assert!(!names.is_empty());
    for (name, arr) in a.params.iter() {
        let other = b.params.get(name).unwrap();
        for (x, y) in arr.data().iter().zip(other.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "param {name} differs");
        }
    }
    assert_eq!(a.curve, b.curve);

    let r1 = evaluate(&model, &a.params, &eval_eps).unwrap();
    let r2 = evaluate(&model, &a.params, &eval_eps).unwrap();
    assert_eq!(r1.metrics.len(), r2.metrics.len());
    for ((n1, v1), (n2, v2)) in r1.metrics.iter().zip(&r2.metrics) {
        assert_eq!(n1, n2);
        assert_eq!(v1.to_bits(), v2.to_bits(), "metric {n1} differs");
    }
    assert_eq!(r1.fingerprint, r2.fingerprint);
    pass(10, "determinism");
}
