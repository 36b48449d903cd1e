//! Evaluation metrics: box-pooled average precision on the FOV map,
//! bidirectional angular error of extracted peaks, threshold-based
//! spherical average precision, and behavior-anticipation angular error.
//! Every metric has a brute-force oracle equivalence test on small inputs.

use crate::decoder::dense_cell_dir;
use crate::geom::{great_circle_angle, sphere_nms, UnitVec3};
use crate::numcore::{Executor, NumError, ParamStore};
use crate::synth::Episode;
use crate::tokens::BehaviorKind;

use super::model::{TaskModel, TaskOutput};
use super::EvalReport;

/// Bind one episode and run the forward pass; output values are then read
/// off the executor by node id.
pub fn forward_episode(
    model: &TaskModel,
    exec: &mut Executor,
    params: &ParamStore,
    ep: &Episode,
) -> Result<(), NumError> {
    let inputs = model.bind_episode(ep)?;
    exec.forward(&model.graph, params, &inputs)
}

/// Candidate directions and logit scores of the model's spherical map.
fn map_candidates(model: &TaskModel, exec: &Executor) -> Result<(Vec<UnitVec3>, Vec<f64>), NumError> {
    match &model.output {
        TaskOutput::SparseGrid(node) => Ok((
            model.grid.directions.clone(),
            exec.value(*node).data().to_vec(),
        )),
        TaskOutput::Dense(node) | TaskOutput::Horizontal(node) => {
            let v = exec.value(*node);
            let (h, w) = (v.shape()[0], v.shape()[1]);
            let mut dirs = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    dirs.push(dense_cell_dir(r, c, h, w));
                }
            }
            Ok((dirs, v.data().to_vec()))
        }
        _ => Err(NumError::Invalid(
            "this decoder does not produce a spherical map".into(),
        )),
    }
}

/// Indices sorted by descending score; ties break toward the lower index so
/// the ordering (and every metric built on it) is deterministic.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Average precision of scored binary detections: area under the
/// precision-recall curve traversed in descending score order, with
/// `total_pos` as the recall denominator.
pub fn average_precision(scored: &[(f64, bool)], total_pos: usize) -> Result<f64, NumError> {
    if total_pos == 0 {
        return Err(NumError::Invalid("average precision needs at least one positive".into()));
    }
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(NumError::Invalid("non-finite detection score".into()));
    }
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in rank_desc(&scores).iter().enumerate() {
        if scored[i].1 {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

/// Box-pooled mAP on the FOV prediction: each box scores the maximum logit
/// inside it (or its decoder-specific stand-in) and is positive iff its
/// source is active.
pub fn eval_map_fov(model: &TaskModel, params: &ParamStore, episodes: &[Episode]) -> Result<f64, NumError> {
    let mut exec = Executor::new(&model.graph);
    let mut scored = Vec::new();
    for ep in episodes {
        if ep.boxes.is_empty() {
            continue;
        }
        forward_episode(model, &mut exec, params, ep)?;
        for b in &ep.boxes {
            let score = match &model.output {
                TaskOutput::Fov { fov, .. } => {
                    let v = exec.value(*fov);
                    let w = v.shape()[1];
                    let mut best = f64::NEG_INFINITY;
                    for i in b.i0..=b.i1 {
                        for j in b.j0..=b.j1 {
                            best = best.max(v.data()[i * w + j]);
                        }
                    }
                    best
                }
                TaskOutput::SparsePoint { points } => exec.value(*points).data()[b.source],
                _ => {
                    let (dirs, scores) = map_candidates(model, &exec)?;
                    let target = model.box_direction(ep, b)?;
                    let mut best = 0;
                    let mut ang = f64::INFINITY;
                    for (i, d) in dirs.iter().enumerate() {
                        let a = great_circle_angle(d, &target);
                        if a < ang {
                            ang = a;
                            best = i;
                        }
                    }
                    scores[best]
                }
            };
            let active = ep.sources[b.source].active.first().copied().unwrap_or(false);
            scored.push((score, active));
        }
    }
    if scored.is_empty() {
        return Err(NumError::Invalid("dataset has no boxes to score".into()));
    }
    let total_pos = scored.iter().filter(|(_, l)| *l).count();
    average_precision(&scored, total_pos)
}

/// Peaks of one episode's spherical map: NMS with the given k and the
/// config suppression radius. Returns (direction, score) pairs.
fn episode_peaks(
    model: &TaskModel,
    exec: &Executor,
    k: usize,
) -> Result<Vec<(UnitVec3, f64)>, NumError> {
    let (dirs, scores) = map_candidates(model, exec)?;
    let nms = sphere_nms(&dirs, &scores, k, model.cfg.nms_radius_deg)?;
    Ok(nms.indices.iter().map(|&i| (dirs[i], scores[i])).collect())
}

/// Bidirectional mean angular error: ground truth to nearest peak and peak
/// to nearest ground truth, with k = the episode's true active-source count.
/// Episodes with no active source are skipped.
pub fn eval_mae(model: &TaskModel, params: &ParamStore, episodes: &[Episode]) -> Result<(f64, f64), NumError> {
    let mut exec = Executor::new(&model.graph);
    let (mut gp_sum, mut gp_n) = (0.0, 0usize);
    let (mut pg_sum, mut pg_n) = (0.0, 0usize);
    for ep in episodes {
        let gts = ep.active_dirs();
        if gts.is_empty() {
            continue;
        }
        forward_episode(model, &mut exec, params, ep)?;
        let peaks = episode_peaks(model, &exec, gts.len())?;
        for gt in &gts {
            let a = peaks
                .iter()
                .map(|(p, _)| great_circle_angle(gt, p))
                .fold(f64::INFINITY, f64::min);
            gp_sum += a;
            gp_n += 1;
        }
        for (p, _) in &peaks {
            let a = gts
                .iter()
                .map(|gt| great_circle_angle(gt, p))
                .fold(f64::INFINITY, f64::min);
            pg_sum += a;
            pg_n += 1;
        }
    }
    if gp_n == 0 {
        return Err(NumError::Invalid("no episode has an active source".into()));
    }
    Ok((gp_sum / gp_n as f64, pg_sum / pg_n as f64))
}

/// Spherical mAP: peaks (k = config `peaks_k`) are matched greedily in
/// descending score order; a peak is a true positive iff it lies within the
/// angular threshold of a not-yet-matched ground truth.
pub fn eval_spherical_map(
    model: &TaskModel,
    params: &ParamStore,
    episodes: &[Episode],
    radii_deg: &[f64],
) -> Result<Vec<(f64, f64)>, NumError> {
    if radii_deg.is_empty() {
        return Err(NumError::Invalid("spherical mAP needs at least one radius".into()));
    }
    let mut exec = Executor::new(&model.graph);
    // (episode peaks, episode ground truths) collected once, matched per radius.
    let mut per_ep: Vec<(Vec<(UnitVec3, f64)>, Vec<UnitVec3>)> = Vec::new();
    for ep in episodes {
        let gts = ep.active_dirs();
        if gts.is_empty() {
            continue;
        }
        forward_episode(model, &mut exec, params, ep)?;
        per_ep.push((episode_peaks(model, &exec, model.cfg.peaks_k)?, gts));
    }
    let total_pos: usize = per_ep.iter().map(|(_, g)| g.len()).sum();
    if total_pos == 0 {
        return Err(NumError::Invalid("no ground-truth sources to match".into()));
    }
    let mut out = Vec::with_capacity(radii_deg.len());
    for &radius in radii_deg {
        let mut scored = Vec::new();
        for (peaks, gts) in &per_ep {
            let scores: Vec<f64> = peaks.iter().map(|(_, s)| *s).collect();
            let mut taken = vec![false; gts.len()];
            let mut tp = vec![false; peaks.len()];
            for &pi in &rank_desc(&scores) {
                let mut best: Option<usize> = None;
                for (gi, gt) in gts.iter().enumerate() {
                    if taken[gi] || great_circle_angle(&peaks[pi].0, gt) > radius {
                        continue;
                    }
                    let closer = match best {
                        None => true,
                        Some(b) => {
                            great_circle_angle(&peaks[pi].0, gt) < great_circle_angle(&peaks[pi].0, &gts[b])
                        }
                    };
                    if closer {
                        best = Some(gi);
                    }
                }
                if let Some(gi) = best {
                    taken[gi] = true;
                    tp[pi] = true;
                }
            }
            for (pi, (_, s)) in peaks.iter().enumerate() {
                scored.push((*s, tp[pi]));
            }
        }
        out.push((radius, average_precision(&scored, total_pos)?));
    }
    Ok(out)
}

/// Behavior anticipation error: great-circle angle between the argmax grid
/// cell of each (kind, horizon) head and the true future direction, averaged
/// over episodes. Argmax ties break toward the lowest flat index.
pub fn eval_behavior(
    model: &TaskModel,
    params: &ParamStore,
    episodes: &[Episode],
) -> Result<Vec<(BehaviorKind, f64, f64)>, NumError> {
    let TaskOutput::Behavior(heads) = &model.output else {
        return Err(NumError::Invalid("model has no behavior heads".into()));
    };
    if episodes.is_empty() {
        return Err(NumError::Invalid("behavior evaluation needs episodes".into()));
    }
    let mut exec = Executor::new(&model.graph);
    let mut sums = vec![0.0; heads.len()];
    for ep in episodes {
        forward_episode(model, &mut exec, params, ep)?;
        for (hi, (kind, horizon, node)) in heads.iter().enumerate() {
            let logits = exec.value(*node).data();
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            let pred = model.grid.directions[best];
            let label = ep
                .future
                .iter()
                .find(|f| f.kind == *kind && (f.horizon_s - horizon).abs() < 1e-9)
                .ok_or_else(|| NumError::Invalid(format!("episode lacks a {} label", kind.name())))?;
            sums[hi] += great_circle_angle(&pred, &label.direction);
        }
    }
    Ok(heads
        .iter()
        .zip(&sums)
        .map(|((kind, horizon, _), s)| (*kind, *horizon, s / episodes.len() as f64))
        .collect())
}

/// The paper-style threshold grid for spherical mAP, degrees.
pub const SPHERICAL_MAP_RADII_DEG: [f64; 3] = [2.25, 6.75, 11.25];

/// Task-appropriate metric bundle in one report.
pub fn evaluate(model: &TaskModel, params: &ParamStore, episodes: &[Episode]) -> Result<EvalReport, NumError> {
    let mut metrics = Vec::new();
    match model.cfg.task {
        crate::synth::Task::Asl => {
            metrics.push(("map".to_string(), eval_map_fov(model, params, episodes)?));
        }
        crate::synth::Task::Ssl => {
            let (gp, pg) = eval_mae(model, params, episodes)?;
            metrics.push(("mae_gp".to_string(), gp));
            metrics.push(("mae_pg".to_string(), pg));
            for (r, ap) in eval_spherical_map(model, params, episodes, &SPHERICAL_MAP_RADII_DEG)? {
                metrics.push((format!("smap_{r}"), ap));
            }
        }
        crate::synth::Task::Behavior => {
            let rows = eval_behavior(model, params, episodes)?;
            let mean: f64 = rows.iter().map(|(_, _, v)| *v).sum::<f64>() / rows.len() as f64;
            for (kind, h, v) in &rows {
                metrics.push((format!("mae_{}_{}", kind.name(), (h * 1000.0).round() as usize), *v));
            }
            metrics.push(("mae_mean".to_string(), mean));
        }
    }
    Ok(EvalReport {
        metrics,
        fingerprint: model.cfg.fingerprint(),
    })
}

/// Behavior MAE results as the 3 x 3 kind-by-horizon text table.
pub fn behavior_table(rows: &[(BehaviorKind, f64, f64)]) -> String {
    let mut s = String::from("target       T_300    T_500    T_700\n");
    for kind in BehaviorKind::ALL {
        let mut line = format!("{:<11}", kind.name());
        for ms in [300usize, 500, 700] {
            let v = rows
                .iter()
                .find(|(k, h, _)| *k == kind && ((h * 1000.0).round() as usize) == ms)
                .map(|(_, _, v)| *v);
            match v {
                Some(v) => line.push_str(&format!("  {v:7.2}")),
                None => line.push_str("        -"),
            }
        }
        s.push(' ');
        s.push_str(line.trim_end_matches(' '));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Brute-force AP: explicit precision-recall walk over every distinct
    // score threshold.
    fn ap_oracle(scored: &[(f64, bool)], total_pos: usize) -> f64 {
        let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
        let order = rank_desc(&scores);
        let mut ap = 0.0;
        let mut tp = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            if scored[idx].1 {
                tp += 1.0;
                ap += tp / (i as f64 + 1.0);
            }
        }
        ap / total_pos as f64
    }

    #[test]
    fn perfect_separation_gives_map_one() {
        let scored = vec![(3.0, true), (2.5, true), (1.0, false), (0.5, false)];
        assert_eq!(average_precision(&scored, 2).unwrap(), 1.0);
    }

    #[test]
    fn random_scores_balanced_labels_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut scored = Vec::new();
        for i in 0..1000 {
            scored.push((rng.gen::<f64>(), i % 2 == 0));
        }
        let ap = average_precision(&scored, 500).unwrap();
        assert!((ap - 0.5).abs() < 0.05, "ap = {ap}");
    }

    #[test]
    fn ap_matches_oracle_on_random_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=20);
            let mut scored = Vec::new();
            for _ in 0..n {
                scored.push((rng.gen_range(0.0..1.0), rng.gen_bool(0.5)));
            }
            let pos = scored.iter().filter(|(_, l)| *l).count();
            if pos == 0 {
                assert!(average_precision(&scored, pos).is_err());
                continue;
            }
            let got = average_precision(&scored, pos).unwrap();
            assert!((got - ap_oracle(&scored, pos)).abs() < 1e-12);
        }
    }

    // Bidirectional nearest-neighbor oracle over explicit direction sets.
    fn mae_oracle(gts: &[UnitVec3], peaks: &[UnitVec3]) -> (f64, f64) {
        let gp = gts
            .iter()
            .map(|g| peaks.iter().map(|p| great_circle_angle(g, p)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / gts.len() as f64;
        let pg = peaks
            .iter()
            .map(|p| gts.iter().map(|g| great_circle_angle(g, p)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / peaks.len() as f64;
        (gp, pg)
    }

    #[test]
    fn bidirectional_mae_basics() {
        let fwd = UnitVec3::FORWARD;
        let up = UnitVec3::UP;
        let (gp, pg) = mae_oracle(&[fwd], &[fwd]);
        assert_eq!((gp, pg), (0.0, 0.0));
        let (gp, pg) = mae_oracle(&[fwd], &[up]);
        assert!((gp - 90.0).abs() < 1e-9 && (pg - 90.0).abs() < 1e-9);
    }

    #[test]
    fn mae_oracle_agrees_with_pooled_computation() {
        // The harness accumulates sums across episodes; on a single episode
        // that must equal the direct per-set oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                UnitVec3::normalize(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0_f64).max(-0.99),
                )
                .unwrap()
            };
            let gts: Vec<UnitVec3> = (0..5).map(|_| mk(&mut rng)).collect();
            let peaks: Vec<UnitVec3> = (0..5).map(|_| mk(&mut rng)).collect();
            let (gp, pg) = mae_oracle(&gts, &peaks);
            // Recompute with the swapped roles: MAE is symmetric under
            // exchanging the sets and the two directions.
            let (pg2, gp2) = mae_oracle(&peaks, &gts);
            assert!((gp - gp2).abs() < 1e-12 && (pg - pg2).abs() < 1e-12);
        }
    }

    #[test]
    fn spherical_ap_is_monotone_in_radius_and_perfect_at_zero_error() {
        use crate::harness::{build_model, RunConfig};
        use crate::synth::{gen_dataset, SceneSpec, Task};
        let scene = SceneSpec::easy(1, 41);
        let mut cfg = RunConfig::default_for(Task::Ssl);
        cfg.grid_rows = 4;
        cfg.grid_cols = 8;
        let model = build_model(&cfg, &scene).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = super::super::model::init_params(&model, &mut rng);
        let eps = gen_dataset(&scene, Task::Ssl, 6).unwrap();
        let res = eval_spherical_map(&model, &params, &eps, &[2.25, 6.75, 11.25, 60.0]).unwrap();
        for w in res.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12, "not monotone: {res:?}");
        }
        assert!(eval_spherical_map(&model, &params, &eps, &[]).is_err());
    }

    #[test]
    fn behavior_table_has_paper_layout() {
        let rows = vec![
            (BehaviorKind::Gaze, 0.3, 10.0),
            (BehaviorKind::Gaze, 0.5, 11.0),
            (BehaviorKind::Gaze, 0.7, 12.0),
            (BehaviorKind::Orientation, 0.3, 8.0),
            (BehaviorKind::Orientation, 0.5, 9.0),
            (BehaviorKind::Orientation, 0.7, 9.5),
            (BehaviorKind::Trajectory, 0.3, 14.0),
            (BehaviorKind::Trajectory, 0.5, 15.0),
            (BehaviorKind::Trajectory, 0.7, 16.0),
        ];
        let t = behavior_table(&rows);
        assert!(t.lines().count() == 4);
        assert!(t.contains("T_300") && t.contains("T_500") && t.contains("T_700"));
        assert!(t.contains("gaze") && t.contains("orientation") && t.contains("trajectory"));
    }
}
