//! Pose-aware transformer encoder. Each block applies modality-wise
//! LayerNorm, attention whose weights blend a content softmax with a
//! softmax over pairwise rotation features (the spatial-similarity bias),
//! and a feed-forward MLP added alongside both residual streams:
//! x^{l+1} = x + attn(ln(x)) + MLP(attn(ln(x))).
//!
//! The pairwise rotation features are computed once from token positions
//! and fed as an input array; each layer transforms them with its own
//! small MLP.

use crate::geom::{rotation_between, UnitVec3};
use crate::numcore::{Array, Graph, NodeId, NumError, ParamStore};
use crate::tokens::{Modality, TokenSet};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of d.
    pub mlp_ratio: usize,
    /// Hidden width of the per-layer spatial-bias MLP.
    pub spatial_hidden: usize,
    pub use_spatial_bias: bool,
    pub use_modality_ln: bool,
    pub use_modality_qkv: bool,
    pub use_modality_mlp: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NumError> {
        if self.layers == 0 {
            return Err(NumError::Invalid("encoder needs at least one layer".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(NumError::Invalid(format!(
                "width {} must be divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.spatial_hidden == 0 {
            return Err(NumError::Invalid("mlp_ratio and spatial_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn default_desk(d: usize, layers: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            d,
            heads,
            mlp_ratio: 2,
            spatial_hidden: 16,
            use_spatial_bias: true,
            use_modality_ln: true,
            use_modality_qkv: true,
            use_modality_mlp: false,
        }
    }
}

fn mod_name(m: Modality) -> &'static str {
    match m {
        Modality::Cls => "cls",
        Modality::Audio => "audio",
        Modality::Visual => "visual",
        Modality::Behavior => "behavior",
    }
}

/// Pairwise rotation features between token positions: row (i, j) holds
/// [1 + p_i . p_j, (p_i x p_j)_x, ..y, ..z], an (N, N, 4) array. Computed
/// once per episode and reused by every layer.
pub fn spatial_features(positions: &[UnitVec3]) -> Array {
    let n = positions.len();
    let mut out = Array::zeros(&[n, n, 4]);
    for i in 0..n {
        for j in 0..n {
            let q = rotation_between(&positions[i], &positions[j]);
            let base = (i * n + j) * 4;
            out.data_mut()[base..base + 4].copy_from_slice(&q);
        }
    }
    out
}

/// Per-layer spatial bias: a 4 -> hidden -> 1 MLP applied to every pairwise
/// rotation feature, producing an (N, N) score matrix.
pub fn spatial_bias(
    g: &mut Graph,
    feats: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId, NumError> {
    let s = g.shape_of(feats).to_vec();
    if s.len() != 3 || s[2] != 4 || s[0] != s[1] {
        return Err(NumError::ShapeMismatch {
            node: "spatial_bias".into(),
            detail: format!("features must be (N, N, 4), got {s:?}"),
        });
    }
    let n = s[0];
    let flat = g.reshape(feats, &[n * n, 4])?;
    let h1 = g.matmul(flat, w1)?;
    let h1b = g.add_row(h1, b1)?;
    let h1a = g.gelu(h1b);
    let h2 = g.matmul(h1a, w2)?;
    let h2b = g.add_row(h2, b2)?;
    g.reshape(h2b, &[n, n])
}

/// Node ids recorded during graph construction for invariant tests: the
/// blended attention matrix per (layer, head) and the post-LN activations
/// per layer.
#[derive(Debug, Clone, Default)]
pub struct EncoderTrace {
    pub attention: Vec<NodeId>,
    pub post_ln: Vec<NodeId>,
    pub spatial: Vec<NodeId>,
}

struct LayerCtx<'a> {
    prefix: &'a str,
    layer: usize,
    cfg: &'a EncoderConfig,
    ranges: Vec<(Modality, std::ops::Range<usize>)>,
}

impl LayerCtx<'_> {
    fn pname(&self, rest: &str) -> String {
        format!("{}.l{}.{rest}", self.prefix, self.layer)
    }

    fn groups(&self, modality_wise: bool) -> Vec<(String, std::ops::Range<usize>)> {
        if modality_wise {
            self.ranges
                .iter()
                .map(|(m, r)| (mod_name(*m).to_string(), r.clone()))
                .collect()
        } else {
            let n = self.ranges.last().map(|(_, r)| r.end).unwrap_or(0);
            vec![("all".to_string(), 0..n)]
        }
    }
}

/// LayerNorm with gain/bias chosen by each token's modality group.
fn modality_layer_norm(
    g: &mut Graph,
    x: NodeId,
    ctx: &LayerCtx,
    tag: &str,
) -> Result<NodeId, NumError> {
    let d = g.shape_of(x)[1];
    let groups = ctx.groups(ctx.cfg.use_modality_ln);
    let mut parts = Vec::new();
    for (name, r) in &groups {
        let gain = g.param(&ctx.pname(&format!("{tag}.{name}.g")), &[d]);
        let bias = g.param(&ctx.pname(&format!("{tag}.{name}.b")), &[d]);
        let xs = if groups.len() == 1 { x } else { g.slice_rows(x, r.start, r.end)? };
        parts.push(g.layer_norm(xs, gain, bias)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

/// Linear projection with weights chosen by modality group.
fn modality_linear(
    g: &mut Graph,
    x: NodeId,
    ctx: &LayerCtx,
    tag: &str,
    d_out: usize,
    modality_wise: bool,
) -> Result<NodeId, NumError> {
    let d = g.shape_of(x)[1];
    let groups = ctx.groups(modality_wise);
    let mut parts = Vec::new();
    for (name, r) in &groups {
        let w = g.param(&ctx.pname(&format!("{tag}.{name}.w")), &[d, d_out]);
        let b = g.param(&ctx.pname(&format!("{tag}.{name}.b")), &[d_out]);
        let xs = if groups.len() == 1 { x } else { g.slice_rows(x, r.start, r.end)? };
        let mm = g.matmul(xs, w)?;
        parts.push(g.add_row(mm, b)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

/// Multi-head attention with weights A = 0.5 (softmax(QK^T/sqrt(d_h)) +
/// softmax(P)); P is shared across heads. Falls back to plain softmax
/// attention when the spatial bias is disabled.
fn blended_attention(
    g: &mut Graph,
    x: NodeId,
    p_scores: Option<NodeId>,
    ctx: &LayerCtx,
    trace: &mut EncoderTrace,
) -> Result<NodeId, NumError> {
    let d = ctx.cfg.d;
    let heads = ctx.cfg.heads;
    let dh = d / heads;
    let q = modality_linear(g, x, ctx, "attn.q", d, ctx.cfg.use_modality_qkv)?;
    let k = modality_linear(g, x, ctx, "attn.k", d, ctx.cfg.use_modality_qkv)?;
    let v = modality_linear(g, x, ctx, "attn.v", d, ctx.cfg.use_modality_qkv)?;
    let p_soft = match p_scores {
        Some(p) => Some(g.softmax(p)),
        None => None,
    };
    let mut head_outs = Vec::with_capacity(heads);
    for hix in 0..heads {
        let qh = g.slice_cols(q, hix * dh, (hix + 1) * dh)?;
        let kh = g.slice_cols(k, hix * dh, (hix + 1) * dh)?;
        let vh = g.slice_cols(v, hix * dh, (hix + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let content = g.softmax(scaled);
        let a = match p_soft {
            Some(ps) => {
                let sum = g.add(content, ps)?;
                g.scale(sum, 0.5)
            }
            None => content,
        };
        trace.attention.push(a);
        head_outs.push(g.matmul(a, vh)?);
    }
    let concat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        g.concat(&head_outs, 1)?
    };
    let wo = g.param(&ctx.pname("attn.out.w"), &[d, d]);
    let bo = g.param(&ctx.pname("attn.out.b"), &[d]);
    let mm = g.matmul(concat, wo)?;
    g.add_row(mm, bo)
}

fn feed_forward(g: &mut Graph, x: NodeId, ctx: &LayerCtx) -> Result<NodeId, NumError> {
    let d = ctx.cfg.d;
    let hidden = d * ctx.cfg.mlp_ratio;
    let h = modality_linear(g, x, ctx, "mlp.fc1", hidden, ctx.cfg.use_modality_mlp)?;
    let ha = g.gelu(h);
    modality_linear(g, ha, ctx, "mlp.fc2", d, ctx.cfg.use_modality_mlp)
}

/// One encoder block: xb = attention(modality_layer_norm(x)), then
/// x + xb + MLP(xb) (the MLP reads the attention output directly).
fn encoder_block(
    g: &mut Graph,
    x: NodeId,
    spatial_feats: Option<NodeId>,
    ctx: &LayerCtx,
    trace: &mut EncoderTrace,
) -> Result<NodeId, NumError> {
    let ln = modality_layer_norm(g, x, ctx, "ln1")?;
    trace.post_ln.push(ln);
    let p_scores = match spatial_feats {
        Some(f) => {
            let w1 = g.param(&ctx.pname("sp.w1"), &[4, ctx.cfg.spatial_hidden]);
            let b1 = g.param(&ctx.pname("sp.b1"), &[ctx.cfg.spatial_hidden]);
            let w2 = g.param(&ctx.pname("sp.w2"), &[ctx.cfg.spatial_hidden, 1]);
            let b2 = g.param(&ctx.pname("sp.b2"), &[1]);
            let p = spatial_bias(g, f, w1, b1, w2, b2)?;
            trace.spatial.push(p);
            Some(p)
        }
        None => None,
    };
    let xb = blended_attention(g, ln, p_scores, ctx, trace)?;
    let ff = feed_forward(g, xb, ctx)?;
    let res = g.add(x, xb)?;
    g.add(res, ff)
}

/// Apply `cfg.layers` encoder blocks to the token semantics. Positions and
/// tags pass through unchanged. When the spatial bias is enabled the caller
/// must bind an (N, N, 4) input named `{prefix}.spatial` (see
/// `spatial_features`).
pub fn encode(
    g: &mut Graph,
    tokens: &TokenSet,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<(TokenSet, EncoderTrace), NumError> {
    if cfg.d != g.shape_of(tokens.semantics)[1] {
        return Err(NumError::ShapeMismatch {
            node: "encode".into(),
            detail: format!("cfg.d = {} vs token width {}", cfg.d, g.shape_of(tokens.semantics)[1]),
        });
    }
    if cfg.d % cfg.heads != 0 {
        return Err(NumError::Invalid(format!(
            "width {} not divisible by heads {}",
            cfg.d, cfg.heads
        )));
    }
    let n = tokens.len();
    let feats = if cfg.use_spatial_bias && cfg.layers > 0 {
        Some(g.input(&format!("{prefix}.spatial"), &[n, n, 4]))
    } else {
        None
    };
    let mut trace = EncoderTrace::default();
    let mut x = tokens.semantics;
    for layer in 0..cfg.layers {
        let ctx = LayerCtx {
            prefix,
            layer,
            cfg,
            ranges: tokens.present_ranges(),
        };
        x = encoder_block(g, x, feats, &ctx, &mut trace)?;
    }
    Ok((
        TokenSet {
            semantics: x,
            positions: tokens.positions.clone(),
            tags: tokens.tags.clone(),
            counts: tokens.counts,
        },
        trace,
    ))
}

/// Initialize every parameter `encode` declares, with LayerNorm gains at 1
/// and all biases at 0. `modalities` must list the modalities present in
/// the token set, in order.
pub fn init_encoder_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    modalities: &[Modality],
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d;
    let std = 1.0 / (d as f64).sqrt();
    let names = |wise: bool| -> Vec<String> {
        if wise {
            modalities.iter().map(|m| mod_name(*m).to_string()).collect()
        } else {
            vec!["all".to_string()]
        }
    };
    for l in 0..cfg.layers {
        let p = |rest: &str| format!("{prefix}.l{l}.{rest}");
        for m in names(cfg.use_modality_ln) {
            store.init_const(&p(&format!("ln1.{m}.g")), &[d], 1.0);
            store.init_const(&p(&format!("ln1.{m}.b")), &[d], 0.0);
        }
        for tag in ["attn.q", "attn.k", "attn.v"] {
            for m in names(cfg.use_modality_qkv) {
                store.init_normal(&p(&format!("{tag}.{m}.w")), &[d, d], std, rng);
                store.init_const(&p(&format!("{tag}.{m}.b")), &[d], 0.0);
            }
        }
        store.init_normal(&p("attn.out.w"), &[d, d], std, rng);
        store.init_const(&p("attn.out.b"), &[d], 0.0);
        let hidden = d * cfg.mlp_ratio;
        for m in names(cfg.use_modality_mlp) {
            store.init_normal(&p(&format!("mlp.fc1.{m}.w")), &[d, hidden], std, rng);
            store.init_const(&p(&format!("mlp.fc1.{m}.b")), &[hidden], 0.0);
            store.init_normal(&p(&format!("mlp.fc2.{m}.w")), &[hidden, d], 1.0 / (hidden as f64).sqrt(), rng);
            store.init_const(&p(&format!("mlp.fc2.{m}.b")), &[d], 0.0);
        }
        if cfg.use_spatial_bias {
            store.init_normal(&p("sp.w1"), &[4, cfg.spatial_hidden], 0.5, rng);
            store.init_const(&p("sp.b1"), &[cfg.spatial_hidden], 0.0);
            store.init_normal(&p("sp.w2"), &[cfg.spatial_hidden, 1], 0.5, rng);
            store.init_const(&p("sp.b2"), &[1], 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::make_grid;
    use crate::numcore::{finite_diff_check, Executor, Inputs};
    use crate::tokens::{assemble, make_cls_tokens, TokenPart};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small token set: 6 CLS tokens (2x3 grid) plus 2 audio tokens at
    /// random positions, semantics provided as an input node.
    fn small_tokens(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> (TokenSet, Array) {
        let grid = make_grid(2, 3).unwrap();
        let wc = g.param("tok.cls.w", &[d, 3]);
        let bc = g.param("tok.cls.b", &[d]);
        let cls = make_cls_tokens(g, &grid, wc, bc).unwrap();
        let audio_sem = g.input("audio_sem", &[2, d]);
        let audio = TokenPart {
            semantics: audio_sem,
            positions: vec![
                UnitVec3::from_lat_lon_deg(20.0, 40.0),
                UnitVec3::from_lat_lon_deg(-10.0, -60.0),
            ],
            modality: Modality::Audio,
        };
        let ts = assemble(g, cls, Some(audio), None, None).unwrap();
        let data: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (ts, Array::from_vec(&[2, d], data).unwrap())
    }

    fn small_params(g: &Graph, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        store.init_normal("tok.cls.w", &[cfg.d, 3], 0.5, rng);
        store.init_normal("tok.cls.b", &[cfg.d], 0.5, rng);
        init_encoder_params(&mut store, "enc", cfg, &[Modality::Cls, Modality::Audio], rng);
        for name in g.param_names() {
            assert!(store.get(name).is_some(), "missing init for {name}");
        }
        store
    }

    fn run(
        g: &Graph,
        params: &ParamStore,
        ts: &TokenSet,
        audio: &Array,
        out: NodeId,
    ) -> (Executor, Array) {
        let mut inputs = Inputs::new();
        inputs.insert("audio_sem".into(), audio.clone());
        inputs.insert("enc.spatial".into(), spatial_features(&ts.positions));
        let mut exec = Executor::new(g);
        exec.forward(g, params, &inputs).unwrap();
        let v = exec.value(out).clone();
        (exec, v)
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let mut cfg = EncoderConfig::default_desk(8, 1, 2);
        cfg.layers = 0;
        let (ts, _audio) = small_tokens(&mut g, 8, &mut rng);
        let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        assert_eq!(out.semantics, ts.semantics);
        assert!(trace.attention.is_empty());
    }

    #[test]
    fn attention_rows_sum_to_one_every_layer_and_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let cfg = EncoderConfig::default_desk(8, 2, 2);
        let (ts, audio) = small_tokens(&mut g, 8, &mut rng);
        let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        assert_eq!(trace.attention.len(), 4);
        let params = small_params(&g, &cfg, &mut rng);
        let (exec, y) = run(&g, &params, &ts, &audio, out.semantics);
        assert!(y.all_finite());
        let n = ts.len();
        for a in &trace.attention {
            let m = exec.value(*a);
            assert_eq!(m.shape(), &[n, n]);
            for row in m.data().chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn modality_layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let cfg = EncoderConfig::default_desk(8, 1, 2);
        let (ts, audio) = small_tokens(&mut g, 8, &mut rng);
        let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        // init leaves gains at 1, biases at 0
        let params = small_params(&g, &cfg, &mut rng);
        let (exec, _) = run(&g, &params, &ts, &audio, out.semantics);
        let ln = exec.value(trace.post_ln[0]);
        for row in ln.data().chunks(8) {
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn equal_positions_give_constant_spatial_bias() {
        let positions = vec![UnitVec3::from_lat_lon_deg(15.0, -30.0); 5];
        let feats = spatial_features(&positions);
        for chunk in feats.data().chunks(4) {
            assert!((chunk[0] - 2.0).abs() < 1e-12);
            assert!(chunk[1].abs() < 1e-12 && chunk[2].abs() < 1e-12 && chunk[3].abs() < 1e-12);
        }
        // arbitrary MLP on constant features yields a constant matrix
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let f = g.constant(feats);
        let w1d: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2d: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1 = g.constant(Array::from_vec(&[4, 6], w1d).unwrap());
        let b1 = g.constant(Array::zeros(&[6]));
        let w2 = g.constant(Array::from_vec(&[6, 1], w2d).unwrap());
        let b2 = g.constant(Array::zeros(&[1]));
        let p = spatial_bias(&mut g, f, w1, b1, w2, b2).unwrap();
        let mut exec = Executor::new(&g);
        exec.forward(&g, &ParamStore::new(), &Inputs::new()).unwrap();
        let m = exec.value(p);
        let first = m.data()[0];
        assert!(m.data().iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn zero_spatial_mlp_weights_give_bias_beta() {
        let positions = vec![
            UnitVec3::FORWARD,
            UnitVec3::UP,
            UnitVec3::from_lat_lon_deg(-45.0, 120.0),
        ];
        let mut g = Graph::new();
        let f = g.constant(spatial_features(&positions));
        let w1 = g.constant(Array::zeros(&[4, 6]));
        let b1 = g.constant(Array::zeros(&[6]));
        let w2 = g.constant(Array::zeros(&[6, 1]));
        let b2 = g.constant(Array::filled(&[1], 0.37));
        let p = spatial_bias(&mut g, f, w1, b1, w2, b2).unwrap();
        let mut exec = Executor::new(&g);
        exec.forward(&g, &ParamStore::new(), &Inputs::new()).unwrap();
        assert!(exec.value(p).data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn spatial_features_invariant_under_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let positions: Vec<UnitVec3> = (0..6)
            .map(|_| {
                UnitVec3::normalize(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .unwrap()
            })
            .collect();
        let q = crate::geom::UnitQuaternion::from_axis_angle(
            UnitVec3::normalize(1.0, 2.0, -0.5).unwrap(),
            1.1,
        );
        let rotated: Vec<UnitVec3> = positions.iter().map(|p| q.rotate(*p).unwrap()).collect();
        let a = spatial_features(&positions);
        let b = spatial_features(&rotated);
        for (ca, cb) in a.data().chunks(4).zip(b.data().chunks(4)) {
            // dot term exactly invariant; cross term rotates but keeps norm
            assert!((ca[0] - cb[0]).abs() < 1e-12);
            let na = (ca[1] * ca[1] + ca[2] * ca[2] + ca[3] * ca[3]).sqrt();
            let nb = (cb[1] * cb[1] + cb[2] * cb[2] + cb[3] * cb[3]).sqrt();
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let cfg = EncoderConfig::default_desk(8, 1, 2);
        let (ts, audio) = small_tokens(&mut g, 8, &mut rng);
        let (out, _) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        let loss = g.mean_all(out.semantics);
        let params = small_params(&g, &cfg, &mut rng);
        let mut inputs = Inputs::new();
        inputs.insert("audio_sem".into(), audio);
        inputs.insert("enc.spatial".into(), spatial_features(&ts.positions));
        let err = finite_diff_check(&g, loss, &params, &inputs, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn same_modality_token_swap_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let cfg = EncoderConfig::default_desk(d, 2, 2);
        let build = |swap: bool, audio: &Array, rng: &mut ChaCha8Rng| -> (Array, Vec<UnitVec3>) {
            let mut g = Graph::new();
            let (mut ts, _) = small_tokens(&mut g, d, rng);
            let mut a = audio.clone();
            if swap {
                // swap the two audio tokens and their positions
                let row: Vec<f64> = a.data()[0..d].to_vec();
                let (lo, hi) = a.data_mut().split_at_mut(d);
                lo.copy_from_slice(&hi[0..d]);
                hi[0..d].copy_from_slice(&row);
                ts.positions.swap(6, 7);
            }
            let (out, _) = encode(&mut g, &ts, &cfg, "enc").unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(100);
            let params = small_params(&g, &cfg, &mut rng2);
            let (_, y) = run(&g, &params, &ts, &a, out.semantics);
            (y, ts.positions)
        };
        let mut rng_a = rng.clone();
        let audio_data: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let audio = Array::from_vec(&[2, d], audio_data).unwrap();
        let (y0, _) = build(false, &audio, &mut rng_a.clone());
        let (y1, _) = build(true, &audio, &mut rng_a);
        // CLS rows identical, audio rows 6/7 swapped
        let row = |y: &Array, i: usize| y.data()[i * d..(i + 1) * d].to_vec();
        for i in 0..6 {
            for (a, b) in row(&y0, i).iter().zip(row(&y1, i).iter()) {
                assert!((a - b).abs() < 1e-12, "cls row {i} changed");
            }
        }
        for (a, b) in row(&y0, 6).iter().zip(row(&y1, 7).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in row(&y0, 7).iter().zip(row(&y1, 6).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_bias_off_gives_plain_softmax_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let mut cfg = EncoderConfig::default_desk(8, 1, 2);
        cfg.use_spatial_bias = false;
        let (ts, audio) = small_tokens(&mut g, 8, &mut rng);
        let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        assert!(trace.spatial.is_empty());
        let params = small_params(&g, &cfg, &mut rng);
        let mut inputs = Inputs::new();
        inputs.insert("audio_sem".into(), audio);
        let mut exec = Executor::new(&g);
        exec.forward(&g, &params, &inputs).unwrap();
        // rows still sum to one and the graph has no spatial input
        let n = ts.len();
        for a in &trace.attention {
            for r in exec.value(*a).data().chunks(n) {
                let s: f64 = r.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
        assert!(exec.value(out.semantics).all_finite());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = make_grid(1, 1).unwrap();
        let mut g = Graph::new();
        let d = 4;
        let wc = g.param("tok.cls.w", &[d, 3]);
        let bc = g.param("tok.cls.b", &[d]);
        let cls = make_cls_tokens(&mut g, &grid, wc, bc).unwrap();
        let ts = assemble(&mut g, cls, None, None, None).unwrap();
        let cfg = EncoderConfig::default_desk(d, 1, 1);
        let (out, trace) = encode(&mut g, &ts, &cfg, "enc").unwrap();
        let mut store = ParamStore::new();
        store.init_normal("tok.cls.w", &[d, 3], 0.5, &mut rng);
        store.init_normal("tok.cls.b", &[d], 0.5, &mut rng);
        init_encoder_params(&mut store, "enc", &cfg, &[Modality::Cls], &mut rng);
        let mut inputs = Inputs::new();
        inputs.insert("enc.spatial".into(), spatial_features(&ts.positions));
        let mut exec = Executor::new(&g);
        exec.forward(&g, &store, &inputs).unwrap();
        assert_eq!(exec.value(trace.attention[0]).data(), &[1.0]);
        assert!(exec.value(out.semantics).all_finite());
    }

    #[test]
    fn encode_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut g = Graph::new();
            let cfg = EncoderConfig::default_desk(8, 2, 4);
            let (ts, audio) = small_tokens(&mut g, 8, &mut rng);
            let (out, _) = encode(&mut g, &ts, &cfg, "enc").unwrap();
            let params = small_params(&g, &cfg, &mut rng);
            let (_, y) = run(&g, &params, &ts, &audio, out.semantics);
            y
        };
        let a = build();
        let b = build();
        assert_eq!(a.data(), b.data());
    }
}
