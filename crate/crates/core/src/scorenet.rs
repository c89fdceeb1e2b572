//! The permutation-equivariant score network.
//!
//! Each layer runs four residual sub-blocks: (a) a learned set of inducers
//! cross-attends to the point tokens, (b) a shallow MLP updates the inducers,
//! (c) the tokens cross-attend back to the inducers, (d) a token MLP. Points
//! never interact directly, only through the inducers, which is what makes
//! inducer-state caching possible for upsampling. MLPs use the Gaussian
//! activation exp(-x^2 / (2 a^2)); the noise level enters through the bias
//! and scale of every group normalization, as an affine function of a learned
//! noise embedding.
//!
//! Token-axis reductions run in a canonical row order (tokens are sorted
//! lexicographically on entry and unsorted on exit), so permuting the input
//! points permutes the output rows bit-exactly.

use ndarray::Array2;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

const GROUP_NORM_EPS: f64 = 1e-6;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Number of inducer-attention layers.
    pub layers: usize,
    /// Token width.
    pub d_nn: usize,
    /// Inducer count M.
    pub inducers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Group-norm group count.
    pub groups: usize,
    /// MLP hidden width.
    pub d_ff: usize,
    /// Noise-embedding width.
    pub d_emb: usize,
    /// Gaussian activation width a (fixed, not learned).
    pub gaussian_a: f64,
}

impl NetConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        NetConfig {
            layers: 4,
            d_nn: 64,
            inducers: 16,
            heads: 4,
            groups: 8,
            d_ff: 128,
            d_emb: 64,
            gaussian_a: 1.0,
        }
    }

    /// The published-scale preset (6 layers, width 384).
    pub fn paper_scale() -> Self {
        NetConfig {
            layers: 6,
            d_nn: 384,
            inducers: 64,
            heads: 8,
            groups: 32,
            d_ff: 768,
            d_emb: 384,
            gaussian_a: 1.0,
        }
    }

    /// Small configuration for gradient tests.
    pub fn tiny() -> Self {
        NetConfig {
            layers: 2,
            d_nn: 16,
            inducers: 4,
            heads: 4,
            groups: 4,
            d_ff: 32,
            d_emb: 8,
            gaussian_a: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.d_nn,
            self.inducers,
            self.heads,
            self.groups,
            self.d_ff,
            self.d_emb,
        ];
        if counts.iter().any(|c| *c < 1) {
            return Err(Error::InvalidInput("all network counts must be >= 1".into()));
        }
        if !self.d_nn.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "d_nn {} not divisible by heads {}",
                self.d_nn, self.heads
            )));
        }
        if !self.d_nn.is_multiple_of(self.groups) {
            return Err(Error::InvalidInput(format!(
                "d_nn {} not divisible by groups {}",
                self.d_nn, self.groups
            )));
        }
        if self.gaussian_a <= 0.0 {
            return Err(Error::InvalidInput("gaussian_a must be positive".into()));
        }
        Ok(())
    }
}

/// Flat, named tensor container. All trainable state of a model lives here,
/// in a deterministic order, so the optimizer, EMA, and checkpoints can
/// treat parameters uniformly.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Array2<f64> {
        &self.tensors[idx]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Register every tensor as a tape leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Collect per-tensor gradients from a backward pass (zeros where a
    /// tensor did not influence the output).
    pub fn collect_grads(&self, grads: &Grads, vars: &[Var]) -> Vec<Array2<f64>> {
        self.tensors
            .iter()
            .zip(vars.iter())
            .map(|(t, v)| grads.get_or_zeros(*v, t.dim()))
            .collect()
    }

    /// Add N(0, scale^2) noise to every entry; used by gradient tests to move
    /// away from the near-identity init.
    pub fn jitter(&mut self, rng: &mut StreamRng, scale: f64) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v += scale * rng.normal();
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GnIdx {
    ws: usize,
    wb: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIdx {
    inducers: usize,
    attn_ind: AttnIdx,
    gn_ind_q: GnIdx,
    gn_ind_kv: GnIdx,
    mlp_ind: MlpIdx,
    gn_ind_mlp: GnIdx,
    attn_tok: AttnIdx,
    gn_tok_q: GnIdx,
    gn_tok_kv: GnIdx,
    mlp_tok: MlpIdx,
    gn_tok_mlp: GnIdx,
}

/// Index map from network roles to [`ParamSet`] slots.
#[derive(Debug, Clone)]
pub struct NetLayout {
    pub d_in: usize,
    pub d_cond: usize,
    pub out_dim: usize,
    input_w: usize,
    input_b: usize,
    embed: MlpIdx,
    layers: Vec<LayerIdx>,
    output_w: usize,
    output_b: usize,
}

/// Scale applied to skip-connection output projections at init.
pub const SKIP_INIT: f64 = 0.02;

impl NetLayout {
    /// Push freshly initialized tensors for a network with `d_in` token
    /// features, `d_cond`-dimensional conditioning vector, and `out_dim`
    /// outputs per token. Skip-connection output projections start near zero.
    pub fn init(
        set: &mut ParamSet,
        cfg: &NetConfig,
        d_in: usize,
        d_cond: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<NetLayout> {
        cfg.validate()?;
        let d = cfg.d_nn;
        fn dense(
            set: &mut ParamSet,
            rng: &mut StreamRng,
            name: String,
            rows: usize,
            cols: usize,
            scale: f64,
        ) -> usize {
            let std = scale / (rows as f64).sqrt();
            set.push(name, rng_matrix(rng, rows, cols, std))
        }
        fn zeros(set: &mut ParamSet, name: String, rows: usize, cols: usize) -> usize {
            set.push(name, Array2::zeros((rows, cols)))
        }

        let input_w = dense(set, rng, "net.input.w".into(), d_in, d, 1.0);
        let input_b = zeros(set, "net.input.b".into(), 1, d);
        let embed = MlpIdx {
            w1: dense(set, rng, "net.embed.w1".into(), 1, cfg.d_emb, 1.0),
            b1: zeros(set, "net.embed.b1".into(), 1, cfg.d_emb),
            w2: dense(set, rng, "net.embed.w2".into(), cfg.d_emb, cfg.d_emb, 1.0),
            b2: zeros(set, "net.embed.b2".into(), 1, cfg.d_emb),
        };
        let attn = |set: &mut ParamSet, rng: &mut StreamRng, base: String| AttnIdx {
            wq: set.push(format!("{base}.wq"), rng_matrix(rng, d, d, 1.0 / (d as f64).sqrt())),
            wk: set.push(format!("{base}.wk"), rng_matrix(rng, d, d, 1.0 / (d as f64).sqrt())),
            wv: set.push(format!("{base}.wv"), rng_matrix(rng, d, d, 1.0 / (d as f64).sqrt())),
            wo: set.push(
                format!("{base}.wo"),
                rng_matrix(rng, d, d, SKIP_INIT / (d as f64).sqrt()),
            ),
        };
        let gn = |set: &mut ParamSet, base: String| GnIdx {
            ws: set.push(format!("{base}.ws"), Array2::zeros((d_cond, d))),
            wb: set.push(format!("{base}.wb"), Array2::zeros((d_cond, d))),
        };
        let mlp = |set: &mut ParamSet, rng: &mut StreamRng, base: String| MlpIdx {
            w1: set.push(
                format!("{base}.w1"),
                rng_matrix(rng, d, cfg.d_ff, 1.0 / (d as f64).sqrt()),
            ),
            b1: set.push(format!("{base}.b1"), Array2::zeros((1, cfg.d_ff))),
            w2: set.push(
                format!("{base}.w2"),
                rng_matrix(rng, cfg.d_ff, d, SKIP_INIT / (cfg.d_ff as f64).sqrt()),
            ),
            b2: set.push(format!("{base}.b2"), Array2::zeros((1, d))),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |suffix: &str| format!("net.layer{l}.{suffix}");
            layers.push(LayerIdx {
                inducers: set.push(p("inducers"), rng_matrix(rng, cfg.inducers, d, 1.0)),
                gn_ind_q: gn(set, p("gn_ind_q")),
                gn_ind_kv: gn(set, p("gn_ind_kv")),
                attn_ind: attn(set, rng, p("attn_ind")),
                gn_ind_mlp: gn(set, p("gn_ind_mlp")),
                mlp_ind: mlp(set, rng, p("mlp_ind")),
                gn_tok_q: gn(set, p("gn_tok_q")),
                gn_tok_kv: gn(set, p("gn_tok_kv")),
                attn_tok: attn(set, rng, p("attn_tok")),
                gn_tok_mlp: gn(set, p("gn_tok_mlp")),
                mlp_tok: mlp(set, rng, p("mlp_tok")),
            });
        }
        let output_w = dense(set, rng, "net.output.w".into(), d, out_dim, SKIP_INIT);
        let output_b = zeros(set, "net.output.b".into(), 1, out_dim);
        Ok(NetLayout {
            d_in,
            d_cond,
            out_dim,
            input_w,
            input_b,
            embed,
            layers,
            output_w,
            output_b,
        })
    }
}

fn rng_matrix(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.normal())
}

/// Embed the noise-conditioning scalar c_noise through the small MLP.
pub fn embed_cnoise(
    tape: &mut Tape,
    vars: &[Var],
    layout: &NetLayout,
    cfg: &NetConfig,
    c_noise: f64,
) -> Var {
    let c = tape.leaf(ndarray::arr2(&[[c_noise]]));
    let h = tape.matmul(c, vars[layout.embed.w1]);
    let h = tape.add_row(h, vars[layout.embed.b1]);
    let h = tape.gaussian(h, cfg.gaussian_a);
    let h = tape.matmul(h, vars[layout.embed.w2]);
    tape.add_row(h, vars[layout.embed.b2])
}

/// Deterministic embedding of a noise level sigma > 0 (the network is
/// conditioned on c_noise(sigma) = ln(sigma)/4).
pub fn noise_embedding(
    tape: &mut Tape,
    vars: &[Var],
    layout: &NetLayout,
    cfg: &NetConfig,
    sigma: f64,
) -> Result<Var> {
    if sigma <= 0.0 {
        return Err(Error::DomainError(format!(
            "noise embedding needs sigma > 0, got {sigma}"
        )));
    }
    Ok(embed_cnoise(tape, vars, layout, cfg, sigma.ln() / 4.0))
}

/// Group normalization whose per-channel scale and bias are affine in the
/// conditioning vector: y = gn(x) * (1 + e W_s) + e W_b.
fn cond_group_norm(
    tape: &mut Tape,
    vars: &[Var],
    cfg: &NetConfig,
    gn: &GnIdx,
    embed: Var,
    x: Var,
) -> Var {
    let y = tape.group_norm(x, cfg.groups, GROUP_NORM_EPS);
    let s = tape.matmul(embed, vars[gn.ws]);
    let s = tape.add_const(s, 1.0);
    let b = tape.matmul(embed, vars[gn.wb]);
    let y = tape.mul_row(y, s);
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product cross-attention; queries from `q_in`,
/// keys/values from `kv_in`.
fn attention(tape: &mut Tape, vars: &[Var], cfg: &NetConfig, idx: &AttnIdx, q_in: Var, kv_in: Var) -> Var {
    let d = cfg.d_nn;
    let dk = d / cfg.heads;
    let q = tape.matmul(q_in, vars[idx.wq]);
    let k = tape.matmul(kv_in, vars[idx.wk]);
    let v = tape.matmul(kv_in, vars[idx.wv]);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, vars[idx.wo])
}

fn mlp(tape: &mut Tape, vars: &[Var], cfg: &NetConfig, idx: &MlpIdx, x: Var) -> Var {
    let h = tape.matmul(x, vars[idx.w1]);
    let h = tape.add_row(h, vars[idx.b1]);
    let h = tape.gaussian(h, cfg.gaussian_a);
    let h = tape.matmul(h, vars[idx.w2]);
    tape.add_row(h, vars[idx.b2])
}

/// Output of a forward pass: per-token scores plus the post-MLP inducer
/// activations of every layer (the cacheable state).
pub struct ForwardOut {
    pub scores: Var,
    pub inducer_trace: Vec<Var>,
}

/// Run the network on `tokens` (N x d_in) conditioned on `embed` (1 x d_cond).
///
/// When `cached_inducers` is supplied, sub-blocks (a) and (b) are skipped and
/// the cached per-layer activations are used instead, which makes the output
/// of each token independent of every other token.
pub fn forward(
    tape: &mut Tape,
    vars: &[Var],
    layout: &NetLayout,
    cfg: &NetConfig,
    tokens: Var,
    embed: Var,
    cached_inducers: Option<&[Array2<f64>]>,
) -> Result<ForwardOut> {
    let (n, d_in) = tape.shape(tokens);
    if d_in != layout.d_in {
        return Err(Error::StructuralError(format!(
            "tokens have {d_in} features, network expects {}",
            layout.d_in
        )));
    }
    if tape.shape(embed) != (1, layout.d_cond) {
        return Err(Error::StructuralError(format!(
            "conditioning vector shape {:?}, expected (1, {})",
            tape.shape(embed),
            layout.d_cond
        )));
    }
    if let Some(cache) = cached_inducers {
        if cache.len() != cfg.layers {
            return Err(Error::StructuralError(format!(
                "cache holds {} layers, network has {}",
                cache.len(),
                cfg.layers
            )));
        }
        for (l, c) in cache.iter().enumerate() {
            if c.dim() != (cfg.inducers, cfg.d_nn) {
                return Err(Error::StructuralError(format!(
                    "cached inducers for layer {l} have shape {:?}, expected ({}, {})",
                    c.dim(),
                    cfg.inducers,
                    cfg.d_nn
                )));
            }
        }
    }

    // canonical token order: reductions over the token axis always run in
    // the same sequence, making permutation equivariance bit-exact
    let perm = sort_rows(tape.value(tokens));
    let mut inv = vec![0isize; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p as usize] = i as isize;
    }
    let tokens = tape.gather_rows(tokens, perm);

    let x = tape.matmul(tokens, vars[layout.input_w]);
    let mut x = tape.add_row(x, vars[layout.input_b]);

    let mut trace = Vec::with_capacity(cfg.layers);
    for (l, idx) in layout.layers.iter().enumerate() {
        let inducers = match cached_inducers {
            Some(cache) => tape.leaf(cache[l].clone()),
            None => {
                // (a) inducers attend to tokens
                let i0 = vars[idx.inducers];
                let q = cond_group_norm(tape, vars, cfg, &idx.gn_ind_q, embed, i0);
                let kv = cond_group_norm(tape, vars, cfg, &idx.gn_ind_kv, embed, x);
                let a = attention(tape, vars, cfg, &idx.attn_ind, q, kv);
                let i1 = tape.add(i0, a);
                // (b) inducer MLP
                let h = cond_group_norm(tape, vars, cfg, &idx.gn_ind_mlp, embed, i1);
                let m = mlp(tape, vars, cfg, &idx.mlp_ind, h);
                tape.add(i1, m)
            }
        };
        trace.push(inducers);

        // (c) tokens attend to inducers
        let q = cond_group_norm(tape, vars, cfg, &idx.gn_tok_q, embed, x);
        let kv = cond_group_norm(tape, vars, cfg, &idx.gn_tok_kv, embed, inducers);
        let a = attention(tape, vars, cfg, &idx.attn_tok, q, kv);
        x = tape.add(x, a);
        // (d) token MLP
        let h = cond_group_norm(tape, vars, cfg, &idx.gn_tok_mlp, embed, x);
        let m = mlp(tape, vars, cfg, &idx.mlp_tok, h);
        x = tape.add(x, m);

        if !tape.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure {
                layer: l,
                detail: "non-finite token activations".into(),
            });
        }
    }

    let out = tape.matmul(x, vars[layout.output_w]);
    let out = tape.add_row(out, vars[layout.output_b]);
    let scores = tape.gather_rows(out, inv);
    Ok(ForwardOut {
        scores,
        inducer_trace: trace,
    })
}

/// Lexicographic argsort of matrix rows (total order on f64).
fn sort_rows(m: &Array2<f64>) -> Vec<isize> {
    let mut idx: Vec<isize> = (0..m.nrows() as isize).collect();
    idx.sort_by(|&a, &b| {
        let ra = m.row(a as usize);
        let rb = m.row(b as usize);
        for (x, y) in ra.iter().zip(rb.iter()) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup(d_in: usize, d_cond: usize, out_dim: usize) -> (NetConfig, ParamSet, NetLayout) {
        let cfg = NetConfig::tiny();
        let mut set = ParamSet::new();
        let mut rng = StreamRng::new(100);
        let layout = NetLayout::init(&mut set, &cfg, d_in, d_cond, out_dim, &mut rng).unwrap();
        set.jitter(&mut rng, 0.25);
        (cfg, set, layout)
    }

    fn run_forward(
        cfg: &NetConfig,
        set: &ParamSet,
        layout: &NetLayout,
        tokens: &Array2<f64>,
        sigma: f64,
    ) -> Array2<f64> {
        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let tok = tape.leaf(tokens.clone());
        let emb = noise_embedding(&mut tape, &vars, layout, cfg, sigma).unwrap();
        let out = forward(&mut tape, &vars, layout, cfg, tok, emb, None).unwrap();
        tape.value(out.scores).clone()
    }

    #[test]
    fn permutation_equivariance_is_bit_exact() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut rng = StreamRng::new(5);
        let tokens = rng.normal_matrix(9, 3);
        let base = run_forward(&cfg, &set, &layout, &tokens, 0.7);
        for _ in 0..20 {
            let perm = rng.choose_indices(9, 9);
            let mut permuted = Array2::zeros((9, 3));
            for (i, &p) in perm.iter().enumerate() {
                permuted.row_mut(i).assign(&tokens.row(p));
            }
            let out = run_forward(&cfg, &set, &layout, &permuted, 0.7);
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert_eq!(
                        out[[i, c]].to_bits(),
                        base[[p, c]].to_bits(),
                        "row {i} col {c} not bit-equal"
                    );
                }
            }
        }
    }

    #[test]
    fn single_token_is_finite() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let tokens = ndarray::arr2(&[[0.3, -0.2, 1.4]]);
        let out = run_forward(&cfg, &set, &layout, &tokens, 1.3);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out.dim(), (1, 3));
    }

    #[test]
    fn cached_inducers_reproduce_uncached_scores() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut rng = StreamRng::new(6);
        let tokens = rng.normal_matrix(7, 3);

        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let tok = tape.leaf(tokens.clone());
        let emb = noise_embedding(&mut tape, &vars, &layout, &cfg, 0.5).unwrap();
        let out = forward(&mut tape, &vars, &layout, &cfg, tok, emb, None).unwrap();
        let trace: Vec<Array2<f64>> = out
            .inducer_trace
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect();
        let scores = tape.value(out.scores).clone();

        let mut tape2 = Tape::new();
        let vars2 = set.leaves(&mut tape2);
        let tok2 = tape2.leaf(tokens);
        let emb2 = noise_embedding(&mut tape2, &vars2, &layout, &cfg, 0.5).unwrap();
        let out2 = forward(&mut tape2, &vars2, &layout, &cfg, tok2, emb2, Some(&trace)).unwrap();
        for (a, b) in tape2.value(out2.scores).iter().zip(scores.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cache_shape_mismatch_is_structural_error() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let tok = tape.leaf(ndarray::arr2(&[[0.1, 0.2, 0.3]]));
        let emb = noise_embedding(&mut tape, &vars, &layout, &cfg, 0.5).unwrap();
        let bad = vec![Array2::zeros((3, cfg.d_nn)); cfg.layers];
        assert!(matches!(
            forward(&mut tape, &vars, &layout, &cfg, tok, emb, Some(&bad)),
            Err(Error::StructuralError(_))
        ));
    }

    #[test]
    fn near_identity_at_init() {
        // un-jittered init: skip projections are near zero
        let cfg = NetConfig::desk();
        let mut set = ParamSet::new();
        let mut rng = StreamRng::new(7);
        let layout = NetLayout::init(&mut set, &cfg, 3, cfg.d_emb, 3, &mut rng).unwrap();
        let tokens = rng.normal_matrix(32, 3);
        let out = run_forward(&cfg, &set, &layout, &tokens, 1.0);
        let rms = |m: &Array2<f64>| (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        assert!(
            rms(&out) < 0.1 * rms(&tokens),
            "init output rms {} vs input {}",
            rms(&out),
            rms(&tokens)
        );
    }

    #[test]
    fn equal_sigmas_equal_embeddings_and_sigma_one_is_zero_input() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let a = noise_embedding(&mut tape, &vars, &layout, &cfg, 0.37).unwrap();
        let b = noise_embedding(&mut tape, &vars, &layout, &cfg, 0.37).unwrap();
        for (x, y) in tape.value(a).iter().zip(tape.value(b).iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let one = noise_embedding(&mut tape, &vars, &layout, &cfg, 1.0).unwrap();
        let zero = embed_cnoise(&mut tape, &vars, &layout, &cfg, 0.0);
        for (x, y) in tape.value(one).iter().zip(tape.value(zero).iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(noise_embedding(&mut tape, &vars, &layout, &cfg, 0.0).is_err());
    }

    #[test]
    fn embedding_is_smooth_in_log_sigma() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        // d embed / d ln(sigma) via FD on ln sigma matches 1/4 * d/d c_noise
        let f = |ln_sigma: f64| {
            let mut tape = Tape::new();
            let vars = set.leaves(&mut tape);
            let e = embed_cnoise(&mut tape, &vars, &layout, &cfg, ln_sigma / 4.0);
            tape.value(e).clone()
        };
        // autodiff path: gradient of sum(embed) wrt the c_noise leaf
        let ln_sigma = 0.42;
        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let c = tape.leaf(ndarray::arr2(&[[ln_sigma / 4.0]]));
        let h = tape.matmul(c, vars[layout.embed.w1]);
        let h = tape.add_row(h, vars[layout.embed.b1]);
        let h = tape.gaussian(h, cfg.gaussian_a);
        let h = tape.matmul(h, vars[layout.embed.w2]);
        let e = tape.add_row(h, vars[layout.embed.b2]);
        let s = tape.sum_all(e);
        let grads = tape.backward_scalar(s);
        let d_dc = grads.get(c).unwrap()[[0, 0]];
        let step = 1e-5;
        let fd: f64 = (&f(ln_sigma + step) - &f(ln_sigma - step)).sum() / (2.0 * step);
        let ad = d_dc / 4.0;
        assert!((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4) < 1e-4);
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let (cfg, mut set, layout) = tiny_setup(3, 8, 3);
        let mut rng = StreamRng::new(8);
        set.jitter(&mut rng, 0.1);
        let tokens = rng.normal_matrix(5, 3);
        let upstream_w = rng.normal_matrix(5, 3);
        let sigma = 0.9;

        let loss = |set: &ParamSet, tokens: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = set.leaves(&mut tape);
            let tok = tape.leaf(tokens.clone());
            let emb = noise_embedding(&mut tape, &vars, &layout, &cfg, sigma).unwrap();
            let out = forward(&mut tape, &vars, &layout, &cfg, tok, emb, None).unwrap();
            let uw = tape.leaf(upstream_w.clone());
            let p = tape.mul(out.scores, uw);
            let s = tape.sum_all(p);
            tape.value(s)[[0, 0]]
        };

        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let tok = tape.leaf(tokens.clone());
        let emb = noise_embedding(&mut tape, &vars, &layout, &cfg, sigma).unwrap();
        let out = forward(&mut tape, &vars, &layout, &cfg, tok, emb, None).unwrap();
        let uw = tape.leaf(upstream_w.clone());
        let p = tape.mul(out.scores, uw);
        let s = tape.sum_all(p);
        let grads = tape.backward_scalar(s);
        let param_grads = set.collect_grads(&grads, &vars);

        let h = 1e-5;
        let mut rng_pick = StreamRng::new(9);
        // spot-check a sample of parameter entries in every tensor
        for (t_idx, tensor) in set.tensors().to_vec().iter().enumerate() {
            let checks = tensor.len().min(3);
            for _ in 0..checks {
                let i = rng_pick.below(tensor.nrows());
                let j = rng_pick.below(tensor.ncols());
                let mut plus = set.clone();
                plus.tensors_mut()[t_idx][[i, j]] += h;
                let mut minus = set.clone();
                minus.tensors_mut()[t_idx][[i, j]] -= h;
                let fd = (loss(&plus, &tokens) - loss(&minus, &tokens)) / (2.0 * h);
                let ad = param_grads[t_idx][[i, j]];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                assert!(
                    rel < 1e-4,
                    "param {} ({i},{j}): fd {fd} vs ad {ad}",
                    set.names()[t_idx]
                );
            }
        }
        // input gradients
        let input_grad = grads.get(tok).unwrap().clone();
        for i in 0..5 {
            for j in 0..3 {
                let mut plus = tokens.clone();
                plus[[i, j]] += h;
                let mut minus = tokens.clone();
                minus[[i, j]] -= h;
                let fd = (loss(&set, &plus) - loss(&set, &minus)) / (2.0 * h);
                let ad = input_grad[[i, j]];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                assert!(rel < 1e-4, "input ({i},{j}): fd {fd} vs ad {ad}");
            }
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut rng = StreamRng::new(10);
        let tokens = rng.normal_matrix(4, 3);
        let mut tape = Tape::new();
        let vars = set.leaves(&mut tape);
        let tok = tape.leaf(tokens);
        let emb = noise_embedding(&mut tape, &vars, &layout, &cfg, 0.8).unwrap();
        let out = forward(&mut tape, &vars, &layout, &cfg, tok, emb, None).unwrap();
        let grads = tape.backward(out.scores, Array2::zeros((4, 3)));
        for g in set.collect_grads(&grads, &vars) {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, set, layout) = tiny_setup(3, 8, 3);
        let mut rng = StreamRng::new(11);
        let tokens = rng.normal_matrix(6, 3);
        let a = run_forward(&cfg, &set, &layout, &tokens, 0.33);
        let b = run_forward(&cfg, &set, &layout, &tokens, 0.33);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetConfig::desk();
        cfg.heads = 3; // 64 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::desk();
        cfg.groups = 7;
        assert!(cfg.validate().is_err());
        assert!(NetConfig::desk().validate().is_ok());
        assert!(NetConfig::paper_scale().validate().is_ok());
    }
}
