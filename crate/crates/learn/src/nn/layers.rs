use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::features::{rel_tensor, REL_FEATURES};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NnError;

type R = Result<Var, NnError>;

/// Parameters plus an optional dropout sample for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub masks: Option<&'a DropoutMasks>,
    /// Parameters enter the graph as constants, so no gradient reaches them.
    pub frozen: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            masks: None,
            frozen: false,
        }
    }

    pub fn with_masks(store: &'a ParamStore, masks: &'a DropoutMasks) -> Self {
        Self {
            store,
            masks: Some(masks),
            frozen: false,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            masks: None,
            frozen: true,
        }
    }

    pub fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.frozen {
            g.input(self.store.value(id).clone())
        } else {
            g.param(self.store, id)
        }
    }
}

/// Weight matrices that carry a dropout layer in front of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropoutSpec {
    pub layers: Vec<(ParamId, f64)>,
}

/// Per-weight input-unit masks (`1` keeps the unit, `0` drops it).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropoutMasks {
    pub masks: BTreeMap<ParamId, Vec<f64>>,
}

impl DropoutMasks {
    /// The masked parameter set: each weight's input rows multiplied by its mask.
    pub fn apply(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (id, m) in &self.masks {
            let w = out.value_mut(*id);
            let cols = w.cols();
            for (r, keep) in m.iter().enumerate() {
                if *keep == 0.0 {
                    w.data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        out
    }

    pub fn dropped_fraction(&self) -> f64 {
        let (z, n) = self
            .masks
            .values()
            .fold((0usize, 0usize), |(z, n), m| (z + m.iter().filter(|v| **v == 0.0).count(), n + m.len()));
        z as f64 / n.max(1) as f64
    }
}

/// Fresh Bernoulli masks, one per weight input unit; no rescaling of the
/// kept units.
pub fn dropout_sample(spec: &DropoutSpec, store: &ParamStore, rng: &mut ChaCha8Rng) -> DropoutMasks {
    let mut masks = BTreeMap::new();
    for (id, p) in &spec.layers {
        assert!((0.0..1.0).contains(p), "dropout probability {p} outside [0, 1)");
        let rows = store.value(*id).rows();
        let m = (0..rows)
            .map(|_| if *p > 0.0 && rng.random::<f64>() < *p { 0.0 } else { 1.0 })
            .collect();
        masks.insert(*id, m);
    }
    DropoutMasks { masks }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_glorot(&format!("{name}.w"), inputs, outputs, rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.b"), 1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> R {
        let mut w = ctx.param(g, self.w);
        if let Some(m) = ctx.masks.and_then(|m| m.masks.get(&self.w)) {
            let mask = g.input(Tensor::from_vec(m.len(), 1, m.clone())?);
            w = g.mul(w, mask)?;
        }
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.param(g, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn dropout(&self, p: f64) -> (ParamId, f64) {
        (self.w, p)
    }
}

/// Linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, ctx: Ctx, mut x: Var) -> R {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, ctx, x)?;
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(&format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> R {
        let n = g.layer_norm_rows(x, 1e-5);
        let gain = ctx.param(g, self.gain);
        let bias = ctx.param(g, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

pub const DEFAULT_BANDS: usize = 8;

/// `n` log-spaced frequencies from `lo` to `hi`.
pub fn log_spaced(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

/// Raw values plus `sin`/`cos` at a fixed frequency bank, then a two-layer MLP.
#[derive(Debug, Clone)]
pub struct FourierEmbedding {
    pub inputs: usize,
    pub freqs: Vec<f64>,
    pub mlp: Mlp,
}

impl FourierEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, bands: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let freqs = log_spaced(bands, 0.02, 2.0);
        let width = inputs * (1 + 2 * bands);
        Self {
            inputs,
            freqs,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[width, dim, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> R {
        let c = self.inputs;
        let b = self.freqs.len();
        if g.shape(x)[1] != c {
            return Err(NnError::Shape {
                node: "fourier".into(),
                detail: format!("{} inputs, expected {c}", g.shape(x)[1]),
            });
        }
        let mut f = Tensor::zeros(c, c * b);
        for i in 0..c {
            for (k, fr) in self.freqs.iter().enumerate() {
                f.set(i, i * b + k, 2.0 * std::f64::consts::PI * fr);
            }
        }
        let f = g.input(f);
        let z = g.matmul(x, f)?;
        let s = g.sin(z);
        let co = g.cos(z);
        let cat = g.concat_cols(&[x, s, co])?;
        self.mlp.forward(g, ctx, cat)
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.mlp.layers.iter()
    }
}

/// Sparse edge list for cross- or self-attention: edge `e` lets query
/// `dst[e]` read source `src[e]`, with a 4-value relative encoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Edges {
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
    pub rel: Vec<[f64; 4]>,
}

impl Edges {
    pub fn push(&mut self, dst: usize, src: usize, rel: [f64; 4]) {
        self.dst.push(dst);
        self.src.push(src);
        self.rel.push(rel);
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }

}

/// Scaled dot-product attention over an edge list. `rel` (one row per edge)
/// is added to the gathered keys and values. Returns the `[n_queries, D]`
/// output and, per query, whether it had no keys (its row is zero).
#[allow(clippy::too_many_arguments)]
pub fn attend(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    rel: Option<Var>,
    dst: &[usize],
    src: &[usize],
    heads: usize,
) -> Result<(Var, Vec<bool>), NnError> {
    let [nq, d] = g.shape(queries);
    let mut masked = vec![true; nq];
    for q in dst {
        if *q < nq {
            masked[*q] = false;
        }
    }
    if dst.is_empty() {
        return Ok((g.input(Tensor::zeros(nq, d)), masked));
    }
    if d % heads != 0 {
        return Err(NnError::Shape {
            node: "attend".into(),
            detail: format!("dim {d} not divisible by {heads} heads"),
        });
    }
    let mut k = g.gather(keys, src)?;
    let mut v = g.gather(values, src)?;
    if let Some(r) = rel {
        k = g.add(k, r)?;
        v = g.add(v, r)?;
    }
    let qe = g.gather(queries, dst)?;
    let width = d / heads;
    let scores = g.head_dot(qe, k, heads)?;
    let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
    let alpha = g.segment_softmax(scores, dst, nq)?;
    let a = g.head_expand(alpha, width);
    let weighted = g.mul(a, v)?;
    let out = g.scatter_add(weighted, dst, nq)?;
    Ok((out, masked))
}

/// Multi-head attention with relative encodings, residual, layer norms and
/// a feed-forward layer.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub heads: usize,
    pub dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub rel: FourierEmbedding,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub dropout: Option<f64>,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, bands: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            dim,
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            rel: FourierEmbedding::new(store, &format!("{name}.rel"), REL_FEATURES, bands, dim, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, 2 * dim, dim], rng),
            dropout: None,
        }
    }

    /// `queries` read `sources` along `edges`; an empty edge list returns the
    /// queries untouched.
    pub fn forward(&self, g: &mut Graph, ctx: Ctx, queries: Var, sources: Var, edges: &Edges) -> R {
        if edges.is_empty() {
            return Ok(queries);
        }
        let rel_in = g.input(rel_tensor(edges));
        let rel = self.rel.forward(g, ctx, rel_in)?;
        let q = self.wq.forward(g, ctx, queries)?;
        let k = self.wk.forward(g, ctx, sources)?;
        let v = self.wv.forward(g, ctx, sources)?;
        let (att, _) = attend(g, q, k, v, Some(rel), &edges.dst, &edges.src, self.heads)?;
        let o = self.wo.forward(g, ctx, att)?;
        let x = g.add(queries, o)?;
        let x = self.ln1.forward(g, ctx, x)?;
        let f = self.ffn.forward(g, ctx, x)?;
        let x2 = g.add(x, f)?;
        self.ln2.forward(g, ctx, x2)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.wq, &self.wk, &self.wv, &self.wo];
        v.extend(self.rel.linears());
        v.extend(self.ffn.layers.iter());
        v
    }
}

/// Gated recurrent unit built from primitive ops.
#[derive(Debug, Clone)]
pub struct Gru {
    pub dim: usize,
    pub wz: Linear,
    pub wr: Linear,
    pub wn: Linear,
    pub uz: Linear,
    pub ur: Linear,
    pub un: Linear,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            wz: Linear::new(store, &format!("{name}.wz"), inputs, dim, true, rng),
            wr: Linear::new(store, &format!("{name}.wr"), inputs, dim, true, rng),
            wn: Linear::new(store, &format!("{name}.wn"), inputs, dim, true, rng),
            uz: Linear::new(store, &format!("{name}.uz"), dim, dim, false, rng),
            ur: Linear::new(store, &format!("{name}.ur"), dim, dim, false, rng),
            un: Linear::new(store, &format!("{name}.un"), dim, dim, true, rng),
        }
    }

    pub fn step(&self, g: &mut Graph, ctx: Ctx, x: Var, h: Var) -> R {
        let xz = self.wz.forward(g, ctx, x)?;
        let hz = self.uz.forward(g, ctx, h)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let xr = self.wr.forward(g, ctx, x)?;
        let hr = self.ur.forward(g, ctx, h)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let xn = self.wn.forward(g, ctx, x)?;
        let hn = self.un.forward(g, ctx, h)?;
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        let omz = g.one_minus(z);
        let a = g.mul(omz, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }

    /// Runs over `xs` (one `[B, in]` input per step) from a zero state.
    pub fn run(&self, g: &mut Graph, ctx: Ctx, xs: &[Var]) -> R {
        let b = g.shape(xs[0])[0];
        let mut h = g.input(Tensor::zeros(b, self.dim));
        for x in xs {
            h = self.step(g, ctx, *x, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.input(Tensor::row_vector(vec![0.3, -1.0, 2.0, 0.5]));
        let v = g.input(Tensor::row_vector(vec![7.0, 8.0, -9.0, 1.5]));
        let (out, mask) = attend(&mut g, q, q, v, None, &[0], &[0], 2).unwrap();
        assert_eq!(g.value(out).data, vec![7.0, 8.0, -9.0, 1.5]);
        assert_eq!(mask, vec![false]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let k = g.input(Tensor::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let v = g.input(Tensor::from_vec(2, 2, vec![1.0, 3.0, 5.0, -1.0]).unwrap());
        let (out, _) = attend(&mut g, q, k, v, None, &[0, 0], &[0, 1], 1).unwrap();
        assert_eq!(g.value(out).data, vec![3.0, 1.0]);
    }

    #[test]
    fn queries_without_keys_are_masked_zero() {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (out, mask) = attend(&mut g, q, q, q, None, &[1], &[0], 1).unwrap();
        assert_eq!(mask, vec![true, false]);
        assert_eq!(&g.value(out).data[..2], &[0.0, 0.0]);
        let (out, mask) = attend(&mut g, q, q, q, None, &[], &[], 1).unwrap();
        assert_eq!(mask, vec![true, true]);
        assert!(g.value(out).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let spec = DropoutSpec { layers: vec![l.dropout(0.0)] };
        let masks = dropout_sample(&spec, &store, &mut rng);
        assert_eq!(masks.apply(&store), store);
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let y = l.forward(&mut g, Ctx::with_masks(&store, &masks), x).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let y2 = l.forward(&mut g2, Ctx::new(&store), x2).unwrap();
        assert_eq!(g.value(y), g2.value(y2));
        let s = g.sum(y);
        let s2 = g2.sum(y2);
        let (a, b) = (g.backward(s).unwrap(), g2.backward(s2).unwrap());
        assert_eq!(a.wrt(x), b.wrt(x2));
    }

    #[test]
    fn dropout_masks_are_seeded_and_fresh() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(&mut store, "l", 64, 4, true, &mut rng);
        let spec = DropoutSpec { layers: vec![l.dropout(0.5)] };
        let a = dropout_sample(&spec, &store, &mut ChaCha8Rng::seed_from_u64(9));
        let b = dropout_sample(&spec, &store, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let c1 = dropout_sample(&spec, &store, &mut r);
        let c2 = dropout_sample(&spec, &store, &mut r);
        assert_ne!(c1, c2);
        let masked = a.apply(&store);
        let w = masked.value(l.w);
        for (row, keep) in a.masks[&l.w].iter().enumerate() {
            let zero = w.row(row).iter().all(|v| *v == 0.0);
            assert_eq!(zero, *keep == 0.0);
        }
    }

    #[test]
    fn column_drop_frequency() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Linear::new(&mut store, "l", 1000, 1, false, &mut rng);
        let spec = DropoutSpec { layers: vec![l.dropout(0.5)] };
        let mut zeros = 0usize;
        for _ in 0..100 {
            zeros += dropout_sample(&spec, &store, &mut rng).masks[&l.w].iter().filter(|v| **v == 0.0).count();
        }
        let n = 100_000.0;
        let sigma = (n * 0.25f64).sqrt();
        assert!((zeros as f64 - 0.5 * n).abs() < 3.0 * sigma, "{zeros}");
    }

    #[test]
    fn log_spaced_bank() {
        let f = log_spaced(DEFAULT_BANDS, 0.02, 2.0);
        assert_eq!(f.len(), 8);
        assert!((f[0] - 0.02).abs() < 1e-15 && (f[7] - 2.0).abs() < 1e-12);
        for w in f.windows(2) {
            assert!((w[1] / w[0] - f[1] / f[0]).abs() < 1e-12);
        }
    }
}
