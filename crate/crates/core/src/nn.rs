//! Layers built on the tape: dense, embedding, layer norm, character CNN,
//! LSTM and post-norm transformer blocks.
//!
//! A layer owns [`ParamId`]s into a [`ParamStore`]; parameters are created
//! under a dotted name prefix so checkpoints are self-describing.

use std::collections::HashMap;

use msync_autodiff::{uniform, xavier_uniform, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::Direction;
use crate::error::Result;

/// Additive value for disallowed attention positions.
pub const ATTENTION_MASK: f64 = -1e9;

const EMBEDDING_INIT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks the layer up in a loaded store.
    pub fn find<T: Scalar>(store: &ParamStore<T>, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let shape = store.get(weight).shape();
        Some(Linear {
            weight,
            bias: store.id(&format!("{name}.bias")),
            in_dim: shape[0],
            out_dim: shape[1],
        })
    }

    /// `[n, in] -> [n, out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Result<Self> {
        Self::with_bound(store, rng, name, rows, dim, EMBEDDING_INIT)
    }

    pub fn with_bound<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        rows: usize,
        dim: usize,
        bound: f64,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.weight"), uniform(rng, vec![rows, dim], bound))?;
        Ok(Embedding { table, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let t = g.param(store, self.table);
        g.gather(t, ids)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Byte-level character inventory: 256 byte values, word boundary markers and
/// a reserved unknown symbol.
pub mod chars {
    pub const BOW: usize = 256;
    pub const EOW: usize = 257;
    pub const UNK: usize = 258;
    pub const VOCAB: usize = 259;
    /// Longer words keep their first this-many bytes.
    pub const MAX_BYTES: usize = 48;

    pub fn ids(word: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(word.len().min(MAX_BYTES) + 2);
        out.push(BOW);
        out.extend(word.bytes().take(MAX_BYTES).map(usize::from));
        out.push(EOW);
        out
    }
}

/// Convolution widths and filter counts, e.g. `1:32,2:32,3:64`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Filters(pub Vec<(usize, usize)>);

impl TryFrom<String> for Filters {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Filters::parse(&s)
    }
}

impl From<Filters> for String {
    fn from(f: Filters) -> String {
        f.to_string()
    }
}

impl Filters {
    pub fn total(&self) -> usize {
        self.0.iter().map(|&(_, n)| n).sum()
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (w, n) = part
                .split_once(':')
                .ok_or_else(|| format!("filter `{part}` is not width:count"))?;
            let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{part}`"))?;
            let n: usize = n.trim().parse().map_err(|_| format!("bad count in `{part}`"))?;
            if w == 0 || n == 0 {
                return Err(format!("filter `{part}` must be positive"));
            }
            out.push((w, n));
        }
        if out.is_empty() {
            return Err("no filters given".into());
        }
        Ok(Filters(out))
    }
}

impl std::fmt::Display for Filters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(w, n)| format!("{w}:{n}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Character CNN: byte embeddings, one convolution per width, max over time
/// and ReLU, concatenated.
#[derive(Debug, Clone)]
pub struct CharCnn {
    pub emb: Embedding,
    pub convs: Vec<(usize, ParamId, ParamId)>,
    pub out_dim: usize,
}

impl CharCnn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        char_dim: usize,
        filters: &Filters,
    ) -> Result<Self> {
        let emb = Embedding::new(store, rng, &format!("{name}.chars"), chars::VOCAB, char_dim)?;
        let mut convs = Vec::new();
        for &(width, count) in &filters.0 {
            let w = store.add(
                format!("{name}.conv{width}.weight"),
                xavier_uniform(rng, width * char_dim, count),
            )?;
            let b = store.add(format!("{name}.conv{width}.bias"), Tensor::zeros(vec![count]))?;
            convs.push((width, w, b));
        }
        Ok(CharCnn {
            emb,
            convs,
            out_dim: filters.total(),
        })
    }

    fn word<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, word: &str) -> Var {
        let x = self.emb.forward(g, store, &chars::ids(word));
        let mut pooled = Vec::with_capacity(self.convs.len());
        for &(width, w, b) in &self.convs {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let c = g.conv1d(x, w, b, width);
            let m = g.max_rows(c);
            pooled.push(g.relu(m));
        }
        g.concat(&pooled)
    }

    /// `[n, out_dim]`, one row per word. Each distinct word is encoded once.
    pub fn forward<T: Scalar, S: AsRef<str>>(&self, g: &mut Graph<T>, store: &ParamStore<T>, words: &[S]) -> Var {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut uniq = Vec::new();
        let mut ids = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            let next = index.len();
            let id = *index.entry(w).or_insert_with(|| {
                uniq.push(w);
                next
            });
            ids.push(id);
        }
        let rows: Vec<Var> = uniq.iter().map(|w| self.word(g, store, w)).collect();
        let table = g.concat_rows(&rows);
        g.gather(table, &ids)
    }
}

/// Single-direction LSTM with gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let input = Linear::new(store, rng, &format!("{name}.input"), in_dim, 4 * hidden, true)?;
        let recurrent = Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 4 * hidden, false)?;
        let b = store.get_mut(input.bias.unwrap());
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Ok(Lstm {
            input,
            recurrent,
            hidden,
        })
    }

    /// `[L, in] -> [L, hidden]`; `reverse` reads right to left.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, reverse: bool) -> Var {
        let len = g.value(x).rows();
        let h_dim = self.hidden;
        let xw = self.input.forward(g, store, x);
        let wh = g.param(store, self.recurrent.weight);
        let mut h = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut c = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut outs = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xt = g.slice_rows(xw, t, 1);
            let hw = g.matmul(h, wh);
            let z = g.add(xt, hw);
            let zi = g.slice_cols(z, 0, h_dim);
            let zf = g.slice_cols(z, h_dim, h_dim);
            let zg = g.slice_cols(z, 2 * h_dim, h_dim);
            let zo = g.slice_cols(z, 3 * h_dim, h_dim);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let ct = g.tanh(c);
            h = g.mul(o, ct);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

/// Stacked bidirectional LSTM; each layer's output concatenates both
/// directions.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
    pub dropout: f64,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            let f = Lstm::new(store, rng, &format!("{name}.{l}.fwd"), d, hidden)?;
            let b = Lstm::new(store, rng, &format!("{name}.{l}.bwd"), d, hidden)?;
            out.push((f, b));
        }
        Ok(BiLstm {
            layers: out,
            dropout,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.layers[0].0.hidden
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for (i, (f, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.dropout(h, self.dropout);
            }
            let hf = f.forward(g, store, h, false);
            let hb = b.forward(g, store, h, true);
            h = g.concat(&[hf, hb]);
        }
        h
    }
}

/// `[n, n]` additive mask: forward rows see columns `<= i`, backward rows
/// see columns `>= i`.
pub fn causal_mask<T: Scalar>(n: usize, direction: Direction) -> Tensor<T> {
    let blocked = T::lit(ATTENTION_MASK);
    Tensor::from_fn(vec![n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let ok = match direction {
            Direction::Forward => j <= i,
            Direction::Backward => j >= i,
        };
        if ok {
            T::zero()
        } else {
            blocked
        }
    })
}

/// Post-norm transformer block: self-attention and a GELU feed-forward
/// network, each followed by a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            q: Linear::new(store, rng, &format!("{name}.attn.q"), d_model, d_model, true)?,
            k: Linear::new(store, rng, &format!("{name}.attn.k"), d_model, d_model, true)?,
            v: Linear::new(store, rng, &format!("{name}.attn.v"), d_model, d_model, true)?,
            o: Linear::new(store, rng, &format!("{name}.attn.o"), d_model, d_model, true)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, ff_dim, true)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff_dim, d_model, true)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            heads,
        })
    }

    /// `x` is `[n, d_model]`, `mask` is `[n, n]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &Tensor<T>,
        dropout: f64,
    ) -> Var {
        let d = g.value(x).cols();
        let hd = d / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            heads.push(g.attention(qh, kh, vh, mask));
        }
        let a = if heads.len() == 1 { heads[0] } else { g.concat(&heads) };
        let a = self.o.forward(g, store, a);
        let a = g.dropout(a, dropout);
        let r = g.add(x, a);
        let x = self.ln1.forward(g, store, r);
        let f = self.ff1.forward(g, store, x);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f);
        let f = g.dropout(f, dropout);
        let r = g.add(x, f);
        self.ln2.forward(g, store, r)
    }
}

/// A stack of transformer blocks over sinusoidal positions; returns every
/// layer's output. Backward stacks number positions from the last row.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub d_model: usize,
}

impl TransformerStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        layers: usize,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, rng, &format!("{name}.{l}"), d_model, heads, ff_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerStack { layers, d_model })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        direction: Direction,
        dropout: f64,
    ) -> Vec<Var> {
        let n = g.value(x).rows();
        let mut pos = msync_autodiff::sinusoidal_positions::<T>(n, self.d_model);
        if direction == Direction::Backward {
            let rows: Vec<T> = (0..n).rev().flat_map(|i| pos.row(i).to_vec()).collect();
            pos = Tensor::matrix(n, self.d_model, rows).expect("position table shape");
        }
        let mut h = g.add_const(x, &pos);
        h = g.dropout(h, dropout);
        let mask = causal_mask::<T>(n, direction);
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(g, store, h, &mask, dropout);
            outs.push(h);
        }
        outs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn char_ids_have_markers() {
        assert_eq!(chars::ids("a"), vec![chars::BOW, 97, chars::EOW]);
        assert_eq!(chars::ids(&"x".repeat(100)).len(), chars::MAX_BYTES + 2);
    }

    #[test]
    fn filters_round_trip() {
        let f = Filters::parse("1:32, 2:32,3:64").unwrap();
        assert_eq!(f.total(), 128);
        assert_eq!(f.to_string(), "1:32,2:32,3:64");
        assert!(Filters::parse("3").is_err());
        assert!(Filters::parse("").is_err());
    }

    #[test]
    fn char_cnn_is_context_free() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cnn = CharCnn::new(&mut store, &mut rng, "c", 8, &Filters(vec![(1, 4), (3, 5)])).unwrap();
        let mut g = Graph::inference();
        let y = cnn.forward(&mut g, &store, &["dog", "a", "dog"]);
        let v = g.value(y);
        assert_eq!(v.shape(), &[3, 9]);
        assert_eq!(v.row(0), v.row(2));
    }

    #[test]
    fn lstm_shapes_and_forget_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bl = BiLstm::new(&mut store, &mut rng, "enc", 3, 4, 2, 0.0).unwrap();
        let b = store.get(store.id("enc.0.fwd.input.bias").unwrap());
        assert_eq!(&b.data()[4..8], &[1.0; 4]);
        assert_eq!(b.data()[0], 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![5, 3], |i| i as f64 * 0.1));
        let y = bl.forward(&mut g, &store, x);
        assert_eq!(g.value(y).shape(), &[5, 8]);
    }

    #[test]
    fn masks() {
        let f = causal_mask::<f32>(3, Direction::Forward);
        assert_eq!(f.row(0), &[0.0, -1e9, -1e9]);
        assert_eq!(f.row(2), &[0.0, 0.0, 0.0]);
        let b = causal_mask::<f32>(3, Direction::Backward);
        assert_eq!(b.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(b.row(2), &[-1e9, -1e9, 0.0]);
    }

    #[test]
    fn transformer_prefix_rows_ignore_suffix() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = TransformerStack::new(&mut store, &mut rng, "t", 2, 8, 2, 16).unwrap();
        let run = |data: Vec<f32>| {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::matrix(4, 8, data).unwrap());
            let outs = stack.forward(&mut g, &store, x, Direction::Forward, 0.0);
            g.value(*outs.last().unwrap()).clone()
        };
        let a: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut b = a.clone();
        for v in &mut b[24..] {
            *v += 3.0;
        }
        let (ya, yb) = (run(a), run(b));
        for r in 0..3 {
            let same = ya.row(r).iter().zip(yb.row(r)).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same, "row {r} changed");
        }
        assert_ne!(ya.row(3), yb.row(3));
    }
}
