//! Interaction layers: question/passage alignment at token and sentence level,
//! followed by a two-layer GCN over a sentence/word graph of the passage.

use crate::config::Ablation;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, Init};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{compute_tfidf, Example};

/// Parameters of `layers` interaction layers; ablated sublayers get none.
pub fn init_interaction<T: Scalar>(
    init: &mut Init<'_, T>,
    layers: usize,
    d: usize,
    ablation: Ablation,
) -> Result<()> {
    for i in 0..layers {
        let p = format!("interaction.{i}");
        if ablation.uses_align() {
            for level in ["tok", "sent"] {
                init.weight(&format!("{p}.{level}.sim.w"), &[4 * d])?;
                init.zeros(&format!("{p}.{level}.sim.b"), &[1])?;
                init.linear(&format!("{p}.{level}.fuse_q"), 3 * d, d)?;
                init.linear(&format!("{p}.{level}.fuse_p"), 3 * d, d)?;
            }
        }
        if ablation.uses_graph() {
            init_gcn(init, &format!("{p}.gcn"), d)?;
        }
    }
    Ok(())
}

pub fn init_gcn<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) -> Result<()> {
    init.linear(&format!("{prefix}.l1"), d, d)?;
    init.linear(&format!("{prefix}.l2"), d, d)?;
    init.layer_norm(&format!("{prefix}.ln"), d)
}

/// `u_ij = w · [q_i, p_j, |q_i − p_j|, q_i ⊙ p_j] + b`, shape `[rows(q) × rows(p)]`.
pub fn similarity<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    p: Var,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.pairwise_similarity(q, p, w, b)
}

/// Attention contexts from a similarity matrix `u: [m × n]`:
/// passage side `softmax_cols(u)ᵀ · q` and question side `softmax_rows(u) · p`.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var, u: Var) -> Result<(Var, Var)> {
    let rows = g.softmax_last_axis(u)?;
    let cols = g.softmax_columns(u)?;
    let cols_t = g.transpose(cols)?;
    let p_ctx = g.matmul(cols_t, q)?;
    let q_ctx = g.matmul(rows, p)?;
    Ok((q_ctx, p_ctx))
}

/// `concat(x, x', x ⊙ x') · W + b`, back to width `d`.
fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    let prod = g.mul(x, ctx)?;
    let cat = g.concat_cols(&[x, ctx, prod])?;
    linear(g, store, prefix, cat)
}

/// One alignment step: similarity, row/column attention, fusion of both sides.
/// `prefix` is e.g. `interaction.0.tok`. Returns `(q_new, p_new)`.
pub fn align<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    p: Var,
) -> Result<(Var, Var)> {
    let (dq, dp) = (g.value(q).cols(), g.value(p).cols());
    if dq != dp {
        return Err(Error::contract(format!(
            "align: question width {dq} vs passage width {dp}"
        )));
    }
    let u = similarity(g, store, &format!("{prefix}.sim"), q, p)?;
    let (q_ctx, p_ctx) = attend(g, q, p, u)?;
    let q_new = fuse(g, store, &format!("{prefix}.fuse_q"), q, q_ctx)?;
    let p_new = fuse(g, store, &format!("{prefix}.fuse_p"), p, p_ctx)?;
    Ok((q_new, p_new))
}

/// Sentence/word graph of one passage. Nodes are the `l_P` sentences followed
/// by the `n` passage token occurrences. Sentence `k` is joined to every
/// occurrence of a word type it contains, weighted by that type's TF-IDF in
/// `k`; every node also carries a unit self-loop.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub sentences: usize,
    pub words: usize,
    /// `A` including self-loops, `[(l_P + n) × (l_P + n)]`.
    pub adjacency: Tensor<f64>,
    /// `D^{-1/2} A D^{-1/2}`.
    pub normalized: Tensor<f64>,
}

impl HeteroGraph {
    pub fn build(example: &Example) -> Result<Self> {
        let tfidf = compute_tfidf(&example.passage)?;
        let l = example.num_sentences();
        let words: Vec<&str> = example
            .passage
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        let size = l + words.len();
        let mut a = Tensor::zeros(&[size, size]);
        let data = a.data_mut();
        for k in 0..l {
            for (j, w) in words.iter().enumerate() {
                let e = tfidf.weight(k, w);
                if e > 0.0 {
                    data[k * size + l + j] = e;
                    data[(l + j) * size + k] = e;
                }
            }
        }
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        let normalized = normalize_adjacency(&a)?;
        Ok(HeteroGraph {
            sentences: l,
            words: words.len(),
            adjacency: a,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences + self.words
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `A`.
pub fn normalize_adjacency<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if r != c || a.shape().len() != 2 {
        return Err(Error::dim("normalize_adjacency", a.shape(), &[r, r]));
    }
    let mut inv_sqrt = Vec::with_capacity(r);
    for i in 0..r {
        let deg: T = a.row(i).iter().copied().sum();
        if !(deg > T::zero()) {
            return Err(Error::Domain {
                op: "normalize_adjacency",
                msg: format!("node {i} has non-positive degree"),
            });
        }
        inv_sqrt.push(T::one() / deg.sqrt());
    }
    let mut out = a.clone();
    let data = out.data_mut();
    for i in 0..r {
        for j in 0..r {
            data[i * r + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(out.with_requires_grad(false))
}

/// `G' = ReLU(Ā·ReLU(Ā·G·W4 + b4)·W5 + b5)`, output `LayerNorm(G + G')`.
pub fn gcn_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    nodes: Var,
    adj: Var,
) -> Result<Var> {
    let x = g.matmul(adj, nodes)?;
    let x = linear(g, store, &format!("{prefix}.l1"), x)?;
    let x = g.relu(x);
    let x = g.matmul(adj, x)?;
    let x = linear(g, store, &format!("{prefix}.l2"), x)?;
    let x = g.relu(x);
    let r = g.add(nodes, x)?;
    layer_norm(g, store, &format!("{prefix}.ln"), r)
}

/// Question/passage states carried between interaction layers.
#[derive(Clone, Copy, Debug)]
pub struct InteractionState {
    pub h_q: Var,
    pub h_p: Var,
    pub s_q: Var,
    pub s_p: Var,
}

impl From<EncoderOutput> for InteractionState {
    fn from(e: EncoderOutput) -> Self {
        InteractionState {
            h_q: e.h_q,
            h_p: e.h_p,
            s_q: e.s_q,
            s_p: e.s_p,
        }
    }
}

/// Passage sentence states after each sublayer: `A1, G1, …, AN, GN`.
#[derive(Clone, Debug, Default)]
pub struct SublayerTrace {
    pub rows: Vec<(String, Var)>,
}

/// Run `layers` interaction layers. Each layer aligns tokens and sentences,
/// then runs the GCN over `[S_P; H_P]` and scatters the result back.
/// Ablations skip alignment or the graph.
pub fn interaction_stack<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    input: InteractionState,
    graph: &HeteroGraph,
    layers: usize,
    ablation: Ablation,
) -> Result<(InteractionState, SublayerTrace)> {
    if layers < 1 {
        return Err(Error::Config(
            "interaction_layers must be at least 1".into(),
        ));
    }
    let mut st = input;
    let mut trace = SublayerTrace::default();
    let adj = if ablation.uses_graph() {
        let t = Tensor::from_f64(graph.normalized.shape().to_vec(), graph.normalized.data())?;
        Some(g.constant(t))
    } else {
        None
    };
    for i in 0..layers {
        let p = format!("interaction.{i}");
        if ablation.uses_align() {
            let (h_q, h_p) = align(g, store, &format!("{p}.tok"), st.h_q, st.h_p)?;
            let (s_q, s_p) = align(g, store, &format!("{p}.sent"), st.s_q, st.s_p)?;
            st = InteractionState { h_q, h_p, s_q, s_p };
        }
        trace.rows.push((format!("A{}", i + 1), st.s_p));
        if let Some(adj) = adj {
            let nodes = g.concat_rows(&[st.s_p, st.h_p])?;
            let out = gcn_block(g, store, &format!("{p}.gcn"), nodes, adj)?;
            st.s_p = g.slice_rows(out, 0, graph.sentences)?;
            st.h_p = g.slice_rows(out, graph.sentences, graph.words)?;
        }
        trace.rows.push((format!("G{}", i + 1), st.s_p));
    }
    Ok((st, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, jitter_params, GradCheckOptions, LN_EPS};
    use crate::text::Span;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    fn store(layers: usize, d: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_interaction(&mut Init::new(&mut s, seed), layers, d, Ablation::None).unwrap();
        s
    }

    fn example() -> Example {
        Example::from_text(
            "g",
            "how to mix paint ?",
            &[
                "Mix red paint.".into(),
                "Stir the paint well.".into(),
                "Rest.".into(),
            ],
            vec![Span::new(0, 0, 2), Span::new(2, 0, 0)],
        )
        .unwrap()
    }

    #[test]
    fn tiny_adjacency_normalizes_to_half() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        assert!(n.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(normalize_adjacency(&Tensor::<f64>::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn distinct_two_by_two_graph_counts() {
        let ex = Example::from_text("c", "q", &["a b".into(), "c d".into()], vec![]).unwrap();
        let hg = HeteroGraph::build(&ex).unwrap();
        assert_eq!(hg.len(), 6);
        let off_diag = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && hg.adjacency.at(i, j) != 0.0)
            .count();
        assert_eq!(off_diag, 8);
    }

    #[test]
    fn shared_word_links_sentences() {
        let ex = example();
        let hg = HeteroGraph::build(&ex).unwrap();
        let l = hg.sentences;
        // "paint" occurs at flat 2 (sentence 0) and 6 (sentence 1); "red" only at 1
        assert!(hg.adjacency.at(0, l + 6) > 0.0);
        assert!(hg.adjacency.at(1, l + 2) > 0.0);
        assert_eq!(hg.adjacency.at(1, l + 1), 0.0);
        assert_eq!(hg.adjacency.at(2, l + 2), 0.0);
        for i in 0..hg.len() {
            for j in 0..hg.len() {
                assert_eq!(hg.normalized.at(i, j), hg.normalized.at(j, i));
                let both_sent = i < l && j < l;
                let both_word = i >= l && j >= l;
                if i != j && (both_sent || both_word) {
                    assert_eq!(hg.adjacency.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_similarity_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(rand_t(&mut rng, 3, 4));
        let p = g.constant(rand_t(&mut rng, 5, 4));
        let u = g.constant(Tensor::full(&[3, 5], 0.7));
        let (q_ctx, p_ctx) = attend(&mut g, q, p, u).unwrap();
        let (qv, pv) = (g.value(q).clone(), g.value(p).clone());
        for c in 0..4 {
            let qmean = (0..3).map(|i| qv.at(i, c)).sum::<f64>() / 3.0;
            let pmean = (0..5).map(|i| pv.at(i, c)).sum::<f64>() / 5.0;
            for j in 0..5 {
                assert!((g.value(p_ctx).at(j, c) - qmean).abs() < 1e-12);
            }
            for i in 0..3 {
                assert!((g.value(q_ctx).at(i, c) - pmean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_question_row_is_copied() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let q = g.constant(rand_t(&mut rng, 1, 4));
        let p = g.constant(rand_t(&mut rng, 6, 4));
        let u = g.constant(rand_t(&mut rng, 1, 6));
        let (_, p_ctx) = attend(&mut g, q, p, u).unwrap();
        for j in 0..6 {
            for (a, b) in g.value(p_ctx).row(j).iter().zip(g.value(q).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_similarity_weight_is_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = store(1, 4, 0);
        s.get_mut("interaction.0.tok.sim.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        s.get_mut("interaction.0.tok.sim.b").unwrap().data_mut()[0] = 0.25;
        let mut g = Graph::new();
        let q = g.constant(rand_t(&mut rng, 2, 4));
        let p = g.constant(rand_t(&mut rng, 3, 4));
        let u = similarity(&mut g, &s, "interaction.0.tok.sim", q, p).unwrap();
        assert!(g.value(u).data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn zero_weight_gcn_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        init_gcn(&mut Init::new(&mut s, 0), "gcn", 4).unwrap();
        for (_, t) in s.iter_mut() {
            if t.shape().len() == 2 {
                t.data_mut().fill(0.0);
            }
        }
        let x = rand_t(&mut rng, 5, 4);
        let mut g = Graph::new();
        let nodes = g.constant(x.clone());
        let adj = g.constant(Tensor::full(&[5, 5], 0.2));
        let out = gcn_block(&mut g, &s, "gcn", nodes, adj).unwrap();
        for i in 0..5 {
            let r = x.row(i);
            let mu = r.iter().sum::<f64>() / 4.0;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let want = (r[c] - mu) / (var + LN_EPS).sqrt();
                assert!((g.value(out).at(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        init_gcn(&mut Init::new(&mut s, 7), "gcn", 3).unwrap();
        let a = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let adj_t = normalize_adjacency(&a).unwrap();
        let x = rand_t(&mut rng, 3, 3);
        let mut y = x.clone();
        y.data_mut()[0..6].iter_mut().for_each(|v| *v += 1.0);
        let mut g = Graph::new();
        let adj = g.constant(adj_t);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let ox = gcn_block(&mut g, &s, "gcn", xv, adj).unwrap();
        let oy = gcn_block(&mut g, &s, "gcn", yv, adj).unwrap();
        assert_eq!(g.value(ox).row(2), g.value(oy).row(2));
    }

    fn run_stack(
        g: &mut Graph<f64>,
        s: &ParamStore<f64>,
        layers: usize,
        ablation: Ablation,
    ) -> Result<(InteractionState, SublayerTrace)> {
        let ex = example();
        let hg = HeteroGraph::build(&ex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = InteractionState {
            h_q: g.constant(rand_t(&mut rng, ex.question.len(), 4)),
            h_p: g.constant(rand_t(&mut rng, ex.num_tokens(), 4)),
            s_q: g.constant(rand_t(&mut rng, 1, 4)),
            s_p: g.constant(rand_t(&mut rng, 3, 4)),
        };
        interaction_stack(g, s, input, &hg, layers, ablation)
    }

    #[test]
    fn stack_shapes_and_trace_rows() {
        let s = store(3, 4, 1);
        for ablation in [Ablation::None, Ablation::NoGraph, Ablation::NoAlign] {
            let mut g = Graph::new();
            let (st, trace) = run_stack(&mut g, &s, 3, ablation).unwrap();
            assert_eq!(g.value(st.h_q).shape(), &[5, 4]);
            assert_eq!(g.value(st.h_p).shape(), &[11, 4]);
            assert_eq!(g.value(st.s_q).shape(), &[1, 4]);
            assert_eq!(g.value(st.s_p).shape(), &[3, 4]);
            let names: Vec<_> = trace.rows.iter().map(|r| r.0.as_str()).collect();
            assert_eq!(names, ["A1", "G1", "A2", "G2", "A3", "G3"]);
            assert_eq!(trace.rows.last().unwrap().1, st.s_p);
        }
        let mut g = Graph::new();
        assert!(matches!(
            run_stack(&mut g, &s, 0, Ablation::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depth_changes_output() {
        let s = store(3, 4, 1);
        let mut g = Graph::new();
        let (one, _) = run_stack(&mut g, &s, 1, Ablation::None).unwrap();
        let (three, _) = run_stack(&mut g, &s, 3, Ablation::None).unwrap();
        assert_ne!(g.value(one.s_p).data(), g.value(three.s_p).data());
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut s = store(2, 4, 2);
        jitter_params(&mut s, 0.05, 1);
        let report = check_gradients(&s, GradCheckOptions::default(), |g, s| {
            let (st, _) = run_stack(g, s, 2, Ablation::None)?;
            let a = g.tanh(st.s_p);
            let a = g.sum(a);
            let b = g.mul(st.h_p, st.h_p)?;
            let b = g.mean(b)?;
            let c = g.sum(st.s_q);
            let d = g.sum(st.h_q);
            let x = g.add(a, b)?;
            let x = g.add(x, c)?;
            g.add(x, d)
        })
        .unwrap();
        assert_eq!(report.entries.len(), s.len());
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }
}
