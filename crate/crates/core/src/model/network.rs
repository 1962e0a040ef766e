use super::{Aggregation, ReferenceModel};
use crate::record::GraphRecord;
use crate::scalar::Scalar;

/// Energy and force predictions for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub energy: T,
    pub forces: Vec<[T; 3]>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    /// Edge weights `1 / (1 + d_ij)`.
    edge_w: Vec<T>,
    /// Displacements `x_src - x_dst` per edge.
    disp: Vec<[T; 3]>,
    in_degree: Vec<usize>,
    /// Node states per layer, `L + 1` blocks of `n x H`.
    h: Vec<Vec<T>>,
    /// Aggregated messages per layer, `L` blocks of `n x H`.
    agg: Vec<Vec<T>>,
    /// Winning edge per (node, feature) for max aggregation.
    argmax: Vec<Vec<u32>>,
    /// Energy-head activations per layer, `n x out`.
    head_act: Vec<Vec<T>>,
    /// `tanh(V(h_i + h_j) + c)` per edge, `E x H`.
    pair_act: Vec<T>,
}

const NO_EDGE: u32 = u32::MAX;

/// `out += W x` with `W` row-major `rows x cols`.
#[inline]
fn matvec_acc<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut s = T::zero();
        for (a, b) in row.iter().zip(x) {
            s += *a * *b;
        }
        *o += s;
    }
}

/// `out += W^T y`.
#[inline]
fn matvec_t_acc<T: Scalar>(w: &[T], y: &[T], out: &mut [T]) {
    let cols = out.len();
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi == T::zero() {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += *a * *yi;
        }
    }
}

/// `g += a b^T`.
#[inline]
fn outer_acc<T: Scalar>(g: &mut [T], a: &[T], b: &[T]) {
    let cols = b.len();
    for (ai, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
        if *ai == T::zero() {
            continue;
        }
        for (gij, bj) in row.iter_mut().zip(b) {
            *gij += *ai * *bj;
        }
    }
}

impl<T: Scalar> ReferenceModel<T> {
    pub fn predict(&self, record: &GraphRecord) -> Prediction<T> {
        self.forward(record).0
    }

    pub fn forward(&self, record: &GraphRecord) -> (Prediction<T>, ForwardCache<T>) {
        let lay = &self.layout;
        let p = &self.params;
        let h = lay.width;
        let n = record.n_atoms();
        let edges = &record.edge_index;

        let mut edge_w = Vec::with_capacity(edges.len());
        let mut disp = Vec::with_capacity(edges.len());
        let mut in_degree = vec![0usize; n];
        for &(s, d) in edges {
            let (xs, xd) = (record.positions[s as usize], record.positions[d as usize]);
            let r = [T::of(xs[0] - xd[0]), T::of(xs[1] - xd[1]), T::of(xs[2] - xd[2])];
            let dist = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            edge_w.push(T::one() / (T::one() + dist));
            disp.push(r);
            in_degree[d as usize] += 1;
        }

        let mut h0 = vec![T::zero(); n * h];
        for (i, &z) in record.atomic_numbers.iter().enumerate() {
            let row = lay.embedding + (z as usize - 1) * h;
            h0[i * h..(i + 1) * h].copy_from_slice(&p[row..row + h]);
        }
        let mut hs = vec![h0];
        let mut aggs = Vec::with_capacity(lay.layers.len());
        let mut argmaxes = Vec::new();
        for &(w_off, u_off, b_off) in &lay.layers {
            let cur = hs.last().unwrap();
            let mut agg = vec![T::zero(); n * h];
            match self.config.mpnn_kind {
                Aggregation::Sum | Aggregation::Mean => {
                    for (e, &(s, d)) in edges.iter().enumerate() {
                        let (s, d) = (s as usize, d as usize);
                        let w = edge_w[e];
                        for k in 0..h {
                            agg[d * h + k] += cur[s * h + k] * w;
                        }
                    }
                    if self.config.mpnn_kind == Aggregation::Mean {
                        for i in 0..n {
                            if in_degree[i] > 0 {
                                let inv = T::one() / T::of_usize(in_degree[i]);
                                for v in &mut agg[i * h..(i + 1) * h] {
                                    *v *= inv;
                                }
                            }
                        }
                    }
                }
                Aggregation::Max => {
                    let mut arg = vec![NO_EDGE; n * h];
                    for (e, &(s, d)) in edges.iter().enumerate() {
                        let (s, d) = (s as usize, d as usize);
                        let w = edge_w[e];
                        for k in 0..h {
                            let m = cur[s * h + k] * w;
                            let slot = d * h + k;
                            if arg[slot] == NO_EDGE || m > agg[slot] {
                                agg[slot] = m;
                                arg[slot] = e as u32;
                            }
                        }
                    }
                    argmaxes.push(arg);
                }
            }
            let mut next = vec![T::zero(); n * h];
            for i in 0..n {
                let out = &mut next[i * h..(i + 1) * h];
                out.copy_from_slice(&p[b_off..b_off + h]);
                matvec_acc(&p[w_off..w_off + h * h], &cur[i * h..(i + 1) * h], out);
                matvec_acc(&p[u_off..u_off + h * h], &agg[i * h..(i + 1) * h], out);
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            aggs.push(agg);
            hs.push(next);
        }
        let h_last = hs.last().unwrap();

        // energy head, applied node-wise and summed
        let mut head_act = Vec::with_capacity(lay.head.len());
        let mut input = h_last.clone();
        let mut in_dim = h;
        for (li, &(w_off, b_off, i_dim, o_dim)) in lay.head.iter().enumerate() {
            debug_assert_eq!(i_dim, in_dim);
            let last = li + 1 == lay.head.len();
            let mut out = vec![T::zero(); n * o_dim];
            for node in 0..n {
                let o = &mut out[node * o_dim..(node + 1) * o_dim];
                o.copy_from_slice(&p[b_off..b_off + o_dim]);
                matvec_acc(&p[w_off..w_off + i_dim * o_dim], &input[node * i_dim..(node + 1) * i_dim], o);
                if !last {
                    for v in o.iter_mut() {
                        *v = v.tanh();
                    }
                }
            }
            head_act.push(out.clone());
            input = out;
            in_dim = o_dim;
        }
        let energy = input.iter().copied().sum::<T>();

        // force head: q_i = V h_i, pair activation tanh(q_i + q_j + c)
        let mut q = vec![T::zero(); n * h];
        for i in 0..n {
            matvec_acc(&p[lay.force_v..lay.force_v + h * h], &h_last[i * h..(i + 1) * h], &mut q[i * h..(i + 1) * h]);
        }
        let c = &p[lay.force_c..lay.force_c + h];
        let u = &p[lay.force_u..lay.force_u + h];
        let mut pair_act = vec![T::zero(); edges.len() * h];
        let mut forces = vec![[T::zero(); 3]; n];
        for (e, &(s, d)) in edges.iter().enumerate() {
            let (s, d) = (s as usize, d as usize);
            let act = &mut pair_act[e * h..(e + 1) * h];
            let mut m = T::zero();
            for k in 0..h {
                let a = (q[d * h + k] + q[s * h + k] + c[k]).tanh();
                act[k] = a;
                m += u[k] * a;
            }
            let r = disp[e];
            for k in 0..3 {
                forces[d][k] += m * r[k];
            }
        }

        (
            Prediction { energy, forces },
            ForwardCache { n, edge_w, disp, in_degree, h: hs, agg: aggs, argmax: argmaxes, head_act, pair_act },
        )
    }

    /// Accumulates into `grad` the parameter gradient of `de * e_pred + sum dF . F_pred`.
    pub fn backward(
        &self,
        record: &GraphRecord,
        cache: &ForwardCache<T>,
        d_energy: T,
        d_forces: &[[T; 3]],
        grad: &mut [T],
    ) {
        let lay = &self.layout;
        let p = &self.params;
        let h = lay.width;
        let n = cache.n;
        let edges = &record.edge_index;
        let h_last = cache.h.last().unwrap();
        let mut dh = vec![T::zero(); n * h];

        // energy head
        let nl = lay.head.len();
        let mut d_out = vec![d_energy; n];
        for li in (0..nl).rev() {
            let (w_off, b_off, i_dim, o_dim) = lay.head[li];
            let input = if li == 0 { h_last } else { &cache.head_act[li - 1] };
            let act = &cache.head_act[li];
            let mut d_in = vec![T::zero(); n * i_dim];
            for node in 0..n {
                let mut dpre: Vec<T> = d_out[node * o_dim..(node + 1) * o_dim].to_vec();
                if li + 1 != nl {
                    for (g, a) in dpre.iter_mut().zip(&act[node * o_dim..(node + 1) * o_dim]) {
                        *g *= T::one() - *a * *a;
                    }
                }
                let x = &input[node * i_dim..(node + 1) * i_dim];
                outer_acc(&mut grad[w_off..w_off + i_dim * o_dim], &dpre, x);
                for (g, d) in grad[b_off..b_off + o_dim].iter_mut().zip(&dpre) {
                    *g += *d;
                }
                matvec_t_acc(&p[w_off..w_off + i_dim * o_dim], &dpre, &mut d_in[node * i_dim..(node + 1) * i_dim]);
            }
            d_out = d_in;
        }
        for (a, b) in dh.iter_mut().zip(&d_out) {
            *a += *b;
        }

        // force head
        let u = &p[lay.force_u..lay.force_u + h];
        let mut dq = vec![T::zero(); n * h];
        let mut dz = vec![T::zero(); h];
        for (e, &(s, d)) in edges.iter().enumerate() {
            let (s, d) = (s as usize, d as usize);
            let r = cache.disp[e];
            let df = d_forces[d];
            let dm = df[0] * r[0] + df[1] * r[1] + df[2] * r[2];
            if dm == T::zero() {
                continue;
            }
            let act = &cache.pair_act[e * h..(e + 1) * h];
            for k in 0..h {
                grad[lay.force_u + k] += dm * act[k];
                dz[k] = dm * u[k] * (T::one() - act[k] * act[k]);
                grad[lay.force_c + k] += dz[k];
                dq[d * h + k] += dz[k];
                dq[s * h + k] += dz[k];
            }
        }
        for i in 0..n {
            let dqi = &dq[i * h..(i + 1) * h];
            outer_acc(&mut grad[lay.force_v..lay.force_v + h * h], dqi, &h_last[i * h..(i + 1) * h]);
            matvec_t_acc(&p[lay.force_v..lay.force_v + h * h], dqi, &mut dh[i * h..(i + 1) * h]);
        }

        // message-passing layers, last to first
        let mut dpre = vec![T::zero(); h];
        for l in (0..lay.layers.len()).rev() {
            let (w_off, u_off, b_off) = lay.layers[l];
            let (h_in, h_out, agg) = (&cache.h[l], &cache.h[l + 1], &cache.agg[l]);
            let mut dh_in = vec![T::zero(); n * h];
            let mut dagg = vec![T::zero(); n * h];
            for i in 0..n {
                for k in 0..h {
                    let a = h_out[i * h + k];
                    dpre[k] = dh[i * h + k] * (T::one() - a * a);
                }
                outer_acc(&mut grad[w_off..w_off + h * h], &dpre, &h_in[i * h..(i + 1) * h]);
                outer_acc(&mut grad[u_off..u_off + h * h], &dpre, &agg[i * h..(i + 1) * h]);
                for k in 0..h {
                    grad[b_off + k] += dpre[k];
                }
                matvec_t_acc(&p[w_off..w_off + h * h], &dpre, &mut dh_in[i * h..(i + 1) * h]);
                matvec_t_acc(&p[u_off..u_off + h * h], &dpre, &mut dagg[i * h..(i + 1) * h]);
            }
            match self.config.mpnn_kind {
                Aggregation::Sum | Aggregation::Mean => {
                    for (e, &(s, d)) in edges.iter().enumerate() {
                        let (s, d) = (s as usize, d as usize);
                        let mut w = cache.edge_w[e];
                        if self.config.mpnn_kind == Aggregation::Mean {
                            w /= T::of_usize(cache.in_degree[d]);
                        }
                        for k in 0..h {
                            dh_in[s * h + k] += dagg[d * h + k] * w;
                        }
                    }
                }
                Aggregation::Max => {
                    let arg = &cache.argmax[l];
                    for slot in 0..n * h {
                        let e = arg[slot];
                        if e != NO_EDGE {
                            let s = edges[e as usize].0 as usize;
                            let k = slot % h;
                            dh_in[s * h + k] += dagg[slot] * cache.edge_w[e as usize];
                        }
                    }
                }
            }
            dh = dh_in;
        }

        for (i, &z) in record.atomic_numbers.iter().enumerate() {
            let row = lay.embedding + (z as usize - 1) * h;
            for k in 0..h {
                grad[row + k] += dh[i * h + k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::preprocess::{generate_synthetic, SyntheticConfig};

    fn tiny(kind: Aggregation) -> ModelConfig {
        ModelConfig {
            mpnn_kind: kind,
            mpnn_layers: 2,
            mpnn_width: 4,
            fc_layers: 3,
            fc_width: 3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn edgeless_graph_has_zero_forces() {
        let mut r = generate_synthetic(&SyntheticConfig { count: 1, ..Default::default() }).unwrap().remove(0);
        r.edge_index.clear();
        for kind in Aggregation::ALL {
            let m = ReferenceModel::<f64>::init(&tiny(kind));
            let pred = m.predict(&r);
            assert!(pred.forces.iter().all(|f| *f == [0.0; 3]));
            assert!(pred.energy.is_finite());
        }
    }

    #[test]
    fn forces_sum_to_zero_and_translation_invariant() {
        let recs = generate_synthetic(&SyntheticConfig { count: 10, seed: 2, ..Default::default() }).unwrap();
        for kind in Aggregation::ALL {
            let m = ReferenceModel::<f64>::init(&tiny(kind));
            for r in &recs {
                let a = m.predict(r);
                for k in 0..3 {
                    let s: f64 = a.forces.iter().map(|f| f[k]).sum();
                    assert!(s.abs() < 1e-9);
                }
                let mut moved = r.clone();
                for p in &mut moved.positions {
                    p[0] += 3.7;
                    p[1] -= 1.1;
                    p[2] += 0.25;
                }
                let b = m.predict(&moved);
                assert!((a.energy - b.energy).abs() < 1e-10);
                for (fa, fb) in a.forces.iter().zip(&b.forces) {
                    for k in 0..3 {
                        assert!((fa[k] - fb[k]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn f32_model_tracks_f64() {
        let r = generate_synthetic(&SyntheticConfig { count: 1, seed: 8, ..Default::default() }).unwrap().remove(0);
        let m64 = ReferenceModel::<f64>::init(&tiny(Aggregation::Sum));
        let m32: ReferenceModel<f32> = m64.cast();
        let (a, b) = (m64.predict(&r), m32.predict(&r));
        assert!((a.energy - b.energy as f64).abs() < 1e-4);
    }
}
