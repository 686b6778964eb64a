//! Define-by-run computation graph. Each op evaluates eagerly and records a
//! vector-Jacobian closure; `backward` walks the node list in reverse.

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Scalar, Tensor};
use super::AdError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

struct VjpCtx<'a, T> {
    grad: &'a Tensor<T>,
    parents: Vec<&'a Tensor<T>>,
    value: &'a Tensor<T>,
}

type VjpFn<T> = Box<dyn Fn(&VjpCtx<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    vjp: Option<VjpFn<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    // Stable in both tails.
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_val<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative).
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let t = inner.tanh();
    let val = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::from_f64(3.0) * a * x * x);
    let dt = (T::one() - t * t) * dinner;
    let deriv = half * (T::one() + t) + half * x * dt;
    (val, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<NodeId>, vjp: Option<VjpFn<T>>) -> NodeId {
        self.nodes.push(Node { value, parents, vjp });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "scalar_value on non-scalar node");
        t.data[0]
    }

    /// Leaf node. Gradients accumulate into leaves like any other node.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, vec![], None)
    }

    /// Alias of [`Graph::input`] for values that are data, not parameters.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.input(t)
    }

    /// Identity forward; blocks gradient flow structurally.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, vec![], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(AdError::ShapeMismatch { op: "add", lhs: va.shape.clone(), rhs: vb.shape.clone() });
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|ctx: &VjpCtx<T>| vec![ctx.grad.clone(), ctx.grad.clone()])),
        ))
    }

    /// x + tiled(p): p repeats over the leading extent of x.
    /// Covers bias-over-rows (p = [d]) and positional embeddings (p = [T*d]).
    pub fn add_tiled(&mut self, x: NodeId, p: NodeId) -> Result<NodeId, AdError> {
        let (vx, vp) = (self.value(x), self.value(p));
        let m = vp.numel();
        if m == 0 || vx.numel() % m != 0 {
            return Err(AdError::ShapeMismatch {
                op: "add_tiled",
                lhs: vx.shape.clone(),
                rhs: vp.shape.clone(),
            });
        }
        let mut data = vx.data.clone();
        for chunk in data.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(&vp.data) {
                *o = *o + b;
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data };
        Ok(self.push(
            out,
            vec![x, p],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut gp = Tensor::zeros(ctx.parents[1].shape.clone());
                for chunk in ctx.grad.data.chunks(m) {
                    for (o, &g) in gp.data.iter_mut().zip(chunk) {
                        *o = *o + g;
                    }
                }
                vec![ctx.grad.clone(), gp]
            })),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(AdError::ShapeMismatch { op: "mul", lhs: va.shape.clone(), rhs: vb.shape.clone() });
        }
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![
                    ctx.grad.zip_map(ctx.parents[1], |g, y| g * y),
                    ctx.grad.zip_map(ctx.parents[0], |g, x| g * x),
                ]
            })),
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| v * cv);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| vec![ctx.grad.map(|g| g * cv)])),
        )
    }

    /// Multiply every element of x by a scalar-valued node (numel 1).
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(AdError::BadShape { op: "mul_scalar_node", expected: "scalar".into(), got: vs.shape.clone() });
        }
        let sv = vs.data[0];
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(
            out,
            vec![x, s],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let gx = ctx.grad.map(|g| g * sv);
                let gs: T = ctx.grad.data.iter().zip(&ctx.parents[0].data).map(|(&g, &x)| g * x).sum();
                vec![gx, Tensor::scalar(gs)]
            })),
        ))
    }

    /// Add a scalar-valued node (numel 1) to every element of x.
    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(AdError::BadShape { op: "add_scalar_node", expected: "scalar".into(), got: vs.shape.clone() });
        }
        let sv = vs.data[0];
        let out = self.value(x).map(|v| v + sv);
        Ok(self.push(
            out,
            vec![x, s],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                let gs: T = ctx.grad.data.iter().copied().sum();
                vec![ctx.grad.clone(), Tensor::scalar(gs)]
            })),
        ))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.exp());
        self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| vec![ctx.grad.zip_map(ctx.value, |g, y| g * y)])),
        )
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.ln());
        self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![ctx.grad.zip_map(ctx.parents[0], |g, x| g / x)]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid_val);
        self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![ctx.grad.zip_map(ctx.value, |g, y| g * y * (T::one() - y))]
            })),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![ctx.grad.zip_map(ctx.parents[0], |g, x| if x > T::zero() { g } else { T::zero() })]
            })),
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| gelu_val(v).0);
        self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![ctx.grad.zip_map(ctx.parents[0], |g, x| g * gelu_val(x).1)]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        let l = *vx.shape.last().ok_or(AdError::BadShape {
            op: "softmax_last",
            expected: "rank >= 1".into(),
            got: vx.shape.clone(),
        })?;
        let mut data = vec![T::zero(); vx.numel()];
        for (row_out, row_in) in data.chunks_mut(l).zip(vx.data.chunks(l)) {
            softmax_row(row_in, row_out);
        }
        let out = Tensor { shape: vx.shape.clone(), data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut gx = vec![T::zero(); ctx.value.numel()];
                for ((gx_row, y_row), g_row) in
                    gx.chunks_mut(l).zip(ctx.value.data.chunks(l)).zip(ctx.grad.data.chunks(l))
                {
                    let dot: T = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                    for ((o, &y), &g) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = y * (g - dot);
                    }
                }
                vec![Tensor { shape: ctx.value.shape.clone(), data: gx }]
            })),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        let eps = T::from_f64(1e-5);
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *vx.shape.last().unwrap_or(&0);
        if vg.numel() != d || vb.numel() != d || d == 0 {
            return Err(AdError::ShapeMismatch { op: "layer_norm", lhs: vx.shape.clone(), rhs: vg.shape.clone() });
        }
        let mut data = vec![T::zero(); vx.numel()];
        let dn = T::from_f64(d as f64);
        for (row_out, row_in) in data.chunks_mut(d).zip(vx.data.chunks(d)) {
            let mean: T = row_in.iter().copied().sum::<T>() / dn;
            let var: T = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            for ((o, &v), (&g, &b)) in row_out.iter_mut().zip(row_in).zip(vg.data.iter().zip(&vb.data)) {
                *o = (v - mean) * inv * g + b;
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data };
        Ok(self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let vx = ctx.parents[0];
                let vg = ctx.parents[1];
                let mut gx = vec![T::zero(); vx.numel()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let dn = T::from_f64(d as f64);
                for (row_idx, (row_in, g_row)) in vx.data.chunks(d).zip(ctx.grad.data.chunks(d)).enumerate() {
                    let mean: T = row_in.iter().copied().sum::<T>() / dn;
                    let var: T = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                    let inv = T::one() / (var + eps).sqrt();
                    let xhat: Vec<T> = row_in.iter().map(|&v| (v - mean) * inv).collect();
                    // dL/dxhat = g * gain
                    let dxhat: Vec<T> = g_row.iter().zip(&vg.data).map(|(&g, &gn)| g * gn).collect();
                    let mean_dxhat: T = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dxhat_xhat: T =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    let gx_row = &mut gx[row_idx * d..(row_idx + 1) * d];
                    for i in 0..d {
                        gx_row[i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                        gg[i] = gg[i] + g_row[i] * xhat[i];
                        gb[i] = gb[i] + g_row[i];
                    }
                }
                vec![
                    Tensor { shape: vx.shape.clone(), data: gx },
                    Tensor { shape: vec![d], data: gg },
                    Tensor { shape: vec![d], data: gb },
                ]
            })),
        ))
    }

    /// Mean over axis 1 of a rank-3 tensor [b, t, d] -> [b, d].
    pub fn mean_axis1(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(AdError::BadShape { op: "mean_axis1", expected: "rank 3".into(), got: vx.shape.clone() });
        }
        let (b, t, d) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let tn = T::from_f64(t as f64);
        let mut data = vec![T::zero(); b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &vx.data[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let o = &mut data[bi * d..(bi + 1) * d];
                for (u, &v) in o.iter_mut().zip(row) {
                    *u = *u + v;
                }
            }
        }
        for v in &mut data {
            *v = *v / tn;
        }
        let out = Tensor { shape: vec![b, d], data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut gx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    let g_row = &ctx.grad.data[bi * d..(bi + 1) * d];
                    for ti in 0..t {
                        let o = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        for (u, &g) in o.iter_mut().zip(g_row) {
                            *u = g / tn;
                        }
                    }
                }
                vec![Tensor { shape: vec![b, t, d], data: gx }]
            })),
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = T::from_f64(vx.numel() as f64);
        let s: T = vx.data.iter().copied().sum();
        let out = Tensor::scalar(s / n);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let g = ctx.grad.data[0] / n;
                vec![Tensor { shape: ctx.parents[0].shape.clone(), data: vec![g; ctx.parents[0].numel()] }]
            })),
        )
    }

    pub fn concat_axis0(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape.clone();
        let tail: Vec<usize> = first[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0usize;
        let mut sizes = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape[1..] != tail[..] {
                return Err(AdError::ShapeMismatch { op: "concat_axis0", lhs: first, rhs: v.shape.clone() });
            }
            rows += v.shape[0];
            sizes.push(v.numel());
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor { shape, data };
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut grads = Vec::new();
                let mut off = 0;
                for (pi, &sz) in sizes.iter().enumerate() {
                    grads.push(Tensor {
                        shape: ctx.parents[pi].shape.clone(),
                        data: ctx.grad.data[off..off + sz].to_vec(),
                    });
                    off += sz;
                }
                grads
            })),
        ))
    }

    /// Stack k tensors of shape [n, d] into [n, k, d].
    pub fn stack_axis1(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape.clone();
        if first.len() != 2 {
            return Err(AdError::BadShape { op: "stack_axis1", expected: "rank 2".into(), got: first });
        }
        let (n, d) = (first[0], first[1]);
        let k = parts.len();
        for &p in parts {
            let v = self.value(p);
            if v.shape != [n, d] {
                return Err(AdError::ShapeMismatch { op: "stack_axis1", lhs: first, rhs: v.shape.clone() });
            }
        }
        let mut data = vec![T::zero(); n * k * d];
        for (ki, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for i in 0..n {
                data[(i * k + ki) * d..(i * k + ki + 1) * d].copy_from_slice(&v.data[i * d..(i + 1) * d]);
            }
        }
        let out = Tensor { shape: vec![n, k, d], data };
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                (0..k)
                    .map(|ki| {
                        let mut g = vec![T::zero(); n * d];
                        for i in 0..n {
                            g[i * d..(i + 1) * d]
                                .copy_from_slice(&ctx.grad.data[(i * k + ki) * d..(i * k + ki + 1) * d]);
                        }
                        Tensor { shape: vec![n, d], data: g }
                    })
                    .collect()
            })),
        ))
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, AdError> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(AdError::BadShape { op: "gather_rows", expected: "rank 2".into(), got: vt.shape.clone() });
        }
        let (rows, d) = (vt.shape[0], vt.shape[1]);
        for &i in indices {
            if i >= rows {
                return Err(AdError::IndexOutOfBounds { index: i, rows });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data[i * d..(i + 1) * d]);
        }
        let out = Tensor { shape: vec![indices.len(), d], data };
        let idx: Vec<usize> = indices.to_vec();
        Ok(self.push(
            out,
            vec![table],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut g = vec![T::zero(); rows * d];
                for (pos, &i) in idx.iter().enumerate() {
                    let src = &ctx.grad.data[pos * d..(pos + 1) * d];
                    let dst = &mut g[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                vec![Tensor { shape: vec![rows, d], data: g }]
            })),
        ))
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(AdError::ShapeMismatch { op: "matmul", lhs: va.shape.clone(), rhs: vb.shape.clone() });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let out = Tensor { shape: vec![m, n], data: matmul_nn(&va.data, &vb.data, m, k, n) };
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                // dA[m,k] = g[m,n] * B^T; dB[k,n] = A^T * g
                let ga = matmul_nt(&ctx.grad.data, &ctx.parents[1].data, m, n, k);
                let gb = matmul_tn(&ctx.parents[0].data, &ctx.grad.data, m, k, n);
                vec![
                    Tensor { shape: vec![m, k], data: ga },
                    Tensor { shape: vec![k, n], data: gb },
                ]
            })),
        ))
    }

    /// [m,k] x [n,k]^T -> [m,n] (row-major both; computes a . b^T)
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[1] {
            return Err(AdError::ShapeMismatch { op: "matmul_nt", lhs: va.shape.clone(), rhs: vb.shape.clone() });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
        let out = Tensor { shape: vec![m, n], data: matmul_nt(&va.data, &vb.data, m, k, n) };
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                // dA[m,k] = g[m,n] * B[n,k]; dB[n,k] = g^T[n,m] * A[m,k]
                let ga = matmul_nn(&ctx.grad.data, &ctx.parents[1].data, m, n, k);
                let gb = matmul_tn(&ctx.grad.data, &ctx.parents[0].data, m, n, k);
                vec![
                    Tensor { shape: vec![m, k], data: ga },
                    Tensor { shape: vec![n, k], data: gb },
                ]
            })),
        ))
    }

    /// [m,n] -> [n,m]
    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(AdError::BadShape { op: "transpose2", expected: "rank 2".into(), got: vx.shape.clone() });
        }
        let (m, n) = (vx.shape[0], vx.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = vx.data[i * n + j];
            }
        }
        let out = Tensor { shape: vec![n, m], data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut g = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = ctx.grad.data[j * m + i];
                    }
                }
                vec![Tensor { shape: vec![m, n], data: g }]
            })),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(AdError::BadShape {
                op: "reshape",
                expected: format!("numel {}", vx.numel()),
                got: shape,
            });
        }
        let out = Tensor { shape: shape.clone(), data: vx.data.clone() };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(|ctx: &VjpCtx<T>| {
                vec![Tensor { shape: ctx.parents[0].shape.clone(), data: ctx.grad.data.clone() }]
            })),
        ))
    }

    /// [b, t, h*dh] -> [b, h, t, dh]
    pub fn split_heads(&mut self, x: NodeId, h: usize) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if vx.rank() != 3 || vx.shape[2] % h != 0 {
            return Err(AdError::BadShape {
                op: "split_heads",
                expected: format!("rank 3 with last dim divisible by {h}"),
                got: vx.shape.clone(),
            });
        }
        let (b, t, d) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let dh = d / h;
        let mut data = vec![T::zero(); vx.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let src = &vx.data[(bi * t + ti) * d + hi * dh..(bi * t + ti) * d + (hi + 1) * dh];
                    let dst_base = ((bi * h + hi) * t + ti) * dh;
                    data[dst_base..dst_base + dh].copy_from_slice(src);
                }
            }
        }
        let out = Tensor { shape: vec![b, h, t, dh], data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut g = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            let src_base = ((bi * h + hi) * t + ti) * dh;
                            let dst = &mut g[(bi * t + ti) * d + hi * dh..(bi * t + ti) * d + (hi + 1) * dh];
                            dst.copy_from_slice(&ctx.grad.data[src_base..src_base + dh]);
                        }
                    }
                }
                vec![Tensor { shape: vec![b, t, d], data: g }]
            })),
        ))
    }

    /// [b, h, t, dh] -> [b, t, h*dh]
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(AdError::BadShape { op: "merge_heads", expected: "rank 4".into(), got: vx.shape.clone() });
        }
        let (b, h, t, dh) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let d = h * dh;
        let mut data = vec![T::zero(); vx.numel()];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let src_base = ((bi * h + hi) * t + ti) * dh;
                    let dst = &mut data[(bi * t + ti) * d + hi * dh..(bi * t + ti) * d + (hi + 1) * dh];
                    dst.copy_from_slice(&vx.data[src_base..src_base + dh]);
                }
            }
        }
        let out = Tensor { shape: vec![b, t, d], data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut g = vec![T::zero(); b * h * t * dh];
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            let dst_base = ((bi * h + hi) * t + ti) * dh;
                            g[dst_base..dst_base + dh].copy_from_slice(
                                &ctx.grad.data[(bi * t + ti) * d + hi * dh..(bi * t + ti) * d + (hi + 1) * dh],
                            );
                        }
                    }
                }
                vec![Tensor { shape: vec![b, h, t, dh], data: g }]
            })),
        ))
    }

    /// Scaled dot-product attention. q: [b,h,tq,dh], k/v: [b,h,tk,dh].
    /// Attention weights are recomputed in the backward pass.
    pub fn sdpa(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rank() != 4 || vk.rank() != 4 || vv.rank() != 4 {
            return Err(AdError::BadShape { op: "sdpa", expected: "rank 4".into(), got: vq.shape.clone() });
        }
        if vk.shape != vv.shape || vq.shape[0] != vk.shape[0] || vq.shape[1] != vk.shape[1] || vq.shape[3] != vk.shape[3]
        {
            return Err(AdError::ShapeMismatch { op: "sdpa", lhs: vq.shape.clone(), rhs: vk.shape.clone() });
        }
        let (b, h, tq, dh) = (vq.shape[0], vq.shape[1], vq.shape[2], vq.shape[3]);
        let tk = vk.shape[2];
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); b * h * tq * dh];
        for bh in 0..b * h {
            let qs = &vq.data[bh * tq * dh..(bh + 1) * tq * dh];
            let ks = &vk.data[bh * tk * dh..(bh + 1) * tk * dh];
            let vs = &vv.data[bh * tk * dh..(bh + 1) * tk * dh];
            let mut scores = matmul_nt(qs, ks, tq, dh, tk);
            for s in &mut scores {
                *s = *s * scale;
            }
            let mut attn = vec![T::zero(); tq * tk];
            for (a_row, s_row) in attn.chunks_mut(tk).zip(scores.chunks(tk)) {
                softmax_row(s_row, a_row);
            }
            let o = matmul_nn(&attn, vs, tq, tk, dh);
            out[bh * tq * dh..(bh + 1) * tq * dh].copy_from_slice(&o);
        }
        let out = Tensor { shape: vec![b, h, tq, dh], data: out };
        Ok(self.push(
            out,
            vec![q, k, v],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let (vq, vk, vv) = (ctx.parents[0], ctx.parents[1], ctx.parents[2]);
                let mut gq = vec![T::zero(); vq.numel()];
                let mut gk = vec![T::zero(); vk.numel()];
                let mut gv = vec![T::zero(); vv.numel()];
                for bh in 0..b * h {
                    let qs = &vq.data[bh * tq * dh..(bh + 1) * tq * dh];
                    let ks = &vk.data[bh * tk * dh..(bh + 1) * tk * dh];
                    let vs = &vv.data[bh * tk * dh..(bh + 1) * tk * dh];
                    let go = &ctx.grad.data[bh * tq * dh..(bh + 1) * tq * dh];
                    let mut scores = matmul_nt(qs, ks, tq, dh, tk);
                    for s in &mut scores {
                        *s = *s * scale;
                    }
                    let mut attn = vec![T::zero(); tq * tk];
                    for (a_row, s_row) in attn.chunks_mut(tk).zip(scores.chunks(tk)) {
                        softmax_row(s_row, a_row);
                    }
                    // dV = A^T * gO
                    let dv = matmul_tn(&attn, go, tq, tk, dh);
                    // dA = gO * V^T
                    let da = matmul_nt(go, vs, tq, dh, tk);
                    // dS = A o (dA - rowsum(dA o A))
                    let mut ds = vec![T::zero(); tq * tk];
                    for ((ds_row, a_row), da_row) in ds.chunks_mut(tk).zip(attn.chunks(tk)).zip(da.chunks(tk)) {
                        let dot: T = a_row.iter().zip(da_row).map(|(&a, &d)| a * d).sum();
                        for ((o, &a), &d) in ds_row.iter_mut().zip(a_row).zip(da_row) {
                            *o = a * (d - dot) * scale;
                        }
                    }
                    // dQ = dS * K ; dK = dS^T * Q
                    let dq = matmul_nn(&ds, ks, tq, tk, dh);
                    let dk = matmul_tn(&ds, qs, tq, tk, dh);
                    gq[bh * tq * dh..(bh + 1) * tq * dh].copy_from_slice(&dq);
                    for (o, v) in gk[bh * tk * dh..(bh + 1) * tk * dh].iter_mut().zip(dk) {
                        *o = v;
                    }
                    for (o, v) in gv[bh * tk * dh..(bh + 1) * tk * dh].iter_mut().zip(dv) {
                        *o = v;
                    }
                }
                vec![
                    Tensor { shape: vq.shape.clone(), data: gq },
                    Tensor { shape: vk.shape.clone(), data: gk },
                    Tensor { shape: vv.shape.clone(), data: gv },
                ]
            })),
        ))
    }

    /// Normalize each row of [n, d] to unit L2 norm.
    pub fn l2norm_rows(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let eps = T::from_f64(1e-12);
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(AdError::BadShape { op: "l2norm_rows", expected: "rank 2".into(), got: vx.shape.clone() });
        }
        let d = vx.shape[1];
        let mut data = vec![T::zero(); vx.numel()];
        for (o_row, x_row) in data.chunks_mut(d).zip(vx.data.chunks(d)) {
            let n = (x_row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for (o, &v) in o_row.iter_mut().zip(x_row) {
                *o = v / n;
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let vx = ctx.parents[0];
                let mut gx = vec![T::zero(); vx.numel()];
                for ((gx_row, x_row), (y_row, g_row)) in gx
                    .chunks_mut(d)
                    .zip(vx.data.chunks(d))
                    .zip(ctx.value.data.chunks(d).zip(ctx.grad.data.chunks(d)))
                {
                    let n = (x_row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                    let dot: T = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                    for ((o, &y), &g) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = (g - y * dot) / n;
                    }
                }
                vec![Tensor { shape: vx.shape.clone(), data: gx }]
            })),
        ))
    }

    /// Mean over rows of -sum_l targets * log softmax(logits).
    /// Targets are a fixed distribution per row (soft or one-hot).
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId, AdError> {
        let vx = self.value(logits);
        if vx.shape != targets.shape || vx.rank() != 2 {
            return Err(AdError::ShapeMismatch {
                op: "softmax_xent",
                lhs: vx.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let (n, l) = (vx.shape[0], vx.shape[1]);
        let nn = T::from_f64(n as f64);
        let mut loss = T::zero();
        for (x_row, t_row) in vx.data.chunks(l).zip(targets.data.chunks(l)) {
            let mx = x_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + x_row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for (&x, &t) in x_row.iter().zip(t_row) {
                if t != T::zero() {
                    loss = loss + t * (lse - x);
                }
            }
        }
        let out = Tensor::scalar(loss / nn);
        let tgt = targets.clone();
        Ok(self.push(
            out,
            vec![logits],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let vx = ctx.parents[0];
                let g = ctx.grad.data[0];
                let mut gx = vec![T::zero(); vx.numel()];
                for ((gx_row, x_row), t_row) in gx.chunks_mut(l).zip(vx.data.chunks(l)).zip(tgt.data.chunks(l)) {
                    let mut p = vec![T::zero(); l];
                    softmax_row(x_row, &mut p);
                    for ((o, &pv), &tv) in gx_row.iter_mut().zip(&p).zip(t_row) {
                        *o = g * (pv - tv) / nn;
                    }
                }
                vec![Tensor { shape: vx.shape.clone(), data: gx }]
            })),
        ))
    }

    /// Mean binary cross-entropy with logits against fixed targets, in the
    /// softplus-stable form max(x,0) - x*t + log(1 + exp(-|x|)).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId, AdError> {
        let vx = self.value(logits);
        if vx.shape != targets.shape {
            return Err(AdError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vx.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let n = T::from_f64(vx.numel() as f64);
        let mut loss = T::zero();
        for (&x, &t) in vx.data.iter().zip(&targets.data) {
            let pos = if x > T::zero() { x } else { T::zero() };
            loss = loss + pos - x * t + ((-x.abs()).exp() + T::one()).ln();
        }
        let out = Tensor::scalar(loss / n);
        let tgt = targets.clone();
        Ok(self.push(
            out,
            vec![logits],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let vx = ctx.parents[0];
                let g = ctx.grad.data[0];
                let gx: Vec<T> = vx
                    .data
                    .iter()
                    .zip(&tgt.data)
                    .map(|(&x, &t)| g * (sigmoid_val(x) - t) / n)
                    .collect();
                vec![Tensor { shape: vx.shape.clone(), data: gx }]
            })),
        ))
    }

    /// Repeat each row of [g, m] `r` times contiguously -> [g*r, m].
    pub fn repeat_rows(&mut self, x: NodeId, r: usize) -> Result<NodeId, AdError> {
        let vx = self.value(x);
        if vx.rank() < 1 {
            return Err(AdError::BadShape { op: "repeat_rows", expected: "rank >= 1".into(), got: vx.shape.clone() });
        }
        let g = vx.shape[0];
        let m = vx.numel() / g;
        let mut data = Vec::with_capacity(g * r * m);
        for gi in 0..g {
            for _ in 0..r {
                data.extend_from_slice(&vx.data[gi * m..(gi + 1) * m]);
            }
        }
        let mut shape = vx.shape.clone();
        shape[0] = g * r;
        let out = Tensor { shape, data };
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &VjpCtx<T>| {
                let mut gx = vec![T::zero(); g * m];
                for gi in 0..g {
                    for ri in 0..r {
                        let src = &ctx.grad.data[(gi * r + ri) * m..(gi * r + ri + 1) * m];
                        let dst = &mut gx[gi * m..(gi + 1) * m];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                vec![Tensor { shape: ctx.parents[0].shape.clone(), data: gx }]
            })),
        ))
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(vjp) = &node.vjp else { continue };
            let Some(grad) = grads[idx].clone() else { continue };
            let ctx = VjpCtx {
                grad: &grad,
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                value: &node.value,
            };
            let parent_grads = vjp(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        // All -inf: define as uniform to avoid NaN.
        let u = T::one() / T::from_f64(x.len() as f64);
        for o in out.iter_mut() {
            *o = u;
        }
        return;
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}
