use super::Tensor;

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A·B with A: [m,k], B: [k,n].
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// [m,n] plus a length-n bias broadcast over rows.
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    /// Each row divided by max(‖row‖₂, eps).
    L2NormalizeRows { a: NodeId, eps: f64 },
    SumAll { a: NodeId },
    /// [m,n] → [m], summing each row.
    SumRows { a: NodeId },
    /// out[i][j] = a[i][j] / denom[i] with denom: [m].
    RowDiv { a: NodeId, denom: NodeId },
    /// Elementwise product with a constant vector (no gradient into the weights).
    MulConstVec { a: NodeId, w: Vec<f64> },
    /// Forward identity, backward blocked.
    StopGrad,
    /// Per-sample cross entropy: out[i] = −log softmax(logits[i])[labels[i]].
    CePerSample { logits: NodeId, labels: Vec<usize> },
    /// 2-D convolution, stride 1: x [N,C,H,W] ⊛ w [F,C,KH,KW] with zero padding.
    Conv2d { x: NodeId, w: NodeId, pad: usize },
    /// x [N,F,H,W] plus a per-channel bias of length F.
    AddChannelBias { x: NodeId, bias: NodeId },
    /// 2×2 max pooling, stride 2; argmax recorded as flat input indices.
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { x: NodeId },
    GlobalMaxPool { x: NodeId, argmax: Vec<usize> },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run operation tape.
///
/// Nodes are appended in execution order, so the list is already a
/// topological order and backward is a single reverse sweep. A tape is
/// rebuilt for every forward pass and confined to one thread.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn assert_all_finite(values: &[f64], op: &str) {
    debug_assert!(values.iter().all(|v| v.is_finite()), "{op} produced a non-finite value");
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].values.len(), 1, "node {id} is not a scalar");
        self.nodes[id].values[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(!self.grads.is_empty(), "backward has not run");
        &self.grads[id]
    }

    /// Registers a tensor as a leaf and records the handle in `tensor.node_id`.
    pub fn leaf(&mut self, tensor: &mut Tensor) -> NodeId {
        let id = self.push(
            tensor.values.clone(),
            tensor.shape.clone(),
            Op::Leaf,
            tensor.requires_grad,
        );
        tensor.node_id = Some(id);
        id
    }

    /// Non-differentiable input (data batches, center matrices, graph targets).
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "constant shape/value mismatch");
        self.push(values, shape, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    /// Copies the accumulated gradient back into the tensor's `grad` slot.
    pub fn pull_grad(&self, tensor: &mut Tensor) {
        let id = tensor.node_id.expect("tensor was never registered on this tape");
        tensor.grad = Some(self.grad(id).to_vec());
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { values, shape, op, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id].shape;
        assert_eq!(s.len(), 2, "expected a 2-D node, got shape {:?}", s);
        (s[0], s[1])
    }

    fn dims4(&self, id: NodeId) -> (usize, usize, usize, usize) {
        let s = &self.nodes[id].shape;
        assert_eq!(s.len(), 4, "expected a 4-D node, got shape {:?}", s);
        (s[0], s[1], s[2], s[3])
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        assert_eq!(k, kb, "matmul inner dimensions disagree: {k} vs {kb}");
        let out = matmul_raw(&self.nodes[a].values, &self.nodes[b].values, m, k, n);
        assert_all_finite(&out, "matmul");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], Op::Matmul { a, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "add shape mismatch");
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        assert_all_finite(&out, "add");
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "sub shape mismatch");
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x - y)
            .collect();
        assert_all_finite(&out, "sub");
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "mul shape mismatch");
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        assert_all_finite(&out, "mul");
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Mul { a, b }, needs)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        assert_eq!(self.nodes[bias].values.len(), n, "bias length must match columns");
        let mut out = self.nodes[a].values.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.nodes[bias].values[j];
            }
        }
        assert_all_finite(&out, "add_bias");
        let needs = self.needs(a) || self.needs(bias);
        self.push(out, vec![m, n], Op::AddBias { a, bias }, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x * c).collect();
        assert_all_finite(&out, "scale");
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Scale { a, c }, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x + c).collect();
        assert_all_finite(&out, "add_scalar");
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::AddScalar { a }, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Relu { a }, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.exp()).collect();
        assert_all_finite(&out, "exp");
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Exp { a }, needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .map(|x| {
                assert!(*x > 0.0, "ln requires strictly positive inputs, got {x}");
                x.ln()
            })
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::Ln { a }, needs)
    }

    /// Rows divided by max(‖row‖₂, eps); the eps guard keeps zero rows at zero.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "eps must be positive");
        let (m, n) = self.dims2(a);
        let v = &self.nodes[a].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / denom;
            }
        }
        assert_all_finite(&out, "l2_normalize_rows");
        let needs = self.needs(a);
        self.push(out, vec![m, n], Op::L2NormalizeRows { a, eps }, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].values.iter().sum();
        assert_all_finite(&[s], "sum_all");
        let needs = self.needs(a);
        self.push(vec![s], vec![1], Op::SumAll { a }, needs)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        let v = &self.nodes[a].values;
        let out: Vec<f64> = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        assert_all_finite(&out, "sum_rows");
        let needs = self.needs(a);
        self.push(out, vec![m], Op::SumRows { a }, needs)
    }

    pub fn row_div(&mut self, a: NodeId, denom: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        assert_eq!(self.nodes[denom].values.len(), m, "row_div denominator length mismatch");
        let va = &self.nodes[a].values;
        let vd = &self.nodes[denom].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = va[i * n + j] / vd[i];
            }
        }
        assert_all_finite(&out, "row_div");
        let needs = self.needs(a) || self.needs(denom);
        self.push(out, vec![m, n], Op::RowDiv { a, denom }, needs)
    }

    /// Elementwise product with a constant weight vector of the same length.
    pub fn mul_const_vec(&mut self, a: NodeId, w: &[f64]) -> NodeId {
        assert_eq!(self.nodes[a].values.len(), w.len(), "weight length mismatch");
        let out: Vec<f64> = self.nodes[a].values.iter().zip(w).map(|(x, y)| x * y).collect();
        assert_all_finite(&out, "mul_const_vec");
        let needs = self.needs(a);
        let shape = self.nodes[a].shape.clone();
        self.push(out, shape, Op::MulConstVec { a, w: w.to_vec() }, needs)
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a].values.clone();
        let shape = self.nodes[a].shape.clone();
        self.push(values, shape, Op::StopGrad, false)
    }

    /// out[i] = −log softmax(logits[i])[labels[i]], max-subtracted for stability.
    pub fn ce_per_sample(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (m, k) = self.dims2(logits);
        assert_eq!(labels.len(), m, "one label per row required");
        let v = &self.nodes[logits].values;
        let mut out = vec![0.0; m];
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = &v[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            out[i] = lse - row[y];
        }
        assert_all_finite(&out, "ce_per_sample");
        let needs = self.needs(logits);
        self.push(out, vec![m], Op::CePerSample { logits, labels: labels.to_vec() }, needs)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> NodeId {
        let (n, c, h, wd) = self.dims4(x);
        let (f, cw, kh, kw) = self.dims4(w);
        assert_eq!(c, cw, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let xv = &self.nodes[x].values;
        let wv = &self.nodes[w].values;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * wv[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        assert_all_finite(&out, "conv2d");
        let needs = self.needs(x) || self.needs(w);
        self.push(out, vec![n, f, oh, ow], Op::Conv2d { x, w, pad }, needs)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (n, f, h, w) = self.dims4(x);
        assert_eq!(self.nodes[bias].values.len(), f, "channel bias length mismatch");
        let mut out = self.nodes[x].values.clone();
        for ni in 0..n {
            for fi in 0..f {
                let b = self.nodes[bias].values[fi];
                for i in 0..h * w {
                    out[(ni * f + fi) * h * w + i] += b;
                }
            }
        }
        assert_all_finite(&out, "add_channel_bias");
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, vec![n, f, h, w], Op::AddChannelBias { x, bias }, needs)
    }

    /// 2×2/stride-2 max pooling; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.dims4(x);
        let oh = h / 2;
        let ow = w / 2;
        assert!(oh >= 1 && ow >= 1, "input too small to pool");
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((ni * c + ci) * h + oy * 2 + dy) * w + ox * 2 + dx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, vec![n, c, oh, ow], Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.dims4(x);
        let xv = &self.nodes[x].values;
        let area = (h * w) as f64;
        let out: Vec<f64> = (0..n * c)
            .map(|i| xv[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / area)
            .collect();
        assert_all_finite(&out, "global_avg_pool");
        let needs = self.needs(x);
        self.push(out, vec![n, c], Op::GlobalAvgPool { x }, needs)
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.dims4(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n * c {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for j in 0..h * w {
                let idx = i * h * w + j;
                if xv[idx] > best {
                    best = xv[idx];
                    best_idx = idx;
                }
            }
            out[i] = best;
            argmax[i] = best_idx;
        }
        let needs = self.needs(x);
        self.push(out, vec![n, c], Op::GlobalMaxPool { x, argmax }, needs)
    }

    /// Mean of a 1-D node, as a scalar.
    pub fn mean_vec(&mut self, a: NodeId) -> NodeId {
        let len = self.nodes[a].values.len();
        let total = self.sum_all(a);
        self.scale(total, 1.0 / len as f64)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Backward from a scalar loss with seed 1.
    pub fn backward(&mut self, loss: NodeId) {
        self.backward_seeded(loss, 1.0);
    }

    /// Seeds d(loss)/d(loss) = `seed` and accumulates into every
    /// `requires_grad` leaf. Gradients are re-zeroed on each call, so one
    /// call yields exactly one accumulation per leaf.
    pub fn backward_seeded(&mut self, loss: NodeId, seed: f64) {
        assert_eq!(self.nodes[loss].values.len(), 1, "backward requires a scalar loss");
        self.grads = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![0.0; n.values.len()] } else { Vec::new() })
            .collect();
        if !self.nodes[loss].needs_grad {
            return; // constant loss: every gradient stays zero
        }
        self.grads[loss] = vec![seed];

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[id]);
            self.propagate(id, &g);
            self.grads[id] = g;
        }
    }

    fn add_grad(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if self.nodes[id].needs_grad {
            f(&mut self.grads[id]);
        }
    }

    fn propagate(&mut self, id: NodeId, g: &[f64]) {
        match self.nodes[id].op.clone() {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                if self.nodes[a].needs_grad {
                    // dA = g · Bᵀ
                    let bv = &self.nodes[b].values;
                    let ga = &mut self.grads[a];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                }
                if self.nodes[b].needs_grad {
                    // dB = Aᵀ · g
                    let av = &self.nodes[a].values;
                    let gb = &mut self.grads[b];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.add_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.add_grad(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub { a, b } => {
                self.add_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.add_grad(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let bv = self.nodes[b].values.clone();
                    let ga = &mut self.grads[a];
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b].needs_grad {
                    let av = self.nodes[a].values.clone();
                    let gb = &mut self.grads[b];
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias { a, bias } => {
                let (m, n) = self.dims2(a);
                self.add_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.add_grad(bias, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                self.add_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c));
            }
            Op::AddScalar { a } => {
                self.add_grad(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Relu { a } => {
                // Subgradient at exactly 0 is taken as 0.
                let av = self.nodes[a].values.clone();
                self.add_grad(a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let out = self.nodes[id].values.clone();
                self.add_grad(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Ln { a } => {
                let av = self.nodes[a].values.clone();
                self.add_grad(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::L2NormalizeRows { a, eps } => {
                let (m, n) = self.dims2(a);
                let av = self.nodes[a].values.clone();
                let yv = self.nodes[id].values.clone();
                self.add_grad(a, |ga| {
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let y = &yv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > eps {
                            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                ga[i * n + j] += (gr[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                ga[i * n + j] += gr[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                self.add_grad(a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumRows { a } => {
                let (m, n) = self.dims2(a);
                self.add_grad(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i];
                        }
                    }
                });
            }
            Op::RowDiv { a, denom } => {
                let (m, n) = self.dims2(a);
                let av = self.nodes[a].values.clone();
                let dv = self.nodes[denom].values.clone();
                self.add_grad(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] / dv[i];
                        }
                    }
                });
                self.add_grad(denom, |gd| {
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * av[i * n + j];
                        }
                        gd[i] -= acc / (dv[i] * dv[i]);
                    }
                });
            }
            Op::MulConstVec { a, w } => {
                self.add_grad(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * w[i];
                    }
                });
            }
            Op::CePerSample { logits, labels } => {
                let (_, k) = self.dims2(logits);
                let lv = self.nodes[logits].values.clone();
                self.add_grad(logits, |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &lv[i * k..(i + 1) * k];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - mx).exp() / denom;
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            gl[i * k + j] += g[i] * (p - indicator);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, pad } => {
                let (n, c, h, wd) = self.dims4(x);
                let (f, _, kh, kw) = self.dims4(w);
                let oh = h + 2 * pad - kh + 1;
                let ow = wd + 2 * pad - kw + 1;
                let xv = self.nodes[x].values.clone();
                let wv = self.nodes[w].values.clone();
                let x_needs = self.nodes[x].needs_grad;
                let w_needs = self.nodes[w].needs_grad;
                let mut gx = if x_needs { std::mem::take(&mut self.grads[x]) } else { Vec::new() };
                let mut gw = if w_needs { std::mem::take(&mut self.grads[w]) } else { Vec::new() };
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gval = g[((ni * f + fi) * oh + oy) * ow + ox];
                                if gval == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((ni * c + ci) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                            if x_needs {
                                                gx[xi] += gval * wv[wi];
                                            }
                                            if w_needs {
                                                gw[wi] += gval * xv[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if x_needs {
                    self.grads[x] = gx;
                }
                if w_needs {
                    self.grads[w] = gw;
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (n, f, h, w) = self.dims4(x);
                self.add_grad(x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.add_grad(bias, |gb| {
                    for ni in 0..n {
                        for fi in 0..f {
                            for i in 0..h * w {
                                gb[fi] += g[(ni * f + fi) * h * w + i];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                self.add_grad(x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.dims4(x);
                let area = (h * w) as f64;
                self.add_grad(x, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        for j in 0..(h * w) {
                            gx[i * h * w + j] += gv / area;
                        }
                    }
                });
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Plain row-major matrix product, shared by the forward op and callers
/// that need an untaped product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}
