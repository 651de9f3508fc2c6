//! Reverse-mode autodiff over flat f64 tensors.
//!
//! A `Tape` records one forward computation as an arena of nodes; `backward`
//! walks it in reverse and accumulates gradients. Convolutions are lowered to
//! im2col + gemm. Everything is f64 so analytic gradients can be checked
//! against central finite differences at h=1e-4.

use crate::error::{HgdError, Result};

/// Dense tensor: row-major data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        TensorData { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type Id = usize;

type BackFn = Box<dyn Fn(&TensorData, &[&TensorData], &TensorData) -> Vec<TensorData>>;

struct Node {
    value: TensorData,
    parents: Vec<Id>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

/// Row-major gemm: c = a·b (+ beta·c), with optional logical transposes.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<TensorData>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&TensorData> {
        self.grads[id].as_ref()
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let ncols = ho * wo;
    debug_assert_eq!(col.len(), ci * kh * kw * ncols);
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh * kw + ki * kw + kj) * ncols;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let base = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..wo {
                            col[base + ox] = 0.0;
                        }
                        continue;
                    }
                    let src = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        col[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[src + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let ncols = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh * kw + ki * kw + kj) * ncols;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = c * h * w + iy as usize * w;
                    let base = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += col[base + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: Id) -> &TensorData {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorData, parents: Vec<Id>, backward: Option<BackFn>) -> Id {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, parents, backward, needs_grad });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: TensorData, requires_grad: bool) -> Id {
        self.nodes.push(Node { value, parents: vec![], backward: None, needs_grad: requires_grad });
        self.nodes.len() - 1
    }

    /// Copy of a node's value with the gradient path cut.
    pub fn detach(&mut self, id: Id) -> Id {
        let v = self.nodes[id].value.clone();
        self.leaf(v, false)
    }

    fn assert_same_shape(&self, a: Id, b: Id, op: &str) {
        assert_eq!(
            self.nodes[a].value.shape, self.nodes[b].value.shape,
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.assert_same_shape(a, b, "add");
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _p, _o| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        self.assert_same_shape(a, b, "sub");
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _p, _o| {
                let neg = TensorData::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        self.assert_same_shape(a, b, "mul");
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _o| {
                let da = TensorData::new(
                    g.shape.clone(),
                    g.data.iter().zip(&p[1].data).map(|(g, y)| g * y).collect(),
                );
                let db = TensorData::new(
                    g.shape.clone(),
                    g.data.iter().zip(&p[0].data).map(|(g, x)| g * x).collect(),
                );
                vec![da, db]
            })),
        )
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| x * c).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _p, _o| {
                vec![TensorData::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect())]
            })),
        )
    }

    pub fn relu(&mut self, a: Id) -> Id {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Id, slope: f64) -> Id {
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a]
                .value
                .data
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _o| {
                vec![TensorData::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&p[0].data)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { slope * g })
                        .collect(),
                )]
            })),
        )
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = TensorData::new(
            self.nodes[a].value.shape.clone(),
            self.nodes[a].value.data.iter().map(|x| x.tanh()).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _p, o| {
                vec![TensorData::new(
                    g.shape.clone(),
                    g.data.iter().zip(&o.data).map(|(g, y)| g * (1.0 - y * y)).collect(),
                )]
            })),
        )
    }

    /// 2D convolution. Input `[Ci,H,W]`, weight `[Co,Ci,kh,kw]`, bias `[Co]`.
    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        let ws = self.nodes[w].value.shape.clone();
        assert_eq!(xs.len(), 3, "conv2d input must be CHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.nodes[b].value.shape, vec![co]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let ncols = ho * wo;
        let kdim = ci * kh * kw;

        let mut col = vec![0.0; kdim * ncols];
        im2col(&self.nodes[x].value.data, ci, h, wd, kh, kw, stride, pad, &mut col);
        let mut out = vec![0.0; co * ncols];
        gemm(co, kdim, ncols, &self.nodes[w].value.data, false, &col, false, 0.0, &mut out);
        for c in 0..co {
            let bv = self.nodes[b].value.data[c];
            for v in &mut out[c * ncols..(c + 1) * ncols] {
                *v += bv;
            }
        }

        let v = TensorData::new(vec![co, ho, wo], out);
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, p, _o| {
                let x = p[0];
                let w = p[1];
                // recompute im2col rather than keeping it alive on the tape
                let mut col = vec![0.0; kdim * ncols];
                im2col(&x.data, ci, h, wd, kh, kw, stride, pad, &mut col);

                let mut dw = vec![0.0; co * kdim];
                gemm(co, ncols, kdim, &g.data, false, &col, true, 0.0, &mut dw);

                let mut db = vec![0.0; co];
                for c in 0..co {
                    db[c] = g.data[c * ncols..(c + 1) * ncols].iter().sum();
                }

                let mut dcol = vec![0.0; kdim * ncols];
                gemm(kdim, co, ncols, &w.data, true, &g.data, false, 0.0, &mut dcol);
                let mut dx = vec![0.0; ci * h * wd];
                col2im(&dcol, ci, h, wd, kh, kw, stride, pad, &mut dx);

                vec![
                    TensorData::new(vec![ci, h, wd], dx),
                    TensorData::new(vec![co, ci, kh, kw], dw),
                    TensorData::new(vec![co], db),
                ]
            })),
        )
    }

    /// Nearest-neighbor resize of a CHW map to `[C, h2, w2]`.
    pub fn resize_nearest(&mut self, x: Id, h2: usize, w2: usize) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 3, "resize_nearest input must be CHW");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * h2 * w2];
        let xd = &self.nodes[x].value.data;
        for ch in 0..c {
            for y in 0..h2 {
                let sy = y * h / h2;
                for xw in 0..w2 {
                    let sx = xw * w / w2;
                    out[ch * h2 * w2 + y * w2 + xw] = xd[ch * h * w + sy * w + sx];
                }
            }
        }
        self.push(
            TensorData::new(vec![c, h2, w2], out),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        let sy = y * h / h2;
                        for xw in 0..w2 {
                            let sx = xw * w / w2;
                            dx[ch * h * w + sy * w + sx] += g.data[ch * h2 * w2 + y * w2 + xw];
                        }
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx)]
            })),
        )
    }

    /// Per-channel normalization over spatial positions with affine params.
    pub fn instance_norm(&mut self, x: Id, gamma: Id, beta: Id, eps: f64) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 3, "instance_norm input must be CHW");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        assert_eq!(self.nodes[gamma].value.shape, vec![c]);
        assert_eq!(self.nodes[beta].value.shape, vec![c]);
        let xd = &self.nodes[x].value.data;
        let gd = &self.nodes[gamma].value.data;
        let bd = &self.nodes[beta].value.data;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let sl = &xd[ch * hw..(ch + 1) * hw];
            let mean = sl.iter().sum::<f64>() / hw as f64;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(sl) {
                *o = gd[ch] * (v - mean) * inv + bd[ch];
            }
        }
        self.push(
            TensorData::new(xs.clone(), out),
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _o| {
                let xd = &p[0].data;
                let gd = &p[1].data;
                let mut dx = vec![0.0; c * hw];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let sl = &xd[ch * hw..(ch + 1) * hw];
                    let gy = &g.data[ch * hw..(ch + 1) * hw];
                    let mean = sl.iter().sum::<f64>() / hw as f64;
                    let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = sl.iter().map(|&v| (v - mean) * inv).collect();
                    let mean_gy = gy.iter().sum::<f64>() / hw as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    dgamma[ch] = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>();
                    dbeta[ch] = gy.iter().sum::<f64>();
                    for i in 0..hw {
                        dx[ch * hw + i] =
                            gd[ch] * inv * (gy[i] - mean_gy - xhat[i] * mean_gy_xhat);
                    }
                }
                vec![
                    TensorData::new(vec![c, h, w], dx),
                    TensorData::new(vec![c], dgamma),
                    TensorData::new(vec![c], dbeta),
                ]
            })),
        )
    }

    pub fn concat_channels(&mut self, a: Id, b: Id) -> Id {
        let sa = self.nodes[a].value.shape.clone();
        let sb = self.nodes[b].value.shape.clone();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[1..], sb[1..], "concat_channels: spatial dims differ");
        let mut data = self.nodes[a].value.data.clone();
        data.extend_from_slice(&self.nodes[b].value.data);
        let ca = sa[0];
        let na = self.nodes[a].value.numel();
        self.push(
            TensorData::new(vec![ca + sb[0], sa[1], sa[2]], data),
            vec![a, b],
            Some(Box::new(move |g, p, _o| {
                let da = TensorData::new(p[0].shape.clone(), g.data[..na].to_vec());
                let db = TensorData::new(p[1].shape.clone(), g.data[na..].to_vec());
                vec![da, db]
            })),
        )
    }

    /// Broadcast a `[C]` vector over an `[C,H,W]` grid.
    pub fn broadcast_hw(&mut self, v: Id, h: usize, w: usize) -> Id {
        let vs = self.nodes[v].value.shape.clone();
        assert_eq!(vs.len(), 1, "broadcast_hw expects a vector");
        let c = vs[0];
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let val = self.nodes[v].value.data[ch];
            for o in &mut out[ch * hw..(ch + 1) * hw] {
                *o = val;
            }
        }
        self.push(
            TensorData::new(vec![c, h, w], out),
            vec![v],
            Some(Box::new(move |g, _p, _o| {
                let mut dv = vec![0.0; c];
                for ch in 0..c {
                    dv[ch] = g.data[ch * hw..(ch + 1) * hw].iter().sum();
                }
                vec![TensorData::new(vec![c], dv)]
            })),
        )
    }

    pub fn global_avg_pool(&mut self, x: Id) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = self.nodes[x].value.data[ch * hw..(ch + 1) * hw].iter().sum::<f64>()
                / hw as f64;
        }
        self.push(
            TensorData::new(vec![c], out),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    let gv = g.data[ch] / hw as f64;
                    for d in &mut dx[ch * hw..(ch + 1) * hw] {
                        *d = gv;
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx)]
            })),
        )
    }

    /// Fully connected layer on a vector: `y = W x + b`.
    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        let ws = self.nodes[w].value.shape.clone();
        assert_eq!(xs.len(), 1);
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], xs[0], "linear: dim mismatch");
        let (m, n) = (ws[0], ws[1]);
        assert_eq!(self.nodes[b].value.shape, vec![m]);
        let mut out = self.nodes[b].value.data.clone();
        gemm(m, n, 1, &self.nodes[w].value.data, false, &self.nodes[x].value.data, false, 1.0, &mut out);
        self.push(
            TensorData::new(vec![m], out),
            vec![x, w, b],
            Some(Box::new(move |g, p, _o| {
                let mut dx = vec![0.0; n];
                gemm(n, m, 1, &p[1].data, true, &g.data, false, 0.0, &mut dx);
                let mut dw = vec![0.0; m * n];
                gemm(m, 1, n, &g.data, false, &p[0].data, false, 0.0, &mut dw);
                vec![
                    TensorData::new(vec![n], dx),
                    TensorData::new(vec![m, n], dw),
                    TensorData::new(vec![m], g.data.clone()),
                ]
            })),
        )
    }

    /// Reinterpret a CHW map as a pixel matrix `[H*W, C]`.
    pub fn chw_to_pixels(&mut self, x: Id) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let xd = &self.nodes[x].value.data;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = xd[ch * hw + p];
            }
        }
        self.push(
            TensorData::new(vec![hw, c], out),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = g.data[p * c + ch];
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx)]
            })),
        )
    }

    /// Select rows of an `[n, c]` matrix.
    pub fn select_rows(&mut self, x: Id, rows: Vec<usize>) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 2);
        let (n, c) = (xs[0], xs[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            assert!(r < n, "select_rows: row out of range");
            out.extend_from_slice(&self.nodes[x].value.data[r * c..(r + 1) * c]);
        }
        let nr = rows.len();
        self.push(
            TensorData::new(vec![nr, c], out),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                let mut dx = vec![0.0; n * c];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g.data[i * c + j];
                    }
                }
                vec![TensorData::new(vec![n, c], dx)]
            })),
        )
    }

    /// Stack `[n_k, c]` matrices vertically.
    pub fn stack_rows(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0]].value.shape[1];
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            assert_eq!(s.len(), 2);
            assert_eq!(s[1], c, "stack_rows: column mismatch");
            sizes.push(s[0]);
            data.extend_from_slice(&self.nodes[p].value.data);
        }
        let total: usize = sizes.iter().sum();
        self.push(
            TensorData::new(vec![total, c], data),
            parts.to_vec(),
            Some(Box::new(move |g, _p, _o| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &n in &sizes {
                    out.push(TensorData::new(vec![n, c], g.data[off..off + n * c].to_vec()));
                    off += n * c;
                }
                out
            })),
        )
    }

    /// Flatten any tensor into a single-row matrix `[1, numel]`.
    pub fn flatten_row(&mut self, x: Id) -> Id {
        let shape = self.nodes[x].value.shape.clone();
        let n = self.nodes[x].value.numel();
        let v = TensorData::new(vec![1, n], self.nodes[x].value.data.clone());
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                vec![TensorData::new(shape.clone(), g.data.clone())]
            })),
        )
    }

    /// L2-normalize each row of an `[n, c]` matrix.
    pub fn rows_normalize(&mut self, x: Id) -> Id {
        const EPS: f64 = 1e-12;
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 2);
        let (n, c) = (xs[0], xs[1]);
        let xd = &self.nodes[x].value.data;
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xd[r * c..(r + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        self.push(
            TensorData::new(xs.clone(), out),
            vec![x],
            Some(Box::new(move |g, p, o| {
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    let row = &p[0].data[r * c..(r + 1) * c];
                    let y = &o.data[r * c..(r + 1) * c];
                    let gy = &g.data[r * c..(r + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
                    let dot = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>();
                    for j in 0..c {
                        dx[r * c + j] = (gy[j] - y[j] * dot) / norm;
                    }
                }
                vec![TensorData::new(vec![n, c], dx)]
            })),
        )
    }

    /// `a · bᵀ` for row matrices: `[n,c] × [m,c] -> [n,m]`.
    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let sa = self.nodes[a].value.shape.clone();
        let sb = self.nodes[b].value.shape.clone();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1], "matmul_nt: inner dim mismatch");
        let (n, c, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; n * m];
        // out[n,m] = A[n,c] · (B[m,c])^T
        let bt_view = &self.nodes[b].value.data;
        unsafe {
            matrixmultiply::dgemm(
                n,
                c,
                m,
                1.0,
                self.nodes[a].value.data.as_ptr(),
                c as isize,
                1,
                bt_view.as_ptr(),
                1,
                c as isize,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        self.push(
            TensorData::new(vec![n, m], out),
            vec![a, b],
            Some(Box::new(move |g, p, _o| {
                let mut da = vec![0.0; n * c];
                gemm(n, m, c, &g.data, false, &p[1].data, false, 0.0, &mut da);
                let mut db = vec![0.0; m * c];
                gemm(m, n, c, &g.data, true, &p[0].data, false, 0.0, &mut db);
                vec![TensorData::new(vec![n, c], da), TensorData::new(vec![m, c], db)]
            })),
        )
    }

    /// Multiply a CHW map by a constant spatial mask (shared across channels).
    pub fn mul_mask(&mut self, x: Id, mask: Vec<f64>) -> Id {
        let xs = self.nodes[x].value.shape.clone();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        assert_eq!(mask.len(), hw, "mul_mask: mask size mismatch");
        let xd = &self.nodes[x].value.data;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = xd[ch * hw + p] * mask[p];
            }
        }
        self.push(
            TensorData::new(xs.clone(), out),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = g.data[ch * hw + p] * mask[p];
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx)]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Id) -> Id {
        let n = self.nodes[x].value.numel() as f64;
        let shape = self.nodes[x].value.shape.clone();
        let v = self.nodes[x].value.data.iter().sum::<f64>() / n;
        self.push(
            TensorData::scalar(v),
            vec![x],
            Some(Box::new(move |g, _p, _o| {
                vec![TensorData::new(shape.clone(), vec![g.data[0] / n; shape.iter().product()])]
            })),
        )
    }

    /// Elementwise absolute difference reduced to a scalar.
    /// `mean=true` gives the mean, otherwise the sum.
    pub fn l1(&mut self, a: Id, b: Id, mean: bool) -> Id {
        self.assert_same_shape(a, b, "l1");
        let n = self.nodes[a].value.numel();
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let v = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            * scale;
        self.push(
            TensorData::scalar(v),
            vec![a, b],
            Some(Box::new(move |g, p, _o| {
                let gs = g.data[0] * scale;
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..n {
                    let d = p[0].data[i] - p[1].data[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    da[i] = gs * s;
                    db[i] = -gs * s;
                }
                vec![
                    TensorData::new(p[0].shape.clone(), da),
                    TensorData::new(p[1].shape.clone(), db),
                ]
            })),
        )
    }

    /// `mean((x - t)^2)` against a constant target.
    pub fn mse_const(&mut self, x: Id, t: f64) -> Id {
        let n = self.nodes[x].value.numel();
        let v = self.nodes[x].value.data.iter().map(|v| (v - t) * (v - t)).sum::<f64>()
            / n as f64;
        self.push(
            TensorData::scalar(v),
            vec![x],
            Some(Box::new(move |g, p, _o| {
                let gs = g.data[0] * 2.0 / n as f64;
                vec![TensorData::new(
                    p[0].shape.clone(),
                    p[0].data.iter().map(|v| gs * (v - t)).collect(),
                )]
            })),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[(Id, f64)]) -> Id {
        assert!(!terms.is_empty());
        let mut v = 0.0;
        for &(id, w) in terms {
            assert_eq!(self.nodes[id].value.numel(), 1, "add_scalars expects scalars");
            v += w * self.nodes[id].value.data[0];
        }
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        self.push(
            TensorData::scalar(v),
            terms.iter().map(|&(id, _)| id).collect(),
            Some(Box::new(move |g, _p, _o| {
                weights.iter().map(|&w| TensorData::scalar(g.data[0] * w)).collect()
            })),
        )
    }

    /// InfoNCE over a precomputed similarity matrix `[n_anchors, n_pool]`.
    ///
    /// For anchor `n` with positives `(p, w)` and candidate mask `M_n`:
    ///   loss_n = mean over positives of  -w·s[n,p]/τ + log Σ_{j∈M_n} exp(s[n,j]/τ)
    /// and the result is the mean over anchors. Every positive must be inside
    /// the mask; each row needs at least one positive.
    pub fn info_nce(
        &mut self,
        sims: Id,
        positives: Vec<Vec<(usize, f64)>>,
        mask: Vec<Vec<bool>>,
        tau: f64,
    ) -> Result<Id> {
        if tau <= 0.0 {
            return Err(HgdError::Argument(format!("info_nce: tau must be > 0, got {tau}")));
        }
        let ss = self.nodes[sims].value.shape.clone();
        assert_eq!(ss.len(), 2);
        let (n, m) = (ss[0], ss[1]);
        if positives.len() != n || mask.len() != n {
            return Err(HgdError::Argument(
                "info_nce: positives/mask rows must match anchor count".into(),
            ));
        }
        for (r, (pos, msk)) in positives.iter().zip(&mask).enumerate() {
            if pos.is_empty() {
                return Err(HgdError::Argument(format!("info_nce: anchor {r} has no positive")));
            }
            if msk.len() != m {
                return Err(HgdError::Argument("info_nce: mask width mismatch".into()));
            }
            for &(p, _) in pos {
                if p >= m || !msk[p] {
                    return Err(HgdError::Argument(format!(
                        "info_nce: positive {p} of anchor {r} outside the candidate mask"
                    )));
                }
            }
        }

        let sd = &self.nodes[sims].value.data;
        let mut total = 0.0;
        for r in 0..n {
            let row = &sd[r * m..(r + 1) * m];
            let mx = row
                .iter()
                .zip(&mask[r])
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx
                + row
                    .iter()
                    .zip(&mask[r])
                    .filter(|(_, &ok)| ok)
                    .map(|(&v, _)| (v / tau - mx).exp())
                    .sum::<f64>()
                    .ln();
            let k = positives[r].len() as f64;
            let mut term = 0.0;
            for &(p, w) in &positives[r] {
                term += -w * row[p] / tau + lse;
            }
            total += term / k;
        }
        total /= n as f64;

        let id = self.push(
            TensorData::scalar(total),
            vec![sims],
            Some(Box::new(move |g, p, _o| {
                let gs = g.data[0] / n as f64;
                let sd = &p[0].data;
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let row = &sd[r * m..(r + 1) * m];
                    let mx = row
                        .iter()
                        .zip(&mask[r])
                        .filter(|(_, &ok)| ok)
                        .map(|(&v, _)| v / tau)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row
                        .iter()
                        .zip(&mask[r])
                        .filter(|(_, &ok)| ok)
                        .map(|(&v, _)| (v / tau - mx).exp())
                        .sum();
                    let k = positives[r].len() as f64;
                    for j in 0..m {
                        if mask[r][j] {
                            let soft = (row[j] / tau - mx).exp() / denom;
                            // the logsumexp appears once per positive
                            dx[r * m + j] += gs * soft / tau;
                        }
                    }
                    for &(pi, w) in &positives[r] {
                        dx[r * m + pi] -= gs * w / (tau * k);
                    }
                }
                vec![TensorData::new(vec![n, m], dx)]
            })),
        );
        Ok(id)
    }

    /// Reverse sweep from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: Id) -> Gradients {
        assert_eq!(self.nodes[root].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<TensorData>> = vec![None; self.nodes.len()];
        grads[root] = Some(TensorData::scalar(1.0));
        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(back) = &node.backward else { continue };
            let g = grads[id].take().unwrap();
            let parent_vals: Vec<&TensorData> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = back(&g, &parent_vals, &node.value);
            assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                            *a += b;
                        }
                    }
                    None => grads[pid] = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
