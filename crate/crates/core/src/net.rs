//! Fixed-shape tanh multilayer perceptron with hand-written derivatives.
//!
//! Parameters live in one flat vector: for each layer the weight matrix
//! (row-major, `out x in`) followed by the bias. Besides the usual
//! forward/backward pair the network supports forward-mode tangents (JVP) and
//! reverse mode through a JVP, which is what divergence-based and
//! continuous-time consistency objectives need.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    n_params: usize,
}

/// Scratch buffers for one evaluation. Not shared between threads.
#[derive(Debug, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    tans: Vec<Vec<f64>>,
    pre_tans: Vec<Vec<f64>>,
    adj: Vec<f64>,
    adj_tan: Vec<f64>,
    next: Vec<f64>,
    next_tan: Vec<f64>,
}

impl Mlp {
    /// `input -> hidden[0] -> ... -> output`; an empty `hidden` gives an
    /// affine map.
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got input={input} hidden={hidden:?} output={output}"
            )));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut n = 0;
        for w in sizes.windows(2) {
            offsets.push(n);
            n += w[0] * w[1] + w[1];
        }
        Ok(Self { sizes, offsets, n_params: n })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weights<'a>(&self, p: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let s = self.offsets[l];
        (&p[s..s + i * o], &p[s + i * o..s + i * o + o])
    }

    /// Normal weights with variance `1 / fan_in`, zero biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, domain::INIT, 0);
        let mut p = vec![0.0; self.n_params];
        for l in 0..self.layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let s = self.offsets[l];
            let sd = (1.0 / i as f64).sqrt();
            for w in &mut p[s..s + i * o] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = sd * z;
            }
        }
        p
    }

    pub fn workspace(&self) -> Workspace {
        let mk = || self.sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let widest = *self.sizes.iter().max().unwrap();
        Workspace {
            acts: mk(),
            tans: mk(),
            pre_tans: mk(),
            adj: vec![0.0; widest],
            adj_tan: vec![0.0; widest],
            next: vec![0.0; widest],
            next_tan: vec![0.0; widest],
        }
    }

    fn check(&self, p: &[f64], x: &[f64]) {
        assert_eq!(p.len(), self.n_params, "parameter length");
        assert_eq!(x.len(), self.input_dim(), "input length");
    }

    /// Evaluates the network; the output is left in the workspace and
    /// returned.
    pub fn forward<'w>(&self, p: &[f64], x: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        self.check(p, x);
        ws.acts[0].copy_from_slice(x);
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (w, b) = self.weights(p, l);
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let (inp, out) = (&head[l], &mut tail[0]);
            let n_in = inp.len();
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                let z = b[r] + row.iter().zip(inp).map(|(a, c)| a * c).sum::<f64>();
                *o = if l < last { z.tanh() } else { z };
            }
        }
        &ws.acts[self.layers()]
    }

    /// Forward pass carrying the tangent `dx`. Returns `(output, d output)`.
    pub fn jvp<'w>(&self, p: &[f64], x: &[f64], dx: &[f64], ws: &'w mut Workspace) -> (&'w [f64], &'w [f64]) {
        self.check(p, x);
        assert_eq!(dx.len(), x.len(), "tangent length");
        ws.acts[0].copy_from_slice(x);
        ws.tans[0].copy_from_slice(dx);
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (w, b) = self.weights(p, l);
            let n_in = self.sizes[l];
            for r in 0..self.sizes[l + 1] {
                let row = &w[r * n_in..(r + 1) * n_in];
                let mut z = b[r];
                let mut dz = 0.0;
                for ((a, h), t) in row.iter().zip(&ws.acts[l]).zip(&ws.tans[l]) {
                    z += a * h;
                    dz += a * t;
                }
                ws.pre_tans[l + 1][r] = dz;
                if l < last {
                    let h = z.tanh();
                    ws.acts[l + 1][r] = h;
                    ws.tans[l + 1][r] = (1.0 - h * h) * dz;
                } else {
                    ws.acts[l + 1][r] = z;
                    ws.tans[l + 1][r] = dz;
                }
            }
        }
        let n = self.layers();
        (&ws.acts[n], &ws.tans[n])
    }

    /// Reverse pass after [`Mlp::forward`]: accumulates
    /// `d(upstream . output)/d params` into `grad` and, if requested, writes
    /// the input gradient.
    pub fn backward(
        &self,
        p: &[f64],
        ws: &mut Workspace,
        upstream: &[f64],
        grad: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        assert_eq!(grad.len(), self.n_params, "gradient length");
        assert_eq!(upstream.len(), self.output_dim(), "upstream length");
        let last = self.layers() - 1;
        let want_input = grad_input.is_some();
        ws.adj[..upstream.len()].copy_from_slice(upstream);
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l < last {
                for r in 0..n_out {
                    let h = ws.acts[l + 1][r];
                    ws.adj[r] *= 1.0 - h * h;
                }
            }
            let s = self.offsets[l];
            let (gw, gb) = grad[s..s + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let inp = &ws.acts[l];
            for r in 0..n_out {
                let a = ws.adj[r];
                gb[r] += a;
                if a != 0.0 {
                    for (g, h) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(inp) {
                        *g += a * h;
                    }
                }
            }
            if l == 0 && !want_input {
                return;
            }
            let (w, _) = self.weights(p, l);
            ws.next[..n_in].iter_mut().for_each(|v| *v = 0.0);
            for r in 0..n_out {
                let a = ws.adj[r];
                if a != 0.0 {
                    for (v, wv) in ws.next[..n_in].iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                        *v += a * wv;
                    }
                }
            }
            std::mem::swap(&mut ws.adj, &mut ws.next);
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(&ws.adj[..self.input_dim()]);
        }
    }

    /// Reverse pass after [`Mlp::jvp`]: accumulates the parameter gradient of
    /// `up_out . output + up_tan . d output`.
    pub fn backward_jvp(&self, p: &[f64], ws: &mut Workspace, up_out: &[f64], up_tan: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.n_params, "gradient length");
        let n_last = self.output_dim();
        assert!(up_out.len() == n_last && up_tan.len() == n_last, "upstream length");
        let last = self.layers() - 1;
        ws.adj[..n_last].copy_from_slice(up_out);
        ws.adj_tan[..n_last].copy_from_slice(up_tan);
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l < last {
                for r in 0..n_out {
                    let h = ws.acts[l + 1][r];
                    let dh = 1.0 - h * h;
                    let dz = ws.pre_tans[l + 1][r];
                    let (hb, tb) = (ws.adj[r], ws.adj_tan[r]);
                    ws.adj[r] = dh * hb - 2.0 * h * dh * dz * tb;
                    ws.adj_tan[r] = dh * tb;
                }
            }
            let s = self.offsets[l];
            let (gw, gb) = grad[s..s + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for r in 0..n_out {
                let (a, at) = (ws.adj[r], ws.adj_tan[r]);
                gb[r] += a;
                for ((g, h), t) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(&ws.acts[l]).zip(&ws.tans[l]) {
                    *g += a * h + at * t;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weights(p, l);
            ws.next[..n_in].iter_mut().for_each(|v| *v = 0.0);
            ws.next_tan[..n_in].iter_mut().for_each(|v| *v = 0.0);
            for r in 0..n_out {
                let (a, at) = (ws.adj[r], ws.adj_tan[r]);
                let row = &w[r * n_in..(r + 1) * n_in];
                for ((v, vt), wv) in ws.next[..n_in].iter_mut().zip(&mut ws.next_tan[..n_in]).zip(row) {
                    *v += a * wv;
                    *vt += at * wv;
                }
            }
            std::mem::swap(&mut ws.adj, &mut ws.next);
            std::mem::swap(&mut ws.adj_tan, &mut ws.next_tan);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective(mlp: &Mlp, p: &[f64], x: &[f64], u: &[f64]) -> f64 {
        let mut ws = mlp.workspace();
        mlp.forward(p, x, &mut ws).iter().zip(u).map(|(a, b)| a * b).sum()
    }

    fn jvp_objective(mlp: &Mlp, p: &[f64], x: &[f64], dx: &[f64], u: &[f64], ut: &[f64]) -> f64 {
        let mut ws = mlp.workspace();
        let (o, t) = mlp.jvp(p, x, dx, &mut ws);
        o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + t.iter().zip(ut).map(|(a, b)| a * b).sum::<f64>()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn shapes() {
        let m = Mlp::new(5, &[16, 16], 2).unwrap();
        assert_eq!(m.n_params(), 5 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        assert!(Mlp::new(0, &[4], 1).is_err());
        assert!(Mlp::new(2, &[0], 1).is_err());
    }

    #[test]
    fn affine_gradient_is_outer_product() {
        let m = Mlp::new(2, &[], 2).unwrap();
        let p = m.init(1);
        let x = [0.3, -1.2];
        let mut ws = m.workspace();
        m.forward(&p, &x, &mut ws);
        let mut g = vec![0.0; m.n_params()];
        m.backward(&p, &mut ws, &[1.0, 0.0], &mut g, None);
        assert_eq!(&g[..4], &[0.3, -1.2, 0.0, 0.0]);
        assert_eq!(&g[4..], &[1.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = Mlp::new(3, &[8, 8], 2).unwrap();
        let p = m.init(2);
        let mut ws = m.workspace();
        m.forward(&p, &[0.1, 0.2, 0.3], &mut ws);
        let mut g = vec![0.0; m.n_params()];
        m.backward(&p, &mut ws, &[0.0, 0.0], &mut g, None);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..20u64 {
            let m = Mlp::new(2, &[16, 16], 2).unwrap();
            let mut p = m.init(seed);
            // nonzero biases so every term is exercised
            p.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i as f64) * 0.7).sin());
            let x = [0.4 * seed as f64 / 20.0 - 0.1, 0.9];
            let u = [0.7, -1.3];
            let mut ws = m.workspace();
            m.forward(&p, &x, &mut ws);
            let mut g = vec![0.0; m.n_params()];
            let mut gi = vec![0.0; 2];
            m.backward(&p, &mut ws, &u, &mut g, Some(&mut gi));
            for i in (0..m.n_params()).step_by(7) {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[i] += h;
                pm[i] -= h;
                let fd = (objective(&m, &pp, &x, &u) - objective(&m, &pm, &x, &u)) / (2.0 * h);
                assert!(rel_close(g[i], fd, 1e-5) || (g[i] - fd).abs() < 1e-9, "seed {seed} i {i}: {} vs {fd}", g[i]);
            }
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (objective(&m, &p, &xp, &u) - objective(&m, &p, &xm, &u)) / (2.0 * h);
                assert!(rel_close(gi[j], fd, 1e-5));
            }
        }
    }

    #[test]
    fn jvp_matches_finite_difference() {
        let m = Mlp::new(3, &[12, 12], 3).unwrap();
        let p = m.init(5);
        let x = [0.2, -0.5, 0.8];
        let dx = [1.0, 0.5, -0.25];
        let mut ws = m.workspace();
        let (_, t) = m.jvp(&p, &x, &dx, &mut ws);
        let t = t.to_vec();
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - h * b).collect();
        let mut w1 = m.workspace();
        let mut w2 = m.workspace();
        let fp = m.forward(&p, &xp, &mut w1).to_vec();
        let fm = m.forward(&p, &xm, &mut w2).to_vec();
        for k in 0..3 {
            assert!(((fp[k] - fm[k]) / (2.0 * h) - t[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_through_jvp_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..5u64 {
            let m = Mlp::new(3, &[10, 10], 2).unwrap();
            let p = m.init(100 + seed);
            let x = [0.3, -0.7, 0.1];
            let dx = [0.5, 1.0, -2.0];
            let (u, ut) = ([0.4, -0.2], [1.1, 0.6]);
            let mut ws = m.workspace();
            m.jvp(&p, &x, &dx, &mut ws);
            let mut g = vec![0.0; m.n_params()];
            m.backward_jvp(&p, &mut ws, &u, &ut, &mut g);
            for i in 0..m.n_params() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[i] += h;
                pm[i] -= h;
                let fd = (jvp_objective(&m, &pp, &x, &dx, &u, &ut) - jvp_objective(&m, &pm, &x, &dx, &u, &ut)) / (2.0 * h);
                assert!(rel_close(g[i], fd, 1e-5) || (g[i] - fd).abs() < 1e-9, "seed {seed} i {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = Mlp::new(2, &[64, 64], 2).unwrap();
        let p = m.init(9);
        let mut ws = m.workspace();
        let a = m.forward(&p, &[0.1, 0.2], &mut ws).to_vec();
        let b = m.forward(&p, &[0.1, 0.2], &mut ws).to_vec();
        assert_eq!(a, b);
    }
}
