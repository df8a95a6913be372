//! Selective state-space scan.
//!
//! Recurrence per head: `S_t = a_t · S_{t−1} + x_t ⊗ b_t`, `y_t = S_t c_t`
//! with `S` a `head_dim × state_dim` matrix, `a_t` a per-head scalar decay
//! and `b_t`, `c_t` shared within parameter groups. Two implementations:
//! the naive recurrence (the oracle) and a chunked scan that splits the
//! sequence into blocks, combining an intra-block quadratic form with a
//! carried inter-block state.

/// Minimal float abstraction so equivalence can be checked at f32 and f64.
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Shape bundle for a scan call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    /// `b`/`c` groups; must divide `heads`. Head `h` uses group
    /// `h * groups / heads`.
    pub groups: usize,
}

impl ScanDims {
    pub fn x_len(&self) -> usize {
        self.len * self.heads * self.head_dim
    }

    pub fn a_len(&self) -> usize {
        self.len * self.heads
    }

    pub fn bc_len(&self) -> usize {
        self.len * self.groups * self.state_dim
    }

    fn check(&self) {
        assert!(self.heads > 0 && self.head_dim > 0 && self.state_dim > 0);
        assert!(
            self.groups > 0 && self.heads.is_multiple_of(self.groups),
            "groups must divide heads"
        );
    }

    fn group_of(&self, head: usize) -> usize {
        head * self.groups / self.heads
    }
}

/// Naive recurrence, the reference implementation.
pub fn ssd_scan_naive<T: Real>(x: &[T], a: &[T], b: &[T], c: &[T], dims: ScanDims) -> Vec<T> {
    dims.check();
    assert_eq!(x.len(), dims.x_len());
    assert_eq!(a.len(), dims.a_len());
    assert_eq!(b.len(), dims.bc_len());
    assert_eq!(c.len(), dims.bc_len());
    let (l, h, p, n) = (dims.len, dims.heads, dims.head_dim, dims.state_dim);
    let mut y = vec![T::ZERO; x.len()];
    let mut state = vec![T::ZERO; p * n];
    for head in 0..h {
        let g = dims.group_of(head);
        for s in state.iter_mut() {
            *s = T::ZERO;
        }
        for t in 0..l {
            let at = a[t * h + head];
            let xt = &x[t * h * p + head * p..t * h * p + head * p + p];
            let bt = &b[t * dims.groups * n + g * n..t * dims.groups * n + g * n + n];
            let ct = &c[t * dims.groups * n + g * n..t * dims.groups * n + g * n + n];
            for i in 0..p {
                let xi = xt[i];
                let row = &mut state[i * n..(i + 1) * n];
                for (s, &bv) in row.iter_mut().zip(bt) {
                    *s = at * *s + xi * bv;
                }
            }
            let yt = &mut y[t * h * p + head * p..t * h * p + head * p + p];
            for (i, yo) in yt.iter_mut().enumerate() {
                let row = &state[i * n..(i + 1) * n];
                let mut acc = T::ZERO;
                for (&s, &cv) in row.iter().zip(ct) {
                    acc = acc + s * cv;
                }
                *yo = acc;
            }
        }
    }
    y
}

/// Chunked scan: identical output to [`ssd_scan_naive`] up to rounding.
pub fn ssd_scan_chunked<T: Real>(
    x: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    dims: ScanDims,
    chunk: usize,
) -> Vec<T> {
    dims.check();
    assert!(chunk > 0);
    assert_eq!(x.len(), dims.x_len());
    assert_eq!(a.len(), dims.a_len());
    assert_eq!(b.len(), dims.bc_len());
    assert_eq!(c.len(), dims.bc_len());
    let (l, h, p, n) = (dims.len, dims.heads, dims.head_dim, dims.state_dim);
    let mut y = vec![T::ZERO; x.len()];
    let mut state = vec![T::ZERO; p * n];
    let mut decay = vec![T::ZERO; chunk];
    let mut bc = vec![T::ZERO; chunk * chunk];
    for head in 0..h {
        let g = dims.group_of(head);
        for s in state.iter_mut() {
            *s = T::ZERO;
        }
        let mut start = 0;
        while start < l {
            let q = chunk.min(l - start);
            let idx_a = |t: usize| a[(start + t) * h + head];
            let idx_x =
                |t: usize| &x[(start + t) * h * p + head * p..(start + t) * h * p + head * p + p];
            let idx_b = |t: usize| {
                &b[(start + t) * dims.groups * n + g * n..(start + t) * dims.groups * n + g * n + n]
            };
            let idx_c = |t: usize| {
                &c[(start + t) * dims.groups * n + g * n..(start + t) * dims.groups * n + g * n + n]
            };
            // decay[t] = Π_{u ≤ t} a_u within the chunk.
            let mut run = T::ONE;
            for (t, d) in decay.iter_mut().enumerate().take(q) {
                run = run * idx_a(t);
                *d = run;
            }
            // bc[i][j] = (b_j · c_i) · Π a over (j, i], for j ≤ i.
            for i in 0..q {
                let ci = idx_c(i);
                for j in 0..=i {
                    let bj = idx_b(j);
                    let mut dot = T::ZERO;
                    for (&bv, &cv) in bj.iter().zip(ci) {
                        dot = dot + bv * cv;
                    }
                    // Π a over (j, i] = decay[i] / decay[j]; computed by
                    // explicit product to stay exact when decays underflow.
                    let mut w = T::ONE;
                    for u in j + 1..=i {
                        w = w * idx_a(u);
                    }
                    bc[i * chunk + j] = dot * w;
                }
            }
            for i in 0..q {
                let out = (start + i) * h * p + head * p;
                // Inter-chunk: carried state decayed into step i.
                let ci = idx_c(i);
                for d in 0..p {
                    let row = &state[d * n..(d + 1) * n];
                    let mut acc = T::ZERO;
                    for (&s, &cv) in row.iter().zip(ci) {
                        acc = acc + s * cv;
                    }
                    y[out + d] = decay[i] * acc;
                }
                // Intra-chunk quadratic form.
                for j in 0..=i {
                    let w = bc[i * chunk + j];
                    if w == T::ZERO {
                        continue;
                    }
                    let xj = idx_x(j);
                    for d in 0..p {
                        y[out + d] = y[out + d] + w * xj[d];
                    }
                }
            }
            // Carry the state across the chunk boundary.
            let total = decay[q - 1];
            for s in state.iter_mut() {
                *s = *s * total;
            }
            for j in 0..q {
                let mut w = T::ONE;
                for u in j + 1..q {
                    w = w * idx_a(u);
                }
                let xj = idx_x(j);
                let bj = idx_b(j);
                for d in 0..p {
                    let xw = xj[d] * w;
                    let row = &mut state[d * n..(d + 1) * n];
                    for (s, &bv) in row.iter_mut().zip(bj) {
                        *s = *s + xw * bv;
                    }
                }
            }
            start += q;
        }
    }
    y
}

/// Gradients of the naive recurrence given upstream `dy`. States are
/// recomputed forward, then the adjoint runs the recurrence backward.
#[allow(clippy::too_many_arguments)]
pub fn ssd_scan_backward(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dy: &[f64],
    dims: ScanDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    dims.check();
    let (l, h, p, n) = (dims.len, dims.heads, dims.head_dim, dims.state_dim);
    let mut dx = vec![0.0; x.len()];
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut dc = vec![0.0; c.len()];
    // states[t] = S after step t (per head, reused buffer over heads).
    let mut states = vec![0.0; (l + 1) * p * n];
    let mut grad = vec![0.0; p * n];
    for head in 0..h {
        let g = dims.group_of(head);
        let off_a = |t: usize| t * h + head;
        let off_x = |t: usize| t * h * p + head * p;
        let off_bc = |t: usize| t * dims.groups * n + g * n;
        for s in states[..p * n].iter_mut() {
            *s = 0.0;
        }
        for t in 0..l {
            let (prev, cur) = states.split_at_mut((t + 1) * p * n);
            let prev = &prev[t * p * n..];
            let cur = &mut cur[..p * n];
            let at = a[off_a(t)];
            let xt = &x[off_x(t)..off_x(t) + p];
            let bt = &b[off_bc(t)..off_bc(t) + n];
            for i in 0..p {
                for j in 0..n {
                    cur[i * n + j] = at * prev[i * n + j] + xt[i] * bt[j];
                }
            }
        }
        for v in grad.iter_mut() {
            *v = 0.0;
        }
        for t in (0..l).rev() {
            let at = a[off_a(t)];
            let xt = &x[off_x(t)..off_x(t) + p];
            let bt = &b[off_bc(t)..off_bc(t) + n];
            let ct = &c[off_bc(t)..off_bc(t) + n];
            let dyt = &dy[off_x(t)..off_x(t) + p];
            let s_cur = &states[(t + 1) * p * n..(t + 2) * p * n];
            let s_prev = &states[t * p * n..(t + 1) * p * n];
            // y_t = S_t c_t  →  dS_t += dy_t ⊗ c_t, dc_t += S_tᵀ dy_t.
            for i in 0..p {
                for j in 0..n {
                    grad[i * n + j] += dyt[i] * ct[j];
                    dc[off_bc(t) + j] += s_cur[i * n + j] * dyt[i];
                }
            }
            // S_t = a_t S_{t−1} + x_t ⊗ b_t.
            let mut da_acc = 0.0;
            for i in 0..p {
                for j in 0..n {
                    let gij = grad[i * n + j];
                    da_acc += gij * s_prev[i * n + j];
                    dx[off_x(t) + i] += gij * bt[j];
                    db[off_bc(t) + j] += gij * xt[i];
                }
            }
            da[off_a(t)] += da_acc;
            // Carry the adjoint to S_{t−1}.
            for v in grad.iter_mut() {
                *v *= at;
            }
        }
    }
    (dx, da, db, dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_instance(dims: ScanDims, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let x = (0..dims.x_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let a = (0..dims.a_len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let b = (0..dims.bc_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let c = (0..dims.bc_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        (x, a, b, c)
    }

    #[test]
    fn unit_parameters_give_prefix_sums() {
        let dims = ScanDims {
            len: 6,
            heads: 1,
            head_dim: 1,
            state_dim: 1,
            groups: 1,
        };
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ones = vec![1.0; 6];
        let y = ssd_scan_naive(&x, &ones, &ones, &ones, dims);
        assert_eq!(y, vec![1.0, 3.0, 6.0, 10.0, 15.0, 21.0]);
        let y2 = ssd_scan_chunked(&x, &ones, &ones, &ones, dims, 4);
        assert_eq!(y, y2);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let dims = ScanDims {
            len: 5,
            heads: 1,
            head_dim: 1,
            state_dim: 1,
            groups: 1,
        };
        let x: Vec<f64> = vec![2.0, -1.0, 0.5, 3.0, -2.0];
        let a = vec![0.0; 5];
        let b = vec![1.5; 5];
        let c = vec![2.0; 5];
        let y = ssd_scan_naive(&x, &a, &b, &c, dims);
        for (yo, xo) in y.iter().zip(&x) {
            assert!((yo - 3.0 * xo).abs() < 1e-15);
        }
    }

    #[test]
    fn length_three_hand_unroll() {
        let dims = ScanDims {
            len: 3,
            heads: 1,
            head_dim: 1,
            state_dim: 1,
            groups: 1,
        };
        let x: Vec<f64> = vec![1.0, 2.0, -1.0];
        let a = vec![0.5, 0.25, 0.8];
        let b = vec![2.0, 1.0, 3.0];
        let c = vec![1.0, -1.0, 0.5];
        // s1 = 1·2 = 2, y1 = 2·1 = 2
        // s2 = 0.25·2 + 2·1 = 2.5, y2 = −2.5
        // s3 = 0.8·2.5 + (−1)·3 = −1, y3 = −0.5
        let y = ssd_scan_naive(&x, &a, &b, &c, dims);
        assert!((y[0] - 2.0).abs() < 1e-15);
        assert!((y[1] + 2.5).abs() < 1e-15);
        assert!((y[2] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn chunked_matches_naive_f64_across_lengths_and_seeds() {
        for &len in &[1usize, 2, 7, 64, 257] {
            for seed in 0..20u64 {
                let dims = ScanDims {
                    len,
                    heads: 2,
                    head_dim: 3,
                    state_dim: 4,
                    groups: 1,
                };
                let (x, a, b, c) = random_instance(dims, seed * 131 + len as u64);
                let naive = ssd_scan_naive(&x, &a, &b, &c, dims);
                for chunk in [1usize, 3, 32] {
                    let fast = ssd_scan_chunked(&x, &a, &b, &c, dims, chunk);
                    let worst = naive
                        .iter()
                        .zip(&fast)
                        .map(|(u, v)| (u - v).abs())
                        .fold(0.0, f64::max);
                    assert!(
                        worst <= 1e-10,
                        "len={len} seed={seed} chunk={chunk}: {worst}"
                    );
                }
            }
        }
    }

    #[test]
    fn chunked_matches_naive_f32() {
        for &len in &[1usize, 2, 7, 64, 257] {
            for seed in 0..5u64 {
                let dims = ScanDims {
                    len,
                    heads: 2,
                    head_dim: 2,
                    state_dim: 3,
                    groups: 1,
                };
                let (x, a, b, c) = random_instance(dims, 900 + seed + len as u64);
                let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
                let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
                let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
                let cf: Vec<f32> = c.iter().map(|&v| v as f32).collect();
                let naive = ssd_scan_naive(&xf, &af, &bf, &cf, dims);
                let fast = ssd_scan_chunked(&xf, &af, &bf, &cf, dims, 16);
                let worst = naive
                    .iter()
                    .zip(&fast)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0f32, f32::max);
                assert!(worst <= 1e-5, "len={len} seed={seed}: {worst}");
            }
        }
    }

    #[test]
    fn grouped_parameters_are_shared_across_heads() {
        let dims = ScanDims {
            len: 9,
            heads: 4,
            head_dim: 2,
            state_dim: 3,
            groups: 2,
        };
        let (x, a, b, c) = random_instance(dims, 5);
        let naive = ssd_scan_naive(&x, &a, &b, &c, dims);
        let fast = ssd_scan_chunked(&x, &a, &b, &c, dims, 4);
        let worst = naive
            .iter()
            .zip(&fast)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12);
    }
}
