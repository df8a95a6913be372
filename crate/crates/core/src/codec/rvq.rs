//! Residual vector quantization of MDCT frame features.
//!
//! Stage `s` is a K-entry codebook trained by Lloyd's algorithm (seeded
//! k-means++ init) on the residuals left by stages `< s`. Encoding is
//! greedy nearest-neighbor per stage with ties broken toward the lowest
//! index, so results are deterministic.

use std::io::{Read, Write};

use rand::RngExt;

use super::mdct::FrameMatrix;
use crate::d3pm::TokenGrid;
use crate::{rng, Error, Result};

const CODEBOOK_MAGIC: &[u8; 4] = b"VQCB";
const CODEBOOK_VERSION: u16 = 1;

/// Ordered residual codebooks plus the MDCT frame configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    /// `stages[s]` holds `num_codes * dim` values, code-major.
    stages: Vec<Vec<f64>>,
    num_codes: usize,
    dim: usize,
    window_len: usize,
}

impl CodebookSet {
    pub fn from_stages(stages: Vec<Vec<f64>>, num_codes: usize, dim: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Codec("need at least one stage".into()));
        }
        for (s, cb) in stages.iter().enumerate() {
            if cb.len() != num_codes * dim {
                return Err(Error::Codec(format!(
                    "stage {s} has {} values, expected {}",
                    cb.len(),
                    num_codes * dim
                )));
            }
            if cb.iter().any(|v| !v.is_finite()) {
                return Err(Error::Codec(format!(
                    "stage {s} contains non-finite entries"
                )));
            }
        }
        Ok(Self {
            stages,
            num_codes,
            dim,
            window_len: dim * 2,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// MDCT window length; the hop is half of it.
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Frames per second at a given sample rate.
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / (self.window_len / 2) as f64
    }

    pub fn vector(&self, stage: usize, code: usize) -> &[f64] {
        &self.stages[stage][code * self.dim..(code + 1) * self.dim]
    }

    /// Greedy residual encoding of frame features.
    pub fn encode_frames(&self, frames: &FrameMatrix) -> Result<TokenGrid> {
        if frames.dim != self.dim {
            return Err(Error::Shape(format!(
                "frame dim {} vs codebook dim {}",
                frames.dim, self.dim
            )));
        }
        let mut grid = TokenGrid::zeros(frames.frames, self.num_stages(), self.num_codes);
        let mut residual = vec![0.0; self.dim];
        for f in 0..frames.frames {
            residual.copy_from_slice(frames.row(f));
            for s in 0..self.num_stages() {
                let idx = self.nearest(s, &residual);
                let vec = self.vector(s, idx);
                for (r, &v) in residual.iter_mut().zip(vec) {
                    *r -= v;
                }
                grid.set(f, s, idx as u32);
            }
        }
        Ok(grid)
    }

    /// Sum of stage vectors per frame. Grids must be clean.
    pub fn decode_frames(&self, grid: &TokenGrid) -> Result<FrameMatrix> {
        if grid.codebooks() != self.num_stages() || grid.num_codes() != self.num_codes {
            return Err(Error::Shape(format!(
                "grid {}x{} (K={}) vs codec with {} stages (K={})",
                grid.frames(),
                grid.codebooks(),
                grid.num_codes(),
                self.num_stages(),
                self.num_codes
            )));
        }
        if !grid.is_clean() {
            return Err(Error::Grid(
                "grid contains MASK; the decoder has no mask embedding".into(),
            ));
        }
        let mut out = FrameMatrix::zeros(grid.frames(), self.dim);
        for f in 0..grid.frames() {
            let row = out.row_mut(f);
            for s in 0..self.num_stages() {
                let vec = self.vector(s, grid.get(f, s) as usize);
                for (o, &v) in row.iter_mut().zip(vec) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    /// Mean squared residual norm after quantizing with the first
    /// `use_stages` stages.
    pub fn quantization_mse(&self, frames: &FrameMatrix, use_stages: usize) -> f64 {
        let mut total = 0.0;
        let mut residual = vec![0.0; self.dim];
        for f in 0..frames.frames {
            residual.copy_from_slice(frames.row(f));
            for s in 0..use_stages.min(self.num_stages()) {
                let idx = self.nearest(s, &residual);
                let vec = self.vector(s, idx);
                for (r, &v) in residual.iter_mut().zip(vec) {
                    *r -= v;
                }
            }
            total += residual.iter().map(|r| r * r).sum::<f64>();
        }
        total / (frames.frames * self.dim) as f64
    }

    fn nearest(&self, stage: usize, v: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for code in 0..self.num_codes {
            let c = self.vector(stage, code);
            let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = code;
            }
        }
        best
    }

    /// Serialize: magic `VQCB`, version u16, M_cb, K, dim as u32, stage
    /// vectors as f32 little-endian, then a u64 config-hash trailer.
    pub fn write_to<W: Write>(&self, w: &mut W, config_hash: u64) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_stages() as u32).to_le_bytes())?;
        w.write_all(&(self.num_codes as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for stage in &self.stages {
            for &v in stage {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.write_all(&config_hash.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        if u16::from_le_bytes(b2) != CODEBOOK_VERSION {
            return Err(Error::Format("unsupported codebook version".into()));
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let stages_n = read_u32(r)? as usize;
        let num_codes = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut stages = Vec::with_capacity(stages_n);
        for _ in 0..stages_n {
            let mut cb = Vec::with_capacity(num_codes * dim);
            for _ in 0..num_codes * dim {
                let mut f = [0u8; 4];
                r.read_exact(&mut f)?;
                cb.push(f32::from_le_bytes(f) as f64);
            }
            stages.push(cb);
        }
        let mut h = [0u8; 8];
        r.read_exact(&mut h)?;
        let set = Self::from_stages(stages, num_codes, dim)?;
        Ok((set, u64::from_le_bytes(h)))
    }
}

/// Train residual codebooks on frame features. Deterministic per seed.
pub fn train_rvq(
    frames: &FrameMatrix,
    stages: usize,
    num_codes: usize,
    iters: usize,
    seed: u64,
) -> Result<CodebookSet> {
    if stages == 0 || num_codes == 0 {
        return Err(Error::Codec("stages and num_codes must be positive".into()));
    }
    if frames.frames < num_codes {
        return Err(Error::Codec(format!(
            "need at least K={num_codes} frames, got {}",
            frames.frames
        )));
    }
    let dim = frames.dim;
    let n = frames.frames;
    let mut residuals = frames.data.clone();
    let mut books = Vec::with_capacity(stages);
    for s in 0..stages {
        if is_degenerate(&residuals, n, dim) {
            return Err(Error::Codec(format!(
                "degenerate data at stage {s}: all residual frames identical"
            )));
        }
        let mut rng = rng::stream(seed, "rvq-stage", s as u64);
        let centroids = kmeans(&residuals, n, dim, num_codes, iters, &mut rng);
        // Subtract the nearest centroid from every residual.
        for f in 0..n {
            let row = &mut residuals[f * dim..(f + 1) * dim];
            let idx = nearest_in(&centroids, num_codes, dim, row);
            let c = &centroids[idx * dim..(idx + 1) * dim];
            for (r, &v) in row.iter_mut().zip(c) {
                *r -= v;
            }
        }
        books.push(centroids);
    }
    CodebookSet::from_stages(books, num_codes, dim)
}

fn is_degenerate(data: &[f64], n: usize, dim: usize) -> bool {
    let first = &data[..dim];
    (1..n).all(|f| &data[f * dim..(f + 1) * dim] == first)
}

fn nearest_in(centroids: &[f64], k: usize, dim: usize, v: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for code in 0..k {
        let c = &centroids[code * dim..(code + 1) * dim];
        let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = code;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ initialization.
fn kmeans(
    data: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    iters: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = vec![0.0; k * dim];

    // k-means++: first centroid uniform, the rest D²-weighted.
    let first = rng.random_range(0..n);
    centroids[..dim].copy_from_slice(point(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(point(i), &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let chosen = if total > 0.0 {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // Fewer distinct points than K; duplicate the first point.
            first
        };
        let (head, tail) = centroids.split_at_mut(c * dim);
        tail[..dim].copy_from_slice(point(chosen));
        let _ = head;
        for (i, d) in dist2.iter_mut().enumerate() {
            let nd = sq_dist(point(i), &centroids[c * dim..(c + 1) * dim]);
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let idx = nearest_in(&centroids, k, dim, point(i));
            if idx != *a {
                *a = idx;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..])
                {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // current centroid (deterministic scan order).
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = sq_dist(point(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c * dim..(c + 1) * dim]
                    .copy_from_slice(&data[far * dim..(far + 1) * dim]);
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> FrameMatrix {
        let dim = rows[0].len();
        FrameMatrix {
            frames: rows.len(),
            dim,
            data: rows.into_iter().flatten().collect(),
        }
    }

    #[test]
    fn exactly_k_distinct_vectors_quantize_with_zero_error() {
        let mut rows = Vec::new();
        for rep in 0..5 {
            for k in 0..4 {
                let _ = rep;
                rows.push(vec![k as f64 * 2.0, -(k as f64), 0.5 * k as f64, 1.0]);
            }
        }
        let frames = matrix(rows);
        let cb = train_rvq(&frames, 1, 4, 30, 7).unwrap();
        assert!(cb.quantization_mse(&frames, 1) < 1e-24);
    }

    #[test]
    fn residual_energy_is_monotone_over_stages() {
        let mut rng = crate::rng::seeded(21);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let frames = matrix(rows);
        let cb = train_rvq(&frames, 4, 8, 20, 3).unwrap();
        let mut prev = frames.data.iter().map(|v| v * v).sum::<f64>() / frames.data.len() as f64;
        for s in 1..=4 {
            let mse = cb.quantization_mse(&frames, s);
            assert!(mse <= prev + 1e-15, "stage {s}: {mse} > {prev}");
            prev = mse;
        }
    }

    #[test]
    fn two_cluster_data_recovers_analytic_means() {
        let mut rng = crate::rng::seeded(5);
        let mut rows = Vec::new();
        for _ in 0..100 {
            rows.push(vec![
                5.0 + rng.random_range(-1e-3..1e-3),
                5.0 + rng.random_range(-1e-3..1e-3),
            ]);
            rows.push(vec![
                -5.0 + rng.random_range(-1e-3..1e-3),
                -5.0 + rng.random_range(-1e-3..1e-3),
            ]);
        }
        let frames = matrix(rows.clone());
        let cb = train_rvq(&frames, 1, 2, 50, 1).unwrap();
        // Analytic means of the two generated clusters.
        let mut mean_hi = [0.0f64; 2];
        let mut mean_lo = [0.0f64; 2];
        for pair in rows.chunks(2) {
            mean_hi[0] += pair[0][0] / 100.0;
            mean_hi[1] += pair[0][1] / 100.0;
            mean_lo[0] += pair[1][0] / 100.0;
            mean_lo[1] += pair[1][1] / 100.0;
        }
        let c0 = cb.vector(0, 0);
        let c1 = cb.vector(0, 1);
        let (hi, lo) = if c0[0] > c1[0] { (c0, c1) } else { (c1, c0) };
        assert!((hi[0] - mean_hi[0]).abs() < 1e-6);
        assert!((hi[1] - mean_hi[1]).abs() < 1e-6);
        assert!((lo[0] - mean_lo[0]).abs() < 1e-6);
        assert!((lo[1] - mean_lo[1]).abs() < 1e-6);
    }

    #[test]
    fn degenerate_data_errors_with_stage_index() {
        let frames = matrix(vec![vec![1.0, 2.0]; 10]);
        let err = train_rvq(&frames, 2, 2, 10, 0).unwrap_err();
        assert!(err.to_string().contains("stage 0"), "{err}");
    }

    #[test]
    fn second_stage_degenerates_when_first_is_exact() {
        // Two distinct repeated vectors: stage 0 quantizes exactly, so the
        // stage-1 residuals are all zero.
        let mut rows = Vec::new();
        for _ in 0..10 {
            rows.push(vec![1.0, 0.0]);
            rows.push(vec![0.0, 1.0]);
        }
        let err = train_rvq(&matrix(rows), 2, 2, 10, 0).unwrap_err();
        assert!(err.to_string().contains("stage 1"), "{err}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let mut rng = crate::rng::seeded(8);
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let frames = matrix(rows);
        let a = train_rvq(&frames, 3, 8, 15, 42).unwrap();
        let b = train_rvq(&frames, 3, 8, 15, 42).unwrap();
        assert_eq!(a, b);
        let c = train_rvq(&frames, 3, 8, 15, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let frames = matrix(vec![vec![0.0, 1.0]; 3]);
        assert!(train_rvq(&frames, 1, 4, 10, 0).is_err());
    }

    #[test]
    fn encoding_centroid_sequence_returns_exact_indices() {
        let stages = vec![vec![
            0.0, 0.0, // code 0
            3.0, 0.0, // code 1
            0.0, 3.0, // code 2
        ]];
        let cb = CodebookSet::from_stages(stages, 3, 2).unwrap();
        let frames = matrix(vec![vec![3.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0]]);
        let grid = cb.encode_frames(&frames).unwrap();
        assert_eq!(grid.codes(), &[1, 0, 2]);
        // Decoding centroid indices reproduces the exact frames.
        let back = cb.decode_frames(&grid).unwrap();
        assert_eq!(back.data, frames.data);
    }

    #[test]
    fn encode_decode_encode_is_idempotent_on_representable_signals() {
        // Stage-0 centroids far apart, stage-1 refinements small: greedy
        // encoding recovers the construction exactly.
        let stage0 = vec![10.0, 0.0, 0.0, 0.0, /* code 1 */ 0.0, 10.0, 0.0, 0.0];
        let stage1 = vec![0.0, 0.0, 0.5, 0.0, /* code 1 */ 0.0, 0.0, 0.0, 0.5];
        let cb = CodebookSet::from_stages(vec![stage0, stage1], 2, 4).unwrap();
        let grid = TokenGrid::from_codes(4, 2, 2, vec![0, 0, 0, 1, 1, 0, 1, 1]).unwrap();
        let frames = cb.decode_frames(&grid).unwrap();
        let encoded = cb.encode_frames(&frames).unwrap();
        assert_eq!(encoded, grid);
        let re = cb
            .encode_frames(&cb.decode_frames(&encoded).unwrap())
            .unwrap();
        assert_eq!(re, encoded);
    }

    #[test]
    fn decode_rejects_masked_grid() {
        let cb = CodebookSet::from_stages(vec![vec![0.0; 8]], 4, 2).unwrap();
        let grid = TokenGrid::from_codes(1, 1, 4, vec![4]).unwrap();
        assert!(cb.decode_frames(&grid).is_err());
    }

    #[test]
    fn codebook_file_roundtrip_preserves_bits_and_hash() {
        let mut rng = crate::rng::seeded(11);
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cb = train_rvq(&matrix(rows), 2, 8, 10, 9).unwrap();
        let mut bytes = Vec::new();
        cb.write_to(&mut bytes, 0xdead_beef_cafe_f00d).unwrap();
        assert_eq!(&bytes[0..4], b"VQCB");
        let (back, hash) = CodebookSet::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(hash, 0xdead_beef_cafe_f00d);
        // f32 storage: writing the loaded set again is byte-identical.
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2, hash).unwrap();
        assert_eq!(bytes, bytes2);
    }
}
