//! Discrete diffusion over token grids.
//!
//! States live on a `frames × codebooks` grid of code indices in
//! `{0..K−1} ∪ {MASK}` with `MASK = K`. The forward process corrupts each
//! position independently through the schedule's transition matrices; the
//! reverse process mixes the analytic posterior `q(x_{t−1} | x_t, x̃_0)`
//! over a denoiser's prediction of the clean tokens.

use std::io::{Read, Write};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Default weight of the auxiliary cross-entropy term in [`vlb_loss`].
pub const DEFAULT_LAMBDA_AUX: f64 = 0.001;

const GRID_MAGIC: &[u8; 4] = b"VQTG";
const GRID_VERSION: u16 = 1;

/// Integer code indices on a `frames × codebooks` grid.
///
/// Clean data (`x_0`) contains no `MASK` entries; corrupted states may.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    codebooks: usize,
    num_codes: usize,
    codes: Vec<u32>,
}

impl TokenGrid {
    /// All-zero grid.
    pub fn zeros(frames: usize, codebooks: usize, num_codes: usize) -> Self {
        Self {
            frames,
            codebooks,
            num_codes,
            codes: vec![0; frames * codebooks],
        }
    }

    /// Build from row-major codes (frame-major, codebook within frame).
    pub fn from_codes(
        frames: usize,
        codebooks: usize,
        num_codes: usize,
        codes: Vec<u32>,
    ) -> Result<Self> {
        if codes.len() != frames * codebooks {
            return Err(Error::Grid(format!(
                "expected {} codes for {frames}x{codebooks}, got {}",
                frames * codebooks,
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > num_codes as u32) {
            return Err(Error::Grid(format!(
                "code {bad} out of range for K={num_codes} (MASK={num_codes})"
            )));
        }
        Ok(Self {
            frames,
            codebooks,
            num_codes,
            codes,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    /// The `MASK` sentinel for this grid, equal to `K`.
    pub fn mask_code(&self) -> u32 {
        self.num_codes as u32
    }

    pub fn positions(&self) -> usize {
        self.frames * self.codebooks
    }

    pub fn get(&self, frame: usize, codebook: usize) -> u32 {
        self.codes[frame * self.codebooks + codebook]
    }

    pub fn set(&mut self, frame: usize, codebook: usize, code: u32) {
        debug_assert!(code <= self.num_codes as u32);
        self.codes[frame * self.codebooks + codebook] = code;
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// True when no position is `MASK`.
    pub fn is_clean(&self) -> bool {
        let mask = self.mask_code();
        self.codes.iter().all(|&c| c != mask)
    }

    pub fn count_masked(&self) -> usize {
        let mask = self.mask_code();
        self.codes.iter().filter(|&&c| c == mask).count()
    }

    /// Serialize: magic `VQTG`, version u16, then F, M_cb, K as u32 and
    /// row-major u32 codes with `MASK = K`. All fields little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.codebooks as u32).to_le_bytes())?;
        w.write_all(&(self.num_codes as u32).to_le_bytes())?;
        for &c in &self.codes {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not a token-grid file (bad magic)".into()));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != GRID_VERSION {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let mut buf4 = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut buf4)?;
            Ok(u32::from_le_bytes(buf4))
        };
        let frames = read_u32(r)? as usize;
        let codebooks = read_u32(r)? as usize;
        let num_codes = read_u32(r)? as usize;
        let mut codes = Vec::with_capacity(frames * codebooks);
        for _ in 0..frames * codebooks {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            codes.push(u32::from_le_bytes(b));
        }
        Self::from_codes(frames, codebooks, num_codes, codes)
    }
}

/// Per-position categorical distribution over `K + 1` states.
#[derive(Debug, Clone)]
pub struct CategoricalField {
    frames: usize,
    codebooks: usize,
    num_states: usize,
    probs: Vec<f64>,
}

impl CategoricalField {
    fn uninit(frames: usize, codebooks: usize, num_states: usize) -> Self {
        Self {
            frames,
            codebooks,
            num_states,
            probs: vec![0.0; frames * codebooks * num_states],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn positions(&self) -> usize {
        self.frames * self.codebooks
    }

    /// Distribution slice for one grid position.
    pub fn at(&self, frame: usize, codebook: usize) -> &[f64] {
        let pos = frame * self.codebooks + codebook;
        &self.probs[pos * self.num_states..(pos + 1) * self.num_states]
    }

    fn at_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.probs[pos * self.num_states..(pos + 1) * self.num_states]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest deviation of any position's total mass from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for pos in 0..self.positions() {
            let sum: f64 = self.probs[pos * self.num_states..(pos + 1) * self.num_states]
                .iter()
                .sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Draw one grid from the field, position by position, via inverse CDF
    /// in state order. State `K` maps to the `MASK` sentinel. If rounding
    /// leaves the draw beyond the accumulated mass, the last state with
    /// nonzero probability is taken.
    pub fn sample_into(&self, rng: &mut ChaCha8Rng) -> TokenGrid {
        let num_codes = self.num_states - 1;
        let mut grid = TokenGrid::zeros(self.frames, self.codebooks, num_codes);
        for pos in 0..self.positions() {
            let p = &self.probs[pos * self.num_states..(pos + 1) * self.num_states];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_supported = 0usize;
            for (state, &w) in p.iter().enumerate() {
                if w > 0.0 {
                    last_supported = state;
                }
                acc += w;
                if u < acc {
                    chosen = Some(state);
                    break;
                }
            }
            // Without an early break the full row was scanned, so
            // `last_supported` is the final state with nonzero mass.
            grid.codes[pos] = chosen.unwrap_or(last_supported) as u32;
        }
        grid
    }
}

/// Embedded low-resolution token features conditioning the denoiser.
#[derive(Debug, Clone)]
pub struct Condition {
    frames: usize,
    dim: usize,
    features: Vec<f64>,
}

impl Condition {
    pub fn new(frames: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != frames * dim {
            return Err(Error::Shape(format!(
                "condition features {} != {frames}x{dim}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite condition feature".into()));
        }
        Ok(Self {
            frames,
            dim,
            features,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Per-position logits over the `K` real codes predicting the clean
/// tokens. No logit for `MASK`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    frames: usize,
    codebooks: usize,
    num_codes: usize,
    logits: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(
        frames: usize,
        codebooks: usize,
        num_codes: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        if logits.len() != frames * codebooks * num_codes {
            return Err(Error::Shape(format!(
                "logits {} != {frames}x{codebooks}x{num_codes}",
                logits.len()
            )));
        }
        Ok(Self {
            frames,
            codebooks,
            num_codes,
            logits,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn positions(&self) -> usize {
        self.frames * self.codebooks
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Logit slice for one grid position.
    pub fn at(&self, frame: usize, codebook: usize) -> &[f64] {
        let pos = frame * self.codebooks + codebook;
        &self.logits[pos * self.num_codes..(pos + 1) * self.num_codes]
    }

    /// Per-position argmax as a clean grid.
    pub fn argmax_grid(&self) -> TokenGrid {
        let mut grid = TokenGrid::zeros(self.frames, self.codebooks, self.num_codes);
        for pos in 0..self.positions() {
            let row = &self.logits[pos * self.num_codes..(pos + 1) * self.num_codes];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            grid.codes[pos] = best as u32;
        }
        grid
    }
}

/// Anything that predicts clean-token logits from a corrupted grid.
pub trait Denoiser {
    fn denoise(&self, x_t: &TokenGrid, t: usize, cond: &Condition) -> Result<DenoiserOutput>;
}

fn check_grid_schedule(grid: &TokenGrid, s: &NoiseSchedule) -> Result<()> {
    if grid.num_codes() != s.num_codes() {
        return Err(Error::Grid(format!(
            "grid has K={} but schedule has K={}",
            grid.num_codes(),
            s.num_codes()
        )));
    }
    Ok(())
}

/// Marginal distribution of `x_t` given clean `x_0`: the cumulative
/// transition applied to each position's one-hot.
pub fn forward_marginal(x0: &TokenGrid, t: usize, s: &NoiseSchedule) -> Result<CategoricalField> {
    check_grid_schedule(x0, s)?;
    if !x0.is_clean() {
        return Err(Error::Grid("x0 contains MASK entries".into()));
    }
    let q = s.cumulative(t)?;
    let k = s.num_codes();
    let (stay, uniform, mask) = (q.stay(), q.uniform(), q.mask());
    let mut field = CategoricalField::uninit(x0.frames(), x0.codebooks(), k + 1);
    for pos in 0..x0.positions() {
        let code = x0.codes[pos] as usize;
        let row = field.at_mut(pos);
        for item in row.iter_mut().take(k) {
            *item = uniform;
        }
        row[code] += stay;
        row[k] = mask;
    }
    Ok(field)
}

/// Draw `x_t` from the forward marginal, position-independently.
/// Deterministic for a given seed.
pub fn sample_forward(x0: &TokenGrid, t: usize, s: &NoiseSchedule, seed: u64) -> Result<TokenGrid> {
    check_grid_schedule(x0, s)?;
    if !x0.is_clean() {
        return Err(Error::Grid("x0 contains MASK entries".into()));
    }
    let q = s.cumulative(t)?;
    let k = s.num_codes();
    let (stay, uniform, mask) = (q.stay(), q.uniform(), q.mask());
    let mut out = TokenGrid::zeros(x0.frames(), x0.codebooks(), k);
    let mut rng = rng::seeded(seed);
    for pos in 0..x0.positions() {
        let code = x0.codes[pos];
        let u: f64 = rng.random();
        out.codes[pos] = if u < mask {
            k as u32
        } else if u < mask + stay + uniform {
            code
        } else if uniform > 0.0 {
            // One of the K−1 other codes, uniformly.
            let r = (u - mask - stay - uniform) / uniform;
            let idx = (r.floor() as usize).min(k - 2);
            if (idx as u32) < code {
                idx as u32
            } else {
                idx as u32 + 1
            }
        } else {
            code
        };
    }
    Ok(out)
}

/// Analytic posterior `q(x_{t−1} | x_t, x_0)` per position.
///
/// `q(x_{t−1}=j | x_t=i, x_0=k) ∝ Q_t[i,j] · Q̄_{t−1}[j,k]`, normalized by
/// `Q̄_t[i,k]`. At `t = 1` this collapses to the one-hot of `x_0`. An
/// impossible `(x_t, x_0)` pair under the schedule is an explicit error.
pub fn posterior(
    x_t: &TokenGrid,
    x0: &TokenGrid,
    t: usize,
    s: &NoiseSchedule,
) -> Result<CategoricalField> {
    check_grid_schedule(x_t, s)?;
    check_grid_schedule(x0, s)?;
    if x_t.frames() != x0.frames() || x_t.codebooks() != x0.codebooks() {
        return Err(Error::Shape("x_t and x0 grids differ in shape".into()));
    }
    if !x0.is_clean() {
        return Err(Error::Grid("x0 contains MASK entries".into()));
    }
    let q_t = s.transition(t)?;
    let q_prev = s.cumulative0(t - 1);
    let k = s.num_codes();
    let mut field = CategoricalField::uninit(x_t.frames(), x_t.codebooks(), k + 1);
    for pos in 0..x_t.positions() {
        let i = x_t.codes[pos] as usize;
        let x0_code = x0.codes[pos] as usize;
        let row = field.at_mut(pos);
        let mut sum = 0.0;
        for (j, item) in row.iter_mut().enumerate() {
            let v = q_t.entry(i, j) * q_prev.entry(j, x0_code);
            *item = v;
            sum += v;
        }
        if sum.is_nan() || sum <= 0.0 || sum.is_infinite() {
            return Err(Error::Numerical(format!(
                "zero-probability (x_t={i}, x0={x0_code}) pair at position {pos}, t={t}"
            )));
        }
        for item in row.iter_mut() {
            *item /= sum;
        }
    }
    Ok(field)
}

/// Reverse-step distribution `p(x_{t−1} | x_t)`: the analytic posterior
/// marginalized over `softmax(x0_logits)`.
///
/// Uses the three-coefficient structure for an O(K)-per-position form:
/// with `w(k) = p̃(k)/Q̄_t[x_t,k]` and `W = Σ_k w(k)`,
/// `p(j) = Q_t[x_t,j]·(ā'·w(j) + b̄'·W)` for real `j` and
/// `p(MASK) = Q_t[x_t,MASK]·c̄'·W`.
pub fn reverse_step(
    x0_logits: &DenoiserOutput,
    x_t: &TokenGrid,
    t: usize,
    s: &NoiseSchedule,
) -> Result<CategoricalField> {
    check_grid_schedule(x_t, s)?;
    if x0_logits.frames() != x_t.frames()
        || x0_logits.codebooks() != x_t.codebooks()
        || x0_logits.num_codes() != s.num_codes()
    {
        return Err(Error::Shape("logits do not match grid/schedule".into()));
    }
    if let Some(pos) = x0_logits.logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite logit at flat index {pos}"
        )));
    }
    let q_t = s.transition(t)?;
    let q_prev = s.cumulative0(t - 1);
    let q_cum = s.cumulative0(t);
    let k = s.num_codes();
    let mask = k;
    let mut field = CategoricalField::uninit(x_t.frames(), x_t.codebooks(), k + 1);
    let mut p_tilde = vec![0.0f64; k];
    for pos in 0..x_t.positions() {
        let i = x_t.codes[pos] as usize;
        let logits = &x0_logits.logits[pos * k..(pos + 1) * k];
        softmax_into(logits, &mut p_tilde);
        let mut w_sum = 0.0;
        let row = field.at_mut(pos);
        for (j, (&pt, item)) in p_tilde.iter().zip(row.iter_mut()).enumerate() {
            let denom = q_cum.entry(i, j).max(1e-300);
            let w = pt / denom;
            w_sum += w;
            *item = w; // stash w(j); finished below
        }
        let stay_prev = q_prev.stay();
        let unif_prev = q_prev.uniform();
        let mask_prev = q_prev.mask();
        let mut sum = 0.0;
        for (j, item) in row.iter_mut().take(k).enumerate() {
            let v = q_t.entry(i, j) * (stay_prev * *item + unif_prev * w_sum);
            *item = v;
            sum += v;
        }
        row[mask] = q_t.entry(i, mask) * mask_prev * w_sum;
        sum += row[mask];
        if sum.is_nan() || sum <= 0.0 || sum.is_infinite() {
            return Err(Error::Numerical(format!(
                "degenerate reverse distribution at position {pos}, t={t}"
            )));
        }
        for item in row.iter_mut() {
            *item /= sum;
        }
    }
    Ok(field)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Ancestral sampling: initialize `x_T` from the terminal marginal with
/// the clean token marginalized uniform over real codes, then walk the
/// reverse chain down to `x_0`. The output contains no `MASK`.
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    frames: usize,
    codebooks: usize,
    seed: u64,
) -> Result<TokenGrid> {
    if cond.frames() != frames {
        return Err(Error::Shape(format!(
            "condition has {} frames, target grid has {frames}",
            cond.frames()
        )));
    }
    let t_max = s.num_steps();
    let k = s.num_codes();
    let q_term = s.cumulative(t_max)?;
    // Terminal law from a uniform clean token: P(MASK) = c̄_T and each real
    // code gets (1 − c̄_T)/K.
    let p_mask = q_term.mask();
    let p_code = (1.0 - p_mask) / k as f64;
    let mut rng = rng::seeded(seed);
    let mut x_t = TokenGrid::zeros(frames, codebooks, k);
    for pos in 0..x_t.positions() {
        let u: f64 = rng.random();
        x_t.codes[pos] = if u < p_mask {
            k as u32
        } else {
            (((u - p_mask) / p_code).floor() as usize).min(k - 1) as u32
        };
    }
    for t in (1..=t_max).rev() {
        let logits = denoiser.denoise(&x_t, t, cond)?;
        let p = reverse_step(&logits, &x_t, t, s)?;
        x_t = p.sample_into(&mut rng);
    }
    if !x_t.is_clean() {
        return Err(Error::Numerical(
            "MASK survived to x_0; schedule leaves mask unreachable by the posterior".into(),
        ));
    }
    Ok(x_t)
}

/// Variational-bound training loss plus auxiliary clean-token
/// cross-entropy, with a per-term breakdown.
#[derive(Debug, Clone, Copy)]
pub struct VlbLoss {
    /// `kl + lambda_aux * aux_ce`.
    pub total: f64,
    /// `KL(q(x_{t−1}|x_t,x_0) ‖ p(x_{t−1}|x_t))` summed over positions.
    pub kl: f64,
    /// Cross-entropy of `softmax(logits)` against `x_0`, summed.
    pub aux_ce: f64,
    pub lambda_aux: f64,
}

/// Compute the diffusion loss `L_{t−1}` for one grid.
pub fn vlb_loss(
    x0: &TokenGrid,
    t: usize,
    x_t: &TokenGrid,
    x0_logits: &DenoiserOutput,
    s: &NoiseSchedule,
    lambda_aux: f64,
) -> Result<VlbLoss> {
    let q = posterior(x_t, x0, t, s)?;
    let p = reverse_step(x0_logits, x_t, t, s)?;
    let k = s.num_codes();
    let mut kl = 0.0;
    let mut ce = 0.0;
    let mut p_tilde = vec![0.0f64; k];
    for pos in 0..x0.positions() {
        let qi = &q.probs[pos * (k + 1)..(pos + 1) * (k + 1)];
        let pi = &p.probs[pos * (k + 1)..(pos + 1) * (k + 1)];
        let mut acc = 0.0;
        for (&qv, &pv) in qi.iter().zip(pi) {
            if qv > 0.0 {
                acc += qv * (qv.ln() - (pv + 1e-30).ln());
            }
        }
        let logits = &x0_logits.logits[pos * k..(pos + 1) * k];
        softmax_into(logits, &mut p_tilde);
        let ce_pos = -(p_tilde[x0.codes[pos] as usize] + 1e-30).ln();
        if !acc.is_finite() || !ce_pos.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss term at position {pos}, t={t}"
            )));
        }
        kl += acc;
        ce += ce_pos;
    }
    Ok(VlbLoss {
        total: kl + lambda_aux * ce,
        kl,
        aux_ce: ce,
        lambda_aux,
    })
}
