//! Gaussian-mixture monotonic attention.
//!
//! `N_a` reads the flattened buffer and emits `3M` raw values squashed by
//! `tanh`: prior logits, log mean shifts and log variances. Means only move
//! forward. In inference mode every component advances by the shift of the
//! highest-prior component.

use rand::Rng;

use crate::error::{Error, Result};
use crate::loop_core::MemoryBuffer;
use crate::nn::{linear_row, Mlp, ParamSet};
use crate::tape::{argmax, gmm_phi, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub means: Vec<f64>,
}

impl AttentionState {
    pub fn zeros(m: usize) -> Self {
        AttentionState {
            means: vec![0.0; m],
        }
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Mean of the component with the largest prior.
    pub fn dominant_mean(&self, params: &AttentionParams) -> f64 {
        self.means[argmax(&params.priors)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub priors: Vec<f64>,
    pub mean_shifts: Vec<f64>,
    pub log_variances: Vec<f64>,
}

impl AttentionParams {
    /// Maps `3M` raw network outputs (before `tanh`) to mixture parameters.
    /// Shifts are `shift_scale · exp(tanh(r))`.
    pub fn from_raw(raw: &[f64], m: usize, shift_scale: f64) -> Result<Self> {
        if raw.len() != 3 * m {
            return Err(Error::arg(format!(
                "expected {} raw values, got {}",
                3 * m,
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite attention network output"));
        }
        let r: Vec<f64> = raw.iter().map(|v| v.tanh()).collect();
        let mx = r[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r[..m].iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(AttentionParams {
            priors: e.iter().map(|v| v / s).collect(),
            mean_shifts: r[m..2 * m].iter().map(|v| shift_scale * v.exp()).collect(),
            log_variances: r[2 * m..].to_vec(),
        })
    }
}

/// Mixture weights of one row: normalised over `l` positions, with the
/// one-hot fallback flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionWeights {
    pub weights: Vec<f64>,
    pub fell_back: bool,
}

/// The attention network `N_a` plus its output interpretation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionNet {
    pub mlp: Mlp,
    pub n_components: usize,
    pub shift_scale: f64,
}

impl AttentionNet {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        buffer_len: usize,
        hidden: usize,
        n_components: usize,
        shift_scale: f64,
    ) -> Self {
        AttentionNet {
            mlp: Mlp::new(
                params,
                rng,
                "n_a",
                buffer_len,
                hidden,
                3 * n_components,
                1.0,
            ),
            n_components,
            shift_scale,
        }
    }

    /// Raw `N_a` output for one flattened buffer, before `tanh`.
    pub fn raw(&self, params: &ParamSet, buffer: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = linear_row(params, &self.mlp.hidden, buffer)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        linear_row(params, &self.mlp.out, &h)
    }

    /// Tape version over a batch of flattened buffers `B×(k·d_b)`.
    /// Returns `(priors, shifts, log_vars)`, each `B×M`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], buffer: Var) -> (Var, Var, Var) {
        let m = self.n_components;
        let raw = self.mlp.forward(tape, bound, buffer);
        let r = tape.tanh(raw);
        let logits = tape.slice_cols(r, 0, m);
        let priors = tape.softmax_rows(logits);
        let ls = tape.slice_cols(r, m, 2 * m);
        let shifts = tape.exp(ls);
        let shifts = tape.scale(shifts, self.shift_scale);
        let log_vars = tape.slice_cols(r, 2 * m, 3 * m);
        (priors, shifts, log_vars)
    }
}

pub fn attention_params(
    buffer: &MemoryBuffer,
    net: &AttentionNet,
    params: &ParamSet,
) -> Result<AttentionParams> {
    if !buffer.all_finite() {
        return Err(Error::numeric("non-finite buffer entry"));
    }
    let expect = net.mlp.hidden.fan_in;
    if buffer.as_slice().len() != expect {
        return Err(Error::arg(format!(
            "buffer has {} entries, attention network expects {expect}",
            buffer.as_slice().len()
        )));
    }
    AttentionParams::from_raw(
        &net.raw(params, buffer.as_slice()),
        net.n_components,
        net.shift_scale,
    )
}

pub fn advance_means(
    state: &AttentionState,
    params: &AttentionParams,
    mode: AttentionMode,
) -> AttentionState {
    let means = match mode {
        AttentionMode::Train => state
            .means
            .iter()
            .zip(&params.mean_shifts)
            .map(|(m, s)| m + s)
            .collect(),
        AttentionMode::Inference => {
            let s = params.mean_shifts[argmax(&params.priors)];
            state.means.iter().map(|m| m + s).collect()
        }
    };
    AttentionState { means }
}

pub fn position_weights(
    state: &AttentionState,
    params: &AttentionParams,
    l: usize,
) -> Result<PositionWeights> {
    if l == 0 {
        return Err(Error::arg("attention over an empty phoneme sequence"));
    }
    let phi = gmm_phi(&params.priors, &state.means, &params.log_variances, l);
    let s: f64 = phi.iter().sum();
    if s > 1e-300 && s.is_finite() {
        return Ok(PositionWeights {
            weights: phi.iter().map(|v| v / s).collect(),
            fell_back: false,
        });
    }
    let pos = state.dominant_mean(params).round().clamp(1.0, l as f64) as usize;
    let mut weights = vec![0.0; l];
    weights[pos - 1] = 1.0;
    Ok(PositionWeights {
        weights,
        fell_back: true,
    })
}

/// `c = E · w` for `E: d_p × l` stored row-major.
pub fn context(weights: &[f64], e: &Tensor) -> Result<Vec<f64>> {
    let (d, l) = match e.shape() {
        [d, l] => (*d, *l),
        s => {
            return Err(Error::arg(format!(
                "embedding matrix must be 2-D, got {s:?}"
            )))
        }
    };
    if weights.len() != l {
        return Err(Error::arg(format!(
            "{} weights for an embedding matrix with {l} columns",
            weights.len()
        )));
    }
    Ok((0..d)
        .map(|r| e.row(r).iter().zip(weights).map(|(a, b)| a * b).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(priors: &[f64], shifts: &[f64], lv: &[f64]) -> AttentionParams {
        AttentionParams {
            priors: priors.to_vec(),
            mean_shifts: shifts.to_vec(),
            log_variances: lv.to_vec(),
        }
    }

    #[test]
    fn equal_logits_give_uniform_priors_and_zero_gives_unit_shift() {
        let p = AttentionParams::from_raw(&[0.3, 0.3, 0.3, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3], 3, 1.0)
            .unwrap();
        for v in &p.priors {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.mean_shifts, vec![1.0; 3]);
    }

    #[test]
    fn random_buffer_gives_valid_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let net = AttentionNet::new(&mut ps, &mut rng, 12, 8, 4, 1.0);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let buf = MemoryBuffer::from_slots(3, 4, data.clone()).unwrap();
        let p = attention_params(&buf, &net, &ps).unwrap();
        assert!((p.priors.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let (lo, hi) = ((-1.0f64).exp(), 1.0f64.exp());
        assert!(p.mean_shifts.iter().all(|s| *s > lo && *s < hi));
        assert!(p.log_variances.iter().all(|v| v.abs() < 1.0));

        // direct formula oracle over the raw outputs
        let mut h = vec![0.0; 8];
        let w0 = ps.get(net.mlp.hidden.weight).data();
        let b0 = ps.get(net.mlp.hidden.bias.unwrap()).data();
        for o in 0..8 {
            h[o] = (b0[o] + (0..12).map(|i| data[i] * w0[i * 8 + o]).sum::<f64>()).max(0.0);
        }
        let w1 = ps.get(net.mlp.out.weight).data();
        let b1 = ps.get(net.mlp.out.bias.unwrap()).data();
        let raw: Vec<f64> = (0..12)
            .map(|o| (b1[o] + (0..8).map(|i| h[i] * w1[i * 12 + o]).sum::<f64>()).tanh())
            .collect();
        let z: f64 = raw[..4].iter().map(|v| v.exp()).sum();
        for i in 0..4 {
            assert!((p.priors[i] - raw[i].exp() / z).abs() < 1e-12);
            assert!((p.mean_shifts[i] - raw[4 + i].exp()).abs() < 1e-12);
            assert!((p.log_variances[i] - raw[8 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_buffer_is_numeric_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = AttentionNet::new(&mut ps, &mut rng, 4, 3, 2, 1.0);
        let buf = MemoryBuffer::from_slots(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(
            attention_params(&buf, &net, &ps),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn tape_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let net = AttentionNet::new(&mut ps, &mut rng, 6, 5, 3, 0.05);
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let buf = MemoryBuffer::from_slots(2, 3, data.clone()).unwrap();
        let plain = attention_params(&buf, &net, &ps).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec(&[1, 6], data));
        let (p, s, lv) = net.forward(&mut tape, &bound, x);
        for (a, b) in [
            (p, &plain.priors),
            (s, &plain.mean_shifts),
            (lv, &plain.log_variances),
        ] {
            for (x, y) in tape.value(a).data().iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inference_advances_all_by_dominant_shift() {
        let st = AttentionState {
            means: vec![1.0, 2.0, 3.0],
        };
        let p = params(&[0.2, 0.7, 0.1], &[0.5, 0.25, 2.0], &[0.0; 3]);
        let inf = advance_means(&st, &p, AttentionMode::Inference);
        assert_eq!(inf.means, vec![1.25, 2.25, 3.25]);
        let tr = advance_means(&st, &p, AttentionMode::Train);
        assert_eq!(tr.means, vec![1.5, 2.25, 5.0]);
    }

    #[test]
    fn single_component_modes_coincide() {
        let st = AttentionState { means: vec![0.7] };
        let p = params(&[1.0], &[0.3], &[0.0]);
        assert_eq!(
            advance_means(&st, &p, AttentionMode::Train),
            advance_means(&st, &p, AttentionMode::Inference)
        );
    }

    #[test]
    fn narrow_gaussian_is_one_hot() {
        let st = AttentionState { means: vec![3.0] };
        let p = params(&[1.0], &[1.0], &[-30.0]);
        let w = position_weights(&st, &p, 5).unwrap();
        assert!(!w.fell_back);
        assert!((w.weights[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_is_symmetric() {
        let st = AttentionState { means: vec![2.5] };
        let p = params(&[1.0], &[1.0], &[0.3]);
        let w = position_weights(&st, &p, 5).unwrap().weights;
        assert!((w[1] - w[2]).abs() < 1e-15);
    }

    #[test]
    fn underflow_falls_back_to_dominant_mean() {
        let st = AttentionState {
            means: vec![500.0, 2.2],
        };
        let p = params(&[0.1, 0.9], &[1.0, 1.0], &[-1.0, -1.0]);
        // component 1 sits at 2.2 and is not underflowing, so shift it away
        let st2 = AttentionState {
            means: vec![500.0, 400.0],
        };
        assert!(!position_weights(&st, &p, 4).unwrap().fell_back);
        let w = position_weights(&st2, &p, 4).unwrap();
        assert!(w.fell_back);
        assert_eq!(w.weights, vec![0.0, 0.0, 0.0, 1.0]);
        let st3 = AttentionState {
            means: vec![-400.0, -500.0],
        };
        assert_eq!(
            position_weights(&st3, &p, 4).unwrap().weights,
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn weights_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = 4;
        let raw: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = AttentionParams::from_raw(&raw, m, 1.0).unwrap();
        let st = AttentionState {
            means: (0..m).map(|_| rng.random_range(0.0..8.0)).collect(),
        };
        let w = position_weights(&st, &p, 7).unwrap().weights;
        let mut phi = [0.0; 7];
        for (j, f) in phi.iter_mut().enumerate() {
            for i in 0..m {
                let var = p.log_variances[i].exp();
                *f += p.priors[i] * (-(st.means[i] - (j + 1) as f64).powi(2) / (2.0 * var)).exp();
            }
        }
        let s: f64 = phi.iter().sum();
        for j in 0..7 {
            let want = phi[j] / s;
            assert!((w[j] - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
    }

    #[test]
    fn context_cases() {
        let e = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(context(&[0.0, 1.0, 0.0], &e).unwrap(), vec![2.0, 5.0]);
        let u = context(&[1.0 / 3.0; 3], &e).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-15 && (u[1] - 5.0).abs() < 1e-15);
        assert!(context(&[1.0, 0.0], &e).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, l) = (5, 9);
        let e = Tensor::from_vec(
            &[d, l],
            (0..d * l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let w: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = context(&w, &e).unwrap();
        for r in 0..d {
            let mut want = 0.0;
            for j in 0..l {
                want += e.data()[r * l + j] * w[j];
            }
            assert!((c[r] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn weights_are_differentiable_in_means_and_log_variances() {
        // finite-difference check of the tape node against the plain formula
        let (priors, means, lv) = (vec![0.3, 0.7], vec![1.4, 2.6], vec![0.2, -0.4]);
        let l = 4;
        let h = 1e-5;
        let probe = [0.3, -0.2, 0.5, 0.9];
        let f = |mu: &[f64], lv: &[f64]| -> f64 {
            let st = AttentionState { means: mu.to_vec() };
            let p = params(&priors, &[1.0, 1.0], lv);
            position_weights(&st, &p, l)
                .unwrap()
                .weights
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::from_vec(&[1, 2], priors.clone()));
        let mv = tape.leaf(Tensor::from_vec(&[1, 2], means.clone()));
        let lvv = tape.leaf(Tensor::from_vec(&[1, 2], lv.clone()));
        let w = tape.gmm_weights(pv, mv, lvv, &[l], l);
        let pr = tape.leaf(Tensor::from_vec(&[1, l], probe.to_vec()));
        let prod = tape.mul(w, pr);
        let root = tape.sum_all(prod);
        let g = tape.backward(root);
        for i in 0..2 {
            let mut up = means.clone();
            let mut dn = means.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up, &lv) - f(&dn, &lv)) / (2.0 * h);
            let an = g.get(mv).unwrap().data()[i];
            assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-4);
            let mut up = lv.clone();
            let mut dn = lv.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&means, &up) - f(&means, &dn)) / (2.0 * h);
            let an = g.get(lvv).unwrap().data()[i];
            assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn means_strictly_increase_and_weights_are_a_distribution(
            raw in proptest::collection::vec(-5.0f64..5.0, 9),
            start in proptest::collection::vec(0.0f64..20.0, 3),
            l in 1usize..30,
            scale in 0.01f64..2.0,
        ) {
            let p = AttentionParams::from_raw(&raw, 3, scale).unwrap();
            let st = AttentionState { means: start.clone() };
            for mode in [AttentionMode::Train, AttentionMode::Inference] {
                let next = advance_means(&st, &p, mode);
                for (a, b) in next.means.iter().zip(&start) {
                    prop_assert!(a > b);
                }
            }
            let w = position_weights(&st, &p, l).unwrap().weights;
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn inference_advance_ignores_positive_logit_rescaling(
            raw in proptest::collection::vec(-0.9f64..0.9, 9),
            c in 0.1f64..1.0,
        ) {
            // tanh is monotone, so scaling pre-tanh logits keeps the argmax
            let mut scaled = raw.clone();
            for v in scaled[..3].iter_mut() {
                *v *= c;
            }
            let a = AttentionParams::from_raw(&raw, 3, 1.0).unwrap();
            let b = AttentionParams::from_raw(&scaled, 3, 1.0).unwrap();
            let st = AttentionState { means: vec![1.0, 2.0, 3.0] };
            prop_assert_eq!(
                advance_means(&st, &a, AttentionMode::Inference),
                advance_means(&st, &b, AttentionMode::Inference)
            );
        }
    }
}
