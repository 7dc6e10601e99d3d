//! Background prototype evolution. A single learnable vector accumulates
//! background semantics across all training episodes; per episode a
//! query-derived gate cleanses it, suppressing components that resemble the
//! current foreground class.

use rand::Rng;

use crate::nn::{gaussian, ConvHead, Linear};
use crate::tape::{ParamId, ParamStore, Tape, Tensor};

/// Initial scale of the global background prototype; small enough to keep
/// early background logits near 0.5.
pub const BG_INIT_STD: f64 = 0.02;

/// Learnable global background prototype plus the cleanser (two fully
/// connected layers with a ReLU between and a sigmoid gate on the output)
/// and the background prediction head. Persists across episodes and is
/// serialized in checkpoints like any other parameter.
pub struct GlobalBgState {
    pub prototype: ParamId,
    fc1: Linear,
    fc2: Linear,
    pub bg_head: ConvHead,
    channels: usize,
}

impl GlobalBgState {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        head_hidden: usize,
        head_depth: usize,
    ) -> Self {
        let prototype = ps.register(
            "bg.global_prototype",
            gaussian(rng, &[channels], BG_INIT_STD),
            false,
        );
        let fc1 = Linear::new(ps, rng, "bg.fc1", channels, channels);
        let fc2 = Linear::new(ps, rng, "bg.fc2", channels, channels);
        let bg_head = ConvHead::new(ps, rng, "bg.head", 2 * channels, head_hidden, head_depth);
        Self {
            prototype,
            fc1,
            fc2,
            bg_head,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Soft background mask of a feature map from the global prototype:
    /// `y_bg = Convs(concat(F, BC(P_global)))`. Callers run this on support
    /// features only during training.
    pub fn predict_bg(&self, tape: &Tape, ps: &ParamStore, f: &Tensor) -> Tensor {
        assert_eq!(f.shape()[2], self.channels, "predict_bg channel mismatch");
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let proto = tape.param(ps, self.prototype);
        let joined = tape.concat_c(&[f, &tape.broadcast_hw(&proto, h, w)]);
        self.bg_head.forward(tape, ps, &joined)
    }

    /// Cleanse the global prototype with a query-derived gate:
    /// `P_bg = P_global * sigmoid(FC(relu(FC(GAP(F_q * y_q_bg)))))`.
    /// GAP divides by the full grid size, not the mask sum.
    pub fn cleanse(&self, tape: &Tape, ps: &ParamStore, f_q: &Tensor, y_q_bg: &Tensor) -> Tensor {
        assert_eq!(f_q.shape()[2], self.channels, "cleanse channel mismatch");
        let weighted = tape.mul(f_q, &tape.broadcast_c(y_q_bg, self.channels));
        let pooled = tape.mean_hw(&weighted);
        let row = tape.reshape(&pooled, &[1, self.channels]);
        let hidden = tape.relu(&self.fc1.forward(tape, ps, &row));
        let gate_logits = self.fc2.forward(tape, ps, &hidden);
        let gate = tape.sigmoid(&tape.reshape(&gate_logits, &[self.channels]));
        let proto = tape.param(ps, self.prototype);
        tape.mul(&proto, &gate)
    }

    /// Direct access to the cleanser layers (tests force specific gates).
    pub fn cleanser(&self) -> (&Linear, &Linear) {
        (&self.fc1, &self.fc2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::tape::Tape;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(seed: u64, c: usize) -> (ParamStore, GlobalBgState) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = GlobalBgState::new(&mut ps, &mut rng, c, 8, 1);
        (ps, st)
    }

    #[test]
    fn predict_bg_range_and_zero_weight_head() {
        let (mut ps, st) = state(0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::eval();
        let f = tape.constant(gaussian(&mut rng, &[5, 5, 4], 1.0));
        let y = st.predict_bg(&tape, &ps, &f);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        ps.value_mut(st.bg_head.out.weight).fill(0.0);
        ps.value_mut(st.bg_head.out.bias).fill(0.0);
        let y = st.predict_bg(&tape, &ps, &f);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cleanse_gate_forced_to_identity_preserves_prototype() {
        let (mut ps, st) = state(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Saturate the gate: zero the second FC weight, huge positive bias.
        let (_, fc2) = st.cleanser();
        ps.value_mut(fc2.weight).fill(0.0);
        ps.value_mut(fc2.bias).fill(50.0);
        let tape = Tape::eval();
        let f = tape.constant(gaussian(&mut rng, &[4, 4, 4], 1.0));
        let y = tape.constant2(Array2::from_elem((4, 4), 0.5));
        let p_bg = st.cleanse(&tape, &ps, &f, &y);
        let global = ps.value(st.prototype);
        for (a, b) in p_bg.data().iter().zip(global.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cleanse_gate_forced_to_zero_annihilates() {
        let (mut ps, st) = state(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, fc2) = st.cleanser();
        ps.value_mut(fc2.weight).fill(0.0);
        ps.value_mut(fc2.bias).fill(-50.0);
        let tape = Tape::eval();
        let f = tape.constant(gaussian(&mut rng, &[4, 4, 4], 1.0));
        let y = tape.constant2(Array2::from_elem((4, 4), 1.0));
        let p_bg = st.cleanse(&tape, &ps, &f, &y);
        assert!(p_bg.data().iter().all(|&v| v.abs() < 1e-20));
    }

    #[test]
    fn cleanse_zero_mask_reduces_to_bias_path() {
        // With y_q_bg = 0 the GAP input is zero and the gate is a pure bias
        // path: sigmoid(W2 relu(b1) + b2), hand-computable.
        let (mut ps, st) = state(6, 2);
        let (fc1, fc2) = (st.cleanser().0, st.cleanser().1);
        let set = |ps: &mut ParamStore, id, vals: &[f64]| {
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&shape), vals.to_vec()).unwrap();
        };
        set(&mut ps, fc1.bias, &[0.3, -0.2]);
        set(&mut ps, fc2.weight, &[1.0, 0.5, -1.0, 2.0]);
        set(&mut ps, fc2.bias, &[0.1, -0.1]);
        set(&mut ps, st.prototype, &[2.0, -3.0]);

        let tape = Tape::eval();
        let f = tape.constant(gaussian(&mut ChaCha8Rng::seed_from_u64(7), &[3, 3, 2], 1.0));
        let y = tape.constant2(Array2::zeros((3, 3)));
        let p_bg = st.cleanse(&tape, &ps, &f, &y).to_array1();

        // relu(b1) = [0.3, 0]; logits = W2^T rows? weight layout is
        // [cin, cout], so logit_j = sum_i h_i W[i, j] + b_j.
        let h = [0.3f64, 0.0];
        let logit0 = h[0] * 1.0 + h[1] * (-1.0) + 0.1;
        let logit1 = h[0] * 0.5 + h[1] * 2.0 + (-0.1);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((p_bg[0] - 2.0 * sig(logit0)).abs() < 1e-12);
        assert!((p_bg[1] - (-3.0) * sig(logit1)).abs() < 1e-12);
    }

    #[test]
    fn cleansed_prototype_is_a_contraction_in_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..100 {
            let (ps, st) = state(100 + trial, 6);
            let tape = Tape::eval();
            let f = tape.constant(gaussian(&mut rng, &[4, 4, 6], 2.0));
            let y = tape.constant2(Array2::from_shape_fn((4, 4), |_| rng.random::<f64>()));
            let p_bg = st.cleanse(&tape, &ps, &f, &y);
            let global = ps.value(st.prototype);
            for (a, b) in p_bg.data().iter().zip(global.iter()) {
                assert!(a.abs() <= b.abs());
            }
        }
    }

    #[test]
    fn prototype_receives_gradient_from_bg_losses() {
        let (ps, st) = state(9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::new();
        let f_s = tape.constant(gaussian(&mut rng, &[4, 4, 4], 1.0));
        let f_q = tape.constant(gaussian(&mut rng, &[4, 4, 4], 1.0));
        let y_s = st.predict_bg(&tape, &ps, &f_s);
        let y_q = st.predict_bg(&tape, &ps, &f_q);
        let target = ArrayD::from_elem(IxDyn(&[4, 4]), 1.0);
        let loss = tape.add(&tape.bce(&y_s, &target, 1e-7), &tape.bce(&y_q, &target, 1e-7));
        let grads = tape.backward(&loss);
        let g = grads.get(st.prototype).expect("global prototype must get gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cleanse_is_deterministic() {
        let (ps, st) = state(11, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = gaussian(&mut rng, &[4, 4, 4], 1.0);
        let y = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let run = || {
            let tape = Tape::eval();
            st.cleanse(&tape, &ps, &tape.constant(f.clone()), &tape.constant2(y.clone()))
                .data()
                .clone()
        };
        assert_eq!(run(), run());
    }
}
