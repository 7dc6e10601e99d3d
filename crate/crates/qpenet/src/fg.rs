//! Foreground prototype evolution: a support-query-support loop.
//!
//! A preliminary prototype pooled from the support segments the query
//! coarsely; pooling the query features under that prediction yields a
//! pseudo-prototype carrying the query's specific needs; reverse-segmenting
//! the support with it splits the support mask into the region that matches
//! the query (main) and the remainder (aux), each pooled into an evolved
//! prototype.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ConvHead;
use crate::tape::{ParamStore, Tape, Tensor};
use crate::types::{FeatureMap, Mask, Prototype, PrototypeRole};

/// Denominator guard for masked pooling.
pub const MAP_EPSILON: f64 = 1e-6;

/// Default binarization threshold for the reverse-segmentation split.
pub const DEFAULT_TAU: f64 = 0.5;

/// The four foreground prototypes produced per episode.
#[derive(Debug, Clone)]
pub struct FgPrototypeSet {
    pub pre: Prototype,
    pub pseudo: Prototype,
    pub main: Prototype,
    pub aux: Prototype,
}

/// Mask-weighted mean of a feature map on the tape:
/// `p[k] = sum_i f(i)[k] m(i) / (sum_i m(i) + eps)`.
pub fn masked_average_pool_t(tape: &Tape, f: &Tensor, m: &Tensor, eps: f64) -> Tensor {
    let c = f.shape()[2];
    let weighted = tape.mul(f, &tape.broadcast_c(m, c));
    let num = tape.sum_hw(&weighted);
    let den = tape.sum_all(m);
    tape.div_s_eps(&num, &den, eps)
}

/// Masked average pooling over domain types. `eps = None` disables the guard
/// and turns an all-zero mask into an [`Error::EmptyMask`].
pub fn masked_average_pool_with(
    f: &FeatureMap,
    m: &Mask,
    role: PrototypeRole,
    eps: Option<f64>,
) -> Result<Prototype> {
    if (m.height(), m.width()) != (f.height(), f.width()) {
        return Err(Error::ShapeMismatch(format!(
            "mask [{}, {}] does not match features [{}, {}]",
            m.height(),
            m.width(),
            f.height(),
            f.width()
        )));
    }
    let mask_sum: f64 = m.data.sum();
    let eps = match eps {
        Some(e) => e,
        None if mask_sum == 0.0 => return Err(Error::EmptyMask),
        None => 0.0,
    };
    let tape = Tape::eval();
    let p = masked_average_pool_t(
        &tape,
        &tape.constant3(f.data.clone()),
        &tape.constant2(m.data.clone()),
        eps,
    );
    Prototype::new(p.to_array1(), role)
}

pub fn masked_average_pool(f: &FeatureMap, m: &Mask, role: PrototypeRole) -> Result<Prototype> {
    masked_average_pool_with(f, m, role, Some(MAP_EPSILON))
}

/// Split a hard support mask by thresholding the reverse segmentation at
/// `tau`: the main part overlaps the reverse prediction, the aux part is the
/// rest. The two parts partition the input mask exactly.
pub fn decouple_mask(m_s: &Mask, y_rev: &Array2<f64>, tau: f64) -> Result<(Mask, Mask)> {
    if !m_s.is_hard() {
        return Err(Error::InvalidConfig("decouple_mask expects a hard mask".into()));
    }
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")));
    }
    if m_s.data.dim() != y_rev.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs reverse prediction {:?}",
            m_s.data.dim(),
            y_rev.dim()
        )));
    }
    let mut main = m_s.data.clone();
    let mut aux = m_s.data.clone();
    ndarray::Zip::from(&mut main)
        .and(&mut aux)
        .and(y_rev)
        .for_each(|main, aux, &rev| {
            if rev >= tau {
                *aux = 0.0;
            } else {
                *main = 0.0;
            }
        });
    Ok((Mask::hard(main)?, Mask::hard(aux)?))
}

/// The PPG/DPE heads. The reverse head may share weights with the preliminary
/// head; by default the two tasks get their own parameters since they
/// condition on different prototypes.
pub struct FgEvolution {
    head_pre: ConvHead,
    head_rev: Option<ConvHead>,
    pub tau: f64,
}

impl FgEvolution {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        hidden: usize,
        depth: usize,
        share_heads: bool,
        tau: f64,
    ) -> Self {
        let head_pre = ConvHead::new(ps, rng, "fg.head_pre", 2 * channels, hidden, depth);
        let head_rev = if share_heads {
            None
        } else {
            Some(ConvHead::new(ps, rng, "fg.head_rev", 2 * channels, hidden, depth))
        };
        Self {
            head_pre,
            head_rev,
            tau,
        }
    }

    fn rev_head(&self) -> &ConvHead {
        self.head_rev.as_ref().unwrap_or(&self.head_pre)
    }

    /// Preliminary query segmentation from the support prototype:
    /// `y_pre = Convs(concat(F_q, BC(P_pre)))`.
    pub fn predict_query_fg(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_q: &Tensor,
        p_pre: &Tensor,
    ) -> Tensor {
        let (h, w) = (f_q.shape()[0], f_q.shape()[1]);
        let joined = tape.concat_c(&[f_q, &tape.broadcast_hw(p_pre, h, w)]);
        self.head_pre.forward(tape, ps, &joined)
    }

    /// Reverse segmentation of the support under the pseudo-prototype:
    /// `y_rev = Convs(concat(F_s, BC(P_psd)))`.
    pub fn reverse_segment(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        f_s: &Tensor,
        p_psd: &Tensor,
    ) -> Tensor {
        let (h, w) = (f_s.shape()[0], f_s.shape()[1]);
        let joined = tape.concat_c(&[f_s, &tape.broadcast_hw(p_psd, h, w)]);
        self.rev_head().forward(tape, ps, &joined)
    }
}

/// Pool the pseudo-prototype from the query under its own soft preliminary
/// prediction (the soft map is used directly as pooling weights).
pub fn pseudo_prototype_t(tape: &Tape, f_q: &Tensor, y_pre: &Tensor) -> Tensor {
    masked_average_pool_t(tape, f_q, y_pre, MAP_EPSILON)
}

/// Pool evolved prototypes from the decoupled regions. An empty region falls
/// back to the preliminary prototype so downstream shapes never vary.
pub fn evolve_prototypes_t(
    tape: &Tape,
    f_s: &Tensor,
    m_main: &Mask,
    m_aux: &Mask,
    p_pre: &Tensor,
) -> (Tensor, Tensor) {
    let pool = |m: &Mask| -> Tensor {
        if m.data.sum() == 0.0 {
            p_pre.clone()
        } else {
            masked_average_pool_t(tape, f_s, &tape.constant2(m.data.clone()), MAP_EPSILON)
        }
    };
    (pool(m_main), pool(m_aux))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::tape::{finite_difference, max_relative_error, ParamStore};
    use crate::types::align_mask;
    use ndarray::{arr3, array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(data: Array3<f64>) -> FeatureMap {
        FeatureMap::new(data).unwrap()
    }

    #[test]
    fn map_hand_example() {
        // (1 + 3) / 2 on the first column.
        let f = fmap(arr3(&[[[1.0], [2.0]], [[3.0], [4.0]]]));
        let m = Mask::hard(array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let p = masked_average_pool(&f, &m, PrototypeRole::FgPre).unwrap();
        assert!((p.data[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn map_full_mask_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = fmap(Array3::from_shape_fn((3, 4, 2), |_| rng.random::<f64>()));
        let m = Mask::hard(Array2::ones((3, 4))).unwrap();
        let p = masked_average_pool(&f, &m, PrototypeRole::FgPre).unwrap();
        for k in 0..2 {
            let mean = f.data.slice(ndarray::s![.., .., k]).mean().unwrap();
            assert!((p.data[k] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn map_zero_mask_with_guard_gives_zero_vector() {
        let f = fmap(Array3::ones((2, 2, 3)));
        let m = Mask::hard(Array2::zeros((2, 2))).unwrap();
        let p = masked_average_pool(&f, &m, PrototypeRole::FgPre).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_zero_mask_without_guard_is_empty_mask_error() {
        let f = fmap(Array3::ones((2, 2, 3)));
        let m = Mask::hard(Array2::zeros((2, 2))).unwrap();
        let err = masked_average_pool_with(&f, &m, PrototypeRole::FgPre, None);
        assert!(matches!(err, Err(Error::EmptyMask)));
    }

    #[test]
    fn map_constant_features_give_constant_prototype() {
        let f = fmap(Array3::from_elem((4, 4, 3), 2.5));
        let m = Mask::hard(array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0]
        ])
        .unwrap();
        let p = masked_average_pool_with(&f, &m, PrototypeRole::FgPre, None).unwrap();
        assert!(p.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn map_soft_mask_scaling_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fmap(Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>()));
        let base = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let m1 = Mask::soft(base.clone()).unwrap();
        let p1 = masked_average_pool(&f, &m1, PrototypeRole::FgPseudo).unwrap();
        // Scale weights by 7: compare through the eps-free route since the
        // guard breaks exact cancellation at the 1e-7 level.
        let m7 = Mask {
            data: base.mapv(|v| v * 7.0),
            kind: crate::types::MaskKind::Soft,
        };
        let p7 = masked_average_pool_with(&f, &m7, PrototypeRole::FgPseudo, Some(0.0)).unwrap();
        let p1_exact = masked_average_pool_with(&f, &m1, PrototypeRole::FgPseudo, Some(0.0)).unwrap();
        for k in 0..3 {
            assert!((p7.data[k] - p1_exact.data[k]).abs() < 1e-12);
            assert!((p1.data[k] - p1_exact.data[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn map_output_bounded_by_masked_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let f = fmap(Array3::from_shape_fn((5, 5, 4), |_| rng.random::<f64>() * 4.0 - 2.0));
            let m = Mask::hard(Array2::from_shape_fn((5, 5), |_| {
                if rng.random::<f64>() > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }))
            .unwrap();
            if m.active_count() == 0 {
                continue;
            }
            let p = masked_average_pool_with(&f, &m, PrototypeRole::FgPre, None).unwrap();
            for k in 0..4 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..5 {
                    for j in 0..5 {
                        if m.data[[i, j]] > 0.0 {
                            lo = lo.min(f.data[[i, j, k]]);
                            hi = hi.max(f.data[[i, j, k]]);
                        }
                    }
                }
                assert!(p.data[k] >= lo - 1e-12 && p.data[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ps.register("f", gaussian(&mut rng, &[4, 4, 3], 1.0), false);
        let m_data = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 4]), |_| {
            rng.random::<f64>()
        });
        let m = ps.register("m", m_data, false);
        let probe = gaussian(&mut rng, &[3], 1.0);
        for id in [f, m] {
            let probe = probe.clone();
            let run = move |tape: &Tape, ps: &ParamStore| {
                let fi = tape.param(ps, f);
                let mi = tape.param(ps, m);
                let p = masked_average_pool_t(tape, &fi, &mi, MAP_EPSILON);
                tape.sum_all(&tape.mul(&p, &tape.constant(probe.clone())))
            };
            let tape = Tape::new();
            let loss = run(&tape, &ps);
            let grads = tape.backward(&loss);
            let analytic = grads.get(id).unwrap().clone();
            let numeric = finite_difference(&mut ps, id, 1e-6, |s| {
                let t = Tape::eval();
                run(&t, s).scalar()
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn decouple_hand_example() {
        let m_s = Mask::hard(array![[1.0, 1.0], [0.0, 0.0]]).unwrap();
        let y_rev = array![[0.9, 0.2], [0.8, 0.1]];
        let (main, aux) = decouple_mask(&m_s, &y_rev, 0.5).unwrap();
        assert_eq!(main.data, array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(aux.data, array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn decouple_saturated_reverse_prediction() {
        let m_s = Mask::hard(array![[1.0, 0.0], [1.0, 1.0]]).unwrap();
        let y_rev = Array2::from_elem((2, 2), 0.9);
        let (main, aux) = decouple_mask(&m_s, &y_rev, 0.5).unwrap();
        assert_eq!(main.data, m_s.data);
        assert!(aux.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decouple_empty_mask_gives_empty_parts() {
        let m_s = Mask::hard(Array2::zeros((3, 3))).unwrap();
        let y_rev = Array2::from_elem((3, 3), 0.7);
        let (main, aux) = decouple_mask(&m_s, &y_rev, 0.5).unwrap();
        assert!(main.data.iter().all(|&v| v == 0.0));
        assert!(aux.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decouple_partitions_exactly_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m_s = Mask::hard(Array2::from_shape_fn((6, 6), |_| {
                if rng.random::<f64>() > 0.4 {
                    1.0
                } else {
                    0.0
                }
            }))
            .unwrap();
            let y_rev = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
            let tau = 0.05 + 0.9 * rng.random::<f64>();
            let (main, aux) = decouple_mask(&m_s, &y_rev, tau).unwrap();
            let sum = &main.data + &aux.data;
            assert_eq!(sum, m_s.data);
            assert!((&main.data * &aux.data).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn predict_query_fg_stays_in_unit_interval() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fg = FgEvolution::new(&mut ps, &mut rng, 8, 16, 2, false, DEFAULT_TAU);
        let tape = Tape::eval();
        let f_q = tape.constant(gaussian(&mut rng, &[6, 6, 8], 1.0));
        let p = tape.constant(gaussian(&mut rng, &[8], 1.0));
        let y = fg.predict_query_fg(&tape, &ps, &f_q, &p);
        assert_eq!(y.shape(), &[6, 6]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn reverse_segment_deterministic_under_fixed_seed() {
        let build = || {
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let fg = FgEvolution::new(&mut ps, &mut rng, 4, 8, 2, false, DEFAULT_TAU);
            let tape = Tape::eval();
            let f_s = tape.constant(gaussian(&mut rng, &[5, 5, 4], 1.0));
            let p = tape.constant(gaussian(&mut rng, &[4], 1.0));
            fg.reverse_segment(&tape, &ps, &f_s, &p).data().clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn shared_heads_reuse_parameters() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shared = FgEvolution::new(&mut ps, &mut rng, 4, 8, 1, true, DEFAULT_TAU);
        assert!(shared.head_rev.is_none());
        let n_shared = ps.len();
        let mut ps2 = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let separate = FgEvolution::new(&mut ps2, &mut rng2, 4, 8, 1, false, DEFAULT_TAU);
        assert!(separate.head_rev.is_some());
        assert_eq!(ps2.len(), 2 * n_shared);
    }

    #[test]
    fn pseudo_prototype_uniform_weights_equal_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = gaussian(&mut rng, &[4, 4, 3], 1.0);
        let tape = Tape::eval();
        let ft = tape.constant(f.clone());
        let y = tape.constant2(Array2::from_elem((4, 4), 0.5));
        let p = pseudo_prototype_t(&tape, &ft, &y).to_array1();
        let f3 = ft.to_array3();
        for k in 0..3 {
            let mean = f3.slice(ndarray::s![.., .., k]).mean().unwrap();
            assert!((p[k] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn pseudo_prototype_with_true_mask_matches_oracle_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = fmap(Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>()));
        let gt = Mask::hard(Array2::from_shape_fn((4, 4), |(i, _)| {
            if i < 2 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let tape = Tape::eval();
        let p_t = pseudo_prototype_t(
            &tape,
            &tape.constant3(f.data.clone()),
            &tape.constant2(gt.data.clone()),
        );
        let p_map = masked_average_pool(&f, &gt, PrototypeRole::FgPseudo).unwrap();
        for k in 0..3 {
            assert!((p_t.to_array1()[k] - p_map.data[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn evolve_prototypes_degenerate_partition_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = gaussian(&mut rng, &[4, 4, 3], 1.0);
        let m_hat = Mask::hard(Array2::from_shape_fn((4, 4), |(i, j)| {
            if i + j < 3 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let empty = Mask::hard(Array2::zeros((4, 4))).unwrap();
        let tape = Tape::eval();
        let ft = tape.constant(f);
        let p_pre = masked_average_pool_t(
            &tape,
            &ft,
            &tape.constant2(m_hat.data.clone()),
            MAP_EPSILON,
        );
        let (main, aux) = evolve_prototypes_t(&tape, &ft, &m_hat, &empty, &p_pre);
        assert_eq!(main.data(), p_pre.data());
        assert_eq!(aux.data(), p_pre.data());
    }

    #[test]
    fn evolve_prototypes_disjoint_pixels_and_swap_symmetry() {
        let f = fmap(arr3(&[[[1.0, 10.0], [5.0, 50.0]], [[0.0, 0.0], [0.0, 0.0]]]));
        let m_main = Mask::hard(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let m_aux = Mask::hard(array![[0.0, 1.0], [0.0, 0.0]]).unwrap();
        let tape = Tape::eval();
        let ft = tape.constant3(f.data.clone());
        let p_pre = tape.constant1(ndarray::arr1(&[0.0, 0.0]));
        let (a, b) = evolve_prototypes_t(&tape, &ft, &m_main, &m_aux, &p_pre);
        assert!((a.to_array1()[0] - 1.0).abs() < 1e-5);
        assert!((a.to_array1()[1] - 10.0).abs() < 1e-4);
        assert!((b.to_array1()[0] - 5.0).abs() < 1e-5);
        assert!((b.to_array1()[1] - 50.0).abs() < 1e-4);
        let (c, d) = evolve_prototypes_t(&tape, &ft, &m_aux, &m_main, &p_pre);
        assert_eq!(a.data(), d.data());
        assert_eq!(b.data(), c.data());
    }

    #[test]
    fn broadcast_of_pooled_constant_map_is_identity() {
        // broadcast o MAP on a constant map reproduces the map.
        let f = fmap(Array3::from_elem((3, 3, 2), 1.25));
        let m = Mask::hard(Array2::ones((3, 3))).unwrap();
        let p = masked_average_pool_with(&f, &m, PrototypeRole::FgPre, None).unwrap();
        let back = crate::types::broadcast(&p, 3, 3).unwrap();
        assert_eq!(back.data, f.data);
    }

    #[test]
    fn aligned_mask_partition_survives_downsampling() {
        // Partition invariant holds against the aligned mask, not the raw one.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let big = Mask::hard(Array2::from_shape_fn((16, 16), |_| {
            if rng.random::<f64>() > 0.5 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let m_hat = align_mask(&big, 4, 4).unwrap();
        let y_rev = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let (main, aux) = decouple_mask(&m_hat, &y_rev, 0.3).unwrap();
        assert_eq!(&main.data + &aux.data, m_hat.data);
    }

    use ndarray::Array2;
}
