mod common;

use common::*;
use proptest::prelude::*;
use spikelab::codec::{direct_encode, event_bin, EncodingConfig, EventRecord};
use spikelab::layers::{conv2d, fold_tdbn_into_conv, tdbn_forward, BnMode, ConvGeom, ConvSpec, TdBNParams};
use spikelab::neuron::{ilif_step, lif_step, quantize, unroll_to_binary, ILIFParams, LIFParams, MembraneState};
use spikelab::{RealTensor, Shape, SpikeTensor};

fn tensor(shape: Shape, lo: f64, hi: f64) -> impl Strategy<Value = RealTensor> {
    prop::collection::vec(lo..hi, shape.numel()).prop_map(move |v| RealTensor::from_vec(shape, v).unwrap())
}

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_map(|(t, c, h, w)| Shape::new(t, c, h, w))
}

proptest! {
    #[test]
    fn ilif_soft_reset_identity_and_range(
        (h, x) in small_shape().prop_flat_map(|s| {
            let s1 = s.with_t(1);
            (tensor(s1, -20.0, 20.0), tensor(s1, -1e6, 1e6))
        }),
        tau in 0.0f64..1.0,
        d in 1i32..9,
    ) {
        let p = ILIFParams::new(tau, 1.0, d).unwrap();
        let (s, next) = ilif_step(&MembraneState { h: h.clone() }, &x, &p).unwrap();
        for i in 0..x.len() {
            let u = tau * h.data()[i] + x.data()[i];
            prop_assert_eq!(next.h.data()[i] + s.data()[i] as f64, u);
            prop_assert!((0..=d).contains(&s.data()[i]));
            prop_assert_eq!(s.data()[i], quantize(u, d));
        }
    }

    #[test]
    fn lif_spikes_are_binary(x in tensor(Shape::new(1, 2, 3, 3), -5.0, 5.0), v_th in 0.1f64..3.0) {
        let p = LIFParams::new(0.25, v_th, 1.0).unwrap();
        let (s, next) = lif_step(&MembraneState::resting(x.shape()), &x, &p).unwrap();
        for i in 0..x.len() {
            prop_assert!(s.data()[i] == 0 || s.data()[i] == 1);
            prop_assert!((next.h.data()[i] + v_th * s.data()[i] as f64 - x.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn unrolled_counts_sum_back(
        (s, d) in (small_shape(), 1i32..6).prop_flat_map(|(s, d)| {
            (prop::collection::vec(0..=d, s.numel()).prop_map(move |v| SpikeTensor::from_vec(s, v, d).unwrap()), Just(d))
        })
    ) {
        let b = unroll_to_binary(&s).unwrap();
        let sh = s.shape();
        prop_assert_eq!(b.shape(), sh.with_t(sh.t * d as usize));
        let slice = sh.slice_len();
        for t in 0..sh.t {
            for i in 0..slice {
                let total: i32 = (0..d as usize).map(|k| b.data()[(t * d as usize + k) * slice + i]).sum();
                prop_assert_eq!(total, s.data()[t * slice + i]);
            }
        }
    }

    #[test]
    fn ilif_matches_unrolled_if(u in -3.0f64..10.0, d in 1i32..9) {
        prop_assert_eq!(quantize(u, d), if_unrolled_count(u, d));
    }

    #[test]
    fn folded_tdbn_matches_unfused(
        x in tensor(Shape::batched(2, 2, 2, 4, 4), -2.0, 2.0),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        stats in prop::collection::vec((0.2f64..2.0, -1.0f64..1.0, 0.1f64..3.0, -1.0f64..1.0), 3),
        alpha in 0.5f64..1.5,
    ) {
        let conv = ConvSpec::new(ConvGeom::same(2, 3, 3, 1), w, b).unwrap();
        let mut p = TdBNParams::new(3, 1.0);
        p.alpha = alpha;
        p.mode = BnMode::Eval;
        p.lambda = stats.iter().map(|s| s.0).collect();
        p.beta = stats.iter().map(|s| s.1).collect();
        p.var_inf = stats.iter().map(|s| s.2).collect();
        p.mu_inf = stats.iter().map(|s| s.3).collect();
        let unfused = tdbn_forward(&conv2d(&x, &conv).unwrap(), &mut p.clone()).unwrap();
        let folded = conv2d(&x, &fold_tdbn_into_conv(&conv, &p).unwrap()).unwrap();
        prop_assert!(unfused.max_abs_diff(&folded) <= 1e-9);
    }

    #[test]
    fn conv_is_linear(
        a in tensor(Shape::new(1, 2, 5, 5), -1.0, 1.0),
        b in tensor(Shape::new(1, 2, 5, 5), -1.0, 1.0),
        w in prop::collection::vec(-1.0f64..1.0, 4 * 2 * 9),
        (p, q) in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let spec = ConvSpec::new(ConvGeom::same(2, 4, 3, 2), w, vec![0.0; 4]).unwrap();
        let mix = RealTensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| p * x + q * y).collect()).unwrap();
        let lhs = conv2d(&mix, &spec).unwrap();
        let (ca, cb) = (conv2d(&a, &spec).unwrap(), conv2d(&b, &spec).unwrap());
        let rhs = RealTensor::from_vec(ca.shape(), ca.data().iter().zip(cb.data()).map(|(x, y)| p * x + q * y).collect()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn direct_encoding_repeats_frames(x in tensor(Shape::new(1, 2, 3, 4), -1.0, 1.0), t in 1usize..6) {
        let e = direct_encode(&x, t).unwrap();
        prop_assert_eq!(e.shape(), x.shape().with_t(t));
        for k in 0..t {
            prop_assert_eq!(e.time_slice(k), x.clone());
        }
    }

    #[test]
    fn event_binning_conserves_in_window_events(
        events in prop::collection::vec((0u64..1500, 0u32..6, 0u32..5, 0u8..2), 0..200),
        t_steps in 1usize..6,
    ) {
        let cfg = EncodingConfig { t_steps, window_us: 1000, width: 6, height: 5, clip: None, normalize: false };
        let ev: Vec<EventRecord> = events.iter().map(|&(t, x, y, p)| EventRecord { t, x, y, p }).collect();
        let frames = event_bin(&ev, &cfg).unwrap();
        let inside = ev.iter().filter(|e| e.t <= 1000).count();
        prop_assert_eq!(frames.sum(), inside as f64);
        prop_assert!(frames.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }
}
