use std::cell::RefCell;

use fair_denoise::attention::{
    shift_channels, Attention, AttentionConfig, AttentionKind, MultiScaleAttention, ShiftConv,
};
use fair_denoise::nn::{AttentionProbe, Ctx, ParamBuilder, ParamStore};
use fair_denoise::tensor::{grad_check, Tape, Tensor};

fn input(c: usize, h: usize, w: usize, salt: usize) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], |i| {
        (((i + salt) * 7919) % 211) as f64 / 105.5 - 1.0
    })
}

fn cfg(kind: AttentionKind, heads: usize, window: usize) -> AttentionConfig {
    AttentionConfig::new(kind, heads, window)
}

fn build(
    cfg: &AttentionConfig,
    channels: usize,
    block: usize,
    seed: u64,
) -> (Attention, ParamStore<f64>) {
    let mut pb = ParamBuilder::new(seed);
    let att = Attention::build(&mut pb, cfg, channels, cfg.heads, block).unwrap();
    (att, pb.finish().cast())
}

fn apply(
    att: &Attention,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    probe: Option<&RefCell<AttentionProbe>>,
) -> Tensor<f64> {
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let cx = match probe {
        Some(p) => Ctx::with_probe(&params, p),
        None => Ctx::new(&params),
    };
    let (y, _) = att
        .forward(&cx, tape.constant(x.clone()), None, "t")
        .unwrap();
    y.value().as_ref().clone()
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    store
        .get_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

/// Checks gradients w.r.t. the input and every parameter tensor.
fn check_all_grads(att: &Attention, store: &ParamStore<f64>, x: &Tensor<f64>) {
    let probe_w = Tensor::from_fn(x.shape(), |i| ((i * 31) % 17) as f64 / 8.0 - 1.0);
    let wx = probe_w.clone();
    let rep = grad_check(
        |tape, xv| {
            let params = store.bind(tape, false);
            let cx = Ctx::new(&params);
            let (y, _) = att.forward(&cx, xv, None, "g")?;
            Ok(y.mul(tape.constant(wx.clone()))?.sum())
        },
        x,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "input gradient: {rep:?}");
    for (i, (name, value)) in store.iter().enumerate() {
        let w = probe_w.clone();
        let rep = grad_check(
            |tape, p| {
                let mut params = store.bind(tape, false);
                params[i] = p;
                let cx = Ctx::new(&params);
                let (y, _) = att.forward(&cx, tape.constant(x.clone()), None, "g")?;
                Ok(y.mul(tape.constant(w.clone()))?.sum())
            },
            value,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "gradient of {name}: {rep:?}");
    }
}

fn pointwise(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64], c: usize) -> Vec<f64> {
    (0..c)
        .map(|o| b.data()[o] + (0..c).map(|i| w.data()[o * c + i] * x[i]).sum::<f64>())
        .collect()
}

#[test]
fn zero_query_key_gives_window_mean_of_values() {
    let (c, h, w, m) = (4, 8, 8, 4);
    let (att, mut store) = build(&cfg(AttentionKind::PlainWindow, 2, m), c, 0, 11);
    for n in ["q.weight", "q.bias", "k.weight", "k.bias", "rpb"] {
        zero_param(&mut store, n);
    }
    let x = input(c, h, w, 0);
    let y = apply(&att, &store, &x, None);

    let get = |n: &str| store.get(store.find(n).unwrap()).clone();
    let (vw, vb, pw, pbias) = (
        get("v.weight"),
        get("v.bias"),
        get("proj.weight"),
        get("proj.bias"),
    );
    let pix = |y0: usize, x0: usize| -> Vec<f64> { (0..c).map(|ch| x.at(&[ch, y0, x0])).collect() };
    for wy in 0..h / m {
        for wx in 0..w / m {
            let mut mean = vec![0.0; c];
            for yy in wy * m..(wy + 1) * m {
                for xx in wx * m..(wx + 1) * m {
                    let v = pointwise(&vw, &vb, &pix(yy, xx), c);
                    mean.iter_mut()
                        .zip(v)
                        .for_each(|(a, b)| *a += b / (m * m) as f64);
                }
            }
            let want = pointwise(&pw, &pbias, &mean, c);
            for yy in wy * m..(wy + 1) * m {
                for xx in wx * m..(wx + 1) * m {
                    for (ch, w) in want.iter().enumerate() {
                        assert!((y.at(&[ch, yy, xx]) - w).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn roll(x: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.at(&[ch, (y + h - dy) % h, (xx + w - dx) % w])
    })
}

#[test]
fn window_attention_commutes_with_window_translations() {
    let (att, store) = build(&cfg(AttentionKind::PlainWindow, 2, 4), 4, 0, 3);
    let x = input(4, 16, 12, 5);
    let shifted = apply(&att, &store, &roll(&x, 4, 8), None);
    let want = roll(&apply(&att, &store, &x, None), 4, 8);
    assert!(shifted.max_abs_diff(&want) < 1e-12);
}

#[test]
fn degenerate_variants_match_plain_window() {
    let x = input(4, 8, 8, 2);
    let (plain, store) = build(&cfg(AttentionKind::PlainWindow, 2, 4), 4, 0, 9);
    let base = apply(&plain, &store, &x, None);

    let mut rect = cfg(AttentionKind::RectWindow, 2, 4);
    rect.rect = Some([4, 4]);
    for block in [0, 1] {
        let (a, s) = build(&rect, 4, block, 9);
        assert_eq!(s, store);
        assert!(apply(&a, &s, &x, None).bit_eq(&base));
    }

    let sparse = cfg(AttentionKind::SparseDenseWindow, 2, 4);
    let (a, s) = build(&sparse, 4, 1, 9);
    assert!(apply(&a, &s, &x, None).bit_eq(&base));

    let ngram = cfg(AttentionKind::NgramWindow, 2, 4);
    let (a, s) = build(&ngram, 4, 0, 9);
    assert!(apply(&a, &s, &x, None).bit_eq(&base));
}

#[test]
fn ngram_context_on_constant_input_matches_plain() {
    let x = Tensor::full(&[4, 8, 8], 0.3);
    let (plain, store) = build(&cfg(AttentionKind::PlainWindow, 2, 2), 4, 0, 4);
    let mut ng = cfg(AttentionKind::NgramWindow, 2, 2);
    ng.ngram = 1;
    let (a, s) = build(&ng, 4, 0, 4);
    assert_eq!(s, store);
    let base = apply(&plain, &store, &x, None);
    let y = apply(&a, &s, &x, None);
    assert!(y.max_abs_diff(&base) < 1e-12);
    // non-constant inputs see neighbour context
    let x = input(4, 8, 8, 1);
    assert!(apply(&a, &s, &x, None).max_abs_diff(&apply(&plain, &store, &x, None)) > 1e-9);
}

#[test]
fn sparse_windows_differ_from_dense() {
    let mut sd = cfg(AttentionKind::SparseDenseWindow, 2, 4);
    sd.dilation = 2;
    let x = input(4, 8, 8, 3);
    let (dense, s0) = build(&sd, 4, 0, 1);
    let (sparse, s1) = build(&sd, 4, 1, 1);
    assert_eq!(s0, s1);
    assert!(apply(&dense, &s0, &x, None).max_abs_diff(&apply(&sparse, &s1, &x, None)) > 1e-9);
}

#[test]
fn outputs_keep_shape_for_unaligned_sizes() {
    let mut rect = cfg(AttentionKind::RectWindow, 2, 4);
    rect.rect = Some([2, 4]);
    let mut sd = cfg(AttentionKind::SparseDenseWindow, 2, 4);
    sd.dilation = 2;
    let mut ms = cfg(AttentionKind::MultiscaleWindow, 1, 4);
    ms.scales = vec![2, 4];
    for (c, block) in [
        (rect, 1),
        (sd, 1),
        (ms, 0),
        (cfg(AttentionKind::Channel, 2, 1), 0),
    ] {
        let (a, s) = build(&c, 4, block, 2);
        let x = input(4, 7, 10, 0);
        assert_eq!(apply(&a, &s, &x, None).shape(), &[4, 7, 10]);
    }
}

#[test]
fn softmax_rows_are_normalized_everywhere() {
    let mut ms = cfg(AttentionKind::MultiscaleWindow, 1, 4);
    ms.scales = vec![2, 4];
    let mut rect = cfg(AttentionKind::RectWindow, 2, 4);
    rect.rect = Some([2, 4]);
    for c in [
        cfg(AttentionKind::PlainWindow, 2, 4),
        cfg(AttentionKind::Channel, 2, 1),
        ms,
        rect,
    ] {
        let (a, s) = build(&c, 4, 0, 8);
        let probe = RefCell::new(AttentionProbe::default());
        apply(&a, &s, &input(4, 8, 8, 9), Some(&probe));
        let probe = probe.into_inner();
        assert!(!probe.records.is_empty());
        for r in &probe.records {
            let n = *r.maps.shape().last().unwrap();
            for row in r.maps.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn channel_attention_is_pixel_permutation_equivariant() {
    let (att, store) = build(&cfg(AttentionKind::Channel, 2, 1), 8, 0, 5);
    let (c, h, w) = (8, 4, 4);
    let x = input(c, h, w, 4);
    let perm: Vec<usize> = (0..h * w).map(|i| (i * 5 + 3) % (h * w)).collect();
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(&[c, h, w], |i| {
            t.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]
        })
    };
    let a = apply(&att, &store, &permute(&x), None);
    let b = permute(&apply(&att, &store, &x, None));
    assert!(a.max_abs_diff(&b) < 1e-12);

    let single = apply(&att, &store, &input(c, 1, 1, 0), None);
    assert_eq!(single.shape(), &[c, 1, 1]);
}

#[test]
fn shared_query_key_scores_are_symmetric() {
    let mut ms = cfg(AttentionKind::MultiscaleWindow, 1, 4);
    ms.scales = vec![2, 4];
    ms.qk_shared = true;
    let (a, s) = build(&ms, 4, 0, 6);
    let probe = RefCell::new(AttentionProbe::default());
    apply(&a, &s, &input(4, 8, 8, 2), Some(&probe));
    for r in &probe.into_inner().records {
        let scores = r.scores.as_ref().unwrap();
        let (b, n) = (scores.shape()[0], scores.shape()[1]);
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((scores.at(&[bi, i, j]) - scores.at(&[bi, j, i])).abs());
                }
            }
        }
        assert!(worst < 1e-6, "{}: asymmetry {worst}", r.label);
    }
}

#[test]
fn score_sharing_consumer_reuses_provider_maps() {
    let scales = [2, 4];
    let mut pb = ParamBuilder::new(1);
    let provider = pb
        .scope("b0", |pb| {
            MultiScaleAttention::new(pb, 4, &scales, true, false)
        })
        .unwrap();
    let consumer = pb
        .scope("b1", |pb| {
            MultiScaleAttention::new(pb, 4, &scales, true, true)
        })
        .unwrap();
    let store: ParamStore<f64> = pb.finish().cast();
    assert!(store.find("b1.qk.weight").is_none());

    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let probe = RefCell::new(AttentionProbe::default());
    let cx = Ctx::with_probe(&params, &probe);
    let x = tape.constant(input(4, 8, 8, 7));
    let (y, maps) = provider.forward(&cx, x, None, "p").unwrap();
    assert!(consumer.forward(&cx, y, None, "c").is_err());
    let (_, reused) = consumer.forward(&cx, y, Some(&maps), "c").unwrap();
    let recs = probe.into_inner().records;
    assert_eq!(recs.len(), 4);
    for g in 0..2 {
        assert!(recs[g].maps.bit_eq(&recs[g + 2].maps));
        assert!(recs[g + 2].scores.is_none());
        assert!(reused[g].value().bit_eq(&maps[g].value()));
    }
    let wrong = vec![maps[1], maps[0]];
    assert!(consumer
        .forward(&Ctx::new(&params), y, Some(&wrong), "c")
        .is_err());
}

#[test]
fn disabling_qk_sharing_adds_one_key_projection() {
    let c = 10;
    let mut ms = cfg(AttentionKind::MultiscaleWindow, 1, 4);
    ms.scales = vec![2, 4];
    let count = |shared: bool| {
        let mut m = ms.clone();
        m.qk_shared = shared;
        build(&m, c, 0, 0).1.count()
    };
    assert_eq!(count(false) - count(true), c * c + c);

    let mut plain = cfg(AttentionKind::PlainWindow, 2, 4);
    let a = build(&plain, c, 0, 0).1.count();
    plain.qk_shared = true;
    assert_eq!(a - build(&plain, c, 0, 0).1.count(), c * c + c);
}

#[test]
fn shift_conv_with_identity_projection_gathers_neighbours() {
    let (c, h, w) = (5, 5, 6);
    let mut pb = ParamBuilder::new(0);
    let sc = ShiftConv::new(&mut pb, "s", c, c).unwrap();
    let mut store: ParamStore<f64> = pb.finish().cast();
    assert_eq!(store.count(), c * c + c);
    let wid = store.find("s.weight").unwrap();
    *store.get_mut(wid) =
        Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let x = input(c, h, w, 0);
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let cx = Ctx::new(&params);
    let y = sc.forward(&cx, tape.constant(x.clone())).unwrap().value();
    for yy in 1..h - 1 {
        for xx in 1..w - 1 {
            let n = [
                (yy - 1, xx),
                (yy + 1, xx),
                (yy, xx - 1),
                (yy, xx + 1),
                (yy, xx),
            ];
            for (g, &(sy, sx)) in n.iter().enumerate() {
                assert_eq!(y.at(&[g, yy, xx]), x.at(&[g, sy, sx]));
            }
        }
    }
    let zero = shift_channels(tape.constant(Tensor::<f64>::zeros(&[c, h, w]))).unwrap();
    let out = sc.forward(&cx, zero).unwrap().value();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_plain_window() {
    let (a, s) = build(&cfg(AttentionKind::PlainWindow, 2, 4), 4, 0, 21);
    check_all_grads(&a, &s, &input(4, 8, 8, 1));
}

#[test]
fn grad_check_channel() {
    let mut c = cfg(AttentionKind::Channel, 2, 1);
    c.qkv_dwconv = true;
    let (a, s) = build(&c, 8, 0, 22);
    check_all_grads(&a, &s, &input(8, 4, 4, 2));
}

#[test]
fn grad_check_rect_window() {
    let mut c = cfg(AttentionKind::RectWindow, 2, 4);
    c.rect = Some([2, 4]);
    let (a, s) = build(&c, 4, 1, 23);
    check_all_grads(&a, &s, &input(4, 8, 6, 3));
}

#[test]
fn grad_check_sparse_window() {
    let mut c = cfg(AttentionKind::SparseDenseWindow, 2, 2);
    c.dilation = 2;
    let (a, s) = build(&c, 4, 1, 24);
    check_all_grads(&a, &s, &input(4, 8, 8, 4));
}

#[test]
fn grad_check_ngram_window() {
    let mut c = cfg(AttentionKind::NgramWindow, 2, 2);
    c.ngram = 1;
    let (a, s) = build(&c, 4, 0, 25);
    check_all_grads(&a, &s, &input(4, 6, 7, 5));
}

#[test]
fn grad_check_multiscale_window() {
    for shared in [false, true] {
        let mut c = cfg(AttentionKind::MultiscaleWindow, 1, 4);
        c.scales = vec![2, 4];
        c.qk_shared = shared;
        let (a, s) = build(&c, 4, 0, 26);
        check_all_grads(&a, &s, &input(4, 8, 8, 6));
    }
}
