use ccdnet_autograd::gradcheck::{check_gradients, GradCheckConfig};
use ccdnet_autograd::{Conv2dSpec, Roi, Tensor};

/// Deterministic pseudo-random fill in `[-1, 1)`.
fn fill(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn assert_ok(name: &str, r: &ccdnet_autograd::gradcheck::GradCheckReport) {
    assert!(
        r.max_rel_error < 1e-4,
        "{name}: max rel err {:.3e} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn conv2d_strided_dilated() {
    let cfg = GradCheckConfig::default();
    for spec in [
        Conv2dSpec::new(1, 1),
        Conv2dSpec::new(2, 1),
        Conv2dSpec::new(4, 1),
        Conv2dSpec {
            stride: 1,
            pad: 2,
            dilation: 2,
        },
    ] {
        let inputs = [
            fill(&[2, 3, 8, 7], 1),
            fill(&[4, 3, 3, 3], 2),
            fill(&[4], 3),
        ];
        let r = check_gradients(
            &inputs,
            |_, v| v[0].conv2d(v[1], Some(v[2]), spec).square().sum(),
            &cfg,
        );
        assert_ok("conv2d", &r);
    }
    let inputs = [fill(&[2, 3, 5, 5], 4), fill(&[2, 3, 1, 1], 5)];
    let r = check_gradients(
        &inputs,
        |_, v| {
            v[0].conv2d(v[1], None, Conv2dSpec::new(1, 0))
                .square()
                .sum()
        },
        &cfg,
    );
    assert_ok("conv2d 1x1", &r);
}

#[test]
fn deformable_conv_all_inputs() {
    // offsets away from integers so the bilinear kinks are not straddled
    let mut off = fill(&[1, 18, 4, 5], 7).scale(0.7);
    for v in off.data_mut() {
        if (*v - v.round()).abs() < 1e-3 {
            *v += 0.01;
        }
    }
    let inputs = [
        fill(&[1, 2, 4, 5], 6),
        off,
        fill(&[1, 9, 4, 5], 8).map(|v| 0.5 + 0.4 * v),
        fill(&[3, 2, 3, 3], 9),
        fill(&[3], 10),
    ];
    let r = check_gradients(
        &inputs,
        |_, v| {
            v[0].deform_conv2d(v[1], v[2], v[3], Some(v[4]), Conv2dSpec::new(1, 1))
                .square()
                .sum()
        },
        &GradCheckConfig::default(),
    );
    assert_ok("deform_conv2d", &r);
}

#[test]
fn batch_norm_and_resampling() {
    let cfg = GradCheckConfig::default();
    let inputs = [fill(&[3, 2, 3, 4], 11), fill(&[2], 12), fill(&[2], 13)];
    let r = check_gradients(
        &inputs,
        |_, v| {
            let (y, _) = v[0].batch_norm_train(v[1], v[2], 1e-5);
            (y * v[0]).sum()
        },
        &cfg,
    );
    assert_ok("batch_norm", &r);

    let w = fill(&[1, 2, 8, 12], 14);
    let r = check_gradients(
        &[fill(&[1, 2, 2, 3], 15)],
        move |g, v| {
            let wv = g.constant(w.clone());
            (v[0].resize_bilinear(8, 12) * wv).sum()
        },
        &cfg,
    );
    assert_ok("resize_bilinear", &r);

    let rois = [
        Roi {
            batch: 0,
            x0: 0.3,
            y0: 1.2,
            x1: 4.1,
            y1: 3.9,
        },
        Roi {
            batch: 1,
            x0: -0.4,
            y0: 0.0,
            x1: 2.0,
            y1: 5.5,
        },
    ];
    let r = check_gradients(
        &[fill(&[2, 2, 5, 5], 16)],
        move |_, v| v[0].roi_align(&rois, 3, 3).square().sum(),
        &cfg,
    );
    assert_ok("roi_align", &r);
}

#[test]
fn elementwise_reductions_and_losses() {
    let cfg = GradCheckConfig::default();
    let inputs = [fill(&[2, 3, 4], 17), fill(&[2, 1, 4], 18)];
    let r = check_gradients(
        &inputs,
        |_, v| {
            let a = v[0].add_scalar(3.0);
            let s = (a / v[1].exp()).ln().abs().sqrt();
            let t = v[0].sigmoid() * v[1].relu() - v[0].clamp(-0.5, 0.5);
            (s.sum() + t.softmax_last().square().sum()) + v[0].max_all() - v[1].min_all()
        },
        &cfg,
    );
    assert_ok("elementwise", &r);

    let targets = fill(&[3, 4], 19).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let r = check_gradients(
        &[
            fill(&[3, 4], 20).scale(4.0),
            fill(&[4, 5], 21),
            fill(&[5], 22),
        ],
        move |g, v| {
            let w = v[1]
                .reshape(&[5, 4])
                .matmul_t(g.constant(Tensor::ones(&[4, 4])), false, true);
            let h = v[0].linear(w, Some(v[2]));
            let y = v[0].bce_with_logits_sum(&targets);
            y + h.sum_to(&[3, 1]).mean()
                + v[0].gather_flat(&[0, 5, 5, 11]).sum() * v[2].mean_to(&[1])
        },
        &cfg,
    );
    assert_ok("bce/linear/gather", &r);

    let r = check_gradients(
        &[fill(&[2, 2, 3, 3], 23), fill(&[2, 1, 3, 3], 24)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            c.crop(1, 0, 2, 3).narrow(1, 1, 2).square().mean()
        },
        &cfg,
    );
    assert_ok("concat/crop", &r);
}
