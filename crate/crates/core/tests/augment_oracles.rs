use oneshot_dil::augment::{
    affine, bilinear, perspective, replicate, resized_crop, rotate, transform, AugmentConfig, ImageSample,
};
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::Tensor;
use rand::Rng as _;

fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::new(vec![1, h, w], (0..h * w).map(|i| f(i % w, i / w)).collect()).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn bilinear_reproduces_affine_planes() {
    let (h, w) = (5, 7);
    let f = |x: f64, y: f64| 0.1 + 0.05 * x + 0.03 * y;
    let plane: Vec<f64> = (0..h * w).map(|i| f((i % w) as f64, (i / w) as f64)).collect();
    let mut r = SeedTree::new(1).stream("pts");
    for _ in 0..200 {
        let (x, y) = (r.gen_range(0.0..(w - 1) as f64), r.gen_range(0.0..(h - 1) as f64));
        assert!((bilinear(&plane, h, w, x, y) - f(x, y)).abs() < 1e-14);
    }
    assert_eq!(bilinear(&plane, h, w, 3.0, 2.0), plane[2 * w + 3]);
    // Entirely outside: zero fill.
    assert_eq!(bilinear(&plane, h, w, -2.0, 1.0), 0.0);
}

#[test]
fn quarter_turn_is_a_pixel_permutation() {
    let n = 6;
    let img = image(n, n, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
    let turned = rotate(&img, 90.0);
    let c = (n as f64 - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let sx = (c - (y as f64 - c)).round() as usize;
            let sy = (c + (x as f64 - c)).round() as usize;
            let got = turned.data()[y * n + x];
            assert!((got - img.data()[sy * n + sx]).abs() < 1e-12);
        }
    }
    assert!(close(&rotate(&turned, -90.0), &img, 1e-12));
    assert!(close(&rotate(&img, 0.0), &img, 0.0));
}

#[test]
fn neutral_parameters_are_identities() {
    let img = image(8, 6, |x, y| (x as f64 * 0.1 + y as f64 * 0.07).min(1.0));
    assert!(close(&resized_crop(&img, 0, 0, 6, 8), &img, 1e-15));
    assert!(close(&affine(&img, 0.0, 0.0, 0.0), &img, 1e-15));
    let corners = [(0.0, 0.0), (5.0, 0.0), (5.0, 7.0), (0.0, 7.0)];
    assert!(close(&perspective(&img, corners).unwrap(), &img, 1e-12));

    let sample = ImageSample::new(img.clone(), 3).unwrap();
    let mut r = SeedTree::new(2).stream("aug");
    let out = transform(&sample, &AugmentConfig::identity(), &mut r).unwrap();
    assert!(close(&out.image, &img, 1e-12));
    assert_eq!(out.label, 3);
}

#[test]
fn integer_translation_shifts_pixels() {
    let img = image(5, 5, |x, y| (x + 5 * y) as f64 / 25.0);
    let moved = affine(&img, 1.0, 2.0, 0.0);
    for y in 0..5 {
        for x in 0..5 {
            let expected = if x >= 1 && y >= 2 { img.data()[(y - 2) * 5 + x - 1] } else { 0.0 };
            assert!((moved.data()[y * 5 + x] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn crop_upsampling_of_a_ramp_is_a_ramp() {
    // Left half of a horizontal ramp stretched to full width.
    let img = image(4, 8, |x, _| x as f64 / 10.0);
    let out = resized_crop(&img, 0, 0, 4, 4);
    for x in 1..7 {
        let src = (x as f64 + 0.5) * 0.5 - 0.5;
        assert!((out.data()[8 + x] - src / 10.0).abs() < 1e-15, "x={x}");
    }
}

#[test]
fn replicate_is_seeded_and_keeps_labels() {
    let img = image(10, 10, |x, y| ((x * y) % 7) as f64 / 7.0);
    let x0 = ImageSample::new(img, 2).unwrap();
    let cfg = AugmentConfig::default();
    let a = replicate(&x0, 16, &cfg, &mut SeedTree::new(9).stream("c")).unwrap();
    let b = replicate(&x0, 16, &cfg, &mut SeedTree::new(9).stream("c")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    assert!(a.iter().all(|s| s.label == 2 && s.image.shape() == [1, 10, 10]));
    assert!(a.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(a.iter().any(|s| s.image != x0.image));
    assert!(replicate(&x0, 0, &cfg, &mut SeedTree::new(9).stream("c")).is_err());
}
