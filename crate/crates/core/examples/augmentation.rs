//! Turns one image into a handful of augmented copies and prints them as
//! ASCII art.

use oneshot_dil::augment::{replicate, AugmentConfig, ImageSample};
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::Tensor;

fn show(t: &Tensor) {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    for y in 0..h {
        let row: String = (0..w)
            .map(|x| match t.data()[y * w + x] {
                v if v > 0.66 => '#',
                v if v > 0.33 => '+',
                v if v > 0.05 => '.',
                _ => ' ',
            })
            .collect();
        println!("  |{row}|");
    }
}

fn main() -> oneshot_dil::Result<()> {
    let n = 12;
    let data = (0..n * n)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            if (3..9).contains(&x) && (y == 2 || y == 9 || x == 3 || x == 8) && (2..10).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let x0 = ImageSample::new(Tensor::new(vec![1, n, n], data)?, 1)?;
    println!("original");
    show(&x0.image);

    let cfg = AugmentConfig { probability: 1.0, ..AugmentConfig::default() };
    let copies = replicate(&x0, 3, &cfg, &mut SeedTree::new(7).stream("augment"))?;
    for (i, c) in copies.iter().enumerate() {
        println!("copy {i} (label {})", c.label);
        show(&c.image);
    }
    Ok(())
}
