//! Loads an IDX image/label pair (gzipped or not) and splits it into the
//! original and new domains.
//!
//! Usage: idx_dataset [IMAGES LABELS]; defaults to the bundled MNIST subset.

use std::path::PathBuf;

use oneshot_dil::data::load_idx;
use oneshot_dil::harness::{split_domains, DomainSpec};
use oneshot_dil::rng::SeedTree;

fn main() -> oneshot_dil::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k");
    let mut args = std::env::args().skip(1);
    let images = args.next().map(PathBuf::from).unwrap_or_else(|| root.join("images-idx3-ubyte.gz"));
    let labels = args.next().map(PathBuf::from).unwrap_or_else(|| root.join("labels-idx1-ubyte.gz"));

    let samples = load_idx(&images, &labels)?;
    let mut counts = [0usize; 256];
    for s in &samples {
        counts[s.label] += 1;
    }
    println!("{} images of shape {:?}", samples.len(), samples[0].image.shape());
    for (label, n) in counts.iter().enumerate().filter(|(_, n)| **n > 0) {
        println!("  label {label}: {n}");
    }

    // Digit 1 becomes a new domain of digit 0's class.
    let d = split_domains(&samples, &DomainSpec::new(1, 0), &mut SeedTree::new(0).stream("split"))?;
    println!("{} classes after merging; y0 = {}", d.num_classes, d.y0);
    for (name, split) in [("original", &d.orig), ("new", &d.new)] {
        println!("  {name}: train {}, val {}, test {}", split.train.len(), split.val.len(), split.test.len());
    }
    Ok(())
}
