//! Loads MNIST from IDX files and prints split sizes and pixel statistics.
//!
//! Looks in `$MNIST_DIR`, then `data/mnist`; see `scripts/fetch_mnist.sh`.

use fwdgrad::data::{batches, default_mnist_dir, load_mnist, Split};

fn main() -> fwdgrad::Result<()> {
    let Some(dir) = default_mnist_dir() else {
        eprintln!("MNIST not found; run scripts/fetch_mnist.sh or set MNIST_DIR");
        std::process::exit(3);
    };
    for split in [Split::Train, Split::Test] {
        let d = load_mnist(&dir, split)?;
        let (mean, std) = d.pixel_stats();
        println!("{split:?}: {} images {:?}, pixel mean {mean:.4} std {std:.4}", d.len(), d.image_shape());
    }
    let train = load_mnist(&dir, Split::Train)?;
    let first = batches(&train, 128, 0, 0, false).next().expect("non-empty");
    println!("first shuffled batch: images {:?}, labels {:?}...", first.images.shape(), &first.labels[..8]);
    Ok(())
}
