//! Short MNIST run on a subset: `cargo run --release --example train_mnist -- lg-fg-a 3`.

use fwdgrad::data::{default_mnist_dir, load_mnist, Split};
use fwdgrad::mixer::InputShape;
use fwdgrad::trainer::{train, Algo, Timing, TrainConfig, METRICS_HEADER};

fn main() -> fwdgrad::Result<()> {
    let mut args = std::env::args().skip(1);
    let algo: Algo = args.next().as_deref().unwrap_or("lg-fg-a").parse()?;
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let Some(dir) = default_mnist_dir() else {
        eprintln!("MNIST not found; run scripts/fetch_mnist.sh or set MNIST_DIR");
        std::process::exit(3);
    };
    let train_d = load_mnist(&dir, Split::Train)?.subset(&(0..10_000).collect::<Vec<_>>());
    let test_d = load_mnist(&dir, Split::Test)?.subset(&(0..2_000).collect::<Vec<_>>());
    let cfg = TrainConfig { algo, epochs, ..Default::default() };
    println!("{METRICS_HEADER}");
    let out = train(&cfg, &train_d, &test_d, InputShape::MNIST, Timing::Wall, |r| println!("{}", r.csv_row()))?;
    println!("final: test {:.2}% train {:.2}%", out.final_test_err, out.final_train_err);
    Ok(())
}
