//! Saves a network to the binary checkpoint format and restores it.
//!
//!     cargo run --example checkpoint_roundtrip

use batchlens::checkpoint::{decode, load_checkpoint, save_checkpoint};
use batchlens::model::{ModelSpec, Network};
use batchlens::rng::Rng;

fn main() -> batchlens::Result<()> {
    let spec = ModelSpec::named("toy-6", 10, None)?;
    let net = Network::build(&spec, &mut Rng::new(0))?;
    let path = std::env::temp_dir().join("batchlens-example.ckpt");
    save_checkpoint(&net, &path)?;

    let bytes = std::fs::read(&path).map_err(|e| batchlens::Error::io(&path, e))?;
    println!("{} bytes, {} tensors", bytes.len(), decode(&bytes)?.len());
    for (name, t) in decode(&bytes)?.iter().take(6) {
        println!("  {name:<24} {:?}", t.dims());
    }
    let back = load_checkpoint(&path, &spec)?;
    println!("identical after reload: {}", back == net);
    Ok(())
}
