//! Saves parameters to the binary checkpoint format and reloads them.

use vcr_joint::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = ModelParams::init(&ModelConfig {
        seed: 7,
        ..Default::default()
    })?;
    let path = std::env::temp_dir().join("example_checkpoint.bin");
    save_checkpoint(&params, &path)?;
    let loaded = load_checkpoint(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!(
        "{} tensors, {} scalars, {bytes} bytes",
        loaded.names().len(),
        loaded.n_scalars()
    );
    for name in loaded.names().iter().take(5) {
        println!(
            "  {name:<24} {:?}",
            loaded
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_default()
        );
    }
    assert_eq!(
        params.tensors(),
        loaded.tensors(),
        "round trip is bitwise exact"
    );
    println!("round trip exact");
    Ok(())
}
