//! Regenerates the demo datasets bundled under `data/`. Run from the
//! workspace root:
//!
//! ```text
//! cargo run -p powermech --example gen_demo_data
//! ```

use std::path::Path;

use powermech::synth;

fn main() -> std::io::Result<()> {
    let data = Path::new("data");
    std::fs::create_dir_all(data)?;

    // 2-d two-Gaussian demo used by the quick-start pipeline
    let ds = synth::two_gaussians(600, 1.5, 20_260_809);
    synth::dataset_to_csv(&ds, &data.join("synth2d.csv")).expect("write synth2d");
    std::fs::write(
        data.join("synth2d.schema.json"),
        "{\"f0\": \"numeric\", \"f1\": \"numeric\", \"label\": \"label\"}\n",
    )?;

    // mixed-type benchmark with a categorical column, used by the attack demo
    let ds = synth::mixed_synthetic(800, 20_260_810);
    synth::dataset_to_csv(&ds, &data.join("mixed.csv")).expect("write mixed");
    std::fs::write(
        data.join("mixed.schema.json"),
        "{\"num0\": \"numeric\", \"num1\": \"numeric\", \"cat\": \"categorical\", \"label\": \"label\"}\n",
    )?;

    println!("wrote data/synth2d.csv, data/mixed.csv and their schemas");
    Ok(())
}
