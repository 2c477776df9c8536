//! Generate a small synthetic dataset (PNGs plus manifest CSV) so the CLI
//! can be exercised without any real dataset:
//!
//! ```text
//! cargo run -p inctrl-core --example make_demo_data -- demo_data
//! ```

use inctrl_core::synthetic::{generate, SyntheticSpec};
use std::path::PathBuf;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("demo_data"));
    let spec = SyntheticSpec {
        modes: 4,
        normal_train_per_mode: 20,
        normal_test_per_mode: 10,
        anomaly_train: 40,
        anomaly_test: 16,
        image_size: 16,
        seed: 7,
    };
    match generate(&out, "demo", &spec) {
        Ok(manifest) => {
            println!(
                "wrote {} images ({} normal / {} anomalous) and {}",
                manifest.len(),
                manifest.normal_count(),
                manifest.anomaly_count(),
                out.join("demo.csv").display()
            );
        }
        Err(err) => {
            eprintln!("demo data generation failed: {err}");
            std::process::exit(1);
        }
    }
}
