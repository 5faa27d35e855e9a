//! Twin models that differ only in where the flow starts: the noised image
//! or pure Gaussian noise. Scored at one and ten Euler steps.
//!
//! cargo run --example start_ablation -- [steps]

use depthflow::cli::{cmd_diagnose, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let flags: Vec<(String, String)> = [
        ("twin", "true"),
        ("twin-steps", steps.as_str()),
        ("ema-rate", "0.99"),
        ("gt-count", "128"),
        ("eval-count", "16"),
        ("ensemble", "4"),
        ("coupling-batches", "2"),
        ("diagnose-report", "diagnose.csv"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let cfg = RunConfig::resolve("diagnose", None, &flags)?;
    let outcome = cmd_diagnose(&cfg, &mut std::io::stdout())?;
    if let Some(t) = outcome.twin {
        for (i, nfe) in t.nfe.iter().enumerate() {
            println!("nfe {nfe:>2}: image start {:.4}, noise start {:.4}", t.image_start[i], t.noise_start[i]);
        }
    }
    Ok(())
}
