//! Drive the command line in-process: train, save, reload bit-exactly and
//! sample a depth map, all from a scratch directory.

use depthflow::checkpoint::load_checkpoint;
use depthflow::cli::run;
use depthflow::datagen::{generate_scene, write_ppm, Difficulty};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("tiny.ckpt");
    let image = dir.path().join("scene.pgm");
    write_ppm(&image, &generate_scene(3, 32, 32, Difficulty::Standard)?.image)?;
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# small and quick\nsteps = 50\ngt-count = 64\nbase-width = 8\n")?;

    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let path = |p: &std::path::Path| p.to_string_lossy().into_owned();
    let train = ["depthflow", "train", "--config", &path(&conf), "--out", &path(&ckpt), "--log-every", "25"];
    assert_eq!(run(train, &mut out, &mut err), 0);

    let loaded = load_checkpoint(&ckpt)?;
    let bytes = std::fs::read(&ckpt)?;
    assert_eq!(loaded.to_bytes()?, bytes);
    println!("checkpoint: {} bytes, {} tensors, note {:?}", bytes.len(), loaded.params.entries().len(), loaded.rng_note);

    let out_dir = dir.path().join("pred");
    let sample = ["depthflow", "sample", "--checkpoint", &path(&ckpt), "--out-dir", &path(&out_dir), &path(&image)];
    assert_eq!(run(sample, &mut out, &mut err), 0);
    for entry in std::fs::read_dir(&out_dir)? {
        println!("wrote {}", entry?.file_name().to_string_lossy());
    }
    Ok(())
}
