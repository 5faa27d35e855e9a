use std::path::{Path, PathBuf};

use depthflow::checkpoint::load_checkpoint;
use depthflow::cli::{cmd_complete, cmd_diagnose, cmd_eval, cmd_sample, cmd_train, run, RunConfig};
use depthflow::datagen::{
    generate_split, read_pfm, write_manifest, write_pfm, write_ppm, Difficulty, ManifestRecord, Source, Split,
};
use depthflow::evalkit::{FitSpace, METRICS_HEADER};

const TINY: &[(&str, &str)] = &[
    ("base-width", "4"),
    ("time-embed-dim", "8"),
    ("height", "16"),
    ("width", "16"),
    ("gt-count", "8"),
    ("steps", "6"),
    ("batch-size", "4"),
    ("log-every", "2"),
];

fn config(command: &str, pairs: &[(&str, &str)]) -> RunConfig {
    let flags: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::resolve(command, None, &flags).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, name: &str, extra: &[(&str, &str)]) -> (PathBuf, String) {
    let out = dir.join(name);
    let mut pairs = TINY.to_vec();
    pairs.push(("out", path_str(&out)));
    pairs.extend_from_slice(extra);
    let mut stdout = Vec::new();
    cmd_train(&config("train", &pairs), &mut stdout).unwrap();
    (out, String::from_utf8(stdout).unwrap())
}

/// Log rows without the wall-clock column.
fn timeless(log: &str) -> Vec<String> {
    log.lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) if !l.starts_with('#') => head.to_string(),
            _ => l.to_string(),
        })
        .collect()
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, log_a) = train_tiny(dir.path(), "a.ckpt", &[("seed", "7")]);
    let (b, log_b) = train_tiny(dir.path(), "b.ckpt", &[("seed", "7")]);
    let (c, _) = train_tiny(dir.path(), "c.ckpt", &[("seed", "8")]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let file_log = std::fs::read_to_string(a.with_extension("log.csv")).unwrap();
    assert_eq!(timeless(&file_log), timeless(&log_a));
    let without_path = |v: Vec<String>| v.into_iter().filter(|l| !l.starts_with("# wrote")).collect::<Vec<_>>();
    assert_eq!(without_path(timeless(&log_a)), without_path(timeless(&log_b)));
    assert!(log_a.contains("step,loss,ema_loss,wall_ms"));
    let rows: Vec<&str> = log_a.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("6,"));
}

#[test]
fn distillation_reports_mixed_size() {
    let dir = tempfile::tempdir().unwrap();
    let extra = [
        ("gt-count", "100"),
        ("teacher-ratio", "0.1"),
        ("teacher-steps", "2"),
        ("unlabeled-count", "20"),
        ("steps", "2"),
    ];
    let (out, log) = train_tiny(dir.path(), "m.ckpt", &extra);
    assert!(log.contains("# training samples: 110 (ground truth 100, pseudo-labelled 10)"), "{log}");
    let teacher = out.with_extension("teacher.ckpt");
    assert!(teacher.exists());
    // a given teacher is reused instead of retrained
    let extra = [
        ("gt-count", "100"),
        ("teacher-ratio", "0.1"),
        ("teacher", path_str(&teacher)),
        ("unlabeled-count", "20"),
        ("steps", "2"),
    ];
    let (_, log) = train_tiny(dir.path(), "n.ckpt", &extra);
    assert!(!log.contains("# teacher "));
    assert!(log.contains("# training samples: 110"));
}

#[test]
fn paper_preset_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.ckpt");
    let pairs = [
        ("base-width", "4"),
        ("time-embed-dim", "8"),
        ("height", "16"),
        ("width", "16"),
        ("gt-count", "4"),
        ("steps", "1"),
        ("preset", "paper"),
        ("out", path_str(&out)),
    ];
    let mut stdout = Vec::new();
    let outcome = cmd_train(&config("train", &pairs), &mut stdout).unwrap();
    let log = String::from_utf8(stdout).unwrap();
    assert!(log.contains("batch_size=128 learning_rate=3e-5 ema_rate=0.999"), "{log}");
    assert_eq!(outcome.checkpoint.train.batch_size, 128);
    // explicit flags still win over the preset
    let mut pairs = pairs.to_vec();
    pairs.push(("lr", "1e-3"));
    let mut stdout = Vec::new();
    cmd_train(&config("train", &pairs), &mut stdout).unwrap();
    assert!(String::from_utf8(stdout).unwrap().contains("batch_size=128 learning_rate=1e-3"));
}

#[test]
fn sample_writes_depth_and_spread() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train_tiny(dir.path(), "m.ckpt", &[]);
    let scenes = generate_split(3, Split::Eval, 2, 16, 16, Difficulty::Standard).unwrap();
    let mut images = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let p = dir.path().join(format!("img{i}.pgm"));
        write_ppm(&p, &s.image).unwrap();
        images.push(p);
    }
    let run_once = |sub: &str, ensemble: &str| {
        let out_dir = dir.path().join(sub);
        let cfg = config(
            "sample",
            &[("checkpoint", path_str(&ckpt)), ("ensemble", ensemble), ("out-dir", path_str(&out_dir)), ("seed", "4")],
        );
        let mut stdout = Vec::new();
        let r = cmd_sample(&cfg, &images, &mut stdout).unwrap();
        assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), 3);
        r
    };
    let single = run_once("one", "1");
    assert_eq!(single.depth_files[0].file_name().unwrap(), "img0.depth.pfm");
    for f in &single.std_files {
        assert!(read_pfm(f).unwrap().data().iter().all(|&v| v == 0.0));
    }
    let a = run_once("a", "3");
    let b = run_once("b", "3");
    for (x, y) in a.depth_files.iter().chain(&a.std_files).zip(b.depth_files.iter().chain(&b.std_files)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert!(read_pfm(&a.std_files[0]).unwrap().data().iter().any(|&v| v > 0.0));
    let depth = read_pfm(&a.depth_files[0]).unwrap();
    assert_eq!(depth.shape(), &[1, 16, 16]);
    assert!(depth.data().iter().all(|&v| v > 0.0));
}

#[test]
fn eval_emits_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train_tiny(dir.path(), "m.ckpt", &[]);
    let eval = |report: &Path| {
        let cfg = config(
            "eval",
            &[
                ("checkpoint", path_str(&ckpt)),
                ("height", "16"),
                ("width", "16"),
                ("eval-count", "3"),
                ("ensemble", "2"),
                ("nfe", "1,10"),
                ("fit-space", "log,linear"),
                ("report", path_str(report)),
            ],
        );
        cmd_eval(&cfg, &mut Vec::new()).unwrap()
    };
    let report = dir.path().join("metrics.csv");
    let rows = eval(&report);
    assert_eq!(rows.iter().map(|r| (r.nfe, r.fit_space)).collect::<Vec<_>>(), vec![
        (1, FitSpace::Log),
        (1, FitSpace::Linear),
        (10, FitSpace::Log),
        (10, FitSpace::Linear),
    ]);
    assert_ne!(rows[0].report.abs_rel, rows[1].report.abs_rel);
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("synthetic[nfe=1 fit=log ens=2],3,"));
    // appending keeps one header
    eval(&report);
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 9);
    let again = dir.path().join("again.csv");
    eval(&again);
    assert_eq!(std::fs::read_to_string(&again).unwrap(), text);
}

#[test]
fn manifest_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_split(1, Split::Train, 4, 16, 16, Difficulty::Easy).unwrap();
    let mut records = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let image = dir.path().join(format!("s{i}.pgm"));
        let depth = dir.path().join(format!("s{i}.pfm"));
        write_ppm(&image, &s.image).unwrap();
        write_pfm(&depth, &s.depth.to_tensor()).unwrap();
        records.push(ManifestRecord {
            image: PathBuf::from(format!("s{i}.pgm")),
            depth: PathBuf::from(format!("s{i}.pfm")),
            source: Source::GroundTruth,
        });
    }
    let manifest = dir.path().join("train.txt");
    write_manifest(&manifest, &records).unwrap();
    let (ckpt, log) = train_tiny(dir.path(), "m.ckpt", &[("manifest", path_str(&manifest))]);
    assert!(log.contains("# training samples: 4 "));
    let cfg = config(
        "eval",
        &[
            ("checkpoint", path_str(&ckpt)),
            ("manifest", path_str(&manifest)),
            ("ensemble", "1"),
            ("report", path_str(&dir.path().join("r.csv"))),
        ],
    );
    let rows = cmd_eval(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(rows[0].report.n_images, 4);
}

#[test]
fn completion_reports_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train_tiny(dir.path(), "m.ckpt", &[]);
    let complete = |keep: &str, name: &str| {
        let out = dir.path().join(format!("{name}.ckpt"));
        let report = dir.path().join(format!("{name}.csv"));
        let cfg = config(
            "complete",
            &[
                ("checkpoint", path_str(&ckpt)),
                ("height", "16"),
                ("width", "16"),
                ("gt-count", "8"),
                ("eval-count", "3"),
                ("ensemble", "2"),
                ("batch-size", "4"),
                ("finetune-steps", "3"),
                ("keep-fraction", keep),
                ("completion-out", path_str(&out)),
                ("completion-report", path_str(&report)),
            ],
        );
        let mut stdout = Vec::new();
        let r = cmd_complete(&cfg, &mut stdout).unwrap();
        (r, String::from_utf8(stdout).unwrap(), out, report)
    };
    let (full, log, out, report) = complete("1.0", "full");
    assert_eq!(full.max_distance, 0.0);
    assert!(log.contains("distance channel max 0.000000 (all zeros)"), "{log}");
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("base["));
    assert!(text.lines().nth(2).unwrap().starts_with("completed["));
    assert!(log.contains("# rmse base "));
    assert_eq!(load_checkpoint(&out).unwrap().net.completion_channels, 2);

    let (sparse, _, _, _) = complete("0.02", "sparse");
    assert!(sparse.max_distance > 0.0);
    assert_eq!((sparse.base.rmse, sparse.base.delta1), (full.base.rmse, full.base.delta1));

    // a completion checkpoint cannot be fine-tuned again or evaluated as a base model
    let cfg = config("eval", &[("checkpoint", path_str(&out)), ("report", path_str(&dir.path().join("x.csv")))]);
    assert!(cmd_eval(&cfg, &mut Vec::new()).is_err());
}

#[test]
fn diagnose_coupling_and_twins() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("d.csv");
    let cfg = config(
        "diagnose",
        &[
            ("height", "16"),
            ("width", "16"),
            ("coupling-batches", "2"),
            ("coupling-size", "6"),
            ("twin", "true"),
            ("twin-steps", "3"),
            ("gt-count", "6"),
            ("eval-count", "2"),
            ("ensemble", "2"),
            ("base-width", "4"),
            ("time-embed-dim", "8"),
            ("batch-size", "3"),
            ("diagnose-report", path_str(&report)),
        ],
    );
    let mut stdout = Vec::new();
    let d = cmd_diagnose(&cfg, &mut stdout).unwrap();
    assert_eq!(d.coupling.len(), 4);
    for row in &d.coupling {
        assert!(row.optimal <= row.paired + 1e-12);
    }
    let twin = d.twin.unwrap();
    assert_eq!(twin.nfe, [1, 10]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("section,subject,metric,setting,value\n"));
    assert!(text.contains("twin,noise-start,delta1,nfe=10,"));
    assert!(text.contains("coupling,mean,l2,random,"));
    let first = text.clone();
    cmd_diagnose(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), first);
}

#[test]
fn binary_entry_point_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "base-width = 4\ntime-embed-dim = 8\nheight=16\nwidth=16\ngt-count=4\nsteps=1\n").unwrap();
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let args = ["depthflow", "train", "--config", path_str(&conf), "--out", path_str(&out)];
    assert_eq!(run(args, &mut o, &mut e), 0, "{}", String::from_utf8_lossy(&e));
    assert_eq!(load_checkpoint(&out).unwrap().train.steps, 1);
    std::fs::write(&conf, "bogus=1\n").unwrap();
    assert_eq!(run(["depthflow", "train", "--config", path_str(&conf)], &mut o, &mut e), 1);
    assert_eq!(
        run(["depthflow", "sample", "--checkpoint", path_str(&out), path_str(&dir.path().join("missing.ppm"))], &mut o, &mut e),
        2
    );
}
