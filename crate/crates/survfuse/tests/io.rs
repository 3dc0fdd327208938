use std::fs;
use std::path::Path;

use survfuse::{checkpoint, dataset, report, Error};
use survfuse_core::cv::{run_cv, train_fold, Dataset};
use survfuse_core::gradcheck::PipelineCase;
use survfuse_core::synth::{synth_cohort, SynthConfig};
use survfuse_core::RunConfig;

fn small_synth(patients: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        patients,
        phenotypes: 2,
        patch_dim: 5,
        genes: 6,
        patches_min: 3,
        patches_max: 7,
        seed,
        ..SynthConfig::default()
    }
}

fn small_run() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = PipelineCase {
        phenotypes: 2,
        model_dim: 8,
        depth: 2,
        heads: 2,
        seed: 0,
    }
    .model_config();
    c.model.patch_dim = 5;
    c.train.max_epochs = 8;
    c.train.folds = 3;
    c
}

#[test]
fn dataset_round_trips_including_missing_modalities() {
    let mut data = Dataset::from_synth(&synth_cohort(&small_synth(9, 1)).unwrap());
    data.patients[2].patches = None;
    data.patients[5].expression = None;
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &data).unwrap();
    let back = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    let (complete, excluded) = back.complete();
    assert_eq!(complete.len(), 7);
    assert_eq!(excluded, vec!["P0002".to_string(), "P0005".to_string()]);
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn hand_written_dataset_loads() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("feats")).unwrap();
    write(dir.path(), "feats/a.txt", "2 3\n1 2\n3 4\n5 6\n");
    write(dir.path(), "manifest.csv", "patient_id,patch_file,time,event\na,feats/a.txt,12.5,1\nb,,3,0\n");
    write(dir.path(), "expression.csv", "patient_id,TP53,BRCA1\nb,0.5,1e-3\na,-1,2\n");
    let d = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(d.gene_names, ["TP53", "BRCA1"]);
    assert_eq!(d.patients[0].id(), "a");
    assert_eq!(d.patients[0].patches.as_ref().unwrap().patches, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
    assert_eq!(d.patients[0].expression.as_deref(), Some(&[-1.0, 2.0][..]));
    assert!(d.patients[0].record.event);
    assert!(d.patients[1].patches.is_none());
    assert_eq!(d.patients[1].expression.as_deref(), Some(&[0.5, 1e-3][..]));
}

#[test]
fn malformed_datasets_are_rejected() {
    let cases = [
        ("patient_id,patch_file,time,event\na,,1,2\n", "patient_id,G\na,1\n"),
        ("patient_id,patch_file,time,event\na,,1,1\na,,2,1\n", "patient_id,G\na,1\n"),
        ("patient_id,patch_file,time,event\na,,-1,1\n", "patient_id,G\na,1\n"),
        ("patient_id,patch_file,time,event\na,,1,1\n", "patient_id,G\na,x\n"),
        ("patient_id,patch_file,time,event\na,,1,1\n", "id,G\na,1\n"),
        ("patient_id,patch_file,time,event\na,missing.txt,1,1\n", "patient_id,G\na,1\n"),
    ];
    for (manifest, expr) in cases {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest.csv", manifest);
        write(dir.path(), "expression.csv", expr);
        assert!(dataset::read_dataset(dir.path()).is_err(), "{manifest:?} / {expr:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("ragged", "2 2\n1 2\n3\n"), ("short", "2 3\n1 2\n3 4\n"), ("nohead", "1 2\n3 4\n5 6\n")] {
        write(dir.path(), name, text);
        assert!(dataset::read_patch_file(&dir.path().join(name), "x").is_err(), "{name}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = Dataset::from_synth(&synth_cohort(&small_synth(16, 2)).unwrap());
    let refs: Vec<_> = data.patients.iter().collect();
    let out = train_fold(&small_run(), 0, &refs[..12], &refs[12..]).unwrap();
    let ck = &out.checkpoint;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    checkpoint::save(&path, ck, &data.gene_names).unwrap();
    let saved = checkpoint::load(&path).unwrap();
    assert_eq!(&saved.checkpoint, ck);
    assert_eq!(saved.gene_names, data.gene_names);
    assert_eq!(
        saved.checkpoint.best_validation_loss.to_bits(),
        ck.best_validation_loss.to_bits()
    );

    let a = ck.predict(&refs).unwrap();
    let b = saved.checkpoint.predict(&refs).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    // Reloaded parameters reproduce the recorded best validation loss.
    let net = saved.checkpoint.model().unwrap();
    let inputs: Vec<_> = refs[12..].iter().map(|p| saved.checkpoint.prepare(p).unwrap()).collect();
    let records: Vec<_> = refs[12..].iter().map(|p| p.record.clone()).collect();
    let v = net.evaluate_loss(&saved.checkpoint.params, &inputs, &records).unwrap();
    assert_eq!(v.to_bits(), ck.best_validation_loss.to_bits());

    assert_eq!(checkpoint::encode(ck, &data.gene_names).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = Dataset::from_synth(&synth_cohort(&small_synth(10, 3)).unwrap());
    let refs: Vec<_> = data.patients.iter().collect();
    let mut cfg = small_run();
    cfg.train.max_epochs = 2;
    let ck = train_fold(&cfg, 1, &refs[..7], &refs[7..]).unwrap().checkpoint;
    let bytes = checkpoint::encode(&ck, &data.gene_names).unwrap();
    let p = Path::new("x.ckpt");

    assert!(checkpoint::decode(&bytes, p).is_ok());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 8], p).is_err());
    assert!(checkpoint::decode(b"not a checkpoint\n", p).is_err());

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let header_end = text.find("[[tensors]]").unwrap();
    // A wider hidden layer in the stored configuration no longer fits the tensors.
    let mut tampered = bytes.clone();
    let needle = b"head_hidden = [16, 8]";
    let at = tampered.windows(needle.len()).position(|w| w == needle).unwrap();
    assert!(at < header_end);
    tampered[at..at + needle.len()].copy_from_slice(b"head_hidden = [16, 9]");
    let err = checkpoint::decode(&tampered, p).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    assert!(checkpoint::encode(&ck, &data.gene_names[1..]).is_err());
}

#[test]
fn report_round_trips_and_carries_the_documented_keys() {
    let data = Dataset::from_synth(&synth_cohort(&small_synth(24, 4)).unwrap());
    let (r, _) = run_cv(&small_run(), &data).unwrap();
    let text = report::to_toml(&r).unwrap();
    for key in ["fold_id", "c_index", "pair_count", "logrank_p", "epochs_trained", "[aggregate]", "mean", "std"] {
        assert!(text.contains(key), "missing {key}");
    }
    let agg = r.aggregate.as_ref().unwrap();
    assert!(text.contains(&format!("display = \"{}\"", agg.display)));
    assert_eq!(report::from_toml(&text, Path::new("r.toml")).unwrap(), r);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.toml");
    report::save(&path, &r).unwrap();
    assert_eq!(report::load(&path).unwrap(), r);
}
