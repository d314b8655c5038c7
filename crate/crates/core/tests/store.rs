mod common;

use std::fs;
use std::path::Path;

use common::random_stack;
use lap_core::store::{
    encode_layerstack, read_header, read_layerstack, validate_store, write_layerstack, Manifest,
    ManifestRow, HEADER_LEN,
};
use lap_core::Error;
use tempfile::tempdir;

fn row(id: &str, path: &str, spk: &str, frames: usize) -> ManifestRow {
    ManifestRow {
        utt_id: id.into(),
        path: path.into(),
        speaker: spk.into(),
        num_frames: frames,
    }
}

#[test]
fn round_trip_is_exact_to_single_precision() {
    let dir = tempdir().unwrap();
    let x = random_stack(3, 5, 4, 7);
    let path = dir.path().join("a.lsf");
    write_layerstack(&x, &path).unwrap();
    assert_eq!(
        fs::metadata(&path).unwrap().len(),
        HEADER_LEN + 4 * 5 * 4 * 7
    );
    let back = read_layerstack(&path, "a").unwrap();
    assert_eq!(back.tensor().shape(), &[5, 4, 7]);
    for (a, b) in x.tensor().data().iter().zip(back.tensor().data()) {
        assert_eq!(*b, f64::from(*a as f32));
    }
    let h = read_header(&path).unwrap();
    assert_eq!((h.channels, h.layers, h.frames), (5, 4, 7));
}

#[test]
fn header_layout_and_frame_major_payload() {
    let x = random_stack(1, 2, 3, 4);
    let bytes = encode_layerstack(&x).unwrap();
    assert_eq!(&bytes[..4], b"LAPF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
    // Element [c=1, l=2, t=3] sits at ((l·T + t)·C + c).
    let at = HEADER_LEN as usize + 4 * ((2 * 4 + 3) * 2 + 1);
    let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    assert_eq!(v, x.tensor().at(&[1, 2, 3]) as f32);
}

#[test]
fn identical_stacks_give_identical_bytes() {
    let dir = tempdir().unwrap();
    let (p, q) = (dir.path().join("p"), dir.path().join("q"));
    write_layerstack(&random_stack(9, 3, 2, 5), &p).unwrap();
    write_layerstack(&random_stack(9, 3, 2, 5), &q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn damaged_files_are_reported() {
    let dir = tempdir().unwrap();
    let good = encode_layerstack(&random_stack(2, 3, 2, 5)).unwrap();

    let short = dir.path().join("short");
    fs::write(&short, &good[..good.len() - 3]).unwrap();
    match read_layerstack(&short, "s") {
        Err(Error::Truncated {
            expected, actual, ..
        }) => {
            assert_eq!(expected, good.len() as u64);
            assert_eq!(actual, good.len() as u64 - 3);
        }
        other => panic!("{other:?}"),
    }

    let magic = dir.path().join("magic");
    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&magic, &bad).unwrap();
    assert!(matches!(
        read_layerstack(&magic, "m"),
        Err(Error::BadMagic { .. })
    ));

    let version = dir.path().join("version");
    let mut bad = good.clone();
    bad[4] = 9;
    fs::write(&version, &bad).unwrap();
    assert!(matches!(
        read_layerstack(&version, "v"),
        Err(Error::BadVersion { found: 9, .. })
    ));

    let nan = dir.path().join("nan");
    let mut bad = good;
    bad[HEADER_LEN as usize..HEADER_LEN as usize + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&nan, &bad).unwrap();
    assert!(matches!(
        read_layerstack(&nan, "n"),
        Err(Error::Corrupt { .. })
    ));

    assert!(matches!(
        read_layerstack(&dir.path().join("absent"), "x"),
        Err(Error::Io { .. })
    ));
}

#[test]
fn manifest_round_trip_and_speaker_order() {
    let dir = tempdir().unwrap();
    let m = Manifest {
        rows: vec![
            row("u3", "a/u3.lsf", "zoe", 40),
            row("u1", "a/u1.lsf", "adam", 12),
            row("u2", "b/u2.lsf", "zoe", 7),
        ],
    };
    let path = dir.path().join("m.tsv");
    m.write(&path).unwrap();
    assert_eq!(Manifest::read(&path).unwrap(), m);
    let idx = m.speaker_index();
    assert_eq!(idx.len(), 2);
    assert_eq!((idx["adam"], idx["zoe"]), (0, 1));
    assert_eq!(m.get("u2").unwrap().num_frames, 7);
}

#[test]
fn malformed_manifests_name_the_line() {
    let dup = "a\tp\ts\t3\nb\tq\ts\t4\na\tr\ts\t5\n";
    match Manifest::parse(dup, "m.tsv") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("duplicate"));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        Manifest::parse("a\tp\ts\n", "m"),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(matches!(
        Manifest::parse("a\tp\ts\tten\n", "m"),
        Err(Error::Parse { line: 1, .. })
    ));
}

fn put(dir: &Path, name: &str, c: usize, n: usize, t: usize) {
    write_layerstack(&random_stack(t as u64, c, n, t), &dir.join(name)).unwrap();
}

#[test]
fn validation_finds_each_fault() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    put(d, "ok.lsf", 4, 3, 6);
    put(d, "frames.lsf", 4, 3, 6);
    put(d, "other.lsf", 4, 5, 6);
    let bytes = fs::read(d.join("ok.lsf")).unwrap();
    fs::write(d.join("cut.lsf"), &bytes[..bytes.len() - 4]).unwrap();

    let clean = Manifest {
        rows: vec![row("ok", "ok.lsf", "s", 6)],
    };
    assert!(validate_store(&clean, d).all_pass());

    let m = Manifest {
        rows: vec![
            row("ok", "ok.lsf", "s", 6),
            row("frames", "frames.lsf", "s", 9),
            row("cut", "cut.lsf", "s", 6),
            row("gone", "gone.lsf", "s", 6),
            row("other", "other.lsf", "s", 6),
        ],
    };
    let report = validate_store(&m, d);
    let failed: Vec<&str> = report.failures().map(|f| f.utt_id.as_str()).collect();
    assert_eq!(failed, ["frames", "cut", "gone"]);
    assert_eq!(report.global.len(), 1, "{:?}", report.global);
    assert!(!report.all_pass());
}
