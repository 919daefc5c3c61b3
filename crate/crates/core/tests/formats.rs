use std::io::Cursor;
use std::path::Path;

use dclip::data::{gen_synthetic, EmbeddingCache, SyntheticSpec};
use dclip::region::{load_regions, parse_regions, write_regions, Region, RegionSet};
use dclip::Error;

fn cache() -> EmbeddingCache {
    let data = vec![0.5, -1.25, 3e-8, f32::MAX, -0.0, 1.0];
    EmbeddingCache::new(3, vec!["img-a".into(), "b".into()], data).unwrap()
}

fn byte_offset<T: std::fmt::Debug>(r: dclip::Result<T>) -> u64 {
    match r {
        Err(Error::ParseBytes { offset, .. }) => offset,
        other => panic!("expected a positioned error, got {other:?}"),
    }
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dcec");
    let c = cache();
    c.write(&path).unwrap();
    let back = EmbeddingCache::read(&path).unwrap();
    assert_eq!(back.ids(), c.ids());
    let bits = |c: &EmbeddingCache| c.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&c));
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
}

#[test]
fn malformed_caches_report_byte_offsets() {
    let good = cache().to_bytes();
    let p = Path::new("bad.dcec");

    let mut b = good.clone();
    b[0] = b'X';
    assert_eq!(byte_offset(EmbeddingCache::from_bytes(&b, p)), 0);

    let mut b = good.clone();
    b[4] = 9;
    assert_eq!(byte_offset(EmbeddingCache::from_bytes(&b, p)), 4);

    let cut = good.len() - 3;
    assert_eq!(byte_offset(EmbeddingCache::from_bytes(&good[..cut], p)), (good.len() - 4 * 6) as u64);

    let mut b = good.clone();
    b.push(0);
    assert_eq!(byte_offset(EmbeddingCache::from_bytes(&b, p)), good.len() as u64);

    let mut b = good.clone();
    let last = good.len() - 4;
    b[last..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(byte_offset(EmbeddingCache::from_bytes(&b, p)), last as u64);
}

#[test]
fn region_files_round_trip_and_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("regions.jsonl");
    let sets = vec![
        RegionSet {
            image_id: "a".into(),
            regions: vec![Region {
                bbox: [0.1, 0.2, 0.3, 0.4],
                confidence: 0.9,
                class_id: 3,
            }],
            weights: None,
        },
        RegionSet {
            image_id: "b".into(),
            regions: vec![],
            weights: None,
        },
    ];
    write_regions(&path, &sets).unwrap();
    assert_eq!(load_regions(&path).unwrap(), sets);

    let text = "{\"image_id\":\"a\",\"regions\":[]}\n\n{\"image_id\":\"b\",\"regions\":[{\"bbox\":[0,0,1]}]}\n";
    match parse_regions(Cursor::new(text), Path::new("r.jsonl")) {
        Err(Error::ParseLine { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }

    let text = "{\"image_id\":\"a\",\"regions\":[{\"bbox\":[0.5,0,0.6,0.2],\"confidence\":0.5,\"class_id\":0}]}\n";
    match parse_regions(Cursor::new(text), Path::new("r.jsonl")) {
        Err(Error::Validation { id, field, .. }) => assert_eq!((id.as_str(), field.as_str()), ("a", "bbox")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn generated_datasets_are_byte_identical() {
    let spec = SyntheticSpec {
        train_size: 40,
        heldout_size: 10,
        ..SyntheticSpec::with_seed(11)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&spec, a.path()).unwrap();
    gen_synthetic(&spec, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 3);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let loaded = dclip::data::Dataset::load(a.path()).unwrap();
    assert_eq!(loaded, dclip::data::generate(&spec).unwrap());
}
