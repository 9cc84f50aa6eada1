mod common;

use std::fs;

use common::*;
use dbt_core::io::*;
use dbt_core::phantom::{generate_phantom, PhantomObject, PhantomSpec};
use dbt_core::{forward_project, ProjectionStack, Volume};

fn random_volume(seed: u64) -> Volume {
    let g = tiny().grid;
    Volume::from_values(g, random_vec(&mut rng(seed), g.n_voxels()))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dbtv");
    let v = random_volume(1);
    write_volume(&path, &v, Dtype::F64).unwrap();
    let back = read_volume_as(&path, Dtype::F64).unwrap();
    assert_eq!(back.grid, v.grid);
    assert_eq!(bits(&back.values), bits(&v.values));

    // f32 storage: the values read back are fixed points of a second round trip.
    write_volume(&path, &v, Dtype::F32).unwrap();
    let once = read_volume(&path).unwrap();
    let first = fs::read(&path).unwrap();
    write_volume(&path, &once, Dtype::F32).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
    assert!(rel_err(&once.values, &v.values) < 1e-7);
}

#[test]
fn volume_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dbtv");
    write_volume(&path, &random_volume(2), Dtype::F64).unwrap();
    let good = fs::read(&path).unwrap();

    assert!(matches!(
        read_volume_as(&path, Dtype::F32),
        Err(IoError::DtypeMismatch { found: Dtype::F64, requested: Dtype::F32, .. })
    ));

    let cut = dir.path().join("cut.dbtv");
    fs::write(&cut, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::Truncated { .. })));
    fs::write(&cut, &good[..20]).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::Truncated { .. })));

    let mut ver = good.clone();
    ver[4] = 9;
    fs::write(&cut, &ver).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::VersionMismatch { found: 9, .. })));

    let mut extra = good.clone();
    extra.extend_from_slice(&[0; 8]);
    fs::write(&cut, &extra).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::Inconsistent { .. })));

    let mut zero = good.clone();
    zero[8..12].copy_from_slice(&0u32.to_le_bytes());
    fs::write(&cut, &zero).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::Inconsistent { .. })));

    let mut magic = good;
    magic[0] = b'X';
    fs::write(&cut, &magic).unwrap();
    assert!(matches!(read_volume(&cut), Err(IoError::BadMagic { .. })));

    assert!(matches!(read_volume(&dir.path().join("missing")), Err(IoError::Io { .. })));
}

#[test]
fn volume_header_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dbtv");
    let v = random_volume(3);
    write_volume(&path, &v, Dtype::F64).unwrap();
    let b = fs::read(&path).unwrap();
    assert_eq!(&b[..4], b"DBTV");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(b[44..52].try_into().unwrap()), -2.0);
    assert_eq!(b.len(), 72 + 8 * v.len());
}

#[test]
fn projection_round_trip() {
    let g = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.dbtp");
    let y = ProjectionStack::from_values(&g, random_vec(&mut rng(4), g.n_data()));
    let file = ProjectionFile::new(y.clone(), &g);
    write_projections(&path, &file, Dtype::F64).unwrap();
    let back = read_projections_as(&path, Dtype::F64).unwrap();
    assert_eq!(back, file);
    assert!(back.matches(&g));
    assert_eq!(bits(&back.stack.values), bits(&y.values));
    assert_eq!(back.angles_deg, g.angles_deg());

    assert!(matches!(read_projections_as(&path, Dtype::F32), Err(IoError::DtypeMismatch { .. })));
    let good = fs::read(&path).unwrap();
    fs::write(&path, &good[..good.len() - 1]).unwrap();
    assert!(matches!(read_projections(&path), Err(IoError::Truncated { .. })));
    fs::write(&path, &good[..60]).unwrap();
    assert!(matches!(read_projections(&path), Err(IoError::Truncated { .. })));
    // A volume file is not a projection file.
    write_volume(&path, &random_volume(5), Dtype::F64).unwrap();
    assert!(matches!(read_projections(&path), Err(IoError::BadMagic { .. })));
}

#[test]
fn failed_write_leaves_previous_file_intact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dbtv");
    write_volume(&path, &random_volume(6), Dtype::F64).unwrap();
    let before = fs::read(&path).unwrap();
    let r = write_atomic(&path, |w| {
        w.write_all(b"partial")?;
        Err(std::io::Error::other("simulated crash"))
    });
    assert!(r.is_err());
    assert_eq!(fs::read(&path).unwrap(), before);
    // No stray temporary files either.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

fn read_pgm(path: &std::path::Path) -> (usize, usize, Vec<u16>) {
    let b = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&b[..20]).to_string();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("65535"));
    let data = &b[b.len() - 2 * w * h..];
    (w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
}

#[test]
fn slice_export() {
    let dir = tempfile::tempdir().unwrap();
    let g = desk().grid;
    let flat = Volume::filled(g, 0.05);
    let a = dir.path().join("flat.pgm");
    export_slice(&flat, 3, &a, None).unwrap();
    let (w, h, px) = read_pgm(&a);
    assert_eq!((w, h), (64, 64));
    assert!(px.iter().all(|&p| p == MID_GRAY));

    let mut spec = PhantomSpec::default();
    let c = g.voxel_center(20, 41, 8);
    // 130 um at a voxel center covers exactly one voxel.
    spec.objects.push(PhantomObject::mc(c, 130.0, 0.5));
    let v = generate_phantom(&spec, &g).unwrap();
    let p1 = dir.path().join("mc1.pgm");
    let p2 = dir.path().join("mc2.pgm");
    export_slice(&v, 8, &p1, None).unwrap();
    export_slice(&v, 8, &p2, None).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let (_, _, px) = read_pgm(&p1);
    let brightest = px.iter().enumerate().max_by_key(|(_, p)| **p).unwrap().0;
    let slice = v.slice(8);
    let argmax = (0..slice.len()).fold(0, |b, i| if slice[i] > slice[b] { i } else { b });
    assert_eq!(brightest, argmax);
    assert_eq!(argmax, 20 + 64 * 41);

    assert!(matches!(export_slice(&v, 16, &p1, None), Err(IoError::SliceOutOfRange { k: 16, n_z: 16 })));
}

#[test]
fn forward_projection_files_are_deterministic() {
    let g = desk();
    let dir = tempfile::tempdir().unwrap();
    let v = generate_phantom(&PhantomSpec::default(), &g.grid).unwrap();
    let y = forward_project(&g, &v).unwrap();
    let a = dir.path().join("a.dbtp");
    let b = dir.path().join("b.dbtp");
    write_projections(&a, &ProjectionFile::new(y.clone(), &g), Dtype::F64).unwrap();
    write_projections(&b, &ProjectionFile::new(y, &g), Dtype::F64).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn two_column_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dbt_core::metrics::Profile { samples: vec![1.0, 2.5], spacing: 0.5, slice: 0, x: 0, y_start: 2 };
    let path = dir.path().join("p.csv");
    write_profile_csv(&path, &p).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "y_mm,value\n1e0,1e0\n1.5e0,2.5e0\n");
    write_asf_csv(&path, &[1.0, 0.25]).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "slice,asf\n0,1e0\n1,2.5e-1\n");
}
