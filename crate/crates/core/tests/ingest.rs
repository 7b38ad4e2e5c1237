mod common;

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use blockpair::ingest::{parse_dump, parse_dump_str, sanitize, DumpError};
use blockpair::linemap::{annotate_blocks, resolve_addresses, LineMapError, Resolver, SourceLine};
use blockpair::pipeline::{run_stage, Stage};

use common::fixture;

const DUMPS: [&str; 4] = [
    "ternary/ternary-x86_64-gcc-O0.dump.json",
    "ternary/ternary-x86_64-gcc-O3.dump.json",
    "unlzw/gzip-aarch64-gcc-O0.dump.json",
    "unlzw/gzip-aarch64-gcc-O3.dump.json",
];

#[test]
fn dumps_round_trip() {
    for rel in DUMPS {
        let d = parse_dump(fixture(rel)).unwrap();
        assert_eq!(parse_dump_str(&d.to_json()).unwrap(), d, "{rel}");
    }
}

#[test]
fn sanitize_is_idempotent_and_drops_externals() {
    for rel in DUMPS {
        let d = parse_dump(fixture(rel)).unwrap();
        let once = sanitize(&d);
        assert_eq!(sanitize(&once), once);
        assert!(once.functions.iter().all(|f| !f.is_external && !f.is_library));
        assert_eq!(once.library_dictionary, d.library_dictionary);
    }
}

#[test]
fn unknown_fields_rejected() {
    let d = parse_dump(fixture(DUMPS[2])).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&d.to_json()).unwrap();
    v["config"]["color"] = "blue".into();
    assert!(matches!(parse_dump_str(&v.to_string()), Err(DumpError::Schema { .. })));
}

#[test]
fn unlzw_annotation_matches_golden() {
    let dump = fixture("unlzw/gzip-aarch64-gcc-O0.dump.json");
    let ann = fixture("unlzw/gzip-aarch64-gcc-O0.annotations.json");
    let out = run_stage(Stage::Annotate, &[dump], &[Resolver::AnnotationFile(ann)], 0).unwrap();
    let golden = std::fs::read_to_string(fixture("unlzw/annotated-O0.golden.json")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn unresolvable_blocks_dropped() {
    let d = common::unlzw("O0");
    let f = d.function("unlzw").unwrap();
    assert_eq!(f.blocks.len(), 8);
    assert!(f.blocks.iter().all(|b| b.start_address != 0x400aa8));
}

/// An addr2line stand-in: every address resolves to /src/proj/t.c, line
/// (address mod 50) + 1, with an inlined frame in t.h for even addresses.
fn fake_resolver(dir: &Path) -> PathBuf {
    let path = dir.join("fake-addr2line");
    std::fs::write(
        &path,
        r#"#!/bin/sh
while read a; do
  n=$(( a % 50 + 1 ))
  echo "$a"
  if [ $(( a % 2 )) -eq 0 ]; then
    echo inl
    echo "/src/proj/include/t.h:$n"
  fi
  echo f
  echo "/src/proj/t.c:$n"
done
"#,
    )
    .unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn external_resolver_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = fake_resolver(tmp.path());
    let addrs = [0x11u64, 0x12];
    let cache = resolve_addresses(&Resolver::External(exe), "bin", &addrs).unwrap();
    let l = |f: &str, n| SourceLine::new(f, n).unwrap();
    assert_eq!(cache.get(0x11).unwrap(), [l("t.c", 18)]);
    let mut even = cache.get(0x12).unwrap().to_vec();
    even.sort();
    assert_eq!(even, [l("include/t.h", 19), l("t.c", 19)]);
}

#[test]
fn external_resolver_annotates_every_block() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = fake_resolver(tmp.path());
    let d = sanitize(&parse_dump(fixture(DUMPS[0])).unwrap());
    let cache = resolve_addresses(&Resolver::External(exe), "bin", &d.instruction_addresses()).unwrap();
    let a = annotate_blocks(&d, &cache).unwrap();
    assert_eq!(a.block_count(), d.block_count());
    assert!(a.functions.iter().flat_map(|f| &f.blocks).all(|b| !b.labels.is_empty()));
}

#[test]
fn failing_resolver_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("broken");
    std::fs::write(&exe, "#!/bin/sh\necho 'no such binary' >&2\nexit 1\n").unwrap();
    std::fs::set_permissions(&exe, std::fs::Permissions::from_mode(0o755)).unwrap();
    let err = resolve_addresses(&Resolver::External(exe), "bin", &[0x10]).unwrap_err();
    assert!(
        matches!(err, LineMapError::ResolverProtocol(ref m) if m.contains("no such binary")),
        "{err}"
    );
}

proptest! {
    #[test]
    fn hex_round_trip(v in any::<u64>()) {
        let s = blockpair::ingest::format_hex(v);
        prop_assert_eq!(blockpair::ingest::parse_hex(&s), Ok(v));
    }
}
