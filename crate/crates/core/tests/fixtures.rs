use std::fs;
use std::path::Path;

use choreo::fixtures::{check, regenerate, REGENERATE_COMMAND};

#[test]
fn committed_fixtures_are_current() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let stale = check(&root).unwrap();
    assert!(stale.is_empty(), "stale fixtures {stale:?}; run `{REGENERATE_COMMAND}`");
}

#[test]
fn regenerate_then_check_detects_edits() {
    let dir = tempfile::tempdir().unwrap();
    let entries = regenerate(dir.path()).unwrap();
    assert!(entries.iter().any(|e| e.path == "fixtures/mask_panels.json"));
    assert!(entries.iter().all(|e| e.command == REGENERATE_COMMAND));
    assert!(check(dir.path()).unwrap().is_empty());

    let panels = dir.path().join("fixtures/mask_panels.json");
    fs::write(&panels, "{}").unwrap();
    assert_eq!(check(dir.path()).unwrap(), vec!["fixtures/mask_panels.json".to_string()]);
}
