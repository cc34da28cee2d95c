use ctrldiff_cli::{run, THREADS_VAR};

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d").display().to_string();
    let argv = |n: &str| vec!["ctrldiff".to_string(), "gen-data".into(), "--count".into(), n.into(), "--out".into(), out.clone()];
    std::env::set_var(THREADS_VAR, "zero");
    assert_eq!(run(argv("2")), 2);
    std::env::set_var(THREADS_VAR, "1");
    assert_eq!(run(argv("2")), 0);
}
