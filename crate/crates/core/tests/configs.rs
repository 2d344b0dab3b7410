use chainscale::config::ScenarioConfig;

fn load(name: &str) -> ScenarioConfig {
    let path = format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).expect("config file");
    let cfg = ScenarioConfig::from_toml_str(&text).expect("parses");
    cfg.validate().expect("validates");
    cfg
}

#[test]
fn shipped_configs_validate() {
    let desk = load("desk.toml");
    assert_eq!((desk.miners.count, desk.committee.size), (800, 50));
    let full = load("full.toml");
    assert_eq!((full.miners.count, full.committee.size), (8000, 500));
    assert_eq!(full.contracts(), 64_000);
}
