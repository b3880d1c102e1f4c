use fimsel::select::{greedy_select, lazy_greedy_select};
use fimsel::{build_pools, builtin_scenario, BuiltinExample, Scenario, SensorType};

fn doc_example() -> String {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/scenario.md")).unwrap();
    let start = doc.find("```toml\n").expect("toml block") + "```toml\n".len();
    let end = start + doc[start..].find("```").unwrap();
    doc[start..end].to_owned()
}

#[test]
fn documented_example_builds() {
    let sc = Scenario::from_toml(&doc_example()).unwrap();
    let pools = build_pools(&sc).unwrap();
    assert_eq!(pools.layout.dim(), 12);
    assert_eq!(pools.dropped[0] + pools.pools[0].len(), 200 + 100 + 200);
    let fd = pools.specs.iter().filter(|s| s.sensor_type() == SensorType::Doppler).count();
    assert_eq!(fd, 100);

    let pool = &pools.pools[0];
    let g = greedy_select(pool, &pools.q0).unwrap();
    let l = lazy_greedy_select(pool, &pools.q0).unwrap();
    assert_eq!(g.chosen, l.chosen);
    assert_eq!(g.chosen.len(), 12);
}

#[test]
fn builtins_survive_a_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("fimsel-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for tag in BuiltinExample::ALL {
        let sc = builtin_scenario(tag);
        let path = dir.join(format!("{tag}.toml"));
        std::fs::write(&path, sc.to_toml().unwrap()).unwrap();
        let back = Scenario::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, sc);
        let a = build_pools(&sc).unwrap();
        let b = build_pools(&back).unwrap();
        assert_eq!(a.q0, b.q0);
        for (pa, pb) in a.pools.iter().zip(&b.pools) {
            assert_eq!(pa.atoms(), pb.atoms());
        }
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
