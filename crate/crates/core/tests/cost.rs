use aero_core::cost::{self, CensusEntry, CostReport, OpKind, UnitCostTable};
use aero_core::model::transform::prune_deeper_ffns;
use aero_core::{FfnVariant, ModelConfig, Nonlinearity, Stabilizer};
use proptest::prelude::*;

fn gpt2(nl: Nonlinearity) -> ModelConfig {
    ModelConfig::gpt2_small(nl)
}

fn sota(layers: usize, ffn: FfnVariant, pruned: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(layers, 12, 768, 1024, 50257, Nonlinearity::Sm)
        .with_stabilizer(Stabilizer::LearnableScaling)
        .with_ffn(ffn);
    cfg = prune_deeper_ffns(&cfg, pruned).unwrap();
    cfg.census_single_ln = true;
    cfg.census_simplified_attention = true;
    cfg
}

#[test]
fn exact_flop_counts() {
    let base = gpt2(Nonlinearity::SmLnG);
    assert_eq!(cost::ffn_flops(&base, 128), 14_495_514_624);
    let fused = base.clone().with_ffn(FfnVariant::FusedSingle);
    assert_eq!(cost::ffn_flops(&fused, 128), 1_811_939_328);
    assert_eq!(cost::ffn_flops(&prune_deeper_ffns(&fused, 6).unwrap(), 128), 905_969_664);
    assert_eq!(cost::attention_flops(&base, 128), 7_701_921_792);
    assert_eq!(cost::attention_flops(&base, 256), 16_309_813_248);
    let unit = ModelConfig::new(1, 1, 1, 1, 2, Nonlinearity::Sm);
    assert_eq!(cost::attention_flops(&unit, 1), 12);
}

#[test]
fn deeper_and_longer_tables() {
    let l18 = ModelConfig::new(18, 12, 768, 1024, 50257, Nonlinearity::SmLnG);
    assert_eq!(cost::render_billions(cost::ffn_flops(&l18, 128)), "21.7B");
    assert_eq!(cost::render_billions(cost::attention_flops(&l18, 128)), "11.6B");
    let fused18 = l18.clone().with_ffn(FfnVariant::FusedSingle);
    assert_eq!(cost::render_billions(cost::ffn_flops(&fused18, 128)), "2.7B");
    assert_eq!(cost::render_billions(cost::ffn_flops(&prune_deeper_ffns(&fused18, 4).unwrap(), 128)), "2.1B");
    let base = gpt2(Nonlinearity::SmLnG);
    let fused = base.clone().with_ffn(FfnVariant::FusedSingle);
    assert_eq!(cost::ffn_flops(&fused, 512), 7_247_757_312);
    assert_eq!(cost::render_billions(cost::ffn_flops(&fused, 512)), "7.2B");
    assert_eq!(cost::render_billions(cost::attention_flops(&fused, 512)), "36.2B");
    assert_eq!(cost::render_billions(cost::ffn_flops(&prune_deeper_ffns(&fused, 1).unwrap(), 512)), "6.6B");
}

#[test]
fn census_only_rows() {
    let rows = [
        (sota(12, FfnVariant::Standard4d, 0), 128, "14.5B", "3.9B"),
        (sota(12, FfnVariant::FusedSingle, 0), 128, "1.8B", "3.9B"),
        (sota(12, FfnVariant::Standard4d, 0), 256, "29.0B", "8.5B"),
        (sota(18, FfnVariant::Standard4d, 0), 128, "21.7B", "5.9B"),
        (sota(12, FfnVariant::Standard4d, 0), 512, "58.0B", "19.3B"),
    ];
    for (cfg, t, ffn, attn) in rows {
        assert_eq!(cost::render_billions(cost::ffn_flops(&cfg, t)), ffn);
        assert_eq!(cost::render_billions(cost::attention_flops(&cfg, t)), attn, "L={} T={t}", cfg.n_layers);
    }
    let census = cost::render_census(&cost::nonlinear_census(&sota(12, FfnVariant::FusedSingle, 0), 128));
    assert_eq!(census, "SM:144×R^{128×128}, LN:1×R^{128×768}");
}

#[test]
fn censuses() {
    let pythia = ModelConfig::pythia_70m(Nonlinearity::SmLnG);
    let got: Vec<String> = cost::nonlinear_census(&pythia, 128).iter().map(ToString::to_string).collect();
    assert_eq!(got, ["SM:48×R^{128×128}", "LN:12×R^{128×512}", "G:6×R^{128×2048}"]);
    let fused = gpt2(Nonlinearity::Sm).with_stabilizer(Stabilizer::LearnableScaling).with_ffn(FfnVariant::FusedSingle);
    assert_eq!(cost::render_census(&cost::nonlinear_census(&fused, 128)), "SM:144×R^{128×128}");
    let relu = gpt2(Nonlinearity::SmR);
    let r = cost::nonlinear_census(&prune_deeper_ffns(&relu, 5).unwrap(), 256);
    assert_eq!(cost::render_census(&r), "SM:144×R^{256×256}, R:7×R^{256×3072}");
    let mut with_final = gpt2(Nonlinearity::SmLnG);
    with_final.final_layernorm = true;
    assert_eq!(cost::nonlinear_census(&with_final, 128)[1].count, 25);
}

#[test]
fn crossover_values() {
    assert_eq!(cost::crossover_context(768), 2048.0);
    assert_eq!(cost::crossover_context(3), 8.0);
    let share = cost::ffn_share(768, 128);
    let ratio = 14.5 / 22.2;
    assert!((share - ratio).abs() < 1e-3, "{share}");
    assert!((cost::ffn_share(768, 2048) - 0.5).abs() < 1e-3);
}

#[test]
fn unit_cost_estimates() {
    let report = CostReport::new(&gpt2(Nonlinearity::SmLnG), 128);
    let zero = UnitCostTable::default();
    let e = cost::estimate_cost(&report, &zero);
    assert_eq!((e.comm_bytes, e.latency_seconds), (0.0, 0.0));

    let units = UnitCostTable::from_kv("sm.bytes = 3\nsm.seconds = 0.5\nln.bytes = 2\ng.seconds = 1e-3\nflop.bytes = 1e-9").unwrap();
    let one = cost::estimate_cost(&report, &units);
    let two = cost::estimate_cost(&report, &units.scaled(2.0));
    assert_eq!(two.comm_bytes, 2.0 * one.comm_bytes);
    assert_eq!(two.latency_seconds, 2.0 * one.latency_seconds);

    let mut single = report.clone();
    single.census = vec![CensusEntry { kind: OpKind::Sm, count: 1, rows: 4, cols: 4 }];
    single.total_flops = 0;
    let sm = UnitCostTable::from_kv("sm.bytes = 10\nsm.seconds = 0.1").unwrap();
    let e = cost::estimate_cost(&single, &sm);
    assert_eq!((e.comm_bytes, e.latency_seconds), (10.0, 0.1));

    assert!(UnitCostTable::from_kv("sm.bytes = -1").is_err());
    assert!(UnitCostTable::from_kv("tanh.bytes = 1").is_err());
}

#[test]
fn reports_render_as_table_and_csv() {
    let rows: Vec<CostReport> = [gpt2(Nonlinearity::SmLnG), sota(12, FfnVariant::FusedSingle, 0).with_name("SOTA SM+ScFuFFN")]
        .iter()
        .map(|c| CostReport::new(c, 128))
        .collect();
    let table = cost::render_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("SM+LN+G"));
    assert!(lines[1].contains("14.5B") && lines[1].contains("7.7B"));
    assert!(lines[0].starts_with("config") && lines[0].contains("attn_flops"));

    let csv = cost::render_csv(&rows).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["config", "ffn_flops", "attn_flops", "total", "ffn_share", "census"]);
    let recs: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(&recs[0][1], "14495514624");
    assert_eq!(&recs[1][0], "SOTA SM+ScFuFFN");
    assert_eq!(&recs[1][5], "SM:144×R^{128×128}, LN:1×R^{128×768}");
}

fn op_kind() -> impl Strategy<Value = OpKind> {
    prop_oneof![Just(OpKind::Sm), Just(OpKind::Ln), Just(OpKind::G), Just(OpKind::R)]
}

proptest! {
    #[test]
    fn census_round_trips(kind in op_kind(), count in 1u64..10_000, rows in 1u64..100_000, cols in 1u64..100_000) {
        let e = CensusEntry { kind, count, rows, cols };
        prop_assert_eq!(e.to_string().parse::<CensusEntry>().unwrap(), e);
    }

    #[test]
    fn share_decreases_and_crosses_near_eight_thirds(d in 1usize..2048) {
        let mut prev = f64::INFINITY;
        let limit = 4 * d + 8;
        let mut crossing = None;
        for t in 1..=limit {
            let s = cost::ffn_share(d, t);
            prop_assert!(s < prev);
            if crossing.is_none() && s <= 0.5 {
                crossing = Some(t);
            }
            prev = s;
        }
        let star = 8.0 * d as f64 / 3.0;
        let t = crossing.unwrap() as f64;
        prop_assert!(t >= star.floor() - 1.0 && t <= star.ceil() + 1.0, "d={} crossing {}", d, t);
    }

    #[test]
    fn fusion_divides_ffn_flops_by_eight(l in 1usize..24, h in 1usize..8, k in 1usize..32, t in 1usize..600) {
        let cfg = ModelConfig::new(l, h, h * k, 1024, 100, Nonlinearity::Sm);
        let fused = cfg.clone().with_ffn(FfnVariant::FusedSingle);
        prop_assert_eq!(cost::ffn_flops(&cfg, t), 8 * cost::ffn_flops(&fused, t));
        let d = (h * k) as u64;
        prop_assert_eq!(cost::ffn_flops(&cfg, t), 16 * d * d * (l * t) as u64);
    }

    #[test]
    fn flops_are_linear_in_depth(l in 1usize..30, t in 1usize..1000) {
        let one = ModelConfig::new(1, 4, 64, 1024, 100, Nonlinearity::SmLnG);
        let many = ModelConfig::new(l, 4, 64, 1024, 100, Nonlinearity::SmLnG);
        prop_assert_eq!(cost::attention_flops(&many, t), l as u64 * cost::attention_flops(&one, t));
        prop_assert_eq!(cost::ffn_flops(&many, t), l as u64 * cost::ffn_flops(&one, t));
    }
}
