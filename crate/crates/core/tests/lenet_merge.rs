use neuralmerger::align::default_plan;
use neuralmerger::netdef::Arch;
use neuralmerger::quantize::{
    build_merged, compression_stats, load_merged, save_merged, KMeansConfig, LayerParams, MergeParams,
};
use neuralmerger::Shape3;

fn accu() -> MergeParams {
    MergeParams::default()
        .with("conv1", LayerParams::new(1, 64))
        .with("conv2", LayerParams::new(8, 128))
        .with("fc1", LayerParams::new(8, 128))
}

fn light() -> MergeParams {
    MergeParams::default()
        .with("conv1", LayerParams::new(1, 64))
        .with("conv2", LayerParams::new(32, 128))
        .with("fc1", LayerParams::new(8, 64))
}

fn cheap() -> KMeansConfig {
    KMeansConfig {
        restarts: 1,
        max_iters: 3,
        ..KMeansConfig::default()
    }
}

#[test]
fn lenet_pair_compression_matches_reported_ratios() {
    let input = Shape3::new(28, 28, 1);
    let a = Arch::LeNet.build("a", input, 10, 1).unwrap();
    let b = Arch::LeNet.build("b", input, 10, 2).unwrap();
    let models = [&a, &b];
    let plan = default_plan(&models).unwrap();

    let mm = build_merged(&models, &plan, &accu(), &cheap()).unwrap();
    let conv2 = mm.elayers.iter().find(|l| l.name == "conv2").unwrap();
    assert_eq!(conv2.codebooks.len(), 4);
    assert!(conv2.codebooks.iter().all(|b| b.vectors == 2 * 64 * 25));
    let fc1 = mm.elayers.iter().find(|l| l.name == "fc1").unwrap();
    assert_eq!(fc1.codebooks.len(), 3136 / 8);

    let report = compression_stats(&models, &mm);
    let ratio = report.whole_model.ratio;
    assert!((ratio - 10.4).abs() <= 0.15 * 10.4, "ACCU ratio {ratio}");

    let light = build_merged(&models, &plan, &light(), &cheap()).unwrap();
    let ratio = compression_stats(&models, &light).whole_model.ratio;
    assert!((ratio - 15.3).abs() <= 0.15 * 15.3, "LIGHT ratio {ratio}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merged.nmj");
    save_merged(&mm, &path).unwrap();
    let back = load_merged(&path).unwrap();
    // full equality output is megabytes long
    assert!(back == mm, "merged model changed in the save/load round trip");
}
