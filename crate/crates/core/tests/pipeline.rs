use ganbank::datasets::{export_dataset, import_dataset, synth_dataset, SceneRanges};
use ganbank::forward_models::ForwardModel;
use ganbank::generators::{train_gan, DiscriminatorConfig, GanConfig, Generator, GeneratorConfig, SynthStage};
use ganbank::image::ComponentTag;
use ganbank::inversion::{joint_invert, InversionConfig, Prior};
use ganbank::priors::RegularizerChoice;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        d_z: 4,
        d_w: 4,
        mapping_hidden: 8,
        mapping_layers: 2,
        base_channels: 4,
        stages: vec![SynthStage { factor: 2, channels: 3 }],
    }
}

#[test]
fn dataset_to_inversion() {
    let ranges = SceneRanges { image_size: 8, ..SceneRanges::default() };
    let ds = synth_dataset(10, 2, &ranges).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!((back.train.clone(), back.test.clone()), (ds.train.clone(), ds.test.clone()));
    assert_eq!(back.scenes[0].composed, ds.scenes[0].composed);

    let gan = GanConfig { steps: 4, batch: 2, discriminator: DiscriminatorConfig { widths: vec![4] }, ..GanConfig::default() };
    let gens: Vec<Generator> = [ComponentTag::Albedo, ComponentTag::Shading]
        .iter()
        .map(|&t| train_gan(&ds.tonemapped_images(&ds.train, t).unwrap(), small(), t, &gan).unwrap().0)
        .collect();
    let refs: Vec<&Generator> = gens.iter().collect();
    let priors: Vec<Prior> = refs.iter().map(|g| Prior::build(g, "g", 64, 0).unwrap()).collect();
    let model = ForwardModel::lambertian();
    let target = ds.scenes[ds.test[0]].composed_with(&model).unwrap();
    let cfg = InversionConfig { steps: 30, regularizer: RegularizerChoice::knn(1e-4, 5), ..InversionConfig::default() };
    let r = joint_invert(&target, &refs, &priors, &model, &cfg, None).unwrap();
    assert_eq!(r.components.len(), 2);
    assert_eq!(r.loss_trace.len(), 31);
    assert!(r.loss_trace[30].recon < r.loss_trace[0].recon);
}
