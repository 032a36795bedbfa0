use super::*;
use crate::autodiff::grad_check;
use crate::generators::{sample_z, sefa_directions, DiscriminatorConfig, GeneratorConfig, SynthStage};
use crate::generators::Discriminator;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `w -> reshape(w B)` with identity tone mapping.
struct Linear {
    basis: Tensor,
    tag: ComponentTag,
    pixels: usize,
    channels: usize,
}

impl LatentDecoder for Linear {
    fn d_w(&self) -> usize {
        self.basis.shape()[0]
    }
    fn tags(&self) -> Vec<ComponentTag> {
        vec![self.tag]
    }
    fn decode(&self, g: &mut Graph, w: Var) -> Result<Vec<Var>> {
        let b = g.constant(self.basis.clone());
        let flat = g.matmul(w, b)?;
        Ok(vec![g.reshape(flat, &[self.pixels, self.channels])?])
    }
}

struct Additive;

impl ImageFormation for Additive {
    fn tags(&self) -> Vec<ComponentTag> {
        vec![ComponentTag::Albedo, ComponentTag::Shading]
    }
    fn form(&self, g: &mut Graph, c: &[Var]) -> Result<Var> {
        Ok(g.add(c[0], c[1])?)
    }
}

fn basis_tensor(b: &DMatrix<f64>) -> Tensor {
    let (n, d) = b.shape();
    Tensor::new(vec![d, n], (0..d).flat_map(|i| (0..n).map(move |j| b[(j, i)])).collect()).unwrap()
}

/// Largest per-component MSE between the recovered components and the
/// closed-form projections of the target onto each span.
fn least_squares_gap(seed: u64) -> f64 {
    let (h, w, c, d) = (4, 4, 3, 4);
    let n = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = DMatrix::from_fn(n, 2 * d, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
    let mut mix = || DMatrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) + rng.gen_range(-0.3..0.3));
    let b1 = q.columns(0, d).into_owned() * mix();
    let b2 = q.columns(d, d).into_owned() * mix();
    let y = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
    let project = |b: &DMatrix<f64>| b * (b.transpose() * b).try_inverse().unwrap() * b.transpose() * &y;
    let (p1, p2) = (project(&b1), project(&b2));

    let l1 = Linear { basis: basis_tensor(&b1), tag: ComponentTag::Albedo, pixels: h * w, channels: c };
    let l2 = Linear { basis: basis_tensor(&b2), tag: ComponentTag::Shading, pixels: h * w, channels: c };
    let target = Image::new(h, w, c, y.iter().copied().collect()).unwrap();
    let zero = LatentW(vec![0.0; d]);
    let priors = vec![Prior::mean_only(zero.clone()), Prior::mean_only(zero.clone())];
    let cfg = InversionConfig { regularizer: RegularizerChoice::none(), ..Default::default() };
    let obj = Objective::new(&target, vec![&l1, &l2], &Additive, &priors, &cfg).unwrap();
    let (ws, trace) = optimize_latents(&obj, &cfg, &[zero.clone(), zero]).unwrap();
    assert_eq!(trace.len(), cfg.steps + 1);
    let c1 = &b1 * DVector::from_vec(ws[0].0.clone());
    let c2 = &b2 * DVector::from_vec(ws[1].0.clone());
    ((&c1 - &p1).norm_squared() / n as f64).max((&c2 - &p2).norm_squared() / n as f64)
}

#[test]
fn linear_generators_recover_least_squares_components() {
    for seed in 0..10 {
        let gap = least_squares_gap(seed);
        assert!(gap < 1e-6, "seed {seed}: {gap}");
    }
}

fn tiny_config(res_factor: usize) -> GeneratorConfig {
    GeneratorConfig {
        d_z: 8,
        d_w: 8,
        mapping_hidden: 16,
        mapping_layers: 2,
        base_channels: 6,
        stages: vec![SynthStage { factor: res_factor, channels: 3 }],
    }
}

fn tiny_gens(res_factor: usize, specular: bool) -> Vec<Generator> {
    let mut tags = vec![ComponentTag::Albedo, ComponentTag::Shading];
    if specular {
        tags.push(ComponentTag::Specular);
    }
    tags.iter()
        .enumerate()
        .map(|(i, t)| Generator::new(tiny_config(res_factor), vec![*t], 10 + i as u64).unwrap())
        .collect()
}

fn priors_for(gens: &[Generator]) -> Vec<Prior> {
    gens.iter().enumerate().map(|(i, g)| Prior::build(g, &format!("g{i}"), 200, i as u64).unwrap()).collect()
}

fn compose_from(gens: &[&Generator], ws: &[LatentW], model: &ForwardModel) -> Image {
    InversionResult::from_latents(gens, model, ws.to_vec(), vec![]).unwrap().reconstruction
}

#[test]
fn starting_at_the_true_codes_stays_there() {
    let gens = tiny_gens(2, true);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::non_lambertian();
    let truth: Vec<LatentW> = (0..3).map(|i| refs[i].map_to_w(&sample_z(8, 50 + i as u64, Some(2.0)).unwrap()).unwrap()).collect();
    let target = compose_from(&refs, &truth, &model);
    let cfg = InversionConfig { steps: 30, regularizer: RegularizerChoice::none(), ..Default::default() };
    let res = joint_invert(&target, &refs, &priors_for(&gens), &model, &cfg, Some(&truth)).unwrap();
    assert!(res.loss_trace[0].recon < 1e-12);
    for (a, b) in res.w_hats.iter().zip(&truth) {
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn optimization_does_not_increase_recon_loss() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let priors = priors_for(&gens);
    let model = ForwardModel::lambertian();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..20 {
        let target = if i % 2 == 0 {
            let ws: Vec<LatentW> = refs.iter().map(|g| g.map_to_w(&sample_z(8, 100 + i, None).unwrap()).unwrap()).collect();
            compose_from(&refs, &ws, &model)
        } else {
            Image::new(8, 8, 3, (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap()
        };
        let cfg = InversionConfig { steps: 60, ..Default::default() };
        let res = joint_invert(&target, &refs, &priors, &model, &cfg, None).unwrap();
        assert_eq!(res.loss_trace.len(), 61);
        let (first, last) = (res.loss_trace[0], res.loss_trace[60]);
        assert!(last.recon <= first.recon, "{i}: {} > {}", last.recon, first.recon);
        assert!(last.regularizer > 0.0);
    }
}

#[test]
fn default_init_is_the_prior_mean() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let priors = priors_for(&gens);
    let model = ForwardModel::lambertian();
    let target = Image::filled(8, 8, 3, 0.4);
    let cfg = InversionConfig { steps: 1, regularizer: RegularizerChoice::none(), ..Default::default() };
    let res = joint_invert(&target, &refs, &priors, &model, &cfg, None).unwrap();
    let means: Vec<LatentW> = priors.iter().map(|p| p.mean_w.clone()).collect();
    let at_mean = compose_from(&refs, &means, &model);
    let mse = crate::metrics::mse(&at_mean, &target).unwrap();
    assert!((res.loss_trace[0].recon - mse).abs() < 1e-12);
}

#[test]
fn result_reconstruction_is_the_composition_of_its_components() {
    let gens = tiny_gens(2, true);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::non_lambertian();
    let target = Image::filled(8, 8, 3, 0.6);
    let cfg = InversionConfig { steps: 20, ..Default::default() };
    let res = joint_invert(&target, &refs, &priors_for(&gens), &model, &cfg, None).unwrap();
    assert_eq!(model.compose(&res.linear()).unwrap().image, res.reconstruction);
    // The trace's last record matches the returned codes.
    let final_mse = crate::metrics::mse(&res.reconstruction, &target).unwrap();
    assert!((res.loss_trace.last().unwrap().recon - final_mse).abs() < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let gens = tiny_gens(2, true);
    let refs: Vec<&Generator> = gens.iter().collect();
    let priors = priors_for(&gens);
    let target = Image::filled(8, 8, 3, 0.5);
    let cfg = InversionConfig { steps: 1, ..Default::default() };
    let err = joint_invert(&target, &refs, &priors, &ForwardModel::lambertian(), &cfg, None).unwrap_err();
    assert!(matches!(err, Error::ComponentMismatch { .. }));
    let small = Image::filled(4, 4, 3, 0.5);
    assert!(joint_invert(&small, &refs, &priors, &ForwardModel::non_lambertian(), &cfg, None).is_err());
    let bad_init = vec![LatentW(vec![0.0; 3]); 3];
    assert!(joint_invert(&target, &refs, &priors, &ForwardModel::non_lambertian(), &cfg, Some(&bad_init)).is_err());
    let zero_steps = InversionConfig { steps: 0, ..cfg };
    assert!(joint_invert(&target, &refs, &priors, &ForwardModel::non_lambertian(), &zero_steps, None).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let target = Image::filled(8, 8, 3, 0.9);
    let cfg = InversionConfig { steps: 50, lr: 1e300, optimizer: OptimizerKind::Sgd, ..Default::default() };
    let err = joint_invert(&target, &refs, &priors_for(&gens), &ForwardModel::lambertian(), &cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step } if step >= 1), "{err}");
}

#[test]
fn joint_objective_gradient_matches_finite_differences() {
    let gens = tiny_gens(1, true);
    let priors = priors_for(&gens);
    let model = ForwardModel::non_lambertian();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = Image::new(4, 4, 3, (0..48).map(|_| rng.gen_range(0.05..0.6)).collect()).unwrap();
    for recon_loss in [ReconLoss::Mse, ReconLoss::MsePlusGradient] {
        let cfg = InversionConfig { regularizer: RegularizerChoice::knn(0.3, 5), recon_loss, ..Default::default() };
        let decoders: Vec<&dyn LatentDecoder> = gens.iter().map(|g| g as &dyn LatentDecoder).collect();
        let obj = Objective::new(&target, decoders, &model, &priors, &cfg).unwrap();
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::new(vec![1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect();
        let err = grad_check(
            |g, xs| match obj.build(g, xs) {
                Ok(t) => Ok(t.total),
                Err(Error::Autodiff(e)) => Err(e),
                Err(e) => panic!("{e}"),
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{recon_loss:?}: {err}");
    }
}

#[test]
fn single_joint_generator_inverts() {
    let single = tiny_config(2);
    let joint_cfg = single.capacity_matched(2);
    let joint = Generator::new(joint_cfg, vec![ComponentTag::Albedo, ComponentTag::Shading], 4).unwrap();
    let model = ForwardModel::lambertian();
    let prior = vec![Prior::build(&joint, "joint", 200, 1).unwrap()];
    let truth = vec![joint.map_to_w(&sample_z(joint.config.d_z, 3, None).unwrap()).unwrap()];
    let target = compose_from(&[&joint], &truth, &model);
    let cfg = InversionConfig { steps: 40, ..Default::default() };
    let res = joint_invert(&target, &[&joint], &prior, &model, &cfg, None).unwrap();
    assert_eq!(res.components.len(), 2);
    assert_eq!(res.generator_tags, vec![vec![ComponentTag::Albedo, ComponentTag::Shading]]);
    assert!(res.loss_trace[40].recon < res.loss_trace[0].recon);
    let img = joint.synthesize_image(&res.w_hats[0]).unwrap();
    assert_eq!(res.components[1].tonemapped.image, img.channels_range(3, 3).unwrap());
}

#[test]
fn knn_regularized_runs_stay_near_the_bank() {
    // Targets drawn from the generators' own range, started at the mean.
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let priors = priors_for(&gens);
    let model = ForwardModel::lambertian();
    for i in 0..5 {
        let ws: Vec<LatentW> = refs.iter().map(|g| g.map_to_w(&sample_z(8, 300 + i, Some(1.0)).unwrap()).unwrap()).collect();
        let target = compose_from(&refs, &ws, &model);
        let cfg = InversionConfig { steps: 200, regularizer: RegularizerChoice::knn(1.0, 5), ..Default::default() };
        let res = joint_invert(&target, &refs, &priors, &model, &cfg, None).unwrap();
        for (w, p) in res.w_hats.iter().zip(&priors) {
            let bank = p.bank.as_ref().unwrap();
            let before = crate::priors::knn_loss(&p.mean_w, bank, 5).unwrap();
            let after = crate::priors::knn_loss(w, bank, 5).unwrap();
            assert!(after <= before + 1e-6, "{i}: {after} > {before}");
        }
    }
}

#[test]
fn export_writes_every_artifact() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::lambertian();
    let cfg = InversionConfig { steps: 3, ..Default::default() };
    let mut res = joint_invert(&Image::filled(8, 8, 3, 0.3), &refs, &priors_for(&gens), &model, &cfg, None).unwrap();
    let gt = res.tonemapped();
    res.evaluate(&gt, &res.reconstruction.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    res.export(dir.path(), &cfg).unwrap();
    for f in ["albedo.pfm", "albedo.png", "shading.pfm", "shading.png", "reconstruction.png", "loss_trace.json", "metrics.json", "result.json", W_HATS_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (ws, tags) = read_latents(dir.path()).unwrap();
    assert_eq!(ws, res.w_hats);
    assert_eq!(tags, res.generator_tags);
    let trace: Vec<LossRecord> = io::read_json(dir.path().join("loss_trace.json")).unwrap();
    assert_eq!(trace, res.loss_trace);
    let echoed: InversionConfig = io::read_json(dir.path().join("result.json")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn relight_holds_other_components() {
    let gens = tiny_gens(2, true);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::non_lambertian();
    let cfg = InversionConfig { steps: 5, ..Default::default() };
    let res = joint_invert(&Image::filled(8, 8, 3, 0.5), &refs, &priors_for(&gens), &model, &cfg, None).unwrap();
    let dirs = sefa_directions(&gens[1], 3).unwrap();
    let out = relight(&res, &gens[1], &dirs, 0, &[0.0, -3.0, 3.0], &model).unwrap();
    assert_eq!(out[0], res.reconstruction);
    assert_ne!(out[1], out[2]);
    let shading_a = gens[1].synthesize(&dirs.apply(&res.w_hats[1], 0, -3.0).unwrap()).unwrap();
    let shading_b = gens[1].synthesize(&dirs.apply(&res.w_hats[1], 0, 3.0).unwrap()).unwrap();
    assert!(crate::metrics::mse(&shading_a.image, &shading_b.image).unwrap() > 0.0);
    assert!(matches!(relight(&res, &gens[1], &dirs, 3, &[0.0], &model), Err(Error::OutOfRange { .. })));
    assert!(relight(&res, &gens[0], &dirs, 0, &[0.0], &model).is_err());
}

#[test]
fn pti_without_d_loss_fits_the_target() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::lambertian();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = Image::new(8, 8, 3, (0..192).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let w_hats: Vec<LatentW> = refs.iter().map(|g| g.map_to_w(&sample_z(8, 1, None).unwrap()).unwrap()).collect();
    let before = w_hats.clone();
    let cfg = PtiConfig { steps: 60, lr: 3e-3, use_d_loss: false, ..Default::default() };
    let (tuned, res) = pti_finetune(&refs, &[], &w_hats, &target, &model, &cfg).unwrap();
    assert_eq!(res.loss_trace.len(), 61);
    assert!(res.loss_trace[60].recon < res.loss_trace[0].recon);
    assert_eq!(res.w_hats, before);
    assert_eq!(w_hats, before);
    // Only synthesis weights move.
    assert_eq!(tuned[0].mapping, gens[0].mapping);
    assert_ne!(tuned[0].synth_input, gens[0].synth_input);
}

#[test]
fn pti_d_loss_keeps_anchor_scores_higher() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let discs: Vec<Discriminator> = (0..2).map(|i| Discriminator::new((8, 8, 3), &DiscriminatorConfig { widths: vec![4] }, 70 + i)).collect();
    let drefs: Vec<&Discriminator> = discs.iter().collect();
    let model = ForwardModel::lambertian();
    let target = Image::filled(8, 8, 3, 0.35);
    let w_hats: Vec<LatentW> = refs.iter().map(|g| g.map_to_w(&sample_z(8, 2, None).unwrap()).unwrap()).collect();
    let base = PtiConfig { steps: 40, lr: 3e-3, lambda_ld: 1.0, ..Default::default() };
    let (with_d, _) = pti_finetune(&refs, &drefs, &w_hats, &target, &model, &base).unwrap();
    let (without_d, _) = pti_finetune(&refs, &drefs, &w_hats, &target, &model, &PtiConfig { use_d_loss: false, ..base.clone() }).unwrap();
    for i in 0..2 {
        let a = mean_anchor_score(&with_d[i], &discs[i], &w_hats[i], 16, 0.3, 99).unwrap();
        let b = mean_anchor_score(&without_d[i], &discs[i], &w_hats[i], 16, 0.3, 99).unwrap();
        assert!(a >= b, "{i}: {a} < {b}");
    }
    assert!(pti_finetune(&refs, &drefs[..1], &w_hats, &target, &model, &base).is_err());
    let bad_beta = PtiConfig { beta: 1.5, ..base };
    assert!(pti_finetune(&refs, &drefs, &w_hats, &target, &model, &bad_beta).is_err());
}

#[test]
fn drift_d_loss_starts_at_zero() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let discs: Vec<Discriminator> = (0..2).map(|i| Discriminator::new((8, 8, 3), &DiscriminatorConfig { widths: vec![4] }, 80 + i)).collect();
    let drefs: Vec<&Discriminator> = discs.iter().collect();
    let model = ForwardModel::lambertian();
    let target = Image::filled(8, 8, 3, 0.6);
    let w_hats: Vec<LatentW> = refs.iter().map(|g| g.map_to_w(&sample_z(8, 3, None).unwrap()).unwrap()).collect();
    let cfg = PtiConfig { steps: 20, lr: 1e-2, lambda_ld: 1.0, ..Default::default() };
    assert_eq!(cfg.d_loss_form, pti::DLossForm::Drift);
    let (_, r) = pti_finetune(&refs, &drefs, &w_hats, &target, &model, &cfg).unwrap();
    // The untuned generator is its own baseline, so nothing has drifted yet.
    assert_eq!(r.loss_trace[0].regularizer, 0.0);
    assert!(r.loss_trace.iter().all(|l| l.regularizer >= 0.0));
    let ns = PtiConfig { d_loss_form: pti::DLossForm::NonSaturating, ..cfg };
    let (_, r) = pti_finetune(&refs, &drefs, &w_hats, &target, &model, &ns).unwrap();
    assert!(r.loss_trace[0].regularizer > 0.0);
}

#[test]
fn encoder_learns_an_identity_map() {
    // G = identity on 16 values: an image's pixels are its code.
    let cfg = GeneratorConfig { d_z: 16, d_w: 16, mapping_layers: 0, ..tiny_config(1) };
    let gen = Generator::new(cfg, vec![ComponentTag::Albedo], 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        EncoderSample { image: Image::new(4, 4, 1, v.clone()).unwrap(), w: Some(LatentW(v)), component: None }
    };
    let train: Vec<EncoderSample> = (0..400).map(|_| sample(&mut rng)).collect();
    let held: Vec<EncoderSample> = (0..50).map(|_| sample(&mut rng)).collect();
    let ecfg = EncoderConfig { steps: 3000, batch: 16, lr: 3e-3, widths: vec![4], ..Default::default() };
    let enc = train_encoder(&gen, "toy", &train, &ecfg).unwrap();
    let mut err = 0.0;
    for s in &held {
        let w = enc.encode(&s.image).unwrap();
        err += w.0.iter().zip(&s.w.as_ref().unwrap().0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
    }
    err /= held.len() as f64;
    assert!(err < 1e-3, "{err}");
    let again = train_encoder(&gen, "toy", &train, &ecfg).unwrap();
    assert_eq!(again, enc);
}

#[test]
fn encoder_on_a_constant_dataset_is_constant() {
    let gens = tiny_gens(2, false);
    let data: Vec<EncoderSample> = (0..20)
        .map(|_| EncoderSample { image: Image::filled(8, 8, 3, 0.4), w: Some(LatentW(vec![0.5; 8])), component: None })
        .collect();
    let enc = train_encoder(&gens[0], "albedo", &data, &EncoderConfig { steps: 50, ..Default::default() }).unwrap();
    let outs = enc.encode_batch(&vec![Image::filled(8, 8, 3, 0.4); 3]).unwrap();
    assert!(outs.windows(2).all(|p| p[0] == p[1]));
    assert!(train_encoder(&gens[0], "albedo", &[], &EncoderConfig::default()).is_err());
}

#[test]
fn encoder_init_shapes_and_checkpoint() {
    let gens = tiny_gens(2, false);
    let refs: Vec<&Generator> = gens.iter().collect();
    let model = ForwardModel::lambertian();
    let data = synthetic_encoder_data(&refs, &model, 12, 3).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data[0][0].image, data[1][0].image);
    let cfg = EncoderConfig { steps: 20, batch: 4, widths: vec![4], ..Default::default() };
    let encs: Vec<Encoder> = refs.iter().zip(&data).enumerate().map(|(i, (g, d))| train_encoder(g, &format!("g{i}"), d, &cfg).unwrap()).collect();
    let erefs: Vec<&Encoder> = encs.iter().collect();
    let target = data[0][5].image.clone();
    let ws = encoder_init(&erefs, &refs, &target).unwrap();
    assert_eq!(ws.iter().map(|w| w.dim()).collect::<Vec<_>>(), vec![8, 8]);
    assert_eq!(ws, encoder_init(&erefs, &refs, &target).unwrap());
    assert!(encoder_init(&erefs[..1], &refs, &target).is_err());

    let dir = tempfile::tempdir().unwrap();
    encs[0].save(dir.path().join("enc.jinv")).unwrap();
    assert_eq!(Encoder::load(dir.path().join("enc.jinv")).unwrap(), encs[0]);
}
