use std::time::Instant;
use uvpatch::diffcore::{AdamState, Graph, Tensor};
use uvpatch::inversion::{build_perceptual_vs_target, FeatureStack, NoiseBank};
use uvpatch::radiance::{build_synthesize, Pose, RadianceConfig, RadianceModel, SynthesisOpts};

fn main() {
    let base = RadianceModel::new(RadianceConfig::default(), 42);
    let pose = Pose::frontal(2.7);
    let target = base.synthesize(&pose).unwrap();
    let stack = FeatureStack::perceptual();
    let target_feats = stack.features(&target).unwrap();
    let bank = NoiseBank::zeros(base.cfg.noise_shape(), base.cfg.noise_layers());

    // Stage-2-like graph: generator trainable.
    let mut g = Graph::new();
    let built = build_synthesize(
        &mut g, &base, &pose,
        &SynthesisOpts { train_generator: true, noise: Some(bank.images.clone()), ..SynthesisOpts::frozen() },
    ).unwrap();
    let ids = stack.params.register_frozen(&mut g);
    let pd = build_perceptual_vs_target(&mut g, &stack, &ids, built.x_cf, &target_feats).unwrap();
    let tleaf = g.leaf(target.clone());
    let diff = g.sub(built.x_cf, tleaf).unwrap();
    let sq = g.mul(diff, diff).unwrap();
    let px = g.mean(sq).unwrap();
    let pxs = g.scale(px, 1.0).unwrap();
    let loss = g.add(pd, pxs).unwrap();

    let t0 = Instant::now();
    for _ in 0..5 { g.forward().unwrap(); }
    println!("s2 forward:  {:?}/iter", t0.elapsed() / 5);
    let t1 = Instant::now();
    for _ in 0..5 { g.backward(loss).unwrap(); }
    println!("s2 backward: {:?}/iter", t1.elapsed() / 5);

    // Full loop body cost.
    let mut tuned = base.generator.clone();
    let sizes: Vec<usize> = tuned.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = AdamState::new(0.002, &sizes);
    let t2 = Instant::now();
    for _ in 0..5 {
        for (id, t) in built.generator.iter().zip(tuned.tensors()) {
            g.set_leaf(*id, t.data()).unwrap();
        }
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f32>> = built.generator.iter()
            .map(|id| g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*id).numel()]))
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
        let mut tensors = tuned.tensors_mut();
        adam.step(&mut tensors, &grad_refs, 0.002).unwrap();
    }
    println!("s2 full loop: {:?}/iter", t2.elapsed() / 5);
    let _ = Tensor::zeros(&[1]);
}
