use surfacenet_core::{validate_maps, MapKind, ValidateOptions};
use surfacenet_model::convert::{kind_index, raster_to_tensor};
use surfacenet_model::discriminator::{build_discriminator, DiscriminatorConfig};
use surfacenet_model::generator::{build_generator, GeneratorConfig};
use surfacenet_model::graph::Graph;
use surfacenet_model::losses::{discriminator_loss_var, generator_adv_loss_var};
use surfacenet_model::params::{Adam, AdamConfig, Init};
use surfacenet_model::tensor::Tensor;

fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut init = Init::new(seed);
    Tensor::from_fn(shape, |_| init.uniform())
}

#[test]
fn generator_keeps_input_resolution() {
    let net = build_generator::<f32>(&GeneratorConfig::tiny()).unwrap();
    for (h, w) in [(64, 64), (128, 128), (96, 64), (256, 256)] {
        let g = Graph::no_grad();
        let out = net.forward(&g, &g.constant(Tensor::full([1, 3, h, w], 0.4f32))).unwrap();
        for k in MapKind::ALL {
            assert_eq!(out.map(k).shape(), [1, k.channels(), h, w]);
        }
    }
}

#[test]
fn generator_outputs_pass_map_validation() {
    let net = build_generator::<f32>(&GeneratorConfig::desk()).unwrap();
    let rec = &surfacenet_core::dataset::generate_records(1, &[surfacenet_core::Pattern::Bricks], 64, 2).unwrap()[0];
    let maps = net.predict(&[&rec.render.linear]).unwrap().remove(0);
    let report = validate_maps(&maps, ValidateOptions::default());
    assert!(report.passed(), "{report}");
    let _ = raster_to_tensor::<f32>(&maps.diffuse);
}

#[test]
fn zeroing_one_head_changes_only_its_map() {
    let mut net = build_generator::<f64>(&GeneratorConfig::tiny()).unwrap();
    let x = noise([1, 3, 16, 16], 5);
    let run = |net: &surfacenet_model::generator::GeneratorNetwork<f64>| {
        let g = Graph::no_grad();
        let out = net.forward(&g, &g.constant(x.clone())).unwrap();
        out.maps.map(|m| m.value().clone())
    };
    let before = run(&net);
    for kind in MapKind::ALL {
        let mut changed = net.clone();
        for id in net.head_params(kind) {
            changed.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let after = run(&changed);
        for other in MapKind::ALL {
            let i = kind_index(other);
            let diff = before[i].max_abs_diff(&after[i]);
            if other == kind {
                assert!(diff > 1e-6, "{kind:?} did not change");
            } else {
                assert_eq!(diff, 0.0, "{other:?} changed when zeroing {kind:?}");
            }
        }
    }
    net.params = net.params.clone();
}

/// Input interval `[lo, hi]` seen by score-map cell `i`, from the layer specs.
fn receptive_interval(c: &DiscriminatorConfig, i: usize) -> (i64, i64) {
    let (mut lo, mut hi) = (i as i64, i as i64);
    for l in c.layers.iter().rev() {
        lo = lo * l.stride as i64 - l.padding as i64;
        hi = hi * l.stride as i64 - l.padding as i64 + l.kernel as i64 - 1;
    }
    (lo, hi)
}

#[test]
fn discriminator_scores_are_local() {
    let c = DiscriminatorConfig::tiny();
    let d = build_discriminator::<f64>(&c).unwrap();
    let x = noise([1, 10, 96, 96], 8);
    let scores = |x: &Tensor<f64>| {
        let g = Graph::no_grad();
        d.patch_scores(&g, &g.constant(x.clone())).unwrap().value().clone()
    };
    let base = scores(&x);
    let [_, _, oh, ow] = base.shape();
    let (py, px) = (5usize, 90usize);
    let mut y = x.clone();
    for ch in 0..10 {
        let i = y.index(0, ch, py, px);
        y.data_mut()[i] += 1.0;
    }
    let moved = scores(&y);
    let mut inside = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (ylo, yhi) = receptive_interval(&c, oy);
            let (xlo, xhi) = receptive_interval(&c, ox);
            let covers = (ylo..=yhi).contains(&(py as i64)) && (xlo..=xhi).contains(&(px as i64));
            let delta = (base.at(0, 0, oy, ox) - moved.at(0, 0, oy, ox)).abs();
            if covers {
                inside += 1;
            } else {
                assert!(delta < 1e-12, "cell ({oy},{ox}) outside the receptive field moved by {delta}");
            }
        }
    }
    assert!(inside > 0);
    let rf = receptive_interval(&c, 0);
    assert_eq!(rf.1 - rf.0 + 1, 110);
}

#[test]
fn one_step_moves_each_network_the_right_way() {
    let gen = build_generator::<f64>(&GeneratorConfig::tiny()).unwrap();
    let mut disc = build_discriminator::<f64>(&DiscriminatorConfig::tiny()).unwrap();
    let image = noise([2, 3, 64, 64], 1);
    let real = noise([2, 10, 64, 64], 2);
    let fake_of = |gen: &surfacenet_model::generator::GeneratorNetwork<f64>| {
        let g = Graph::no_grad();
        let out = gen.forward(&g, &g.constant(image.clone())).unwrap();
        surfacenet_model::discriminator::discriminator_input(&out.maps).value().clone()
    };
    let fake = fake_of(&gen);
    let d_loss = |disc: &surfacenet_model::discriminator::DiscriminatorNetwork<f64>| {
        let g = Graph::new();
        let l = discriminator_loss_var(
            &disc.discriminate(&g, &g.constant(real.clone())).unwrap(),
            &disc.discriminate(&g, &g.constant(fake.clone())).unwrap(),
        );
        let v = l.value().item();
        (v, g.backward(&l))
    };
    let (before, grads) = d_loss(&disc);
    Adam::new(AdamConfig::with_learning_rate(1e-3), &disc.params).update(&mut disc.params, &grads);
    let (after, _) = d_loss(&disc);
    assert!(after < before, "discriminator loss {before} -> {after}");

    let mut gen = gen;
    let g_loss = |gen: &surfacenet_model::generator::GeneratorNetwork<f64>| {
        let g = Graph::new();
        let out = gen.forward(&g, &g.constant(image.clone())).unwrap();
        let x = surfacenet_model::discriminator::discriminator_input(&out.maps);
        let l = generator_adv_loss_var(&disc.discriminate(&g, &x).unwrap());
        let v = l.value().item();
        (v, g.backward(&l))
    };
    let d_fp = disc.params.fingerprint();
    let (before, grads) = g_loss(&gen);
    Adam::new(AdamConfig::with_learning_rate(1e-3), &gen.params).update(&mut gen.params, &grads);
    let (after, _) = g_loss(&gen);
    assert!(after < before, "generator adversarial loss {before} -> {after}");
    assert_eq!(disc.params.fingerprint(), d_fp);
}
