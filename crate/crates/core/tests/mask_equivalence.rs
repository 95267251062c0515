use std::collections::BTreeSet;

use enprune::engine::{predict, predict_masked};
use enprune::graph::{ChannelAnalysis, GroupId, ModelGraph};
use enprune::toybench::{build_toy_mlp, build_zoo, randomize_batch_norm};
use enprune::{Error, Rng, Tensor};

fn random_batch(g: &ModelGraph, n: usize, rng: &mut Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(g.input_shape());
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.normal()).collect()).unwrap()
}

/// A random removal set that leaves every layer at least one channel.
fn random_removal(g: &ModelGraph, an: &ChannelAnalysis, rng: &mut Rng) -> (BTreeSet<GroupId>, ModelGraph) {
    loop {
        let p = rng.uniform_range(0.1, 0.6);
        let removed: BTreeSet<GroupId> = an.groups.iter().filter(|_| rng.uniform() < p).map(|gr| gr.id).collect();
        match g.remove_channels(an, &removed) {
            Ok(pruned) => return (removed, pruned),
            Err(Error::Refused(_)) => continue,
            Err(e) => panic!("unexpected rewrite error: {e}"),
        }
    }
}

fn relative_gap(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.sub(b).unwrap().max_abs();
    diff / b.max_abs().max(1e-12)
}

#[test]
fn pruned_forward_matches_masked_forward_on_every_zoo_graph() {
    let mut rng = Rng::new(11);
    for (name, mut g) in build_zoo(5).unwrap() {
        randomize_batch_norm(&mut g, 5).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        for _ in 0..20 {
            let (removed, pruned) = random_removal(&g, &an, &mut rng);
            let masks = an.masks(&removed);
            for _ in 0..5 {
                let x = random_batch(&g, 4, &mut rng);
                let gap = relative_gap(&predict_masked(&g, &x, &masks).unwrap(), &predict(&pruned, &x).unwrap());
                assert!(gap <= 1e-6, "{name}: relative gap {gap:e} with {} groups removed", removed.len());
            }
        }
    }
}

#[test]
fn empty_removal_is_bit_identical() {
    let mut rng = Rng::new(2);
    for (_, g) in build_zoo(1).unwrap() {
        let an = ChannelAnalysis::new(&g).unwrap();
        let same = g.remove_channels(&an, &BTreeSet::new()).unwrap();
        let x = random_batch(&g, 3, &mut rng);
        assert_eq!(predict(&g, &x).unwrap(), predict(&same, &x).unwrap());
    }
}

#[test]
fn toy_mlp_mask_equivalence() {
    let g = build_toy_mlp(4, 0).unwrap();
    let an = ChannelAnalysis::new(&g).unwrap();
    let mut rng = Rng::new(4);
    let (removed, pruned) = random_removal(&g, &an, &mut rng);
    let x = random_batch(&g, 16, &mut rng);
    let gap = relative_gap(&predict_masked(&g, &x, &an.masks(&removed)).unwrap(), &predict(&pruned, &x).unwrap());
    assert!(gap <= 1e-9, "gap {gap:e}");
}

#[test]
fn masked_channels_read_as_zero_downstream() {
    // Removing a channel is equivalent to zeroing it, not to dropping its BN shift.
    let mut g = build_zoo(0).unwrap().remove(0).1;
    randomize_batch_norm(&mut g, 9).unwrap();
    let an = ChannelAnalysis::new(&g).unwrap();
    let removed: BTreeSet<GroupId> = [0].into();
    let pruned = g.remove_channels(&an, &removed).unwrap();
    let x = random_batch(&g, 2, &mut Rng::new(0));
    let full = predict(&g, &x).unwrap();
    let masked = predict_masked(&g, &x, &an.masks(&removed)).unwrap();
    assert!(relative_gap(&masked, &predict(&pruned, &x).unwrap()) <= 1e-9);
    assert!(relative_gap(&masked, &full) > 0.0);
}
