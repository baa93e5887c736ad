//! Finite-difference checks of the full tiny model's loss gradients.

use ndarray::{Array2, Array3};
use tags_core::autograd::check::{input_central_difference, param_central_difference, relative_error};
use tags_core::autograd::{Graph, ParamStore};
use tags_core::head::PointPrompt;
use tags_core::model::{ModelConfig, TagsModel};
use tags_core::objectives::{alignment_loss_graph, LossConfig};
use tags_core::prompt_bank::TextEmbeddingPair;
use tags_core::volume::{inject_organ_channel, MaskVolume, ModelInput, Volume};

fn sphere(n: usize, r2: f64) -> Array3<u8> {
    Array3::from_shape_fn((n, n, n), |(z, y, x)| {
        let d: f64 = [z, y, x].iter().map(|&c| (c as f64 - 14.5).powi(2)).sum();
        u8::from(d < r2)
    })
}

fn fixture() -> (ModelInput, MaskVolume, TextEmbeddingPair, Vec<PointPrompt>) {
    let tumor = sphere(32, 30.0);
    let organ = sphere(32, 150.0);
    let img = Array3::from_shape_fn((32, 32, 32), |(z, y, x)| {
        0.1 + 0.3 * f64::from(organ[[z, y, x]]) + 0.4 * f64::from(tumor[[z, y, x]]) + 0.01 * ((z * 7 + y * 3 + x) % 11) as f64
    });
    let input = inject_organ_channel(&Volume::new(img, [1.0; 3]).unwrap(), &MaskVolume::new(organ, [1.0; 3]).unwrap()).unwrap();
    let text = TextEmbeddingPair {
        fg: (0..32).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect(),
        bg: (0..32).map(|i| ((i * 3 % 5) as f64 - 2.0) / 2.0).collect(),
    };
    let pts = vec![PointPrompt::fg([14, 14, 15]), PointPrompt::bg([3, 4, 5])];
    (input, MaskVolume::new(tumor, [1.0; 3]).unwrap(), text, pts)
}

#[test]
fn total_loss_gradients_match_central_differences() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = TagsModel::init(&cfg, 4).unwrap();
    let (input, y, text, pts) = fixture();
    let lc = LossConfig::default();
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = model.loss(&mut g, &input, &pts, &y, &text, &lc).unwrap();
        g.scalar(l.total)
    };
    let grads = {
        let mut g = Graph::new(&store);
        let l = model.loss(&mut g, &input, &pts, &y, &text, &lc).unwrap();
        g.backward(l.total)
    };
    let ids: Vec<_> = store.trainable_ids();
    let mut worst: f64 = 0.0;
    for id in ids {
        let (r, c) = store.value(id).dim();
        for k in 0..3 {
            let idx = ((k * 7) % r, (k * 5 + 1) % c);
            let a = grads.param(id).map(|gm| gm[idx]).unwrap_or(0.0);
            let n = param_central_difference(&mut store, id, idx, 1e-4, &mut |s| loss(s));
            let e = relative_error(a, n, 1e-7);
            worst = worst.max(e);
            assert!(e < 1e-4, "{} {:?}: analytic {a} numeric {n}", store.get(id).name, idx);
        }
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn alignment_gradients_wrt_adapter_outputs() {
    let (_, y, text, _) = fixture();
    let lc = LossConfig::default();
    let a0 = Array2::from_shape_fn((64, 32), |(i, j)| (((i * 13 + j * 7) % 17) as f64 - 8.0) / 8.0);
    let f = |a: &Array2<f64>| {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(a.clone());
        let l = alignment_loss_graph(&mut g, &[v, v], [4, 4, 4], &text, &y, &lc).unwrap();
        g.scalar(l.total)
    };
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input_with_grad(a0.clone());
    let l = alignment_loss_graph(&mut g, &[v], [4, 4, 4], &text, &y, &lc).unwrap();
    let two = g.scale(l.total, 2.0);
    let grad = g.backward(two).var(v).unwrap().clone();
    let mut a = a0.clone();
    for k in 0..40 {
        let idx = ((k * 11) % 64, (k * 3) % 32);
        let n = input_central_difference(&mut a, idx, 1e-4, &mut |x| f(x));
        assert!(relative_error(grad[idx], n, 1e-7) < 1e-4, "{idx:?} {} vs {n}", grad[idx]);
    }
}
