//! Minimal reverse-mode autodiff used by the encoder, decoder and losses.

pub mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, Param, ParamGroup, ParamId, ParamStore};

/// Lower clamp applied before `ln` in the focal loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::check::{input_central_difference, param_central_difference, relative_error};
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let w = s.init("w", ParamGroup::Decoder, (4, 6), Init::TruncNormal(0.5), &mut rng);
        let b = s.init("b", ParamGroup::Decoder, (1, 6), Init::TruncNormal(0.5), &mut rng);
        let gm = s.init("g", ParamGroup::Normalization, (1, 6), Init::TruncNormal(0.5), &mut rng);
        let bt = s.init("bt", ParamGroup::Normalization, (1, 6), Init::TruncNormal(0.5), &mut rng);
        let w2 = s.init("w2", ParamGroup::Decoder, (6 * 27, 2), Init::TruncNormal(0.3), &mut rng);
        (s, vec![w, b, gm, bt, w2])
    }

    fn input() -> Array2<f64> {
        Array2::from_shape_fn((8, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.8)
    }

    // x:[8,4] grid 2x2x2 -> linear -> layernorm -> gelu -> im2col -> linear(2)
    // -> resize to 3x3x3 -> row normalize -> softmax2 -> focal + dice
    fn build(g: &mut Graph<'_>, ids: &[ParamId], x: Var) -> Var {
        let h = g.linear(x, ids[0], Some(ids[1]));
        let h = g.layer_norm(h, ids[2], ids[3]);
        let h = g.gelu(h);
        let h = g.im2col3(h, [2, 2, 2]);
        let h = g.linear(h, ids[4], None);
        let h = g.resize(h, [2, 2, 2], [3, 3, 3]);
        let h = g.row_normalize(h);
        let h = g.scale(h, 3.0);
        let p = g.softmax2(h);
        let target = Array2::from_shape_fn((27, 1), |(i, _)| f64::from(i % 4 == 0));
        let f = g.focal_loss(p, target.clone(), 0.25, 2.0);
        let d = g.dice_loss(p, target, 1e-5);
        let sm = g.softmax_rows(h);
        let s = g.sum(sm);
        let s = g.scale(s, 0.01);
        let l = g.add(f, d);
        g.add(l, s)
    }

    fn loss_of(s: &ParamStore, ids: &[ParamId], x: &Array2<f64>) -> f64 {
        let mut g = Graph::new(s);
        let xv = g.input(x.clone());
        let l = build(&mut g, ids, xv);
        g.scalar(l)
    }

    #[test]
    fn composite_gradients_match_central_differences() {
        let (mut s, ids) = store();
        let x = input();
        let (grads, xgrad) = {
            let mut g = Graph::new(&s);
            let xv = g.input_with_grad(x.clone());
            let l = build(&mut g, &ids, xv);
            let gr = g.backward(l);
            let xg = gr.var(xv).unwrap().clone();
            let pg: Vec<_> = ids.iter().map(|id| gr.param(*id).unwrap().clone()).collect();
            (pg, xg)
        };
        for (k, id) in ids.iter().enumerate() {
            let shape = s.value(*id).dim();
            for i in 0..shape.0.min(5) {
                for j in 0..shape.1 {
                    let mut f = |st: &ParamStore| loss_of(st, &ids, &x);
                    let n = param_central_difference(&mut s, *id, (i, j), 1e-5, &mut f);
                    let a = grads[k][[i, j]];
                    assert!(relative_error(a, n, 1e-6) < 1e-5, "param {k} ({i},{j}): {a} vs {n}");
                }
            }
        }
        let mut xm = x.clone();
        for i in 0..8 {
            for j in 0..4 {
                let mut f = |xx: &Array2<f64>| loss_of(&s, &ids, xx);
                let n = input_central_difference(&mut xm, (i, j), 1e-5, &mut f);
                assert!(relative_error(xgrad[[i, j]], n, 1e-6) < 1e-5);
            }
        }
    }

    #[test]
    fn attention_style_ops_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let wq = s.init("wq", ParamGroup::Attention, (4, 4), Init::TruncNormal(0.5), &mut rng);
        let wk = s.init("wk", ParamGroup::Decoder, (4, 4), Init::TruncNormal(0.5), &mut rng);
        let x = input();
        let f = |st: &ParamStore, track: bool| {
            let mut g = Graph::new(st);
            if track {
                g = g.with_frozen_grads();
            }
            let xv = g.input(x.clone());
            let q = g.linear(xv, wq, None);
            let k = g.linear(xv, wk, None);
            let a = g.matmul_bt(q, k);
            let a = g.softmax_rows(a);
            let q2 = g.slice_cols(q, 1, 2);
            let k2 = g.slice_cols(k, 0, 2);
            let c = g.concat_cols(&[q2, k2]);
            let o = g.matmul(a, c);
            let o = g.sigmoid(o);
            let l = g.sum(o);
            (g.scalar(l), if track { Some(g.backward(l).param(wq).unwrap().clone()) } else { None })
        };
        let (_, gq) = f(&s, true);
        let gq = gq.unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut ff = |st: &ParamStore| f(st, false).0;
                let n = param_central_difference(&mut s, wq, (i, j), 1e-5, &mut ff);
                assert!(relative_error(gq[[i, j]], n, 1e-6) < 1e-5);
            }
        }
        // frozen params receive no gradient by default
        let mut g = Graph::new(&s);
        let xv = g.input(x.clone());
        let q = g.linear(xv, wq, None);
        let l = g.sum(q);
        assert!(g.backward(l).param(wq).is_none());
    }

    #[test]
    fn adamw_with_zero_lr_changes_nothing() {
        let (mut s, ids) = store();
        let before = s.clone();
        let grads = {
            let mut g = Graph::new(&s);
            let xv = g.input(input());
            let l = build(&mut g, &ids, xv);
            g.backward(l)
        };
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, &grads);
        assert_eq!(s, before);
    }
}
