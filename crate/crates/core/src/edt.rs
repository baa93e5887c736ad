//! Exact squared Euclidean distance transform (Felzenszwalb & Huttenlocher),
//! separable over the three axes with anisotropic spacing.

use ndarray::{Array3, ArrayViewMut1, Axis};

/// Squared distance in physical units from every voxel to the nearest voxel
/// where `feature` is true. Infinite when there are no features.
pub fn squared_edt(feature: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = feature.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let longest = d.shape().iter().copied().max().unwrap_or(0);
    let mut buf = Scratch::new(longest);
    for (axis, &s) in spacing.iter().enumerate() {
        for lane in d.lanes_mut(Axis(axis)) {
            transform_1d(lane, s, &mut buf);
        }
    }
    d
}

struct Scratch {
    f: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            f: vec![0.0; n],
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }
}

fn transform_1d(mut lane: ArrayViewMut1<'_, f64>, s: f64, buf: &mut Scratch) {
    let n = lane.len();
    for (i, x) in lane.iter().enumerate() {
        buf.f[i] = *x;
    }
    let pos = |i: usize| i as f64 * s;
    // Lower envelope of parabolas rooted at finite samples.
    let mut k: isize = -1;
    for q in 0..n {
        let fq = buf.f[q];
        if fq.is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                buf.v[0] = q;
                buf.z[0] = f64::NEG_INFINITY;
                buf.z[1] = f64::INFINITY;
                break;
            }
            let vk = buf.v[k as usize];
            let sep = ((fq + pos(q) * pos(q)) - (buf.f[vk] + pos(vk) * pos(vk))) / (2.0 * (pos(q) - pos(vk)));
            if sep <= buf.z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            buf.v[k as usize] = q;
            buf.z[k as usize] = sep;
            buf.z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        lane.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, out) in lane.iter_mut().enumerate() {
        while buf.z[j + 1] < pos(q) {
            j += 1;
        }
        let vj = buf.v[j];
        let dx = pos(q) - pos(vj);
        *out = dx * dx + buf.f[vj];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(feature: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
        let pts: Vec<_> = feature.indexed_iter().filter(|(_, &f)| f).map(|(p, _)| p).collect();
        Array3::from_shape_fn(feature.raw_dim(), |(z, y, x)| {
            pts.iter()
                .map(|&(a, b, c)| {
                    let dz = (z as f64 - a as f64) * spacing[0];
                    let dy = (y as f64 - b as f64) * spacing[1];
                    let dx = (x as f64 - c as f64) * spacing[2];
                    dz * dz + dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn single_seed() {
        let mut f = Array3::from_elem((3, 4, 5), false);
        f[[1, 2, 3]] = true;
        let d = squared_edt(&f, [1.0, 2.0, 0.5]);
        assert_eq!(d[[1, 2, 3]], 0.0);
        assert_eq!(d[[0, 0, 0]], 1.0 + 16.0 + 2.25);
    }

    #[test]
    fn no_features_is_infinite() {
        let d = squared_edt(&Array3::from_elem((2, 2, 2), false), [1.0; 3]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            bits in proptest::collection::vec(proptest::bool::weighted(0.1), 6 * 5 * 7),
            sz in 0.5f64..2.5, sy in 0.5f64..2.5, sx in 0.5f64..2.5,
        ) {
            let f = Array3::from_shape_vec((6, 5, 7), bits).unwrap();
            let a = squared_edt(&f, [sz, sy, sx]);
            let b = brute(&f, [sz, sy, sx]);
            for (x, y) in a.iter().zip(b.iter()) {
                if y.is_infinite() {
                    prop_assert!(x.is_infinite());
                } else {
                    prop_assert!((x - y).abs() <= 1e-9 * y.max(1.0));
                }
            }
        }
    }
}
