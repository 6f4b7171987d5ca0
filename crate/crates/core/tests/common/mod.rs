#![allow(dead_code)]

use std::path::PathBuf;

use gaia::{Archive, Model, SampleBatch, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy4").join(name)
}

pub fn fixture_model() -> Model {
    Model::from_files(fixture("model.graph"), fixture("weights.gwta")).unwrap()
}

pub fn fixture_data(name: &str) -> SampleBatch {
    SampleBatch::read(fixture(name)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Two conv blocks written out with loops in f64:
/// x (1x4x4) -> conv3x3 pad1 (C1) = z1 -> relu -> conv3x3 pad1 (C2) = z2
/// -> relu = A_last -> global mean -> linear (K classes).
pub struct Toy {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub v: Vec<f64>,
    pub c: Vec<f64>,
}

pub const S: usize = 4;

impl Toy {
    pub fn random(rng: &mut impl Rng, k: usize) -> Toy {
        let (c1, c2) = (3, 2);
        Toy {
            c1,
            c2,
            k,
            w1: uniform(rng, c1 * 9, -1.0, 1.0),
            b1: uniform(rng, c1, -0.3, 0.3),
            w2: uniform(rng, c2 * c1 * 9, -0.6, 0.6),
            b2: uniform(rng, c2, -0.3, 0.3),
            v: uniform(rng, k * c2, -1.0, 1.0),
            c: uniform(rng, k, -0.2, 0.2),
        }
    }

    pub fn document(&self) -> String {
        format!(
            "input 1 {S} {S}\nclasses {k}\n\
             z1: conv2d out={c1} kernel=3 pad=1 weight=w1 bias=b1\n\
             h1: relu\n\
             z2: conv2d out={c2} kernel=3 pad=1 weight=w2 bias=b2\n\
             h2: relu\n\
             gap: global_avg_pool\n\
             fc: linear out={k} weight=v bias=c\n\
             tap a1 z1 block1\ntap a2 z2 block2\nsplit h2\n",
            c1 = self.c1,
            c2 = self.c2,
            k = self.k
        )
    }

    pub fn model(&self) -> Model {
        let graph = gaia::ModelGraph::parse(&self.document()).unwrap();
        let mut a = Archive::new();
        let t = |shape: &[usize], v: &[f64]| Tensor::<f32>::from_f64(shape, v).unwrap();
        a.insert_f32("w1", t(&[self.c1, 1, 3, 3], &self.w1));
        a.insert_f32("b1", t(&[self.c1], &self.b1));
        a.insert_f32("w2", t(&[self.c2, self.c1, 3, 3], &self.w2));
        a.insert_f32("b2", t(&[self.c2], &self.b2));
        a.insert_f32("v", t(&[self.k, self.c2], &self.v));
        a.insert_f32("c", t(&[self.k], &self.c));
        Model::new(graph, &a).unwrap()
    }

    /// Parameters as the f32 values the engine sees.
    pub fn rounded(&self) -> Toy {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        Toy {
            c1: self.c1,
            c2: self.c2,
            k: self.k,
            w1: r(&self.w1),
            b1: r(&self.b1),
            w2: r(&self.w2),
            b2: r(&self.b2),
            v: r(&self.v),
            c: r(&self.c),
        }
    }
}

fn conv(x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * S * S];
    for o in 0..cout {
        for i in 0..S {
            for j in 0..S {
                let mut acc = b[o];
                for c in 0..cin {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= S as isize || jj >= S as isize {
                                continue;
                            }
                            acc += w[((o * cin + c) * 3 + di) * 3 + dj] * x[(c * S + ii as usize) * S + jj as usize];
                        }
                    }
                }
                y[(o * S + i) * S + j] = acc;
            }
        }
    }
    y
}

fn conv_transpose(gy: &[f64], cin: usize, w: &[f64], cout: usize) -> Vec<f64> {
    let mut gx = vec![0.0; cin * S * S];
    for o in 0..cout {
        for i in 0..S {
            for j in 0..S {
                for c in 0..cin {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= S as isize || jj >= S as isize {
                                continue;
                            }
                            gx[(c * S + ii as usize) * S + jj as usize] +=
                                w[((o * cin + c) * 3 + di) * 3 + dj] * gy[(o * S + i) * S + j];
                        }
                    }
                }
            }
        }
    }
    gx
}

pub struct ToyPass {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Toy {
    pub fn forward(&self, x: &[f64]) -> ToyPass {
        let z1 = conv(x, 1, &self.w1, &self.b1, self.c1);
        let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = conv(&h1, self.c1, &self.w2, &self.b2, self.c2);
        let mut g = vec![0.0; self.c2];
        for k in 0..self.c2 {
            for i in 0..S * S {
                g[k] += z2[k * S * S + i].max(0.0);
            }
            g[k] /= (S * S) as f64;
        }
        let logits = (0..self.k)
            .map(|c| self.c[c] + (0..self.c2).map(|k| self.v[c * self.c2 + k] * g[k]).sum::<f64>())
            .collect();
        ToyPass { z1, z2, logits }
    }

    /// Gradients at (z1, z2) for a cotangent `dh2` at A_last.
    pub fn backward_from_alast(&self, p: &ToyPass, dh2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gz2: Vec<f64> = dh2.iter().zip(&p.z2).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let gh1 = conv_transpose(&gz2, self.c1, &self.w2, self.c2);
        let gz1: Vec<f64> = gh1.iter().zip(&p.z1).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        (gz1, gz2)
    }

    /// Cotangent at A_last for a cotangent `ds` on the logits.
    pub fn head_backward(&self, ds: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c2 * S * S];
        for k in 0..self.c2 {
            let gk: f64 = (0..self.k).map(|c| self.v[c * self.c2 + k] * ds[c]).sum::<f64>() / (S * S) as f64;
            out[k * S * S..(k + 1) * S * S].fill(gk);
        }
        out
    }

    pub fn gaia_z(&self, x: &[f64]) -> f64 {
        let p = self.forward(x);
        let top = (0..self.k).fold(0, |b, c| if p.logits[c] > p.logits[b] { c } else { b });
        let mut e = vec![0.0; self.k];
        e[top] = 1.0;
        let (gz1, gz2) = self.backward_from_alast(&p, &self.head_backward(&e));
        let mut sq = 0.0;
        for (g, ch) in [(&gz1, self.c1), (&gz2, self.c2)] {
            for k in 0..ch {
                let nz = (0..S * S).filter(|&i| g[k * S * S + i] != 0.0).count();
                let d = nz as f64 / (S * S) as f64;
                sq += d * d;
            }
        }
        sq.sqrt()
    }

    pub fn gaia_a(&self, x: &[f64]) -> f64 {
        let p = self.forward(x);
        let m = p.logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = p.logits.iter().map(|s| (s - m).exp()).sum();
        let seed: Vec<f64> = p.logits.iter().map(|s| 1.0 - self.k as f64 * (s - m).exp() / z).collect();
        let out = self.head_backward(&seed);
        let e_out = out.iter().map(|v| v.abs()).sum::<f64>() / out.len() as f64;
        let (gz1, gz2) = self.backward_from_alast(&p, &vec![1.0; self.c2 * S * S]);
        let mut sq = 0.0;
        for (g, ch) in [(&gz1, self.c1), (&gz2, self.c2)] {
            for k in 0..ch {
                let mean = (0..S * S).map(|i| g[k * S * S + i].abs()).sum::<f64>() / (S * S) as f64;
                let e = mean / e_out.max(1e-12).sqrt();
                sq += e * e;
            }
        }
        sq.sqrt()
    }
}
