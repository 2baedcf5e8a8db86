use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereosparse::conv::{self, Geometry, Gram, KernelStack};
use stereosparse::lca::{self, Competition, LcaConfig};
use stereosparse::{dict, Tensor};

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| r.random_range(-1.0f32..1.0))
}

/// First-layer geometries: (features, spatial stride).
const FIRST_LAYERS: [(usize, usize); 2] = [(16, 4), (64, 2)];

fn first_layer(features: usize, stride: usize) -> KernelStack {
    let geom = Geometry {
        features,
        extent: [3, 8, 8],
        in_channels: 6,
        stride: [1, stride, stride],
    };
    dict::init_dictionary(geom, 1).unwrap()
}

/// A padded `[1, 3, 64, 256, 6]` clip for the given stride.
fn clip(k: &KernelStack) -> Tensor {
    let s = k.stride()[1];
    let acts = [1, 1, 64 / s, 256 / s, k.features()];
    random(&conv::input_dims(&acts, k).unwrap(), 2)
}

fn bench_correlate(c: &mut Criterion) {
    let mut g = c.benchmark_group("correlate");
    g.sample_size(10);
    for (f, s) in FIRST_LAYERS {
        let k = first_layer(f, s);
        let x = clip(&k);
        g.bench_with_input(BenchmarkId::new("clip", format!("{f}f_s{s}")), &x, |b, x| {
            b.iter(|| conv::correlate(black_box(x), &k).unwrap())
        });
    }
    g.finish();
}

fn bench_reconstruct(c: &mut Criterion) {
    let mut g = c.benchmark_group("reconstruct");
    g.sample_size(10);
    for (f, s) in FIRST_LAYERS {
        let k = first_layer(f, s);
        let a = conv::correlate(&clip(&k), &k).unwrap();
        g.bench_with_input(BenchmarkId::new("clip", format!("{f}f_s{s}")), &a, |b, a| {
            b.iter(|| conv::reconstruct(black_box(a), &k).unwrap())
        });
    }
    g.finish();
}

fn bench_lca(c: &mut Criterion) {
    let mut g = c.benchmark_group("lca_encode");
    g.sample_size(10);
    let k = first_layer(16, 4);
    let x = clip(&k);
    let gram = Gram::new(&k);
    for competition in [Competition::Residual, Competition::Gram] {
        let cfg = LcaConfig {
            lambda: 2.0,
            max_iters: 50,
            stop_tol: 0.0,
            competition,
            ..LcaConfig::default()
        };
        g.bench_function(format!("{competition:?}_50_iters").to_lowercase(), |b| {
            b.iter(|| match competition {
                Competition::Gram => lca::lca_encode_with_gram(black_box(&x), &k, &gram, &cfg).unwrap(),
                Competition::Residual => lca::lca_encode(black_box(&x), &k, &cfg).unwrap(),
            })
        });
    }
    g.bench_function("gram_table", |b| b.iter(|| Gram::new(black_box(&k))));
    g.finish();
}

criterion_group!(benches, bench_correlate, bench_reconstruct, bench_lca);
criterion_main!(benches);
