use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use reactdiff::diffusion::{Diffusion, DiffusionArch};
use reactdiff::features::{synth_dataset, FeatureConfig, Split};
use reactdiff::metrics::{dtw, fid, GaussianStats};
use reactdiff::mmt::{Mmt, MmtArch};
use reactdiff::numerics::Rng;
use reactdiff::Tensor;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product())).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random(&mut rng, &[n, n]), random(&mut rng, &[n, n]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| black_box(&a).matmul(&b).unwrap()));
    }
    g.finish();
}

fn dtw_bench(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let mut g = c.benchmark_group("dtw");
    for n in [100, 750] {
        let (x, y) = (random(&mut rng, &[n, 25]), random(&mut rng, &[n, 25]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| dtw(black_box(&x), &y).unwrap()));
    }
    g.finish();
}

fn fid_bench(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let rows: Vec<Vec<f64>> = (0..500).map(|_| rng.normal_vec(25)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let a = GaussianStats::fit(&refs[..250]).unwrap();
    let b = GaussianStats::fit(&refs[250..]).unwrap();
    c.bench_function("fid_25d", |bench| bench.iter(|| fid(black_box(&a), &b).unwrap()));
}

fn model_benches(c: &mut Criterion) {
    let features = FeatureConfig::desk(100);
    let clip = synth_dataset(&features, 1, 4, Split::Test).unwrap().clips.remove(0);
    let mmt = Mmt::init(features, MmtArch::default(), 5).unwrap();
    let diff = Diffusion::init(features, DiffusionArch::default(), 6).unwrap();
    c.bench_function("mmt_encode_desk", |bench| bench.iter(|| mmt.encode(black_box(&clip.speaker), &clip.id).unwrap()));
    let x0 = mmt.encode(&clip.speaker, &clip.id).unwrap();
    let z = diff.behaviour_constraint(&x0).unwrap();
    let mut rng = Rng::new(7);
    let x_t = random(&mut rng, x0.x0.shape());
    c.bench_function("ddim_reverse_desk", |bench| bench.iter(|| diff.ddim_reverse(black_box(&x_t), &z).unwrap()));
}

criterion_group!(benches, matmul, dtw_bench, fid_bench, model_benches);
criterion_main!(benches);
