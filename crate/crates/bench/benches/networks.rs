use criterion::{criterion_group, criterion_main, Criterion};
use kpred_bench::table;
use kpred_core::autodiff::Graph;
use kpred_core::deform::{deform_forward, deform_graph, loss_def_graph};
use kpred_core::retrieval::{query_tokens, shape_descriptor};
use kpred_core::{ArchConfig, NetBundle, SourceGeometry, TargetShape, TrainConfig};

const N_POINTS: usize = 512;

fn setup() -> (NetBundle, SourceGeometry, TargetShape) {
    let bundle = NetBundle::new(ArchConfig {
        n_points: N_POINTS,
        ..ArchConfig::default()
    })
    .unwrap();
    let (mesh, pc) = table(N_POINTS, 1).unwrap();
    let src = SourceGeometry::new(pc, Some(mesh), &bundle).unwrap();
    let (_, tgt) = table(N_POINTS, 2).unwrap();
    let tgt = TargetShape::new("t", tgt, bundle.arch.n_keypoints).unwrap();
    (bundle, src, tgt)
}

fn forward(c: &mut Criterion) {
    let (bundle, src, tgt) = setup();
    let mut group = c.benchmark_group("forward");
    group.sample_size(20);
    group.bench_function("deform", |b| b.iter(|| deform_forward(&bundle, &src, &tgt.points, false).unwrap()));
    group.bench_function("descriptor", |b| b.iter(|| shape_descriptor(&bundle, &src.points).unwrap()));
    group.bench_function("query-partial", |b| b.iter(|| query_tokens(&bundle, &tgt.points, true).unwrap()));
    group.finish();
}

fn backward(c: &mut Criterion) {
    let (bundle, src, tgt) = setup();
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("backward");
    group.sample_size(10);
    group.bench_function("L_def", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let nodes = deform_graph(&mut g, &bundle, &src, &tgt.points, false).unwrap();
            let (loss, _) = loss_def_graph(&mut g, &nodes, &src, &tgt, &cfg).unwrap();
            g.backward(loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
