use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use flocora::data::{synthetic_split, SyntheticConfig};
use flocora::federation::{Federation, FederationConfig, Method};
use flocora::nn::tiny_spec;

fn desk_round(c: &mut Criterion) {
    let (train, test) = synthetic_split(&SyntheticConfig { train_per_class: 200, test_per_class: 100, ..Default::default() })
        .unwrap();
    let (train, test) = (Arc::new(train), Arc::new(test));
    let spec = tiny_spec(3, [3, 8, 8], 16).unwrap();
    let mut group = c.benchmark_group("desk_round");
    group.sample_size(10);
    for (name, method) in [("fedavg", Method::Fedavg), ("flocora_r16", Method::Flocora)] {
        let cfg = FederationConfig {
            num_clients: 8,
            sample_fraction: 1.0,
            rounds: 1,
            local_epochs: 1,
            batch_size: 16,
            lr: 0.05,
            method,
            rank: 16,
            alpha: 32.0,
            ..Default::default()
        };
        let mut fed = Federation::new(cfg, spec.clone(), train.clone(), test.clone()).unwrap();
        let mut round = 0;
        group.bench_function(name, |b| {
            b.iter(|| {
                fed.run_round(round).unwrap();
                round += 1;
            })
        });
    }
    group.finish();
}

criterion_group!(benches, desk_round);
criterion_main!(benches);
