use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flocora::autograd::Tape;
use flocora::lora::{AdaptedModel, FreezePolicy};
use flocora::nn::{resnet8_spec, CIFAR_INPUT};
use flocora::quant::{dequantize, quantize_tensor};
use flocora::wire::{self, Encoding};
use flocora::BitWidth;
use flocora_bench::random_tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (name, x_shape, k_shape) in [
        ("64x16x16_3x3", [8, 64, 16, 16], [64, 64, 3, 3]),
        ("16x8x8_3x3", [16, 16, 8, 8], [32, 16, 3, 3]),
    ] {
        let x = random_tensor(&x_shape, 1);
        let k = random_tensor(&k_shape, 2);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
                black_box(tape.conv2d(xv, kv, 1, 1).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.param(x.clone()), tape.param(k.clone()));
                let y = tape.conv2d(xv, kv, 1, 1).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap();
                black_box(tape.grad(kv).unwrap()[0]);
            })
        });
    }
    group.finish();
}

fn quant(c: &mut Criterion) {
    let x = random_tensor(&[256, 256, 3, 3], 3);
    let mut group = c.benchmark_group("quantize_256x256x3x3");
    for bits in [BitWidth::B2, BitWidth::B4, BitWidth::B8] {
        group.bench_function(BenchmarkId::new("round_trip", bits.bits()), |b| {
            b.iter(|| black_box(dequantize(&quantize_tensor(&x, bits).unwrap()).unwrap()))
        });
    }
    group.finish();
}

fn serialize(c: &mut Criterion) {
    let spec = Arc::new(resnet8_spec(10, CIFAR_INPUT).unwrap());
    let base = Arc::new(spec.init_params(0));
    let policy = FreezePolicy::flocora(&spec);
    let model = AdaptedModel::attach(spec, base, 32, 512.0, policy, 0).unwrap();
    let params = model.trainable_tensors();
    let mut group = c.benchmark_group("resnet8_r32_message");
    for (name, encoding) in [("fp32", Encoding::Fp32), ("int8", Encoding::Quantized(BitWidth::B8))] {
        let bytes = wire::serialize(0, 0, params, encoding).unwrap();
        group.bench_function(BenchmarkId::new("serialize", name), |b| {
            b.iter(|| black_box(wire::serialize(0, 0, params, encoding).unwrap()))
        });
        group.bench_function(BenchmarkId::new("deserialize_decode", name), |b| {
            b.iter(|| black_box(wire::deserialize(&bytes).unwrap().decode().unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, quant, serialize);
criterion_main!(benches);
