use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use cmc_core::consensus::pfm_fuse_batch;
use cmc_core::diffcore::{DropoutKey, Mode, Tape, Tensor};
use cmc_core::encoders::{encode_modality, EncoderParams, ModalityConfig};
use cmc_core::plgm::refine_label;
use cmc_core::rng::{seeded, uniform_tensor};
use cmc_core::Modality;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = seeded(1);
    let a = uniform_tensor::<f32>(&mut rng, vec![128, 64], -1.0, 1.0);
    let b = uniform_tensor::<f32>(&mut rng, vec![64, 128], -1.0, 1.0);
    c.bench_function("matmul_128x64x128_f32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ia = tape.input(a.clone());
            let ib = tape.input(b.clone());
            let out = tape.matmul(ia, ib).unwrap();
            black_box(tape.value(out).data()[0])
        })
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let cfg = ModalityConfig {
        name: Modality::Audio,
        seq_len: 20,
        input_dim: 16,
        use_batchnorm: true,
        transformer_layers: 2,
        attention_heads: 4,
        conv_kernel: 1,
        positional_encoding: false,
        causal_mask: false,
    };
    let d = 32;
    let mut rng = seeded(2);
    let params = EncoderParams::<f32>::init(&cfg, d, &mut rng).unwrap();
    let x = uniform_tensor::<f32>(&mut rng, vec![20, 64, 16], -1.0, 1.0);
    c.bench_function("encoder_forward_b64_l20_d32", |bench| {
        bench.iter(|| {
            let h =
                encode_modality(&x, &params, &cfg, d, Mode::Eval, DropoutKey::default()).unwrap();
            black_box(h.data()[0])
        })
    });
}

fn bench_pfm(c: &mut Criterion) {
    let mut rng = seeded(3);
    let raw = uniform_tensor::<f32>(&mut rng, vec![64, 3, 32], -1.0, 1.0);
    // normalize rows so the fusion sees unit vectors
    let mut data = raw.data().to_vec();
    for row in data.chunks_mut(32) {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let stack = Tensor::new(vec![64, 3, 32], data).unwrap();
    c.bench_function("pfm_fuse_b64_d32", |bench| {
        bench.iter(|| black_box(pfm_fuse_batch(&stack, 0.07).unwrap().data()[0]))
    });
}

fn bench_refine(c: &mut Criterion) {
    let mut rng = seeded(4);
    let logits: Vec<[f64; 3]> = (0..1000)
        .map(|_| {
            let t = uniform_tensor::<f64>(&mut rng, vec![3], -3.0, 3.0);
            [t.data()[0], t.data()[1], t.data()[2]]
        })
        .collect();
    c.bench_function("refine_label_1000", |bench| {
        bench.iter_batched(
            || logits.clone(),
            |cases| {
                for case in cases {
                    black_box(refine_label(&case, 1).unwrap().alpha);
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_matmul, bench_encoder_forward, bench_pfm, bench_refine);
criterion_main!(benches);
