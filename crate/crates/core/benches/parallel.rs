use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfc::eval::natural_embeddings;
use voxfc::speaker::{VerifierArch, VerifierModel};
use voxfc::synth::{SynthArch, SynthesizerModel};
use voxfc::training::{compute_gradients, TrainConfig, TrainExample};
use voxfc::{Exec, Tensor};

fn mel(rng: &mut ChaCha8Rng, frames: usize) -> Tensor {
    Tensor::new(
        vec![frames, 80],
        (0..frames * 80).map(|_| rng.random_range(-12.0..0.0)).collect(),
    )
}

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let verifier = VerifierModel::new(VerifierArch::toy(), 1).unwrap();
    let synth = SynthesizerModel::new(SynthArch::toy(), 2).unwrap();
    let mels: Vec<(String, Tensor)> = (0..16).map(|i| (format!("u{i}"), mel(&mut rng, 32))).collect();
    let examples: Vec<TrainExample> = mels
        .iter()
        .map(|(id, m)| TrainExample {
            utt_id: id.clone(),
            ids: (0..6).map(|_| rng.random_range(2..10)).chain([1]).collect(),
            target: m.clone(),
            ref_emb: verifier.embed_frames(m).unwrap(),
        })
        .collect();
    let batch: Vec<&TrainExample> = examples.iter().take(8).collect();
    let cfg = TrainConfig::fc();

    let mut group = c.benchmark_group("exec");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("fc_batch_gradients", &name), &exec, |b, &exec| {
            b.iter(|| compute_gradients(&batch, &synth, Some(&verifier), &cfg, 0, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("embeddings", &name), &exec, |b, &exec| {
            b.iter(|| natural_embeddings(&verifier, &mels, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
