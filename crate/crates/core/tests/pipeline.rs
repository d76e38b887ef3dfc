//! Library-level runs over the toy corpus and random miniature models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfc::audio::MelConfig;
use voxfc::data::{eval_items, labelled_mels, load_mels, make_toy_dataset, speaker_index, train_examples, Split, ToyDatasetSpec};
use voxfc::eval::{evaluate, natural_eer, natural_embeddings, synthesize_eval_set, Protocol};
use voxfc::speaker::{train_verifier, VerifierArch, VerifierModel, VerifierTrainConfig};
use voxfc::synth::{SynthArch, SynthesizerModel};
use voxfc::training::{fit_mel_stats, run_training, Phase, RunOutputs, TrainConfig, TrainExample};
use voxfc::{Exec, Tensor};

fn small_toy() -> ToyDatasetSpec {
    ToyDatasetSpec {
        n_speakers: 3,
        utterances_per_speaker: 6,
        val_per_speaker: 2,
        ..ToyDatasetSpec::default()
    }
}

#[test]
fn toy_corpus_through_both_phases_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(&small_toy(), dir.path().join("toy")).unwrap();
    let mel = MelConfig::default();
    let exec = Exec::default();

    let train = manifest.split(Split::Train);
    let mels = load_mels(&manifest, &train, &mel, exec).unwrap();
    let index = speaker_index(&train);
    let data = labelled_mels(&train, &mels, &index).unwrap();
    let arch = VerifierArch {
        n_speakers: index.len(),
        ..VerifierArch::toy()
    };
    let mut verifier = VerifierModel::new(arch, 1).unwrap();
    let vcfg = VerifierTrainConfig {
        steps: 20,
        ..VerifierTrainConfig::default()
    };
    let report = train_verifier(&mut verifier, &data, &vcfg, exec, |_, _| {}).unwrap();
    assert_eq!(report.losses.len(), 20);
    assert!(report.losses.iter().all(|l| l.is_finite()));

    let examples = train_examples(&train, &mels, &verifier, exec).unwrap();
    let mut synth = SynthesizerModel::new(SynthArch::toy(), 2).unwrap();
    let (mean, std) = fit_mel_stats(&examples).unwrap();
    synth.set_mel_stats(mean, std).unwrap();

    for (phase, cfg) in [(Phase::Baseline, TrainConfig::baseline()), (Phase::Fc, TrainConfig::fc())] {
        let cfg = TrainConfig {
            total_steps: 4,
            checkpoint_every: 2,
            batch_size: 4,
            ..cfg
        };
        let outputs = RunOutputs {
            checkpoint: dir.path().join(format!("{}.ckpt", phase.name())),
            metrics: dir.path().join(format!("{}.tsv", phase.name())),
        };
        let history = run_training(&mut synth, &verifier, &examples, &cfg, &outputs, exec, |_, _| {}).unwrap();
        assert_eq!(history.len(), 4);
        assert!(outputs.checkpoint.is_file());
        assert!(outputs.intermediate(2).is_file());
        let log = std::fs::read_to_string(&outputs.metrics).unwrap();
        assert_eq!(log.lines().count(), 5);
        let spk = history.iter().map(|b| b.speaker_loss).sum::<f64>();
        match phase {
            Phase::Baseline => assert_eq!(spk, 0.0),
            Phase::Fc => assert!(spk > 0.0),
        }
    }
    let reloaded = SynthesizerModel::load(dir.path().join("fc.ckpt")).unwrap();
    assert_eq!(reloaded.params().digest(), {
        // checkpoints hold f32, so compare against a round-tripped copy
        let p = dir.path().join("again.ckpt");
        synth.save(&p).unwrap();
        SynthesizerModel::load(&p).unwrap().params().digest()
    });

    let val = manifest.split(Split::Val);
    let val_mels = load_mels(&manifest, &val, &mel, exec).unwrap();
    let natural = natural_embeddings(&verifier, &val_mels, exec).unwrap();
    let utts: Vec<(String, String)> = val.iter().map(|e| (e.utt_id.clone(), e.speaker_id.clone())).collect();
    let nat = natural_eer(&natural, &utts, 20, 3).unwrap();
    assert!((0.0..=100.0).contains(&nat.eer_percent));

    for protocol in [Protocol::Dep, Protocol::Indep] {
        let set = synthesize_eval_set(&eval_items(&val), &natural, &reloaded, &verifier, protocol, 5, exec).unwrap();
        assert_eq!(set.records.len(), val.len());
        if protocol == Protocol::Dep {
            assert!(set.records.iter().all(|r| r.ref_utt_id == r.utt_id));
        } else {
            assert!(set.records.iter().all(|r| r.ref_utt_id != r.utt_id));
        }
        let report = evaluate(&set, &natural, 20, 3).unwrap();
        assert_eq!(report.trial_count, 20);
        assert!((0.0..=100.0).contains(&report.eer_percent));
        assert!((-1.0..=1.0).contains(&report.avg_cosine));
        assert_eq!(report.natural_eer_percent, nat.eer_percent);
    }
}

fn random_examples(verifier: &VerifierModel, n: usize) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|i| {
            let frames = rng.random_range(3..9);
            let target = Tensor::new(
                vec![frames, 6],
                (0..frames * 6).map(|_| rng.random_range(-5.0..0.0)).collect(),
            );
            TrainExample {
                utt_id: format!("u{i}"),
                ids: (0..rng.random_range(1..5)).map(|_| rng.random_range(2..5)).chain([1]).collect(),
                ref_emb: verifier.embed_frames(&target).unwrap(),
                target,
            }
        })
        .collect()
}

#[test]
fn sequential_and_parallel_runs_are_bit_identical() {
    let verifier = VerifierModel::new(VerifierArch::mini(), 5).unwrap();
    let examples = random_examples(&verifier, 12);
    let arch = SynthArch {
        speaker_dim: verifier.embedding_dim(),
        ..SynthArch::mini()
    };
    let cfg = TrainConfig {
        total_steps: 6,
        batch_size: 5,
        checkpoint_every: 0,
        ..TrainConfig::fc()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut digests = BTreeMap::new();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut synth = SynthesizerModel::new(arch.clone(), 8).unwrap();
        let outputs = RunOutputs {
            checkpoint: dir.path().join(format!("{exec:?}.ckpt")),
            metrics: dir.path().join(format!("{exec:?}.tsv")),
        };
        let history = run_training(&mut synth, &verifier, &examples, &cfg, &outputs, exec, |_, _| {}).unwrap();
        let totals: Vec<u64> = history.iter().map(|b| b.total.to_bits()).collect();
        let log = std::fs::read_to_string(&outputs.metrics).unwrap();
        digests.insert(format!("{exec:?}"), (synth.params().digest(), totals, log));
    }
    let mut runs = digests.values();
    assert_eq!(runs.next(), runs.next());
}

#[test]
fn missing_prerequisites_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("nope.ckpt");
    let err = voxfc::training::load_prerequisites(Phase::Fc, Some(&absent), None).unwrap_err();
    assert_eq!(err.kind(), "config");
    let err = voxfc::training::load_prerequisites(Phase::Baseline, None, None).unwrap_err();
    assert_eq!(err.kind(), "config");
}
