// Scratch harness for tuning toy-scale training; not part of the test suite.

use std::time::Instant;

use expansion_core::data::{build_vocab, generate_dataset, DataSpec};
use expansion_core::model::{Model, ModelConfig};
use expansion_core::training::{
    prepare_samples, split_stats, train_scst, train_xe, validate_xe, Adam, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let xe_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let scst_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let peak_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let mut spec = DataSpec::default();
    if let Some(objs) = args.get(5) {
        let (lo, hi) = objs.split_once("..").unwrap();
        spec.objects_min = lo.parse().unwrap();
        spec.objects_max = hi.parse().unwrap();
    }
    if let Some(noise) = args.get(6).and_then(|s| s.parse().ok()) {
        spec.noise_std = noise;
    }
    let t0 = Instant::now();
    let splits = generate_dataset(2500, seed, &spec).unwrap();
    let vocab = build_vocab(
        &splits.train.iter().flat_map(|s| s.refs.clone()).collect::<Vec<_>>(),
        1,
    )
    .unwrap();
    println!(
        "dataset: {} train / {} val, vocab {} ({:.1}s)",
        splits.train.len(),
        splits.val.len(),
        vocab.size(),
        t0.elapsed().as_secs_f64()
    );

    let mut mc = ModelConfig::toy();
    mc.vocab_size = vocab.size();
    mc.d_feature = spec.d_feature();
    mc.max_seq_len = 40;
    let model = Model::init(&mc, seed).unwrap();
    println!("model params: {}", model.param_count());

    let train = prepare_samples(&splits.train, &vocab, &mc).unwrap();
    let val = prepare_samples(&splits.val, &vocab, &mc).unwrap();
    let val_stats = split_stats(&val).unwrap();
    let train_stats = split_stats(&train).unwrap();

    // Ceiling estimate: score each sample's canonical reference as if decoded.
    let canon: Vec<_> = val.iter().map(|s| expansion_core::data::TokenSequence::new(s.target.clone())).collect();
    let refs: Vec<_> = val.iter().map(|s| s.refs.clone()).collect();
    let ceiling = expansion_core::metrics::corpus_cider_d(&canon, &refs, &val_stats);
    println!("val canonical-caption ceiling: cider {ceiling:.3}");

    let cfg = TrainConfig {
        epochs: xe_epochs,
        seed,
        peak_lr,
        target_val_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let mut opt = Adam::for_params(&model.named_params(), &cfg);
    let t1 = Instant::now();
    let report = train_xe(&model, &train, &val, &val_stats, &cfg, &mut opt, 0, |r| {
        println!(
            "xe epoch {}: val loss {:.4} cider {:.3} bleu4 {:.3} lr {:.2e} ({:.1}s)",
            r.epoch, r.loss, r.cider_d, r.bleu1, r.lr, r.wall_seconds
        );
    })
    .unwrap();
    for (i, acc) in report.val_accuracy.iter().enumerate() {
        println!("  epoch {i} val acc {acc:.4}");
    }
    let (_, final_acc) = validate_xe(&model, &val).unwrap();
    println!(
        "XE done in {:.1}s, best epoch {} best acc {:.4} (restored acc {:.4})",
        t1.elapsed().as_secs_f64(),
        report.best_epoch,
        report.best_val_metric,
        final_acc
    );

    let (xe_cider, b1, b4) =
        expansion_core::training::score_split(&model, &val, &val_stats, 1).unwrap();
    println!("XE checkpoint val greedy: cider {xe_cider:.3} bleu1 {b1:.3} bleu4 {b4:.3}");

    if scst_epochs == 0 {
        return;
    }
    let scst_lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(peak_lr / 10.0);
    let temp: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let scfg = TrainConfig {
        epochs: scst_epochs,
        seed,
        peak_lr: scst_lr,
        sample_temperature: temp,
        target_val_cider: Some(xe_cider + 2.1),
        ..TrainConfig::default()
    };
    let mut sopt = Adam::for_params(&model.named_params(), &scfg);
    let t2 = Instant::now();
    let sreport = train_scst(
        &model,
        &train,
        &val,
        &train_stats,
        &val_stats,
        &scfg,
        &mut sopt,
        0,
        |r| {
            println!(
                "scst epoch {}: loss {:.4} val cider {:.3} bleu4 {:.3} ({:.1}s)",
                r.epoch, r.loss, r.cider_d, r.bleu4, r.wall_seconds
            );
        },
    )
    .unwrap();
    println!(
        "SCST done in {:.1}s, best cider {:.3} (delta {:+.3})",
        t2.elapsed().as_secs_f64(),
        sreport.best_val_metric,
        sreport.best_val_metric - xe_cider
    );
}
