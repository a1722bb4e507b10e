//! Cross-module training-pipeline properties that need real (if short)
//! training runs.

use transhash::data::{generate_synthetic, split_protocol, Split};
use transhash::retrieval::{mean_ap, CodeIndex};
use transhash::train::{encode_split, train, TrainConfig, TrainOutput};

fn toy_run(lambda: f64, steps: u64) -> (TrainOutput, f64) {
    let ds = generate_synthetic(2, 100, 16, 16, 7).unwrap();
    let ds = split_protocol(ds, 10, 40, 5).unwrap();
    let mut cfg = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    cfg.loss.lambda = lambda;
    cfg.sgd.total_steps = steps;
    cfg.sgd.warmup_steps = steps / 4;
    let out = train(&ds, &cfg).unwrap();

    let model = out.checkpoint.to_model().unwrap();
    let build = |indices: &[usize]| {
        let encoded = encode_split(&model, &ds, indices).unwrap();
        CodeIndex::build(
            cfg.dual_stream.hash_bits,
            encoded.iter().map(|(id, _, _)| *id).collect(),
            encoded.iter().map(|(_, l, _)| l.clone()).collect(),
            encoded.iter().map(|(_, _, e)| e.code.clone()).collect(),
        )
        .unwrap()
    };
    let queries = build(&ds.select(Split::Query));
    let gallery = build(&ds.select(Split::Database));
    let map = mean_ap(&queries, &gallery, gallery.len()).unwrap();
    (out, map)
}

#[test]
fn quantization_term_tightens_magnitudes() {
    let (with_quant, map_a) = toy_run(0.1, 500);
    let (without, map_b) = toy_run(0.0, 500);

    let gap = |out: &TrainOutput| {
        (
            out.metrics.first().unwrap().quant_gap,
            out.metrics.last().unwrap().quant_gap,
        )
    };
    let (first_on, last_on) = gap(&with_quant);
    let (_, last_off) = gap(&without);

    // the quantization term reduces the gap over training
    assert!(
        last_on < first_on,
        "gap did not shrink: {first_on} -> {last_on}"
    );
    // and beats the lambda = 0 run on the identical seed
    assert!(
        last_on < last_off,
        "lambda 0.1 gap {last_on} not below lambda 0 gap {last_off}"
    );
    // both runs should still retrieve on the toy set
    assert!(map_a > 0.9 && map_b > 0.9, "mAPs {map_a} / {map_b}");
}
