use memloc_core::checkpoint::CheckpointStore;
use memloc_core::data::{synth_clusters, ProbeDataset, Subset};
use memloc_core::localization::{flatten_target, subset_gradient, targets};
use memloc_core::model::{Dropout, ExampleTiedDropout, ForwardOptions, Model, ModelSpec};
use memloc_core::neuron_search::{mislabel_auc, threshold_sweep};
use memloc_core::trainer::EvalOptions;
use memloc_core::{OneCycleSchedule, Tensor};
use proptest::prelude::*;

/// Mann-Whitney statistic by counting every positive/negative pair.
fn pair_auc(scores: &[f64], flags: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &fi) in flags.iter().enumerate() {
        if !fi {
            continue;
        }
        for (j, &fj) in flags.iter().enumerate() {
            if fj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn dataset(n_per: usize, seed: u64) -> ProbeDataset<f64> {
    synth_clusters::<f64>(3, n_per, 5, 2.0, seed).unwrap().inject_label_noise(0.2, seed + 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_equals_pair_counting(
        raw in prop::collection::vec((0u8..12, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 * 0.5).collect();
        let flags: Vec<bool> = raw.iter().map(|(_, f)| *f).collect();
        let pos = flags.iter().filter(|&&f| f).count();
        prop_assume!(pos > 0 && pos < flags.len());
        prop_assert_eq!(mislabel_auc(&scores, &flags).unwrap(), pair_auc(&scores, &flags));
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(
        raw in prop::collection::vec((-50i32..50, any::<bool>()), 2..40)
    ) {
        let flags: Vec<bool> = raw.iter().map(|(_, f)| *f).collect();
        let pos = flags.iter().filter(|&&f| f).count();
        prop_assume!(pos > 0 && pos < flags.len());
        let a: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
        let b: Vec<f64> = a.iter().map(|s| (s / 10.0).exp() * 3.0 - 1.0).collect();
        let flipped: Vec<f64> = a.iter().map(|s| -s).collect();
        let x = mislabel_auc(&a, &flags).unwrap();
        prop_assert_eq!(x, mislabel_auc(&b, &flags).unwrap());
        prop_assert!((x + mislabel_auc(&flipped, &flags).unwrap() - 1.0).abs() < 1e-12);
        let sweep = threshold_sweep(&a, &flags);
        prop_assert!(sweep.windows(2).all(|w| w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr));
        prop_assert_eq!((sweep.last().unwrap().tpr, sweep.last().unwrap().fpr), (1.0, 1.0));
    }

    #[test]
    fn schedule_peaks_exactly_and_stays_positive(peak in 0.001f64..1.0, pe in 1usize..20, extra in 1usize..40) {
        let s = OneCycleSchedule { peak_lr: peak, peak_epoch: pe, total_epochs: pe + extra, ..OneCycleSchedule::default() };
        prop_assert_eq!(s.lr(pe).unwrap(), peak);
        for e in 0..s.total_epochs {
            let lr = s.lr(e).unwrap();
            prop_assert!(lr > 0.0 && lr <= peak);
        }
    }

    #[test]
    fn subset_gradients_are_linear(seed in 0u64..1000) {
        let data = dataset(8, seed);
        let model = Model::<f64>::build(&ModelSpec::mlp(5, &[7, 6], 3), seed).unwrap();
        let eval = EvalOptions { batch_size: 5, ..EvalOptions::default() };
        let c = subset_gradient(&model, &data, &data.ids(Subset::Clean), &eval).unwrap();
        let p = subset_gradient(&model, &data, &data.ids(Subset::Probe), &eval).unwrap();
        let all = subset_gradient(&model, &data, &data.ids(Subset::All), &eval).unwrap();
        for t in targets(&model, false) {
            let (gc, gp, ga) = (flatten_target(&model, &c, &t), flatten_target(&model, &p, &t), flatten_target(&model, &all, &t));
            for ((a, b), s) in gc.iter().zip(&gp).zip(&ga) {
                prop_assert!((a + b - s).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zeroing_gates_is_idempotent_and_order_free(seed in 0u64..500, picks in prop::collection::vec((0usize..3, 0usize..8), 1..6)) {
        let model = Model::<f64>::build(&ModelSpec::mlp(4, &[8, 8], 3), seed).unwrap();
        let units: Vec<_> = picks.iter().map(|&(l, u)| memloc_core::model::UnitId { layer: l, unit: u.min(model.units_per_layer()[l] - 1) }).collect();
        let mut fwd = model.ones_gates();
        for &u in &units { fwd.zero_in_place(u).unwrap(); }
        let mut rev = model.ones_gates();
        for &u in units.iter().rev() { rev.zero_in_place(u).unwrap(); rev.zero_in_place(u).unwrap(); }
        prop_assert_eq!(&fwd, &rev);
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let a = model.forward(&x, &ForwardOptions::eval().with_gates(&fwd)).unwrap();
        let b = model.forward(&x, &ForwardOptions::eval().with_gates(&rev)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tied_masks_are_pure_and_sized(seed in 0u64..1000, id in 0usize..500, units in 5usize..80) {
        let tied = ExampleTiedDropout::new(&[Some(units), None], 0.4, 0.1, seed, 500).unwrap();
        let a = tied.tied_mask(0, id).unwrap();
        prop_assert_eq!(&a, &tied.tied_mask(0, id).unwrap());
        let gen = (0.4 * units as f64).floor() as usize;
        let mem = (0.1 * units as f64).floor() as usize;
        prop_assert_eq!(a.iter().filter(|&&b| b).count(), gen + mem);
        let drop = tied.drop_mem_mask(0).unwrap();
        prop_assert_eq!(drop.iter().filter(|&&b| b).count(), gen);
        prop_assert!(drop.iter().zip(&a).all(|(d, t)| !d || *t));
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000) {
        let spec = ModelSpec::mlp(3, &[4], 2);
        let m = Model::<f32>::build(&spec, seed).unwrap();
        let mut store = CheckpointStore::in_memory();
        store.save(&m, 0).unwrap();
        prop_assert_eq!(store.load::<f32>(0, &spec).unwrap(), m);
    }

    #[test]
    fn label_noise_changes_exactly_the_flagged_labels(rate in 0.0f64..0.6, seed in 0u64..1000) {
        let clean = synth_clusters::<f32>(4, 10, 3, 1.0, 1).unwrap();
        let noisy = clean.inject_label_noise(rate, seed).unwrap();
        let flagged = noisy.probe_flags().iter().filter(|&&f| f).count();
        prop_assert_eq!(flagged, (rate * 40.0).round() as usize);
        for i in 0..40 {
            prop_assert_eq!(noisy.probe_flags()[i], noisy.training_labels()[i] != noisy.original_labels()[i]);
        }
    }
}

#[test]
fn tied_dropout_without_ids_is_rejected_in_training() {
    let model = Model::<f64>::build(&ModelSpec::mlp(4, &[10], 3), 0).unwrap();
    let tied = ExampleTiedDropout::new(&[Some(10), None], 0.5, 0.2, 0, 4).unwrap();
    let x = Tensor::zeros(&[2, 4]);
    let fo = ForwardOptions { dropout: Dropout::ExampleTied { spec: &tied, ids: None, drop_mem: false }, ..ForwardOptions::train() };
    assert!(model.forward(&x, &fo).is_err());
}
