//! The training loop: single-phase joint training plus the two-phase
//! unsupervised baselines, per-epoch loss accounting, and evaluation.

use std::io::Write;

use crate::data::{random_translate, Dataset};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::{self, STREAM_AUGMENT, STREAM_DROPOUT};
use crate::swwae::{Modality, SwwaeModel};
use crate::train::{make_batches, BatchSchedule, Sgd};
use rand_chacha::ChaCha8Rng;

/// Training protocol. `Joint` optimizes whatever modality the model is
/// set to, in one phase. The two-phase regimes first train unsupervised,
/// then attach labels: `UnsupSfx` freezes the encoder and fits only the
/// classifier head on the labeled rows; `UnsupPretr` fine-tunes the whole
/// Convnet pathway (encoder plus head) on the labeled rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Joint,
    UnsupSfx,
    UnsupPretr,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Random-translation augmentation amplitude per batch; 0 disables.
    pub augment: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: Sgd::DEFAULT_LR,
            momentum: Sgd::DEFAULT_MOMENTUM,
            seed: 0,
            augment: 0,
        }
    }
}

/// Per-epoch record: batch-size-weighted mean training losses and the
/// validation error (absent when no validation set or no head).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_nll: f64,
    pub l_l2rec: f64,
    pub l_l2m: f64,
    pub l_total: f64,
    pub val_error: Option<f64>,
}

/// Error rate of argmax-of-logits classification in eval mode; ties pick
/// the smallest class index.
pub fn evaluate(model: &mut SwwaeModel, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluate needs a labeled dataset"))?;
    if data.is_empty() {
        return Err(Error::invalid("evaluate on an empty dataset"));
    }
    let mut wrong = 0usize;
    let chunk = 64;
    let mut at = 0;
    while at < data.len() {
        let hi = (at + chunk).min(data.len());
        let indices: Vec<usize> = (at..hi).collect();
        let part = data.select(&indices)?;
        let logits = model.infer_logits(&part.images)?;
        let classes = logits.shape()[1];
        for (row, &truth) in (0..part.len()).zip(&labels[at..hi]) {
            let mut best = 0;
            for k in 1..classes {
                if logits.data()[row * classes + k] > logits.data()[row * classes + best] {
                    best = k;
                }
            }
            if best != truth {
                wrong += 1;
            }
        }
        at = hi;
    }
    Ok(wrong as f64 / data.len() as f64)
}

enum Scope {
    All,
    Head,
    Convnet,
}

struct Phase {
    modality: Option<Modality>,
    scope: Scope,
    labeled_rows_only: bool,
    freeze_encoder: bool,
}

/// Run `cfg.epochs` epochs per phase of the chosen regime, stepping SGD
/// after every batch. Returns one `EpochStats` per epoch with continuous
/// numbering across phases. Deterministic for a given seed and config.
pub fn train_run(
    model: &mut SwwaeModel,
    train: &Dataset,
    labeled: &[bool],
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    regime: Regime,
) -> Result<Vec<EpochStats>> {
    if labeled.len() != train.len() {
        return Err(Error::invalid(format!(
            "{} labeled flags for {} samples",
            labeled.len(),
            train.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let any_labeled = labeled.iter().any(|&m| m);
    if any_labeled && train.labels.is_none() {
        return Err(Error::invalid("labeled flags set but the dataset has no labels"));
    }
    let phases: Vec<Phase> = match regime {
        Regime::Joint => vec![Phase {
            modality: None,
            scope: Scope::All,
            labeled_rows_only: false,
            freeze_encoder: false,
        }],
        Regime::UnsupSfx | Regime::UnsupPretr => {
            if !any_labeled {
                return Err(Error::invalid(
                    "two-phase regimes need at least one labeled sample",
                ));
            }
            let second = match regime {
                Regime::UnsupSfx => Phase {
                    modality: Some(Modality::Supervised),
                    scope: Scope::Head,
                    labeled_rows_only: true,
                    freeze_encoder: true,
                },
                _ => Phase {
                    modality: Some(Modality::Supervised),
                    scope: Scope::Convnet,
                    labeled_rows_only: true,
                    freeze_encoder: false,
                },
            };
            vec![
                Phase {
                    modality: Some(Modality::Unsupervised),
                    scope: Scope::All,
                    labeled_rows_only: false,
                    freeze_encoder: false,
                },
                second,
            ]
        }
    };

    let mut dropout_rng = rng::stream(cfg.seed, STREAM_DROPOUT);
    let mut aug_rng = rng::stream(cfg.seed, STREAM_AUGMENT);
    let mut history = Vec::with_capacity(cfg.epochs * phases.len());
    let mut global_epoch = 0usize;

    for phase in &phases {
        if let Some(m) = phase.modality {
            model.set_modality(m);
        }
        model.freeze_encoder(phase.freeze_encoder);
        let (rows, row_mask): (Vec<usize>, Vec<bool>) = if phase.labeled_rows_only {
            // Tile the labeled subset up to the full set size so this phase
            // gets the same optimizer-step budget per epoch as the
            // unsupervised phase; otherwise a small subset would leave the
            // classifier hopelessly undertrained at equal epoch counts.
            let subset: Vec<usize> = (0..train.len()).filter(|&i| labeled[i]).collect();
            let rows: Vec<usize> = subset.iter().cycle().take(train.len()).copied().collect();
            let mask = vec![true; rows.len()];
            (rows, mask)
        } else {
            ((0..train.len()).collect(), labeled.to_vec())
        };
        let phase_mask = if matches!(phase.modality, Some(Modality::Unsupervised)) {
            vec![false; rows.len()]
        } else {
            row_mask
        };
        let schedule = BatchSchedule::new(phase_mask, cfg.batch_size, cfg.seed)?;
        let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;

        for _ in 0..cfg.epochs {
            let stats = run_epoch(
                model,
                train,
                &rows,
                &schedule,
                global_epoch,
                cfg,
                &phase.scope,
                &mut opt,
                &mut dropout_rng,
                &mut aug_rng,
            )?;
            global_epoch += 1;
            let val_error = match val {
                Some(v) if model.has_head() => Some(evaluate(model, v)?),
                _ => None,
            };
            history.push(EpochStats {
                epoch: global_epoch,
                val_error,
                ..stats
            });
        }
    }
    model.freeze_encoder(false);
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut SwwaeModel,
    train: &Dataset,
    rows: &[usize],
    schedule: &BatchSchedule,
    epoch: usize,
    cfg: &TrainConfig,
    scope: &Scope,
    opt: &mut Sgd,
    dropout_rng: &mut ChaCha8Rng,
    aug_rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut acc = EpochStats {
        epoch: 0,
        l_nll: 0.0,
        l_l2rec: 0.0,
        l_l2m: 0.0,
        l_total: 0.0,
        val_error: None,
    };
    let mut seen = 0usize;
    for batch in make_batches(schedule, epoch as u64) {
        let indices: Vec<usize> = batch.indices.iter().map(|&i| rows[i]).collect();
        let part = train.select(&indices)?;
        let mut images = part.images;
        if cfg.augment > 0 {
            images = random_translate(&images, cfg.augment, aug_rng)?;
        }
        model.zero_grads();
        let (trace, losses) = model.forward(
            &images,
            part.labels.as_deref(),
            &batch.mask,
            Mode::Train,
            dropout_rng,
        )?;
        model.backward(&trace)?;
        drop(trace);
        let mut params = match scope {
            Scope::All => model.params_mut(),
            Scope::Head => model.head_params_mut(),
            Scope::Convnet => model.convnet_params_mut(),
        };
        opt.step(&mut params)?;

        let k = indices.len() as f64;
        acc.l_nll += losses.l_nll * k;
        acc.l_l2rec += losses.l_l2rec * k;
        acc.l_l2m += losses.l_l2m * k;
        acc.l_total += losses.l_total * k;
        seen += indices.len();
    }
    let n = seen.max(1) as f64;
    acc.l_nll /= n;
    acc.l_l2rec /= n;
    acc.l_l2m /= n;
    acc.l_total /= n;
    Ok(acc)
}

/// Write history as CSV: `epoch,l_nll,l_l2rec,l_l2m,l_total,val_error`,
/// full double precision, missing validation as `NA`.
pub fn write_history_csv(history: &[EpochStats], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,l_nll,l_l2rec,l_l2m,l_total,val_error")?;
    for e in history {
        let val = match e.val_error {
            Some(v) => format!("{v}"),
            None => "NA".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.epoch, e.l_nll, e.l_l2rec, e.l_l2m, e.l_total, val
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::archdsl::parse_architecture;
    use crate::data::{synth_digits, SynthConfig};
    use crate::pooling::PoolMode;
    use crate::swwae::SwwaeConfig;

    fn small_data(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            height: 24,
            width: 24,
            ..SynthConfig::default()
        };
        synth_digits(n, seed, &cfg).unwrap()
    }

    fn build(with_decoder: bool, lrec: f64, lm: f64, seed: u64) -> SwwaeModel {
        let arch = parse_architecture("(4)3c-2p-(4)3c-2p-10fc").unwrap();
        let config = SwwaeConfig {
            lambda_l2rec: lrec,
            lambda_l2m: lm,
            pool_mode: PoolMode::Hard,
            ..SwwaeConfig::default()
        };
        SwwaeModel::new(&arch, 1, 24, 24, config, with_decoder, seed).unwrap()
    }

    #[test]
    fn zero_reconstruction_weights_match_plain_convnet_bitwise() {
        let train = small_data(40, 1);
        let val = small_data(20, 2);
        let labeled = vec![true; 40];
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = |with_decoder: bool| {
            let mut m = build(with_decoder, 0.0, 0.0, 9);
            let h = train_run(&mut m, &train, &labeled, Some(&val), &cfg, Regime::Joint).unwrap();
            let params: Vec<u64> = m
                .convnet_params_mut()
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect();
            (h, params)
        };
        let (ha, pa) = run(true);
        let (hb, pb) = run(false);
        assert_eq!(ha, hb, "histories must match bitwise");
        assert_eq!(pa, pb, "parameter trajectories must match bitwise");
    }

    #[test]
    fn repeat_run_is_bitwise_reproducible() {
        let train = small_data(30, 3);
        let labeled: Vec<bool> = (0..30).map(|i| i < 10).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            seed: 77,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = build(true, 0.5, 0.3, 13);
            let h = train_run(&mut m, &train, &labeled, None, &cfg, Regime::Joint).unwrap();
            let params: Vec<u64> = m
                .params_mut()
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect();
            (h, params)
        };
        let (ha, pa) = run();
        let (hb, pb) = run();
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn unsup_sfx_phase_two_freezes_encoder_bitwise() {
        let train = small_data(30, 4);
        let labeled: Vec<bool> = (0..30).map(|i| i < 10).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            seed: 21,
            ..TrainConfig::default()
        };
        // run A: both phases; run B: phase 1 only (joint regime in
        // unsupervised modality walks the same batches and rng draws)
        let mut a = build(true, 0.5, 0.3, 31);
        train_run(&mut a, &train, &labeled, None, &cfg, Regime::UnsupSfx).unwrap();
        let mut b = build(true, 0.5, 0.3, 31);
        b.set_modality(Modality::Unsupervised);
        train_run(&mut b, &train, &vec![false; 30], None, &cfg, Regime::Joint).unwrap();

        let state = |m: &mut SwwaeModel| {
            let mut v = Vec::new();
            m.visit_state(|t| v.push(t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
            v
        };
        let sa = state(&mut a);
        let sb = state(&mut b);
        assert_eq!(sa.len(), sb.len());
        // state order: encoder conv tensors, head fc tensors, decoder conv
        // tensors; this arch has 2 convs (2 tensors each), 1 fc (2), 2
        // decoder convs (2 each)
        assert_eq!(sa[0..4], sb[0..4], "encoder must be bitwise unchanged by phase 2");
        assert_eq!(sa[6..10], sb[6..10], "decoder untouched in phase 2");
        assert_ne!(sa[4..6], sb[4..6], "head must train in phase 2");
        assert!(!a.encoder_frozen(), "freeze released after the run");
    }

    #[test]
    fn unsup_pretr_phase_two_updates_encoder_but_not_decoder() {
        let train = small_data(30, 5);
        let labeled: Vec<bool> = (0..30).map(|i| i < 10).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            seed: 22,
            ..TrainConfig::default()
        };
        let mut a = build(true, 0.5, 0.3, 41);
        train_run(&mut a, &train, &labeled, None, &cfg, Regime::UnsupPretr).unwrap();
        let mut b = build(true, 0.5, 0.3, 41);
        b.set_modality(Modality::Unsupervised);
        train_run(&mut b, &train, &vec![false; 30], None, &cfg, Regime::Joint).unwrap();
        let state = |m: &mut SwwaeModel| {
            let mut v = Vec::new();
            m.visit_state(|t| v.push(t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
            v
        };
        let sa = state(&mut a);
        let sb = state(&mut b);
        assert_ne!(sa[0..4], sb[0..4], "encoder fine-tunes in phase 2");
        assert_eq!(sa[6..10], sb[6..10], "decoder untouched in phase 2");
    }

    #[test]
    fn two_phase_regimes_require_labels() {
        let train = small_data(20, 6);
        let mut m = build(true, 0.5, 0.0, 50);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let err = train_run(
            &mut m,
            &train,
            &vec![false; 20],
            None,
            &cfg,
            Regime::UnsupSfx,
        );
        assert!(err.is_err());
    }

    #[test]
    fn constant_predictor_scores_chance_error() {
        let val = small_data(50, 7);
        let mut m = build(false, 0.0, 0.0, 60);
        let zeros = vec![0.0; m.param_vector().len()];
        m.set_param_vector(&zeros).unwrap();
        // all-zero weights give identical logits; argmax tie -> class 0;
        // balanced labels -> exactly 0.9
        let err = evaluate(&mut m, &val).unwrap();
        assert_eq!(err, 0.9);
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        // fc-only architecture on 10-pixel one-hot images with identity
        // weights classifies perfectly
        let arch = parse_architecture("10fc").unwrap();
        let mut m =
            SwwaeModel::new(&arch, 1, 2, 5, SwwaeConfig::default(), false, 0).unwrap();
        let mut theta = vec![0.0; m.param_vector().len()];
        for i in 0..10 {
            theta[i * 10 + i] = 5.0; // weight [out=i, in=i]
        }
        m.set_param_vector(&theta).unwrap();
        let mut images = Tensor::zeros(&[10, 1, 2, 5]);
        for i in 0..10 {
            images.data_mut()[i * 10 + i] = 1.0;
        }
        let ds = Dataset::new(images, Some((0..10).collect()), "onehot").unwrap();
        assert_eq!(evaluate(&mut m, &ds).unwrap(), 0.0);
    }

    #[test]
    fn history_csv_format_and_na_sentinel() {
        let history = vec![
            EpochStats {
                epoch: 1,
                l_nll: 2.302585092994046,
                l_l2rec: 0.5,
                l_l2m: 0.25,
                l_total: 3.052585092994046,
                val_error: Some(0.875),
            },
            EpochStats {
                epoch: 2,
                l_nll: 0.0,
                l_l2rec: 0.4,
                l_l2m: 0.2,
                l_total: 0.6,
                val_error: None,
            },
        ];
        let mut buf = Vec::new();
        write_history_csv(&history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,l_nll,l_l2rec,l_l2m,l_total,val_error");
        assert_eq!(
            lines[1],
            "1,2.302585092994046,0.5,0.25,3.052585092994046,0.875"
        );
        assert_eq!(lines[2], "2,0,0.4,0.2,0.6,NA");
        // full precision: parsing back is exact
        let reparsed: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(reparsed, 2.302585092994046);
    }

    #[test]
    fn augmentation_changes_the_trajectory() {
        let train = small_data(20, 8);
        let labeled = vec![true; 20];
        let base = TrainConfig {
            epochs: 1,
            batch_size: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = |augment: usize| {
            let mut m = build(false, 0.0, 0.0, 70);
            let cfg = TrainConfig { augment, ..base };
            train_run(&mut m, &train, &labeled, None, &cfg, Regime::Joint).unwrap();
            m.param_vector()
        };
        assert_ne!(run(0), run(2));
        assert_eq!(run(2), run(2));
    }

    #[test]
    fn unlabeled_epoch_reports_zero_nll() {
        let train = small_data(20, 9);
        let mut m = build(true, 1.0, 0.0, 80);
        m.set_modality(Modality::Unsupervised);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let h = train_run(&mut m, &train, &vec![false; 20], None, &cfg, Regime::Joint).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].l_nll, 0.0);
        assert!(h[0].l_l2rec > 0.0);
        assert!(h[0].val_error.is_none());
    }
}
