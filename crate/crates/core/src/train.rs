//! Dual-regression training: the closed-loop objective over all output
//! scales, the paired training loop, and the two-phase adaptation loop that
//! learns from LR-only data through the dual reconstruction term.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{bicubic_resize, ImagePair, PairedDataset, UnpairedDataset};
use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::eval::{psnr, EvalProtocol};
use crate::model::{named_rng, DrnModel, ForwardPass, TrackMode};
use crate::optim::{AdamState, CosineSchedule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which primal outputs feed a dual reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualScales {
    /// Every scale transition gets a dual term (the closed-loop reading).
    All,
    /// Only the dual attached to the final output.
    Final,
}

impl std::str::FromStr for DualScales {
    type Err = DrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(DualScales::All),
            "final" => Ok(DualScales::Final),
            other => Err(DrnError::InvalidArgument(format!(
                "unknown dual_scales {other:?} (expected all or final)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the dual regression term.
    pub lambda: f64,
    pub dual_scales: DualScales,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            dual_scales: DualScales::All,
        }
    }
}

/// Paired-training settings. Desk-scale defaults; the full-scale settings
/// (batch 32, patch 48, 1e6 iterations) remain reachable through config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    /// LR-space patch size; the HR patch is `scale` times larger.
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub augment: bool,
    /// Use the two-phase update order (primal step, then dual step) instead
    /// of one joint step.
    pub two_phase: bool,
    /// Validation PSNR cadence in iterations; 0 disables.
    pub val_every: u64,
    /// Checkpoint cadence in iterations; 0 emits only the final state.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 8,
            patch: 24,
            lr_start: 1e-4,
            lr_end: 1e-7,
            seed: 0,
            augment: true,
            two_phase: false,
            val_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// Adaptation settings: `unpaired_batch` (m) LR-only samples and
/// `paired_batch` (n) synthetic pairs per iteration, fixed learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub iterations: u64,
    pub unpaired_batch: usize,
    pub paired_batch: usize,
    pub lr: f64,
    pub patch: usize,
    pub seed: u64,
    pub augment: bool,
    pub val_every: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 1000,
            unpaired_batch: 5,
            paired_batch: 11,
            lr: 1e-4,
            patch: 24,
            seed: 0,
            augment: true,
            val_every: 100,
        }
    }
}

impl AdaptConfig {
    /// Unpaired data ratio m / (m + n).
    pub fn rho(&self) -> f64 {
        self.unpaired_batch as f64 / (self.unpaired_batch + self.paired_batch) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.unpaired_batch + self.paired_batch == 0 {
            return Err(DrnError::InvalidArgument(
                "adaptation needs m + n >= 1 samples per iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation; `total = primal + lambda * dual`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub primal: f64,
    pub dual: f64,
}

/// Sum of dual reconstruction L1 terms per the `dual_scales` setting:
/// `dual_recons[i]` is compared against `targets[i]`.
fn dual_term_sum<E: Element>(
    tape: &mut Tape<E>,
    dual_recons: &[Var],
    targets: &[Var],
    dual_scales: DualScales,
) -> Result<Var> {
    let indices: Vec<usize> = match dual_scales {
        DualScales::All => (0..dual_recons.len()).collect(),
        DualScales::Final => vec![dual_recons.len() - 1],
    };
    let mut sum = None;
    for i in indices {
        let term = tape.l1_loss(dual_recons[i], targets[i])?;
        sum = Some(match sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(sum.expect("at least one dual term"))
}

/// The closed-loop objective: primal L1 at every output scale plus
/// `lambda` times the dual reconstruction L1 terms.
///
/// `targets[k]` is the image at scale `2^k`: the input LR batch at the
/// bottom, bicubic-downscaled HR at intermediate scales, HR at the top.
/// Returns the scalar loss node plus the per-term breakdown. With
/// `lambda = 0` the dual terms are evaluated for reporting but are not part
/// of the loss graph, so they influence no gradient.
pub fn dual_regression_loss<E: Element>(
    tape: &mut Tape<E>,
    sr_outputs: &[Var],
    dual_recons: &[Var],
    targets: &[Var],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (total, breakdown, _) = dual_regression_loss_parts(tape, sr_outputs, dual_recons, targets, cfg)?;
    Ok((total, breakdown))
}

fn dual_regression_loss_parts<E: Element>(
    tape: &mut Tape<E>,
    sr_outputs: &[Var],
    dual_recons: &[Var],
    targets: &[Var],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown, Var)> {
    if targets.len() != sr_outputs.len() || dual_recons.len() + 1 != sr_outputs.len() {
        return Err(DrnError::InvalidArgument(format!(
            "misaligned loss lists: {} outputs, {} dual reconstructions, {} targets",
            sr_outputs.len(),
            dual_recons.len(),
            targets.len()
        )));
    }
    let mut primal_sum = None;
    for (out, tgt) in sr_outputs.iter().zip(targets.iter()) {
        let term = tape.l1_loss(*out, *tgt)?;
        primal_sum = Some(match primal_sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let primal_sum = primal_sum.expect("at least one scale");
    let dual_sum = dual_term_sum(tape, dual_recons, targets, cfg.dual_scales)?;

    let primal_value = tape.value(primal_sum).scalar().to_f64_val();
    let dual_value = tape.value(dual_sum).scalar().to_f64_val();
    let total = if cfg.lambda == 0.0 {
        primal_sum
    } else {
        let weighted = tape.mul_const(dual_sum, E::from_f64_val(cfg.lambda));
        tape.add(primal_sum, weighted)?
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).scalar().to_f64_val(),
        primal: primal_value,
        dual: dual_value,
    };
    Ok((total, breakdown, dual_sum))
}

/// Horizontal flip (x -> w-1-x).
pub fn hflip<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

/// Quarter turn clockwise: `out(y, x) = in(h-1-x, y)`.
pub fn rot90cw<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([n, c, w, h]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..w {
                for x in 0..h {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, h - 1 - x, y);
                }
            }
        }
    }
    out
}

fn crop<E: Element>(t: &Tensor<E>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<E> {
    let [n, c, _, w] = t.shape();
    let mut out = Tensor::zeros([n, c, ch, cw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ch {
                let src = &t.plane(ni, ci)[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw];
                out.plane_mut(ni, ci)[y * cw..(y + 1) * cw].copy_from_slice(src);
            }
        }
    }
    out
}

/// Augmentation draw: a horizontal flip plus a number of quarter turns,
/// applied identically to every member of the crop.
#[derive(Debug, Clone, Copy)]
struct Augment {
    flip: bool,
    quarter_turns: u8,
}

impl Augment {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Augment {
            flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4u8),
        }
    }

    fn apply<E: Element>(&self, t: &Tensor<E>) -> Tensor<E> {
        let mut out = if self.flip { hflip(t) } else { t.clone() };
        for _ in 0..self.quarter_turns {
            out = rot90cw(&out);
        }
        out
    }
}

/// Aligned random crop: `patch x patch` from the LR image and the
/// corresponding `scale`-times-larger HR crop at doubled offsets, with
/// optional augmentation applied identically to both.
pub fn sample_patch<E: Element>(
    pair: &ImagePair<E>,
    patch: usize,
    scale: usize,
    rng: &mut ChaCha8Rng,
    augment: bool,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let [_, _, lh, lw] = pair.lr.shape();
    if lh < patch || lw < patch {
        return Err(DrnError::InvalidArgument(format!(
            "image {} ({lh}x{lw}) is smaller than patch {patch}",
            pair.name
        )));
    }
    let y0 = rng.gen_range(0..=lh - patch);
    let x0 = rng.gen_range(0..=lw - patch);
    let lr = crop(&pair.lr, y0, x0, patch, patch);
    let hr = crop(&pair.hr, scale * y0, scale * x0, scale * patch, scale * patch);
    if augment {
        let aug = Augment::draw(rng);
        Ok((aug.apply(&lr), aug.apply(&hr)))
    } else {
        Ok((lr, hr))
    }
}

fn stack<E: Element>(items: &[Tensor<E>]) -> Tensor<E> {
    let [_, c, h, w] = items[0].shape();
    let mut out = Tensor::zeros([items.len(), c, h, w]);
    let stride = c * h * w;
    for (i, item) in items.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(item.data());
    }
    out
}

const SAMPLE_RETRIES: usize = 100;

/// Draws a batch of aligned patches, resampling images that are too small;
/// errors after 100 consecutive failures.
pub fn sample_batch<E: Element>(
    data: &PairedDataset<E>,
    batch: usize,
    patch: usize,
    scale: usize,
    rng: &mut ChaCha8Rng,
    augment: bool,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut attempts = 0;
        loop {
            let idx = rng.gen_range(0..data.pairs.len());
            match sample_patch(&data.pairs[idx], patch, scale, rng, augment) {
                Ok((lr, hr)) => {
                    lrs.push(lr);
                    hrs.push(hr);
                    break;
                }
                Err(e) => {
                    attempts += 1;
                    if attempts >= SAMPLE_RETRIES {
                        return Err(DrnError::Training(format!(
                            "no patch-sized image found after {SAMPLE_RETRIES} draws: {e}"
                        )));
                    }
                }
            }
        }
    }
    Ok((stack(&lrs), stack(&hrs)))
}

/// Draws a batch of LR-only patches from the unpaired set.
fn sample_unpaired_batch<E: Element>(
    data: &UnpairedDataset<E>,
    batch: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
    augment: bool,
) -> Result<Tensor<E>> {
    let mut lrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut attempts = 0;
        loop {
            let idx = rng.gen_range(0..data.images.len());
            let (name, img) = &data.images[idx];
            let [_, _, h, w] = img.shape();
            if h >= patch && w >= patch {
                let y0 = rng.gen_range(0..=h - patch);
                let x0 = rng.gen_range(0..=w - patch);
                let mut lr = crop(img, y0, x0, patch, patch);
                if augment {
                    lr = Augment::draw(rng).apply(&lr);
                }
                lrs.push(lr);
                break;
            }
            attempts += 1;
            if attempts >= SAMPLE_RETRIES {
                return Err(DrnError::Training(format!(
                    "no patch-sized unpaired image found after {SAMPLE_RETRIES} draws (last: {name})"
                )));
            }
        }
    }
    Ok(stack(&lrs))
}

/// Target pyramid `[lr, bicubic(hr, 2^k), ..., hr]` for the multi-scale loss.
pub fn build_targets<E: Element>(
    lr: &Tensor<E>,
    hr: &Tensor<E>,
    levels: usize,
) -> Result<Vec<Tensor<E>>> {
    let [_, _, lh, lw] = lr.shape();
    let mut targets = Vec::with_capacity(levels + 1);
    targets.push(lr.clone());
    for k in 1..levels {
        targets.push(bicubic_resize(hr, lh << k, lw << k)?);
    }
    targets.push(hr.clone());
    Ok(targets)
}

/// Receives per-iteration log lines and checkpoint cadence events.
pub trait TrainObserver<E: Element> {
    fn on_log(&mut self, _line: &str) {}
    fn on_checkpoint(&mut self, _iteration: u64, _model: &DrnModel<E>) -> Result<()> {
        Ok(())
    }
}

/// Observer that discards everything.
pub struct NullObserver;

impl<E: Element> TrainObserver<E> for NullObserver {}

#[derive(Debug)]
pub struct TrainReport {
    /// One record per iteration:
    /// `iter=<k> primal=<f> dual=<f> total=<f> lr=<f> [psnr=<f>]`
    pub log: Vec<String>,
    pub initial_total: f64,
    pub final_total: f64,
    /// `(iteration, validation PSNR)` samples.
    pub val: Vec<(u64, f64)>,
}

fn check_finite(bd: &LossBreakdown, iteration: u64) -> Result<()> {
    if bd.total.is_finite() {
        return Ok(());
    }
    let term = if !bd.primal.is_finite() {
        "primal"
    } else if !bd.dual.is_finite() {
        "dual"
    } else {
        "total"
    };
    Err(DrnError::Training(format!(
        "non-finite {term} loss at iteration {iteration}"
    )))
}

/// Mean final-scale PSNR over whole validation pairs (Y channel, shave = s).
pub fn validate_psnr<E: Element>(model: &DrnModel<E>, val: &PairedDataset<E>) -> Result<f64> {
    let protocol = EvalProtocol::for_scale(model.config.scale);
    let mut acc = 0.0;
    for pair in &val.pairs {
        let sr = model.infer(&pair.lr)?;
        acc += psnr(&sr, &pair.hr, &protocol)?;
    }
    Ok(acc / val.pairs.len() as f64)
}

/// Runs the paired branch of a pass: primal forward, dual forward, and the
/// closed-loop objective against the target pyramid. Also returns the raw
/// dual-sum node for the two-phase dual step.
fn paired_objective<E: Element>(
    pass: &mut ForwardPass<E>,
    lr_batch: &Tensor<E>,
    targets: &[Tensor<E>],
    loss_cfg: &LossConfig,
) -> Result<(Var, LossBreakdown, Var)> {
    let sr = pass.forward_primal(lr_batch)?;
    let recons = pass.forward_dual(&sr)?;
    let target_vars: Vec<Var> = targets
        .iter()
        .map(|t| pass.tape.constant(t.clone()))
        .collect();
    dual_regression_loss_parts(&mut pass.tape, &sr, &recons, &target_vars, loss_cfg)
}

/// Paired training: minimizes the closed-loop objective with Adam under a
/// cosine schedule, jointly over primal and dual parameters (or with the
/// two-phase update order when configured).
pub fn train_paired<E: Element>(
    model: &mut DrnModel<E>,
    data: &PairedDataset<E>,
    val: Option<&PairedDataset<E>>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    observer: &mut dyn TrainObserver<E>,
) -> Result<TrainReport> {
    if data.pairs.is_empty() {
        return Err(DrnError::Training("paired dataset is empty".into()));
    }
    if cfg.batch == 0 || cfg.iterations == 0 {
        return Err(DrnError::InvalidArgument(
            "batch and iterations must be >= 1".into(),
        ));
    }
    let levels = model.config.levels();
    let scale = model.config.scale;
    let schedule = CosineSchedule::new(cfg.lr_start, cfg.lr_end, cfg.iterations);
    let mut rng_batch = named_rng(cfg.seed, "train.batch");

    let all_ids: Vec<_> = model
        .primal_params()
        .iter()
        .chain(model.dual_params())
        .copied()
        .collect();
    let mut adam_joint = AdamState::new(&model.store, &all_ids);
    let mut adam_primal = AdamState::new(&model.store, model.primal_params());
    let mut adam_dual = AdamState::new(&model.store, model.dual_params());

    let mut report = TrainReport {
        log: Vec::new(),
        initial_total: f64::NAN,
        final_total: f64::NAN,
        val: Vec::new(),
    };

    for it in 0..cfg.iterations {
        let lr = schedule.lr(it)?;
        let (lr_b, hr_b) = sample_batch(data, cfg.batch, cfg.patch, scale, &mut rng_batch, cfg.augment)?;
        let targets = build_targets(&lr_b, &hr_b, levels)?;

        let breakdown = if cfg.two_phase {
            // Phase 1: primal parameters against the full objective.
            let mut pass = ForwardPass::new(model, TrackMode::PrimalOnly);
            let (total, breakdown, _) = paired_objective(&mut pass, &lr_b, &targets, loss_cfg)?;
            check_finite(&breakdown, it)?;
            pass.backward(total)?;
            let grads = pass.take_param_grads();
            drop(pass);
            adam_primal.step(&mut model.store, &grads, lr)?;

            // Phase 2: dual parameters against the weighted dual term alone.
            let mut pass = ForwardPass::new(model, TrackMode::DualOnly);
            let (_, _, dual_sum) = paired_objective(&mut pass, &lr_b, &targets, loss_cfg)?;
            let dual_loss = pass.tape.mul_const(dual_sum, E::from_f64_val(loss_cfg.lambda));
            pass.backward(dual_loss)?;
            let grads = pass.take_param_grads();
            drop(pass);
            adam_dual.step(&mut model.store, &grads, lr)?;
            breakdown
        } else {
            let mut pass = ForwardPass::new(model, TrackMode::All);
            let (total, breakdown, _) = paired_objective(&mut pass, &lr_b, &targets, loss_cfg)?;
            check_finite(&breakdown, it)?;
            pass.backward(total)?;
            let grads = pass.take_param_grads();
            drop(pass);
            adam_joint.step(&mut model.store, &grads, lr)?;
            breakdown
        };

        if it == 0 {
            report.initial_total = breakdown.total;
        }
        report.final_total = breakdown.total;

        let mut line = format!(
            "iter={it} primal={:.6} dual={:.6} total={:.6} lr={:.6e}",
            breakdown.primal, breakdown.dual, breakdown.total, lr
        );
        if cfg.val_every > 0 && (it + 1) % cfg.val_every == 0 {
            if let Some(val_set) = val {
                let v = validate_psnr(model, val_set)?;
                report.val.push((it + 1, v));
                line.push_str(&format!(" psnr={v:.4}"));
            }
        }
        observer.on_log(&line);
        report.log.push(line);

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(it + 1, model)?;
        }
    }
    Ok(report)
}

/// Two-phase adaptation on unpaired data: each iteration samples `m`
/// unpaired LR patches and `n` synthetic pairs; step 1 updates the primal
/// parameters on the indicator-gated objective (unpaired samples contribute
/// only through the dual reconstruction term against their own input), step 2
/// updates the dual parameters on the weighted dual term over the same batch.
pub fn adapt_unpaired<E: Element>(
    model: &mut DrnModel<E>,
    unpaired: &UnpairedDataset<E>,
    paired: &PairedDataset<E>,
    val: Option<&PairedDataset<E>>,
    cfg: &AdaptConfig,
    loss_cfg: &LossConfig,
    observer: &mut dyn TrainObserver<E>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (m, n) = (cfg.unpaired_batch, cfg.paired_batch);
    if m > 0 && unpaired.images.is_empty() {
        return Err(DrnError::Training("unpaired dataset is empty".into()));
    }
    if n > 0 && paired.pairs.is_empty() {
        return Err(DrnError::Training("paired dataset is empty".into()));
    }
    let levels = model.config.levels();
    let scale = model.config.scale;
    let mut rng_batch = named_rng(cfg.seed, "train.batch");
    let mut rng_unpaired = named_rng(cfg.seed, "adapt.unpaired");

    let mut adam_primal = AdamState::new(&model.store, model.primal_params());
    let mut adam_dual = AdamState::new(&model.store, model.dual_params());

    let mut report = TrainReport {
        log: Vec::new(),
        initial_total: f64::NAN,
        final_total: f64::NAN,
        val: Vec::new(),
    };

    for it in 0..cfg.iterations {
        let paired_batch = if n > 0 {
            let (lr_b, hr_b) =
                sample_batch(paired, n, cfg.patch, scale, &mut rng_batch, cfg.augment)?;
            let targets = build_targets(&lr_b, &hr_b, levels)?;
            Some((lr_b, targets))
        } else {
            None
        };
        let unpaired_batch = if m > 0 {
            Some(sample_unpaired_batch(
                unpaired,
                m,
                cfg.patch,
                &mut rng_unpaired,
                cfg.augment,
            )?)
        } else {
            None
        };

        // Phase 1: update the primal parameters on the indicator objective.
        let mut pass = ForwardPass::new(model, TrackMode::PrimalOnly);
        let (loss1, breakdown) =
            adaptation_objective(&mut pass, &paired_batch, &unpaired_batch, loss_cfg, m, n)?;
        check_finite(&breakdown, it)?;
        pass.backward(loss1)?;
        let grads = pass.take_param_grads();
        drop(pass);
        adam_primal.step(&mut model.store, &grads, cfg.lr)?;

        // Phase 2: update the dual parameters on the dual term alone.
        let mut pass = ForwardPass::new(model, TrackMode::DualOnly);
        let loss2 = adaptation_dual_objective(&mut pass, &paired_batch, &unpaired_batch, loss_cfg, m, n)?;
        pass.backward(loss2)?;
        let grads = pass.take_param_grads();
        drop(pass);
        adam_dual.step(&mut model.store, &grads, cfg.lr)?;

        if it == 0 {
            report.initial_total = breakdown.total;
        }
        report.final_total = breakdown.total;

        let mut line = format!(
            "iter={it} primal={:.6} dual={:.6} total={:.6} lr={:.6e}",
            breakdown.primal, breakdown.dual, breakdown.total, cfg.lr
        );
        if cfg.val_every > 0 && (it + 1) % cfg.val_every == 0 {
            if let Some(val_set) = val {
                let v = validate_psnr(model, val_set)?;
                report.val.push((it + 1, v));
                line.push_str(&format!(" psnr={v:.4}"));
            }
        }
        observer.on_log(&line);
        report.log.push(line);
    }
    Ok(report)
}

/// Dual term reachable for an unpaired batch: the bottom dual reconstruction
/// against the input itself. Intermediate-scale dual targets would need HR
/// and are skipped for unpaired samples; under `Final` with more than one
/// level no unpaired term exists.
fn unpaired_dual_term<E: Element>(
    pass: &mut ForwardPass<E>,
    lr_batch: &Tensor<E>,
    loss_cfg: &LossConfig,
) -> Result<Option<Var>> {
    let sr = pass.forward_primal(lr_batch)?;
    let recons = pass.forward_dual(&sr)?;
    if loss_cfg.dual_scales == DualScales::Final && recons.len() > 1 {
        return Ok(None);
    }
    let x = pass.tape.constant(lr_batch.clone());
    Ok(Some(pass.tape.l1_loss(recons[0], x)?))
}

/// Phase-1 objective: `(n * paired_objective + m * lambda * unpaired_dual) / (m + n)`.
fn adaptation_objective<E: Element>(
    pass: &mut ForwardPass<E>,
    paired_batch: &Option<(Tensor<E>, Vec<Tensor<E>>)>,
    unpaired_batch: &Option<Tensor<E>>,
    loss_cfg: &LossConfig,
    m: usize,
    n: usize,
) -> Result<(Var, LossBreakdown)> {
    let weight_paired = n as f64 / (m + n) as f64;
    let weight_unpaired = m as f64 / (m + n) as f64;

    let paired = match paired_batch {
        Some((lr_b, targets)) => Some(paired_objective(pass, lr_b, targets, loss_cfg)?),
        None => None,
    };
    let unpaired = match unpaired_batch {
        Some(lr_b) => unpaired_dual_term(pass, lr_b, loss_cfg)?,
        None => None,
    };

    match (paired, unpaired) {
        (Some((total_p, bd, _)), None) => Ok((total_p, bd)),
        (None, Some(dual_u)) => {
            let loss = pass.tape.mul_const(dual_u, E::from_f64_val(loss_cfg.lambda));
            let dual_value = pass.value(dual_u).scalar().to_f64_val();
            let bd = LossBreakdown {
                total: pass.value(loss).scalar().to_f64_val(),
                primal: 0.0,
                dual: dual_value,
            };
            Ok((loss, bd))
        }
        (None, None) => Err(DrnError::InvalidArgument(
            "adaptation needs m + n >= 1 samples per iteration".into(),
        )),
        (Some((total_p, bd_p, _)), Some(dual_u)) => {
            let wp = pass
                .tape
                .mul_const(total_p, E::from_f64_val(weight_paired));
            let du = pass
                .tape
                .mul_const(dual_u, E::from_f64_val(loss_cfg.lambda * weight_unpaired));
            let loss = pass.tape.add(wp, du)?;
            let dual_u_value = pass.value(dual_u).scalar().to_f64_val();
            let bd = LossBreakdown {
                total: pass.value(loss).scalar().to_f64_val(),
                primal: weight_paired * bd_p.primal,
                dual: weight_paired * bd_p.dual + weight_unpaired * dual_u_value,
            };
            Ok((loss, bd))
        }
    }
}

/// Phase-2 objective: `lambda * (n * paired_dual + m * unpaired_dual) / (m + n)`.
fn adaptation_dual_objective<E: Element>(
    pass: &mut ForwardPass<E>,
    paired_batch: &Option<(Tensor<E>, Vec<Tensor<E>>)>,
    unpaired_batch: &Option<Tensor<E>>,
    loss_cfg: &LossConfig,
    m: usize,
    n: usize,
) -> Result<Var> {
    let weight_paired = n as f64 / (m + n) as f64;
    let weight_unpaired = m as f64 / (m + n) as f64;

    let paired_dual = match paired_batch {
        Some((lr_b, targets)) => {
            let sr = pass.forward_primal(lr_b)?;
            let recons = pass.forward_dual(&sr)?;
            let target_vars: Vec<Var> = targets
                .iter()
                .map(|t| pass.tape.constant(t.clone()))
                .collect();
            Some(dual_term_sum(&mut pass.tape, &recons, &target_vars, loss_cfg.dual_scales)?)
        }
        None => None,
    };
    let unpaired_dual = match unpaired_batch {
        Some(lr_b) => unpaired_dual_term(pass, lr_b, loss_cfg)?,
        None => None,
    };

    match (paired_dual, unpaired_dual) {
        (Some(dp), None) => Ok(pass.tape.mul_const(dp, E::from_f64_val(loss_cfg.lambda))),
        (None, Some(du)) => Ok(pass.tape.mul_const(du, E::from_f64_val(loss_cfg.lambda))),
        (Some(dp), Some(du)) => {
            let wp = pass
                .tape
                .mul_const(dp, E::from_f64_val(loss_cfg.lambda * weight_paired));
            let wu = pass
                .tape
                .mul_const(du, E::from_f64_val(loss_cfg.lambda * weight_unpaired));
            pass.tape.add(wp, wu)
        }
        (None, None) => Err(DrnError::InvalidArgument(
            "adaptation needs m + n >= 1 samples per iteration".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{DegradationKernel, KernelKind};
    use crate::model::{DrnConfig, TrackMode};

    fn tiny_config() -> DrnConfig {
        DrnConfig {
            scale: 2,
            blocks: 2,
            channels: 8,
            reduction: 16,
            slope: 0.2,
        }
    }

    /// Smooth random HR images and the matching LR set under `kind`.
    fn toy_paired(count: usize, hr_size: usize, kind: KernelKind, seed: u64) -> PairedDataset<f32> {
        let kernel = DegradationKernel::new(kind, 2).unwrap();
        let mut pairs = Vec::new();
        for i in 0..count {
            let hr = synth_image(hr_size, named_rng(seed, &format!("toy.{i}")));
            let lr = kernel.apply(&hr).unwrap();
            pairs.push(ImagePair {
                name: format!("toy{i}.png"),
                lr,
                hr,
            });
        }
        PairedDataset {
            pairs,
            warnings: Vec::new(),
        }
    }

    /// Sum of a few random sinusoids per channel, clamped to [0, 1].
    fn synth_image(size: usize, mut rng: ChaCha8Rng) -> Tensor<f32> {
        let mut img = Tensor::zeros([1, 3, size, size]);
        for c in 0..3 {
            let (fx, fy) = (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
            let (px, py) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
            let base = rng.gen_range(0.2..0.8);
            for y in 0..size {
                for x in 0..size {
                    let v = base
                        + 0.3 * ((x as f32 * fx * 0.2) + px).sin()
                        + 0.3 * ((y as f32 * fy * 0.2) + py).cos();
                    *img.at_mut(0, c, y, x) = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    fn scalar_pair(tape: &mut Tape<f32>, pred: f32, count: usize) -> (Var, Var) {
        let p = tape.constant(Tensor::full([1, 1, 1, count], pred));
        let t = tape.constant(Tensor::zeros([1, 1, 1, count]));
        (p, t)
    }

    #[test]
    fn loss_breakdown_weighted_sum() {
        // primal terms 0.1 + 0.3, dual term 0.3, lambda 0.1 -> 0.43
        let mut tape = Tape::<f32>::new();
        let (o0, t0) = scalar_pair(&mut tape, 0.1, 4);
        let (o1, t1) = scalar_pair(&mut tape, 0.3, 4);
        let r0 = tape.constant(Tensor::full([1, 1, 1, 4], 0.3));
        let cfg = LossConfig {
            lambda: 0.1,
            dual_scales: DualScales::All,
        };
        let (total, bd) =
            dual_regression_loss(&mut tape, &[o0, o1], &[r0], &[t0, t1], &cfg).unwrap();
        assert!((bd.total - 0.43).abs() < 1e-6, "{bd:?}");
        assert!((bd.primal - 0.4).abs() < 1e-6);
        assert!((bd.dual - 0.3).abs() < 1e-6);
        let identity = bd.primal + cfg.lambda * bd.dual;
        assert!((bd.total - identity).abs() <= 1e-6 * bd.total.abs());
        assert_eq!(tape.value(total).scalar() as f64, bd.total);
    }

    #[test]
    fn loss_zero_when_everything_matches() {
        let mut tape = Tape::<f32>::new();
        let (o0, t0) = scalar_pair(&mut tape, 0.0, 3);
        let (o1, t1) = scalar_pair(&mut tape, 0.0, 3);
        let r0 = tape.constant(Tensor::zeros([1, 1, 1, 3]));
        let (_, bd) = dual_regression_loss(
            &mut tape,
            &[o0, o1],
            &[r0],
            &[t0, t1],
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(bd.total, 0.0);
    }

    #[test]
    fn lambda_zero_total_is_exactly_primal() {
        let mut tape = Tape::<f32>::new();
        let (o0, t0) = scalar_pair(&mut tape, 0.17, 5);
        let (o1, t1) = scalar_pair(&mut tape, 0.29, 5);
        let r0 = tape.constant(Tensor::full([1, 1, 1, 5], 0.5));
        let cfg = LossConfig {
            lambda: 0.0,
            dual_scales: DualScales::All,
        };
        let (total, bd) =
            dual_regression_loss(&mut tape, &[o0, o1], &[r0], &[t0, t1], &cfg).unwrap();
        assert_eq!(bd.total, bd.primal);
        assert_eq!(tape.value(total).scalar(), bd.primal as f32);
        assert!((bd.dual - 0.5).abs() < 1e-6, "dual still reported: {bd:?}");
    }

    #[test]
    fn misaligned_lists_error() {
        let mut tape = Tape::<f32>::new();
        let (o0, t0) = scalar_pair(&mut tape, 0.1, 2);
        let err = dual_regression_loss(&mut tape, &[o0], &[], &[t0, t0], &LossConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("misaligned"), "{err}");
    }

    #[test]
    fn sample_patch_coordinates_and_determinism() {
        let mut hr = Tensor::zeros([1, 3, 24, 24]);
        for c in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    *hr.at_mut(0, c, y, x) = (c * 10000 + y * 100 + x) as f32 / 40000.0;
                }
            }
        }
        let lr = nearest_for_test(&hr, 2);
        let pair = ImagePair {
            name: "p".into(),
            lr,
            hr,
        };
        let mut rng = named_rng(5, "test.patch");
        let (lp, hp) = sample_patch(&pair, 8, 2, &mut rng, false).unwrap();
        assert_eq!(lp.shape(), [1, 3, 8, 8]);
        assert_eq!(hp.shape(), [1, 3, 16, 16]);
        // Aligned crops: HR patch starts at doubled offsets.
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(lp.at(0, c, y, x), hp.at(0, c, 2 * y, 2 * x));
                }
            }
        }
        // Same stream state, same crop.
        let mut rng_a = named_rng(7, "test.patch2");
        let mut rng_b = named_rng(7, "test.patch2");
        let (la, _) = sample_patch(&pair, 8, 2, &mut rng_a, false).unwrap();
        let (lb, _) = sample_patch(&pair, 8, 2, &mut rng_b, false).unwrap();
        assert_eq!(la.data(), lb.data());

        let tiny_pair = ImagePair {
            name: "small".into(),
            lr: Tensor::<f32>::zeros([1, 3, 4, 4]),
            hr: Tensor::<f32>::zeros([1, 3, 8, 8]),
        };
        assert!(sample_patch(&tiny_pair, 8, 2, &mut rng, false).is_err());
    }

    fn nearest_for_test(hr: &Tensor<f32>, s: usize) -> Tensor<f32> {
        crate::degrade::nearest_downsample(hr, s).unwrap()
    }

    #[test]
    fn augmentation_keeps_nearest_relation_up_to_index_map() {
        let data = toy_paired(1, 16, KernelKind::Nearest, 3);
        let pair = &data.pairs[0];
        let s = 2;
        // Horizontal flip: LR'(i, j) = HR'(s*i, s*j + s - 1).
        let (lf, hf) = (hflip(&pair.lr), hflip(&pair.hr));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(lf.at(0, c, y, x), hf.at(0, c, s * y, s * x + s - 1));
                }
            }
        }
        // Quarter turn: same index map along the new row axis.
        let (lq, hq) = (rot90cw(&pair.lr), rot90cw(&pair.hr));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(lq.at(0, c, y, x), hq.at(0, c, s * y, s * x + s - 1));
                }
            }
        }
    }

    #[test]
    fn batch_sampler_retries_small_images() {
        let mut data = toy_paired(2, 32, KernelKind::Bicubic, 1);
        data.pairs[0].lr = Tensor::zeros([1, 3, 4, 4]);
        data.pairs[0].hr = Tensor::zeros([1, 3, 8, 8]);
        let mut rng = named_rng(0, "test.batch");
        // patch 12 fits only the second image; sampler must keep retrying.
        let (lr_b, hr_b) = sample_batch(&data, 4, 12, 2, &mut rng, true).unwrap();
        assert_eq!(lr_b.shape(), [4, 3, 12, 12]);
        assert_eq!(hr_b.shape(), [4, 3, 24, 24]);

        let all_small = PairedDataset {
            pairs: vec![ImagePair {
                name: "s".into(),
                lr: Tensor::<f32>::zeros([1, 3, 4, 4]),
                hr: Tensor::<f32>::zeros([1, 3, 8, 8]),
            }],
            warnings: Vec::new(),
        };
        assert!(sample_batch(&all_small, 1, 12, 2, &mut rng, false).is_err());
    }

    #[test]
    fn lambda_zero_primal_gradients_match_detached_duals() {
        let model = DrnModel::<f32>::build(tiny_config(), 21).unwrap();
        let data = toy_paired(2, 24, KernelKind::Bicubic, 4);
        let mut rng = named_rng(9, "test.grads");
        let (lr_b, hr_b) = sample_batch(&data, 2, 8, 2, &mut rng, false).unwrap();
        let targets = build_targets(&lr_b, &hr_b, 1).unwrap();

        // Full graph with lambda = 0.
        let mut pass_a = ForwardPass::new(&model, TrackMode::All);
        let cfg = LossConfig {
            lambda: 0.0,
            dual_scales: DualScales::All,
        };
        let (total_a, _, _) = paired_objective(&mut pass_a, &lr_b, &targets, &cfg).unwrap();
        pass_a.backward(total_a).unwrap();
        let grads_a = pass_a.take_param_grads();

        // Duals never forwarded.
        let mut pass_b = ForwardPass::new(&model, TrackMode::All);
        let sr = pass_b.forward_primal(&lr_b).unwrap();
        let tvars: Vec<Var> = targets
            .iter()
            .map(|t| pass_b.tape.constant(t.clone()))
            .collect();
        let mut primal_sum = None;
        for (o, t) in sr.iter().zip(&tvars) {
            let term = pass_b.tape.l1_loss(*o, *t).unwrap();
            primal_sum = Some(match primal_sum {
                None => term,
                Some(acc) => pass_b.tape.add(acc, term).unwrap(),
            });
        }
        pass_b.backward(primal_sum.unwrap()).unwrap();
        let grads_b = pass_b.take_param_grads();

        for (idx, id) in model.primal_params().iter().enumerate() {
            let _ = idx;
            let a = grads_a[id.0].as_ref().expect("primal grad");
            let b = grads_b[id.0].as_ref().expect("primal grad");
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "param {}", model.store.name(*id));
        }
        for id in model.dual_params() {
            assert!(
                grads_a[id.0].is_none(),
                "dual param {} got a gradient with lambda = 0",
                model.store.name(*id)
            );
        }
    }


    fn assert_all_params_live(cfg: DrnConfig, model_seed: u64, data_seed: u64, wake_attention: bool) {
        let mut model = DrnModel::<f32>::build(cfg, model_seed).unwrap();
        if wake_attention {
            // A zero-bias attention ReLU can be dead for a whole batch, which
            // says nothing about the loss wiring; pin its pre-activation into
            // the live region so the test checks routing, not the draw.
            for up in model.primal.ups.clone() {
                for rcab in up.rcabs {
                    for v in model.store.value_mut(rcab.att1.weight).data_mut() {
                        *v *= 0.01;
                    }
                    for v in model.store.value_mut(rcab.att1.bias).data_mut() {
                        *v = 1.0;
                    }
                }
            }
        }
        let data = toy_paired(4, 24, KernelKind::Bicubic, data_seed);
        let mut rng = named_rng(data_seed, "test.flow");
        let (lr_b, hr_b) = sample_batch(&data, 8, 8, 2, &mut rng, false).unwrap();
        let targets = build_targets(&lr_b, &hr_b, 1).unwrap();
        let mut pass = ForwardPass::new(&model, TrackMode::All);
        let (total, _, _) =
            paired_objective(&mut pass, &lr_b, &targets, &LossConfig::default()).unwrap();
        pass.backward(total).unwrap();
        let grads = pass.take_param_grads();
        for param in model.primal_params().iter().chain(model.dual_params()) {
            let g = grads[param.0]
                .as_ref()
                .unwrap_or_else(|| panic!("no grad for {}", model.store.name(*param)));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "all-zero gradient for {}",
                model.store.name(*param)
            );
        }
    }

    #[test]
    fn every_parameter_receives_gradient_from_full_loss() {
        for seed in 0..4 {
            assert_all_params_live(tiny_config(), seed, seed + 50, true);
        }
        // Stock initialization as well, on a seed whose attention draw is
        // live for the whole batch.
        assert_all_params_live(tiny_config(), 4, 104, false);
    }

    #[test]
    fn overfit_single_pair_halves_loss() {
        let mut model = DrnModel::<f32>::build(tiny_config(), 2).unwrap();
        let data = toy_paired(1, 48, KernelKind::Bicubic, 77);
        let cfg = TrainConfig {
            iterations: 500,
            batch: 1,
            patch: 24,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 5,
            augment: false,
            two_phase: false,
            val_every: 0,
            checkpoint_every: 0,
        };
        let report = train_paired(
            &mut model,
            &data,
            None,
            &cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert!(
            report.final_total < 0.1 * report.initial_total,
            "loss {} -> {}",
            report.initial_total,
            report.final_total
        );
    }

    #[test]
    fn log_lines_are_machine_parseable() {
        let mut model = DrnModel::<f32>::build(tiny_config(), 2).unwrap();
        let data = toy_paired(2, 24, KernelKind::Bicubic, 6);
        let cfg = TrainConfig {
            iterations: 3,
            batch: 2,
            patch: 8,
            val_every: 2,
            ..TrainConfig::default()
        };
        let report = train_paired(
            &mut model,
            &data,
            Some(&data),
            &cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(report.log.len(), 3);
        for (i, line) in report.log.iter().enumerate() {
            assert!(line.starts_with(&format!("iter={i} ")), "{line}");
            for key in ["primal=", "dual=", "total=", "lr="] {
                assert_eq!(
                    line.matches(key).count(),
                    1,
                    "key {key} missing in {line}"
                );
            }
            let fields: Vec<&str> = line.split(' ').collect();
            for f in &fields {
                assert!(f.contains('='), "field {f} in {line}");
            }
        }
        assert!(report.log[1].contains(" psnr="), "{:?}", report.log[1]);
        assert_eq!(report.val.len(), 1);
    }

    #[test]
    fn non_finite_loss_aborts_with_term_name() {
        let mut model = DrnModel::<f32>::build(tiny_config(), 2).unwrap();
        let head_w = model.primal.head.weight;
        model.store.value_mut(head_w).data_mut()[0] = f32::NAN;
        let data = toy_paired(1, 24, KernelKind::Bicubic, 6);
        let cfg = TrainConfig {
            iterations: 2,
            batch: 1,
            patch: 8,
            val_every: 0,
            ..TrainConfig::default()
        };
        let err = train_paired(
            &mut model,
            &data,
            None,
            &cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("primal"), "{msg}");
        assert!(msg.contains("iteration 0"), "{msg}");
    }

    #[test]
    fn rho_zero_adaptation_matches_two_phase_paired_training() {
        let data = toy_paired(3, 24, KernelKind::Bicubic, 10);
        let unpaired = UnpairedDataset::default();

        let mut model_a = DrnModel::<f32>::build(tiny_config(), 4).unwrap();
        let adapt_cfg = AdaptConfig {
            iterations: 4,
            unpaired_batch: 0,
            paired_batch: 3,
            lr: 1e-4,
            patch: 8,
            seed: 11,
            augment: true,
            val_every: 0,
        };
        assert_eq!(adapt_cfg.rho(), 0.0);
        adapt_unpaired(
            &mut model_a,
            &unpaired,
            &data,
            None,
            &adapt_cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap();

        let mut model_b = DrnModel::<f32>::build(tiny_config(), 4).unwrap();
        let train_cfg = TrainConfig {
            iterations: 4,
            batch: 3,
            patch: 8,
            lr_start: 1e-4,
            lr_end: 1e-4,
            seed: 11,
            augment: true,
            two_phase: true,
            val_every: 0,
            checkpoint_every: 0,
        };
        train_paired(
            &mut model_b,
            &data,
            None,
            &train_cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap();

        for (pa, pb) in model_a.store.iter().zip(model_b.store.iter()) {
            let bits_a: Vec<u32> = pa.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = pb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "param {}", pa.name);
        }
    }

    #[test]
    fn unpaired_only_batches_have_exactly_zero_primal_loss() {
        let mut model = DrnModel::<f32>::build(tiny_config(), 4).unwrap();
        let data = toy_paired(2, 24, KernelKind::Nearest, 12);
        let unpaired = UnpairedDataset {
            images: data
                .pairs
                .iter()
                .map(|p| (p.name.clone(), p.lr.clone()))
                .collect(),
        };
        let cfg = AdaptConfig {
            iterations: 3,
            unpaired_batch: 2,
            paired_batch: 0,
            lr: 1e-4,
            patch: 8,
            seed: 3,
            augment: false,
            val_every: 0,
        };
        let report = adapt_unpaired(
            &mut model,
            &unpaired,
            &PairedDataset::default(),
            None,
            &cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap();
        for line in &report.log {
            assert!(line.contains(" primal=0.000000 "), "{line}");
        }
    }

    #[test]
    fn adaptation_validates_batch_sizes() {
        let mut model = DrnModel::<f32>::build(tiny_config(), 4).unwrap();
        let cfg = AdaptConfig {
            unpaired_batch: 0,
            paired_batch: 0,
            ..AdaptConfig::default()
        };
        let err = adapt_unpaired(
            &mut model,
            &UnpairedDataset::default(),
            &PairedDataset::default(),
            None,
            &cfg,
            &LossConfig::default(),
            &mut NullObserver,
        )
        .unwrap_err();
        assert!(err.to_string().contains("m + n"), "{err}");
    }

    #[test]
    fn identical_seeds_give_bit_identical_trained_parameters() {
        let run = || {
            let mut model = DrnModel::<f32>::build(tiny_config(), 6).unwrap();
            let data = toy_paired(2, 24, KernelKind::Bicubic, 14);
            let cfg = TrainConfig {
                iterations: 5,
                batch: 2,
                patch: 8,
                seed: 9,
                val_every: 0,
                ..TrainConfig::default()
            };
            train_paired(
                &mut model,
                &data,
                None,
                &cfg,
                &LossConfig::default(),
                &mut NullObserver,
            )
            .unwrap();
            model
                .store
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }
}
