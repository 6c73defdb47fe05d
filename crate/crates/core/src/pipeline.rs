//! Two-phase experiment driver: prior pretraining, flow training, stack
//! inference and scoring on held-out sections.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, hvg_select_stack, make_split, MetricsReport, Role, Split};
use crate::flow::{infer_stack, train_fm, FlowModel, TimeGrid, TrainReport};
use crate::numerics::Tensor2;
use crate::priors::{pretrain_prior, PretrainReport, PriorKind, PriorNet, StartPrior};
use crate::spatial_model::SlideStack;

/// Independent seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

pub const STAGE_PRIOR: u64 = 1;
pub const STAGE_INIT: u64 = 2;
pub const STAGE_TRAIN: u64 = 3;
pub const STAGE_INFER: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSections {
    pub split: Split,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSections {
    pub fn new(split: Split) -> Self {
        Self {
            train: split.zs(Role::Train),
            val: split.zs(Role::Validation),
            test: split.zs(Role::Test),
            split,
        }
    }

    /// Train and validation sections in stack order.
    pub fn labeled(&self) -> Vec<usize> {
        let mut zs: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        zs.sort_unstable();
        zs
    }
}

/// Start distribution for a run, borrowing the pretrained net if any.
pub fn start_prior<'a>(cfg: &RunConfig, net: Option<&'a PriorNet>) -> Result<StartPrior<'a>> {
    Ok(match cfg.prior_kind() {
        PriorKind::LearnedZinb => StartPrior::Learned(
            net.ok_or_else(|| Error::Misuse("the learned prior needs a pretrained prior checkpoint".into()))?,
        ),
        PriorKind::FixedZinb => StartPrior::Fixed(cfg.fixed),
        PriorKind::SpatialEmpirical => StartPrior::SpatialEmpirical(cfg.spatial, cfg.fixed),
    })
}

/// Phase A on the labeled sections of `stack`; the returned net is frozen.
pub fn pretrain_phase(cfg: &RunConfig, stack: &SlideStack, sections: &SplitSections, seed: u64) -> Result<(PriorNet, PretrainReport)> {
    let mut net = PriorNet::new(stack.genes(), stack.emb_dim(), &cfg.prior, stack.frame(), stage_seed(seed, STAGE_PRIOR))?;
    let report = pretrain_prior(stack, &sections.train, &sections.val, &mut net, &cfg.prior, stage_seed(seed, STAGE_PRIOR))?;
    Ok((net, report))
}

/// Phase B. The model trains on the labeled sections taken out as their
/// own contiguous stack, so each training slide sees labeled neighbors
/// on both sides.
pub fn train_phase(
    cfg: &RunConfig,
    stack: &SlideStack,
    sections: &SplitSections,
    net: Option<&PriorNet>,
    seed: u64,
) -> Result<(FlowModel, TrainReport)> {
    let labeled = sections.labeled();
    let ctx = stack.sub_stack(&labeled)?;
    let reindex = |zs: &[usize]| -> Vec<usize> {
        zs.iter()
            .map(|z| labeled.iter().position(|l| l == z).expect("labeled section") + 1)
            .collect()
    };
    let train_zs = reindex(&sections.train);
    let val_zs = reindex(&sections.val);
    let mut model = FlowModel::new(&cfg.model_config(), &ctx, &train_zs, stage_seed(seed, STAGE_INIT))?;
    let prior = start_prior(cfg, net)?;
    let report = train_fm(&mut model, &ctx, &train_zs, &val_zs, &prior, &cfg.train, stage_seed(seed, STAGE_TRAIN))?;
    Ok((model, report))
}

pub fn infer_phase(
    cfg: &RunConfig,
    model: &FlowModel,
    stack: &SlideStack,
    targets: &[usize],
    net: Option<&PriorNet>,
    seed: u64,
) -> Result<BTreeMap<usize, Tensor2>> {
    let prior = start_prior(cfg, net)?;
    let grid = TimeGrid::uniform(cfg.infer.steps)?;
    infer_stack(model, stack, targets, &prior, &grid, stage_seed(seed, STAGE_INFER))
}

/// Scores predictions against `truth`, pooling spots of all sections.
/// `panel` restricts the genes; `None` keeps all.
pub fn score(truth: &SlideStack, preds: &BTreeMap<usize, Tensor2>, panel: Option<&[usize]>) -> Result<MetricsReport> {
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (z, pred) in preds {
        let y = truth
            .section(*z)
            .and_then(|s| s.expression.as_ref())
            .ok_or_else(|| Error::Validation(format!("no ground truth for section z={z}")))?;
        let (pz, yz) = match panel {
            Some(g) => (pred.select_cols(g), y.select_cols(g)),
            None => (pred.clone(), y.clone()),
        };
        p.push(pz);
        t.push(yz);
    }
    if p.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let pr: Vec<&Tensor2> = p.iter().collect();
    let tr: Vec<&Tensor2> = t.iter().collect();
    compute_metrics(&Tensor2::vstack(&pr)?, &Tensor2::vstack(&tr)?)
}

/// Evaluation gene panel for a run.
pub fn eval_panel(cfg: &RunConfig, stack: &SlideStack, sections: &SplitSections) -> Result<Option<Vec<usize>>> {
    if cfg.eval.hvg == 0 || cfg.eval.hvg >= stack.genes() {
        return Ok(None);
    }
    Ok(Some(hvg_select_stack(stack, &sections.train, cfg.eval.hvg)?))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub sections: SplitSections,
    pub prior: Option<(PriorNet, PretrainReport)>,
    pub model: FlowModel,
    pub train: TrainReport,
    pub predictions: BTreeMap<usize, Tensor2>,
    pub metrics: MetricsReport,
    pub wall_secs: f64,
}

/// Full run on a stack with complete ground truth: split, mask the test
/// sections, pretrain (when the learned prior is used), train, infer and
/// score.
pub fn run_pipeline(cfg: &RunConfig, truth: &SlideStack, seed: u64) -> Result<PipelineOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let sections = SplitSections::new(make_split(truth.z_count(), cfg.run.split, seed)?);
    let stack = truth.masked(&sections.test);
    let prior = match cfg.prior_kind() {
        PriorKind::LearnedZinb => Some(pretrain_phase(cfg, &stack, &sections, seed)?),
        _ => None,
    };
    let net = prior.as_ref().map(|p| &p.0);
    let (model, train) = train_phase(cfg, &stack, &sections, net, seed)?;
    let predictions = infer_phase(cfg, &model, &stack, &sections.test, net, seed)?;
    let panel = eval_panel(cfg, truth, &sections)?;
    let metrics = score(truth, &predictions, panel.as_deref())?;
    Ok(PipelineOutput {
        sections,
        prior,
        model,
        train,
        predictions,
        metrics,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}
