//! Identity losses. Every function here returns per-sample values `[n]`;
//! callers reduce.

use super::preg::PregEstimator;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// `-log softmax_k(W·p̃(x))` per sample.
pub fn identity_loss_ce<'t>(model: &Classifier, params: &[Var<'t>], x: Var<'t>, ks: &[usize]) -> Result<Var<'t>> {
    Ok(model.logits(params, x)?.log_softmax().gather(ks)?.neg())
}

/// `-p̃ᵀw_k + λ_reg·‖p̃ - p_reg‖²` per sample, with one anchor row per sample.
pub fn identity_loss_logit<'t>(
    model: &Classifier,
    params: &[Var<'t>],
    x: Var<'t>,
    ks: &[usize],
    lambda_reg: f64,
    p_reg: &Tensor,
) -> Result<Var<'t>> {
    let (logits, pt) = model.forward_full(params, x)?;
    let dot = logits.gather(ks)?.neg();
    if lambda_reg == 0.0 {
        return Ok(dot);
    }
    Ok(dot.add(feature_penalty(pt, p_reg)?.scale(lambda_reg))?)
}

fn feature_penalty<'t>(pt: Var<'t>, p_reg: &Tensor) -> Result<Var<'t>> {
    if pt.shape() != p_reg.shape() {
        return Err(Error::shape(
            "feature_penalty",
            format!("p̃ {:?} vs p_reg {:?}", pt.shape(), p_reg.shape()),
        ));
    }
    Ok(pt.sub(pt.tape().constant(p_reg.clone()))?.square().sum_last())
}

/// Base loss averaged across models under model augmentation.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseLoss {
    Ce,
    /// One anchor estimator per model, target first, then the augmented
    /// models in order.
    Logit {
        lambda_reg: f64,
        pregs: Vec<PregEstimator>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdentityLossSpec {
    Ce,
    Logit {
        lambda_reg: f64,
        preg: PregEstimator,
    },
    Aug {
        base: BaseLoss,
        gamma_t: f64,
        gamma_aug: f64,
        aug_models: Vec<Classifier>,
    },
    /// Logit terms from every model, one feature regularizer on the target.
    Lomma {
        lambda_reg: f64,
        preg: PregEstimator,
        gamma_t: f64,
        gamma_aug: f64,
        aug_models: Vec<Classifier>,
    },
}

/// `γ_t = γ_aug = 1/(N_aug+1)`; with no augmented models `γ_aug` is 0.
pub fn default_gammas(n_aug: usize) -> (f64, f64) {
    let g = 1.0 / (n_aug + 1) as f64;
    (g, if n_aug == 0 { 0.0 } else { g })
}

/// Models bound on one tape: target first, then augmented models.
pub struct BoundModels<'t> {
    pub params: Vec<Vec<Var<'t>>>,
}

/// Per-sample identity loss and its per-model parts.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub parts: Vec<Var<'t>>,
}

impl IdentityLossSpec {
    pub fn aug(base: BaseLoss, aug_models: Vec<Classifier>) -> Self {
        let (gamma_t, gamma_aug) = default_gammas(aug_models.len());
        IdentityLossSpec::Aug {
            base,
            gamma_t,
            gamma_aug,
            aug_models,
        }
    }

    pub fn lomma(lambda_reg: f64, preg: PregEstimator, aug_models: Vec<Classifier>) -> Self {
        let (gamma_t, gamma_aug) = default_gammas(aug_models.len());
        IdentityLossSpec::Lomma {
            lambda_reg,
            preg,
            gamma_t,
            gamma_aug,
            aug_models,
        }
    }

    pub fn aug_models(&self) -> &[Classifier] {
        match self {
            IdentityLossSpec::Aug { aug_models, .. } | IdentityLossSpec::Lomma { aug_models, .. } => aug_models,
            _ => &[],
        }
    }

    /// Short labels for the per-model parts, in [`LossTerms::parts`] order.
    pub fn part_names(&self, target: &Classifier) -> Vec<String> {
        let mut names = vec![format!("target_{}", target.arch_tag())];
        for (i, m) in self.aug_models().iter().enumerate() {
            names.push(format!("aug{}_{}", i + 1, m.arch_tag()));
        }
        if matches!(self, IdentityLossSpec::Lomma { lambda_reg, .. } if *lambda_reg != 0.0) {
            names.push("feature_reg".into());
        }
        names
    }

    /// Anchor estimators in the order anchors are drawn.
    fn pregs(&self) -> Vec<&PregEstimator> {
        match self {
            IdentityLossSpec::Ce => vec![],
            IdentityLossSpec::Logit { preg, .. } | IdentityLossSpec::Lomma { preg, .. } => vec![preg],
            IdentityLossSpec::Aug { base, .. } => match base {
                BaseLoss::Ce => vec![],
                BaseLoss::Logit { pregs, .. } => pregs.iter().collect(),
            },
        }
    }

    pub fn validate(&self, target: &Classifier) -> Result<()> {
        let k = target.num_classes();
        let check_lambda = |l: f64| {
            if l >= 0.0 && l.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("lambda_reg must be >= 0, got {l}")))
            }
        };
        match self {
            IdentityLossSpec::Ce => {}
            IdentityLossSpec::Logit { lambda_reg, .. } => check_lambda(*lambda_reg)?,
            IdentityLossSpec::Aug {
                base,
                gamma_t,
                gamma_aug,
                aug_models,
            } => {
                check_gammas(*gamma_t, *gamma_aug, aug_models.len())?;
                if let BaseLoss::Logit { lambda_reg, pregs } = base {
                    check_lambda(*lambda_reg)?;
                    if pregs.len() != aug_models.len() + 1 {
                        return Err(Error::invalid(format!(
                            "augmented logit loss needs {} anchor estimators (target + each model), got {}",
                            aug_models.len() + 1,
                            pregs.len()
                        )));
                    }
                }
            }
            IdentityLossSpec::Lomma {
                lambda_reg,
                gamma_t,
                gamma_aug,
                aug_models,
                ..
            } => {
                check_lambda(*lambda_reg)?;
                check_gammas(*gamma_t, *gamma_aug, aug_models.len())?;
            }
        }
        for m in self.aug_models() {
            if m.num_classes() != k {
                return Err(Error::invalid(format!(
                    "augmented model {} has {} classes, target has {k}",
                    m.arch_tag(),
                    m.num_classes()
                )));
            }
        }
        let models: Vec<&Classifier> = std::iter::once(target).chain(self.aug_models()).collect();
        for (i, p) in self.pregs().iter().enumerate() {
            let want = models[i].feat_dim() + 1;
            if p.dim() != want {
                return Err(Error::shape(
                    "identity_loss",
                    format!("p_reg has {} entries, model {} needs d+1 = {want}", p.dim(), models[i].arch_tag()),
                ));
            }
        }
        Ok(())
    }

    /// Draws one anchor row per slot for each regularized model.
    pub fn draw_anchors(&self, slots: usize, rng: &mut Rng) -> Vec<Tensor> {
        self.pregs().iter().map(|p| p.draw_rows(slots, rng)).collect()
    }

    /// Binds the target and augmented models' parameters as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, target: &Classifier) -> BoundModels<'t> {
        let params = std::iter::once(target)
            .chain(self.aug_models())
            .map(|m| m.bind(tape, false))
            .collect();
        BoundModels { params }
    }

    /// Per-sample loss on `x` toward classes `ks`. `anchors` holds one
    /// `[n, d+1]` tensor per regularized model, as from [`Self::draw_anchors`]
    /// expanded to samples.
    pub fn per_sample<'t>(
        &self,
        target: &Classifier,
        bound: &BoundModels<'t>,
        x: Var<'t>,
        ks: &[usize],
        anchors: &[Tensor],
    ) -> Result<LossTerms<'t>> {
        let need = self.pregs().len();
        if anchors.len() != need {
            return Err(Error::invalid(format!("expected {need} anchor tensors, got {}", anchors.len())));
        }
        let models: Vec<&Classifier> = std::iter::once(target).chain(self.aug_models()).collect();
        match self {
            IdentityLossSpec::Ce => {
                let l = identity_loss_ce(target, &bound.params[0], x, ks)?;
                Ok(LossTerms { total: l, parts: vec![l] })
            }
            IdentityLossSpec::Logit { lambda_reg, .. } => {
                let l = identity_loss_logit(target, &bound.params[0], x, ks, *lambda_reg, &anchors[0])?;
                Ok(LossTerms { total: l, parts: vec![l] })
            }
            IdentityLossSpec::Aug {
                base,
                gamma_t,
                gamma_aug,
                ..
            } => {
                let mut parts = Vec::with_capacity(models.len());
                for (i, m) in models.iter().enumerate() {
                    parts.push(match base {
                        BaseLoss::Ce => identity_loss_ce(m, &bound.params[i], x, ks)?,
                        BaseLoss::Logit { lambda_reg, .. } => {
                            identity_loss_logit(m, &bound.params[i], x, ks, *lambda_reg, &anchors[i])?
                        }
                    });
                }
                let total = weighted_sum(&parts, *gamma_t, *gamma_aug)?;
                Ok(LossTerms { total, parts })
            }
            IdentityLossSpec::Lomma {
                lambda_reg,
                gamma_t,
                gamma_aug,
                ..
            } => {
                let mut parts = Vec::with_capacity(models.len() + 1);
                let mut target_pt = None;
                for (i, m) in models.iter().enumerate() {
                    let (logits, pt) = m.forward_full(&bound.params[i], x)?;
                    if i == 0 {
                        target_pt = Some(pt);
                    }
                    parts.push(logits.gather(ks)?.neg());
                }
                let mut total = weighted_sum(&parts, *gamma_t, *gamma_aug)?;
                if *lambda_reg != 0.0 {
                    let reg = feature_penalty(target_pt.expect("target evaluated"), &anchors[0])?.scale(*lambda_reg);
                    total = total.add(reg)?;
                    parts.push(reg);
                }
                Ok(LossTerms { total, parts })
            }
        }
    }

    /// Inference-only per-sample loss values.
    pub fn evaluate(&self, target: &Classifier, x: &Tensor, ks: &[usize], anchors: &[Tensor]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, target);
        let terms = self.per_sample(target, &bound, tape.constant(x.clone()), ks, anchors)?;
        let v = terms.total.value();
        Ok(v.data().to_vec())
    }
}

fn check_gammas(gamma_t: f64, gamma_aug: f64, n_aug: usize) -> Result<()> {
    if !(gamma_t > 0.0 && gamma_t.is_finite()) {
        return Err(Error::invalid(format!("gamma_t must be > 0, got {gamma_t}")));
    }
    if !(gamma_aug >= 0.0 && gamma_aug.is_finite()) {
        return Err(Error::invalid(format!("gamma_aug must be >= 0, got {gamma_aug}")));
    }
    if n_aug == 0 && gamma_aug > 0.0 {
        return Err(Error::invalid("gamma_aug > 0 needs at least one augmented model"));
    }
    Ok(())
}

fn weighted_sum<'t>(parts: &[Var<'t>], gamma_t: f64, gamma_aug: f64) -> Result<Var<'t>> {
    let mut total = if gamma_t == 1.0 { parts[0] } else { parts[0].scale(gamma_t) };
    for p in &parts[1..] {
        total = total.add(p.scale(gamma_aug))?;
    }
    Ok(total)
}
