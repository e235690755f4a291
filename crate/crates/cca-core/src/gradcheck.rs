//! Finite-difference verification of the full model gradient.
//!
//! Builds a model from a seed, forms a small deterministic triplet batch of
//! random images, and compares the tape gradient of the batch loss against
//! central differences for every parameter coordinate. An optional fault
//! name flips the sign of that parameter's analytic gradient, which must
//! make the check fail and point at the culprit.

use rand::Rng;

use crate::config::{ConditionId, EncoderConfig};
use crate::error::Result;
use crate::model::CcaModel;
use crate::rng::{sub_rng, Domain};
use crate::tensor::{Precision, Tensor};
use crate::triplet::triplet_loss;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Worst parameters by their max coordinate error, descending.
    pub worst: Vec<(String, f64)>,
    pub params_checked: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "gradcheck: {} (max relative error {:.3e}, tolerance {:.1e}, {} parameters, {} coordinates)\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.params_checked,
            self.coords_checked,
        );
        for (name, err) in &self.worst {
            out.push_str(&format!("  {name}: {err:.3e}\n"));
        }
        out
    }
}

/// Step size and tolerance per storage precision.
///
/// At the training init the pre-normalization embedding is ~1e-4 long, so
/// the final normalize has curvature ~1e8 and central differences at h=1e-5
/// carry ~1e-2 truncation error; h=1e-8 brings it below 1e-6 while f64
/// round-off noise stays near 1e-10.
pub fn fd_settings(precision: Precision) -> (f64, f64) {
    match precision {
        Precision::F64 => (1e-8, 1e-5),
        Precision::F32 => (1e-3, 1e-3),
    }
}

/// Weight std of the check point. f64 differences resolve the gradient at
/// the true training init; f32 value rounding (~1e-7 per op) cannot, at any
/// step size, because of the normalize curvature there, so the f32 check
/// runs at a generic well-conditioned point instead.
fn check_point_std(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 0.02,
        Precision::F32 => 0.5,
    }
}

struct BatchMember {
    image: Tensor,
    condition: ConditionId,
}

struct TripletImages {
    anchor: BatchMember,
    positive: Tensor,
    negative: Tensor,
}

fn make_batch(config: &EncoderConfig, seed: u64, triplets: usize) -> Vec<TripletImages> {
    let mut rng = sub_rng(seed, Domain::Aux, 7);
    let image = |rng: &mut rand_chacha::ChaCha8Rng| {
        let n = config.channels * config.image_size * config.image_size;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(
            vec![config.channels, config.image_size, config.image_size],
            data,
        )
        .expect("image dims agree")
    };
    (0..triplets)
        .map(|i| TripletImages {
            anchor: BatchMember {
                image: image(&mut rng),
                condition: ConditionId((i % config.num_conditions) as u32),
            },
            positive: image(&mut rng),
            negative: image(&mut rng),
        })
        .collect()
}

fn batch_loss(model: &CcaModel, batch: &[TripletImages], margin: f64) -> Result<(f64, Option<crate::nn::ParamGrads>, bool)> {
    batch_loss_inner(model, batch, margin, false)
}

fn batch_loss_inner(
    model: &CcaModel,
    batch: &[TripletImages],
    margin: f64,
    with_grads: bool,
) -> Result<(f64, Option<crate::nn::ParamGrads>, bool)> {
    let mut f = model.begin();
    let mut total = None;
    for t in batch {
        let a = model.embed_with_condition(&mut f, &t.anchor.image, t.anchor.condition, 1)?;
        let p = model.embed_with_condition(&mut f, &t.positive, t.anchor.condition, 1)?;
        let n = model.embed_with_condition(&mut f, &t.negative, t.anchor.condition, 1)?;
        let loss = triplet_loss(&mut f.tape, a.embedding, p.embedding, n.embedding, margin)?;
        total = Some(match total {
            None => loss,
            Some(acc) => f.tape.add(acc, loss)?,
        });
    }
    let total = total.expect("batch is non-empty");
    let mean = f.tape.scale(total, 1.0 / batch.len() as f64)?;
    let value = f.tape.data(mean)[0];
    let any_active = value > 0.0;
    if with_grads {
        f.tape.backward(mean)?;
        let grads = f.collect_grads(model);
        Ok((value, Some(grads), any_active))
    } else {
        Ok((value, None, any_active))
    }
}

/// Check every parameter coordinate of a freshly initialized model.
pub fn gradcheck_model(
    config: &EncoderConfig,
    margin: f64,
    seed: u64,
    fault: Option<&str>,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut init_rng = sub_rng(seed, Domain::Init, 0);
    let mut model = CcaModel::init_with_std(*config, &mut init_rng, check_point_std(config.precision))?;
    let triplets = (2 * config.num_conditions.min(2)).max(2);
    let batch = make_batch(config, seed, triplets);

    let (h, tolerance) = fd_settings(config.precision);

    let (_, grads, any_active) = batch_loss_inner(&model, &batch, margin, true)?;
    let mut grads = grads.expect("gradients requested");
    debug_assert!(any_active, "batch loss should have at least one active hinge");

    if let Some(name) = fault {
        if let Some(id) = model.store.id_of(name) {
            if let Some(g) = grads.get(id) {
                let flipped: Vec<f64> = g.iter().map(|x| -x).collect();
                grads.set(id, flipped);
            }
        }
    }

    let param_ids: Vec<(crate::nn::ParamId, String, usize)> = model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.tensor.numel()))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut per_param: Vec<(String, f64)> = Vec::with_capacity(param_ids.len());
    let mut coords = 0usize;
    for (id, name, numel) in &param_ids {
        let analytic = grads.get(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; *numel]);
        let mut worst = 0.0f64;
        for j in 0..*numel {
            let original = model.store.get(*id).tensor.data()[j];
            model.store.get_mut(*id).tensor.data_mut()[j] = original + h;
            let (plus, _, _) = batch_loss(&model, &batch, margin)?;
            model.store.get_mut(*id).tensor.data_mut()[j] = original - h;
            let (minus, _, _) = batch_loss(&model, &batch, margin)?;
            model.store.get_mut(*id).tensor.data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
            coords += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name.clone(), worst));
    }
    per_param.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    per_param.truncate(5);

    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
        worst: per_param,
        params_checked: param_ids.len(),
        coords_checked: coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EmbedType;

    #[test]
    fn tiny_type2_gradient_is_clean() {
        let report = gradcheck_model(&EncoderConfig::tiny(EmbedType::Type2), 0.2, 42, None).unwrap();
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn tiny_type1_gradient_is_clean() {
        let report = gradcheck_model(&EncoderConfig::tiny(EmbedType::Type1), 0.2, 42, None).unwrap();
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn tiny_mask_baseline_gradient_is_clean() {
        let report =
            gradcheck_model(&EncoderConfig::tiny(EmbedType::MaskBaseline), 0.2, 42, None).unwrap();
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn tiny_unconditioned_gradient_is_clean() {
        let report =
            gradcheck_model(&EncoderConfig::tiny(EmbedType::Unconditioned), 0.2, 42, None).unwrap();
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn injected_sign_flip_is_caught_and_named() {
        let report = gradcheck_model(
            &EncoderConfig::tiny(EmbedType::Type2),
            0.2,
            42,
            Some("head.attn.wv"),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst[0].0, "head.attn.wv", "{}", report.render());
    }
}
