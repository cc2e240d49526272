use super::model::{frozen_err, Wiring};
use super::spec::LoraSpec;
use super::Model;
use crate::error::{LaxError, Result};
use crate::lax::NormPlacement;
use crate::layers::{Linear, LoraAdapter};
use crate::numerics::Init;

const ROLES: [&str; 7] = ["q", "k", "v", "qkv", "o", "up", "down"];

/// Attaches adapters to the `targets` of a dense model and freezes every
/// other parameter. Adapters of one role form the stream `lora:<role>`.
pub fn wrap_lora(model: &Model, spec: &LoraSpec) -> Result<Model> {
    if model.lora.is_some() {
        return Err(LaxError::Config("model is already wrapped".into()));
    }
    if spec.rank == 0 {
        return Err(LaxError::Config("adapter rank must be >= 1".into()));
    }
    if let Some(bad) = spec.targets.iter().find(|t| !ROLES.contains(&t.as_str())) {
        return Err(LaxError::Config(format!("unknown adapter target {bad:?}")));
    }
    let mut m = model.clone();
    if let Some(b) = m.blocks.first_mut() {
        let present: Vec<&str> = b.roles_mut().into_iter().map(|(r, _)| r).collect();
        if let Some(missing) = spec.targets.iter().find(|t| !present.contains(&t.as_str())) {
            return Err(LaxError::Config(format!(
                "adapter target {missing:?} does not exist with this attention layout"
            )));
        }
    }
    let init = Init::new(spec.seed);
    let alpha = spec.alpha.unwrap_or_else(|| LoraAdapter::default_alpha(spec.rank));
    let mut wiring = Wiring::new(&spec.lax, NormPlacement::Off, &init);
    m.frozen = true;
    m.lora = Some(spec.clone());
    if let super::Embed::Patches { proj, .. } = &mut m.embed {
        proj.layer.set_frozen(true);
    }
    m.head.layer.set_frozen(true);
    for block in &mut m.blocks {
        for (role, slot) in block.roles_mut() {
            let Linear::Dense(dense) = &mut slot.layer else {
                return Err(frozen_err(&slot.id));
            };
            dense.frozen = true;
            slot.stream = None;
            slot.inter = None;
            slot.intra.clear();
            if spec.targets.iter().any(|t| t == role) {
                if dense.bias.is_some() {
                    return Err(LaxError::Config(format!("{}: adapters do not carry a bias", slot.id)));
                }
                let w0 = dense.w.clone();
                let adapter = LoraAdapter::init(&init, &format!("{}.lora", slot.id), w0, spec.rank, alpha);
                *slot = wiring.slot(slot.id.clone(), Linear::Lora(adapter), &format!("lora:{role}"))?;
            }
        }
    }
    Ok(m)
}
