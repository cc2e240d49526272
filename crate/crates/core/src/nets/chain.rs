use super::model::Wiring;
use super::spec::ChainSpec;
use super::{Bound, Cursor};
use crate::error::{dim_err, LaxError, Result};
use crate::lax::{LatentBus, LaxSlot, NormPlacement};
use crate::layers::LatentRecord;
use crate::numerics::{Init, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub spec: ChainSpec,
    pub slots: Vec<LaxSlot>,
}

pub fn build_chain(spec: &ChainSpec) -> Result<Chain> {
    if spec.width == 0 || spec.depth == 0 {
        return Err(LaxError::Config("chain needs width and depth >= 1".into()));
    }
    let init = Init::new(spec.seed);
    let mut wiring = Wiring::new(&spec.lax, NormPlacement::Latent, &init);
    let slots = (0..spec.depth)
        .map(|i| {
            let id = format!("layers.{i}");
            let layer = spec.layer.build(&init, &id, spec.width, spec.width)?;
            wiring.slot(id, layer, "chain")
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Chain {
        spec: spec.clone(),
        slots,
    })
}

impl Chain {
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Bound],
        x: Var,
        mut trace: Option<&mut Vec<LatentRecord>>,
    ) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.spec.width {
            return dim_err(format!(
                "chain expects [batch, {}], got {:?}",
                self.spec.width,
                tape.shape(x)
            ));
        }
        let mut cur = Cursor::new(vars);
        let mut bus = LatentBus::new();
        let mut h = x;
        for (i, s) in self.slots.iter().enumerate() {
            if i > 0 {
                h = tape.activation(h, self.spec.activation)?;
            }
            h = s.forward(tape, cur.slot()?, h, &mut bus, trace.as_deref_mut())?;
        }
        cur.finish()?;
        Ok(h)
    }
}
